//! Federated objectives `f = (1/N) Σ f_i`.

pub mod idx;
pub mod mlp;
pub mod partition;
pub mod quadratic;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

pub use idx::{load_idx, Dataset};
pub use mlp::{Mlp, MlpClient};
pub use partition::shard_partition;
pub use quadratic::QuadraticClient;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{add_assign, norm_sq, scale, ParamVector};
use crate::rng::{Purpose, RngStream, SERVER};

/// One client's local objective `f_i`.
pub trait ClientObjective: Send + Sync {
    fn dim(&self) -> usize;

    fn loss(&self, x: &[f64]) -> Result<f64>;

    fn full_gradient(&self, x: &[f64]) -> Result<ParamVector>;

    /// Unbiased estimate of [`full_gradient`](Self::full_gradient) drawn from `rng`.
    fn stochastic_gradient(
        &self,
        x: &[f64],
        batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<ParamVector>;

    /// Number of local samples for finite-sum objectives.
    fn sample_count(&self) -> Option<usize> {
        None
    }

    /// Mean loss and gradient over the given local sample positions.
    fn subset_loss_and_gradient(&self, _x: &[f64], _local: &[usize]) -> Result<(f64, ParamVector)> {
        Err(Error::Unsupported(
            "objective is not a finite sum over samples".into(),
        ))
    }

    /// Lipschitz constant of the gradient, when known exactly.
    fn smoothness(&self) -> Option<f64> {
        None
    }
}

/// Closed-form facts about a problem (available for quadratics).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    pub optimum: ParamVector,
    pub min_value: f64,
    pub smoothness: f64,
    /// `f(x⁰) − min f`
    pub delta: f64,
    pub sigma: f64,
}

#[derive(Clone)]
pub struct TestSet {
    pub mlp: Arc<Mlp>,
    pub data: Arc<Dataset>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_accuracy: Option<f64>,
    /// Samples used for the loss/gradient estimate; `None` means exact.
    pub eval_samples: Option<usize>,
}

#[derive(Clone)]
pub struct FederatedProblem {
    clients: Vec<Arc<dyn ClientObjective>>,
    dim: usize,
    x0: ParamVector,
    constants: Option<ProblemConstants>,
    test: Option<TestSet>,
    group_sizes: Option<Vec<usize>>,
}

impl std::fmt::Debug for FederatedProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FederatedProblem")
            .field("clients", &self.clients.len())
            .field("dim", &self.dim)
            .field("constants", &self.constants.is_some())
            .field("test", &self.test.is_some())
            .finish()
    }
}

impl FederatedProblem {
    pub fn new(clients: Vec<Arc<dyn ClientObjective>>, x0: ParamVector) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::invalid("clients", "need at least one client"));
        }
        let dim = x0.len();
        for c in &clients {
            check_dim(dim, c.dim())?;
        }
        Ok(Self {
            clients,
            dim,
            x0,
            constants: None,
            test: None,
            group_sizes: None,
        })
    }

    pub fn with_constants(mut self, constants: ProblemConstants) -> Self {
        self.constants = Some(constants);
        self
    }

    pub fn with_test_set(mut self, test: TestSet) -> Self {
        self.test = Some(test);
        self
    }

    /// Natural parameter grouping (layer sizes) for grouped-sign compression.
    pub fn with_group_sizes(mut self, sizes: Vec<usize>) -> Self {
        self.group_sizes = Some(sizes);
        self
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn client(&self, i: usize) -> &dyn ClientObjective {
        self.clients[i].as_ref()
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn constants(&self) -> Option<&ProblemConstants> {
        self.constants.as_ref()
    }

    pub fn test_set(&self) -> Option<&TestSet> {
        self.test.as_ref()
    }

    pub fn group_sizes(&self) -> Option<&[usize]> {
        self.group_sizes.as_deref()
    }

    /// Largest client smoothness constant, if every client reports one.
    pub fn smoothness(&self) -> Option<f64> {
        self.clients
            .iter()
            .map(|c| c.smoothness())
            .try_fold(0.0f64, |acc, l| l.map(|l| acc.max(l)))
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let mut total = 0.0;
        for c in &self.clients {
            total += c.loss(x)?;
        }
        Ok(total / self.clients.len() as f64)
    }

    /// `∇f(x) = (1/N) Σ ∇f_i(x)`, summed in client order.
    pub fn gradient(&self, x: &[f64]) -> Result<ParamVector> {
        check_dim(self.dim, x.len())?;
        let mut g = vec![0.0; self.dim];
        for c in &self.clients {
            add_assign(&mut g, &c.full_gradient(x)?);
        }
        scale(&mut g, 1.0 / self.clients.len() as f64);
        Ok(g)
    }

    /// Train loss, `‖∇f(x)‖²` and test accuracy at `x`.
    ///
    /// With `subsample = Some(m)` and finite-sum clients, loss and gradient
    /// are estimated from `m` draws of (client uniformly, then one of its
    /// samples uniformly), which is unbiased for `f` and `∇f`. Otherwise
    /// both are exact.
    pub fn evaluate(
        &self,
        x: &[f64],
        subsample: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<Evaluation> {
        check_dim(self.dim, x.len())?;
        let finite_sum = self.clients.iter().all(|c| c.sample_count().is_some());
        let (train_loss, grad, eval_samples) = match subsample {
            Some(m) if finite_sum && m > 0 => {
                let mut per_client: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for _ in 0..m {
                    let i = rng.random_range(0..self.clients.len());
                    let n = self.clients[i].sample_count().unwrap();
                    per_client.entry(i).or_default().push(rng.random_range(0..n));
                }
                let mut loss = 0.0;
                let mut grad = vec![0.0; self.dim];
                for (i, local) in &per_client {
                    let (l, g) = self.clients[*i].subset_loss_and_gradient(x, local)?;
                    let w = local.len() as f64 / m as f64;
                    loss += w * l;
                    crate::linalg::axpy(w, &g, &mut grad);
                }
                (loss, grad, Some(m))
            }
            _ => (self.loss(x)?, self.gradient(x)?, None),
        };
        let test_accuracy = match &self.test {
            Some(t) => Some(t.mlp.accuracy(x, &t.data)?),
            None => None,
        };
        Ok(Evaluation {
            train_loss,
            grad_norm_sq: norm_sq(&grad),
            test_accuracy,
            eval_samples,
        })
    }
}

/// Builds a quadratic problem from explicit curvatures and centers, with
/// `x⁰ = 0`.
pub fn quadratic_from_parts(
    curvatures: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
    sigma: f64,
) -> Result<FederatedProblem> {
    if curvatures.is_empty() || curvatures.len() != centers.len() {
        return Err(Error::invalid(
            "clients",
            "need matching nonempty curvature and center lists",
        ));
    }
    let d = curvatures[0].len();
    let clients: Vec<QuadraticClient> = curvatures
        .into_iter()
        .zip(centers)
        .map(|(a, b)| QuadraticClient::new(a, b, sigma))
        .collect::<Result<_>>()?;
    for c in &clients {
        check_dim(d, c.dim())?;
    }
    // x* solves Σ_i a_i ⊙ (x − b_i) = 0 coordinatewise
    let mut num = vec![0.0; d];
    let mut den = vec![0.0; d];
    for c in &clients {
        for k in 0..d {
            num[k] += c.curvature()[k] * c.center()[k];
            den[k] += c.curvature()[k];
        }
    }
    let optimum: ParamVector = num.iter().zip(&den).map(|(n, d)| n / d).collect();
    let smoothness = clients
        .iter()
        .filter_map(ClientObjective::smoothness)
        .fold(0.0, f64::max);
    let x0 = vec![0.0; d];
    let objectives: Vec<Arc<dyn ClientObjective>> = clients
        .into_iter()
        .map(|c| Arc::new(c) as Arc<dyn ClientObjective>)
        .collect();
    let problem = FederatedProblem::new(objectives, x0.clone())?;
    let min_value = problem.loss(&optimum)?;
    let delta = problem.loss(&x0)? - min_value;
    Ok(problem.with_constants(ProblemConstants {
        optimum,
        min_value,
        smoothness,
        delta,
        sigma,
    }))
}

/// Random heterogeneous quadratics: `a_i ~ U[0.5, 1.5]^d` and
/// `b_i = m + heterogeneity · z_i` with a shared `m ~ N(0, I)` and
/// `z_i ~ N(0, I)`, all from partition-purpose streams. `x⁰ = 0`.
pub fn make_quadratic_problem(
    clients: usize,
    dim: usize,
    heterogeneity: f64,
    sigma: f64,
    seed: u64,
) -> Result<FederatedProblem> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be positive"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be positive"));
    }
    if !(heterogeneity >= 0.0 && heterogeneity.is_finite()) {
        return Err(Error::invalid("heterogeneity", "must be finite and >= 0"));
    }
    let mut shared = RngStream::new(seed, 0, SERVER, Purpose::Partition);
    let mean: Vec<f64> = (0..dim).map(|_| shared.sample(StandardNormal)).collect();
    let mut curvatures = Vec::with_capacity(clients);
    let mut centers = Vec::with_capacity(clients);
    for i in 0..clients {
        let mut rng = RngStream::new(seed, 0, i as u64, Purpose::Partition);
        curvatures.push((0..dim).map(|_| rng.random_range(0.5..=1.5)).collect());
        centers.push(
            mean.iter()
                .map(|m| {
                    let z: f64 = rng.sample(StandardNormal);
                    m + heterogeneity * z
                })
                .collect(),
        );
    }
    quadratic_from_parts(curvatures, centers, sigma)
}

/// MLP problem over shard-partitioned training data. The initial model is
/// drawn from the init-noise stream and shared by all clients.
pub fn make_mlp_problem(
    train: Arc<Dataset>,
    test: Option<Arc<Dataset>>,
    mlp: Mlp,
    clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<FederatedProblem> {
    let mut part_rng = RngStream::new(seed, 0, SERVER, Purpose::Partition);
    let parts = shard_partition(train.labels(), clients, shards_per_client, &mut part_rng)?;
    let mlp = Arc::new(mlp);
    let objectives = parts
        .into_iter()
        .map(|idx| {
            MlpClient::new(mlp.clone(), train.clone(), idx)
                .map(|c| Arc::new(c) as Arc<dyn ClientObjective>)
        })
        .collect::<Result<Vec<_>>>()?;
    let x0 = mlp.init(&mut RngStream::new(seed, 0, SERVER, Purpose::InitNoise));
    let mut problem =
        FederatedProblem::new(objectives, x0)?.with_group_sizes(mlp.layer_param_counts());
    if let Some(data) = test {
        problem = problem.with_test_set(TestSet { mlp, data });
    }
    Ok(problem)
}
