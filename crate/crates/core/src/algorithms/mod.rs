//! Round procedures: FedAvg, SCAFFOLD (two-message and single-message
//! forms), SCALLION and SCAFCOM.
//!
//! Every round is a function from the old `(server, client states)` to the
//! new ones. Participating clients may run concurrently; aggregation always
//! sums in ascending client order, so results do not depend on scheduling.

mod local;
mod sampling;
pub mod theory;

use rayon::prelude::*;

pub use local::local_loop;
pub use sampling::sample_clients;
pub use theory::{scafcom_theory_params, scallion_theory_params, ProblemScale, TheoryParams};

use crate::compress::{compress, CompressedMessage, CompressorSpec};
use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, norm, ParamVector};
use crate::objectives::FederatedProblem;
use crate::rng::{Purpose, RngStream, SERVER};

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub eta_l: f64,
    pub eta_g: f64,
    pub local_steps: usize,
    pub sampled_clients: usize,
    pub rounds: usize,
    pub batch_size: usize,
}

impl HyperParams {
    pub fn validate(&self, clients: usize) -> Result<()> {
        if !(self.eta_l > 0.0 && self.eta_l.is_finite()) {
            return Err(Error::config("hyperparams.eta_l", "must be positive"));
        }
        if !(self.eta_g > 0.0 && self.eta_g.is_finite()) {
            return Err(Error::config("hyperparams.eta_g", "must be positive"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("hyperparams.local_steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("hyperparams.batch_size", "must be >= 1"));
        }
        if self.sampled_clients == 0 || self.sampled_clients > clients {
            return Err(Error::config(
                "hyperparams.sampled_clients",
                format!("need 1 <= S <= N = {clients}, got {}", self.sampled_clients),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlgorithmSpec {
    FedAvg,
    /// Sends the model delta and the control delta.
    ScaffoldOriginal,
    /// Sends only the increment `Δ_i = (x − y_i)/(η_l K) − c`.
    ScaffoldSingle,
    Scallion {
        compressor: CompressorSpec,
        alpha: f64,
    },
    Scafcom {
        compressor: CompressorSpec,
        beta: f64,
    },
}

impl AlgorithmSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmSpec::FedAvg => "fedavg",
            AlgorithmSpec::ScaffoldOriginal => "scaffold-original",
            AlgorithmSpec::ScaffoldSingle => "scaffold",
            AlgorithmSpec::Scallion { .. } => "scallion",
            AlgorithmSpec::Scafcom { .. } => "scafcom",
        }
    }

    /// Name including compressor and factor, e.g. `scafcom/top-0.05/beta=0.2`.
    /// Never contains a comma.
    pub fn label(&self) -> String {
        match self {
            AlgorithmSpec::Scallion { compressor, alpha } => {
                format!("scallion/{}/alpha={alpha}", compressor.name())
            }
            AlgorithmSpec::Scafcom { compressor, beta } => {
                format!("scafcom/{}/beta={beta}", compressor.name())
            }
            other => other.name().to_string(),
        }
    }

    pub fn uses_controls(&self) -> bool {
        !matches!(self, AlgorithmSpec::FedAvg)
    }

    pub fn compressor(&self) -> Option<&CompressorSpec> {
        match self {
            AlgorithmSpec::Scallion { compressor, .. } | AlgorithmSpec::Scafcom { compressor, .. } => {
                Some(compressor)
            }
            _ => None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let unit = |key: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must lie in (0, 1], got {v}")))
            }
        };
        match self {
            AlgorithmSpec::Scallion { compressor, alpha } => {
                unit("algorithm.alpha", *alpha)?;
                if !compressor.is_unbiased() {
                    return Err(Error::config(
                        "compressor.kind",
                        format!("SCALLION needs an unbiased compressor, got {}", compressor.name()),
                    ));
                }
                compressor.validate(dim).map_err(compressor_key)
            }
            AlgorithmSpec::Scafcom { compressor, beta } => {
                unit("algorithm.beta", *beta)?;
                if !compressor.is_contractive() {
                    return Err(Error::config(
                        "compressor.kind",
                        format!(
                            "SCAFCOM needs a contractive compressor (wrap unbiased ones with scaled = true), got {}",
                            compressor.name()
                        ),
                    ));
                }
                compressor.validate(dim).map_err(compressor_key)
            }
            _ => Ok(()),
        }
    }
}

fn compressor_key(e: Error) -> Error {
    match e {
        Error::InvalidInput { field, reason } => {
            let field = if field == "partition" { "groups".into() } else { field };
            Error::config(format!("compressor.{field}"), reason)
        }
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ControlInit {
    /// `c_i⁰ = v_i⁰ = 0`.
    #[default]
    Zero,
    /// `c_i⁰ = v_i⁰ = (1/B) Σ_b ∇F(x⁰; ξ_b)` from `B` single-sample gradients.
    Minibatch { samples: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub c: ParamVector,
    /// Momentum, present only for SCAFCOM.
    pub v: Option<ParamVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub x: ParamVector,
    pub c: ParamVector,
    pub t: usize,
}

/// Fresh server and client states. FedAvg keeps no client state.
pub fn init_states(
    spec: &AlgorithmSpec,
    problem: &FederatedProblem,
    init: ControlInit,
    seed: u64,
) -> Result<(ServerState, Vec<ClientState>)> {
    let d = problem.dim();
    let server = |c| ServerState {
        x: problem.x0().to_vec(),
        c,
        t: 0,
    };
    if !spec.uses_controls() {
        return Ok((server(vec![0.0; d]), Vec::new()));
    }
    let momentum = matches!(spec, AlgorithmSpec::Scafcom { .. });
    let mut states = Vec::with_capacity(problem.num_clients());
    for i in 0..problem.num_clients() {
        let c = match init {
            ControlInit::Zero => vec![0.0; d],
            ControlInit::Minibatch { samples } => {
                if samples == 0 {
                    return Err(Error::config("algorithm.control_init_samples", "must be >= 1"));
                }
                let mut rng = RngStream::new(seed, 0, i as u64, Purpose::InitNoise);
                let mut acc = vec![0.0; d];
                for _ in 0..samples {
                    let g = problem.client(i).stochastic_gradient(problem.x0(), 1, &mut rng)?;
                    crate::linalg::add_assign(&mut acc, &g);
                }
                acc.iter_mut().for_each(|v| *v /= samples as f64);
                acc
            }
        };
        let v = momentum.then(|| c.clone());
        states.push(ClientState { c, v });
    }
    let c = crate::linalg::mean_of(states.iter().map(|s| s.c.as_slice()), d);
    Ok((server(c), states))
}

/// What one participant sent in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUplink {
    pub client: usize,
    pub messages: Vec<CompressedMessage>,
    pub bytes: usize,
    /// Norm of the uplink payload before compression (`‖Δ_i‖` for SCAFFOLD).
    pub payload_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UplinkReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub clients: Vec<ClientUplink>,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub server: ServerState,
    pub states: Vec<ClientState>,
    pub report: UplinkReport,
}

#[derive(Clone, Copy)]
pub struct RoundContext<'a> {
    pub problem: &'a FederatedProblem,
    pub hp: &'a HyperParams,
    pub seed: u64,
    /// Run participants' local work on the rayon pool.
    pub parallel: bool,
}

impl RoundContext<'_> {
    fn participants(&self, t: usize) -> Result<Vec<usize>> {
        let mut rng = RngStream::new(self.seed, t as u64, SERVER, Purpose::Sampling);
        sample_clients(self.problem.num_clients(), self.hp.sampled_clients, &mut rng)
    }

    fn minibatch_rng(&self, t: usize, i: usize) -> RngStream {
        RngStream::new(self.seed, t as u64, i as u64, Purpose::Minibatch)
    }

    fn compression_rng(&self, t: usize, i: usize) -> RngStream {
        RngStream::new(self.seed, t as u64, i as u64, Purpose::Compression)
    }

    fn for_each_participant<T: Send>(
        &self,
        ids: &[usize],
        work: impl Fn(usize) -> Result<T> + Sync + Send,
    ) -> Result<Vec<T>> {
        if self.parallel {
            ids.par_iter().map(|&i| work(i)).collect()
        } else {
            ids.iter().map(|&i| work(i)).collect()
        }
    }

    fn dense_bytes(&self) -> usize {
        4 + 4 * self.problem.dim()
    }
}

pub fn run_round(
    spec: &AlgorithmSpec,
    ctx: &RoundContext<'_>,
    server: ServerState,
    states: Vec<ClientState>,
) -> Result<RoundOutcome> {
    match spec {
        AlgorithmSpec::FedAvg => round_fedavg(ctx, server, states),
        AlgorithmSpec::ScaffoldOriginal => round_scaffold_original(ctx, server, states),
        AlgorithmSpec::ScaffoldSingle => round_scaffold_single(ctx, server, states),
        AlgorithmSpec::Scallion { compressor, alpha } => {
            round_scallion(ctx, server, states, compressor, *alpha)
        }
        AlgorithmSpec::Scafcom { compressor, beta } => {
            round_scafcom(ctx, server, states, compressor, *beta)
        }
    }
}

/// What the momentum update is anchored on. SCAFCOM keeps `v_i`; anchoring
/// on `c_i` instead turns the update into SCALLION's with `α = β`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Anchor {
    Momentum,
    #[cfg_attr(not(test), allow(dead_code))]
    Control,
}

#[derive(Clone, Copy)]
enum Increment<'a> {
    Scaled {
        compressor: &'a CompressorSpec,
        alpha: f64,
    },
    Momentum {
        compressor: &'a CompressorSpec,
        beta: f64,
        anchor: Anchor,
    },
}

struct Contribution {
    client: usize,
    received: ParamVector,
    new_c: ParamVector,
    new_v: Option<ParamVector>,
    uplink: ClientUplink,
}

fn check_states(ctx: &RoundContext<'_>, server: &ServerState, states: &[ClientState]) -> Result<()> {
    let d = ctx.problem.dim();
    ctx.hp.validate(ctx.problem.num_clients())?;
    check_dim(d, server.x.len())?;
    check_dim(d, server.c.len())?;
    if states.len() != ctx.problem.num_clients() {
        return Err(Error::config(
            "states",
            format!("{} client states for {} clients", states.len(), ctx.problem.num_clients()),
        ));
    }
    for s in states {
        check_dim(d, s.c.len())?;
    }
    Ok(())
}

/// SCAFFOLD with the single increment uplink; identical to SCALLION with
/// `α = 1` and the identity compressor.
pub fn round_scaffold_single(
    ctx: &RoundContext<'_>,
    server: ServerState,
    states: Vec<ClientState>,
) -> Result<RoundOutcome> {
    round_scallion(ctx, server, states, &CompressorSpec::Identity, 1.0)
}

/// Sends `C(α((x − y_i)/(η_l K) − c))`, then
/// `c_i += δ̃_i`, `x −= (η_g η_l K / S) Σ (δ̃_i + c)`, `c += (1/N) Σ δ̃_i`.
pub fn round_scallion(
    ctx: &RoundContext<'_>,
    server: ServerState,
    states: Vec<ClientState>,
    compressor: &CompressorSpec,
    alpha: f64,
) -> Result<RoundOutcome> {
    AlgorithmSpec::Scallion {
        compressor: compressor.clone(),
        alpha,
    }
    .validate(ctx.problem.dim())?;
    controlled_round(ctx, server, states, Increment::Scaled { compressor, alpha })
}

/// Updates `v_i ← (1−β) v_i + β((x − y_i)/(η_l K) + c_i − c)` and sends
/// `C(v_i − c_i)`; control and server updates as in [`round_scallion`].
pub fn round_scafcom(
    ctx: &RoundContext<'_>,
    server: ServerState,
    states: Vec<ClientState>,
    compressor: &CompressorSpec,
    beta: f64,
) -> Result<RoundOutcome> {
    scafcom_with_anchor(ctx, server, states, compressor, beta, Anchor::Momentum)
}

fn scafcom_with_anchor(
    ctx: &RoundContext<'_>,
    server: ServerState,
    states: Vec<ClientState>,
    compressor: &CompressorSpec,
    beta: f64,
    anchor: Anchor,
) -> Result<RoundOutcome> {
    AlgorithmSpec::Scafcom {
        compressor: compressor.clone(),
        beta,
    }
    .validate(ctx.problem.dim())?;
    if states.iter().any(|s| s.v.is_none()) {
        return Err(Error::config(
            "states",
            "SCAFCOM requires momentum state on every client",
        ));
    }
    controlled_round(
        ctx,
        server,
        states,
        Increment::Momentum {
            compressor,
            beta,
            anchor,
        },
    )
}

fn controlled_round(
    ctx: &RoundContext<'_>,
    server: ServerState,
    mut states: Vec<ClientState>,
    rule: Increment<'_>,
) -> Result<RoundOutcome> {
    check_states(ctx, &server, &states)?;
    let hp = ctx.hp;
    let d = ctx.problem.dim();
    let t = server.t;
    let ids = ctx.participants(t)?;
    let denom = hp.eta_l * hp.local_steps as f64;

    let contributions = ctx.for_each_participant(&ids, |i| {
        let state = &states[i];
        let (y, _) = local_loop(
            ctx.problem.client(i),
            &server.x,
            &state.c,
            &server.c,
            hp.eta_l,
            hp.local_steps,
            hp.batch_size,
            &mut ctx.minibatch_rng(t, i),
        )?;
        if !all_finite(&y) {
            return Err(Error::Diverged { round: t });
        }
        // Δ_i = (x − y_i)/(η_l K) − c
        let increment: Vec<f64> = (0..d).map(|k| (server.x[k] - y[k]) / denom - server.c[k]).collect();
        let (compressor, delta, new_v) = match rule {
            Increment::Scaled { compressor, alpha } => {
                (compressor, increment.iter().map(|v| alpha * v).collect::<Vec<_>>(), None)
            }
            Increment::Momentum {
                compressor,
                beta,
                anchor,
            } => {
                // v_i⁺ − c_i = (1−β)(v_i − c_i) + β Δ_i
                let base = match anchor {
                    Anchor::Momentum => state.v.as_deref().unwrap(),
                    Anchor::Control => &state.c,
                };
                let delta: Vec<f64> = (0..d)
                    .map(|k| (1.0 - beta) * (base[k] - state.c[k]) + beta * increment[k])
                    .collect();
                let v: Vec<f64> = (0..d).map(|k| state.c[k] + delta[k]).collect();
                (compressor, delta, Some(v))
            }
        };
        // an overflowing norm cannot be encoded, so it counts as divergence
        let payload_norm = norm(&delta);
        if !payload_norm.is_finite() {
            return Err(Error::Diverged { round: t });
        }
        let msg = compress(compressor, &delta, &mut ctx.compression_rng(t, i))?;
        let received = msg.decode()?;
        let new_c = (0..d).map(|k| state.c[k] + received[k]).collect();
        Ok(Contribution {
            client: i,
            received,
            new_c,
            new_v,
            uplink: ClientUplink {
                client: i,
                bytes: msg.encoded_bytes(),
                messages: vec![msg],
                payload_norm,
            },
        })
    })?;

    let mut model_sum = vec![0.0; d];
    let mut control_sum = vec![0.0; d];
    for contrib in &contributions {
        for k in 0..d {
            model_sum[k] += contrib.received[k] + server.c[k];
            control_sum[k] += contrib.received[k];
        }
    }
    let step = hp.eta_g * hp.eta_l * hp.local_steps as f64 / hp.sampled_clients as f64;
    let n = ctx.problem.num_clients() as f64;
    let x: Vec<f64> = (0..d).map(|k| server.x[k] - step * model_sum[k]).collect();
    let c: Vec<f64> = (0..d).map(|k| server.c[k] + control_sum[k] / n).collect();

    let mut uplinks = Vec::with_capacity(contributions.len());
    for contrib in contributions {
        let s = &mut states[contrib.client];
        s.c = contrib.new_c;
        if contrib.new_v.is_some() {
            s.v = contrib.new_v;
        }
        uplinks.push(contrib.uplink);
    }
    let downlink = ids.len() * 2 * ctx.dense_bytes();
    Ok(finish(server.t, ids, uplinks, downlink, x, c, states))
}

fn finish(
    t: usize,
    participants: Vec<usize>,
    clients: Vec<ClientUplink>,
    downlink_bytes: usize,
    x: ParamVector,
    c: ParamVector,
    states: Vec<ClientState>,
) -> RoundOutcome {
    let uplink_bytes = clients.iter().map(|u| u.bytes).sum();
    RoundOutcome {
        server: ServerState { x, c, t: t + 1 },
        states,
        report: UplinkReport {
            round: t,
            participants,
            clients,
            uplink_bytes,
            downlink_bytes,
        },
    }
}

/// Original SCAFFOLD: each participant sends `y_i − x` and `c_i⁺ − c_i`
/// with `c_i⁺ = c_i − c + (x − y_i)/(η_l K)`; the server applies
/// `x += (η_g/S) Σ (y_i − x)` and `c += (1/N) Σ (c_i⁺ − c_i)`.
pub fn round_scaffold_original(
    ctx: &RoundContext<'_>,
    server: ServerState,
    mut states: Vec<ClientState>,
) -> Result<RoundOutcome> {
    check_states(ctx, &server, &states)?;
    let hp = ctx.hp;
    let d = ctx.problem.dim();
    let t = server.t;
    let ids = ctx.participants(t)?;
    let denom = hp.eta_l * hp.local_steps as f64;

    let results = ctx.for_each_participant(&ids, |i| {
        let state = &states[i];
        let (y, _) = local_loop(
            ctx.problem.client(i),
            &server.x,
            &state.c,
            &server.c,
            hp.eta_l,
            hp.local_steps,
            hp.batch_size,
            &mut ctx.minibatch_rng(t, i),
        )?;
        if !all_finite(&y) {
            return Err(Error::Diverged { round: t });
        }
        let model_delta: Vec<f64> = (0..d).map(|k| y[k] - server.x[k]).collect();
        let new_c: Vec<f64> = (0..d)
            .map(|k| state.c[k] - server.c[k] + (server.x[k] - y[k]) / denom)
            .collect();
        let control_delta: Vec<f64> = (0..d).map(|k| new_c[k] - state.c[k]).collect();
        let uplink = ClientUplink {
            client: i,
            bytes: 2 * ctx.dense_bytes(),
            payload_norm: norm(&control_delta),
            messages: vec![
                CompressedMessage::Dense {
                    values: model_delta,
                },
                CompressedMessage::Dense {
                    values: control_delta,
                },
            ],
        };
        Ok((i, new_c, uplink))
    })?;

    let mut model_sum = vec![0.0; d];
    let mut control_sum = vec![0.0; d];
    for (_, _, uplink) in &results {
        let [CompressedMessage::Dense { values: dy }, CompressedMessage::Dense { values: dc }] =
            uplink.messages.as_slice()
        else {
            unreachable!("two dense messages per participant")
        };
        for k in 0..d {
            model_sum[k] += dy[k];
            control_sum[k] += dc[k];
        }
    }
    let step = hp.eta_g / hp.sampled_clients as f64;
    let n = ctx.problem.num_clients() as f64;
    let x: Vec<f64> = (0..d).map(|k| server.x[k] + step * model_sum[k]).collect();
    let c: Vec<f64> = (0..d).map(|k| server.c[k] + control_sum[k] / n).collect();

    let mut uplinks = Vec::with_capacity(results.len());
    for (i, new_c, uplink) in results {
        states[i].c = new_c;
        uplinks.push(uplink);
    }
    let downlink = ids.len() * 2 * ctx.dense_bytes();
    Ok(finish(t, ids, uplinks, downlink, x, c, states))
}

/// FedAvg with two-sided rates: plain local SGD, `x += (η_g/S) Σ (y_i − x)`.
/// Client states are passed through untouched (normally empty).
pub fn round_fedavg(
    ctx: &RoundContext<'_>,
    server: ServerState,
    states: Vec<ClientState>,
) -> Result<RoundOutcome> {
    let hp = ctx.hp;
    hp.validate(ctx.problem.num_clients())?;
    let d = ctx.problem.dim();
    check_dim(d, server.x.len())?;
    let t = server.t;
    let ids = ctx.participants(t)?;
    let zero = vec![0.0; d];

    let uplinks = ctx.for_each_participant(&ids, |i| {
        let (y, _) = local_loop(
            ctx.problem.client(i),
            &server.x,
            &zero,
            &zero,
            hp.eta_l,
            hp.local_steps,
            hp.batch_size,
            &mut ctx.minibatch_rng(t, i),
        )?;
        if !all_finite(&y) {
            return Err(Error::Diverged { round: t });
        }
        let model_delta: Vec<f64> = (0..d).map(|k| y[k] - server.x[k]).collect();
        Ok(ClientUplink {
            client: i,
            bytes: ctx.dense_bytes(),
            payload_norm: norm(&model_delta),
            messages: vec![CompressedMessage::Dense {
                values: model_delta,
            }],
        })
    })?;

    let mut model_sum = vec![0.0; d];
    for u in &uplinks {
        let CompressedMessage::Dense { values } = &u.messages[0] else {
            unreachable!("dense uplink")
        };
        for k in 0..d {
            model_sum[k] += values[k];
        }
    }
    let step = hp.eta_g / hp.sampled_clients as f64;
    let x: Vec<f64> = (0..d).map(|k| server.x[k] + step * model_sum[k]).collect();
    let downlink = ids.len() * ctx.dense_bytes();
    Ok(finish(t, ids, uplinks, downlink, x, server.c, states))
}

#[cfg(test)]
mod tests;
