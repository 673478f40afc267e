//! Experiment orchestration: the round loop, evaluation schedule, byte
//! ledger, CSV trajectories, run comparison and learning-rate grids.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::algorithms::{
    init_states, run_round, scafcom_theory_params, scallion_theory_params, AlgorithmSpec,
    ClientState, ControlInit, HyperParams, ProblemScale, RoundContext, ServerState, UplinkReport,
};
use crate::compress::{contraction_q2, omega};
use crate::config::{ExperimentConfig, ProblemSpec};
use crate::error::{Error, IngestionKind, Result};
use crate::linalg::all_finite;
use crate::objectives::{load_idx, make_mlp_problem, make_quadratic_problem, FederatedProblem};
use crate::rng::{Purpose, RngStream, SERVER};

pub use crate::algorithms::sample_clients;

pub const CSV_HEADER: &str =
    "round,algo,grad_norm_sq,train_loss,test_acc,uplink_bytes_cum,downlink_bytes_cum,seed";

/// The learning-rate grid used when none is given.
pub const DEFAULT_GRID: [f64; 9] = [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0];

/// Metrics at the start of round `round`, i.e. at `xᵗ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub grad_norm_sq: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub uplink_bytes_cum: u64,
    pub downlink_bytes_cum: u64,
    /// Clients that took part in the round that produced `xᵗ`.
    pub participants: Vec<usize>,
    /// Samples behind the loss/gradient estimate; `None` means exact.
    pub eval_samples: Option<usize>,
    /// Set on the record that halts a run with a non-finite model.
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub config: ExperimentConfig,
    pub algo: String,
    /// `η_l` actually used (differs from the config only in theory mode).
    pub eta_l: f64,
    pub records: Vec<RoundRecord>,
    pub final_server: ServerState,
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn last(&self) -> &RoundRecord {
        self.records.last().expect("a trajectory has at least the round-0 record")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let acc = r.test_accuracy.map(fmt_real).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.round,
                self.algo,
                fmt_real(r.grad_norm_sq),
                fmt_real(r.train_loss),
                acc,
                r.uplink_bytes_cum,
                r.downlink_bytes_cum,
                self.config.seed
            );
        }
        out
    }

    /// Writes the CSV to `path` and the provenance echo next to it.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_file(path, &self.to_csv())?;
        let mut echo = self.config.to_toml()?;
        let _ = writeln!(echo, "\n# effective eta_l = {}", self.eta_l);
        match self.config.eval_subsample {
            Some(m) => {
                let _ = writeln!(echo, "# loss and gradient norm estimated from {m} samples");
            }
            None => echo.push_str("# loss and gradient norm are exact\n"),
        }
        if let Some(t) = self.diverged_at {
            let _ = writeln!(echo, "# diverged at round {t}");
        }
        write_file(&provenance_path(path), &echo)
    }
}

/// `run.csv` → `run.csv.config.toml`.
pub fn provenance_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".config.toml");
    PathBuf::from(name)
}

/// 17 significant digits, enough to recover the exact `f64`.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Materializes the problem a config describes. Data files are read here.
pub fn build_problem(spec: &ProblemSpec, seed: u64) -> Result<FederatedProblem> {
    match spec {
        ProblemSpec::Quadratic {
            clients,
            dim,
            heterogeneity,
            sigma,
        } => make_quadratic_problem(*clients, *dim, *heterogeneity, *sigma, seed),
        ProblemSpec::Mnist(m) => {
            let mlp = m.mlp()?;
            let mut train = load_idx(&m.train_images, &m.train_labels)?;
            if let Some(n) = m.train_limit {
                train = train.truncated(n);
            }
            if train.width() != mlp.input_width() {
                return Err(Error::Ingestion {
                    path: m.train_images.clone(),
                    kind: IngestionKind::Unreadable(format!(
                        "images have {} pixels, the network expects {}",
                        train.width(),
                        mlp.input_width()
                    )),
                });
            }
            let test = match (&m.test_images, &m.test_labels) {
                (Some(images), Some(labels)) => {
                    let mut t = load_idx(images, labels)?;
                    if let Some(n) = m.test_limit {
                        t = t.truncated(n);
                    }
                    Some(Arc::new(t))
                }
                _ => None,
            };
            make_mlp_problem(Arc::new(train), test, mlp, m.clients, m.shards_per_client, seed)
        }
    }
}

/// Hyperparameters after applying the theory-mode cap on `η_l`.
pub fn effective_hyper(config: &ExperimentConfig, problem: &FederatedProblem) -> Result<HyperParams> {
    let mut hyper = config.hyper.clone();
    if !config.theory_mode {
        return Ok(hyper);
    }
    let constants = problem.constants().ok_or_else(|| {
        Error::config("algorithm.theory_mode", "problem constants are unknown")
    })?;
    let scale = ProblemScale {
        smoothness: constants.smoothness,
        delta: constants.delta,
        sigma: constants.sigma,
        clients: problem.num_clients(),
        sampled: hyper.sampled_clients,
        local_steps: hyper.local_steps,
        rounds: hyper.rounds.max(1),
    };
    let d = problem.dim();
    let params = match &config.algorithm {
        AlgorithmSpec::Scallion { compressor, .. } => {
            scallion_theory_params(&scale, omega(compressor, d)?)?
        }
        AlgorithmSpec::Scafcom { compressor, .. } => {
            scafcom_theory_params(&scale, contraction_q2(compressor, d)?.sqrt())?
        }
        AlgorithmSpec::ScaffoldSingle | AlgorithmSpec::ScaffoldOriginal => {
            scallion_theory_params(&scale, 0.0)?
        }
        AlgorithmSpec::FedAvg => {
            return Err(Error::config("algorithm.theory_mode", "no recipe for fedavg"))
        }
    };
    hyper.eta_l = hyper
        .eta_l
        .min(params.eta_l_max(hyper.local_steps, constants.smoothness));
    Ok(hyper)
}

/// Step-by-step driver for one algorithm on one problem.
pub struct Simulation {
    problem: FederatedProblem,
    algorithm: AlgorithmSpec,
    hyper: HyperParams,
    seed: u64,
    parallel: bool,
    state: Option<(ServerState, Vec<ClientState>)>,
    /// Last finite server state once a round has diverged.
    halted: Option<ServerState>,
    uplink_cum: u64,
    downlink_cum: u64,
    last_participants: Vec<usize>,
}

impl Simulation {
    pub fn new(
        problem: FederatedProblem,
        algorithm: AlgorithmSpec,
        hyper: HyperParams,
        seed: u64,
        control_init: ControlInit,
    ) -> Result<Self> {
        hyper.validate(problem.num_clients())?;
        algorithm.validate(problem.dim())?;
        let state = init_states(&algorithm, &problem, control_init, seed)?;
        Ok(Self {
            problem,
            algorithm,
            hyper,
            seed,
            parallel: false,
            state: Some(state),
            halted: None,
            uplink_cum: 0,
            downlink_cum: 0,
            last_participants: Vec::new(),
        })
    }

    /// Runs participants' local work on the rayon pool. Results are
    /// bitwise identical either way.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    fn state(&self) -> &(ServerState, Vec<ClientState>) {
        self.state
            .as_ref()
            .expect("simulation state was lost to a failed round")
    }

    pub fn problem(&self) -> &FederatedProblem {
        &self.problem
    }

    pub fn algorithm(&self) -> &AlgorithmSpec {
        &self.algorithm
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn round(&self) -> usize {
        self.server().t
    }

    /// Current server state; after a divergence, the last finite one.
    pub fn server(&self) -> &ServerState {
        match &self.halted {
            Some(s) => s,
            None => &self.state().0,
        }
    }

    /// Client states; empty after a divergence.
    pub fn client_states(&self) -> &[ClientState] {
        match &self.halted {
            Some(_) => &[],
            None => &self.state().1,
        }
    }

    pub fn has_diverged(&self) -> bool {
        self.halted.is_some() || !all_finite(&self.server().x)
    }

    pub fn uplink_bytes(&self) -> u64 {
        self.uplink_cum
    }

    pub fn downlink_bytes(&self) -> u64 {
        self.downlink_cum
    }

    /// Executes one round. A round that diverges halts the simulation at
    /// the last finite state; any other failure leaves it unusable.
    pub fn step(&mut self) -> Result<UplinkReport> {
        let (server, states) = self.state.take().ok_or_else(|| {
            Error::Unsupported("simulation state was lost to a failed round".into())
        })?;
        let t = server.t;
        let backup = server.clone();
        let ctx = RoundContext {
            problem: &self.problem,
            hp: &self.hyper,
            seed: self.seed,
            parallel: self.parallel,
        };
        let out = run_round(&self.algorithm, &ctx, server, states).map_err(|e| {
            if matches!(e, Error::Diverged { .. }) {
                self.halted = Some(backup);
            }
            Error::AtRound {
                round: t,
                source: Box::new(e),
            }
        })?;
        self.uplink_cum += out.report.uplink_bytes as u64;
        self.downlink_cum += out.report.downlink_bytes as u64;
        self.last_participants = out.report.participants.clone();
        self.state = Some((out.server, out.states));
        Ok(out.report)
    }

    /// Metrics at the current model.
    pub fn evaluate(&self, subsample: Option<usize>) -> Result<RoundRecord> {
        let t = self.round();
        let mut record = RoundRecord {
            round: t + usize::from(self.halted.is_some()),
            grad_norm_sq: f64::NAN,
            train_loss: f64::NAN,
            test_accuracy: None,
            uplink_bytes_cum: self.uplink_cum,
            downlink_bytes_cum: self.downlink_cum,
            participants: self.last_participants.clone(),
            eval_samples: subsample,
            diverged: self.has_diverged(),
        };
        if record.diverged {
            return Ok(record);
        }
        let mut rng = RngStream::new(self.seed, t as u64, SERVER, Purpose::Evaluation);
        let eval = self
            .problem
            .evaluate(&self.server().x, subsample, &mut rng)
            .map_err(|e| Error::AtRound {
                round: t,
                source: Box::new(e),
            })?;
        record.grad_norm_sq = eval.grad_norm_sq;
        record.train_loss = eval.train_loss;
        record.test_accuracy = eval.test_accuracy;
        record.eval_samples = eval.eval_samples;
        Ok(record)
    }
}

/// Builds the problem, runs the config and writes its output file if one is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Trajectory> {
    config.validate()?;
    let problem = build_problem(&config.problem, config.seed)?;
    let trajectory = run_on_problem(config, &problem)?;
    if let Some(path) = &config.output {
        trajectory.write(path)?;
    }
    Ok(trajectory)
}

/// Runs a config on an already built problem; writes nothing.
pub fn run_on_problem(config: &ExperimentConfig, problem: &FederatedProblem) -> Result<Trajectory> {
    config.validate()?;
    let hyper = effective_hyper(config, problem)?;
    let eta_l = hyper.eta_l;
    let rounds = hyper.rounds;
    let mut sim = Simulation::new(
        problem.clone(),
        config.algorithm.clone(),
        hyper,
        config.seed,
        config.control_init,
    )?
    .with_parallel(config.parallel);
    let mut records = vec![sim.evaluate(config.eval_subsample)?];
    let mut diverged_at = None;
    for t in 1..=rounds {
        match sim.step() {
            Err(e) if matches!(e.root(), Error::Diverged { .. }) => {
                records.push(sim.evaluate(config.eval_subsample)?);
                diverged_at = Some(t);
                break;
            }
            other => {
                other?;
            }
        }
        if sim.has_diverged() {
            records.push(sim.evaluate(config.eval_subsample)?);
            diverged_at = Some(t);
            break;
        }
        if t % config.eval_interval == 0 || t == rounds {
            records.push(sim.evaluate(config.eval_subsample)?);
        }
    }
    Ok(Trajectory {
        config: config.clone(),
        algo: config.algorithm.label(),
        eta_l,
        records,
        final_server: sim.server().clone(),
        diverged_at,
    })
}

/// One parsed row of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub round: usize,
    pub algo: String,
    pub grad_norm_sq: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub uplink_bytes_cum: u64,
    pub downlink_bytes_cum: u64,
    pub seed: u64,
}

pub fn parse_trajectory_csv(text: &str, path: &Path) -> Result<Vec<CsvRow>> {
    let bad = |msg: String| Error::Ingestion {
        path: path.to_path_buf(),
        kind: IngestionKind::Unreadable(msg),
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(bad(format!("unexpected header {h:?}"))),
        None => return Err(bad("empty file".into())),
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let line_no = n + 2;
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(format!("line {line_no}: expected 8 fields, got {}", f.len())));
            }
            let num = |i: usize| -> Result<f64> {
                f[i].parse()
                    .map_err(|_| bad(format!("line {line_no}: bad number {:?}", f[i])))
            };
            let int = |i: usize| -> Result<u64> {
                f[i].parse()
                    .map_err(|_| bad(format!("line {line_no}: bad integer {:?}", f[i])))
            };
            Ok(CsvRow {
                round: int(0)? as usize,
                algo: f[1].to_string(),
                grad_norm_sq: num(2)?,
                train_loss: num(3)?,
                test_accuracy: if f[4].is_empty() { None } else { Some(num(4)?) },
                uplink_bytes_cum: int(5)?,
                downlink_bytes_cum: int(6)?,
                seed: int(7)?,
            })
        })
        .collect()
}

pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        kind: IngestionKind::Unreadable(e.to_string()),
    })?;
    parse_trajectory_csv(&text, path)
}

/// Trajectories aligned on their shared evaluation rounds.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub labels: Vec<String>,
    pub rounds: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
}

impl Comparison {
    /// Checks that all runs share `T` and the evaluation interval.
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::config("compare", "no runs to compare"))?;
        let (t, every) = (first.config.hyper.rounds, first.config.eval_interval);
        for tr in &trajectories[1..] {
            if tr.config.hyper.rounds != t {
                return Err(Error::config(
                    "hyperparams.rounds",
                    format!("mismatched schedules: {} vs {t} rounds", tr.config.hyper.rounds),
                ));
            }
            if tr.config.eval_interval != every {
                return Err(Error::config(
                    "output.eval_interval",
                    format!("mismatched schedules: {} vs {every}", tr.config.eval_interval),
                ));
            }
        }
        let mut rounds: Vec<usize> = (0..=t).filter(|r| r % every == 0).collect();
        if rounds.last() != Some(&t) {
            rounds.push(t);
        }
        let mut labels = Vec::with_capacity(trajectories.len());
        for (k, tr) in trajectories.iter().enumerate() {
            let repeated = trajectories.iter().filter(|o| o.algo == tr.algo).count() > 1;
            labels.push(if repeated {
                format!("{}#{k}", tr.algo)
            } else {
                tr.algo.clone()
            });
        }
        Ok(Self {
            labels,
            rounds,
            trajectories,
        })
    }

    /// Record of run `k` at round `t`, absent after a divergence.
    pub fn at(&self, k: usize, t: usize) -> Option<&RoundRecord> {
        self.trajectories[k].records.iter().find(|r| r.round == t)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("round");
        for l in &self.labels {
            for m in [
                "grad_norm_sq",
                "train_loss",
                "test_acc",
                "uplink_bytes_cum",
                "downlink_bytes_cum",
            ] {
                let _ = write!(out, ",{l}.{m}");
            }
        }
        out.push('\n');
        for &t in &self.rounds {
            let _ = write!(out, "{t}");
            for k in 0..self.trajectories.len() {
                match self.at(k, t) {
                    Some(r) => {
                        let acc = r.test_accuracy.map(fmt_real).unwrap_or_default();
                        let _ = write!(
                            out,
                            ",{},{},{},{},{}",
                            fmt_real(r.grad_norm_sq),
                            fmt_real(r.train_loss),
                            acc,
                            r.uplink_bytes_cum,
                            r.downlink_bytes_cum
                        );
                    }
                    None => out.push_str(",,,,,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs every config (ignoring their own output paths) and aligns them.
pub fn compare_runs(configs: &[ExperimentConfig]) -> Result<Comparison> {
    if let Some(first) = configs.first() {
        for c in &configs[1..] {
            if c.hyper.rounds != first.hyper.rounds || c.eval_interval != first.eval_interval {
                let key = if c.hyper.rounds != first.hyper.rounds {
                    "hyperparams.rounds"
                } else {
                    "output.eval_interval"
                };
                return Err(Error::config(key, "mismatched evaluation schedules"));
            }
        }
    }
    let mut runs = Vec::with_capacity(configs.len());
    for c in configs {
        c.validate()?;
        let problem = build_problem(&c.problem, c.seed)?;
        runs.push(run_on_problem(c, &problem)?);
    }
    Comparison::new(runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// Test accuracy when the problem has a test set, else gradient norm.
    #[default]
    Auto,
    TestAccuracy,
    GradNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub eta_g: f64,
    pub eta_l: f64,
    pub final_record: RoundRecord,
    pub diverged: bool,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    /// Sorted by `η_g`, then `η_l`.
    pub cells: Vec<GridCell>,
    pub selection: Selection,
    pub best: Option<usize>,
    pub best_config: Option<ExperimentConfig>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("eta_g,eta_l,grad_norm_sq,train_loss,test_acc,diverged,selected\n");
        for (k, c) in self.cells.iter().enumerate() {
            let r = &c.final_record;
            let acc = r.test_accuracy.map(fmt_real).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.eta_g,
                c.eta_l,
                fmt_real(r.grad_norm_sq),
                fmt_real(r.train_loss),
                acc,
                c.diverged,
                self.best == Some(k)
            );
        }
        out
    }
}

/// Runs every `(η_g, η_l)` pair on one problem instance and picks the best
/// final metric. Ties go to the smaller `η_g`, then the smaller `η_l`.
pub fn grid_search(
    base: &ExperimentConfig,
    eta_g: &[f64],
    eta_l: &[f64],
    selection: Selection,
) -> Result<GridResult> {
    for (key, grid) in [("grid.eta_g", eta_g), ("grid.eta_l", eta_l)] {
        if grid.is_empty() {
            return Err(Error::config(key, "grid is empty"));
        }
        if let Some(v) = grid.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::config(key, format!("rates must be positive, got {v}")));
        }
    }
    base.validate()?;
    let problem = build_problem(&base.problem, base.seed)?;
    grid_search_on_problem(base, &problem, eta_g, eta_l, selection)
}

/// [`grid_search`] on an already built problem.
pub fn grid_search_on_problem(
    base: &ExperimentConfig,
    problem: &FederatedProblem,
    eta_g: &[f64],
    eta_l: &[f64],
    selection: Selection,
) -> Result<GridResult> {
    for (key, grid) in [("grid.eta_g", eta_g), ("grid.eta_l", eta_l)] {
        if grid.is_empty() {
            return Err(Error::config(key, "grid is empty"));
        }
    }
    let selection = match selection {
        Selection::Auto if problem.test_set().is_some() => Selection::TestAccuracy,
        Selection::Auto => Selection::GradNorm,
        s => s,
    };
    if selection == Selection::TestAccuracy && problem.test_set().is_none() {
        return Err(Error::config("grid.select", "the problem has no test set"));
    }
    let mut g: Vec<f64> = eta_g.to_vec();
    let mut l: Vec<f64> = eta_l.to_vec();
    for v in [&mut g, &mut l] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut cells = Vec::with_capacity(g.len() * l.len());
    let mut best: Option<(usize, f64)> = None;
    for &eg in &g {
        for &el in &l {
            let mut config = base.clone();
            config.hyper.eta_g = eg;
            config.hyper.eta_l = el;
            config.output = None;
            let in_grid = |e: Error| Error::InGrid {
                eta_g: eg,
                eta_l: el,
                source: Box::new(e),
            };
            let tr = run_on_problem(&config, problem).map_err(in_grid)?;
            let last = tr.last().clone();
            let score = match selection {
                Selection::TestAccuracy => last.test_accuracy.unwrap_or(f64::NAN),
                _ => -last.grad_norm_sq,
            };
            let diverged = tr.diverged_at.is_some() || !score.is_finite();
            if !diverged && best.is_none_or(|(_, s)| score > s) {
                best = Some((cells.len(), score));
            }
            cells.push(GridCell {
                eta_g: eg,
                eta_l: el,
                final_record: last,
                diverged,
            });
        }
    }
    let best = best.map(|(k, _)| k);
    let best_config = best.map(|k| {
        let mut c = base.clone();
        c.hyper.eta_g = cells[k].eta_g;
        c.hyper.eta_l = cells[k].eta_l;
        c
    });
    Ok(GridResult {
        cells,
        selection,
        best,
        best_config,
    })
}
