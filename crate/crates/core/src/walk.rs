//! Drifted binomial random walks and the Feynman-Kac path functional.
//!
//! Each path advances in steps of `Δt = 1/n`. A step moves every walk
//! coordinate by the trial drift times `D_k Δt` plus a binomial kick
//! `±1/√n` times the coordinate's walk scale (`D_k` is the scale squared),
//! then adds `(E_L − λ_T) Δt` at the new point to the path action. Without a
//! trial the drift vanishes and `E_L` is the bare potential. The path weight
//! at time `t` is `exp(−action)`.

mod checkpoint;

use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{CheckpointError, CheckpointHeader, FORMAT_VERSION};

use crate::estimate::{EnsembleResult, EstimateError};
use crate::system::{Configuration, SystemError};
use crate::trial::{Evaluator, LocalEval, SamplerBudget, TrialError, TrialFunction};
use crate::Hamiltonian;

/// Redraws allowed for one step before the path is abandoned.
pub const MAX_RETRIES: u32 = 100;
/// Largest tolerated fraction of abandoned paths.
pub const MAX_ABORT_FRACTION: f64 = 1e-3;
/// Default burn-in (time units) when sampling the start from the trial.
pub const DEFAULT_BURN_IN: f64 = 2.0;

/// Properties recorded at every horizon, in this order.
pub const PROPERTY_NAMES: [&str; 4] = [
    "potential",
    "local_energy",
    "potential_time_avg",
    "local_energy_time_avg",
];

#[derive(Debug, Error)]
pub enum WalkError {
    #[error("invalid walk parameters: {0}")]
    InvalidParams(String),
    #[error("path {index} aborted after {retries} rejected steps at t = {elapsed}")]
    PathAborted { index: u64, retries: u32, elapsed: f64 },
    #[error("{aborted} of {n_rep} paths aborted, above the allowed fraction {bound}")]
    TooManyAborted { aborted: u64, n_rep: u64, bound: f64 },
    #[error("starting configuration rejected: {0}")]
    BadStart(TrialError),
    #[error(transparent)]
    Trial(#[from] TrialError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Start {
    /// Every path starts at this walk-space point.
    Fixed(Configuration),
    /// Start from `initial` (or a system-provided guess) and run the drifted
    /// walk for `burn_in` time units without weighting.
    SampleFromTrial {
        burn_in: f64,
        initial: Option<Configuration>,
    },
}

impl Default for Start {
    fn default() -> Self {
        Start::SampleFromTrial {
            burn_in: DEFAULT_BURN_IN,
            initial: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkParams {
    /// Steps per unit time; `Δt = 1/n`.
    pub steps_per_unit: u32,
    pub t_max: f64,
    pub horizons: Vec<f64>,
    pub n_rep: usize,
    pub seed: u64,
    pub start: Start,
    pub max_retries: u32,
    pub max_abort_fraction: f64,
}

impl WalkParams {
    pub fn new(steps_per_unit: u32, horizons: Vec<f64>, n_rep: usize, seed: u64) -> Self {
        let t_max = horizons.iter().copied().fold(0.0, f64::max);
        WalkParams {
            steps_per_unit,
            t_max,
            horizons,
            n_rep,
            seed,
            start: Start::default(),
            max_retries: MAX_RETRIES,
            max_abort_fraction: MAX_ABORT_FRACTION,
        }
    }

    pub fn with_start(mut self, start: Start) -> Self {
        self.start = start;
        self
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps_per_unit as f64
    }

    fn to_steps(&self, t: f64) -> Option<u64> {
        let s = t * self.steps_per_unit as f64;
        let r = s.round();
        ((s - r).abs() <= 1e-9 * r.max(1.0) && r >= 0.0).then_some(r as u64)
    }

    pub fn validate(&self) -> Result<(), WalkError> {
        let bad = |m: String| Err(WalkError::InvalidParams(m));
        if self.steps_per_unit == 0 {
            return bad("steps per unit time must be positive".into());
        }
        if self.n_rep < 2 {
            return bad(format!("need at least 2 replications, got {}", self.n_rep));
        }
        if self.horizons.is_empty() {
            return bad("no horizons".into());
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad(format!("t_max must be positive, got {}", self.t_max));
        }
        let mut prev = 0.0;
        for &h in &self.horizons {
            if !(h > prev) {
                return bad("horizons must be positive and strictly increasing".into());
            }
            if h > self.t_max * (1.0 + 1e-12) {
                return bad(format!("horizon {h} exceeds t_max {}", self.t_max));
            }
            if self.to_steps(h).is_none() {
                return bad(format!("horizon {h} is not a multiple of the time step"));
            }
            prev = h;
        }
        if self.to_steps(self.t_max).is_none() {
            return bad(format!("t_max {} is not a multiple of the time step", self.t_max));
        }
        if let Start::SampleFromTrial { burn_in, .. } = &self.start {
            if !(*burn_in >= 0.0) || self.to_steps(*burn_in).is_none() {
                return bad(format!("burn-in {burn_in} must be a non-negative multiple of the time step"));
            }
        }
        if !(0.0..1.0).contains(&self.max_abort_fraction) {
            return bad("abort fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// `d` independent components, each `±1/√n` with probability ½.
pub fn binomial_increment(rng: &mut dyn RngCore, n: u32, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    fill_binomial(rng, 1.0 / (n as f64).sqrt(), &mut out);
    out
}

fn fill_binomial(rng: &mut dyn RngCore, size: f64, out: &mut [f64]) {
    for chunk in out.chunks_mut(64) {
        let bits = rng.next_u64();
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = if bits >> k & 1 == 1 { size } else { -size };
        }
    }
}

/// One walker between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub position: Configuration,
    pub steps: u64,
    pub elapsed: f64,
    /// Σ (E_L − λ_T) Δt along the path.
    pub action_sum: f64,
    /// Σ V Δt and Σ E_L Δt along the path.
    pub property_sums: [f64; 2],
    pub singular_hits: u64,
    /// Evaluation at `position`.
    pub current: LocalEval,
}

impl PathState {
    /// `exp(−action)`.
    pub fn weight(&self) -> f64 {
        (-self.action_sum).exp()
    }

    fn properties(&self) -> Vec<f64> {
        let t = self.elapsed;
        let avg = |s: f64| if t > 0.0 { s / t } else { 0.0 };
        vec![
            self.current.potential,
            self.current.local_energy,
            avg(self.property_sums[0]),
            avg(self.property_sums[1]),
        ]
    }
}

/// Advances paths for one system and guide. Holds scratch space, so every
/// worker uses its own.
pub struct Stepper<'a, H: Hamiltonian + ?Sized> {
    eval: Evaluator<'a, H>,
    scales: Vec<f64>,
    diffusion: Vec<f64>,
    dt: f64,
    kick: f64,
    lambda_t: f64,
    max_retries: u32,
    noise: Vec<f64>,
    proposal: Vec<f64>,
    next: LocalEval,
}

impl<'a, H: Hamiltonian + ?Sized> Stepper<'a, H> {
    pub fn new(
        ham: &'a H,
        trial: Option<&'a dyn TrialFunction>,
        lambda_t: f64,
        steps_per_unit: u32,
        max_retries: u32,
    ) -> Self {
        let d = ham.dim();
        let scales = ham.walk_scales();
        Stepper {
            eval: Evaluator::new(ham, trial),
            diffusion: scales.iter().map(|s| s * s).collect(),
            scales,
            dt: 1.0 / steps_per_unit as f64,
            kick: 1.0 / (steps_per_unit as f64).sqrt(),
            lambda_t,
            max_retries,
            noise: vec![0.0; d],
            proposal: vec![0.0; d],
            next: LocalEval::default(),
        }
    }

    /// Fresh state at `x` (zero action).
    pub fn start(&mut self, x: Configuration) -> Result<PathState, TrialError> {
        let mut current = LocalEval::default();
        self.eval.evaluate(x.as_slice(), &mut current)?;
        Ok(PathState {
            position: x,
            steps: 0,
            elapsed: 0.0,
            action_sum: 0.0,
            property_sums: [0.0; 2],
            singular_hits: 0,
            current,
        })
    }

    /// One drift-plus-kick move followed by accumulation at the new point.
    /// Rejected moves (singular point or non-finite drift) are redrawn.
    pub fn step(&mut self, state: &mut PathState, rng: &mut dyn RngCore) -> Result<(), WalkError> {
        for _ in 0..=self.max_retries {
            fill_binomial(rng, self.kick, &mut self.noise);
            for k in 0..self.proposal.len() {
                self.proposal[k] = state.position.0[k]
                    + self.diffusion[k] * state.current.drift[k] * self.dt
                    + self.scales[k] * self.noise[k];
            }
            match self.eval.evaluate(&self.proposal, &mut self.next) {
                Ok(()) => {
                    state.position.0.copy_from_slice(&self.proposal);
                    std::mem::swap(&mut state.current, &mut self.next);
                    state.steps += 1;
                    state.elapsed = state.steps as f64 * self.dt;
                    state.action_sum += (state.current.local_energy - self.lambda_t) * self.dt;
                    state.property_sums[0] += state.current.potential * self.dt;
                    state.property_sums[1] += state.current.local_energy * self.dt;
                    return Ok(());
                }
                Err(TrialError::NonFiniteDrift)
                | Err(TrialError::System(SystemError::SingularConfiguration { .. })) => {
                    state.singular_hits += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(WalkError::PathAborted {
            index: 0,
            retries: self.max_retries,
            elapsed: state.elapsed,
        })
    }

    /// Unweighted drifted walk; resets the clock and accumulators afterwards.
    pub fn burn_in(
        &mut self,
        state: &mut PathState,
        steps: u64,
        rng: &mut dyn RngCore,
    ) -> Result<(), WalkError> {
        for _ in 0..steps {
            self.step(state, rng)?;
        }
        state.steps = 0;
        state.elapsed = 0.0;
        state.action_sum = 0.0;
        state.property_sums = [0.0; 2];
        Ok(())
    }
}

/// Snapshot of one path at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    /// `ln Z = −action`.
    pub log_weight: f64,
    /// Values in [`PROPERTY_NAMES`] order.
    pub properties: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub index: u64,
    pub aborted: bool,
    pub singular_hits: u64,
    pub snapshots: Vec<Snapshot>,
}

impl PathResult {
    pub fn weight(&self, horizon: usize) -> f64 {
        self.snapshots[horizon].log_weight.exp()
    }
}

/// Random stream of path `index`: ChaCha8 keyed by the seed, one stream per path.
pub fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn starting_state<H: Hamiltonian + ?Sized>(
    stepper: &mut Stepper<'_, H>,
    ham: &H,
    params: &WalkParams,
    rng: &mut ChaCha8Rng,
) -> Result<PathState, WalkError> {
    match &params.start {
        Start::Fixed(x) => stepper.start(x.clone()).map_err(WalkError::BadStart),
        Start::SampleFromTrial { burn_in, initial } => {
            let mut state = match initial {
                Some(x) => stepper.start(x.clone()).map_err(WalkError::BadStart)?,
                None => {
                    let mut tries = 0;
                    loop {
                        let x = Configuration(ham.initial_guess(rng));
                        match stepper.start(x) {
                            Ok(s) => break s,
                            Err(e) if tries >= params.max_retries => {
                                return Err(WalkError::BadStart(e))
                            }
                            Err(_) => tries += 1,
                        }
                    }
                }
            };
            let steps = params.to_steps(*burn_in).unwrap_or(0);
            stepper.burn_in(&mut state, steps, rng)?;
            Ok(state)
        }
    }
}

/// Runs one path to `t_max`, recording a snapshot at every horizon.
pub fn simulate_path<H: Hamiltonian + ?Sized>(
    ham: &H,
    trial: Option<&dyn TrialFunction>,
    lambda_t: f64,
    params: &WalkParams,
    index: u64,
) -> Result<PathResult, WalkError> {
    let mut rng = path_rng(params.seed, index);
    let mut stepper = Stepper::new(ham, trial, lambda_t, params.steps_per_unit, params.max_retries);
    let horizon_steps: Vec<u64> = params.horizons.iter().map(|&h| params.to_steps(h).unwrap()).collect();
    let total = params.to_steps(params.t_max).unwrap();
    let mut snapshots = Vec::with_capacity(horizon_steps.len());
    let aborted = |hits: u64, snapshots: Vec<Snapshot>| PathResult {
        index,
        aborted: true,
        singular_hits: hits,
        snapshots,
    };
    let mut state = match starting_state(&mut stepper, ham, params, &mut rng) {
        Ok(s) => s,
        Err(WalkError::PathAborted { .. }) => return Ok(aborted(0, snapshots)),
        Err(e) => return Err(e),
    };
    let mut next = 0;
    for _ in 0..total {
        match stepper.step(&mut state, &mut rng) {
            Ok(()) => {}
            Err(WalkError::PathAborted { .. }) => return Ok(aborted(state.singular_hits, snapshots)),
            Err(e) => return Err(e),
        }
        if next < horizon_steps.len() && state.steps == horizon_steps[next] {
            snapshots.push(Snapshot {
                t: params.horizons[next],
                log_weight: -state.action_sum,
                properties: state.properties(),
            });
            next += 1;
        }
    }
    Ok(PathResult {
        index,
        aborted: false,
        singular_hits: state.singular_hits,
        snapshots,
    })
}

/// Execution settings that do not affect the numbers produced.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Per-path checkpoint file; completed paths found there are not re-run.
    pub checkpoint: Option<PathBuf>,
    /// Identifies the run in the checkpoint header. Defaults to a hash of the
    /// walk parameters and `λ_T`.
    pub fingerprint: Option<[u8; 32]>,
}

/// Runs `n_rep` independent paths and reduces them, in path order, into an
/// [`EnsembleResult`]. Results do not depend on the worker count.
pub fn run_ensemble<H: Hamiltonian + ?Sized>(
    ham: &H,
    trial: Option<&dyn TrialFunction>,
    lambda_t: f64,
    params: &WalkParams,
) -> Result<EnsembleResult, WalkError> {
    run_ensemble_with(ham, trial, lambda_t, params, &RunOptions::default())
}

pub fn run_ensemble_with<H: Hamiltonian + ?Sized>(
    ham: &H,
    trial: Option<&dyn TrialFunction>,
    lambda_t: f64,
    params: &WalkParams,
    options: &RunOptions,
) -> Result<EnsembleResult, WalkError> {
    params.validate()?;
    if let Start::Fixed(x) | Start::SampleFromTrial { initial: Some(x), .. } = &params.start {
        if x.dim() != ham.dim() {
            return Err(WalkError::BadStart(
                SystemError::DimensionMismatch {
                    expected: ham.dim(),
                    got: x.dim(),
                }
                .into(),
            ));
        }
    }
    let paths = match options.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| WalkError::Pool(e.to_string()))?
            .install(|| collect_paths(ham, trial, lambda_t, params, options))?,
        None => collect_paths(ham, trial, lambda_t, params, options)?,
    };
    let aborted = paths.iter().filter(|p| p.aborted).count() as u64;
    let bound = params.max_abort_fraction;
    if aborted as f64 > bound * params.n_rep as f64 {
        return Err(WalkError::TooManyAborted {
            aborted,
            n_rep: params.n_rep as u64,
            bound,
        });
    }
    let names: Vec<String> = PROPERTY_NAMES.iter().map(|s| s.to_string()).collect();
    Ok(EnsembleResult::from_paths(
        lambda_t,
        params.steps_per_unit,
        &params.horizons,
        names,
        &paths,
    )?)
}

const BATCH: usize = 512;

fn collect_paths<H: Hamiltonian + ?Sized>(
    ham: &H,
    trial: Option<&dyn TrialFunction>,
    lambda_t: f64,
    params: &WalkParams,
    options: &RunOptions,
) -> Result<Vec<PathResult>, WalkError> {
    let run = |index: u64| simulate_path(ham, trial, lambda_t, params, index);
    let Some(path) = &options.checkpoint else {
        return (0..params.n_rep as u64).into_par_iter().map(run).collect();
    };
    let header = CheckpointHeader {
        fingerprint: options.fingerprint.unwrap_or_else(|| checkpoint::fingerprint(params, lambda_t)),
        seed: params.seed,
        horizons: params.horizons.clone(),
        n_properties: PROPERTY_NAMES.len() as u32,
    };
    let mut done = checkpoint::load(path, &header)?;
    let mut writer = checkpoint::Writer::open(path, &header)?;
    let todo: Vec<u64> = (0..params.n_rep as u64).filter(|i| !done.contains_key(i)).collect();
    for batch in todo.chunks(BATCH) {
        let results: Vec<PathResult> = batch.par_iter().map(|&i| run(i)).collect::<Result<_, _>>()?;
        for r in results {
            writer.append(&r)?;
            done.insert(r.index, r);
        }
        writer.flush()?;
    }
    Ok((0..params.n_rep as u64).map(|i| done.remove(&i).unwrap()).collect())
}

/// Mean local energy under the drifted walk after burn-in, with the
/// standard error across walkers. Walker `i` uses stream `i` of the budget seed.
pub fn sample_local_energy<H: Hamiltonian + ?Sized>(
    trial: &dyn TrialFunction,
    ham: &H,
    initial: Option<&Configuration>,
    budget: &SamplerBudget,
) -> Result<(f64, f64), TrialError> {
    if budget.walkers < 2 || budget.steps_per_unit == 0 || !(budget.sample_time > 0.0) {
        return Err(TrialError::Invalid("sampler budget is empty".into()));
    }
    let n = budget.steps_per_unit as f64;
    let burn = (budget.burn_in * n).round() as u64;
    let samples = ((budget.sample_time * n).round() as u64).max(1);
    let means: Vec<Option<f64>> = (0..budget.walkers as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(budget.seed, i);
            let mut stepper = Stepper::new(ham, Some(trial), 0.0, budget.steps_per_unit, MAX_RETRIES);
            let x = match initial {
                Some(x) => x.clone(),
                None => Configuration(ham.initial_guess(&mut rng)),
            };
            let mut state = stepper.start(x).ok()?;
            stepper.burn_in(&mut state, burn, &mut rng).ok()?;
            let mut sum = 0.0;
            for _ in 0..samples {
                stepper.step(&mut state, &mut rng).ok()?;
                sum += state.current.local_energy;
            }
            Some(sum / samples as f64)
        })
        .collect();
    let ok: Vec<f64> = means.into_iter().flatten().collect();
    if ok.len() < 2 {
        return Err(TrialError::Invalid("too few walkers survived".into()));
    }
    let m = ok.len() as f64;
    let mean = ok.iter().sum::<f64>() / m;
    let var = ok.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
    Ok((mean, (var / m).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimate::energy_at_t;
    use crate::system::presets::hydrogen_atom_bo;
    use crate::system::HarmonicWell;
    use crate::trial::{AtomicProductTrial, GaussianTrial};

    #[test]
    fn increment_magnitude() {
        let mut rng = path_rng(7, 0);
        let inc = binomial_increment(&mut rng, 30, 100);
        for v in inc {
            assert!((v.abs() - 0.1825742).abs() < 1e-7);
            assert_eq!(v.abs(), 1.0 / 30f64.sqrt());
        }
    }

    #[test]
    fn zero_drift_step_is_half() {
        let well = Free(vec![1.0]);
        let mut stepper = Stepper::new(&well, None, 0.0, 4, MAX_RETRIES);
        let mut rng = path_rng(1, 0);
        let (mut up, mut down) = (0, 0);
        for _ in 0..2000 {
            let mut s = stepper.start(Configuration(vec![0.0])).unwrap();
            stepper.step(&mut s, &mut rng).unwrap();
            match s.position.0[0] {
                0.5 => up += 1,
                -0.5 => down += 1,
                x => panic!("unexpected position {x}"),
            }
        }
        // binomial(2000, ½): 4σ ≈ 89
        assert!((up as i64 - down as i64).abs() < 180, "{up} vs {down}");
    }

    /// Free coordinates with the given walk scales and no potential.
    struct Free(Vec<f64>);

    impl Hamiltonian for Free {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn n_coords(&self) -> usize {
            self.0.len()
        }
        fn walk_scales(&self) -> Vec<f64> {
            self.0.clone()
        }
        fn coordinate_map(&self) -> Vec<(usize, f64)> {
            (0..self.0.len()).map(|k| (k, 1.0)).collect()
        }
        fn to_physical(&self, walk: &[f64], out: &mut [f64]) {
            out.copy_from_slice(walk)
        }
        fn potential_at(&self, _: &[f64]) -> Result<f64, SystemError> {
            Ok(0.0)
        }
        fn initial_guess(&self, _: &mut dyn RngCore) -> Vec<f64> {
            vec![0.0; self.0.len()]
        }
    }

    #[test]
    fn drift_dominates_far_out() {
        let well = HarmonicWell::new(3, 1.0);
        let t = GaussianTrial::new(0.5).unwrap();
        let mut stepper = Stepper::new(&well, Some(&t as &dyn TrialFunction), 1.5, 30, MAX_RETRIES);
        let x0 = vec![10.0, -6.0, 4.0];
        let mut rng = path_rng(3, 0);
        let mut mean = [0.0; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let mut s = stepper.start(Configuration(x0.clone())).unwrap();
            stepper.step(&mut s, &mut rng).unwrap();
            for c in 0..3 {
                mean[c] += (s.position.0[c] - x0[c]) / draws as f64;
            }
        }
        let se = (1.0 / 30.0 / draws as f64).sqrt();
        for c in 0..3 {
            let expected = -2.0 * 0.5 * x0[c] / 30.0;
            assert!((mean[c] - expected).abs() < 4.0 * se, "{c}: {} vs {expected}", mean[c]);
        }
    }

    #[test]
    fn exact_trial_keeps_action_linear() {
        let spec = hydrogen_atom_bo();
        let t = AtomicProductTrial::new(1.0, vec![0], vec![1], false).unwrap();
        let lambda = -0.3;
        let mut stepper = Stepper::new(&spec, Some(&t as &dyn TrialFunction), lambda, 30, MAX_RETRIES);
        let mut rng = path_rng(5, 2);
        let mut s = stepper.start(Configuration(vec![0.3, 0.2, 1.0])).unwrap();
        for _ in 0..300 {
            stepper.step(&mut s, &mut rng).unwrap();
            let expected = (-0.5 - lambda) * s.elapsed;
            assert!((s.action_sum - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn free_walk_has_unit_weight() {
        let params = WalkParams::new(10, vec![1.0, 2.0, 3.0, 4.0], 50, 9)
            .with_start(Start::Fixed(Configuration(vec![0.0])));
        let ens = run_ensemble(&Free(vec![1.0]), None, 0.0, &params).unwrap();
        for (k, h) in ens.horizons.iter().enumerate() {
            assert_eq!(h.log_mean_weight, 0.0);
            let e = energy_at_t(&ens, params.horizons[k]).unwrap();
            assert_eq!(e.energy, 0.0);
        }
    }

    #[test]
    fn invalid_params() {
        let p = WalkParams::new(30, vec![1.0, 0.5], 10, 0);
        assert!(p.validate().is_err());
        let p = WalkParams::new(30, vec![1.01], 10, 0);
        assert!(p.validate().is_err());
        let p = WalkParams::new(30, vec![1.0], 1, 0);
        assert!(p.validate().is_err());
        let p = WalkParams::new(30, vec![], 10, 0);
        assert!(p.validate().is_err());
        assert!(WalkParams::new(30, vec![8.0, 16.0], 10, 0).validate().is_ok());
    }

    #[test]
    fn singular_start_is_rejected() {
        // every path starts on top of the nucleus and cannot be evaluated
        let spec = hydrogen_atom_bo();
        let params = WalkParams::new(10, vec![1.0], 10, 0).with_start(Start::Fixed(Configuration(vec![0.0; 3])));
        assert!(matches!(
            run_ensemble(&spec, None, 0.0, &params),
            Err(WalkError::BadStart(_))
        ));
    }
    #[test]
    fn increment_moments() {
        let draws = 1_000_000;
        let n = 30;
        let mut rng = path_rng(2024, 0);
        let (mut s0, mut s00, mut s01) = (0.0, 0.0, 0.0);
        for _ in 0..draws {
            let v = binomial_increment(&mut rng, n, 2);
            s0 += v[0];
            s00 += v[0] * v[0];
            s01 += v[0] * v[1];
        }
        let m = draws as f64;
        let step = 1.0 / (n as f64).sqrt();
        assert!((s0 / m).abs() < 4.0 * 1e-3 * step);
        let var = s00 / m - (s0 / m).powi(2);
        assert!((var * n as f64 - 1.0).abs() < 0.01);
        // products of independent ±1/√n have variance 1/n²
        assert!((s01 / m).abs() < 4.0 * 1e-3 / n as f64);
    }

    #[test]
    fn free_covariance_grows_linearly() {
        let scales = vec![1.0, 0.5, 0.0233370];
        let free = Free(scales.clone());
        let mut stepper = Stepper::new(&free, None, 0.0, 10, MAX_RETRIES);
        let paths = 20_000;
        let t_steps = 20;
        let t = t_steps as f64 / 10.0;
        let mut cov = [[0.0; 3]; 3];
        for i in 0..paths {
            let mut rng = path_rng(8, i);
            let mut s = stepper.start(Configuration(vec![0.0; 3])).unwrap();
            for _ in 0..t_steps {
                stepper.step(&mut s, &mut rng).unwrap();
            }
            for a in 0..3 {
                for b in 0..3 {
                    cov[a][b] += s.position.0[a] * s.position.0[b] / paths as f64;
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let target = if a == b { t * scales[a] * scales[a] } else { 0.0 };
                let sd = t * scales[a] * scales[b] * (2.0 / paths as f64).sqrt();
                assert!((cov[a][b] - target).abs() < 4.0 * sd, "{a}{b}: {} vs {target}", cov[a][b]);
            }
        }
    }

    #[test]
    fn oscillator_ground_state_1d() {
        let well = HarmonicWell::new(1, 1.0);
        let trial = GaussianTrial::new(0.4).unwrap();
        let params = WalkParams::new(30, vec![2.0, 4.0, 6.0, 8.0], 5000, 17);
        let ens = run_ensemble(&well, Some(&trial as &dyn TrialFunction), 0.5, &params).unwrap();
        let e = energy_at_t(&ens, 8.0).unwrap();
        assert!((e.energy - 0.5).abs() < 3.0 * e.sigma, "{} ± {}", e.energy, e.sigma);
        assert!(e.sigma_jackknife < 2.0 * e.sigma && e.sigma < 2.0 * e.sigma_jackknife);
    }

    #[test]
    fn results_do_not_depend_on_workers() {
        let spec = hydrogen_atom_bo();
        let trial = AtomicProductTrial::new(0.9, vec![0], vec![1], false).unwrap();
        let params = WalkParams::new(20, vec![1.0, 2.0], 300, 99);
        let run = |w| {
            let opts = RunOptions {
                workers: Some(w),
                ..Default::default()
            };
            run_ensemble_with(&spec, Some(&trial as &dyn TrialFunction), -0.5, &params, &opts).unwrap()
        };
        let one = run(1);
        assert_eq!(one, run(3));
        assert_eq!(one, run_ensemble(&spec, Some(&trial as &dyn TrialFunction), -0.5, &params).unwrap());
        let other = run_ensemble(
            &spec,
            Some(&trial as &dyn TrialFunction),
            -0.5,
            &WalkParams { seed: 100, ..params.clone() },
        )
        .unwrap();
        assert_ne!(one, other);
    }

    #[test]
    fn checkpoint_resume_matches() {
        let spec = hydrogen_atom_bo();
        let trial = AtomicProductTrial::new(0.9, vec![0], vec![1], false).unwrap();
        let t: Option<&dyn TrialFunction> = Some(&trial);
        let params = WalkParams::new(20, vec![1.0, 2.0], 200, 5);
        let plain = run_ensemble(&spec, t, -0.5, &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let opts = RunOptions {
            checkpoint: Some(path.clone()),
            ..Default::default()
        };
        assert_eq!(run_ensemble_with(&spec, t, -0.5, &params, &opts).unwrap(), plain);
        // cut the file mid-record and resume
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert_eq!(run_ensemble_with(&spec, t, -0.5, &params, &opts).unwrap(), plain);
        assert_eq!(std::fs::read(&path).unwrap().len(), bytes.len());
        // a different run refuses the file
        let other = WalkParams { seed: 6, ..params };
        assert!(matches!(
            run_ensemble_with(&spec, t, -0.5, &other, &opts),
            Err(WalkError::Checkpoint(_))
        ));
    }

    #[test]
    fn mean_local_energy_of_wide_gaussian() {
        // ⟨E_L⟩ under exp(−2σr²) in 3-d is 3σ/2 + 3/(8σ)
        let well = HarmonicWell::new(3, 1.0);
        let trial = GaussianTrial::new(0.3).unwrap();
        let budget = SamplerBudget {
            walkers: 200,
            steps_per_unit: 1000,
            burn_in: 2.0,
            sample_time: 10.0,
            seed: 1,
            max_stderr: 0.05,
        };
        let (mean, se) = crate::trial::lambda_t_estimate(&trial, &well, None, &budget).unwrap();
        assert!((mean - 1.7).abs() < 3.0 * se, "{mean} ± {se}");
    }
}
