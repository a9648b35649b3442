//! Noisy data, Gaussian likelihood and a trans-dimensional Metropolis–Hastings
//! sampler over `(W, γ, B, θ)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compiler::{compile_spline_network, derive_gadgets, CompileOptions};
use crate::error::{Error, Result};
use crate::jet::Jet2;
use crate::network::{ClipSpec, Evaluator, NetworkParams, Scratch};
use crate::pde::{EllipticProblem, LossConfig, LossParts, PopulationLoss, SiteCoeffs};
use crate::prior::{log_prior_density, sample_prior, PriorConfig};
use crate::spline::{basis_jets, uniform_grid, SplineCoeffs, SplineSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub x: Vec<f64>,
    pub value: f64,
}

/// Interior observations `(X_i, f_i)` and boundary observations `(Y_j, g_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub interior: Vec<Observation>,
    pub boundary: Vec<Observation>,
}

impl Dataset {
    /// A dataset with no observations; the posterior then equals the prior.
    pub fn empty(dim: usize) -> Self {
        Dataset {
            dim,
            n: 0,
            seed: 0,
            interior: Vec::new(),
            boundary: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.interior.is_empty() && self.boundary.is_empty()
    }
}

/// Draws `n` interior and `n` boundary points with unit Gaussian noise.
pub fn generate_dataset(problem: &EllipticProblem, n: usize, seed: u64) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::InvalidArgument("dataset size must be >= 1".into()));
    }
    let dom = &problem.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut interior = Vec::with_capacity(n);
    for _ in 0..n {
        let x = dom.sample_interior(&mut rng);
        let eps: f64 = rng.sample(StandardNormal);
        interior.push(Observation {
            value: (problem.f)(&x) + eps,
            x,
        });
    }
    let mut boundary = Vec::with_capacity(n);
    for _ in 0..n {
        let y = dom.sample_boundary(&mut rng);
        let eta: f64 = rng.sample(StandardNormal);
        boundary.push(Observation {
            value: (problem.g)(&y) + eta,
            x: y,
        });
    }
    Ok(Dataset {
        dim: dom.dim,
        n,
        seed,
        interior,
        boundary,
    })
}

/// Clip used for the network class: identity on `[−K−1, K+1]`.
pub fn clip_for(problem: &EllipticProblem) -> ClipSpec {
    ClipSpec::new(problem.k_bound + 1.0)
}

/// Problem, data and clip with coefficients frozen at the interior sites.
#[derive(Debug, Clone)]
pub struct Model<'a> {
    pub problem: &'a EllipticProblem,
    pub dataset: &'a Dataset,
    pub clip: ClipSpec,
    sites: Vec<SiteCoeffs>,
}

impl<'a> Model<'a> {
    pub fn new(problem: &'a EllipticProblem, dataset: &'a Dataset) -> Result<Self> {
        if dataset.dim != problem.dim() {
            return Err(Error::DimensionMismatch {
                expected: problem.dim(),
                got: dataset.dim,
            });
        }
        Ok(Model {
            problem,
            dataset,
            clip: clip_for(problem),
            sites: dataset
                .interior
                .iter()
                .map(|o| problem.coeffs.at(&o.x))
                .collect(),
        })
    }

    fn predict(&self, ev: &Evaluator, scratch: &mut Scratch) -> (Vec<Jet2>, Vec<f64>) {
        let jets = self
            .dataset
            .interior
            .iter()
            .map(|o| ev.forward_jet(&self.clip, &o.x, scratch))
            .collect();
        let vals = self
            .dataset
            .boundary
            .iter()
            .map(|o| ev.forward_value(&self.clip, &o.x, scratch))
            .collect();
        (jets, vals)
    }

    fn log_lik_from(&self, jets: &[Jet2], vals: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((o, c), j) in self.dataset.interior.iter().zip(&self.sites).zip(jets) {
            let r = o.value - c.apply(j);
            s += r * r;
        }
        for (o, v) in self.dataset.boundary.iter().zip(vals) {
            let r = o.value - v;
            s += r * r;
        }
        -0.5 * s
    }
}

/// `−½ Σ (f_i − L u(X_i))² − ½ Σ (g_j − u(Y_j))²` with `u = clip ∘ f_θ`.
pub fn log_likelihood(params: &NetworkParams, dataset: &Dataset, problem: &EllipticProblem) -> Result<f64> {
    params.validate()?;
    let model = Model::new(problem, dataset)?;
    let (j, v) = model.predict(&params.evaluator(), &mut Scratch::default());
    Ok(model.log_lik_from(&j, &v))
}

/// Current state of one chain with cached predictions at the data sites.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub params: NetworkParams,
    pub interior_jets: Vec<Jet2>,
    pub boundary_values: Vec<f64>,
    pub log_lik: f64,
    pub log_prior: f64,
    evaluator: Evaluator,
}

impl ChainState {
    pub fn new(params: NetworkParams, model: &Model, prior: &PriorConfig) -> Result<Self> {
        params.validate()?;
        let log_prior = log_prior_density(prior, &params);
        if !log_prior.is_finite() {
            return Err(Error::InvalidParams(format!(
                "initial state has zero prior density (depth {} vs prior depth {})",
                params.arch.depth, prior.depth
            )));
        }
        let evaluator = params.evaluator();
        let (interior_jets, boundary_values) = model.predict(&evaluator, &mut Scratch::default());
        let log_lik = model.log_lik_from(&interior_jets, &boundary_values);
        Ok(ChainState {
            params,
            interior_jets,
            boundary_values,
            log_lik,
            log_prior,
            evaluator,
        })
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    /// Recomputes everything from scratch and compares with the caches.
    pub fn verify(&self, model: &Model, prior: &PriorConfig) -> Result<()> {
        self.params.validate()?;
        let fresh = ChainState::new(self.params.clone(), model, prior)?;
        let tol = 1e-9 * (1.0 + self.log_lik.abs());
        if (fresh.log_lik - self.log_lik).abs() > tol {
            return Err(Error::InconsistentCache(format!(
                "log-likelihood {} cached vs {} recomputed",
                self.log_lik, fresh.log_lik
            )));
        }
        if (fresh.log_prior - self.log_prior).abs() > 1e-9 * (1.0 + self.log_prior.abs()) {
            return Err(Error::InconsistentCache(format!(
                "log-prior {} cached vs {} recomputed",
                self.log_prior, fresh.log_prior
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Move {
    WeightWalk,
    MaskFlip,
    Width,
    Bound,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::WeightWalk, Move::MaskFlip, Move::Width, Move::Bound];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoveProbs {
    pub weight_walk: f64,
    pub mask_flip: f64,
    pub width: f64,
    pub bound: f64,
}

impl Default for MoveProbs {
    fn default() -> Self {
        MoveProbs {
            weight_walk: 0.7,
            mask_flip: 0.15,
            width: 0.05,
            bound: 0.1,
        }
    }
}

impl MoveProbs {
    fn as_array(&self) -> [f64; 4] {
        [self.weight_walk, self.mask_flip, self.width, self.bound]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub move_probs: MoveProbs,
    /// Weight-walk standard deviation as a fraction of `B`.
    pub step_size: f64,
    /// Standard deviation of the log-normal bound proposal.
    pub bound_step: f64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
    /// Tune the weight-walk step towards 23.4% acceptance during burn-in.
    pub adapt_step: bool,
    /// Recheck caches every 1000 steps.
    pub debug_checks: bool,
    /// Radii multipliers `M` for the posterior-mass diagnostic.
    pub m_grid: Vec<f64>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            move_probs: MoveProbs::default(),
            step_size: 0.05,
            bound_step: 0.1,
            iterations: 10_000,
            burn_in: 2_000,
            thin: 10,
            chains: 1,
            seed: 0,
            adapt_step: true,
            debug_checks: false,
            m_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.move_probs.as_array();
        if p.iter().any(|&v| !(v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "move probabilities must be nonnegative and sum to 1, got {p:?}"
            )));
        }
        if !(self.step_size >= 0.0) || !(self.bound_step >= 0.0) {
            return Err(Error::InvalidArgument("step sizes must be >= 0".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidArgument("need at least one chain".into()));
        }
        if self.thin == 0 || self.burn_in + self.thin > self.iterations {
            return Err(Error::NoSamples {
                iterations: self.iterations,
                burn_in: self.burn_in,
                thin: self.thin,
            });
        }
        Ok(())
    }
}

/// Proposal and acceptance counts per move type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveStats {
    pub proposed: [u64; 4],
    pub accepted: [u64; 4],
}

impl MoveStats {
    pub fn rate(&self, m: Move) -> f64 {
        let i = m.index();
        if self.proposed[i] == 0 {
            f64::NAN
        } else {
            self.accepted[i] as f64 / self.proposed[i] as f64
        }
    }

    fn merge(&mut self, o: &MoveStats) {
        for i in 0..4 {
            self.proposed[i] += o.proposed[i];
            self.accepted[i] += o.accepted[i];
        }
    }
}

/// Metropolis–Hastings accept test on a log ratio with uniform draw `u`.
pub fn mh_accept(log_ratio: f64, u: f64) -> bool {
    log_ratio >= 0.0 || u < log_ratio.exp()
}

/// Log acceptance ratio for activating one coordinate with a slab draw.
///
/// The slab density `1/(2B)` in the target cancels against the proposal
/// density of the birth draw, leaving the prior odds of activation.
pub fn birth_log_ratio(log_p_active: f64, log_p_inactive: f64, delta_log_lik: f64) -> f64 {
    delta_log_lik + log_p_active - log_p_inactive
}

/// Reverse of [`birth_log_ratio`].
pub fn death_log_ratio(log_p_active: f64, log_p_inactive: f64, delta_log_lik: f64) -> f64 {
    delta_log_lik + log_p_inactive - log_p_active
}

/// Reflects `v` into `[−b, b]`.
pub fn reflect(v: f64, b: f64) -> f64 {
    let period = 4.0 * b;
    let mut r = (v + b).rem_euclid(period);
    if r > 2.0 * b {
        r = period - r;
    }
    (r - b).clamp(-b, b)
}

fn pick_move<R: Rng + ?Sized>(probs: &MoveProbs, rng: &mut R) -> Move {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, p) in Move::ALL.iter().zip(probs.as_array()) {
        acc += p;
        if u < acc {
            return *m;
        }
    }
    // Rounding in the cumulative sum; fall back to the last move with mass.
    *Move::ALL
        .iter()
        .zip(probs.as_array())
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map(|(m, _)| m)
        .unwrap_or(&Move::WeightWalk)
}

/// Proposes a new θ; accepts or rejects against the likelihood and prior.
fn try_theta(
    state: &mut ChainState,
    params: NetworkParams,
    log_extra: f64,
    model: &Model,
    prior: &PriorConfig,
    scratch: &mut Scratch,
    u: f64,
) -> bool {
    let ev = params.evaluator();
    let (jets, vals) = if model.dataset.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        model.predict(&ev, scratch)
    };
    let ll = model.log_lik_from(&jets, &vals);
    let lp = log_prior_density(prior, &params);
    let ratio = ll - state.log_lik + log_extra;
    if lp.is_finite() && mh_accept(ratio, u) {
        state.params = params;
        state.evaluator = ev;
        state.interior_jets = jets;
        state.boundary_values = vals;
        state.log_lik = ll;
        state.log_prior = lp;
        true
    } else {
        false
    }
}

/// One MH transition. `step_size` is the current weight-walk scale.
#[allow(clippy::too_many_arguments)]
pub fn mcmc_step<R: Rng + ?Sized>(
    state: &mut ChainState,
    cfg: &McmcConfig,
    step_size: f64,
    prior: &PriorConfig,
    model: &Model,
    rng: &mut R,
    scratch: &mut Scratch,
) -> (Move, bool) {
    let mv = pick_move(&cfg.move_probs, rng);
    let accepted = match mv {
        Move::WeightWalk => {
            let active: Vec<usize> = state
                .params
                .arch
                .mask
                .iter()
                .enumerate()
                .filter_map(|(i, &m)| m.then_some(i))
                .collect();
            if active.is_empty() {
                // Identity proposal.
                true
            } else {
                let i = active[rng.random_range(0..active.len())];
                let b = state.params.bound;
                let z: f64 = rng.sample(StandardNormal);
                let mut p = state.params.clone();
                p.theta[i] = reflect(p.theta[i] + step_size * b * z, b);
                let u = rng.random();
                if step_size == 0.0 {
                    mh_accept(0.0, u)
                } else {
                    try_theta(state, p, 0.0, model, prior, scratch, u)
                }
            }
        }
        Move::MaskFlip => {
            let t = state.params.arch.num_params();
            let i = rng.random_range(0..t);
            let (lp, lq) = prior.log_activation(t);
            let b = state.params.bound;
            let mut p = state.params.clone();
            let extra = if p.arch.mask[i] {
                p.arch.mask[i] = false;
                p.theta[i] = 0.0;
                lq - lp
            } else {
                p.arch.mask[i] = true;
                p.theta[i] = rng.random_range(-b..=b);
                lp - lq
            };
            let u = rng.random();
            try_theta(state, p, extra, model, prior, scratch, u)
        }
        Move::Width => {
            let grow: bool = rng.random();
            let u: f64 = rng.random();
            let proposal = if grow {
                Some(state.params.grow_width())
            } else {
                state.params.shrink_width()
            };
            match proposal {
                Some(p) => {
                    // The function is unchanged, so only the prior moves.
                    let lp = log_prior_density(prior, &p);
                    if lp.is_finite() && mh_accept(lp - state.log_prior, u) {
                        state.evaluator = p.evaluator();
                        state.params = p;
                        state.log_prior = lp;
                        true
                    } else {
                        false
                    }
                }
                None => false,
            }
        }
        Move::Bound => {
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.random();
            let b = state.params.bound;
            let nb = b * (cfg.bound_step * z).exp();
            if nb < state.params.max_abs_weight() || !(nb > 0.0) || !nb.is_finite() {
                false
            } else {
                let mut p = state.params.clone();
                p.bound = nb;
                let lp = log_prior_density(prior, &p);
                // Log-normal proposal: q(b | nb) / q(nb | b) = nb / b.
                if lp.is_finite() && mh_accept(lp - state.log_prior + (nb / b).ln(), u) {
                    state.params.bound = nb;
                    state.log_prior = lp;
                    true
                } else {
                    false
                }
            }
        }
    };
    (mv, accepted)
}

/// Starting point of a chain.
#[derive(Debug, Clone)]
pub enum Init {
    Prior,
    Params(NetworkParams),
}

/// One retained sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub chain: usize,
    pub iter: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "S")]
    pub sparsity: usize,
    #[serde(rename = "B")]
    pub bound: f64,
    pub loglik: f64,
    pub pop_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
    pub mean: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quantiles {
    pub fn from_values(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(|a, b| a.total_cmp(b));
        Quantiles {
            q05: quantile(&s, 0.05),
            q25: quantile(&s, 0.25),
            q50: quantile(&s, 0.5),
            q75: quantile(&s, 0.75),
            q95: quantile(&s, 0.95),
            mean: s.iter().sum::<f64>() / s.len() as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub weight_walk: f64,
    pub mask_flip: f64,
    pub width: f64,
    pub bound: f64,
}

/// Target rate `ε_n = n^{−(β−2)/(d+2(β−2))} · (log n)^{1/2}`.
pub fn contraction_rate(n: usize, dim: usize, beta: f64) -> f64 {
    let n = n as f64;
    let e = (beta - 2.0) / (dim as f64 + 2.0 * (beta - 2.0));
    n.powf(-e) * n.ln().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n: usize,
    pub dim: usize,
    pub retained: usize,
    /// Population loss of the posterior mean `ū_n`.
    pub mean_loss: LossParts,
    pub sample_losses: Quantiles,
    pub eps_n: f64,
    pub m_grid: Vec<f64>,
    /// Fraction of samples with loss above `M² ε_n²`, per `M`.
    pub mass_outside: Vec<f64>,
    pub acceptance: AcceptanceRates,
    pub final_step_sizes: Vec<f64>,
    pub eval_grid: Vec<Vec<f64>>,
    pub mean_on_grid: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PosteriorRun {
    pub summary: PosteriorSummary,
    pub samples: Vec<SampleRecord>,
}

/// Evaluation grid for `ū_n`: 512 points in 1-d, 64×64 in 2-d, 16³ in 3-d.
pub fn evaluation_grid(dim: usize) -> Vec<Vec<f64>> {
    let per_axis = match dim {
        1 => 512,
        2 => 64,
        _ => 16,
    };
    // Cell midpoints stay strictly inside the box.
    uniform_grid(dim, per_axis + 1)
        .into_iter()
        .filter(|x| x.iter().all(|&v| v < 1.0))
        .map(|x| x.iter().map(|v| v + 0.5 / per_axis as f64).collect())
        .collect()
}

struct ChainOutput {
    samples: Vec<SampleRecord>,
    sum_jets: Vec<Jet2>,
    sum_bvals: Vec<f64>,
    sum_grid: Vec<f64>,
    stats: MoveStats,
    step: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_one(
    chain: usize,
    cfg: &McmcConfig,
    prior: &PriorConfig,
    model: &Model,
    pop: &PopulationLoss,
    grid: &[Vec<f64>],
    init: &Init,
) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let d = model.problem.dim();
    let params = match init {
        Init::Prior => sample_prior(prior, d, &mut rng)?,
        Init::Params(p) => p.clone(),
    };
    let mut state = ChainState::new(params, model, prior)?;
    let mut scratch = Scratch::default();
    let mut out = ChainOutput {
        samples: Vec::new(),
        sum_jets: vec![Jet2::zero(d); pop.rule.interior.len()],
        sum_bvals: vec![0.0; pop.rule.boundary.len()],
        sum_grid: vec![0.0; grid.len()],
        stats: MoveStats::default(),
        step: cfg.step_size,
    };
    let mut log_step = cfg.step_size.ln();
    let mut walk_count = 0usize;
    let record = |t: usize, state: &ChainState, out: &mut ChainOutput, scratch: &mut Scratch| {
        let ev = state.evaluator();
        let jets: Vec<Jet2> = pop
            .rule
            .interior
            .iter()
            .map(|x| ev.forward_jet(&model.clip, x, scratch))
            .collect();
        let bvals: Vec<f64> = pop
            .rule
            .boundary
            .iter()
            .map(|y| ev.forward_value(&model.clip, y, scratch))
            .collect();
        let loss = pop.eval_cached(&jets, &bvals);
        for (s, j) in out.sum_jets.iter_mut().zip(&jets) {
            s.axpy(1.0, j);
        }
        for (s, v) in out.sum_bvals.iter_mut().zip(&bvals) {
            *s += v;
        }
        for (s, x) in out.sum_grid.iter_mut().zip(grid) {
            *s += ev.forward_value(&model.clip, x, scratch);
        }
        out.samples.push(SampleRecord {
            chain,
            iter: t,
            width: state.params.arch.width,
            sparsity: state.params.sparsity(),
            bound: state.params.bound,
            loglik: state.log_lik,
            pop_loss: loss.total,
        });
    };
    for t in 1..=cfg.iterations {
        let step = if cfg.step_size > 0.0 { log_step.exp() } else { 0.0 };
        let (mv, acc) = mcmc_step(&mut state, cfg, step, prior, model, &mut rng, &mut scratch);
        out.stats.proposed[mv.index()] += 1;
        out.stats.accepted[mv.index()] += acc as u64;
        if cfg.adapt_step && t <= cfg.burn_in && mv == Move::WeightWalk && cfg.step_size > 0.0 {
            walk_count += 1;
            let gain = (walk_count as f64 + 10.0).powf(-0.6);
            log_step += gain * (acc as u8 as f64 - 0.234);
            log_step = log_step.clamp(-30.0, 2.0);
        }
        if cfg.debug_checks && t % 1000 == 0 {
            state.verify(model, prior)?;
        }
        if t > cfg.burn_in && (t - cfg.burn_in) % cfg.thin == 0 {
            record(t, &state, &mut out, &mut scratch);
        }
    }
    out.step = if cfg.step_size > 0.0 { log_step.exp() } else { 0.0 };
    Ok(out)
}

/// Runs `cfg.chains` chains in parallel and summarizes the retained samples.
pub fn run_chain(
    cfg: &McmcConfig,
    prior: &PriorConfig,
    dataset: &Dataset,
    problem: &EllipticProblem,
    loss_cfg: &LossConfig,
    init: &Init,
) -> Result<PosteriorRun> {
    cfg.validate()?;
    prior.validate()?;
    let model = Model::new(problem, dataset)?;
    let pop = PopulationLoss::new(problem, loss_cfg)?;
    let grid = evaluation_grid(problem.dim());
    let outputs: Vec<ChainOutput> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_one(c, cfg, prior, &model, &pop, &grid, init))
        .collect::<Result<_>>()?;

    let retained: usize = outputs.iter().map(|o| o.samples.len()).sum();
    if retained == 0 {
        return Err(Error::NoSamples {
            iterations: cfg.iterations,
            burn_in: cfg.burn_in,
            thin: cfg.thin,
        });
    }
    let d = problem.dim();
    let inv = 1.0 / retained as f64;
    let mut mean_jets = vec![Jet2::zero(d); pop.rule.interior.len()];
    let mut mean_bvals = vec![0.0; pop.rule.boundary.len()];
    let mut mean_grid = vec![0.0; grid.len()];
    let mut stats = MoveStats::default();
    for o in &outputs {
        for (m, s) in mean_jets.iter_mut().zip(&o.sum_jets) {
            m.axpy(inv, s);
        }
        for (m, s) in mean_bvals.iter_mut().zip(&o.sum_bvals) {
            *m += inv * s;
        }
        for (m, s) in mean_grid.iter_mut().zip(&o.sum_grid) {
            *m += inv * s;
        }
        stats.merge(&o.stats);
    }
    let samples: Vec<SampleRecord> = outputs.iter().flat_map(|o| o.samples.clone()).collect();
    let losses: Vec<f64> = samples.iter().map(|s| s.pop_loss).collect();
    let n = dataset.n;
    let eps_n = if n >= 2 {
        contraction_rate(n, d, problem.beta)
    } else {
        f64::NAN
    };
    let mass_outside = if eps_n.is_finite() {
        cfg.m_grid
            .iter()
            .map(|m| {
                let r = m * m * eps_n * eps_n;
                losses.iter().filter(|&&l| l > r).count() as f64 / losses.len() as f64
            })
            .collect()
    } else {
        Vec::new()
    };
    let summary = PosteriorSummary {
        n,
        dim: d,
        retained,
        mean_loss: pop.eval_cached(&mean_jets, &mean_bvals),
        sample_losses: Quantiles::from_values(&losses),
        eps_n,
        m_grid: cfg.m_grid.clone(),
        mass_outside,
        acceptance: AcceptanceRates {
            weight_walk: stats.rate(Move::WeightWalk),
            mask_flip: stats.rate(Move::MaskFlip),
            width: stats.rate(Move::Width),
            bound: stats.rate(Move::Bound),
        },
        final_step_sizes: outputs.iter().map(|o| o.step).collect(),
        eval_grid: grid,
        mean_on_grid: mean_grid,
    };
    Ok(PosteriorRun { summary, samples })
}

/// Least-squares spline fit of the data under the same residual weighting
/// as the likelihood.
pub fn least_squares_spline(
    problem: &EllipticProblem,
    dataset: &Dataset,
    spec: SplineSpec,
) -> Result<SplineCoeffs> {
    if dataset.interior.is_empty() || dataset.boundary.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = spec.num_coeffs();
    let rows = dataset.interior.len() + dataset.boundary.len();
    let mut a = DMatrix::<f64>::zeros(rows, p);
    let mut b = DVector::<f64>::zeros(rows);
    for (r, o) in dataset.interior.iter().enumerate() {
        let c = problem.coeffs.at(&o.x);
        for (q, j) in basis_jets(&spec, &o.x)? {
            a[(r, q)] = c.apply(&j);
        }
        b[r] = o.value;
    }
    let off = dataset.interior.len();
    for (r, o) in dataset.boundary.iter().enumerate() {
        for (q, j) in basis_jets(&spec, &o.x)? {
            a[(off + r, q)] = j.value;
        }
        b[off + r] = o.value;
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Singular(e.to_string()))?;
    Ok(SplineCoeffs {
        spec,
        coeffs: sol.iter().copied().collect(),
    })
}

/// Partition size `⌈c · n^{1/(d+2(β−2))}⌉` used for the data-driven start.
pub fn warm_start_partition(n: usize, dim: usize, beta: f64, c: f64) -> usize {
    let e = 1.0 / (dim as f64 + 2.0 * (beta - 2.0));
    ((c * (n as f64).powf(e)).ceil() as usize).max(1)
}

/// Compiles a least-squares spline fit into a network usable as a chain start.
///
/// Coefficients are clamped just inside `±(K+1)`, the identity region of the
/// model clip, so the compiled network reproduces the fit exactly.
pub fn warm_start(
    problem: &EllipticProblem,
    dataset: &Dataset,
    order: usize,
    partition: usize,
) -> Result<NetworkParams> {
    let spec = SplineSpec::new(order, partition, problem.dim())?;
    let mut coeffs = least_squares_spline(problem, dataset, spec)?;
    let scale = problem.k_bound + 1.0;
    let cap = scale * (1.0 - 1e-9);
    for c in coeffs.coeffs.iter_mut() {
        *c = c.clamp(-cap, cap);
    }
    let gadgets = derive_gadgets()?;
    let net = compile_spline_network(
        &coeffs,
        &gadgets,
        &CompileOptions {
            clip_scale: Some(scale),
        },
    )?;
    Ok(net.params)
}
