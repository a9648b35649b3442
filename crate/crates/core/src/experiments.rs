//! Rate study across sample sizes, sieve diagnostics, the interior packing
//! used for the minimax lower bound, and result emission.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jet::Jet2;
use crate::pde::{gauss_legendre_unit, EllipticProblem, LossConfig, ProblemConfig};
use crate::posterior::{
    contraction_rate, generate_dataset, run_chain, warm_start, warm_start_partition, Init, McmcConfig,
    PosteriorRun, SampleRecord,
};
use crate::prior::PriorConfig;

/// Growth schedule `W_n, S_n, B_n` of the truncated network classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SieveSchedule {
    pub c_w: f64,
    pub c_s: f64,
    pub c_b: f64,
}

impl Default for SieveSchedule {
    fn default() -> Self {
        SieveSchedule {
            c_w: 16.0,
            c_s: 64.0,
            c_b: 4.0,
        }
    }
}

impl SieveSchedule {
    pub fn validate(&self) -> Result<()> {
        if [self.c_w, self.c_s, self.c_b].iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::InvalidArgument(format!("sieve constants must be > 0: {self:?}")));
        }
        Ok(())
    }

    /// `d/(d + 2(β−2))`.
    pub fn exponent(dim: usize, beta: f64) -> f64 {
        dim as f64 / (dim as f64 + 2.0 * (beta - 2.0))
    }

    pub fn width(&self, n: usize, dim: usize, beta: f64) -> f64 {
        self.c_w * (n as f64).powf(Self::exponent(dim, beta))
    }

    pub fn sparsity(&self, n: usize, dim: usize, beta: f64) -> f64 {
        self.c_s * (n as f64).powf(Self::exponent(dim, beta))
    }

    pub fn bound(&self, n: usize, dim: usize, beta: f64) -> f64 {
        self.c_b * (n as f64).powf(Self::exponent(dim, beta)) * (n as f64).ln()
    }

    pub fn eps(n: usize, dim: usize, beta: f64) -> f64 {
        contraction_rate(n, dim, beta)
    }

    /// Whether a sample falls outside the sieve at sample size `n`.
    pub fn violated(&self, s: &SampleRecord, n: usize, dim: usize, beta: f64) -> bool {
        s.width as f64 > self.width(n, dim, beta)
            || s.sparsity as f64 > self.sparsity(n, dim, beta)
            || s.bound > self.bound(n, dim, beta)
    }
}

/// How chains in the rate study are started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartKind {
    /// Draw from the prior.
    Prior,
    /// Compile a least-squares spline fit of the data.
    Warm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateStudyConfig {
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub start: StartKind,
    /// Spline order of the warm start.
    pub warm_order: usize,
    /// Partition `⌈c·n^{1/(d+2(β−2))}⌉` of the warm start.
    pub warm_partition_const: f64,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        RateStudyConfig {
            n_grid: vec![256, 512, 1024, 2048, 4096],
            seeds: vec![0, 1, 2, 3, 4],
            start: StartKind::Warm,
            warm_order: 4,
            warm_partition_const: 1.25,
        }
    }
}

impl RateStudyConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match (self.n_grid.iter().min(), self.n_grid.iter().max()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => return Err(Error::InvalidArgument("empty n grid".into())),
        };
        let mut sorted = self.n_grid.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() < 4 || hi < 16 * lo || lo < 2 {
            return Err(Error::InvalidArgument(format!(
                "n grid needs >= 4 distinct values >= 2 spanning >= 16x, got {:?}",
                self.n_grid
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("need at least one seed".into()));
        }
        Ok(())
    }
}

/// One `(n, seed)` cell of the rate study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub n: usize,
    pub seed: u64,
    pub failed: bool,
    pub error: Option<String>,
    /// Population loss of the posterior mean.
    pub mean_loss: f64,
    pub median_sample_loss: f64,
    pub eps_n: f64,
    pub m_grid: Vec<f64>,
    pub mass_outside: Vec<f64>,
    pub sieve_violation: f64,
    pub retained: usize,
    pub accept_walk: f64,
    pub final_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub preset: String,
    pub dim: usize,
    pub beta: f64,
    pub rows: Vec<RateRow>,
    /// `(n, median over seeds of the posterior-mean loss)`.
    pub medians: Vec<(usize, f64)>,
    pub slope: f64,
    pub theoretical_slope: f64,
}

/// Least-squares slope of `log y` on `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    if k == 0 {
        f64::NAN
    } else if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn run_cell(
    problem: &EllipticProblem,
    loss: &LossConfig,
    prior: &PriorConfig,
    mcmc: &McmcConfig,
    sieve: &SieveSchedule,
    study: &RateStudyConfig,
    n: usize,
    seed: u64,
) -> Result<RateRow> {
    let d = problem.dim();
    // Data and chain streams are decorrelated across cells by mixing n into the seed.
    let data = generate_dataset(problem, n, seed)?;
    let (init, prior) = match study.start {
        StartKind::Prior => (Init::Prior, *prior),
        StartKind::Warm => {
            let l = warm_start_partition(n, d, problem.beta, study.warm_partition_const);
            let p = warm_start(problem, &data, study.warm_order, l)?;
            let prior = PriorConfig {
                depth: p.arch.depth,
                ..*prior
            };
            (Init::Params(p), prior)
        }
    };
    let cfg = McmcConfig {
        seed: seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ n as u64,
        ..mcmc.clone()
    };
    let run = run_chain(&cfg, &prior, &data, problem, loss, &init)?;
    let s = &run.summary;
    let viol = run
        .samples
        .iter()
        .filter(|r| sieve.violated(r, n, d, problem.beta))
        .count() as f64
        / run.samples.len() as f64;
    Ok(RateRow {
        n,
        seed,
        failed: false,
        error: None,
        mean_loss: s.mean_loss.total,
        median_sample_loss: s.sample_losses.q50,
        eps_n: s.eps_n,
        m_grid: s.m_grid.clone(),
        mass_outside: s.mass_outside.clone(),
        sieve_violation: viol,
        retained: s.retained,
        accept_walk: s.acceptance.weight_walk,
        final_step: s.final_step_sizes.iter().sum::<f64>() / s.final_step_sizes.len() as f64,
    })
}

/// Runs every `(n, seed)` cell in parallel and fits the log-log slope of the
/// median posterior-mean loss against `n`. Failed cells are kept and flagged.
pub fn rate_study(
    problem: &EllipticProblem,
    loss: &LossConfig,
    prior: &PriorConfig,
    mcmc: &McmcConfig,
    sieve: &SieveSchedule,
    study: &RateStudyConfig,
) -> Result<RateStudy> {
    study.validate()?;
    sieve.validate()?;
    mcmc.validate()?;
    let cells: Vec<(usize, u64)> = study
        .n_grid
        .iter()
        .flat_map(|&n| study.seeds.iter().map(move |&s| (n, s)))
        .collect();
    let mut rows: Vec<RateRow> = cells
        .par_iter()
        .map(|&(n, seed)| {
            run_cell(problem, loss, prior, mcmc, sieve, study, n, seed).unwrap_or_else(|e| RateRow {
                n,
                seed,
                failed: true,
                error: Some(e.to_string()),
                mean_loss: f64::NAN,
                median_sample_loss: f64::NAN,
                eps_n: f64::NAN,
                m_grid: mcmc.m_grid.clone(),
                mass_outside: Vec::new(),
                sieve_violation: f64::NAN,
                retained: 0,
                accept_walk: f64::NAN,
                final_step: f64::NAN,
            })
        })
        .collect();
    rows.sort_by_key(|r| (r.n, r.seed));
    let mut by_n: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| !r.failed) {
        by_n.entry(r.n).or_default().push(r.mean_loss);
    }
    let medians: Vec<(usize, f64)> = by_n.into_iter().map(|(n, mut v)| (n, median(&mut v))).collect();
    let pts: Vec<(f64, f64)> = medians.iter().map(|&(n, m)| (n as f64, m)).collect();
    let slope = if pts.len() >= 2 { loglog_slope(&pts) } else { f64::NAN };
    let d = problem.dim() as f64;
    let b = problem.beta;
    Ok(RateStudy {
        preset: problem.name.clone(),
        dim: problem.dim(),
        beta: b,
        rows,
        medians,
        slope,
        theoretical_slope: -2.0 * (b - 2.0) / (d + 2.0 * (b - 2.0)),
    })
}

impl RateStudy {
    pub fn table(&self) -> Table {
        let m_grid = self.rows.first().map(|r| r.m_grid.clone()).unwrap_or_default();
        let mut columns: Vec<String> = [
            "n",
            "seed",
            "failed",
            "mean_loss",
            "median_sample_loss",
            "eps_n",
            "sieve_violation",
            "retained",
            "accept_walk",
            "final_step",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        columns.extend(m_grid.iter().map(|m| format!("mass_outside_M{m}")));
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    Cell::Int(r.n as i64),
                    Cell::Int(r.seed as i64),
                    Cell::Text(r.error.clone().unwrap_or_default()),
                    Cell::Float(r.mean_loss),
                    Cell::Float(r.median_sample_loss),
                    Cell::Float(r.eps_n),
                    Cell::Float(r.sieve_violation),
                    Cell::Int(r.retained as i64),
                    Cell::Float(r.accept_walk),
                    Cell::Float(r.final_step),
                ];
                row.extend((0..m_grid.len()).map(|i| Cell::Float(r.mass_outside.get(i).copied().unwrap_or(f64::NAN))));
                row
            })
            .collect();
        Table {
            name: "rate_study".into(),
            columns,
            rows,
        }
    }
}

/// Coordinates of the interior packing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackingConfig {
    /// Problem whose operator defines the separation.
    pub preset: String,
    /// Cells per axis.
    pub m: usize,
    /// Amplitude `w ∈ (0, 1)`.
    pub w: f64,
    /// Center of the support cube (same on every axis).
    pub x0: f64,
    /// Half side of the support cube.
    pub r: f64,
    /// Seed of the randomized code search.
    pub seed: u64,
    /// Gauss–Legendre order per axis and cell.
    pub quad_order: usize,
    /// Packing sizes swept by the demo.
    pub m_grid: Vec<usize>,
    pub n1: usize,
    pub n2: usize,
}

impl Default for PackingConfig {
    fn default() -> Self {
        PackingConfig {
            preset: "sin-3d".into(),
            m: 2,
            w: 0.5,
            x0: 0.5,
            r: 0.4,
            seed: 0,
            quad_order: 12,
            m_grid: vec![2, 3, 4],
            n1: 1000,
            n2: 1000,
        }
    }
}

/// Binary code with a minimum pairwise Hamming distance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Code {
    pub length: usize,
    pub min_distance: usize,
    pub words: Vec<Vec<bool>>,
}

fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

impl Code {
    /// Smallest pairwise distance actually realized.
    pub fn realized_distance(&self) -> usize {
        let mut best = usize::MAX;
        for i in 0..self.words.len() {
            for j in i + 1..self.words.len() {
                best = best.min(hamming(&self.words[i], &self.words[j]));
            }
        }
        best
    }
}

/// Greedy code of `size` words of length `length` with distance `>= dist`.
///
/// For `length <= 16` all words are scanned in lexicographic order. Above that,
/// candidates are drawn by flipping `dist` random positions of a random
/// accepted word, which keeps the realized distance close to `dist`.
pub fn varshamov_gilbert_code(length: usize, dist: usize, size: usize, seed: u64) -> Result<Code> {
    let infeasible = || Error::InfeasibleCode(format!("{size} words of length {length} at distance {dist}"));
    if size < 2 || dist == 0 || dist > length {
        return Err(infeasible());
    }
    let accept = |words: &[Vec<bool>], c: &[bool]| words.iter().all(|w| hamming(w, c) >= dist);
    let mut words: Vec<Vec<bool>> = Vec::with_capacity(size);
    if length <= 16 {
        for v in 0u32..(1 << length) {
            let c: Vec<bool> = (0..length).rev().map(|b| (v >> b) & 1 == 1).collect();
            if accept(&words, &c) {
                words.push(c);
                if words.len() == size {
                    break;
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        words.push(vec![false; length]);
        let mut positions: Vec<usize> = (0..length).collect();
        let max_tries = 10_000 * size;
        let mut tries = 0;
        while words.len() < size && tries < max_tries {
            tries += 1;
            let mut c = words[rng.random_range(0..words.len())].clone();
            positions.shuffle(&mut rng);
            for &p in &positions[..dist] {
                c[p] = !c[p];
            }
            if accept(&words, &c) {
                words.push(c);
            }
        }
    }
    if words.len() < size {
        return Err(infeasible());
    }
    let code = Code {
        length,
        min_distance: dist,
        words,
    };
    assert!(code.realized_distance() >= dist, "code violates its distance bound");
    Ok(code)
}

/// `ψ(t) = exp(−1/(1−t²))` on `(−1, 1)`, zero elsewhere, with two derivatives.
pub fn mollifier(t: f64) -> (f64, f64, f64) {
    if t.abs() >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = 1.0 - t * t;
    let v = (-1.0 / s).exp();
    let h1 = -2.0 * t / (s * s);
    let h2 = -2.0 / (s * s) - 8.0 * t * t / (s * s * s);
    (v, v * h1, v * (h2 + h1 * h1))
}

/// Tensor bump `c·Π ψ(y_a/r)` as a jet at `y`.
fn bump_jet(y: &[f64], r: f64, c: f64) -> Jet2 {
    let d = y.len();
    let parts: Vec<(f64, f64, f64)> = y
        .iter()
        .map(|&v| {
            let (a, b, e) = mollifier(v / r);
            (a, b / r, e / (r * r))
        })
        .collect();
    let prod_except = |skip: &[usize]| -> f64 {
        parts
            .iter()
            .enumerate()
            .filter(|(i, _)| !skip.contains(i))
            .map(|(_, p)| p.0)
            .product()
    };
    let value = c * prod_except(&[]);
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for a in 0..d {
        grad[a] = c * parts[a].1 * prod_except(&[a]);
        for b in 0..d {
            hess[a * d + b] = if a == b {
                c * parts[a].2 * prod_except(&[a])
            } else {
                c * parts[a].1 * parts[b].1 * prod_except(&[a, b])
            };
        }
    }
    Jet2::from_parts(value, &grad, &hess).expect("consistent dims")
}

/// Functions `u_k = Σ_j τ_j (w/m^β) g(m(x − x_j))` indexed by a code.
#[derive(Debug, Clone)]
pub struct Packing {
    pub config: PackingConfig,
    pub dim: usize,
    pub beta: f64,
    pub code: Code,
    /// Centers `x_j` of the `m^d` cells, row-major.
    pub centers: Vec<Vec<f64>>,
    /// Normalizing constant with `‖g‖_{C²} = K`.
    pub bump_scale: f64,
    pub amplitude: f64,
}

impl Packing {
    /// Jet of the single bump of cell `j` (without its code bit) at `x`.
    pub fn cell_bump(&self, j: usize, x: &[f64]) -> Jet2 {
        let m = self.config.m as f64;
        let y: Vec<f64> = x.iter().zip(&self.centers[j]).map(|(a, b)| m * (a - b)).collect();
        let g = bump_jet(&y, self.config.r, self.bump_scale);
        // Chain rule for x ↦ m(x − x_j).
        let d = self.dim;
        let grad: Vec<f64> = (0..d).map(|a| self.amplitude * m * g.grad[a]).collect();
        let hess: Vec<f64> = (0..d * d).map(|p| self.amplitude * m * m * g.hess_at(p / d, p % d)).collect();
        Jet2::from_parts(self.amplitude * g.value, &grad, &hess).expect("consistent dims")
    }

    /// Jet of `u_k` at `x`.
    pub fn eval(&self, k: usize, x: &[f64]) -> Jet2 {
        let mut out = Jet2::zero(self.dim);
        for (j, &bit) in self.code.words[k].iter().enumerate() {
            if bit {
                out.axpy(1.0, &self.cell_bump(j, x));
            }
        }
        out
    }

    /// Largest value, gradient and Hessian entry of `u_k` on a grid.
    pub fn c2_norm_on_grid(&self, k: usize, per_axis: usize) -> f64 {
        crate::spline::uniform_grid(self.dim, per_axis)
            .iter()
            .map(|x| {
                let j = self.eval(k, x);
                let g = j.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let h = j.hess.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                j.value.abs().max(g).max(h)
            })
            .fold(0.0, f64::max)
    }
}

/// Sup of value, first and second derivatives of `Π ψ(y_a/r)` on a grid.
fn bump_c2_norm(dim: usize, r: f64) -> f64 {
    let per_axis = 201;
    crate::spline::uniform_grid(dim, per_axis)
        .iter()
        .map(|u| {
            let y: Vec<f64> = u.iter().map(|v| (2.0 * v - 1.0) * r).collect();
            let j = bump_jet(&y, r, 1.0);
            let g = j.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let h = j.hess.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            j.value.abs().max(g).max(h)
        })
        .fold(0.0, f64::max)
}

/// Builds the interior packing for `problem` on a cube of half side `r` around `x0`.
pub fn build_packing(cfg: &PackingConfig, problem: &EllipticProblem) -> Result<Packing> {
    let d = problem.dim();
    let m = cfg.m;
    let cells = m.checked_pow(d as u32).ok_or_else(|| Error::InvalidArgument("m^d overflows".into()))?;
    if cells < 8 {
        return Err(Error::InvalidArgument(format!("m^d = {cells} < 8")));
    }
    if !(cfg.w > 0.0 && cfg.w < 1.0) {
        return Err(Error::InvalidArgument(format!("amplitude w = {} not in (0, 1)", cfg.w)));
    }
    if !(cfg.r > 0.0 && cfg.x0 - cfg.r > 0.0 && cfg.x0 + cfg.r < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "support cube ({} ± {}) is not strictly inside the unit box",
            cfg.x0, cfg.r
        )));
    }
    if cells > 64 {
        return Err(Error::InfeasibleCode(format!("m^d = {cells} exceeds the 64-cell desk limit")));
    }
    let dist = cells.div_ceil(8);
    let size = 2f64.powf(cells as f64 / 8.0).ceil() as usize;
    let code = varshamov_gilbert_code(cells, dist, size.max(2), cfg.seed)?;
    let side = 2.0 * cfg.r / m as f64;
    let centers = (0..cells)
        .map(|p| {
            let mut x = vec![0.0; d];
            let mut q = p;
            for a in (0..d).rev() {
                x[a] = cfg.x0 - cfg.r + (q % m) as f64 * side + 0.5 * side;
                q /= m;
            }
            x
        })
        .collect();
    Ok(Packing {
        config: cfg.clone(),
        dim: d,
        beta: problem.beta,
        code,
        centers,
        bump_scale: problem.k_bound / bump_c2_norm(d, cfg.r),
        amplitude: cfg.w / (m as f64).powf(problem.beta),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub k: usize,
    pub k2: usize,
    pub hamming: usize,
    /// `‖L(u_k − u_k')‖²` over the domain.
    pub interior_sq: f64,
    /// `‖u_k − u_k'‖²` over the boundary.
    pub boundary_sq: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingTable {
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    pub code_size: usize,
    pub realized_distance: usize,
    pub pairs: Vec<PairRow>,
    pub min_separation_sq: f64,
    pub max_boundary_sq: f64,
    pub max_kl: f64,
}

/// `D_KL = n1/(2|Ω|)·I + n2/(2|∂Ω|)·B`.
pub fn gaussian_kl(n1: usize, n2: usize, volume: f64, boundary_measure: f64, interior_sq: f64, boundary_sq: f64) -> f64 {
    n1 as f64 / (2.0 * volume) * interior_sq + n2 as f64 / (2.0 * boundary_measure) * boundary_sq
}

/// Squared norms and KL divergence for every pair in the packing.
///
/// The operator is local and the bumps have disjoint supports, so
/// `‖L(u_k − u_k')‖² = Σ_j |τ_j − τ'_j| ∫_{cell j} (L b_j)²`, each cell integral
/// taken by a tensor Gauss–Legendre rule.
pub fn packing_separation_and_kl(
    packing: &Packing,
    problem: &EllipticProblem,
    n1: usize,
    n2: usize,
) -> Result<PackingTable> {
    let d = packing.dim;
    let cfg = &packing.config;
    let (nodes, weights) = gauss_legendre_unit(cfg.quad_order)?;
    let q = nodes.len();
    let side = 2.0 * cfg.r / cfg.m as f64;
    let cells = packing.centers.len();
    let cell_sq: Vec<f64> = (0..cells)
        .into_par_iter()
        .map(|j| -> Result<f64> {
            let c = &packing.centers[j];
            let mut s = 0.0;
            for p in 0..q.pow(d as u32) {
                let mut x = vec![0.0; d];
                let mut w = side.powi(d as i32);
                let mut r = p;
                for a in 0..d {
                    x[a] = c[a] - 0.5 * side + side * nodes[r % q];
                    w *= weights[r % q];
                    r /= q;
                }
                let lu = problem.operator_at(&packing.cell_bump(j, &x), &x)?;
                s += w * lu * lu;
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;

    // Boundary rule on each face; only nonzero bump values are kept.
    let mut boundary_entries: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
    for face in 0..2 * d {
        let axis = face / 2;
        let fixed = (face % 2) as f64;
        let fd = d - 1;
        for p in 0..q.pow(fd as u32) {
            let mut x = vec![fixed; d];
            let mut w = 1.0;
            let mut r = p;
            for a in (0..d).filter(|&a| a != axis) {
                x[a] = nodes[r % q];
                w *= weights[r % q];
                r /= q;
            }
            let vals: Vec<(usize, f64)> = (0..cells)
                .map(|j| (j, packing.cell_bump(j, &x).value))
                .filter(|(_, v)| *v != 0.0)
                .collect();
            if !vals.is_empty() {
                boundary_entries.push((w, vals));
            }
        }
    }

    let dom = &problem.domain;
    let words = &packing.code.words;
    let mut pairs = Vec::new();
    for k in 0..words.len() {
        for k2 in k + 1..words.len() {
            let diff: Vec<bool> = words[k].iter().zip(&words[k2]).map(|(a, b)| a != b).collect();
            let interior_sq: f64 = diff.iter().zip(&cell_sq).filter(|(x, _)| **x).map(|(_, s)| s).sum();
            let boundary_sq: f64 = boundary_entries
                .iter()
                .map(|(w, vals)| {
                    let v: f64 = vals
                        .iter()
                        .map(|&(j, v)| if words[k][j] { v } else { 0.0 } - if words[k2][j] { v } else { 0.0 })
                        .sum();
                    w * v * v
                })
                .sum();
            pairs.push(PairRow {
                k,
                k2,
                hamming: diff.iter().filter(|x| **x).count(),
                interior_sq,
                boundary_sq,
                kl: gaussian_kl(n1, n2, dom.volume(), dom.boundary_measure(), interior_sq, boundary_sq),
            });
        }
    }
    let fold = |f: fn(&PairRow) -> f64, init: f64, op: fn(f64, f64) -> f64| pairs.iter().map(f).fold(init, op);
    Ok(PackingTable {
        m: cfg.m,
        n1,
        n2,
        code_size: words.len(),
        realized_distance: packing.code.realized_distance(),
        min_separation_sq: fold(|p| p.interior_sq, f64::INFINITY, f64::min),
        max_boundary_sq: fold(|p| p.boundary_sq, 0.0, f64::max),
        max_kl: fold(|p| p.kl, 0.0, f64::max),
        pairs,
    })
}

/// Packing tables over `cfg.m_grid` plus the fitted separation slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingDemo {
    pub tables: Vec<PackingTable>,
    pub separation_slope: f64,
    /// `−(2β − 4)`.
    pub theoretical_slope: f64,
}

pub fn packing_demo(cfg: &PackingConfig, problem: &EllipticProblem) -> Result<PackingDemo> {
    let tables = cfg
        .m_grid
        .iter()
        .map(|&m| {
            let p = build_packing(&PackingConfig { m, ..cfg.clone() }, problem)?;
            packing_separation_and_kl(&p, problem, cfg.n1, cfg.n2)
        })
        .collect::<Result<Vec<_>>>()?;
    let pts: Vec<(f64, f64)> = tables.iter().map(|t| (t.m as f64, t.min_separation_sq)).collect();
    Ok(PackingDemo {
        separation_slope: if pts.len() >= 2 { loglog_slope(&pts) } else { f64::NAN },
        theoretical_slope: -(2.0 * problem.beta - 4.0),
        tables,
    })
}

impl PackingDemo {
    pub fn table(&self) -> Table {
        let columns = ["m", "k", "k2", "hamming", "interior_sq", "boundary_sq", "kl"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = self
            .tables
            .iter()
            .flat_map(|t| {
                t.pairs.iter().map(move |p| {
                    vec![
                        Cell::Int(t.m as i64),
                        Cell::Int(p.k as i64),
                        Cell::Int(p.k2 as i64),
                        Cell::Int(p.hamming as i64),
                        Cell::Float(p.interior_sq),
                        Cell::Float(p.boundary_sq),
                        Cell::Float(p.kl),
                    ]
                })
            })
            .collect();
        Table {
            name: "packing".into(),
            columns,
            rows,
        }
    }
}

/// One table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn to_csv(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Text(s) if s.contains([',', '"', '\n']) => format!("\"{}\"", s.replace('"', "\"\"")),
            Cell::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub git_revision: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Metadata {
    pub fn new<C: Serialize>(config: &C, seed: u64) -> Result<Self> {
        Ok(Metadata {
            git_revision: git_revision(),
            seed,
            config_hash: config_hash(config)?,
        })
    }
}

/// `git rev-parse HEAD` of the working directory, or `unknown`.
pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// SHA-256 of the config's canonical JSON (keys sorted).
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let v: Value = serde_json::to_value(config)?;
    let canonical = serde_json::to_string(&v)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonDoc {
    metadata: Metadata,
    table: Table,
}

/// Writes a table with a metadata header.
pub fn emit_results(table: &Table, meta: &Metadata, path: &Path, format: Format) -> Result<()> {
    let text = match format {
        Format::Csv => {
            let mut s = format!(
                "# git_revision={} seed={} config_hash={}\n",
                meta.git_revision, meta.seed, meta.config_hash
            );
            s.push_str(&table.columns.join(","));
            s.push('\n');
            for row in &table.rows {
                s.push_str(&row.iter().map(Cell::to_csv).collect::<Vec<_>>().join(","));
                s.push('\n');
            }
            s
        }
        Format::Json => serde_json::to_string_pretty(&JsonDoc {
            metadata: meta.clone(),
            table: table.clone(),
        })?,
    };
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

/// Reads a table written by [`emit_results`].
pub fn read_results(path: &Path, format: Format) -> Result<(Table, Metadata)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Json => {
            let doc: JsonDoc = serde_json::from_str(&text)?;
            Ok((doc.table, doc.metadata))
        }
        Format::Csv => {
            let mut lines = text.lines();
            let bad = |what: &str| Error::Decode(format!("{}: {what}", path.display()));
            let header = lines.next().ok_or_else(|| bad("missing metadata"))?;
            let fields: BTreeMap<&str, &str> = header
                .trim_start_matches('#')
                .split_whitespace()
                .filter_map(|kv| kv.split_once('='))
                .collect();
            let meta = Metadata {
                git_revision: fields.get("git_revision").ok_or_else(|| bad("git_revision"))?.to_string(),
                seed: fields
                    .get("seed")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("seed"))?,
                config_hash: fields.get("config_hash").ok_or_else(|| bad("config_hash"))?.to_string(),
            };
            let columns: Vec<String> = parse_csv_line(lines.next().ok_or_else(|| bad("missing columns"))?);
            let rows = lines
                .map(|l| {
                    parse_csv_line(l)
                        .into_iter()
                        .map(|f| {
                            if let Ok(v) = f.parse::<i64>() {
                                Cell::Int(v)
                            } else if let Ok(v) = f.parse::<f64>() {
                                Cell::Float(v)
                            } else {
                                Cell::Text(f)
                            }
                        })
                        .collect()
                })
                .collect();
            Ok((
                Table {
                    name: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                    columns,
                    rows,
                },
                meta,
            ))
        }
    }
}

/// Output section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub format: Format,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "results".into(),
            format: Format::Csv,
        }
    }
}

/// Problem section: preset, loss settings and data sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub preset: String,
    pub lambda: f64,
    pub quadrature: Option<crate::pde::QuadratureSpec>,
    /// Dataset size for `sample`.
    pub n: usize,
    pub data_seed: u64,
    pub n_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub start: StartKind,
    pub warm_order: usize,
    pub warm_partition_const: f64,
}

impl Default for ProblemSection {
    fn default() -> Self {
        let study = RateStudyConfig::default();
        ProblemSection {
            preset: "sin-1d".into(),
            lambda: 1.0,
            quadrature: None,
            n: 1024,
            data_seed: 0,
            n_grid: study.n_grid,
            seeds: study.seeds,
            start: study.start,
            warm_order: study.warm_order,
            warm_partition_const: study.warm_partition_const,
        }
    }
}

impl ProblemSection {
    pub fn problem_config(&self) -> ProblemConfig {
        ProblemConfig {
            preset: self.preset.clone(),
            lambda: self.lambda,
            quadrature: self.quadrature,
        }
    }

    pub fn rate_study_config(&self) -> RateStudyConfig {
        RateStudyConfig {
            n_grid: self.n_grid.clone(),
            seeds: self.seeds.clone(),
            start: self.start,
            warm_order: self.warm_order,
            warm_partition_const: self.warm_partition_const,
        }
    }
}

/// Top-level JSON config.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub prior: PriorConfig,
    pub mcmc: McmcConfig,
    pub sieve: SieveSchedule,
    pub packing: PackingConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Samples the posterior for the dataset described by `cfg.problem`.
///
/// A warm start fixes the prior depth to the depth of the compiled network.
pub fn sample_posterior(cfg: &RunConfig) -> Result<PosteriorRun> {
    let (problem, loss) = cfg.problem.problem_config().build()?;
    let data = generate_dataset(&problem, cfg.problem.n, cfg.problem.data_seed)?;
    let (init, prior) = match cfg.problem.start {
        StartKind::Prior => (Init::Prior, cfg.prior),
        StartKind::Warm => {
            let l = warm_start_partition(cfg.problem.n, problem.dim(), problem.beta, cfg.problem.warm_partition_const);
            let p = warm_start(&problem, &data, cfg.problem.warm_order, l)?;
            let prior = PriorConfig {
                depth: p.arch.depth,
                ..cfg.prior
            };
            (Init::Params(p), prior)
        }
    };
    run_chain(&cfg.mcmc, &prior, &data, &problem, &loss, &init)
}
