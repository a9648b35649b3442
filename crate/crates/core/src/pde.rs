//! Second-order elliptic problems `−div(A∇u) + V u = f` on the unit box with
//! Dirichlet data `u = g`, plus the population and empirical PINN losses.

use std::f64::consts::PI;
use std::sync::Arc;

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet2;
use crate::posterior::Dataset;

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type JetField = Arc<dyn Fn(&[f64]) -> Jet2 + Send + Sync>;

/// The unit box `(0,1)^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub dim: usize,
}

impl Domain {
    pub fn unit_box(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("domain dimension must be >= 1".into()));
        }
        Ok(Domain { dim })
    }

    pub fn volume(&self) -> f64 {
        1.0
    }

    /// `2d` faces of unit measure; for `d = 1` the counting measure on `{0, 1}`.
    pub fn boundary_measure(&self) -> f64 {
        2.0 * self.dim as f64
    }

    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim)
            .map(|_| loop {
                let u: f64 = rng.random();
                if u > 0.0 {
                    break u;
                }
            })
            .collect()
    }

    /// Uniform draw from the surface measure: a uniform face, then a uniform point on it.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let face = rng.random_range(0..2 * self.dim);
        let mut y: Vec<f64> = (0..self.dim).map(|_| rng.random()).collect();
        y[face / 2] = (face % 2) as f64;
        y
    }

    pub fn on_boundary(&self, y: &[f64]) -> bool {
        y.iter().any(|&v| v == 0.0 || v == 1.0)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim && x.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

/// `A`, `(∇A)_i = Σ_j ∂_j A_{ji}`, and `V`.
#[derive(Clone)]
pub struct Coefficients {
    pub dim: usize,
    /// Row-major `d×d` matrix.
    pub a: VectorField,
    pub div_a: VectorField,
    pub v: ScalarField,
}

impl Coefficients {
    /// Constant matrix `A` and constant potential `V`.
    pub fn constant(dim: usize, a: Vec<f64>, v: f64) -> Result<Self> {
        if a.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: a.len(),
            });
        }
        Ok(Coefficients {
            dim,
            a: Arc::new(move |_| a.clone()),
            div_a: Arc::new(move |_| vec![0.0; dim]),
            v: Arc::new(move |_| v),
        })
    }

    pub fn identity(dim: usize, v: f64) -> Self {
        let mut a = vec![0.0; dim * dim];
        for i in 0..dim {
            a[i * dim + i] = 1.0;
        }
        Self::constant(dim, a, v).expect("square identity")
    }

    pub fn at(&self, x: &[f64]) -> SiteCoeffs {
        SiteCoeffs {
            a: (self.a)(x),
            div_a: (self.div_a)(x),
            v: (self.v)(x),
        }
    }
}

/// Coefficients frozen at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteCoeffs {
    pub a: Vec<f64>,
    pub div_a: Vec<f64>,
    pub v: f64,
}

impl SiteCoeffs {
    /// `−Σ_{ij} A_{ji} H_{ij} − Σ_i (∇A)_i g_i + V u`.
    pub fn apply(&self, u: &Jet2) -> f64 {
        let d = self.div_a.len();
        let mut second = 0.0;
        for i in 0..d {
            for j in 0..d {
                second += self.a[j * d + i] * u.hess[i * d + j];
            }
        }
        let first: f64 = self.div_a.iter().zip(&u.grad).map(|(a, g)| a * g).sum();
        -second - first + self.v * u.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub r_min: f64,
    pub c_a: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Clone)]
pub struct EllipticProblem {
    pub name: String,
    pub domain: Domain,
    pub coeffs: Coefficients,
    pub f: ScalarField,
    pub g: ScalarField,
    pub u_star: Option<JetField>,
    /// Declared smoothness label.
    pub beta: f64,
    /// Declared sup-norm bound on `u*`; the network clip level is `K + 1`.
    pub k_bound: f64,
    pub bounds: CoefficientBounds,
}

impl std::fmt::Debug for EllipticProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticProblem")
            .field("name", &self.name)
            .field("dim", &self.domain.dim)
            .field("beta", &self.beta)
            .field("k_bound", &self.k_bound)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl EllipticProblem {
    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    /// `−div(A∇u) + V u` at `x` from the jet of `u` at `x`.
    pub fn operator_at(&self, u: &Jet2, x: &[f64]) -> Result<f64> {
        self.check_point(u, x)?;
        Ok(self.coeffs.at(x).apply(u))
    }

    fn check_point(&self, u: &Jet2, x: &[f64]) -> Result<()> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        if u.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: u.dim(),
            });
        }
        Ok(())
    }

    /// Checks coefficient bounds on a grid and, if `u*` is known, that it
    /// solves the problem.
    pub fn validate(&self, per_axis: usize) -> Result<()> {
        let d = self.dim();
        let b = &self.bounds;
        if !(b.v_min > 0.0 && b.v_min <= b.v_max && b.r_min > 0.0 && b.c_a > 0.0) {
            return Err(Error::CoefficientBounds(format!(
                "declared bounds are inconsistent: {b:?}"
            )));
        }
        for x in crate::spline::uniform_grid(d, per_axis) {
            let c = self.coeffs.at(&x);
            let m = DMatrix::from_row_slice(d, d, &c.a);
            let asym = (&m - m.transpose()).amax();
            if asym > 1e-12 {
                return Err(Error::CoefficientBounds(format!("A not symmetric at {x:?}")));
            }
            let lo = SymmetricEigen::new(m.clone()).eigenvalues.min();
            if lo < b.r_min - 1e-12 {
                return Err(Error::CoefficientBounds(format!(
                    "smallest eigenvalue of A is {lo} < r_min={} at {x:?}",
                    b.r_min
                )));
            }
            let ca = m.amax().max(c.div_a.iter().fold(0.0, |a: f64, v| a.max(v.abs())));
            if ca > b.c_a + 1e-12 {
                return Err(Error::CoefficientBounds(format!(
                    "|A| or |∇A| is {ca} > C_A={} at {x:?}",
                    b.c_a
                )));
            }
            if c.v < b.v_min - 1e-12 || c.v > b.v_max + 1e-12 {
                return Err(Error::CoefficientBounds(format!(
                    "V={} outside [{}, {}] at {x:?}",
                    c.v, b.v_min, b.v_max
                )));
            }
            if let Some(u) = &self.u_star {
                let j = u(&x);
                let fx = (self.f)(&x);
                let r = c.apply(&j) - fx;
                if r.abs() > 1e-10 * (1.0 + fx.abs()) {
                    return Err(Error::CoefficientBounds(format!(
                        "u* residual {r:e} at {x:?}"
                    )));
                }
                if self.domain.on_boundary(&x) && (j.value - (self.g)(&x)).abs() > 1e-12 {
                    return Err(Error::CoefficientBounds(format!("u* != g at {x:?}")));
                }
                if j.value.abs() > self.k_bound + 1e-12 {
                    return Err(Error::CoefficientBounds(format!(
                        "|u*| = {} exceeds K = {} at {x:?}",
                        j.value.abs(),
                        self.k_bound
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Residual `−div(A∇u) + V u − f` at `x`.
pub fn residual_at(problem: &EllipticProblem, u: &Jet2, x: &[f64]) -> Result<f64> {
    Ok(problem.operator_at(u, x)? - (problem.f)(x))
}

/// Builds `f := −div(A∇u*) + V u*` and `g := u*` and validates the result.
pub fn manufactured_problem(
    name: &str,
    u_star: JetField,
    coeffs: Coefficients,
    domain: Domain,
    beta: f64,
    k_bound: f64,
    bounds: CoefficientBounds,
) -> Result<EllipticProblem> {
    if coeffs.dim != domain.dim {
        return Err(Error::DimensionMismatch {
            expected: domain.dim,
            got: coeffs.dim,
        });
    }
    let f = {
        let u = u_star.clone();
        let c = coeffs.clone();
        Arc::new(move |x: &[f64]| c.at(x).apply(&u(x))) as ScalarField
    };
    let g = {
        let u = u_star.clone();
        Arc::new(move |x: &[f64]| u(x).value) as ScalarField
    };
    let problem = EllipticProblem {
        name: name.to_string(),
        domain,
        coeffs,
        f,
        g,
        u_star: Some(u_star),
        beta,
        k_bound,
        bounds,
    };
    problem.validate(if domain.dim <= 2 { 21 } else { 7 })?;
    Ok(problem)
}

/// Quadrature used for the population loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QuadratureSpec {
    GaussLegendre { order: usize },
    MonteCarlo { count: usize, seed: u64 },
}

impl QuadratureSpec {
    pub fn default_for(dim: usize) -> Self {
        if dim <= 2 {
            QuadratureSpec::GaussLegendre { order: 32 }
        } else {
            QuadratureSpec::MonteCarlo {
                count: 100_000,
                seed: 0x5eed,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub quadrature: QuadratureSpec,
}

impl LossConfig {
    pub fn new(lambda: f64, quadrature: QuadratureSpec) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(LossConfig { lambda, quadrature })
    }

    pub fn default_for(dim: usize) -> Self {
        LossConfig {
            lambda: 1.0,
            quadrature: QuadratureSpec::default_for(dim),
        }
    }
}

/// Nodes and weights on `[0, 1]` for an `order`-point Gauss–Legendre rule.
pub fn gauss_legendre_unit(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rule = GaussLegendre::new(
        order
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("quadrature order {order} < 2")))?,
    );
    Ok(rule.iter().map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w)).unzip())
}

/// Tensor product of a 1-d rule over `dim` axes; points flattened row-major.
fn tensor_rule(nodes: &[f64], weights: &[f64], dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let m = nodes.len();
    let total = m.pow(dim as u32);
    let mut pts = Vec::with_capacity(total);
    let mut ws = Vec::with_capacity(total);
    for mut p in 0..total {
        let mut x = vec![0.0; dim];
        let mut w = 1.0;
        for a in (0..dim).rev() {
            x[a] = nodes[p % m];
            w *= weights[p % m];
            p /= m;
        }
        pts.push(x);
        ws.push(w);
    }
    (pts, ws)
}

/// Interior and boundary nodes with weights summing to `|Ω|` and `|∂Ω|`.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub interior: Vec<Vec<f64>>,
    pub interior_weights: Vec<f64>,
    pub boundary: Vec<Vec<f64>>,
    pub boundary_weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(domain: &Domain, spec: &QuadratureSpec) -> Result<Self> {
        let d = domain.dim;
        match *spec {
            QuadratureSpec::GaussLegendre { order } => {
                let (n, w) = gauss_legendre_unit(order)?;
                let (interior, interior_weights) = tensor_rule(&n, &w, d);
                let (face, face_w) = tensor_rule(&n, &w, d - 1);
                let mut boundary = Vec::new();
                let mut boundary_weights = Vec::new();
                for axis in 0..d {
                    for side in [0.0, 1.0] {
                        for (p, &fw) in face.iter().zip(&face_w) {
                            let mut y = Vec::with_capacity(d);
                            y.extend_from_slice(&p[..axis]);
                            y.push(side);
                            y.extend_from_slice(&p[axis..]);
                            boundary.push(y);
                            boundary_weights.push(fw);
                        }
                    }
                }
                Ok(QuadratureRule {
                    interior,
                    interior_weights,
                    boundary,
                    boundary_weights,
                })
            }
            QuadratureSpec::MonteCarlo { count, seed } => {
                if count == 0 {
                    return Err(Error::InvalidArgument("Monte Carlo count must be > 0".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let interior: Vec<Vec<f64>> =
                    (0..count).map(|_| domain.sample_interior(&mut rng)).collect();
                let boundary: Vec<Vec<f64>> = if d == 1 {
                    vec![vec![0.0], vec![1.0]]
                } else {
                    (0..count).map(|_| domain.sample_boundary(&mut rng)).collect()
                };
                let bw = domain.boundary_measure() / boundary.len() as f64;
                Ok(QuadratureRule {
                    interior_weights: vec![domain.volume() / count as f64; count],
                    boundary_weights: vec![bw; boundary.len()],
                    interior,
                    boundary,
                })
            }
        }
    }
}

/// The two squared norms of the population loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub interior: f64,
    pub boundary: f64,
    pub total: f64,
}

/// A population loss with coefficients and data precomputed at every node.
#[derive(Debug, Clone)]
pub struct PopulationLoss {
    pub rule: QuadratureRule,
    pub lambda: f64,
    sites: Vec<SiteCoeffs>,
    f_vals: Vec<f64>,
    g_vals: Vec<f64>,
}

impl PopulationLoss {
    pub fn new(problem: &EllipticProblem, cfg: &LossConfig) -> Result<Self> {
        let rule = QuadratureRule::new(&problem.domain, &cfg.quadrature)?;
        Ok(PopulationLoss {
            sites: rule.interior.iter().map(|x| problem.coeffs.at(x)).collect(),
            f_vals: rule.interior.iter().map(|x| (problem.f)(x)).collect(),
            g_vals: rule.boundary.iter().map(|y| (problem.g)(y)).collect(),
            lambda: cfg.lambda,
            rule,
        })
    }

    /// Evaluates the loss of `u`, given jets at interior nodes and values at boundary nodes.
    pub fn eval<J, V>(&self, mut jet: J, mut value: V) -> Result<LossParts>
    where
        J: FnMut(&[f64]) -> Result<Jet2>,
        V: FnMut(&[f64]) -> Result<f64>,
    {
        let mut interior = 0.0;
        for ((x, w), (c, f)) in self
            .rule
            .interior
            .iter()
            .zip(&self.rule.interior_weights)
            .zip(self.sites.iter().zip(&self.f_vals))
        {
            let r = c.apply(&jet(x)?) - f;
            interior += w * r * r;
        }
        let mut boundary = 0.0;
        for ((y, w), g) in self
            .rule
            .boundary
            .iter()
            .zip(&self.rule.boundary_weights)
            .zip(&self.g_vals)
        {
            let r = value(y)? - g;
            boundary += w * r * r;
        }
        Ok(LossParts {
            interior,
            boundary,
            total: interior + self.lambda * boundary,
        })
    }

    /// Loss from precomputed interior jets and boundary values aligned with the rule.
    pub fn eval_cached(&self, jets: &[Jet2], values: &[f64]) -> LossParts {
        let interior: f64 = jets
            .iter()
            .zip(&self.rule.interior_weights)
            .zip(self.sites.iter().zip(&self.f_vals))
            .map(|((j, w), (c, f))| {
                let r = c.apply(j) - f;
                w * r * r
            })
            .sum();
        let boundary: f64 = values
            .iter()
            .zip(&self.rule.boundary_weights)
            .zip(&self.g_vals)
            .map(|((v, w), g)| w * (v - g) * (v - g))
            .sum();
        LossParts {
            interior,
            boundary,
            total: interior + self.lambda * boundary,
        }
    }
}

/// Population PINN loss `‖−div(A∇u)+Vu−f‖²_{L²(Ω)} + λ‖u−g‖²_{L²(∂Ω)}`.
pub fn population_loss<U>(u: U, problem: &EllipticProblem, cfg: &LossConfig) -> Result<LossParts>
where
    U: Fn(&[f64]) -> Result<Jet2>,
{
    PopulationLoss::new(problem, cfg)?.eval(&u, |y| Ok(u(y)?.value))
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.interior.is_empty() || dataset.boundary.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Empirical PINN loss over noisy observations.
pub fn empirical_loss<U>(
    u: U,
    dataset: &Dataset,
    problem: &EllipticProblem,
    lambda: f64,
) -> Result<f64>
where
    U: Fn(&[f64]) -> Result<Jet2>,
{
    check_dataset(dataset)?;
    let dom = &problem.domain;
    let mut interior = 0.0;
    for obs in &dataset.interior {
        let r = problem.operator_at(&u(&obs.x)?, &obs.x)? - obs.value;
        interior += r * r;
    }
    let mut boundary = 0.0;
    for obs in &dataset.boundary {
        let r = u(&obs.x)?.value - obs.value;
        boundary += r * r;
    }
    Ok(dom.volume() / dataset.interior.len() as f64 * interior
        + lambda * dom.boundary_measure() / dataset.boundary.len() as f64 * boundary)
}

/// Noiseless empirical distances `(‖L(u − u*)‖_{n,1}, ‖u − u*‖_{n,2})`.
pub fn empirical_distances<U>(
    u: U,
    dataset: &Dataset,
    problem: &EllipticProblem,
) -> Result<(f64, f64)>
where
    U: Fn(&[f64]) -> Result<Jet2>,
{
    check_dataset(dataset)?;
    let dom = &problem.domain;
    let mut d1 = 0.0;
    for obs in &dataset.interior {
        let r = residual_at(problem, &u(&obs.x)?, &obs.x)?;
        if !r.is_finite() {
            return Err(Error::MissingExactData(format!("f at {:?}", obs.x)));
        }
        d1 += r * r;
    }
    let mut d2 = 0.0;
    for obs in &dataset.boundary {
        let r = u(&obs.x)?.value - (problem.g)(&obs.x);
        if !r.is_finite() {
            return Err(Error::MissingExactData(format!("g at {:?}", obs.x)));
        }
        d2 += r * r;
    }
    Ok((
        (dom.volume() / dataset.interior.len() as f64 * d1).sqrt(),
        (dom.boundary_measure() / dataset.boundary.len() as f64 * d2).sqrt(),
    ))
}

/// Jet of `Π_a sin(π x_a)`.
fn sine_product(x: &[f64]) -> Jet2 {
    let d = x.len();
    let s: Vec<f64> = x.iter().map(|v| (PI * v).sin()).collect();
    let c: Vec<f64> = x.iter().map(|v| PI * (PI * v).cos()).collect();
    let prod_except = |skip: &[usize]| -> f64 {
        (0..d).filter(|a| !skip.contains(a)).map(|a| s[a]).product()
    };
    let value = prod_except(&[]);
    let grad: Vec<f64> = (0..d).map(|i| c[i] * prod_except(&[i])).collect();
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            hess[i * d + j] = if i == j {
                -PI * PI * value
            } else {
                c[i] * c[j] * prod_except(&[i, j])
            };
        }
    }
    Jet2::from_parts(value, &grad, &hess).expect("consistent sizes")
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 4] = ["sin-1d", "quadratic-2d", "variable-coeff-2d", "sin-3d"];

/// Built-in manufactured problems.
pub fn preset(name: &str) -> Result<EllipticProblem> {
    match name {
        "sin-1d" => manufactured_problem(
            name,
            Arc::new(sine_product),
            Coefficients::identity(1, 1.0),
            Domain::unit_box(1)?,
            4.0,
            1.0,
            CoefficientBounds {
                r_min: 1.0,
                c_a: 1.0,
                v_min: 1.0,
                v_max: 1.0,
            },
        ),
        "quadratic-2d" => manufactured_problem(
            name,
            Arc::new(|x: &[f64]| {
                Jet2::from_parts(
                    x[0] * x[0] + x[1] * x[1],
                    &[2.0 * x[0], 2.0 * x[1]],
                    &[2.0, 0.0, 0.0, 2.0],
                )
                .expect("d=2")
            }),
            Coefficients::identity(2, 0.5),
            Domain::unit_box(2)?,
            4.0,
            2.0,
            CoefficientBounds {
                r_min: 1.0,
                c_a: 1.0,
                v_min: 0.5,
                v_max: 0.5,
            },
        ),
        "variable-coeff-2d" => {
            let coeffs = Coefficients {
                dim: 2,
                a: Arc::new(|x: &[f64]| {
                    let off = 0.25 * x[0] * x[1];
                    vec![1.0 + 0.5 * x[0] * x[0], off, off, 1.0 + 0.5 * x[1] * x[1]]
                }),
                div_a: Arc::new(|x: &[f64]| vec![1.25 * x[0], 1.25 * x[1]]),
                v: Arc::new(|x: &[f64]| 1.0 + x[0]),
            };
            manufactured_problem(
                name,
                Arc::new(|x: &[f64]| {
                    let s = sine_product(x);
                    let xy = Jet2::from_parts(
                        0.5 * x[0] * x[1],
                        &[0.5 * x[1], 0.5 * x[0]],
                        &[0.0, 0.5, 0.5, 0.0],
                    )
                    .expect("d=2");
                    s.add(&xy).expect("d=2")
                }),
                coeffs,
                Domain::unit_box(2)?,
                4.0,
                1.5,
                CoefficientBounds {
                    r_min: 0.75,
                    c_a: 1.5,
                    v_min: 1.0,
                    v_max: 2.0,
                },
            )
        }
        "sin-3d" => manufactured_problem(
            name,
            Arc::new(sine_product),
            Coefficients::identity(3, 1.0),
            Domain::unit_box(3)?,
            4.0,
            1.0,
            CoefficientBounds {
                r_min: 1.0,
                c_a: 1.0,
                v_min: 1.0,
                v_max: 1.0,
            },
        ),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}

/// JSON problem description: a preset plus loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub preset: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub quadrature: Option<QuadratureSpec>,
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            preset: "sin-1d".into(),
            lambda: 1.0,
            quadrature: None,
        }
    }
}

impl ProblemConfig {
    pub fn build(&self) -> Result<(EllipticProblem, LossConfig)> {
        let problem = preset(&self.preset)?;
        let quad = self
            .quadrature
            .unwrap_or_else(|| QuadratureSpec::default_for(problem.dim()));
        let loss = LossConfig::new(self.lambda, quad)?;
        Ok((problem, loss))
    }
}
