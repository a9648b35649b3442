//! Tensor-product B-splines on the uniformly extended partition `t_i = i/l`.
//!
//! Basis functions use the explicit truncated-power form
//!
//! ```text
//! N_i(x) = 1/(k−1)! · Σ_{j=0..k} (−1)^j C(k,j) · max(l·x − i − j, 0)^{k−1},   i ∈ {−k+1, …, l−1}
//! ```
//!
//! and the projection `Q_{k,l}` interpolates at the tensor grid of Greville
//! abscissae. Interior abscissae are `ξ_i = (i + k/2)/l`; near the boundary the
//! knot averages are taken over knots clamped to `[0, 1]`, so every site lies
//! in the box and polynomials of degree `< k` are reproduced exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineSpec {
    pub order: usize,
    pub partition: usize,
    pub dim: usize,
}

impl SplineSpec {
    pub fn new(order: usize, partition: usize, dim: usize) -> Result<Self> {
        if order < 2 || partition < 1 || dim < 1 {
            return Err(Error::InvalidArgument(format!(
                "spline needs k >= 2, l >= 1, d >= 1 (got k={order}, l={partition}, d={dim})"
            )));
        }
        Ok(SplineSpec {
            order,
            partition,
            dim,
        })
    }

    /// Smallest basis index `−k + 1`.
    pub fn first_index(&self) -> i64 {
        1 - self.order as i64
    }

    /// Largest basis index `l − 1`.
    pub fn last_index(&self) -> i64 {
        self.partition as i64 - 1
    }

    /// `|I_{l,k}| = l + k − 1`.
    pub fn basis_len(&self) -> usize {
        self.partition + self.order - 1
    }

    pub fn num_coeffs(&self) -> usize {
        self.basis_len().pow(self.dim as u32)
    }

    pub fn knot(&self, i: i64) -> f64 {
        i as f64 / self.partition as f64
    }

    /// Average of the knots `t_{i+1}, …, t_{i+k−1}` clamped to `[0, 1]`.
    pub fn greville(&self, i: i64) -> f64 {
        let k = self.order as i64;
        if k == 1 {
            return self.knot(i).clamp(0.0, 1.0);
        }
        let sum: f64 = (i + 1..i + k).map(|m| self.knot(m).clamp(0.0, 1.0)).sum();
        sum / (k - 1) as f64
    }

    /// Whether the order is compatible with σ3 compilation (`k − 1 ≡ 0 mod 3`).
    pub fn compilable(&self) -> bool {
        (self.order - 1) % 3 == 0
    }

    fn check_index(&self, i: i64) -> Result<()> {
        if i < self.first_index() || i > self.last_index() {
            return Err(Error::IndexOutOfRange {
                index: i,
                lo: self.first_index(),
                hi: self.last_index(),
            });
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, j| acc * j as f64)
}

/// `N_{l,i}^{(k)}` and its first two derivatives at `x`, without index checks.
fn basis_derivs(spec: &SplineSpec, i: i64, x: f64) -> [f64; 3] {
    let k = spec.order;
    let l = spec.partition as f64;
    let z = l * x - i as f64;
    if z <= 0.0 || z >= k as f64 {
        return [0.0; 3];
    }
    let n = k - 1;
    let norm = 1.0 / factorial(n);
    let mut out = [0.0; 3];
    for j in 0..=k {
        let s = z - j as f64;
        if s <= 0.0 {
            break;
        }
        let c = if j % 2 == 0 { 1.0 } else { -1.0 } * binomial(k, j) * norm;
        out[0] += c * s.powi(n as i32);
        if n >= 1 {
            out[1] += c * n as f64 * s.powi(n as i32 - 1);
        }
        if n >= 2 {
            out[2] += c * (n * (n - 1)) as f64 * s.powi(n as i32 - 2);
        }
    }
    out[1] *= l;
    out[2] *= l * l;
    out
}

/// Evaluates `N_{l,i}^{(k)}` (or its first/second derivative) at `x`.
pub fn bspline_eval(spec: &SplineSpec, i: i64, x: f64, deriv_order: usize) -> Result<f64> {
    spec.check_index(i)?;
    if deriv_order > 2 {
        return Err(Error::InvalidArgument(format!(
            "derivative order {deriv_order} not supported"
        )));
    }
    Ok(basis_derivs(spec, i, x)[deriv_order])
}

/// Nonzero basis functions at `x`: `(index, [N, N', N''])`.
fn local_basis(spec: &SplineSpec, x: f64) -> Vec<(i64, [f64; 3])> {
    let l = spec.partition as f64;
    let top = (l * x).floor() as i64;
    let lo = (top - spec.order as i64 + 1).max(spec.first_index());
    let hi = top.min(spec.last_index());
    (lo..=hi).map(|i| (i, basis_derivs(spec, i, x))).collect()
}

/// Coefficients `λ_i(f)` of a tensor-product spline, axis 0 slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineCoeffs {
    pub spec: SplineSpec,
    pub coeffs: Vec<f64>,
}

impl SplineCoeffs {
    pub fn zeros(spec: SplineSpec) -> Self {
        SplineCoeffs {
            spec,
            coeffs: vec![0.0; spec.num_coeffs()],
        }
    }

    /// Flat position of the multi-index `idx` (entries in `I_{l,k}`).
    pub fn flat_index(&self, idx: &[i64]) -> usize {
        let n = self.spec.basis_len();
        idx.iter()
            .fold(0, |acc, &i| acc * n + (i - self.spec.first_index()) as usize)
    }

    /// Multi-index of flat position `p`.
    pub fn multi_index(&self, mut p: usize) -> Vec<i64> {
        let n = self.spec.basis_len();
        let mut idx = vec![0; self.spec.dim];
        for a in (0..self.spec.dim).rev() {
            idx[a] = (p % n) as i64 + self.spec.first_index();
            p /= n;
        }
        idx
    }

    pub fn get(&self, idx: &[i64]) -> f64 {
        self.coeffs[self.flat_index(idx)]
    }

    /// Bound on `sup |Q f|` over `[0,1]^d` from nonnegativity and partition of unity.
    pub fn sup_bound(&self) -> f64 {
        self.coeffs.iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn eval(&self, x: &[f64]) -> Result<Jet2> {
        spline_eval(self, x)
    }
}

/// Collocation matrix `M[p][q] = N_q(ξ_p)` for one axis.
fn collocation_matrix(spec: &SplineSpec) -> DMatrix<f64> {
    let n = spec.basis_len();
    let first = spec.first_index();
    DMatrix::from_fn(n, n, |p, q| {
        basis_derivs(spec, first + q as i64, spec.greville(first + p as i64))[0]
    })
}

/// Projects `f` onto the spline space by interpolation at Greville abscissae.
pub fn quasi_interpolant<F>(f: F, spec: SplineSpec) -> Result<SplineCoeffs>
where
    F: Fn(&[f64]) -> f64,
{
    let n = spec.basis_len();
    let d = spec.dim;
    let first = spec.first_index();
    let sites: Vec<f64> = (0..n).map(|p| spec.greville(first + p as i64)).collect();

    let mut out = SplineCoeffs::zeros(spec);
    let mut x = vec![0.0; d];
    for p in 0..out.coeffs.len() {
        let idx = out.multi_index(p);
        for (xa, &ia) in x.iter_mut().zip(&idx) {
            *xa = sites[(ia - first) as usize];
        }
        out.coeffs[p] = f(&x);
    }

    let lu = collocation_matrix(&spec).lu();
    // Residual check against the matrix itself guards near-singular solves.
    let m = collocation_matrix(&spec);
    let total = out.coeffs.len();
    for axis in 0..d {
        let stride = n.pow((d - 1 - axis) as u32);
        let outer = total / (n * stride);
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                let rhs = DVector::from_fn(n, |p, _| out.coeffs[base + p * stride]);
                let sol = lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::Singular("Greville collocation matrix".into()))?;
                let resid = (&m * &sol - &rhs).amax();
                if resid > 1e-10 * (1.0 + rhs.amax()) {
                    return Err(Error::Singular(format!(
                        "collocation residual {resid:e} exceeds tolerance"
                    )));
                }
                for p in 0..n {
                    out.coeffs[base + p * stride] = sol[p];
                }
            }
        }
    }
    Ok(out)
}

/// Tensor-product evaluation with gradient and Hessian.
pub fn spline_eval(coeffs: &SplineCoeffs, x: &[f64]) -> Result<Jet2> {
    let spec = &coeffs.spec;
    let d = spec.dim;
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::OutOfDomain(x.to_vec()));
    }
    let per_axis: Vec<Vec<(i64, [f64; 3])>> = x.iter().map(|&xa| local_basis(spec, xa)).collect();

    let mut value = 0.0;
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    let mut cursor = vec![0usize; d];
    let mut idx = vec![0i64; d];
    if per_axis.iter().any(|v| v.is_empty()) {
        return Ok(Jet2::zero(d));
    }
    loop {
        for a in 0..d {
            idx[a] = per_axis[a][cursor[a]].0;
        }
        let c = coeffs.get(&idx);
        if c != 0.0 {
            let b: Vec<&[f64; 3]> = (0..d).map(|a| &per_axis[a][cursor[a]].1).collect();
            let prod_except = |skip: &[usize], orders: &[usize]| -> f64 {
                (0..d)
                    .map(|a| match skip.iter().position(|&s| s == a) {
                        Some(p) => b[a][orders[p]],
                        None => b[a][0],
                    })
                    .product()
            };
            value += c * prod_except(&[], &[]);
            for i in 0..d {
                grad[i] += c * prod_except(&[i], &[1]);
                for j in i..d {
                    let h = if i == j {
                        prod_except(&[i], &[2])
                    } else {
                        prod_except(&[i, j], &[1, 1])
                    };
                    hess[i * d + j] += c * h;
                    if i != j {
                        hess[j * d + i] += c * h;
                    }
                }
            }
        }
        // odometer
        let mut a = d;
        loop {
            if a == 0 {
                return Jet2::from_parts(value, &grad, &hess);
            }
            a -= 1;
            cursor[a] += 1;
            if cursor[a] < per_axis[a].len() {
                break;
            }
            cursor[a] = 0;
        }
    }
}

/// Jets of every tensor basis function that is nonzero at `x`, keyed by flat index.
pub fn basis_jets(spec: &SplineSpec, x: &[f64]) -> Result<Vec<(usize, Jet2)>> {
    let d = spec.dim;
    if x.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: x.len(),
        });
    }
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::OutOfDomain(x.to_vec()));
    }
    let per_axis: Vec<Vec<(i64, [f64; 3])>> = x.iter().map(|&xa| local_basis(spec, xa)).collect();
    let probe = SplineCoeffs {
        spec: *spec,
        coeffs: Vec::new(),
    };
    let mut out: Vec<(Vec<i64>, Jet2)> = vec![(Vec::new(), Jet2::constant(1.0, d))];
    for (a, axis) in per_axis.iter().enumerate() {
        let mut next = Vec::with_capacity(out.len() * axis.len());
        for (idx, jet) in &out {
            for &(i, [v, g, h]) in axis {
                let mut gv = vec![0.0; d];
                let mut hv = vec![0.0; d * d];
                gv[a] = g;
                hv[a * d + a] = h;
                let factor = Jet2::from_parts(v, &gv, &hv)?;
                let mut idx2 = idx.clone();
                idx2.push(i);
                next.push((idx2, jet.mul(&factor)?));
            }
        }
        out = next;
    }
    Ok(out
        .into_iter()
        .map(|(idx, j)| (probe.flat_index(&idx), j))
        .collect())
}

/// One row of an [`ApproximationReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxRow {
    pub partition: usize,
    pub err_c0: f64,
    pub err_c1: f64,
    pub err_c2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximationReport {
    pub order: usize,
    pub dim: usize,
    pub rows: Vec<ApproxRow>,
    /// Fitted log-log slope of the C⁰ error against `l`.
    pub slope_c0: f64,
    /// Fitted log-log slope of the C² error against `l`.
    pub slope_c2: f64,
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

/// Uniform evaluation grid on `[0,1]^d` with `per_axis` points per axis.
pub fn uniform_grid(dim: usize, per_axis: usize) -> Vec<Vec<f64>> {
    let total = per_axis.pow(dim as u32);
    (0..total)
        .map(|mut p| {
            let mut x = vec![0.0; dim];
            for a in (0..dim).rev() {
                x[a] = (p % per_axis) as f64 / (per_axis - 1) as f64;
                p /= per_axis;
            }
            x
        })
        .collect()
}

/// C⁰/C¹/C² errors of `Q_{k,l} f` over a range of partitions.
///
/// `f` returns the exact jet of the target at a point.
pub fn approximation_report<F>(
    f: F,
    order: usize,
    dim: usize,
    partitions: &[usize],
    grid_per_axis: usize,
) -> Result<ApproximationReport>
where
    F: Fn(&[f64]) -> Jet2,
{
    let grid = uniform_grid(dim, grid_per_axis);
    let mut rows = Vec::with_capacity(partitions.len());
    for &l in partitions {
        let spec = SplineSpec::new(order, l, dim)?;
        let q = quasi_interpolant(|x| f(x).value, spec)?;
        let mut row = ApproxRow {
            partition: l,
            err_c0: 0.0,
            err_c1: 0.0,
            err_c2: 0.0,
        };
        for x in &grid {
            let (dv, dg, dh) = spline_eval(&q, x)?.max_abs_diff(&f(x));
            row.err_c0 = row.err_c0.max(dv);
            row.err_c1 = row.err_c1.max(dv).max(dg);
            row.err_c2 = row.err_c2.max(dv).max(dg).max(dh);
        }
        rows.push(row);
    }
    let ls: Vec<f64> = rows.iter().map(|r| r.partition as f64).collect();
    let c0: Vec<f64> = rows.iter().map(|r| r.err_c0).collect();
    let c2: Vec<f64> = rows.iter().map(|r| r.err_c2).collect();
    Ok(ApproximationReport {
        order,
        dim,
        slope_c0: loglog_slope(&ls, &c0),
        slope_c2: loglog_slope(&ls, &c2),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Cox–de Boor recursion on the uniform knots `t_i = i/l`.
    fn cox_de_boor(k: usize, l: usize, i: i64, x: f64) -> f64 {
        let t = |m: i64| m as f64 / l as f64;
        if k == 1 {
            return if t(i) <= x && x < t(i + 1) { 1.0 } else { 0.0 };
        }
        let km = (k - 1) as i64;
        let a = (x - t(i)) / (t(i + km) - t(i)) * cox_de_boor(k - 1, l, i, x);
        let b = (t(i + k as i64) - x) / (t(i + k as i64) - t(i + 1)) * cox_de_boor(k - 1, l, i + 1, x);
        a + b
    }

    #[test]
    fn matches_cox_de_boor() {
        let mut s = 0x2545f4914f6cdd1du64;
        for k in 2..=7 {
            for l in [1, 2, 5, 8, 32] {
                let spec = SplineSpec::new(k, l, 1).unwrap();
                for _ in 0..200 {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    let x = (s >> 11) as f64 / (1u64 << 53) as f64;
                    for i in spec.first_index()..=spec.last_index() {
                        let a = bspline_eval(&spec, i, x, 0).unwrap();
                        let b = cox_de_boor(k, l, i, x);
                        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "k={k} l={l} i={i} x={x}");
                    }
                }
            }
        }
    }

    #[test]
    fn support_positivity_partition_of_unity() {
        let spec = SplineSpec::new(4, 4, 1).unwrap();
        for p in 0..1000 {
            let x = p as f64 / 999.0;
            let mut sum = 0.0;
            for i in spec.first_index()..=spec.last_index() {
                let v = bspline_eval(&spec, i, x, 0).unwrap();
                assert!(v >= 0.0);
                if x < spec.knot(i) || x > spec.knot(i + 4) {
                    assert_eq!(v, 0.0);
                }
                sum += v;
            }
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hat_function_peak() {
        let spec = SplineSpec::new(2, 4, 1).unwrap();
        assert!((bspline_eval(&spec, 0, 0.25, 0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            bspline_eval(&spec, 4, 0.5, 0),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn reproduces_linears_and_constants() {
        let spec = SplineSpec::new(4, 4, 1).unwrap();
        let q = quasi_interpolant(|x| x[0], spec).unwrap();
        let c = quasi_interpolant(|_| 3.0, spec).unwrap();
        for p in 0..1000 {
            let x = p as f64 / 999.0;
            assert!((spline_eval(&q, &[x]).unwrap().value - x).abs() < 1e-10);
            assert!((spline_eval(&c, &[x]).unwrap().value - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratic_jet() {
        let spec = SplineSpec::new(4, 4, 1).unwrap();
        let q = quasi_interpolant(|x| x[0] * x[0], spec).unwrap();
        let j = spline_eval(&q, &[0.5]).unwrap();
        assert!((j.value - 0.25).abs() < 1e-9);
        assert!((j.grad[0] - 1.0).abs() < 1e-9);
        assert!((j.hess[0] - 2.0).abs() < 1e-9);
        assert_eq!(spline_eval(&SplineCoeffs::zeros(spec), &[0.3]).unwrap(), Jet2::zero(1));
        assert!(matches!(spline_eval(&q, &[1.5]), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn tensor_product_separates() {
        let s1 = SplineSpec::new(4, 3, 1).unwrap();
        let s2 = SplineSpec::new(4, 3, 2).unwrap();
        let f = |t: f64| (2.0 * t).sin() + t;
        let g = |t: f64| (t - 0.3).powi(2);
        let qf = quasi_interpolant(|x| f(x[0]), s1).unwrap();
        let qg = quasi_interpolant(|x| g(x[0]), s1).unwrap();
        let q2 = quasi_interpolant(|x| f(x[0]) * g(x[1]), s2).unwrap();
        let x = [0.37, 0.81];
        let a = spline_eval(&qf, &[x[0]]).unwrap();
        let b = spline_eval(&qg, &[x[1]]).unwrap();
        let j = spline_eval(&q2, &x).unwrap();
        assert!((j.value - a.value * b.value).abs() < 1e-12);
        assert!((j.grad[0] - a.grad[0] * b.value).abs() < 1e-11);
        assert!((j.hess[1] - a.grad[0] * b.grad[0]).abs() < 1e-11);
    }

    #[test]
    fn projection_is_idempotent() {
        let spec = SplineSpec::new(4, 5, 2).unwrap();
        let q = quasi_interpolant(|x| (3.0 * x[0]).cos() * x[1], spec).unwrap();
        let qq = quasi_interpolant(
            |x| {
                let y: Vec<f64> = x.to_vec();
                eval_unchecked(&q, &y)
            },
            spec,
        )
        .unwrap();
        for (a, b) in q.coeffs.iter().zip(&qq.coeffs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn eval_unchecked(q: &SplineCoeffs, x: &[f64]) -> f64 {
        let spec = &q.spec;
        let mut total = 0.0;
        for p in 0..q.coeffs.len() {
            let idx = q.multi_index(p);
            let prod: f64 = idx
                .iter()
                .zip(x)
                .map(|(&i, &xa)| basis_derivs(spec, i, xa)[0])
                .product();
            total += q.coeffs[p] * prod;
        }
        total
    }

    #[test]
    fn basis_jets_sum_to_spline() {
        let spec = SplineSpec::new(4, 3, 2).unwrap();
        let q = quasi_interpolant(|x| (x[0] + 2.0 * x[1]).cos(), spec).unwrap();
        let x = [0.21, 0.64];
        let mut acc = Jet2::zero(2);
        for (p, j) in basis_jets(&spec, &x).unwrap() {
            acc.axpy(q.coeffs[p], &j);
        }
        let (dv, dg, dh) = acc.max_abs_diff(&spline_eval(&q, &x).unwrap());
        assert!(dv < 1e-13 && dg < 1e-12 && dh < 1e-11);
    }

    #[test]
    fn sine_rates() {
        let f = |x: &[f64]| {
            let w = 2.0 * PI;
            Jet2::from_parts(
                (w * x[0]).sin(),
                &[w * (w * x[0]).cos()],
                &[-w * w * (w * x[0]).sin()],
            )
            .unwrap()
        };
        let r = approximation_report(f, 4, 1, &[4, 8, 16, 32], 1000).unwrap();
        assert!((r.slope_c0 + 4.0).abs() < 0.3, "{r:?}");
        assert!((r.slope_c2 + 2.0).abs() < 0.3, "{r:?}");
        for w in r.rows.windows(2) {
            assert!(w[1].err_c2 <= w[0].err_c2);
        }
    }
}
