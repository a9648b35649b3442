//! Presets against a finite-difference operator oracle, and loss sanity.

use bpinn::jet::Jet2;
use bpinn::pde::{preset, LossConfig, PopulationLoss, PRESETS};

/// `−div(A∇u) + V u` by nested central differences on values of `u` only.
fn fd_operator(problem: &bpinn::pde::EllipticProblem, x: &[f64]) -> f64 {
    let u = problem.u_star.clone().expect("presets are manufactured");
    let d = x.len();
    let h = 1e-4;
    let value = |y: &[f64]| u(y).value;
    let grad = |y: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|a| {
                let (mut p, mut m) = (y.to_vec(), y.to_vec());
                p[a] += h;
                m[a] -= h;
                (value(&p) - value(&m)) / (2.0 * h)
            })
            .collect()
    };
    let flux = |y: &[f64], i: usize| -> f64 {
        let a = (problem.coeffs.a)(y);
        let g = grad(y);
        (0..d).map(|j| a[i * d + j] * g[j]).sum()
    };
    let h2 = 1e-3;
    let div: f64 = (0..d)
        .map(|i| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += h2;
            m[i] -= h2;
            (flux(&p, i) - flux(&m, i)) / (2.0 * h2)
        })
        .sum();
    -div + (problem.coeffs.v)(x) * value(x)
}

#[test]
fn source_matches_finite_difference_operator() {
    for name in PRESETS {
        let p = preset(name).unwrap();
        let d = p.dim();
        for s in 0..20 {
            let x: Vec<f64> = (0..d).map(|a| 0.1 + 0.8 * (((s * 7 + a * 3) % 20) as f64 / 19.0)).collect();
            let want = fd_operator(&p, &x);
            let got = (p.f)(&x);
            assert!(
                (got - want).abs() <= 1e-4 * want.abs().max(1.0),
                "{name} at {x:?}: f = {got}, finite differences give {want}"
            );
        }
    }
}

#[test]
fn boundary_data_is_trace_of_solution() {
    for name in PRESETS {
        let p = preset(name).unwrap();
        let u = p.u_star.clone().unwrap();
        let d = p.dim();
        for a in 0..d {
            for side in [0.0, 1.0] {
                let mut y = vec![0.37; d];
                y[a] = side;
                assert!(((p.g)(&y) - u(&y).value).abs() < 1e-14, "{name}");
            }
        }
    }
}

#[test]
fn exact_solution_has_zero_loss_and_shift_has_known_loss() {
    let p = preset("sin-1d").unwrap();
    let loss = PopulationLoss::new(&p, &LossConfig::default_for(1)).unwrap();
    let u = p.u_star.clone().unwrap();
    let exact = loss.eval(|x| Ok(u(x)), |y| Ok(u(y).value)).unwrap();
    assert!(exact.total < 1e-24, "{exact:?}");
    // u* + c has residual V·c = c inside and c on the boundary.
    let c = 0.1;
    let shifted = loss
        .eval(
            |x| {
                let j = u(x);
                Ok(Jet2::from_parts(j.value + c, &j.grad, &j.hess).unwrap())
            },
            |y| Ok(u(y).value + c),
        )
        .unwrap();
    assert!((shifted.interior - c * c * p.domain.volume()).abs() < 1e-12);
    assert!((shifted.boundary - c * c * p.domain.boundary_measure()).abs() < 1e-12);
    assert!((shifted.total - shifted.interior - loss.lambda * shifted.boundary).abs() < 1e-15);
}

#[test]
fn presets_pass_their_own_validation() {
    for name in PRESETS {
        preset(name).unwrap().validate(9).unwrap();
    }
    assert!(preset("no-such-problem").is_err());
}
