//! Property tests for network parameters, serialization and the clipped jet.

mod support;

use approx::assert_relative_eq;
use proptest::prelude::*;

use bpinn::network::{forward_jet, Architecture, ClipSpec, NetworkParams, Scratch};
use support::dense_forward;

fn network() -> impl Strategy<Value = NetworkParams> {
    (1usize..=3, 1usize..=3, 1usize..=8).prop_flat_map(|(d, depth, width)| {
        let t = Architecture::empty(d, depth, width).unwrap().num_params();
        (
            Just((d, depth, width)),
            proptest::collection::vec((any::<bool>(), -2.0f64..2.0), t),
            0.5f64..4.0,
        )
            .prop_map(|((d, depth, width), entries, extra)| {
                let mut arch = Architecture::empty(d, depth, width).unwrap();
                let mut theta = vec![0.0; entries.len()];
                for (i, (on, v)) in entries.into_iter().enumerate() {
                    arch.mask[i] = on;
                    if on {
                        theta[i] = v;
                    }
                }
                NetworkParams::new(arch, theta, 2.0 + extra).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn json_round_trip_is_exact(p in network()) {
        let back = NetworkParams::from_json(&p.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn evaluator_value_matches_dense_forward(p in network(), seed in 0u64..1000) {
        let d = p.arch.input_dim;
        let x: Vec<f64> = (0..d).map(|a| ((seed as f64 + 1.0) * (a as f64 + 0.618)).fract()).collect();
        let jet = p.evaluator().eval_jet(&x, &mut Scratch::default());
        let (want, _) = dense_forward(&p, &x);
        prop_assert!((jet.value - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn clipped_output_is_bounded(p in network(), scale in 0.5f64..5.0) {
        let clip = ClipSpec::new(scale);
        let x = vec![0.3; p.arch.input_dim];
        let j = forward_jet(&p, &clip, &x).unwrap();
        prop_assert!(j.value.abs() <= 2.0 * scale * (1.0 + 1e-12));
    }
}

#[test]
fn clip_is_identity_near_zero_for_any_scale() {
    for scale in [0.5, 1.0, 3.0, 1e6] {
        let clip = ClipSpec::new(scale);
        for i in 0..=100 {
            let x = scale * (-0.99 + 1.98 * i as f64 / 100.0);
            assert_relative_eq!(clip.eval(x), x, max_relative = 1e-13, epsilon = 1e-300);
        }
        assert_relative_eq!(clip.eval(5.0 * scale), 2.0 * scale, max_relative = 1e-13);
        assert_relative_eq!(clip.eval(-5.0 * scale), -2.0 * scale, max_relative = 1e-13);
    }
}

#[test]
fn invalid_parameters_are_rejected() {
    let arch = Architecture::empty(1, 1, 2).unwrap();
    let t = arch.num_params();
    let mut theta = vec![0.0; t];
    theta[0] = 1.0;
    assert!(NetworkParams::new(arch.clone(), theta, 2.0).is_err());
    assert!(NetworkParams::new(arch.clone(), vec![0.0; t + 1], 2.0).is_err());
    assert!(NetworkParams::new(arch, vec![0.0; t], -1.0).is_err());
    assert!(Architecture::empty(0, 1, 1).is_err());
}

#[test]
fn dimension_mismatch_is_an_error() {
    let p = NetworkParams::new(Architecture::empty(2, 1, 2).unwrap(), vec![0.0; 9], 1.0).unwrap();
    assert!(forward_jet(&p, &ClipSpec::new(1.0), &[0.5]).is_err());
}
