//! Whole-chain behaviour: determinism, bookkeeping and warm starts.

use bpinn::pde::{preset, LossConfig};
use bpinn::posterior::{generate_dataset, run_chain, warm_start, Init, McmcConfig};
use bpinn::prior::PriorConfig;

fn short_config(seed: u64) -> McmcConfig {
    McmcConfig {
        iterations: 600,
        burn_in: 200,
        thin: 20,
        chains: 2,
        seed,
        debug_checks: true,
        ..Default::default()
    }
}

#[test]
fn chains_are_reproducible_and_counted() {
    let problem = preset("sin-1d").unwrap();
    let data = generate_dataset(&problem, 64, 3).unwrap();
    let loss = LossConfig::default_for(1);
    let cfg = short_config(7);
    let a = run_chain(&cfg, &PriorConfig::default(), &data, &problem, &loss, &Init::Prior).unwrap();
    let b = run_chain(&cfg, &PriorConfig::default(), &data, &problem, &loss, &Init::Prior).unwrap();
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.summary.retained, 2 * (600 - 200) / 20);
    assert_eq!(a.samples.len(), a.summary.retained);
    for s in &a.samples {
        assert!(s.width >= 1 && s.bound > 0.0 && s.loglik.is_finite() && s.pop_loss >= 0.0);
    }
    for w in a.summary.mass_outside.windows(2) {
        assert!(w[1] <= w[0]);
    }
    let c = run_chain(&short_config(8), &PriorConfig::default(), &data, &problem, &loss, &Init::Prior).unwrap();
    assert_ne!(a.samples, c.samples);
}

#[test]
fn warm_start_chain_keeps_a_small_loss() {
    let problem = preset("sin-1d").unwrap();
    let data = generate_dataset(&problem, 512, 0).unwrap();
    let loss = LossConfig::default_for(1);
    let init = warm_start(&problem, &data, 4, 5).unwrap();
    let prior = PriorConfig {
        depth: init.arch.depth,
        ..Default::default()
    };
    let cfg = McmcConfig {
        chains: 1,
        ..short_config(1)
    };
    let run = run_chain(&cfg, &prior, &data, &problem, &loss, &Init::Params(init)).unwrap();
    assert!(run.summary.mean_loss.total < 0.5, "{:?}", run.summary.mean_loss);
    assert_eq!(run.summary.eval_grid.len(), run.summary.mean_on_grid.len());
}

#[test]
fn invalid_mcmc_settings_are_rejected() {
    let problem = preset("sin-1d").unwrap();
    let data = generate_dataset(&problem, 16, 0).unwrap();
    let loss = LossConfig::default_for(1);
    let bad = McmcConfig {
        thin: 0,
        ..Default::default()
    };
    assert!(run_chain(&bad, &PriorConfig::default(), &data, &problem, &loss, &Init::Prior).is_err());
    let bad = McmcConfig {
        burn_in: 20_000,
        ..Default::default()
    };
    assert!(run_chain(&bad, &PriorConfig::default(), &data, &problem, &loss, &Init::Prior).is_err());
}
