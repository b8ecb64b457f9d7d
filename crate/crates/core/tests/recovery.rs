//! With strong persistence and large emission weights the data carry enough
//! signal for the estimator to recover structure. The bounds are loose: they
//! separate "learns something" from "learns nothing", not a benchmark.

use mlnet::evaluate::{align_factors, auc, TieRule};
use mlnet::model::log_odds;
use mlnet::simulate::{derive_seed, generate, preset};
use mlnet::{fit, FitOptions, Tensor3};

#[test]
fn high_signal_data_are_recovered() {
    let (mut aucs, mut mapes, mut true_aucs) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..3 {
        let mut cfg = preset(1, 1).unwrap().with_seed(derive_seed(11, r));
        cfg.transition_eigen_range = [0.9, 0.99];
        cfg.emission_scale = 5.0;
        let (x, truth) = generate(&cfg).unwrap();
        let f = fit(&x, &FitOptions::default().with_seed(r)).unwrap();
        let gamma: Vec<Tensor3> = f.posterior.means[1..]
            .iter()
            .map(|z| log_odds(&f.params, z).unwrap())
            .collect();
        aucs.push(auc(&gamma, &x, TieRule::Half).unwrap());
        true_aucs.push(auc(&truth.gamma, &x, TieRule::Half).unwrap());
        mapes.push(
            align_factors(&f.params.c1, &truth.model_params().unwrap().c1)
                .unwrap()
                .mape,
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    eprintln!("auc {aucs:?} (true {true_aucs:?}), mape {mapes:?}");
    assert!(mean(&aucs) > 0.6, "auc {aucs:?}");
    assert!(
        mean(&aucs) > mean(&true_aucs) - 0.1,
        "auc {aucs:?} vs true {true_aucs:?}"
    );
    assert!(mean(&mapes) < 0.6, "mape {mapes:?}");
}
