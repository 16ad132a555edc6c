//! Mini-batch EM on a larger sample: each iteration refreshes the sufficient
//! statistics for 10% of the rows and evaluates Δ on a fixed 10% subsample.
//!
//! ```bash
//! cargo run --release --example minibatch
//! ```

use fmc::data::{make_synthetic, SyntheticSpec};
use fmc::fairness::GroupIndex;
use fmc::optim::{fit_fmc_em, fit_fmc_em_minibatch, FitConfig};

fn main() -> fmc::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        n: 20_000,
        seed: 3,
        weights: vec![0.5, 0.5],
        centers: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        scales: vec![],
        group_bias: Some(vec![0.9, 0.1]),
        group_probs: None,
        categorical: vec![],
    })?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let cfg = FitConfig {
        lambda: 5.0,
        track_metrics: false,
        ..FitConfig::em(2)
    };

    let full = fit_fmc_em(&ds, &groups, &cfg)?;
    let mb = fit_fmc_em_minibatch(
        &ds,
        &groups,
        &FitConfig {
            batch_fraction: 0.1,
            subsample_fraction: 0.1,
            ..cfg
        },
    )?;
    for (name, r) in [("full batch", &full), ("mini-batch", &mb)] {
        println!(
            "{name:<11} {:.2}s  nll={:.4}  hard gap={:.4}  Δ rows={}",
            r.seconds, r.metrics.nll, r.metrics.gap_hard, r.subsample_size
        );
    }
    Ok(())
}
