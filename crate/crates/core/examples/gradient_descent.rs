//! Plain gradient ascent on the penalized likelihood. Slower than the EM
//! variant but needs no frozen responsibilities.
//!
//! ```bash
//! cargo run --release --example gradient_descent
//! ```

use fmc::data::{make_synthetic, SyntheticSpec};
use fmc::fairness::GroupIndex;
use fmc::optim::{fit_fmc_gd, FitConfig};

fn main() -> fmc::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        n: 1000,
        seed: 4,
        weights: vec![0.5, 0.5],
        centers: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        scales: vec![],
        group_bias: Some(vec![0.9, 0.1]),
        group_probs: None,
        categorical: vec![],
    })?;
    let groups = GroupIndex::from_dataset(&ds)?;

    for lambda in [0.0, 10.0] {
        let cfg = FitConfig {
            lambda,
            max_iter: 4000,
            ..FitConfig::gd(2)
        };
        let r = fit_fmc_gd(&ds, &groups, &cfg)?;
        println!(
            "λ={lambda:<4} {} steps in {:.2}s, nll={:.4}, hard gap={:.4}",
            r.iterations, r.seconds, r.metrics.nll, r.metrics.gap_hard
        );
    }
    Ok(())
}
