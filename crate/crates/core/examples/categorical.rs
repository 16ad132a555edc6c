//! Latent-class clustering of purely categorical rows.
//!
//! ```bash
//! cargo run --release --example categorical
//! ```

use fmc::data::{make_synthetic, SyntheticSpec};
use fmc::eval::accuracy_best_mapping;
use fmc::fairness::GroupIndex;
use fmc::mixture::Structure;
use fmc::optim::{fit_fmc_em, post_assign, FitConfig};

fn main() -> fmc::Result<()> {
    // component c puts mass 0.8 on level c of every feature
    let table = |c: usize| -> Vec<f64> { (0..4).map(|l| if l == c { 0.8 } else { 0.2 / 3.0 }).collect() };
    let ds = make_synthetic(&SyntheticSpec {
        n: 5000,
        seed: 3,
        weights: vec![0.5, 0.5],
        centers: vec![],
        scales: vec![],
        group_bias: Some(vec![0.8, 0.2]),
        group_probs: None,
        categorical: vec![vec![table(0); 5], vec![table(1); 5]],
    })?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let truth = ds.truth.clone().unwrap_or_default();

    for lambda in [0.0, 10.0] {
        let cfg = FitConfig {
            lambda,
            structure: Structure::Multinoulli,
            ..FitConfig::em(2)
        };
        let r = fit_fmc_em(&ds, &groups, &cfg)?;
        let (_, labels) = post_assign(&r.params, &ds.features)?;
        println!(
            "λ={lambda:<4} accuracy={:.3}  soft Δ={:.4}",
            accuracy_best_mapping(&labels, &truth)?,
            r.metrics.delta_soft
        );
    }
    Ok(())
}
