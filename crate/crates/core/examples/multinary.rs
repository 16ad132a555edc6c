//! Three sensitive groups. Δ becomes the largest mean pairwise gap.
//!
//! ```bash
//! cargo run --release --example multinary
//! ```

use fmc::data::{make_synthetic, SyntheticSpec};
use fmc::fairness::GroupIndex;
use fmc::optim::{fit_fmc_em, FitConfig};

fn main() -> fmc::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        n: 3000,
        seed: 4,
        weights: vec![0.5, 0.5],
        centers: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        scales: vec![],
        group_bias: None,
        group_probs: Some(vec![vec![0.6, 0.3, 0.1], vec![0.1, 0.3, 0.6]]),
        categorical: vec![],
    })?;
    let groups = GroupIndex::from_dataset(&ds)?;
    println!("group sizes {:?}", groups.counts());

    for lambda in [0.0, 10.0] {
        let r = fit_fmc_em(&ds, &groups, &FitConfig { lambda, ..FitConfig::em(2) })?;
        println!("λ={lambda:<4} Δ={:.4}  hard gap={:.4}", r.metrics.delta_soft, r.metrics.gap_hard);
    }
    Ok(())
}
