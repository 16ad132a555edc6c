//! Learn on a 5% subsample, then assign every row with the fitted model.
//!
//! ```bash
//! cargo run --release --example subsample_assign
//! ```

use fmc::data::{make_synthetic, subsample, SyntheticSpec};
use fmc::fairness::{balance, hard_gap, GroupIndex};
use fmc::optim::{fit_fmc_em, post_assign, FitConfig};

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
    let sub = subsample(&ds, ds.n_rows() / 20, &mut fmc::rng::seeded(5))?;
    let small = ds.select(&sub.indices)?;
    let small_groups = GroupIndex::from_dataset(&small)?;

    let report = fit_fmc_em(&small, &small_groups, &FitConfig { lambda: 5.0, ..FitConfig::em(2) })?;
    let (_, labels) = post_assign(&report.params, &ds.features)?;

    let groups = GroupIndex::from_dataset(&ds)?;
    println!("trained on {} of {} rows", small.n_rows(), ds.n_rows());
    println!("full-data hard gap {:.4}", hard_gap(&labels, &groups, 2)?);
    println!("full-data balance  {:.3}", balance(&labels, &groups, 2)?);
    Ok(())
}
