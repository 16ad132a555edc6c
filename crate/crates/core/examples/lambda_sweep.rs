//! Sweep λ over several seeds in parallel and print the trade-off between
//! clustering cost and hard gap, with the Pareto-optimal λ values marked.
//!
//! ```bash
//! cargo run --release --example lambda_sweep
//! ```

use fmc::data::{make_synthetic, SyntheticSpec};
use fmc::eval::{spearman, sweep};
use fmc::fairness::GroupIndex;
use fmc::objective::PenaltyForm;
use fmc::optim::{Algorithm, FitConfig};

fn main() -> fmc::Result<()> {
    let ds = make_synthetic(&SyntheticSpec {
        n: 2000,
        seed: 1,
        weights: vec![0.5, 0.5],
        centers: vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        scales: vec![],
        group_bias: Some(vec![0.9, 0.1]),
        group_probs: None,
        categorical: vec![],
    })?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let base = FitConfig {
        penalty_form: PenaltyForm::Squared,
        track_metrics: false,
        ..FitConfig::em(2)
    };
    let lambdas = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0];
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let res = sweep(Algorithm::Em, &ds, &groups, &base, &lambdas, &[0, 1, 2], jobs)?;

    println!("{:>6} {:>10} {:>8}  pareto", "λ", "cost", "gap");
    for s in &res.summary {
        println!(
            "{:>6} {:>10.1} {:>8.4}  {}",
            s.lambda,
            s.cost.mean,
            s.gap_hard.mean,
            if s.pareto { "*" } else { "" }
        );
    }
    let l: Vec<f64> = res.summary.iter().map(|s| s.lambda).collect();
    let gap: Vec<f64> = res.summary.iter().map(|s| s.gap_hard.mean).collect();
    println!("spearman(λ, gap) = {:.2}", spearman(&l, &gap));

    let out = std::env::temp_dir().join("fmc_sweep.csv");
    res.write_csv(&out)?;
    println!("rows written to {}", out.display());
    Ok(())
}
