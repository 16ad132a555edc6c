//! End to end through files: write a CSV, load it with a schema, standardize,
//! fit, save the model as JSON and reload it to label new rows.
//!
//! ```bash
//! cargo run --release --example csv_pipeline
//! ```

use fmc::data::{load_csv, make_synthetic, write_csv, Preprocessing, Schema, SyntheticSpec};
use fmc::fairness::GroupIndex;
use fmc::mixture::ModelParams;
use fmc::optim::{fit_fmc_em, post_assign, FitConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("fmc_pipeline");
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join("data.csv");

    let ds = make_synthetic(&SyntheticSpec {
        n: 1500,
        seed: 9,
        weights: vec![0.4, 0.6],
        centers: vec![vec![10.0, 200.0], vec![14.0, 260.0]],
        scales: vec![2.0, 2.0],
        group_bias: Some(vec![0.85, 0.2]),
        group_probs: None,
        categorical: vec![],
    })?;
    write_csv(&ds, &csv)?;

    let schema = Schema::parse_inline("x1=continuous,x2=continuous,group=sensitive")?;
    let raw = load_csv(&csv, &schema)?;
    let (ds, pre) = Preprocessing::fit(&raw, true, false)?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let report = fit_fmc_em(&ds, &groups, &FitConfig::em(2))?;
    println!("fit: {:?} after {} iterations, gap {:.4}", report.stop_reason, report.iterations, report.metrics.gap_hard);

    let model_path = dir.join("params.json");
    let text = serde_json::to_string_pretty(&report.params)?;
    std::fs::write(&model_path, text)?;

    let text = std::fs::read_to_string(&model_path)?;
    let params: ModelParams = serde_json::from_str(&text)?;
    let fresh = pre.apply(&raw.features)?;
    let (_, labels) = post_assign(&params, &fresh)?;
    let ones = labels.iter().filter(|&&l| l == 1).count();
    println!("reloaded model puts {ones} of {} rows in cluster 1", labels.len());
    println!("files in {}", dir.display());
    Ok(())
}
