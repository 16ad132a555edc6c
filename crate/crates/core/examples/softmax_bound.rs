//! Responsibilities sharpen toward hard assignments as components separate.
//! Prints the smallest top responsibility next to its lower bound.
//!
//! ```bash
//! cargo run --example softmax_bound
//! ```

use fmc::data::Features;
use fmc::eval::remark1_bound_check;
use fmc::mixture::ModelParams;
use ndarray::{array, Array2};
use rand::Rng;

fn main() -> fmc::Result<()> {
    let mut rng = fmc::rng::seeded(7);
    for spread in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let params = ModelParams::gaussian_iso(&[0.5, 0.5], array![[-spread, 0.0], [spread, 0.0]], 1.0)?;
        // rows scattered around the two centers
        let x = Array2::from_shape_fn((1000, 2), |(i, j)| {
            let c = if i % 2 == 0 { -spread } else { spread };
            (if j == 0 { c } else { 0.0 }) + rng.random_range(-0.5..0.5)
        });
        let r = remark1_bound_check(&Features::continuous(x), &params)?;
        println!(
            "spread {spread:>4}: min max-ψ {:.6}, violations {}",
            r.min_max_psi, r.violations
        );
    }
    Ok(())
}
