//! Compare the analytic gradient of the penalized likelihood with central
//! finite differences on a small random problem.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use fmc::data::{Dataset, Features};
use fmc::fairness::GroupIndex;
use fmc::mixture::ModelParams;
use fmc::objective::{finite_diff_gradient, grad_penalized, penalized_objective, DeltaSource, ObjectiveKind, PenaltyForm};
use ndarray::{array, Array2};
use rand::Rng;

fn main() -> fmc::Result<()> {
    let mut rng = fmc::rng::seeded(2);
    let x = Array2::from_shape_fn((40, 2), |_| rng.random_range(-2.0..2.0));
    let sensitive = (0..40).map(|i| i % 2).collect();
    let ds = Dataset::new(Features::continuous(x), sensitive, 2)?;
    let groups = GroupIndex::from_dataset(&ds)?;
    let params = ModelParams::gaussian_diag(
        &[0.3, 0.7],
        array![[-0.5, 0.2], [0.8, -0.1]],
        array![[1.0, 1.3], [0.9, 1.1]],
    )?;

    for form in [PenaltyForm::Abs, PenaltyForm::Squared] {
        let lambda = 2.5;
        let analytic = grad_penalized(
            &params,
            &ds,
            &groups,
            lambda,
            ObjectiveKind::Likelihood,
            DeltaSource::Full,
            form,
        )?;
        let numeric = finite_diff_gradient(
            &params,
            |p| penalized_objective(p, &ds, &groups, lambda, DeltaSource::Full, form).unwrap_or(f64::NAN),
            1e-5,
        );
        println!("{form:?}: relative error {:.2e}", analytic.relative_error(&numeric));
    }
    Ok(())
}
