//! Compares the engine's input and parameter gradients with central finite
//! differences for every potential variant.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use aelpn::diff::{finite_difference_check, loss_parameter_gradient, Matrix};
use aelpn::loss::Loss;
use aelpn::potential::{PotentialVariant, ProxModel, VariantKind};
use aelpn::rng::Rng;

fn main() -> aelpn::Result<()> {
    let n = 6;
    let mut rng = Rng::new(11);
    for kind in VariantKind::ALL.into_iter().filter(|k| *k != VariantKind::NormTrick) {
        let config = kind.default_config(n, vec![8, 8]);
        let model = ProxModel::init(PotentialVariant::new(kind, 0.1)?, &config, &mut rng)?;
        let x = rng.normal_vec(n);
        let (_, grad) = model.potential_and_prox(&x)?;
        let fd = finite_difference_check(|p| model.potential_value(p).unwrap(), &x, &grad, 1e-6)?;
        println!("{:<6} ∇ₓψ      max rel error {:.2e}", kind.tag(), fd.max_rel_error);

        // parameter gradient of the ℓ2 denoising loss on a small batch
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..4).map(|_| (rng.normal_vec(n), rng.normal_vec(n))).collect();
        let program = model.program();
        let params = model.params().tensors().to_vec();
        let (_, analytic) = loss_parameter_gradient(program, &params, &batch, &Loss::L2)?;
        let flat: Vec<f64> = analytic.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let theta: Vec<f64> = params.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        let rebuild = |flat: &[f64]| {
            let mut out = Vec::new();
            let mut off = 0;
            for m in &params {
                let (r, c) = m.shape();
                out.push(Matrix::from_vec(r, c, flat[off..off + r * c].to_vec()).unwrap());
                off += r * c;
            }
            out
        };
        let fd = finite_difference_check(
            |t| loss_parameter_gradient(program, &rebuild(t), &batch, &Loss::L2).unwrap().0,
            &theta,
            &flat,
            1e-6,
        )?;
        println!("{:<6} ∂L/∂θ    max rel error {:.2e} over {} parameters", kind.tag(), fd.max_rel_error, theta.len());
    }
    Ok(())
}
