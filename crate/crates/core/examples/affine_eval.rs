//! Brightness equivariance: PSNR between f(g(y)) and g(f(y)) for
//! g(y) = αy + (1 − α), on noisy synthetic patches, for an untrained plain
//! network, its normalization-wrapped version, and an untrained
//! affine-equivariant network.
//!
//! ```text
//! cargo run --release --example affine_eval
//! ```

use aelpn::experiments::{affine_eval_on, default_alpha_grid, eval_patches, DataSource};
use aelpn::data::PatchSpec;
use aelpn::math::gaussian_corrupt;
use aelpn::potential::{PotentialVariant, ProxModel, VariantKind};
use aelpn::rng::Rng;

fn main() -> aelpn::Result<()> {
    let mut rng = Rng::new(8);
    let mut models = Vec::new();
    for kind in [VariantKind::PlainLpn, VariantKind::NormTrick, VariantKind::AffineEq] {
        let cfg = kind.default_config(256, vec![64, 64]);
        models.push((kind.tag().to_string(), ProxModel::init(PotentialVariant::new(kind, 0.0)?, &cfg, &mut rng)?));
    }
    let clean = eval_patches(&DataSource::Synthetic, 0, 50, PatchSpec::default())?;
    let noisy: Vec<Vec<f64>> = clean.iter().map(|x| gaussian_corrupt(x, 0.1, &mut rng)).collect();
    let report = affine_eval_on(&models, &noisy, &default_alpha_grid(), 0)?;
    println!("{:>5} {:>10} {:>10} {:>10}", "α", "lpn", "normtrick", "ae");
    for a in default_alpha_grid() {
        let at = |tag: &str| report.select(tag, "equivariance_psnr_db").find(|r| r.param == a).unwrap().value;
        println!("{a:>5.1} {:>10.2} {:>10.2} {:>10.2}", at("lpn"), at("normtrick"), at("ae"));
    }
    Ok(())
}
