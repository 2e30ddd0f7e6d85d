//! Trains a plain and an affine-equivariant patch denoiser on synthetic
//! images and sweeps the test noise level.
//!
//! ```text
//! cargo run --release --example denoise -- [steps-per-phase]
//! ```
//!
//! The default is a short run; pass 5000 for the full schedule.

use aelpn::experiments::{cmd_eval_noise_sweep, cmd_train_denoiser, DataSource, DenoiserOptions, NoiseSweepOptions};
use aelpn::VariantKind;

fn main() -> aelpn::Result<()> {
    let steps = std::env::args().nth(1).map_or(500, |s| s.parse().expect("steps"));
    let mut models = Vec::new();
    for kind in [VariantKind::PlainLpn, VariantKind::AffineEq] {
        let mut opts = DenoiserOptions::new(kind, 0, DataSource::Synthetic);
        opts.overrides.steps = Some(steps);
        let (ck, history) = cmd_train_denoiser(&opts)?;
        println!("{}: final {} loss {:.4}", kind.tag(), history.entries.last().unwrap().loss_kind, history.final_loss().unwrap());
        models.push((kind.tag().to_string(), ck.model));
    }
    let report = cmd_eval_noise_sweep(&models, &NoiseSweepOptions::new(0, DataSource::Synthetic))?;
    println!("{:>6} {:>10} {:>10} {:>10}", "σ", "noisy", "lpn", "ae");
    for row in report.select("identity", "psnr_db") {
        let at = |tag: &str| report.select(tag, "psnr_db").find(|r| r.param == row.param).unwrap().value;
        println!("{:>6.2} {:>10.2} {:>10.2} {:>10.2}", row.param, row.value, at("lpn"), at("ae"));
    }
    Ok(())
}
