//! Recovers the regularizer a prox map implicitly minimizes.
//!
//! For the quadratic potential ψ(y) = ¼y² the prox is y/2, whose
//! regularizer is R(x) = x²/2. The same inversion then runs on an
//! untrained one-dimensional scale-equivariant network.
//!
//! ```text
//! cargo run --release --example implicit_regularizer
//! ```

use aelpn::analysis::{invert_prox, regularizer_eval, InversionSettings};
use aelpn::icnn::{IcnnConfig, IcnnParams};
use aelpn::potential::{PotentialVariant, ProxModel, VariantKind};
use aelpn::rng::Rng;

fn main() -> aelpn::Result<()> {
    let s = InversionSettings::default();
    let quad = ProxModel::new(
        PotentialVariant::new(VariantKind::PlainLpn, 0.5)?,
        IcnnParams::zeros(&IcnnConfig::plain(1, vec![2]))?,
    )?;
    println!("ψ(y) = y²/4");
    for x in [-2.0, -1.0, 0.5, 1.0, 3.0] {
        let r = regularizer_eval(&quad, &[x], &s)?;
        println!("  R({x:+.1}) = {:.10}   expected {:.10}   residual {:.1e}", r.value, x * x / 2.0, r.residual);
    }

    let cfg = VariantKind::ScaleEq.default_config(1, vec![16, 16]);
    let model = ProxModel::init(PotentialVariant::new(VariantKind::ScaleEq, 0.1)?, &cfg, &mut Rng::new(3))?;
    println!("untrained scale-equivariant network");
    for x in [-2.0, -1.0, 1.0, 2.0] {
        let inv = invert_prox(&model, &[x], &s)?;
        let r = regularizer_eval(&model, &[x], &s)?;
        println!(
            "  f({:+.4}) = {x:+.1}   R = {:.6}   {} iterations",
            inv.y[0], r.value, inv.iterations
        );
    }
    Ok(())
}
