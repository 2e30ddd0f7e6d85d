//! Structural audits on freshly initialized models: the equivariant
//! variants pass by construction, the plain network is not equivariant,
//! the normalization wrapper is equivariant but not a gradient field, and a
//! single negative hidden weight breaks the convexity constraint.
//!
//! ```text
//! cargo run --release --example audit
//! ```

use aelpn::experiments::{audits_pass, run_audits, AuditOptions};
use aelpn::icnn::{Activation, ParamRole};
use aelpn::potential::{PotentialVariant, ProxModel, VariantKind};
use aelpn::rng::Rng;

fn show(label: &str, model: &ProxModel) -> aelpn::Result<()> {
    let opts = AuditOptions {
        pairs: 2_000,
        jacobian_points: 20,
        ..AuditOptions::new(5)
    };
    let checks = run_audits(model, &opts)?;
    println!("== {label}: {}", if audits_pass(&checks) { "all guaranteed properties hold" } else { "VIOLATION" });
    for c in checks {
        let mark = if c.passed { "ok " } else if c.guaranteed { "BAD" } else { " - " };
        println!("   {mark} {:<24} {:.3e}", c.name, c.measured);
    }
    Ok(())
}

fn main() -> aelpn::Result<()> {
    let n = 8;
    let mut rng = Rng::new(1);
    for kind in VariantKind::ALL {
        let cfg = kind.default_config(n, vec![16, 16]);
        let model = ProxModel::init(PotentialVariant::new(kind, 0.05)?, &cfg, &mut rng)?;
        show(kind.tag(), &model)?;
    }

    let cfg = VariantKind::AffineEq.default_config(n, vec![16, 16]).with_activation(Activation::SortPool);
    let sortpool = ProxModel::init(PotentialVariant::new(VariantKind::AffineEq, 0.05)?, &cfg, &mut rng)?;
    show("ae with sortpool", &sortpool)?;

    let cfg = VariantKind::AffineEq.default_config(n, vec![16, 16]);
    let mut tampered = ProxModel::init(PotentialVariant::new(VariantKind::AffineEq, 0.05)?, &cfg, &mut rng)?;
    tampered.params_mut().tensor_mut(ParamRole::Wz(1)).expect("second layer").set(0, 0, -0.1);
    show("ae with a negative hidden weight", &tampered)
}
