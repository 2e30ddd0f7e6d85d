//! Learns the prox of a split normal prior from noisy samples and compares
//! it with the closed form.
//!
//! ```text
//! cargo run --release --example split_normal -- [variant] [steps-per-phase]
//! ```
//!
//! The full recipe (10k + 10k steps) takes about a minute per model.

use aelpn::experiments::{cmd_train_splitnormal, SplitNormalOptions};
use aelpn::VariantKind;

fn main() -> aelpn::Result<()> {
    let mut args = std::env::args().skip(1);
    let kind = VariantKind::parse(&args.next().unwrap_or_else(|| "scale".into()))?;
    let mut opts = SplitNormalOptions::new(kind, 0);
    opts.overrides.steps = Some(args.next().map_or(2_000, |s| s.parse().expect("steps")));
    let run = cmd_train_splitnormal(&opts)?;
    let r = &run.report;
    let tag = kind.tag();
    println!("{:>6} {:>10} {:>10} {:>12}", "x", "learned", "oracle", "R(x)/σ²");
    let learned: Vec<_> = r.select(tag, "learned_prox").collect();
    let oracle: Vec<_> = r.select(tag, "oracle_prox").collect();
    let reg: Vec<_> = r.select(tag, "regularizer").collect();
    for i in (0..learned.len()).step_by(10) {
        let x = learned[i].param;
        let reg_at = reg.iter().find(|row| row.param == x).map_or(f64::NAN, |row| row.value);
        println!("{x:>6.2} {:>10.4} {:>10.4} {:>12.4}", learned[i].value, oracle[i].value, reg_at);
    }
    let worst = learned
        .iter()
        .zip(&oracle)
        .filter(|(l, _)| l.param.abs() <= 3.0 + 1e-9)
        .map(|(l, o)| (l.value - o.value).abs())
        .fold(0.0, f64::max);
    println!("max |learned − oracle| on [−3, 3]: {worst:.4}");
    Ok(())
}
