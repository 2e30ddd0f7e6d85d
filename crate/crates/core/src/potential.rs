//! Convex potentials built around an ICNN, and the prox maps they induce.
//!
//! | variant  | potential                                              |
//! |----------|--------------------------------------------------------|
//! | PlainLpn | `Ψ(x) + α/2 ‖x‖²`                                      |
//! | ScaleEq  | `h(x) + α/2 ‖x‖²`                                      |
//! | ShiftEq  | `Ψ((I−P)x) + ½‖Px‖² + α/2 ‖(I−P)x‖²`                   |
//! | AffineEq | `h((I−P)x) + ½‖Px‖² + α/2 ‖(I−P)x‖²`                   |
//!
//! Here `Ψ` is the raw network output and `h = max(Ψ, 0)²` the squared head
//! of a bias-free 1-homogeneous network. The prox map is the input
//! gradient of the potential; for `AffineEq` it reads
//! `(I−P)∇h((I−P)x) + Px + α(I−P)x` and satisfies
//! `f(a x + b 1) = a f(x) + b 1` for every `a > 0`.
//!
//! `NormTrick` is the mean/std normalization wrapper around a plain network:
//! equivariant by construction but not the gradient of any potential.

use crate::diff::{PrimitiveOp, Program, ProgramBuilder};
use crate::error::{Error, Result};
use crate::icnn::{self, IcnnConfig, IcnnParams};
use crate::math;
use crate::rng::Rng;

/// Standard deviation below which the normalization wrapper returns its
/// input unchanged.
pub const NORM_TRICK_MIN_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    PlainLpn,
    ScaleEq,
    ShiftEq,
    AffineEq,
    NormTrick,
}

impl VariantKind {
    pub const ALL: [VariantKind; 5] = [
        VariantKind::PlainLpn,
        VariantKind::ScaleEq,
        VariantKind::ShiftEq,
        VariantKind::AffineEq,
        VariantKind::NormTrick,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            VariantKind::PlainLpn => "lpn",
            VariantKind::ScaleEq => "scale",
            VariantKind::ShiftEq => "shift",
            VariantKind::AffineEq => "ae",
            VariantKind::NormTrick => "normtrick",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }

    /// Whether the variant needs the bias-free, squared-head network.
    pub fn needs_equivariant_preset(self) -> bool {
        matches!(self, VariantKind::ScaleEq | VariantKind::AffineEq)
    }

    pub fn is_scale_equivariant(self) -> bool {
        matches!(self, VariantKind::ScaleEq | VariantKind::AffineEq | VariantKind::NormTrick)
    }

    pub fn is_shift_equivariant(self) -> bool {
        matches!(self, VariantKind::ShiftEq | VariantKind::AffineEq | VariantKind::NormTrick)
    }

    /// Whether the prox map is the gradient of a convex potential.
    pub fn is_proximal(self) -> bool {
        self != VariantKind::NormTrick
    }

    /// Default network configuration for this variant.
    pub fn default_config(self, input_dim: usize, hidden_widths: Vec<usize>) -> IcnnConfig {
        if self.needs_equivariant_preset() {
            IcnnConfig::equivariant(input_dim, hidden_widths)
        } else {
            IcnnConfig::plain(input_dim, hidden_widths)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PotentialVariant {
    pub kind: VariantKind,
    /// Weight of the strong-convexity term `α/2 ‖·‖²` (on the centered part
    /// for the shift-equivariant variants).
    pub alpha: f64,
}

impl PotentialVariant {
    pub fn new(kind: VariantKind, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be nonnegative, got {alpha}")));
        }
        Ok(Self { kind, alpha })
    }
}

/// A variant together with its network parameters.
#[derive(Clone, Debug)]
pub struct ProxModel {
    variant: PotentialVariant,
    params: IcnnParams,
    program: Program,
}

impl ProxModel {
    pub fn new(variant: PotentialVariant, params: IcnnParams) -> Result<Self> {
        let config = params.config();
        if variant.kind.needs_equivariant_preset() && !config.is_equivariant_preset() {
            return Err(Error::InvalidArgument(format!(
                "variant {} needs a bias-free, 1-homogeneous network with a rectify-square head",
                variant.kind.tag()
            )));
        }
        let program = build_program(variant, config)?;
        program.check_params(params.tensors())?;
        Ok(Self {
            variant,
            params,
            program,
        })
    }

    /// Freshly initialized model.
    pub fn init(variant: PotentialVariant, config: &IcnnConfig, rng: &mut Rng) -> Result<Self> {
        Self::new(variant, icnn::init(config, rng)?)
    }

    pub fn variant(&self) -> PotentialVariant {
        self.variant
    }

    pub fn kind(&self) -> VariantKind {
        self.variant.kind
    }

    pub fn config(&self) -> &IcnnConfig {
        self.params.config()
    }

    pub fn input_dim(&self) -> usize {
        self.params.config().input_dim
    }

    pub fn params(&self) -> &IcnnParams {
        &self.params
    }

    /// Mutable access for optimizers. Tensor shapes must not change.
    pub fn params_mut(&mut self) -> &mut IcnnParams {
        &mut self.params
    }

    /// The potential as a differentiable program. For `NormTrick` this is
    /// the wrapped plain potential.
    pub fn program(&self) -> &Program {
        &self.program
    }

    /// Same parameters with a different strong-convexity weight.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        Self::new(PotentialVariant::new(self.variant.kind, alpha)?, self.params.clone())
    }

    /// Same parameters under another variant, e.g. a trained plain network
    /// wrapped as `NormTrick`.
    pub fn with_kind(&self, kind: VariantKind) -> Result<Self> {
        Self::new(PotentialVariant::new(kind, self.variant.alpha)?, self.params.clone())
    }

    fn not_a_potential(&self) -> Error {
        Error::InvalidArgument("the normalization-trick wrapper has no potential".into())
    }

    pub fn potential_value(&self, x: &[f64]) -> Result<f64> {
        if !self.kind().is_proximal() {
            return Err(self.not_a_potential());
        }
        self.program.value(self.params.tensors(), x)
    }

    /// `(ψ(x), ∇ψ(x))`.
    pub fn potential_and_prox(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if !self.kind().is_proximal() {
            return Err(self.not_a_potential());
        }
        self.program.potential_and_gradient(self.params.tensors(), x)
    }

    /// The denoiser `f(x)`: `∇ψ(x)`, or the normalization wrapper.
    pub fn prox_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.kind() {
            VariantKind::NormTrick => norm_trick_apply(self, x),
            _ => Ok(self.program.potential_and_gradient(self.params.tensors(), x)?.1),
        }
    }

    /// `∇²ψ(x) v`. Not available for the normalization wrapper.
    pub fn hessian_vector(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if self.kind() == VariantKind::NormTrick {
            return Err(Error::InvalidArgument("the normalization wrapper has no potential".into()));
        }
        let tape = self.program.forward(self.params.tensors(), x)?;
        self.program.hessian_vector(self.params.tensors(), &tape, v)
    }

    /// Distance from `x` to the nearest branch switch of a piecewise
    /// primitive in the potential.
    ///
    /// For the normalization wrapper the base network runs on the
    /// standardized input, so the margin is measured there and mapped back
    /// to input units.
    pub fn kink_margin(&self, x: &[f64]) -> Result<f64> {
        if self.kind() == VariantKind::NormTrick {
            let s = math::std_dev(x);
            if s < NORM_TRICK_MIN_STD {
                return Ok(f64::INFINITY);
            }
            let m = math::mean(x);
            let t: Vec<f64> = x.iter().map(|v| (v - m) / s).collect();
            let tape = self.program.forward(self.params.tensors(), &t)?;
            return Ok(s * self.program.min_kink_margin(&tape));
        }
        let tape = self.program.forward(self.params.tensors(), x)?;
        Ok(self.program.min_kink_margin(&tape))
    }
}

fn build_program(variant: PotentialVariant, config: &IcnnConfig) -> Result<Program> {
    let mut b = ProgramBuilder::new(config.input_dim);
    let x = b.input();
    let alpha = variant.alpha;
    let mut terms = Vec::new();
    match variant.kind {
        VariantKind::PlainLpn | VariantKind::ScaleEq | VariantKind::NormTrick => {
            let (_, out) = icnn::append_to(&mut b, x, config)?;
            terms.push((1.0, out));
            if alpha > 0.0 {
                terms.push((1.0, b.push(PrimitiveOp::SquaredNorm { input: x, scale: 0.5 * alpha })?));
            }
        }
        VariantKind::ShiftEq | VariantKind::AffineEq => {
            let centered = b.push(PrimitiveOp::Center(x))?;
            let (_, out) = icnn::append_to(&mut b, centered, config)?;
            let mean = b.push(PrimitiveOp::MeanProject(x))?;
            terms.push((1.0, out));
            terms.push((1.0, b.push(PrimitiveOp::SquaredNorm { input: mean, scale: 0.5 })?));
            if alpha > 0.0 {
                terms.push((1.0, b.push(PrimitiveOp::SquaredNorm { input: centered, scale: 0.5 * alpha })?));
            }
        }
    }
    b.push(PrimitiveOp::ScalarCombine(terms))?;
    b.finish()
}

/// `std(x) · f(T(x)) + mean(x)` with `T(x) = (x − mean(x)) / std(x)` and
/// `f` the gradient of `base`'s potential. Constant inputs are returned
/// unchanged.
pub fn norm_trick_apply(base: &ProxModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != base.input_dim() {
        return Err(Error::Shape(format!(
            "input of length {}, model expects {}",
            x.len(),
            base.input_dim()
        )));
    }
    let m = math::mean(x);
    let s = math::std_dev(x);
    if s < NORM_TRICK_MIN_STD {
        return Ok(x.to_vec());
    }
    let t: Vec<f64> = x.iter().map(|v| (v - m) / s).collect();
    let (_, f) = base.program.potential_and_gradient(base.params.tensors(), &t)?;
    Ok(f.iter().map(|v| s * v + m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Matrix;

    fn model(kind: VariantKind, n: usize, alpha: f64, seed: u64) -> ProxModel {
        let cfg = kind.default_config(n, vec![8, 8]);
        ProxModel::init(PotentialVariant::new(kind, alpha).unwrap(), &cfg, &mut Rng::new(seed)).unwrap()
    }

    #[test]
    fn hessian_vector_matches_gradient_differences() {
        for kind in [VariantKind::PlainLpn, VariantKind::ScaleEq, VariantKind::AffineEq] {
            let m = model(kind, 5, 0.2, 4);
            let mut rng = Rng::new(9);
            let x = rng.normal_vec(5);
            let v = rng.normal_vec(5);
            let hv = m.hessian_vector(&x, &v).unwrap();
            let h = 1e-6;
            let plus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let (gp, gm) = (m.prox_apply(&plus).unwrap(), m.prox_apply(&minus).unwrap());
            for k in 0..5 {
                let fd = (gp[k] - gm[k]) / (2.0 * h);
                assert!((fd - hv[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{kind:?} {k}: {fd} vs {}", hv[k]);
            }
        }
        assert!(model(VariantKind::NormTrick, 3, 0.0, 0).hessian_vector(&[1.0, 2.0, 0.0], &[1.0; 3]).is_err());
    }

    #[test]
    fn affine_constant_input() {
        for seed in 0..5 {
            let m = model(VariantKind::AffineEq, 6, 0.0, seed);
            let c = -1.7;
            let x = vec![c; 6];
            assert!((m.potential_value(&x).unwrap() - 0.5 * 6.0 * c * c).abs() < 1e-12);
            let f = m.prox_apply(&x).unwrap();
            for v in f {
                assert!((v - c).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_two_homogeneous_value() {
        let m = model(VariantKind::AffineEq, 5, 0.3, 2);
        let x = Rng::new(1).normal_vec(5);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let v = m.potential_value(&x).unwrap();
        assert!((m.potential_value(&x2).unwrap() - 4.0 * v).abs() < 1e-12 * (1.0 + v.abs()));
    }

    #[test]
    fn shift_value_expansion() {
        let m = model(VariantKind::ShiftEq, 4, 0.1, 3);
        let x = math::center(&Rng::new(2).normal_vec(4));
        let c = 0.8;
        let xs: Vec<f64> = x.iter().map(|v| v + c).collect();
        let lhs = m.potential_value(&xs).unwrap();
        let rhs = m.potential_value(&x).unwrap() + 0.5 * 4.0 * c * c;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn affine_equivariance_example() {
        let mut rng = Rng::new(9);
        for seed in 0..5 {
            let m = model(VariantKind::AffineEq, 8, 0.0, seed);
            let x = rng.normal_vec(8);
            let fx = m.prox_apply(&x).unwrap();
            let gx = math::affine_transform(&x, 3.0, -0.7).unwrap();
            let lhs = m.prox_apply(&gx).unwrap();
            let rhs = math::affine_transform(&fx, 3.0, -0.7).unwrap();
            let dev = math::norm_inf(&math::sub(&lhs, &rhs));
            assert!(dev <= 1e-6 * (1.0 + math::norm_inf(&fx)));
        }
    }

    #[test]
    fn affine_prox_matches_closed_form() {
        // (I−P)∇h((I−P)x) + Px + α(I−P)x with ∇h from a standalone network
        let alpha = 0.25;
        let m = model(VariantKind::AffineEq, 6, alpha, 4);
        let h = icnn::program(m.config(), false).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let x = rng.normal_vec(6);
            let c = math::center(&x);
            let (_, gh) = h.potential_and_gradient(m.params().tensors(), &c).unwrap();
            let expected: Vec<f64> = math::center(&gh)
                .iter()
                .zip(math::mean_project(&x))
                .zip(&c)
                .map(|((g, p), ci)| g + p + alpha * ci)
                .collect();
            let f = m.prox_apply(&x).unwrap();
            assert!(math::norm_inf(&math::sub(&f, &expected)) < 1e-12);
        }
    }

    #[test]
    fn incompatible_preset_rejected() {
        let plain = IcnnConfig::plain(4, vec![4]);
        let v = PotentialVariant::new(VariantKind::AffineEq, 0.0).unwrap();
        assert!(ProxModel::init(v, &plain, &mut Rng::new(0)).is_err());
        let v = PotentialVariant::new(VariantKind::ScaleEq, 0.0).unwrap();
        assert!(ProxModel::init(v, &plain, &mut Rng::new(0)).is_err());
        assert!(PotentialVariant::new(VariantKind::PlainLpn, -1.0).is_err());
    }

    #[test]
    fn norm_trick_guards_and_identity() {
        let m = model(VariantKind::NormTrick, 5, 0.0, 1);
        let c = vec![0.4; 5];
        assert_eq!(m.prox_apply(&c).unwrap(), c);
        assert!(m.potential_value(&c).is_err());

        // identity base: zero network with α = 1 ⇒ ψ = ½‖x‖²
        let cfg = IcnnConfig::plain(5, vec![4]);
        let id = ProxModel::new(
            PotentialVariant::new(VariantKind::NormTrick, 1.0).unwrap(),
            IcnnParams::zeros(&cfg).unwrap(),
        )
        .unwrap();
        let x = Rng::new(3).normal_vec(5);
        let y = id.prox_apply(&x).unwrap();
        assert!(math::norm_inf(&math::sub(&x, &y)) < 1e-12);
    }

    #[test]
    fn norm_trick_equivariance() {
        let mut rng = Rng::new(12);
        for seed in 0..5 {
            let m = model(VariantKind::NormTrick, 7, 0.0, seed);
            let x = rng.normal_vec(7);
            let lhs = m.prox_apply(&math::affine_transform(&x, 2.0, 1.0).unwrap()).unwrap();
            let rhs = math::affine_transform(&m.prox_apply(&x).unwrap(), 2.0, 1.0).unwrap();
            assert!(math::norm_inf(&math::sub(&lhs, &rhs)) < 1e-10);
        }
    }

    #[test]
    fn plain_model_with_quadratic_only() {
        // ψ = ¼ y² in one dimension ⇒ f(y) = y/2
        let cfg = IcnnConfig::plain(1, vec![2]);
        let m = ProxModel::new(
            PotentialVariant::new(VariantKind::PlainLpn, 0.5).unwrap(),
            IcnnParams::zeros(&cfg).unwrap(),
        )
        .unwrap();
        assert_eq!(m.prox_apply(&[3.0]).unwrap(), vec![1.5]);
        assert!(m.program().check_params(&[Matrix::zeros(1, 1)]).is_err());
    }
}
