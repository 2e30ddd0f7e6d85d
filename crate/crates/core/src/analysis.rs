//! Prox inversion, implicit-regularizer evaluation, and audits of the
//! structural claims (convexity, equivariance, homogeneity, gradient-field
//! symmetry).
//!
//! The implicit regularizer follows from the Moreau identity. If
//! `f = ∇ψ = prox_R` and `f(y) = x̂`, then `ψ = (½‖·‖² + R)*`, so by
//! Fenchel–Young equality
//!
//! ```text
//! R(x̂) = ⟨x̂, y⟩ − ψ(y) − ½‖x̂‖²
//! ```
//!
//! which needs `y = f⁻¹(x̂)`, the minimizer of the convex function
//! `ψ(y) − ⟨x̂, y⟩`. R is only defined up to the additive constant of ψ.

use crate::error::{Error, Result};
use crate::math::{self, dot, norm_inf, norm_sq};
use crate::potential::ProxModel;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InversionSettings {
    /// Stop once `‖∇ψ(y) − x‖∞ ≤ tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub shrink: f64,
    pub sufficient_decrease: f64,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
        }
    }
}

impl InversionSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidArgument("inversion needs tol > 0 and max_iter ≥ 1".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) || !(self.sufficient_decrease > 0.0 && self.sufficient_decrease < 1.0) {
            return Err(Error::InvalidArgument("line-search parameters must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub y: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Finds `y` with `f(y) = x` by minimizing the convex function
/// `φ(y) = ψ(y) − ⟨x, y⟩`.
///
/// Each iteration takes an inexact Newton step (conjugate gradients on
/// Hessian-vector products) with a backtracking line search, and falls back
/// to a steepest-descent step when CG meets non-positive curvature or the
/// Newton direction does not decrease φ.
pub fn invert_prox(model: &ProxModel, x: &[f64], s: &InversionSettings) -> Result<Inversion> {
    s.validate()?;
    if x.len() != model.input_dim() {
        return Err(Error::Shape(format!("point of length {}, model expects {}", x.len(), model.input_dim())));
    }
    let objective = |y: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = model.potential_and_prox(y)?;
        Ok((v - dot(x, y), math::sub(&g, x)))
    };
    let mut y = x.to_vec();
    let (mut phi, mut grad) = objective(&y)?;
    let mut best = norm_inf(&grad);
    let mut gd_step = 1.0;
    let mut stalled = 0;
    let mut last_gain = 0;
    for it in 0..s.max_iter {
        let res = norm_inf(&grad);
        if res <= s.tol {
            return Ok(Inversion { y, residual: res, iterations: it });
        }
        if res < 0.99 * best {
            best = res;
            last_gain = it;
        } else if it - last_gain >= RESIDUAL_PATIENCE {
            return Err(Error::InversionFailed { iterations: it, residual: best });
        }
        let g2 = norm_sq(&grad);
        let newton = newton_direction(model, &y, &grad)?;
        let mut accepted = None;
        if let Some(p) = newton {
            let slope = dot(&grad, &p);
            if slope < 0.0 {
                accepted = line_search(&objective, &y, phi, g2, &p, slope, 1.0, s)?;
            }
        }
        if accepted.is_none() {
            let p: Vec<f64> = grad.iter().map(|g| -g).collect();
            accepted = line_search(&objective, &y, phi, g2, &p, -g2, gd_step * 2.0, s)?;
            if let Some((_, _, _, t)) = &accepted {
                gd_step = *t;
            }
        }
        match accepted {
            Some((cand, pc, gc, _)) => {
                // A target outside the range of f (possible where ψ has kinks)
                // leaves φ converging while the residual cannot.
                if phi - pc <= 1e-14 * (1.0 + phi.abs()) {
                    stalled += 1;
                } else {
                    stalled = 0;
                }
                y = cand;
                phi = pc;
                grad = gc;
                if stalled >= STALL_LIMIT {
                    return Err(Error::InversionFailed {
                        iterations: it + 1,
                        residual: norm_inf(&grad).min(best),
                    });
                }
            }
            None => break,
        }
    }
    Err(Error::InversionFailed {
        iterations: s.max_iter,
        residual: norm_inf(&grad).min(best),
    })
}

/// Consecutive iterations without measurable decrease of φ before giving up.
const STALL_LIMIT: usize = 50;

/// Iterations allowed without a 1% improvement of the best residual.
const RESIDUAL_PATIENCE: usize = 200;

type Candidate = (Vec<f64>, f64, Vec<f64>, f64);

/// Backtracking along `p` from `t0`. Accepts on the Armijo condition, or,
/// once φ stops changing at rounding precision, on a smaller gradient.
fn line_search<F>(
    objective: &F,
    y: &[f64],
    phi: f64,
    g2: f64,
    p: &[f64],
    slope: f64,
    t0: f64,
    s: &InversionSettings,
) -> Result<Option<Candidate>>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut t = t0;
    for _ in 0..60 {
        let cand: Vec<f64> = y.iter().zip(p).map(|(a, d)| a + t * d).collect();
        let (pc, gc) = objective(&cand)?;
        let armijo = pc <= phi + s.sufficient_decrease * t * slope;
        let flat = (pc - phi).abs() <= 1e-13 * (1.0 + phi.abs()) && norm_sq(&gc) < g2;
        if armijo || flat {
            return Ok(Some((cand, pc, gc, t)));
        }
        t *= s.shrink;
    }
    Ok(None)
}

/// Approximate solution of `∇²ψ(y) p = −g` by conjugate gradients, or
/// `None` on non-positive curvature.
fn newton_direction(model: &ProxModel, y: &[f64], g: &[f64]) -> Result<Option<Vec<f64>>> {
    let n = g.len();
    let gnorm = norm_sq(g).sqrt();
    let target = (gnorm.sqrt().min(0.1) * gnorm).max(1e-300);
    let mut p = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut d = r.clone();
    let mut rr = norm_sq(&r);
    let params = model.params().tensors();
    let tape = model.program().forward(params, y)?;
    for _ in 0..(2 * n).max(10) {
        let hd = model.program().hessian_vector(params, &tape, &d)?;
        let curv = dot(&d, &hd);
        if !(curv > 1e-14 * norm_sq(&d)) {
            return Ok(if p.iter().any(|v| *v != 0.0) { Some(p) } else { None });
        }
        let a = rr / curv;
        for k in 0..n {
            p[k] += a * d[k];
            r[k] -= a * hd[k];
        }
        let rr_new = norm_sq(&r);
        if rr_new.sqrt() <= target {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            d[k] = r[k] + beta * d[k];
        }
    }
    Ok(Some(p))
}

#[derive(Clone, Debug)]
pub struct RegularizerValue {
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// `R(x̂)` for the implicit regularizer of `model`'s prox.
pub fn regularizer_eval(model: &ProxModel, x_hat: &[f64], s: &InversionSettings) -> Result<RegularizerValue> {
    let inv = invert_prox(model, x_hat, s)?;
    let psi = model.potential_value(&inv.y)?;
    Ok(RegularizerValue {
        value: dot(x_hat, &inv.y) - psi - 0.5 * norm_sq(x_hat),
        residual: inv.residual,
        iterations: inv.iterations,
    })
}

/// `R(x̂) − R(anchor)`.
pub fn regularizer_eval_anchored(
    model: &ProxModel,
    x_hat: &[f64],
    anchor: &[f64],
    s: &InversionSettings,
) -> Result<RegularizerValue> {
    let r = regularizer_eval(model, x_hat, s)?;
    let r0 = regularizer_eval(model, anchor, s)?;
    Ok(RegularizerValue {
        value: r.value - r0.value,
        residual: r.residual.max(r0.residual),
        iterations: r.iterations + r0.iterations,
    })
}

/// Outcome of an empirical audit.
#[derive(Clone, Debug, Default)]
pub struct AuditReport {
    /// Largest measured violation (≥ 0).
    pub max_deviation: f64,
    /// Input achieving `max_deviation`.
    pub worst_input: Vec<f64>,
    /// Group element `(a, b)` achieving `max_deviation`, for equivariance.
    pub worst_group: Option<(f64, f64)>,
    pub samples: usize,
    /// Samples whose deviation exceeded the audit's threshold.
    pub violations: usize,
    /// Smallest normalized monotonicity gap, for convexity audits.
    pub min_gap: Option<f64>,
    /// Smallest mean PSNR between `f(g(x))` and `g(f(x))` over the grid.
    pub min_psnr_db: Option<f64>,
}

impl AuditReport {
    fn record(&mut self, deviation: f64, input: &[f64], group: Option<(f64, f64)>) {
        if deviation > self.max_deviation || self.worst_input.is_empty() {
            self.max_deviation = self.max_deviation.max(deviation);
            self.worst_input = input.to_vec();
            self.worst_group = group;
        }
    }
}

/// Gaussian inputs scaled by 0.1, 1 or 10 (cycled).
pub fn sample_inputs(n: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    const SCALES: [f64; 3] = [0.1, 1.0, 10.0];
    (0..count)
        .map(|i| math::scale(&rng.normal_vec(n), SCALES[i % 3]))
        .collect()
}

/// Monotonicity of a gradient field on random pairs:
/// `⟨∇ψ(x) − ∇ψ(x'), x − x'⟩ ≥ −1e−8 ‖x − x'‖²`.
pub fn convexity_audit<F>(grad: F, n: usize, pairs: usize, rng: &mut Rng) -> Result<AuditReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if pairs == 0 {
        return Err(Error::InvalidArgument("audit needs at least one pair".into()));
    }
    let mut rep = AuditReport::default();
    let mut min_gap = f64::INFINITY;
    for i in 0..pairs {
        let s = [0.1, 1.0, 10.0][i % 3];
        let x = math::scale(&rng.normal_vec(n), s);
        let xp = math::scale(&rng.normal_vec(n), s);
        let d = math::sub(&x, &xp);
        let dd = norm_sq(&d);
        let gap = dot(&math::sub(&grad(&x)?, &grad(&xp)?), &d);
        let normalized = gap / dd.max(f64::MIN_POSITIVE);
        min_gap = min_gap.min(normalized);
        if gap < -1e-8 * dd {
            rep.violations += 1;
        }
        rep.record((-normalized).max(0.0), &x, None);
    }
    rep.samples = pairs;
    rep.min_gap = Some(min_gap);
    Ok(rep)
}

/// `max ‖f(a x + b) − (a f(x) + b)‖∞ / (1 + ‖a f(x) + b‖∞)` over inputs and
/// grid, and the smallest grid-averaged PSNR (peak 1) between the two sides.
/// A sample counts as a violation when its deviation exceeds `threshold`.
pub fn equivariance_audit<F>(prox: F, inputs: &[Vec<f64>], grid: &[(f64, f64)], threshold: f64) -> Result<AuditReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if let Some(&(a, _)) = grid.iter().find(|g| !(g.0 > 0.0)) {
        return Err(Error::InvalidArgument(format!("group scale must be positive, got {a}")));
    }
    let mut rep = AuditReport::default();
    let mut min_psnr = f64::INFINITY;
    let fx: Vec<Vec<f64>> = inputs.iter().map(|x| prox(x)).collect::<Result<_>>()?;
    for &(a, b) in grid {
        let mut psnr_sum = 0.0;
        for (x, f) in inputs.iter().zip(&fx) {
            let lhs = prox(&math::affine_transform(x, a, b)?)?;
            let rhs = math::affine_transform(f, a, b)?;
            let dev = norm_inf(&math::sub(&lhs, &rhs)) / (1.0 + norm_inf(&rhs));
            if dev > threshold {
                rep.violations += 1;
            }
            rep.record(dev, x, Some((a, b)));
            psnr_sum += math::psnr(&lhs, &rhs, 1.0)?;
            rep.samples += 1;
        }
        if !inputs.is_empty() {
            min_psnr = min_psnr.min(psnr_sum / inputs.len() as f64);
        }
    }
    rep.min_psnr_db = Some(min_psnr);
    Ok(rep)
}

/// Mean PSNR (peak 1) between `f(g(x))` and `g(f(x))` for the brightness
/// change `g(x) = α x + (1 − α)`.
pub fn brightness_equivariance_psnr<F>(prox: F, inputs: &[Vec<f64>], alpha: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let rep = equivariance_audit(prox, inputs, &[(alpha, 1.0 - alpha)], f64::INFINITY)?;
    Ok(rep.min_psnr_db.unwrap_or(math::PSNR_CAP_DB))
}

/// Central-difference Jacobian of `f` at `x`, row `i` = `∂f_i/∂x`.
pub fn fd_jacobian<F>(f: F, x: &[f64], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; n];
    let mut probe = x.to_vec();
    for j in 0..n {
        probe[j] = x[j] + step;
        let up = f(&probe)?;
        probe[j] = x[j] - step;
        let down = f(&probe)?;
        probe[j] = x[j];
        if up.len() != n {
            return Err(Error::Shape("jacobian of a non-square map".into()));
        }
        for i in 0..n {
            jac[i][j] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// `max |∂f_i/∂x_j − ∂f_j/∂x_i|` at each point. A gradient field has a
/// symmetric Jacobian wherever it is differentiable.
pub fn jacobian_symmetry_audit<F>(f: F, points: &[Vec<f64>], step: f64, threshold: f64) -> Result<AuditReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut rep = AuditReport::default();
    for x in points {
        let jac = fd_jacobian(&f, x, step)?;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                worst = worst.max((jac[i][j] - jac[j][i]).abs());
            }
        }
        if worst > threshold {
            rep.violations += 1;
        }
        rep.record(worst, x, None);
        rep.samples += 1;
    }
    Ok(rep)
}

/// Random Gaussian points (scales 0.1/1/10) at least `margin` away from
/// every branch switch of the model's piecewise primitives.
pub fn sample_smooth_points(model: &ProxModel, count: usize, margin: f64, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 1000 * count.max(1) {
            return Err(Error::InvalidArgument(format!(
                "could not find {count} points with kink margin ≥ {margin}"
            )));
        }
        let s = [0.1, 1.0, 10.0][out.len() % 3];
        let x = math::scale(&rng.normal_vec(model.input_dim()), s);
        // margins scale with |x| for homogeneous networks
        if model.kink_margin(&x)? >= margin * s.min(1.0) {
            out.push(x);
        }
    }
    Ok(out)
}

/// Positive homogeneity of the potential (`ψ(a x) = a² ψ(x)`) and of its
/// gradient (`∇ψ(a x) = a ∇ψ(x)`). Deviations are relative as
/// `|ψ(ax) − a²ψ(x)| / (a² (1 + |ψ(x)|))` and
/// `‖∇ψ(ax) − a∇ψ(x)‖∞ / (a (1 + ‖∇ψ(x)‖∞))`.
#[derive(Clone, Debug)]
pub struct HomogeneityReport {
    pub value: AuditReport,
    pub gradient: AuditReport,
}

pub fn homogeneity_audit(model: &ProxModel, inputs: &[Vec<f64>], scales: &[f64]) -> Result<HomogeneityReport> {
    let mut value = AuditReport::default();
    let mut gradient = AuditReport::default();
    for x in inputs {
        let (v, g) = model.potential_and_prox(x)?;
        for &a in scales {
            let (va, ga) = model.potential_and_prox(&math::scale(x, a))?;
            let dv = (va - a * a * v).abs() / (a * a * (1.0 + v.abs()));
            let dg = norm_inf(&math::sub(&ga, &math::scale(&g, a))) / (a * (1.0 + norm_inf(&g)));
            value.record(dv, x, Some((a, 0.0)));
            gradient.record(dg, x, Some((a, 0.0)));
            value.samples += 1;
            gradient.samples += 1;
        }
    }
    Ok(HomogeneityReport { value, gradient })
}

/// `(f(z), R(f(z)))`. With the preimage `z` known, `R` at `f(z)` needs no
/// inversion.
pub fn regularizer_at_preimage(model: &ProxModel, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (psi, fz) = model.potential_and_prox(z)?;
    let r = dot(&fz, z) - psi - 0.5 * norm_sq(&fz);
    Ok((fz, r))
}

/// The prox objective `½‖u − y‖² + R(u)` is minimized at `u = f(y)`:
/// compares it with `perturbations` points `u = f(y + δ)`, `‖δ‖ ≤ radius`.
/// Such points lie in the range of `f`, where `R` is finite. Deviation is
/// the amount by which any of them beats `f(y)`.
pub fn prox_objective_audit(
    model: &ProxModel,
    ys: &[Vec<f64>],
    perturbations: usize,
    radius: f64,
    slack: f64,
    rng: &mut Rng,
) -> Result<AuditReport> {
    let mut rep = AuditReport::default();
    let objective = |z: &[f64], y: &[f64]| -> Result<f64> {
        let (u, r) = regularizer_at_preimage(model, z)?;
        Ok(0.5 * norm_sq(&math::sub(&u, y)) + r)
    };
    for y in ys {
        let base = objective(y, y)?;
        for _ in 0..perturbations {
            let dir = rng.normal_vec(y.len());
            let len = radius * rng.uniform() / norm_sq(&dir).sqrt().max(f64::MIN_POSITIVE);
            let z: Vec<f64> = y.iter().zip(&dir).map(|(a, d)| a + len * d).collect();
            let beat = base - objective(&z, y)?;
            if beat > slack {
                rep.violations += 1;
            }
            rep.record(beat.max(0.0), y, None);
            rep.samples += 1;
        }
    }
    Ok(rep)
}
