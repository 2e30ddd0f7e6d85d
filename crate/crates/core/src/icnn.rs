//! Input-convex neural potentials.
//!
//! Layer recurrence (`k ≥ 1`, `x` the network input):
//!
//! ```text
//! z_1     = act(Wx_0 x + b_0)
//! z_{k+1} = act(Wz_k z_k + Wx_k x + b_k)
//! Ψ       = wz · z_L + wx · x + b_L
//! ```
//!
//! With `Wz ≥ 0` and a convex nondecreasing activation the output is convex
//! in `x`. Dropping every bias and using a 1-homogeneous activation makes
//! `Ψ` positively 1-homogeneous; the optional head `max(Ψ, 0)²` then gives a
//! convex, 2-homogeneous potential whose gradient is scale-equivariant.
//!
//! Pairing activations act on adjacent pre-activation pairs, so hidden
//! widths count pre-activations and must be even.

use crate::diff::{Matrix, NodeId, PrimitiveOp, Program, ProgramBuilder};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Softplus { beta: f64 },
    /// `max` of each adjacent pair; halves the width.
    PairwiseMax,
    /// `(max, min)` of each adjacent pair. The min channel is concave, so
    /// convexity is only audited, not guaranteed.
    SortPool,
}

impl Activation {
    pub fn is_pairing(&self) -> bool {
        matches!(self, Activation::PairwiseMax | Activation::SortPool)
    }

    fn output_width(&self, w: usize) -> usize {
        match self {
            Activation::PairwiseMax => w / 2,
            _ => w,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Activation::Softplus { beta } => format!("softplus:{beta:?}"),
            Activation::PairwiseMax => "pairwise-max".into(),
            Activation::SortPool => "sortpool".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pairwise-max" => Ok(Activation::PairwiseMax),
            "sortpool" => Ok(Activation::SortPool),
            _ => {
                let beta = s
                    .strip_prefix("softplus:")
                    .and_then(|b| b.parse::<f64>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown activation {s:?}")))?;
                Ok(Activation::Softplus { beta })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcnnConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub use_bias: bool,
    pub x_skip: bool,
    pub final_rectify_square: bool,
}

impl IcnnConfig {
    /// Biased softplus network with a linear head.
    pub fn plain(input_dim: usize, hidden_widths: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_widths,
            activation: Activation::Softplus { beta: 1.0 },
            use_bias: true,
            x_skip: true,
            final_rectify_square: false,
        }
    }

    /// Bias-free pairwise-max network with a rectify-square head.
    pub fn equivariant(input_dim: usize, hidden_widths: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden_widths,
            activation: Activation::PairwiseMax,
            use_bias: false,
            x_skip: true,
            final_rectify_square: true,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Bias-free, 1-homogeneous activation, rectify-square head.
    pub fn is_equivariant_preset(&self) -> bool {
        !self.use_bias && self.activation.is_pairing() && self.final_rectify_square
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be positive".into()));
        }
        for &w in &self.hidden_widths {
            if w == 0 {
                return Err(Error::InvalidArgument("hidden widths must be positive".into()));
            }
            if self.activation.is_pairing() && w % 2 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{} needs even hidden widths, got {w}",
                    self.activation.tag()
                )));
            }
        }
        if let Activation::Softplus { beta } = self.activation {
            if !(beta > 0.0) {
                return Err(Error::InvalidArgument(format!("softplus beta {beta}")));
            }
        }
        Ok(())
    }

    /// Parameter roles and shapes in storage order.
    pub fn layout(&self) -> Vec<(ParamRole, (usize, usize))> {
        let n = self.input_dim;
        let mut out = Vec::new();
        let mut prev: Option<usize> = None;
        let layers = self.hidden_widths.len();
        for (k, &w) in self.hidden_widths.iter().enumerate() {
            if let Some(zw) = prev {
                out.push((ParamRole::Wz(k), (w, zw)));
            }
            if prev.is_none() || self.x_skip {
                out.push((ParamRole::Wx(k), (w, n)));
            }
            if self.use_bias {
                out.push((ParamRole::Bias(k), (w, 1)));
            }
            prev = Some(self.activation.output_width(w));
        }
        if let Some(zw) = prev {
            out.push((ParamRole::Wz(layers), (1, zw)));
        }
        if prev.is_none() || self.x_skip {
            out.push((ParamRole::Wx(layers), (1, n)));
        }
        if self.use_bias {
            out.push((ParamRole::Bias(layers), (1, 1)));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, (r, c))| r * c).sum()
    }
}

/// Which weight array a parameter tensor is; the index is its layer, with
/// the scalar head at `hidden_widths.len()`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Wz(usize),
    Wx(usize),
    Bias(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcnnParams {
    config: IcnnConfig,
    roles: Vec<ParamRole>,
    tensors: Vec<Matrix>,
}

impl IcnnParams {
    pub fn zeros(config: &IcnnConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(Self {
            config: config.clone(),
            roles: layout.iter().map(|l| l.0).collect(),
            tensors: layout.iter().map(|&(_, (r, c))| Matrix::zeros(r, c)).collect(),
        })
    }

    pub fn from_tensors(config: &IcnnConfig, tensors: Vec<Matrix>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if tensors.len() != p.tensors.len() {
            return Err(Error::Shape(format!(
                "config needs {} tensors, got {}",
                p.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (t, slot)) in tensors.iter().zip(&p.tensors).enumerate() {
            if t.shape() != slot.shape() {
                return Err(Error::Shape(format!(
                    "tensor {i} is {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
        }
        p.tensors = tensors;
        Ok(p)
    }

    pub fn config(&self) -> &IcnnConfig {
        &self.config
    }

    pub fn roles(&self) -> &[ParamRole] {
        &self.roles
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn tensor(&self, role: ParamRole) -> Option<&Matrix> {
        self.roles.iter().position(|r| *r == role).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, role: ParamRole) -> Option<&mut Matrix> {
        self.roles
            .iter()
            .position(|r| *r == role)
            .map(move |i| &mut self.tensors[i])
    }

    /// Smallest hidden-to-hidden weight (`+∞` when there are none).
    pub fn min_wz(&self) -> f64 {
        self.roles
            .iter()
            .zip(&self.tensors)
            .filter(|(r, _)| matches!(r, ParamRole::Wz(_)))
            .flat_map(|(_, t)| t.as_slice().iter().copied())
            .fold(f64::INFINITY, f64::min)
    }

    /// Clamp every `Wz` entry at zero in place.
    pub fn project_weights(&mut self) {
        for (r, t) in self.roles.iter().zip(self.tensors.iter_mut()) {
            if matches!(r, ParamRole::Wz(_)) {
                for w in t.as_mut_slice() {
                    if *w < 0.0 {
                        *w = 0.0;
                    }
                }
            }
        }
    }

    pub fn projected(&self) -> Self {
        let mut p = self.clone();
        p.project_weights();
        p
    }
}

/// `Wx ~ U(−s, s)` with `s = 1/√fan_in`, `Wz ~ U(0, 2/fan_in)`, zero biases.
///
/// For pairing activations the `Wx` rows of hidden layers come in mirrored
/// pairs `(w, −w)`, so every hidden unit starts at least as large as the
/// smaller of its two `Wz` contributions; with a rectify-square head the
/// head's `wx` starts at zero. Together these keep `Ψ ≥ 0` at
/// initialization, so the squared head does not start in its flat region.
pub fn init(config: &IcnnConfig, rng: &mut Rng) -> Result<IcnnParams> {
    let mut params = IcnnParams::zeros(config)?;
    let head = config.hidden_widths.len();
    let mirror = config.activation.is_pairing();
    for (role, t) in params.roles.clone().into_iter().zip(params.tensors.iter_mut()) {
        let (rows, cols) = t.shape();
        match role {
            ParamRole::Wz(_) => {
                let hi = 2.0 / cols as f64;
                for w in t.as_mut_slice() {
                    *w = rng.uniform_in(0.0, hi);
                }
            }
            ParamRole::Wx(k) if k == head && config.final_rectify_square => {}
            ParamRole::Wx(k) => {
                let s = 1.0 / (cols as f64).sqrt();
                let pairs = mirror && k < head;
                for r in 0..rows {
                    for c in 0..cols {
                        let v = if pairs && r % 2 == 1 {
                            -t.get(r - 1, c)
                        } else {
                            rng.uniform_in(-s, s)
                        };
                        t.set(r, c, v);
                    }
                }
            }
            ParamRole::Bias(_) => {}
        }
    }
    Ok(params)
}

/// Appends the network to `builder`, reading its input from `input`.
/// Parameters are registered in [`IcnnConfig::layout`] order. Returns the
/// raw output node `Ψ` and the head output (`max(Ψ,0)²` when configured).
pub fn append_to(
    builder: &mut ProgramBuilder,
    input: NodeId,
    config: &IcnnConfig,
) -> Result<(NodeId, NodeId)> {
    config.validate()?;
    if builder.dim(input) != config.input_dim {
        return Err(Error::Shape(format!(
            "network input dim {} but node has {}",
            config.input_dim,
            builder.dim(input)
        )));
    }
    let layout = config.layout();
    let ids: Vec<(ParamRole, usize)> = layout
        .iter()
        .map(|&(role, (r, c))| (role, builder.add_param(r, c)))
        .collect();
    let take = |role: ParamRole| ids.iter().find(|p| p.0 == role).map(|p| p.1);
    let mut z: Option<NodeId> = None;
    let layers = config.hidden_widths.len();
    for k in 0..=layers {
        let mut terms = Vec::new();
        if let (Some(zn), Some(p)) = (z, take(ParamRole::Wz(k))) {
            terms.push((p, zn));
        }
        if let Some(p) = take(ParamRole::Wx(k)) {
            terms.push((p, input));
        }
        let bias = if config.use_bias { take(ParamRole::Bias(k)) } else { None };
        let u = builder.push(PrimitiveOp::Affine { terms, bias })?;
        if k == layers {
            let out = if config.final_rectify_square {
                builder.push(PrimitiveOp::RectifySquare(u))?
            } else {
                u
            };
            return Ok((u, out));
        }
        z = Some(builder.push(match config.activation {
            Activation::Softplus { beta } => PrimitiveOp::Softplus { input: u, beta },
            Activation::PairwiseMax => PrimitiveOp::PairwiseMax(u),
            Activation::SortPool => PrimitiveOp::SortPool(u),
        })?);
    }
    unreachable!()
}

/// Program computing the network head output (`raw = false`) or `Ψ`.
pub fn program(config: &IcnnConfig, raw: bool) -> Result<Program> {
    let mut b = ProgramBuilder::new(config.input_dim);
    let (psi, out) = append_to(&mut b, 0, config)?;
    if raw && psi != out {
        // Ψ is not the last node; re-emit it as the output.
        b.push(PrimitiveOp::ScalarCombine(vec![(1.0, psi)]))?;
    }
    b.finish()
}

/// Network output (with the configured head).
pub fn forward(params: &IcnnParams, x: &[f64]) -> Result<f64> {
    program(params.config(), false)?.value(params.tensors(), x)
}

/// Raw network output `Ψ`, before any rectify-square head.
pub fn forward_raw(params: &IcnnParams, x: &[f64]) -> Result<f64> {
    program(params.config(), true)?.value(params.tensors(), x)
}

pub fn pairwise_max(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Shape(format!("pairwise max of odd length {}", v.len())));
    }
    Ok(v.chunks(2).map(|p| if p[0] >= p[1] { p[0] } else { p[1] }).collect())
}

pub fn sortpool(v: &[f64]) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Shape(format!("sortpool of odd length {}", v.len())));
    }
    Ok(v
        .chunks(2)
        .flat_map(|p| if p[0] >= p[1] { [p[0], p[1]] } else { [p[1], p[0]] })
        .collect())
}
