//! Exact input gradients of scalar potentials and parameter gradients of
//! losses that consume those input gradients.
//!
//! A potential is described as a [`Program`]: a topologically ordered list
//! of vector-valued [`PrimitiveOp`]s whose last node is a scalar. Three
//! passes are provided:
//!
//! * `forward` records every node value on a [`Tape`];
//! * `reverse` propagates adjoints to the input (the prox map `∇ₓψ`) and,
//!   optionally, to the parameters;
//! * `directional_param_gradient` pushes a fixed direction `d` forward as a
//!   tangent alongside the primal values, giving `⟨∇ₓψ(x), d⟩`, and then
//!   reverses through both primal and tangent values to obtain
//!   `∂/∂θ ⟨∇ₓψθ(x), d⟩`.
//!
//! The last pass is all a loss on the prox output needs: for
//! `L(θ) = ℓ(∇ₓψθ(y), x)` and `d = ∂ℓ/∂x̂` held fixed,
//! `∂L/∂θ = ∂/∂θ ⟨∇ₓψθ(y), d⟩`.
//!
//! Piecewise-linear selections break ties toward the lower index, so every
//! pass is deterministic everywhere.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::loss::Loss;

pub type NodeId = usize;
pub type ParamId = usize;

/// Row-major dense matrix. Vectors (biases, scalar-head weights) are stored
/// with one column or one row.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · v`
    fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot_lanes(self.row(r), v);
        }
    }

    /// `out += selfᵀ · g`
    fn matvec_t_acc(&self, g: &[f64], out: &mut [f64]) {
        for (r, &gr) in g.iter().enumerate() {
            if gr != 0.0 {
                for (o, w) in out.iter_mut().zip(self.row(r)) {
                    *o += gr * w;
                }
            }
        }
    }

    /// `self += g ⊗ v + h ⊗ w` in one pass over the matrix.
    fn outer2_acc(&mut self, g: &[f64], v: &[f64], h: &[f64], w: &[f64]) {
        let cols = self.cols;
        for (r, (&gr, &hr)) in g.iter().zip(h).enumerate() {
            let row = &mut self.data[r * cols..(r + 1) * cols];
            match (gr != 0.0, hr != 0.0) {
                (true, true) => {
                    for ((x, a), b) in row.iter_mut().zip(v).zip(w) {
                        *x += gr * a + hr * b;
                    }
                }
                (true, false) => row.iter_mut().zip(v).for_each(|(x, a)| *x += gr * a),
                (false, true) => row.iter_mut().zip(w).for_each(|(x, b)| *x += hr * b),
                (false, false) => {}
            }
        }
    }

    /// `self += g ⊗ v`
    fn outer_acc(&mut self, g: &[f64], v: &[f64]) {
        let cols = self.cols;
        for (r, &gr) in g.iter().enumerate() {
            if gr != 0.0 {
                for (w, vc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(v) {
                    *w += gr * vc;
                }
            }
        }
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot product with four independent partial sums, which lets the compiler
/// vectorize the matrix-vector products.
fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + dot(ra, rb)
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PrimitiveOp {
    /// The program input `x`. Always node 0.
    Input,
    /// `Σ W_p · v_n (+ b)`.
    Affine {
        terms: Vec<(ParamId, NodeId)>,
        bias: Option<ParamId>,
    },
    /// `out_j = max(v_2j, v_2j+1)`.
    PairwiseMax(NodeId),
    /// Each adjacent pair replaced by `(max, min)`.
    SortPool(NodeId),
    /// `log(1 + exp(β t)) / β`, elementwise.
    Softplus { input: NodeId, beta: f64 },
    /// `max(t, 0)`, elementwise.
    Rectifier(NodeId),
    /// `max(t, 0)²`, elementwise.
    RectifySquare(NodeId),
    /// `t²`, elementwise.
    Square(NodeId),
    /// `scale · ‖v‖²` (scalar).
    SquaredNorm { input: NodeId, scale: f64 },
    /// `⟨u, v⟩` (scalar).
    InnerProduct(NodeId, NodeId),
    /// `Σ c_k v_k` over nodes of equal dimension.
    ScalarCombine(Vec<(f64, NodeId)>),
    /// `(I − P) v`.
    Center(NodeId),
    /// `P v`.
    MeanProject(NodeId),
}

#[derive(Clone, Copy)]
enum Elementwise {
    Softplus(f64),
    Rectifier,
    RectifySquare,
    Square,
}

impl Elementwise {
    /// (value, first derivative, second derivative)
    #[inline]
    fn eval(self, t: f64) -> (f64, f64, f64) {
        match self {
            Elementwise::Softplus(beta) => {
                let z = beta * t;
                let sp = if z > 0.0 {
                    z + (-z).exp().ln_1p()
                } else {
                    z.exp().ln_1p()
                };
                let s = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                (sp / beta, s, beta * s * (1.0 - s))
            }
            Elementwise::Rectifier => {
                if t > 0.0 {
                    (t, 1.0, 0.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Elementwise::RectifySquare => {
                if t > 0.0 {
                    (t * t, 2.0 * t, 2.0)
                } else {
                    (0.0, 0.0, 0.0)
                }
            }
            Elementwise::Square => (t * t, 2.0 * t, 2.0),
        }
    }
}

impl PrimitiveOp {
    fn elementwise(&self) -> Option<(NodeId, Elementwise)> {
        match *self {
            PrimitiveOp::Softplus { input, beta } => Some((input, Elementwise::Softplus(beta))),
            PrimitiveOp::Rectifier(a) => Some((a, Elementwise::Rectifier)),
            PrimitiveOp::RectifySquare(a) => Some((a, Elementwise::RectifySquare)),
            PrimitiveOp::Square(a) => Some((a, Elementwise::Square)),
            _ => None,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            PrimitiveOp::Input => vec![],
            PrimitiveOp::Affine { terms, .. } => terms.iter().map(|t| t.1).collect(),
            PrimitiveOp::PairwiseMax(a)
            | PrimitiveOp::SortPool(a)
            | PrimitiveOp::Rectifier(a)
            | PrimitiveOp::RectifySquare(a)
            | PrimitiveOp::Square(a)
            | PrimitiveOp::Center(a)
            | PrimitiveOp::MeanProject(a) => vec![*a],
            PrimitiveOp::Softplus { input, .. } | PrimitiveOp::SquaredNorm { input, .. } => {
                vec![*input]
            }
            PrimitiveOp::InnerProduct(a, b) => vec![*a, *b],
            PrimitiveOp::ScalarCombine(terms) => terms.iter().map(|t| t.1).collect(),
        }
    }
}

/// Index of the winner of pair `j` (ties go to the lower index).
#[inline]
fn pair_winner(v: &[f64], j: usize) -> (usize, usize) {
    if v[2 * j] >= v[2 * j + 1] {
        (2 * j, 2 * j + 1)
    } else {
        (2 * j + 1, 2 * j)
    }
}

/// Incrementally assembles a [`Program`], checking shapes as it goes.
#[derive(Clone, Debug)]
pub struct ProgramBuilder {
    ops: Vec<PrimitiveOp>,
    dims: Vec<usize>,
    param_shapes: Vec<(usize, usize)>,
}

impl ProgramBuilder {
    pub fn new(input_dim: usize) -> Self {
        Self {
            ops: vec![PrimitiveOp::Input],
            dims: vec![input_dim],
            param_shapes: Vec::new(),
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn dim(&self, node: NodeId) -> usize {
        self.dims[node]
    }

    pub fn add_param(&mut self, rows: usize, cols: usize) -> ParamId {
        self.param_shapes.push((rows, cols));
        self.param_shapes.len() - 1
    }

    pub fn push(&mut self, op: PrimitiveOp) -> Result<NodeId> {
        let next = self.ops.len();
        for i in op.inputs() {
            if i >= next {
                return Err(Error::Shape(format!("node {next} reads undefined node {i}")));
            }
        }
        let d = |n: NodeId| self.dims[n];
        let dim = match &op {
            PrimitiveOp::Input => {
                return Err(Error::Shape("only node 0 may be the input".into()));
            }
            PrimitiveOp::Affine { terms, bias } => {
                let out = match (terms.first(), bias) {
                    (Some(&(p, _)), _) => self.shape_of(p)?.0,
                    (None, Some(b)) => self.shape_of(*b)?.0,
                    (None, None) => return Err(Error::Shape("empty affine map".into())),
                };
                for &(p, n) in terms {
                    let (r, c) = self.shape_of(p)?;
                    if r != out || c != d(n) {
                        return Err(Error::Shape(format!(
                            "weight {p} is {r}x{c}, expected {out}x{}",
                            d(n)
                        )));
                    }
                }
                if let Some(b) = bias {
                    if self.shape_of(*b)? != (out, 1) {
                        return Err(Error::Shape(format!("bias {b} must be {out}x1")));
                    }
                }
                out
            }
            PrimitiveOp::PairwiseMax(a) | PrimitiveOp::SortPool(a) => {
                if d(*a) % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "pairing activation needs even width, got {}",
                        d(*a)
                    )));
                }
                if matches!(op, PrimitiveOp::PairwiseMax(_)) {
                    d(*a) / 2
                } else {
                    d(*a)
                }
            }
            PrimitiveOp::Softplus { input, beta } => {
                if !(*beta > 0.0) {
                    return Err(Error::InvalidArgument(format!("softplus beta {beta}")));
                }
                d(*input)
            }
            PrimitiveOp::Rectifier(a)
            | PrimitiveOp::RectifySquare(a)
            | PrimitiveOp::Square(a)
            | PrimitiveOp::Center(a)
            | PrimitiveOp::MeanProject(a) => d(*a),
            PrimitiveOp::SquaredNorm { .. } => 1,
            PrimitiveOp::InnerProduct(a, b) => {
                if d(*a) != d(*b) {
                    return Err(Error::Shape("inner product of unequal dims".into()));
                }
                1
            }
            PrimitiveOp::ScalarCombine(terms) => {
                let first = terms
                    .first()
                    .ok_or_else(|| Error::Shape("empty combination".into()))?;
                if terms.iter().any(|t| d(t.1) != d(first.1)) {
                    return Err(Error::Shape("combination of unequal dims".into()));
                }
                d(first.1)
            }
        };
        self.ops.push(op);
        self.dims.push(dim);
        Ok(next)
    }

    fn shape_of(&self, p: ParamId) -> Result<(usize, usize)> {
        self.param_shapes
            .get(p)
            .copied()
            .ok_or_else(|| Error::Shape(format!("unknown parameter {p}")))
    }

    /// The last pushed node is the program output and must be scalar.
    pub fn finish(self) -> Result<Program> {
        let out = self.ops.len() - 1;
        if self.dims[out] != 1 {
            return Err(Error::Shape(format!(
                "program output must be scalar, got dim {}",
                self.dims[out]
            )));
        }
        Ok(Program {
            ops: self.ops,
            dims: self.dims,
            param_shapes: self.param_shapes,
        })
    }
}

/// A scalar potential `ψθ : ℝⁿ → ℝ` as a sequence of primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct Program {
    ops: Vec<PrimitiveOp>,
    dims: Vec<usize>,
    param_shapes: Vec<(usize, usize)>,
}

/// Node values recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> f64 {
        self.values.last().expect("nonempty tape")[0]
    }

    pub fn node(&self, id: NodeId) -> &[f64] {
        &self.values[id]
    }
}

/// Result of [`finite_difference_check`].
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

impl Program {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn param_shapes(&self) -> &[(usize, usize)] {
        &self.param_shapes
    }

    pub fn ops(&self) -> &[PrimitiveOp] {
        &self.ops
    }

    pub fn zero_grads(&self) -> Vec<Matrix> {
        self.param_shapes
            .iter()
            .map(|&(r, c)| Matrix::zeros(r, c))
            .collect()
    }

    pub fn check_params(&self, params: &[Matrix]) -> Result<()> {
        if params.len() != self.param_shapes.len() {
            return Err(Error::Shape(format!(
                "program expects {} parameter tensors, got {}",
                self.param_shapes.len(),
                params.len()
            )));
        }
        for (i, (p, s)) in params.iter().zip(&self.param_shapes).enumerate() {
            if p.shape() != *s {
                return Err(Error::Shape(format!(
                    "parameter {i} is {:?}, expected {s:?}",
                    p.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input of length {}, program expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &[Matrix], x: &[f64]) -> Result<Tape> {
        self.check_params(params)?;
        self.check_input(x)?;
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                PrimitiveOp::Input => x.to_vec(),
                PrimitiveOp::Affine { terms, bias } => {
                    let mut out = match bias {
                        Some(b) => params[*b].as_slice().to_vec(),
                        None => vec![0.0; self.dims[i]],
                    };
                    for &(p, n) in terms {
                        params[p].matvec_acc(&values[n], &mut out);
                    }
                    out
                }
                PrimitiveOp::PairwiseMax(a) => {
                    let v = &values[*a];
                    (0..v.len() / 2).map(|j| v[pair_winner(v, j).0]).collect()
                }
                PrimitiveOp::SortPool(a) => {
                    let v = &values[*a];
                    let mut out = vec![0.0; v.len()];
                    for j in 0..v.len() / 2 {
                        let (hi, lo) = pair_winner(v, j);
                        out[2 * j] = v[hi];
                        out[2 * j + 1] = v[lo];
                    }
                    out
                }
                PrimitiveOp::SquaredNorm { input, scale } => {
                    let v = &values[*input];
                    vec![scale * dot(v, v)]
                }
                PrimitiveOp::InnerProduct(a, b) => vec![dot(&values[*a], &values[*b])],
                PrimitiveOp::ScalarCombine(terms) => {
                    let mut out = vec![0.0; self.dims[i]];
                    for &(c, n) in terms {
                        axpy(&mut out, c, &values[n]);
                    }
                    out
                }
                PrimitiveOp::Center(a) => {
                    let v = &values[*a];
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    v.iter().map(|t| t - m).collect()
                }
                PrimitiveOp::MeanProject(a) => {
                    let v = &values[*a];
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    vec![m; v.len()]
                }
                other => {
                    let (a, f) = other.elementwise().expect("elementwise op");
                    values[a].iter().map(|&t| f.eval(t).0).collect()
                }
            };
            values.push(v);
        }
        Ok(Tape { values })
    }

    pub fn value(&self, params: &[Matrix], x: &[f64]) -> Result<f64> {
        Ok(self.forward(params, x)?.output())
    }

    /// Adjoint pass from the scalar output. Returns `∇ₓψ` and, when
    /// `with_params` is set, `∇θψ`.
    pub fn reverse(
        &self,
        tape: &Tape,
        params: &[Matrix],
        with_params: bool,
    ) -> (Vec<f64>, Option<Vec<Matrix>>) {
        let values = &tape.values;
        let mut adj: Vec<Vec<f64>> = self.dims.iter().map(|&d| vec![0.0; d]).collect();
        let mut grads = with_params.then(|| self.zero_grads());
        *adj.last_mut().expect("nonempty") = vec![1.0];
        for i in (1..self.ops.len()).rev() {
            let g = std::mem::take(&mut adj[i]);
            match &self.ops[i] {
                PrimitiveOp::Input => unreachable!(),
                PrimitiveOp::Affine { terms, bias } => {
                    for &(p, n) in terms {
                        params[p].matvec_t_acc(&g, &mut adj[n]);
                        if let Some(gr) = grads.as_mut() {
                            gr[p].outer_acc(&g, &values[n]);
                        }
                    }
                    if let (Some(b), Some(gr)) = (bias, grads.as_mut()) {
                        axpy(gr[*b].as_mut_slice(), 1.0, &g);
                    }
                }
                PrimitiveOp::PairwiseMax(a) => {
                    let v = &values[*a];
                    for (j, gj) in g.iter().enumerate() {
                        adj[*a][pair_winner(v, j).0] += gj;
                    }
                }
                PrimitiveOp::SortPool(a) => {
                    let v = &values[*a];
                    for j in 0..g.len() / 2 {
                        let (hi, lo) = pair_winner(v, j);
                        adj[*a][hi] += g[2 * j];
                        adj[*a][lo] += g[2 * j + 1];
                    }
                }
                PrimitiveOp::SquaredNorm { input, scale } => {
                    axpy(&mut adj[*input], 2.0 * scale * g[0], &values[*input]);
                }
                PrimitiveOp::InnerProduct(a, b) => {
                    axpy(&mut adj[*a], g[0], &values[*b]);
                    axpy(&mut adj[*b], g[0], &values[*a]);
                }
                PrimitiveOp::ScalarCombine(terms) => {
                    for &(c, n) in terms {
                        axpy(&mut adj[n], c, &g);
                    }
                }
                PrimitiveOp::Center(a) => {
                    let m = g.iter().sum::<f64>() / g.len() as f64;
                    for (o, gi) in adj[*a].iter_mut().zip(&g) {
                        *o += gi - m;
                    }
                }
                PrimitiveOp::MeanProject(a) => {
                    let m = g.iter().sum::<f64>() / g.len() as f64;
                    for o in adj[*a].iter_mut() {
                        *o += m;
                    }
                }
                other => {
                    let (a, f) = other.elementwise().expect("elementwise op");
                    let v = &values[a];
                    for (k, gk) in g.iter().enumerate() {
                        adj[a][k] += f.eval(v[k]).1 * gk;
                    }
                }
            }
        }
        (std::mem::take(&mut adj[0]), grads)
    }

    /// `(ψθ(x), ∇ₓψθ(x))`.
    pub fn potential_and_gradient(&self, params: &[Matrix], x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = self.forward(params, x)?;
        let (g, _) = self.reverse(&tape, params, false);
        Ok((tape.output(), g))
    }

    /// `∇θ ψθ(x)`.
    pub fn param_gradient(&self, params: &[Matrix], x: &[f64]) -> Result<Vec<Matrix>> {
        let tape = self.forward(params, x)?;
        Ok(self.reverse(&tape, params, true).1.expect("requested"))
    }

    /// `(⟨∇ₓψθ(x), d⟩, ∂/∂θ ⟨∇ₓψθ(x), d⟩)` for a direction `d` that does not
    /// depend on θ. `tape` must come from `forward(params, x)`.
    pub fn directional_param_gradient(
        &self,
        params: &[Matrix],
        tape: &Tape,
        direction: &[f64],
    ) -> Result<(f64, Vec<Matrix>)> {
        let mut grads = self.zero_grads();
        let v = self.directional_param_gradient_acc(params, tape, direction, &mut grads)?;
        Ok((v, grads))
    }

    /// Nodes whose value depends on at least one parameter.
    fn param_dependence(&self) -> Vec<bool> {
        let mut dep = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let d = match op {
                PrimitiveOp::Input => false,
                PrimitiveOp::Affine { .. } => true,
                other => other.inputs().iter().any(|&n| dep[n]),
            };
            dep.push(d);
        }
        dep
    }

    /// Like [`Program::directional_param_gradient`] but adds the parameter
    /// gradient into `grads`.
    pub fn directional_param_gradient_acc(
        &self,
        params: &[Matrix],
        tape: &Tape,
        direction: &[f64],
        grads: &mut [Matrix],
    ) -> Result<f64> {
        if grads.len() != self.param_shapes.len() {
            return Err(Error::Shape("gradient buffer has the wrong number of tensors".into()));
        }
        Ok(self.second_order_sweep(params, tape, direction, Some(grads))?.0)
    }

    /// Hessian-vector product `∇²ψ(x) v` at the taped point.
    pub fn hessian_vector(&self, params: &[Matrix], tape: &Tape, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.second_order_sweep(params, tape, v, None)?.1)
    }

    /// Forward tangent sweep along `direction` followed by a reverse sweep
    /// of `⟨∇ψ(x), direction⟩`. With a gradient buffer, accumulates the
    /// parameter gradient and skips adjoints of parameter-free nodes;
    /// without one, returns the input adjoint `∇²ψ(x) · direction`.
    fn second_order_sweep(
        &self,
        params: &[Matrix],
        tape: &Tape,
        direction: &[f64],
        mut grads: Option<&mut [Matrix]>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(direction)?;
        let dep = match grads {
            Some(_) => self.param_dependence(),
            None => vec![true; self.ops.len()],
        };
        let values = &tape.values;
        let n_ops = self.ops.len();

        // tangent sweep
        let mut tan: Vec<Vec<f64>> = Vec::with_capacity(n_ops);
        for (i, op) in self.ops.iter().enumerate() {
            let t = match op {
                PrimitiveOp::Input => direction.to_vec(),
                PrimitiveOp::Affine { terms, .. } => {
                    let mut out = vec![0.0; self.dims[i]];
                    for &(p, n) in terms {
                        params[p].matvec_acc(&tan[n], &mut out);
                    }
                    out
                }
                PrimitiveOp::PairwiseMax(a) => {
                    let v = &values[*a];
                    (0..v.len() / 2).map(|j| tan[*a][pair_winner(v, j).0]).collect()
                }
                PrimitiveOp::SortPool(a) => {
                    let v = &values[*a];
                    let mut out = vec![0.0; v.len()];
                    for j in 0..v.len() / 2 {
                        let (hi, lo) = pair_winner(v, j);
                        out[2 * j] = tan[*a][hi];
                        out[2 * j + 1] = tan[*a][lo];
                    }
                    out
                }
                PrimitiveOp::SquaredNorm { input, scale } => {
                    vec![2.0 * scale * dot(&values[*input], &tan[*input])]
                }
                PrimitiveOp::InnerProduct(a, b) => {
                    vec![dot(&tan[*a], &values[*b]) + dot(&values[*a], &tan[*b])]
                }
                PrimitiveOp::ScalarCombine(terms) => {
                    let mut out = vec![0.0; self.dims[i]];
                    for &(c, n) in terms {
                        axpy(&mut out, c, &tan[n]);
                    }
                    out
                }
                PrimitiveOp::Center(a) => {
                    let v = &tan[*a];
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    v.iter().map(|t| t - m).collect()
                }
                PrimitiveOp::MeanProject(a) => {
                    let v = &tan[*a];
                    let m = v.iter().sum::<f64>() / v.len() as f64;
                    vec![m; v.len()]
                }
                other => {
                    let (a, f) = other.elementwise().expect("elementwise op");
                    values[a]
                        .iter()
                        .zip(&tan[a])
                        .map(|(&v, &t)| f.eval(v).1 * t)
                        .collect()
                }
            };
            tan.push(t);
        }
        let objective = tan[n_ops - 1][0];

        // reverse sweep over primal (pa) and tangent (ta) adjoints
        let mut pa: Vec<Vec<f64>> = self.dims.iter().map(|&d| vec![0.0; d]).collect();
        let mut ta: Vec<Vec<f64>> = self.dims.iter().map(|&d| vec![0.0; d]).collect();
        ta[n_ops - 1] = vec![1.0];
        for i in (1..n_ops).rev() {
            if !dep[i] {
                continue;
            }
            let gp = std::mem::take(&mut pa[i]);
            let gt = std::mem::take(&mut ta[i]);
            match &self.ops[i] {
                PrimitiveOp::Input => unreachable!(),
                PrimitiveOp::Affine { terms, bias } => {
                    for &(p, n) in terms {
                        if dep[n] {
                            params[p].matvec_t_acc(&gp, &mut pa[n]);
                            params[p].matvec_t_acc(&gt, &mut ta[n]);
                        }
                        if let Some(g) = grads.as_deref_mut() {
                            g[p].outer2_acc(&gp, &values[n], &gt, &tan[n]);
                        }
                    }
                    if let (Some(b), Some(g)) = (bias, grads.as_deref_mut()) {
                        axpy(g[*b].as_mut_slice(), 1.0, &gp);
                    }
                }
                PrimitiveOp::PairwiseMax(a) => {
                    let v = &values[*a];
                    for j in 0..gp.len() {
                        let w = pair_winner(v, j).0;
                        pa[*a][w] += gp[j];
                        ta[*a][w] += gt[j];
                    }
                }
                PrimitiveOp::SortPool(a) => {
                    let v = &values[*a];
                    for j in 0..gp.len() / 2 {
                        let (hi, lo) = pair_winner(v, j);
                        pa[*a][hi] += gp[2 * j];
                        pa[*a][lo] += gp[2 * j + 1];
                        ta[*a][hi] += gt[2 * j];
                        ta[*a][lo] += gt[2 * j + 1];
                    }
                }
                PrimitiveOp::SquaredNorm { input, scale } => {
                    let s2 = 2.0 * scale;
                    axpy(&mut pa[*input], s2 * gp[0], &values[*input]);
                    axpy(&mut pa[*input], s2 * gt[0], &tan[*input]);
                    axpy(&mut ta[*input], s2 * gt[0], &values[*input]);
                }
                PrimitiveOp::InnerProduct(a, b) => {
                    let (a, b) = (*a, *b);
                    axpy(&mut pa[a], gp[0], &values[b]);
                    axpy(&mut pa[a], gt[0], &tan[b]);
                    axpy(&mut pa[b], gp[0], &values[a]);
                    axpy(&mut pa[b], gt[0], &tan[a]);
                    axpy(&mut ta[a], gt[0], &values[b]);
                    axpy(&mut ta[b], gt[0], &values[a]);
                }
                PrimitiveOp::ScalarCombine(terms) => {
                    for &(c, n) in terms {
                        axpy(&mut pa[n], c, &gp);
                        axpy(&mut ta[n], c, &gt);
                    }
                }
                PrimitiveOp::Center(a) => {
                    let mp = gp.iter().sum::<f64>() / gp.len() as f64;
                    let mt = gt.iter().sum::<f64>() / gt.len() as f64;
                    for k in 0..gp.len() {
                        pa[*a][k] += gp[k] - mp;
                        ta[*a][k] += gt[k] - mt;
                    }
                }
                PrimitiveOp::MeanProject(a) => {
                    let mp = gp.iter().sum::<f64>() / gp.len() as f64;
                    let mt = gt.iter().sum::<f64>() / gt.len() as f64;
                    for k in 0..gp.len() {
                        pa[*a][k] += mp;
                        ta[*a][k] += mt;
                    }
                }
                other => {
                    let (a, f) = other.elementwise().expect("elementwise op");
                    for k in 0..gp.len() {
                        let (_, d1, d2) = f.eval(values[a][k]);
                        pa[a][k] += d1 * gp[k] + d2 * tan[a][k] * gt[k];
                        ta[a][k] += d1 * gt[k];
                    }
                }
            }
        }
        Ok((objective, std::mem::take(&mut pa[0])))
    }

    /// Smallest distance to a point where some piecewise primitive switches
    /// branch: pair margins for max/sort pooling, `|t|` for rectifiers.
    pub fn min_kink_margin(&self, tape: &Tape) -> f64 {
        let mut m = f64::INFINITY;
        for op in &self.ops {
            match op {
                PrimitiveOp::PairwiseMax(a) | PrimitiveOp::SortPool(a) => {
                    for p in tape.values[*a].chunks(2) {
                        m = m.min((p[0] - p[1]).abs());
                    }
                }
                PrimitiveOp::Rectifier(a) | PrimitiveOp::RectifySquare(a) => {
                    for t in &tape.values[*a] {
                        m = m.min(t.abs());
                    }
                }
                _ => {}
            }
        }
        m
    }
}

/// Number of independently accumulated slices of a batch.
const GRADIENT_CHUNKS: usize = 8;

/// Mean loss over `batch` of `(y, x)` pairs, where the loss compares the
/// prox output `∇ₓψθ(y)` with `x`, and its gradient with respect to θ.
/// Items are evaluated in parallel and reduced in batch order.
pub fn loss_parameter_gradient(
    program: &Program,
    params: &[Matrix],
    batch: &[(Vec<f64>, Vec<f64>)],
    loss: &Loss,
) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    loss.validate()?;
    program.check_params(params)?;
    let scale = 1.0 / batch.len() as f64;
    // Chunk boundaries depend only on the batch size, so the summation
    // order (and every bit of the result) is independent of thread count.
    let chunk = batch.len().div_ceil(GRADIENT_CHUNKS);
    let per_chunk: Vec<Result<(f64, Vec<Matrix>)>> = batch
        .par_chunks(chunk)
        .map(|items| {
            let mut grads = program.zero_grads();
            let mut total = 0.0;
            for (y, x) in items {
                let tape = program.forward(params, y)?;
                let (x_hat, _) = program.reverse(&tape, params, false);
                let (value, mut dir) = loss.value_and_grad(&x_hat, x)?;
                for d in &mut dir {
                    *d *= scale;
                }
                program.directional_param_gradient_acc(params, &tape, &dir, &mut grads)?;
                total += value;
            }
            Ok((total, grads))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = program.zero_grads();
    for item in per_chunk {
        let (v, g) = item?;
        total += v;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    Ok((total * scale, grads))
}

/// Central-difference check of an analytic gradient. Relative error uses
/// the denominator `max(1, |analytic|)`.
pub fn finite_difference_check<F>(fun: F, point: &[f64], analytic: &[f64], step: f64) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Shape("point and gradient lengths differ".into()));
    }
    let mut probe = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    let mut worst = (0.0, 0);
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = fun(&probe);
        probe[i] = point[i] - step;
        let down = fun(&probe);
        probe[i] = point[i];
        let fd = (up - down) / (2.0 * step);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        if err > worst.0 || (i == 0 && err.is_nan()) {
            worst = (err, i);
        }
        numeric.push(fd);
    }
    Ok(FdReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn quadratic(n: usize) -> Program {
        let mut b = ProgramBuilder::new(n);
        b.push(PrimitiveOp::SquaredNorm { input: 0, scale: 0.5 }).unwrap();
        b.finish().unwrap()
    }

    fn linear(w: &[f64]) -> (Program, Vec<Matrix>) {
        let mut b = ProgramBuilder::new(w.len());
        let p = b.add_param(1, w.len());
        b.push(PrimitiveOp::Affine { terms: vec![(p, 0)], bias: None }).unwrap();
        (b.finish().unwrap(), vec![Matrix::from_vec(1, w.len(), w.to_vec()).unwrap()])
    }

    /// Two hidden layers with every primitive kind on some path.
    fn mixed_program(n: usize, rng: &mut Rng) -> (Program, Vec<Matrix>) {
        let mut b = ProgramBuilder::new(n);
        let w0 = b.add_param(8, n);
        let b0 = b.add_param(8, 1);
        let wz = b.add_param(6, 8);
        let wx = b.add_param(6, n);
        let head = b.add_param(1, 3);
        let skip = b.add_param(1, n);
        let u1 = b.push(PrimitiveOp::Affine { terms: vec![(w0, 0)], bias: Some(b0) }).unwrap();
        let z1 = b.push(PrimitiveOp::Softplus { input: u1, beta: 1.5 }).unwrap();
        let c = b.push(PrimitiveOp::Center(0)).unwrap();
        let u2 = b.push(PrimitiveOp::Affine { terms: vec![(wz, z1), (wx, c)], bias: None }).unwrap();
        let z2 = b.push(PrimitiveOp::PairwiseMax(u2)).unwrap();
        let psi = b.push(PrimitiveOp::Affine { terms: vec![(head, z2), (skip, 0)], bias: None }).unwrap();
        let h = b.push(PrimitiveOp::RectifySquare(psi)).unwrap();
        let sq = b.push(PrimitiveOp::Square(psi)).unwrap();
        let m = b.push(PrimitiveOp::MeanProject(0)).unwrap();
        let q = b.push(PrimitiveOp::SquaredNorm { input: m, scale: 0.5 }).unwrap();
        let rs = z1_like(&mut b, c);
        let ip = b.push(PrimitiveOp::InnerProduct(c, rs)).unwrap();
        b.push(PrimitiveOp::ScalarCombine(vec![(1.0, h), (0.3, sq), (1.0, q), (0.1, ip)])).unwrap();
        let prog = b.finish().unwrap();
        let params = prog
            .param_shapes()
            .iter()
            .map(|&(r, c)| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform_in(-0.8, 0.8)).collect()).unwrap())
            .collect();
        (prog, params)
    }

    fn z1_like(b: &mut ProgramBuilder, c: NodeId) -> NodeId {
        let r = b.push(PrimitiveOp::Rectifier(c)).unwrap();
        b.push(PrimitiveOp::Square(r)).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let p = quadratic(3);
        let (v, g) = p.potential_and_gradient(&[], &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(g, vec![1.0, -2.0, 0.5]);
        assert!((v - 2.625).abs() < 1e-15);
    }

    #[test]
    fn linear_gradient_is_weights() {
        let (p, w) = linear(&[2.0, -1.0]);
        for x in [[0.0, 0.0], [3.0, 7.0], [-1.0, 0.25]] {
            let (_, g) = p.potential_and_gradient(&w, &x).unwrap();
            assert_eq!(g, vec![2.0, -1.0]);
        }
    }

    #[test]
    fn builder_rejects_bad_shapes() {
        let mut b = ProgramBuilder::new(3);
        let w = b.add_param(2, 4);
        assert!(b.push(PrimitiveOp::Affine { terms: vec![(w, 0)], bias: None }).is_err());
        let mut b = ProgramBuilder::new(3);
        assert!(b.push(PrimitiveOp::PairwiseMax(0)).is_err());
        let b = ProgramBuilder::new(3);
        assert!(b.finish().is_err());
        let (p, _) = linear(&[1.0, 1.0]);
        assert!(p.forward(&[Matrix::zeros(1, 3)], &[0.0, 0.0]).is_err());
        assert!(p.forward(&[Matrix::zeros(1, 2)], &[0.0]).is_err());
    }

    #[test]
    fn fd_check_quadratic_and_report() {
        let p = quadratic(4);
        let x = [0.3, -1.2, 2.0, 0.01];
        let (_, g) = p.potential_and_gradient(&[], &x).unwrap();
        let rep = finite_difference_check(|z| p.value(&[], z).unwrap(), &x, &g, 1e-5).unwrap();
        assert!(rep.max_rel_error <= 1e-9);
        assert!(rep.worst_index < 4);
        let mut wrong = g.clone();
        wrong[2] = 5.0;
        let rep = finite_difference_check(|z| p.value(&[], z).unwrap(), &x, &wrong, 1e-5).unwrap();
        assert_eq!(rep.worst_index, 2);
        assert!(finite_difference_check(|_| 0.0, &x, &g, 0.0).is_err());
    }

    #[test]
    fn input_gradient_matches_fd_on_mixed_program() {
        let mut rng = Rng::new(1);
        let mut checked = 0;
        while checked < 20 {
            let (prog, params) = mixed_program(5, &mut rng);
            let x = rng.normal_vec(5);
            let tape = prog.forward(&params, &x).unwrap();
            if prog.min_kink_margin(&tape) < 1e-4 {
                continue;
            }
            let (g, _) = prog.reverse(&tape, &params, false);
            let rep = finite_difference_check(|z| prog.value(&params, z).unwrap(), &x, &g, 1e-5).unwrap();
            assert!(rep.max_rel_error < 1e-6, "{rep:?}");
            checked += 1;
        }
    }

    #[test]
    fn param_gradient_matches_fd() {
        let mut rng = Rng::new(2);
        let (prog, params) = mixed_program(4, &mut rng);
        let x = rng.normal_vec(4);
        let g = prog.param_gradient(&params, &x).unwrap();
        for p in 0..params.len() {
            let flat = params[p].as_slice().to_vec();
            let rep = finite_difference_check(
                |z| {
                    let mut q = params.clone();
                    q[p].as_mut_slice().copy_from_slice(z);
                    prog.value(&q, &x).unwrap()
                },
                &flat,
                g[p].as_slice(),
                1e-6,
            )
            .unwrap();
            assert!(rep.max_rel_error < 1e-6, "param {p}: {rep:?}");
        }
    }

    #[test]
    fn directional_gradient_matches_fd() {
        let mut rng = Rng::new(3);
        let mut checked = 0;
        while checked < 5 {
            let (prog, params) = mixed_program(4, &mut rng);
            let x = rng.normal_vec(4);
            let d = rng.normal_vec(4);
            let tape = prog.forward(&params, &x).unwrap();
            if prog.min_kink_margin(&tape) < 1e-3 {
                continue;
            }
            let (obj, g) = prog.directional_param_gradient(&params, &tape, &d).unwrap();
            let (grad_x, _) = prog.reverse(&tape, &params, false);
            assert!((obj - grad_x.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-12);
            let directional = |q: &[Matrix]| {
                let t = prog.forward(q, &x).unwrap();
                let (gx, _) = prog.reverse(&t, q, false);
                gx.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>()
            };
            for p in 0..params.len() {
                let flat = params[p].as_slice().to_vec();
                let rep = finite_difference_check(
                    |z| {
                        let mut q = params.clone();
                        q[p].as_mut_slice().copy_from_slice(z);
                        directional(&q)
                    },
                    &flat,
                    g[p].as_slice(),
                    1e-6,
                )
                .unwrap();
                assert!(rep.max_rel_error < 1e-5, "param {p}: {rep:?}");
            }
            checked += 1;
        }
    }

    #[test]
    fn hand_chain_rule_one_dimensional() {
        // ψθ(x) = ½θx², fθ(y) = θy, ℓ = ½(θy − x)², ∂ℓ/∂θ = (θy − x)y
        let mut b = ProgramBuilder::new(1);
        let t = b.add_param(1, 1);
        let half_sq = b.push(PrimitiveOp::SquaredNorm { input: 0, scale: 0.5 }).unwrap();
        b.push(PrimitiveOp::Affine { terms: vec![(t, half_sq)], bias: None }).unwrap();
        let prog = b.finish().unwrap();
        let theta = vec![Matrix::from_vec(1, 1, vec![1.0]).unwrap()];
        let (v, g) = loss_parameter_gradient(&prog, &theta, &[(vec![2.0], vec![1.0])], &Loss::L2).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!((g[0].get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ties_are_deterministic() {
        let mut b = ProgramBuilder::new(2);
        let pm = b.push(PrimitiveOp::PairwiseMax(0)).unwrap();
        b.push(PrimitiveOp::SquaredNorm { input: pm, scale: 0.5 }).unwrap();
        let prog = b.finish().unwrap();
        let (_, g1) = prog.potential_and_gradient(&[], &[2.0, 2.0]).unwrap();
        let (_, g2) = prog.potential_and_gradient(&[], &[2.0, 2.0]).unwrap();
        assert_eq!(g1, vec![2.0, 0.0]);
        assert_eq!(g1, g2);
    }
}
