//! Define-by-run reverse-mode differentiation over a closed op set.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops are
//! recorded in creation order, which is already a topological order, so
//! [`Tape::backward`] walks the node list once from the loss downwards.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The enumerated op kinds. Each has its own adjoint rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Exp,
    Square,
    LeakyRelu,
    Sum,
    Mean,
    Conv2d,
    Softmax,
    ConcatChannels,
    Reshape,
    GridSample,
    ClampCoords,
    ScaledDot,
    TapSum,
    MulChannel,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Exp,
        OpKind::Square,
        OpKind::LeakyRelu,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Conv2d,
        OpKind::Softmax,
        OpKind::ConcatChannels,
        OpKind::Reshape,
        OpKind::GridSample,
        OpKind::ClampCoords,
        OpKind::ScaledDot,
        OpKind::TapSum,
        OpKind::MulChannel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add-scalar",
            OpKind::Exp => "exp",
            OpKind::Square => "square",
            OpKind::LeakyRelu => "leaky-relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Conv2d => "conv2d",
            OpKind::Softmax => "softmax-over-axis",
            OpKind::ConcatChannels => "concat-channels",
            OpKind::Reshape => "reshape-heads",
            OpKind::GridSample => "grid-sample-bilinear",
            OpKind::ClampCoords => "clamp-coords",
            OpKind::ScaledDot => "sqrt-scaled-dot",
            OpKind::TapSum => "matmul-per-position",
            OpKind::MulChannel => "mul-channel",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Softmax(Var, usize),
    ConcatChannels(Vec<Var>),
    Reshape(Var),
    GridSample {
        field: Var,
        coords: Var,
    },
    ClampCoords {
        input: Var,
        h: usize,
        w: usize,
    },
    ScaledDot(Var, Var),
    TapSum(Var, Var),
    MulChannel(Var, Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Exp(..) => OpKind::Exp,
            Op::Square(..) => OpKind::Square,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Softmax(..) => OpKind::Softmax,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::Reshape(..) => OpKind::Reshape,
            Op::GridSample { .. } => OpKind::GridSample,
            Op::ClampCoords { .. } => OpKind::ClampCoords,
            Op::ScaledDot(..) => OpKind::ScaledDot,
            Op::TapSum(..) => OpKind::TapSum,
            Op::MulChannel(..) => OpKind::MulChannel,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    corrupted: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the adjoint of every op of `kind` by 1.5. Only useful for
    /// checking that the gradient checker catches a broken rule.
    #[doc(hidden)]
    pub fn corrupt_adjoint(&mut self, kind: OpKind) {
        self.corrupted = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect
    /// to `v`; `None` when `v` does not require a gradient or no backward
    /// pass has run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip_map(a, b, |x, y| x / y);
        Ok(self.push_op(out, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push_op(out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push_op(out, Op::Square(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push_op(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push_op(out, Op::Mean(a), &[a])
    }

    /// Zero-padded 2-D cross-correlation. `input` is B×Cin×H×W, `weight`
    /// is Cout×Cin×KH×KW and `bias`, when present, has Cout entries.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} and weight {:?} must both be rank 4", xs, ws),
            ));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels (axis 1) {} != weight input channels (axis 1) {}", xs[1], ws[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} must have {} entries (weight axis 0)", self.shape(b), ws[0]),
                ));
            }
        }
        if geom.out_extent(xs[2], ws[2]).is_none() || geom.out_extent(xs[3], ws[3]).is_none() {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} does not fit padded input {}x{} (axes 2, 3)", ws[2], ws[3], xs[2], xs[3]),
            ));
        }
        let out = ops::conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom);
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push_op(out, Op::Conv2d { input, weight, bias, geom }, &ins))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a);
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::shape("softmax-over-axis", format!("axis {} of {:?} is empty or missing", axis, s)));
        }
        let out = ops::softmax(self.value(a), axis);
        Ok(self.push_op(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat-channels", "no inputs"));
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return Err(Error::shape("concat-channels", format!("rank of {:?} < 2", s0)));
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape(
                    "concat-channels",
                    format!("{:?} vs {:?} differ outside axis 1", s0, s),
                ));
            }
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&tensors);
        Ok(self.push_op(out, Op::ConcatChannels(parts.to_vec()), parts))
    }

    /// Reinterprets the row-major data under a new shape with the same
    /// element count; used for multi-head views and offset layouts.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(a), &[a]))
    }

    /// Bilinear sampling of `field` (B×C×H×W) at absolute pixel
    /// coordinates `coords` (B×P×2×Ho×Wo; component 0 is x, 1 is y).
    /// Output is B×C×P×Ho×Wo. Coordinates are expected inside
    /// `[0, W-1] × [0, H-1]`.
    pub fn grid_sample(&mut self, field: Var, coords: Var) -> Result<Var> {
        let fs = self.shape(field).to_vec();
        let cs = self.shape(coords).to_vec();
        if fs.len() != 4 || cs.len() != 5 || cs[2] != 2 || cs[0] != fs[0] {
            return Err(Error::shape(
                "grid-sample-bilinear",
                format!("field {:?} must be B×C×H×W and coords {:?} B×P×2×Ho×Wo with equal B (axis 0)", fs, cs),
            ));
        }
        let out = ops::grid_sample(self.value(field), self.value(coords));
        Ok(self.push_op(out, Op::GridSample { field, coords }, &[field, coords]))
    }

    /// Clamps B×P×2×Ho×Wo coordinates into an `h`×`w` image box.
    pub fn clamp_coords(&mut self, coords: Var, h: usize, w: usize) -> Result<Var> {
        let cs = self.shape(coords);
        if cs.len() != 5 || cs[2] != 2 || h == 0 || w == 0 {
            return Err(Error::shape("clamp-coords", format!("coords {:?} must be B×P×2×Ho×Wo", cs)));
        }
        let out = ops::clamp_coords(self.value(coords), h, w);
        Ok(self.push_op(out, Op::ClampCoords { input: coords, h, w }, &[coords]))
    }

    /// Per-head, per-tap scaled dot product. `q` is B×D×Hh×H×W and `k` is
    /// B×D×Hh×U×H×W; the result B×Hh×U×H×W holds `q·k / √D`.
    pub fn scaled_dot(&mut self, q: Var, k: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 5 || ks.len() != 6 || qs[..3] != ks[..3] || qs[3..] != ks[4..] {
            return Err(Error::shape(
                "sqrt-scaled-dot",
                format!("query {:?} (B×D×Hh×H×W) does not align with keys {:?} (B×D×Hh×U×H×W)", qs, ks),
            ));
        }
        if ks[3] == 0 {
            return Err(Error::shape("sqrt-scaled-dot", "tap axis (axis 3) is empty"));
        }
        let out = ops::scaled_dot(self.value(q), self.value(k));
        Ok(self.push_op(out, Op::ScaledDot(q, k), &[q, k]))
    }

    /// Weighted sum over taps at every position: `w` B×Hh×U×H×W, `v`
    /// B×D×Hh×U×H×W, result B×D×Hh×H×W.
    pub fn tap_sum(&mut self, w: Var, v: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let vs = self.shape(v).to_vec();
        if ws.len() != 5 || vs.len() != 6 || ws[0] != vs[0] || ws[1..] != vs[2..] {
            return Err(Error::shape(
                "matmul-per-position",
                format!("weights {:?} (B×Hh×U×H×W) do not align with values {:?} (B×D×Hh×U×H×W)", ws, vs),
            ));
        }
        let out = ops::tap_sum(self.value(w), self.value(v));
        Ok(self.push_op(out, Op::TapSum(w, v), &[w, v]))
    }

    /// Multiplies channel `c` (axis 1) of `x` by `w[c]`.
    pub fn mul_channel(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let wsh = self.shape(w);
        if xs.len() < 2 || wsh != [xs[1]] {
            return Err(Error::shape(
                "mul-channel",
                format!("weights {:?} must have one entry per channel (axis 1) of {:?}", wsh, xs),
            ));
        }
        let out = ops::mul_channel(self.value(x), self.value(w));
        Ok(self.push_op(out, Op::MulChannel(x, w), &[x, w]))
    }

    /// Fingerprint of the smooth piece the recorded computation lies on:
    /// leaky-relu input signs, active coordinate clamps and the bilinear
    /// cell of every sample. Two evaluations with equal fingerprints are
    /// connected by a single differentiable branch.
    pub fn piece_fingerprint(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu(a, _) => {
                    for &x in self.value(*a).data() {
                        (x > 0.0).hash(&mut hasher);
                    }
                }
                Op::ClampCoords { input, h, w } => {
                    let v = self.value(*input);
                    let plane = v.shape()[3] * v.shape()[4];
                    for (i, chunk) in v.data().chunks(plane).enumerate() {
                        let hi = if i % 2 == 0 { *w - 1 } else { *h - 1 } as f64;
                        for &c in chunk {
                            (c.partial_cmp(&0.0), c.partial_cmp(&hi)).hash(&mut hasher);
                        }
                    }
                }
                Op::GridSample { field, coords } => {
                    let (fh, fw) = (self.shape(*field)[2], self.shape(*field)[3]);
                    let v = self.value(*coords);
                    let plane = v.shape()[3] * v.shape()[4];
                    for (i, chunk) in v.data().chunks(plane).enumerate() {
                        let n = if i % 2 == 0 { fw } else { fh };
                        for &c in chunk {
                            ops::bilinear_corner(c, n).0.hash(&mut hasher);
                        }
                    }
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    /// Reverse pass from a scalar `loss`. Afterwards every leaf that
    /// requires a gradient holds one, zero if unreachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let seed = Tensor::ones(self.shape(loss));
        self.backward_from(loss, seed)
    }

    /// Vector-Jacobian product: propagates the cotangent `seed` (same shape
    /// as `out`) back to the leaves.
    pub fn backward_from(&mut self, out: Var, seed: Tensor) -> Result<()> {
        if seed.shape() != self.shape(out) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} does not match output {:?}", seed.shape(), self.shape(out)),
            ));
        }
        let loss = out;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(seed);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            if self.corrupted == Some(node.op.kind()) {
                g = g.map(|v| v * 1.5);
            }
            for (input, dg) in self.adjoint(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.axpy(1.0, &dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn adjoint(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.value(v);
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, elementwise(g, val(*b), |gi, bi| gi * bi)));
                }
                if want(*b) {
                    out.push((*b, elementwise(g, val(*a), |gi, ai| gi * ai)));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = Vec::new();
                if want(*a) {
                    out.push((*a, elementwise(g, val(*b), |gi, bi| gi / bi)));
                }
                if want(*b) {
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let ob = elementwise(&node.value, val(*b), |o, bi| -o / bi);
                    out.push((*b, elementwise(g, &ob, |gi, x| gi * x)));
                }
                out
            }
            Op::Scale(a, k) => vec![(*a, g.map(|x| x * k))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Exp(a) => vec![(*a, elementwise(g, &node.value, |gi, e| gi * e))],
            Op::Square(a) => vec![(*a, elementwise(g, val(*a), |gi, x| 2.0 * gi * x))],
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                vec![(*a, elementwise(g, val(*a), |gi, x| if x > 0.0 { gi } else { s * gi }))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(val(*input), val(*weight), g, *geom, want(*input), want(*weight));
                let mut out = vec![(*input, dx), (*weight, dw)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Softmax(a, axis) => vec![(*a, ops::softmax_backward(&node.value, g, *axis))],
            Op::ConcatChannels(parts) => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| val(p).shape().to_vec()).collect();
                parts.iter().copied().zip(ops::split_channels(g, &shapes)).collect()
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape()).unwrap())],
            Op::GridSample { field, coords } => {
                let (df, dc) = ops::grid_sample_backward(val(*field), val(*coords), g);
                vec![(*field, df), (*coords, dc)]
            }
            Op::ClampCoords { input, h, w } => {
                vec![(*input, ops::clamp_coords_backward(val(*input), g, *h, *w))]
            }
            Op::ScaledDot(q, k) => {
                let (dq, dk) = ops::scaled_dot_backward(val(*q), val(*k), g);
                vec![(*q, dq), (*k, dk)]
            }
            Op::TapSum(w, v) => {
                let (dw, dv) = ops::tap_sum_backward(val(*w), val(*v), g);
                vec![(*w, dw), (*v, dv)]
            }
            Op::MulChannel(x, w) => {
                let (dx, dw) = ops::mul_channel_backward(val(*x), val(*w), g);
                vec![(*x, dx), (*w, dw)]
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Central-difference gradient estimate of a scalar map at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    out
}
