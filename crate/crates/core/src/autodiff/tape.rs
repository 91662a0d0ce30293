use std::fmt;

use super::{AdError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator kinds recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sigmoid,
    Tanh,
    Relu,
    ConcatLastAxis,
    MeanOverAxis,
    Sum,
    SquaredEuclideanDistance,
    Sqrt,
    GradientReversal,
    BceWithLogits,
    Row,
    Stack,
    GruSequence,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "elementwise_mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::ConcatLastAxis => "concat_last_axis",
            OpKind::MeanOverAxis => "mean_over_axis",
            OpKind::Sum => "sum",
            OpKind::SquaredEuclideanDistance => "squared_euclidean_distance",
            OpKind::Sqrt => "sqrt",
            OpKind::GradientReversal => "gradient_reversal",
            OpKind::BceWithLogits => "bce_with_logits",
            OpKind::Row => "row",
            OpKind::Stack => "stack",
            OpKind::GruSequence => "gru_sequence",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use OpKind::*;
        [
            Leaf,
            MatMul,
            Add,
            Sub,
            Mul,
            Scale,
            AddScalar,
            Sigmoid,
            Tanh,
            Relu,
            ConcatLastAxis,
            MeanOverAxis,
            Sum,
            SquaredEuclideanDistance,
            Sqrt,
            GradientReversal,
            BceWithLogits,
            Row,
            Stack,
            GruSequence,
        ]
        .into_iter()
        .find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Lower clamp applied to the radicand when differentiating `sqrt`.
pub const SQRT_GRAD_FLOOR: f64 = 1e-12;

/// Tape handles of the nine GRU parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct GruInputs {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruInputs {
    fn as_array(&self) -> [Var; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r,
            self.b_h,
        ]
    }
}

struct GruCache {
    x: Var,
    params: GruInputs,
    h0: Var,
    steps: usize,
    input_dim: usize,
    hidden: usize,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    // h_0 ..= h_T, row-major [(T + 1), H]
    hs: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat { inputs: Vec<Var>, rows: usize },
    Mean { input: Var, outer: usize, axis_len: usize, inner: usize },
    Sum(Var),
    SqDist(Var, Var),
    Sqrt(Var),
    Grl(Var),
    Bce { logit: Var, label: f64 },
    Row { input: Var, index: usize, cols: usize },
    Stack(Vec<Var>),
    Gru(Box<GruCache>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Relu(..) => OpKind::Relu,
            Op::Concat { .. } => OpKind::ConcatLastAxis,
            Op::Mean { .. } => OpKind::MeanOverAxis,
            Op::Sum(..) => OpKind::Sum,
            Op::SqDist(..) => OpKind::SquaredEuclideanDistance,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Grl(..) => OpKind::GradientReversal,
            Op::Bce { .. } => OpKind::BceWithLogits,
            Op::Row { .. } => OpKind::Row,
            Op::Stack(..) => OpKind::Stack,
            Op::Gru(..) => OpKind::GruSequence,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Dynamic reverse-mode tape. Nodes are appended in recording order and
/// [`Tape::backward`] replays them in exact reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[var.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Negates the backward rule of every node of `kind`. Used by the
    /// gradient-check suite to prove that it catches a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var, AdError> {
        if !tensor.is_finite() {
            return Err(AdError::NonFinite("leaf".into()));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Ok(Var(id))
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor) -> Result<Var, AdError> {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, AdError> {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var, AdError> {
        let kind = op.kind();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AdError::NonFinite(kind.name().into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::new(shape, values)?.with_requires_grad(requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    fn same_shape(&self, kind: OpKind, a: Var, b: Var) -> Result<(), AdError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AdError::ShapeMismatch(format!("{kind}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, AdError> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let values = t.values().iter().map(|&x| f(x)).collect();
        self.push(shape, values, op, &[a])
    }

    fn zip_binary(&mut self, kind: OpKind, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, AdError> {
        self.same_shape(kind, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = ta.shape().to_vec();
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(shape, values, op, &[a, b])
    }

    /// Matrix product. Rank-1 operands act as a row vector on the left or
    /// a column vector on the right; the result drops those unit axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (m, k_a) = match sa.as_slice() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            _ => return Err(AdError::ShapeMismatch(format!("matmul lhs rank {}", sa.len()))),
        };
        let (k_b, n) = match sb.as_slice() {
            [k] => (*k, 1),
            [k, n] => (*k, *n),
            _ => return Err(AdError::ShapeMismatch(format!("matmul rhs rank {}", sb.len()))),
        };
        if k_a != k_b {
            return Err(AdError::ShapeMismatch(format!("matmul: {sa:?} x {sb:?}")));
        }
        let k = k_a;
        let shape = match (sa.len(), sb.len()) {
            (2, 2) => vec![m, n],
            (2, 1) => vec![m],
            (1, 2) => vec![n],
            _ => vec![1],
        };
        let (av, bv) = (self.value(a).values(), self.value(b).values());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * k..(i + 1) * k];
            let dst = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in row.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bpj) in dst.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        self.push(shape, out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_binary(OpKind::Add, a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_binary(OpKind::Sub, a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.zip_binary(OpKind::Mul, a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, AdError> {
        self.map_unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        self.map_unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AdError> {
        self.map_unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        self.map_unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AdError> {
        self.map_unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Identity forward; the backward rule multiplies the upstream gradient by -1.
    pub fn gradient_reversal(&mut self, a: Var) -> Result<Var, AdError> {
        let t = self.value(a);
        let (shape, values) = (t.shape().to_vec(), t.values().to_vec());
        self.push(shape, values, Op::Grl(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        if self.value(a).values().iter().any(|&x| x < 0.0) {
            return Err(AdError::NonFinite("sqrt of negative value".into()));
        }
        self.map_unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn concat_last_axis(&mut self, inputs: &[Var]) -> Result<Var, AdError> {
        let first = inputs
            .first()
            .ok_or_else(|| AdError::ShapeMismatch("concat of nothing".into()))?;
        let lead = {
            let s = self.value(*first).shape();
            s[..s.len() - 1].to_vec()
        };
        let mut last = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(AdError::ShapeMismatch(format!(
                    "concat_last_axis: {:?} vs {:?}",
                    self.value(*first).shape(),
                    s
                )));
            }
            last += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * last);
        for r in 0..rows {
            for &v in inputs {
                let t = self.value(v);
                let w = t.shape()[t.rank() - 1];
                out.extend_from_slice(&t.values()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(last);
        self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                rows,
            },
            inputs,
        )
    }

    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var, AdError> {
        let s = self.value(a).shape().to_vec();
        if axis >= s.len() {
            return Err(AdError::ShapeMismatch(format!("mean axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let v = self.value(a).values();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..axis_len {
                let src = &v[(o * axis_len + t) * inner..(o * axis_len + t + 1) * inner];
                for (d, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        let inv = 1.0 / axis_len as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(shape, out, Op::Mean { input: a, outer, axis_len, inner }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let total = self.value(a).values().iter().sum();
        self.push(vec![1], vec![total], Op::Sum(a), &[a])
    }

    /// Sum of squared differences of two equal-shape tensors, as a scalar.
    pub fn squared_euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.same_shape(OpKind::SquaredEuclideanDistance, a, b)?;
        let total = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(vec![1], vec![total], Op::SqDist(a, b), &[a, b])
    }

    /// Numerically stable binary cross-entropy on a scalar logit.
    pub fn bce_with_logits(&mut self, logit: Var, label: f64) -> Result<Var, AdError> {
        if label != 0.0 && label != 1.0 {
            return Err(AdError::InvalidLabel(label));
        }
        let t = self.value(logit);
        if !t.is_scalar() {
            return Err(AdError::NotScalar(t.shape().to_vec()));
        }
        let l = t.item();
        let loss = l.max(0.0) - l * label + (-l.abs()).exp().ln_1p();
        self.push(vec![1], vec![loss], Op::Bce { logit, label }, &[logit])
    }

    /// Row `index` of a rank-2 tensor.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var, AdError> {
        let (rows, cols) = match self.value(a).shape() {
            [r, c] => (*r, *c),
            s => return Err(AdError::ShapeMismatch(format!("row of {s:?}"))),
        };
        if index >= rows {
            return Err(AdError::ShapeMismatch(format!("row {index} of {rows}")));
        }
        let values = self.value(a).values()[index * cols..(index + 1) * cols].to_vec();
        self.push(vec![cols], values, Op::Row { input: a, index, cols }, &[a])
    }

    /// Stacks equal-shape tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var, AdError> {
        let first = inputs
            .first()
            .ok_or_else(|| AdError::EmptySequence("stack".into()))?;
        let inner = self.value(*first).shape().to_vec();
        let mut values = Vec::with_capacity(inputs.len() * self.value(*first).len());
        for &v in inputs {
            if self.value(v).shape() != inner.as_slice() {
                return Err(AdError::ShapeMismatch(format!(
                    "stack: {inner:?} vs {:?}",
                    self.value(v).shape()
                )));
            }
            values.extend_from_slice(self.value(v).values());
        }
        let mut shape = vec![inputs.len()];
        shape.extend(inner);
        self.push(shape, values, Op::Stack(inputs.to_vec()), inputs)
    }

    /// Runs a GRU over the rows of `x` (shape `[T, d]`) starting from `h0`
    /// and returns all hidden states as a `[T, H]` tensor.
    ///
    /// z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    /// c = tanh(W_h x + U_h (r ⊙ h) + b_h), h' = (1 − z) ⊙ h + z ⊙ c.
    pub fn gru_sequence(&mut self, x: Var, p: &GruInputs, h0: Var) -> Result<Var, AdError> {
        let (steps, d) = match self.value(x).shape() {
            [t, d] => (*t, *d),
            s => return Err(AdError::ShapeMismatch(format!("gru input {s:?}"))),
        };
        let hidden = self.value(h0).len();
        if self.value(h0).shape() != [hidden] {
            return Err(AdError::ShapeMismatch(format!("gru h0 {:?}", self.value(h0).shape())));
        }
        for (v, want) in [
            (p.w_z, vec![hidden, d]),
            (p.w_r, vec![hidden, d]),
            (p.w_h, vec![hidden, d]),
            (p.u_z, vec![hidden, hidden]),
            (p.u_r, vec![hidden, hidden]),
            (p.u_h, vec![hidden, hidden]),
            (p.b_z, vec![hidden]),
            (p.b_r, vec![hidden]),
            (p.b_h, vec![hidden]),
        ] {
            if self.value(v).shape() != want.as_slice() {
                return Err(AdError::ShapeMismatch(format!(
                    "gru parameter {:?}, expected {want:?}",
                    self.value(v).shape()
                )));
            }
        }
        let xs = self.value(x).values();
        let [wz, wr, wh, uz, ur, uh, bz, br, bh] = p.as_array().map(|v| self.value(v).values());
        let mut hs = Vec::with_capacity((steps + 1) * hidden);
        hs.extend_from_slice(self.value(h0).values());
        let mut z = vec![0.0; steps * hidden];
        let mut r = vec![0.0; steps * hidden];
        let mut c = vec![0.0; steps * hidden];
        let mut rh = vec![0.0; hidden];
        for t in 0..steps {
            let xt = &xs[t * d..(t + 1) * d];
            let hp = hs[t * hidden..(t + 1) * hidden].to_vec();
            let zt = &mut z[t * hidden..(t + 1) * hidden];
            for j in 0..hidden {
                let az = bz[j] + dot(&wz[j * d..(j + 1) * d], xt) + dot(&uz[j * hidden..(j + 1) * hidden], &hp);
                zt[j] = sigmoid(az);
            }
            let rt = &mut r[t * hidden..(t + 1) * hidden];
            for j in 0..hidden {
                let ar = br[j] + dot(&wr[j * d..(j + 1) * d], xt) + dot(&ur[j * hidden..(j + 1) * hidden], &hp);
                rt[j] = sigmoid(ar);
            }
            for j in 0..hidden {
                rh[j] = rt[j] * hp[j];
            }
            let ct = &mut c[t * hidden..(t + 1) * hidden];
            for j in 0..hidden {
                let ah = bh[j] + dot(&wh[j * d..(j + 1) * d], xt) + dot(&uh[j * hidden..(j + 1) * hidden], &rh);
                ct[j] = ah.tanh();
            }
            let zt = &z[t * hidden..(t + 1) * hidden];
            for j in 0..hidden {
                hs.push((1.0 - zt[j]) * hp[j] + zt[j] * ct[j]);
            }
        }
        let out = hs[hidden..].to_vec();
        let mut inputs = vec![x, h0];
        inputs.extend(p.as_array());
        let cache = GruCache {
            x,
            params: *p,
            h0,
            steps,
            input_dim: d,
            hidden,
            z,
            r,
            c,
            hs,
        };
        self.push(vec![steps, hidden], out, Op::Gru(Box::new(cache)), &inputs)
    }

    /// Populates `grad` on every gradient-requiring tensor reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AdError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(AdError::NotScalar(lv.shape().to_vec()));
        }
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if self.fault == Some(self.nodes[i].op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
                self.propagate(i, &g, &mut grads);
                g.iter_mut().for_each(|x| *x = -*x);
            } else {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(AdError::NonFinite(format!("gradient of {}", node.op.kind())));
                }
                if node.value.requires_grad() {
                    node.value.set_grad(g);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.nodes[i].value.values();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let bv = self.vals(b);
                    accumulate(grads, a, m * k, |ga| {
                        for r in 0..m {
                            for p in 0..k {
                                ga[r * k + p] += dot(&g[r * n..(r + 1) * n], &bv[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
                if self.needs(b) {
                    let av = self.vals(a);
                    accumulate(grads, b, k * n, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let arp = av[r * k + p];
                                for (d, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += arp * gv;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(a) {
                    accumulate(grads, a, g.len(), |ga| add_into(ga, g, 1.0));
                }
                if self.needs(b) {
                    accumulate(grads, b, g.len(), |gb| add_into(gb, g, sign));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.vals(b);
                    accumulate(grads, a, g.len(), |ga| {
                        for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                            *d += gv * y;
                        }
                    });
                }
                if self.needs(b) {
                    let av = self.vals(a);
                    accumulate(grads, b, g.len(), |gb| {
                        for ((d, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                            *d += gv * x;
                        }
                    });
                }
            }
            &Op::Scale(a, factor) => {
                accumulate(grads, a, g.len(), |ga| add_into(ga, g, factor));
            }
            &Op::AddScalar(a) | &Op::Grl(a) => {
                let sign = if matches!(self.nodes[i].op, Op::Grl(..)) { -1.0 } else { 1.0 };
                accumulate(grads, a, g.len(), |ga| add_into(ga, g, sign));
            }
            &Op::Sigmoid(a) => accumulate(grads, a, g.len(), |ga| {
                for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }),
            &Op::Tanh(a) => accumulate(grads, a, g.len(), |ga| {
                for ((d, &gv), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gv * (1.0 - y * y);
                }
            }),
            &Op::Relu(a) => {
                let av = self.vals(a);
                accumulate(grads, a, g.len(), |ga| {
                    for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *d += gv;
                        }
                    }
                })
            }
            Op::Concat { inputs, rows } => {
                let total = g.len() / rows;
                let mut offset = 0;
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    let w = t.shape()[t.rank() - 1];
                    if self.needs(v) {
                        accumulate(grads, v, t.len(), |gv| {
                            for r in 0..*rows {
                                add_into(
                                    &mut gv[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                    1.0,
                                );
                            }
                        });
                    }
                    offset += w;
                }
            }
            &Op::Mean { input, outer, axis_len, inner } => {
                let inv = 1.0 / axis_len as f64;
                accumulate(grads, input, outer * axis_len * inner, |ga| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for t in 0..axis_len {
                            let base = (o * axis_len + t) * inner;
                            add_into(&mut ga[base..base + inner], src, inv);
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                accumulate(grads, a, n, |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            &Op::SqDist(a, b) => {
                let (av, bv) = (self.vals(a), self.vals(b));
                for (v, sign) in [(a, 2.0 * g[0]), (b, -2.0 * g[0])] {
                    if self.needs(v) {
                        accumulate(grads, v, av.len(), |gv| {
                            for ((d, &x), &y) in gv.iter_mut().zip(av).zip(bv) {
                                *d += sign * (x - y);
                            }
                        });
                    }
                }
            }
            &Op::Sqrt(a) => {
                let av = self.vals(a);
                accumulate(grads, a, g.len(), |ga| {
                    for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        *d += gv / (2.0 * x.max(SQRT_GRAD_FLOOR).sqrt());
                    }
                });
            }
            &Op::Bce { logit, label } => {
                let l = self.vals(logit)[0];
                accumulate(grads, logit, 1, |ga| ga[0] += g[0] * (sigmoid(l) - label));
            }
            &Op::Row { input, index, cols } => {
                let n = self.nodes[input.0].value.len();
                accumulate(grads, input, n, |ga| add_into(&mut ga[index * cols..(index + 1) * cols], g, 1.0));
            }
            Op::Stack(inputs) => {
                let w = g.len() / inputs.len();
                for (j, &v) in inputs.iter().enumerate() {
                    if self.needs(v) {
                        accumulate(grads, v, w, |gv| add_into(gv, &g[j * w..(j + 1) * w], 1.0));
                    }
                }
            }
            Op::Gru(cache) => self.gru_backward(cache, g, grads),
        }
    }

    fn gru_backward(&self, cache: &GruCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (steps, d, hd) = (cache.steps, cache.input_dim, cache.hidden);
        let p = &cache.params;
        let xs = self.vals(cache.x);
        let [wz, wr, wh, uz, ur, uh, _, _, _] = p.as_array().map(|v| self.vals(v));
        let mut dwz = vec![0.0; hd * d];
        let mut dwr = vec![0.0; hd * d];
        let mut dwh = vec![0.0; hd * d];
        let mut duz = vec![0.0; hd * hd];
        let mut dur = vec![0.0; hd * hd];
        let mut duh = vec![0.0; hd * hd];
        let mut dbz = vec![0.0; hd];
        let mut dbr = vec![0.0; hd];
        let mut dbh = vec![0.0; hd];
        let x_needs = self.needs(cache.x);
        let mut dx = if x_needs { vec![0.0; steps * d] } else { Vec::new() };
        let mut dh_next = vec![0.0; hd];
        let mut dh = vec![0.0; hd];
        let mut daz = vec![0.0; hd];
        let mut dar = vec![0.0; hd];
        let mut dah = vec![0.0; hd];
        let mut rh = vec![0.0; hd];
        for t in (0..steps).rev() {
            let xt = &xs[t * d..(t + 1) * d];
            let hp = &cache.hs[t * hd..(t + 1) * hd];
            let zt = &cache.z[t * hd..(t + 1) * hd];
            let rt = &cache.r[t * hd..(t + 1) * hd];
            let ct = &cache.c[t * hd..(t + 1) * hd];
            for j in 0..hd {
                dh[j] = g[t * hd + j] + dh_next[j];
                rh[j] = rt[j] * hp[j];
            }
            for j in 0..hd {
                let dz = dh[j] * (ct[j] - hp[j]);
                let dc = dh[j] * zt[j];
                dh_next[j] = dh[j] * (1.0 - zt[j]);
                dah[j] = dc * (1.0 - ct[j] * ct[j]);
                daz[j] = dz * zt[j] * (1.0 - zt[j]);
            }
            // d(r ⊙ h_prev) = U_hᵀ dah
            let mut drh = vec![0.0; hd];
            for j in 0..hd {
                let a = dah[j];
                if a != 0.0 {
                    add_into(&mut drh, &uh[j * hd..(j + 1) * hd], a);
                }
            }
            for l in 0..hd {
                let dr = drh[l] * hp[l];
                dh_next[l] += drh[l] * rt[l];
                dar[l] = dr * rt[l] * (1.0 - rt[l]);
            }
            for j in 0..hd {
                add_into(&mut dh_next, &uz[j * hd..(j + 1) * hd], daz[j]);
                add_into(&mut dh_next, &ur[j * hd..(j + 1) * hd], dar[j]);
            }
            for j in 0..hd {
                add_into(&mut dwz[j * d..(j + 1) * d], xt, daz[j]);
                add_into(&mut dwr[j * d..(j + 1) * d], xt, dar[j]);
                add_into(&mut dwh[j * d..(j + 1) * d], xt, dah[j]);
                add_into(&mut duz[j * hd..(j + 1) * hd], hp, daz[j]);
                add_into(&mut dur[j * hd..(j + 1) * hd], hp, dar[j]);
                add_into(&mut duh[j * hd..(j + 1) * hd], &rh, dah[j]);
                dbz[j] += daz[j];
                dbr[j] += dar[j];
                dbh[j] += dah[j];
            }
            if x_needs {
                let dxt = &mut dx[t * d..(t + 1) * d];
                for j in 0..hd {
                    add_into(dxt, &wz[j * d..(j + 1) * d], daz[j]);
                    add_into(dxt, &wr[j * d..(j + 1) * d], dar[j]);
                    add_into(dxt, &wh[j * d..(j + 1) * d], dah[j]);
                }
            }
        }
        let mut deliver = |v: Var, local: Vec<f64>| {
            if self.needs(v) {
                accumulate(grads, v, local.len(), |gv| add_into(gv, &local, 1.0));
            }
        };
        deliver(p.w_z, dwz);
        deliver(p.w_r, dwr);
        deliver(p.w_h, dwh);
        deliver(p.u_z, duz);
        deliver(p.u_r, dur);
        deliver(p.u_h, duh);
        deliver(p.b_z, dbz);
        deliver(p.b_r, dbr);
        deliver(p.b_h, dbh);
        deliver(cache.h0, dh_next);
        if x_needs {
            deliver(cache.x, dx);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}
