//! Eagerly evaluated computation graph with reverse-mode differentiation.
//!
//! Every op computes its value when it is recorded, so the value of any
//! [`Var`] is available immediately through [`Graph::value`]. Nodes are
//! stored in creation order, which is already a topological order, and
//! [`Graph::backward`] walks them in reverse.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{matmul_raw, Real, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// One gradient per input, each shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Vec<Tensor<T>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, a_trans: bool, b_trans: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    LogClamped { a: Var, floor: T },
    Abs(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Softmax(Var),
    LayerNorm { a: Var, gamma: Var, beta: Var, normed: Vec<T>, inv_std: Vec<T> },
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Transpose(Var),
    GatherRows { table: Var, indices: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow { .. } => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::LogClamped { .. } => "log",
            Op::Abs(..) => "abs",
            Op::Maximum(..) => "maximum",
            Op::Minimum(..) => "minimum",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumAll(..) => "sum",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::Dropout { .. } => "dropout",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Whether dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout masks are drawn from a counter-based stream keyed by `seed`
    /// and the order in which dropout ops are recorded, so rebuilding the
    /// same graph with the same seed reproduces every mask.
    Train { seed: u64 },
}

pub struct Graph<'p, T: Real = f32> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    bound: IndexMap<String, Var>,
    mode: Mode,
    dropout_ops: u64,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    bound: IndexMap<String, Var>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when no path exists.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient for every parameter bound into the graph, in binding order.
    pub fn params(&self) -> IndexMap<String, Tensor<T>> {
        self.bound
            .iter()
            .map(|(name, &v)| (name.clone(), self.wrt(v)))
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.bound.get(name).map(|&v| self.wrt(v))
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::shape(
            op,
            format!("operands {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn softmax_row<T: Real>(row: &[T], dst: &mut [T], mask: Option<&[bool]>) {
    let mut max = T::neg_infinity();
    match mask {
        Some(m) => {
            for (&x, &k) in row.iter().zip(m) {
                if k && x > max {
                    max = x;
                }
            }
        }
        None => max = row.iter().copied().fold(max, T::max),
    }
    if max == T::neg_infinity() {
        return;
    }
    let mut sum = T::zero();
    match mask {
        Some(m) => {
            for ((d, &x), &k) in dst.iter_mut().zip(row).zip(m) {
                if k {
                    *d = (x - max).exp();
                    sum = sum + *d;
                }
            }
        }
        None => {
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum = sum + *d;
            }
        }
    }
    let inv = T::one() / sum;
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(mode: Mode) -> Self {
        Self { nodes: Vec::new(), store: None, bound: IndexMap::new(), mode, dropout_ops: 0 }
    }

    /// A graph whose [`Graph::param`] lookups resolve against `store`.
    pub fn with_params(store: &'p ParamStore<T>, mode: Mode) -> Self {
        Self { store: Some(store), ..Self::new(mode) }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Values are computed when ops are recorded.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::Numeric { op: op.tag() });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; gradients are not propagated into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf that is not backed by the parameter store.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Binds the named parameter as a differentiable leaf. Repeated lookups
    /// return the same node so gradients from every use accumulate.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let t = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?
            .clone();
        let v = self.push(t, Op::Leaf, true)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &IndexMap<String, Var> {
        &self.bound
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes of either operand.
    pub fn matmul_t(&mut self, a: Var, a_trans: bool, b: Var, b_trans: bool) -> Result<Var> {
        let out = matmul_raw(self.value(a), a_trans, self.value(b), b_trans)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, a_trans, b_trans }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Div(a, b), rg)
    }

    /// Adds a `1×c` (or length-`c`) row to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(row).numel() != c {
            return Err(AutodiffError::shape(
                "add_row",
                format!("row {:?} vs matrix {:?}", self.shape(row), self.shape(a)),
            ));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(row);
        self.push(Tensor::from_parts(shape, out), Op::AddRow { a, row }, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::of(GELU_C), T::of(GELU_A));
        let half = T::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| {
            if x > T::of(20.0) {
                x
            } else {
                x.exp().ln_1p()
            }
        });
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// `ln(max(a, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        let floor = T::of(floor);
        let out = self.value(a).map(|x| x.max(floor).ln());
        let rg = self.rg(a);
        self.push(out, Op::LogClamped { a, floor }, rg)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        let rg = self.rg(a);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("maximum", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Maximum(a, b), rg)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("minimum", self.value(a), self.value(b))?;
        let out = zip_map(self.value(a), self.value(b), |x, y| if x <= y { x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Minimum(a, b), rg)
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Row-wise softmax where columns with `key_mask[c] == false` get
    /// probability zero. Rows with no unmasked column become all zeros.
    pub fn softmax_rows_masked(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if let Some(mask) = key_mask {
            if mask.len() != c {
                return Err(AutodiffError::shape(
                    "softmax",
                    format!("mask of length {} for {c} columns", mask.len()),
                ));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for (row, dst) in src.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            softmax_row(row, dst, key_mask);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(AutodiffError::shape(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for rows of width {c}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::of(eps);
        let n = T::of(c as f64);
        let src = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                normed[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { a, gamma, beta, normed, inv_std },
            rg,
        )
    }

    /// Sum of all entries as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| AutodiffError::shape("concat_rows", "no operands".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            if pc != c {
                return Err(AutodiffError::shape(
                    "concat_rows",
                    format!("column counts {c} and {pc} differ"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![rows, c], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| AutodiffError::shape("concat_cols", "no operands".into()))?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(AutodiffError::shape(
                    "concat_cols",
                    format!("row counts {r} and {pr} differ"),
                ));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(vec![r, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > r {
            return Err(AutodiffError::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![len, c], data), Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > c {
            return Err(AutodiffError::shape(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols { a, start }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Embedding lookup: row `indices[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2();
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(AutodiffError::Index { what: "embedding table", index: bad, size: r });
        }
        if indices.is_empty() {
            return Err(AutodiffError::shape("gather_rows", "no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.value(table).row(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::from_parts(vec![indices.len(), c], data),
            Op::GatherRows { table, indices: indices.to_vec() },
            rg,
        )
    }

    /// Inverted dropout. Identity in eval mode and at rate zero.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Mode::Train { seed } = self.mode else {
            return Ok(a);
        };
        if rate == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(self.dropout_ops);
        self.dropout_ops += 1;
        let scale = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { scale })
            .collect();
        let out = Tensor::from_parts(
            self.shape(a).to_vec(),
            self.value(a).data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        );
        let rg = self.rg(a);
        self.push(out, Op::Dropout { a, mask }, rg)
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse-mode sweep from a scalar `loss`. Contributions reaching a node
    /// along several paths are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.propagate(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            bound: self.bound.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<T>,
        gout: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, a_trans, b_trans } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = match (a_trans, b_trans) {
                        (false, false) => matmul_raw(gout, false, bv, true)?,
                        (false, true) => matmul_raw(gout, false, bv, false)?,
                        (true, false) => matmul_raw(bv, false, gout, true)?,
                        (true, true) => matmul_raw(bv, true, gout, true)?,
                    };
                    self.accumulate(grads, *a, reshape_like(ga, av));
                }
                if self.rg(*b) {
                    let gb = match (a_trans, b_trans) {
                        (false, false) => matmul_raw(av, true, gout, false)?,
                        (false, true) => matmul_raw(gout, true, av, false)?,
                        (true, false) => matmul_raw(av, false, gout, false)?,
                        (true, true) => matmul_raw(gout, true, av, true)?,
                    };
                    self.accumulate(grads, *b, reshape_like(gb, bv));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, zip_map(gout, bv, |g, y| g * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, zip_map(gout, av, |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.accumulate(grads, *a, zip_map(gout, bv, |g, d| g / d));
                }
                if self.rg(*b) {
                    let gb = Tensor::from_parts(
                        bv.shape().to_vec(),
                        gout.data()
                            .iter()
                            .zip(av.data())
                            .zip(bv.data())
                            .map(|((&g, &n), &d)| -g * n / (d * d))
                            .collect(),
                    );
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow { a, row } => {
                self.accumulate(grads, *a, gout.clone());
                if self.rg(*row) {
                    let (r, c) = gout.dims2();
                    let mut gr = vec![T::zero(); c];
                    for i in 0..r {
                        for (acc, &g) in gr.iter_mut().zip(gout.row(i)) {
                            *acc = *acc + g;
                        }
                    }
                    let shape = self.shape(*row).to_vec();
                    self.accumulate(grads, *row, Tensor::from_parts(shape, gr));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, gout.map(|g| g * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.clone()),
            Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let g = zip_map(self.value(*a), gout, |x, g| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    g * d
                });
                self.accumulate(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, zip_map(y, gout, |s, g| g * s * (T::one() - s)));
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(y, gout, |e, g| g * e)),
            Op::Softplus(a) => {
                self.accumulate(grads, *a, zip_map(self.value(*a), gout, |x, g| g * sigmoid(x)));
            }
            Op::LogClamped { a, floor } => {
                let floor = *floor;
                let g = zip_map(self.value(*a), gout, |x, g| {
                    if x > floor {
                        g / x
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::Abs(a) => {
                let g = zip_map(self.value(*a), gout, |x, g| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, g);
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let take_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = av.numel();
                let mut ga = vec![T::zero(); n];
                let mut gb = vec![T::zero(); n];
                for i in 0..n {
                    let (x, yv) = (av.data()[i], bv.data()[i]);
                    let pick_a = if take_max { x >= yv } else { x <= yv };
                    if pick_a {
                        ga[i] = gout.data()[i];
                    } else {
                        gb[i] = gout.data()[i];
                    }
                }
                let shape = av.shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape.clone(), ga));
                self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
            }
            Op::Softmax(a) => {
                let (r, c) = y.dims2();
                let mut g = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = gout.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        g[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let shape = y.shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g));
            }
            Op::LayerNorm { a, gamma, beta, normed, inv_std } => {
                let (r, c) = y.dims2();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); r * c];
                let n = T::of(c as f64);
                for i in 0..r {
                    let go = gout.row(i);
                    let xh = &normed[i * c..(i + 1) * c];
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        dgamma[j] = dgamma[j] + go[j] * xh[j];
                        dbeta[j] = dbeta[j] + go[j];
                        let d = go[j] * gv[j];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xh[j];
                    }
                    let k = inv_std[i] / n;
                    for j in 0..c {
                        let d = go[j] * gv[j];
                        dx[i * c + j] = k * (n * d - sum_d - xh[j] * sum_dx);
                    }
                }
                let a_shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(a_shape, dx));
                let g_shape = self.shape(*gamma).to_vec();
                self.accumulate(grads, *gamma, Tensor::from_parts(g_shape, dgamma));
                let b_shape = self.shape(*beta).to_vec();
                self.accumulate(grads, *beta, Tensor::from_parts(b_shape, dbeta));
            }
            Op::SumAll(a) => {
                let g = gout.item();
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), g));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        let shape = self.shape(p).to_vec();
                        let g = gout.data()[offset..offset + n].to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(shape, g));
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, _) = gout.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let mut g = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            g.extend_from_slice(&gout.row(i)[offset..offset + pc]);
                        }
                        let shape = self.shape(p).to_vec();
                        self.accumulate(grads, p, Tensor::from_parts(shape, g));
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { a, start } => {
                let src = self.value(*a);
                let c = src.cols();
                let mut g = vec![T::zero(); src.numel()];
                g[start * c..start * c + gout.numel()].copy_from_slice(gout.data());
                self.accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), g));
            }
            Op::SliceCols { a, start } => {
                let src = self.value(*a);
                let (r, c) = src.dims2();
                let len = gout.cols();
                let mut g = vec![T::zero(); r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + len].copy_from_slice(gout.row(i));
                }
                self.accumulate(grads, *a, Tensor::from_parts(src.shape().to_vec(), g));
            }
            Op::Transpose(a) => {
                let g = gout.transpose();
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.into_data()));
            }
            Op::GatherRows { table, indices } => {
                let src = self.value(*table);
                let c = src.cols();
                let mut g = vec![T::zero(); src.numel()];
                for (out_row, &i) in indices.iter().enumerate() {
                    for (acc, &v) in g[i * c..(i + 1) * c].iter_mut().zip(gout.row(out_row)) {
                        *acc = *acc + v;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(src.shape().to_vec(), g));
            }
            Op::Dropout { a, mask } => {
                let g = Tensor::from_parts(
                    gout.shape().to_vec(),
                    gout.data().iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                );
                self.accumulate(grads, *a, g);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, y, gout);
                if gs.len() != inputs.len() {
                    return Err(AutodiffError::Contract(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, g) in inputs.iter().zip(gs) {
                    self.accumulate(grads, v, g);
                }
            }
        }
        Ok(())
    }
}

fn reshape_like<T: Real>(g: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(like.shape().to_vec(), g.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn constant_is_its_own_value() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let c = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0]);
        assert_eq!(g.op_tag(c), "leaf");
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 4])).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        let bad = g.constant(Tensor::zeros(&[4, 4])).unwrap();
        let err = g.matmul(a, bad).unwrap_err();
        assert!(matches!(err, AutodiffError::Shape { op: "matmul", .. }), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let p = g.leaf(t(&[3], &[1.0, -2.0, 5.0])).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_value() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let p = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let p = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        let q = g.leaf(t(&[2], &[3.0, 4.0])).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(q).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let p = g.leaf(t(&[2], &[1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(p), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let p = g.leaf(t(&[1], &[1000.0])).unwrap();
        assert!(matches!(g.exp(p), Err(AutodiffError::Numeric { op: "exp" })));
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let mut g = Graph::<f64>::new(Mode::Eval);
        let a = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 0.5, 0.5, 0.5])).unwrap();
        let s = g.softmax_rows_masked(a, Some(&[false, false, false])).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        let s = g.softmax_rows_masked(a, Some(&[true, false, true])).unwrap();
        let row = g.value(s).row(0);
        assert_eq!(row[1], 0.0);
        assert!((row[0] + row[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_at_eval_and_rate_zero() {
        let mut g = Graph::<f32>::new(Mode::Eval);
        let a = g.leaf(Tensor::full(&[4, 4], 1.5)).unwrap();
        assert_eq!(g.dropout(a, 0.5).unwrap(), a);
        let mut g = Graph::<f32>::new(Mode::Train { seed: 3 });
        let a = g.leaf(Tensor::full(&[4, 4], 1.5)).unwrap();
        assert_eq!(g.dropout(a, 0.0).unwrap(), a);
        let d = g.dropout(a, 0.5).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0 || v == 3.0));
    }

    #[test]
    fn dropout_masks_replay_with_same_seed() {
        let build = |seed| {
            let mut g = Graph::<f32>::new(Mode::Train { seed });
            let a = g.leaf(Tensor::full(&[8, 8], 1.0)).unwrap();
            let d1 = g.dropout(a, 0.3).unwrap();
            let d2 = g.dropout(a, 0.3).unwrap();
            (g.value(d1).clone(), g.value(d2).clone())
        };
        let (a1, a2) = build(11);
        let (b1, _) = build(11);
        let (c1, _) = build(12);
        assert_eq!(a1, b1);
        assert_ne!(a1, a2, "successive ops must draw independent masks");
        assert_ne!(a1, c1);
    }

    #[test]
    fn repeated_param_lookup_accumulates() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", t(&[2], &[3.0, -1.0])).unwrap();
        let mut g = Graph::with_params(&store, Mode::Eval);
        let w1 = g.param("w").unwrap();
        let w2 = g.param("w").unwrap();
        assert_eq!(w1, w2);
        let p = g.mul(w1, w2).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[6.0, -2.0]);
        assert!(matches!(g.param("missing"), Err(AutodiffError::UnknownParam(_))));
    }
}
