use super::array::{gemm_acc, Array};
use super::DiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        normalized: Array,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    needs_grad: bool,
}

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// Nodes are appended in evaluation order, so every operation sits after the
/// operations producing its inputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a trainable leaf; its gradient is retained after `backward`.
    pub fn param(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a trainable leaf, `None` until a backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&Array> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push_raw(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Array {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(va.rows(), va.cols(), data).expect("shape checked")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.1 != sb.0 {
            return Err(DiffError::Shape {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let mut out = Array::zeros(sa.0, sb.1);
        gemm_acc(1.0, self.value(a), false, self.value(b), false, &mut out);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1×n` row to every row of an `m×n` value (bias over the batch).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(DiffError::Shape {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data();
        for chunk in out.data_mut().chunks_mut(sa.1.max(1)) {
            for (x, b) in chunk.iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let out = self.value(a).map(|x| x + shift);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), &[a])
    }

    /// `1 − a`, as used for survival factors.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Natural logarithm; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(DiffError::Domain {
                op: "log",
                value: bad,
            });
        }
        let out = self.value(a).map(f64::ln);
        Ok(self.push(out, Op::Log(a), &[a]))
    }

    /// Clamps entries to `[lo, hi]`; the gradient passes only inside the range.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        if !va.all_finite() {
            return Err(DiffError::NonFinite { op: "softmax" });
        }
        if va.cols() == 0 {
            return Err(DiffError::Empty { op: "softmax" });
        }
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(va.cols()) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(DiffError::Empty { op: "sum" });
        }
        let out = Array::scalar(va.data().iter().sum());
        Ok(self.push(out, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(DiffError::Empty { op: "mean" });
        }
        let out = Array::scalar(va.data().iter().sum::<f64>() / va.len() as f64);
        Ok(self.push(out, Op::Mean(a), &[a]))
    }

    /// Columns `start..start + width` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        if start + width > va.cols() {
            return Err(DiffError::Shape {
                op: "slice_cols",
                left: va.shape(),
                right: (start, width),
            });
        }
        let mut data = Vec::with_capacity(va.rows() * width);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row_slice(r)[start..start + width]);
        }
        let out = Array::new(va.rows(), width, data).expect("sized above");
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Picks column `indices[r]` from row `r`, giving an `m×1` value.
    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let va = self.value(a);
        if indices.len() != va.rows() {
            return Err(DiffError::Shape {
                op: "gather_cols",
                left: va.shape(),
                right: (indices.len(), 1),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.cols()) {
            return Err(DiffError::Index {
                op: "gather_cols",
                index: bad,
                bound: va.cols(),
            });
        }
        let data = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| va.get(r, c))
            .collect();
        let out = Array::new(va.rows(), 1, data).expect("sized above");
        Ok(self.push(out, Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Row-wise layer normalization `gain ⊙ (x − μ)/√(σ² + ε) + offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var, DiffError> {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        for (name, v) in [("layer_norm gain", gain), ("layer_norm offset", offset)] {
            let s = self.value(v).shape();
            if s != (1, cols) {
                return Err(DiffError::Shape {
                    op: name,
                    left: vx.shape(),
                    right: s,
                });
            }
        }
        if cols == 0 {
            return Err(DiffError::Empty { op: "layer_norm" });
        }
        let g = self.value(gain).data();
        let o = self.value(offset).data();
        let mut normalized = vx.clone();
        let mut out = Array::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut normalized.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let dst = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for c in 0..cols {
                row[c] = (row[c] - mean) * inv;
                dst[c] = g[c] * row[c] + o[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            offset,
            normalized,
            inv_std,
        };
        Ok(self.push(out, op, &[x, gain, offset]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of trainable leaves are added to whatever they already hold,
    /// so repeated calls accumulate until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(DiffError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Array>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => unreachable!("leaves handled by caller"),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let mut ga = Array::zeros(va.rows(), va.cols());
                    gemm_acc(1.0, &g, false, vb, true, &mut ga);
                    accumulate(grads, *a, ga);
                }
                if wants(b) {
                    let mut gb = Array::zeros(vb.rows(), vb.cols());
                    gemm_acc(1.0, va, true, &g, false, &mut gb);
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if wants(b) {
                    accumulate(grads, *b, g.clone());
                }
                if wants(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(b) {
                    accumulate(grads, *b, g.map(|x| -x));
                }
                if wants(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, hadamard(&g, self.value(*b)));
                }
                if wants(b) {
                    accumulate(grads, *b, hadamard(&g, self.value(*a)));
                }
            }
            Op::AddRow(a, row) => {
                if wants(row) {
                    let cols = g.cols();
                    let mut gr = Array::zeros(1, cols);
                    for chunk in g.data().chunks(cols.max(1)) {
                        for (acc, x) in gr.data_mut().iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    accumulate(grads, *row, gr);
                }
                if wants(a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::Neg(a) => accumulate(grads, *a, g.map(|x| -x)),
            Op::Sigmoid(a) => {
                let ga = zip_map(&g, &node.value, |d, y| d * y * (1.0 - y));
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(&g, &node.value, |d, y| d * (1.0 - y * y));
                accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_map(&g, self.value(*a), |d, x| d / x);
                accumulate(grads, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = zip_map(&g, self.value(*a), |d, x| {
                    if x >= *lo && x <= *hi {
                        d
                    } else {
                        0.0
                    }
                });
                accumulate(grads, *a, ga);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                let mut ga = Array::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, d)| p * d).sum();
                    for c in 0..cols {
                        ga.set(r, c, yr[c] * (gr[c] - dot));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(grads, *a, Array::filled(r, c, g.data()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c) as f64;
                accumulate(grads, *a, Array::filled(r, c, g.data()[0] / n));
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).shape();
                let width = g.cols();
                let mut ga = Array::zeros(rows, cols);
                for r in 0..rows {
                    let dst = &mut ga.data_mut()[r * cols + start..r * cols + start + width];
                    dst.copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *a, ga);
            }
            Op::Gather(a, indices) => {
                let (rows, cols) = self.value(*a).shape();
                let mut ga = Array::zeros(rows, cols);
                for (r, &c) in indices.iter().enumerate() {
                    ga.set(r, c, g.get(r, 0));
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = normalized.shape();
                if wants(offset) || wants(gain) {
                    let mut g_off = Array::zeros(1, cols);
                    let mut g_gain = Array::zeros(1, cols);
                    for r in 0..rows {
                        let (gr, nr) = (g.row_slice(r), normalized.row_slice(r));
                        for c in 0..cols {
                            g_off.data_mut()[c] += gr[c];
                            g_gain.data_mut()[c] += gr[c] * nr[c];
                        }
                    }
                    if wants(offset) {
                        accumulate(grads, *offset, g_off);
                    }
                    if wants(gain) {
                        accumulate(grads, *gain, g_gain);
                    }
                }
                if wants(x) {
                    let gain_v = self.value(*gain).data();
                    let n = cols as f64;
                    let mut gx = Array::zeros(rows, cols);
                    let mut dn = vec![0.0; cols];
                    for r in 0..rows {
                        let (gr, nr) = (g.row_slice(r), normalized.row_slice(r));
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for c in 0..cols {
                            dn[c] = gr[c] * gain_v[c];
                            sum_dn += dn[c];
                            sum_dn_n += dn[c] * nr[c];
                        }
                        let scale = inv_std[r] / n;
                        for c in 0..cols {
                            gx.set(r, c, scale * (n * dn[c] - sum_dn - nr[c] * sum_dn_n));
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}

fn hadamard(a: &Array, b: &Array) -> Array {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.rows(), a.cols(), data).expect("same shape")
}
