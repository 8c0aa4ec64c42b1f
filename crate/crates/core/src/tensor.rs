//! Dense f64 tensors with a reverse-mode tape.
//!
//! The op set is exactly what the encoder needs: matmul (plain and
//! B-transposed), elementwise add, row bias, softmax, layer norm, GELU,
//! embedding gather, column slice/concat for head splitting, dropout, and
//! cross-entropy (fused with softmax for training, unfused for decoding).
//! Everything is computed and accumulated in 64-bit.

use thiserror::Error;

/// Probabilities are floored at this value inside `log`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },
    #[error("row {row} of distribution sums to {sum}, not 1 within 1e-6")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },
    #[error("{op}: index {index} out of bounds for extent {extent}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Plain dense tensor: row-major data plus an optional gradient buffer of
/// identical shape. Parameters live in this form between training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn alloc_grad(&mut self) -> &mut [f64] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn clear_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(0.0);
        }
    }
}

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: 0,
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    report
}

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A·B
    Matmul(TensorId, TensorId),
    /// C = A·Bᵀ (B stored row-major n×k)
    MatmulNT(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// y = c1·a + c2·b, elementwise
    Lincomb(f64, TensorId, f64, TensorId),
    /// M[r×c] + bias[c] broadcast over rows
    AddRowBias(TensorId, TensorId),
    Scale(TensorId, f64),
    Transpose(TensorId),
    SoftmaxLast(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    Gelu(TensorId),
    GatherRows {
        table: TensorId,
        idx: Vec<usize>,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<TensorId>),
    /// keep[i] is 0 or 1/(1-p); y = x ⊙ keep
    Dropout {
        x: TensorId,
        keep: Vec<f64>,
    },
    /// Unfused CE on a row-stochastic matrix.
    CeProbs {
        probs: TensorId,
        labels: Vec<usize>,
    },
    /// log-sum-exp CE on logits with per-row weights.
    CeLogits {
        logits: TensorId,
        labels: Vec<usize>,
        weights: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Reverse-mode tape. Ops compute eagerly on insertion; `backward` walks the
/// node list in reverse. Node ids only reference earlier nodes so reverse id
/// order is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.nodes[id].shape.clone(),
            data: self.nodes[id].data.clone(),
            grad: None,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> TensorId {
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            shape,
            data,
            grad,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        dgemm(
            m, k, n, 1.0,
            &self.nodes[a].data, k as isize, 1,
            &self.nodes[b].data, n as isize, 1,
            0.0, &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b)))
    }

    /// C[m×n] = A[m×k] · B[n×k]ᵀ
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (&self.nodes[a].shape, &self.nodes[b].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        dgemm(
            m, k, n, 1.0,
            &self.nodes[a].data, k as isize, 1,
            &self.nodes[b].data, 1, k as isize,
            0.0, &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatmulNT(a, b)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, data, Op::Add(a, b)))
    }

    pub fn lincomb(
        &mut self,
        ca: f64,
        a: TensorId,
        cb: f64,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op: "lincomb",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| ca * x + cb * y)
            .collect();
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, data, Op::Lincomb(ca, a, cb, b)))
    }

    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (r, c) = dims2(&self.nodes[a].shape);
        if self.nodes[bias].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[bias].shape.clone(),
            });
        }
        let mut data = self.nodes[a].data.clone();
        for row in 0..r {
            for j in 0..c {
                data[row * c + j] += self.nodes[bias].data[j];
            }
        }
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, data, Op::AddRowBias(a, bias)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| c * x).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, Op::Scale(a, c))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = &self.nodes[a].shape;
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: s.clone(),
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.nodes[a].data[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], data, Op::Transpose(a)))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: TensorId) -> TensorId {
        let (r, c) = dims2(&self.nodes[a].shape);
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let x = &self.nodes[a].data[row * c..(row + 1) * c];
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in x.iter().enumerate() {
                let e = (v - m).exp();
                data[row * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[row * c + j] /= sum;
            }
        }
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, Op::SoftmaxLast(a))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (r, d) = dims2(&self.nodes[x].shape);
        if self.nodes[gamma].shape != [d] || self.nodes[beta].shape != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[gamma].shape.clone(),
            });
        }
        let mut data = vec![0.0; r * d];
        for row in 0..r {
            let xs = &self.nodes[x].data[row * d..(row + 1) * d];
            let mean = xs.iter().sum::<f64>() / d as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let xh = (xs[j] - mean) * inv;
                data[row * d + j] = self.nodes[gamma].data[j] * xh + self.nodes[beta].data[j];
            }
        }
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(shape, data, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, Op::Gelu(a))
    }

    pub fn gather_rows(&mut self, table: TensorId, idx: &[usize]) -> Result<TensorId, TensorError> {
        let s = &self.nodes[table].shape;
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "gather_rows",
                expected: 2,
                shape: s.clone(),
            });
        }
        let (v, d) = (s[0], s[1]);
        let mut data = vec![0.0; idx.len() * d];
        for (i, &row) in idx.iter().enumerate() {
            if row >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: row,
                    extent: v,
                });
            }
            data[i * d..(i + 1) * d].copy_from_slice(&self.nodes[table].data[row * d..(row + 1) * d]);
        }
        Ok(self.push(
            vec![idx.len(), d],
            data,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_cols(
        &mut self,
        x: TensorId,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let s = &self.nodes[x].shape;
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "slice_cols",
                expected: 2,
                shape: s.clone(),
            });
        }
        let (r, c) = (s[0], s[1]);
        if start + len > c {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[x].data[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], data, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_cols of zero parts".into()));
        }
        let r = self.nodes[parts[0]].shape[0];
        let mut total = 0;
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.len() != 2 || s[0] != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0]].shape.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[1];
        }
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let c = self.nodes[p].shape[1];
            for i in 0..r {
                data[i * total + off..i * total + off + c]
                    .copy_from_slice(&self.nodes[p].data[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(vec![r, total], data, Op::ConcatCols(parts.to_vec())))
    }

    /// keep[i] must be 0 or 1/(1-p); caller samples it.
    pub fn dropout(&mut self, x: TensorId, keep: Vec<f64>) -> Result<TensorId, TensorError> {
        if keep.len() != self.nodes[x].data.len() {
            return Err(TensorError::LengthMismatch {
                shape: self.nodes[x].shape.clone(),
                expected: self.nodes[x].data.len(),
                got: keep.len(),
            });
        }
        let data: Vec<f64> = self.nodes[x]
            .data
            .iter()
            .zip(&keep)
            .map(|(v, k)| v * k)
            .collect();
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(shape, data, Op::Dropout { x, keep }))
    }

    /// −(1/N)·Σ log(p[o, label(o)]) on an N×C row-stochastic matrix.
    pub fn cross_entropy(
        &mut self,
        probs: TensorId,
        labels: &[usize],
    ) -> Result<TensorId, TensorError> {
        let (n, c) = dims2(&self.nodes[probs].shape);
        if labels.len() != n {
            return Err(TensorError::LengthMismatch {
                shape: vec![n],
                expected: n,
                got: labels.len(),
            });
        }
        let mut loss = 0.0;
        for (row, &lab) in labels.iter().enumerate() {
            if lab >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: lab,
                    classes: c,
                    row,
                });
            }
            let sum: f64 = self.nodes[probs].data[row * c..(row + 1) * c].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TensorError::NotRowStochastic { row, sum });
            }
            loss -= self.nodes[probs].data[row * c + lab].max(PROB_FLOOR).ln();
        }
        loss /= n as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CeProbs {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Σ_o w_o·(logsumexp(z_o) − z_o[label_o]); the softmax is fused in.
    pub fn cross_entropy_logits(
        &mut self,
        logits: TensorId,
        labels: &[usize],
        weights: &[f64],
    ) -> Result<TensorId, TensorError> {
        let (n, c) = dims2(&self.nodes[logits].shape);
        if labels.len() != n || weights.len() != n {
            return Err(TensorError::LengthMismatch {
                shape: vec![n],
                expected: n,
                got: labels.len(),
            });
        }
        let mut loss = 0.0;
        for (row, &lab) in labels.iter().enumerate() {
            if lab >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: lab,
                    classes: c,
                    row,
                });
            }
            let z = &self.nodes[logits].data[row * c..(row + 1) * c];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += weights[row] * (lse - z[lab]);
        }
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CeLogits {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn check_finite(&self, id: TensorId, context: &str) -> Result<(), TensorError> {
        for (i, v) in self.nodes[id].data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    context: context.to_string(),
                    index: i,
                });
            }
        }
        Ok(())
    }

    /// Seeds d(out)/d(out) = 1 and accumulates gradients down the tape.
    pub fn backward(&mut self, out: TensorId) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
        assert_eq!(self.nodes[out].data.len(), 1, "backward needs a scalar");
        self.nodes[out].grad[0] = 1.0;

        for id in (0..=out).rev() {
            // split so we can read node `id` while writing its parents
            let (head, tail) = self.nodes.split_at_mut(id);
            let node = &tail[0];
            match node.op.clone() {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = head[a].shape[1];
                    // temporaries so a == b aliasing is harmless
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    // dA = dC·Bᵀ
                    dgemm(
                        m, n, k, 1.0,
                        &node.grad, n as isize, 1,
                        &head[b].data, 1, n as isize,
                        0.0, &mut da,
                    );
                    // dB = Aᵀ·dC
                    dgemm(
                        k, m, n, 1.0,
                        &head[a].data, 1, k as isize,
                        &node.grad, n as isize, 1,
                        0.0, &mut db,
                    );
                    for (g, d) in head[a].grad.iter_mut().zip(&da) {
                        *g += d;
                    }
                    for (g, d) in head[b].grad.iter_mut().zip(&db) {
                        *g += d;
                    }
                }
                Op::MatmulNT(a, b) => {
                    // C = A·Bᵀ with A m×k, B n×k
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = head[a].shape[1];
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; n * k];
                    // dA = dC·B
                    dgemm(
                        m, n, k, 1.0,
                        &node.grad, n as isize, 1,
                        &head[b].data, k as isize, 1,
                        0.0, &mut da,
                    );
                    // dB = dCᵀ·A
                    dgemm(
                        n, m, k, 1.0,
                        &node.grad, 1, n as isize,
                        &head[a].data, k as isize, 1,
                        0.0, &mut db,
                    );
                    for (g, d) in head[a].grad.iter_mut().zip(&da) {
                        *g += d;
                    }
                    for (g, d) in head[b].grad.iter_mut().zip(&db) {
                        *g += d;
                    }
                }
                Op::Add(a, b) => {
                    for i in 0..node.grad.len() {
                        let g = node.grad[i];
                        head[a].grad[i] += g;
                        if a == b {
                            head[a].grad[i] += g;
                        } else {
                            head[b].grad[i] += g;
                        }
                    }
                }
                Op::Lincomb(ca, a, cb, b) => {
                    for i in 0..node.grad.len() {
                        let g = node.grad[i];
                        head[a].grad[i] += ca * g;
                        head[b].grad[i] += cb * g;
                    }
                }
                Op::AddRowBias(a, bias) => {
                    let (r, c) = dims2(&node.shape);
                    for row in 0..r {
                        for j in 0..c {
                            let g = node.grad[row * c + j];
                            head[a].grad[row * c + j] += g;
                            head[bias].grad[j] += g;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    for i in 0..node.grad.len() {
                        head[a].grad[i] += c * node.grad[i];
                    }
                }
                Op::Transpose(a) => {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    for i in 0..c {
                        for j in 0..r {
                            head[a].grad[j * c + i] += node.grad[i * r + j];
                        }
                    }
                }
                Op::SoftmaxLast(a) => {
                    let (r, c) = dims2(&node.shape);
                    for row in 0..r {
                        let y = &node.data[row * c..(row + 1) * c];
                        let dy = &node.grad[row * c..(row + 1) * c];
                        let dot: f64 = y.iter().zip(dy).map(|(yi, di)| yi * di).sum();
                        for j in 0..c {
                            head[a].grad[row * c + j] += y[j] * (dy[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (r, d) = dims2(&node.shape);
                    for row in 0..r {
                        let xs = &head[x].data[row * d..(row + 1) * d];
                        let mean = xs.iter().sum::<f64>() / d as f64;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let dy = &node.grad[row * d..(row + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (xs[j] - mean) * inv;
                            let dxh = dy[j] * head[gamma].data[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for j in 0..d {
                            let xh = (xs[j] - mean) * inv;
                            let dxh = dy[j] * head[gamma].data[j];
                            head[gamma].grad[j] += dy[j] * xh;
                            head[beta].grad[j] += dy[j];
                            head[x].grad[row * d + j] += inv
                                * (dxh - sum_dxh / d as f64 - xh * sum_dxh_xh / d as f64);
                        }
                    }
                }
                Op::Gelu(a) => {
                    for i in 0..node.grad.len() {
                        head[a].grad[i] += gelu_prime(head[a].data[i]) * node.grad[i];
                    }
                }
                Op::GatherRows { table, idx } => {
                    let d = node.shape[1];
                    for (i, &row) in idx.iter().enumerate() {
                        for j in 0..d {
                            head[table].grad[row * d + j] += node.grad[i * d + j];
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let r = node.shape[0];
                    let c = head[x].shape[1];
                    for i in 0..r {
                        for j in 0..len {
                            head[x].grad[i * c + start + j] += node.grad[i * len + j];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let r = node.shape[0];
                    let total = node.shape[1];
                    let mut off = 0;
                    for &p in &parts {
                        let c = head[p].shape[1];
                        for i in 0..r {
                            for j in 0..c {
                                head[p].grad[i * c + j] += node.grad[i * total + off + j];
                            }
                        }
                        off += c;
                    }
                }
                Op::Dropout { x, keep } => {
                    for i in 0..node.grad.len() {
                        head[x].grad[i] += keep[i] * node.grad[i];
                    }
                }
                Op::CeProbs { probs, labels } => {
                    let g = node.grad[0];
                    let (n, c) = dims2(&head[probs].shape);
                    for (row, &lab) in labels.iter().enumerate() {
                        let p = head[probs].data[row * c + lab];
                        if p > PROB_FLOOR {
                            head[probs].grad[row * c + lab] -= g / (n as f64 * p);
                        }
                    }
                }
                Op::CeLogits {
                    logits,
                    labels,
                    weights,
                } => {
                    let g = node.grad[0];
                    let (_, c) = dims2(&head[logits].shape);
                    for (row, &lab) in labels.iter().enumerate() {
                        let z = &head[logits].data[row * c..(row + 1) * c];
                        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
                        let w = weights[row] * g;
                        for j in 0..c {
                            let p = (z[j] - m).exp() / sum;
                            let t = if j == lab { 1.0 } else { 0.0 };
                            head[logits].grad[row * c + j] += w * (p - t);
                        }
                    }
                }
            }
        }
    }
}

/// Checks the tape-computed gradient of a scalar function against central
/// finite differences, coordinate by coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    let eval = |t: &Tensor| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let id = tape.leaf(t);
        let out = f(&mut tape, id)?;
        let v = tape.data(out)[0];
        if !v.is_finite() {
            return Err(TensorError::NonFinite {
                context: "grad_check objective".to_string(),
                index: 0,
            });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let id = tape.leaf(x);
    let out = f(&mut tape, id)?;
    tape.check_finite(out, "grad_check objective")?;
    tape.backward(out);
    let analytic = tape.grad(id).to_vec();

    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    Ok(compare_gradients(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn matmul_naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tape
            .leaf_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let b = tape
            .leaf_from(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.data(c), &[5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn matmul_hand_oracle() {
        let mut tape = Tape::new();
        let a = tape
            .leaf_from(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let b = tape
            .leaf_from(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, vec![5, 5]);
            let b = rand_tensor(&mut rng, vec![5, 5]);
            let mut tape = Tape::new();
            let ia = tape.leaf(&a);
            let ib = tape.leaf(&b);
            let c = tape.matmul(ia, ib).unwrap();
            let oracle = matmul_naive(&a, &b);
            for (x, y) in tape.data(c).iter().zip(&oracle) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let b = tape.leaf(&Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_tensor(&mut rng, vec![3, 3]);
        let a = rand_tensor(&mut rng, vec![3, 3]);
        let ones = Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap();
        let onesr = Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap();
        let report = grad_check(
            |tape, x| {
                let ib = tape.leaf(&b);
                let c = tape.matmul(x, ib)?;
                // sum via 1ᵀ·C·1
                let l = tape.leaf(&onesr);
                let r = tape.leaf(&ones);
                let lc = tape.matmul(l, c)?;
                tape.matmul(lc, r)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let v = tape.leaf(&Tensor::from_vec(vec![0.0; 4]));
        let s = tape.softmax(v);
        for &p in tape.data(s) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let w = tape.leaf(&Tensor::from_vec(vec![2.0_f64.ln(), 0.0]));
        let sw = tape.softmax(w);
        assert!((tape.data(sw)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((tape.data(sw)[1] - 1.0 / 3.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let c = rng.gen_range(-10.0..10.0);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let a = tape.leaf(&Tensor::from_vec(x));
            let b = tape.leaf(&Tensor::from_vec(shifted));
            let sa = tape.softmax(a);
            let sb = tape.softmax(b);
            for (p, q) in tape.data(sa).iter().zip(tape.data(sb)) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, vec![4, 6]);
            let mut tape = Tape::new();
            let id = tape.leaf(&x);
            let s = tape.softmax(id);
            for row in 0..4 {
                let sum: f64 = tape.data(s)[row * 6..(row + 1) * 6].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(tape.data(s)[row * 6..(row + 1) * 6].iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_cases() {
        let gamma = Tensor::from_vec(vec![1.0; 4]);
        let beta = Tensor::from_vec(vec![0.0; 4]);
        let mut tape = Tape::new();
        let g = tape.leaf(&gamma);
        let b = tape.leaf(&beta);

        // constant input, zero variance: eps keeps it finite, output all zero
        let x = tape.leaf(&Tensor::from_vec(vec![3.0; 4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for &v in tape.data(y) {
            assert!(v.abs() < 1e-12);
        }

        // x = [1, -1], eps = 0: already standardized
        let g2 = tape.leaf(&Tensor::from_vec(vec![1.0; 2]));
        let b2 = tape.leaf(&Tensor::from_vec(vec![0.0; 2]));
        let x2 = tape.leaf(&Tensor::from_vec(vec![1.0, -1.0]));
        let y2 = tape.layer_norm(x2, g2, b2, 0.0).unwrap();
        assert!((tape.data(y2)[0] - 1.0).abs() < 1e-12);
        assert!((tape.data(y2)[1] + 1.0).abs() < 1e-12);

        // gamma = 0 gives beta back
        let g0 = tape.leaf(&Tensor::from_vec(vec![0.0; 2]));
        let b3 = tape.leaf(&Tensor::from_vec(vec![0.5, -0.25]));
        let x3 = tape.leaf(&Tensor::from_vec(vec![7.0, 2.0]));
        let y3 = tape.layer_norm(x3, g0, b3, 1e-5).unwrap();
        assert_eq!(tape.data(y3), &[0.5, -0.25]);
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let g = tape.leaf(&Tensor::from_vec(vec![1.0; 16]));
            let b = tape.leaf(&Tensor::from_vec(vec![0.0; 16]));
            let id = tape.leaf(&Tensor::from_vec(x));
            let y = tape.layer_norm(id, g, b, 1e-10).unwrap();
            let mean: f64 = tape.data(y).iter().sum::<f64>() / 16.0;
            let var: f64 = tape.data(y).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        // probability 1 on the true class
        let mut tape = Tape::new();
        let p = tape
            .leaf_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
            .unwrap();
        let l = tape.cross_entropy(p, &[0, 1]).unwrap();
        assert!(tape.data(l)[0].abs() < 1e-12);

        // uniform rows
        for c in [200usize, 4] {
            let mut tape = Tape::new();
            let p = tape
                .leaf_from(vec![2, c], vec![1.0 / c as f64; 2 * c])
                .unwrap();
            let l = tape.cross_entropy(p, &[1, 2]).unwrap();
            assert!((tape.data(l)[0] - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let p = tape
            .leaf_from(vec![1, 3], vec![0.2, 0.3, 0.5])
            .unwrap();
        assert!(matches!(
            tape.cross_entropy(p, &[3]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn fused_and_unfused_ce_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let z = rand_tensor(&mut rng, vec![4, 5]);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let mut tape = Tape::new();
            let id = tape.leaf(&z);
            let s = tape.softmax(id);
            let unfused = tape.cross_entropy(s, &labels).unwrap();
            let fused = tape
                .cross_entropy_logits(id, &labels, &[0.25; 4])
                .unwrap();
            assert!((tape.data(unfused)[0] - tape.data(fused)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_quadratic() {
        // f(x) = x² as x·xᵀ on a 1×1 tensor; analytic 6 at x = 3
        let report = grad_check(
            |tape, id| tape.matmul_nt(id, id),
            &Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-8, "{report:?}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, vec![4, 4]);
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..4)).collect();
        let report = grad_check(
            |tape, id| {
                let s = tape.softmax(id);
                tape.cross_entropy(s, &labels)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        // rel err of 2g vs g under the max denominator is 1/2
        let g = vec![0.3, -1.7, 0.002];
        let doubled: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let report = compare_gradients(&doubled, &g);
        assert!((report.max_rel_err - 0.5).abs() < 1e-12, "{report:?}");
    }

    #[test]
    fn all_ops_pass_grad_check() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = vec![
                rng.gen_range(2..=8usize),
                rng.gen_range(2..=8usize),
            ];
            let x = rand_tensor(&mut rng, shape.clone());
            let d = shape[1];
            let other = rand_tensor(&mut rng, shape.clone());
            let gamma = rand_tensor(&mut rng, vec![d]);
            let beta = rand_tensor(&mut rng, vec![d]);
            let labels: Vec<usize> = (0..shape[0]).map(|_| rng.gen_range(0..d)).collect();
            let weights = vec![1.0 / shape[0] as f64; shape[0]];

            // composite touching every differentiable op
            let report = grad_check(
                |tape, id| {
                    let o = tape.leaf(&other);
                    let g = tape.leaf(&gamma);
                    let b = tape.leaf(&beta);
                    let ln = tape.layer_norm(id, g, b, 1e-5)?;
                    let sc = tape.matmul_nt(ln, o)?;
                    let att = tape.softmax(sc);
                    let mixed = tape.matmul(att, id)?;
                    let act = tape.gelu(mixed);
                    let h1 = tape.slice_cols(act, 0, d / 2)?;
                    let h2 = tape.slice_cols(act, d / 2, d - d / 2)?;
                    let cat = tape.concat_cols(&[h1, h2])?;
                    let bias = tape.leaf(&beta);
                    let z = tape.add_row_bias(cat, bias)?;
                    let z2 = tape.lincomb(0.5, z, 0.5, act)?;
                    tape.cross_entropy_logits(z2, &labels, &weights)
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_err <= 1e-5, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn gather_rows_grad_scatters() {
        let table = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let report = grad_check(
            |tape, id| {
                let g = tape.gather_rows(id, &[2, 0, 2])?;
                tape.cross_entropy_logits(g, &[0, 1, 0], &[0.5, 0.25, 0.25])
            },
            &table,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
