//! Dense 2-D tensors with reverse-mode differentiation on a per-step tape.
//!
//! All quantities in this crate are matrices (scalars are 1x1). A `Tape`
//! records every forward op; `backward` replays the tape in reverse and
//! accumulates gradients for leaves marked `requires_grad`. The tape is
//! rebuilt for every training step; nothing persists across steps.
//!
//! Two precisions: f32 for training, f64 for gradient verification. All
//! ops check their outputs for NaN/Inf and fail rather than propagate.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::iter::Sum;

/// Scalar type parameter: f32 for training, f64 for verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + Copy
    + Default
    + Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE_TAG: u8;
    const BYTES: usize;
    fn fp(x: f64) -> Self;
    fn dbl(self) -> f64;
    fn write_le(self, buf: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE_TAG: u8 = 0;
    const BYTES: usize = 4;
    fn fp(x: f64) -> Self {
        x as f32
    }
    fn dbl(self) -> f64 {
        self as f64
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE_TAG: u8 = 1;
    const BYTES: usize = 8;
    fn fp(x: f64) -> Self {
        x
    }
    fn dbl(self) -> f64 {
        self
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

/// Epsilon in layer-norm denominators.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Floor applied to teacher probabilities inside KL.
pub const KL_TEACHER_EPS: f64 = 1e-9;

pub type TensorId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Leaf,
    Matmul { a: TensorId, b: TensorId, trans_b: bool },
    Add { a: TensorId, b: TensorId },
    Scale { a: TensorId, k: F },
    SoftmaxRows { a: TensorId },
    LayerNormRows { a: TensorId, gain: TensorId, bias: TensorId },
    Gelu { a: TensorId },
    Gather { table: TensorId, ids: Vec<usize> },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    CrossEntropy { logits: TensorId, targets: Vec<usize>, mask: Vec<bool> },
    KlDivRows { student_probs: TensorId, teacher: Vec<F> },
}

struct Node<F: Scalar> {
    shape: Shape,
    data: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. Single-writer: built, run, and dropped by one thread.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    /// Number of teacher entries clamped to `KL_TEACHER_EPS` while the
    /// student put mass there.
    pub kl_clamped: usize,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), kl_clamped: 0 }
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.nodes[id].data
    }

    pub fn scalar(&self, id: TensorId) -> F {
        debug_assert_eq!(self.nodes[id].shape.numel(), 1);
        self.nodes[id].data[0]
    }

    fn push(&mut self, shape: Shape, data: Vec<F>, op: Op<F>, requires_grad: bool) -> Result<TensorId> {
        debug_assert_eq!(shape.numel(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { shape, data, op, requires_grad });
        Ok(self.nodes.len() - 1)
    }

    /// Register a leaf tensor. `requires_grad` marks it for gradient
    /// accumulation during `backward`.
    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<F>, requires_grad: bool) -> Result<TensorId> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("{}x{} vs {} values", rows, cols, data.len()),
            });
        }
        self.push(Shape { rows, cols }, data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Result<TensorId> {
        self.leaf(rows, cols, data, false)
    }

    /// C = A·B, or A·Bᵀ when `trans_b`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bk, bn) = if trans_b { (sb.cols, sb.rows) } else { (sb.rows, sb.cols) };
        if sa.cols != bk {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{} (trans_b={})", sa.rows, sa.cols, sb.rows, sb.cols, trans_b),
            });
        }
        let mut out = vec![F::zero(); sa.rows * bn];
        matmul_into(&self.nodes[a].data, sa, &self.nodes[b].data, sb, trans_b, &mut out);
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(Shape { rows: sa.rows, cols: bn }, out, Op::Matmul { a, b, trans_b }, rg)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{}x{} + {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            });
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        self.push(sa, data, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, a: TensorId, k: F) -> Result<TensorId> {
        let sa = self.shape(a);
        let data = self.nodes[a].data.iter().map(|&x| x * k).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(sa, data, Op::Scale { a, k }, rg)
    }

    /// Row-wise softmax, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let mut data = vec![F::zero(); sa.numel()];
        for r in 0..sa.rows {
            let row = &self.nodes[a].data[r * sa.cols..(r + 1) * sa.cols];
            softmax_into(row, &mut data[r * sa.cols..(r + 1) * sa.cols]);
        }
        let rg = self.nodes[a].requires_grad;
        self.push(sa, data, Op::SoftmaxRows { a }, rg)
    }

    /// Row-wise layer norm with affine gain/bias (1 x cols each).
    pub fn layer_norm_rows(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        for (name, t) in [("gain", gain), ("bias", bias)] {
            let st = self.shape(t);
            if st.rows != 1 || st.cols != sa.cols {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!("{} is {}x{}, want 1x{}", name, st.rows, st.cols, sa.cols),
                });
            }
        }
        let eps = F::fp(LAYER_NORM_EPS);
        let n = F::from_usize(sa.cols).unwrap();
        let mut data = vec![F::zero(); sa.numel()];
        for r in 0..sa.rows {
            let row = &self.nodes[a].data[r * sa.cols..(r + 1) * sa.cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let inv = (var + eps).sqrt().recip();
            for c in 0..sa.cols {
                let xhat = (row[c] - mean) * inv;
                data[r * sa.cols + c] = self.nodes[gain].data[c] * xhat + self.nodes[bias].data[c];
            }
        }
        let rg = self.nodes[a].requires_grad || self.nodes[gain].requires_grad || self.nodes[bias].requires_grad;
        self.push(sa, data, Op::LayerNormRows { a, gain, bias }, rg)
    }

    /// Tanh-approximated GELU (smooth everywhere, safe for finite differences).
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        let data = self.nodes[a].data.iter().map(|&x| gelu_fwd(x)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(sa, data, Op::Gelu { a }, rg)
    }

    /// Gather rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= st.rows) {
            return Err(Error::TargetOutOfVocab { id: bad, vocab: st.rows });
        }
        let mut data = Vec::with_capacity(ids.len() * st.cols);
        for &i in ids {
            data.extend_from_slice(&self.nodes[table].data[i * st.cols..(i + 1) * st.cols]);
        }
        let rg = self.nodes[table].requires_grad;
        self.push(Shape { rows: ids.len(), cols: st.cols }, data, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Stack parts vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let cols = self.shape(parts[0]).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let sp = self.shape(p);
            if sp.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("cols {} vs {}", sp.cols, cols),
                });
            }
            rows += sp.rows;
            data.extend_from_slice(&self.nodes[p].data);
            rg |= self.nodes[p].requires_grad;
        }
        self.push(Shape { rows, cols }, data, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if start + len > sa.rows {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("[{start}..{}] of {} rows", start + len, sa.rows),
            });
        }
        let data = self.nodes[a].data[start * sa.cols..(start + len) * sa.cols].to_vec();
        let rg = self.nodes[a].requires_grad;
        self.push(Shape { rows: len, cols: sa.cols }, data, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if start + len > sa.cols {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{start}..{}] of {} cols", start + len, sa.cols),
            });
        }
        let mut data = Vec::with_capacity(sa.rows * len);
        for r in 0..sa.rows {
            data.extend_from_slice(&self.nodes[a].data[r * sa.cols + start..r * sa.cols + start + len]);
        }
        let rg = self.nodes[a].requires_grad;
        self.push(Shape { rows: sa.rows, cols: len }, data, Op::SliceCols { a, start }, rg)
    }

    /// Mean over masked positions of -log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[usize], mask: &[bool]) -> Result<TensorId> {
        let sl = self.shape(logits);
        if targets.len() != sl.rows || mask.len() != sl.rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} logit rows, {} targets, {} mask bits", sl.rows, targets.len(), mask.len()),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyMask);
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= sl.cols) {
            return Err(Error::TargetOutOfVocab { id: bad, vocab: sl.cols });
        }
        let m = F::from_usize(mask.iter().filter(|&&b| b).count()).unwrap();
        let mut total = F::zero();
        for r in 0..sl.rows {
            if !mask[r] {
                continue;
            }
            let row = &self.nodes[logits].data[r * sl.cols..(r + 1) * sl.cols];
            total += log_sum_exp(row) - row[targets[r]];
        }
        let val = total / m;
        self.push(
            Shape { rows: 1, cols: 1 },
            vec![val],
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            self.nodes[logits].requires_grad,
        )
    }

    /// Sum over rows of KL(student ‖ teacher). Student rows are probabilities
    /// (normally a `softmax_rows` output); the teacher is detached. Teacher
    /// entries below `KL_TEACHER_EPS` are clamped and counted in
    /// `self.kl_clamped` when the student carries mass there.
    pub fn kl_div_rows(&mut self, student_probs: TensorId, teacher: &[F]) -> Result<TensorId> {
        let ss = self.shape(student_probs);
        if teacher.len() != ss.numel() {
            return Err(Error::ShapeMismatch {
                op: "kl_divergence",
                detail: format!("student {} entries, teacher {}", ss.numel(), teacher.len()),
            });
        }
        let eps = F::fp(KL_TEACHER_EPS);
        let mut total = F::zero();
        for (i, (&s, &t)) in self.nodes[student_probs].data.iter().zip(teacher).enumerate() {
            let _ = i;
            if s <= F::zero() {
                continue;
            }
            let tc = if t < eps {
                if t <= F::zero() {
                    self.kl_clamped += 1;
                }
                eps
            } else {
                t
            };
            total += s * (s.ln() - tc.ln());
        }
        let rg = self.nodes[student_probs].requires_grad;
        self.push(
            Shape { rows: 1, cols: 1 },
            vec![total],
            Op::KlDivRows { student_probs, teacher: teacher.to_vec() },
            rg,
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every
    /// `requires_grad` leaf, keyed by tensor id.
    pub fn backward(&self, root: TensorId) -> Result<BTreeMap<TensorId, Vec<F>>> {
        if self.nodes[root].shape.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: "root must be scalar".into(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![F::one()]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                // nothing upstream wants this gradient
                if matches!(self.nodes[id].op, Op::Leaf) {
                    continue;
                }
                continue;
            }
            self.backward_node(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let mut out = BTreeMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            if let (Some(g), true) = (g, matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out.insert(id, g);
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Vec<F>>], id: TensorId, delta: &[F]) {
        match &mut grads[id] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi += d;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn backward_node(&self, id: TensorId, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[id];
        let s = node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if self.nodes[*a].requires_grad {
                    // dA = dC·Bᵀ (or dC·B when trans_b)
                    let mut da = vec![F::zero(); sa.numel()];
                    matmul_into(g, s, &self.nodes[*b].data, sb, !trans_b, &mut da);
                    Self::accumulate(grads, *a, &da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![F::zero(); sb.numel()];
                    if *trans_b {
                        // C = A·Bᵀ → dB = dCᵀ·A
                        matmul_t_into(g, s, &self.nodes[*a].data, sa, &mut db);
                    } else {
                        // dB = Aᵀ·dC
                        matmul_t_into(&self.nodes[*a].data, sa, g, s, &mut db);
                    }
                    Self::accumulate(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.nodes[*a].requires_grad {
                    Self::accumulate(grads, *a, g);
                }
                if self.nodes[*b].requires_grad {
                    Self::accumulate(grads, *b, g);
                }
            }
            Op::Scale { a, k } => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<F> = g.iter().map(|&x| x * *k).collect();
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.nodes[*a].requires_grad {
                    let mut da = vec![F::zero(); s.numel()];
                    for r in 0..s.rows {
                        let y = &node.data[r * s.cols..(r + 1) * s.cols];
                        let gy = &g[r * s.cols..(r + 1) * s.cols];
                        let dot: F = y.iter().zip(gy).map(|(&yi, &gi)| yi * gi).sum();
                        for c in 0..s.cols {
                            da[r * s.cols + c] = y[c] * (gy[c] - dot);
                        }
                    }
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::LayerNormRows { a, gain, bias } => {
                let sa = self.shape(*a);
                let eps = F::fp(LAYER_NORM_EPS);
                let n = F::from_usize(sa.cols).unwrap();
                let mut da = vec![F::zero(); sa.numel()];
                let mut dgain = vec![F::zero(); sa.cols];
                let mut dbias = vec![F::zero(); sa.cols];
                for r in 0..sa.rows {
                    let row = &self.nodes[*a].data[r * sa.cols..(r + 1) * sa.cols];
                    let gy = &g[r * sa.cols..(r + 1) * sa.cols];
                    let mean = row.iter().copied().sum::<F>() / n;
                    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
                    let inv = (var + eps).sqrt().recip();
                    let mut mean_gdy = F::zero();
                    let mut mean_gdy_xhat = F::zero();
                    let mut xhat = vec![F::zero(); sa.cols];
                    for c in 0..sa.cols {
                        xhat[c] = (row[c] - mean) * inv;
                        let gd = self.nodes[*gain].data[c] * gy[c];
                        mean_gdy += gd;
                        mean_gdy_xhat += gd * xhat[c];
                        dgain[c] += gy[c] * xhat[c];
                        dbias[c] += gy[c];
                    }
                    mean_gdy /= n;
                    mean_gdy_xhat /= n;
                    for c in 0..sa.cols {
                        let gd = self.nodes[*gain].data[c] * gy[c];
                        da[r * sa.cols + c] = (gd - mean_gdy - xhat[c] * mean_gdy_xhat) * inv;
                    }
                }
                if self.nodes[*a].requires_grad {
                    Self::accumulate(grads, *a, &da);
                }
                if self.nodes[*gain].requires_grad {
                    Self::accumulate(grads, *gain, &dgain);
                }
                if self.nodes[*bias].requires_grad {
                    Self::accumulate(grads, *bias, &dbias);
                }
            }
            Op::Gelu { a } => {
                if self.nodes[*a].requires_grad {
                    let da: Vec<F> = self.nodes[*a]
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&x, &gy)| gelu_bwd(x) * gy)
                        .collect();
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::Gather { table, ids } => {
                if self.nodes[*table].requires_grad {
                    let st = self.shape(*table);
                    let mut dt = vec![F::zero(); st.numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..st.cols {
                            dt[i * st.cols + c] += g[r * st.cols + c];
                        }
                    }
                    Self::accumulate(grads, *table, &dt);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let sp = self.shape(p);
                    if self.nodes[p].requires_grad {
                        Self::accumulate(grads, p, &g[offset..offset + sp.numel()]);
                    }
                    offset += sp.numel();
                }
            }
            Op::SliceRows { a, start } => {
                if self.nodes[*a].requires_grad {
                    let sa = self.shape(*a);
                    let mut da = vec![F::zero(); sa.numel()];
                    da[start * sa.cols..start * sa.cols + g.len()].copy_from_slice(g);
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::SliceCols { a, start } => {
                if self.nodes[*a].requires_grad {
                    let sa = self.shape(*a);
                    let mut da = vec![F::zero(); sa.numel()];
                    for r in 0..s.rows {
                        for c in 0..s.cols {
                            da[r * sa.cols + start + c] = g[r * s.cols + c];
                        }
                    }
                    Self::accumulate(grads, *a, &da);
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                if self.nodes[*logits].requires_grad {
                    let sl = self.shape(*logits);
                    let m = F::from_usize(mask.iter().filter(|&&b| b).count()).unwrap();
                    let scale = g[0] / m;
                    let mut dl = vec![F::zero(); sl.numel()];
                    for r in 0..sl.rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = &self.nodes[*logits].data[r * sl.cols..(r + 1) * sl.cols];
                        let out = &mut dl[r * sl.cols..(r + 1) * sl.cols];
                        softmax_into(row, out);
                        for v in out.iter_mut() {
                            *v *= scale;
                        }
                        out[targets[r]] -= scale;
                    }
                    Self::accumulate(grads, *logits, &dl);
                }
            }
            Op::KlDivRows { student_probs, teacher } => {
                if self.nodes[*student_probs].requires_grad {
                    let eps = F::fp(KL_TEACHER_EPS);
                    let da: Vec<F> = self.nodes[*student_probs]
                        .data
                        .iter()
                        .zip(teacher)
                        .map(|(&sv, &t)| {
                            if sv <= F::zero() {
                                F::zero()
                            } else {
                                let tc = if t < eps { eps } else { t };
                                g[0] * (sv.ln() - tc.ln() + F::one())
                            }
                        })
                        .collect();
                    Self::accumulate(grads, *student_probs, &da);
                }
            }
        }
        Ok(())
    }
}

fn op_name<F: Scalar>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::SoftmaxRows { .. } => "softmax",
        Op::LayerNormRows { .. } => "layer_norm",
        Op::Gelu { .. } => "gelu",
        Op::Gather { .. } => "embedding_lookup",
        Op::ConcatRows { .. } => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::KlDivRows { .. } => "kl_divergence",
    }
}

/// out += A·B (or A·Bᵀ). `out` must be zeroed by the caller.
fn matmul_into<F: Scalar>(a: &[F], sa: Shape, b: &[F], sb: Shape, trans_b: bool, out: &mut [F]) {
    if trans_b {
        // (m x k) · (n x k)ᵀ = m x n
        let (m, k, n) = (sa.rows, sa.cols, sb.rows);
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut acc = F::zero();
                for p in 0..k {
                    acc += ar[p] * br[p];
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        let (m, k, n) = (sa.rows, sa.cols, sb.cols);
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            let or = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ar[p];
                if av == F::zero() {
                    continue;
                }
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    or[j] += av * br[j];
                }
            }
        }
    }
}

/// out += Aᵀ·B where A is (r x m) and B is (r x n): result m x n.
fn matmul_t_into<F: Scalar>(a: &[F], sa: Shape, b: &[F], sb: Shape, out: &mut [F]) {
    debug_assert_eq!(sa.rows, sb.rows);
    let (r, m, n) = (sa.rows, sa.cols, sb.cols);
    for p in 0..r {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ar[i];
            if av == F::zero() {
                continue;
            }
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
}

pub fn softmax_into<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let half = F::fp(0.5);
    let c = F::fp(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::fp(0.044715);
    let inner = c * (x + k * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let half = F::fp(0.5);
    let c = F::fp(0.797_884_560_802_865_4);
    let k = F::fp(0.044715);
    let three = F::fp(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution<F: Scalar> {
    pub probs: Vec<F>,
}

impl<F: Scalar> TokenDistribution<F> {
    pub fn from_logits(logits: &[F]) -> Self {
        let mut probs = vec![F::zero(); logits.len()];
        softmax_into(logits, &mut probs);
        TokenDistribution { probs }
    }

    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|&p| p < F::zero() || !p.is_finite()) {
            return Err(Error::NonFinite { op: "token_distribution" });
        }
        let sum = self.probs.iter().copied().sum::<F>().dbl();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Config(format!("distribution sums to {sum}")));
        }
        Ok(())
    }
}

/// KL(student ‖ teacher) in nats, teacher clamped at `KL_TEACHER_EPS`.
/// Returns the value and whether any clamping happened where the student
/// carries mass.
pub fn kl_divergence<F: Scalar>(student: &TokenDistribution<F>, teacher: &TokenDistribution<F>) -> (F, bool) {
    let eps = F::fp(KL_TEACHER_EPS);
    let mut total = F::zero();
    let mut clamped = false;
    for (&s, &t) in student.probs.iter().zip(&teacher.probs) {
        if s <= F::zero() {
            continue;
        }
        let tc = if t < eps {
            if t <= F::zero() {
                clamped = true;
            }
            eps
        } else {
            t
        };
        total += s * (s.ln() - tc.ln());
    }
    (total, clamped)
}

/// Max relative error of an analytic gradient against central finite
/// differences, over the given coordinates of a flat parameter vector.
/// `loss_fn` must be deterministic; this is verified with a repeated call.
pub fn gradient_check<E>(
    mut loss_fn: E,
    params: &mut Vec<f64>,
    analytic: &[f64],
    coords: &[usize],
    epsilon: f64,
) -> Result<f64>
where
    E: FnMut(&[f64]) -> Result<f64>,
{
    let l0 = loss_fn(params)?;
    let l1 = loss_fn(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic { a: l0, b: l1 });
    }
    let mut max_rel = 0.0f64;
    for &c in coords {
        let orig = params[c];
        params[c] = orig + epsilon;
        let plus = loss_fn(params)?;
        params[c] = orig - epsilon;
        let minus = loss_fn(params)?;
        params[c] = orig;
        let fd = (plus - minus) / (2.0 * epsilon);
        let ad = analytic[c];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn softmax_vec(x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        softmax_into(x, &mut out);
        out
    }

    #[test]
    fn softmax_symmetry() {
        assert_eq!(softmax_vec(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut t: Tape<f64> = Tape::new();
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = t.matmul(i2, m, false).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn layer_norm_zero_variance() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(1, 4, vec![1.0; 4]).unwrap();
        let g = t.constant(1, 4, vec![1.0; 4]).unwrap();
        let b = t.constant(1, 4, vec![0.0; 4]).unwrap();
        let y = t.layer_norm_rows(x, g, b).unwrap();
        for &v in t.data(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn cross_entropy_uniform_two() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let l = t.cross_entropy(logits, &[0], &[true]).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_peaked_is_tiny() {
        // oracle: -ln(sigmoid(20)) = ln(1 + e^-20) ≈ 2.06e-9 < 1e-6
        let mut t: Tape<f64> = Tape::new();
        let logits = t.constant(1, 2, vec![20.0, 0.0]).unwrap();
        let l = t.cross_entropy(logits, &[0], &[true]).unwrap();
        let oracle = (1.0 + (-20.0f64).exp()).ln();
        assert!((t.scalar(l) - oracle).abs() < 1e-12);
        assert!(t.scalar(l) < 1e-6);
    }

    #[test]
    fn cross_entropy_mask_semantics() {
        let mut t: Tape<f64> = Tape::new();
        let two = t.constant(2, 3, vec![1.0, 2.0, 3.0, 9.0, 9.0, 9.0]).unwrap();
        let masked = t.cross_entropy(two, &[1, 0], &[true, false]).unwrap();
        let one = t.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let single = t.cross_entropy(one, &[1], &[true]).unwrap();
        assert_eq!(t.scalar(masked), t.scalar(single));
    }

    #[test]
    fn cross_entropy_empty_mask_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(t.cross_entropy(logits, &[0], &[false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn cross_entropy_target_out_of_vocab() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            t.cross_entropy(logits, &[5], &[true]),
            Err(Error::TargetOutOfVocab { .. })
        ));
    }

    #[test]
    fn kl_self_divergence_is_zero() {
        let p = TokenDistribution { probs: vec![0.1, 0.2, 0.7] };
        let (v, clamped) = kl_divergence(&p, &p);
        assert_eq!(v, 0.0);
        assert!(!clamped);
    }

    #[test]
    fn kl_reference_value() {
        // direct summation oracle:
        // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) = 0.5 ln 2 - 0.5 ln 1.5
        let s = TokenDistribution { probs: vec![0.5, 0.5] };
        let t = TokenDistribution { probs: vec![0.25, 0.75] };
        let oracle = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let (v, _) = kl_divergence(&s, &t);
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.1438).abs() < 1e-4);
    }

    #[test]
    fn kl_zero_teacher_clamped_and_flagged() {
        let s = TokenDistribution::<f64> { probs: vec![0.5, 0.5] };
        let t = TokenDistribution { probs: vec![1.0, 0.0] };
        let (v, clamped) = kl_divergence(&s, &t);
        assert!(clamped);
        assert!(v > 0.0 && v.is_finite());
    }

    #[test]
    fn gradient_check_quadratic() {
        let mut params = vec![3.0f64];
        let loss = |p: &[f64]| Ok(p[0] * p[0]);
        let analytic = vec![6.0];
        let err = gradient_check(loss, &mut params, &analytic, &[0], 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn gradient_check_detects_nondeterminism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let loss = |_: &[f64]| {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        let mut params = vec![1.0];
        assert!(matches!(
            gradient_check(loss, &mut params, &[0.0], &[0], 1e-5),
            Err(Error::NonDeterministic { .. })
        ));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let frozen = t.leaf(1, 2, vec![1.0, 2.0], false).unwrap();
        let live = t.leaf(1, 2, vec![3.0, 4.0], true).unwrap();
        let sum = t.add(frozen, live).unwrap();
        let loss = t.cross_entropy(sum, &[0], &[true]).unwrap();
        let grads = t.backward(loss).unwrap();
        assert!(grads.contains_key(&live));
        assert!(!grads.contains_key(&frozen));
    }

    /// Mechanical finite-difference sweep over every op used by the model.
    #[test]
    fn op_gradients_match_finite_differences() {
        let build = |p: &[f64]| -> Result<(f64, Vec<f64>, TensorId)> {
            let mut t: Tape<f64> = Tape::new();
            let w = t.leaf(3, 4, p[..12].to_vec(), true)?;
            let g = t.leaf(1, 4, p[12..16].to_vec(), true)?;
            let b = t.leaf(1, 4, p[16..20].to_vec(), true)?;
            let x = t.gather(w, &[0, 2, 1])?;
            let ln = t.layer_norm_rows(x, g, b)?;
            let h = t.gelu(ln)?;
            let prod = t.matmul(h, w, true)?; // 3x3
            let sm = t.softmax_rows(prod)?;
            let sl = t.slice_rows(sm, 1, 2)?;
            let sc = t.slice_cols(sl, 0, 2)?;
            let cat = t.concat_rows(&[sc, sc])?;
            let scaled = t.scale(cat, 1.7)?;
            let ce_cat = t.cross_entropy(scaled, &[0, 1, 0, 1], &[true, true, true, true])?;
            let ce = t.cross_entropy(prod, &[0, 1, 2], &[true, true, false])?;
            let probs = t.softmax_rows(prod)?;
            let kl = t.kl_div_rows(probs, &vec![1.0 / 3.0; 9])?;
            let kl_s = t.scale(kl, 0.5)?;
            let partial = t.add(ce, kl_s)?;
            let loss = t.add(partial, ce_cat)?;
            let val = t.scalar(loss);
            let grads = t.backward(loss)?;
            let mut flat = vec![0.0; 20];
            flat[..12].copy_from_slice(&grads[&w]);
            flat[12..16].copy_from_slice(&grads[&g]);
            flat[16..20].copy_from_slice(&grads[&b]);
            Ok((val, flat, loss))
        };
        let mut params: Vec<f64> = (0..20).map(|i| ((i as f64) * 0.37).sin() * 0.8).collect();
        let (_, analytic, _) = build(&params).unwrap();
        let coords: Vec<usize> = (0..20).collect();
        let err = gradient_check(|p| build(p).map(|r| r.0), &mut params, &analytic, &coords, 1e-6).unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = t.constant(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(t.matmul(a, b, false), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in proptest::collection::vec(-1e4f64..1e4, 1..32)) {
            let p = softmax_vec(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn kl_nonnegative(sl in proptest::collection::vec(0.01f64..10.0, 2..16),
                          tl in proptest::collection::vec(0.01f64..10.0, 2..16)) {
            let n = sl.len().min(tl.len());
            let s = TokenDistribution::from_logits(&sl[..n]);
            let t = TokenDistribution::from_logits(&tl[..n]);
            let (v, _) = kl_divergence(&s, &t);
            prop_assert!(v >= -1e-12);
            let (self_v, _) = kl_divergence(&s, &s);
            prop_assert_eq!(self_v, 0.0);
        }
    }
}
