use super::params::{ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Work counters gathered while recording.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Counters {
    /// Query-key score evaluations performed by windowed attention.
    pub window_scores: u64,
    /// Query-key score evaluations performed by dense attention score matmuls.
    pub dense_scores: u64,
}

enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, F),
    MulMask(Var, Vec<F>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
        stride: usize,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    Upsample(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<F>,
        probs: Vec<F>,
    },
    WindowAttention {
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        dilation: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records executed operations in topological order for the backward pass.
///
/// Every operation appends exactly one node whose inputs were recorded
/// earlier, so a reverse sweep over the node list visits each node once
/// after all of its consumers.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    counters: Counters,
    dropout_rng: Option<SplitMix64>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Key positions attended by query `t` in a dilated window: pairs of
/// (window slot, key position) restricted to `[0, len)`.
pub fn window_keys(
    t: usize,
    len: usize,
    window: usize,
    dilation: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let half = (window / 2) as isize;
    (0..window).filter_map(move |slot| {
        let pos = t as isize + (slot as isize - half) * dilation as isize;
        (pos >= 0 && (pos as usize) < len).then_some((slot, pos as usize))
    })
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation; returns (value, derivative)
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let one = F::one();
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let value = half * x * (one + th);
    let dinner = c * (one + three * a * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * dinner;
    (value, deriv)
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
fn gemm_bt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + p] = out[i * k + p] + acc;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_at<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn acc_grad<F: Scalar>(grads: &mut [Option<Vec<F>>], len: usize, v: Var) -> &mut [F] {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            counters: Counters::default(),
            dropout_rng: None,
        }
    }

    /// A tape on which [`Tape::dropout`] is active, drawing masks from `rng`.
    pub fn training(rng: SplitMix64) -> Self {
        Self {
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, mut value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let rg = t.requires_grad;
        self.push_with(t, Op::Leaf { param: None }, rg)
    }

    /// Record an input that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_with(t, Op::Leaf { param: None }, false)
    }

    /// Bind a stored parameter. Frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let t = store.value(id).clone();
        let rg = !store.is_frozen(id);
        self.push_with(t, Op::Leaf { param: Some(id) }, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients reaching bound parameters, in recording order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[F])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => self.grads[i].as_deref().map(|g| (id, g)),
                _ => None,
            })
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).require_2d(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// Dense attention scores `a · bᵀ`, counted as query-key evaluations.
    pub fn scores(&mut self, q: Var, k: Var) -> Result<Var> {
        let kt = self.transpose(k)?;
        let s = self.matmul(q, kt)?;
        let (m, n) = self.dims2(s, "scores")?;
        self.counters.dense_scores += (m * n) as u64;
        Ok(s)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-C bias to every row of an R×C matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_row_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::shape(
                "add_row_bias",
                self.shape(x),
                self.shape(bias),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (o, &bv) in data[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let t = Tensor::new(&[r, c], data)?;
        Ok(self.push(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Inverted dropout. Identity unless the tape was created with [`Tape::training`].
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.nodes[x.0].value.len())
            .map(|_| {
                if rng.next_f64() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let t = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(t, Op::MulMask(x, mask), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis. Columns flagged in `mask` get exactly zero weight.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(m) = mask {
            if m.len() != c {
                return Err(Error::shape("softmax_masked", xv.shape(), &[m.len()]));
            }
            if m.iter().all(|&b| b) {
                return Err(Error::AllKeysMasked);
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| !m[j]);
        let mut out = vec![F::zero(); xv.len()];
        for (row, orow) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in (0..c).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum = sum + e;
            }
            for o in orow.iter_mut() {
                *o = *o / sum;
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Row-wise layer normalization followed by the affine map `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = F::from_usize(c);
        let eps = F::from_f64(EPS);
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&[r, c], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenate 2-D tensors along the channel (last) axis.
    pub fn concat_channel(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_channel")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_channel")?;
            if pr != r {
                return Err(Error::shape(
                    "concat_channel",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `[start, start + len)` of the last axis; 1-D tensors are sliced directly.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if src.shape().len() > 2 {
            return Err(Error::shape("slice_cols", src.shape(), &[start, len]));
        }
        let (r, c) = (src.rows(), src.cols());
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", src.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let shape = if src.shape().len() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(&[len, c], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// 1-D convolution over time with zero padding.
    ///
    /// `x` is T×C_in, `w` is k×C_in×C_out with odd k, `b` is C_out. Output
    /// frame j is centred on input frame `j·stride`, giving ⌈T/stride⌉ frames.
    pub fn conv1d_dilated(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
        stride: usize,
    ) -> Result<Var> {
        let (t_in, c_in) = self.dims2(x, "conv1d")?;
        let (k, wc_in, c_out) = match self.shape(w) {
            &[k, ci, co] => (k, ci, co),
            s => return Err(Error::shape("conv1d", self.shape(x), s)),
        };
        if wc_in != c_in || self.shape(b) != [c_out] {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(w)));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel must be odd for same padding, got {k}"
            )));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::Config(
                "conv1d dilation and stride must be positive".into(),
            ));
        }
        let t_out = t_in.div_ceil(stride);
        let half = (k / 2) as isize;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); t_out * c_out];
        for j in 0..t_out {
            let orow = &mut out[j * c_out..(j + 1) * c_out];
            orow.copy_from_slice(bv);
            for tap in 0..k {
                let pos = (j * stride) as isize + (tap as isize - half) * dilation as isize;
                if pos < 0 || pos as usize >= t_in {
                    continue;
                }
                let xrow = &xv[pos as usize * c_in..(pos as usize + 1) * c_in];
                for (ci, &xval) in xrow.iter().enumerate() {
                    let wrow = &wv[(tap * c_in + ci) * c_out..(tap * c_in + ci + 1) * c_out];
                    for (o, &wval) in orow.iter_mut().zip(wrow) {
                        *o = *o + xval * wval;
                    }
                }
            }
        }
        let t = Tensor::new(&[t_out, c_out], out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                dilation,
                stride,
            },
            &[x, w, b],
        ))
    }

    /// Temporal average pooling; a truncated final window averages the frames present.
    pub fn avg_pool1d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        if window == 0 || stride == 0 {
            return Err(Error::Config(
                "avg_pool1d window and stride must be positive".into(),
            ));
        }
        let (t_in, c) = self.dims2(x, "avg_pool1d")?;
        let t_out = t_in.div_ceil(stride);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); t_out * c];
        for j in 0..t_out {
            let lo = j * stride;
            let hi = (lo + window).min(t_in);
            let inv = F::one() / F::from_usize(hi - lo);
            let orow = &mut out[j * c..(j + 1) * c];
            for p in lo..hi {
                for (o, &v) in orow.iter_mut().zip(&xv[p * c..(p + 1) * c]) {
                    *o = *o + v;
                }
            }
            for o in orow.iter_mut() {
                *o = *o * inv;
            }
        }
        let t = Tensor::new(&[t_out, c], out)?;
        Ok(self.push(t, Op::AvgPool { x, window, stride }, &[x]))
    }

    /// Nearest-neighbour upsampling along time: frame t copies ⌊t·T'/target⌋.
    pub fn nn_upsample1d(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let (t_in, c) = self.dims2(x, "nn_upsample1d")?;
        if target_len < t_in {
            return Err(Error::InvalidArgument(format!(
                "nn_upsample1d cannot shrink {t_in} frames to {target_len}"
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(target_len * c);
        for t in 0..target_len {
            out.extend_from_slice(xv.row(upsample_source(t, t_in, target_len)));
        }
        let t = Tensor::new(&[target_len, c], out)?;
        Ok(self.push(t, Op::Upsample(x), &[x]))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding lookup of no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "embedding id {bad} out of range for {rows} rows"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(&[ids.len(), c], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `−Σ_rows Σ_c target·log softmax(logits)`, a scalar.
    pub fn cross_entropy_soft(&mut self, logits: Var, targets: &Tensor<F>) -> Result<Var> {
        let (r, c) = self.dims2(logits, "cross_entropy_soft")?;
        if targets.shape() != [r, c] {
            return Err(Error::shape(
                "cross_entropy_soft",
                self.shape(logits),
                targets.shape(),
            ));
        }
        let tol = F::from_f64(1e-4);
        for i in 0..r {
            let s: F = targets.row(i).iter().copied().sum();
            if (s - F::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "soft target row {i} sums to {s}, expected 1"
                )));
            }
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); r * c];
        let mut loss = F::zero();
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            for j in 0..c {
                let logp = row[j] - lse;
                probs[i * c + j] = logp.exp();
                let tgt = targets.data()[i * c + j];
                if tgt != F::zero() {
                    loss = loss - tgt * logp;
                }
            }
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.data().to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Single-head attention where query t sees keys `t + dilation·j` for
    /// `|j| ≤ (window−1)/2`, softmax-normalized over in-range keys only.
    /// Inputs are T×d; scores are scaled by 1/√d.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        dilation: usize,
    ) -> Result<Var> {
        if window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "attention window must be odd, got {window}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be positive".into()));
        }
        let (t_len, d) = self.dims2(q, "window_attention")?;
        if self.shape(k) != [t_len, d] || self.shape(v) != [t_len, d] {
            return Err(Error::shape(
                "window_attention",
                self.shape(q),
                self.shape(k),
            ));
        }
        let scale = F::one() / F::from_usize(d).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![F::zero(); t_len * window];
        let mut out = vec![F::zero(); t_len * d];
        let mut evals = 0u64;
        for t in 0..t_len {
            let qrow = &qv[t * d..(t + 1) * d];
            let prow = &mut probs[t * window..(t + 1) * window];
            let mut max = F::neg_infinity();
            for (slot, pos) in window_keys(t, t_len, window, dilation) {
                let krow = &kv[pos * d..(pos + 1) * d];
                let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<F>() * scale;
                prow[slot] = s;
                max = max.max(s);
                evals += 1;
            }
            let mut sum = F::zero();
            for (slot, _) in window_keys(t, t_len, window, dilation) {
                let e = (prow[slot] - max).exp();
                prow[slot] = e;
                sum = sum + e;
            }
            let orow = &mut out[t * d..(t + 1) * d];
            for (slot, pos) in window_keys(t, t_len, window, dilation) {
                let p = prow[slot] / sum;
                prow[slot] = p;
                for (o, &val) in orow.iter_mut().zip(&vv[pos * d..(pos + 1) * d]) {
                    *o = *o + p * val;
                }
            }
        }
        self.counters.window_scores += evals;
        let t = Tensor::new(&[t_len, d], out)?;
        Ok(self.push(
            t,
            Op::WindowAttention {
                q,
                k,
                v,
                window,
                dilation,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Reverse sweep from a single-element `loss`. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        self.backward_seeded(loss, &[F::one()])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) to every input.
    pub fn backward_seeded(&mut self, out: Var, seed: &[F]) -> Result<()> {
        if self.value(out).len() != seed.len() {
            return Err(Error::shape("backward", self.shape(out), &[seed.len()]));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[out.0] = Some(seed.to_vec());
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[F]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let size = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if needs(a) {
                    let da = acc_grad(grads, m * k, a);
                    gemm_bt(g, val(b).data(), m, n, k, da);
                }
                if needs(b) {
                    let db = acc_grad(grads, k * n, b);
                    gemm_at(val(a).data(), g, m, k, n, db);
                }
            }
            &Op::Transpose(x) => {
                if needs(x) {
                    let (r, c) = (val(x).rows(), val(x).cols());
                    let dx = acc_grad(grads, r * c, x);
                    for p in 0..r {
                        for q in 0..c {
                            dx[p * c + q] = dx[p * c + q] + g[q * r + p];
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        let dv = acc_grad(grads, g.len(), v);
                        dv.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
            }
            &Op::AddRowBias(x, b) => {
                if needs(x) {
                    let dx = acc_grad(grads, g.len(), x);
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi);
                }
                if needs(b) {
                    let c = size(b);
                    let db = acc_grad(grads, c, b);
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
            }
            &Op::Scale(x, s) => {
                if needs(x) {
                    let dx = acc_grad(grads, g.len(), x);
                    dx.iter_mut().zip(g).for_each(|(d, &gi)| *d = *d + gi * s);
                }
            }
            Op::MulMask(x, mask) => {
                let x = *x;
                if needs(x) {
                    let dx = acc_grad(grads, g.len(), x);
                    for ((d, &gi), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gi * m;
                    }
                }
            }
            &Op::Gelu(x) => {
                if needs(x) {
                    let xv = val(x).data();
                    let dx = acc_grad(grads, g.len(), x);
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * gelu_parts(xi).1;
                    }
                }
            }
            &Op::Softmax(x) => {
                if needs(x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let dx = acc_grad(grads, g.len(), x);
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let c = node.value.cols();
                let r = node.value.rows();
                if needs(gamma) {
                    let dgm = acc_grad(grads, c, gamma);
                    for i in 0..r {
                        for j in 0..c {
                            dgm[j] = dgm[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if needs(beta) {
                    let db = acc_grad(grads, c, beta);
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
                if needs(x) {
                    let gm = val(gamma).data();
                    let n = F::from_usize(c);
                    let dx = acc_grad(grads, r * c, x);
                    for i in 0..r {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for j in 0..c {
                            let dh = g[i * c + j] * gm[j];
                            mean_d = mean_d + dh;
                            mean_dx = mean_dx + dh * xhat[i * c + j];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for j in 0..c {
                            let dh = g[i * c + j] * gm[j];
                            dx[i * c + j] =
                                dx[i * c + j] + rstd[i] * (dh - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    if needs(p) {
                        let r = val(p).rows();
                        let dp = acc_grad(grads, r * pc, p);
                        for i in 0..r {
                            let src = &g[i * total + offset..i * total + offset + pc];
                            dp[i * pc..(i + 1) * pc]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &gi)| *d = *d + gi);
                        }
                    }
                    offset += pc;
                }
            }
            &Op::SliceCols { x, start } => {
                if needs(x) {
                    let len = node.value.cols();
                    let (r, c) = (val(x).rows(), val(x).cols());
                    let dx = acc_grad(grads, r * c, x);
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
            }
            &Op::SliceRows { x, start } => {
                if needs(x) {
                    let c = val(x).cols();
                    let dx = acc_grad(grads, size(x), x);
                    dx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gi)| *d = *d + gi);
                }
            }
            &Op::Conv1d {
                x,
                w,
                b,
                dilation,
                stride,
            } => {
                let (t_in, c_in) = (val(x).rows(), val(x).cols());
                let (k, c_out) = (val(w).shape()[0], val(w).shape()[2]);
                let t_out = node.value.rows();
                let half = (k / 2) as isize;
                if needs(b) {
                    let db = acc_grad(grads, c_out, b);
                    for row in g.chunks(c_out) {
                        db.iter_mut().zip(row).for_each(|(d, &gi)| *d = *d + gi);
                    }
                }
                let taps = |j: usize| {
                    (0..k).filter_map(move |tap| {
                        let pos = (j * stride) as isize + (tap as isize - half) * dilation as isize;
                        (pos >= 0 && (pos as usize) < t_in).then_some((tap, pos as usize))
                    })
                };
                if needs(w) {
                    let xv = val(x).data();
                    let dw = acc_grad(grads, k * c_in * c_out, w);
                    for j in 0..t_out {
                        let grow = &g[j * c_out..(j + 1) * c_out];
                        for (tap, pos) in taps(j) {
                            for ci in 0..c_in {
                                let xval = xv[pos * c_in + ci];
                                let base = (tap * c_in + ci) * c_out;
                                for (d, &gi) in dw[base..base + c_out].iter_mut().zip(grow) {
                                    *d = *d + xval * gi;
                                }
                            }
                        }
                    }
                }
                if needs(x) {
                    let wv = val(w).data();
                    let dx = acc_grad(grads, t_in * c_in, x);
                    for j in 0..t_out {
                        let grow = &g[j * c_out..(j + 1) * c_out];
                        for (tap, pos) in taps(j) {
                            for ci in 0..c_in {
                                let base = (tap * c_in + ci) * c_out;
                                let s: F = wv[base..base + c_out]
                                    .iter()
                                    .zip(grow)
                                    .map(|(&a, &b)| a * b)
                                    .sum();
                                dx[pos * c_in + ci] = dx[pos * c_in + ci] + s;
                            }
                        }
                    }
                }
            }
            &Op::AvgPool { x, window, stride } => {
                if needs(x) {
                    let (t_in, c) = (val(x).rows(), val(x).cols());
                    let dx = acc_grad(grads, t_in * c, x);
                    for j in 0..node.value.rows() {
                        let lo = j * stride;
                        let hi = (lo + window).min(t_in);
                        let inv = F::one() / F::from_usize(hi - lo);
                        for p in lo..hi {
                            for ch in 0..c {
                                dx[p * c + ch] = dx[p * c + ch] + g[j * c + ch] * inv;
                            }
                        }
                    }
                }
            }
            &Op::Upsample(x) => {
                if needs(x) {
                    let (t_in, c) = (val(x).rows(), val(x).cols());
                    let target = node.value.rows();
                    let dx = acc_grad(grads, t_in * c, x);
                    for t in 0..target {
                        let s = upsample_source(t, t_in, target);
                        for ch in 0..c {
                            dx[s * c + ch] = dx[s * c + ch] + g[t * c + ch];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if needs(table) {
                    let c = val(table).cols();
                    let dt = acc_grad(grads, size(table), table);
                    for (r, &id) in ids.iter().enumerate() {
                        for ch in 0..c {
                            dt[id * c + ch] = dt[id * c + ch] + g[r * c + ch];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if needs(logits) {
                    let c = val(logits).cols();
                    let g0 = g[0];
                    let dl = acc_grad(grads, probs.len(), logits);
                    for ((dr, pr), tr) in
                        dl.chunks_mut(c).zip(probs.chunks(c)).zip(targets.chunks(c))
                    {
                        let mass: F = tr.iter().copied().sum();
                        for j in 0..c {
                            dr[j] = dr[j] + g0 * (pr[j] * mass - tr[j]);
                        }
                    }
                }
            }
            Op::WindowAttention {
                q,
                k,
                v,
                window,
                dilation,
                probs,
            } => {
                let (q, k, v, window, dilation) = (*q, *k, *v, *window, *dilation);
                let (t_len, d) = (val(q).rows(), val(q).cols());
                let scale = F::one() / F::from_usize(d).sqrt();
                let (qv, kv, vv) = (val(q).data(), val(k).data(), val(v).data());
                let mut dq = vec![F::zero(); t_len * d];
                let mut dk = vec![F::zero(); t_len * d];
                let mut dv = vec![F::zero(); t_len * d];
                let mut dp = vec![F::zero(); window];
                for t in 0..t_len {
                    let grow = &g[t * d..(t + 1) * d];
                    let prow = &probs[t * window..(t + 1) * window];
                    let mut dot = F::zero();
                    for (slot, pos) in window_keys(t, t_len, window, dilation) {
                        let vrow = &vv[pos * d..(pos + 1) * d];
                        dp[slot] = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                        dot = dot + dp[slot] * prow[slot];
                        for (dvv, &gi) in dv[pos * d..(pos + 1) * d].iter_mut().zip(grow) {
                            *dvv = *dvv + prow[slot] * gi;
                        }
                    }
                    for (slot, pos) in window_keys(t, t_len, window, dilation) {
                        let ds = prow[slot] * (dp[slot] - dot) * scale;
                        for c in 0..d {
                            dq[t * d + c] = dq[t * d + c] + ds * kv[pos * d + c];
                            dk[pos * d + c] = dk[pos * d + c] + ds * qv[t * d + c];
                        }
                    }
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if needs(var) {
                        let dst = acc_grad(grads, t_len * d, var);
                        dst.iter_mut().zip(&buf).for_each(|(a, &b)| *a = *a + b);
                    }
                }
            }
        }
    }
}

/// Source frame for nearest-neighbour upsampling of `from` frames to `to` frames.
pub fn upsample_source(t: usize, from: usize, to: usize) -> usize {
    t * from / to
}
