//! Multi-scale temporal attention.
//!
//! The local branch runs sliding-window self-attention where each group of
//! heads samples its window with a different dilation (temporal pyramid
//! dilation). Every query still scores exactly `window` keys, so widening
//! the receptive field costs nothing extra.
//!
//! The global branch keeps full-resolution queries but average-pools keys
//! and values at one rate per head group (temporal pyramid pooling), cutting
//! the quadratic score matrix by the pool rate.

use crate::error::{Error, Result};
use crate::nn::{FeedForward, Linear, Norm};
use crate::rng::SplitMix64;
use crate::tensor::{ParamStore, Scalar, Tape, Var};

/// Per-head receptive-field setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadScale {
    Dilation(usize),
    PoolRate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSpec {
    pub head_dim: usize,
    pub scale: HeadScale,
}

/// Rate assigned to head `h` when `num_heads` heads are split evenly over `rates`.
fn group_rate(rates: &[usize], num_heads: usize, h: usize) -> usize {
    rates[h / (num_heads / rates.len())]
}

fn validate_groups(what: &str, num_heads: usize, head_dim: usize, rates: &[usize]) -> Result<()> {
    if num_heads == 0 || head_dim == 0 {
        return Err(Error::Config(format!(
            "{what}: heads and head_dim must be positive"
        )));
    }
    if rates.is_empty() || rates.contains(&0) {
        return Err(Error::Config(format!(
            "{what}: rates must be nonempty and ≥ 1"
        )));
    }
    if !num_heads.is_multiple_of(rates.len()) {
        return Err(Error::Config(format!(
            "{what}: {num_heads} heads not divisible by {} rates",
            rates.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalBranchConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub window: usize,
    /// Distinct dilation rates; heads are split evenly across them in order.
    pub dilations: Vec<usize>,
    pub hidden_dim: usize,
}

impl Default for LocalBranchConfig {
    fn default() -> Self {
        Self {
            num_heads: 9,
            head_dim: 128,
            window: 7,
            dilations: vec![1, 2, 4],
            hidden_dim: 1024,
        }
    }
}

impl LocalBranchConfig {
    pub fn validate(&self) -> Result<()> {
        validate_groups(
            "local branch",
            self.num_heads,
            self.head_dim,
            &self.dilations,
        )?;
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "local window must be odd, got {}",
                self.window
            )));
        }
        Ok(())
    }

    pub fn head(&self, h: usize) -> HeadSpec {
        HeadSpec {
            head_dim: self.head_dim,
            scale: HeadScale::Dilation(group_rate(&self.dilations, self.num_heads, h)),
        }
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalBranchConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Strictly increasing pooling rates, one head group per rate.
    pub pool_rates: Vec<usize>,
    pub hidden_dim: usize,
}

impl Default for GlobalBranchConfig {
    fn default() -> Self {
        Self {
            num_heads: 9,
            head_dim: 128,
            pool_rates: vec![15, 45, 90],
            hidden_dim: 1024,
        }
    }
}

impl GlobalBranchConfig {
    pub fn validate(&self) -> Result<()> {
        validate_groups(
            "global branch",
            self.num_heads,
            self.head_dim,
            &self.pool_rates,
        )?;
        if self.pool_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "pool rates must be strictly increasing: {:?}",
                self.pool_rates
            )));
        }
        Ok(())
    }

    pub fn head(&self, h: usize) -> HeadSpec {
        HeadSpec {
            head_dim: self.head_dim,
            scale: HeadScale::PoolRate(group_rate(&self.pool_rates, self.num_heads, h)),
        }
    }

    pub fn heads_per_rate(&self) -> usize {
        self.num_heads / self.pool_rates.len()
    }

    pub fn width(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Query, key and value projections from the model width to `num_heads·head_dim`.
#[derive(Debug, Clone)]
pub struct QkvProjection {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl QkvProjection {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        num_heads: usize,
        head_dim: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let width = num_heads * head_dim;
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, width, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, width, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, width, rng),
            num_heads,
            head_dim,
        }
    }
}

/// Scaled dot-product attention for one head over dense keys.
pub fn attend<F: Scalar>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let qs = tape.scale(q, F::one() / F::from_usize(d).sqrt());
    let scores = tape.scores(qs, k)?;
    let weights = tape.softmax_masked(scores, key_mask)?;
    tape.matmul(weights, v)
}

/// Local branch: per-head dilated sliding-window self-attention.
///
/// Output is the channel concatenation of all head outputs, before any
/// output projection.
pub fn slide_win_tpd<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: Var,
    proj: &QkvProjection,
    cfg: &LocalBranchConfig,
) -> Result<Var> {
    cfg.validate()?;
    let q = proj.q.forward(tape, store, x)?;
    let k = proj.k.forward(tape, store, x)?;
    let v = proj.v.forward(tape, store, x)?;
    let dh = cfg.head_dim;
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let HeadScale::Dilation(rate) = cfg.head(h).scale else {
            unreachable!()
        };
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        heads.push(tape.window_attention(qh, kh, vh, cfg.window, rate)?);
    }
    tape.concat_channel(&heads)
}

/// Global branch: full-resolution queries over average-pooled keys and values.
pub fn mhsa_tpp<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: Var,
    proj: &QkvProjection,
    cfg: &GlobalBranchConfig,
) -> Result<Var> {
    cfg.validate()?;
    let q = proj.q.forward(tape, store, x)?;
    let dh = cfg.head_dim;
    let per_group = cfg.heads_per_rate();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for (g, &rate) in cfg.pool_rates.iter().enumerate() {
        let pooled = if rate == 1 {
            x
        } else {
            tape.avg_pool1d(x, rate, rate)?
        };
        let cols = g * per_group * dh;
        let k = proj
            .k
            .forward_cols(tape, store, pooled, cols, per_group * dh)?;
        let v = proj
            .v
            .forward_cols(tape, store, pooled, cols, per_group * dh)?;
        for j in 0..per_group {
            let h = g * per_group + j;
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, j * dh, dh)?;
            let vh = tape.slice_cols(v, j * dh, dh)?;
            heads.push(attend(tape, qh, kh, vh, None)?);
        }
    }
    tape.concat_channel(&heads)
}

/// Multi-head attention with an output projection back to the model width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: QkvProjection,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        head_dim: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if head_dim == 0 || !dim.is_multiple_of(head_dim) {
            return Err(Error::Config(format!(
                "{name}: width {dim} not divisible by head_dim {head_dim}"
            )));
        }
        let num_heads = dim / head_dim;
        Ok(Self {
            qkv: QkvProjection::new(store, name, dim, num_heads, head_dim, rng),
            out: Linear::new(
                store,
                &format!("{name}.out"),
                num_heads * head_dim,
                dim,
                rng,
            ),
        })
    }
}

/// Cross-attention: `queries` (Q×C) attend `keyvals` (T'×C). Keys flagged in
/// `key_padding_mask` receive zero weight. Output is Q×C for any T'.
pub fn mhca<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    queries: Var,
    keyvals: Var,
    params: &MultiHeadAttention,
    key_padding_mask: Option<&[bool]>,
) -> Result<Var> {
    if let Some(mask) = key_padding_mask {
        if mask.len() != tape.value(keyvals).rows() {
            return Err(Error::shape(
                "mhca mask",
                tape.shape(keyvals),
                &[mask.len()],
            ));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::AllKeysMasked);
        }
    }
    let p = &params.qkv;
    let q = p.q.forward(tape, store, queries)?;
    let k = p.k.forward(tape, store, keyvals)?;
    let v = p.v.forward(tape, store, keyvals)?;
    let dh = p.head_dim;
    let mut heads = Vec::with_capacity(p.num_heads);
    for h in 0..p.num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        heads.push(attend(tape, qh, kh, vh, key_padding_mask)?);
    }
    let cat = tape.concat_channel(&heads)?;
    params.out.forward(tape, store, cat)
}

/// One identification encoder layer: local and global branches concatenated
/// on channels, projected back to the model width, then a post-norm residual
/// block followed by a post-norm feed-forward block.
#[derive(Debug, Clone)]
pub struct LocalGlobalLayer {
    pub dim: usize,
    pub local_cfg: LocalBranchConfig,
    pub global_cfg: GlobalBranchConfig,
    pub local: QkvProjection,
    pub global: QkvProjection,
    pub fuse: Linear,
    pub norm1: Norm,
    pub ffn: FeedForward,
    pub norm2: Norm,
    pub dropout: f64,
}

impl LocalGlobalLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        local_cfg: &LocalBranchConfig,
        global_cfg: &GlobalBranchConfig,
        dropout: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        local_cfg.validate()?;
        global_cfg.validate()?;
        let local = QkvProjection::new(
            store,
            &format!("{name}.local"),
            dim,
            local_cfg.num_heads,
            local_cfg.head_dim,
            rng,
        );
        let global = QkvProjection::new(
            store,
            &format!("{name}.global"),
            dim,
            global_cfg.num_heads,
            global_cfg.head_dim,
            rng,
        );
        let fuse = Linear::new(
            store,
            &format!("{name}.fuse"),
            local_cfg.width() + global_cfg.width(),
            dim,
            rng,
        );
        Ok(Self {
            dim,
            local_cfg: local_cfg.clone(),
            global_cfg: global_cfg.clone(),
            local,
            global,
            fuse,
            norm1: Norm::new(store, &format!("{name}.norm1"), dim),
            ffn: FeedForward::new(
                store,
                &format!("{name}.ffn"),
                dim,
                local_cfg.hidden_dim,
                rng,
            ),
            norm2: Norm::new(store, &format!("{name}.norm2"), dim),
            dropout,
        })
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.dim {
            return Err(Error::shape(
                "local_global_layer",
                tape.shape(x),
                &[self.dim],
            ));
        }
        let local = slide_win_tpd(tape, store, x, &self.local, &self.local_cfg)?;
        let global = mhsa_tpp(tape, store, x, &self.global, &self.global_cfg)?;
        let both = tape.concat_channel(&[local, global])?;
        let fused = self.fuse.forward(tape, store, both)?;
        let fused = tape.dropout(fused, self.dropout);
        let h = tape.add(x, fused)?;
        let h = self.norm1.forward(tape, store, h)?;
        let f = self.ffn.forward(tape, store, h)?;
        let f = tape.dropout(f, self.dropout);
        let h2 = tape.add(h, f)?;
        self.norm2.forward(tape, store, h2)
    }
}
