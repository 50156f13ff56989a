//! Parameterized building blocks shared by the attention and model modules.

use crate::error::Result;
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

/// Affine map `x·W + b` with `W` stored as in×out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            weight: store.add_normal(format!("{name}.weight"), &[in_dim, out_dim], std, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }

    /// Applies only output columns `[start, start + len)`.
    pub fn forward_cols<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        if start == 0 && len == self.out_dim {
            return self.forward(tape, store, x);
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let w = tape.slice_cols(w, start, len)?;
        let b = tape.slice_cols(b, start, len)?;
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[dim]),
            beta: store.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise `Linear → GELU → Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.down.forward(tape, store, h)
    }
}
