//! Standard layers built on the tape: dense, MLP, layer norm, 2-D
//! convolution and a pre-norm Transformer encoder.

use rand::Rng;

use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::{cast, Scalar};
use crate::tape::{Tape, Var};

/// `y = x W + b` on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = store.normal(format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng);
        let b = store.zeros(format!("{name}.b"), &[d_out]);
        Self { w, b, d_in, d_out }
    }

    /// Zero-initialized layer.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.zeros(format!("{name}.w"), &[d_in, d_out]);
        let b = store.zeros(format!("{name}.b"), &[d_out]);
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, p.var(self.w));
        tape.add_bias(y, p.var(self.b))
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.d_in * self.d_out) as u64
    }
}

/// Dense layers with SiLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists widths including input and output. With `zero_last`
    /// the final layer starts at zero so the network initially outputs 0.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dims: &[usize], zero_last: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output widths");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(store, &lname, dims[i], dims[i + 1])
                } else {
                    Linear::new(store, &lname, dims[i], dims[i + 1], rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, p, x);
            if i + 1 < n {
                x = tape.silu(x);
            }
        }
        x
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.layers.iter().map(|l| l.macs(rows)).sum()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[d]),
            beta: store.zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Same-size `k x k` convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = (c_in * k * k) as f64;
        // He-style scale; SiLU sits between convolutions.
        let w = store.normal(format!("{name}.w"), &[c_out, c_in, k, k], (2.0 / fan_in).sqrt(), rng);
        let b = store.zeros(format!("{name}.b"), &[c_out]);
        Self { w, b, c_in, c_out, k }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Var {
        tape.conv2d(x, p.var(self.w), p.var(self.b))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.c_in * self.c_out * self.k * self.k) as u64
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm Transformer encoder with full self-attention over `[N, D]` tokens.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    blocks: Vec<EncoderBlock>,
    ln_out: LayerNorm,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl TransformerEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        heads: usize,
        layers: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must divide into heads");
        let blocks = (0..layers)
            .map(|i| {
                let n = format!("{name}.block{i}");
                EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d_model),
                    qkv: Linear::new(store, &format!("{n}.qkv"), d_model, 3 * d_model, rng),
                    proj: Linear::new(store, &format!("{n}.proj"), d_model, d_model, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d_model),
                    ff1: Linear::new(store, &format!("{n}.ff1"), d_model, d_ff, rng),
                    ff2: Linear::new(store, &format!("{n}.ff2"), d_ff, d_model, rng),
                }
            })
            .collect();
        let ln_out = LayerNorm::new(store, &format!("{name}.ln_out"), d_model);
        Self {
            blocks,
            ln_out,
            d_model,
            heads,
            d_ff,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, mut x: Var) -> Var {
        let dh = self.d_model / self.heads;
        let inv_sqrt: T = cast(1.0 / (dh as f64).sqrt());
        let d = self.d_model;
        for blk in &self.blocks {
            let h = blk.ln1.forward(tape, p, x);
            let qkv = blk.qkv.forward(tape, p, h);
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let q = tape.slice_cols(qkv, hd * dh, dh);
                let k = tape.slice_cols(qkv, d + hd * dh, dh);
                let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh);
                let s = tape.matmul_nt(q, k);
                let s = tape.scale(s, inv_sqrt);
                let a = tape.softmax_rows(s);
                heads.push(tape.matmul(a, v));
            }
            let cat = tape.concat_cols(&heads);
            let o = blk.proj.forward(tape, p, cat);
            x = tape.add(x, o);
            let h = blk.ln2.forward(tape, p, x);
            let f = blk.ff1.forward(tape, p, h);
            let f = tape.silu(f);
            let f = blk.ff2.forward(tape, p, f);
            x = tape.add(x, f);
        }
        self.ln_out.forward(tape, p, x)
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Multiply-accumulates for a sequence of `n` tokens.
    pub fn macs(&self, n: usize) -> u64 {
        let d = self.d_model;
        let per_block = 3 * n * d * d + 2 * n * n * d + n * d * d + 2 * n * d * self.d_ff;
        (per_block * self.blocks.len()) as u64
    }
}
