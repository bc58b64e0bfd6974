//! Layers composed from tape primitives: linear maps, MLPs, multi-head
//! attention, and pre-norm transformer encoder blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::{numel, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Standard deviation for weight and embedding initialization.
pub const INIT_STD: f64 = 0.02;

/// N(0, std²) initialization.
pub fn init_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let values: Vec<f64> = (0..numel(&shape)).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, values).expect("normal samples are finite")
}

pub fn init_ones(shape: Vec<usize>) -> Tensor {
    let n = numel(&shape);
    Tensor::new(shape, vec![1.0; n]).expect("ones are finite")
}

/// y = x·W + b with W:[in,out], b:[out].
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let w = store.add(
            format!("{name}.w"),
            init_normal(rng, vec![in_dim, out_dim], INIT_STD),
        )?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_dim]))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// x:[r,in] → [r,out].
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_row_vec(y, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dims: &[usize],
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "mlp `{name}` needs at least input and output dims, got {dims:?}"
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.l{i}"),
                dims[i],
                dims[i + 1],
            )?);
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

/// Multi-head attention with separate query/key/value inputs. Heads are
/// contiguous column blocks of the projected width.
pub struct Mha {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_m: usize,
}

impl Mha {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_m: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_m % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d_m} is not divisible into {heads} heads"
            )));
        }
        Ok(Mha {
            q: Linear::new(store, rng, &format!("{name}.q"), d_m, d_m)?,
            k: Linear::new(store, rng, &format!("{name}.k"), d_m, d_m)?,
            v: Linear::new(store, rng, &format!("{name}.v"), d_m, d_m)?,
            o: Linear::new(store, rng, &format!("{name}.o"), d_m, d_m)?,
            heads,
            d_m,
        })
    }

    /// q_in:[Lq,d_m], k_in/v_in:[Lk,d_m] → [Lq,d_m].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
    ) -> Result<NodeId> {
        let q = self.q.forward(tape, store, q_in)?;
        let k = self.k.forward(tape, store, k_in)?;
        let v = self.v.forward(tape, store, v_in)?;
        let dh = self.d_m / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_tb(qh, kh)?;
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax(scaled, 1)?;
            heads.push(tape.matmul(weights, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        self.o.forward(tape, store, cat)
    }
}

/// Pre-norm transformer encoder block:
///   h  = LN(x);  x₁ = x + MHA(h)
///   h₂ = LN(x₁); out = x₁ + FF(h₂)
/// with a two-layer ReLU feed-forward. When a positional embedding is given
/// it is added to the attention's query and key inputs only; values are
/// computed from the un-positioned h.
pub struct EncoderBlock {
    pub(crate) ln1_g: ParamId,
    pub(crate) ln1_b: ParamId,
    pub(crate) ln2_g: ParamId,
    pub(crate) ln2_b: ParamId,
    pub attn: Mha,
    pub(crate) ff1: Linear,
    pub(crate) ff2: Linear,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_m: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            ln1_g: store.add(format!("{name}.ln1.g"), init_ones(vec![d_m]))?,
            ln1_b: store.add(format!("{name}.ln1.b"), Tensor::zeros(vec![d_m]))?,
            ln2_g: store.add(format!("{name}.ln2.g"), init_ones(vec![d_m]))?,
            ln2_b: store.add(format!("{name}.ln2.b"), Tensor::zeros(vec![d_m]))?,
            attn: Mha::new(store, rng, &format!("{name}.attn"), d_m, heads)?,
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d_m, ff_hidden)?,
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ff_hidden, d_m)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        pos: Option<NodeId>,
    ) -> Result<NodeId> {
        let g1 = tape.param(store, self.ln1_g);
        let b1 = tape.param(store, self.ln1_b);
        let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let (q_in, k_in) = match pos {
            Some(e) => {
                let hp = tape.add(h, e)?;
                (hp, hp)
            }
            None => (h, h),
        };
        let att = self.attn.forward(tape, store, q_in, k_in, h)?;
        let x1 = tape.add(x, att)?;
        let g2 = tape.param(store, self.ln2_g);
        let b2 = tape.param(store, self.ln2_b);
        let h2 = tape.layer_norm(x1, g2, b2, LAYER_NORM_EPS)?;
        let f1 = self.ff1.forward(tape, store, h2)?;
        let fr = tape.relu(f1);
        let f2 = self.ff2.forward(tape, store, fr)?;
        tape.add(x1, f2)
    }
}

/// Stack of encoder blocks. A positional embedding, when given, feeds the
/// queries and keys of every block.
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        n_blocks: usize,
        d_m: usize,
        heads: usize,
        ff_hidden: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            blocks.push(EncoderBlock::new(
                store,
                rng,
                &format!("{name}.b{i}"),
                d_m,
                heads,
                ff_hidden,
            )?);
        }
        Ok(Encoder { blocks })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        pos: Option<NodeId>,
    ) -> Result<NodeId> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, store, h, pos)?;
        }
        Ok(h)
    }
}
