//! Cross-modal interaction block.
//!
//! Text tokens first attend to image patches (cross-attention), then to each
//! other (self-attention), then pass through a position-wise FFN. Each
//! sublayer is wrapped as `LN(sublayer(x) + x)`. The block output is
//! mean-pooled over tokens into the interaction-aware vector.
//!
//! [`BlockOrder::Standard`] swaps the two attention sublayers (self first,
//! cross second) with the same parameters, for ablation.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{xavier, Bindings, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockOrder {
    /// Cross-attention, then self-attention, then FFN.
    #[default]
    Urmf,
    /// Self-attention, then cross-attention, then FFN.
    Standard,
}

/// Query/key/value/output projections of a multi-head attention layer.
///
/// Each projection is a `d×d` matrix; head `h` uses columns
/// `h·d/H .. (h+1)·d/H` of the query, key and value projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {d_model} is not divisible by {heads} heads"
            )));
        }
        let mut mat =
            |name: &str| store.add(format!("{prefix}.{name}"), xavier(rng, d_model, d_model));
        Ok(Self {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            heads,
            d_model,
        })
    }

    /// All four projections set to the identity (tests and inspection).
    pub fn identity(store: &mut ParamStore, prefix: &str, d_model: usize, heads: usize) -> Self {
        let mut mat = |name: &str| store.add(format!("{prefix}.{name}"), Tensor::identity(d_model));
        Self {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            heads,
            d_model,
        }
    }
}

/// Position-wise `relu(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        expansion: usize,
    ) -> Self {
        let hidden = d_model * expansion;
        Self {
            w1: store.add(format!("{prefix}.w1"), xavier(rng, d_model, hidden)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros([hidden])),
            w2: store.add(format!("{prefix}.w2"), xavier(rng, hidden, d_model)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros([d_model])),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([d_model], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([d_model])),
        }
    }
}

/// Parameters of one interaction block. `norms[k]` wraps the `k`-th sublayer
/// in execution order.
#[derive(Clone, Debug)]
pub struct InteractionParams {
    pub cross: AttentionParams,
    pub self_attn: AttentionParams,
    pub ffn: FfnParams,
    pub norms: [LayerNormParams; 3],
}

impl InteractionParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
        expansion: usize,
    ) -> Result<Self> {
        Ok(Self {
            cross: AttentionParams::new(store, rng, &format!("{prefix}.cross"), d_model, heads)?,
            self_attn: AttentionParams::new(store, rng, &format!("{prefix}.self"), d_model, heads)?,
            ffn: FfnParams::new(store, rng, &format!("{prefix}.ffn"), d_model, expansion),
            norms: [
                LayerNormParams::new(store, &format!("{prefix}.ln1"), d_model),
                LayerNormParams::new(store, &format!("{prefix}.ln2"), d_model),
                LayerNormParams::new(store, &format!("{prefix}.ln3"), d_model),
            ],
        })
    }
}

/// Intermediate sequences of one block, all `[B×n×d]`, plus the pooled `[B×d]`.
#[derive(Clone, Copy, Debug)]
pub struct InteractionOutput {
    /// Output of the residual cross-attention sublayer.
    pub after_cross: Var,
    /// Output of the residual self-attention sublayer.
    pub after_self: Var,
    /// Output of the residual FFN sublayer.
    pub output: Var,
    /// Token mean of `output`.
    pub pooled: Var,
}

/// Affine map of an input modality into the shared model width.
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub w: ParamId,
    pub b: ParamId,
}

impl InputProjection {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_model: usize,
    ) -> Self {
        Self {
            w: store.add(format!("{prefix}.w"), xavier(rng, d_in, d_model)),
            b: store.add(format!("{prefix}.b"), Tensor::zeros([d_model])),
        }
    }
}

/// `x[…×k] · w[k×c] (+ b[c])`, applied to the last axis of any rank ≥ 2 input.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let k = *shape.last().ok_or(Error::EmptySequence { op: "linear" })?;
    let rows = shape.iter().product::<usize>() / k.max(1);
    let flat = if shape.len() == 2 {
        x
    } else {
        tape.reshape(x, &[rows, k])?
    };
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        y = tape.add_bias(y, b)?;
    }
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = tape.shape(y)[1];
    tape.reshape(y, &out_shape)
}

/// Lifts an `[n×d]` sequence to a batch of one; leaves `[B×n×d]` alone.
fn as_batched(tape: &mut Tape, x: Var) -> Result<(Var, bool)> {
    match tape.shape(x).len() {
        3 => Ok((x, false)),
        2 => {
            let s = tape.shape(x).to_vec();
            Ok((tape.reshape(x, &[1, s[0], s[1]])?, true))
        }
        _ => Err(Error::shape("attention", tape.shape(x), &[])),
    }
}

fn attention(
    tape: &mut Tape,
    binds: &Bindings,
    queries: Var,
    context: Var,
    params: &AttentionParams,
) -> Result<Var> {
    let (q_in, squeeze) = as_batched(tape, queries)?;
    let (kv_in, _) = as_batched(tape, context)?;
    let (qs, ks) = (tape.shape(q_in).to_vec(), tape.shape(kv_in).to_vec());
    if qs[2] != params.d_model || ks[2] != params.d_model || qs[0] != ks[0] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    if qs[1] == 0 || ks[1] == 0 {
        return Err(Error::EmptySequence { op: "attention" });
    }
    let q = linear(tape, q_in, binds.var(params.wq), None)?;
    let k = linear(tape, kv_in, binds.var(params.wk), None)?;
    let v = linear(tape, kv_in, binds.var(params.wv), None)?;
    let head_dim = params.d_model / params.heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_last(q, h * head_dim, head_dim)?;
        let kh = tape.slice_last(k, h * head_dim, head_dim)?;
        let vh = tape.slice_last(v, h * head_dim, head_dim)?;
        let scores = tape.batch_matmul(qh, kh, true)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.row_softmax(scores);
        heads.push(tape.batch_matmul(weights, vh, false)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_last(&heads)?
    };
    let out = linear(tape, joined, binds.var(params.wo), None)?;
    if squeeze {
        let s = tape.shape(out).to_vec();
        return tape.reshape(out, &s[1..]);
    }
    Ok(out)
}

/// Multi-head cross-attention: queries from `text`, keys and values from
/// `image`. Returns the pre-residual term.
pub fn mhca(
    tape: &mut Tape,
    binds: &Bindings,
    text: Var,
    image: Var,
    params: &AttentionParams,
) -> Result<Var> {
    attention(tape, binds, text, image, params)
}

/// Multi-head self-attention. Returns the pre-residual term.
pub fn mhsa(tape: &mut Tape, binds: &Bindings, x: Var, params: &AttentionParams) -> Result<Var> {
    attention(tape, binds, x, x, params)
}

/// Position-wise two-layer ReLU network. Returns the pre-residual term.
pub fn ffn(tape: &mut Tape, binds: &Bindings, x: Var, params: &FfnParams) -> Result<Var> {
    let h = linear(tape, x, binds.var(params.w1), Some(binds.var(params.b1)))?;
    let h = tape.relu(h);
    linear(tape, h, binds.var(params.w2), Some(binds.var(params.b2)))
}

/// `LN(sublayer_out + residual)`.
pub fn residual_norm(
    tape: &mut Tape,
    binds: &Bindings,
    sublayer_out: Var,
    residual: Var,
    norm: &LayerNormParams,
) -> Result<Var> {
    let sum = tape.add(sublayer_out, residual)?;
    tape.layer_norm(sum, binds.var(norm.gamma), binds.var(norm.beta), LN_EPS)
}

/// Runs one interaction block over `text[B×n×d]` with context `image[B×m×d]`.
pub fn interaction_block(
    tape: &mut Tape,
    binds: &Bindings,
    text: Var,
    image: Var,
    params: &InteractionParams,
    order: BlockOrder,
) -> Result<InteractionOutput> {
    let (after_cross, after_self) = match order {
        BlockOrder::Urmf => {
            let c = mhca(tape, binds, text, image, &params.cross)?;
            let xc = residual_norm(tape, binds, c, text, &params.norms[0])?;
            let s = mhsa(tape, binds, xc, &params.self_attn)?;
            let xs = residual_norm(tape, binds, s, xc, &params.norms[1])?;
            (xc, xs)
        }
        BlockOrder::Standard => {
            let s = mhsa(tape, binds, text, &params.self_attn)?;
            let xs = residual_norm(tape, binds, s, text, &params.norms[0])?;
            let c = mhca(tape, binds, xs, image, &params.cross)?;
            let xc = residual_norm(tape, binds, c, xs, &params.norms[1])?;
            (xc, xs)
        }
    };
    let last = match order {
        BlockOrder::Urmf => after_self,
        BlockOrder::Standard => after_cross,
    };
    let f = ffn(tape, binds, last, &params.ffn)?;
    let output = residual_norm(tape, binds, f, last, &params.norms[2])?;
    let pooled = tape.mean_pool_rows(output)?;
    Ok(InteractionOutput {
        after_cross,
        after_self,
        output,
        pooled,
    })
}

/// Projects raw text `[…×d_t]` and image `[…×d_i]` features to the model width.
pub fn project_inputs(
    tape: &mut Tape,
    binds: &Bindings,
    text_raw: Var,
    image_raw: Var,
    text_proj: &InputProjection,
    image_proj: &InputProjection,
) -> Result<(Var, Var)> {
    let t = linear(
        tape,
        text_raw,
        binds.var(text_proj.w),
        Some(binds.var(text_proj.b)),
    )?;
    let i = linear(
        tape,
        image_raw,
        binds.var(image_proj.w),
        Some(binds.var(image_proj.b)),
    )?;
    Ok((t, i))
}
