//! One two-branch transformer block: AdaLN-Zero modulation, joint attention
//! over both branches, and per-branch gated feed-forward.

use candle_core::{Tensor, Var, D};

use super::embed::RopeTables;
use super::params::{gelu, join, layer_norm, Init, Linear, Parameterized};
use crate::error::{Error, Result};
use crate::types::AttentionKind;

/// Weights owned by one branch (seen or target) of a block.
#[derive(Debug, Clone)]
pub struct BranchParams {
    /// `hidden → 6·hidden`, zero at init.
    pub modulation: Linear,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl BranchParams {
    pub fn new(init: &mut Init, hidden: usize) -> Result<Self> {
        Ok(Self {
            modulation: Linear::zeros(init, hidden, 6 * hidden)?,
            q: Linear::xavier(init, hidden, hidden)?,
            k: Linear::xavier(init, hidden, hidden)?,
            v: Linear::xavier(init, hidden, hidden)?,
            out: Linear::xavier(init, hidden, hidden)?,
            ff_in: Linear::xavier(init, hidden, 4 * hidden)?,
            ff_out: Linear::xavier(init, 4 * hidden, hidden)?,
        })
    }

    pub fn feed_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.ff_out.forward(&gelu(&self.ff_in.forward(x)?)?)
    }
}

impl Parameterized for BranchParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.modulation.collect_params(&join(prefix, "modulation"), out);
        self.q.collect_params(&join(prefix, "attn.q"), out);
        self.k.collect_params(&join(prefix, "attn.k"), out);
        self.v.collect_params(&join(prefix, "attn.v"), out);
        self.out.collect_params(&join(prefix, "attn.out"), out);
        self.ff_in.collect_params(&join(prefix, "ff.fc1"), out);
        self.ff_out.collect_params(&join(prefix, "ff.fc2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub seen: BranchParams,
    pub target: BranchParams,
    pub heads: usize,
    pub kind: AttentionKind,
}

impl BlockParams {
    pub fn new(init: &mut Init, hidden: usize, heads: usize, kind: AttentionKind) -> Result<Self> {
        Ok(Self {
            seen: BranchParams::new(init, hidden)?,
            target: BranchParams::new(init, hidden)?,
            heads,
            kind,
        })
    }

    /// Weights applied to the seen stream. The self-attention variant runs a
    /// single shared block over both streams.
    pub fn seen_branch(&self) -> &BranchParams {
        match self.kind {
            AttentionKind::SelfAttention => &self.target,
            _ => &self.seen,
        }
    }
}

impl Parameterized for BlockParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        self.seen.collect_params(&join(prefix, "seen"), out);
        self.target.collect_params(&join(prefix, "target"), out);
    }
}

/// Output of the AdaLN-Zero pre-attention modulation. The per-channel
/// vectors have shape `[B, 1, hidden]` and broadcast over tokens.
#[derive(Debug, Clone)]
pub struct AdaLnOutput {
    pub modulated: Tensor,
    pub gate_msa: Tensor,
    pub shift_mlp: Tensor,
    pub scale_mlp: Tensor,
    pub gate_mlp: Tensor,
}

/// `(1 + scale)·x + shift` with per-channel `scale`, `shift` of shape `[B, 1, H]`.
pub fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

/// Chunks `modulation(SiLU(temb))` into shift/scale/gate for attention and
/// MLP, and returns `layernorm(x)·(1 + scale_msa) + shift_msa` with the
/// remaining four chunks.
pub fn ada_ln_zero(x: &Tensor, temb: &Tensor, modulation: &Linear) -> Result<AdaLnOutput> {
    let (_, _, hidden) = x.dims3()?;
    let (tb, te) = temb.dims2()?;
    if te != hidden || modulation.out_dim() != 6 * hidden {
        return Err(Error::ShapeMismatch(format!(
            "adaLN over hidden {hidden} with temb width {te} and modulation width {}",
            modulation.out_dim()
        )));
    }
    let params = modulation.forward(&temb.silu()?)?.reshape((tb, 1, 6 * hidden))?;
    let chunk = |i: usize| params.narrow(D::Minus1, i * hidden, hidden);
    let (shift_msa, scale_msa, gate_msa) = (chunk(0)?, chunk(1)?, chunk(2)?);
    Ok(AdaLnOutput {
        modulated: modulate(&layer_norm(x)?, &shift_msa, &scale_msa)?,
        gate_msa,
        shift_mlp: chunk(3)?,
        scale_mlp: chunk(4)?,
        gate_mlp: chunk(5)?,
    })
}

const MASKED: f64 = -1e30;

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, s, h) = x.dims3()?;
    Ok(x.reshape((b, s, heads, h / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Attention across the concatenated `[target, seen]` token sequence with
/// branch-specific projections. `rope` must hold positions in the same
/// order (target tokens first). Returns `(seen_out, target_out)`.
pub fn joint_attention(
    target_h: &Tensor,
    seen_h: &Tensor,
    rope: &RopeTables,
    block: &BlockParams,
) -> Result<(Tensor, Tensor)> {
    let (b, nt, hidden) = target_h.dims3()?;
    let (bs, ns, hs) = seen_h.dims3()?;
    if bs != b || hs != hidden {
        return Err(Error::ShapeMismatch(format!(
            "target [{b}, {nt}, {hidden}] vs seen [{bs}, {ns}, {hs}]"
        )));
    }
    if rope.seq_len() != nt + ns {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {} joint tokens",
            rope.seq_len(),
            nt + ns
        )));
    }
    let heads = block.heads;
    let head_dim = hidden / heads;
    let tp = &block.target;
    let sp = block.seen_branch();

    let project = |tl: &Linear, sl: &Linear| -> Result<Tensor> {
        let joint = Tensor::cat(&[tl.forward(target_h)?, sl.forward(seen_h)?], 1)?;
        split_heads(&joint, heads)
    };
    let q = rope.rotate(&project(&tp.q, &sp.q)?)?;
    let k = rope.rotate(&project(&tp.k, &sp.k)?)?;
    let v = project(&tp.v, &sp.v)?;

    let mut scores = (q.matmul(&k.t()?)? / (head_dim as f64).sqrt())?;
    if block.kind == AttentionKind::Cross {
        scores = scores.broadcast_add(&cross_mask(nt, ns, &scores)?)?;
    }
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    let attended = weights
        .matmul(&v)?
        .transpose(1, 2)?
        .reshape((b, nt + ns, hidden))?;

    let target_out = tp.out.forward(&attended.narrow(1, 0, nt)?)?;
    let seen_out = sp.out.forward(&attended.narrow(1, nt, ns)?)?;
    Ok((seen_out, target_out))
}

/// Additive mask that blocks attention within a branch.
fn cross_mask(nt: usize, ns: usize, like: &Tensor) -> Result<Tensor> {
    let n = nt + ns;
    let data: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (r, c) = (idx / n, idx % n);
            if (r < nt) == (c < nt) {
                MASKED
            } else {
                0.0
            }
        })
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, n, n), like.device())?.to_dtype(like.dtype())?)
}

/// One block update of both streams. Returns `(seen', target')`.
pub fn vedit_block(
    target: &Tensor,
    seen: &Tensor,
    temb: &Tensor,
    rope: &RopeTables,
    block: &BlockParams,
) -> Result<(Tensor, Tensor)> {
    let tp = &block.target;
    let sp = block.seen_branch();

    let t_mod = ada_ln_zero(target, temb, &tp.modulation)?;
    let s_mod = ada_ln_zero(seen, temb, &sp.modulation)?;

    let (seen_attn, target_attn) = joint_attention(&t_mod.modulated, &s_mod.modulated, rope, block)?;

    let branch = |x: &Tensor, attn: &Tensor, m: &AdaLnOutput, p: &BranchParams| -> Result<Tensor> {
        let x = (x + attn.broadcast_mul(&m.gate_msa)?)?;
        let normed = modulate(&layer_norm(&x)?, &m.shift_mlp, &m.scale_mlp)?;
        let ff = p.feed_forward(&normed)?;
        Ok((x + ff.broadcast_mul(&m.gate_mlp)?)?)
    };
    let target_next = branch(target, &target_attn, &t_mod, tp)?;
    let seen_next = branch(seen, &seen_attn, &s_mod, sp)?;
    Ok((seen_next, target_next))
}
