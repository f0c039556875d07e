//! Forward passes.
//!
//! The decoder consumes *slots*: the begin-of-order anchor or a token
//! bound to the sequence position it came from. Slot order is decode
//! order, not text order; positional information rides entirely on the
//! embeddings, so any permutation is just a different slot sequence. Every
//! slot also announces the position it is about to predict (its target),
//! injected according to the configured [`Injection`] mode.
//!
//! The encoder path canonicalizes its input by sequence position before
//! computing and maps the logits back afterwards, making its output
//! exactly invariant to the order in which (token, position) pairs arrive.
//!
//! With `keep_acts`, the forward records everything [`backward`] needs.
//!
//! [`backward`]: crate::model::backward::backward
//! [`Injection`]: crate::model::Injection

use crate::error::CoreError;
use crate::model::mask::AttentionMask;
use crate::model::params::{LayerNormParams, Parameters};
use crate::model::{Family, Injection, ModelConfig};
use crate::ordering::Permutation;
use crate::tensor::{matmul, matmul_nt, Real};
use crate::Result;

pub const LN_EPS: f64 = 1e-5;

/// One decoder input slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotInput {
    /// Begin-of-order anchor; carries no token or position of its own.
    Begin,
    /// A committed token and the sequence position it sits at.
    Token { id: u32, pos: usize },
}

/// Layer-norm forward record: per-row mean and reciprocal std, plus the
/// normalized rows before gain/bias.
#[derive(Debug, Clone)]
pub struct LnActs<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
    pub hat: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerActs<T> {
    pub x_in: Vec<T>,              // [L,d] residual stream entering the block
    pub ada_out: Option<Vec<T>>,   // [L,4d] modulation (s1|t1|s2|t2)
    pub ln1: LnActs<T>,
    pub h1: Vec<T>,                // [L,d] attention input
    pub qkv: Vec<T>,               // [L,3d]
    pub probs: Vec<T>,             // [H,L,L]
    pub att_concat: Vec<T>,        // [L,d] heads concatenated, before w_o
    pub x_mid: Vec<T>,             // [L,d] stream after attention residual
    pub ln2: LnActs<T>,
    pub h2: Vec<T>,                // [L,d] MLP input
    pub fc: Vec<T>,                // [L,4d] pre-GELU
    pub gelu: Vec<T>,              // [L,4d]
}

#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub x0: Vec<T>,            // [L,d]
    pub cond: Option<Vec<T>>,  // [L,tpe] adaln target codes
    pub layers: Vec<LayerActs<T>>,
    pub x_last: Vec<T>,        // [L,d] input to the final layer norm
    pub lnf: LnActs<T>,
    pub xf: Vec<T>,            // [L,d] head input
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// [L, V] in the caller's slot order.
    pub logits: Vec<T>,
    pub n_slots: usize,
    pub slots: Vec<SlotInput>,
    /// Target position per slot (decoder); own position per row (encoder).
    pub targets: Vec<usize>,
    pub mask: AttentionMask,
    /// Encoder only: `canon[j]` is the caller index computed at canonical
    /// row `j`. `None` for decoders, whose rows are not reordered.
    pub canon: Option<Vec<usize>>,
    pub acts: Option<Activations<T>>,
}

/// Builds the decoder slot sequence for one block visited in `perm`
/// order: the begin anchor predicts the first position, then each token
/// slot predicts the next position in the order.
pub fn slots_for_order(block: &[u32], perm: &Permutation) -> (Vec<SlotInput>, Vec<usize>) {
    let order = perm.order();
    let n = order.len();
    assert_eq!(n, block.len(), "permutation length must match block length");
    let mut slots = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    slots.push(SlotInput::Begin);
    targets.push(order[0]);
    for i in 1..n {
        let pos = order[i - 1];
        slots.push(SlotInput::Token {
            id: block[pos],
            pos,
        });
        targets.push(order[i]);
    }
    (slots, targets)
}

/// Decoder forward over explicit slots, targets, and attention mask.
pub fn forward_decoder<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    slots: &[SlotInput],
    targets: &[usize],
    mask: &AttentionMask,
    keep_acts: bool,
) -> Result<ForwardOutput<T>> {
    if cfg.family != Family::DecoderAnyOrder {
        return Err(CoreError::config(
            "forward_decoder requires the decoder_any_order family",
        ));
    }
    cfg.validate()?;
    let l = slots.len();
    if l == 0 || targets.len() != l || mask.n() != l {
        return Err(CoreError::config(format!(
            "slot/target/mask size mismatch: {} / {} / {}",
            l,
            targets.len(),
            mask.n()
        )));
    }
    for s in slots {
        if let SlotInput::Token { id, pos } = s {
            if *id as usize >= cfg.vocab_size || *pos >= cfg.ctx_len {
                return Err(CoreError::config(format!("slot out of range: {s:?}")));
            }
        }
    }
    if targets.iter().any(|&t| t >= cfg.ctx_len) {
        return Err(CoreError::config("target position out of range"));
    }

    let (x0, cond) = embed_decoder(p, cfg, slots, targets);
    let (logits, acts) = run_core(p, cfg, x0, cond, targets, mask, keep_acts);
    if !logits.iter().all(|&v| v.as_f64().is_finite()) {
        return Err(CoreError::numerical("non-finite logits in decoder forward"));
    }
    Ok(ForwardOutput {
        logits,
        n_slots: l,
        slots: slots.to_vec(),
        targets: targets.to_vec(),
        mask: mask.clone(),
        canon: None,
        acts,
    })
}

/// Encoder forward over (token, position) pairs under a full attention
/// mask. Pairs may arrive in any order; rows of the returned logits line
/// up with the caller's order, and the computation itself runs on the
/// position-sorted canonical form so the result is exactly order
/// invariant.
pub fn forward_encoder<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    tokens: &[u32],
    positions: &[usize],
    keep_acts: bool,
) -> Result<ForwardOutput<T>> {
    if cfg.family != Family::EncoderMdm {
        return Err(CoreError::config(
            "forward_encoder requires the encoder_mdm family",
        ));
    }
    cfg.validate()?;
    let l = tokens.len();
    if l == 0 || positions.len() != l {
        return Err(CoreError::config("token/position length mismatch"));
    }
    if tokens.iter().any(|&t| t as usize >= cfg.vocab_size) {
        return Err(CoreError::config("token id out of range"));
    }
    if positions.iter().any(|&p| p >= cfg.ctx_len) {
        return Err(CoreError::config("position out of range"));
    }
    let mut canon: Vec<usize> = (0..l).collect();
    canon.sort_by_key(|&i| positions[i]);
    for w in canon.windows(2) {
        if positions[w[0]] == positions[w[1]] {
            return Err(CoreError::config("duplicate positions in encoder input"));
        }
    }

    let d = cfg.d_model;
    let mut x0 = vec![T::zero(); l * d];
    for (row, &i) in canon.iter().enumerate() {
        let tok = &p.tok_emb.data[tokens[i] as usize * d..(tokens[i] as usize + 1) * d];
        let pos = &p.pos_emb.data[positions[i] * d..(positions[i] + 1) * d];
        for j in 0..d {
            x0[row * d + j] = tok[j] + pos[j];
        }
    }
    let mask = AttentionMask::full(l);
    let canon_targets: Vec<usize> = canon.iter().map(|&i| positions[i]).collect();
    let (canon_logits, acts) = run_core(p, cfg, x0, None, &canon_targets, &mask, keep_acts);
    if !canon_logits.iter().all(|&v| v.as_f64().is_finite()) {
        return Err(CoreError::numerical("non-finite logits in encoder forward"));
    }

    // Un-permute rows back to the caller's order.
    let v = cfg.vocab_size;
    let mut logits = vec![T::zero(); l * v];
    for (row, &i) in canon.iter().enumerate() {
        logits[i * v..(i + 1) * v].copy_from_slice(&canon_logits[row * v..(row + 1) * v]);
    }
    let slots: Vec<SlotInput> = tokens
        .iter()
        .zip(positions)
        .map(|(&id, &pos)| SlotInput::Token { id, pos })
        .collect();
    Ok(ForwardOutput {
        logits,
        n_slots: l,
        slots,
        targets: positions.to_vec(),
        mask,
        canon: Some(canon),
        acts,
    })
}

pub(crate) fn embed_decoder<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    slots: &[SlotInput],
    targets: &[usize],
) -> (Vec<T>, Option<Vec<T>>) {
    let l = slots.len();
    let d = cfg.d_model;
    let mut x0 = vec![T::zero(); l * d];
    for (i, s) in slots.iter().enumerate() {
        let row = &mut x0[i * d..(i + 1) * d];
        match s {
            SlotInput::Begin => {
                let begin = p.begin_emb.as_ref().expect("decoder has begin_emb");
                row.copy_from_slice(&begin.data);
            }
            SlotInput::Token { id, pos } => {
                let tok = &p.tok_emb.data[*id as usize * d..(*id as usize + 1) * d];
                let pos_row = &p.pos_emb.data[*pos * d..(*pos + 1) * d];
                for j in 0..d {
                    row[j] = tok[j] + pos_row[j];
                }
            }
        }
    }
    match cfg.injection {
        Injection::AddOnce | Injection::AddPerBlockShared | Injection::AddPerBlockLearned => {
            let table = &p.tgt_tables[0];
            for (i, &t) in targets.iter().enumerate() {
                let trow = &table.data[t * d..(t + 1) * d];
                for j in 0..d {
                    x0[i * d + j] += trow[j];
                }
            }
            (x0, None)
        }
        Injection::AdaLn => {
            let tpe = cfg.target_pe_dim;
            let code = p.tgt_pe.as_ref().expect("adaln has tgt_pe");
            let mut cond = vec![T::zero(); l * tpe];
            for (i, &t) in targets.iter().enumerate() {
                cond[i * tpe..(i + 1) * tpe].copy_from_slice(&code.data[t * tpe..(t + 1) * tpe]);
            }
            (x0, Some(cond))
        }
    }
}

/// Which per-block target table (if any) is added into the residual
/// stream before block `l`.
pub(crate) fn per_block_table(cfg: &ModelConfig, layer: usize) -> Option<usize> {
    match cfg.injection {
        Injection::AddPerBlockShared => Some(0),
        Injection::AddPerBlockLearned => Some(layer + 1),
        Injection::AddOnce | Injection::AdaLn => None,
    }
    .filter(|_| cfg.family == Family::DecoderAnyOrder)
}

fn run_core<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    x0: Vec<T>,
    cond: Option<Vec<T>>,
    targets: &[usize],
    mask: &AttentionMask,
    keep_acts: bool,
) -> (Vec<T>, Option<Activations<T>>) {
    let l = mask.n();
    let d = cfg.d_model;
    let mut x = x0.clone();
    let mut layers: Vec<LayerActs<T>> = Vec::with_capacity(if keep_acts { cfg.n_layers } else { 0 });

    for (li, block) in p.blocks.iter().enumerate() {
        if let Some(tbl) = per_block_table(cfg, li) {
            let table = &p.tgt_tables[tbl];
            for (i, &t) in targets.iter().enumerate() {
                let trow = &table.data[t * d..(t + 1) * d];
                for j in 0..d {
                    x[i * d + j] += trow[j];
                }
            }
        }
        let x_in = x.clone();

        let ada_out = block.ada.as_ref().map(|a| {
            let cond = cond.as_ref().expect("adaln blocks require cond rows");
            let tpe = cfg.target_pe_dim;
            let mut out = vec![T::zero(); l * 4 * d];
            matmul(&mut out, cond, &a.w.data, l, tpe, 4 * d);
            for row in out.chunks_exact_mut(4 * d) {
                for (o, &b) in row.iter_mut().zip(&a.b.data) {
                    *o += b;
                }
            }
            out
        });

        let (ln1, h1) = modulated_ln(&x, &block.ln1, ada_out.as_deref(), 0, l, d);

        // Attention.
        let mut qkv = vec![T::zero(); l * 3 * d];
        matmul(&mut qkv, &h1, &block.w_qkv.data, l, d, 3 * d);
        for row in qkv.chunks_exact_mut(3 * d) {
            for (o, &b) in row.iter_mut().zip(&block.b_qkv.data) {
                *o += b;
            }
        }
        let heads = cfg.n_heads;
        let dh = cfg.d_head();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * l * l];
        let mut att_concat = vec![T::zero(); l * d];
        let mut q = vec![T::zero(); l * dh];
        let mut k = vec![T::zero(); l * dh];
        let mut vh = vec![T::zero(); l * dh];
        let mut scores = vec![T::zero(); l * l];
        let mut out_h = vec![T::zero(); l * dh];
        for h in 0..heads {
            for i in 0..l {
                let base = i * 3 * d + h * dh;
                for j in 0..dh {
                    q[i * dh + j] = qkv[base + j] * scale;
                    k[i * dh + j] = qkv[base + d + j];
                    vh[i * dh + j] = qkv[base + 2 * d + j];
                }
            }
            matmul_nt(&mut scores, &q, &k, l, dh, l);
            let p_h = &mut probs[h * l * l..(h + 1) * l * l];
            for i in 0..l {
                let srow = &mut scores[i * l..(i + 1) * l];
                for (j, &ok) in mask.row(i).iter().enumerate() {
                    if !ok {
                        srow[j] = T::neg_infinity();
                    }
                }
                crate::tensor::softmax_row(&mut p_h[i * l..(i + 1) * l], srow);
            }
            matmul(&mut out_h, p_h, &vh, l, l, dh);
            for i in 0..l {
                att_concat[i * d + h * dh..i * d + (h + 1) * dh]
                    .copy_from_slice(&out_h[i * dh..(i + 1) * dh]);
            }
        }
        let mut att_proj = vec![T::zero(); l * d];
        matmul(&mut att_proj, &att_concat, &block.w_o.data, l, d, d);
        for (i, row) in att_proj.chunks_exact(d).enumerate() {
            for j in 0..d {
                x[i * d + j] += row[j] + block.b_o.data[j];
            }
        }
        let x_mid = x.clone();

        // MLP.
        let (ln2, h2) = modulated_ln(&x, &block.ln2, ada_out.as_deref(), 1, l, d);
        let dm = 4 * d;
        let mut fc = vec![T::zero(); l * dm];
        matmul(&mut fc, &h2, &block.w_fc.data, l, d, dm);
        for row in fc.chunks_exact_mut(dm) {
            for (o, &b) in row.iter_mut().zip(&block.b_fc.data) {
                *o += b;
            }
        }
        let mut gelu_out = vec![T::zero(); l * dm];
        for (g, &u) in gelu_out.iter_mut().zip(&fc) {
            *g = gelu(u);
        }
        let mut proj = vec![T::zero(); l * d];
        matmul(&mut proj, &gelu_out, &block.w_proj.data, l, dm, d);
        for (i, row) in proj.chunks_exact(d).enumerate() {
            for j in 0..d {
                x[i * d + j] += row[j] + block.b_proj.data[j];
            }
        }

        if keep_acts {
            layers.push(LayerActs {
                x_in,
                ada_out,
                ln1,
                h1,
                qkv,
                probs,
                att_concat,
                x_mid,
                ln2,
                h2,
                fc,
                gelu: gelu_out,
            });
        }
    }

    let x_last = x.clone();
    let (lnf, xf) = modulated_ln(&x, &p.lnf, None, 0, l, d);
    let v = cfg.vocab_size;
    let mut logits = vec![T::zero(); l * v];
    matmul(&mut logits, &xf, &p.head.data, l, d, v);

    let acts = keep_acts.then(|| Activations {
        x0,
        cond,
        layers,
        x_last,
        lnf,
        xf: xf.clone(),
    });
    (logits, acts)
}

/// Layer norm with optional adaln modulation on top:
/// `y = (hat * g + b) * (1 + s) + t`, where `(s, t)` come from the
/// `half`-th (scale, shift) pair of the block's modulation rows. With the
/// projections at zero this is exactly the plain affine layer norm.
pub(crate) fn modulated_ln<T: Real>(
    x: &[T],
    lnp: &LayerNormParams<T>,
    ada_out: Option<&[T]>,
    half: usize,
    l: usize,
    d: usize,
) -> (LnActs<T>, Vec<T>) {
    let mut mean = vec![T::zero(); l];
    let mut rstd = vec![T::zero(); l];
    let mut hat = vec![T::zero(); l * d];
    let mut out = vec![T::zero(); l * d];
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for i in 0..l {
        let row = &x[i * d..(i + 1) * d];
        let mut m = T::zero();
        for &v in row {
            m += v;
        }
        m *= inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - m;
            var += c * c;
        }
        var *= inv_d;
        let rs = T::one() / (var + eps).sqrt();
        mean[i] = m;
        rstd[i] = rs;
        for j in 0..d {
            let hh = (row[j] - m) * rs;
            hat[i * d + j] = hh;
            out[i * d + j] = hh * lnp.g.data[j] + lnp.b.data[j];
        }
        if let Some(ada) = ada_out {
            let s = &ada[i * 4 * d + 2 * half * d..i * 4 * d + (2 * half + 1) * d];
            let t = &ada[i * 4 * d + (2 * half + 1) * d..i * 4 * d + (2 * half + 2) * d];
            for j in 0..d {
                let y = out[i * d + j];
                out[i * d + j] = y * (T::one() + s[j]) + t[j];
            }
        }
    }
    (LnActs { mean, rstd, hat }, out)
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::from_f64(0.7978845608028654);
    let c = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = k * (x + c * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    let du = k * (T::one() + T::from_f64(3.0) * c * x * x);
    half * (T::one() + th) + half * x * sech2 * du
}
