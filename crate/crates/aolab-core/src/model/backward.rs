//! Reverse-mode gradients for the forward passes.
//!
//! `backward` accumulates into a zeroed (or partially filled) gradient
//! container, so batches sum naturally: run one forward + backward per
//! sequence into the same `grads`. The math mirrors `run_core` step for
//! step in reverse; activation layouts are documented in
//! [`forward`](crate::model::forward).

use crate::error::CoreError;
use crate::model::forward::{gelu_grad, per_block_table, ForwardOutput, LnActs, SlotInput};
use crate::model::params::{LayerNormParams, Parameters};
use crate::model::{Family, ModelConfig};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc, Real, Tensor};
use crate::Result;

/// Backpropagates `dlogits` (caller row order, `[L, V]`) through the
/// recorded forward, accumulating parameter gradients into `grads`.
pub fn backward<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    out: &ForwardOutput<T>,
    dlogits: &[T],
    grads: &mut Parameters<T>,
) -> Result<()> {
    let acts = out
        .acts
        .as_ref()
        .ok_or_else(|| CoreError::config("backward needs a forward run with keep_acts"))?;
    let l = out.n_slots;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    if dlogits.len() != l * v {
        return Err(CoreError::config(format!(
            "dlogits has {} elements, expected {}",
            dlogits.len(),
            l * v
        )));
    }

    // Rows arrive in caller order; computation ran in canonical order.
    let dlogits_canon: Vec<T> = match &out.canon {
        None => dlogits.to_vec(),
        Some(canon) => {
            let mut dl = vec![T::zero(); l * v];
            for (row, &caller) in canon.iter().enumerate() {
                dl[row * v..(row + 1) * v]
                    .copy_from_slice(&dlogits[caller * v..(caller + 1) * v]);
            }
            dl
        }
    };

    // Head.
    matmul_tn_acc(&mut grads.head.data, &acts.xf, &dlogits_canon, d, l, v);
    let mut dxf = vec![T::zero(); l * d];
    matmul_nt(&mut dxf, &dlogits_canon, &p.head.data, l, v, d);

    // Final layer norm (never modulated).
    let mut dx = vec![T::zero(); l * d];
    ln_backward(
        &dxf,
        &p.lnf,
        &acts.lnf,
        &mut grads.lnf,
        &mut dx,
        l,
        d,
    );

    let heads = cfg.n_heads;
    let dh = cfg.d_head();
    let dm = 4 * d;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dcond: Option<Vec<T>> = acts
        .cond
        .as_ref()
        .map(|c| vec![T::zero(); c.len()]);

    for li in (0..cfg.n_layers).rev() {
        let la = &acts.layers[li];
        let block = &p.blocks[li];
        let gb = &mut grads.blocks[li];
        let mut d_ada: Option<Vec<T>> = la.ada_out.as_ref().map(|_| vec![T::zero(); l * 4 * d]);

        // MLP residual: x_out = x_mid + gelu(fc) @ w_proj + b_proj.
        let dproj = dx.clone(); // gradient of the MLP branch output
        for row in dproj.chunks_exact(d) {
            for (g, &x) in gb.b_proj.data.iter_mut().zip(row) {
                *g += x;
            }
        }
        matmul_tn_acc(&mut gb.w_proj.data, &la.gelu, &dproj, dm, l, d);
        let mut dgelu = vec![T::zero(); l * dm];
        matmul_nt(&mut dgelu, &dproj, &block.w_proj.data, l, d, dm);
        let mut dfc = dgelu;
        for (g, &u) in dfc.iter_mut().zip(&la.fc) {
            *g *= gelu_grad(u);
        }
        for row in dfc.chunks_exact(dm) {
            for (g, &x) in gb.b_fc.data.iter_mut().zip(row) {
                *g += x;
            }
        }
        matmul_tn_acc(&mut gb.w_fc.data, &la.h2, &dfc, d, l, dm);
        let mut dh2 = vec![T::zero(); l * d];
        matmul_nt(&mut dh2, &dfc, &block.w_fc.data, l, dm, d);

        // Modulated ln2 over x_mid; residual passthrough keeps dx.
        modulated_ln_backward(
            &dh2,
            &block.ln2,
            &la.ln2,
            la.ada_out.as_deref(),
            d_ada.as_deref_mut(),
            1,
            &mut gb.ln2,
            &mut dx,
            l,
            d,
        );

        // Attention residual: x_mid = x_in + att_concat @ w_o + b_o.
        let datt_proj = dx.clone();
        for row in datt_proj.chunks_exact(d) {
            for (g, &x) in gb.b_o.data.iter_mut().zip(row) {
                *g += x;
            }
        }
        matmul_tn_acc(&mut gb.w_o.data, &la.att_concat, &datt_proj, d, l, d);
        let mut datt_concat = vec![T::zero(); l * d];
        matmul_nt(&mut datt_concat, &datt_proj, &block.w_o.data, l, d, d);

        // Heads.
        let mut dqkv = vec![T::zero(); l * 3 * d];
        let mut q = vec![T::zero(); l * dh];
        let mut k = vec![T::zero(); l * dh];
        let mut vh = vec![T::zero(); l * dh];
        let mut dout_h = vec![T::zero(); l * dh];
        let mut dprobs = vec![T::zero(); l * l];
        let mut dscores = vec![T::zero(); l * l];
        let mut dq = vec![T::zero(); l * dh];
        let mut dk = vec![T::zero(); l * dh];
        let mut dv = vec![T::zero(); l * dh];
        for h in 0..heads {
            for i in 0..l {
                let base = i * 3 * d + h * dh;
                for j in 0..dh {
                    q[i * dh + j] = la.qkv[base + j];
                    k[i * dh + j] = la.qkv[base + d + j];
                    vh[i * dh + j] = la.qkv[base + 2 * d + j];
                }
                dout_h[i * dh..(i + 1) * dh]
                    .copy_from_slice(&datt_concat[i * d + h * dh..i * d + (h + 1) * dh]);
            }
            let p_h = &la.probs[h * l * l..(h + 1) * l * l];
            // dprobs = dout @ V^T, dV = probs^T @ dout.
            matmul_nt(&mut dprobs, &dout_h, &vh, l, dh, l);
            dv.iter_mut().for_each(|x| *x = T::zero());
            matmul_tn_acc(&mut dv, p_h, &dout_h, l, l, dh);
            // Softmax rows: dscore = p * (dprob - sum_j p dprob). Masked
            // entries have p = 0 and drop out on their own.
            for i in 0..l {
                let pr = &p_h[i * l..(i + 1) * l];
                let dpr = &dprobs[i * l..(i + 1) * l];
                let mut dot = T::zero();
                for j in 0..l {
                    dot += pr[j] * dpr[j];
                }
                for j in 0..l {
                    dscores[i * l + j] = pr[j] * (dpr[j] - dot);
                }
            }
            // Scores were scale * q k^T on raw q, k.
            matmul(&mut dq, &dscores, &k, l, l, dh);
            dk.iter_mut().for_each(|x| *x = T::zero());
            matmul_tn_acc(&mut dk, &dscores, &q, l, l, dh);
            for i in 0..l {
                let base = i * 3 * d + h * dh;
                for j in 0..dh {
                    dqkv[base + j] += dq[i * dh + j] * scale;
                    dqkv[base + d + j] += dk[i * dh + j] * scale;
                    dqkv[base + 2 * d + j] += dv[i * dh + j];
                }
            }
        }
        for row in dqkv.chunks_exact(3 * d) {
            for (g, &x) in gb.b_qkv.data.iter_mut().zip(row) {
                *g += x;
            }
        }
        matmul_tn_acc(&mut gb.w_qkv.data, &la.h1, &dqkv, d, l, 3 * d);
        let mut dh1 = vec![T::zero(); l * d];
        matmul_nt(&mut dh1, &dqkv, &block.w_qkv.data, l, 3 * d, d);

        modulated_ln_backward(
            &dh1,
            &block.ln1,
            &la.ln1,
            la.ada_out.as_deref(),
            d_ada.as_deref_mut(),
            0,
            &mut gb.ln1,
            &mut dx,
            l,
            d,
        );

        // Modulation projection gradients and conditioning feedback.
        if let (Some(d_ada), Some(ada)) = (d_ada, block.ada.as_ref()) {
            let ga = gb.ada.as_mut().expect("grads mirror params");
            let cond = acts.cond.as_ref().expect("adaln cond recorded");
            let tpe = cfg.target_pe_dim;
            for row in d_ada.chunks_exact(4 * d) {
                for (g, &x) in ga.b.data.iter_mut().zip(row) {
                    *g += x;
                }
            }
            matmul_tn_acc(&mut ga.w.data, cond, &d_ada, tpe, l, 4 * d);
            let dc = dcond.as_mut().expect("dcond allocated with cond");
            let mut tmp = vec![T::zero(); l * tpe];
            matmul_nt(&mut tmp, &d_ada, &ada.w.data, l, 4 * d, tpe);
            for (a, &b) in dc.iter_mut().zip(&tmp) {
                *a += b;
            }
        }

        // Per-block target table added into the stream before this block.
        if let Some(tbl) = per_block_table(cfg, li) {
            let gt = &mut grads.tgt_tables[tbl];
            scatter_rows(gt, &dx, &canonical_targets(out), d);
        }
    }

    // Embeddings.
    match cfg.family {
        Family::DecoderAnyOrder => {
            for (i, slot) in out.slots.iter().enumerate() {
                let row = &dx[i * d..(i + 1) * d];
                match slot {
                    SlotInput::Begin => {
                        let gb = grads.begin_emb.as_mut().expect("decoder begin_emb");
                        for (g, &x) in gb.data.iter_mut().zip(row) {
                            *g += x;
                        }
                    }
                    SlotInput::Token { id, pos } => {
                        add_row(&mut grads.tok_emb, *id as usize, row);
                        add_row(&mut grads.pos_emb, *pos, row);
                    }
                }
            }
            match cfg.injection {
                crate::model::Injection::AddOnce
                | crate::model::Injection::AddPerBlockShared
                | crate::model::Injection::AddPerBlockLearned => {
                    scatter_rows(&mut grads.tgt_tables[0], &dx, &out.targets, d);
                }
                crate::model::Injection::AdaLn => {
                    let dc = dcond.expect("adaln dcond");
                    let tpe = cfg.target_pe_dim;
                    let gt = grads.tgt_pe.as_mut().expect("adaln tgt_pe");
                    for (i, &t) in out.targets.iter().enumerate() {
                        let row = &dc[i * tpe..(i + 1) * tpe];
                        for (g, &x) in gt.data[t * tpe..(t + 1) * tpe].iter_mut().zip(row) {
                            *g += x;
                        }
                    }
                }
            }
        }
        Family::EncoderMdm => {
            let canon = out.canon.as_ref().expect("encoder records canon");
            for (row_i, &caller) in canon.iter().enumerate() {
                let row = &dx[row_i * d..(row_i + 1) * d];
                let SlotInput::Token { id, pos } = out.slots[caller] else {
                    unreachable!("encoder slots are always tokens")
                };
                add_row(&mut grads.tok_emb, id as usize, row);
                add_row(&mut grads.pos_emb, pos, row);
            }
        }
    }
    Ok(())
}

/// Targets indexed by canonical row. Decoder rows are already canonical.
fn canonical_targets<T: Real>(out: &ForwardOutput<T>) -> Vec<usize> {
    match &out.canon {
        None => out.targets.clone(),
        Some(canon) => canon.iter().map(|&i| out.targets[i]).collect(),
    }
}

fn add_row<T: Real>(t: &mut Tensor<T>, row_idx: usize, row: &[T]) {
    let d = row.len();
    for (g, &x) in t.data[row_idx * d..(row_idx + 1) * d].iter_mut().zip(row) {
        *g += x;
    }
}

fn scatter_rows<T: Real>(t: &mut Tensor<T>, dx: &[T], targets: &[usize], d: usize) {
    for (i, &tgt) in targets.iter().enumerate() {
        add_row(t, tgt, &dx[i * d..(i + 1) * d]);
    }
}

/// Plain layer-norm backward; accumulates dx into `dx_acc`.
fn ln_backward<T: Real>(
    dy: &[T],
    lnp: &LayerNormParams<T>,
    la: &LnActs<T>,
    grad: &mut LayerNormParams<T>,
    dx_acc: &mut [T],
    l: usize,
    d: usize,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for i in 0..l {
        let dyr = &dy[i * d..(i + 1) * d];
        let hat = &la.hat[i * d..(i + 1) * d];
        let mut mean_dhat = T::zero();
        let mut mean_dhat_hat = T::zero();
        for j in 0..d {
            let dhat = dyr[j] * lnp.g.data[j];
            grad.g.data[j] += dyr[j] * hat[j];
            grad.b.data[j] += dyr[j];
            mean_dhat += dhat;
            mean_dhat_hat += dhat * hat[j];
        }
        mean_dhat *= inv_d;
        mean_dhat_hat *= inv_d;
        let rs = la.rstd[i];
        for j in 0..d {
            let dhat = dyr[j] * lnp.g.data[j];
            dx_acc[i * d + j] += rs * (dhat - mean_dhat - hat[j] * mean_dhat_hat);
        }
    }
}

/// Backward of `y = (hat * g + b) * (1 + s) + t` for the `half`-th
/// modulation pair; falls back to plain layer norm when no modulation was
/// recorded.
#[allow(clippy::too_many_arguments)]
fn modulated_ln_backward<T: Real>(
    dy: &[T],
    lnp: &LayerNormParams<T>,
    la: &LnActs<T>,
    ada_out: Option<&[T]>,
    mut d_ada: Option<&mut [T]>,
    half: usize,
    grad: &mut LayerNormParams<T>,
    dx_acc: &mut [T],
    l: usize,
    d: usize,
) {
    match ada_out {
        None => ln_backward(dy, lnp, la, grad, dx_acc, l, d),
        Some(ada) => {
            let mut dz = vec![T::zero(); l * d];
            let da = d_ada.as_deref_mut().expect("d_ada present with ada_out");
            for i in 0..l {
                let s = &ada[i * 4 * d + 2 * half * d..i * 4 * d + (2 * half + 1) * d];
                for j in 0..d {
                    let z = la.hat[i * d + j] * lnp.g.data[j] + lnp.b.data[j];
                    let dyv = dy[i * d + j];
                    dz[i * d + j] = dyv * (T::one() + s[j]);
                    da[i * 4 * d + 2 * half * d + j] += dyv * z;
                    da[i * 4 * d + (2 * half + 1) * d + j] += dyv;
                }
            }
            ln_backward(&dz, lnp, la, grad, dx_acc, l, d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward_decoder, forward_encoder, slots_for_order, gelu, gelu_grad};
    use crate::model::mask::AttentionMask;
    use crate::model::{Family, Injection, ModelConfig};
    use crate::ordering::Permutation;
    use crate::tensor::log_softmax_at;

    fn cfg(family: Family, injection: Injection) -> ModelConfig {
        ModelConfig {
            family,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            ctx_len: 6,
            vocab_size: 7,
            injection,
            target_pe_dim: 4,
        }
    }

    /// Mean NLL of `labels` under the forward's rows, plus dlogits.
    fn loss_and_dlogits(
        logits: &[f64],
        labels: &[usize],
        v: usize,
    ) -> (f64, Vec<f64>) {
        let l = labels.len();
        let mut loss = 0.0;
        let mut dl = vec![0.0f64; l * v];
        let w = 1.0 / l as f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits[i * v..(i + 1) * v];
            loss -= w * log_softmax_at(row, y);
            let mut probs = vec![0.0f64; v];
            crate::tensor::softmax_row(&mut probs, row);
            for j in 0..v {
                dl[i * v + j] = w * (probs[j] - if j == y { 1.0 } else { 0.0 });
            }
        }
        (loss, dl)
    }

    fn decoder_loss(
        p: &Parameters<f64>,
        cfg: &ModelConfig,
        slots: &[SlotInput],
        targets: &[usize],
        labels: &[usize],
        mask: &AttentionMask,
    ) -> f64 {
        let out = forward_decoder(p, cfg, slots, targets, mask, false).unwrap();
        loss_and_dlogits(&out.logits, labels, cfg.vocab_size).0
    }

    fn check_decoder_grads(injection: Injection, mask: AttentionMask) {
        let cfg = cfg(Family::DecoderAnyOrder, injection);
        let p: Parameters<f64> = Parameters::init(&cfg, 13);
        let block: Vec<u32> = vec![1, 4, 2, 6, 0];
        let perm = Permutation::from_order(vec![3, 0, 4, 1, 2]).unwrap();
        let (slots, targets) = slots_for_order(&block, &perm);
        let labels: Vec<usize> = perm.order().iter().map(|&pos| block[pos] as usize).collect();

        let out = forward_decoder(&p, &cfg, &slots, &targets, &mask, true).unwrap();
        let (_, dl) = loss_and_dlogits(&out.logits, &labels, cfg.vocab_size);
        let mut grads = p.zeros_like();
        backward(&p, &cfg, &out, &dl, &mut grads).unwrap();

        let mut p_mut = p.clone();
        let mut rng = crate::rng::stream(5, crate::rng::Domain::Misc, 77);
        use rand::Rng;
        let tensor_count = p_mut.tensors().len();
        for _ in 0..60 {
            let ti = rng.gen_range(0..tensor_count);
            let (name, numel) = {
                let ts = p_mut.tensors();
                (ts[ti].0.clone(), ts[ti].1.numel())
            };
            if numel == 0 {
                continue;
            }
            let ei = rng.gen_range(0..numel);
            let h = 1e-5;
            let orig = p_mut.tensors()[ti].1.data[ei];
            p_mut.tensors_mut()[ti].1.data[ei] = orig + h;
            let up = decoder_loss(&p_mut, &cfg, &slots, &targets, &labels, &mask);
            p_mut.tensors_mut()[ti].1.data[ei] = orig - h;
            let down = decoder_loss(&p_mut, &cfg, &slots, &targets, &labels, &mask);
            p_mut.tensors_mut()[ti].1.data[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors()[ti].1.data[ei];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            let rel = (numeric - analytic).abs() / denom;
            assert!(
                rel < 1e-6 || (numeric - analytic).abs() < 1e-10,
                "{injection:?} {name}[{ei}]: numeric {numeric:.3e} vs analytic {analytic:.3e}"
            );
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences_add_once() {
        check_decoder_grads(Injection::AddOnce, AttentionMask::causal(5));
    }

    #[test]
    fn decoder_gradients_match_finite_differences_adaln() {
        check_decoder_grads(Injection::AdaLn, AttentionMask::causal(5));
    }

    #[test]
    fn decoder_gradients_match_finite_differences_per_block_learned() {
        check_decoder_grads(Injection::AddPerBlockLearned, AttentionMask::causal(5));
    }

    #[test]
    fn decoder_gradients_match_under_parallel_mask() {
        check_decoder_grads(
            Injection::AdaLn,
            AttentionMask::parallel_generation(2, 3).unwrap(),
        );
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = cfg(Family::EncoderMdm, Injection::AddOnce);
        let p: Parameters<f64> = Parameters::init(&cfg, 21);
        // Scrambled presentation order exercises the canonical remap.
        let tokens: Vec<u32> = vec![3, 6, 1, 5];
        let positions: Vec<usize> = vec![4, 0, 2, 1];
        let labels: Vec<usize> = vec![2, 2, 5, 0];

        let out = forward_encoder(&p, &cfg, &tokens, &positions, true).unwrap();
        let (_, dl) = loss_and_dlogits(&out.logits, &labels, cfg.vocab_size);
        let mut grads = p.zeros_like();
        backward(&p, &cfg, &out, &dl, &mut grads).unwrap();

        let mut p_mut = p.clone();
        let mut rng = crate::rng::stream(6, crate::rng::Domain::Misc, 78);
        use rand::Rng;
        for _ in 0..40 {
            let ti = rng.gen_range(0..p_mut.tensors().len());
            let numel = p_mut.tensors()[ti].1.numel();
            let ei = rng.gen_range(0..numel);
            let h = 1e-5;
            let orig = p_mut.tensors()[ti].1.data[ei];
            let eval = |pp: &Parameters<f64>| {
                let o = forward_encoder(pp, &cfg, &tokens, &positions, false).unwrap();
                loss_and_dlogits(&o.logits, &labels, cfg.vocab_size).0
            };
            p_mut.tensors_mut()[ti].1.data[ei] = orig + h;
            let up = eval(&p_mut);
            p_mut.tensors_mut()[ti].1.data[ei] = orig - h;
            let down = eval(&p_mut);
            p_mut.tensors_mut()[ti].1.data[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors()[ti].1.data[ei];
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            assert!(
                (numeric - analytic).abs() / denom < 1e-6
                    || (numeric - analytic).abs() < 1e-10,
                "tensor {ti}[{ei}]: numeric {numeric:.3e} vs analytic {analytic:.3e}"
            );
        }
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let cfg = cfg(Family::DecoderAnyOrder, Injection::AddOnce);
        let p: Parameters<f64> = Parameters::init(&cfg, 1);
        let block: Vec<u32> = vec![2, 5, 1];
        let (slots, targets) = slots_for_order(&block, &Permutation::identity(3));
        let mask = AttentionMask::causal(3);
        let out = forward_decoder(&p, &cfg, &slots, &targets, &mask, true).unwrap();
        let labels = vec![2usize, 5, 1];
        let (_, dl) = loss_and_dlogits(&out.logits, &labels, cfg.vocab_size);

        let mut once = p.zeros_like();
        backward(&p, &cfg, &out, &dl, &mut once).unwrap();
        let mut twice = p.zeros_like();
        backward(&p, &cfg, &out, &dl, &mut twice).unwrap();
        backward(&p, &cfg, &out, &dl, &mut twice).unwrap();
        for ((_, a), (_, b)) in once.tensors().iter().zip(twice.tensors().iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }
}
