//! Perplexity reports: left-to-right, any-order, context-order ensembles,
//! and scoring of generated text.
//!
//! Everything here reduces to the loss estimators and reports
//! `ppl = exp(nll)` with the estimator's pooled standard error. The one
//! genuinely new computation is the context-order ensemble: a decoder's
//! conditional for a target position, averaged in probability space over
//! M presentations of the same context set. Member orderings are drawn
//! fresh for every conditional, and the unpermuted presentation is always
//! member 0 unless turned off; each token keeps its original position
//! embedding, only the presentation order changes.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::forward::{forward_decoder, SlotInput};
use crate::model::mask::AttentionMask;
use crate::model::params::Parameters;
use crate::model::{Family, ModelConfig};
use crate::objectives::loss::{
    aoar_nll, ar_nll, check_block, draw_rng, mdm_nll, DrawPool, LossEstimate, MdmWeighting,
};
use crate::ordering::{sample_permutation, OrderPolicy};
use crate::tensor::Real;
use crate::Result;

/// Likelihood evaluation mode, tagged on every report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    L2r,
    AnyOrder,
    AnyOrderEnsemble { m: usize },
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvalMode::L2r => f.write_str("l2r"),
            EvalMode::AnyOrder => f.write_str("any_order"),
            EvalMode::AnyOrderEnsemble { m } => write!(f, "any_order_ensemble({m})"),
        }
    }
}

/// One evaluated (dataset, mode) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplReport {
    pub dataset: String,
    pub model_id: String,
    pub mode: EvalMode,
    pub nll: f64,
    pub ppl: f64,
    pub stderr: f64,
    pub num_tokens: usize,
}

impl PplReport {
    fn from_estimate(
        dataset: &str,
        model_id: &str,
        mode: EvalMode,
        est: LossEstimate,
    ) -> PplReport {
        PplReport {
            dataset: dataset.to_string(),
            model_id: model_id.to_string(),
            mode,
            nll: est.nll_per_token,
            ppl: est.nll_per_token.exp(),
            stderr: est.stderr,
            num_tokens: est.token_count,
        }
    }
}

/// Context-order ensemble settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub m: usize,
    #[serde(default = "default_true")]
    pub include_identity: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(CoreError::config("ensemble needs at least one member"));
        }
        Ok(())
    }
}

/// Exact left-to-right perplexity. Decoders score identity-order chains;
/// the encoder family has no O(n)-forward left-to-right evaluation.
pub fn l2r_ppl<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    blocks: &[&[u32]],
    dataset: &str,
    model_id: &str,
) -> Result<PplReport> {
    if cfg.family == Family::EncoderMdm {
        return Err(CoreError::Unsupported(String::from(
            "left-to-right likelihood for the encoder family needs one forward \
             per prefix; evaluate it in the any_order mode instead",
        )));
    }
    let est = ar_nll(p, cfg, blocks)?;
    Ok(PplReport::from_estimate(dataset, model_id, EvalMode::L2r, est))
}

/// Monte-Carlo any-order perplexity: uniformly drawn orders for decoders,
/// the ELBO-weighted masking estimator for encoders. Both are per-token
/// upper bounds in expectation, reported as such.
pub fn anyorder_ppl<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    blocks: &[&[u32]],
    num_orders: usize,
    seed: u64,
    dataset: &str,
    model_id: &str,
) -> Result<PplReport> {
    let est = match cfg.family {
        Family::DecoderAnyOrder => {
            aoar_nll(p, cfg, blocks, &OrderPolicy::UniformRandom, num_orders, seed)?
        }
        Family::EncoderMdm => mdm_nll(p, cfg, blocks, num_orders, MdmWeighting::Elbo, seed)?,
    };
    Ok(PplReport::from_estimate(dataset, model_id, EvalMode::AnyOrder, est))
}

fn check_conditional(cfg: &ModelConfig, context: &[(u32, usize)], target_pos: usize) -> Result<()> {
    if cfg.family != Family::DecoderAnyOrder {
        return Err(CoreError::config(
            "order-dependent conditionals exist for decoders only",
        ));
    }
    if target_pos >= cfg.ctx_len || context.len() >= cfg.ctx_len {
        return Err(CoreError::config("conditional does not fit the context window"));
    }
    let mut seen = vec![false; cfg.ctx_len];
    seen[target_pos] = true;
    for &(_, pos) in context {
        if pos >= cfg.ctx_len || std::mem::replace(&mut seen[pos], true) {
            return Err(CoreError::config(
                "context positions must be distinct and exclude the target",
            ));
        }
    }
    Ok(())
}

/// Chain rows announcing `context` in order, then the target last. The
/// final row's logits are the conditional.
fn member_chain(context: &[(u32, usize)], target_pos: usize) -> (Vec<SlotInput>, Vec<usize>) {
    let c = context.len();
    let mut slots = Vec::with_capacity(c + 1);
    let mut targets = Vec::with_capacity(c + 1);
    slots.push(SlotInput::Begin);
    for (i, &(id, pos)) in context.iter().enumerate() {
        targets.push(pos);
        if i + 1 < c {
            slots.push(SlotInput::Token { id, pos });
        }
    }
    if let Some(&(id, pos)) = context.last() {
        slots.push(SlotInput::Token { id, pos });
    }
    targets.push(target_pos);
    (slots, targets)
}

fn softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = row.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    for q in &mut probs {
        *q /= z;
    }
    probs
}

/// `p(x_target | context presented in exactly this order)` for a decoder,
/// as an f64 probability vector over the vocabulary. The chain announces
/// the context tokens in the given order and the target position last.
pub fn member_conditional<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    context: &[(u32, usize)],
    target_pos: usize,
) -> Result<Vec<f64>> {
    check_conditional(cfg, context, target_pos)?;
    let c = context.len();
    let (slots, targets) = member_chain(context, target_pos);
    let out = forward_decoder(p, cfg, &slots, &targets, &AttentionMask::causal(c + 1), false)?;
    let v = cfg.vocab_size;
    Ok(softmax_f64(&out.logits[c * v..(c + 1) * v]))
}

/// Eq-style context-order ensemble: the mean of `member_conditional` over
/// `cfg.m` presentations of `context`, member 0 being the presentation
/// as given when `include_identity`. Remaining members are fresh shuffles
/// drawn from `rng`, one `shuffle` call per member, in member order.
/// Member chains share forwards under a block-diagonal mask; one chain
/// alone is far too thin to keep the matmul kernels busy.
pub fn ensemble_conditional<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    context: &[(u32, usize)],
    target_pos: usize,
    ens: &EnsembleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    ens.validate()?;
    check_conditional(cfg, context, target_pos)?;
    let rows = context.len() + 1;
    let per_pass = (128 / rows).clamp(1, ens.m);
    let mut mean = vec![0.0f64; cfg.vocab_size];
    let mut reordered: Vec<(u32, usize)> = context.to_vec();
    let v = cfg.vocab_size;
    let mut member = 0;
    while member < ens.m {
        let group = per_pass.min(ens.m - member);
        let mut slots = Vec::with_capacity(group * rows);
        let mut targets = Vec::with_capacity(group * rows);
        for g in 0..group {
            let (s, t) = if member + g == 0 && ens.include_identity {
                member_chain(context, target_pos)
            } else {
                reordered.shuffle(rng);
                member_chain(&reordered, target_pos)
            };
            slots.extend(s);
            targets.extend(t);
        }
        let causal = AttentionMask::causal(rows);
        let mask = AttentionMask::batch(&vec![&causal; group])?;
        let out = forward_decoder(p, cfg, &slots, &targets, &mask, false)?;
        for g in 0..group {
            let last = (g + 1) * rows - 1;
            let probs = softmax_f64(&out.logits[last * v..(last + 1) * v]);
            for (acc, q) in mean.iter_mut().zip(&probs) {
                *acc += q;
            }
        }
        member += group;
    }
    let inv = 1.0 / ens.m as f64;
    for acc in &mut mean {
        *acc *= inv;
    }
    Ok(mean)
}

/// Any-order perplexity with every conditional replaced by the context
/// ensemble. M = 1 with the identity member is exactly `anyorder_ppl`
/// and is delegated so the equality holds bit for bit; larger M costs M
/// forwards per scored token.
pub fn ensemble_ppl<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    blocks: &[&[u32]],
    num_orders: usize,
    ens: &EnsembleConfig,
    seed: u64,
    dataset: &str,
    model_id: &str,
) -> Result<PplReport> {
    ens.validate()?;
    if cfg.family != Family::DecoderAnyOrder {
        return Err(CoreError::config(
            "context-order ensembles exist for decoders only",
        ));
    }
    let mode = EvalMode::AnyOrderEnsemble { m: ens.m };
    if ens.m == 1 && ens.include_identity {
        let est = aoar_nll(p, cfg, blocks, &OrderPolicy::UniformRandom, num_orders, seed)?;
        return Ok(PplReport::from_estimate(dataset, model_id, mode, est));
    }
    if blocks.is_empty() || num_orders == 0 {
        return Err(CoreError::config("ensemble evaluation needs blocks and orders"));
    }
    let mut pool = DrawPool::new();
    for block in blocks {
        check_block(cfg, block)?;
        let n = block.len();
        for draw in 0..num_orders {
            let mut rng = draw_rng(seed, block, draw);
            let perm = sample_permutation(&OrderPolicy::UniformRandom, n, &mut rng);
            // Member shuffles live on their own stream so adding members
            // never perturbs which orders get scored.
            let mut member_rng = draw_rng(seed ^ 0xA5A5_5A5A_0F0F_F0F0, block, draw);
            let mut total = 0.0;
            let mut context: Vec<(u32, usize)> = Vec::with_capacity(n - 1);
            for &pos in perm.order() {
                let probs =
                    ensemble_conditional(p, cfg, &context, pos, ens, &mut member_rng)?;
                total -= probs[block[pos] as usize].ln();
                context.push((block[pos], pos));
            }
            pool.push(total, n);
        }
    }
    let est = pool.finish()?;
    Ok(PplReport::from_estimate(dataset, model_id, mode, est))
}

/// A decoder checkpoint used as the left-to-right judge of generated
/// text. Desk runs score with the locally trained AR baseline.
#[derive(Debug, Clone, Copy)]
pub struct ScorerHandle<'a, T> {
    pub params: &'a Parameters<T>,
    pub cfg: &'a ModelConfig,
}

impl<'a, T: Real> ScorerHandle<'a, T> {
    pub fn new(params: &'a Parameters<T>, cfg: &'a ModelConfig) -> Result<Self> {
        if cfg.family != Family::DecoderAnyOrder {
            return Err(CoreError::config("scorers must be decoder models"));
        }
        Ok(ScorerHandle { params, cfg })
    }
}

/// Mean left-to-right nll of generated samples under the scorer,
/// exponentiated. `sample_vocab` is the generating model's vocabulary
/// size and must match the scorer's.
pub fn generation_ppl<T: Real>(
    samples: &[Vec<u32>],
    sample_vocab: usize,
    scorer: &ScorerHandle<'_, T>,
    dataset: &str,
    model_id: &str,
) -> Result<PplReport> {
    if sample_vocab != scorer.cfg.vocab_size {
        return Err(CoreError::config(format!(
            "vocabulary mismatch: samples use {} symbols, scorer {}",
            sample_vocab, scorer.cfg.vocab_size
        )));
    }
    let blocks: Vec<&[u32]> = samples.iter().map(|s| s.as_slice()).collect();
    let est = ar_nll(scorer.params, scorer.cfg, &blocks)?;
    Ok(PplReport::from_estimate(dataset, model_id, EvalMode::L2r, est))
}

/// One CSV row per report, stable field order, deterministic formatting.
pub fn reports_to_csv(reports: &[PplReport]) -> String {
    let mut out = String::from("dataset,mode,model,nll,ppl,stderr,num_tokens\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.4},{:.6},{}\n",
            r.dataset, r.mode, r.model_id, r.nll, r.ppl, r.stderr, r.num_tokens
        ));
    }
    out
}

/// Aligned text table of the same rows for terminal output.
pub fn reports_table(reports: &[PplReport]) -> String {
    let mut rows: Vec<[String; 5]> = vec![[
        String::from("dataset"),
        String::from("mode"),
        String::from("ppl"),
        String::from("nll"),
        String::from("stderr"),
    ]];
    for r in reports {
        rows.push([
            r.dataset.clone(),
            r.mode.to_string(),
            format!("{:.4}", r.ppl),
            format!("{:.6}", r.nll),
            format!("{:.6}", r.stderr),
        ]);
    }
    let mut width = [0usize; 5];
    for row in &rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(width)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Minimal static line chart of perplexity against ensemble size M.
pub fn ppl_vs_m_svg(points: &[(usize, f64)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    if !points.is_empty() {
        let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let (x0, x1) = (
            xs.iter().cloned().fold(f64::INFINITY, f64::min),
            xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let (y0, y1) = (
            ys.iter().cloned().fold(f64::INFINITY, f64::min),
            ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let sx = |x: f64| {
            if x1 > x0 {
                pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad)
            } else {
                w / 2.0
            }
        };
        let sy = |y: f64| {
            if y1 > y0 {
                h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad)
            } else {
                h / 2.0
            }
        };
        let path: Vec<String> = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for ((&x, &y), pt) in xs.iter().zip(&ys).zip(points) {
            svg.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#1f77b4\"/>\n\
                 <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\">M={} ({:.2})</text>\n",
                sx(x),
                sy(y),
                sx(x) + 6.0,
                sy(y) - 6.0,
                pt.0,
                pt.1
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"{:.0}\" y=\"{:.0}\" font-size=\"12\">ensemble members M (log spacing)</text>\n\
         <text x=\"8\" y=\"16\" font-size=\"12\">perplexity</text>\n</svg>\n",
        w / 2.0 - 90.0,
        h - 12.0
    ));
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Injection;
    use crate::rng::{stream, Domain};

    fn decoder_cfg(vocab: usize, ctx: usize) -> ModelConfig {
        ModelConfig {
            family: Family::DecoderAnyOrder,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ctx_len: ctx,
            vocab_size: vocab,
            injection: Injection::AdaLn,
            target_pe_dim: 6,
        }
    }

    fn encoder_cfg(vocab: usize, ctx: usize) -> ModelConfig {
        ModelConfig {
            family: Family::EncoderMdm,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ctx_len: ctx,
            vocab_size: vocab,
            injection: Injection::AddOnce,
            target_pe_dim: 6,
        }
    }

    fn demo_block(n: usize, vocab: usize, salt: u32) -> Vec<u32> {
        (0..n as u32).map(|i| (i * 5 + salt) % (vocab as u32 - 1)).collect()
    }

    #[test]
    fn uniform_stub_reports_the_vocabulary_size() {
        let cfg = decoder_cfg(27, 12);
        let p: Parameters<f32> = Parameters::zeros(&cfg);
        let block = demo_block(10, 27, 1);
        let l2r = l2r_ppl(&p, &cfg, &[&block], "toy", "stub").unwrap();
        assert!((l2r.ppl - 27.0).abs() < 1e-6, "{}", l2r.ppl);
        let ao = anyorder_ppl(&p, &cfg, &[&block], 4, 3, "toy", "stub").unwrap();
        assert!((ao.ppl - 27.0).abs() < 1e-6);

        let ecfg = encoder_cfg(27, 12);
        let ep: Parameters<f32> = Parameters::zeros(&ecfg);
        let ao = anyorder_ppl(&ep, &ecfg, &[&block], 4, 3, "toy", "stub").unwrap();
        assert!((ao.ppl - 27.0).abs() < 1e-6);
    }

    #[test]
    fn l2r_on_the_encoder_family_is_unsupported() {
        let cfg = encoder_cfg(9, 8);
        let p: Parameters<f32> = Parameters::zeros(&cfg);
        let err = l2r_ppl(&p, &cfg, &[&demo_block(6, 9, 0)], "toy", "enc").unwrap_err();
        assert!(matches!(err, CoreError::Unsupported(_)));
        assert!(err.to_string().contains("any_order"));
    }

    #[test]
    fn every_report_satisfies_ppl_equals_exp_nll() {
        let cfg = decoder_cfg(11, 12);
        let p: Parameters<f32> = Parameters::init(&cfg, 2);
        let block = demo_block(9, 11, 4);
        let reports = [
            l2r_ppl(&p, &cfg, &[&block], "a", "m").unwrap(),
            anyorder_ppl(&p, &cfg, &[&block], 3, 1, "a", "m").unwrap(),
            ensemble_ppl(
                &p,
                &cfg,
                &[&block],
                2,
                &EnsembleConfig { m: 2, include_identity: true, seed: 5 },
                1,
                "a",
                "m",
            )
            .unwrap(),
        ];
        for r in &reports {
            assert_eq!(r.ppl, r.nll.exp());
            assert!(r.num_tokens > 0);
        }
    }

    #[test]
    fn ensemble_members_average_in_probability_space() {
        let cfg = decoder_cfg(13, 16);
        let p: Parameters<f64> = Parameters::init(&cfg, 9);
        let block = demo_block(8, 13, 2);
        let context: Vec<(u32, usize)> = vec![(block[1], 1), (block[4], 4), (block[6], 6)];

        // Distribution sanity on single members and on the mean.
        let ident = member_conditional(&p, &cfg, &context, 3).unwrap();
        assert!((ident.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(ident.iter().all(|&q| q >= 0.0));

        // Order changes the conditional (decoders are order dependent)...
        let swapped: Vec<(u32, usize)> = vec![context[2], context[0], context[1]];
        let other = member_conditional(&p, &cfg, &swapped, 3).unwrap();
        assert!(
            ident.iter().zip(&other).any(|(a, b)| (a - b).abs() > 1e-9),
            "conditional ignored presentation order"
        );

        // ...and the two-member ensemble is exactly their mean, whichever
        // member comes first (f64 addition commutes).
        let mean_ab: Vec<f64> =
            ident.iter().zip(&other).map(|(a, b)| 0.5 * (a + b)).collect();
        let mean_ba: Vec<f64> =
            other.iter().zip(&ident).map(|(b, a)| 0.5 * (b + a)).collect();
        assert_eq!(mean_ab, mean_ba);
        assert!((mean_ab.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ensemble_draw_protocol_matches_a_manual_replay() {
        let cfg = decoder_cfg(13, 16);
        let p: Parameters<f64> = Parameters::init(&cfg, 9);
        let block = demo_block(8, 13, 2);
        let context: Vec<(u32, usize)> = vec![(block[0], 0), (block[2], 2), (block[5], 5)];
        let ens = EnsembleConfig { m: 3, include_identity: true, seed: 0 };

        let mut rng = stream(17, Domain::Misc, 0);
        let got = ensemble_conditional(&p, &cfg, &context, 7, &ens, &mut rng).unwrap();

        let mut replay = stream(17, Domain::Misc, 0);
        let mut acc = member_conditional(&p, &cfg, &context, 7).unwrap();
        let mut reordered = context.clone();
        for _ in 1..3 {
            reordered.shuffle(&mut replay);
            let member = member_conditional(&p, &cfg, &reordered, 7).unwrap();
            for (a, q) in acc.iter_mut().zip(&member) {
                *a += q;
            }
        }
        let inv = 1.0 / 3.0;
        let want: Vec<f64> = acc.iter().map(|a| a * inv).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn stub_members_are_indistinguishable() {
        let cfg = decoder_cfg(9, 12);
        let p: Parameters<f32> = Parameters::zeros(&cfg);
        let context = vec![(1u32, 0usize), (3, 4), (2, 2)];
        let ens = EnsembleConfig { m: 4, include_identity: true, seed: 0 };
        let mut rng = stream(3, Domain::Misc, 5);
        let mean = ensemble_conditional(&p, &cfg, &context, 6, &ens, &mut rng).unwrap();
        let member = member_conditional(&p, &cfg, &context, 6).unwrap();
        for (a, b) in mean.iter().zip(&member) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_member_identity_ensemble_is_plain_any_order() {
        let cfg = decoder_cfg(11, 12);
        let p: Parameters<f32> = Parameters::init(&cfg, 3);
        let blocks_owned = [demo_block(9, 11, 1), demo_block(9, 11, 2)];
        let blocks: Vec<&[u32]> = blocks_owned.iter().map(|b| b.as_slice()).collect();
        let ens = EnsembleConfig { m: 1, include_identity: true, seed: 7 };
        let a = ensemble_ppl(&p, &cfg, &blocks, 3, &ens, 11, "d", "m").unwrap();
        let b = anyorder_ppl(&p, &cfg, &blocks, 3, 11, "d", "m").unwrap();
        assert_eq!(a.nll.to_bits(), b.nll.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        assert_eq!(a.num_tokens, b.num_tokens);
        assert_eq!(a.mode, EvalMode::AnyOrderEnsemble { m: 1 });
    }

    #[test]
    fn conditional_rejects_malformed_contexts() {
        let cfg = decoder_cfg(9, 8);
        let p: Parameters<f32> = Parameters::zeros(&cfg);
        assert!(member_conditional(&p, &cfg, &[(1, 2), (3, 2)], 4).is_err());
        assert!(member_conditional(&p, &cfg, &[(1, 4)], 4).is_err());
        assert!(member_conditional(&p, &cfg, &[(1, 9)], 4).is_err());
        assert!(member_conditional(&p, &cfg, &[(1, 2)], 9).is_err());
        let ecfg = encoder_cfg(9, 8);
        let ep: Parameters<f32> = Parameters::zeros(&ecfg);
        assert!(member_conditional(&ep, &ecfg, &[(1, 2)], 4).is_err());
        let ens = EnsembleConfig { m: 0, include_identity: true, seed: 0 };
        let mut rng = stream(1, Domain::Misc, 0);
        assert!(ensemble_conditional(&p, &cfg, &[(1, 2)], 4, &ens, &mut rng).is_err());
        let blocks = [demo_block(6, 9, 0)];
        let refs: Vec<&[u32]> = blocks.iter().map(|b| b.as_slice()).collect();
        assert!(ensemble_ppl(&ep, &ecfg, &refs, 2, &EnsembleConfig { m: 2, include_identity: true, seed: 0 }, 1, "d", "m").is_err());
    }

    #[test]
    fn doubling_orders_shrinks_the_stderr_like_root_two() {
        let cfg = decoder_cfg(11, 18);
        let p: Parameters<f32> = Parameters::init(&cfg, 8);
        let blocks_owned = [demo_block(16, 11, 3), demo_block(16, 11, 9)];
        let blocks: Vec<&[u32]> = blocks_owned.iter().map(|b| b.as_slice()).collect();
        let narrow = anyorder_ppl(&p, &cfg, &blocks, 128, 5, "d", "m").unwrap();
        let wide = anyorder_ppl(&p, &cfg, &blocks, 256, 5, "d", "m").unwrap();
        let ratio = wide.stderr / narrow.stderr;
        let want = std::f64::consts::FRAC_1_SQRT_2;
        assert!(
            (ratio - want).abs() < 0.2 * want,
            "stderr ratio {ratio}, expected about {want}"
        );
    }

    #[test]
    fn encoder_any_order_reports_are_deterministic() {
        let cfg = encoder_cfg(9, 10);
        let p: Parameters<f32> = Parameters::init(&cfg, 6);
        let block = demo_block(8, 9, 1);
        let a = anyorder_ppl(&p, &cfg, &[&block], 6, 2, "d", "enc").unwrap();
        let b = anyorder_ppl(&p, &cfg, &[&block], 6, 2, "d", "enc").unwrap();
        assert_eq!(a.nll.to_bits(), b.nll.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn scorer_prefers_its_favorite_token_and_checks_vocab() {
        let cfg = decoder_cfg(9, 12);
        let mut p: Parameters<f32> = Parameters::zeros(&cfg);
        // Bias the head so token 1 soaks up almost all probability.
        p.lnf.b.data[1] = 1.0;
        for col in 0..cfg.d_model {
            p.head.data[cfg.vocab_size * col + 1] = 30.0;
        }
        let scorer = ScorerHandle::new(&p, &cfg).unwrap();
        let favored = vec![vec![1u32; 8], vec![1u32; 8]];
        let random = vec![vec![3u32, 7, 2, 5, 0, 6, 4, 2], vec![5, 0, 3, 3, 7, 1, 6, 2]];
        let low = generation_ppl(&favored, 9, &scorer, "fav", "scorer").unwrap();
        let high = generation_ppl(&random, 9, &scorer, "rand", "scorer").unwrap();
        assert!(low.ppl < 1.1, "{}", low.ppl);
        assert!(high.ppl > low.ppl * 5.0, "{} vs {}", high.ppl, low.ppl);
        assert!(generation_ppl(&favored, 8, &scorer, "fav", "scorer").is_err());

        let ecfg = encoder_cfg(9, 8);
        let ep: Parameters<f32> = Parameters::zeros(&ecfg);
        assert!(ScorerHandle::new(&ep, &ecfg).is_err());
    }

    #[test]
    fn report_outputs_have_stable_shapes() {
        let reports = vec![
            PplReport {
                dataset: String::from("val"),
                model_id: String::from("m1"),
                mode: EvalMode::L2r,
                nll: 1.0,
                ppl: 1.0f64.exp(),
                stderr: 0.01,
                num_tokens: 64,
            },
            PplReport {
                dataset: String::from("val"),
                model_id: String::from("m1"),
                mode: EvalMode::AnyOrderEnsemble { m: 8 },
                nll: 0.9,
                ppl: 0.9f64.exp(),
                stderr: 0.02,
                num_tokens: 64,
            },
        ];
        let csv = reports_to_csv(&reports);
        assert!(csv.starts_with("dataset,mode,model,nll,ppl,stderr,num_tokens\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("any_order_ensemble(8)"));
        let table = reports_table(&reports);
        assert_eq!(table.lines().count(), 3);
        let svg = ppl_vs_m_svg(&[(1, 49.8), (8, 45.1), (64, 44.3)]);
        assert!(svg.contains("<polyline") && svg.contains("</svg>"));
    }
}
