//! The three likelihood objectives.
//!
//! Every estimate pools draws as (sequence-total nll, sequence length)
//! pairs, so the reported value is Σ totals / Σ lengths and estimates
//! from disjoint batches combine by token-weighted averaging exactly.
//! Draw randomness is keyed to the block's content hash rather than its
//! batch index, which makes the estimates independent of batch
//! composition as well.
//!
//! Every objective scores all n terms of a block. The chain's first
//! prediction conditions on nothing but the begin anchor, so the full
//! joint likelihood is modeled; the masked-diffusion fully-masked case
//! (empty prefix) lines up with the same terms, which is what makes the
//! two objectives equal draw for draw in expectation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CoreError;
use crate::model::{
    forward_decoder, forward_encoder, slots_for_order, AttentionMask, Family, ModelConfig,
    Parameters, SlotInput,
};
use crate::ordering::{
    all_permutations, sample_permutation, OrderPolicy, Permutation, ENUMERATION_MAX_N,
};
use crate::rng::{stream, Domain};
use crate::tensor::{log_softmax_at, Real};
use crate::Result;

/// A Monte-Carlo (or exact) loss value in nats per token.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossEstimate {
    pub nll_per_token: f64,
    /// Total scored draw-tokens: the weight of this estimate when
    /// pooling with others.
    pub token_count: usize,
    /// Standard error across draws (sequences × sampled orders); zero
    /// when there is a single draw.
    pub stderr: f64,
}

/// Weighting of the masked-diffusion estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdmWeighting {
    /// The ELBO weight n/(n−l+1) per sampled prefix length; unbiased.
    Elbo,
    /// Negative control: drops the prefix-length factor, deliberately
    /// biased low. Exists so the equivalence probe has something to
    /// catch.
    Unweighted,
}

pub(crate) struct DrawPool {
    total: f64,
    tokens: usize,
    vals: Vec<f64>,
}

impl DrawPool {
    pub(crate) fn new() -> DrawPool {
        DrawPool {
            total: 0.0,
            tokens: 0,
            vals: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, draw_total: f64, denom: usize) {
        self.total += draw_total;
        self.tokens += denom;
        self.vals.push(draw_total / denom as f64);
    }

    pub(crate) fn finish(self) -> Result<LossEstimate> {
        if self.tokens == 0 {
            return Err(CoreError::config("loss estimate over zero tokens"));
        }
        let nll = self.total / self.tokens as f64;
        if !nll.is_finite() {
            return Err(CoreError::numerical("non-finite loss"));
        }
        let d = self.vals.len();
        let stderr = if d < 2 {
            0.0
        } else {
            let mean = self.vals.iter().sum::<f64>() / d as f64;
            let var = self.vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (d - 1) as f64;
            (var / d as f64).sqrt()
        };
        Ok(LossEstimate {
            nll_per_token: nll,
            token_count: self.tokens,
            stderr,
        })
    }
}

fn block_hash(block: &[u32]) -> u64 {
    let mut h = Sha256::new();
    for &t in block {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Per-draw RNG, keyed by block content (36 bits) and draw index (20
/// bits) so a block's draws do not depend on where it sits in a batch.
pub(crate) fn draw_rng(seed: u64, block: &[u32], draw: usize) -> rand_chacha::ChaCha8Rng {
    let payload = ((block_hash(block) & 0xF_FFFF_FFFF) << 20) | (draw as u64 & 0xF_FFFF);
    stream(seed, Domain::Eval, payload)
}

pub(crate) fn check_block(cfg: &ModelConfig, block: &[u32]) -> Result<()> {
    if block.len() < 2 {
        return Err(CoreError::config("blocks must hold at least two tokens"));
    }
    if block.len() > cfg.ctx_len {
        return Err(CoreError::config(format!(
            "block length {} exceeds ctx_len {}",
            block.len(),
            cfg.ctx_len
        )));
    }
    Ok(())
}

/// One scoring chain inside a shared forward: its rows, their announced
/// targets, its own attention mask, and the (row, label) pairs to score.
struct ScoredDraw {
    slots: Vec<SlotInput>,
    targets: Vec<usize>,
    mask: AttentionMask,
    scored: Vec<(usize, u32)>,
}

/// Packs scoring chains into shared decoder forwards under a
/// block-diagonal mask. Monte-Carlo draws on short blocks are a few rows
/// each, far too thin to use the matmul kernels well; batching them
/// recovers most of the lost throughput. Passes never span more than one
/// estimator call site's block, so content-keyed estimates stay
/// independent of batch composition.
struct ChainBatcher<'a, T: Real> {
    p: &'a Parameters<T>,
    cfg: &'a ModelConfig,
    pending: Vec<ScoredDraw>,
    rows: usize,
    totals: Vec<f64>,
}

/// Rows per shared forward. Past this point the dense score matrix of
/// attention starts to cost more than the thin matmuls saved.
const BATCH_ROWS: usize = 128;

impl<'a, T: Real> ChainBatcher<'a, T> {
    fn new(p: &'a Parameters<T>, cfg: &'a ModelConfig) -> ChainBatcher<'a, T> {
        ChainBatcher {
            p,
            cfg,
            pending: Vec::new(),
            rows: 0,
            totals: Vec::new(),
        }
    }

    fn push(&mut self, draw: ScoredDraw) -> Result<()> {
        if !self.pending.is_empty() && self.rows + draw.slots.len() > BATCH_ROWS {
            self.flush()?;
        }
        self.rows += draw.slots.len();
        self.pending.push(draw);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let mut slots = Vec::with_capacity(self.rows);
        let mut targets = Vec::with_capacity(self.rows);
        for d in &self.pending {
            slots.extend_from_slice(&d.slots);
            targets.extend_from_slice(&d.targets);
        }
        let parts: Vec<&AttentionMask> = self.pending.iter().map(|d| &d.mask).collect();
        let mask = AttentionMask::batch(&parts)?;
        let out = forward_decoder(self.p, self.cfg, &slots, &targets, &mask, false)?;
        let v = self.cfg.vocab_size;
        let mut off = 0;
        for d in &self.pending {
            let total: f64 = d
                .scored
                .iter()
                .map(|&(row, label)| {
                    let r = off + row;
                    -log_softmax_at(&out.logits[r * v..(r + 1) * v], label as usize)
                })
                .sum();
            self.totals.push(total);
            off += d.slots.len();
        }
        self.pending.clear();
        self.rows = 0;
        Ok(())
    }

    /// Per-draw summed nll, in push order.
    fn finish(mut self) -> Result<Vec<f64>> {
        self.flush()?;
        Ok(self.totals)
    }
}

/// Per-term nll of one block visited in `perm` order: entry i is
/// −log p(x_{σ_i} | x_{σ_{<i}}) from a single causal forward.
pub fn chain_nll_terms<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    block: &[u32],
    perm: &Permutation,
) -> Result<Vec<f64>> {
    let n = block.len();
    check_block(cfg, block)?;
    let (slots, targets) = slots_for_order(block, perm);
    let out = forward_decoder(p, cfg, &slots, &targets, &AttentionMask::causal(n), false)?;
    let v = cfg.vocab_size;
    Ok((0..n)
        .map(|i| -log_softmax_at(&out.logits[i * v..(i + 1) * v], block[targets[i]] as usize))
        .collect())
}

/// Suffix terms of one masked-diffusion draw on the decoder: the first
/// `context` positions of `perm` are observed, every remaining position
/// is predicted in parallel from that prefix. Entry j is
/// −log p(x_{σ_{context+j}} | x_{σ_{<context}}).
pub fn mdm_suffix_terms<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    block: &[u32],
    perm: &Permutation,
    context: usize,
) -> Result<Vec<f64>> {
    let n = block.len();
    check_block(cfg, block)?;
    if context >= n {
        return Err(CoreError::config("nothing left to predict"));
    }
    let (slots, targets) = slots_for_order(block, perm);
    // Committed rows are the chain up to the prefix; the newest context
    // token (or the begin anchor) is replicated as the shared query
    // input, one row per remaining target.
    let mut rows = slots[..context].to_vec();
    rows.extend(std::iter::repeat(slots[context]).take(n - context));
    let mask = AttentionMask::parallel_generation(context, n - context)?;
    let out = forward_decoder(p, cfg, &rows, &targets, &mask, false)?;
    let v = cfg.vocab_size;
    Ok((context..n)
        .map(|i| -log_softmax_at(&out.logits[i * v..(i + 1) * v], block[targets[i]] as usize))
        .collect())
}

/// Encoder analogue of [`mdm_suffix_terms`]: observed positions keep
/// their tokens, the rest are replaced by the mask symbol (pinned to
/// the last vocabulary id by the corpus format), and every masked
/// position is scored from one full-attention forward.
pub fn mdm_masked_terms<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    block: &[u32],
    observed: &[bool],
) -> Result<Vec<f64>> {
    let n = block.len();
    check_block(cfg, block)?;
    if observed.len() != n {
        return Err(CoreError::config("observed flags must match block length"));
    }
    if observed.iter().all(|&o| o) {
        return Err(CoreError::config("nothing left to predict"));
    }
    let mask_id = (cfg.vocab_size - 1) as u32;
    let tokens: Vec<u32> = block
        .iter()
        .zip(observed)
        .map(|(&t, &o)| if o { t } else { mask_id })
        .collect();
    let positions: Vec<usize> = (0..n).collect();
    let out = forward_encoder(p, cfg, &tokens, &positions, false)?;
    let v = cfg.vocab_size;
    Ok((0..n)
        .filter(|&j| !observed[j])
        .map(|j| -log_softmax_at(&out.logits[j * v..(j + 1) * v], block[j] as usize))
        .collect())
}

/// Left-to-right autoregressive loss: the identity-order chain.
pub fn ar_nll<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    blocks: &[&[u32]],
) -> Result<LossEstimate> {
    if blocks.is_empty() {
        return Err(CoreError::config("no blocks to score"));
    }
    let mut pool = DrawPool::new();
    for block in blocks {
        let terms = chain_nll_terms(p, cfg, block, &Permutation::identity(block.len()))?;
        pool.push(terms.iter().sum(), block.len());
    }
    pool.finish()
}

/// Any-order autoregressive loss, Monte-Carlo averaged over
/// `num_orders` factorization orders per block drawn from `policy`.
pub fn aoar_nll<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    blocks: &[&[u32]],
    policy: &OrderPolicy,
    num_orders: usize,
    seed: u64,
) -> Result<LossEstimate> {
    if blocks.is_empty() {
        return Err(CoreError::config("no blocks to score"));
    }
    if num_orders == 0 {
        return Err(CoreError::config("num_orders must be at least 1"));
    }
    policy.validate()?;
    let mut pool = DrawPool::new();
    for block in blocks {
        let n = block.len();
        check_block(cfg, block)?;
        let mut batcher = ChainBatcher::new(p, cfg);
        for j in 0..num_orders {
            let mut rng = draw_rng(seed, block, j);
            let perm = sample_permutation(policy, n, &mut rng);
            let (slots, targets) = slots_for_order(block, &perm);
            let scored = (0..n).map(|i| (i, block[targets[i]])).collect();
            batcher.push(ScoredDraw {
                slots,
                targets,
                mask: AttentionMask::causal(n),
                scored,
            })?;
        }
        for total in batcher.finish()? {
            pool.push(total, n);
        }
    }
    pool.finish()
}

/// Masked-diffusion ELBO, Monte-Carlo over (order, prefix length) draws:
/// each draw observes a uniform prefix σ_{<l} and scores every remaining
/// position with weight n/(n−l+1). Dispatches on the model family —
/// parallel-mask decoding for decoders, mask-token replacement for
/// encoders.
pub fn mdm_nll<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    blocks: &[&[u32]],
    num_samples: usize,
    weighting: MdmWeighting,
    seed: u64,
) -> Result<LossEstimate> {
    if blocks.is_empty() {
        return Err(CoreError::config("no blocks to score"));
    }
    if num_samples == 0 {
        return Err(CoreError::config("num_samples must be at least 1"));
    }
    let mut pool = DrawPool::new();
    for block in blocks {
        let n = block.len();
        check_block(cfg, block)?;
        let mut batcher = ChainBatcher::new(p, cfg);
        let mut weights = Vec::with_capacity(num_samples);
        for j in 0..num_samples {
            let mut rng = draw_rng(seed, block, j);
            let perm = sample_permutation(&OrderPolicy::UniformRandom, n, &mut rng);
            let l: usize = rng.gen_range(1..=n);
            let context = l - 1;
            let w = match weighting {
                MdmWeighting::Elbo => n as f64 / (n - context) as f64,
                MdmWeighting::Unweighted => 1.0,
            };
            match cfg.family {
                Family::DecoderAnyOrder => {
                    let (slots, targets) = slots_for_order(block, &perm);
                    let mut rows = slots[..context].to_vec();
                    rows.extend(std::iter::repeat(slots[context]).take(n - context));
                    let scored = (context..n).map(|i| (i, block[targets[i]])).collect();
                    batcher.push(ScoredDraw {
                        slots: rows,
                        targets,
                        mask: AttentionMask::parallel_generation(context, n - context)?,
                        scored,
                    })?;
                    weights.push(w);
                }
                Family::EncoderMdm => {
                    let mut observed = vec![false; n];
                    for &pos in &perm.order()[..context] {
                        observed[pos] = true;
                    }
                    let terms = mdm_masked_terms(p, cfg, block, &observed)?;
                    pool.push(w * terms.iter().sum::<f64>(), n);
                }
            }
        }
        for (total, w) in batcher.finish()?.into_iter().zip(weights) {
            pool.push(w * total, n);
        }
    }
    pool.finish()
}

fn fact(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Exact any-order loss: the mean over all n! factorization orders,
/// each scored with its own causal chain forward. Capped at
/// `ENUMERATION_MAX_N` tokens like every other exhaustive routine.
pub fn exhaustive_aoar_nll<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    block: &[u32],
) -> Result<f64> {
    let n = block.len();
    check_block(cfg, block)?;
    let perms = all_permutations(n)?;
    let mut batcher = ChainBatcher::new(p, cfg);
    for perm in &perms {
        let (slots, targets) = slots_for_order(block, perm);
        let scored = (0..n).map(|i| (i, block[targets[i]])).collect();
        batcher.push(ScoredDraw {
            slots,
            targets,
            mask: AttentionMask::causal(n),
            scored,
        })?;
    }
    let total: f64 = batcher.finish()?.iter().sum();
    Ok(total / (perms.len() as f64 * n as f64))
}

fn for_each_prefix(
    n: usize,
    len: usize,
    cur: &mut Vec<usize>,
    used: &mut [bool],
    f: &mut impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if cur.len() == len {
        return f(cur);
    }
    for j in 0..n {
        if !used[j] {
            used[j] = true;
            cur.push(j);
            for_each_prefix(n, len, cur, used, f)?;
            cur.pop();
            used[j] = false;
        }
    }
    Ok(())
}

/// Exact masked-diffusion loss summed over every (order, prefix length)
/// pair of the ELBO's middle form. Orders sharing an ordered prefix
/// contribute identical suffix terms, so the enumeration walks distinct
/// ordered prefixes with exact integer multiplicities instead of all
/// n!·n pairs; the value is identical term for term.
pub fn exhaustive_mdm_nll<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    block: &[u32],
) -> Result<f64> {
    let n = block.len();
    if n > ENUMERATION_MAX_N {
        return Err(CoreError::EnumerationBound {
            n,
            max: ENUMERATION_MAX_N,
        });
    }
    if cfg.family != Family::DecoderAnyOrder {
        return Err(CoreError::Unsupported(
            "exhaustive masked-diffusion enumeration targets the decoder family".to_string(),
        ));
    }
    check_block(cfg, block)?;
    let mut batcher = ChainBatcher::new(p, cfg);
    let mut factors = Vec::new();
    for context in 0..n {
        // Weight of one (prefix, masked position) term after collapsing
        // the (n−c)! suffix orderings of Eq.-style E_σ E_l averaging.
        let factor = fact(n - context) / ((n - context) as f64 * fact(n));
        let mut cur = Vec::with_capacity(context);
        let mut used = vec![false; n];
        for_each_prefix(n, context, &mut cur, &mut used, &mut |prefix| {
            let mut order: Vec<usize> = prefix.to_vec();
            for j in 0..n {
                if !prefix.contains(&j) {
                    order.push(j);
                }
            }
            let perm = Permutation::from_order(order)?;
            let (slots, targets) = slots_for_order(block, &perm);
            let mut rows = slots[..context].to_vec();
            rows.extend(std::iter::repeat(slots[context]).take(n - context));
            let scored = (context..n).map(|i| (i, block[targets[i]])).collect();
            batcher.push(ScoredDraw {
                slots: rows,
                targets,
                mask: AttentionMask::parallel_generation(context, n - context)?,
                scored,
            })?;
            factors.push(factor);
            Ok(())
        })?;
    }
    let acc: f64 = batcher
        .finish()?
        .into_iter()
        .zip(factors)
        .map(|(sum, factor)| factor * sum)
        .sum();
    Ok(acc / n as f64)
}
