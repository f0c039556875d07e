//! Incremental decoding with cached keys and values.
//!
//! The cache holds per-layer K/V rows for every committed slot. Two
//! operations cover generation:
//!
//! * [`DecoderCache::extend`] appends slots whose targets are now known,
//!   attending causally over the cache plus the new slots, exactly as a
//!   from-scratch causal forward would.
//! * [`DecoderCache::query`] evaluates several candidate targets for one
//!   input slot (the newest committed token, or the begin anchor). Query
//!   rows attend the cache plus themselves only, mirroring one step of
//!   the parallel-generation mask, and leave the cache untouched.
//!
//! A slot's K/V depend on its announced target, so the newest committed
//! token cannot enter the cache until the next step picks targets; the
//! sampler keeps it pending and passes it as the query slot.

use crate::error::CoreError;
use crate::model::forward::{embed_decoder, modulated_ln, SlotInput};
use crate::model::params::Parameters;
use crate::model::{Family, ModelConfig};
use crate::tensor::{matmul, Real};
use crate::Result;

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    cfg: ModelConfig,
    /// Per layer, `[len, d_model]` with heads side by side (same column
    /// layout as the K and V thirds of the fused QKV projection).
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    len: usize,
}

enum Attend {
    /// Row `i` sees the cache and new rows `0..=i` (extension).
    CausalOverNew,
    /// Row `i` sees the cache and itself only (parallel queries).
    SelfOnly,
}

impl<T: Real> DecoderCache<T> {
    pub fn new(cfg: &ModelConfig) -> Result<DecoderCache<T>> {
        if cfg.family != Family::DecoderAnyOrder {
            return Err(CoreError::config("caches exist for decoders only"));
        }
        cfg.validate()?;
        Ok(DecoderCache {
            cfg: cfg.clone(),
            k: vec![Vec::new(); cfg.n_layers],
            v: vec![Vec::new(); cfg.n_layers],
            len: 0,
        })
    }

    /// Committed slots so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `slots` (with their announced targets) and returns their
    /// logits, `[slots.len(), V]`. Starting from an empty cache this
    /// equals a causal `forward_decoder` over the same slots.
    pub fn extend(
        &mut self,
        p: &Parameters<T>,
        slots: &[SlotInput],
        targets: &[usize],
    ) -> Result<Vec<T>> {
        self.validate_io(slots.len(), targets)?;
        let (x0, cond) = embed_decoder(p, &self.cfg, slots, targets);
        let (logits, new_kv) =
            self.run_rows(p, x0, cond, targets, Attend::CausalOverNew)?;
        for (layer, (nk, nv)) in new_kv.into_iter().enumerate() {
            self.k[layer].extend_from_slice(&nk);
            self.v[layer].extend_from_slice(&nv);
        }
        self.len += slots.len();
        Ok(logits)
    }

    /// Logits for `targets.len()` parallel queries sharing `slot` as
    /// input. The cache is not modified.
    pub fn query(
        &self,
        p: &Parameters<T>,
        slot: SlotInput,
        targets: &[usize],
    ) -> Result<Vec<T>> {
        self.validate_io(targets.len(), targets)?;
        let slots = vec![slot; targets.len()];
        let (x0, cond) = embed_decoder(p, &self.cfg, &slots, targets);
        let (logits, _) = self.run_rows(p, x0, cond, targets, Attend::SelfOnly)?;
        Ok(logits)
    }

    fn validate_io(&self, m: usize, targets: &[usize]) -> Result<()> {
        if m == 0 || targets.len() != m {
            return Err(CoreError::config("cache op needs matching, nonempty rows"));
        }
        if targets.iter().any(|&t| t >= self.cfg.ctx_len) {
            return Err(CoreError::config("target position out of range"));
        }
        Ok(())
    }

    /// Runs `m` rows through all blocks; returns logits and, per layer,
    /// the rows' K/V for appending.
    #[allow(clippy::type_complexity)]
    fn run_rows(
        &self,
        p: &Parameters<T>,
        x0: Vec<T>,
        cond: Option<Vec<T>>,
        targets: &[usize],
        attend: Attend,
    ) -> Result<(Vec<T>, Vec<(Vec<T>, Vec<T>)>)> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let m = targets.len();
        let heads = cfg.n_heads;
        let dh = cfg.d_head();
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut x = x0;
        let mut new_kv = Vec::with_capacity(cfg.n_layers);

        for (li, block) in p.blocks.iter().enumerate() {
            if let Some(tbl) = crate::model::forward::per_block_table(cfg, li) {
                let table = &p.tgt_tables[tbl];
                for (i, &t) in targets.iter().enumerate() {
                    let trow = &table.data[t * d..(t + 1) * d];
                    for j in 0..d {
                        x[i * d + j] += trow[j];
                    }
                }
            }
            let ada_out = block.ada.as_ref().map(|a| {
                let cond = cond.as_ref().expect("adaln cond");
                let tpe = cfg.target_pe_dim;
                let mut out = vec![T::zero(); m * 4 * d];
                matmul(&mut out, cond, &a.w.data, m, tpe, 4 * d);
                for row in out.chunks_exact_mut(4 * d) {
                    for (o, &b) in row.iter_mut().zip(&a.b.data) {
                        *o += b;
                    }
                }
                out
            });
            let (_, h1) = modulated_ln(&x, &block.ln1, ada_out.as_deref(), 0, m, d);
            let mut qkv = vec![T::zero(); m * 3 * d];
            matmul(&mut qkv, &h1, &block.w_qkv.data, m, d, 3 * d);
            for row in qkv.chunks_exact_mut(3 * d) {
                for (o, &b) in row.iter_mut().zip(&block.b_qkv.data) {
                    *o += b;
                }
            }
            let new_k: Vec<T> = (0..m)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| qkv[i * 3 * d + d + j])
                .collect();
            let new_v: Vec<T> = (0..m)
                .flat_map(|i| (0..d).map(move |j| (i, j)))
                .map(|(i, j)| qkv[i * 3 * d + 2 * d + j])
                .collect();

            let cache_k = &self.k[li];
            let cache_v = &self.v[li];
            let mut att = vec![T::zero(); m * d];
            let mut scores: Vec<T> = Vec::with_capacity(self.len + m);
            for i in 0..m {
                let new_upto = match attend {
                    Attend::CausalOverNew => i + 1,
                    Attend::SelfOnly => 0,
                };
                for h in 0..heads {
                    let q = &qkv[i * 3 * d + h * dh..i * 3 * d + (h + 1) * dh];
                    scores.clear();
                    let mut maxs = T::neg_infinity();
                    for kk in 0..self.len {
                        let krow = &cache_k[kk * d + h * dh..kk * d + (h + 1) * dh];
                        let mut s = T::zero();
                        for j in 0..dh {
                            s += q[j] * krow[j];
                        }
                        s *= scale;
                        scores.push(s);
                        if s > maxs {
                            maxs = s;
                        }
                    }
                    for nn in 0..new_upto {
                        let krow = &new_k[nn * d + h * dh..nn * d + (h + 1) * dh];
                        let mut s = T::zero();
                        for j in 0..dh {
                            s += q[j] * krow[j];
                        }
                        s *= scale;
                        scores.push(s);
                        if s > maxs {
                            maxs = s;
                        }
                    }
                    if matches!(attend, Attend::SelfOnly) {
                        let krow = &new_k[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut s = T::zero();
                        for j in 0..dh {
                            s += q[j] * krow[j];
                        }
                        s *= scale;
                        scores.push(s);
                        if s > maxs {
                            maxs = s;
                        }
                    }
                    let mut denom = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - maxs).exp();
                        denom += *s;
                    }
                    let inv = T::one() / denom;
                    let out = &mut att[i * d + h * dh..i * d + (h + 1) * dh];
                    for (kk, &w) in scores.iter().enumerate().take(self.len) {
                        let vrow = &cache_v[kk * d + h * dh..kk * d + (h + 1) * dh];
                        for j in 0..dh {
                            out[j] += w * inv * vrow[j];
                        }
                    }
                    for (off, &w) in scores[self.len..].iter().enumerate() {
                        let nn = match attend {
                            Attend::CausalOverNew => off,
                            Attend::SelfOnly => i,
                        };
                        let vrow = &new_v[nn * d + h * dh..nn * d + (h + 1) * dh];
                        for j in 0..dh {
                            out[j] += w * inv * vrow[j];
                        }
                    }
                }
            }
            let mut att_proj = vec![T::zero(); m * d];
            matmul(&mut att_proj, &att, &block.w_o.data, m, d, d);
            for (i, row) in att_proj.chunks_exact(d).enumerate() {
                for j in 0..d {
                    x[i * d + j] += row[j] + block.b_o.data[j];
                }
            }

            let (_, h2) = modulated_ln(&x, &block.ln2, ada_out.as_deref(), 1, m, d);
            let dm = 4 * d;
            let mut fc = vec![T::zero(); m * dm];
            matmul(&mut fc, &h2, &block.w_fc.data, m, d, dm);
            for row in fc.chunks_exact_mut(dm) {
                for (o, &b) in row.iter_mut().zip(&block.b_fc.data) {
                    *o += b;
                }
            }
            for u in fc.iter_mut() {
                *u = crate::model::forward::gelu(*u);
            }
            let mut proj = vec![T::zero(); m * d];
            matmul(&mut proj, &fc, &block.w_proj.data, m, dm, d);
            for (i, row) in proj.chunks_exact(d).enumerate() {
                for j in 0..d {
                    x[i * d + j] += row[j] + block.b_proj.data[j];
                }
            }
            new_kv.push((new_k, new_v));
        }

        let (_, xf) = modulated_ln(&x, &p.lnf, None, 0, m, d);
        let v = cfg.vocab_size;
        let mut logits = vec![T::zero(); m * v];
        matmul(&mut logits, &xf, &p.head.data, m, d, v);
        Ok((logits, new_kv))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::{forward_decoder, slots_for_order};
    use crate::model::mask::AttentionMask;
    use crate::model::{Family, Injection, ModelConfig};
    use crate::ordering::Permutation;

    fn cfg(injection: Injection) -> ModelConfig {
        ModelConfig {
            family: Family::DecoderAnyOrder,
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            ctx_len: 10,
            vocab_size: 11,
            injection,
            target_pe_dim: 6,
        }
    }

    fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn extend_matches_full_causal_forward() {
        for injection in [Injection::AddOnce, Injection::AdaLn, Injection::AddPerBlockLearned] {
            let cfg = cfg(injection);
            let p: Parameters<f32> = Parameters::init(&cfg, 3);
            let block: Vec<u32> = (0..8).map(|i| ((i * 5 + 2) % 11) as u32).collect();
            let perm = Permutation::from_order(vec![4, 1, 7, 0, 6, 2, 5, 3]).unwrap();
            let (slots, targets) = slots_for_order(&block, &perm);
            let full = forward_decoder(
                &p,
                &cfg,
                &slots,
                &targets,
                &AttentionMask::causal(8),
                false,
            )
            .unwrap();

            // Same slots fed in three chunks through the cache.
            let mut cache = DecoderCache::new(&cfg).unwrap();
            let mut got = Vec::new();
            for range in [0..3, 3..5, 5..8] {
                let logits = cache
                    .extend(&p, &slots[range.clone()], &targets[range])
                    .unwrap();
                got.extend_from_slice(&logits);
            }
            assert_eq!(cache.len(), 8);
            let diff = max_abs_diff(&got, &full.logits);
            assert!(diff < 1e-4, "{injection:?}: max diff {diff}");
        }
    }

    #[test]
    fn query_matches_parallel_mask_forward() {
        for injection in [Injection::AddOnce, Injection::AdaLn] {
            let cfg = cfg(injection);
            let p: Parameters<f32> = Parameters::init(&cfg, 9);
            let block: Vec<u32> = (0..6).map(|i| ((i * 3 + 1) % 11) as u32).collect();
            let perm = Permutation::from_order(vec![2, 5, 0, 3, 1, 4]).unwrap();
            let (slots, targets) = slots_for_order(&block, &perm);

            // Commit the first 4 slots; the 4th slot's own target changes
            // per query, so only slots 0..3 enter the cache.
            let mut cache = DecoderCache::new(&cfg).unwrap();
            cache.extend(&p, &slots[..4], &targets[..4]).unwrap();
            let query_slot = slots[4];
            let query_targets = [1usize, 4, 3];
            let got = cache.query(&p, query_slot, &query_targets).unwrap();

            // Reference: parallel-generation mask over committed + queries.
            let mut ref_slots = slots[..4].to_vec();
            let mut ref_targets = targets[..4].to_vec();
            for &t in &query_targets {
                ref_slots.push(query_slot);
                ref_targets.push(t);
            }
            let mask = AttentionMask::parallel_generation(4, 3).unwrap();
            let full = forward_decoder(&p, &cfg, &ref_slots, &ref_targets, &mask, false).unwrap();
            let v = cfg.vocab_size;
            let want = &full.logits[4 * v..];
            let diff = max_abs_diff(&got, want);
            assert!(diff < 1e-5, "{injection:?}: max diff {diff}");
        }
    }

    #[test]
    fn query_does_not_mutate_cache() {
        let cfg = cfg(Injection::AdaLn);
        let p: Parameters<f32> = Parameters::init(&cfg, 1);
        let mut cache = DecoderCache::new(&cfg).unwrap();
        cache
            .extend(&p, &[SlotInput::Begin], &[2])
            .unwrap();
        let a = cache.query(&p, SlotInput::Token { id: 3, pos: 2 }, &[0, 5]).unwrap();
        let b = cache.query(&p, SlotInput::Token { id: 3, pos: 2 }, &[0, 5]).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn encoder_family_cannot_build_cache() {
        let mut c = cfg(Injection::AddOnce);
        c.family = Family::EncoderMdm;
        assert!(DecoderCache::<f32>::new(&c).is_err());
    }
}
