//! Reverse-process generation for masked-diffusion models.
//!
//! Generation walks a time grid 1 = t_0 > t_1 > ... > t_T = 0. At each
//! step every still-masked position first draws Bernoulli(s/t) to decide
//! whether it stays masked; only the positions that unmask get their
//! conditionals computed, annealed, and sampled. The two stages together
//! are distribution-identical to sampling the full reverse kernel (mass
//! s/t on staying masked, the rest spread over tokens), but the model is
//! only consulted for positions that actually decode.
//!
//! Three engines share the identical step loop and random draws:
//!
//! * `decoder_cached` keeps a K/V cache over the committed chain and
//!   touches each sequence slot O(1) times across the whole run.
//! * `decoder_full_recompute` rebuilds the committed chain every step and
//!   scores the step's positions under the parallel-generation mask. Same
//!   conditionals as the cached engine, O(T) forwards.
//! * `encoder_full` re-encodes the full sequence (mask symbol at masked
//!   positions) every step.
//!
//! Every random decision for position `p` at step `k` comes from its own
//! stream, so cached and full-recompute runs with one seed emit identical
//! tokens. All softmax, annealing, and categorical draws run in f64; the
//! engines only differ in how logits are produced.
//!
//! The vocabulary's last id is the corpus mask symbol. It is not a legal
//! emission: its annealed probability is zeroed and the rest renormalized
//! before every token draw.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::cache::DecoderCache;
use crate::model::forward::{forward_decoder, forward_encoder, SlotInput};
use crate::model::mask::AttentionMask;
use crate::model::params::Parameters;
use crate::model::{Family, ModelConfig};
use crate::rng::{sample_categorical, sampler_stream};
use crate::tensor::Real;
use crate::Result;

/// How conditionals are computed during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    DecoderCached,
    DecoderFullRecompute,
    EncoderFull,
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::DecoderCached => "decoder_cached",
            Engine::DecoderFullRecompute => "decoder_full_recompute",
            Engine::EncoderFull => "encoder_full",
        })
    }
}

/// Time grid shape. Linear is the default everywhere; the geometric grid
/// spends more steps near t = 0 and exists as a config knob only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    #[default]
    Linear,
    /// t_k = floor^(k/T) for k < T, then the forced final 0.
    Geometric { floor: f64 },
}

/// Temperature and nucleus settings applied to every conditional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSpec {
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for AnnealSpec {
    fn default() -> Self {
        AnnealSpec { top_p: 1.0, temperature: 1.0 }
    }
}

impl AnnealSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoreError::config(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(CoreError::config(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub seq_len: usize,
    pub num_steps: usize,
    #[serde(default)]
    pub grid: GridKind,
    #[serde(default = "default_one")]
    pub top_p: f64,
    #[serde(default = "default_one")]
    pub temperature: f64,
    pub seed: u64,
    pub engine: Engine,
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(CoreError::config("seq_len must be positive"));
        }
        if self.num_steps == 0 {
            return Err(CoreError::config("num_steps must be at least 1"));
        }
        if let GridKind::Geometric { floor } = self.grid {
            if !(floor > 0.0 && floor < 1.0) {
                return Err(CoreError::config(format!(
                    "geometric grid floor must lie in (0, 1), got {floor}"
                )));
            }
        }
        self.anneal().validate()
    }

    pub fn anneal(&self) -> AnnealSpec {
        AnnealSpec { top_p: self.top_p, temperature: self.temperature }
    }

    /// The time grid t_0 = 1 > t_1 > ... > t_T = 0, length `num_steps + 1`.
    pub fn schedule(&self) -> Vec<f64> {
        match self.grid {
            GridKind::Linear => time_schedule(self.num_steps),
            GridKind::Geometric { floor } => geometric_schedule(self.num_steps, floor),
        }
    }
}

/// Linear time grid: t_k = 1 - k/T, with exact 1 and 0 endpoints.
pub fn time_schedule(num_steps: usize) -> Vec<f64> {
    assert!(num_steps >= 1, "need at least one step");
    (0..=num_steps)
        .map(|k| (num_steps - k) as f64 / num_steps as f64)
        .collect()
}

/// Geometric grid: t_k = floor^(k/T) for k < T, plus the forced final 0.
pub fn geometric_schedule(num_steps: usize, floor: f64) -> Vec<f64> {
    assert!(num_steps >= 1 && floor > 0.0 && floor < 1.0);
    let mut grid: Vec<f64> = (0..num_steps)
        .map(|k| floor.powf(k as f64 / num_steps as f64))
        .collect();
    grid.push(0.0);
    grid
}

/// One reverse-kernel draw for a masked position, split into the cheap
/// stay-masked stage and the token stage (the split is exact: the marginal
/// is s/t on staying masked and (1 - s/t) q0t[i] on token i).
///
/// Returns `None` when the position stays masked. `generate` runs the same
/// two stages inline so that the model is only consulted between them.
pub fn lemma1_draw(
    q0t: &[f64],
    s: f64,
    t: f64,
    rng: &mut impl Rng,
) -> Result<Option<usize>> {
    if !(0.0..=1.0).contains(&s) || !(t > 0.0 && t <= 1.0) || s >= t {
        return Err(CoreError::config(format!(
            "reverse kernel needs 0 <= s < t <= 1, got s = {s}, t = {t}"
        )));
    }
    if q0t.is_empty() || q0t.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(CoreError::config("q0t entries must be probabilities"));
    }
    let mass: f64 = q0t.iter().sum();
    if (mass - 1.0).abs() > 1e-5 {
        return Err(CoreError::numerical(format!(
            "q0t sums to {mass}, expected 1 within 1e-5"
        )));
    }
    if rng.gen::<f64>() < s / t {
        Ok(None)
    } else {
        Ok(Some(sample_categorical(rng, q0t)))
    }
}

/// Temperature then nucleus truncation, entirely in f64. Tokens are sorted
/// by descending probability (ties by ascending id); the smallest prefix
/// whose mass reaches `top_p` is kept, including the crossing token, and
/// renormalized.
pub fn anneal_logits(logits: &[f64], spec: &AnnealSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if logits.is_empty() || logits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::config("annealing needs finite, nonempty logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let inv_t = 1.0 / spec.temperature;
    let mut probs: Vec<f64> = logits.iter().map(|&x| ((x - max) * inv_t).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= z;
    }
    if spec.top_p < 1.0 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| {
            probs[b].partial_cmp(&probs[a]).expect("finite probs").then(a.cmp(&b))
        });
        let mut kept = 0.0;
        let mut cut = order.len();
        for (rank, &i) in order.iter().enumerate() {
            kept += probs[i];
            if kept >= spec.top_p {
                cut = rank + 1;
                break;
            }
        }
        for &i in &order[cut..] {
            probs[i] = 0.0;
        }
        let z: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= z;
        }
    }
    Ok(probs)
}

/// Mutable bookkeeping of one generation run. Committed and masked
/// positions partition `0..n` by construction: a position is masked
/// exactly until `commit` stores its token, and commits are final.
#[derive(Debug, Clone)]
pub struct SamplerState {
    tokens: Vec<Option<u32>>,
    commit_order: Vec<usize>,
    step: usize,
}

impl SamplerState {
    pub fn new(seq_len: usize) -> SamplerState {
        SamplerState {
            tokens: vec![None; seq_len],
            commit_order: Vec::with_capacity(seq_len),
            step: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Still-masked positions in ascending order.
    pub fn masked(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].is_none()).collect()
    }

    pub fn committed_count(&self) -> usize {
        self.commit_order.len()
    }

    pub fn token(&self, pos: usize) -> Option<u32> {
        self.tokens[pos]
    }

    /// Positions in the order they were committed.
    pub fn commit_order(&self) -> &[usize] {
        &self.commit_order
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn commit(&mut self, pos: usize, token: u32) -> Result<()> {
        if self.tokens[pos].is_some() {
            return Err(CoreError::config(format!(
                "position {pos} is already committed"
            )));
        }
        self.tokens[pos] = Some(token);
        self.commit_order.push(pos);
        Ok(())
    }
}

/// Per-step trace record, one JSONL line in the CLI's trace output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub t: f64,
    pub s: f64,
    pub decoded_count: usize,
    pub wall_ms: f64,
}

/// A finished generation: every position committed exactly once.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub commit_order: Vec<usize>,
    pub trace: Vec<TraceStep>,
}

enum EngineState<T> {
    Cached { cache: DecoderCache<T>, pending: SlotInput },
    FullRecompute,
    Encoder,
}

impl<T: Real> EngineState<T> {
    fn new(engine: Engine, cfg: &ModelConfig) -> Result<EngineState<T>> {
        match (engine, cfg.family) {
            (Engine::DecoderCached, Family::DecoderAnyOrder) => Ok(EngineState::Cached {
                cache: DecoderCache::new(cfg)?,
                pending: SlotInput::Begin,
            }),
            (Engine::DecoderFullRecompute, Family::DecoderAnyOrder) => {
                Ok(EngineState::FullRecompute)
            }
            (Engine::EncoderFull, Family::EncoderMdm) => Ok(EngineState::Encoder),
            (engine, family) => Err(CoreError::config(format!(
                "engine {engine} does not drive the {family:?} family"
            ))),
        }
    }

    /// Logits rows, `[decode.len(), V]` in f64, for the still-masked
    /// positions `decode`, each conditioned on everything committed.
    fn conditionals(
        &self,
        p: &Parameters<T>,
        cfg: &ModelConfig,
        state: &SamplerState,
        decode: &[usize],
    ) -> Result<Vec<f64>> {
        let committed = |pos: usize| state.token(pos).expect("committed position");
        match self {
            EngineState::Cached { cache, pending } => {
                let logits = cache.query(p, *pending, decode)?;
                Ok(logits.iter().map(|v| v.as_f64()).collect())
            }
            EngineState::FullRecompute => {
                let order = state.commit_order();
                let c = order.len();
                let last = match order.last() {
                    None => SlotInput::Begin,
                    Some(&pos) => SlotInput::Token { id: committed(pos), pos },
                };
                let mut slots = Vec::with_capacity(c + decode.len());
                let mut targets = Vec::with_capacity(c + decode.len());
                for (i, &pos) in order.iter().enumerate() {
                    slots.push(if i == 0 {
                        SlotInput::Begin
                    } else {
                        let prev = order[i - 1];
                        SlotInput::Token { id: committed(prev), pos: prev }
                    });
                    targets.push(pos);
                }
                for &pos in decode {
                    slots.push(last);
                    targets.push(pos);
                }
                let mask = AttentionMask::parallel_generation(c, decode.len())?;
                let out = forward_decoder(p, cfg, &slots, &targets, &mask, false)?;
                let v = cfg.vocab_size;
                Ok(out.logits[c * v..].iter().map(|x| x.as_f64()).collect())
            }
            EngineState::Encoder => {
                let n = state.seq_len();
                let mask_id = (cfg.vocab_size - 1) as u32;
                let tokens: Vec<u32> =
                    (0..n).map(|i| state.token(i).unwrap_or(mask_id)).collect();
                let positions: Vec<usize> = (0..n).collect();
                let out = forward_encoder(p, cfg, &tokens, &positions, false)?;
                let v = cfg.vocab_size;
                let mut rows = Vec::with_capacity(decode.len() * v);
                for &pos in decode {
                    rows.extend(out.logits[pos * v..(pos + 1) * v].iter().map(|x| x.as_f64()));
                }
                Ok(rows)
            }
        }
    }

    /// Folds the step's newly committed `(position, token)` pairs into the
    /// engine. Only the cached engine has state: the rows whose announced
    /// targets just became known enter the cache, and the newest token
    /// becomes the pending query slot.
    fn absorb(&mut self, p: &Parameters<T>, newly: &[(usize, u32)]) -> Result<()> {
        if let EngineState::Cached { cache, pending } = self {
            let mut slots = Vec::with_capacity(newly.len());
            let mut targets = Vec::with_capacity(newly.len());
            for (j, &(pos, _)) in newly.iter().enumerate() {
                slots.push(if j == 0 {
                    *pending
                } else {
                    let (prev_pos, prev_tok) = newly[j - 1];
                    SlotInput::Token { id: prev_tok, pos: prev_pos }
                });
                targets.push(pos);
            }
            cache.extend(p, &slots, &targets)?;
            let (pos, id) = *newly.last().expect("absorb needs at least one commit");
            *pending = SlotInput::Token { id, pos };
        }
        Ok(())
    }
}

/// Runs the reverse process and returns the generated block plus a
/// per-step trace. Positions decoded within one step join `commit_order`
/// in ascending position; that fixed rule is what defines the conditioning
/// order seen by later steps.
pub fn generate<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    gen: &GenerationConfig,
) -> Result<Generation> {
    cfg.validate()?;
    gen.validate()?;
    if gen.seq_len > cfg.ctx_len {
        return Err(CoreError::config(format!(
            "seq_len {} exceeds the model context {}",
            gen.seq_len, cfg.ctx_len
        )));
    }
    if cfg.vocab_size < 2 {
        return Err(CoreError::config(
            "generation needs at least one non-mask symbol",
        ));
    }
    let mut engine = EngineState::new(gen.engine, cfg)?;
    let mut state = SamplerState::new(gen.seq_len);
    let schedule = gen.schedule();
    let anneal = gen.anneal();
    let mask_id = cfg.vocab_size - 1;
    let v = cfg.vocab_size;
    let mut trace = Vec::with_capacity(gen.num_steps);

    for k in 1..=gen.num_steps {
        let started = Instant::now();
        let (t, s) = (schedule[k - 1], schedule[k]);
        let ratio = s / t;

        // Stage one of the reverse kernel: each masked position decides
        // whether it decodes this step. The stream is kept so stage two
        // continues it after the model runs.
        let mut decode: Vec<(usize, ChaCha8Rng)> = Vec::new();
        for pos in state.masked() {
            let mut rng = sampler_stream(gen.seed, k, pos);
            if rng.gen::<f64>() >= ratio {
                decode.push((pos, rng));
            }
        }

        if !decode.is_empty() {
            let positions: Vec<usize> = decode.iter().map(|d| d.0).collect();
            let rows = engine.conditionals(p, cfg, &state, &positions)?;
            let mut newly = Vec::with_capacity(decode.len());
            for (j, (pos, rng)) in decode.iter_mut().enumerate() {
                let mut probs = anneal_logits(&rows[j * v..(j + 1) * v], &anneal)?;
                let reserved = probs[mask_id];
                if 1.0 - reserved <= 0.0 {
                    return Err(CoreError::numerical(
                        "the model put its whole nucleus on the reserved mask id",
                    ));
                }
                probs[mask_id] = 0.0;
                let inv = 1.0 / (1.0 - reserved);
                for q in &mut probs {
                    *q *= inv;
                }
                let token = sample_categorical(rng, &probs) as u32;
                newly.push((*pos, token));
            }
            for &(pos, token) in &newly {
                state.commit(pos, token)?;
            }
            engine.absorb(p, &newly)?;
        }

        state.step = k;
        trace.push(TraceStep {
            step: k,
            t,
            s,
            decoded_count: decode.len(),
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    debug_assert!(state.masked().is_empty(), "t_T = 0 forces a full decode");
    let tokens = state.tokens.iter().map(|t| t.expect("all committed")).collect();
    Ok(Generation { tokens, commit_order: state.commit_order, trace })
}

/// One bench measurement: `median_ms` over the timed runs of a full
/// `generate` call at (`n`, `num_steps`).
#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub engine: Engine,
    pub n: usize,
    pub num_steps: usize,
    pub median_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    /// Log-log slope of median time against n, fitted over the T = n
    /// points, per engine. Empty when fewer than two sizes were measured.
    pub slopes: BTreeMap<String, f64>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("engine,n,T,median_ms,slope\n");
        for pt in &self.points {
            let slope = self
                .slopes
                .get(&pt.engine.to_string())
                .map_or(String::from(""), |s| format!("{s:.4}"));
            out.push_str(&format!(
                "{},{},{},{:.4},{slope}\n",
                pt.engine, pt.n, pt.num_steps, pt.median_ms
            ));
        }
        out
    }
}

/// Times `generate` for every engine and sequence length, at T = n plus
/// any extra step counts, with one warmup run excluded per configuration.
pub fn speed_bench<T: Real>(
    p: &Parameters<T>,
    cfg: &ModelConfig,
    engines: &[Engine],
    seq_lens: &[usize],
    extra_steps: &[usize],
    runs: usize,
    seed: u64,
) -> Result<BenchReport> {
    if runs == 0 || seq_lens.is_empty() || engines.is_empty() {
        return Err(CoreError::config("bench needs engines, sizes, and runs"));
    }
    let mut points = Vec::new();
    for &engine in engines {
        for &n in seq_lens {
            let mut step_grid = vec![n];
            step_grid.extend(extra_steps.iter().copied().filter(|&t| t != n && t >= 1));
            for num_steps in step_grid {
                let gen = GenerationConfig {
                    seq_len: n,
                    num_steps,
                    grid: GridKind::Linear,
                    top_p: 1.0,
                    temperature: 1.0,
                    seed,
                    engine,
                };
                generate(p, cfg, &gen)?; // warmup
                let mut times = Vec::with_capacity(runs);
                for _ in 0..runs {
                    let started = Instant::now();
                    generate(p, cfg, &gen)?;
                    times.push(started.elapsed().as_secs_f64() * 1e3);
                }
                times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
                let mid = times.len() / 2;
                let median_ms = if times.len() % 2 == 1 {
                    times[mid]
                } else {
                    0.5 * (times[mid - 1] + times[mid])
                };
                points.push(BenchPoint { engine, n, num_steps, median_ms });
            }
        }
    }

    let mut slopes = BTreeMap::new();
    for &engine in engines {
        let pts: Vec<(f64, f64)> = points
            .iter()
            .filter(|pt| pt.engine == engine && pt.num_steps == pt.n && pt.median_ms > 0.0)
            .map(|pt| ((pt.n as f64).ln(), pt.median_ms.ln()))
            .collect();
        if pts.len() >= 2 {
            let m = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
            let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let var: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            if var > 0.0 {
                slopes.insert(engine.to_string(), cov / var);
            }
        }
    }
    Ok(BenchReport { points, slopes })
}
