//! The training loop.
//!
//! Decoders train on permuted chains drawn from the order policy (the
//! identity policy recovers plain left-to-right training); encoders
//! train on masked-diffusion draws with the ELBO weight. Either way the
//! per-step loss is an unbiased per-token estimate of the model's
//! any-order likelihood, so curves from different families are
//! comparable.
//!
//! Every run is deterministic: data order, factorization orders, and
//! initialization all derive from the config seed through fixed
//! domain-separated streams, and execution is single-threaded.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{BatchIter, PackedDataset};
use crate::error::CoreError;
use crate::model::checkpoint::save_checkpoint;
use crate::model::{
    backward, forward_decoder, forward_encoder, slots_for_order, AttentionMask, Family,
    ModelConfig, Parameters,
};
use crate::objectives::loss::{aoar_nll, ar_nll, mdm_nll, MdmWeighting};
use crate::objectives::optim::{AdamW, EmaState};
use crate::ordering::{sample_permutation, OrderPolicy};
use crate::rng::order_stream;
use crate::tensor::{log_softmax_at, softmax_row};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub batch_tokens: usize,
    pub total_steps: usize,
    /// Linear warmup length; defaults to 2% of the run.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    pub order_policy: OrderPolicy,
    #[serde(default = "default_ema_decays")]
    pub ema_decays: Vec<f64>,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Validation blocks scored per evaluation.
    #[serde(default = "default_eval_blocks")]
    pub eval_blocks: usize,
    /// Sampled orders (or masking draws) per validation block.
    #[serde(default = "default_eval_orders")]
    pub eval_orders: usize,
    /// Raw-weight checkpoint cadence; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_interval: usize,
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_ema_decays() -> Vec<f64> {
    vec![0.9999]
}
fn default_eval_interval() -> usize {
    250
}
fn default_eval_blocks() -> usize {
    16
}
fn default_eval_orders() -> usize {
    2
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(CoreError::config("learning_rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(CoreError::config("Adam betas must lie in [0, 1)"));
        }
        if self.batch_tokens == 0 || self.total_steps == 0 {
            return Err(CoreError::config("batch_tokens and total_steps must be positive"));
        }
        if self.eval_interval == 0 || self.eval_blocks == 0 || self.eval_orders == 0 {
            return Err(CoreError::config("eval settings must be positive"));
        }
        if self.ema_decays.iter().any(|&d| !(0.0..1.0).contains(&d)) {
            return Err(CoreError::config("EMA decays must lie in [0, 1)"));
        }
        self.order_policy.validate()
    }

    pub fn warmup(&self) -> usize {
        self.warmup_steps
            .unwrap_or_else(|| (self.total_steps / 50).max(1))
    }

    /// Learning rate for 0-based step `k`: linear warmup, then constant
    /// or a cosine glide to zero.
    pub fn lr_at(&self, k: usize) -> f64 {
        let w = self.warmup();
        if k + 1 <= w {
            return self.learning_rate * (k + 1) as f64 / w as f64;
        }
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let span = (self.total_steps.saturating_sub(w)).max(1) as f64;
                let prog = (k + 1 - w) as f64 / span;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos())
            }
        }
    }
}

/// Warmup-ramped EMA decay: `min(decay, (1+k)/(10+k))` after `k`
/// updates. Without the ramp a shadow at decay 0.9999 would still be
/// mostly the random initialization after a few thousand steps; with it
/// the shadow starts as a running average and converges to the
/// configured decay.
pub fn ramped_decay(decay: f64, updates_done: u64) -> f64 {
    let k = updates_done as f64;
    decay.min((1.0 + k) / (10.0 + k))
}

/// One evaluation row of the metrics stream (JSON per line).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    /// Mean training loss over the window since the previous row.
    pub train_loss: f64,
    pub lr: f64,
    /// Left-to-right validation nll; absent for encoders.
    pub val_l2r_nll: Option<f64>,
    pub val_anyorder_nll: f64,
    /// Keyed by formatted decay, e.g. "0.9999".
    pub ema: BTreeMap<String, EmaEval>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmaEval {
    pub val_l2r_nll: Option<f64>,
    pub val_anyorder_nll: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub final_train_loss: f64,
    pub eval_rows: usize,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub mcfg: ModelConfig,
    pub tcfg: TrainConfig,
    pub params: Parameters<f32>,
    pub emas: Vec<EmaState<f32>>,
    opt: AdamW<f32>,
    grads: Parameters<f32>,
    pub step: usize,
}

impl Trainer {
    pub fn new(mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<Trainer> {
        mcfg.validate()?;
        tcfg.validate()?;
        if mcfg.family == Family::EncoderMdm
            && !matches!(tcfg.order_policy, OrderPolicy::UniformRandom)
        {
            return Err(CoreError::config(
                "encoder training draws masks uniformly; set order_policy to uniform_random",
            ));
        }
        let params = Parameters::init(mcfg, tcfg.seed);
        let opt = AdamW::new(
            &params,
            tcfg.adam_beta1,
            tcfg.adam_beta2,
            tcfg.adam_eps,
            tcfg.weight_decay,
        )?;
        let emas = tcfg
            .ema_decays
            .iter()
            .map(|&d| EmaState::new(d, &params))
            .collect::<Result<Vec<_>>>()?;
        let grads = params.zeros_like();
        Ok(Trainer {
            mcfg: mcfg.clone(),
            tcfg: tcfg.clone(),
            params,
            emas,
            opt,
            grads,
            step: 0,
        })
    }

    /// One optimizer step on a batch of blocks. Returns the batch's
    /// per-token training loss.
    pub fn train_step(&mut self, blocks: &[&[u32]]) -> Result<f64> {
        if blocks.is_empty() {
            return Err(CoreError::config("empty batch"));
        }
        for (_, t) in self.grads.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let total_tokens: usize = blocks.iter().map(|b| b.len()).sum();
        let inv = 1.0f32 / total_tokens as f32;
        let v = self.mcfg.vocab_size;
        let mut loss_total = 0.0f64;

        for (si, block) in blocks.iter().enumerate() {
            let n = block.len();
            let mut rng = order_stream(self.tcfg.seed, self.step, si);
            match self.mcfg.family {
                Family::DecoderAnyOrder => {
                    let perm = sample_permutation(&self.tcfg.order_policy, n, &mut rng);
                    let (slots, targets) = slots_for_order(block, &perm);
                    let out = forward_decoder(
                        &self.params,
                        &self.mcfg,
                        &slots,
                        &targets,
                        &AttentionMask::causal(n),
                        true,
                    )?;
                    let mut dlogits = vec![0.0f32; n * v];
                    for i in 0..n {
                        let row = &out.logits[i * v..(i + 1) * v];
                        let label = block[targets[i]] as usize;
                        loss_total -= log_softmax_at(row, label);
                        let drow = &mut dlogits[i * v..(i + 1) * v];
                        softmax_row(drow, row);
                        drow[label] -= 1.0;
                        drow.iter_mut().for_each(|x| *x *= inv);
                    }
                    backward(&self.params, &self.mcfg, &out, &dlogits, &mut self.grads)?;
                }
                Family::EncoderMdm => {
                    let perm = sample_permutation(&OrderPolicy::UniformRandom, n, &mut rng);
                    let l: usize = rng.gen_range(1..=n);
                    let context = l - 1;
                    let mut observed = vec![false; n];
                    for &pos in &perm.order()[..context] {
                        observed[pos] = true;
                    }
                    let mask_id = (v - 1) as u32;
                    let tokens: Vec<u32> = block
                        .iter()
                        .zip(&observed)
                        .map(|(&t, &o)| if o { t } else { mask_id })
                        .collect();
                    let positions: Vec<usize> = (0..n).collect();
                    let out =
                        forward_encoder(&self.params, &self.mcfg, &tokens, &positions, true)?;
                    let w = n as f64 / (n - context) as f64;
                    let mut dlogits = vec![0.0f32; n * v];
                    for j in 0..n {
                        if observed[j] {
                            continue;
                        }
                        let row = &out.logits[j * v..(j + 1) * v];
                        let label = block[j] as usize;
                        loss_total -= w * log_softmax_at(row, label);
                        let drow = &mut dlogits[j * v..(j + 1) * v];
                        softmax_row(drow, row);
                        drow[label] -= 1.0;
                        drow.iter_mut().for_each(|x| *x *= inv * w as f32);
                    }
                    backward(&self.params, &self.mcfg, &out, &dlogits, &mut self.grads)?;
                }
            }
        }

        let loss = loss_total / total_tokens as f64;
        if !loss.is_finite() {
            return Err(CoreError::numerical(format!(
                "non-finite training loss at step {}",
                self.step
            )));
        }
        self.opt
            .step(&mut self.params, &self.grads, self.tcfg.lr_at(self.step))?;
        for ema in &mut self.emas {
            let d = ramped_decay(ema.decay, ema.step);
            ema.update_with(&self.params, d)?;
        }
        self.step += 1;
        Ok(loss)
    }

    fn eval_pair(
        &self,
        params: &Parameters<f32>,
        val: &[&[u32]],
    ) -> Result<(Option<f64>, f64)> {
        match self.mcfg.family {
            Family::DecoderAnyOrder => {
                let l2r = ar_nll(params, &self.mcfg, val)?.nll_per_token;
                let ao = aoar_nll(
                    params,
                    &self.mcfg,
                    val,
                    &OrderPolicy::UniformRandom,
                    self.tcfg.eval_orders,
                    self.tcfg.seed,
                )?
                .nll_per_token;
                Ok((Some(l2r), ao))
            }
            Family::EncoderMdm => {
                let ao = mdm_nll(
                    params,
                    &self.mcfg,
                    val,
                    self.tcfg.eval_orders,
                    MdmWeighting::Elbo,
                    self.tcfg.seed,
                )?
                .nll_per_token;
                Ok((None, ao))
            }
        }
    }

    fn eval_row(&self, val: &[&[u32]], window: &[f64]) -> Result<EvalRow> {
        let (val_l2r_nll, val_anyorder_nll) = self.eval_pair(&self.params, val)?;
        let mut ema = BTreeMap::new();
        for e in &self.emas {
            let (l2r, ao) = self.eval_pair(&e.shadow, val)?;
            ema.insert(
                format!("{}", e.decay),
                EmaEval {
                    val_l2r_nll: l2r,
                    val_anyorder_nll: ao,
                },
            );
        }
        let train_loss = if window.is_empty() {
            f64::NAN
        } else {
            window.iter().sum::<f64>() / window.len() as f64
        };
        Ok(EvalRow {
            step: self.step,
            train_loss,
            lr: self.tcfg.lr_at(self.step.saturating_sub(1)),
            val_l2r_nll,
            val_anyorder_nll,
            ema,
        })
    }

    fn write_checkpoint(
        &self,
        dir: &Path,
        name: &str,
        params: &Parameters<f32>,
        kind: &str,
        decay: Option<f64>,
    ) -> Result<PathBuf> {
        let path = dir.join(name);
        let meta = serde_json::json!({
            "step": self.step,
            "kind": kind,
            "ema_decay": decay,
            "train_seed": self.tcfg.seed,
        });
        save_checkpoint(&path, params, &self.mcfg, &meta)?;
        Ok(path)
    }

    /// Runs the configured number of steps, appending one JSON line to
    /// `metrics` per evaluation. Checkpoints go to `ckpt_dir` when
    /// given: raw weights at every `checkpoint_interval`, raw plus every
    /// EMA shadow at the end.
    pub fn run(
        &mut self,
        train: &PackedDataset,
        val: &PackedDataset,
        metrics: &mut dyn io::Write,
        ckpt_dir: Option<&Path>,
    ) -> Result<RunSummary> {
        if train.ctx_len() > self.mcfg.ctx_len {
            return Err(CoreError::config("dataset blocks exceed the model context"));
        }
        if val.is_empty() {
            return Err(CoreError::config("empty validation split"));
        }
        let batch_blocks = (self.tcfg.batch_tokens / train.ctx_len()).max(1);
        let mut iter = BatchIter::new(train, batch_blocks, self.tcfg.seed)?;
        let val_blocks: Vec<&[u32]> =
            val.blocks().take(self.tcfg.eval_blocks).collect();

        let mut window = Vec::new();
        let mut last_loss = f64::NAN;
        let mut eval_rows = 0usize;
        let mut checkpoints = Vec::new();
        for k in 0..self.tcfg.total_steps {
            let batch = iter.next_batch();
            let loss = self.train_step(&batch)?;
            window.push(loss);
            last_loss = loss;
            let done = k + 1 == self.tcfg.total_steps;
            if (k + 1) % self.tcfg.eval_interval == 0 || done {
                let row = self.eval_row(&val_blocks, &window)?;
                serde_json::to_writer(&mut *metrics, &row)
                    .map_err(|e| CoreError::format(format!("metrics row: {e}")))?;
                metrics.write_all(b"\n")?;
                window.clear();
                eval_rows += 1;
            }
            if let Some(dir) = ckpt_dir {
                let interval = self.tcfg.checkpoint_interval;
                if interval > 0 && (k + 1) % interval == 0 && !done {
                    checkpoints.push(self.write_checkpoint(
                        dir,
                        &format!("step{:06}.ckpt", k + 1),
                        &self.params,
                        "raw",
                        None,
                    )?);
                }
            }
        }
        if let Some(dir) = ckpt_dir {
            checkpoints.push(self.write_checkpoint(dir, "final.ckpt", &self.params, "raw", None)?);
            for e in &self.emas {
                let name = format!("final_ema{}.ckpt", e.decay);
                checkpoints.push(self.write_checkpoint(
                    dir,
                    &name,
                    &e.shadow,
                    "ema",
                    Some(e.decay),
                )?);
            }
        }
        metrics.flush()?;
        Ok(RunSummary {
            steps: self.step,
            final_train_loss: last_loss,
            eval_rows,
            checkpoints,
        })
    }
}
