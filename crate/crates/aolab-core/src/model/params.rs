//! Parameter containers, initialization, and uniform tensor traversal.
//!
//! The optimizer, EMA tracker, and checkpoint writer all walk parameters
//! through [`Parameters::tensors`] / [`Parameters::tensors_mut`], which
//! visit tensors in one fixed, documented order. Initialization draws in
//! that same order from a dedicated stream, so two models built from the
//! same seed and config are bitwise identical.

use rand_chacha::ChaCha8Rng;

use crate::model::{Family, Injection, ModelConfig};
use crate::rng::{self, Domain};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub g: Tensor<T>,
    pub b: Tensor<T>,
}

/// Zero-initialized projection from the target-position code to per-block
/// layer-norm modulation `(scale1, shift1, scale2, shift2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaParams<T> {
    pub w: Tensor<T>, // [target_pe_dim, 4 * d_model]
    pub b: Tensor<T>, // [4 * d_model]
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub w_qkv: Tensor<T>, // [d, 3d]
    pub b_qkv: Tensor<T>, // [3d]
    pub w_o: Tensor<T>,   // [d, d]
    pub b_o: Tensor<T>,   // [d]
    pub ln2: LayerNormParams<T>,
    pub w_fc: Tensor<T>,   // [d, 4d]
    pub b_fc: Tensor<T>,   // [4d]
    pub w_proj: Tensor<T>, // [4d, d]
    pub b_proj: Tensor<T>, // [d]
    pub ada: Option<AdaParams<T>>,
}

/// All learnable state for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub tok_emb: Tensor<T>, // [V, d]
    pub pos_emb: Tensor<T>, // [ctx, d]
    /// Input embedding of the begin-of-order slot (decoder only).
    pub begin_emb: Option<Tensor<T>>, // [d]
    /// Target-position tables. Empty for adaln and for encoders; one table
    /// for add_once and add_per_block_shared; `n_layers + 1` independent
    /// tables (input first) for add_per_block_learned.
    pub tgt_tables: Vec<Tensor<T>>, // each [ctx, d]
    /// Target-position code for adaln. [ctx, target_pe_dim]
    pub tgt_pe: Option<Tensor<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf: LayerNormParams<T>,
    pub head: Tensor<T>, // [d, V]
}

impl<T: Real> Parameters<T> {
    /// Random initialization: embeddings and fan-in matrices at std 0.02,
    /// residual-output matrices scaled down by sqrt(2 * n_layers), biases
    /// and modulation projections at zero, layer-norm gains at one.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Parameters<T> {
        let mut rng = rng::stream(seed, Domain::Init, 0);
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let ctx = cfg.ctx_len;
        let std = 0.02;
        let resid_std = 0.02 / (2.0 * cfg.n_layers as f64).sqrt();

        let decoder = cfg.family == Family::DecoderAnyOrder;
        let tok_emb = normal_tensor(&mut rng, &[v, d], std);
        let pos_emb = normal_tensor(&mut rng, &[ctx, d], std);
        let begin_emb = decoder.then(|| normal_tensor(&mut rng, &[d], std));
        let n_tables = if decoder {
            match cfg.injection {
                Injection::AddOnce | Injection::AddPerBlockShared => 1,
                Injection::AddPerBlockLearned => cfg.n_layers + 1,
                Injection::AdaLn => 0,
            }
        } else {
            0
        };
        let tgt_tables = (0..n_tables)
            .map(|_| normal_tensor(&mut rng, &[ctx, d], std))
            .collect();
        let tgt_pe = (decoder && cfg.injection == Injection::AdaLn)
            .then(|| normal_tensor(&mut rng, &[ctx, cfg.target_pe_dim], std));

        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1: ln_init(d),
                w_qkv: normal_tensor(&mut rng, &[d, 3 * d], std),
                b_qkv: Tensor::zeros(&[3 * d]),
                w_o: normal_tensor(&mut rng, &[d, d], resid_std),
                b_o: Tensor::zeros(&[d]),
                ln2: ln_init(d),
                w_fc: normal_tensor(&mut rng, &[d, 4 * d], std),
                b_fc: Tensor::zeros(&[4 * d]),
                w_proj: normal_tensor(&mut rng, &[4 * d, d], resid_std),
                b_proj: Tensor::zeros(&[d]),
                ada: (decoder && cfg.injection == Injection::AdaLn).then(|| AdaParams {
                    w: Tensor::zeros(&[cfg.target_pe_dim, 4 * d]),
                    b: Tensor::zeros(&[4 * d]),
                }),
            })
            .collect();

        Parameters {
            tok_emb,
            pos_emb,
            begin_emb,
            tgt_tables,
            tgt_pe,
            blocks,
            lnf: ln_init(d),
            head: normal_tensor(&mut rng, &[d, v], std),
        }
    }

    /// All-zero parameters with the shapes `cfg` dictates. Checkpoint
    /// loading fills these in by name.
    pub fn zeros(cfg: &ModelConfig) -> Parameters<T> {
        let d = cfg.d_model;
        let decoder = cfg.family == Family::DecoderAnyOrder;
        let n_tables = if decoder {
            match cfg.injection {
                Injection::AddOnce | Injection::AddPerBlockShared => 1,
                Injection::AddPerBlockLearned => cfg.n_layers + 1,
                Injection::AdaLn => 0,
            }
        } else {
            0
        };
        Parameters {
            tok_emb: Tensor::zeros(&[cfg.vocab_size, d]),
            pos_emb: Tensor::zeros(&[cfg.ctx_len, d]),
            begin_emb: decoder.then(|| Tensor::zeros(&[d])),
            tgt_tables: (0..n_tables).map(|_| Tensor::zeros(&[cfg.ctx_len, d])).collect(),
            tgt_pe: (decoder && cfg.injection == Injection::AdaLn)
                .then(|| Tensor::zeros(&[cfg.ctx_len, cfg.target_pe_dim])),
            blocks: (0..cfg.n_layers)
                .map(|_| BlockParams {
                    ln1: LayerNormParams { g: Tensor::zeros(&[d]), b: Tensor::zeros(&[d]) },
                    w_qkv: Tensor::zeros(&[d, 3 * d]),
                    b_qkv: Tensor::zeros(&[3 * d]),
                    w_o: Tensor::zeros(&[d, d]),
                    b_o: Tensor::zeros(&[d]),
                    ln2: LayerNormParams { g: Tensor::zeros(&[d]), b: Tensor::zeros(&[d]) },
                    w_fc: Tensor::zeros(&[d, 4 * d]),
                    b_fc: Tensor::zeros(&[4 * d]),
                    w_proj: Tensor::zeros(&[4 * d, d]),
                    b_proj: Tensor::zeros(&[d]),
                    ada: (decoder && cfg.injection == Injection::AdaLn).then(|| AdaParams {
                        w: Tensor::zeros(&[cfg.target_pe_dim, 4 * d]),
                        b: Tensor::zeros(&[4 * d]),
                    }),
                })
                .collect(),
            lnf: LayerNormParams { g: Tensor::zeros(&[d]), b: Tensor::zeros(&[d]) },
            head: Tensor::zeros(&[d, cfg.vocab_size]),
        }
    }

    /// Same structure, all zeros. Gradient and optimizer-moment buffers.
    pub fn zeros_like(&self) -> Parameters<T> {
        let z = |t: &Tensor<T>| Tensor::zeros(&t.shape);
        Parameters {
            tok_emb: z(&self.tok_emb),
            pos_emb: z(&self.pos_emb),
            begin_emb: self.begin_emb.as_ref().map(z),
            tgt_tables: self.tgt_tables.iter().map(z).collect(),
            tgt_pe: self.tgt_pe.as_ref().map(z),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1: LayerNormParams { g: z(&b.ln1.g), b: z(&b.ln1.b) },
                    w_qkv: z(&b.w_qkv),
                    b_qkv: z(&b.b_qkv),
                    w_o: z(&b.w_o),
                    b_o: z(&b.b_o),
                    ln2: LayerNormParams { g: z(&b.ln2.g), b: z(&b.ln2.b) },
                    w_fc: z(&b.w_fc),
                    b_fc: z(&b.b_fc),
                    w_proj: z(&b.w_proj),
                    b_proj: z(&b.b_proj),
                    ada: b.ada.as_ref().map(|a| AdaParams { w: z(&a.w), b: z(&a.b) }),
                })
                .collect(),
            lnf: LayerNormParams { g: z(&self.lnf.g), b: z(&self.lnf.b) },
            head: z(&self.head),
        }
    }

    /// Named tensors in traversal order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("tok_emb".into(), &self.tok_emb));
        out.push(("pos_emb".into(), &self.pos_emb));
        if let Some(t) = &self.begin_emb {
            out.push(("begin_emb".into(), t));
        }
        for (i, t) in self.tgt_tables.iter().enumerate() {
            out.push((format!("tgt_table.{i}"), t));
        }
        if let Some(t) = &self.tgt_pe {
            out.push(("tgt_pe".into(), t));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block.{l}.ln1.g"), &b.ln1.g));
            out.push((format!("block.{l}.ln1.b"), &b.ln1.b));
            out.push((format!("block.{l}.w_qkv"), &b.w_qkv));
            out.push((format!("block.{l}.b_qkv"), &b.b_qkv));
            out.push((format!("block.{l}.w_o"), &b.w_o));
            out.push((format!("block.{l}.b_o"), &b.b_o));
            out.push((format!("block.{l}.ln2.g"), &b.ln2.g));
            out.push((format!("block.{l}.ln2.b"), &b.ln2.b));
            out.push((format!("block.{l}.w_fc"), &b.w_fc));
            out.push((format!("block.{l}.b_fc"), &b.b_fc));
            out.push((format!("block.{l}.w_proj"), &b.w_proj));
            out.push((format!("block.{l}.b_proj"), &b.b_proj));
            if let Some(a) = &b.ada {
                out.push((format!("block.{l}.ada.w"), &a.w));
                out.push((format!("block.{l}.ada.b"), &a.b));
            }
        }
        out.push(("lnf.g".into(), &self.lnf.g));
        out.push(("lnf.b".into(), &self.lnf.b));
        out.push(("head".into(), &self.head));
        out
    }

    /// Mutable variant of [`Parameters::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("tok_emb".into(), &mut self.tok_emb));
        out.push(("pos_emb".into(), &mut self.pos_emb));
        if let Some(t) = &mut self.begin_emb {
            out.push(("begin_emb".into(), t));
        }
        for (i, t) in self.tgt_tables.iter_mut().enumerate() {
            out.push((format!("tgt_table.{i}"), t));
        }
        if let Some(t) = &mut self.tgt_pe {
            out.push(("tgt_pe".into(), t));
        }
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block.{l}.ln1.g"), &mut b.ln1.g));
            out.push((format!("block.{l}.ln1.b"), &mut b.ln1.b));
            out.push((format!("block.{l}.w_qkv"), &mut b.w_qkv));
            out.push((format!("block.{l}.b_qkv"), &mut b.b_qkv));
            out.push((format!("block.{l}.w_o"), &mut b.w_o));
            out.push((format!("block.{l}.b_o"), &mut b.b_o));
            out.push((format!("block.{l}.ln2.g"), &mut b.ln2.g));
            out.push((format!("block.{l}.ln2.b"), &mut b.ln2.b));
            out.push((format!("block.{l}.w_fc"), &mut b.w_fc));
            out.push((format!("block.{l}.b_fc"), &mut b.b_fc));
            out.push((format!("block.{l}.w_proj"), &mut b.w_proj));
            out.push((format!("block.{l}.b_proj"), &mut b.b_proj));
            if let Some(a) = &mut b.ada {
                out.push((format!("block.{l}.ada.w"), &mut a.w));
                out.push((format!("block.{l}.ada.b"), &mut a.b));
            }
        }
        out.push(("lnf.g".into(), &mut self.lnf.g));
        out.push(("lnf.b".into(), &mut self.lnf.b));
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn ln_init<T: Real>(d: usize) -> LayerNormParams<T> {
    let mut g = Tensor::zeros(&[d]);
    g.fill(T::one());
    LayerNormParams {
        g,
        b: Tensor::zeros(&[d]),
    }
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for x in t.data.iter_mut() {
        *x = T::from_f64(rng::normal(rng) * std);
    }
    t
}
