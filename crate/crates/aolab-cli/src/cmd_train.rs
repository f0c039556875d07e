use std::fs::File;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use aolab_core::corpus::{pack_corpus, PackedDataset, Vocabulary};
use aolab_core::model::ModelConfig;
use aolab_core::objectives::{TrainConfig, Trainer};

use crate::config::{load_doc, to_toml, TrainDoc};
use crate::runs::{output_root, RunContext};

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config with [model], [train] and [data] sections.
    #[arg(long)]
    pub config: PathBuf,
    /// Output root for run directories (AOLAB_OUT, then "runs").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name; defaults to the config's run_name or a timestamp.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Override train.total_steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override train.learning_rate.
    #[arg(long)]
    pub lr: Option<f64>,
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let mut doc: TrainDoc = load_doc(&args.config)?;
    if let Some(steps) = args.steps {
        doc.train.total_steps = steps;
    }
    if let Some(seed) = args.seed {
        doc.train.seed = seed;
    }
    if let Some(lr) = args.lr {
        doc.train.learning_rate = lr;
    }
    if let Some(name) = &args.run_name {
        doc.run_name = Some(name.clone());
    }

    let text = std::fs::read_to_string(&doc.data.corpus)
        .with_context(|| format!("reading corpus {}", doc.data.corpus.display()))?;
    let vocab = aolab_core::corpus::Vocabulary::build(&text);
    let mcfg = doc.model.resolve(vocab.size())?;
    doc.train.validate()?;
    let ds = pack_corpus(&text, &vocab, mcfg.ctx_len)?;
    let (train_ds, val_ds) = ds.split_train_val(doc.data.val_frac)?;
    println!(
        "corpus: {} chars, vocab {} symbols, {} blocks of {} (train {}, val {})",
        text.chars().count(),
        vocab.size(),
        ds.len(),
        mcfg.ctx_len,
        train_ds.len(),
        val_ds.len()
    );

    let base = doc
        .run_name
        .clone()
        .unwrap_or_else(|| format!("train-{}", crate::runs::now_unix_ms()));
    let runs: Vec<(String, TrainConfig)> = if doc.sweep.is_empty() {
        vec![(base, doc.train.clone())]
    } else {
        doc.sweep
            .iter()
            .map(|entry| {
                let mut tcfg = doc.train.clone();
                tcfg.order_policy = entry.policy.clone();
                (format!("{base}-{}", entry.name), tcfg)
            })
            .collect()
    };

    let out_root = output_root(&args.out);
    for (name, tcfg) in runs {
        train_one(&out_root, &name, &doc, &mcfg, &tcfg, &vocab, &train_ds, &val_ds)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_one(
    out_root: &std::path::Path,
    name: &str,
    doc: &TrainDoc,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    vocab: &Vocabulary,
    train_ds: &PackedDataset,
    val_ds: &PackedDataset,
) -> anyhow::Result<()> {
    tcfg.validate()?;
    // The echo describes this run alone: sweep entries collapse to the
    // concrete policy they selected.
    let mut echo = doc.clone();
    echo.run_name = Some(name.to_string());
    echo.train = tcfg.clone();
    echo.sweep.clear();
    let resolved = to_toml(&echo)?;
    let mut ctx = RunContext::create(out_root, name, "train", &resolved)?;
    println!("run dir: {}", ctx.dir().display());
    println!("resolved config:\n{resolved}");

    vocab.save(&ctx.path("vocab.json"))?;
    ctx.record("vocab.json");

    // Metrics go straight to the file, unbuffered, so a numerical abort
    // mid-run still leaves every completed evaluation on disk.
    let mut metrics = File::create(ctx.path("metrics.jsonl"))?;
    ctx.record("metrics.jsonl");

    let mut trainer = Trainer::new(mcfg, tcfg)?;
    let ckpt_dir = ctx.dir().to_path_buf();
    let summary = trainer.run(train_ds, val_ds, &mut metrics, Some(&ckpt_dir))?;

    for ckpt in &summary.checkpoints {
        let rel = ckpt
            .strip_prefix(ctx.dir())
            .map(|p| p.to_string_lossy().into_owned())
            .unwrap_or_else(|_| ckpt.to_string_lossy().into_owned());
        ctx.record(&rel);
    }

    println!(
        "finished {}: {} steps, final train loss {:.4}, {} eval rows, {} checkpoints",
        name,
        summary.steps,
        summary.final_train_loss,
        summary.eval_rows,
        summary.checkpoints.len()
    );

    ctx.finish(serde_json::json!({
        "steps": summary.steps,
        "final_train_loss": summary.final_train_loss,
        "eval_rows": summary.eval_rows,
    }))?;
    Ok(())
}
