use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use aolab_core::corpus::Vocabulary;
use aolab_core::evalsuite::{
    anyorder_ppl, ensemble_ppl, l2r_ppl, ppl_vs_m_svg, reports_table, reports_to_csv,
    EnsembleConfig, PplReport,
};
use aolab_core::model::checkpoint::load_checkpoint;
use aolab_core::CoreError;

use crate::config::{load_doc, pack_with_vocab, to_toml, BaseMode, EvalDoc};
use crate::runs::{output_root, RunContext};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// TOML config naming a checkpoint, vocabulary, corpus and modes.
    #[arg(long)]
    pub config: PathBuf,
    /// Output root for run directories (AOLAB_OUT, then "runs").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Override the number of sampled orders per block.
    #[arg(long)]
    pub num_orders: Option<usize>,
    /// Override the evaluated block cap (0 means all).
    #[arg(long)]
    pub max_blocks: Option<usize>,
    /// Override the evaluation seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: EvalArgs) -> anyhow::Result<()> {
    let mut doc: EvalDoc = load_doc(&args.config)?;
    if let Some(n) = args.num_orders {
        doc.num_orders = n;
    }
    if let Some(m) = args.max_blocks {
        doc.max_blocks = m;
    }
    if let Some(s) = args.seed {
        doc.seed = s;
    }
    if let Some(name) = &args.run_name {
        doc.run_name = Some(name.clone());
    }

    let (params, mcfg, _meta) = load_checkpoint(&doc.checkpoint)
        .with_context(|| format!("loading checkpoint {}", doc.checkpoint.display()))?;
    let vocab = Vocabulary::load(&doc.vocab)?;
    if vocab.size() != mcfg.vocab_size {
        return Err(CoreError::config(format!(
            "vocabulary has {} symbols but the checkpoint expects {}",
            vocab.size(),
            mcfg.vocab_size
        ))
        .into());
    }
    let block_len = if doc.block_len == 0 { mcfg.ctx_len } else { doc.block_len };
    if block_len > mcfg.ctx_len {
        return Err(CoreError::config(format!(
            "block_len {} exceeds the model context {}",
            block_len, mcfg.ctx_len
        ))
        .into());
    }
    let mut ds = pack_with_vocab(&doc.corpus, &vocab, block_len)?;
    if doc.max_blocks > 0 {
        ds = ds.take(doc.max_blocks);
    }
    let blocks: Vec<&[u32]> = ds.blocks().collect();
    let model_id = doc
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| String::from("model"));

    let resolved = to_toml(&doc)?;
    let name = doc
        .run_name
        .clone()
        .unwrap_or_else(|| format!("eval-{}", crate::runs::now_unix_ms()));
    let mut ctx = RunContext::create(&output_root(&args.out), &name, "eval", &resolved)?;
    println!("run dir: {}", ctx.dir().display());
    println!("resolved config:\n{resolved}");
    println!(
        "evaluating {} ({:?} family) on {} blocks of {}",
        model_id,
        mcfg.family,
        blocks.len(),
        block_len
    );

    let mut reports: Vec<PplReport> = Vec::new();
    for mode in &doc.modes {
        let r = match mode {
            BaseMode::L2r => l2r_ppl(&params, &mcfg, &blocks, &doc.dataset_tag, &model_id)?,
            BaseMode::AnyOrder => anyorder_ppl(
                &params,
                &mcfg,
                &blocks,
                doc.num_orders,
                doc.seed,
                &doc.dataset_tag,
                &model_id,
            )?,
        };
        reports.push(r);
    }
    for &m in &doc.ensemble_sizes {
        let ens = EnsembleConfig {
            m,
            include_identity: true,
            seed: doc.seed,
        };
        reports.push(ensemble_ppl(
            &params,
            &mcfg,
            &blocks,
            doc.num_orders,
            &ens,
            doc.seed,
            &doc.dataset_tag,
            &model_id,
        )?);
    }

    print!("{}", reports_table(&reports));
    fs::write(ctx.path("report.csv"), reports_to_csv(&reports))?;
    ctx.record("report.csv");

    if doc.svg {
        let points: Vec<(usize, f64)> = reports
            .iter()
            .filter_map(|r| match r.mode {
                aolab_core::evalsuite::EvalMode::AnyOrderEnsemble { m } => Some((m, r.ppl)),
                _ => None,
            })
            .collect();
        fs::write(ctx.path("ppl_vs_m.svg"), ppl_vs_m_svg(&points))?;
        ctx.record("ppl_vs_m.svg");
    }

    let metrics: Vec<serde_json::Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "mode": r.mode.to_string(),
                "nll": r.nll,
                "ppl": r.ppl,
                "stderr": r.stderr,
                "num_tokens": r.num_tokens,
            })
        })
        .collect();
    ctx.finish(serde_json::json!({ "reports": metrics }))?;
    Ok(())
}
