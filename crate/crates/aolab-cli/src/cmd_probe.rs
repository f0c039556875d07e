use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use aolab_core::corpus::Vocabulary;
use aolab_core::model::checkpoint::load_checkpoint;
use aolab_core::objectives::{equivalence_probe, MdmWeighting, PROBE_Z_PASS};
use aolab_core::CoreError;

use crate::config::{load_doc, pack_with_vocab, to_toml, ProbeDoc};
use crate::runs::{output_root, RunContext};

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// TOML config naming a checkpoint, vocabulary, corpus and budget.
    #[arg(long)]
    pub config: PathBuf,
    /// Output root for run directories (AOLAB_OUT, then "runs").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Override the Monte-Carlo draw budget per estimator.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Override the probe seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: ProbeArgs) -> anyhow::Result<()> {
    let mut doc: ProbeDoc = load_doc(&args.config)?;
    if let Some(b) = args.budget {
        doc.budget = b;
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
    let mut ds = pack_with_vocab(&doc.corpus, &vocab, block_len)?;
    if doc.max_blocks > 0 {
        ds = ds.take(doc.max_blocks);
    }
    let blocks: Vec<&[u32]> = ds.blocks().collect();
    let weighting = if doc.negative_control {
        MdmWeighting::Unweighted
    } else {
        MdmWeighting::Elbo
    };

    let resolved = to_toml(&doc)?;
    let name = doc
        .run_name
        .clone()
        .unwrap_or_else(|| format!("probe-{}", crate::runs::now_unix_ms()));
    let mut ctx = RunContext::create(&output_root(&args.out), &name, "probe", &resolved)?;
    println!("run dir: {}", ctx.dir().display());
    println!("resolved config:\n{resolved}");
    println!(
        "probing {} blocks of {}, {} draws per estimator{}",
        blocks.len(),
        block_len,
        doc.budget,
        if doc.negative_control { " (negative control: unweighted masking loss)" } else { "" }
    );

    let report = equivalence_probe(&params, &mcfg, &blocks, doc.budget, weighting, doc.seed)?;

    println!(
        "any-order estimate: {:.6} nats/token (stderr {:.6}, {} tokens)",
        report.aoar.nll_per_token, report.aoar.stderr, report.aoar.token_count
    );
    println!(
        "masking estimate:   {:.6} nats/token (stderr {:.6}, {} tokens)",
        report.mdm.nll_per_token, report.mdm.stderr, report.mdm.token_count
    );
    println!(
        "z = {:.4} (threshold {}): {}",
        report.z_score,
        PROBE_Z_PASS,
        if report.pass { "PASS" } else { "FAIL" }
    );

    fs::write(ctx.path("probe.json"), serde_json::to_string_pretty(&report)?)?;
    ctx.record("probe.json");
    ctx.finish(serde_json::json!({
        "z_score": report.z_score,
        "pass": report.pass,
        "aoar_nll": report.aoar.nll_per_token,
        "mdm_nll": report.mdm.nll_per_token,
    }))?;
    Ok(())
}
