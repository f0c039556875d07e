use std::fs::File;
use std::io::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use aolab_core::corpus::Vocabulary;
use aolab_core::model::checkpoint::load_checkpoint;
use aolab_core::sampler::generate;
use aolab_core::CoreError;

use crate::config::{load_doc, to_toml, SampleDoc};
use crate::runs::{output_root, RunContext};

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// TOML config naming a checkpoint, vocabulary and [generation] block.
    #[arg(long)]
    pub config: PathBuf,
    /// Output root for run directories (AOLAB_OUT, then "runs").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Override the number of samples.
    #[arg(long)]
    pub num_samples: Option<usize>,
    /// Override the base generation seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: SampleArgs) -> anyhow::Result<()> {
    let mut doc: SampleDoc = load_doc(&args.config)?;
    if let Some(n) = args.num_samples {
        doc.num_samples = n;
    }
    if let Some(s) = args.seed {
        doc.generation.seed = s;
    }
    if let Some(name) = &args.run_name {
        doc.run_name = Some(name.clone());
    }
    if doc.num_samples == 0 {
        return Err(CoreError::config("num_samples must be positive").into());
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

    let resolved = to_toml(&doc)?;
    let name = doc
        .run_name
        .clone()
        .unwrap_or_else(|| format!("sample-{}", crate::runs::now_unix_ms()));
    let mut ctx = RunContext::create(&output_root(&args.out), &name, "sample", &resolved)?;
    println!("run dir: {}", ctx.dir().display());
    println!("resolved config:\n{resolved}");

    let mut samples = File::create(ctx.path("samples.txt"))?;
    ctx.record("samples.txt");
    let mut trace = if doc.trace {
        let f = File::create(ctx.path("trace.jsonl"))?;
        ctx.record("trace.jsonl");
        Some(f)
    } else {
        None
    };

    let base_seed = doc.generation.seed;
    for i in 0..doc.num_samples {
        let mut gcfg = doc.generation.clone();
        gcfg.seed = base_seed.wrapping_add(i as u64);
        let gen = generate(&params, &mcfg, &gcfg)?;
        let text = vocab.decode(&gen.tokens)?;
        println!("--- sample {i} (seed {}) ---", gcfg.seed);
        println!("{text}");
        writeln!(samples, "{text}")?;
        if let Some(f) = trace.as_mut() {
            for step in &gen.trace {
                let mut line = serde_json::to_value(step)?;
                line.as_object_mut()
                    .expect("trace steps serialize to objects")
                    .insert(String::from("sample"), serde_json::json!(i));
                serde_json::to_writer(&mut *f, &line)?;
                f.write_all(b"\n")?;
            }
        }
    }

    ctx.finish(serde_json::json!({
        "num_samples": doc.num_samples,
        "seq_len": doc.generation.seq_len,
        "num_steps": doc.generation.num_steps,
    }))?;
    Ok(())
}
