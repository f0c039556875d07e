use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;

use aolab_core::model::checkpoint::load_checkpoint;
use aolab_core::model::{ModelConfig, Parameters};
use aolab_core::sampler::speed_bench;
use aolab_core::CoreError;

use crate::config::{load_doc, to_toml, BenchDoc};
use crate::runs::{output_root, RunContext};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML config with engines, sequence lengths and a model source.
    #[arg(long)]
    pub config: PathBuf,
    /// Output root for run directories (AOLAB_OUT, then "runs").
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run directory name.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Override the number of timed runs per configuration.
    #[arg(long)]
    pub runs: Option<usize>,
}

pub fn run(args: BenchArgs) -> anyhow::Result<()> {
    let mut doc: BenchDoc = load_doc(&args.config)?;
    if let Some(r) = args.runs {
        doc.runs = r;
    }
    if let Some(name) = &args.run_name {
        doc.run_name = Some(name.clone());
    }

    let (params, mcfg): (Parameters<f32>, ModelConfig) = match (&doc.checkpoint, &mut doc.model) {
        (Some(path), None) => {
            let (p, cfg, _meta) = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            (p, cfg)
        }
        (None, Some(section)) => {
            let cfg = section.resolve_standalone()?;
            (Parameters::init(&cfg, doc.init_seed), cfg)
        }
        _ => {
            return Err(CoreError::config(
                "give exactly one of checkpoint or [model] with init_seed",
            )
            .into());
        }
    };

    let resolved = to_toml(&doc)?;
    let name = doc
        .run_name
        .clone()
        .unwrap_or_else(|| format!("bench-{}", crate::runs::now_unix_ms()));
    let mut ctx = RunContext::create(&output_root(&args.out), &name, "bench", &resolved)?;
    println!("run dir: {}", ctx.dir().display());
    println!("resolved config:\n{resolved}");

    let report = speed_bench(
        &params,
        &mcfg,
        &doc.engines,
        &doc.seq_lens,
        &doc.extra_steps,
        doc.runs,
        doc.seed,
    )?;

    let csv = report.to_csv();
    print!("{csv}");
    for (engine, slope) in &report.slopes {
        println!("{engine}: log-log slope {slope:.4} over the T = n points");
    }
    // Speedup at matched (n, T) between the two decoder engines, when
    // both were measured.
    let mut pairs: Vec<(usize, usize, f64, f64)> = Vec::new();
    for pt in &report.points {
        if pt.engine.to_string() == "decoder_cached" {
            if let Some(full) = report.points.iter().find(|q| {
                q.n == pt.n
                    && q.num_steps == pt.num_steps
                    && q.engine.to_string() == "decoder_full_recompute"
            }) {
                pairs.push((pt.n, pt.num_steps, pt.median_ms, full.median_ms));
            }
        }
    }
    for (n, t, cached, full) in &pairs {
        println!(
            "n={n} T={t}: cached {cached:.1} ms, full recompute {full:.1} ms, speedup {:.2}x",
            full / cached
        );
    }

    fs::write(ctx.path("bench.csv"), &csv)?;
    ctx.record("bench.csv");
    ctx.finish(serde_json::json!({
        "slopes": report.slopes,
        "points": report.points.len(),
    }))?;
    Ok(())
}
