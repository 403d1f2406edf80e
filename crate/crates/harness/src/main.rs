use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use svt_core::{flops, ParamSet};
use svt_harness::ablate::{results_csv, run_ablation, SweepSpec};
use svt_harness::config::load_model_config;
use svt_harness::data::{generate_dataset, write_split, Split, SyntheticVideoSpec};
use svt_harness::export::{export_pool_membership, export_score_heatmaps, export_token_embeddings, MapSource};
use svt_harness::model::Model;
use svt_harness::train::{eval_checkpoint, metrics_csv, train, write_text};
use svt_harness::{ExperimentConfig, HarnessError, Result};

#[derive(Parser)]
#[command(name = "svt", about = "Supertoken video transformer experiments")]
struct Cli {
    /// JSON document for the subcommand (experiment, sweep, dataset or model).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the seed of the document: dataset seed for `generate`,
    /// training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/val splits of a synthetic dataset.
    Generate,
    /// Train; writes metrics.csv, checkpoint.bin and config.json.
    Train,
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-layer FLOP ledger, optionally against a baseline.
    Audit {
        #[arg(long)]
        baseline: Option<String>,
        /// Test-time views as TEMPORALxSPATIAL, e.g. 3x7.
        #[arg(long, value_parser = parse_views)]
        views: Option<(usize, usize)>,
    },
    /// Train every point of a sweep; writes results.csv.
    Ablate,
    /// Score heatmaps and pool-membership images for one validation clip.
    ExportMaps {
        #[arg(long)]
        layer: usize,
        #[arg(long, value_enum, default_value = "spm")]
        source: MapSource,
        /// Validation clip index.
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// Parameters to load; a fresh init from the training seed otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write one membership image per (head, prototype, window).
        #[arg(long)]
        membership: bool,
    },
    /// Token embeddings after the given layers for the first validation clips.
    ExportEmbeddings {
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn parse_views(s: &str) -> std::result::Result<(usize, usize), String> {
    let (t, sp) = s.split_once('x').ok_or("expected TxS")?;
    let num = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
    Ok((num(t)?, num(sp)?))
}

fn config_path(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .map(Path::new)
        .ok_or_else(|| HarnessError::Config("--config is required".into()))
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut exp = ExperimentConfig::load(config_path(cli)?)?;
    if let Some(seed) = cli.seed {
        exp.train.seed = seed;
    }
    Ok(exp)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).map_err(|e| HarnessError::Io {
        path: cli.out.display().to_string(),
        source: e,
    })?;
    Ok(&cli.out)
}

fn params_for(model: &Model, checkpoint: Option<&Path>, seed: u64) -> Result<ParamSet> {
    let params = match checkpoint {
        Some(p) => ParamSet::load(p)?,
        None => model.init_params(seed)?,
    };
    params.check_against(&model.param_specs())?;
    Ok(params)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => {
            let path = config_path(cli)?;
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let mut spec: SyntheticVideoSpec = match ExperimentConfig::from_json(&text) {
                Ok(exp) => exp.data,
                Err(_) => serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?,
            };
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            let data = generate_dataset(&spec)?;
            let dir = out_dir(cli)?;
            for s in [Split::Train, Split::Val] {
                write_split(&dir.join(format!("{}.bin", s.name())), data.split(s))?;
            }
            let manifest = serde_json::to_string_pretty(&spec).expect("spec serializes");
            write_text(&dir.join("dataset.json"), &manifest)?;
            println!("{} train / {} val clips in {}", data.train.len(), data.val.len(), dir.display());
        }
        Command::Train => {
            let exp = experiment(cli)?;
            let model = exp.model.resolve()?;
            let data = generate_dataset(&exp.data)?;
            let outcome = train(&model, &exp.train, &data, None)?;
            let dir = out_dir(cli)?;
            write_text(&dir.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
            write_text(&dir.join("config.json"), &exp.to_json())?;
            outcome.params.save(&dir.join("checkpoint.bin"))?;
            println!(
                "val top1 {:.4} loss {:.4}",
                outcome.final_val.top1, outcome.final_val.loss
            );
        }
        Command::Eval { checkpoint } => {
            let exp = experiment(cli)?;
            let model = exp.model.resolve()?;
            let params = ParamSet::load(checkpoint)?;
            let data = generate_dataset(&exp.data)?;
            let row = eval_checkpoint(&model, &params, &data.val)?;
            let csv = metrics_csv(&[row]);
            write_text(&out_dir(cli)?.join("eval.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Audit { baseline, views } => {
            let arg = cli
                .config
                .as_deref()
                .ok_or_else(|| HarnessError::Config("--config is required".into()))?;
            let cfg = load_model_config(arg)?;
            let mut report = flops::audit(&cfg)?;
            if let Some(v) = views {
                report = report.with_views(*v);
            }
            print!("{}", report.to_table());
            if let Some(b) = baseline {
                let base = load_model_config(b)?;
                let cmp = flops::compare(&cfg, &base)?;
                println!(
                    "baseline {:.3} GFLOPs, model {:.3} GFLOPs, reduction {:.2}%",
                    cmp.baseline_gflops,
                    cmp.gflops,
                    100.0 * cmp.reduction
                );
            }
            write_text(&out_dir(cli)?.join("audit.csv"), &report.to_csv())?;
        }
        Command::Ablate => {
            let mut spec = SweepSpec::load(config_path(cli)?)?;
            if let Some(seed) = cli.seed {
                spec.base.train.seed = seed;
            }
            let results = run_ablation(&spec, Some(out_dir(cli)?))?;
            print!("{}", results_csv(&results));
        }
        Command::ExportMaps {
            layer,
            source,
            clip,
            checkpoint,
            membership,
        } => {
            let exp = experiment(cli)?;
            let model = Model::new(&exp.model.resolve()?)?;
            let params = params_for(&model, checkpoint.as_deref(), exp.train.seed)?;
            let data = generate_dataset(&exp.data)?;
            let c = data
                .val
                .get(*clip)
                .ok_or_else(|| HarnessError::Argument(format!("no validation clip {clip}")))?;
            let dir = out_dir(cli)?;
            let prefix = format!("clip{clip}");
            let mut n = export_score_heatmaps(&model, &params, c, *layer, *source, dir, &prefix)?.len();
            if *membership {
                n += export_pool_membership(&model, &params, c, *layer, dir, &prefix)?.len();
            }
            println!("{n} images in {}", dir.display());
        }
        Command::ExportEmbeddings {
            layers,
            clips,
            checkpoint,
        } => {
            let exp = experiment(cli)?;
            let model = Model::new(&exp.model.resolve()?)?;
            let params = params_for(&model, checkpoint.as_deref(), exp.train.seed)?;
            let data = generate_dataset(&exp.data)?;
            let chosen: Vec<_> = data.val.iter().take(*clips).enumerate().collect();
            let csv = export_token_embeddings(&model, &params, &chosen, layers)?;
            write_text(&out_dir(cli)?.join("embeddings.csv"), &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
