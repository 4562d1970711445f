use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use did::config::RunConfig;
use did::data::{generate_synthetic, load_dataset, load_manifest, save_manifest, Manifest};
use did::error::{DidError, Result};
use did::eval::{
    domain_confusion, export_attention_maps, export_embeddings, metrics_report, score_dataset,
};
use did::model::ModelConfig;
use did::training::{
    config_hash, init_params, load_checkpoint, save_checkpoint, train_in_place, AdamOptimizer,
    CheckpointState, EpochRecord,
};

#[derive(Parser)]
#[command(
    name = "did",
    version,
    about = "Deepfake detection via deep information decomposition: synthetic data, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic multi-domain forgery dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a detector; writes checkpoint, history, and the resolved config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop a module: the domain branch or the decorrelation estimator.
        #[arg(long, value_enum)]
        ablate: Option<Ablation>,
        /// Override the BCE/AUC blend weight.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Score a manifest with a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        export_maps: bool,
        #[arg(long)]
        export_embeddings: bool,
        #[arg(long)]
        confusion: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Remove A_dom and the domain classification loss.
    NoDomain,
    /// Remove the statistic network T and the MI term.
    NoDecorrelation,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, seed, out } => cmd_gen_data(config, seed, out),
        Command::Train {
            config,
            seed,
            out,
            ablate,
            alpha,
        } => cmd_train(config, seed, out, ablate, alpha),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            out,
            export_maps,
            export_embeddings,
            confusion,
        } => cmd_eval(
            config,
            checkpoint,
            manifest,
            out,
            export_maps,
            export_embeddings,
            confusion,
        ),
    }
}

fn load_config(path: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default_resolved(),
    };
    if let Some(seed) = seed {
        config.override_seed(seed);
    }
    Ok(config)
}

fn resolve_out_dir(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    let out = flag
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| DidError::Config("an output directory is required (--out)".into()))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(DidError::Config(format!(
                "parent of output directory does not exist: {}",
                parent.display()
            )));
        }
    }
    fs::create_dir_all(&out)
        .map_err(|e| DidError::io(format!("creating {}", out.display()), e))?;
    Ok(out)
}

fn cmd_gen_data(config: Option<PathBuf>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let config = load_config(config, seed)?;
    let out = resolve_out_dir(out, &config)?;
    let manifest = generate_synthetic(&config.synthetic, &out)?;
    config.save(&out.join("resolved_config.json"))?;
    println!("manifest: {}", out.join("manifest.jsonl").display());
    for domain in 0..=config.synthetic.k {
        let count = manifest
            .records
            .iter()
            .filter(|r| r.domain == domain && (domain > 0) == (r.label == 1))
            .count();
        println!("domain {domain}: {count} samples");
    }
    println!("total: {} samples", manifest.len());
    Ok(())
}

fn cmd_train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    ablate: Option<Ablation>,
    alpha: Option<f64>,
) -> Result<()> {
    let mut config = load_config(config, seed)?;
    match ablate {
        Some(Ablation::NoDomain) => config.training.disable_domain_branch = true,
        Some(Ablation::NoDecorrelation) => config.training.disable_decorrelation = true,
        None => {}
    }
    if let Some(alpha) = alpha {
        config.training.alpha_override = Some(alpha);
    }
    config.validate()?;
    let out = resolve_out_dir(out, &config)?;

    let manifest_path = config.data.train_manifest.clone().ok_or_else(|| {
        DidError::Config("training needs data.train_manifest in the config".into())
    })?;
    let manifest = load_manifest(&manifest_path)?;

    let (train_manifest, heldout_manifest): (Manifest, Option<Manifest>) =
        match config.data.holdout_domain {
            Some(holdout) => {
                let fraction = config.data.real_train_fraction.unwrap_or(0.8);
                let (train, test) =
                    did::data::split_leave_one_domain_out(&manifest, holdout, fraction)?;
                save_manifest(&train, &out.join("train_split.jsonl"))?;
                save_manifest(&test, &out.join("test_split.jsonl"))?;
                println!(
                    "holdout domain {holdout}: train {} samples, test {} samples",
                    train.len(),
                    test.len()
                );
                (train, Some(test))
            }
            None => (manifest, None),
        };
    let _ = heldout_manifest; // evaluated later via `did eval --manifest test_split.jsonl`

    let input_size = config.backbone.input_size;
    let train_set = load_dataset(&train_manifest, input_size)?;
    let val_set = match &config.data.val_manifest {
        Some(p) => Some(load_dataset(&load_manifest(p)?, input_size)?),
        None => None,
    };

    let model_config = ModelConfig::new(config.backbone.clone(), train_manifest.k.max(1))?;
    let hash = config_hash(
        &model_config,
        config.training.disable_domain_branch,
        config.training.disable_decorrelation,
    );
    println!(
        "training: {} samples, k={}, {} epochs, batch {}",
        train_set.len(),
        train_manifest.k,
        config.training.max_epochs,
        config.training.batch_size
    );

    let mut params = init_params(&model_config, &config.training)?;
    let mut optimizer = AdamOptimizer::new();
    let checkpoint_path = out.join("checkpoint.didc");
    let history = train_in_place(
        &mut params,
        &mut optimizer,
        &model_config,
        &train_set,
        val_set.as_ref(),
        &config.training,
        &mut |record: &EpochRecord, current, opt: &AdamOptimizer| {
            print_epoch(record);
            let state = CheckpointState {
                model_config: model_config.clone(),
                disable_domain_branch: config.training.disable_domain_branch,
                disable_decorrelation: config.training.disable_decorrelation,
                epoch: record.epoch as u64 + 1,
                beta: record.beta,
                config_hash: hash,
                params: current.clone(),
                optimizer: opt.clone(),
            };
            save_checkpoint(&state, &checkpoint_path)
        },
    )?;

    let history_json =
        serde_json::to_string_pretty(&history).expect("history serializes");
    fs::write(out.join("history.json"), history_json)
        .map_err(|e| DidError::io("writing history.json", e))?;
    config.save(&out.join("resolved_config.json"))?;
    println!("checkpoint: {}", checkpoint_path.display());
    Ok(())
}

fn print_epoch(record: &EpochRecord) {
    let mut line = format!(
        "epoch {:>3}  beta {:.4}  total {:.4}  cls {:.4} (bce {:.4}, auc {:.4})",
        record.epoch,
        record.beta,
        record.mean_loss.l_total,
        record.mean_loss.l_cls,
        record.mean_loss.l_bce,
        record.mean_loss.l_auc
    );
    if let Some(d) = record.mean_loss.l_dom {
        line.push_str(&format!("  dom {d:.4}"));
    }
    if let Some(mi) = record.mean_loss.mi_estimate {
        line.push_str(&format!("  mi {mi:.4}"));
    }
    if let Some(auc) = record.val_auc {
        line.push_str(&format!("  val_auc {auc:.4}"));
    }
    println!("{line}");
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: Option<PathBuf>,
    checkpoint: PathBuf,
    manifest: PathBuf,
    out: Option<PathBuf>,
    export_maps: bool,
    export_embeddings_flag: bool,
    confusion: bool,
) -> Result<()> {
    let state = load_checkpoint(&checkpoint)?;
    let run_config = match config {
        Some(p) => {
            let c = RunConfig::load(&p)?;
            let expected = config_hash(
                &ModelConfig {
                    backbone: c.backbone.clone(),
                    fake_domains: state.model_config.fake_domains,
                },
                c.training.disable_domain_branch,
                c.training.disable_decorrelation,
            );
            if expected != state.config_hash {
                return Err(DidError::Config(
                    "config hash mismatch: the checkpoint was trained under a different \
                     model configuration or ablation flags"
                        .into(),
                ));
            }
            Some(c)
        }
        None => None,
    };
    let out = match out.or_else(|| run_config.as_ref().and_then(|c| c.out_dir.clone())) {
        Some(o) => {
            fs::create_dir_all(&o)
                .map_err(|e| DidError::io(format!("creating {}", o.display()), e))?;
            o
        }
        None => PathBuf::from("."),
    };

    let manifest = load_manifest(&manifest)?;
    let dataset = load_dataset(&manifest, state.model_config.backbone.input_size)?;
    let scored = score_dataset(&state.model_config, &state.params, &dataset)?;

    let confusion_matrix = if confusion {
        if state.disable_domain_branch {
            return Err(DidError::Config(
                "checkpoint lacks the domain branch; cannot compute a confusion matrix".into(),
            ));
        }
        Some(domain_confusion(&state.model_config, &state.params, &dataset)?)
    } else {
        None
    };
    let report = metrics_report(&scored, confusion_matrix)?;

    let metrics_path = out.join("metrics.json");
    fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| DidError::io(format!("writing {}", metrics_path.display()), e))?;
    fs::write(out.join("roc.csv"), report.roc.to_csv())
        .map_err(|e| DidError::io("writing roc.csv", e))?;

    if export_maps {
        let n = export_attention_maps(
            &state.model_config,
            &state.params,
            &dataset,
            &out.join("attention"),
        )?;
        println!("attention maps: {n} files in {}", out.join("attention").display());
    }
    if export_embeddings_flag {
        export_embeddings(
            &state.model_config,
            &state.params,
            &dataset,
            &out.join("embeddings.csv"),
        )?;
        println!("embeddings: {}", out.join("embeddings.csv").display());
    }

    println!(
        "samples {}  auc {:.4}  eer {:.4}",
        report.sample_count, report.auc, report.eer
    );
    println!("metrics: {}", metrics_path.display());
    Ok(())
}
