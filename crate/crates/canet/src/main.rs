//! Command-line entry point: dataset generation, training, adaptation,
//! evaluation, ablation, and gradient verification.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use canet::config::{ExperimentConfig, GenSpec};
use canet::error::{Error, Result};
use canet::model::{Ablation, CanetModel};
use canet::synthdata::Dataset;
use canet::trainer::{self, EvalRecord, RunRecord};
use canet::{checkpoint, netpbm, suite, DatasetId};

#[derive(Parser)]
#[command(name = "canet", version, about = "Multi-dataset change detection experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (or the four-dataset family) on disk.
    GenData {
        /// TOML generation spec.
        #[arg(long)]
        spec: PathBuf,
        /// Output root; family members land in subdirectories by name.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from scratch on one dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (overrides the config's [data] path).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Register a new dataset on a trained model and fit its adapter.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "new-data")]
        new_data: PathBuf,
        #[arg(long = "dataset-id")]
        dataset_id: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Historical dataset directory; when given, historical metrics are
        /// reported before and after adaptation.
        #[arg(long = "hist-data")]
        hist_data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "dataset-id")]
        dataset_id: String,
        /// Which split to evaluate.
        #[arg(long, default_value = "val")]
        split: String,
        /// Write one predicted change map (PGM) per sample into this directory.
        #[arg(long = "emit-maps")]
        emit_maps: Option<PathBuf>,
    },
    /// Finite-difference checks for ops, blocks, and the full model.
    Gradcheck {
        /// Comma-separated target names, or "all".
        #[arg(long, default_value = "all")]
        ops: String,
        /// Override every target's tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Adapt a checkpoint with and without one ablation, side by side.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// New dataset directory to adapt to.
        #[arg(long)]
        data: PathBuf,
        /// no_icm | shared_icm | shared_bn
        #[arg(long)]
        which: String,
        #[arg(long)]
        out: PathBuf,
        /// Training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "hist-data")]
        hist_data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    match s {
        "none" => Ok(Ablation::None),
        "no_icm" => Ok(Ablation::NoIcm),
        "shared_icm" => Ok(Ablation::SharedIcm),
        "shared_bn" => Ok(Ablation::SharedBn),
        _ => Err(Error::Config(format!(
            "unknown ablation {s:?} (expected no_icm, shared_icm, or shared_bn)"
        ))),
    }
}

fn split_pairs<'a>(ds: &'a Dataset, split: &str) -> Result<&'a [canet::synthdata::SamplePair]> {
    match split {
        "train" => Ok(&ds.train),
        "val" => Ok(&ds.val),
        "test" => Ok(&ds.test),
        _ => Err(Error::Config(format!("unknown split {split:?}"))),
    }
}

fn eval_csv(record: &EvalRecord) -> String {
    let mut out = String::from("epoch,split,dataset_id,loss,f1,precision,recall,iou,seconds\n");
    out.push_str(&RunRecord::eval_csv_row(record));
    out
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let gen = GenSpec::load(&spec)?;
            let specs = gen.specs();
            let family = specs.len() > 1;
            mkdir(&out)?;
            for ds_spec in &specs {
                let root = if family { out.join(&ds_spec.name) } else { out.clone() };
                mkdir(&root)?;
                let dataset = Dataset::generate(ds_spec)?;
                dataset.save(&root)?;
                println!(
                    "wrote {} ({} train / {} val / {} test pairs, {}x{})",
                    root.display(),
                    dataset.train.len(),
                    dataset.val.len(),
                    dataset.test.len(),
                    ds_spec.image_w,
                    ds_spec.image_h,
                );
            }
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            write_text(&out.join("genspec.resolved.toml"), &text)?;
            Ok(())
        }

        Cmd::Train { config, data, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data_dir = data
                .or(cfg.data.path.clone())
                .ok_or_else(|| Error::Config("no dataset directory (use --data or [data].path)".into()))?;
            let dataset = Dataset::load(&data_dir)?;
            mkdir(&out)?;

            let mut model = CanetModel::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
            model.add_dataset(&dataset.id, None)?;
            if cfg.train.ablation != Ablation::None {
                model.apply_ablation(cfg.train.ablation)?;
            }
            let record =
                trainer::train(&mut model, &dataset.id.clone(), &dataset.train, &dataset.val, &cfg.train)?;

            checkpoint::save(&model, &out.join("checkpoint.bin"))?;
            write_text(&out.join("runrecord.csv"), &record.to_csv())?;
            write_text(&out.join("config.resolved.toml"), &cfg.resolved_text())?;
            if let Some(ev) = record.evals.last() {
                print!("{}", eval_csv(ev));
            }
            println!(
                "trained {} parameters of {} total; checkpoint at {}",
                record.trained_param_count,
                record.total_param_count,
                out.join("checkpoint.bin").display()
            );
            Ok(())
        }

        Cmd::Adapt { checkpoint: ckpt, new_data, dataset_id, config, out, hist_data } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mut model: CanetModel<f32> = checkpoint::load(&ckpt)?;
            let new_id = DatasetId::new(dataset_id);
            if model.is_registered(&new_id) {
                return Err(Error::DuplicateDataset(new_id));
            }
            let dataset = Dataset::load(&new_data)?;
            mkdir(&out)?;

            let hist_id = model.primary()?;
            let hist = hist_data.map(|dir| Dataset::load(&dir)).transpose()?;
            let hist_before = hist
                .as_ref()
                .map(|ds| trainer::evaluate(&model, &hist_id, &ds.val))
                .transpose()?;

            let mut record =
                trainer::adapt(&mut model, &new_id, &dataset.train, &dataset.val, &cfg.train)?;

            if let (Some(ds), Some(before)) = (hist.as_ref(), hist_before) {
                let after = trainer::evaluate(&model, &hist_id, &ds.val)?;
                println!(
                    "historical {hist_id}: f1 before {:.6}, after {:.6} ({})",
                    before.f1,
                    after.f1,
                    if before == after { "identical" } else { "CHANGED" },
                );
                record.evals.push(EvalRecord {
                    epoch: cfg.train.epochs,
                    split: "val-historical".into(),
                    dataset: hist_id.clone(),
                    metrics: after,
                    seconds: 0.0,
                });
            }

            let part = model.param_partition(&new_id)?;
            println!(
                "updated {} parameters ({} adapter + {} bank), fraction {:.4} of the single-dataset network",
                part.adapter_count + part.bn_bank_count_per_dataset,
                part.adapter_count,
                part.bn_bank_count_per_dataset,
                part.fraction,
            );
            if let Some(ev) = record.evals.first() {
                print!("{}", eval_csv(ev));
            }
            checkpoint::save(&model, &out.join("checkpoint.bin"))?;
            write_text(&out.join("runrecord.csv"), &record.to_csv())?;
            write_text(&out.join("config.resolved.toml"), &cfg.resolved_text())?;
            Ok(())
        }

        Cmd::Eval { checkpoint: ckpt, data, dataset_id, split, emit_maps } => {
            let model: CanetModel<f32> = checkpoint::load(&ckpt)?;
            let id = DatasetId::new(dataset_id);
            if !model.is_registered(&id) {
                return Err(Error::UnknownDataset(id));
            }
            let dataset = Dataset::load(&data)?;
            let pairs = split_pairs(&dataset, &split)?;
            let metrics = trainer::evaluate(&model, &id, pairs)?;
            print!(
                "{}",
                eval_csv(&EvalRecord {
                    epoch: 0,
                    split: split.clone(),
                    dataset: id.clone(),
                    metrics,
                    seconds: 0.0,
                })
            );
            if let Some(dir) = emit_maps {
                mkdir(&dir)?;
                let maps = trainer::predict_maps(&model, &id, pairs)?;
                let d = pairs[0].x1.dims();
                for (i, map) in maps.iter().enumerate() {
                    netpbm::write_pgm(&dir.join(format!("{i:05}.pgm")), d.w, d.h, map)?;
                }
                println!("wrote {} change maps to {}", maps.len(), dir.display());
            }
            Ok(())
        }

        Cmd::Gradcheck { ops, tolerance } => {
            let which: Vec<String> = if ops == "all" {
                Vec::new()
            } else {
                ops.split(',').map(|s| s.trim().to_string()).collect()
            };
            let report = suite::run(&which, tolerance)?;
            print!("{}", report.to_table());
            if report.passed() {
                Ok(())
            } else {
                Err(Error::NonFinite { op: "gradcheck tolerance exceeded" })
            }
        }

        Cmd::Ablate { checkpoint: ckpt, data, which, out, config, hist_data } => {
            let ablation = parse_ablation(&which)?;
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            let dataset = Dataset::load(&data)?;
            let hist = hist_data.map(|dir| Dataset::load(&dir)).transpose()?;
            mkdir(&out)?;

            let base_bytes = fs::read(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
            let mut csv =
                String::from("variant,split,dataset_id,f1,precision,recall,iou\n");
            for (label, abl) in [("none", Ablation::None), (which.as_str(), ablation)] {
                let mut model: CanetModel<f32> = checkpoint::load_bytes(&base_bytes)?;
                if abl != Ablation::None {
                    model.apply_ablation(abl)?;
                }
                if abl == Ablation::SharedBn {
                    let banks = model.encoder_bn();
                    let (_, first) = banks.first().expect("model has normalization layers");
                    assert_eq!(first.dataset_count(), 1, "single shared bank");
                    println!("shared_bn: shared normalization banks hold exactly 1 entry");
                }
                let new_id = DatasetId::new(format!("abl-{label}"));
                trainer::adapt(&mut model, &new_id, &dataset.train, &[], &cfg.train)?;
                let m = trainer::evaluate(&model, &new_id, &dataset.val)?;
                csv.push_str(&format!(
                    "{label},val,{},{:.6},{:.6},{:.6},{:.6}\n",
                    dataset.id, m.f1, m.precision, m.recall, m.iou
                ));
                if let Some(h) = &hist {
                    let hist_id = model.primary()?;
                    let hm = trainer::evaluate(&model, &hist_id, &h.val)?;
                    csv.push_str(&format!(
                        "{label},val,{},{:.6},{:.6},{:.6},{:.6}\n",
                        hist_id, hm.f1, hm.precision, hm.recall, hm.iou
                    ));
                }
            }
            write_text(&out.join("ablate.csv"), &csv)?;
            write_text(&out.join("config.resolved.toml"), &cfg.resolved_text())?;
            print!("{csv}");
            Ok(())
        }
    }
}
