//! Command-line entry point.
//!
//! Subcommands: synth, train, eval, analyze, ablate, compare-encoders,
//! gradcheck. Every run that produces outputs writes a `run_manifest.json`
//! next to them recording the subcommand, resolved config, seed, and SHA-256
//! digests of every input file, so a run can be reproduced bit-for-bit.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neural_mcrl::config::{
    apply_overrides, parse_json_config, RunManifest, TrainConfig,
};
use neural_mcrl::data::{
    generate_synthetic_dataset, load_dataset, load_embedding_table, write_dataset,
    write_embedding_table, DatasetHandle, Split, SynthSpec,
};
use neural_mcrl::eval::{
    class_mean_embeddings, compare_encoders, run_ablation, similarity_matrix,
    write_similarity_csv, zero_shot_classify,
};
use neural_mcrl::plot::render_similarity_png;
use neural_mcrl::train::{train, TrainedModel};
use neural_mcrl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "neural-mcrl",
    version,
    about = "EEG-to-image zero-shot decoding: training, evaluation, and analysis"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// `key=value` config overrides, applied after the config file in order.
/// Values parse as JSON first, falling back to strings, and dotted keys
/// reach nested fields (e.g. `ablation.alignment=false`).
#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic EEG dataset with image and text embedding tables.
    Synth {
        /// Generator spec (JSON). Omitted: the reference dataset defaults.
        #[arg(long, value_name = "FILE")]
        spec: Option<PathBuf>,
        /// Output directory for the dataset and embedding tables.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train the pipeline and write per-epoch checkpoints and metrics.
    Train {
        /// Training config (JSON). Omitted or empty: all defaults.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Dataset directory (manifest.json plus raw EEG).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Image embedding table (JSON).
        #[arg(long = "image-emb", value_name = "FILE")]
        image_emb: PathBuf,
        /// Text embedding table (JSON).
        #[arg(long = "text-emb", value_name = "FILE")]
        text_emb: PathBuf,
        /// Output directory for checkpoints and metrics.jsonl.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Zero-shot N-way evaluation of a checkpoint on the unseen split.
    Eval {
        /// Checkpoint archive to evaluate.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Image embedding table (JSON); candidates come from its unseen classes.
        #[arg(long = "image-emb", value_name = "FILE")]
        image_emb: PathBuf,
        /// Panel size; the full unseen count means no distractor sampling.
        #[arg(long = "n-way", value_name = "N")]
        n_way: usize,
        /// Comma-separated top-k ranks to report.
        #[arg(long, value_name = "K,K", value_delimiter = ',', default_value = "1,5")]
        k: Vec<usize>,
        /// Seed for distractor panels.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Average embeddings of trials sharing (class, exemplar) first.
        #[arg(long = "repetitions-averaged", default_value_t = false)]
        repetitions_averaged: bool,
        /// Report file (JSON).
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Class-similarity matrix of a checkpoint's unseen-split embeddings.
    Analyze {
        /// Checkpoint archive to analyze.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Image embedding table (JSON).
        #[arg(long = "image-emb", value_name = "FILE")]
        image_emb: PathBuf,
        /// Optional class_id -> category label map (JSON object).
        #[arg(long, value_name = "FILE")]
        categories: Option<PathBuf>,
        /// Similarity CSV: a header row of class ids, then one row per class.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Optionally render the matrix as a heatmap PNG.
        #[arg(long, value_name = "FILE")]
        plot: Option<PathBuf>,
    },
    /// Train the full model plus all five single-component-off variants.
    Ablate {
        /// Training config (JSON); its ablation flags are ignored.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long = "image-emb", value_name = "FILE")]
        image_emb: PathBuf,
        #[arg(long = "text-emb", value_name = "FILE")]
        text_emb: PathBuf,
        /// Output directory; each variant trains into a subdirectory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train both encoders under one protocol and compare accuracies.
    #[command(name = "compare-encoders")]
    CompareEncoders {
        /// Training config (JSON); the encoder field is set per row.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long = "image-emb", value_name = "FILE")]
        image_emb: PathBuf,
        #[arg(long = "text-emb", value_name = "FILE")]
        text_emb: PathBuf,
        /// Output directory; each encoder trains into a subdirectory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        /// Check one registered component instead of the whole registry.
        #[arg(long, value_name = "NAME")]
        component: Option<String>,
        /// Optional JSON report of the outcomes.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

/// Parse a config type from an optional file plus overrides; no file means
/// the type's defaults.
fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T>
where
    T: Default + serde::Serialize + serde::de::DeserializeOwned,
{
    match path {
        Some(p) => parse_json_config(p, overrides),
        None => {
            let mut value =
                serde_json::to_value(T::default()).expect("default config serializes");
            apply_overrides(&mut value, overrides)?;
            serde_json::from_value(value)
                .map_err(|e| Error::config(format!("invalid config: {e}")))
        }
    }
}

fn load_train_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let cfg: TrainConfig = load_config(path, overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Digest every regular file directly inside `dir`, in name order.
fn add_dir_inputs(manifest: &mut RunManifest, dir: &Path) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    for f in files {
        manifest.add_input(&f)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path, e.to_string()))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

/// The directory a manifest for this output file belongs in.
fn output_dir(out_file: &Path) -> PathBuf {
    match out_file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// A checkpoint is only usable against data with the geometry it was
/// trained for; mismatches are data errors before any tensor math runs.
fn check_geometry(model: &TrainedModel, data: &DatasetHandle) -> Result<()> {
    let g = &model.pipeline.geometry;
    if data.channel_count() != g.channels || data.window_length() != g.window_length {
        return Err(Error::data(format!(
            "dataset is {} channels x {} samples but the checkpoint was trained on {} x {}",
            data.channel_count(),
            data.window_length(),
            g.channels,
            g.window_length
        )));
    }
    if (data.sampling_rate_hz() - g.sampling_rate_hz).abs() > 1e-9 {
        return Err(Error::data(format!(
            "dataset sampled at {} Hz but the checkpoint was trained at {} Hz",
            data.sampling_rate_hz(),
            g.sampling_rate_hz
        )));
    }
    if data.n_subjects() > g.n_subjects {
        return Err(Error::data(format!(
            "dataset has {} subjects but the checkpoint only knows {}",
            data.n_subjects(),
            g.n_subjects
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { spec, out, overrides } => {
            let spec_cfg: SynthSpec = load_config(spec.as_deref(), &overrides.set)?;
            let (data, image, text) = generate_synthetic_dataset(&spec_cfg)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_dataset(&data, &out)?;
            write_embedding_table(&image, &out.join("image_embeddings.json"))?;
            write_embedding_table(&text, &out.join("text_embeddings.json"))?;
            let config = serde_json::to_value(&spec_cfg)
                .map_err(|e| Error::json(&out, e.to_string()))?;
            let mut manifest = RunManifest::new("synth", spec_cfg.seed, config);
            if let Some(p) = &spec {
                manifest.add_input(p)?;
            }
            manifest.write(&out)?;
            println!(
                "wrote {} trials over {} classes ({} seen, {} unseen) to {}",
                data.trials().len(),
                data.classes_in(Split::Seen).len() + data.classes_in(Split::Unseen).len(),
                data.classes_in(Split::Seen).len(),
                data.classes_in(Split::Unseen).len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train { config, data, image_emb, text_emb, out, overrides } => {
            let cfg = load_train_config(config.as_deref(), &overrides.set)?;
            let handle = load_dataset(&data)?;
            let image = load_embedding_table(&image_emb, None)?;
            let text = load_embedding_table(&text_emb, None)?;
            let outcome = train(&cfg, &handle, &image, &text, &out)?;
            let resolved = serde_json::to_value(&cfg)
                .map_err(|e| Error::json(&out, e.to_string()))?;
            let mut manifest = RunManifest::new("train", cfg.seed, resolved);
            if let Some(p) = &config {
                manifest.add_input(p)?;
            }
            add_dir_inputs(&mut manifest, &data)?;
            manifest.add_input(&image_emb)?;
            manifest.add_input(&text_emb)?;
            manifest.write(&out)?;
            let last = outcome.metrics.last().expect("training ran");
            println!(
                "epoch {}: loss {:.6}, unseen top-1 {:.4}, top-5 {:.4}",
                last.epoch, last.loss, last.top1, last.top5
            );
            println!("final checkpoint: {}", outcome.final_checkpoint().display());
            Ok(())
        }
        Cmd::Eval { ckpt, data, image_emb, n_way, k, seed, repetitions_averaged, out } => {
            let (model, _meta) = TrainedModel::from_checkpoint(&ckpt)?;
            let handle = load_dataset(&data)?;
            check_geometry(&model, &handle)?;
            let image =
                load_embedding_table(&image_emb, Some(model.pipeline.geometry.embed_dim))?;
            let candidates = image.restricted_to(handle.classes_in(Split::Unseen))?;
            let (emb, classes, exemplars) = model.embed_split(&handle, Split::Unseen)?;
            let report = zero_shot_classify(
                &emb,
                &classes,
                &exemplars,
                &candidates,
                n_way,
                &k,
                seed,
                repetitions_averaged,
            )?;
            write_json(&out, &report)?;
            let dir = output_dir(&out);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut manifest = RunManifest::new(
                "eval",
                seed,
                serde_json::json!({
                    "n_way": n_way,
                    "k": k,
                    "repetitions_averaged": repetitions_averaged,
                }),
            );
            manifest.add_input(&ckpt)?;
            add_dir_inputs(&mut manifest, &data)?;
            manifest.add_input(&image_emb)?;
            manifest.write(&dir)?;
            for (k, acc) in &report.metrics {
                println!("top-{k} @ {n_way}-way: {acc:.4}");
            }
            println!("report: {}", out.display());
            Ok(())
        }
        Cmd::Analyze { ckpt, data, image_emb, categories, out, plot } => {
            let (model, _meta) = TrainedModel::from_checkpoint(&ckpt)?;
            let handle = load_dataset(&data)?;
            check_geometry(&model, &handle)?;
            let image =
                load_embedding_table(&image_emb, Some(model.pipeline.geometry.embed_dim))?;
            let (emb, classes, _) = model.embed_split(&handle, Split::Unseen)?;
            let means = class_mean_embeddings(&emb, &classes)?;
            let candidates = image.restricted_to(handle.classes_in(Split::Unseen))?;
            let category_map: BTreeMap<u32, String> = match &categories {
                None => BTreeMap::new(),
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let raw: BTreeMap<String, String> = serde_json::from_str(&text)
                        .map_err(|e| Error::json(p, e.to_string()))?;
                    raw.into_iter()
                        .map(|(k, v)| {
                            k.parse::<u32>().map(|id| (id, v)).map_err(|_| {
                                Error::json(p, format!("class id {k:?} is not an integer"))
                            })
                        })
                        .collect::<Result<_>>()?
                }
            };
            let report = similarity_matrix(&means, &candidates, &category_map)?;
            write_similarity_csv(&out, &report)?;
            if let Some(p) = &plot {
                render_similarity_png(p, &report)?;
            }
            let dir = output_dir(&out);
            let mut manifest =
                RunManifest::new("analyze", 0, serde_json::json!({ "classes": report.class_order }));
            manifest.add_input(&ckpt)?;
            add_dir_inputs(&mut manifest, &data)?;
            manifest.add_input(&image_emb)?;
            if let Some(p) = &categories {
                manifest.add_input(p)?;
            }
            manifest.write(&dir)?;
            println!("similarity matrix over {} classes: {}", report.class_order.len(), out.display());
            Ok(())
        }
        Cmd::Ablate { config, data, image_emb, text_emb, out, overrides } => {
            let cfg = load_train_config(config.as_deref(), &overrides.set)?;
            let handle = load_dataset(&data)?;
            let image = load_embedding_table(&image_emb, None)?;
            let text = load_embedding_table(&text_emb, None)?;
            let report = run_ablation(&cfg, &handle, &image, &text, &out)?;
            write_json(&out.join("ablation_report.json"), &report)?;
            let resolved = serde_json::to_value(&cfg)
                .map_err(|e| Error::json(&out, e.to_string()))?;
            let mut manifest = RunManifest::new("ablate", cfg.seed, resolved);
            if let Some(p) = &config {
                manifest.add_input(p)?;
            }
            add_dir_inputs(&mut manifest, &data)?;
            manifest.add_input(&image_emb)?;
            manifest.add_input(&text_emb)?;
            manifest.write(&out)?;
            for row in &report.rows {
                println!(
                    "{:<26} top-1 {:.4}  top-5 {:.4}  final loss {:.6}",
                    row.variant, row.top1, row.top5, row.final_loss
                );
            }
            println!(
                "alignment top-1 delta (full minus without_alignment): {:+.4}",
                report.alignment_top1_delta
            );
            Ok(())
        }
        Cmd::CompareEncoders { config, data, image_emb, text_emb, out, overrides } => {
            let base = load_train_config(config.as_deref(), &overrides.set)?;
            let handle = load_dataset(&data)?;
            let image = load_embedding_table(&image_emb, None)?;
            let text = load_embedding_table(&text_emb, None)?;
            let mut configs = Vec::new();
            for kind in [
                neural_mcrl::config::EncoderKind::Nesta,
                neural_mcrl::config::EncoderKind::Mlp,
            ] {
                let mut c = base.clone();
                c.encoder = kind;
                configs.push(c);
            }
            let report = compare_encoders(&configs, &handle, &image, &text, &out)?;
            write_json(&out.join("encoder_comparison.json"), &report)?;
            let resolved = serde_json::to_value(&base)
                .map_err(|e| Error::json(&out, e.to_string()))?;
            let mut manifest = RunManifest::new("compare-encoders", base.seed, resolved);
            if let Some(p) = &config {
                manifest.add_input(p)?;
            }
            add_dir_inputs(&mut manifest, &data)?;
            manifest.add_input(&image_emb)?;
            manifest.add_input(&text_emb)?;
            manifest.write(&out)?;
            for row in &report.rows {
                let cells: Vec<String> =
                    row.cells.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
                println!("{:<10} {}", row.encoder, cells.join("  "));
            }
            Ok(())
        }
        Cmd::Gradcheck { component, out } => {
            let outcomes = match &component {
                Some(name) => vec![neural_mcrl::gradcheck::run_one(name)?],
                None => neural_mcrl::gradcheck::run_all()?,
            };
            for o in &outcomes {
                println!(
                    "{:<22} max rel err {:.3e}  tolerance {:.0e}  {}",
                    o.component,
                    o.max_rel_err,
                    o.tolerance,
                    if o.passed { "pass" } else { "FAIL" }
                );
            }
            if let Some(p) = &out {
                write_json(p, &outcomes)?;
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            if failed > 0 {
                return Err(Error::numerical(format!(
                    "{failed} gradient check(s) exceeded tolerance"
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; they are not errors.
            let code = if e.use_stderr() { 1u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
