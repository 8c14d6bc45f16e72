//! The training loop: encode, perturb, align, contrast, step.
//!
//! Each batch runs the full differentiable pipeline (EEG encoder, optional
//! embedding perturbation, optional retrieval-augmented alignment, combined
//! contrastive loss) on one tape, backpropagates, and takes an Adam step.
//! Ablation flags reroute the pipeline rather than reweighting it: a stage
//! that is off contributes no tape nodes, so its parameters receive no
//! gradient and never move.
//!
//! Per epoch the trainer snapshots parameters rounded to the float32 grid
//! (the checkpoint storage precision), computes zero-shot accuracy on the
//! unseen split from that snapshot, appends a line to `metrics.jsonl`, and
//! writes a checkpoint. Because the logged metrics are computed from the
//! rounded snapshot, reloading the checkpoint reproduces them exactly.
//!
//! Determinism: every random choice (init, batch order, dropout, noise)
//! flows from named streams derived from the config seed, so a fixed config
//! and dataset give bit-identical parameter trajectories and reports.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, EpochMetrics, GeometryMeta,
};
use crate::config::{derive_seed, EncoderKind, TrainConfig};
use crate::data::{
    make_batches, DatasetHandle, EEGBatch, EmbeddingTable, Split,
};
use crate::error::{Error, Result};
use crate::eval::zero_shot_classify;
use crate::nesta::{
    EncoderFlags, MlpBaseline, Mode, NestaConfig, NestaModel, CANONICAL_BAND_EDGES,
};
use crate::eitra::EitraModel;
use crate::objective::total_loss_t;
use crate::optim::{Adam, BoundParams, ParamStore};
use crate::semantic::{aggregate_text_prototypes, perturbation_noise};
use crate::tensor::{norm, Tensor};

/// Name under which the pooled alignment context is stored in checkpoints.
/// It is derived from parameters and text anchors, not a parameter itself.
pub const CONTEXT_TENSOR: &str = "derived.eitra_context";

const EMBED_CHUNK: usize = 64;

/// Either EEG encoder behind one dispatch surface.
#[derive(Debug, Clone)]
pub enum Encoder {
    Nesta(NestaModel),
    Mlp(MlpBaseline),
}

impl Encoder {
    pub fn name(&self) -> &'static str {
        match self {
            Encoder::Nesta(_) => "nesta",
            Encoder::Mlp(_) => "mlp",
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        match self {
            Encoder::Nesta(m) => m.init_params(store, rng),
            Encoder::Mlp(m) => m.init_params(store, rng),
        }
    }

    /// Differentiable encode. The baseline has no subject or spectral stage,
    /// so the flags only affect the full encoder.
    pub fn encode_t(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        batch: &EEGBatch,
        mode: &mut Mode,
        flags: EncoderFlags,
    ) -> Result<Var> {
        match self {
            Encoder::Nesta(m) => m.encode_t(tape, p, batch, mode, flags),
            Encoder::Mlp(m) => m.encode_t(tape, p, batch),
        }
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        batch: &EEGBatch,
        flags: EncoderFlags,
    ) -> Result<Tensor> {
        match self {
            Encoder::Nesta(m) => m.encode(store, batch, flags),
            Encoder::Mlp(m) => m.encode(store, batch),
        }
    }
}

/// The model pair (encoder + alignment head) with its geometry and the
/// ablation routing it was configured for. Parameters live separately in a
/// [`ParamStore`] so snapshots and checkpoints stay cheap.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub encoder: Encoder,
    pub eitra: EitraModel,
    pub flags: crate::config::AblationFlags,
    pub geometry: GeometryMeta,
}

impl Pipeline {
    /// Build from a config and dataset geometry; `f` is the resolved
    /// embedding dimension.
    pub fn new(cfg: &TrainConfig, data: &DatasetHandle, f: usize) -> Result<Self> {
        let geometry = GeometryMeta {
            channels: data.channel_count(),
            window_length: data.window_length(),
            sampling_rate_hz: data.sampling_rate_hz(),
            n_subjects: data.n_subjects(),
            embed_dim: f,
        };
        Self::from_geometry(cfg, &geometry)
    }

    /// Build from explicit geometry (the checkpoint reload path).
    pub fn from_geometry(cfg: &TrainConfig, geometry: &GeometryMeta) -> Result<Self> {
        cfg.validate()?;
        let encoder = match cfg.encoder {
            EncoderKind::Nesta => {
                let band_edges_hz = cfg
                    .band_edges_hz
                    .clone()
                    .unwrap_or_else(|| CANONICAL_BAND_EDGES.to_vec());
                Encoder::Nesta(NestaModel::new(NestaConfig {
                    n_subjects: geometry.n_subjects,
                    c: geometry.channels,
                    l: geometry.window_length,
                    f: geometry.embed_dim,
                    heads: cfg.heads,
                    ff_expansion: cfg.ff_expansion,
                    ff_kernel: cfg.ff_kernel,
                    dropout: cfg.dropout,
                    band_edges_hz,
                    sampling_rate_hz: geometry.sampling_rate_hz,
                })?)
            }
            EncoderKind::Mlp => Encoder::Mlp(MlpBaseline::new(
                geometry.channels,
                geometry.window_length,
                geometry.embed_dim,
            )),
        };
        let eitra = EitraModel::new(cfg.eitra_m, geometry.embed_dim)?;
        Ok(Pipeline { encoder, eitra, flags: cfg.ablation, geometry: geometry.clone() })
    }

    fn encoder_flags(&self) -> EncoderFlags {
        EncoderFlags {
            subject_specific: self.flags.subject_specific,
            neural_spectral: self.flags.neural_spectral,
        }
    }

    /// Fresh parameters from the config's init stream. The alignment head is
    /// always initialized (checkpoints have a uniform shape); with alignment
    /// off it receives no gradient and stays at init. With the spectral
    /// stage off the blend coefficient is forced to 0.
    pub fn init_store(&self, cfg: &TrainConfig) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
        let mut store = ParamStore::new();
        self.encoder.init_params(&mut store, &mut rng);
        self.eitra.init_params(&mut store, &mut rng);
        if !self.flags.neural_spectral && store.contains("nesta.alpha") {
            store.get_mut("nesta.alpha").data_mut()[0] = 0.0;
        }
        store
    }
}

/// A copy of every parameter rounded to the float32 grid: the exact values
/// a checkpoint stores and a reload recovers.
pub fn quantize_store(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        out.insert(name, t.quantize_f32());
    }
    out
}

/// Eval-mode embeddings `[n, F]` for the given trial indices, aligned with
/// the cached context when alignment is active.
pub fn embed_with(
    pipeline: &Pipeline,
    store: &ParamStore,
    context: Option<&Tensor>,
    data: &DatasetHandle,
    indices: &[usize],
) -> Result<Tensor> {
    assert!(!indices.is_empty(), "no trials to embed");
    let f = pipeline.geometry.embed_dim;
    let flags = pipeline.encoder_flags();
    let mut out = Tensor::zeros(&[indices.len(), f]);
    for (start, chunk) in indices.chunks(EMBED_CHUNK).enumerate().map(|(i, c)| (i * EMBED_CHUNK, c))
    {
        let batch = EEGBatch::from_trials(data, chunk);
        let z = pipeline.encoder.encode(store, &batch, flags)?;
        let z = match (pipeline.flags.alignment, context) {
            (true, Some(ctx)) => pipeline.eitra.align_with_context(store, &z, ctx)?,
            _ => z,
        };
        out.data_mut()[start * f..(start + chunk.len()) * f].copy_from_slice(z.data());
    }
    Ok(out)
}

/// A trained (or freshly initialized) pipeline with its parameters and the
/// cached alignment context, ready to embed trials for evaluation.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub pipeline: Pipeline,
    pub store: ParamStore,
    pub context: Option<Tensor>,
}

impl TrainedModel {
    /// Reload a checkpoint archive into a runnable model.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, tensors) = load_checkpoint(path)?;
        let cfg: TrainConfig = serde_json::from_value(meta.config.clone())
            .map_err(|e| Error::json(path, format!("embedded config: {e}")))?;
        let pipeline = Pipeline::from_geometry(&cfg, &meta.geometry)?;
        let mut store = ParamStore::new();
        let mut context = None;
        for (name, t) in tensors {
            if name == CONTEXT_TENSOR {
                context = Some(t);
            } else if !name.starts_with("derived.") {
                store.insert(&name, t);
            }
        }
        if store.is_empty() {
            return Err(Error::data(format!(
                "{} holds no parameter tensors",
                path.display()
            )));
        }
        Ok((TrainedModel { pipeline, store, context }, meta))
    }

    /// Embeddings for explicit trial indices.
    pub fn embed_indices(&self, data: &DatasetHandle, indices: &[usize]) -> Result<Tensor> {
        embed_with(&self.pipeline, &self.store, self.context.as_ref(), data, indices)
    }

    /// Embeddings plus labels for one side of the class split.
    pub fn embed_split(
        &self,
        data: &DatasetHandle,
        split: Split,
    ) -> Result<(Tensor, Vec<u32>, Vec<u32>)> {
        let indices = data.trial_indices(split);
        if indices.is_empty() {
            return Err(Error::data("the requested split has no trials"));
        }
        let emb = self.embed_indices(data, &indices)?;
        let classes = indices.iter().map(|&i| data.trials()[i].class_id).collect();
        let exemplars = indices.iter().map(|&i| data.trials()[i].exemplar_id).collect();
        Ok((emb, classes, exemplars))
    }
}

/// Everything `train` produces: the per-epoch metric history, the checkpoint
/// paths in epoch order, and the final model (parameters rounded to the
/// float32 grid, matching the last checkpoint byte for byte).
#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub model: TrainedModel,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Path {
        self.checkpoints.last().expect("training ran at least one epoch")
    }
}

/// Per-sample training targets: embedding rows indexed by (class, exemplar).
struct TargetTable {
    table: EmbeddingTable,
}

impl TargetTable {
    fn row(&self, class: u32, exemplar: u32) -> Result<&[f64]> {
        let items = self.table.items_for_class(class);
        if items.is_empty() {
            return Err(Error::data(format!("class {class} has no target embedding")));
        }
        let item = items[exemplar as usize % items.len()];
        Ok(self.table.get(class, item).expect("listed item exists"))
    }

    fn batch_rows(&self, batch: &EEGBatch, f: usize) -> Result<Tensor> {
        let b = batch.class_ids.len();
        let mut out = Tensor::zeros(&[b, f]);
        for i in 0..b {
            let row = self.row(batch.class_ids[i], batch.exemplar_ids[i])?;
            out.data_mut()[i * f..(i + 1) * f].copy_from_slice(row);
        }
        Ok(out)
    }

    /// Every stored row must be unit-norm within the contrastive-loss
    /// tolerance; scanned once up front so failures name the table.
    fn check_unit_rows(&self, label: &str) -> Result<()> {
        for ((class, item), v) in self.table.iter() {
            let n = norm(v);
            if (n - 1.0).abs() > 1e-3 {
                return Err(Error::data(format!(
                    "{label} embedding for class {class}, item {item} has norm {n:.6}; \
                     contrastive targets must be unit vectors"
                )));
            }
        }
        Ok(())
    }
}

/// The text table actually used for targets and anchors: class prototypes
/// when semantic consistency is on, the raw table when off.
fn text_target_table(cfg: &TrainConfig, text: &EmbeddingTable) -> Result<EmbeddingTable> {
    if cfg.ablation.consistency {
        aggregate_text_prototypes(text)
    } else {
        Ok(text.clone())
    }
}

/// Anchor matrix `[n_seen, F]`: one text row per seen class, sorted by class
/// id. With semantic consistency on these are the class prototypes; off,
/// each class's first raw text embedding. The same matrix drives alignment
/// during training and the cached evaluation context.
fn anchor_matrix(targets: &TargetTable, seen: &[u32], f: usize) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[seen.len(), f]);
    for (i, &class) in seen.iter().enumerate() {
        let items = targets.table.items_for_class(class);
        if items.is_empty() {
            return Err(Error::data(format!("class {class} has no text embedding")));
        }
        let row = targets.table.get(class, items[0]).expect("listed item exists");
        out.data_mut()[i * f..(i + 1) * f].copy_from_slice(row);
    }
    Ok(out)
}

/// Train the full pipeline and emit one checkpoint per epoch.
///
/// Preconditions: the dataset has seen-class trials and at least two unseen
/// classes (the per-epoch zero-shot log needs a candidate panel); the image
/// table covers every class, the text table every seen class; both match
/// the embedding dimension. The loss aborts on the first non-finite value.
pub fn train(
    cfg: &TrainConfig,
    data: &DatasetHandle,
    image: &EmbeddingTable,
    text: &EmbeddingTable,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let f = cfg.embed_dim.unwrap_or(image.dim());
    if image.dim() != f {
        return Err(Error::data(format!(
            "image embeddings have dimension {}, config expects {f}",
            image.dim()
        )));
    }
    if text.dim() != f {
        return Err(Error::data(format!(
            "text embeddings have dimension {}, config expects {f}",
            text.dim()
        )));
    }
    let seen: Vec<u32> = data.classes_in(Split::Seen).iter().copied().collect();
    let unseen = data.classes_in(Split::Unseen);
    if data.trial_indices(Split::Seen).is_empty() {
        return Err(Error::data("dataset has no seen-class trials to train on"));
    }
    if unseen.len() < 2 {
        return Err(Error::data(format!(
            "{} unseen classes; the per-epoch zero-shot log needs at least 2",
            unseen.len()
        )));
    }

    let image_targets = TargetTable { table: image.clone() };
    let text_targets = TargetTable { table: text_target_table(cfg, text)? };
    // Coverage: training needs image+text rows for seen classes, the
    // zero-shot log needs image rows for unseen classes.
    for &class in &seen {
        if image_targets.table.items_for_class(class).is_empty() {
            return Err(Error::data(format!("class {class} has no image embedding")));
        }
        if text_targets.table.items_for_class(class).is_empty() {
            return Err(Error::data(format!("class {class} has no text embedding")));
        }
    }
    let unseen_candidates = image.restricted_to(unseen)?;
    image_targets.check_unit_rows("image")?;
    text_targets.check_unit_rows("text")?;

    let pipeline = Pipeline::new(cfg, data, f)?;
    let mut store = pipeline.init_store(cfg);
    let anchors = anchor_matrix(&text_targets, &seen, f)?;

    let eff_batch = if cfg.distinct_class_batching {
        cfg.batch_size.min(seen.len())
    } else {
        cfg.batch_size
    };
    let mut adam = Adam::new(cfg.learning_rate);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise"));
    let sigma = if cfg.ablation.completion { cfg.sigma } else { 0.0 };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_log =
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;

    let mut resolved = cfg.clone();
    resolved.embed_dim = Some(f);
    let config_snapshot = serde_json::to_value(&resolved)
        .map_err(|e| Error::json(out_dir, format!("config snapshot: {e}")))?;

    let unseen_idx = data.trial_indices(Split::Unseen);
    let unseen_classes: Vec<u32> =
        unseen_idx.iter().map(|&i| data.trials()[i].class_id).collect();
    let unseen_exemplars: Vec<u32> =
        unseen_idx.iter().map(|&i| data.trials()[i].exemplar_id).collect();
    let n_way = unseen.len();
    let k5 = 5.min(n_way);
    let eval_seed = derive_seed(cfg.seed, "eval");

    let mut history: Vec<EpochMetrics> = Vec::with_capacity(cfg.epochs);
    let mut checkpoints: Vec<PathBuf> = Vec::with_capacity(cfg.epochs);
    let mut last_snapshot: Option<(ParamStore, Option<Tensor>)> = None;

    for epoch in 1..=cfg.epochs {
        let batches = make_batches(
            data,
            eff_batch,
            derive_seed(cfg.seed, &format!("batches.{epoch}")),
            cfg.distinct_class_batching,
            Split::Seen,
        )?;
        let mut epoch_loss = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let mut mode = Mode::Train { dropout: cfg.dropout, rng: &mut dropout_rng };
            let z = pipeline.encoder.encode_t(
                &mut tape,
                &p,
                batch,
                &mut mode,
                pipeline.encoder_flags(),
            )?;
            let b = batch.class_ids.len();
            let z = if sigma > 0.0 {
                let noise = perturbation_noise(&[b, f], sigma, &mut noise_rng);
                let z = tape.add_const(z, noise);
                if cfg.renormalize_noise {
                    tape.row_l2_norm(z)
                } else {
                    z
                }
            } else {
                z
            };
            let z = if pipeline.flags.alignment {
                let protos = tape.leaf(anchors.clone());
                pipeline.eitra.align_t(&mut tape, &p, protos, z)
            } else {
                z
            };
            let z_i = tape.leaf(image_targets.batch_rows(batch, f)?);
            let z_x = tape.leaf(text_targets.batch_rows(batch, f)?);
            let loss = total_loss_t(
                &mut tape,
                z,
                z_i,
                z_x,
                cfg.eta,
                cfg.temperature,
                cfg.symmetric_nce,
            );
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::numerical(format!(
                    "loss became {loss_value} at epoch {epoch}, batch {bi}; aborting"
                )));
            }
            epoch_loss += loss_value;
            let grads = tape.backward(loss);
            let pairs: Vec<(String, Tensor)> = p
                .iter()
                .filter_map(|(name, var)| grads.get(var).map(|g| (name.to_string(), g.clone())))
                .collect();
            adam.step(&mut store, &pairs);
            if store.contains("nesta.alpha") {
                // The spectral blend is a convex combination; project back
                // into [0, 1] after each step.
                for v in store.get_mut("nesta.alpha").data_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
            }
        }
        epoch_loss /= batches.len() as f64;

        let rounded = quantize_store(&store);
        let context = if pipeline.flags.alignment {
            Some(pipeline.eitra.context_vector(&rounded, &anchors)?)
        } else {
            None
        };
        let emb = embed_with(&pipeline, &rounded, context.as_ref(), data, &unseen_idx)?;
        let report = zero_shot_classify(
            &emb,
            &unseen_classes,
            &unseen_exemplars,
            &unseen_candidates,
            n_way,
            &[1, k5],
            eval_seed,
            false,
        )?;
        let entry = EpochMetrics {
            epoch,
            loss: epoch_loss,
            top1: report.metrics[&1],
            top5: report.metrics[&k5],
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| Error::json(&metrics_path, format!("metrics record: {e}")))?;
        writeln!(metrics_log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        history.push(entry);

        let ckpt_path = out_dir.join(format!("ckpt_{epoch:03}.nmc"));
        let mut tensors: Vec<(String, &Tensor)> =
            rounded.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(ctx) = &context {
            tensors.push((CONTEXT_TENSOR.to_string(), ctx));
        }
        let meta = CheckpointMeta {
            version: 1,
            epoch,
            seed: cfg.seed,
            config: config_snapshot.clone(),
            geometry: pipeline.geometry.clone(),
            metrics: history.clone(),
        };
        save_checkpoint(&ckpt_path, &meta, &tensors)?;
        checkpoints.push(ckpt_path);
        last_snapshot = Some((rounded, context));
    }
    metrics_log.flush().map_err(|e| Error::io(&metrics_path, e))?;

    let (final_store, final_context) = last_snapshot.expect("epochs >= 1 by validation");
    Ok(TrainOutcome {
        metrics: history,
        checkpoints,
        model: TrainedModel { pipeline, store: final_store, context: final_context },
    })
}

/// A freshly initialized model with no training steps taken: the step-0
/// reference for chance-level comparisons. The alignment context (when that
/// stage is on) is computed from the same anchor matrix training would use.
pub fn untrained_model(
    cfg: &TrainConfig,
    data: &DatasetHandle,
    image: &EmbeddingTable,
    text: &EmbeddingTable,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let f = cfg.embed_dim.unwrap_or(image.dim());
    if image.dim() != f || text.dim() != f {
        return Err(Error::data(format!(
            "embedding tables ({} image, {} text) do not match dimension {f}",
            image.dim(),
            text.dim()
        )));
    }
    let pipeline = Pipeline::new(cfg, data, f)?;
    let store = pipeline.init_store(cfg);
    let context = if cfg.ablation.alignment {
        let seen: Vec<u32> = data.classes_in(Split::Seen).iter().copied().collect();
        let targets = TargetTable { table: text_target_table(cfg, text)? };
        let anchors = anchor_matrix(&targets, &seen, f)?;
        Some(pipeline.eitra.context_vector(&store, &anchors)?)
    } else {
        None
    };
    Ok(TrainedModel { pipeline, store, context })
}
