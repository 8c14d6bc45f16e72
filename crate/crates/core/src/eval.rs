//! N-way zero-shot evaluation and class-similarity analysis.
//!
//! The central operation is [`zero_shot_classify`]: each evaluation unit (a
//! trial, or a repetition-averaged group of trials) is scored by cosine
//! similarity against a candidate panel of class embeddings, and the true
//! class must rank within the top k to count as a hit. Distractor panels are
//! drawn without replacement from a generator seeded per unit, so reports
//! are bit-reproducible for a fixed seed and units could be scored in any
//! order.
//!
//! [`similarity_matrix`] produces the class-by-class cosine matrix used by
//! the `analyze` subcommand, ordered by category then class id.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::data::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tensor};

/// Protocol parameters recorded alongside the metrics they produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_way: usize,
    pub k_list: Vec<usize>,
    pub repetitions_averaged: bool,
    /// Number of evaluation units actually scored (after optional averaging).
    pub trials_evaluated: usize,
}

/// Zero-shot classification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    /// k -> top-k accuracy in [0, 1].
    pub metrics: BTreeMap<usize, f64>,
    /// class_id -> top-1 accuracy over that class's units.
    pub per_class: BTreeMap<u32, f64>,
    pub seed: u64,
}

/// Mean of all items stored for `class`, renormalized to unit length.
pub fn class_embedding(table: &EmbeddingTable, class: u32) -> Result<Vec<f64>> {
    let items = table.items_for_class(class);
    if items.is_empty() {
        return Err(Error::data(format!("class {class} has no embeddings in the table")));
    }
    let mut acc = vec![0.0; table.dim()];
    for item in &items {
        let v = table.get(class, *item).expect("listed item exists");
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let inv = 1.0 / items.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    let n = norm(&acc);
    if n < 1e-12 {
        return Err(Error::data(format!("class {class} has a near-zero mean embedding")));
    }
    for a in acc.iter_mut() {
        *a /= n;
    }
    Ok(acc)
}

fn unit_vector(row: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = norm(row);
    if n < 1e-12 {
        return Err(Error::data(format!("{what} has a near-zero embedding")));
    }
    Ok(row.iter().map(|x| x / n).collect())
}

/// One scoring unit: a unit-norm query embedding with its true class.
struct Unit {
    class: u32,
    embedding: Vec<f64>,
}

fn build_units(
    embeddings: &Tensor,
    class_ids: &[u32],
    exemplar_ids: &[u32],
    repetitions_averaged: bool,
) -> Result<Vec<Unit>> {
    let shape = embeddings.shape();
    assert!(shape.len() == 2, "embeddings must be [T, F], got {shape:?}");
    let (t, f) = (shape[0], shape[1]);
    if t != class_ids.len() || t != exemplar_ids.len() {
        return Err(Error::data(format!(
            "{t} embedding rows but {} class ids and {} exemplar ids",
            class_ids.len(),
            exemplar_ids.len()
        )));
    }
    if t == 0 {
        return Err(Error::data("no trials to evaluate"));
    }
    let row = |i: usize| &embeddings.data()[i * f..(i + 1) * f];
    if !repetitions_averaged {
        return (0..t)
            .map(|i| {
                Ok(Unit {
                    class: class_ids[i],
                    embedding: unit_vector(row(i), &format!("trial {i}"))?,
                })
            })
            .collect();
    }
    // Group repeats of the same (class, exemplar); mean then renormalize.
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for i in 0..t {
        groups.entry((class_ids[i], exemplar_ids[i])).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|((class, exemplar), idxs)| {
            let mut acc = vec![0.0; f];
            for &i in &idxs {
                for (a, x) in acc.iter_mut().zip(row(i)) {
                    *a += x;
                }
            }
            let inv = 1.0 / idxs.len() as f64;
            for a in acc.iter_mut() {
                *a *= inv;
            }
            Ok(Unit {
                class,
                embedding: unit_vector(&acc, &format!("group ({class}, {exemplar})"))?,
            })
        })
        .collect()
}

/// N-way zero-shot classification with top-k metrics.
///
/// Per unit, a panel of `n_way` candidate classes is formed: the true class
/// plus `n_way - 1` distractors sampled uniformly without replacement from
/// the remaining candidate classes (generator seeded from `seed` and the
/// unit index). When `n_way` equals the full candidate count every class is
/// used and no sampling happens. Scores are cosine similarities against the
/// per-class candidate embeddings (item mean, renormalized); the unit hits
/// at k iff fewer than k panel classes outrank the true class, where ties
/// in score go to the lower class id.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_classify(
    embeddings: &Tensor,
    class_ids: &[u32],
    exemplar_ids: &[u32],
    candidates: &EmbeddingTable,
    n_way: usize,
    k_list: &[usize],
    seed: u64,
    repetitions_averaged: bool,
) -> Result<EvalReport> {
    if embeddings.shape().len() != 2 || embeddings.shape()[1] != candidates.dim() {
        return Err(Error::data(format!(
            "embeddings shaped {:?} do not match candidate dimension {}",
            embeddings.shape(),
            candidates.dim()
        )));
    }
    if n_way < 2 {
        return Err(Error::config(format!("n_way {n_way} is below the 2-way minimum")));
    }
    let ids = candidates.class_ids();
    if n_way > ids.len() {
        return Err(Error::config(format!(
            "n_way {n_way} exceeds the {} candidate classes",
            ids.len()
        )));
    }
    if k_list.is_empty() || k_list.iter().any(|&k| k == 0) {
        return Err(Error::config("k_list must contain positive ranks"));
    }
    let cand: Vec<Vec<f64>> =
        ids.iter().map(|&c| class_embedding(candidates, c)).collect::<Result<_>>()?;
    let pos: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();

    let units = build_units(embeddings, class_ids, exemplar_ids, repetitions_averaged)?;
    for u in &units {
        if !pos.contains_key(&u.class) {
            return Err(Error::data(format!(
                "label {} is not among the candidate classes",
                u.class
            )));
        }
    }

    let full_panel = n_way == ids.len();
    let mut hits: BTreeMap<usize, usize> = k_list.iter().map(|&k| (k, 0)).collect();
    let mut class_hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();

    for (i, u) in units.iter().enumerate() {
        let true_idx = pos[&u.class];
        let panel: Vec<usize> = if full_panel {
            (0..ids.len()).collect()
        } else {
            let mut others: Vec<usize> = (0..ids.len()).filter(|&j| j != true_idx).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("panel.{i}")));
            for s in 0..n_way - 1 {
                let j = rng.gen_range(s..others.len());
                others.swap(s, j);
            }
            let mut panel = vec![true_idx];
            panel.extend_from_slice(&others[..n_way - 1]);
            panel
        };
        let true_score = dot(&u.embedding, &cand[true_idx]);
        let mut rank = 0usize;
        for &j in &panel {
            if j == true_idx {
                continue;
            }
            let s = dot(&u.embedding, &cand[j]);
            if s > true_score || (s == true_score && ids[j] < u.class) {
                rank += 1;
            }
        }
        for (&k, h) in hits.iter_mut() {
            if rank < k {
                *h += 1;
            }
        }
        let entry = class_hits.entry(u.class).or_insert((0, 0));
        entry.1 += 1;
        if rank == 0 {
            entry.0 += 1;
        }
    }

    let n_units = units.len();
    let metrics =
        hits.into_iter().map(|(k, h)| (k, h as f64 / n_units as f64)).collect();
    let per_class = class_hits
        .into_iter()
        .map(|(c, (h, n))| (c, h as f64 / n as f64))
        .collect();
    Ok(EvalReport {
        protocol: EvalProtocol {
            n_way,
            k_list: k_list.to_vec(),
            repetitions_averaged,
            trials_evaluated: n_units,
        },
        metrics,
        per_class,
        seed,
    })
}

/// Per-class mean of embedding rows, renormalized: the query side of the
/// similarity analysis.
pub fn class_mean_embeddings(
    embeddings: &Tensor,
    class_ids: &[u32],
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let shape = embeddings.shape();
    assert!(shape.len() == 2, "embeddings must be [T, F], got {shape:?}");
    let (t, f) = (shape[0], shape[1]);
    if t != class_ids.len() {
        return Err(Error::data(format!("{t} rows but {} class ids", class_ids.len())));
    }
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..t {
        let entry = sums.entry(class_ids[i]).or_insert_with(|| (vec![0.0; f], 0));
        for (a, x) in entry.0.iter_mut().zip(&embeddings.data()[i * f..(i + 1) * f]) {
            *a += x;
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(c, (mut acc, n))| {
            for a in acc.iter_mut() {
                *a /= n as f64;
            }
            let v = unit_vector(&acc, &format!("class {c} mean"))?;
            Ok((c, v))
        })
        .collect()
}

/// Class-by-class cosine similarity report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Row/column classes, ordered by category label then class id.
    pub class_order: Vec<u32>,
    pub category_map: BTreeMap<u32, String>,
    /// matrix[r][c] = cosine(EEG class r, image class c), clamped to [-1, 1].
    pub matrix: Vec<Vec<f64>>,
}

/// Cosine similarity between per-class EEG embeddings (rows) and per-class
/// image embeddings (columns). Classes absent from `category_map` sort with
/// an empty category label, i.e. before any labeled category.
pub fn similarity_matrix(
    eeg_class_embeddings: &BTreeMap<u32, Vec<f64>>,
    image: &EmbeddingTable,
    category_map: &BTreeMap<u32, String>,
) -> Result<SimilarityReport> {
    let eeg_ids: Vec<u32> = eeg_class_embeddings.keys().copied().collect();
    let img_ids = image.class_ids();
    if eeg_ids != img_ids {
        return Err(Error::data(format!(
            "EEG classes {eeg_ids:?} and image classes {img_ids:?} differ"
        )));
    }
    if eeg_ids.is_empty() {
        return Err(Error::data("no classes to compare"));
    }
    let mut order = eeg_ids;
    order.sort_by(|a, b| {
        let ca = category_map.get(a).map(String::as_str).unwrap_or("");
        let cb = category_map.get(b).map(String::as_str).unwrap_or("");
        ca.cmp(cb).then(a.cmp(b))
    });
    let eeg: Vec<Vec<f64>> = order
        .iter()
        .map(|c| unit_vector(&eeg_class_embeddings[c], &format!("class {c}")))
        .collect::<Result<_>>()?;
    let img: Vec<Vec<f64>> =
        order.iter().map(|&c| class_embedding(image, c)).collect::<Result<_>>()?;
    let matrix = eeg
        .iter()
        .map(|e| img.iter().map(|v| dot(e, v).clamp(-1.0, 1.0)).collect())
        .collect();
    Ok(SimilarityReport { class_order: order, category_map: category_map.clone(), matrix })
}

/// One trained variant in an ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub flags: crate::config::AblationFlags,
    pub top1: f64,
    pub top5: f64,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
}

/// The component ablation table: the full model plus the five
/// single-component-off variants, all trained under the same seed and data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    /// Shared seed, recorded so the identical-protocol claim is checkable.
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    /// top1(full) minus top1(without_alignment). The sign is reported, not
    /// asserted; small reference datasets can fall either way.
    pub alignment_top1_delta: f64,
}

/// Train and evaluate the full model and each single-component-off variant
/// under identical seeds. The ablation flags of `base` are ignored: the full
/// row is all-on and each other row switches exactly one component off.
/// Checkpoints land in `out_dir/<variant>/`.
pub fn run_ablation(
    base: &crate::config::TrainConfig,
    data: &crate::data::DatasetHandle,
    image: &EmbeddingTable,
    text: &EmbeddingTable,
    out_dir: &Path,
) -> Result<AblationReport> {
    use crate::config::AblationFlags;
    let all_on = AblationFlags::default();
    let variants: [(&str, AblationFlags); 6] = [
        ("full", all_on),
        ("without_subject_specific", AblationFlags { subject_specific: false, ..all_on }),
        ("without_neural_spectral", AblationFlags { neural_spectral: false, ..all_on }),
        ("without_consistency", AblationFlags { consistency: false, ..all_on }),
        ("without_completion", AblationFlags { completion: false, ..all_on }),
        ("without_alignment", AblationFlags { alignment: false, ..all_on }),
    ];
    let mut rows = Vec::with_capacity(variants.len());
    for (name, flags) in variants {
        let mut cfg = base.clone();
        cfg.ablation = flags;
        let outcome = crate::train::train(&cfg, data, image, text, &out_dir.join(name))?;
        let last = outcome.metrics.last().expect("training ran");
        rows.push(AblationRow {
            variant: name.to_string(),
            flags,
            top1: last.top1,
            top5: last.top5,
            final_loss: last.loss,
            loss_curve: outcome.metrics.iter().map(|m| m.loss).collect(),
        });
    }
    let top1 = |v: &str| rows.iter().find(|r| r.variant == v).expect("variant exists").top1;
    let alignment_top1_delta = top1("full") - top1("without_alignment");
    Ok(AblationReport { seed: base.seed, rows, alignment_top1_delta })
}

/// One encoder's row in a comparison table. Cell keys are
/// `top{k}@{n}way` for sampled panels and `top{k}@full` for the full panel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderRow {
    pub encoder: String,
    pub cells: BTreeMap<String, f64>,
}

/// Encoder comparison under an identical training protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderComparison {
    pub seed: u64,
    pub rows: Vec<EncoderRow>,
}

/// Zero-shot accuracies of one trained model on the unseen split, at every
/// requested panel size and rank.
fn score_model(
    model: &crate::train::TrainedModel,
    data: &crate::data::DatasetHandle,
    image: &EmbeddingTable,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let unseen = data.classes_in(crate::data::Split::Unseen);
    let candidates = image.restricted_to(unseen)?;
    let (emb, classes, exemplars) = model.embed_split(data, crate::data::Split::Unseen)?;
    let full = unseen.len();
    let ks: Vec<usize> = [1usize, 5].iter().copied().filter(|&k| k <= full).collect();
    let mut cells = BTreeMap::new();
    for n in [5usize, 10] {
        if n >= full {
            continue;
        }
        let rep = zero_shot_classify(&emb, &classes, &exemplars, &candidates, n, &ks, seed, false)?;
        for &k in &ks {
            cells.insert(format!("top{k}@{n}way"), rep.metrics[&k]);
        }
    }
    let rep = zero_shot_classify(&emb, &classes, &exemplars, &candidates, full, &ks, seed, false)?;
    for &k in &ks {
        cells.insert(format!("top{k}@full"), rep.metrics[&k]);
    }
    Ok(cells)
}

/// Train each config (they differ in encoder choice) under an identical
/// protocol and report accuracies at panel sizes 5, 10, and full for ranks
/// 1 and 5. All configs must share one seed; panel sizes not below the
/// unseen-class count are folded into the full panel.
pub fn compare_encoders(
    configs: &[crate::config::TrainConfig],
    data: &crate::data::DatasetHandle,
    image: &EmbeddingTable,
    text: &EmbeddingTable,
    out_dir: &Path,
) -> Result<EncoderComparison> {
    if configs.len() < 2 {
        return Err(Error::config(format!(
            "encoder comparison needs at least 2 configs, got {}",
            configs.len()
        )));
    }
    let seed = configs[0].seed;
    if configs.iter().any(|c| c.seed != seed) {
        return Err(Error::config(
            "encoder comparison requires one shared seed across all configs",
        ));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let name = format!("{}_{i}", serde_json::to_value(cfg.encoder)
            .expect("encoder kind serializes")
            .as_str()
            .expect("encoder kind is a string"));
        let outcome = crate::train::train(cfg, data, image, text, &out_dir.join(&name))?;
        let cells = score_model(&outcome.model, data, image, derive_seed(seed, "compare.eval"))?;
        rows.push(EncoderRow { encoder: name, cells });
    }
    Ok(EncoderComparison { seed, rows })
}

/// Write a similarity report as CSV: a header row of class ids, then one
/// row of cosine values per class, in report order.
pub fn write_similarity_csv(path: &Path, report: &SimilarityReport) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = report.class_order.iter().map(|c| c.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in &report.matrix {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingKind;

    fn table_from(rows: &[(u32, Vec<f64>)], dim: usize) -> EmbeddingTable {
        let mut t = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        for (c, v) in rows {
            t.insert(*c, 0, v.clone()).expect("insert");
        }
        t
    }

    fn basis(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    #[test]
    fn self_retrieval_is_perfect_at_any_way() {
        let dim = 6;
        let rows: Vec<(u32, Vec<f64>)> = (0..6).map(|c| (c as u32, basis(dim, c))).collect();
        let table = table_from(&rows, dim);
        let mut data = Vec::new();
        let mut classes = Vec::new();
        for (c, v) in &rows {
            data.extend_from_slice(v);
            classes.push(*c);
        }
        let emb = Tensor::new(&[6, dim], data);
        let exemplars = vec![0; 6];
        for n_way in [2, 4, 6] {
            let rep = zero_shot_classify(&emb, &classes, &exemplars, &table, n_way, &[1], 3, false)
                .expect("eval");
            assert_eq!(rep.metrics[&1], 1.0, "n_way {n_way}");
        }
    }

    #[test]
    fn two_way_with_orthogonal_distractor_hits() {
        // True-class cosine is cos 30 deg ~ 0.866; the distractor scores ~0.
        let dim = 3;
        let table = table_from(&[(0, basis(dim, 0)), (1, basis(dim, 1))], dim);
        let theta = 30f64.to_radians();
        let emb = Tensor::new(&[1, dim], vec![theta.cos(), 0.0, theta.sin()]);
        let rep =
            zero_shot_classify(&emb, &[0], &[0], &table, 2, &[1], 0, false).expect("eval");
        assert_eq!(rep.metrics[&1], 1.0);
    }

    #[test]
    fn score_ties_go_to_the_lower_class_id() {
        // Identical candidate embeddings force exact ties.
        let dim = 2;
        let table = table_from(&[(3, basis(dim, 0)), (5, basis(dim, 0))], dim);
        let emb = Tensor::new(&[1, dim], basis(dim, 0));
        let low = zero_shot_classify(&emb, &[3], &[0], &table, 2, &[1, 2], 0, false).expect("eval");
        assert_eq!(low.metrics[&1], 1.0, "lower id wins the tie");
        let high = zero_shot_classify(&emb, &[5], &[0], &table, 2, &[1, 2], 0, false).expect("eval");
        assert_eq!(high.metrics[&1], 0.0, "higher id loses the tie");
        assert_eq!(high.metrics[&2], 1.0, "but still ranks within the panel");
    }

    #[test]
    fn chance_level_at_200_way() {
        use rand::Rng;
        let dim = 8;
        let n_classes = 200usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        for c in 0..n_classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            table.insert(c as u32, 0, v).expect("insert");
        }
        let trials = 6000usize;
        let mut data = Vec::with_capacity(trials * dim);
        let mut classes = Vec::with_capacity(trials);
        for i in 0..trials {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            data.extend_from_slice(&v);
            classes.push((i % n_classes) as u32);
        }
        let emb = Tensor::new(&[trials, dim], data);
        let exemplars = vec![0u32; trials];
        let rep = zero_shot_classify(&emb, &classes, &exemplars, &table, 200, &[1, 5], 4, false)
            .expect("eval");
        for (k, p) in [(1usize, 1.0 / 200.0), (5, 5.0 / 200.0)] {
            let se = (p * (1.0 - p) / trials as f64).sqrt();
            let acc = rep.metrics[&k];
            assert!(
                (acc - p).abs() <= 3.0 * se,
                "top-{k} {acc} not within 3 SE ({se:.5}) of {p}"
            );
        }
    }

    #[test]
    fn accuracy_is_nondecreasing_in_k_and_one_at_n_way() {
        let dim = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        for c in 0..8u32 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            table.insert(c, 0, v).expect("insert");
        }
        let trials = 64usize;
        let mut data = Vec::new();
        let mut classes = Vec::new();
        for i in 0..trials {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            data.extend_from_slice(&v);
            classes.push((i % 8) as u32);
        }
        let emb = Tensor::new(&[trials, dim], data);
        let exemplars = vec![0u32; trials];
        let ks: Vec<usize> = (1..=5).collect();
        let rep =
            zero_shot_classify(&emb, &classes, &exemplars, &table, 5, &ks, 21, false).expect("eval");
        let mut prev = 0.0;
        for k in 1..=5 {
            assert!(rep.metrics[&k] >= prev, "top-{k} dropped below top-{}", k - 1);
            prev = rep.metrics[&k];
        }
        assert_eq!(rep.metrics[&5], 1.0, "k = n_way always hits");
    }

    #[test]
    fn fixed_seed_reproduces_the_report_exactly() {
        let dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        for c in 0..6u32 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            table.insert(c, 0, v).expect("insert");
        }
        let emb = Tensor::randn(&[30, dim], 1.0, &mut rng);
        let classes: Vec<u32> = (0..30).map(|i| (i % 6) as u32).collect();
        let exemplars = vec![0u32; 30];
        let a = zero_shot_classify(&emb, &classes, &exemplars, &table, 3, &[1, 2], 7, false)
            .expect("eval");
        let b = zero_shot_classify(&emb, &classes, &exemplars, &table, 3, &[1, 2], 7, false)
            .expect("eval");
        assert_eq!(
            serde_json::to_string(&a).expect("json"),
            serde_json::to_string(&b).expect("json")
        );
        let c = zero_shot_classify(&emb, &classes, &exemplars, &table, 3, &[1, 2], 8, false)
            .expect("eval");
        assert_eq!(a.protocol.trials_evaluated, c.protocol.trials_evaluated);
    }

    #[test]
    fn repetition_averaging_groups_by_class_and_exemplar() {
        let dim = 2;
        let table = table_from(&[(0, basis(dim, 0)), (1, basis(dim, 1))], dim);
        // Two noisy repeats of (class 0, exemplar 0) that average to e0.
        let emb = Tensor::new(&[2, dim], vec![0.6, 0.8, 0.6, -0.8]);
        let rep = zero_shot_classify(&emb, &[0, 0], &[0, 0], &table, 2, &[1], 0, true)
            .expect("eval");
        assert_eq!(rep.protocol.trials_evaluated, 1, "repeats collapse to one unit");
        assert_eq!(rep.metrics[&1], 1.0, "averaged embedding aligns with the true class");
        let raw = zero_shot_classify(&emb, &[0, 0], &[0, 0], &table, 2, &[1], 0, false)
            .expect("eval");
        assert_eq!(raw.protocol.trials_evaluated, 2);
    }

    #[test]
    fn contract_violations_are_rejected() {
        let dim = 2;
        let table = table_from(&[(0, basis(dim, 0)), (1, basis(dim, 1))], dim);
        let emb = Tensor::new(&[1, dim], basis(dim, 0));
        let err = zero_shot_classify(&emb, &[0], &[0], &table, 1, &[1], 0, false).unwrap_err();
        assert!(err.to_string().contains("2-way"), "{err}");
        let err = zero_shot_classify(&emb, &[0], &[0], &table, 3, &[1], 0, false).unwrap_err();
        assert!(err.to_string().contains("exceeds"), "{err}");
        let err = zero_shot_classify(&emb, &[9], &[0], &table, 2, &[1], 0, false).unwrap_err();
        assert!(err.to_string().contains("not among"), "{err}");
    }

    #[test]
    fn similarity_of_a_table_with_itself_has_unit_diagonal() {
        let dim = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        let mut eeg = BTreeMap::new();
        for c in 0..5u32 {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let n = norm(&v);
            v.iter_mut().for_each(|x| *x /= n);
            table.insert(c, 0, v.clone()).expect("insert");
            eeg.insert(c, v);
        }
        let rep = similarity_matrix(&eeg, &table, &BTreeMap::new()).expect("similarity");
        for (i, row) in rep.matrix.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-6, "diagonal {i} is {}", row[i]);
            for v in row {
                assert!((-1.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn orthonormal_classes_give_the_identity_matrix() {
        let dim = 3;
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        let mut eeg = BTreeMap::new();
        for c in 0..3u32 {
            table.insert(c, 0, basis(dim, c as usize)).expect("insert");
            eeg.insert(c, basis(dim, c as usize));
        }
        let rep = similarity_matrix(&eeg, &table, &BTreeMap::new()).expect("similarity");
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((rep.matrix[r][c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sixty_degree_classes_score_half() {
        let dim = 2;
        let theta = 60f64.to_radians();
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        table.insert(0, 0, vec![1.0, 0.0]).expect("insert");
        table.insert(1, 0, vec![theta.cos(), theta.sin()]).expect("insert");
        let mut eeg = BTreeMap::new();
        eeg.insert(0u32, vec![1.0, 0.0]);
        eeg.insert(1u32, vec![theta.cos(), theta.sin()]);
        let rep = similarity_matrix(&eeg, &table, &BTreeMap::new()).expect("similarity");
        assert!((rep.matrix[0][1] - 0.5).abs() < 1e-6, "cos 60 deg = 0.5");
        assert!((rep.matrix[1][0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rows_are_ordered_by_category_then_class_id() {
        let dim = 2;
        let mut table = EmbeddingTable::new(dim, EmbeddingKind::Image, true);
        let mut eeg = BTreeMap::new();
        for c in [1u32, 2, 3] {
            table.insert(c, 0, basis(dim, 0)).expect("insert");
            eeg.insert(c, basis(dim, 0));
        }
        let mut cats = BTreeMap::new();
        cats.insert(1u32, "tool".to_string());
        cats.insert(2u32, "animal".to_string());
        cats.insert(3u32, "animal".to_string());
        let rep = similarity_matrix(&eeg, &table, &cats).expect("similarity");
        assert_eq!(rep.class_order, vec![2, 3, 1], "animals before tools, ids ascending");
    }

    #[test]
    fn class_set_mismatch_is_rejected() {
        let dim = 2;
        let table = table_from(&[(0, basis(dim, 0))], dim);
        let mut eeg = BTreeMap::new();
        eeg.insert(1u32, basis(dim, 0));
        let err = similarity_matrix(&eeg, &table, &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("differ"), "{err}");
    }

    #[test]
    fn csv_layout_is_header_then_rows() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("sim.csv");
        let rep = SimilarityReport {
            class_order: vec![4, 7],
            category_map: BTreeMap::new(),
            matrix: vec![vec![1.0, 0.25], vec![0.25, 1.0]],
        };
        write_similarity_csv(&path, &rep).expect("write");
        let text = std::fs::read_to_string(&path).expect("read");
        assert_eq!(text, "4,7\n1,0.25\n0.25,1\n");
    }

    #[test]
    fn class_means_are_unit_rows() {
        let emb = Tensor::new(&[4, 2], vec![2.0, 0.0, 0.0, 2.0, 4.0, 0.0, 0.0, -4.0]);
        let means = class_mean_embeddings(&emb, &[0, 0, 1, 1]).expect("means");
        // Class 0: mean (1, 1) -> unit; class 1: mean (2, -2) -> unit.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((means[&0][0] - s).abs() < 1e-12 && (means[&0][1] - s).abs() < 1e-12);
        assert!((means[&1][0] - s).abs() < 1e-12 && (means[&1][1] + s).abs() < 1e-12);
    }
}
