//! Semantic enhancement: class text prototypes (inter-modal consistency) and
//! Gaussian perturbation of embeddings on the unit hypersphere (intra-modal
//! completion). Perturbation belongs to training only; evaluation paths never
//! call it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{EmbeddingKind, EmbeddingTable};
use crate::error::{Error, Result};
use crate::tensor::{normalize_in_place, Tensor};

/// Perturbation parameters: noise scale, whether to re-project onto the unit
/// hypersphere, and the RNG seed.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub renormalize: bool,
    pub seed: u64,
}

/// Collapse each class's text embeddings to one normalized prototype.
///
/// Per coordinate, the addends are summed in sorted value order, so the
/// prototype is exactly invariant under permutations of a class's
/// descriptions.
pub fn aggregate_text_prototypes(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    if table.kind() != EmbeddingKind::TextRaw {
        return Err(Error::data(format!(
            "prototype aggregation expects a text_raw table, got {:?}",
            table.kind()
        )));
    }
    let f = table.dim();
    let mut out = EmbeddingTable::new(f, EmbeddingKind::TextPrototype, true);
    for class in table.class_ids() {
        let items: Vec<&[f64]> = table
            .items_for_class(class)
            .into_iter()
            .map(|item| table.get(class, item).expect("listed item exists"))
            .collect();
        assert!(!items.is_empty(), "class_ids listed a class with no items");
        let k = items.len() as f64;
        let mut proto = vec![0.0; f];
        let mut column = Vec::with_capacity(items.len());
        for (j, p) in proto.iter_mut().enumerate() {
            column.clear();
            for v in &items {
                column.push(v[j]);
            }
            column.sort_by(f64::total_cmp);
            *p = column.iter().sum::<f64>() / k;
        }
        if normalize_in_place(&mut proto) < 1e-8 {
            return Err(Error::data(format!(
                "class {class} text embeddings average to a near-zero vector"
            )));
        }
        out.insert(class, 0, proto)?;
    }
    Ok(out)
}

/// Draw the additive noise tensor for a perturbation. Exposed so the training
/// loop can place the same noise on the autodiff tape as a constant.
pub fn perturbation_noise(shape: &[usize], sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let g: f64 = StandardNormal.sample(rng);
        *v = sigma * g;
    }
    t
}

/// Add elementwise Gaussian noise of scale sigma to each row, optionally
/// re-projecting rows onto the unit hypersphere. Exact identity at sigma = 0.
pub fn perturb_embeddings(z: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    if spec.sigma < 0.0 {
        return Err(Error::config(format!("negative noise sigma {}", spec.sigma)));
    }
    assert!(z.shape().len() == 2, "expected [B, F] embeddings, got {:?}", z.shape());
    if spec.sigma == 0.0 {
        return Ok(z.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = perturbation_noise(z.shape(), spec.sigma, &mut rng);
    let mut out = z.add(&noise);
    if spec.renormalize {
        let f = z.shape()[1];
        for row in out.data_mut().chunks_mut(f) {
            normalize_in_place(row);
        }
    }
    Ok(out)
}
