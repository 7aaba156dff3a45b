//! Pair enumeration, the low-cost pair filter, pair-feature construction,
//! joint recognition over an image, and triplet decoding.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::drnet::FullModel;
use crate::error::{Error, Result};
use crate::numkit::{affine, logistic, relu, softmax, DenseMatrix, ParamStore};
use crate::relmodel::BeliefTriple;
use crate::spatial::{
    encode_spatial, enclosing_box, rasterize_dual_mask, union_box, BoundingBox, DualSpatialMask,
    SPATIAL_FEATURE_DIM,
};

/// One detection: a box, its appearance feature, and the detector's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub bbox: BoundingBox,
    pub appearance: Vec<f64>,
    pub detector_score: f64,
    pub category_hint: Option<usize>,
}

/// Ordered (subject, object) references into an image's detections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub subject_ref: usize,
    pub object_ref: usize,
}

/// All n(n−1) ordered pairs, subject index major.
pub fn enumerate_pairs(detections: &[DetectedObject]) -> Vec<CandidatePair> {
    let n = detections.len();
    let mut pairs = Vec::with_capacity(n.saturating_sub(1) * n);
    for subject_ref in 0..n {
        for object_ref in 0..n {
            if subject_ref != object_ref {
                pairs.push(CandidatePair { subject_ref, object_ref });
            }
        }
    }
    pairs
}

/// Everything the model needs for one candidate pair.
#[derive(Debug, Clone)]
pub struct PairInputs {
    pub x_s: Vec<f64>,
    pub x_o: Vec<f64>,
    pub union_feature: Vec<f64>,
    pub masks: DualSpatialMask,
}

/// Gathers appearance features, the ingested enclosing-box feature, and the
/// dual masks rasterized over the pair's enclosing frame.
pub fn build_pair_inputs(
    record: &ImageRecord,
    subject_ref: usize,
    object_ref: usize,
    mask_resolution: usize,
    margin_fraction: f64,
) -> Result<PairInputs> {
    let n = record.detections.len();
    if subject_ref >= n || object_ref >= n {
        return Err(Error::index(format!(
            "pair ({subject_ref},{object_ref}) outside {n} detections"
        )));
    }
    if subject_ref == object_ref {
        return Err(Error::config("a pair needs two distinct detections"));
    }
    let subject = &record.detections[subject_ref];
    let object = &record.detections[object_ref];
    let union_feature = record
        .union_feature(subject_ref, object_ref)
        .ok_or_else(|| {
            Error::config(format!(
                "image {} has no union feature for pair ({subject_ref},{object_ref})",
                record.image_id
            ))
        })?
        .to_vec();
    let frame = enclosing_box(
        &subject.bbox,
        &object.bbox,
        margin_fraction,
        record.width,
        record.height,
    );
    let masks = rasterize_dual_mask(&subject.bbox, &object.bbox, &frame, mask_resolution)?;
    Ok(PairInputs {
        x_s: subject.appearance.clone(),
        x_o: object.appearance.clone(),
        union_feature,
        masks,
    })
}

/// Activations kept by the pair compressor for its backward pass.
#[derive(Debug, Clone)]
pub struct PairTrace {
    pub concat: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub x_r: Vec<f64>,
}

/// x_r = fc2(relu(fc1([union_feature ∥ spatial_64]))).
pub fn pair_feature_forward(
    union_feature: &[f64],
    spatial_feature: &[f64],
    store: &ParamStore,
) -> Result<PairTrace> {
    let mut concat = Vec::with_capacity(union_feature.len() + spatial_feature.len());
    concat.extend_from_slice(union_feature);
    concat.extend_from_slice(spatial_feature);
    let hidden_pre = affine(
        &concat,
        store.value("pair.fc1.weight"),
        store.value("pair.fc1.bias").values(),
    )?;
    let hidden = relu(&hidden_pre);
    let x_r = affine(
        &hidden,
        store.value("pair.fc2.weight"),
        store.value("pair.fc2.bias").values(),
    )?;
    Ok(PairTrace { concat, hidden_pre, hidden, x_r })
}

/// Accumulates compressor gradients and returns dL/d(spatial feature).
/// The upstream dx_r already carries any batch weighting.
pub fn pair_feature_backward(
    trace: &PairTrace,
    dx_r: &[f64],
    store: &mut ParamStore,
) -> Vec<f64> {
    let mut d_hidden = vec![0.0; trace.hidden.len()];
    {
        let p = store.param_mut("pair.fc2.weight");
        p.grad.outer_add(dx_r, &trace.hidden, 1.0);
        p.value.matvec_t_add(dx_r, &mut d_hidden);
    }
    {
        let p = store.param_mut("pair.fc2.bias");
        for (g, d) in p.grad.values_mut().iter_mut().zip(dx_r) {
            *g += d;
        }
    }
    for (d, pre) in d_hidden.iter_mut().zip(&trace.hidden_pre) {
        if *pre <= 0.0 {
            *d = 0.0;
        }
    }
    let mut d_concat = vec![0.0; trace.concat.len()];
    {
        let p = store.param_mut("pair.fc1.weight");
        p.grad.outer_add(&d_hidden, &trace.concat, 1.0);
        p.value.matvec_t_add(&d_hidden, &mut d_concat);
    }
    {
        let p = store.param_mut("pair.fc1.bias");
        for (g, d) in p.grad.values_mut().iter_mut().zip(&d_hidden) {
            *g += d;
        }
    }
    // The union-feature part is ingested data; only the spatial part flows on.
    d_concat.split_off(d_concat.len() - SPATIAL_FEATURE_DIM)
}

/// The compressed pair feature for one pair under a full model.
pub fn build_pair_feature(model: &FullModel, inputs: &PairInputs) -> Result<Vec<f64>> {
    let s64 = encode_spatial(&inputs.masks, &model.spatial, &model.store)?;
    Ok(pair_feature_forward(&inputs.union_feature, &s64, &model.store)?.x_r)
}

/// Affine-over-concatenation filter scoring how likely a pair is related.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairFilterParams {
    /// 1×(64 + 2N) weight row over [spatial ∥ subject belief ∥ object belief].
    pub weight: DenseMatrix,
    pub bias: f64,
    /// Keep threshold τ on the logistic probability.
    pub threshold: f64,
}

impl PairFilterParams {
    pub fn zeros(n_categories: usize, threshold: f64) -> Self {
        PairFilterParams {
            weight: DenseMatrix::zeros(1, SPATIAL_FEATURE_DIM + 2 * n_categories),
            bias: 0.0,
            threshold,
        }
    }
}

/// Keep/drop decision with the underlying probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub probability: f64,
}

fn filter_input(
    record: &ImageRecord,
    pair: &CandidatePair,
    model: &FullModel,
) -> Result<Vec<f64>> {
    let subject = &record.detections[pair.subject_ref];
    let object = &record.detections[pair.object_ref];
    let frame = enclosing_box(
        &subject.bbox,
        &object.bbox,
        crate::spatial::DEFAULT_MARGIN_FRACTION,
        record.width,
        record.height,
    );
    let masks =
        rasterize_dual_mask(&subject.bbox, &object.bbox, &frame, model.dims.mask_resolution)?;
    let s64 = encode_spatial(&masks, &model.spatial, &model.store)?;
    // Category beliefs come from the model's first-unit unary softmax.
    let w = model.store.value("unit0.obj.weight");
    let b = model.store.value("unit0.obj.bias");
    let q_s = softmax(&affine(&subject.appearance, w, b.values())?)?;
    let q_o = softmax(&affine(&object.appearance, w, b.values())?)?;
    let mut input = s64;
    input.extend_from_slice(q_s.values());
    input.extend_from_slice(q_o.values());
    Ok(input)
}

/// Scores one pair: keep iff logistic(w·input + b) ≥ τ. The spatial feature
/// and category beliefs are computed from the (frozen) full model.
pub fn pair_filter(
    record: &ImageRecord,
    pair: &CandidatePair,
    filter: &PairFilterParams,
    model: &FullModel,
) -> Result<FilterDecision> {
    let input = filter_input(record, pair, model)?;
    let logit = filter.weight.row(0).iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()
        + filter.bias;
    let probability = logistic(logit);
    Ok(FilterDecision { keep: probability >= filter.threshold, probability })
}

/// Filter training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterTrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for FilterTrainHyper {
    fn default() -> Self {
        FilterTrainHyper { learning_rate: 0.5, epochs: 5, seed: 0 }
    }
}

/// Trains the filter with logistic loss against related/unrelated labels
/// derived from ground truth. A pair counts as related when its two
/// detections co-occur in some ground-truth instance, in either order.
/// Positive examples are reweighted by the negative/positive ratio.
pub fn train_pair_filter(
    records: &[ImageRecord],
    model: &FullModel,
    threshold: f64,
    hyper: &FilterTrainHyper,
) -> Result<PairFilterParams> {
    let mut examples: Vec<(Vec<f64>, bool)> = Vec::new();
    for record in records {
        let related: std::collections::BTreeSet<(usize, usize)> = record
            .ground_truth
            .iter()
            .flat_map(|gt| {
                [(gt.subject_ref, gt.object_ref), (gt.object_ref, gt.subject_ref)]
            })
            .collect();
        for pair in enumerate_pairs(&record.detections) {
            let input = filter_input(record, &pair, model)?;
            examples.push((input, related.contains(&(pair.subject_ref, pair.object_ref))));
        }
    }
    if examples.is_empty() {
        return Err(Error::config("no pairs to train the filter on"));
    }
    let n_pos = examples.iter().filter(|(_, y)| *y).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::config("no related pairs in the training data"));
    }
    let pos_weight = n_neg.max(1) as f64 / n_pos as f64;

    let dim = examples[0].0.len();
    let mut weight = vec![0.0; dim];
    let mut bias = 0.0;
    let mut rng = ChaCha20Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..hyper.epochs {
        for i in (1..order.len()).rev() {
            let j = (rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
        for &idx in &order {
            let (input, label) = &examples[idx];
            let logit = weight.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + bias;
            let p = logistic(logit);
            let (target, w_ex) = if *label { (1.0, pos_weight) } else { (0.0, 1.0) };
            let g = w_ex * (p - target);
            for (w, x) in weight.iter_mut().zip(input) {
                *w -= hyper.learning_rate * g * x;
            }
            bias -= hyper.learning_rate * g;
        }
    }
    Ok(PairFilterParams {
        weight: DenseMatrix::from_values(1, dim, weight)?,
        bias,
        threshold,
    })
}

/// One decoded triplet with its factorized score and the boxes it refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub s: usize,
    pub r: usize,
    pub o: usize,
    pub score: f64,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
    pub union_box: BoundingBox,
}

/// Runs the full model on one candidate pair.
pub fn recognize_pair(
    record: &ImageRecord,
    pair: &CandidatePair,
    model: &FullModel,
) -> Result<BeliefTriple> {
    let inputs = build_pair_inputs(
        record,
        pair.subject_ref,
        pair.object_ref,
        model.dims.mask_resolution,
        crate::spatial::DEFAULT_MARGIN_FRACTION,
    )?;
    model.recognize(&inputs)
}

/// Decodes per-pair beliefs into ranked predictions: per pair the argmax
/// triplet scored by the product of the three maxima, globally sorted by
/// descending score with ties broken by (pair order, s, r, o) ascending.
pub fn decode_and_rank(
    per_pair: &[(CandidatePair, BeliefTriple)],
    detections: &[DetectedObject],
    top_k: usize,
) -> Vec<TripletPrediction> {
    let mut ranked: Vec<(usize, TripletPrediction)> = per_pair
        .iter()
        .enumerate()
        .map(|(pair_idx, (pair, beliefs))| {
            let s = beliefs.q_s.argmax();
            let r = beliefs.q_r.argmax();
            let o = beliefs.q_o.argmax();
            let score =
                beliefs.q_s.values()[s] * beliefs.q_r.values()[r] * beliefs.q_o.values()[o];
            let subject_box = detections[pair.subject_ref].bbox;
            let object_box = detections[pair.object_ref].bbox;
            (
                pair_idx,
                TripletPrediction {
                    s,
                    r,
                    o,
                    score,
                    subject_box,
                    object_box,
                    union_box: union_box(&subject_box, &object_box),
                },
            )
        })
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(ia.cmp(ib))
            .then(a.s.cmp(&b.s))
            .then(a.r.cmp(&b.r))
            .then(a.o.cmp(&b.o))
    });
    ranked.into_iter().take(top_k).map(|(_, p)| p).collect()
}

/// Full per-image pipeline: enumerate, optionally filter, recognize, decode.
pub fn recognize_image(
    record: &ImageRecord,
    model: &FullModel,
    filter: Option<&PairFilterParams>,
    top_k: usize,
) -> Result<Vec<TripletPrediction>> {
    let mut kept = Vec::new();
    for pair in enumerate_pairs(&record.detections) {
        if let Some(f) = filter {
            if !pair_filter(record, &pair, f, model)?.keep {
                continue;
            }
        }
        kept.push((pair, recognize_pair(record, &pair, model)?));
    }
    Ok(decode_and_rank(&kept, &record.detections, top_k))
}

/// Ranked predictions over the ground-truth pairs only (the predicate
/// recognition setting, where pairs are given).
pub fn recognize_gt_pairs(
    record: &ImageRecord,
    model: &FullModel,
    top_k: usize,
) -> Result<Vec<TripletPrediction>> {
    let mut per_pair = Vec::with_capacity(record.ground_truth.len());
    for gt in &record.ground_truth {
        let pair = CandidatePair { subject_ref: gt.subject_ref, object_ref: gt.object_ref };
        per_pair.push((pair, recognize_pair(record, &pair, model)?));
    }
    Ok(decode_and_rank(&per_pair, &record.detections, top_k))
}

/// Per-image recognition across a dataset. `threads > 1` parallelizes over
/// images; results keep dataset order, so the output is identical either way.
pub fn recognize_dataset(
    records: &[ImageRecord],
    model: &FullModel,
    filter: Option<&PairFilterParams>,
    top_k: usize,
    gt_pairs_only: bool,
    threads: usize,
) -> Result<Vec<Vec<TripletPrediction>>> {
    let run = |record: &ImageRecord| {
        if gt_pairs_only {
            recognize_gt_pairs(record, model, top_k)
        } else {
            recognize_image(record, model, filter, top_k)
        }
    };
    if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            records.par_iter().map(run).collect()
        })
    } else {
        records.iter().map(run).collect()
    }
}
