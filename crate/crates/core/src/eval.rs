//! Recall@K under the three task settings, IoU, entropy and perplexity
//! diagnostics, and scene-graph generation/similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::numkit::{cross_entropy, entropy, ProbVector};
use crate::pipeline::TripletPrediction;
use crate::spatial::{union_box, BoundingBox};

/// The three evaluation regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSetting {
    /// Boxes and category labels given; only the predicate must be right.
    PredicateRecognition,
    /// Whole triplet right and the union boxes overlap at the threshold.
    UnionBoxDetection,
    /// Whole triplet right and both boxes overlap at the threshold.
    TwoBoxesDetection,
}

impl TaskSetting {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "predicate" | "predicate_recognition" => Ok(TaskSetting::PredicateRecognition),
            "union_box" | "union_box_detection" => Ok(TaskSetting::UnionBoxDetection),
            "two_boxes" | "two_boxes_detection" => Ok(TaskSetting::TwoBoxesDetection),
            other => Err(Error::config(format!("unknown task setting {other:?}"))),
        }
    }
}

/// One ground-truth instance in evaluation form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub s: usize,
    pub r: usize,
    pub o: usize,
    pub subject_box: BoundingBox,
    pub object_box: BoundingBox,
}

impl GtInstance {
    pub fn union_box(&self) -> BoundingBox {
        union_box(&self.subject_box, &self.object_box)
    }
}

/// Evaluation view of a record's ground truth.
pub fn gt_instances(record: &ImageRecord) -> Vec<GtInstance> {
    record
        .ground_truth
        .iter()
        .map(|gt| GtInstance {
            s: gt.subject_category,
            r: gt.predicate,
            o: gt.object_category,
            subject_box: record.detections[gt.subject_ref].bbox,
            object_box: record.detections[gt.object_ref].bbox,
        })
        .collect()
}

/// Intersection area over union area; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

fn prediction_matches(
    pred: &TripletPrediction,
    gt: &GtInstance,
    setting: TaskSetting,
    iou_threshold: f64,
) -> bool {
    match setting {
        TaskSetting::PredicateRecognition => {
            pred.subject_box == gt.subject_box
                && pred.object_box == gt.object_box
                && pred.r == gt.r
        }
        TaskSetting::UnionBoxDetection => {
            pred.s == gt.s
                && pred.r == gt.r
                && pred.o == gt.o
                && iou(&pred.union_box, &gt.union_box()) >= iou_threshold
        }
        TaskSetting::TwoBoxesDetection => {
            pred.s == gt.s
                && pred.r == gt.r
                && pred.o == gt.o
                && iou(&pred.subject_box, &gt.subject_box) >= iou_threshold
                && iou(&pred.object_box, &gt.object_box) >= iou_threshold
        }
    }
}

/// Per-image recall breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecall {
    pub recalled: usize,
    pub total: usize,
}

/// Aggregate Recall@K result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallReport {
    pub setting: TaskSetting,
    pub k: usize,
    pub iou_threshold: f64,
    pub recalled: usize,
    pub total_gt: usize,
    pub recall: f64,
    pub per_image: Vec<ImageRecall>,
}

/// Greedy one-to-one matching in rank order: each prediction consumes at
/// most one ground-truth instance (the first eligible unmatched one) and
/// each instance is recalled at most once.
pub fn recall_at_k(
    predictions: &[Vec<TripletPrediction>],
    ground_truth: &[Vec<GtInstance>],
    k: usize,
    setting: TaskSetting,
    iou_threshold: f64,
) -> Result<RecallReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::dimension(format!(
            "{} prediction lists vs {} ground-truth lists",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let mut recalled = 0usize;
    let mut total = 0usize;
    let mut per_image = Vec::with_capacity(predictions.len());
    for (preds, gts) in predictions.iter().zip(ground_truth) {
        let mut matched = vec![false; gts.len()];
        let mut image_recalled = 0usize;
        for pred in preds.iter().take(k) {
            if let Some(gi) = (0..gts.len())
                .find(|&gi| !matched[gi] && prediction_matches(pred, &gts[gi], setting, iou_threshold))
            {
                matched[gi] = true;
                image_recalled += 1;
            }
        }
        recalled += image_recalled;
        total += gts.len();
        per_image.push(ImageRecall { recalled: image_recalled, total: gts.len() });
    }
    Ok(RecallReport {
        setting,
        k,
        iou_threshold,
        recalled,
        total_gt: total,
        recall: if total == 0 { 0.0 } else { recalled as f64 / total as f64 },
        per_image,
    })
}

/// Recall@K across IoU thresholds (the union-box relaxation curve).
pub fn iou_sweep(
    predictions: &[Vec<TripletPrediction>],
    ground_truth: &[Vec<GtInstance>],
    k: usize,
    setting: TaskSetting,
    thresholds: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if thresholds.iter().any(|t| !(0.0 < *t && *t <= 1.0)) {
        return Err(Error::config("IoU thresholds must lie in (0, 1]"));
    }
    thresholds
        .iter()
        .map(|&t| {
            recall_at_k(predictions, ground_truth, k, setting, t).map(|r| (t, r.recall))
        })
        .collect()
}

/// Empirical predicate entropies of a dataset's ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyStats {
    /// H of the pooled predicate distribution, in nats.
    pub marginal_entropy: f64,
    /// Σ_{s,o} p̂(s,o) · H(p̂(r | s,o)), raw counts, no smoothing.
    pub conditional_entropy: f64,
    pub instances: usize,
}

pub fn predicate_entropy_stats(records: &[ImageRecord]) -> Result<EntropyStats> {
    let mut marginal: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_pair: BTreeMap<(usize, usize), BTreeMap<usize, usize>> = BTreeMap::new();
    let mut total = 0usize;
    for record in records {
        for gt in &record.ground_truth {
            *marginal.entry(gt.predicate).or_default() += 1;
            *by_pair
                .entry((gt.subject_category, gt.object_category))
                .or_default()
                .entry(gt.predicate)
                .or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::config("dataset has no relationship instances"));
    }
    let dist = |counts: &BTreeMap<usize, usize>, n: usize| -> Vec<f64> {
        counts.values().map(|c| *c as f64 / n as f64).collect()
    };
    let marginal_entropy = entropy(&dist(&marginal, total));
    let mut conditional_entropy = 0.0;
    for counts in by_pair.values() {
        let cell_total: usize = counts.values().sum();
        conditional_entropy +=
            (cell_total as f64 / total as f64) * entropy(&dist(counts, cell_total));
    }
    Ok(EntropyStats { marginal_entropy, conditional_entropy, instances: total })
}

/// exp(mean cross-entropy of the predicate beliefs against the truths).
pub fn prediction_perplexity(items: &[(ProbVector, usize)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::config("perplexity needs at least one instance"));
    }
    let mut total = 0.0;
    for (q_r, truth) in items {
        total += cross_entropy(q_r, *truth)?;
    }
    Ok((total / items.len() as f64).exp())
}

/// Directed scene graph: category-labeled boxes and predicate edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<SceneEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneNode {
    pub category: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEdge {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

impl SceneGraph {
    pub fn empty() -> Self {
        SceneGraph { nodes: Vec::new(), edges: Vec::new() }
    }
}

fn box_key(b: &BoundingBox) -> [u64; 4] {
    [b.x_min.to_bits(), b.y_min.to_bits(), b.x_max.to_bits(), b.y_max.to_bits()]
}

/// Builds a graph from ranked predictions with score ≥ `score_floor`.
/// Nodes deduplicate on (box, category) identity; an edge whose endpoints
/// merge into one node is dropped (no self loops).
pub fn generate_scene_graph(
    predictions: &[TripletPrediction],
    score_floor: f64,
) -> SceneGraph {
    let mut graph = SceneGraph::empty();
    let mut index: BTreeMap<(usize, [u64; 4]), usize> = BTreeMap::new();
    let mut intern = |category: usize, bbox: &BoundingBox, nodes: &mut Vec<SceneNode>| -> usize {
        *index.entry((category, box_key(bbox))).or_insert_with(|| {
            nodes.push(SceneNode { category, bbox: *bbox });
            nodes.len() - 1
        })
    };
    for pred in predictions.iter().filter(|p| p.score >= score_floor) {
        let subject = intern(pred.s, &pred.subject_box, &mut graph.nodes);
        let object = intern(pred.o, &pred.object_box, &mut graph.nodes);
        if subject != object {
            graph.edges.push(SceneEdge { subject, predicate: pred.r, object });
        }
    }
    graph
}

fn f1(matches: usize, a_total: usize, b_total: usize) -> f64 {
    if a_total == 0 && b_total == 0 {
        return 1.0; // both empty of this kind
    }
    2.0 * matches as f64 / (a_total + b_total) as f64
}

/// Harmonic mean of node-F1 and edge-F1 under greedy IoU matching.
///
/// Nodes match when categories agree and IoU clears the threshold; matching
/// is one-to-one, greedy by descending IoU with index-order tie breaking.
/// Edges match when both endpoints matched and the predicate agrees.
pub fn scene_graph_similarity(
    predicted: &SceneGraph,
    truth: &SceneGraph,
    iou_threshold: f64,
) -> f64 {
    // Candidate node pairs sorted by quality.
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, pn) in predicted.nodes.iter().enumerate() {
        for (ti, tn) in truth.nodes.iter().enumerate() {
            if pn.category == tn.category {
                let overlap = iou(&pn.bbox, &tn.bbox);
                if overlap >= iou_threshold {
                    candidates.push((overlap, pi, ti));
                }
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    });
    let mut pred_to_truth: BTreeMap<usize, usize> = BTreeMap::new();
    let mut truth_used = vec![false; truth.nodes.len()];
    for (_, pi, ti) in candidates {
        if !pred_to_truth.contains_key(&pi) && !truth_used[ti] {
            pred_to_truth.insert(pi, ti);
            truth_used[ti] = true;
        }
    }
    let node_f1 = f1(pred_to_truth.len(), predicted.nodes.len(), truth.nodes.len());

    let mut truth_edge_used = vec![false; truth.edges.len()];
    let mut edge_matches = 0usize;
    for edge in &predicted.edges {
        let (Some(&ms), Some(&mo)) =
            (pred_to_truth.get(&edge.subject), pred_to_truth.get(&edge.object))
        else {
            continue;
        };
        if let Some(ti) = truth.edges.iter().enumerate().position(|(ti, te)| {
            !truth_edge_used[ti]
                && te.subject == ms
                && te.object == mo
                && te.predicate == edge.predicate
        }) {
            truth_edge_used[ti] = true;
            edge_matches += 1;
        }
    }
    let edge_f1 = f1(edge_matches, predicted.edges.len(), truth.edges.len());

    if node_f1 + edge_f1 == 0.0 {
        0.0
    } else {
        2.0 * node_f1 * edge_f1 / (node_f1 + edge_f1)
    }
}

/// Scene graph of a record's ground truth.
pub fn gt_scene_graph(record: &ImageRecord) -> SceneGraph {
    let mut graph = SceneGraph::empty();
    let mut index: BTreeMap<(usize, [u64; 4]), usize> = BTreeMap::new();
    for gt in &record.ground_truth {
        let mut intern = |category: usize, bbox: &BoundingBox| -> usize {
            *index.entry((category, box_key(bbox))).or_insert_with(|| {
                graph.nodes.push(SceneNode { category, bbox: *bbox });
                graph.nodes.len() - 1
            })
        };
        let s = intern(gt.subject_category, &record.detections[gt.subject_ref].bbox);
        let o = intern(gt.object_category, &record.detections[gt.object_ref].bbox);
        if s != o {
            graph.edges.push(SceneEdge { subject: s, predicate: gt.predicate, object: o });
        }
    }
    graph
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn pred(
        s: usize,
        r: usize,
        o: usize,
        score: f64,
        sb: BoundingBox,
        ob: BoundingBox,
    ) -> TripletPrediction {
        TripletPrediction {
            s,
            r,
            o,
            score,
            subject_box: sb,
            object_box: ob,
            union_box: union_box(&sb, &ob),
        }
    }

    #[test]
    fn iou_cases() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bb(20.0, 20.0, 30.0, 30.0)), 0.0);
        let b = bb(1.0, 0.0, 3.0, 2.0);
        let c = bb(0.0, 0.0, 2.0, 2.0);
        assert!((iou(&b, &c) - 2.0 / 6.0).abs() < 1e-12);
    }

    // Maximum bipartite matching oracle, small graphs only.
    fn exhaustive_recall(
        preds: &[TripletPrediction],
        gts: &[GtInstance],
        k: usize,
        setting: TaskSetting,
        thr: f64,
    ) -> usize {
        let preds: Vec<_> = preds.iter().take(k).collect();
        let mut matched_gt = vec![usize::MAX; gts.len()];
        fn augment(
            p: usize,
            preds: &[&TripletPrediction],
            gts: &[GtInstance],
            setting: TaskSetting,
            thr: f64,
            seen: &mut [bool],
            matched_gt: &mut [usize],
        ) -> bool {
            for gi in 0..gts.len() {
                if !seen[gi] && prediction_matches(preds[p], &gts[gi], setting, thr) {
                    seen[gi] = true;
                    if matched_gt[gi] == usize::MAX
                        || augment(matched_gt[gi], preds, gts, setting, thr, seen, matched_gt)
                    {
                        matched_gt[gi] = p;
                        return true;
                    }
                }
            }
            false
        }
        let mut total = 0;
        for p in 0..preds.len() {
            let mut seen = vec![false; gts.len()];
            if augment(p, &preds, gts, setting, thr, &mut seen, &mut matched_gt) {
                total += 1;
            }
        }
        total
    }

    /// Ten hand-built cases covering the three settings, with the greedy
    /// matcher checked against exhaustive bipartite matching on each.
    #[test]
    fn recall_fixture_set() {
        let sb = bb(0.0, 0.0, 10.0, 10.0);
        let ob = bb(20.0, 0.0, 30.0, 10.0);
        let gt1 = GtInstance { s: 0, r: 1, o: 2, subject_box: sb, object_box: ob };
        // Shift both boxes right by 12: the union boxes are (0,0,30,10) vs
        // (12,0,42,10), IoU = 180/420 = 3/7, and the per-box IoUs are 0.
        let shifted_sb = bb(12.0, 0.0, 22.0, 10.0);
        let shifted_ob = bb(32.0, 0.0, 42.0, 10.0);

        struct Case {
            name: &'static str,
            preds: Vec<TripletPrediction>,
            gts: Vec<GtInstance>,
            k: usize,
            setting: TaskSetting,
            thr: f64,
            expect: f64,
        }
        let cases = vec![
            Case {
                name: "perfect predicate",
                preds: vec![pred(0, 1, 2, 0.9, sb, ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::PredicateRecognition,
                thr: 0.5,
                expect: 1.0,
            },
            Case {
                name: "wrong predicate",
                preds: vec![pred(0, 0, 2, 0.9, sb, ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::PredicateRecognition,
                thr: 0.5,
                expect: 0.0,
            },
            Case {
                name: "perfect union box",
                preds: vec![pred(0, 1, 2, 0.9, sb, ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::UnionBoxDetection,
                thr: 0.5,
                expect: 1.0,
            },
            Case {
                name: "union iou 3/7 fails at 0.5",
                preds: vec![pred(0, 1, 2, 0.9, shifted_sb, shifted_ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::UnionBoxDetection,
                thr: 0.5,
                expect: 0.0,
            },
            Case {
                name: "union iou 3/7 passes at 0.3",
                preds: vec![pred(0, 1, 2, 0.9, shifted_sb, shifted_ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::UnionBoxDetection,
                thr: 0.3,
                expect: 1.0,
            },
            Case {
                name: "same shift fails two-boxes at 0.5",
                preds: vec![pred(0, 1, 2, 0.9, shifted_sb, shifted_ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::TwoBoxesDetection,
                thr: 0.5,
                expect: 0.0,
            },
            Case {
                name: "labels wrong, boxes perfect",
                preds: vec![pred(1, 1, 2, 0.9, sb, ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::TwoBoxesDetection,
                thr: 0.5,
                expect: 0.0,
            },
            Case {
                name: "one of two recalled",
                preds: vec![pred(0, 1, 2, 0.9, sb, ob)],
                gts: vec![
                    gt1.clone(),
                    GtInstance { s: 3, r: 0, o: 4, subject_box: shifted_sb, object_box: shifted_ob },
                ],
                k: 50,
                setting: TaskSetting::TwoBoxesDetection,
                thr: 0.5,
                expect: 0.5,
            },
            Case {
                name: "K cuts off the match",
                preds: vec![
                    pred(9, 9, 9, 0.99, shifted_sb, shifted_ob),
                    pred(0, 1, 2, 0.9, sb, ob),
                ],
                gts: vec![gt1.clone()],
                k: 1,
                setting: TaskSetting::UnionBoxDetection,
                thr: 0.5,
                expect: 0.0,
            },
            Case {
                name: "duplicate predictions consume one gt",
                preds: vec![pred(0, 1, 2, 0.9, sb, ob), pred(0, 1, 2, 0.8, sb, ob)],
                gts: vec![gt1.clone()],
                k: 50,
                setting: TaskSetting::UnionBoxDetection,
                thr: 0.5,
                expect: 1.0,
            },
        ];
        assert_eq!(cases.len(), 10);
        for case in cases {
            let report = recall_at_k(
                &[case.preds.clone()],
                &[case.gts.clone()],
                case.k,
                case.setting,
                case.thr,
            )
            .unwrap();
            assert!(
                (report.recall - case.expect).abs() < 1e-12,
                "{}: got {}, expected {}",
                case.name,
                report.recall,
                case.expect
            );
            let exhaustive =
                exhaustive_recall(&case.preds, &case.gts, case.k, case.setting, case.thr);
            assert_eq!(report.recalled, exhaustive, "{}: greedy vs exhaustive", case.name);
        }
    }

    #[test]
    fn shifted_fixture_geometry_is_exact() {
        let gt = GtInstance {
            s: 0,
            r: 0,
            o: 0,
            subject_box: bb(0.0, 0.0, 10.0, 10.0),
            object_box: bb(20.0, 0.0, 30.0, 10.0),
        };
        // The shift-12 fixture: union IoU 180/420 = 3/7, per-box IoU 0.
        let shifted = union_box(&bb(12.0, 0.0, 22.0, 10.0), &bb(32.0, 0.0, 42.0, 10.0));
        assert!((iou(&gt.union_box(), &shifted) - 3.0 / 7.0).abs() < 1e-12);
        assert_eq!(iou(&gt.subject_box, &bb(12.0, 0.0, 22.0, 10.0)), 0.0);
        // A 5-pixel shift gives union IoU 250/350 = 5/7 and per-box 1/3.
        let near = union_box(&bb(5.0, 0.0, 15.0, 10.0), &bb(25.0, 0.0, 35.0, 10.0));
        assert!((iou(&gt.union_box(), &near) - 5.0 / 7.0).abs() < 1e-12);
        assert!(
            (iou(&gt.subject_box, &bb(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12
        );
    }

    #[test]
    fn sweep_is_monotone_and_crosses_at_the_right_place() {
        let sb = bb(0.0, 0.0, 11.0, 1.0);
        let pb = bb(5.0, 0.0, 16.0, 1.0); // IoU = 6/16 = 0.375 against sb
        assert!((iou(&sb, &pb) - 0.375).abs() < 1e-15);
        let gts = vec![GtInstance { s: 0, r: 0, o: 0, subject_box: sb, object_box: sb }];
        let preds = vec![pred(0, 0, 0, 0.9, pb, pb)];
        let thresholds: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let sweep = iou_sweep(
            &[preds],
            &[gts],
            50,
            TaskSetting::UnionBoxDetection,
            &thresholds,
        )
        .unwrap();
        for w in sweep.windows(2) {
            assert!(w[0].1 >= w[1].1, "recall increased with threshold: {sweep:?}");
        }
        for (t, r) in &sweep {
            let expect = if *t <= 0.375 { 1.0 } else { 0.0 };
            assert_eq!(*r, expect, "threshold {t}");
        }
    }

    #[test]
    fn perfect_predictions_sweep_flat_at_one() {
        let sb = bb(0.0, 0.0, 10.0, 10.0);
        let ob = bb(20.0, 0.0, 30.0, 10.0);
        let gts = vec![GtInstance { s: 1, r: 2, o: 3, subject_box: sb, object_box: ob }];
        let preds = vec![pred(1, 2, 3, 1.0, sb, ob)];
        let thresholds: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        for (_, r) in iou_sweep(
            &[preds],
            &[gts],
            50,
            TaskSetting::UnionBoxDetection,
            &thresholds,
        )
        .unwrap()
        {
            assert_eq!(r, 1.0);
        }
    }

    #[test]
    fn perplexity_cases() {
        let perfect = vec![(ProbVector::one_hot(5, 3).unwrap(), 3usize)];
        assert!((prediction_perplexity(&perfect).unwrap() - 1.0).abs() < 1e-9);

        let uniform = vec![(ProbVector::uniform(5).unwrap(), 0usize)];
        assert!((prediction_perplexity(&uniform).unwrap() - 5.0).abs() < 1e-6);

        assert!(prediction_perplexity(&[]).is_err());
    }

    fn one_record(instances: &[(usize, usize, usize)]) -> ImageRecord {
        use crate::data::RelInstance;
        use crate::pipeline::DetectedObject;
        // Two detections per instance, categories as given.
        let mut detections = Vec::new();
        let mut ground_truth = Vec::new();
        for (i, (s, r, o)) in instances.iter().enumerate() {
            let base = i as f64 * 30.0;
            detections.push(DetectedObject {
                bbox: bb(base, 0.0, base + 10.0, 10.0),
                appearance: vec![0.0],
                detector_score: 1.0,
                category_hint: Some(*s),
            });
            detections.push(DetectedObject {
                bbox: bb(base + 12.0, 0.0, base + 22.0, 10.0),
                appearance: vec![0.0],
                detector_score: 1.0,
                category_hint: Some(*o),
            });
            ground_truth.push(RelInstance {
                subject_ref: 2 * i,
                object_ref: 2 * i + 1,
                predicate: *r,
                subject_category: *s,
                object_category: *o,
            });
        }
        ImageRecord {
            image_id: "fixture".into(),
            width: 1000.0,
            height: 1000.0,
            detections,
            union_features: Vec::new(),
            ground_truth,
        }
    }

    #[test]
    fn entropy_stats_cases() {
        // r fully determined by (s,o): conditional entropy 0.
        let rec = one_record(&[(0, 0, 1), (0, 0, 1), (1, 1, 0), (1, 1, 0)]);
        let stats = predicate_entropy_stats(&[rec]).unwrap();
        assert!(stats.conditional_entropy.abs() < 1e-12);
        assert!((stats.marginal_entropy - 2.0_f64.ln()).abs() < 1e-12);

        // Single instance: both entropies zero.
        let rec = one_record(&[(0, 1, 1)]);
        let stats = predicate_entropy_stats(&[rec]).unwrap();
        assert_eq!(stats.marginal_entropy, 0.0);
        assert_eq!(stats.conditional_entropy, 0.0);
        assert_eq!(stats.instances, 1);

        assert!(predicate_entropy_stats(&[]).is_err());
    }

    #[test]
    fn scene_graph_generation_cases() {
        let sb = bb(0.0, 0.0, 10.0, 10.0);
        let ob = bb(20.0, 0.0, 30.0, 10.0);
        let third = bb(40.0, 0.0, 50.0, 10.0);

        assert_eq!(generate_scene_graph(&[], 0.0), SceneGraph::empty());
        let below = vec![pred(0, 1, 2, 0.1, sb, ob)];
        assert_eq!(generate_scene_graph(&below, 0.5), SceneGraph::empty());

        // Two predictions sharing the subject detection: 3 nodes, 2 edges.
        let shared = vec![pred(0, 1, 2, 0.9, sb, ob), pred(0, 2, 3, 0.8, sb, third)];
        let graph = generate_scene_graph(&shared, 0.5);
        assert_eq!(graph.nodes.len(), 3);
        assert_eq!(graph.edges.len(), 2);
        assert_eq!(graph.edges[0].subject, graph.edges[1].subject);
    }

    #[test]
    fn scene_graph_similarity_cases() {
        let sb = bb(0.0, 0.0, 10.0, 10.0);
        let ob = bb(20.0, 0.0, 30.0, 10.0);
        let truth = generate_scene_graph(&[pred(0, 1, 2, 0.9, sb, ob)], 0.0);

        // Identical graphs.
        assert_eq!(scene_graph_similarity(&truth, &truth, 0.5), 1.0);

        // Disjoint category sets.
        let other = generate_scene_graph(&[pred(5, 1, 6, 0.9, sb, ob)], 0.0);
        assert_eq!(scene_graph_similarity(&other, &truth, 0.5), 0.0);

        // Nodes match, predicate wrong: node-F1 1, edge-F1 0, harmonic 0.
        let wrong_edge = generate_scene_graph(&[pred(0, 3, 2, 0.9, sb, ob)], 0.0);
        let sim = scene_graph_similarity(&wrong_edge, &truth, 0.5);
        assert_eq!(sim, 0.0);

        // Symmetry on a mixed fixture with distinct IoUs.
        let a = generate_scene_graph(
            &[pred(0, 1, 2, 0.9, sb, ob), pred(2, 0, 1, 0.7, ob, bb(22.0, 0.0, 33.0, 11.0))],
            0.0,
        );
        let b = generate_scene_graph(
            &[pred(0, 1, 2, 0.9, bb(1.0, 0.0, 11.0, 10.0), ob)],
            0.0,
        );
        let ab = scene_graph_similarity(&a, &b, 0.3);
        let ba = scene_graph_similarity(&b, &a, 0.3);
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0 && ab < 1.0);

        // Empty vs empty is 1, empty vs nonempty is 0.
        assert_eq!(scene_graph_similarity(&SceneGraph::empty(), &SceneGraph::empty(), 0.5), 1.0);
        assert_eq!(scene_graph_similarity(&SceneGraph::empty(), &truth, 0.5), 0.0);
    }

    #[test]
    fn recall_monotone_in_k() {
        let sb = bb(0.0, 0.0, 10.0, 10.0);
        let ob = bb(20.0, 0.0, 30.0, 10.0);
        let gts = vec![
            GtInstance { s: 0, r: 1, o: 2, subject_box: sb, object_box: ob },
            GtInstance { s: 2, r: 0, o: 1, subject_box: ob, object_box: sb },
        ];
        let preds = vec![
            pred(9, 9, 9, 0.95, sb, ob),
            pred(0, 1, 2, 0.9, sb, ob),
            pred(2, 0, 1, 0.8, ob, sb),
        ];
        let mut last = 0.0;
        for k in 1..=3 {
            let r = recall_at_k(
                &[preds.clone()],
                &[gts.clone()],
                k,
                TaskSetting::UnionBoxDetection,
                0.5,
            )
            .unwrap()
            .recall;
            assert!(r >= last);
            last = r;
        }
        assert_eq!(last, 1.0);
    }
}
