//! Self-verification suites: inference-oracle equivalences, gradient
//! checks, and metric fixtures. The CLI `verify` subcommand and the test
//! suite both run these.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::drnet::{self, DrNetConfig, DrNetSpec, FullModel, LossMode, ModelDims};
use crate::error::{Error, Result};
use crate::eval::{self, GtInstance, TaskSetting};
use crate::numkit::{finite_diff_check, ConvSpec, ProbVector};
use crate::pipeline::{pair_feature_forward, PairInputs, TripletPrediction};
use crate::relmodel::{
    exact_conditional_predicate, exact_joint_posterior, meanfield_fixed_point, meanfield_step,
    unary_beliefs, CrfPotentials, FeatureTriple, LabelSpace,
};
use crate::spatial::{encode_spatial_trace, rasterize_dual_mask, union_box, BoundingBox, SpatialEncoderSpec};

/// Which checks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Oracle,
    Gradient,
    Metrics,
    All,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "oracle" => Ok(Suite::Oracle),
            "gradient" => Ok(Suite::Gradient),
            "metrics" => Ok(Suite::Metrics),
            "all" => Ok(Suite::All),
            other => Err(Error::config(format!("unknown suite {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifySummary {
    pub suite: Suite,
    pub checks: Vec<CheckResult>,
    pub all_passed: bool,
}

fn random_instance(
    rng: &mut ChaCha20Rng,
    n: usize,
    k: usize,
    d: usize,
    scale: f64,
) -> (FeatureTriple, CrfPotentials) {
    let mut theta = CrfPotentials::zeros(n, k, d, d);
    for m in [&mut theta.w_a, &mut theta.w_r, &mut theta.w_rs, &mut theta.w_ro, &mut theta.w_so] {
        m.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
    theta.b_a.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    theta.b_r.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    let f = FeatureTriple {
        x_s: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        x_r: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        x_o: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    (f, theta)
}

/// Closed-form conditional vs brute-force enumeration, 100 random instances.
fn check_exact_conditional(perturb: f64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let (f, theta) = random_instance(&mut rng, 4, 5, 8, 1.5);
        let table = exact_joint_posterior(&f, &theta).unwrap();
        for s in 0..4 {
            for o in 0..4 {
                let closed = exact_conditional_predicate(s, o, &f, &theta).unwrap();
                let brute = table.conditional_predicate(s, o).unwrap();
                for (a, b) in closed.values().iter().zip(brute.values()) {
                    max_err = max_err.max((a - b + perturb).abs());
                }
            }
        }
    }
    CheckResult {
        name: "oracle.exact_conditional_vs_enumeration".into(),
        passed: max_err < 1e-12,
        detail: format!("max Linf {max_err:.3e} over 100 instances (tol 1e-12)"),
    }
}

/// Tied shared-symmetric units reproduce Jacobi mean-field steps.
fn check_unrolled_equivalence() -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(102);
    let mut max_err = 0.0f64;
    for _ in 0..20 {
        let (f, theta) = random_instance(&mut rng, 4, 5, 3, 1.0);
        let spec = DrNetSpec::new(
            4,
            5,
            3,
            3,
            DrNetConfig {
                units: 12,
                share_weights: true,
                enforce_symmetry: true,
                loss_mode: LossMode::FinalUnit,
            },
        )
        .unwrap();
        let store = spec.store_from_crf(&theta).unwrap();
        let trace = drnet::forward(&f, &spec, &store).unwrap();
        let mut q = unary_beliefs(&f, &theta).unwrap();
        max_err = max_err.max(trace.beliefs[0].linf_distance(&q));
        for t in 1..=12 {
            q = meanfield_step(&q, &f, &theta).unwrap();
            max_err = max_err.max(trace.beliefs[t].linf_distance(&q));
        }
    }
    CheckResult {
        name: "oracle.unrolled_matches_meanfield_steps".into(),
        passed: max_err < 1e-15,
        detail: format!("max per-step Linf {max_err:.3e} (tol 1e-15)"),
    }
}

/// Deep unrolling agrees with the damped fixed point where the undamped
/// iteration converges.
fn check_fixed_point_agreement() -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(103);
    let mut checked = 0;
    let mut max_err = 0.0f64;
    while checked < 5 {
        let (f, theta) = random_instance(&mut rng, 4, 5, 3, 1.0);
        let undamped = meanfield_fixed_point(&f, &theta, 50, 1e-9, 1.0).unwrap();
        if !undamped.converged {
            continue;
        }
        checked += 1;
        let damped = meanfield_fixed_point(&f, &theta, 5000, 1e-12, 0.5).unwrap();
        let spec = DrNetSpec::new(
            4,
            5,
            3,
            3,
            DrNetConfig {
                units: 50,
                share_weights: true,
                enforce_symmetry: true,
                loss_mode: LossMode::FinalUnit,
            },
        )
        .unwrap();
        let store = spec.store_from_crf(&theta).unwrap();
        let trace = drnet::forward(&f, &spec, &store).unwrap();
        max_err = max_err.max(trace.final_beliefs().linf_distance(&damped.beliefs));
    }
    CheckResult {
        name: "oracle.t50_matches_damped_fixed_point".into(),
        passed: max_err < 1e-6,
        detail: format!("max Linf {max_err:.3e} over 5 convergent instances (tol 1e-6)"),
    }
}

pub(crate) fn tiny_model(config: DrNetConfig, seed: u64) -> FullModel {
    let label_space = LabelSpace::new(
        (0..3).map(|i| format!("c{i}")).collect(),
        (0..4).map(|i| format!("p{i}")).collect(),
    )
    .unwrap();
    let dims = ModelDims { d_a: 3, d_e: 3, d_r: 4, hidden: 5, mask_resolution: 8 };
    let spatial = SpatialEncoderSpec::with_schedule(
        8,
        vec![
            ConvSpec { out_channels: 2, in_channels: 2, kernel_h: 3, kernel_w: 3, stride: 1 },
            ConvSpec { out_channels: 3, in_channels: 2, kernel_h: 3, kernel_w: 3, stride: 2 },
            ConvSpec { out_channels: 4, in_channels: 3, kernel_h: 2, kernel_w: 2, stride: 1 },
        ],
    )
    .unwrap();
    FullModel::with_schedule(label_space, dims, config, spatial, seed).unwrap()
}

pub(crate) fn tiny_inputs(rng: &mut ChaCha20Rng) -> PairInputs {
    let frame = BoundingBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
    let subject = BoundingBox::new(
        rng.random_range(0.0..2.0),
        rng.random_range(0.0..2.0),
        rng.random_range(4.0..8.0),
        rng.random_range(4.0..8.0),
    )
    .unwrap();
    let object = BoundingBox::new(
        rng.random_range(0.0..3.0),
        rng.random_range(0.0..3.0),
        rng.random_range(5.0..8.0),
        rng.random_range(5.0..8.0),
    )
    .unwrap();
    PairInputs {
        x_s: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        x_o: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        union_feature: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        masks: rasterize_dual_mask(&subject, &object, &frame, 8).unwrap(),
    }
}

/// Finite-difference checks across every parameter group of the full model:
/// shared/unshared, symmetric/free, including compressor and conv kernels.
fn check_full_gradients(instances: usize, perturb: f64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(104);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    let modes = [(false, false), (true, true), (false, true), (true, false)];
    for i in 0..instances {
        let (share, symmetry) = modes[i % modes.len()];
        let config = DrNetConfig {
            units: 2,
            share_weights: share,
            enforce_symmetry: symmetry,
            loss_mode: LossMode::FinalUnit,
        };
        let mut model = tiny_model(config, 1000 + i as u64);
        // Noise on every parameter (biases included) keeps pre-activations
        // away from the rectifier kink where central differences disagree
        // with the subgradient.
        for name in model.store.names().cloned().collect::<Vec<_>>() {
            model
                .store
                .param_mut(&name)
                .value
                .values_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.4..0.4));
        }
        let inputs = tiny_inputs(&mut rng);
        let truth = (
            rng.random_range(0..3usize),
            rng.random_range(0..4usize),
            rng.random_range(0..3usize),
        );
        let trace = drnet::full_forward(&model, &inputs).unwrap();
        drnet::full_backward(&mut model, &trace, truth, 1.0).unwrap();
        if perturb != 0.0 {
            model.store.param_mut("pair.fc1.weight").grad.values_mut()[0] += perturb;
        }
        let spatial = model.spatial.clone();
        let net = model.net.clone();
        let report = finite_diff_check(
            |store| {
                let (s64, _) = encode_spatial_trace(&inputs.masks, &spatial, store).unwrap();
                let pair = pair_feature_forward(&inputs.union_feature, &s64, store).unwrap();
                let f = FeatureTriple {
                    x_s: inputs.x_s.clone(),
                    x_r: pair.x_r.clone(),
                    x_o: inputs.x_o.clone(),
                };
                let trace = drnet::forward(&f, &net, store).unwrap();
                drnet::net_loss(&trace, truth, net.config.loss_mode).unwrap()
            },
            &mut model.store,
            1e-5,
            1e-4,
        )
        .unwrap();
        if report.max_rel_err() > max_rel {
            max_rel = report.max_rel_err();
            worst = report
                .entries
                .iter()
                .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
                .map(|e| e.name.clone())
                .unwrap_or_default();
        }
    }
    CheckResult {
        name: "gradient.full_model_finite_difference".into(),
        passed: max_rel < 1e-4,
        detail: format!(
            "max rel err {max_rel:.3e} over {instances} instances (worst {worst}, tol 1e-4)"
        ),
    }
}

/// Ten fixture cases for Recall@K plus the sweep monotonicity property.
fn check_metric_fixtures(perturb: f64) -> CheckResult {
    let sb = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let ob = BoundingBox::new(20.0, 0.0, 30.0, 10.0).unwrap();
    let shifted_sb = BoundingBox::new(5.0, 0.0, 15.0, 10.0).unwrap();
    let shifted_ob = BoundingBox::new(25.0, 0.0, 35.0, 10.0).unwrap();
    let gt = GtInstance { s: 0, r: 1, o: 2, subject_box: sb, object_box: ob };
    let mk = |s, r, o, score, a: BoundingBox, b: BoundingBox| TripletPrediction {
        s,
        r,
        o,
        score,
        subject_box: a,
        object_box: b,
        union_box: union_box(&a, &b),
    };
    let cases: Vec<(&str, Vec<TripletPrediction>, TaskSetting, f64, f64)> = vec![
        ("predicate_hit", vec![mk(0, 1, 2, 0.9, sb, ob)], TaskSetting::PredicateRecognition, 0.5, 1.0),
        ("predicate_miss", vec![mk(0, 0, 2, 0.9, sb, ob)], TaskSetting::PredicateRecognition, 0.5, 0.0),
        ("union_hit", vec![mk(0, 1, 2, 0.9, sb, ob)], TaskSetting::UnionBoxDetection, 0.5, 1.0),
        ("union_shifted_fails_at_half", vec![mk(0, 1, 2, 0.9, shifted_sb, shifted_ob)], TaskSetting::UnionBoxDetection, 0.72, 0.0),
        ("union_shifted_passes_low", vec![mk(0, 1, 2, 0.9, shifted_sb, shifted_ob)], TaskSetting::UnionBoxDetection, 0.5, 1.0),
        ("two_boxes_hit", vec![mk(0, 1, 2, 0.9, sb, ob)], TaskSetting::TwoBoxesDetection, 0.5, 1.0),
        ("two_boxes_shifted_fails", vec![mk(0, 1, 2, 0.9, shifted_sb, shifted_ob)], TaskSetting::TwoBoxesDetection, 0.5, 0.0),
        ("two_boxes_wrong_label", vec![mk(1, 1, 2, 0.9, sb, ob)], TaskSetting::TwoBoxesDetection, 0.5, 0.0),
        ("duplicates_consume_once", vec![mk(0, 1, 2, 0.9, sb, ob), mk(0, 1, 2, 0.8, sb, ob)], TaskSetting::UnionBoxDetection, 0.5, 1.0),
        ("predicate_needs_the_pair", vec![mk(0, 1, 2, 0.9, shifted_sb, ob)], TaskSetting::PredicateRecognition, 0.5, 0.0),
    ];
    let mut failures = Vec::new();
    for (name, preds, setting, thr, expect) in &cases {
        let report =
            eval::recall_at_k(&[preds.clone()], &[vec![gt.clone()]], 50, *setting, *thr).unwrap();
        if (report.recall - expect + perturb).abs() > 1e-12 {
            failures.push(format!("{name}: got {}, expected {expect}", report.recall));
        }
    }
    // Sweep monotonicity.
    let preds = vec![mk(0, 1, 2, 0.9, shifted_sb, shifted_ob)];
    let thresholds: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let sweep = eval::iou_sweep(
        &[preds],
        &[vec![gt.clone()]],
        50,
        TaskSetting::UnionBoxDetection,
        &thresholds,
    )
    .unwrap();
    for w in sweep.windows(2) {
        if w[0].1 < w[1].1 {
            failures.push(format!("sweep not monotone at {:?}", w[1].0));
        }
    }
    CheckResult {
        name: "metrics.recall_fixtures_and_sweep".into(),
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{} fixture cases and sweep monotonicity hold", cases.len())
        } else {
            failures.join("; ")
        },
    }
}

/// Scene-graph fixtures: identity similarity and the wrong-predicate case.
fn check_scene_graph_fixtures() -> CheckResult {
    let sb = BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let ob = BoundingBox::new(20.0, 0.0, 30.0, 10.0).unwrap();
    let mk = |s, r, o| TripletPrediction {
        s,
        r,
        o,
        score: 0.9,
        subject_box: sb,
        object_box: ob,
        union_box: union_box(&sb, &ob),
    };
    let truth = eval::generate_scene_graph(&[mk(0, 1, 2)], 0.0);
    let same = eval::scene_graph_similarity(&truth, &truth, 0.5);
    let wrong = eval::scene_graph_similarity(&eval::generate_scene_graph(&[mk(0, 3, 2)], 0.0), &truth, 0.5);
    let passed = same == 1.0 && wrong == 0.0;
    CheckResult {
        name: "metrics.scene_graph_fixtures".into(),
        passed,
        detail: format!("sim(A,A)={same}, wrong-predicate sim={wrong}"),
    }
}

/// Probability sanity of prediction perplexity.
fn check_perplexity_bounds() -> CheckResult {
    let uniform = vec![(ProbVector::uniform(5).unwrap(), 0usize)];
    let pp = eval::prediction_perplexity(&uniform).unwrap();
    let perfect = vec![(ProbVector::one_hot(5, 2).unwrap(), 2usize)];
    let pp1 = eval::prediction_perplexity(&perfect).unwrap();
    let passed = (pp - 5.0).abs() < 1e-6 && (pp1 - 1.0).abs() < 1e-6;
    CheckResult {
        name: "metrics.perplexity_analytic_cases".into(),
        passed,
        detail: format!("uniform K=5 -> {pp:.6}, perfect -> {pp1:.6}"),
    }
}

/// Runs the selected suite. `inject_perturbation` deliberately corrupts one
/// comparison in each suite so the failure path can be exercised.
pub fn run_suite(suite: Suite, inject_perturbation: bool) -> VerifySummary {
    let p = if inject_perturbation { 1e-6 } else { 0.0 };
    let mut checks = Vec::new();
    if matches!(suite, Suite::Oracle | Suite::All) {
        checks.push(check_exact_conditional(p));
        checks.push(check_unrolled_equivalence());
        checks.push(check_fixed_point_agreement());
    }
    if matches!(suite, Suite::Gradient | Suite::All) {
        checks.push(check_full_gradients(8, if inject_perturbation { 1.0 } else { 0.0 }));
    }
    if matches!(suite, Suite::Metrics | Suite::All) {
        checks.push(check_metric_fixtures(p));
        checks.push(check_scene_graph_fixtures());
        checks.push(check_perplexity_bounds());
    }
    let all_passed = checks.iter().all(|c| c.passed);
    VerifySummary { suite, checks, all_passed }
}
