//! Inference units, the unrolled relational network, end-to-end training,
//! and the checkpoint format.
//!
//! An inference unit applies one round of simultaneous belief updates; the
//! network stacks `T` of them, optionally sharing one weight set and
//! optionally enforcing the symmetry constraints W_sr = W_rsᵀ,
//! W_so = W_osᵀ, W_ro = W_orᵀ (stored by keeping only one of each pair).

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::numkit::{
    affine, cross_entropy, sgd_step, sgd_step_momentum, softmax, softmax_backward, ConvSpec,
    DenseMatrix, MomentumState, ParamStore, ProbVector,
};
use crate::pipeline::{
    build_pair_inputs, pair_feature_backward, pair_feature_forward, PairInputs, PairTrace,
};
use crate::relmodel::{BeliefTriple, CrfPotentials, FeatureTriple, LabelSpace};
use crate::spatial::{
    encode_spatial_trace, spatial_backward, SpatialEncoderSpec, SpatialTrace,
    DEFAULT_MARGIN_FRACTION, SPATIAL_FEATURE_DIM,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Which unit outputs the loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy on the final unit's beliefs.
    #[default]
    FinalUnit,
    /// Cross-entropy averaged over every unit's beliefs. Kept as a
    /// regularization option.
    AllUnits,
}

/// Network architecture switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrNetConfig {
    /// Number of inference units, T ≥ 1.
    pub units: usize,
    /// All units reference a single parameter set.
    pub share_weights: bool,
    /// Store only W_rs, W_ro, W_so and derive the transposed directions.
    pub enforce_symmetry: bool,
    pub loss_mode: LossMode,
}

impl DrNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.units == 0 {
            return Err(Error::config("a network needs at least one inference unit"));
        }
        Ok(())
    }
}

impl Default for DrNetConfig {
    fn default() -> Self {
        DrNetConfig {
            units: 8,
            share_weights: false,
            enforce_symmetry: false,
            loss_mode: LossMode::FinalUnit,
        }
    }
}

/// Shape description of the relational network proper (the part operating
/// on a [`FeatureTriple`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrNetSpec {
    pub n_categories: usize,
    pub n_predicates: usize,
    pub d_a: usize,
    pub d_r: usize,
    pub config: DrNetConfig,
}

impl DrNetSpec {
    pub fn new(
        n_categories: usize,
        n_predicates: usize,
        d_a: usize,
        d_r: usize,
        config: DrNetConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(DrNetSpec { n_categories, n_predicates, d_a, d_r, config })
    }

    /// Number of stored parameter sets (1 when shared, T otherwise).
    pub fn param_sets(&self) -> usize {
        if self.config.share_weights {
            1
        } else {
            self.config.units
        }
    }

    /// Parameter set index used by unit `t` (0-based).
    fn set_for_unit(&self, t: usize) -> usize {
        if self.config.share_weights {
            0
        } else {
            t
        }
    }

    /// (name, rows, cols) for every unit parameter, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (n, k) = (self.n_categories, self.n_predicates);
        let mut shapes = Vec::new();
        for t in 0..self.param_sets() {
            shapes.push((format!("unit{t}.obj.weight"), n, self.d_a));
            shapes.push((format!("unit{t}.obj.bias"), n, 1));
            shapes.push((format!("unit{t}.pred.weight"), k, self.d_r));
            shapes.push((format!("unit{t}.pred.bias"), k, 1));
            shapes.push((format!("unit{t}.rs"), k, n));
            shapes.push((format!("unit{t}.ro"), k, n));
            shapes.push((format!("unit{t}.so"), n, n));
            if !self.config.enforce_symmetry {
                shapes.push((format!("unit{t}.sr"), n, k));
                shapes.push((format!("unit{t}.os"), n, n));
                shapes.push((format!("unit{t}.or"), n, k));
            }
        }
        shapes
    }

    /// Fresh store: relational matrices zero, unary maps Glorot-uniform.
    pub fn init_store(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, rows, cols) in self.param_shapes() {
            store.insert(name.clone(), init_matrix(&name, rows, cols, &mut rng));
        }
        store
    }

    /// Unit weights copied from CRF potentials. Requires shared symmetric
    /// mode so the unrolled network and the mean-field oracle coincide.
    pub fn store_from_crf(&self, theta: &CrfPotentials) -> Result<ParamStore> {
        if !(self.config.share_weights && self.config.enforce_symmetry) {
            return Err(Error::config(
                "tying weights to CRF potentials requires shared symmetric mode",
            ));
        }
        if theta.n_categories() != self.n_categories
            || theta.n_predicates() != self.n_predicates
            || theta.w_a.cols() != self.d_a
            || theta.w_r.cols() != self.d_r
        {
            return Err(Error::dimension("potential shapes do not match network"));
        }
        let mut store = ParamStore::new();
        store.insert("unit0.obj.weight", theta.w_a.clone());
        store.insert("unit0.obj.bias", column(&theta.b_a));
        store.insert("unit0.pred.weight", theta.w_r.clone());
        store.insert("unit0.pred.bias", column(&theta.b_r));
        store.insert("unit0.rs", theta.w_rs.clone());
        store.insert("unit0.ro", theta.w_ro.clone());
        store.insert("unit0.so", theta.w_so.clone());
        Ok(store)
    }
}

fn column(v: &[f64]) -> DenseMatrix {
    DenseMatrix::from_values(v.len(), 1, v.to_vec()).expect("column")
}

/// Glorot-uniform for weight maps, zero for biases and relational tables.
/// Relational matrices start at zero so a fresh T-unit network begins
/// exactly at the unary baseline.
fn init_matrix(name: &str, rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    if name.ends_with(".weight") {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        m.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
    }
    m
}

/// True for the relational compatibility tables of any unit.
pub fn is_relational_param(name: &str) -> bool {
    if let Some(rest) = name.strip_prefix("unit") {
        if let Some(dot) = rest.find('.') {
            return matches!(&rest[dot + 1..], "rs" | "ro" | "so" | "sr" | "os" | "or");
        }
    }
    false
}

/// A matrix used directly or through its transpose.
#[derive(Clone, Copy)]
enum MatRef<'a> {
    Direct(&'a DenseMatrix),
    Transposed(&'a DenseMatrix),
}

impl MatRef<'_> {
    fn apply_add(&self, x: &[f64], y: &mut [f64]) {
        match self {
            MatRef::Direct(w) => w.matvec_add(x, y),
            MatRef::Transposed(w) => w.matvec_t_add(x, y),
        }
    }
}

/// Role of a relational matrix inside a unit: which stored parameter backs
/// it and whether it is used transposed.
#[derive(Debug, Clone)]
struct RelRole {
    stored: String,
    transposed: bool,
}

struct UnitRoles {
    sr: RelRole,
    so: RelRole,
    rs: RelRole,
    ro: RelRole,
    os: RelRole,
    or_: RelRole,
}

fn unit_roles(spec: &DrNetSpec, t: usize) -> UnitRoles {
    let p = spec.set_for_unit(t);
    if spec.config.enforce_symmetry {
        UnitRoles {
            sr: RelRole { stored: format!("unit{p}.rs"), transposed: true },
            so: RelRole { stored: format!("unit{p}.so"), transposed: false },
            rs: RelRole { stored: format!("unit{p}.rs"), transposed: false },
            ro: RelRole { stored: format!("unit{p}.ro"), transposed: false },
            os: RelRole { stored: format!("unit{p}.so"), transposed: true },
            or_: RelRole { stored: format!("unit{p}.ro"), transposed: true },
        }
    } else {
        UnitRoles {
            sr: RelRole { stored: format!("unit{p}.sr"), transposed: false },
            so: RelRole { stored: format!("unit{p}.so"), transposed: false },
            rs: RelRole { stored: format!("unit{p}.rs"), transposed: false },
            ro: RelRole { stored: format!("unit{p}.ro"), transposed: false },
            os: RelRole { stored: format!("unit{p}.os"), transposed: false },
            or_: RelRole { stored: format!("unit{p}.or"), transposed: false },
        }
    }
}

fn role_ref<'a>(store: &'a ParamStore, role: &RelRole) -> MatRef<'a> {
    if role.transposed {
        MatRef::Transposed(store.value(&role.stored))
    } else {
        MatRef::Direct(store.value(&role.stored))
    }
}

/// One inference unit:
///   q'_s = σ(W_a x_s + b_a + W_sr q_r + W_so q_o)
///   q'_r = σ(W_r x_r + b_r + W_rs q_s + W_ro q_o)
///   q'_o = σ(W_a x_o + b_a + W_os q_s + W_or q_r)
/// All three outputs are computed from the input beliefs.
pub fn inference_unit_forward(
    q: &BeliefTriple,
    f: &FeatureTriple,
    spec: &DrNetSpec,
    store: &ParamStore,
    t: usize,
) -> Result<BeliefTriple> {
    let p = spec.set_for_unit(t);
    let roles = unit_roles(spec, t);

    let mut z_s = affine(
        &f.x_s,
        store.value(&format!("unit{p}.obj.weight")),
        store.value(&format!("unit{p}.obj.bias")).values(),
    )?;
    role_ref(store, &roles.sr).apply_add(q.q_r.values(), &mut z_s);
    role_ref(store, &roles.so).apply_add(q.q_o.values(), &mut z_s);

    let mut z_r = affine(
        &f.x_r,
        store.value(&format!("unit{p}.pred.weight")),
        store.value(&format!("unit{p}.pred.bias")).values(),
    )?;
    role_ref(store, &roles.rs).apply_add(q.q_s.values(), &mut z_r);
    role_ref(store, &roles.ro).apply_add(q.q_o.values(), &mut z_r);

    let mut z_o = affine(
        &f.x_o,
        store.value(&format!("unit{p}.obj.weight")),
        store.value(&format!("unit{p}.obj.bias")).values(),
    )?;
    role_ref(store, &roles.os).apply_add(q.q_s.values(), &mut z_o);
    role_ref(store, &roles.or_).apply_add(q.q_r.values(), &mut z_o);

    Ok(BeliefTriple { q_s: softmax(&z_s)?, q_r: softmax(&z_r)?, q_o: softmax(&z_o)? })
}

/// Beliefs after every stage: `beliefs[0]` is the unary initialization from
/// unit 1's weights, `beliefs[t]` the output of unit t.
#[derive(Debug, Clone)]
pub struct NetTrace {
    pub beliefs: Vec<BeliefTriple>,
}

impl NetTrace {
    pub fn final_beliefs(&self) -> &BeliefTriple {
        self.beliefs.last().expect("trace never empty")
    }
}

/// Unrolled forward pass retaining all intermediate beliefs.
pub fn forward(f: &FeatureTriple, spec: &DrNetSpec, store: &ParamStore) -> Result<NetTrace> {
    spec.config.validate()?;
    let q0 = BeliefTriple {
        q_s: softmax(&affine(
            &f.x_s,
            store.value("unit0.obj.weight"),
            store.value("unit0.obj.bias").values(),
        )?)?,
        q_r: softmax(&affine(
            &f.x_r,
            store.value("unit0.pred.weight"),
            store.value("unit0.pred.bias").values(),
        )?)?,
        q_o: softmax(&affine(
            &f.x_o,
            store.value("unit0.obj.weight"),
            store.value("unit0.obj.bias").values(),
        )?)?,
    };
    let mut beliefs = Vec::with_capacity(spec.config.units + 1);
    beliefs.push(q0);
    for t in 0..spec.config.units {
        let next = inference_unit_forward(beliefs.last().unwrap(), f, spec, store, t)?;
        beliefs.push(next);
    }
    Ok(NetTrace { beliefs })
}

/// Sum of component cross-entropies under the configured loss mode.
pub fn net_loss(trace: &NetTrace, truth: (usize, usize, usize), mode: LossMode) -> Result<f64> {
    let triple_ce = |q: &BeliefTriple| -> Result<f64> {
        Ok(cross_entropy(&q.q_s, truth.0)?
            + cross_entropy(&q.q_r, truth.1)?
            + cross_entropy(&q.q_o, truth.2)?)
    };
    match mode {
        LossMode::FinalUnit => triple_ce(trace.final_beliefs()),
        LossMode::AllUnits => {
            let t = trace.beliefs.len() - 1;
            let mut total = 0.0;
            for q in &trace.beliefs[1..] {
                total += triple_ce(q)?;
            }
            Ok(total / t as f64)
        }
    }
}

fn seed_grad(q: &ProbVector, truth: usize, weight: f64) -> Vec<f64> {
    let mut g: Vec<f64> = q.values().iter().map(|v| weight * v).collect();
    g[truth] -= weight;
    g
}

/// Accumulated dL/dq for one belief triple.
struct BeliefGrad {
    s: Vec<f64>,
    r: Vec<f64>,
    o: Vec<f64>,
}

impl BeliefGrad {
    fn zeros(n: usize, k: usize) -> Self {
        BeliefGrad { s: vec![0.0; n], r: vec![0.0; k], o: vec![0.0; n] }
    }

    fn is_zero(&self) -> bool {
        self.s.iter().chain(&self.r).chain(&self.o).all(|v| *v == 0.0)
    }
}

fn rel_backward(
    store: &mut ParamStore,
    role: &RelRole,
    dz: &[f64],
    q_in: &[f64],
    dq_in: &mut [f64],
) {
    let p = store.param_mut(&role.stored);
    if role.transposed {
        p.grad.outer_add(q_in, dz, 1.0);
        p.value.matvec_add(dz, dq_in);
    } else {
        p.grad.outer_add(dz, q_in, 1.0);
        p.value.matvec_t_add(dz, dq_in);
    }
}

/// Reverse pass through the unrolled network. Seeds the loss gradient scaled
/// by `weight`, accumulates parameter gradients into the store, and returns
/// dL/dx_r for the upstream feature modules.
pub fn backward(
    f: &FeatureTriple,
    trace: &NetTrace,
    truth: (usize, usize, usize),
    spec: &DrNetSpec,
    store: &mut ParamStore,
    weight: f64,
) -> Result<Vec<f64>> {
    let t_units = spec.config.units;
    debug_assert_eq!(trace.beliefs.len(), t_units + 1);
    let (n, k) = (spec.n_categories, spec.n_predicates);
    if truth.0 >= n || truth.2 >= n || truth.1 >= k {
        return Err(Error::index(format!("truth {truth:?} outside label space")));
    }
    let unit_loss_weight = match spec.config.loss_mode {
        LossMode::FinalUnit => 0.0,
        LossMode::AllUnits => weight / t_units as f64,
    };
    let mut dx_r = vec![0.0; spec.d_r];
    // dL/dq flowing into the unit below, starts empty above the top.
    let mut upstream = BeliefGrad::zeros(n, k);
    for t in (0..t_units).rev() {
        let q_out = &trace.beliefs[t + 1];
        let q_in = &trace.beliefs[t];
        // dL/dz: softmax-jacobian on the upstream dq, plus the direct
        // cross-entropy seed where the loss covers this unit.
        let seed_w = if t + 1 == t_units && spec.config.loss_mode == LossMode::FinalUnit {
            weight
        } else {
            unit_loss_weight
        };
        let mut dz_s = if upstream.is_zero() {
            vec![0.0; n]
        } else {
            softmax_backward(&q_out.q_s, &upstream.s)
        };
        let mut dz_r =
            if upstream.is_zero() { vec![0.0; k] } else { softmax_backward(&q_out.q_r, &upstream.r) };
        let mut dz_o =
            if upstream.is_zero() { vec![0.0; n] } else { softmax_backward(&q_out.q_o, &upstream.o) };
        if seed_w != 0.0 {
            for (d, s) in dz_s.iter_mut().zip(seed_grad(&q_out.q_s, truth.0, seed_w)) {
                *d += s;
            }
            for (d, s) in dz_r.iter_mut().zip(seed_grad(&q_out.q_r, truth.1, seed_w)) {
                *d += s;
            }
            for (d, s) in dz_o.iter_mut().zip(seed_grad(&q_out.q_o, truth.2, seed_w)) {
                *d += s;
            }
        }

        let p = spec.set_for_unit(t);
        let roles = unit_roles(spec, t);
        let mut down = BeliefGrad::zeros(n, k);

        // Unary maps: the object map sees both the s and o updates.
        {
            let pw = store.param_mut(&format!("unit{p}.obj.weight"));
            pw.grad.outer_add(&dz_s, &f.x_s, 1.0);
            pw.grad.outer_add(&dz_o, &f.x_o, 1.0);
        }
        {
            let pb = store.param_mut(&format!("unit{p}.obj.bias"));
            for (g, (a, b)) in pb.grad.values_mut().iter_mut().zip(dz_s.iter().zip(&dz_o)) {
                *g += a + b;
            }
        }
        {
            let pw = store.param_mut(&format!("unit{p}.pred.weight"));
            pw.grad.outer_add(&dz_r, &f.x_r, 1.0);
            pw.value.matvec_t_add(&dz_r, &mut dx_r);
        }
        {
            let pb = store.param_mut(&format!("unit{p}.pred.bias"));
            for (g, d) in pb.grad.values_mut().iter_mut().zip(&dz_r) {
                *g += d;
            }
        }

        // Relational tables and their contributions to the input beliefs.
        rel_backward(store, &roles.sr, &dz_s, q_in.q_r.values(), &mut down.r);
        rel_backward(store, &roles.so, &dz_s, q_in.q_o.values(), &mut down.o);
        rel_backward(store, &roles.rs, &dz_r, q_in.q_s.values(), &mut down.s);
        rel_backward(store, &roles.ro, &dz_r, q_in.q_o.values(), &mut down.o);
        rel_backward(store, &roles.os, &dz_o, q_in.q_s.values(), &mut down.s);
        rel_backward(store, &roles.or_, &dz_o, q_in.q_r.values(), &mut down.r);

        upstream = down;
    }
    // Initial beliefs come from unit 1's unary weights.
    if !upstream.is_zero() {
        let q0 = &trace.beliefs[0];
        let dz_s = softmax_backward(&q0.q_s, &upstream.s);
        let dz_r = softmax_backward(&q0.q_r, &upstream.r);
        let dz_o = softmax_backward(&q0.q_o, &upstream.o);
        {
            let pw = store.param_mut("unit0.obj.weight");
            pw.grad.outer_add(&dz_s, &f.x_s, 1.0);
            pw.grad.outer_add(&dz_o, &f.x_o, 1.0);
        }
        {
            let pb = store.param_mut("unit0.obj.bias");
            for (g, (a, b)) in pb.grad.values_mut().iter_mut().zip(dz_s.iter().zip(&dz_o)) {
                *g += a + b;
            }
        }
        {
            let pw = store.param_mut("unit0.pred.weight");
            pw.grad.outer_add(&dz_r, &f.x_r, 1.0);
            pw.value.matvec_t_add(&dz_r, &mut dx_r);
        }
        {
            let pb = store.param_mut("unit0.pred.bias");
            for (g, d) in pb.grad.values_mut().iter_mut().zip(&dz_r) {
                *g += d;
            }
        }
    }
    Ok(dx_r)
}

/// Feature dimensions of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Appearance feature dimension (subject/object).
    pub d_a: usize,
    /// Enclosing-box appearance dimension.
    pub d_e: usize,
    /// Compressed pair feature dimension.
    pub d_r: usize,
    /// Hidden width of the two-layer pair compressor.
    pub hidden: usize,
    pub mask_resolution: usize,
}

/// The full trainable bundle: spatial encoder, pair compressor, and the
/// relational network, all parameters in one store.
#[derive(Debug, Clone)]
pub struct FullModel {
    pub label_space: LabelSpace,
    pub dims: ModelDims,
    pub spatial: SpatialEncoderSpec,
    pub net: DrNetSpec,
    pub store: ParamStore,
}

impl FullModel {
    /// Builds and initializes a model. `mask_resolution` must be 32 unless a
    /// custom schedule is supplied via [`FullModel::with_schedule`].
    pub fn new(
        label_space: LabelSpace,
        dims: ModelDims,
        config: DrNetConfig,
        seed: u64,
    ) -> Result<Self> {
        if dims.mask_resolution != 32 {
            return Err(Error::config(
                "default convolution schedule expects 32x32 masks; use with_schedule",
            ));
        }
        Self::with_schedule(label_space, dims, config, SpatialEncoderSpec::default_32(), seed)
    }

    pub fn with_schedule(
        label_space: LabelSpace,
        dims: ModelDims,
        config: DrNetConfig,
        spatial: SpatialEncoderSpec,
        seed: u64,
    ) -> Result<Self> {
        label_space.validate()?;
        if spatial.mask_resolution != dims.mask_resolution {
            return Err(Error::config("schedule resolution does not match dims"));
        }
        let net = DrNetSpec::new(
            label_space.n_categories(),
            label_space.n_predicates(),
            dims.d_a,
            dims.d_r,
            config,
        )?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, rows, cols) in Self::all_shapes(&spatial, &dims, &net) {
            store.insert(name.clone(), init_matrix(&name, rows, cols, &mut rng));
        }
        Ok(FullModel { label_space, dims, spatial, net, store })
    }

    fn all_shapes(
        spatial: &SpatialEncoderSpec,
        dims: &ModelDims,
        net: &DrNetSpec,
    ) -> Vec<(String, usize, usize)> {
        let mut shapes = spatial.param_shapes();
        shapes.push(("pair.fc1.weight".into(), dims.hidden, dims.d_e + SPATIAL_FEATURE_DIM));
        shapes.push(("pair.fc1.bias".into(), dims.hidden, 1));
        shapes.push(("pair.fc2.weight".into(), dims.d_r, dims.hidden));
        shapes.push(("pair.fc2.bias".into(), dims.d_r, 1));
        shapes.extend(net.param_shapes());
        shapes
    }

    /// Forward through spatial encoder, pair compressor, and network.
    pub fn recognize(&self, inputs: &PairInputs) -> Result<BeliefTriple> {
        let (s64, _) = encode_spatial_trace(&inputs.masks, &self.spatial, &self.store)?;
        let pair = pair_feature_forward(&inputs.union_feature, &s64, &self.store)?;
        let f = FeatureTriple {
            x_s: inputs.x_s.clone(),
            x_r: pair.x_r.clone(),
            x_o: inputs.x_o.clone(),
        };
        let trace = forward(&f, &self.net, &self.store)?;
        Ok(trace.beliefs.into_iter().next_back().unwrap())
    }
}

/// Full forward trace used during training.
pub struct FullTrace {
    pub spatial: SpatialTrace,
    pub pair: PairTrace,
    pub net: NetTrace,
    pub features: FeatureTriple,
}

pub fn full_forward(model: &FullModel, inputs: &PairInputs) -> Result<FullTrace> {
    let (s64, spatial_trace) = encode_spatial_trace(&inputs.masks, &model.spatial, &model.store)?;
    let pair = pair_feature_forward(&inputs.union_feature, &s64, &model.store)?;
    let features = FeatureTriple {
        x_s: inputs.x_s.clone(),
        x_r: pair.x_r.clone(),
        x_o: inputs.x_o.clone(),
    };
    let net = forward(&features, &model.net, &model.store)?;
    Ok(FullTrace { spatial: spatial_trace, pair, net, features })
}

/// End-to-end backward: loss seed scaled by `weight`, gradients flow through
/// every unit, the pair compressor, and the spatial encoder.
pub fn full_backward(
    model: &mut FullModel,
    trace: &FullTrace,
    truth: (usize, usize, usize),
    weight: f64,
) -> Result<()> {
    let dx_r = backward(
        &trace.features,
        &trace.net,
        truth,
        &model.net,
        &mut model.store,
        weight,
    )?;
    let d_s64 = pair_feature_backward(&trace.pair, &dx_r, &mut model.store);
    spatial_backward(&trace.spatial, &d_s64, &model.spatial, &mut model.store);
    Ok(())
}

/// Training hyperparameters. Defaults follow the declared values: lr 0.1,
/// 30 epochs, batches of 32, momentum 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    /// Keep relational tables frozen at zero: the unary-only baseline.
    pub freeze_relational: bool,
    /// Epochs of unary/feature pretraining on the initial beliefs before
    /// joint training; the trained unit-0 unary maps are then copied into
    /// every unit. Mirrors initializing the appearance pathway from a
    /// pretrained model: without it, units below the top start from random
    /// unaries and receive no gradient while the relational tables are
    /// still zero.
    pub unary_pretrain_epochs: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            momentum: 0.0,
            freeze_relational: false,
            unary_pretrain_epochs: 3,
        }
    }
}

/// Per-epoch trace entry. Loss and recall are measured on the training
/// forwards as they happen (before each update).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub predicate_recall: f64,
}

/// One extracted ground-truth relationship instance, ready for the model.
pub struct TrainInstance {
    pub inputs: PairInputs,
    pub truth: (usize, usize, usize),
}

/// Pulls every ground-truth instance out of the dataset, rasterizing masks
/// once up front.
pub fn collect_instances(records: &[ImageRecord], model: &FullModel) -> Result<Vec<TrainInstance>> {
    let mut out = Vec::new();
    for record in records {
        for gt in &record.ground_truth {
            let inputs = build_pair_inputs(
                record,
                gt.subject_ref,
                gt.object_ref,
                model.dims.mask_resolution,
                DEFAULT_MARGIN_FRACTION,
            )?;
            out.push(TrainInstance {
                inputs,
                truth: (gt.subject_category, gt.predicate, gt.object_category),
            });
        }
    }
    Ok(out)
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha20Rng) {
    for i in (1..indices.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        indices.swap(i, j);
    }
}

use rand::RngCore;

/// One pretraining step on the initial beliefs only: trains unit 0's unary
/// maps, the pair compressor, and the spatial encoder.
fn unary_step(
    model: &mut FullModel,
    inputs: &PairInputs,
    truth: (usize, usize, usize),
    weight: f64,
) -> Result<f64> {
    let (s64, strace) = encode_spatial_trace(&inputs.masks, &model.spatial, &model.store)?;
    let ptrace = pair_feature_forward(&inputs.union_feature, &s64, &model.store)?;
    let obj_w = model.store.value("unit0.obj.weight");
    let obj_b = model.store.value("unit0.obj.bias");
    let q_s = softmax(&affine(&inputs.x_s, obj_w, obj_b.values())?)?;
    let q_o = softmax(&affine(&inputs.x_o, obj_w, obj_b.values())?)?;
    let q_r = softmax(&affine(
        &ptrace.x_r,
        model.store.value("unit0.pred.weight"),
        model.store.value("unit0.pred.bias").values(),
    )?)?;
    let loss =
        cross_entropy(&q_s, truth.0)? + cross_entropy(&q_r, truth.1)? + cross_entropy(&q_o, truth.2)?;
    let dz_s = seed_grad(&q_s, truth.0, weight);
    let dz_r = seed_grad(&q_r, truth.1, weight);
    let dz_o = seed_grad(&q_o, truth.2, weight);
    let mut dx_r = vec![0.0; model.net.d_r];
    {
        let pw = model.store.param_mut("unit0.obj.weight");
        pw.grad.outer_add(&dz_s, &inputs.x_s, 1.0);
        pw.grad.outer_add(&dz_o, &inputs.x_o, 1.0);
    }
    {
        let pb = model.store.param_mut("unit0.obj.bias");
        for (g, (a, b)) in pb.grad.values_mut().iter_mut().zip(dz_s.iter().zip(&dz_o)) {
            *g += a + b;
        }
    }
    {
        let pw = model.store.param_mut("unit0.pred.weight");
        pw.grad.outer_add(&dz_r, &ptrace.x_r, 1.0);
        pw.value.matvec_t_add(&dz_r, &mut dx_r);
    }
    {
        let pb = model.store.param_mut("unit0.pred.bias");
        for (g, d) in pb.grad.values_mut().iter_mut().zip(&dz_r) {
            *g += d;
        }
    }
    let ds64 = pair_feature_backward(&ptrace, &dx_r, &mut model.store);
    spatial_backward(&strace, &ds64, &model.spatial, &mut model.store);
    Ok(loss)
}

/// Minibatch SGD over all ground-truth instances. Deterministic given the
/// seed. A zero learning rate runs the forward passes but never updates.
pub fn train(
    model: &mut FullModel,
    records: &[ImageRecord],
    hyper: &TrainHyper,
) -> Result<Vec<EpochStats>> {
    if hyper.learning_rate < 0.0 {
        return Err(Error::config("negative learning rate"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let instances = collect_instances(records, model)?;
    if instances.is_empty() {
        return Err(Error::config("training dataset has no relationship instances"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(hyper.seed);
    let mut momentum_state = MomentumState::default();
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut stats = Vec::with_capacity(hyper.epochs);
    model.store.zero_grads();
    if hyper.unary_pretrain_epochs > 0 && hyper.learning_rate > 0.0 && hyper.epochs > 0 {
        for epoch in 0..hyper.unary_pretrain_epochs {
            shuffle(&mut order, &mut rng);
            for batch in order.chunks(hyper.batch_size) {
                let scale = 1.0 / batch.len() as f64;
                for &idx in batch {
                    let inst = &instances[idx];
                    let loss = unary_step(model, &inst.inputs, inst.truth, scale)?;
                    if !loss.is_finite() {
                        return Err(Error::Training {
                            epoch,
                            message: format!("unary pretraining diverged ({loss})"),
                        });
                    }
                }
                sgd_step(&mut model.store, hyper.learning_rate)?;
            }
        }
        // Every unit starts joint training from the pretrained unary maps.
        for t in 1..model.net.param_sets() {
            for part in ["obj.weight", "obj.bias", "pred.weight", "pred.bias"] {
                let src = model.store.value(&format!("unit0.{part}")).clone();
                model.store.param_mut(&format!("unit{t}.{part}")).value = src;
            }
        }
    }
    for epoch in 0..hyper.epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for batch in order.chunks(hyper.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let inst = &instances[idx];
                let trace = full_forward(model, &inst.inputs)?;
                let loss = net_loss(&trace.net, inst.truth, model.net.config.loss_mode)?;
                if !loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        message: format!("loss diverged ({loss})"),
                    });
                }
                loss_sum += loss;
                if trace.net.final_beliefs().q_r.argmax() == inst.truth.1 {
                    hits += 1;
                }
                full_backward(model, &trace, inst.truth, scale)?;
            }
            if hyper.freeze_relational {
                for (name, p) in model.store.iter_mut() {
                    if is_relational_param(name) {
                        p.grad.fill(0.0);
                    }
                }
            }
            if hyper.learning_rate == 0.0 {
                model.store.zero_grads();
            } else if hyper.momentum > 0.0 {
                sgd_step_momentum(
                    &mut model.store,
                    hyper.learning_rate,
                    hyper.momentum,
                    &mut momentum_state,
                )?;
            } else {
                sgd_step(&mut model.store, hyper.learning_rate)?;
            }
        }
        stats.push(EpochStats {
            epoch,
            loss: loss_sum / instances.len() as f64,
            predicate_recall: hits as f64 / instances.len() as f64,
        });
    }
    Ok(stats)
}

/// Fraction of ground-truth instances whose top predicate is correct.
pub fn predicate_recall(model: &FullModel, records: &[ImageRecord]) -> Result<f64> {
    let instances = collect_instances(records, model)?;
    if instances.is_empty() {
        return Err(Error::config("no instances to evaluate"));
    }
    let mut hits = 0usize;
    for inst in &instances {
        let beliefs = model.recognize(&inst.inputs)?;
        if beliefs.q_r.argmax() == inst.truth.1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / instances.len() as f64)
}

/// Predicate beliefs paired with ground-truth predicates, for perplexity.
pub fn gt_predicate_beliefs(
    model: &FullModel,
    records: &[ImageRecord],
) -> Result<Vec<(ProbVector, usize)>> {
    let instances = collect_instances(records, model)?;
    let mut out = Vec::with_capacity(instances.len());
    for inst in &instances {
        let beliefs = model.recognize(&inst.inputs)?;
        out.push((beliefs.q_r, inst.truth.1));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    kind: String,
    label_space: LabelSpace,
    dims: ModelDims,
    config: DrNetConfig,
    spatial_schedule: Vec<ConvSpec>,
    params: BTreeMap<String, Vec<Vec<f64>>>,
}

/// Serializes the model as a single JSON document with parameters as nested
/// arrays. Decimal float encoding round-trips bit-exactly.
pub fn checkpoint_to_json(model: &FullModel) -> Result<String> {
    let params: BTreeMap<String, Vec<Vec<f64>>> =
        model.store.iter().map(|(name, p)| (name.clone(), p.value.to_nested())).collect();
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: "checkpoint".into(),
        label_space: model.label_space.clone(),
        dims: model.dims,
        config: model.net.config,
        spatial_schedule: model.spatial.schedule.clone(),
        params,
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<FullModel> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version {
            found: file.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    if file.kind != "checkpoint" {
        return Err(Error::config(format!("expected a checkpoint file, found {:?}", file.kind)));
    }
    let spatial = SpatialEncoderSpec::with_schedule(file.dims.mask_resolution, file.spatial_schedule)?;
    let net = DrNetSpec::new(
        file.label_space.n_categories(),
        file.label_space.n_predicates(),
        file.dims.d_a,
        file.dims.d_r,
        file.config,
    )?;
    let mut store = ParamStore::new();
    let expected = FullModel::all_shapes(&spatial, &file.dims, &net);
    for (name, rows, cols) in &expected {
        let nested = file
            .params
            .get(name)
            .ok_or_else(|| Error::config(format!("checkpoint missing parameter {name}")))?;
        let m = DenseMatrix::from_nested(nested)?;
        if m.rows() != *rows || m.cols() != *cols {
            return Err(Error::dimension(format!(
                "parameter {name} has shape {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        store.insert(name.clone(), m);
    }
    if file.params.len() != expected.len() {
        return Err(Error::config("checkpoint has extra parameters"));
    }
    Ok(FullModel { label_space: file.label_space, dims: file.dims, spatial, net, store })
}

pub fn save_checkpoint(model: &FullModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FullModel> {
    let text = std::fs::read_to_string(path)?;
    checkpoint_from_json(&text)
}
