//! Bounding-box geometry, dual spatial masks, and the convolutional encoder
//! that turns a mask pair into a 64-dimensional feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{
    affine, conv2d, conv2d_backward, ConvSpec, ParamStore, Tensor3,
};

/// Default mask resolution.
pub const DEFAULT_MASK_RESOLUTION: usize = 32;

/// Dimension of the encoded spatial feature.
pub const SPATIAL_FEATURE_DIM: usize = 64;

/// Default margin added around a pair's enclosing box, per side, as a
/// fraction of the box's own width/height.
pub const DEFAULT_MARGIN_FRACTION: f64 = 0.05;

/// Axis-aligned box in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max)
            || ![self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite())
        {
            return Err(Error::Geometry(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    /// Intersects with `other`; edges clamp, so the result can be degenerate.
    pub fn clamp_to(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        }
    }

    pub fn contains(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

/// Smallest box containing both inputs (no margin).
pub fn union_box(a: &BoundingBox, b: &BoundingBox) -> BoundingBox {
    BoundingBox {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
}

/// Smallest box containing `a` and `b`, expanded by `margin_fraction` of its
/// own width/height per side, then clamped to the image extents.
pub fn enclosing_box(
    a: &BoundingBox,
    b: &BoundingBox,
    margin_fraction: f64,
    image_width: f64,
    image_height: f64,
) -> BoundingBox {
    let u = union_box(a, b);
    let mx = margin_fraction * u.width();
    let my = margin_fraction * u.height();
    BoundingBox {
        x_min: (u.x_min - mx).max(0.0),
        y_min: (u.y_min - my).max(0.0),
        x_max: (u.x_max + mx).min(image_width),
        y_max: (u.y_max + my).min(image_height),
    }
}

/// One binary M×M grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    resolution: usize,
    bits: Vec<bool>,
}

impl MaskGrid {
    fn empty(resolution: usize) -> Self {
        MaskGrid { resolution, bits: vec![false; resolution * resolution] }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.resolution + col]
    }

    fn set(&mut self, row: usize, col: usize) {
        self.bits[row * self.resolution + col] = true;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Packs each row into bytes (bit x of a row lives in byte x/8, bit x%8)
    /// and hex-encodes them. This is the serialized form.
    pub fn to_hex_rows(&self) -> Vec<String> {
        let m = self.resolution;
        let bytes_per_row = m.div_ceil(8);
        (0..m)
            .map(|row| {
                let mut bytes = vec![0u8; bytes_per_row];
                for col in 0..m {
                    if self.get(row, col) {
                        bytes[col / 8] |= 1 << (col % 8);
                    }
                }
                bytes.iter().map(|b| format!("{b:02x}")).collect()
            })
            .collect()
    }

    pub fn from_hex_rows(rows: &[String]) -> Result<Self> {
        let m = rows.len();
        let mut grid = MaskGrid::empty(m);
        let bytes_per_row = m.div_ceil(8);
        for (row, hex) in rows.iter().enumerate() {
            if hex.len() != bytes_per_row * 2 {
                return Err(Error::config(format!("bad packed row length {}", hex.len())));
            }
            for col in 0..m {
                let byte = u8::from_str_radix(&hex[2 * (col / 8)..2 * (col / 8) + 2], 16)
                    .map_err(|e| Error::config(format!("bad hex row: {e}")))?;
                if byte & (1 << (col % 8)) != 0 {
                    grid.set(row, col);
                }
            }
        }
        Ok(grid)
    }
}

impl Serialize for MaskGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_hex_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<String>::deserialize(d)?;
        MaskGrid::from_hex_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// The pair of co-registered binary masks for (subject, object).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualSpatialMask {
    pub resolution: usize,
    pub subject_mask: MaskGrid,
    pub object_mask: MaskGrid,
}

impl DualSpatialMask {
    /// Stacks the two masks into a 2-channel tensor (subject first).
    pub fn to_tensor(&self) -> Tensor3 {
        let m = self.resolution;
        let mut t = Tensor3::zeros(2, m, m);
        for row in 0..m {
            for col in 0..m {
                if self.subject_mask.get(row, col) {
                    t.set(0, row, col, 1.0);
                }
                if self.object_mask.get(row, col) {
                    t.set(1, row, col, 1.0);
                }
            }
        }
        t
    }
}

fn rasterize_one(box_: &BoundingBox, frame: &BoundingBox, m: usize) -> MaskGrid {
    let clamped = box_.clamp_to(frame);
    let mut grid = MaskGrid::empty(m);
    let cell_w = frame.width() / m as f64;
    let cell_h = frame.height() / m as f64;
    for row in 0..m {
        let cy = frame.y_min + (row as f64 + 0.5) * cell_h;
        if cy < clamped.y_min || cy >= clamped.y_max {
            continue;
        }
        for col in 0..m {
            let cx = frame.x_min + (col as f64 + 0.5) * cell_w;
            if cx >= clamped.x_min && cx < clamped.x_max {
                grid.set(row, col);
            }
        }
    }
    if grid.count_ones() == 0 {
        // A valid box always covers at least one cell: fall back to the cell
        // holding the box center.
        let (cx, cy) = clamped.center();
        let col = (((cx - frame.x_min) / cell_w) as usize).min(m - 1);
        let row = (((cy - frame.y_min) / cell_h) as usize).min(m - 1);
        grid.set(row, col);
    }
    grid
}

/// Rasterizes both boxes over the shared frame. A cell is set when its
/// center lies inside the (frame-clamped) box, half-open on the max edges.
pub fn rasterize_dual_mask(
    subject: &BoundingBox,
    object: &BoundingBox,
    frame: &BoundingBox,
    m: usize,
) -> Result<DualSpatialMask> {
    if m < 2 {
        return Err(Error::config(format!("mask resolution {m} < 2")));
    }
    frame.validate()?;
    if frame.area() <= 0.0 {
        return Err(Error::Geometry("zero-area frame".into()));
    }
    Ok(DualSpatialMask {
        resolution: m,
        subject_mask: rasterize_one(subject, frame, m),
        object_mask: rasterize_one(object, frame, m),
    })
}

/// Shape of the three-layer convolutional encoder plus its output projection.
/// Parameters live in a [`ParamStore`] under `spatial.conv{i}.*` and
/// `spatial.proj.*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialEncoderSpec {
    pub mask_resolution: usize,
    pub schedule: Vec<ConvSpec>,
    /// Channels × height × width after the last convolution.
    pub flat_dim: usize,
}

impl SpatialEncoderSpec {
    /// The declared default for 32×32 masks: 8×5×5/2, 16×5×5/2, 32×3×3/1,
    /// rectifier after each, then an affine map to 64.
    pub fn default_32() -> Self {
        Self::with_schedule(
            DEFAULT_MASK_RESOLUTION,
            vec![
                ConvSpec { out_channels: 8, in_channels: 2, kernel_h: 5, kernel_w: 5, stride: 2 },
                ConvSpec { out_channels: 16, in_channels: 8, kernel_h: 5, kernel_w: 5, stride: 2 },
                ConvSpec { out_channels: 32, in_channels: 16, kernel_h: 3, kernel_w: 3, stride: 1 },
            ],
        )
        .expect("default schedule is valid")
    }

    /// Validates that `schedule` chains from a 2-channel M×M input.
    pub fn with_schedule(mask_resolution: usize, schedule: Vec<ConvSpec>) -> Result<Self> {
        if schedule.is_empty() {
            return Err(Error::config("empty convolution schedule"));
        }
        let mut channels = 2usize;
        let (mut h, mut w) = (mask_resolution, mask_resolution);
        for (i, layer) in schedule.iter().enumerate() {
            if layer.in_channels != channels {
                return Err(Error::config(format!(
                    "layer {i} expects {} input channels, gets {channels}",
                    layer.in_channels
                )));
            }
            let (oh, ow) = layer.output_size(h, w)?;
            channels = layer.out_channels;
            h = oh;
            w = ow;
        }
        Ok(SpatialEncoderSpec { mask_resolution, schedule, flat_dim: channels * h * w })
    }

    /// (name, rows, cols) for every parameter of this encoder.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut shapes = Vec::new();
        for (i, layer) in self.schedule.iter().enumerate() {
            shapes.push((format!("spatial.conv{i}.weight"), layer.out_channels, layer.weight_cols()));
            shapes.push((format!("spatial.conv{i}.bias"), layer.out_channels, 1));
        }
        shapes.push(("spatial.proj.weight".into(), SPATIAL_FEATURE_DIM, self.flat_dim));
        shapes.push(("spatial.proj.bias".into(), SPATIAL_FEATURE_DIM, 1));
        shapes
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct SpatialTrace {
    /// Input to each conv layer (index 0 is the mask tensor).
    layer_inputs: Vec<Tensor3>,
    /// Pre-rectifier output of each conv layer.
    pre_acts: Vec<Tensor3>,
    /// Flattened rectified output of the last layer.
    flat: Vec<f64>,
}

/// Forward pass returning the 64-dim feature and the trace for backward.
pub fn encode_spatial_trace(
    masks: &DualSpatialMask,
    spec: &SpatialEncoderSpec,
    store: &ParamStore,
) -> Result<(Vec<f64>, SpatialTrace)> {
    if masks.resolution != spec.mask_resolution {
        return Err(Error::config(format!(
            "mask resolution {} does not match encoder ({})",
            masks.resolution, spec.mask_resolution
        )));
    }
    let mut layer_inputs = Vec::with_capacity(spec.schedule.len());
    let mut pre_acts = Vec::with_capacity(spec.schedule.len());
    let mut current = masks.to_tensor();
    for (i, layer) in spec.schedule.iter().enumerate() {
        let w = store.value(&format!("spatial.conv{i}.weight"));
        let b = store.value(&format!("spatial.conv{i}.bias"));
        let pre = conv2d(&current, w, Some(b.values()), layer)?;
        let mut post = pre.clone();
        post.values.iter_mut().for_each(|v| *v = v.max(0.0));
        layer_inputs.push(current);
        pre_acts.push(pre);
        current = post;
    }
    let flat = current.values;
    let out = affine(
        &flat,
        store.value("spatial.proj.weight"),
        store.value("spatial.proj.bias").values(),
    )?;
    Ok((out, SpatialTrace { layer_inputs, pre_acts, flat }))
}

/// Forward pass without a trace.
pub fn encode_spatial(
    masks: &DualSpatialMask,
    spec: &SpatialEncoderSpec,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    encode_spatial_trace(masks, spec, store).map(|(out, _)| out)
}

/// Accumulates gradients for every encoder parameter given dL/d(output).
/// The upstream gradient is expected to already carry any batch weighting.
pub fn spatial_backward(
    trace: &SpatialTrace,
    d_out: &[f64],
    spec: &SpatialEncoderSpec,
    store: &mut ParamStore,
) {
    debug_assert_eq!(d_out.len(), SPATIAL_FEATURE_DIM);
    // Projection layer.
    let mut d_flat = vec![0.0; trace.flat.len()];
    {
        let p = store.param_mut("spatial.proj.weight");
        p.grad.outer_add(d_out, &trace.flat, 1.0);
        p.value.matvec_t_add(d_out, &mut d_flat);
    }
    {
        let p = store.param_mut("spatial.proj.bias");
        for (g, d) in p.grad.values_mut().iter_mut().zip(d_out) {
            *g += d;
        }
    }
    // Conv stack, last layer first.
    let last = spec.schedule.len() - 1;
    let mut d_post = Tensor3 {
        channels: trace.pre_acts[last].channels,
        height: trace.pre_acts[last].height,
        width: trace.pre_acts[last].width,
        values: d_flat,
    };
    for i in (0..spec.schedule.len()).rev() {
        let layer = &spec.schedule[i];
        let pre = &trace.pre_acts[i];
        let mut d_pre = d_post.clone();
        for (d, p) in d_pre.values.iter_mut().zip(&pre.values) {
            if *p <= 0.0 {
                *d = 0.0;
            }
        }
        let input = &trace.layer_inputs[i];
        let mut d_input =
            if i > 0 { Some(Tensor3::zeros(input.channels, input.height, input.width)) } else { None };
        {
            let weight_name = format!("spatial.conv{i}.weight");
            let weights = store.value(&weight_name).clone();
            let p = store.param_mut(&weight_name);
            let mut d_bias = vec![0.0; layer.out_channels];
            conv2d_backward(
                input,
                &weights,
                layer,
                &d_pre,
                &mut p.grad,
                &mut d_bias,
                d_input.as_mut(),
                1.0,
            );
            let pb = store.param_mut(&format!("spatial.conv{i}.bias"));
            for (g, d) in pb.grad.values_mut().iter_mut().zip(&d_bias) {
                *g += d;
            }
        }
        if let Some(di) = d_input {
            d_post = di;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{finite_diff_check, DenseMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn enclosing_box_cases() {
        let a = bb(10.0, 10.0, 20.0, 20.0);
        let e = enclosing_box(&a, &a, 0.05, 100.0, 100.0);
        assert_eq!(e, bb(9.5, 9.5, 20.5, 20.5));

        let b = bb(20.0, 20.0, 30.0, 30.0);
        let e = enclosing_box(&bb(0.0, 0.0, 10.0, 10.0), &b, 0.0, 100.0, 100.0);
        assert_eq!(e, bb(0.0, 0.0, 30.0, 30.0));

        // Margin pushes past the image edge and clamps at zero.
        let e = enclosing_box(&bb(0.0, 0.0, 10.0, 10.0), &b, 0.05, 100.0, 100.0);
        assert_eq!(e, bb(0.0, 0.0, 31.5, 31.5));
    }

    #[test]
    fn full_cover_mask_is_all_ones() {
        let frame = bb(0.0, 0.0, 32.0, 32.0);
        let masks = rasterize_dual_mask(&frame, &bb(1.0, 1.0, 2.0, 2.0), &frame, 32).unwrap();
        assert_eq!(masks.subject_mask.count_ones(), 32 * 32);
    }

    #[test]
    fn disjoint_halves_partition_without_overlap() {
        let frame = bb(0.0, 0.0, 32.0, 32.0);
        let left = bb(0.0, 0.0, 16.0, 32.0);
        let right = bb(16.0, 0.0, 32.0, 32.0);
        let masks = rasterize_dual_mask(&left, &right, &frame, 32).unwrap();
        for row in 0..32 {
            for col in 0..32 {
                assert!(!(masks.subject_mask.get(row, col) && masks.object_mask.get(row, col)));
            }
        }
        assert_eq!(masks.subject_mask.count_ones() + masks.object_mask.count_ones(), 32 * 32);
    }

    #[test]
    fn half_frame_box_covers_512_cells() {
        // Cell centers at x = col + 0.5; x < 16 for cols 0..15, so 16 columns.
        let frame = bb(0.0, 0.0, 32.0, 32.0);
        let masks =
            rasterize_dual_mask(&bb(0.0, 0.0, 16.0, 32.0), &frame, &frame, 32).unwrap();
        assert_eq!(masks.subject_mask.count_ones(), 512);
    }

    #[test]
    fn tiny_box_still_covers_one_cell() {
        let frame = bb(0.0, 0.0, 32.0, 32.0);
        let sliver = bb(10.6, 10.6, 10.9, 10.9); // straddles no cell center
        let masks = rasterize_dual_mask(&sliver, &frame, &frame, 32).unwrap();
        assert_eq!(masks.subject_mask.count_ones(), 1);
        assert!(masks.subject_mask.get(10, 10));
    }

    #[test]
    fn degenerate_frame_is_geometry_error() {
        let frame = BoundingBox { x_min: 0.0, y_min: 0.0, x_max: 0.0, y_max: 10.0 };
        let b = bb(0.0, 0.0, 1.0, 1.0);
        assert!(rasterize_dual_mask(&b, &b, &frame, 32).is_err());
    }

    #[test]
    fn rasterization_is_translation_and_scale_consistent() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            // Grid-aligned coordinates keep the consistency exact in floats.
            let x0 = rng.random_range(0..40) as f64;
            let y0 = rng.random_range(0..40) as f64;
            let s = bb(x0, y0, x0 + rng.random_range(2..20) as f64, y0 + rng.random_range(2..20) as f64);
            let x1 = rng.random_range(0..40) as f64;
            let y1 = rng.random_range(0..40) as f64;
            let o = bb(x1, y1, x1 + rng.random_range(2..20) as f64, y1 + rng.random_range(2..20) as f64);
            let frame = union_box(&s, &o);

            let base = rasterize_dual_mask(&s, &o, &frame, 16).unwrap();

            let shift = |b: &BoundingBox, dx: f64, dy: f64| BoundingBox {
                x_min: b.x_min + dx,
                y_min: b.y_min + dy,
                x_max: b.x_max + dx,
                y_max: b.y_max + dy,
            };
            let translated = rasterize_dual_mask(
                &shift(&s, 7.0, 3.0),
                &shift(&o, 7.0, 3.0),
                &shift(&frame, 7.0, 3.0),
                16,
            )
            .unwrap();
            assert_eq!(base, translated);

            let scale = |b: &BoundingBox, k: f64| BoundingBox {
                x_min: b.x_min * k,
                y_min: b.y_min * k,
                x_max: b.x_max * k,
                y_max: b.y_max * k,
            };
            let scaled =
                rasterize_dual_mask(&scale(&s, 4.0), &scale(&o, 4.0), &scale(&frame, 4.0), 16)
                    .unwrap();
            assert_eq!(base, scaled);
        }
    }

    #[test]
    fn all_ablation_resolutions_produce_valid_masks() {
        let s = bb(3.0, 5.0, 40.0, 60.0);
        let o = bb(30.0, 8.0, 90.0, 44.0);
        let frame = union_box(&s, &o);
        for m in [8usize, 16, 32, 64, 128] {
            let masks = rasterize_dual_mask(&s, &o, &frame, m).unwrap();
            assert!(masks.subject_mask.count_ones() >= 1);
            assert!(masks.object_mask.count_ones() >= 1);
        }
    }

    #[test]
    fn mask_grid_hex_round_trip() {
        let frame = bb(0.0, 0.0, 32.0, 32.0);
        let masks =
            rasterize_dual_mask(&bb(3.0, 4.0, 17.0, 21.0), &frame, &frame, 32).unwrap();
        let rows = masks.subject_mask.to_hex_rows();
        let back = MaskGrid::from_hex_rows(&rows).unwrap();
        assert_eq!(masks.subject_mask, back);
    }

    // Small encoder used by the gradient tests.
    fn tiny_encoder() -> (SpatialEncoderSpec, ParamStore) {
        let spec = SpatialEncoderSpec::with_schedule(
            8,
            vec![
                ConvSpec { out_channels: 2, in_channels: 2, kernel_h: 3, kernel_w: 3, stride: 1 },
                ConvSpec { out_channels: 3, in_channels: 2, kernel_h: 3, kernel_w: 3, stride: 2 },
                ConvSpec { out_channels: 4, in_channels: 3, kernel_h: 2, kernel_w: 2, stride: 1 },
            ],
        )
        .unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for (name, rows, cols) in spec.param_shapes() {
            let mut m = DenseMatrix::zeros(rows, cols);
            m.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            store.insert(name, m);
        }
        (spec, store)
    }

    fn tiny_masks() -> DualSpatialMask {
        let frame = bb(0.0, 0.0, 8.0, 8.0);
        rasterize_dual_mask(&bb(0.0, 0.0, 5.0, 6.0), &bb(3.0, 2.0, 8.0, 8.0), &frame, 8).unwrap()
    }

    #[test]
    fn zero_parameters_encode_to_zero_vector() {
        let (spec, mut store) = tiny_encoder();
        for name in store.names().cloned().collect::<Vec<_>>() {
            store.param_mut(&name).value.fill(0.0);
        }
        let out = encode_spatial(&tiny_masks(), &spec, &store).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoding_is_deterministic() {
        let (spec, store) = tiny_encoder();
        let a = encode_spatial(&tiny_masks(), &spec, &store).unwrap();
        let b = encode_spatial(&tiny_masks(), &spec, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (spec, mut store) = tiny_encoder();
        let masks = tiny_masks();
        // Scalar probe: sum of outputs.
        let (_, trace) = encode_spatial_trace(&masks, &spec, &store).unwrap();
        spatial_backward(&trace, &vec![1.0; SPATIAL_FEATURE_DIM], &spec, &mut store);
        let report = finite_diff_check(
            |s| encode_spatial(&masks, &spec, s).unwrap().iter().sum(),
            &mut store,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.all_passed(), "max rel err {}", report.max_rel_err());
    }
}
