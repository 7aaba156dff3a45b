//! Synthetic ground-truth-CRF data generation, JSONL dataset persistence,
//! and deterministic splits.
//!
//! All randomness flows through one seeded ChaCha20 stream; Gaussian draws
//! use single-sample Box-Muller on that stream. The dataset header records
//! the generator identifier so files are reproducible across builds.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::DetectedObject;
use crate::relmodel::{binary_gibbs_table, CrfPotentials, JointTable, LabelSpace};
use crate::spatial::BoundingBox;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const RNG_ALGORITHM: &str = "chacha20";

/// Synthetic image canvas size in pixels.
pub const IMAGE_SIZE: f64 = 256.0;

/// Union features carry the predicate embedding at this fraction of
/// `class_separation`: the pair appearance alone identifies the predicate
/// only weakly, while the category features stay well separated.
pub const PREDICATE_FEATURE_SCALE: f64 = 0.25;

/// One ground-truth relationship instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelInstance {
    pub subject_ref: usize,
    pub object_ref: usize,
    pub predicate: usize,
    pub subject_category: usize,
    pub object_category: usize,
}

/// Ingested enclosing-box appearance for one ordered pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionFeature {
    pub subject_ref: usize,
    pub object_ref: usize,
    pub values: Vec<f64>,
}

/// The unit of datasets and evaluation: detections plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: f64,
    pub height: f64,
    pub detections: Vec<DetectedObject>,
    pub union_features: Vec<UnionFeature>,
    pub ground_truth: Vec<RelInstance>,
}

impl ImageRecord {
    pub fn union_feature(&self, subject_ref: usize, object_ref: usize) -> Option<&[f64]> {
        self.union_features
            .iter()
            .find(|u| u.subject_ref == subject_ref && u.object_ref == object_ref)
            .map(|u| u.values.as_slice())
    }

    /// Checks refs, box extents, label ranges, and feature dimensions.
    pub fn validate(&self, label_space: &LabelSpace, d_a: usize, d_e: usize) -> Result<()> {
        let n_det = self.detections.len();
        let image = BoundingBox::new(0.0, 0.0, self.width, self.height)?;
        for det in &self.detections {
            det.bbox.validate()?;
            if !image.contains(&det.bbox) {
                return Err(Error::Geometry(format!(
                    "box {:?} outside image {}x{}",
                    det.bbox, self.width, self.height
                )));
            }
            if det.appearance.len() != d_a {
                return Err(Error::dimension(format!(
                    "appearance dim {} != {d_a}",
                    det.appearance.len()
                )));
            }
        }
        for u in &self.union_features {
            if u.subject_ref >= n_det || u.object_ref >= n_det {
                return Err(Error::index("union feature ref out of range"));
            }
            if u.values.len() != d_e {
                return Err(Error::dimension(format!(
                    "union feature dim {} != {d_e}",
                    u.values.len()
                )));
            }
        }
        for gt in &self.ground_truth {
            if gt.subject_ref >= n_det || gt.object_ref >= n_det {
                return Err(Error::index("ground-truth ref out of range"));
            }
            if gt.subject_category >= label_space.n_categories()
                || gt.object_category >= label_space.n_categories()
            {
                return Err(Error::index("ground-truth category outside label space"));
            }
            if gt.predicate >= label_space.n_predicates() {
                return Err(Error::index("ground-truth predicate outside label space"));
            }
        }
        Ok(())
    }

    pub fn instance_count(&self) -> usize {
        self.ground_truth.len()
    }
}

/// First line of every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub kind: String,
    pub label_space: LabelSpace,
    pub d_a: usize,
    pub d_e: usize,
    pub rng_algorithm: String,
    /// Fully-resolved configuration of the run that produced the file.
    pub config: serde_json::Value,
}

impl DatasetHeader {
    pub fn new(label_space: LabelSpace, d_a: usize, d_e: usize, config: serde_json::Value) -> Self {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            kind: "dataset".into(),
            label_space,
            d_a,
            d_e,
            rng_algorithm: RNG_ALGORITHM.into(),
            config,
        }
    }
}

/// Writes header + one record per line. Serialization is deterministic, so
/// saving the same dataset twice gives byte-identical files.
pub fn save_dataset(
    header: &DatasetHeader,
    records: &[ImageRecord],
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for record in records {
        serde_json::to_writer(&mut w, record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a dataset file. Parse failures name the 1-based line.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetHeader, Vec<ImageRecord>)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or(Error::Parse { line: 1, message: "empty file, expected header".into() })??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    if header.kind != "dataset" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected kind \"dataset\", found {:?}", header.kind),
        });
    }
    header.label_space.validate()?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        record
            .validate(&header.label_space, header.d_a, header.d_e)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        records.push(record);
    }
    Ok((header, records))
}

/// Disjoint image-level split. Subset i receives floor(fractions[i]·n)
/// images of a seeded shuffle; leftovers are dropped.
pub fn split_dataset(
    records: &[ImageRecord],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<ImageRecord>>> {
    if fractions.is_empty() || fractions.iter().any(|f| *f <= 0.0) {
        return Err(Error::config("fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::config(format!("fractions sum to {total} > 1")));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    let mut out = Vec::with_capacity(fractions.len());
    let mut cursor = 0usize;
    for f in fractions {
        let count = (f * records.len() as f64).floor() as usize;
        let subset: Vec<ImageRecord> =
            order[cursor..cursor + count].iter().map(|&i| records[i].clone()).collect();
        cursor += count;
        out.push(subset);
    }
    Ok(out)
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub n_predicates: usize,
    pub d_a: usize,
    pub d_e: usize,
    /// Scale of the class-conditional Gaussian means.
    pub class_separation: f64,
    /// Scale of the random binary potentials; 0 makes labels independent.
    pub potential_scale: f64,
    pub images: usize,
    pub objects_per_image: (usize, usize),
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0
            || self.n_predicates == 0
            || self.d_a == 0
            || self.d_e == 0
            || self.images == 0
        {
            return Err(Error::config("all synthetic counts must be positive"));
        }
        if self.class_separation <= 0.0 {
            return Err(Error::config("class_separation must be positive"));
        }
        if self.potential_scale < 0.0 {
            return Err(Error::config("potential_scale must be nonnegative"));
        }
        let (lo, hi) = self.objects_per_image;
        if lo < 2 || hi < lo {
            return Err(Error::config(format!(
                "objects_per_image range ({lo},{hi}) invalid; need 2 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// Generated dataset plus the potentials that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub label_space: LabelSpace,
    pub records: Vec<ImageRecord>,
    pub potentials: CrfPotentials,
}

impl SyntheticDataset {
    pub fn header(&self, spec: &SyntheticSpec) -> DatasetHeader {
        DatasetHeader::new(
            self.label_space.clone(),
            spec.d_a,
            spec.d_e,
            serde_json::to_value(spec).expect("spec serializes"),
        )
    }

    pub fn instance_count(&self) -> usize {
        self.records.iter().map(ImageRecord::instance_count).sum()
    }
}

/// Single-sample Box-Muller on the shared stream.
fn gauss(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit_vector(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Inverse-CDF draw of (s, r, o) from a joint table.
pub(crate) fn sample_triplet(table: &JointTable, rng: &mut ChaCha20Rng) -> (usize, usize, usize) {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (idx, p) in table.values.iter().enumerate() {
        acc += p;
        if u < acc {
            let o = idx % table.n;
            let r = (idx / table.n) % table.k;
            let s = idx / (table.n * table.k);
            return (s, r, o);
        }
    }
    (table.n - 1, table.k - 1, table.n - 1)
}

fn noisy_feature(mean: &[f64], scale: f64, rng: &mut ChaCha20Rng) -> Vec<f64> {
    mean.iter().map(|m| scale * m + gauss(rng)).collect()
}

/// A box of the given size with its center clamped inside the image.
fn box_at(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    let half_w = w / 2.0;
    let half_h = h / 2.0;
    let cx = cx.clamp(half_w, IMAGE_SIZE - half_w);
    let cy = cy.clamp(half_h, IMAGE_SIZE - half_h);
    BoundingBox { x_min: cx - half_w, y_min: cy - half_h, x_max: cx + half_w, y_max: cy + half_h }
}

fn random_box_near(cx: f64, cy: f64, rng: &mut ChaCha20Rng) -> BoundingBox {
    let w = rng.random_range(24.0..56.0);
    let h = rng.random_range(24.0..56.0);
    box_at(cx, cy, w, h)
}

/// Draws potentials, samples labels from the binary-only Gibbs table, and
/// fabricates class-conditional Gaussian features and clustered boxes.
/// Related pairs sit around a shared anchor; objects of different anchors
/// are usually far apart, which is what the pair filter learns to exploit.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (n, k) = (spec.n_categories, spec.n_predicates);
    let label_space = LabelSpace::new(
        (0..n).map(|i| format!("cat_{i:02}")).collect(),
        (0..k).map(|i| format!("rel_{i:02}")).collect(),
    )?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    // Gaussian predicate-category entries sharpen p(r|s,o) as the scale
    // grows; w_so absorbs each cell's log partition so the (s,o) marginal
    // stays uniform instead of collapsing onto the luckiest few cells.
    // The predicate marginal then keeps most of its entropy while the
    // conditional loses its own.
    let mut potentials = CrfPotentials::zeros(n, k, spec.d_a, spec.d_e);
    for m in [&mut potentials.w_rs, &mut potentials.w_ro] {
        m.values_mut()
            .iter_mut()
            .for_each(|v| *v = spec.potential_scale * gauss(&mut rng));
    }
    for s in 0..n {
        for o in 0..n {
            let scores: Vec<f64> =
                (0..k).map(|r| potentials.w_rs.get(r, s) + potentials.w_ro.get(r, o)).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + scores.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            potentials.w_so.set(s, o, -lse);
        }
    }
    let gibbs = binary_gibbs_table(&potentials)?;

    let category_embeddings: Vec<Vec<f64>> =
        (0..n).map(|_| unit_vector(&mut rng, spec.d_a)).collect();
    let predicate_embeddings: Vec<Vec<f64>> =
        (0..k).map(|_| unit_vector(&mut rng, spec.d_e)).collect();
    let sep = spec.class_separation;
    let pred_sep = PREDICATE_FEATURE_SCALE * sep;

    let mut records = Vec::with_capacity(spec.images);
    for image_idx in 0..spec.images {
        let (lo, hi) = spec.objects_per_image;
        let n_objects = lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize;
        let n_rel = n_objects / 2;

        let mut detections = Vec::with_capacity(n_objects);
        let mut ground_truth = Vec::with_capacity(n_rel);
        let mut categories = Vec::with_capacity(n_objects);

        let push_object = |cat: usize,
                               bbox: BoundingBox,
                               rng: &mut ChaCha20Rng,
                               detections: &mut Vec<DetectedObject>,
                               categories: &mut Vec<usize>| {
            detections.push(DetectedObject {
                bbox,
                appearance: noisy_feature(&category_embeddings[cat], sep, rng),
                detector_score: rng.random_range(0.5..1.0),
                category_hint: Some(cat),
            });
            categories.push(cat);
        };

        let mut gt_predicates = Vec::with_capacity(n_rel);
        for _ in 0..n_rel {
            let (s, r, o) = sample_triplet(&gibbs, &mut rng);
            let anchor_x = rng.random_range(40.0..IMAGE_SIZE - 40.0);
            let anchor_y = rng.random_range(40.0..IMAGE_SIZE - 40.0);
            let subject_ref = detections.len();
            push_object(
                s,
                random_box_near(
                    anchor_x + rng.random_range(-8.0..8.0),
                    anchor_y + rng.random_range(-8.0..8.0),
                    &mut rng,
                ),
                &mut rng,
                &mut detections,
                &mut categories,
            );
            let object_ref = detections.len();
            push_object(
                o,
                random_box_near(
                    anchor_x + rng.random_range(-28.0..28.0),
                    anchor_y + rng.random_range(-28.0..28.0),
                    &mut rng,
                ),
                &mut rng,
                &mut detections,
                &mut categories,
            );
            ground_truth.push(RelInstance {
                subject_ref,
                object_ref,
                predicate: r,
                subject_category: s,
                object_category: o,
            });
            gt_predicates.push((subject_ref, object_ref, r));
        }
        while detections.len() < n_objects {
            let cat = (rng.next_u64() % n as u64) as usize;
            let cx = rng.random_range(30.0..IMAGE_SIZE - 30.0);
            let cy = rng.random_range(30.0..IMAGE_SIZE - 30.0);
            push_object(
                cat,
                random_box_near(cx, cy, &mut rng),
                &mut rng,
                &mut detections,
                &mut categories,
            );
        }

        // Union features for every ordered pair; only true pairs carry the
        // (attenuated) predicate embedding.
        let mut union_features = Vec::with_capacity(n_objects * (n_objects - 1));
        for s_ref in 0..n_objects {
            for o_ref in 0..n_objects {
                if s_ref == o_ref {
                    continue;
                }
                let gt = gt_predicates
                    .iter()
                    .find(|(s, o, _)| *s == s_ref && *o == o_ref)
                    .map(|(_, _, r)| *r);
                let values = match gt {
                    Some(r) => noisy_feature(&predicate_embeddings[r], pred_sep, &mut rng),
                    None => (0..spec.d_e).map(|_| gauss(&mut rng)).collect(),
                };
                union_features.push(UnionFeature { subject_ref: s_ref, object_ref: o_ref, values });
            }
        }

        records.push(ImageRecord {
            image_id: format!("synth_{image_idx:06}"),
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
            detections,
            union_features,
            ground_truth,
        });
    }
    Ok(SyntheticDataset { label_space, records, potentials })
}
