//! The triplet CRF: potentials, exact inference by enumeration, the
//! closed-form predicate conditional, and a damped mean-field oracle.
//!
//! This module is the ground truth the unrolled network is verified against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{affine, entropy, softmax, DenseMatrix, ProbVector};

/// Enumeration guard for [`exact_joint_posterior`].
pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Category and predicate vocabularies. Subject and object share the
/// category list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub object_categories: Vec<String>,
    pub predicates: Vec<String>,
}

impl LabelSpace {
    pub fn new(object_categories: Vec<String>, predicates: Vec<String>) -> Result<Self> {
        let space = LabelSpace { object_categories, predicates };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        for (kind, names) in
            [("category", &self.object_categories), ("predicate", &self.predicates)]
        {
            if names.is_empty() {
                return Err(Error::config(format!("empty {kind} list")));
            }
            let mut seen = std::collections::BTreeSet::new();
            for n in names {
                if !seen.insert(n) {
                    return Err(Error::config(format!("duplicate {kind} name {n:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn n_categories(&self) -> usize {
        self.object_categories.len()
    }

    pub fn n_predicates(&self) -> usize {
        self.predicates.len()
    }
}

/// Observed features for one candidate pair: subject and object appearance
/// plus the compressed pair feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTriple {
    pub x_s: Vec<f64>,
    pub x_r: Vec<f64>,
    pub x_o: Vec<f64>,
}

/// CRF parameters. `w_a`/`b_a` are shared between the subject and object
/// unaries; the binary potentials are plain lookup tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfPotentials {
    /// N×D_a object-category unary.
    pub w_a: DenseMatrix,
    pub b_a: Vec<f64>,
    /// K×D_r predicate unary.
    pub w_r: DenseMatrix,
    pub b_r: Vec<f64>,
    /// K×N predicate-subject compatibility.
    pub w_rs: DenseMatrix,
    /// K×N predicate-object compatibility.
    pub w_ro: DenseMatrix,
    /// N×N subject-object compatibility.
    pub w_so: DenseMatrix,
}

impl CrfPotentials {
    pub fn zeros(n: usize, k: usize, d_a: usize, d_r: usize) -> Self {
        CrfPotentials {
            w_a: DenseMatrix::zeros(n, d_a),
            b_a: vec![0.0; n],
            w_r: DenseMatrix::zeros(k, d_r),
            b_r: vec![0.0; k],
            w_rs: DenseMatrix::zeros(k, n),
            w_ro: DenseMatrix::zeros(k, n),
            w_so: DenseMatrix::zeros(n, n),
        }
    }

    pub fn n_categories(&self) -> usize {
        self.w_a.rows()
    }

    pub fn n_predicates(&self) -> usize {
        self.w_r.rows()
    }

    /// Unary logits W_a x + b_a for one appearance feature.
    pub fn category_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        affine(x, &self.w_a, &self.b_a)
    }

    /// Unary logits W_r x_r + b_r.
    pub fn predicate_logits(&self, x_r: &[f64]) -> Result<Vec<f64>> {
        affine(x_r, &self.w_r, &self.b_r)
    }
}

/// The factorized beliefs (q_s, q_r, q_o).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefTriple {
    pub q_s: ProbVector,
    pub q_r: ProbVector,
    pub q_o: ProbVector,
}

impl BeliefTriple {
    /// L∞ distance between two belief triples.
    pub fn linf_distance(&self, other: &BeliefTriple) -> f64 {
        let comp = |a: &ProbVector, b: &ProbVector| {
            a.values()
                .iter()
                .zip(b.values())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        comp(&self.q_s, &other.q_s)
            .max(comp(&self.q_r, &other.q_r))
            .max(comp(&self.q_o, &other.q_o))
    }
}

fn check_indices(s: usize, r: usize, o: usize, theta: &CrfPotentials) -> Result<()> {
    let n = theta.n_categories();
    let k = theta.n_predicates();
    if s >= n || o >= n {
        return Err(Error::index(format!("category index ({s},{o}) out of 0..{n}")));
    }
    if r >= k {
        return Err(Error::index(format!("predicate index {r} out of 0..{k}")));
    }
    Ok(())
}

/// Φ(s,r,o) = ψ_a(s|x_s) + ψ_a(o|x_o) + ψ_r(r|x_r) + φ_rs + φ_ro + φ_so.
pub fn joint_potential(
    s: usize,
    r: usize,
    o: usize,
    f: &FeatureTriple,
    theta: &CrfPotentials,
) -> Result<f64> {
    check_indices(s, r, o, theta)?;
    let unary_s = theta.category_logits(&f.x_s)?;
    let unary_o = theta.category_logits(&f.x_o)?;
    let unary_r = theta.predicate_logits(&f.x_r)?;
    Ok(unary_s[s]
        + unary_o[o]
        + unary_r[r]
        + theta.w_rs.get(r, s)
        + theta.w_ro.get(r, o)
        + theta.w_so.get(s, o))
}

/// Normalized probability table over all (s, r, o) configurations,
/// indexed (s·K + r)·N + o.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    pub n: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl JointTable {
    pub fn get(&self, s: usize, r: usize, o: usize) -> f64 {
        self.values[(s * self.k + r) * self.n + o]
    }

    pub fn predicate_marginal(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.k];
        for s in 0..self.n {
            for r in 0..self.k {
                for o in 0..self.n {
                    p[r] += self.get(s, r, o);
                }
            }
        }
        p
    }

    pub fn subject_marginal(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.n];
        for s in 0..self.n {
            for r in 0..self.k {
                for o in 0..self.n {
                    p[s] += self.get(s, r, o);
                }
            }
        }
        p
    }

    /// p(s, o), predicates summed out.
    pub fn pair_marginal(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for s in 0..self.n {
            for o in 0..self.n {
                let mass: f64 = (0..self.k).map(|r| self.get(s, r, o)).sum();
                m.set(s, o, mass);
            }
        }
        m
    }

    /// The (s,·,o) slice renormalized into a distribution over predicates.
    pub fn conditional_predicate(&self, s: usize, o: usize) -> Result<ProbVector> {
        if s >= self.n || o >= self.n {
            return Err(Error::index(format!("pair ({s},{o}) out of 0..{}", self.n)));
        }
        let slice: Vec<f64> = (0..self.k).map(|r| self.get(s, r, o)).collect();
        let z: f64 = slice.iter().sum();
        ProbVector::new(slice.iter().map(|v| v / z).collect())
    }
}

/// Full-enumeration posterior with max subtraction. Guarded by
/// [`ENUMERATION_LIMIT`] on N·K·N.
pub fn exact_joint_posterior(f: &FeatureTriple, theta: &CrfPotentials) -> Result<JointTable> {
    let n = theta.n_categories();
    let k = theta.n_predicates();
    if n * k * n > ENUMERATION_LIMIT {
        return Err(Error::Capacity(format!(
            "enumeration over {} configurations exceeds {ENUMERATION_LIMIT}",
            n * k * n
        )));
    }
    let unary_s = theta.category_logits(&f.x_s)?;
    let unary_o = theta.category_logits(&f.x_o)?;
    let unary_r = theta.predicate_logits(&f.x_r)?;

    let mut potentials = Vec::with_capacity(n * k * n);
    let mut max = f64::NEG_INFINITY;
    for s in 0..n {
        for r in 0..k {
            for o in 0..n {
                let phi = unary_s[s]
                    + unary_o[o]
                    + unary_r[r]
                    + theta.w_rs.get(r, s)
                    + theta.w_ro.get(r, o)
                    + theta.w_so.get(s, o);
                max = max.max(phi);
                potentials.push(phi);
            }
        }
    }
    let mut values: Vec<f64> = potentials.iter().map(|p| (p - max).exp()).collect();
    let z: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= z);
    Ok(JointTable { n, k, values })
}

/// Closed-form p(r | s, o, x_r): softmax of the predicate unary plus the
/// s and o columns of the compatibility tables.
pub fn exact_conditional_predicate(
    s: usize,
    o: usize,
    f: &FeatureTriple,
    theta: &CrfPotentials,
) -> Result<ProbVector> {
    check_indices(s, 0, o, theta)?;
    let mut logits = theta.predicate_logits(&f.x_r)?;
    for (r, logit) in logits.iter_mut().enumerate() {
        *logit += theta.w_rs.get(r, s) + theta.w_ro.get(r, o);
    }
    softmax(&logits)
}

/// Unary-only beliefs: the mean-field starting point.
pub fn unary_beliefs(f: &FeatureTriple, theta: &CrfPotentials) -> Result<BeliefTriple> {
    Ok(BeliefTriple {
        q_s: softmax(&theta.category_logits(&f.x_s)?)?,
        q_r: softmax(&theta.predicate_logits(&f.x_r)?)?,
        q_o: softmax(&theta.category_logits(&f.x_o)?)?,
    })
}

/// One simultaneous (Jacobi) mean-field update with tied weights:
///   q'_s = σ(W_a x_s + b_a + W_rsᵀ q_r + W_so q_o)
///   q'_r = σ(W_r x_r + b_r + W_rs q_s + W_ro q_o)
///   q'_o = σ(W_a x_o + b_a + W_soᵀ q_s + W_roᵀ q_r)
/// All three outputs are computed from the input beliefs.
pub fn meanfield_step(
    q: &BeliefTriple,
    f: &FeatureTriple,
    theta: &CrfPotentials,
) -> Result<BeliefTriple> {
    let mut z_s = theta.category_logits(&f.x_s)?;
    theta.w_rs.matvec_t_add(q.q_r.values(), &mut z_s);
    theta.w_so.matvec_add(q.q_o.values(), &mut z_s);

    let mut z_r = theta.predicate_logits(&f.x_r)?;
    theta.w_rs.matvec_add(q.q_s.values(), &mut z_r);
    theta.w_ro.matvec_add(q.q_o.values(), &mut z_r);

    let mut z_o = theta.category_logits(&f.x_o)?;
    theta.w_so.matvec_t_add(q.q_s.values(), &mut z_o);
    theta.w_ro.matvec_t_add(q.q_r.values(), &mut z_o);

    Ok(BeliefTriple { q_s: softmax(&z_s)?, q_r: softmax(&z_r)?, q_o: softmax(&z_o)? })
}

/// Result of the damped fixed-point search.
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub beliefs: BeliefTriple,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates [`meanfield_step`] with convex damping
/// q ← damping·step(q) + (1−damping)·q until the L∞ change drops below
/// `tol`. Starts from the unary softmaxes.
pub fn meanfield_fixed_point(
    f: &FeatureTriple,
    theta: &CrfPotentials,
    max_iters: usize,
    tol: f64,
    damping: f64,
) -> Result<FixedPoint> {
    if max_iters == 0 {
        return Err(Error::config("max_iters must be at least 1"));
    }
    if !(0.0 < damping && damping <= 1.0) {
        return Err(Error::config(format!("damping {damping} outside (0, 1]")));
    }
    let mut q = unary_beliefs(f, theta)?;
    for iter in 1..=max_iters {
        let stepped = meanfield_step(&q, f, theta)?;
        let next = if damping == 1.0 {
            stepped
        } else {
            let mix = |a: &ProbVector, b: &ProbVector| {
                ProbVector::new(
                    a.values()
                        .iter()
                        .zip(b.values())
                        .map(|(s, p)| damping * s + (1.0 - damping) * p)
                        .collect(),
                )
            };
            BeliefTriple {
                q_s: mix(&stepped.q_s, &q.q_s)?,
                q_r: mix(&stepped.q_r, &q.q_r)?,
                q_o: mix(&stepped.q_o, &q.q_o)?,
            }
        };
        let delta = next.linf_distance(&q);
        q = next;
        if delta < tol {
            return Ok(FixedPoint { beliefs: q, iterations: iter, converged: true });
        }
    }
    Ok(FixedPoint { beliefs: q, iterations: max_iters, converged: false })
}

/// Variational objective E_q[Φ] + H(q) for a factorized belief.
pub fn free_energy(q: &BeliefTriple, f: &FeatureTriple, theta: &CrfPotentials) -> Result<f64> {
    let unary_s = theta.category_logits(&f.x_s)?;
    let unary_o = theta.category_logits(&f.x_o)?;
    let unary_r = theta.predicate_logits(&f.x_r)?;
    let dot = |p: &ProbVector, v: &[f64]| -> f64 {
        p.values().iter().zip(v).map(|(a, b)| a * b).sum()
    };
    let mut e = dot(&q.q_s, &unary_s) + dot(&q.q_o, &unary_o) + dot(&q.q_r, &unary_r);
    e += dot(&q.q_r, &theta.w_rs.matvec(q.q_s.values()));
    e += dot(&q.q_r, &theta.w_ro.matvec(q.q_o.values()));
    e += dot(&q.q_s, &theta.w_so.matvec(q.q_o.values()));
    Ok(e + entropy(q.q_s.values()) + entropy(q.q_r.values()) + entropy(q.q_o.values()))
}

/// p(s,r,o) ∝ exp(φ_rs + φ_ro + φ_so): the binary-potential-only Gibbs
/// table. The synthetic generator samples labels from this.
pub fn binary_gibbs_table(theta: &CrfPotentials) -> Result<JointTable> {
    let n = theta.n_categories();
    let k = theta.n_predicates();
    if n * k * n > ENUMERATION_LIMIT {
        return Err(Error::Capacity(format!(
            "enumeration over {} configurations exceeds {ENUMERATION_LIMIT}",
            n * k * n
        )));
    }
    let mut potentials = Vec::with_capacity(n * k * n);
    let mut max = f64::NEG_INFINITY;
    for s in 0..n {
        for r in 0..k {
            for o in 0..n {
                let phi = theta.w_rs.get(r, s) + theta.w_ro.get(r, o) + theta.w_so.get(s, o);
                max = max.max(phi);
                potentials.push(phi);
            }
        }
    }
    let mut values: Vec<f64> = potentials.iter().map(|p| (p - max).exp()).collect();
    let z: f64 = values.iter().sum();
    values.iter_mut().for_each(|v| *v /= z);
    Ok(JointTable { n, k, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_instance(
        rng: &mut ChaCha20Rng,
        n: usize,
        k: usize,
        d: usize,
        scale: f64,
    ) -> (FeatureTriple, CrfPotentials) {
        let mut theta = CrfPotentials::zeros(n, k, d, d);
        for m in [&mut theta.w_a, &mut theta.w_r, &mut theta.w_rs, &mut theta.w_ro, &mut theta.w_so]
        {
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

    #[test]
    fn zero_potentials_give_zero_and_uniform() {
        let theta = CrfPotentials::zeros(3, 4, 2, 2);
        let f = FeatureTriple { x_s: vec![1.0, -1.0], x_r: vec![0.5, 0.5], x_o: vec![0.2, 0.3] };
        for s in 0..3 {
            for r in 0..4 {
                for o in 0..3 {
                    assert_eq!(joint_potential(s, r, o, &f, &theta).unwrap(), 0.0);
                }
            }
        }
        let table = exact_joint_posterior(&f, &theta).unwrap();
        for v in &table.values {
            assert!((v - 1.0 / 36.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_entry_lookup() {
        let mut theta = CrfPotentials::zeros(4, 3, 2, 2);
        theta.w_so.set(2, 3, 1.5);
        let f = FeatureTriple { x_s: vec![0.0; 2], x_r: vec![0.0; 2], x_o: vec![0.0; 2] };
        for r in 0..3 {
            assert_eq!(joint_potential(2, r, 3, &f, &theta).unwrap(), 1.5);
        }
        assert_eq!(joint_potential(0, 0, 0, &f, &theta).unwrap(), 0.0);
    }

    #[test]
    fn joint_potential_matches_independent_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let (f, theta) = random_instance(&mut rng, 4, 5, 3, 1.0);
        for _ in 0..20 {
            let s = rng.random_range(0..4);
            let r = rng.random_range(0..5);
            let o = rng.random_range(0..4);
            // Recompute the six terms directly.
            let dot = |w: &DenseMatrix, row: usize, x: &[f64]| -> f64 {
                (0..x.len()).map(|j| w.get(row, j) * x[j]).sum()
            };
            let expected = dot(&theta.w_a, s, &f.x_s)
                + theta.b_a[s]
                + dot(&theta.w_a, o, &f.x_o)
                + theta.b_a[o]
                + dot(&theta.w_r, r, &f.x_r)
                + theta.b_r[r]
                + theta.w_rs.get(r, s)
                + theta.w_ro.get(r, o)
                + theta.w_so.get(s, o);
            let got = joint_potential(s, r, o, &f, &theta).unwrap();
            assert!((got - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn index_out_of_range_is_error() {
        let theta = CrfPotentials::zeros(2, 2, 1, 1);
        let f = FeatureTriple { x_s: vec![0.0], x_r: vec![0.0], x_o: vec![0.0] };
        assert!(joint_potential(2, 0, 0, &f, &theta).is_err());
        assert!(joint_potential(0, 2, 0, &f, &theta).is_err());
        assert!(exact_conditional_predicate(0, 5, &f, &theta).is_err());
    }

    #[test]
    fn capacity_guard_trips() {
        let theta = CrfPotentials::zeros(200, 30, 1, 1);
        let f = FeatureTriple { x_s: vec![0.0], x_r: vec![0.0], x_o: vec![0.0] };
        assert!(matches!(exact_joint_posterior(&f, &theta), Err(Error::Capacity(_))));
    }

    #[test]
    fn predicate_marginal_analytic_case() {
        // N=1, K=2, predicate logits (ln 3, 0) -> marginal (0.75, 0.25).
        let mut theta = CrfPotentials::zeros(1, 2, 1, 1);
        theta.b_r = vec![3.0_f64.ln(), 0.0];
        let f = FeatureTriple { x_s: vec![0.0], x_r: vec![0.0], x_o: vec![0.0] };
        let table = exact_joint_posterior(&f, &theta).unwrap();
        let marginal = table.predicate_marginal();
        assert!((marginal[0] - 0.75).abs() < 1e-12);
        assert!((marginal[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn enumeration_is_self_consistent() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let (f, theta) = random_instance(&mut rng, 4, 5, 3, 1.5);
        let table = exact_joint_posterior(&f, &theta).unwrap();
        let total: f64 = table.values.iter().sum();
        assert!((total - 1.0).abs() < 1e-10);
        for s in 0..4 {
            for o in 0..4 {
                let cond = table.conditional_predicate(s, o).unwrap();
                let sum: f64 = cond.values().iter().sum();
                assert!((sum - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shift_invariance_of_posterior() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let (f, mut theta) = random_instance(&mut rng, 3, 4, 3, 1.0);
        let base = exact_joint_posterior(&f, &theta).unwrap();
        // Adding a constant to all potentials via the predicate bias.
        theta.b_r.iter_mut().for_each(|v| *v += 17.0);
        let shifted = exact_joint_posterior(&f, &theta).unwrap();
        for (a, b) in base.values.iter().zip(&shifted.values) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn closed_form_matches_enumeration() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (f, theta) = random_instance(&mut rng, 4, 5, 8, 1.2);
            let table = exact_joint_posterior(&f, &theta).unwrap();
            for s in 0..4 {
                for o in 0..4 {
                    let closed = exact_conditional_predicate(s, o, &f, &theta).unwrap();
                    let brute = table.conditional_predicate(s, o).unwrap();
                    for (a, b) in closed.values().iter().zip(brute.values()) {
                        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn conditional_reduces_to_unary_without_relations() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (f, mut theta) = random_instance(&mut rng, 3, 5, 4, 1.0);
        theta.w_rs.fill(0.0);
        theta.w_ro.fill(0.0);
        let cond = exact_conditional_predicate(1, 2, &f, &theta).unwrap();
        let unary = softmax(&theta.predicate_logits(&f.x_r).unwrap()).unwrap();
        assert_eq!(cond, unary);
    }

    #[test]
    fn strong_column_concentrates_conditional() {
        let mut theta = CrfPotentials::zeros(3, 4, 2, 2);
        theta.w_rs.set(0, 1, 10.0); // predicate 0 strongly tied to subject 1
        let f = FeatureTriple { x_s: vec![0.0; 2], x_r: vec![0.0; 2], x_o: vec![0.0; 2] };
        let cond = exact_conditional_predicate(1, 0, &f, &theta).unwrap();
        assert!(cond.values()[0] > 0.99);
        let table = exact_joint_posterior(&f, &theta).unwrap();
        let brute = table.conditional_predicate(1, 0).unwrap();
        assert!(brute.values()[0] > 0.99);
    }

    #[test]
    fn decoupled_meanfield_fixes_after_one_step() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let (f, mut theta) = random_instance(&mut rng, 3, 4, 3, 1.0);
        theta.w_rs.fill(0.0);
        theta.w_ro.fill(0.0);
        theta.w_so.fill(0.0);
        let q0 = unary_beliefs(&f, &theta).unwrap();
        let q1 = meanfield_step(&q0, &f, &theta).unwrap();
        assert!(q1.linf_distance(&q0) < 1e-15);
        let fp = meanfield_fixed_point(&f, &theta, 100, 1e-12, 1.0).unwrap();
        assert!(fp.converged);
        assert_eq!(fp.iterations, 1);
    }

    #[test]
    fn onehot_reduction_to_exact_conditional() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (f, mut theta) = random_instance(&mut rng, 4, 5, 3, 1.0);
        theta.w_so.fill(0.0);
        let (s, o) = (2, 1);
        let q = BeliefTriple {
            q_s: ProbVector::one_hot(4, s).unwrap(),
            q_r: ProbVector::uniform(5).unwrap(),
            q_o: ProbVector::one_hot(4, o).unwrap(),
        };
        let stepped = meanfield_step(&q, &f, &theta).unwrap();
        let exact = exact_conditional_predicate(s, o, &f, &theta).unwrap();
        for (a, b) in stepped.q_r.values().iter().zip(exact.values()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn damped_iteration_reaches_fixed_point() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let (f, theta) = random_instance(&mut rng, 4, 5, 3, 1.5);
        let fp = meanfield_fixed_point(&f, &theta, 200, 1e-10, 0.5).unwrap();
        assert!(fp.converged, "no fixed point after {} iterations", fp.iterations);
        // By definition: one more undamped step moves less than tol.
        let stepped = meanfield_step(&fp.beliefs, &f, &theta).unwrap();
        assert!(stepped.linf_distance(&fp.beliefs) < 1e-8);
    }

    #[test]
    fn strong_potentials_converge_with_damping() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let mut theta = CrfPotentials::zeros(4, 5, 2, 2);
        for m in [&mut theta.w_rs, &mut theta.w_ro, &mut theta.w_so] {
            m.values_mut()
                .iter_mut()
                .for_each(|v| *v = if rng.random::<bool>() { 5.0 } else { -5.0 });
        }
        let f = FeatureTriple {
            x_s: vec![0.1, -0.2],
            x_r: vec![0.3, 0.0],
            x_o: vec![-0.1, 0.2],
        };
        let fp = meanfield_fixed_point(&f, &theta, 500, 1e-10, 0.5).unwrap();
        assert!(fp.converged, "needed more than 500 iterations");
    }

    #[test]
    fn free_energy_nondecreasing_along_damped_iterations() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for _ in 0..10 {
            let (f, theta) = random_instance(&mut rng, 4, 5, 3, 2.0);
            let mut q = unary_beliefs(&f, &theta).unwrap();
            let mut fe = free_energy(&q, &f, &theta).unwrap();
            for _ in 0..100 {
                let stepped = meanfield_step(&q, &f, &theta).unwrap();
                let mix = |a: &ProbVector, b: &ProbVector| {
                    ProbVector::new(
                        a.values()
                            .iter()
                            .zip(b.values())
                            .map(|(s, p)| 0.5 * s + 0.5 * p)
                            .collect(),
                    )
                    .unwrap()
                };
                q = BeliefTriple {
                    q_s: mix(&stepped.q_s, &q.q_s),
                    q_r: mix(&stepped.q_r, &q.q_r),
                    q_o: mix(&stepped.q_o, &q.q_o),
                };
                let next = free_energy(&q, &f, &theta).unwrap();
                assert!(next >= fe - 1e-9, "free energy dropped: {fe} -> {next}");
                fe = next;
            }
        }
    }

    #[test]
    fn conditioning_never_raises_predicate_entropy() {
        let mut rng = ChaCha20Rng::seed_from_u64(16);
        for _ in 0..20 {
            let (f, theta) = random_instance(&mut rng, 4, 5, 3, 2.0);
            let table = exact_joint_posterior(&f, &theta).unwrap();
            let marginal_h = entropy(&table.predicate_marginal());
            let pair = table.pair_marginal();
            let mut conditional_h = 0.0;
            for s in 0..4 {
                for o in 0..4 {
                    let w = pair.get(s, o);
                    if w > 0.0 {
                        conditional_h +=
                            w * entropy(table.conditional_predicate(s, o).unwrap().values());
                    }
                }
            }
            assert!(conditional_h <= marginal_h + 1e-9);
        }
    }
}
