//! Robust classification and grouped regression oracles built on sparse
//! unit-norm feature columns.

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::ops::Range;

use super::ExperimentError;
use crate::problem::{BlockIndexSet, BlockOperator, CompositeProblem, SmoothOracle};
use crate::regularizer::SeparableRegularizer;

/// Column-major sparse features: one sorted (index, value) list per sample.
#[derive(Debug, Clone)]
pub struct FeatureColumns {
    n: usize,
    cols: Vec<Vec<(usize, f64)>>,
}

impl FeatureColumns {
    pub fn new(n: usize, cols: Vec<Vec<(usize, f64)>>) -> Result<Self, ExperimentError> {
        for (j, col) in cols.iter().enumerate() {
            let mut prev = None;
            for &(i, _) in col {
                if i >= n {
                    return Err(ExperimentError::Format(format!(
                        "column {j} references index {i}, dimension is {n}"
                    )));
                }
                if prev.is_some_and(|p| p >= i) {
                    return Err(ExperimentError::Format(format!(
                        "column {j} indices are not strictly increasing"
                    )));
                }
                prev = Some(i);
            }
        }
        Ok(Self { n, cols })
    }

    pub fn dense_column(col: &ArrayView1<f64>) -> Vec<(usize, f64)> {
        col.iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, j: usize) -> &[(usize, f64)] {
        &self.cols[j]
    }

    /// Scales every column to unit norm; zero columns are removed and their
    /// original positions returned so labels can be dropped alongside.
    pub fn normalized(mut self) -> (Self, Vec<usize>) {
        let mut dropped = Vec::new();
        let mut kept = Vec::with_capacity(self.cols.len());
        for (j, mut col) in self.cols.into_iter().enumerate() {
            let norm = col.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                dropped.push(j);
                continue;
            }
            for entry in &mut col {
                entry.1 /= norm;
            }
            kept.push(col);
        }
        self.cols = kept;
        (self, dropped)
    }

    pub fn dot(&self, j: usize, x: &ArrayView1<f64>) -> f64 {
        self.cols[j].iter().map(|&(i, v)| v * x[i]).sum()
    }

    /// out += sum_j coeffs[j] * column_j
    pub fn accumulate(&self, coeffs: &[f64], out: &mut Array1<f64>) {
        for (col, &c) in self.cols.iter().zip(coeffs) {
            if c == 0.0 {
                continue;
            }
            for &(i, v) in col {
                out[i] += c * v;
            }
        }
    }

    /// sum_j ||z_j||^2. Bounds the spectral norm of sum_j z_j z_j^T, so any
    /// reweighting with weights in [-c, c] has curvature within c times this
    /// along every direction.
    pub fn energy_sum(&self) -> f64 {
        self.cols.iter().flatten().map(|&(_, v)| v * v).sum()
    }

    fn check_unit_norms(&self) -> Result<(), ExperimentError> {
        for (j, col) in self.cols.iter().enumerate() {
            let norm = col.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-10 {
                return Err(ExperimentError::Format(format!(
                    "column {j} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

pub fn gm_loss(t: f64) -> f64 {
    2.0 * t * t / (t * t + 4.0)
}

pub fn gm_grad(t: f64) -> f64 {
    let s = t * t + 4.0;
    16.0 * t / (s * s)
}

pub fn gm_curv(t: f64) -> f64 {
    let s = t * t + 4.0;
    16.0 * (4.0 - 3.0 * t * t) / (s * s * s)
}

pub fn bw_loss(t: f64) -> f64 {
    t * t / (t * t + 1.0)
}

pub fn bw_grad(t: f64) -> f64 {
    let s = t * t + 1.0;
    2.0 * t / (s * s)
}

pub fn bw_curv(t: f64) -> f64 {
    let s = t * t + 1.0;
    (2.0 - 6.0 * t * t) / (s * s * s)
}

#[derive(Debug, Clone)]
pub struct ClassificationInstance {
    pub features: FeatureColumns,
    pub labels: Array1<f64>,
    pub lambda: f64,
}

impl ClassificationInstance {
    pub fn new(
        features: FeatureColumns,
        labels: Array1<f64>,
        lambda: f64,
    ) -> Result<Self, ExperimentError> {
        if labels.len() != features.m() {
            return Err(ExperimentError::Format(format!(
                "{} labels for {} samples",
                labels.len(),
                features.m()
            )));
        }
        features.check_unit_norms()?;
        Ok(Self {
            features,
            labels,
            lambda,
        })
    }
}

struct SparseWeightedOperator {
    size: usize,
    /// Column entries re-indexed into block positions, empties skipped.
    cols: Vec<Vec<(usize, f64)>>,
    d: Vec<f64>,
    ridge: f64,
    floor: f64,
}

impl SparseWeightedOperator {
    fn build(features: &FeatureColumns, d_all: &[f64], ridge: f64, block: &BlockIndexSet) -> Self {
        let mut pos = vec![usize::MAX; features.n()];
        for (p, &i) in block.indices().iter().enumerate() {
            pos[i] = p;
        }
        let mut cols = Vec::new();
        let mut d = Vec::new();
        // floor: each column contributes at worst min(d_j, 0) times its
        // restricted energy, on top of the ridge.
        let mut floor = ridge;
        for (j, col) in (0..features.m()).map(|j| (j, features.column(j))) {
            let mut restricted = Vec::new();
            let mut energy = 0.0;
            for &(i, v) in col {
                if pos[i] != usize::MAX {
                    restricted.push((pos[i], v));
                    energy += v * v;
                }
            }
            if restricted.is_empty() {
                continue;
            }
            floor += d_all[j].min(0.0) * energy;
            cols.push(restricted);
            d.push(d_all[j]);
        }
        Self {
            size: block.len(),
            cols,
            d,
            ridge,
            floor,
        }
    }
}

impl BlockOperator for SparseWeightedOperator {
    fn size(&self) -> usize {
        self.size
    }

    fn apply_into(&self, v: &ArrayView1<f64>, out: &mut Array1<f64>) {
        if self.ridge != 0.0 {
            out.zip_mut_with(v, |o, &vi| *o = self.ridge * vi);
        } else {
            out.fill(0.0);
        }
        for (col, &dj) in self.cols.iter().zip(&self.d) {
            let s: f64 = col.iter().map(|&(p, vv)| vv * v[p]).sum();
            if s == 0.0 || dj == 0.0 {
                continue;
            }
            let c = dj * s;
            for &(p, vv) in col {
                out[p] += c * vv;
            }
        }
    }

    fn eig_floor(&self) -> Option<f64> {
        Some(self.floor)
    }
}

pub struct GemanMcClureOracle {
    features: FeatureColumns,
    labels: Array1<f64>,
    lambda: f64,
    l_g: f64,
}

impl GemanMcClureOracle {
    fn margins(&self, x: &ArrayView1<f64>) -> Vec<f64> {
        (0..self.features.m())
            .map(|j| self.labels[j] - self.features.dot(j, x))
            .collect()
    }
}

impl SmoothOracle for GemanMcClureOracle {
    fn dim(&self) -> usize {
        self.features.n()
    }

    fn eval(&self, x: &ArrayView1<f64>) -> f64 {
        let m = self.features.m() as f64;
        let data: f64 = self.margins(x).into_iter().map(gm_loss).sum();
        data / m + self.lambda * x.dot(x)
    }

    fn gradient(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let m = self.features.m() as f64;
        let coeffs: Vec<f64> = self
            .margins(x)
            .into_iter()
            .map(|t| -gm_grad(t) / m)
            .collect();
        let mut out = x.mapv(|v| 2.0 * self.lambda * v);
        self.features.accumulate(&coeffs, &mut out);
        out
    }

    fn restricted_curvature<'a>(
        &'a self,
        x: &ArrayView1<f64>,
        block: &BlockIndexSet,
    ) -> Box<dyn BlockOperator + 'a> {
        let m = self.features.m() as f64;
        let d: Vec<f64> = self
            .margins(x)
            .into_iter()
            .map(|t| gm_curv(t) / m)
            .collect();
        Box::new(SparseWeightedOperator::build(
            &self.features,
            &d,
            2.0 * self.lambda,
            block,
        ))
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(self.l_g)
    }

    fn curvature_floor(&self, x: &ArrayView1<f64>) -> Option<f64> {
        let m = self.features.m() as f64;
        let neg: f64 = self
            .margins(x)
            .into_iter()
            .map(|t| (gm_curv(t) / m).min(0.0))
            .sum();
        Some(2.0 * self.lambda + neg)
    }
}

pub fn geman_mcclure_oracle(inst: &ClassificationInstance) -> GemanMcClureOracle {
    // Curvature of the loss peaks at zero margin with value 1.
    let l_g = inst.features.energy_sum() / inst.features.m() as f64 + 2.0 * inst.lambda;
    GemanMcClureOracle {
        features: inst.features.clone(),
        labels: inst.labels.clone(),
        lambda: inst.lambda,
        l_g,
    }
}

/// The classification objective is fully smooth; the composite wrapper gets a
/// zero regularizer.
pub fn geman_mcclure_problem(inst: &ClassificationInstance) -> CompositeProblem {
    let n = inst.features.n();
    CompositeProblem::new(
        Box::new(geman_mcclure_oracle(inst)),
        SeparableRegularizer::zero(n),
    )
    .expect("dimensions agree by construction")
}

const WEIGHT_CLAMP: f64 = 1e-8;

pub struct BiweightOracle {
    features: FeatureColumns,
    labels: Array1<f64>,
    l_g: f64,
    gap: f64,
}

impl BiweightOracle {
    fn margins(&self, x: &ArrayView1<f64>) -> Vec<f64> {
        (0..self.features.m())
            .map(|j| self.features.dot(j, x) - self.labels[j])
            .collect()
    }

    fn clamped_weights(&self, x: &ArrayView1<f64>) -> Vec<f64> {
        let m = self.features.m() as f64;
        self.margins(x)
            .into_iter()
            .map(|t| (bw_curv(t) / m).max(WEIGHT_CLAMP))
            .collect()
    }
}

impl SmoothOracle for BiweightOracle {
    fn dim(&self) -> usize {
        self.features.n()
    }

    fn eval(&self, x: &ArrayView1<f64>) -> f64 {
        let m = self.features.m() as f64;
        self.margins(x).into_iter().map(bw_loss).sum::<f64>() / m
    }

    fn gradient(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let m = self.features.m() as f64;
        let coeffs: Vec<f64> = self
            .margins(x)
            .into_iter()
            .map(|t| bw_grad(t) / m)
            .collect();
        let mut out = Array1::zeros(self.features.n());
        self.features.accumulate(&coeffs, &mut out);
        out
    }

    fn restricted_curvature<'a>(
        &'a self,
        x: &ArrayView1<f64>,
        block: &BlockIndexSet,
    ) -> Box<dyn BlockOperator + 'a> {
        let d = self.clamped_weights(x);
        Box::new(SparseWeightedOperator::build(
            &self.features,
            &d,
            0.0,
            block,
        ))
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(self.l_g)
    }

    fn curvature_floor(&self, _x: &ArrayView1<f64>) -> Option<f64> {
        // Clamping keeps every weight positive, so the operator is PSD.
        Some(0.0)
    }

    fn min_curvature_weight(&self, x: &ArrayView1<f64>) -> Option<f64> {
        self.clamped_weights(x).into_iter().reduce(f64::min)
    }

    fn curvature_gap(&self) -> f64 {
        self.gap
    }
}

#[derive(Debug, Clone)]
pub struct BiweightGroupInstance {
    pub features: FeatureColumns,
    pub labels: Array1<f64>,
    pub lambda: f64,
    pub groups: Vec<Range<usize>>,
}

/// Assembles the grouped robust regression problem: clamped-curvature oracle
/// plus a width-5 group norm penalty.
pub fn biweight_group_instance(
    features: FeatureColumns,
    labels: Array1<f64>,
    lambda: f64,
) -> Result<(BiweightGroupInstance, BiweightOracle, SeparableRegularizer), ExperimentError> {
    if labels.len() != features.m() {
        return Err(ExperimentError::Format(format!(
            "{} labels for {} samples",
            labels.len(),
            features.m()
        )));
    }
    for &y in &labels {
        if y != 1.0 && y != -1.0 {
            return Err(ExperimentError::BadLabel(y));
        }
    }
    features.check_unit_norms()?;
    let n = features.n();
    let m = features.m();
    let groups = SeparableRegularizer::contiguous_groups(n, 5);
    let reg = SeparableRegularizer::group_l2(n, lambda, groups.clone())
        .map_err(|e| ExperimentError::Format(e.to_string()))?;
    // Clamping moves each weight by at most |min curvature|/m + clamp, and
    // the loss curvature never goes below -1/2.
    let gap = 0.5 + m as f64 * WEIGHT_CLAMP;
    // Loss curvature stays in [-1/2, 2], so two energy units per sample.
    let l_g = 2.0 * features.energy_sum() / m as f64;
    let oracle = BiweightOracle {
        features: features.clone(),
        labels: labels.clone(),
        l_g,
        gap,
    };
    let inst = BiweightGroupInstance {
        features,
        labels,
        lambda,
        groups,
    };
    Ok((inst, oracle, reg))
}

pub fn biweight_problem(oracle: BiweightOracle, reg: SeparableRegularizer) -> CompositeProblem {
    CompositeProblem::new(Box::new(oracle), reg).expect("dimensions agree by construction")
}

/// Dense Gaussian columns scaled to unit norm, labels from a planted linear
/// rule with sign flips.
pub fn synthetic_features(n: usize, m: usize, seed: u64) -> (FeatureColumns, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols = Vec::with_capacity(m);
    for _ in 0..m {
        let mut col: Vec<(usize, f64)> = (0..n)
            .map(|i| {
                (
                    i,
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                )
            })
            .collect();
        let norm = col.iter().map(|&(_, v)| v * v).sum::<f64>().sqrt();
        for entry in &mut col {
            entry.1 /= norm;
        }
        cols.push(col);
    }
    let w = Array1::from_shape_fn(n, |_| {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
    });
    let features = FeatureColumns::new(n, cols).expect("generated columns are in range");
    let labels = Array1::from_shape_fn(m, |j| {
        let t = features.dot(j, &w.view());
        let flip = rng.random_range(0.0..1.0) < 0.1;
        if (t >= 0.0) != flip {
            1.0
        } else {
            -1.0
        }
    });
    (features, labels)
}

pub fn synthetic_gm_instance(n: usize, m: usize, lambda: f64, seed: u64) -> ClassificationInstance {
    let (features, labels) = synthetic_features(n, m, seed);
    ClassificationInstance::new(features, labels, lambda).expect("columns are unit norm")
}

pub fn synthetic_biweight_instance(
    n: usize,
    m: usize,
    lambda: f64,
    seed: u64,
) -> (BiweightGroupInstance, BiweightOracle, SeparableRegularizer) {
    let (features, labels) = synthetic_features(n, m, seed);
    biweight_group_instance(features, labels, lambda).expect("generated labels are signs")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{gradient_check, materialize};

    fn fd2(f: &dyn Fn(f64) -> f64, t: f64) -> f64 {
        let h = 1e-5;
        (f(t + h) - 2.0 * f(t) + f(t - h)) / (h * h)
    }

    #[test]
    fn loss_values_and_derivatives() {
        assert_eq!(gm_loss(0.0), 0.0);
        assert_eq!(gm_grad(0.0), 0.0);
        assert!((gm_loss(2.0) - 1.0).abs() <= 1e-15);
        assert!((gm_grad(2.0) - 0.5).abs() <= 1e-15);
        assert!((gm_curv(2.0) + 0.25).abs() <= 1e-15);
        assert!((gm_curv(0.0) - 1.0).abs() <= 1e-15);

        assert_eq!(bw_loss(0.0), 0.0);
        assert!((bw_curv(0.0) - 2.0).abs() <= 1e-15);
        assert!((bw_loss(1.0) - 0.5).abs() <= 1e-15);
        assert!((bw_grad(1.0) - 0.5).abs() <= 1e-15);

        for t in [-3.0, -0.7, 0.3, 1.9] {
            assert!((fd2(&gm_loss, t) - gm_curv(t)).abs() <= 1e-5);
            assert!((fd2(&bw_loss, t) - bw_curv(t)).abs() <= 1e-5);
        }
    }

    #[test]
    fn gm_oracle_matches_finite_differences() {
        let inst = synthetic_gm_instance(24, 15, 0.001, 3);
        let oracle = geman_mcclure_oracle(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let x = Array1::from_shape_fn(24, |_| rng.random_range(-1.0..1.0));
            assert!(gradient_check(&oracle, &x.view(), 1e-6) <= 1e-5);
        }
    }

    #[test]
    fn gm_restricted_curvature_matches_dense_assembly() {
        let inst = synthetic_gm_instance(12, 9, 0.001, 4);
        let oracle = geman_mcclure_oracle(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Array1::from_shape_fn(12, |_| rng.random_range(-0.5..0.5));
        let block = BlockIndexSet::new(vec![0, 3, 4, 9, 11], 12).unwrap();
        let q = materialize(&*oracle.restricted_curvature(&x.view(), &block));
        // Assemble the same block densely from columns.
        let m = 9.0;
        let mut want = ndarray::Array2::<f64>::eye(5) * (2.0 * inst.lambda);
        for j in 0..9 {
            let t = inst.labels[j] - inst.features.dot(j, &x.view());
            let dj = gm_curv(t) / m;
            let zs: Vec<f64> = block
                .indices()
                .iter()
                .map(|&i| {
                    inst.features
                        .column(j)
                        .iter()
                        .find(|&&(ii, _)| ii == i)
                        .map(|&(_, v)| v)
                        .unwrap_or(0.0)
                })
                .collect();
            for a in 0..5 {
                for b in 0..5 {
                    want[[a, b]] += dj * zs[a] * zs[b];
                }
            }
        }
        for a in 0..5 {
            for b in 0..5 {
                assert!((q[[a, b]] - want[[a, b]]).abs() <= 1e-12);
            }
        }
        // The operator floor is a true lower bound on its Rayleigh quotients.
        let floor = oracle
            .restricted_curvature(&x.view(), &block)
            .eig_floor()
            .unwrap();
        for _ in 0..30 {
            let v = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
            let ray = v.dot(&q.dot(&v)) / v.dot(&v);
            assert!(ray >= floor - 1e-12);
        }
    }

    #[test]
    fn classification_eta_example_inputs() {
        // One sample at margin 2: the floor is 2 lambda + curvature.
        let features = FeatureColumns::new(1, vec![vec![(0, 1.0)]]).unwrap();
        let inst =
            ClassificationInstance::new(features, Array1::from_vec(vec![2.0]), 0.001).unwrap();
        let oracle = geman_mcclure_oracle(&inst);
        let x = Array1::zeros(1);
        let floor = oracle.curvature_floor(&x.view()).unwrap();
        assert!((floor - (0.002 - 0.25)).abs() <= 1e-15);
    }

    #[test]
    fn biweight_oracle_weights_and_gradient() {
        let (_, oracle, reg) = synthetic_biweight_instance(17, 11, 0.05, 5);
        assert_eq!(reg.groups().unwrap().len(), 4);
        assert_eq!(reg.groups().unwrap()[3], 15..17);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let x = Array1::from_shape_fn(17, |_| rng.random_range(-1.0..1.0));
            assert!(gradient_check(&oracle, &x.view(), 1e-6) <= 1e-5);
            let w = oracle.min_curvature_weight(&x.view()).unwrap();
            assert!(w >= WEIGHT_CLAMP);
            // Far-out margins clamp, so the floor of the model is zero.
            let block = BlockIndexSet::full(17);
            let op = oracle.restricted_curvature(&x.view(), &block);
            assert_eq!(op.eig_floor(), Some(0.0));
            let v = Array1::from_shape_fn(17, |_| rng.random_range(-1.0..1.0));
            assert!(v.dot(&op.apply(&v.view())) >= -1e-12);
        }
    }

    #[test]
    fn zero_columns_are_dropped_on_normalization() {
        let features =
            FeatureColumns::new(3, vec![vec![(0, 3.0), (2, 4.0)], vec![], vec![(1, 2.0)]]).unwrap();
        let (normed, dropped) = features.normalized();
        assert_eq!(dropped, vec![1]);
        assert_eq!(normed.m(), 2);
        assert!((normed.column(0)[0].1 - 0.6).abs() <= 1e-15);
        assert!((normed.column(0)[1].1 - 0.8).abs() <= 1e-15);
        assert_eq!(normed.column(1)[0].1, 1.0);
    }

    #[test]
    fn bad_labels_are_rejected() {
        let (features, _) = synthetic_features(10, 4, 6);
        let labels = Array1::from_vec(vec![1.0, -1.0, 0.5, 1.0]);
        assert!(matches!(
            biweight_group_instance(features, labels, 0.1),
            Err(ExperimentError::BadLabel(_))
        ));
    }
}
