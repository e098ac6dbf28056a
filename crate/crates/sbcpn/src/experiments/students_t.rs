//! Sparse recovery with Student's t likelihood: a heavy-tailed nonconvex data
//! fit plus an L1 penalty, measured through an operator with orthonormal
//! columns.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::dct::dct2_entry;
use super::ExperimentError;
use crate::problem::{BlockIndexSet, BlockOperator, CompositeProblem, SmoothOracle};
use crate::regularizer::SeparableRegularizer;

/// Dense m x n measurement matrix with orthonormal columns, kept together
/// with its transpose so both application directions stream over rows.
#[derive(Debug, Clone)]
pub struct MeasurementOp {
    a: Array2<f64>,
    at: Array2<f64>,
}

impl MeasurementOp {
    /// Wraps a dense matrix. Column norms are verified; full orthonormality
    /// is spot-checked so that loading stays cheap.
    pub fn from_dense(a: Array2<f64>) -> Result<Self, ExperimentError> {
        let (m, n) = a.dim();
        if m < n {
            return Err(ExperimentError::Format(format!(
                "operator must be tall, got {m} x {n}"
            )));
        }
        for j in 0..n {
            let c = a.column(j);
            if (c.dot(&c).sqrt() - 1.0).abs() > 1e-8 {
                return Err(ExperimentError::Format(format!(
                    "column {j} is not unit-norm"
                )));
            }
        }
        let step = (n / 16).max(1);
        for j in (0..n).step_by(step) {
            for i in (j + 1..n).step_by(step) {
                if a.column(j).dot(&a.column(i)).abs() > 1e-8 {
                    return Err(ExperimentError::Format(format!(
                        "columns {j} and {i} are not orthogonal"
                    )));
                }
            }
        }
        Ok(Self {
            at: a.t().to_owned(),
            a,
        })
    }

    /// Gaussian matrix with columns orthonormalized in place (modified
    /// Gram-Schmidt). The default generator.
    pub fn gaussian_orth(m: usize, n: usize, rng: &mut dyn RngCore) -> Self {
        assert!(m >= n, "need at least as many measurements as unknowns");
        let mut a = Array2::from_shape_fn((m, n), |_| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        for j in 0..n {
            for k in 0..j {
                let proj = a.column(k).dot(&a.column(j));
                let prev = a.column(k).to_owned();
                a.column_mut(j).zip_mut_with(&prev, |x, &p| *x -= proj * p);
            }
            let norm = a.column(j).dot(&a.column(j)).sqrt();
            a.column_mut(j).mapv_inplace(|x| x / norm);
        }
        Self {
            at: a.t().to_owned(),
            a,
        }
    }

    /// The m-point orthonormal DCT-II applied to signals zero-padded from n
    /// to m: the first n columns of the transform matrix.
    pub fn dct_pad(m: usize, n: usize) -> Self {
        assert!(m >= n);
        let a = Array2::from_shape_fn((m, n), |(i, j)| dct2_entry(m, i, j));
        Self {
            at: a.t().to_owned(),
            a,
        }
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a.ncols()
    }

    pub fn apply(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        self.a.dot(x)
    }

    pub fn adjoint(&self, y: &ArrayView1<f64>) -> Array1<f64> {
        self.at.dot(y)
    }

    pub fn dense(&self) -> &Array2<f64> {
        &self.a
    }
}

#[derive(Debug, Clone)]
pub struct StudentsTInstance {
    pub op: MeasurementOp,
    pub b: Array1<f64>,
    pub nu: f64,
    pub lambda: f64,
    /// The planted signal, kept for reporting only.
    pub x_true: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    GaussianOrth,
    DctPad,
}

impl std::str::FromStr for OperatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian-orth" => Ok(OperatorKind::GaussianOrth),
            "dct" => Ok(OperatorKind::DctPad),
            other => Err(format!(
                "unknown operator kind {other:?}; known: gaussian-orth, dct"
            )),
        }
    }
}

/// Draws one instance: m = 2n measurements of a signal with floor(n/40)
/// nonzeros of magnitude 10^[0,1] and random sign, corrupted by scaled
/// Student's t noise with 5 degrees of freedom.
pub fn gen_students_t(
    n: usize,
    seed: u64,
    kind: OperatorKind,
) -> Result<StudentsTInstance, ExperimentError> {
    if n < 40 {
        return Err(ExperimentError::TooSmall { n });
    }
    let m = 2 * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = match kind {
        OperatorKind::GaussianOrth => MeasurementOp::gaussian_orth(m, n, &mut rng),
        OperatorKind::DctPad => MeasurementOp::dct_pad(m, n),
    };

    let nnz = n / 40;
    let support = rand::seq::index::sample(&mut rng, n, nnz).into_vec();
    let mut x_true = Array1::zeros(n);
    for &i in &support {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let exponent: f64 = rng.random_range(0.0..1.0);
        x_true[i] = sign * 10f64.powf(exponent);
    }

    let nu = 0.25;
    let mut b = op.apply(&x_true.view());
    for i in 0..m {
        b[i] += 0.1 * student_t5(&mut rng);
    }

    // lambda = 0.1 * max coordinate of the gradient magnitude at zero.
    let grad0 = {
        let u = b.mapv(|bi| 2.0 * (-bi) / (nu + bi * bi));
        op.adjoint(&u.view())
    };
    let lambda = 0.1 * grad0.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));

    Ok(StudentsTInstance {
        op,
        b,
        nu,
        lambda,
        x_true,
    })
}

// Standard normal over sqrt(chi-squared with 5 dof / 5).
fn student_t5(rng: &mut dyn RngCore) -> f64 {
    let z: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
    let chi2: f64 = (0..5)
        .map(|_| {
            let g: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            g * g
        })
        .sum();
    z / (chi2 / 5.0).sqrt()
}

pub struct StudentsTOracle {
    op: MeasurementOp,
    b: Array1<f64>,
    nu: f64,
}

impl StudentsTOracle {
    fn residual_vec(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let mut r = self.op.apply(x);
        r -= &self.b;
        r
    }

    // Second derivative of log(1 + r^2/nu) in r.
    fn weights(&self, r: &Array1<f64>) -> Array1<f64> {
        r.mapv(|ri| {
            let s = self.nu + ri * ri;
            2.0 * (self.nu - ri * ri) / (s * s)
        })
    }
}

struct ProjectedWeightOperator {
    /// Rows are the selected operator columns, length m each.
    at_sel: Array2<f64>,
    d: Array1<f64>,
}

impl BlockOperator for ProjectedWeightOperator {
    fn size(&self) -> usize {
        self.at_sel.nrows()
    }

    fn apply_into(&self, v: &ArrayView1<f64>, out: &mut Array1<f64>) {
        let mut w = self.at_sel.t().dot(v);
        w *= &self.d;
        *out = self.at_sel.dot(&w);
    }

    fn norm_bound(&self) -> Option<f64> {
        // Orthonormal columns: the block is a compression of diag(d).
        Some(self.d.iter().fold(0.0f64, |acc, &v| acc.max(v.abs())))
    }

    fn eig_floor(&self) -> Option<f64> {
        Some(self.d.iter().fold(f64::INFINITY, |acc, &v| acc.min(v)))
    }
}

impl SmoothOracle for StudentsTOracle {
    fn dim(&self) -> usize {
        self.op.cols()
    }

    fn eval(&self, x: &ArrayView1<f64>) -> f64 {
        let r = self.residual_vec(x);
        r.iter().map(|&ri| (1.0 + ri * ri / self.nu).ln()).sum()
    }

    fn gradient(&self, x: &ArrayView1<f64>) -> Array1<f64> {
        let r = self.residual_vec(x);
        let u = r.mapv(|ri| 2.0 * ri / (self.nu + ri * ri));
        self.op.adjoint(&u.view())
    }

    fn restricted_curvature<'a>(
        &'a self,
        x: &ArrayView1<f64>,
        block: &BlockIndexSet,
    ) -> Box<dyn BlockOperator + 'a> {
        let r = self.residual_vec(x);
        let d = self.weights(&r);
        let m = self.op.rows();
        let mut at_sel = Array2::zeros((block.len(), m));
        for (row, &j) in block.indices().iter().enumerate() {
            at_sel.row_mut(row).assign(&self.op.dense().column(j));
        }
        Box::new(ProjectedWeightOperator { at_sel, d })
    }

    fn lipschitz_bound(&self) -> Option<f64> {
        Some(2.0 / self.nu)
    }

    fn curvature_floor(&self, x: &ArrayView1<f64>) -> Option<f64> {
        let r = self.residual_vec(x);
        Some(
            self.weights(&r)
                .iter()
                .fold(f64::INFINITY, |acc, &v| acc.min(v)),
        )
    }
}

pub fn students_t_oracle(inst: &StudentsTInstance) -> StudentsTOracle {
    StudentsTOracle {
        op: inst.op.clone(),
        b: inst.b.clone(),
        nu: inst.nu,
    }
}

/// The full composite objective: data fit plus `lambda * |x|_1`.
pub fn students_t_problem(inst: &StudentsTInstance) -> CompositeProblem {
    let n = inst.op.cols();
    CompositeProblem::new(
        Box::new(students_t_oracle(inst)),
        SeparableRegularizer::l1(n, inst.lambda),
    )
    .expect("dimensions agree by construction")
}

/// One value per line after a two-line n, m header: nu, lambda, the operator
/// row-major, b, then x_true.
pub fn save_instance(inst: &StudentsTInstance, path: &Path) -> Result<(), ExperimentError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let (m, n) = (inst.op.rows(), inst.op.cols());
    writeln!(w, "{n}")?;
    writeln!(w, "{m}")?;
    writeln!(w, "{:?}", inst.nu)?;
    writeln!(w, "{:?}", inst.lambda)?;
    for row in inst.op.dense().rows() {
        for &v in row {
            writeln!(w, "{v:?}")?;
        }
    }
    for &v in &inst.b {
        writeln!(w, "{v:?}")?;
    }
    for &v in &inst.x_true {
        writeln!(w, "{v:?}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_instance(path: &Path) -> Result<StudentsTInstance, ExperimentError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let mut next = |what: &str| -> Result<String, ExperimentError> {
        lines
            .next()
            .ok_or_else(|| ExperimentError::Format(format!("missing {what}")))?
            .map_err(ExperimentError::Io)
    };
    let parse_usize = |s: String, what: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| ExperimentError::Format(format!("bad {what}: {e}")))
    };
    let n = parse_usize(next("n")?, "n")?;
    let m = parse_usize(next("m")?, "m")?;
    let mut parse_f64 = |what: &str| -> Result<f64, ExperimentError> {
        let s = next(what)?;
        s.trim()
            .parse::<f64>()
            .map_err(|e| ExperimentError::Format(format!("bad {what}: {e}")))
    };
    let nu = parse_f64("nu")?;
    let lambda = parse_f64("lambda")?;
    let mut a = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            a[[i, j]] = parse_f64("operator entry")?;
        }
    }
    let mut b = Array1::zeros(m);
    for i in 0..m {
        b[i] = parse_f64("measurement entry")?;
    }
    let mut x_true = Array1::zeros(n);
    for j in 0..n {
        x_true[j] = parse_f64("signal entry")?;
    }
    Ok(StudentsTInstance {
        op: MeasurementOp::from_dense(a)?,
        b,
        nu,
        lambda,
        x_true,
    })
}
