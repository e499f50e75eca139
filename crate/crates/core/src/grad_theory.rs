//! Pull/push decompositions of classifier and feature gradients.
//!
//! Everything here works under the shared-classifier idealisation: student
//! and teacher features are both scored through the same linear classifier
//! `w ∈ R^{d×K}`, so `z_S = h_S·w` and `z_T = h_T·w`. Reductions are batch
//! sums.
//!
//! Two conventions differ between the BinaryKL and BinaryKL-Norm
//! classifier decompositions, and the oracles in the tests follow them:
//!
//! * BinaryKL (`decompose_w_grad`): the teacher's sigmoid targets
//!   `q_k(h_T)` are constants, i.e. only the student path depends on `w`.
//! * BinaryKL-Norm (`decompose_w_grad_norm`): the loss depends on
//!   `(h_S − h_T)ᵀ w_k`, so the teacher path is differentiated as well; the
//!   obstacle summands are multiples of `h_S − h_T`.
//!
//! Feature gradients are unaffected (the teacher features do not move).

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, sigmoid_scalar, softmax_rows, Matrix};

/// A batch for the theory computations.
#[derive(Debug, Clone)]
pub struct TheoryBatch {
    student_features: Matrix,
    teacher_features: Matrix,
    labels: Vec<usize>,
    classifier: Matrix,
    tau: f64,
    alpha: f64,
}

impl TheoryBatch {
    pub fn new(
        student_features: Matrix,
        teacher_features: Matrix,
        labels: Vec<usize>,
        classifier: Matrix,
        tau: f64,
        alpha: f64,
    ) -> Result<Self> {
        student_features.ensure_same_shape(&teacher_features, "TheoryBatch")?;
        let (b, d) = student_features.shape();
        if b == 0 {
            return Err(Error::InvalidArgument("TheoryBatch needs at least one sample".into()));
        }
        if labels.len() != b {
            return Err(Error::shape("TheoryBatch", format!("{b} labels"), format!("{}", labels.len())));
        }
        if classifier.rows() != d {
            return Err(Error::shape(
                "TheoryBatch",
                format!("classifier with {d} rows"),
                format!("{}x{}", classifier.rows(), classifier.cols()),
            ));
        }
        let k = classifier.cols();
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::LabelOutOfRange { index: i, label: y, classes: k });
        }
        if !(tau > 0.0) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("tau {tau} must be > 0, alpha {alpha} finite")));
        }
        student_features.check_finite("TheoryBatch")?;
        teacher_features.check_finite("TheoryBatch")?;
        classifier.check_finite("TheoryBatch")?;
        Ok(TheoryBatch { student_features, teacher_features, labels, classifier, tau, alpha })
    }

    pub fn student_features(&self) -> &Matrix {
        &self.student_features
    }

    pub fn teacher_features(&self) -> &Matrix {
        &self.teacher_features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classifier(&self) -> &Matrix {
        &self.classifier
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.cols()
    }

    /// `n_k` for every class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn student_logits(&self) -> Matrix {
        self.student_features.matmul(&self.classifier).expect("validated shapes")
    }

    pub fn teacher_logits(&self) -> Matrix {
        self.teacher_features.matmul(&self.classifier).expect("validated shapes")
    }

    fn class_vector(&self, k: usize) -> Vec<f64> {
        self.classifier.column(k)
    }

    fn probabilities(&self) -> Probabilities {
        let zs = self.student_logits();
        let zt = self.teacher_logits();
        let tau = self.tau;
        Probabilities {
            p: softmax_rows(&zs).expect("finite logits"),
            qs: zs.map(|v| sigmoid_scalar(v / tau)),
            qt: zt.map(|v| sigmoid_scalar(v / tau)),
            diff_sigmoid: zs.zip_map(&zt, |s, t| sigmoid_scalar((s - t) / tau)).expect("same shape"),
        }
    }
}

struct Probabilities {
    /// softmax of student logits, `p_k(h_S)`
    p: Matrix,
    /// `q_k(h_S)`
    qs: Matrix,
    /// `q_k(h_T)`
    qt: Matrix,
    /// `w_k(h_S, h_T) = σ((h_S − h_T)ᵀ w_k / τ)`
    diff_sigmoid: Matrix,
}

/// The four classifier-gradient terms for one class `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct WClassTerms {
    pub pull_ce: Vec<f64>,
    pub pull_bkl: Vec<f64>,
    pub push_ce: Vec<f64>,
    pub push_bkl: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WGradDecomposition {
    pub classes: Vec<WClassTerms>,
}

impl WGradDecomposition {
    /// Reassembles `∂L_overall/∂w` (d×K) as
    /// `−(pull_ce + α pull_bkl) − (push_ce + α push_bkl)` per column.
    pub fn gradient(&self, alpha: f64) -> Matrix {
        let d = self.classes.first().map_or(0, |c| c.pull_ce.len());
        let mut g = Matrix::zeros(d, self.classes.len());
        for (k, t) in self.classes.iter().enumerate() {
            for r in 0..d {
                g[(r, k)] = -(t.pull_ce[r] + alpha * t.pull_bkl[r]) - (t.push_ce[r] + alpha * t.push_bkl[r]);
            }
        }
        g
    }
}

/// The four feature-gradient terms for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HGradDecomposition {
    pub sample: usize,
    pub label: usize,
    pub pull_ce: Vec<f64>,
    pub pull_bkl: Vec<f64>,
    pub push_ce: Vec<f64>,
    pub push_bkl: Vec<f64>,
}

impl HGradDecomposition {
    /// `∂L_overall/∂h` for this sample.
    pub fn gradient(&self, alpha: f64) -> Vec<f64> {
        (0..self.pull_ce.len())
            .map(|r| -(self.pull_ce[r] + alpha * self.pull_bkl[r]) - (self.push_ce[r] + alpha * self.push_bkl[r]))
            .collect()
    }
}

/// One summand of the obstacle term: `(½ − w_k(h_S,j, h_T,j)) (h_S,j − h_T,j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleSummand {
    pub sample: usize,
    pub coefficient: f64,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleClassTerms {
    pub pull_ce: Vec<f64>,
    pub push_ce: Vec<f64>,
    /// `τ Σ_j summand_j`
    pub obstacle: Vec<f64>,
    pub summands: Vec<ObstacleSummand>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleDecomposition {
    pub classes: Vec<ObstacleClassTerms>,
}

impl ObstacleDecomposition {
    /// `∂(L_CE + α L_BinaryKL-Norm)/∂w` as `−(pull_ce + push_ce) − α·obstacle`.
    pub fn gradient(&self, alpha: f64) -> Matrix {
        let d = self.classes.first().map_or(0, |c| c.pull_ce.len());
        let mut g = Matrix::zeros(d, self.classes.len());
        for (k, t) in self.classes.iter().enumerate() {
            for r in 0..d {
                g[(r, k)] = -(t.pull_ce[r] + t.push_ce[r]) - alpha * t.obstacle[r];
            }
        }
        g
    }

    /// Largest `summandᵀ w_k` over all classes and samples.
    pub fn max_summand_alignment(&self, classifier: &Matrix) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (k, t) in self.classes.iter().enumerate() {
            let wk = classifier.column(k);
            for s in &t.summands {
                worst = worst.max(dot(&s.vector, &wk));
            }
        }
        worst
    }
}

fn axpy(acc: &mut [f64], s: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += s * v;
    }
}

/// Classifier-gradient decomposition of `L_CE + α L_BinaryKL`.
pub fn decompose_w_grad(batch: &TheoryBatch) -> WGradDecomposition {
    let pr = batch.probabilities();
    let d = batch.feature_dim();
    let tau = batch.tau;
    let classes = (0..batch.num_classes())
        .map(|k| {
            let mut t = WClassTerms { pull_ce: vec![0.0; d], pull_bkl: vec![0.0; d], push_ce: vec![0.0; d], push_bkl: vec![0.0; d] };
            for (j, &c) in batch.labels.iter().enumerate() {
                let h = batch.student_features.row(j);
                if c == k {
                    axpy(&mut t.pull_ce, 1.0 - pr.p[(j, k)], h);
                    axpy(&mut t.pull_bkl, tau * (pr.qt[(j, k)] - pr.qs[(j, k)]), h);
                } else {
                    axpy(&mut t.push_ce, -pr.p[(j, k)], h);
                    axpy(&mut t.push_bkl, -tau * (pr.qs[(j, k)] - pr.qt[(j, k)]), h);
                }
            }
            t
        })
        .collect();
    WGradDecomposition { classes }
}

fn check_sample(batch: &TheoryBatch, sample: usize) -> Result<()> {
    if sample >= batch.batch_size() {
        return Err(Error::InvalidArgument(format!("sample index {sample} out of range for batch of {}", batch.batch_size())));
    }
    Ok(())
}

/// Feature-gradient decomposition of `L_CE + α L_BinaryKL` for one sample.
pub fn decompose_h_grad(batch: &TheoryBatch, sample: usize) -> Result<HGradDecomposition> {
    check_sample(batch, sample)?;
    let pr = batch.probabilities();
    let d = batch.feature_dim();
    let tau = batch.tau;
    let c = batch.labels[sample];
    let wc = batch.class_vector(c);
    let mut out = HGradDecomposition {
        sample,
        label: c,
        pull_ce: wc.iter().map(|v| (1.0 - pr.p[(sample, c)]) * v).collect(),
        pull_bkl: wc.iter().map(|v| tau * (pr.qt[(sample, c)] - pr.qs[(sample, c)]) * v).collect(),
        push_ce: vec![0.0; d],
        push_bkl: vec![0.0; d],
    };
    for k in (0..batch.num_classes()).filter(|&k| k != c) {
        let wk = batch.class_vector(k);
        axpy(&mut out.push_ce, -pr.p[(sample, k)], &wk);
        axpy(&mut out.push_bkl, -tau * (pr.qs[(sample, k)] - pr.qt[(sample, k)]), &wk);
    }
    Ok(out)
}

/// Classifier-gradient decomposition of `L_CE + α L_BinaryKL-Norm`: the CE
/// pull/push terms plus the obstacle term.
pub fn decompose_w_grad_norm(batch: &TheoryBatch) -> ObstacleDecomposition {
    let pr = batch.probabilities();
    let ce = decompose_w_grad(batch);
    let d = batch.feature_dim();
    let tau = batch.tau;
    let classes = ce
        .classes
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let mut obstacle = vec![0.0; d];
            let summands: Vec<ObstacleSummand> = (0..batch.batch_size())
                .map(|j| {
                    let coefficient = 0.5 - pr.diff_sigmoid[(j, k)];
                    let vector: Vec<f64> = batch
                        .student_features
                        .row(j)
                        .iter()
                        .zip(batch.teacher_features.row(j))
                        .map(|(s, t)| coefficient * (s - t))
                        .collect();
                    axpy(&mut obstacle, tau, &vector);
                    ObstacleSummand { sample: j, coefficient, vector }
                })
                .collect();
            ObstacleClassTerms { pull_ce: t.pull_ce, push_ce: t.push_ce, obstacle, summands }
        })
        .collect();
    ObstacleDecomposition { classes }
}

/// Feature-gradient decomposition of `L_CE + α L_BinaryKL-Norm` for one
/// sample. The BinaryKL-Norm push term is
/// `−τ Σ_{k≠c} (w_k(h_S,h_T) − ½) w_k`, which is what the negative gradient
/// actually contains (the finite-difference oracle confirms the sign).
pub fn decompose_h_grad_norm(batch: &TheoryBatch, sample: usize) -> Result<HGradDecomposition> {
    check_sample(batch, sample)?;
    let pr = batch.probabilities();
    let d = batch.feature_dim();
    let tau = batch.tau;
    let c = batch.labels[sample];
    let wc = batch.class_vector(c);
    let mut out = HGradDecomposition {
        sample,
        label: c,
        pull_ce: wc.iter().map(|v| (1.0 - pr.p[(sample, c)]) * v).collect(),
        pull_bkl: wc.iter().map(|v| tau * (0.5 - pr.diff_sigmoid[(sample, c)]) * v).collect(),
        push_ce: vec![0.0; d],
        push_bkl: vec![0.0; d],
    };
    for k in (0..batch.num_classes()).filter(|&k| k != c) {
        let wk = batch.class_vector(k);
        axpy(&mut out.push_ce, -pr.p[(sample, k)], &wk);
        axpy(&mut out.push_bkl, -tau * (pr.diff_sigmoid[(sample, k)] - 0.5), &wk);
    }
    Ok(out)
}

/// `[(½ − w_k(h_S, h_T)) (h_S − h_T)]ᵀ w_k`, never positive.
pub fn obstacle_margin(h_s: &[f64], h_t: &[f64], w_k: &[f64], tau: f64) -> f64 {
    let diff: Vec<f64> = h_s.iter().zip(h_t).map(|(s, t)| s - t).collect();
    let u = dot(&diff, w_k);
    (0.5 - sigmoid_scalar(u / tau)) * u
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TermRole {
    Pull,
    Push,
}

impl TermRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TermRole::Pull => "pull",
            TermRole::Push => "push",
        }
    }
}

/// Coefficients of one `(sample, class)` pair in the classifier decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct SignEntry {
    pub sample: usize,
    pub class: usize,
    pub role: TermRole,
    pub ce_coefficient: f64,
    pub bkl_coefficient: f64,
    /// BinaryKL coefficient strictly opposes the CE coefficient's sign.
    pub conflict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignReport {
    pub entries: Vec<SignEntry>,
    pub pull_conflicts: usize,
    pub push_conflicts: usize,
}

impl SignReport {
    pub fn conflicts(&self) -> usize {
        self.pull_conflicts + self.push_conflicts
    }

    pub fn conflict_fraction(&self) -> f64 {
        if self.entries.is_empty() {
            0.0
        } else {
            self.conflicts() as f64 / self.entries.len() as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,class,role,ce_coefficient,bkl_coefficient,conflict\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.sample,
                e.class,
                e.role.as_str(),
                e.ce_coefficient,
                e.bkl_coefficient,
                u8::from(e.conflict)
            );
        }
        out
    }
}

/// Sign table of the classifier decomposition for a `TheoryBatch`.
pub fn coefficient_sign_report(batch: &TheoryBatch) -> SignReport {
    coefficient_sign_report_from_logits(&batch.student_logits(), &batch.teacher_logits(), &batch.labels, batch.tau)
        .expect("validated batch")
}

/// Same table computed directly from logits. The coefficients depend on the
/// features only through the logits, so this also serves real networks
/// whose teacher features live in a different space.
pub fn coefficient_sign_report_from_logits(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    labels: &[usize],
    tau: f64,
) -> Result<SignReport> {
    student_logits.ensure_same_shape(teacher_logits, "coefficient_sign_report")?;
    let (b, k) = student_logits.shape();
    if labels.len() != b {
        return Err(Error::shape("coefficient_sign_report", format!("{b} labels"), format!("{}", labels.len())));
    }
    let p = softmax_rows(student_logits)?;
    let mut report = SignReport { entries: Vec::with_capacity(b * k), pull_conflicts: 0, push_conflicts: 0 };
    for (j, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::LabelOutOfRange { index: j, label: c, classes: k });
        }
        for class in 0..k {
            let qs = sigmoid_scalar(student_logits[(j, class)] / tau);
            let qt = sigmoid_scalar(teacher_logits[(j, class)] / tau);
            let entry = if class == c {
                let bkl = tau * (qt - qs);
                SignEntry {
                    sample: j,
                    class,
                    role: TermRole::Pull,
                    ce_coefficient: 1.0 - p[(j, class)],
                    bkl_coefficient: bkl,
                    conflict: bkl < 0.0,
                }
            } else {
                let bkl = -tau * (qs - qt);
                SignEntry {
                    sample: j,
                    class,
                    role: TermRole::Push,
                    ce_coefficient: -p[(j, class)],
                    bkl_coefficient: bkl,
                    conflict: bkl > 0.0,
                }
            };
            if entry.conflict {
                match entry.role {
                    TermRole::Pull => report.pull_conflicts += 1,
                    TermRole::Push => report.push_conflicts += 1,
                }
            }
            report.entries.push(entry);
        }
    }
    Ok(report)
}

/// One row per (class, sample, term) of the BinaryKL classifier
/// decomposition: `term,class,sample,coefficient,norm`, where `norm` is the
/// length of `coefficient · h_S,sample`.
pub fn decomposition_csv(batch: &TheoryBatch) -> String {
    let report = coefficient_sign_report(batch);
    let norms: Vec<f64> = (0..batch.batch_size()).map(|j| norm(batch.student_features.row(j))).collect();
    let mut out = String::from("term,class,sample,coefficient,norm\n");
    for e in &report.entries {
        let role = e.role.as_str();
        for (suffix, coef) in [("ce", e.ce_coefficient), ("bkl", e.bkl_coefficient)] {
            let _ = writeln!(out, "{role}_{suffix},{},{},{},{}", e.class, e.sample, coef, coef.abs() * norms[e.sample]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{binary_kl_loss, binary_kl_norm_loss, ce_loss, Reduction};
    use crate::numerics::{compare_gradients, finite_diff_grad, Rng, FD_STEP};

    fn random(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).unwrap()
    }

    fn random_batch(seed: u64, b: usize, d: usize, k: usize, tau: f64, alpha: f64) -> TheoryBatch {
        let mut rng = Rng::new(seed);
        let hs = random(&mut rng, b, d, 1.0);
        let ht = random(&mut rng, b, d, 1.0);
        let w = random(&mut rng, d, k, 0.7);
        let labels = (0..b).map(|_| rng.below(k)).collect();
        TheoryBatch::new(hs, ht, labels, w, tau, alpha).unwrap()
    }

    // Oracle: L_CE(h_S w) + α L_BKL(h_S w, fixed teacher logits), batch sum.
    fn overall_bkl_w(batch: &TheoryBatch, w_flat: &[f64]) -> f64 {
        let (d, k) = (batch.feature_dim(), batch.num_classes());
        let w = Matrix::new(d, k, w_flat.to_vec()).unwrap();
        let zs = batch.student_features().matmul(&w).unwrap();
        let zt = batch.teacher_logits();
        ce_loss(&zs, batch.labels(), Reduction::Sum).unwrap().value
            + batch.alpha() * binary_kl_loss(&zs, &zt, batch.tau(), Reduction::Sum).unwrap().value
    }

    #[test]
    fn w_decomposition_matches_fd() {
        let batch = random_batch(1, 12, 6, 4, 2.0, 1.0);
        let dec = decompose_w_grad(&batch);
        let fd = finite_diff_grad(|w| overall_bkl_w(&batch, w), batch.classifier().as_slice(), FD_STEP).unwrap();
        let agree = compare_gradients(dec.gradient(1.0).as_slice(), &fd, 1e-6, 1e-6);
        assert!(agree.passes(), "{agree:?}");
    }

    #[test]
    fn w_decomposition_vanishes_for_identical_features() {
        let mut rng = Rng::new(3);
        let h = random(&mut rng, 5, 3, 1.0);
        let w = random(&mut rng, 3, 3, 1.0);
        let batch = TheoryBatch::new(h.clone(), h, vec![0, 1, 2, 0, 1], w, 2.0, 1.0).unwrap();
        for t in decompose_w_grad(&batch).classes {
            assert!(t.pull_bkl.iter().chain(&t.push_bkl).all(|&v| v == 0.0));
        }
        let zero =
            TheoryBatch::new(Matrix::zeros(4, 3), Matrix::zeros(4, 3), vec![0, 1, 2, 2], random(&mut rng, 3, 3, 1.0), 2.0, 1.0).unwrap();
        for t in decompose_w_grad(&zero).classes {
            assert!([t.pull_ce, t.pull_bkl, t.push_ce, t.push_bkl].iter().flatten().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn h_decomposition_matches_fd() {
        let batch = random_batch(2, 9, 5, 4, 1.0, 2.0);
        for i in [0, 4, 8] {
            let dec = decompose_h_grad(&batch, i).unwrap();
            let f = |h: &[f64]| {
                let mut hs = batch.student_features().clone();
                hs.row_mut(i).copy_from_slice(h);
                let zs = hs.matmul(batch.classifier()).unwrap();
                ce_loss(&zs, batch.labels(), Reduction::Sum).unwrap().value
                    + batch.alpha() * binary_kl_loss(&zs, &batch.teacher_logits(), batch.tau(), Reduction::Sum).unwrap().value
            };
            let fd = finite_diff_grad(f, batch.student_features().row(i), FD_STEP).unwrap();
            let agree = compare_gradients(&dec.gradient(2.0), &fd, 1e-6, 1e-6);
            assert!(agree.passes(), "sample {i}: {agree:?}");
        }
        assert!(decompose_h_grad(&batch, 9).is_err());
    }

    #[test]
    fn single_class_has_empty_push() {
        let mut rng = Rng::new(4);
        let batch =
            TheoryBatch::new(random(&mut rng, 3, 2, 1.0), random(&mut rng, 3, 2, 1.0), vec![0; 3], random(&mut rng, 2, 1, 1.0), 2.0, 1.0)
                .unwrap();
        for dec in [decompose_h_grad(&batch, 1).unwrap(), decompose_h_grad_norm(&batch, 1).unwrap()] {
            assert!(dec.push_ce.iter().chain(&dec.push_bkl).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn obstacle_matches_fd_with_live_teacher_path() {
        let batch = random_batch(5, 10, 6, 4, 2.0, 0.5);
        let dec = decompose_w_grad_norm(&batch);
        let f = |w_flat: &[f64]| {
            let w = Matrix::new(6, 4, w_flat.to_vec()).unwrap();
            let zs = batch.student_features().matmul(&w).unwrap();
            let zt = batch.teacher_features().matmul(&w).unwrap();
            ce_loss(&zs, batch.labels(), Reduction::Sum).unwrap().value
                + 0.5 * binary_kl_norm_loss(&zs, &zt, 2.0, Reduction::Sum).unwrap().value
        };
        let fd = finite_diff_grad(f, batch.classifier().as_slice(), FD_STEP).unwrap();
        let agree = compare_gradients(dec.gradient(0.5).as_slice(), &fd, 1e-6, 1e-6);
        assert!(agree.passes(), "{agree:?}");
        assert!(dec.max_summand_alignment(batch.classifier()) <= 1e-12);
    }

    #[test]
    fn obstacle_zero_for_identical_features_and_opposes_w() {
        let mut rng = Rng::new(6);
        let h = random(&mut rng, 4, 3, 1.0);
        let w = random(&mut rng, 3, 2, 1.0);
        let batch = TheoryBatch::new(h.clone(), h, vec![0, 1, 0, 1], w.clone(), 2.0, 1.0).unwrap();
        for t in decompose_w_grad_norm(&batch).classes {
            assert!(t.obstacle.iter().all(|&v| v == 0.0));
        }

        // single sample whose difference has positive projection on w_0
        let w0 = w.column(0);
        let ht = vec![0.0; 3];
        let hs: Vec<f64> = w0.iter().map(|v| 0.5 * v).collect();
        let batch = TheoryBatch::new(Matrix::new(1, 3, hs).unwrap(), Matrix::new(1, 3, ht).unwrap(), vec![1], w, 2.0, 1.0).unwrap();
        let dec = decompose_w_grad_norm(&batch);
        assert!(dot(&dec.classes[0].obstacle, &w0) < 0.0);
    }

    #[test]
    fn h_norm_decomposition_matches_fd_and_vanishes() {
        let batch = random_batch(7, 8, 4, 5, 1.0, 1.0);
        for i in 0..8 {
            let dec = decompose_h_grad_norm(&batch, i).unwrap();
            let f = |h: &[f64]| {
                let mut hs = batch.student_features().clone();
                hs.row_mut(i).copy_from_slice(h);
                let zs = hs.matmul(batch.classifier()).unwrap();
                ce_loss(&zs, batch.labels(), Reduction::Sum).unwrap().value
                    + binary_kl_norm_loss(&zs, &batch.teacher_logits(), 1.0, Reduction::Sum).unwrap().value
            };
            let fd = finite_diff_grad(f, batch.student_features().row(i), FD_STEP).unwrap();
            let agree = compare_gradients(&dec.gradient(1.0), &fd, 1e-6, 1e-6);
            assert!(agree.passes(), "sample {i}: {agree:?}");
        }

        let same = TheoryBatch::new(
            batch.student_features().clone(),
            batch.student_features().clone(),
            batch.labels().to_vec(),
            batch.classifier().clone(),
            1.0,
            1.0,
        )
        .unwrap();
        let dec = decompose_h_grad_norm(&same, 3).unwrap();
        assert!(dec.pull_bkl.iter().chain(&dec.push_bkl).all(|&v| v == 0.0));
    }

    #[test]
    fn obstacle_margin_cases() {
        assert_eq!(obstacle_margin(&[1.0, 2.0], &[1.0, 2.0], &[0.3, -0.2], 2.0), 0.0);
        // u = (h_S − h_T)ᵀ w = 1.5 > 0: (½ − σ(0.75)) · 1.5
        let m = obstacle_margin(&[2.0, 0.0], &[0.5, 0.0], &[1.0, 4.0], 2.0);
        let expected = (0.5 - 1.0 / (1.0 + (-0.75f64).exp())) * 1.5;
        assert!(m < 0.0 && (m - expected).abs() < 1e-15);
    }

    #[test]
    fn sign_report_cases() {
        let mut rng = Rng::new(9);
        let h = random(&mut rng, 6, 3, 1.0);
        let w = random(&mut rng, 3, 4, 1.0);
        let same = TheoryBatch::new(h.clone(), h, vec![0, 1, 2, 3, 0, 1], w, 2.0, 1.0).unwrap();
        let r = coefficient_sign_report(&same);
        assert_eq!(r.conflicts(), 0);
        assert!(r.entries.iter().all(|e| e.bkl_coefficient == 0.0));
        assert_eq!(r.entries.len(), 24);

        // teacher more confident on the true class → positive pull, no conflict
        let zs = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let zt = Matrix::from_rows(&[[3.0, 0.0]]).unwrap();
        let r = coefficient_sign_report_from_logits(&zs, &zt, &[0], 2.0).unwrap();
        let pull = &r.entries[0];
        assert_eq!(pull.role, TermRole::Pull);
        assert!(pull.bkl_coefficient > 0.0 && !pull.conflict);
    }

    #[test]
    fn sign_report_conflicts_match_recount() {
        let batch = random_batch(10, 16, 5, 4, 2.0, 1.0);
        let r = coefficient_sign_report(&batch);
        // recount from raw logits
        let zs = batch.student_logits();
        let zt = batch.teacher_logits();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut count = 0;
        for j in 0..16 {
            for k in 0..4 {
                let delta = sig(zt[(j, k)] / 2.0) - sig(zs[(j, k)] / 2.0);
                if (k == batch.labels()[j] && delta < 0.0) || (k != batch.labels()[j] && delta > 0.0) {
                    count += 1;
                }
            }
        }
        assert_eq!(r.conflicts(), count);
        assert!(count > 0);
    }

    #[test]
    fn csv_has_two_rows_per_entry() {
        let batch = random_batch(11, 3, 2, 2, 2.0, 1.0);
        let csv = decomposition_csv(&batch);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "term,class,sample,coefficient,norm");
        assert_eq!(lines.len(), 1 + 3 * 2 * 2);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 5));
    }

    #[test]
    fn batch_validation() {
        let m = Matrix::zeros(2, 3);
        assert!(TheoryBatch::new(m.clone(), m.clone(), vec![0], Matrix::zeros(3, 2), 1.0, 1.0).is_err());
        assert!(TheoryBatch::new(m.clone(), m.clone(), vec![0, 2], Matrix::zeros(3, 2), 1.0, 1.0).is_err());
        assert!(TheoryBatch::new(m.clone(), m.clone(), vec![0, 1], Matrix::zeros(2, 2), 1.0, 1.0).is_err());
        assert!(TheoryBatch::new(m.clone(), m, vec![0, 1], Matrix::zeros(3, 2), 0.0, 1.0).is_err());
    }
}
