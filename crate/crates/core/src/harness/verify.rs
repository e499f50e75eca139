//! End-to-end property suite: finite-difference identities for every loss and
//! decomposition, the obstacle-sign bound, the projection contract, the ETF
//! Gram identity and a whole-network gradient check.

use std::fmt::Write as _;

use crate::collapse::{etf_gram, make_etf};
use crate::grad_theory::{decompose_h_grad, decompose_h_grad_norm, decompose_w_grad, decompose_w_grad_norm, TheoryBatch};
use crate::losses::{binary_kl_loss, binary_kl_norm_loss, ce_loss, vanilla_kd_loss, LossResult, Reduction};
use crate::model::{align_gradients, AuxHead, DualHeadNet};
use crate::numerics::{compare_gradients, dot, finite_diff_grad, norm, Matrix, Rng, FD_STEP};
use crate::Result;

/// Deliberate defects used to confirm that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Negate the analytic BinaryKL gradient before comparing it with FD.
    FlipBinaryKlGradient,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub theory_instances: usize,
    pub loss_instances: usize,
    pub obstacle_draws: usize,
    pub projection_pairs: usize,
    pub network_instances: usize,
    pub mutation: Option<Mutation>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            theory_instances: 50,
            loss_instances: 100,
            obstacle_draws: 10_000,
            projection_pairs: 100_000,
            network_instances: 20,
            mutation: None,
        }
    }
}

/// Outcome of one property. `worst_rel_err` is the largest normwise relative
/// error `max|a − b| / max|b|` seen over all cases (or the property's own
/// worst-case measure where noted in `detail`).
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub worst_rel_err: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("property,passed,cases,worst_rel_err,detail\n");
        for c in &self.checks {
            let _ = writeln!(s, "{},{},{},{:e},\"{}\"", c.name, c.passed, c.cases, c.worst_rel_err, c.detail.replace('"', "'"));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<24} cases={:<7} worst_rel_err={:.3e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.worst_rel_err,
                c.detail
            );
        }
        s
    }
}

/// Accumulates FD agreement over many cases.
#[derive(Debug, Default)]
struct FdTally {
    cases: usize,
    failures: usize,
    worst_ratio: f64,
    worst_rel: f64,
}

impl FdTally {
    fn add(&mut self, analytic: &[f64], numeric: &[f64], abs_tol: f64, rel_tol: f64) {
        let agree = compare_gradients(analytic, numeric, abs_tol, rel_tol);
        self.cases += 1;
        if !agree.passes() {
            self.failures += 1;
        }
        self.worst_ratio = self.worst_ratio.max(agree.worst_ratio);
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let rel = if agree.max_abs_err.is_nan() { f64::INFINITY } else { agree.max_abs_err / scale };
        self.worst_rel = self.worst_rel.max(rel);
    }

    fn finish(self, name: &'static str, tol: &str) -> Check {
        Check {
            name,
            passed: self.failures == 0 && self.cases > 0,
            cases: self.cases,
            worst_rel_err: self.worst_rel,
            detail: format!("{} failing cases, worst error/allowance {:.3e} at {tol}", self.failures, self.worst_ratio),
        }
    }
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| scale * rng.normal()).collect()).expect("finite normals")
}

fn uniform_matrix(rng: &mut Rng, r: usize, c: usize, half_width: f64) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.uniform_in(-half_width, half_width)).collect()).expect("finite uniforms")
}

fn random_theory_batch(rng: &mut Rng) -> Result<TheoryBatch> {
    let d = 1 + rng.below(8);
    let k = 2 + rng.below(4);
    let b = 1 + rng.below(16);
    let tau = [1.0, 2.0][rng.below(2)];
    let alpha = [0.5, 1.0, 2.0][rng.below(3)];
    let hs = random_matrix(rng, b, d, 1.0);
    let ht = random_matrix(rng, b, d, 1.0);
    let w = random_matrix(rng, d, k, 0.8);
    let labels = (0..b).map(|_| rng.below(k)).collect();
    TheoryBatch::new(hs, ht, labels, w, tau, alpha)
}

const THEORY_TOL: (f64, f64) = (1e-6, 1e-5);

/// Classifier and feature decompositions for BinaryKL (teacher logits held
/// fixed) and BinaryKL-Norm (teacher path live for `w`).
pub fn check_decompositions(instances: usize, rng: &mut Rng) -> Result<[Check; 4]> {
    let (abs, rel) = THEORY_TOL;
    let mut t = [FdTally::default(), FdTally::default(), FdTally::default(), FdTally::default()];
    for _ in 0..instances {
        let batch = random_theory_batch(rng)?;
        let (d, k, alpha, tau) = (batch.feature_dim(), batch.num_classes(), batch.alpha(), batch.tau());
        let hs = batch.student_features();
        let zt_fixed = batch.teacher_logits();
        let labels = batch.labels();

        let w_bkl = |w: &[f64]| -> f64 {
            let w = Matrix::new(d, k, w.to_vec()).unwrap();
            let zs = hs.matmul(&w).unwrap();
            ce_loss(&zs, labels, Reduction::Sum).unwrap().value + alpha * binary_kl_loss(&zs, &zt_fixed, tau, Reduction::Sum).unwrap().value
        };
        let fd = finite_diff_grad(w_bkl, batch.classifier().as_slice(), FD_STEP)?;
        t[0].add(decompose_w_grad(&batch).gradient(alpha).as_slice(), &fd, abs, rel);

        let w_norm = |w: &[f64]| -> f64 {
            let w = Matrix::new(d, k, w.to_vec()).unwrap();
            let zs = hs.matmul(&w).unwrap();
            let zt = batch.teacher_features().matmul(&w).unwrap();
            ce_loss(&zs, labels, Reduction::Sum).unwrap().value + alpha * binary_kl_norm_loss(&zs, &zt, tau, Reduction::Sum).unwrap().value
        };
        let fd = finite_diff_grad(w_norm, batch.classifier().as_slice(), FD_STEP)?;
        t[2].add(decompose_w_grad_norm(&batch).gradient(alpha).as_slice(), &fd, abs, rel);

        for i in 0..batch.batch_size() {
            let h_loss = |norm_variant: bool, h: &[f64]| -> f64 {
                let mut hs = hs.clone();
                hs.row_mut(i).copy_from_slice(h);
                let zs = hs.matmul(batch.classifier()).unwrap();
                let kd = if norm_variant {
                    binary_kl_norm_loss(&zs, &zt_fixed, tau, Reduction::Sum)
                } else {
                    binary_kl_loss(&zs, &zt_fixed, tau, Reduction::Sum)
                };
                ce_loss(&zs, labels, Reduction::Sum).unwrap().value + alpha * kd.unwrap().value
            };
            let fd = finite_diff_grad(|h| h_loss(false, h), hs.row(i), FD_STEP)?;
            t[1].add(&decompose_h_grad(&batch, i)?.gradient(alpha), &fd, abs, rel);
            let fd = finite_diff_grad(|h| h_loss(true, h), hs.row(i), FD_STEP)?;
            t[3].add(&decompose_h_grad_norm(&batch, i)?.gradient(alpha), &fd, abs, rel);
        }
    }
    let tol = "max(1e-6 abs, 1e-5 rel)";
    let [a, b, c, d] = t;
    Ok([
        a.finish("bkl_w_decomposition", tol),
        b.finish("bkl_h_decomposition", tol),
        c.finish("norm_w_decomposition", tol),
        d.finish("norm_h_decomposition", tol),
    ])
}

#[derive(Clone, Copy)]
enum LossKind {
    Ce,
    VanillaKd,
    BinaryKl,
    BinaryKlNorm,
}

fn eval_loss(kind: LossKind, zs: &Matrix, zt: &Matrix, labels: &[usize], tau: f64, red: Reduction) -> Result<LossResult> {
    match kind {
        LossKind::Ce => ce_loss(zs, labels, red),
        LossKind::VanillaKd => vanilla_kd_loss(zs, zt, tau, red),
        LossKind::BinaryKl => binary_kl_loss(zs, zt, tau, red),
        LossKind::BinaryKlNorm => binary_kl_norm_loss(zs, zt, tau, red),
    }
}

/// FD agreement of the four losses' analytic gradients, exact zeros at a
/// match, and bitwise shift invariance of BinaryKL-Norm.
pub fn check_losses(instances: usize, rng: &mut Rng, mutation: Option<Mutation>) -> Result<Vec<Check>> {
    let kinds = [
        ("ce_gradient", LossKind::Ce),
        ("vanilla_kd_gradient", LossKind::VanillaKd),
        ("binary_kl_gradient", LossKind::BinaryKl),
        ("binary_kl_norm_gradient", LossKind::BinaryKlNorm),
    ];
    let mut out = Vec::new();
    for (name, kind) in kinds {
        let mut tally = FdTally::default();
        for n in 0..instances {
            let b = 1 + rng.below(8);
            let k = 2 + rng.below(9);
            let tau = [1.0, 2.0, 4.0][rng.below(3)];
            let red = if n % 2 == 0 { Reduction::Mean } else { Reduction::Sum };
            let zs = uniform_matrix(rng, b, k, 5.0);
            let zt = uniform_matrix(rng, b, k, 5.0);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
            let mut analytic = eval_loss(kind, &zs, &zt, &labels, tau, red)?.grad;
            if matches!(kind, LossKind::BinaryKl) && mutation == Some(Mutation::FlipBinaryKlGradient) {
                analytic = analytic.scale(-1.0);
            }
            let f = |z: &[f64]| eval_loss(kind, &Matrix::new(b, k, z.to_vec()).unwrap(), &zt, &labels, tau, red).unwrap().value;
            let fd = finite_diff_grad(f, zs.as_slice(), FD_STEP)?;
            tally.add(analytic.as_slice(), &fd, THEORY_TOL.0, THEORY_TOL.1);
        }
        out.push(tally.finish(name, "max(1e-6 abs, 1e-5 rel)"));
    }

    let mut nonzero = 0;
    for _ in 0..instances {
        let b = 1 + rng.below(8);
        let k = 2 + rng.below(5);
        let z = random_matrix(rng, b, k, 5.0);
        for kind in [LossKind::BinaryKl, LossKind::BinaryKlNorm] {
            let r = eval_loss(kind, &z, &z, &[], 2.0, Reduction::Sum)?;
            if r.value != 0.0 || r.grad.as_slice().iter().any(|&g| g != 0.0) {
                nonzero += 1;
            }
        }
    }
    out.push(Check {
        name: "kl_zero_at_match",
        passed: nonzero == 0,
        cases: 2 * instances,
        worst_rel_err: 0.0,
        detail: format!("{nonzero} cases with a nonzero value or gradient at z_S = z_T"),
    });

    // Shifts are exact on a dyadic grid, so the bitwise claim is testable.
    let mut mismatches = 0;
    for _ in 0..instances {
        let b = 1 + rng.below(8);
        let k = 2 + rng.below(5);
        let grid = |rng: &mut Rng| Matrix::new(b, k, (0..b * k).map(|_| (rng.below(4097) as f64 - 2048.0) / 256.0).collect()).unwrap();
        let zs = grid(rng);
        let zt = grid(rng);
        let c = rng.below(201) as f64 - 100.0;
        let base = binary_kl_norm_loss(&zs, &zt, 2.0, Reduction::Mean)?;
        let shifted = binary_kl_norm_loss(&zs.map(|v| v + c), &zt.map(|v| v + c), 2.0, Reduction::Mean)?;
        if base.value.to_bits() != shifted.value.to_bits() || base.grad != shifted.grad {
            mismatches += 1;
        }
    }
    out.push(Check {
        name: "norm_shift_invariance",
        passed: mismatches == 0,
        cases: instances,
        worst_rel_err: 0.0,
        detail: format!("{mismatches} shifts changed the value or gradient bits"),
    });
    Ok(out)
}

/// Every obstacle summand has a non-positive inner product with its `w_k`.
pub fn check_obstacle_sign(draws: usize, rng: &mut Rng) -> Result<Check> {
    let mut worst = f64::NEG_INFINITY;
    let mut summands = 0;
    for _ in 0..draws {
        let d = 1 + rng.below(8);
        let k = 2 + rng.below(4);
        let b = 1 + rng.below(4);
        let scale = [0.1, 1.0, 10.0][rng.below(3)];
        let tau = [0.5, 1.0, 2.0, 4.0][rng.below(4)];
        let batch = TheoryBatch::new(
            random_matrix(rng, b, d, scale),
            random_matrix(rng, b, d, scale),
            (0..b).map(|_| rng.below(k)).collect(),
            random_matrix(rng, d, k, 1.0),
            tau,
            1.0,
        )?;
        let dec = decompose_w_grad_norm(&batch);
        summands += dec.classes.iter().map(|c| c.summands.len()).sum::<usize>();
        worst = worst.max(dec.max_summand_alignment(batch.classifier()));
    }
    Ok(Check {
        name: "obstacle_sign",
        passed: worst <= 1e-12,
        cases: draws,
        worst_rel_err: 0.0,
        detail: format!("max summand·w_k = {worst:.3e} over {summands} summands (limit 1e-12)"),
    })
}

/// Post-projection non-conflict for standard-normal pairs, the worked example
/// and full opposition.
pub fn check_projection(pairs: usize, rng: &mut Rng) -> Result<Check> {
    let mut worst = f64::INFINITY;
    let mut conflicted = 0;
    for _ in 0..pairs {
        let n = 1 + rng.below(1000);
        let g_kd: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let g_ce: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        if dot(&g_kd, &g_ce) < 0.0 {
            conflicted += 1;
        }
        let aligned = align_gradients(&g_kd, &g_ce)?;
        worst = worst.min(dot(&aligned, &g_ce));
    }
    let example = align_gradients(&[-1.0, 1.0], &[1.0, 0.0])? == vec![0.0, 1.0];
    let g: Vec<f64> = (0..17).map(|_| rng.normal()).collect();
    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
    let opposed = align_gradients(&neg, &g)?;
    let opposition = norm(&opposed) <= 1e-15;
    Ok(Check {
        name: "projection_contract",
        passed: worst >= -1e-12 && example && opposition,
        cases: pairs,
        worst_rel_err: 0.0,
        detail: format!(
            "min g'·g_ce = {worst:.3e} ({conflicted} conflicting pairs), worked example {}, full opposition {}",
            if example { "ok" } else { "WRONG" },
            if opposition { "ok" } else { "WRONG" }
        ),
    })
}

/// Gram identity and equal pairwise cosines for `K ∈ [2,16]`, `d ∈ [K, K+8]`.
pub fn check_etf(rng: &mut Rng) -> Result<Check> {
    let (mut gram_err, mut cos_err, mut cases) = (0.0f64, 0.0f64, 0);
    for k in 2..=16 {
        for d in k..=k + 8 {
            let f = make_etf(d, k, rng)?;
            gram_err = gram_err.max(f.m.t_matmul(&f.m)?.max_abs_diff(&etf_gram(k))?);
            let target = -1.0 / (k as f64 - 1.0);
            for i in 0..k {
                for j in i + 1..k {
                    let (a, b) = (f.vertex(i), f.vertex(j));
                    cos_err = cos_err.max((dot(&a, &b) / (norm(&a) * norm(&b)) - target).abs());
                }
            }
            cases += 1;
        }
    }
    Ok(Check {
        name: "etf_gram",
        passed: gram_err <= 1e-10 && cos_err <= 1e-10,
        cases,
        worst_rel_err: gram_err.max(cos_err),
        detail: format!("max Gram error {gram_err:.3e}, max cosine error {cos_err:.3e} (limit 1e-10)"),
    })
}

/// Whole dual-head network against FD of `L_CE(main) + α L_BinaryKL-Norm(aux)`.
/// Instances with a ReLU pre-activation within `1e-6` of the kink are redrawn.
pub fn check_network(instances: usize, rng: &mut Rng) -> Result<Check> {
    let mut tally = FdTally::default();
    let mut redrawn = 0;
    while tally.cases < instances {
        let dim = 1 + rng.below(10);
        let hidden = 1 + rng.below(16);
        let feat = 1 + rng.below(8);
        let k = 2 + rng.below(4);
        let aux = if rng.below(2) == 0 { AuxHead::Linear } else { AuxHead::Mlp { hidden: 1 + rng.below(16) } };
        let net = DualHeadNet::init(&[dim, hidden, feat], k, Some(aux), rng)?;
        let b = 1 + rng.below(8);
        let x = random_matrix(rng, b, dim, 1.0);
        let zt = random_matrix(rng, b, k, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.below(k)).collect();
        let alpha = [0.5, 1.0, 2.0][rng.below(3)];

        let fwd = net.forward(&x)?;
        if near_kink(&net, &x)? {
            redrawn += 1;
            continue;
        }
        let ce = ce_loss(&fwd.main_logits, &labels, Reduction::Mean)?;
        let kd = binary_kl_norm_loss(fwd.aux_logits.as_ref().unwrap(), &zt, 2.0, Reduction::Mean)?;
        let back = net.backward(&fwd.cache, &ce.grad, Some(&kd.grad.scale(alpha)))?;
        let mut backbone = back.backbone_from_main.clone();
        backbone.add_scaled(1.0, back.backbone_from_aux.as_ref().unwrap())?;
        let mut analytic = backbone.flat();
        analytic.extend(back.main_head.flat());
        analytic.extend(back.aux_head.as_ref().unwrap().flat());

        let total = |p: &[f64]| {
            let mut n = net.clone();
            n.set_params_flat(p).unwrap();
            let f = n.forward(&x).unwrap();
            ce_loss(&f.main_logits, &labels, Reduction::Mean).unwrap().value
                + alpha * binary_kl_norm_loss(f.aux_logits.as_ref().unwrap(), &zt, 2.0, Reduction::Mean).unwrap().value
        };
        let fd = finite_diff_grad(total, &net.params_flat(), FD_STEP)?;
        tally.add(&analytic, &fd, 1e-5, 1e-4);
    }
    let mut c = tally.finish("network_gradient", "max(1e-5 abs, 1e-4 rel)");
    c.detail.push_str(&format!(", {redrawn} instances redrawn near a ReLU kink"));
    Ok(c)
}

fn near_kink(net: &DualHeadNet, x: &Matrix) -> Result<bool> {
    let f = net.forward(x)?;
    let (_, bb) = net.backbone().forward(x)?;
    let mut pre: Vec<&Matrix> = bb.preacts().iter().collect();
    let aux_cache = net.aux_head().map(|h| h.forward(&f.features)).transpose()?;
    if let Some((_, c)) = &aux_cache {
        let n = c.preacts().len();
        pre.extend(c.preacts()[..n - 1].iter());
    }
    Ok(pre.iter().any(|m| m.as_slice().iter().any(|v| v.abs() < 1e-6)))
}

/// Run every property and collect the results.
pub fn verify(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut rng = Rng::new(opts.seed);
    let mut checks = Vec::new();
    checks.extend(check_decompositions(opts.theory_instances, &mut rng)?);
    checks.extend(check_losses(opts.loss_instances, &mut rng, opts.mutation)?);
    checks.push(check_obstacle_sign(opts.obstacle_draws, &mut rng)?);
    checks.push(check_projection(opts.projection_pairs, &mut rng)?);
    checks.push(check_etf(&mut rng)?);
    checks.push(check_network(opts.network_instances, &mut rng)?);
    Ok(VerifyReport { checks })
}
