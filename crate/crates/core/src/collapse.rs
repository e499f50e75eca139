//! Simplex equiangular tight frames, neural-collapse metrics and the
//! teacher/student logit correlation difference.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, norm, Matrix, Rng};

/// Columns shorter than this are treated as degenerate directions.
const MIN_NORM: f64 = 1e-12;

/// `M = √(K/(K−1)) · U · (I − 11ᵀ/K)` with `U` a `d×K` partial orthogonal
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EtfFrame {
    pub m: Matrix,
    pub u: Matrix,
}

impl EtfFrame {
    pub fn classes(&self) -> usize {
        self.m.cols()
    }

    /// Column `k` of `M`.
    pub fn vertex(&self, k: usize) -> Vec<f64> {
        self.m.column(k)
    }
}

/// Random simplex ETF in `d` dimensions with `K` vertices. `U` comes from a
/// thin QR of a Gaussian `d×K` matrix.
pub fn make_etf(d: usize, k: usize, rng: &mut Rng) -> Result<EtfFrame> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("an ETF needs K ≥ 2, got {k}")));
    }
    if d < k {
        return Err(Error::InvalidArgument(format!("ETF construction needs d ≥ K, got d={d}, K={k}")));
    }
    let g = DMatrix::from_fn(d, k, |_, _| rng.normal());
    let q = g.qr().q();
    let u = Matrix::new(d, k, (0..d).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect())?;
    let kf = k as f64;
    let centering = Matrix::from_raw(k, k, (0..k * k).map(|idx| if idx / k == idx % k { 1.0 - 1.0 / kf } else { -1.0 / kf }).collect());
    let m = u.matmul(&centering)?.scale((kf / (kf - 1.0)).sqrt());
    Ok(EtfFrame { m, u })
}

/// The Gram matrix every simplex ETF must have: `K/(K−1)·(I − 11ᵀ/K)`.
pub fn etf_gram(k: usize) -> Matrix {
    let kf = k as f64;
    let s = kf / (kf - 1.0);
    Matrix::from_raw(k, k, (0..k * k).map(|idx| s * (if idx / k == idx % k { 1.0 } else { 0.0 } - 1.0 / kf)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcMetrics {
    /// `tr Σ_W / tr Σ_B`.
    pub nc1: f64,
    /// Worst `|cos(h̃_i, h̃_j) + 1/(K−1)|` over class pairs.
    pub nc2_angle_dev: f64,
    /// Coefficient of variation of the centred class-mean norms.
    pub nc2_norm_cv: f64,
    /// Worst `1 − cos(w_k, h̃_k)` over classes.
    pub nc3_duality: f64,
    /// Fraction of samples where the classifier and nearest class mean disagree.
    pub nc4_disagreement: f64,
    /// Classes whose centred mean (or classifier column) has zero norm; pairs
    /// involving them are left out of NC2/NC3.
    pub degenerate_classes: Vec<usize>,
}

/// Neural-collapse statistics of `features` (`N×d`) against the linear
/// classifier `w` (`d×K`, bias ignored). Undefined metrics are NaN.
pub fn nc_metrics(features: &Matrix, labels: &[usize], w: &Matrix) -> Result<NcMetrics> {
    let (n, d) = features.shape();
    let k = w.cols();
    if labels.len() != n {
        return Err(Error::shape("nc_metrics", format!("{n} labels"), format!("{}", labels.len())));
    }
    if w.rows() != d {
        return Err(Error::shape("nc_metrics", format!("classifier with {d} rows"), format!("{}", w.rows())));
    }
    if k < 2 || n < k {
        return Err(Error::InvalidArgument(format!("need K ≥ 2 and N ≥ K, got K={k}, N={n}")));
    }
    features.check_finite("nc_metrics")?;
    w.check_finite("nc_metrics")?;

    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    let mut global = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { index: i, label: y, classes: k });
        }
        counts[y] += 1;
        for (j, &v) in features.row(i).iter().enumerate() {
            means[y][j] += v;
            global[j] += v;
        }
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!("class {c} has no samples")));
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f64);
    }
    global.iter_mut().for_each(|v| *v /= n as f64);

    let tr_w =
        (0..n).map(|i| features.row(i).iter().zip(&means[labels[i]]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>() / n as f64;
    let centred: Vec<Vec<f64>> = means.iter().map(|m| m.iter().zip(&global).map(|(a, b)| a - b).collect()).collect();
    let norms: Vec<f64> = centred.iter().map(|c| norm(c)).collect();
    let tr_b = norms.iter().map(|v| v * v).sum::<f64>() / k as f64;
    let nc1 = if tr_b > 0.0 { tr_w / tr_b } else { f64::NAN };

    let mut degenerate = Vec::new();
    let columns: Vec<Vec<f64>> = (0..k).map(|c| w.column(c)).collect();
    for c in 0..k {
        if norms[c] < MIN_NORM || norm(&columns[c]) < MIN_NORM {
            degenerate.push(c);
        }
    }
    let ok = |c: usize| norms[c] >= MIN_NORM;

    let target = -1.0 / (k as f64 - 1.0);
    let mut nc2_angle_dev = f64::NAN;
    for i in 0..k {
        for j in i + 1..k {
            if ok(i) && ok(j) {
                let cos = dot(&centred[i], &centred[j]) / (norms[i] * norms[j]);
                nc2_angle_dev = max_defined(nc2_angle_dev, (cos - target).abs());
            }
        }
    }

    let mean_norm = norms.iter().sum::<f64>() / k as f64;
    let nc2_norm_cv = if mean_norm > 0.0 {
        let var = norms.iter().map(|v| (v - mean_norm).powi(2)).sum::<f64>() / k as f64;
        var.sqrt() / mean_norm
    } else {
        f64::NAN
    };

    let mut nc3_duality = f64::NAN;
    for c in 0..k {
        let wn = norm(&columns[c]);
        if ok(c) && wn >= MIN_NORM {
            let cos = dot(&columns[c], &centred[c]) / (wn * norms[c]);
            nc3_duality = max_defined(nc3_duality, 1.0 - cos);
        }
    }

    let logits = features.matmul(w)?;
    let mut disagree = 0usize;
    for i in 0..n {
        let h = features.row(i);
        let dists: Vec<f64> = means.iter().map(|m| -h.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).collect();
        if argmax(logits.row(i)) != argmax(&dists) {
            disagree += 1;
        }
    }

    Ok(NcMetrics {
        nc1,
        nc2_angle_dev,
        nc2_norm_cv,
        nc3_duality,
        nc4_disagreement: disagree as f64 / n as f64,
        degenerate_classes: degenerate,
    })
}

fn max_defined(acc: f64, v: f64) -> f64 {
    if acc.is_nan() {
        v
    } else {
        acc.max(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationDiff {
    /// `corr(teacher) − corr(student)`; NaN in rows/columns of a constant
    /// class column.
    pub diff: Matrix,
    /// Mean `|diff|` over defined entries (diagonal included).
    pub mean_abs: f64,
    /// Classes whose logit column is constant in either input.
    pub undefined: Vec<usize>,
}

/// Pearson correlation between every pair of columns; rows and columns of
/// constant columns are NaN. Returns the matrix and the constant columns.
pub fn correlation_matrix(x: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let (n, k) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("correlation needs N ≥ 2, got {n}")));
    }
    x.check_finite("correlation_matrix")?;
    let mut centred = Vec::with_capacity(k);
    let mut sds = Vec::with_capacity(k);
    for c in 0..k {
        let col = x.column(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        let dev: Vec<f64> = col.iter().map(|v| v - mean).collect();
        sds.push((dot(&dev, &dev) / n as f64).sqrt());
        centred.push(dev);
    }
    let undefined: Vec<usize> = (0..k).filter(|&c| !(sds[c] > MIN_NORM)).collect();
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let r = if sds[i] > MIN_NORM && sds[j] > MIN_NORM {
                if i == j {
                    1.0
                } else {
                    (dot(&centred[i], &centred[j]) / n as f64 / (sds[i] * sds[j])).clamp(-1.0, 1.0)
                }
            } else {
                f64::NAN
            };
            out[(i, j)] = r;
            out[(j, i)] = r;
        }
    }
    Ok((out, undefined))
}

pub fn correlation_diff(teacher_logits: &Matrix, student_logits: &Matrix) -> Result<CorrelationDiff> {
    teacher_logits.ensure_same_shape(student_logits, "correlation_diff")?;
    let (ct, ut) = correlation_matrix(teacher_logits)?;
    let (cs, us) = correlation_matrix(student_logits)?;
    let diff = ct.zip_map(&cs, |a, b| a - b)?;
    let mut undefined: Vec<usize> = ut.into_iter().chain(us).collect();
    undefined.sort_unstable();
    undefined.dedup();
    let defined: Vec<f64> = diff.as_slice().iter().copied().filter(|v| !v.is_nan()).collect();
    let mean_abs = if defined.is_empty() { f64::NAN } else { defined.iter().map(|v| v.abs()).sum::<f64>() / defined.len() as f64 };
    Ok(CorrelationDiff { diff, mean_abs, undefined })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn etf_features(frame: &EtfFrame, per_class: usize) -> (Matrix, Vec<usize>) {
        let k = frame.classes();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..k {
            for _ in 0..per_class {
                rows.push(frame.vertex(c));
                labels.push(c);
            }
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn etf_k4_cosines_and_norms() {
        let f = make_etf(6, 4, &mut Rng::new(0)).unwrap();
        for i in 0..4 {
            let vi = f.vertex(i);
            assert!((norm(&vi) - 1.0).abs() < 1e-12);
            for j in i + 1..4 {
                let cos = dot(&vi, &f.vertex(j)) / (norm(&vi) * norm(&f.vertex(j)));
                assert!((cos + 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn etf_k2_is_antipodal() {
        let f = make_etf(2, 2, &mut Rng::new(1)).unwrap();
        let (a, b) = (f.vertex(0), f.vertex(1));
        assert!((dot(&a, &b) / (norm(&a) * norm(&b)) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn etf_k5_d7_full_gram() {
        let f = make_etf(7, 5, &mut Rng::new(2)).unwrap();
        let gram = f.m.t_matmul(&f.m).unwrap();
        assert!(gram.max_abs_diff(&etf_gram(5)).unwrap() < 1e-10);
        let utu = f.u.t_matmul(&f.u).unwrap();
        assert!(utu.max_abs_diff(&Matrix::identity(5)).unwrap() < 1e-10);
    }

    #[test]
    fn etf_rejects_small_d() {
        assert!(make_etf(3, 4, &mut Rng::new(0)).is_err());
        assert!(make_etf(3, 1, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn exact_collapse_gives_zero_metrics() {
        let f = make_etf(8, 5, &mut Rng::new(3)).unwrap();
        let (h, y) = etf_features(&f, 4);
        let m = nc_metrics(&h, &y, &f.m).unwrap();
        assert!(m.nc1.abs() < 1e-20);
        assert!(m.nc2_angle_dev < 1e-10);
        assert!(m.nc2_norm_cv < 1e-10);
        assert!(m.nc3_duality < 1e-10);
        assert_eq!(m.nc4_disagreement, 0.0);
        assert!(m.degenerate_classes.is_empty());
    }

    #[test]
    fn anti_aligned_classifier_has_duality_two() {
        let f = make_etf(5, 3, &mut Rng::new(4)).unwrap();
        let (h, y) = etf_features(&f, 2);
        let m = nc_metrics(&h, &y, &f.m.scale(-1.0)).unwrap();
        assert!((m.nc3_duality - 2.0).abs() < 1e-10);
        // ⟨M_c, −M_j⟩ is largest for j ≠ c, so every sample disagrees.
        assert_eq!(m.nc4_disagreement, 1.0);
    }

    #[test]
    fn nc4_matches_brute_force_recount() {
        let mut rng = Rng::new(5);
        let (n, d, k) = (30, 4, 3);
        let h = Matrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % k).collect();
        let w = Matrix::new(d, k, (0..d * k).map(|_| rng.normal()).collect()).unwrap();
        let m = nc_metrics(&h, &y, &w).unwrap();

        let mut count = 0;
        for i in 0..n {
            let mut best_logit = (f64::NEG_INFINITY, 0);
            let mut best_dist = (f64::INFINITY, 0);
            for c in 0..k {
                let logit: f64 = (0..d).map(|j| h[(i, j)] * w[(j, c)]).sum();
                let members: Vec<usize> = (0..n).filter(|&r| y[r] == c).collect();
                let dist: f64 = (0..d)
                    .map(|j| {
                        let mu = members.iter().map(|&r| h[(r, j)]).sum::<f64>() / members.len() as f64;
                        (h[(i, j)] - mu).powi(2)
                    })
                    .sum();
                if logit > best_logit.0 {
                    best_logit = (logit, c);
                }
                if dist < best_dist.0 {
                    best_dist = (dist, c);
                }
            }
            if best_logit.1 != best_dist.1 {
                count += 1;
            }
        }
        assert_eq!(m.nc4_disagreement, count as f64 / n as f64);
    }

    #[test]
    fn empty_class_and_degenerate_means() {
        let h = Matrix::from_rows(&[[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]).unwrap();
        let w = Matrix::identity(2);
        assert!(matches!(nc_metrics(&h, &[0, 0, 0], &w), Err(Error::Degenerate(_))));
        // All features equal: every centred mean is zero.
        let same = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        let m = nc_metrics(&same, &[0, 1, 1], &w).unwrap();
        assert_eq!(m.degenerate_classes, vec![0, 1]);
        assert!(m.nc1.is_nan() && m.nc2_angle_dev.is_nan() && m.nc3_duality.is_nan());
    }

    #[test]
    fn correlation_of_identical_and_affine_logits() {
        let mut rng = Rng::new(6);
        let t = Matrix::new(20, 4, (0..80).map(|_| rng.normal()).collect()).unwrap();
        let d = correlation_diff(&t, &t).unwrap();
        assert_eq!(d.mean_abs, 0.0);
        let a = [2.0, 0.5, 3.0, 1.5];
        let b = [1.0, -4.0, 0.0, 7.0];
        let mut s = t.clone();
        for i in 0..20 {
            for c in 0..4 {
                s[(i, c)] = a[c] * t[(i, c)] + b[c];
            }
        }
        let d = correlation_diff(&t, &s).unwrap();
        assert!(d.diff.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn correlation_matches_brute_force() {
        let mut rng = Rng::new(7);
        let (n, k) = (50, 4);
        let t = Matrix::new(n, k, (0..n * k).map(|_| rng.normal()).collect()).unwrap();
        let s = Matrix::new(n, k, (0..n * k).map(|_| rng.normal() * 2.0 + 1.0).collect()).unwrap();
        let brute = |x: &Matrix, i: usize, j: usize| {
            let nf = n as f64;
            let (mut si, mut sj, mut sii, mut sjj, mut sij) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in 0..n {
                let (a, b) = (x[(r, i)], x[(r, j)]);
                si += a;
                sj += b;
                sii += a * a;
                sjj += b * b;
                sij += a * b;
            }
            (nf * sij - si * sj) / ((nf * sii - si * si).sqrt() * (nf * sjj - sj * sj).sqrt())
        };
        let d = correlation_diff(&t, &s).unwrap();
        for i in 0..k {
            for j in 0..k {
                assert!((d.diff[(i, j)] - (brute(&t, i, j) - brute(&s, i, j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_column_is_flagged() {
        let t = Matrix::from_rows(&[[1.0, 2.0, 5.0], [2.0, 2.0, 3.0], [3.0, 2.0, 4.0]]).unwrap();
        let d = correlation_diff(&t, &t).unwrap();
        assert_eq!(d.undefined, vec![1]);
        assert!(d.diff[(1, 0)].is_nan() && d.diff[(0, 1)].is_nan());
        assert_eq!(d.mean_abs, 0.0);
        assert!(correlation_diff(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)).is_err());
    }
}
