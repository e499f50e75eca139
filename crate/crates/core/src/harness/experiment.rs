use std::fmt::Write as _;

use rayon::prelude::*;

use super::config::{RunConfig, Setting};
use super::train::{distill, load_data, train_teacher, DataSplit, RunResult};
use crate::collapse::{correlation_diff, nc_metrics, CorrelationDiff, NcMetrics};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad_theory::{coefficient_sign_report_from_logits, SignReport};
use crate::model::DualHeadNet;
use crate::numerics::argmax;

#[derive(Debug, Clone)]
pub struct CompareRun {
    pub seed: u64,
    pub setting: Setting,
    pub result: RunResult,
}

#[derive(Debug, Clone)]
pub struct CompareReport {
    pub teachers: Vec<(u64, RunResult)>,
    pub runs: Vec<CompareRun>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl CompareReport {
    pub fn final_accs(&self, setting: Setting) -> Vec<f64> {
        self.runs.iter().filter(|r| r.setting == setting).map(|r| r.result.final_acc()).collect()
    }

    pub fn median_final_acc(&self, setting: Setting) -> f64 {
        median(&mut self.final_accs(setting))
    }

    pub fn run(&self, seed: u64, setting: Setting) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.seed == seed && r.setting == setting).map(|r| &r.result)
    }

    /// One row per run with its final-epoch numbers.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("setting,seed,acc_main,acc_aux,corr_main,corr_aux,collapsed_at\n");
        for (seed, t) in &self.teachers {
            let _ = writeln!(s, "teacher,{seed},{},nan,nan,nan,", t.final_acc());
        }
        for r in &self.runs {
            let last = r.result.logs.last();
            let g = |f: fn(&super::train::EpochLog) -> f64| fmt_f64(last.map_or(f64::NAN, f));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.setting,
                r.seed,
                g(|l| l.acc_main),
                g(|l| l.acc_aux),
                g(|l| l.corr_main),
                g(|l| l.corr_aux),
                r.result.collapsed_at.map_or(String::new(), |e| e.to_string())
            );
        }
        s
    }

    /// Median final main-head accuracy per setting.
    pub fn medians_text(&self, settings: &[Setting]) -> String {
        settings
            .iter()
            .map(|&st| format!("{:<13} median acc {:.4}  {:?}\n", st.name(), self.median_final_acc(st), self.final_accs(st)))
            .collect()
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        v.to_string()
    }
}

/// Train one teacher per seed, then distil every setting for every seed.
/// Runs share only the immutable data and teachers and execute in parallel.
pub fn compare(cfg: &RunConfig, seeds: &[u64], settings: &[Setting]) -> Result<CompareReport> {
    let data = load_data(cfg)?;
    compare_on(cfg, &data, seeds, settings)
}

pub fn compare_on(cfg: &RunConfig, data: &DataSplit, seeds: &[u64], settings: &[Setting]) -> Result<CompareReport> {
    let teachers: Vec<(u64, RunResult)> =
        seeds.par_iter().map(|&seed| train_teacher(&RunConfig { seed, ..cfg.clone() }, data).map(|t| (seed, t))).collect::<Result<_>>()?;
    let jobs: Vec<(u64, Setting, &DualHeadNet)> =
        teachers.iter().flat_map(|(seed, t)| settings.iter().map(move |&s| (*seed, s, &t.model))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, setting, teacher)| {
            let c = RunConfig { seed, setting, ..cfg.clone() };
            distill(&c, teacher, data).map(|result| CompareRun { seed, setting, result })
        })
        .collect::<Result<_>>()?;
    Ok(CompareReport { teachers, runs })
}

#[derive(Debug, Clone)]
pub struct Diagnosis {
    pub acc_main: f64,
    pub acc_aux: Option<f64>,
    pub nc: NcMetrics,
    pub corr_main: CorrelationDiff,
    pub corr_aux: Option<CorrelationDiff>,
    /// Pull/push coefficient signs of CE vs BinaryKL on the first batch.
    pub signs: SignReport,
}

impl Diagnosis {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(s, "{k},{}", fmt_f64(v));
        };
        row("acc_main", self.acc_main);
        row("acc_aux", self.acc_aux.unwrap_or(f64::NAN));
        row("nc1", self.nc.nc1);
        row("nc2_angle_dev", self.nc.nc2_angle_dev);
        row("nc2_norm_cv", self.nc.nc2_norm_cv);
        row("nc3_duality", self.nc.nc3_duality);
        row("nc4_disagreement", self.nc.nc4_disagreement);
        row("corr_mean_abs_main", self.corr_main.mean_abs);
        row("corr_mean_abs_aux", self.corr_aux.as_ref().map_or(f64::NAN, |c| c.mean_abs));
        row("sign_pull_conflicts", self.signs.pull_conflicts as f64);
        row("sign_push_conflicts", self.signs.push_conflicts as f64);
        row("sign_conflict_fraction", self.signs.conflict_fraction());
        s
    }
}

/// NC metrics of the student's main head, logit correlation differences of
/// each head against the teacher, and the CE/BinaryKL coefficient-sign report
/// on the first `batch` samples.
pub fn diagnose(student: &DualHeadNet, teacher: &DualHeadNet, data: &Dataset, tau: f64, batch: usize) -> Result<Diagnosis> {
    for (name, net) in [("student", student), ("teacher", teacher)] {
        if net.input_dim() != data.dim() || net.classes() != data.classes() {
            return Err(Error::shape(
                "diagnose",
                format!("{name} {}→{}", data.dim(), data.classes()),
                format!("{}→{}", net.input_dim(), net.classes()),
            ));
        }
    }
    let (feat, main) = student.infer(data.x())?;
    let aux = student.aux_logits(&feat)?;
    let (_, zt) = teacher.infer(data.x())?;
    let acc = |z: &crate::Matrix| (0..data.len()).filter(|&i| argmax(z.row(i)) == data.y()[i]).count() as f64 / data.len() as f64;
    let n = batch.clamp(1, data.len());
    let idx: Vec<usize> = (0..n).collect();
    let signs = coefficient_sign_report_from_logits(&main.select_rows(&idx), &zt.select_rows(&idx), &data.y()[..n], tau)?;
    Ok(Diagnosis {
        acc_main: acc(&main),
        acc_aux: aux.as_ref().map(acc),
        nc: nc_metrics(&feat, data.y(), student.classifier())?,
        corr_main: correlation_diff(&zt, &main)?,
        corr_aux: aux.as_ref().map(|a| correlation_diff(&zt, a)).transpose()?,
        signs,
    })
}
