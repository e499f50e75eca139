use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use super::config::{RunConfig, Setting};
use crate::collapse::{correlation_diff, nc_metrics, NcMetrics};
use crate::data::{batches, gen_gaussian_mixture, load_idx, split, split_counts, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{binary_kl_loss, binary_kl_norm_loss, ce_loss, vanilla_kd_loss, Reduction};
use crate::model::{align_per_tensor, clip_global_norm, count_conflicts, sgd_step, step_lr, DualHeadNet, NetGrads, SgdState};
use crate::numerics::{argmax, dot, Matrix, Rng};

/// Fraction of an IDX training file used for training when no test file is
/// given.
pub const IDX_TRAIN_FRACTION: f64 = 0.8;

// Rng streams derived from the run seed.
const STREAM_STUDENT_INIT: u64 = 1;
const STREAM_TEACHER_INIT: u64 = 2;
const STREAM_STUDENT_SHUFFLE: u64 = 1 << 32;
const STREAM_TEACHER_SHUFFLE: u64 = 2 << 32;

/// Collapse heuristic: accuracy below `2/K` for this many consecutive epochs
/// after `COLLAPSE_GRACE_EPOCHS`.
pub const COLLAPSE_PATIENCE: usize = 3;
pub const COLLAPSE_GRACE_EPOCHS: usize = 5;

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Synthetic mixture (split per class into train/test) or IDX files.
pub fn load_data(cfg: &RunConfig) -> Result<DataSplit> {
    cfg.validate()?;
    if let (Some(ti), Some(tl)) = (&cfg.train_images, &cfg.train_labels) {
        let train = load_idx(ti, tl)?;
        return match (&cfg.test_images, &cfg.test_labels) {
            (Some(ei), Some(el)) => {
                let test = load_idx(ei, el)?;
                if test.dim() != train.dim() {
                    return Err(Error::shape("load_data", format!("{} test features", train.dim()), format!("{}", test.dim())));
                }
                let classes = train.classes().max(test.classes());
                Ok(DataSplit {
                    train: Dataset::new(train.x().clone(), train.y().to_vec(), classes)?,
                    test: Dataset::new(test.x().clone(), test.y().to_vec(), classes)?,
                })
            }
            _ => {
                let (train, test) = split(&train, IDX_TRAIN_FRACTION, cfg.data_seed)?;
                Ok(DataSplit { train, test })
            }
        };
    }
    let all = gen_gaussian_mixture(&SyntheticSpec {
        classes: cfg.classes,
        dim: cfg.dim,
        n_per_class: cfg.train_per_class + cfg.test_per_class,
        separation: cfg.separation,
        seed: cfg.data_seed,
    })?;
    let (train, test) = split_counts(&all, &vec![cfg.train_per_class; cfg.classes], cfg.data_seed)?;
    Ok(DataSplit { train, test })
}

pub const CSV_HEADER: &str = "epoch,setting,seed,loss_ce,loss_bkl,acc_main,acc_aux,nc1,nc2_angle_dev,nc2_norm_cv,nc3_duality,nc4_disagreement,corr_main,corr_aux,conflict_rate,collapsed,wall_ms";

/// One row of the training log. Undefined quantities are NaN and written as
/// `nan`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub setting: String,
    pub seed: u64,
    /// Mean CE over the epoch's batches (main head).
    pub loss_ce: f64,
    /// Mean distillation loss (BinaryKL, BinaryKL-Norm or vanilla KD,
    /// unweighted by α).
    pub loss_bkl: f64,
    pub acc_main: f64,
    pub acc_aux: f64,
    pub nc: NcMetrics,
    pub corr_main: f64,
    pub corr_aux: f64,
    pub conflict_rate: f64,
    pub collapsed: bool,
    pub wall_ms: u64,
}

impl EpochLog {
    pub fn csv_row(&self, wall_time: bool) -> String {
        let f = |v: f64| if v.is_nan() { "nan".to_string() } else { format!("{v}") };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.setting,
            self.seed,
            f(self.loss_ce),
            f(self.loss_bkl),
            f(self.acc_main),
            f(self.acc_aux),
            f(self.nc.nc1),
            f(self.nc.nc2_angle_dev),
            f(self.nc.nc2_norm_cv),
            f(self.nc.nc3_duality),
            f(self.nc.nc4_disagreement),
            f(self.corr_main),
            f(self.corr_aux),
            f(self.conflict_rate),
            u8::from(self.collapsed),
            if wall_time { self.wall_ms } else { 0 }
        )
    }
}

/// CSV text for a run. With `wall_time = false` the `wall_ms` column is
/// written as 0, which makes the file a pure function of the config.
pub fn logs_to_csv(logs: &[EpochLog], wall_time: bool) -> String {
    let mut s = String::with_capacity(64 * (logs.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(s, "{}", l.csv_row(wall_time));
    }
    s
}

pub fn write_csv(logs: &[EpochLog], path: impl AsRef<Path>, wall_time: bool) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, logs_to_csv(logs, wall_time)).map_err(|e| Error::io(path, e))
}

/// Per-epoch gradient bookkeeping kept out of the CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochTrace {
    /// `g_kd · g_ce` for every (step, backbone tensor) pair, before alignment.
    pub dots: Vec<f64>,
    /// Smallest `g′ · g_ce` after alignment (+∞ when nothing was aligned).
    pub min_aligned_dot: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: DualHeadNet,
    pub logs: Vec<EpochLog>,
    pub traces: Vec<EpochTrace>,
    /// First epoch flagged as collapsed.
    pub collapsed_at: Option<usize>,
}

impl RunResult {
    pub fn final_acc(&self) -> f64 {
        self.logs.last().map_or(f64::NAN, |l| l.acc_main)
    }

    pub fn to_csv(&self, wall_time: bool) -> String {
        logs_to_csv(&self.logs, wall_time)
    }
}

/// Teacher logits precomputed once for the whole training and test sets.
struct TeacherLogits {
    train: Matrix,
    test: Matrix,
}

struct Loop<'a> {
    cfg: &'a RunConfig,
    setting: Setting,
    label: String,
    data: &'a DataSplit,
    teacher: Option<TeacherLogits>,
    epochs: usize,
    milestones: Vec<usize>,
    shuffle_stream: u64,
}

fn accuracy(logits: &Matrix, y: &[usize]) -> f64 {
    let hits = (0..y.len()).filter(|&i| argmax(logits.row(i)) == y[i]).count();
    hits as f64 / y.len() as f64
}

fn nan_nc() -> NcMetrics {
    NcMetrics {
        nc1: f64::NAN,
        nc2_angle_dev: f64::NAN,
        nc2_norm_cv: f64::NAN,
        nc3_duality: f64::NAN,
        nc4_disagreement: f64::NAN,
        degenerate_classes: Vec::new(),
    }
}

fn nan_if_err(r: Result<f64>) -> f64 {
    r.unwrap_or(f64::NAN)
}

impl Loop<'_> {
    fn run(&self, mut net: DualHeadNet) -> Result<RunResult> {
        let cfg = self.cfg;
        let k = self.data.train.classes();
        let mut opt = SgdState::new(&net, cfg.lr, cfg.momentum, cfg.weight_decay);
        let mut logs = Vec::with_capacity(self.epochs);
        let mut traces = Vec::with_capacity(self.epochs);
        let mut low_streak = 0;
        let mut collapsed_at = None;

        for epoch in 1..=self.epochs {
            let start = Instant::now();
            opt.lr = step_lr(cfg.lr, epoch - 1, &self.milestones, 0.1);
            let mut rng = Rng::derive(cfg.seed, self.shuffle_stream + epoch as u64);
            let (mut sum_ce, mut sum_kd, mut seen) = (0.0, 0.0, 0usize);
            let mut trace = EpochTrace { dots: Vec::new(), min_aligned_dot: f64::INFINITY };
            let mut conflicts = 0usize;
            let mut non_finite = false;

            for idx in batches(self.data.train.len(), cfg.batch_size, &mut rng)? {
                let batch = self.data.train.subset(&idx);
                let zt = self.teacher.as_ref().map(|t| t.train.select_rows(&idx));
                let step = self.step(&mut net, &mut opt, batch.x(), batch.y(), zt.as_ref(), &mut trace, &mut conflicts);
                match step {
                    Ok((ce, kd)) if ce.is_finite() && kd.is_finite() => {
                        sum_ce += ce * idx.len() as f64;
                        sum_kd += kd * idx.len() as f64;
                        seen += idx.len();
                    }
                    Ok(_) | Err(Error::NonFiniteGradient) | Err(Error::NonFinite { .. }) => {
                        non_finite = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }

            let mut log = self.evaluate(&net, epoch);
            log.loss_ce = if non_finite { f64::NAN } else { sum_ce / seen as f64 };
            log.loss_bkl = if self.teacher.is_some() && !non_finite { sum_kd / seen as f64 } else { f64::NAN };
            log.conflict_rate = if trace.dots.is_empty() { f64::NAN } else { conflicts as f64 / trace.dots.len() as f64 };
            if epoch > COLLAPSE_GRACE_EPOCHS && !(log.acc_main >= 2.0 / k as f64) {
                low_streak += 1;
            } else {
                low_streak = 0;
            }
            log.collapsed = non_finite || low_streak >= COLLAPSE_PATIENCE;
            log.wall_ms = start.elapsed().as_millis() as u64;
            let stop = log.collapsed;
            logs.push(log);
            traces.push(trace);
            if stop {
                collapsed_at = Some(epoch);
                break;
            }
        }
        Ok(RunResult { model: net, logs, traces, collapsed_at })
    }

    /// One SGD step. Returns the batch-mean CE and distillation losses (the
    /// latter 0 without a teacher).
    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        net: &mut DualHeadNet,
        opt: &mut SgdState,
        x: &Matrix,
        y: &[usize],
        zt: Option<&Matrix>,
        trace: &mut EpochTrace,
        conflicts: &mut usize,
    ) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        let red = Reduction::Mean;
        let fwd = net.forward(x)?;
        fwd.main_logits.check_finite("student logits")?;
        let ce = ce_loss(&fwd.main_logits, y, red)?;
        let teacher = || zt.ok_or_else(|| Error::InvalidArgument(format!("setting {} needs a teacher", self.setting)));
        let (grad_main, grad_aux, kd_value) = match self.setting {
            Setting::CeOnly => (ce.grad.clone(), None, 0.0),
            Setting::BklOnly => {
                let kd = binary_kl_loss(&fwd.main_logits, teacher()?, cfg.tau, red)?;
                (kd.grad, None, kd.value)
            }
            Setting::CePlusBkl => {
                let kd = binary_kl_loss(&fwd.main_logits, teacher()?, cfg.tau, red)?;
                let mut g = ce.grad.clone();
                g.axpy(cfg.alpha, &kd.grad)?;
                (g, None, kd.value)
            }
            Setting::Dhkd | Setting::DhkdVanilla => {
                let aux = fwd.aux_logits.as_ref().ok_or_else(|| Error::InvalidArgument("dual-head setting on a single-head net".into()))?;
                aux.check_finite("aux logits")?;
                let kd = if self.setting == Setting::Dhkd {
                    binary_kl_norm_loss(aux, teacher()?, cfg.tau, red)?
                } else {
                    vanilla_kd_loss(aux, teacher()?, cfg.tau, red)?
                };
                (ce.grad.clone(), Some(kd.grad.scale(cfg.alpha)), kd.value)
            }
        };
        let back = net.backward(&fwd.cache, &grad_main, grad_aux.as_ref())?;
        let mut backbone = back.backbone_from_main;
        if let Some(mut from_aux) = back.backbone_from_aux {
            for (a, b) in from_aux.tensors().zip(backbone.tensors()) {
                trace.dots.push(dot(a, b));
            }
            let stats = if cfg.alignment {
                let s = align_per_tensor(&mut from_aux, &backbone)?;
                for (a, b) in from_aux.tensors().zip(backbone.tensors()) {
                    trace.min_aligned_dot = trace.min_aligned_dot.min(dot(a, b));
                }
                s
            } else {
                count_conflicts(&from_aux, &backbone)
            };
            *conflicts += stats.conflicts;
            backbone.add_scaled(1.0, &from_aux)?;
        }
        let mut grads = NetGrads { backbone, main_head: back.main_head, aux_head: back.aux_head };
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        sgd_step(net, &grads, opt)?;
        Ok((ce.value, kd_value))
    }

    fn evaluate(&self, net: &DualHeadNet, epoch: usize) -> EpochLog {
        let test = &self.data.test;
        let mut log = EpochLog {
            epoch,
            setting: self.label.clone(),
            seed: self.cfg.seed,
            loss_ce: f64::NAN,
            loss_bkl: f64::NAN,
            acc_main: f64::NAN,
            acc_aux: f64::NAN,
            nc: nan_nc(),
            corr_main: f64::NAN,
            corr_aux: f64::NAN,
            conflict_rate: f64::NAN,
            collapsed: false,
            wall_ms: 0,
        };
        let Ok((feat, main)) = net.infer(test.x()) else {
            return log;
        };
        log.acc_main = accuracy(&main, test.y());
        let aux = net.aux_logits(&feat).ok().flatten();
        if let Some(a) = &aux {
            log.acc_aux = accuracy(a, test.y());
        }
        if let Ok((train_feat, _)) = net.infer(self.data.train.x()) {
            log.nc = nc_metrics(&train_feat, self.data.train.y(), net.classifier()).unwrap_or_else(|_| nan_nc());
        }
        if let Some(t) = &self.teacher {
            log.corr_main = nan_if_err(correlation_diff(&t.test, &main).map(|c| c.mean_abs));
            if let Some(a) = &aux {
                log.corr_aux = nan_if_err(correlation_diff(&t.test, a).map(|c| c.mean_abs));
            }
        }
        log
    }
}

fn backbone_widths(input: usize, widths: &[usize]) -> Vec<usize> {
    std::iter::once(input).chain(widths.iter().copied()).collect()
}

/// Teacher milestones: the student milestones rescaled to `teacher_epochs`.
pub fn teacher_milestones(cfg: &RunConfig) -> Vec<usize> {
    if cfg.epochs == 0 {
        return Vec::new();
    }
    cfg.milestones.iter().map(|&m| m * cfg.teacher_epochs / cfg.epochs).collect()
}

/// Fresh teacher network (no aux head) for `cfg` and the data dimensions.
pub fn init_teacher(cfg: &RunConfig, data: &DataSplit) -> Result<DualHeadNet> {
    let mut rng = Rng::derive(cfg.seed, STREAM_TEACHER_INIT);
    DualHeadNet::init(&backbone_widths(data.train.dim(), &cfg.teacher_widths), data.train.classes(), None, &mut rng)
}

/// Fresh student network for `cfg`; dual-head settings get an aux head.
pub fn init_student(cfg: &RunConfig, data: &DataSplit) -> Result<DualHeadNet> {
    let mut rng = Rng::derive(cfg.seed, STREAM_STUDENT_INIT);
    let aux = cfg.setting.dual_head().then(|| cfg.aux());
    DualHeadNet::init(&backbone_widths(data.train.dim(), &cfg.student_widths), data.train.classes(), aux, &mut rng)
}

/// Train a teacher with CE for `teacher_epochs`. A collapse is an error.
pub fn train_teacher(cfg: &RunConfig, data: &DataSplit) -> Result<RunResult> {
    cfg.validate()?;
    let lp = Loop {
        cfg,
        setting: Setting::CeOnly,
        label: "teacher".into(),
        data,
        teacher: None,
        epochs: cfg.teacher_epochs,
        milestones: teacher_milestones(cfg),
        shuffle_stream: STREAM_TEACHER_SHUFFLE,
    };
    let res = lp.run(init_teacher(cfg, data)?)?;
    if let Some(epoch) = res.collapsed_at {
        return Err(Error::Collapsed { epoch, reason: "teacher training diverged".into() });
    }
    Ok(res)
}

/// Distil `teacher` into a fresh student per `cfg.setting`. Collapse stops
/// the run and is reported through `collapsed_at`.
pub fn distill(cfg: &RunConfig, teacher: &DualHeadNet, data: &DataSplit) -> Result<RunResult> {
    distill_from(cfg, teacher, data, init_student(cfg, data)?)
}

/// As [`distill`], starting from a given student.
pub fn distill_from(cfg: &RunConfig, teacher: &DualHeadNet, data: &DataSplit, student: DualHeadNet) -> Result<RunResult> {
    cfg.validate()?;
    let k = data.train.classes();
    if teacher.classes() != k || teacher.input_dim() != data.train.dim() {
        return Err(Error::shape(
            "distill",
            format!("teacher {}→{k}", data.train.dim()),
            format!("{}→{}", teacher.input_dim(), teacher.classes()),
        ));
    }
    if student.aux_head().is_some() != cfg.setting.dual_head() {
        return Err(Error::InvalidArgument(format!("student heads do not match setting {}", cfg.setting)));
    }
    let logits = TeacherLogits { train: teacher.infer(data.train.x())?.1, test: teacher.infer(data.test.x())?.1 };
    Loop {
        cfg,
        setting: cfg.setting,
        label: cfg.setting.name().into(),
        data,
        teacher: Some(logits),
        epochs: cfg.epochs,
        milestones: cfg.milestones.clone(),
        shuffle_stream: STREAM_STUDENT_SHUFFLE,
    }
    .run(student)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            classes: 3,
            dim: 6,
            separation: 4.0,
            train_per_class: 40,
            test_per_class: 20,
            teacher_widths: vec![16],
            student_widths: vec![8],
            aux_hidden: 8,
            epochs: 4,
            teacher_epochs: 4,
            milestones: vec![3],
            batch_size: 16,
            ..RunConfig::default()
        }
    }

    #[test]
    fn synthetic_split_sizes() {
        let d = load_data(&tiny_cfg()).unwrap();
        assert_eq!(d.train.class_counts(), vec![40; 3]);
        assert_eq!(d.test.class_counts(), vec![20; 3]);
    }

    #[test]
    fn csv_shape_and_nan_rendering() {
        let cfg = tiny_cfg();
        let data = load_data(&cfg).unwrap();
        let t = train_teacher(&cfg, &data).unwrap();
        let csv = t.to_csv(false);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), 17);
            assert!(l.starts_with(char::is_numeric));
            assert!(l.ends_with(",0,0"));
        }
        // teacher has no aux head and no reference logits
        assert!(lines[1].contains(",nan,"));
    }

    #[test]
    fn lr_zero_leaves_parameters_untouched() {
        let cfg = RunConfig { lr: 0.0, ..tiny_cfg() };
        let data = load_data(&cfg).unwrap();
        let init = init_teacher(&cfg, &data).unwrap();
        let t = train_teacher(&cfg, &data).unwrap();
        assert_eq!(t.model, init);
        let (_, z) = init.infer(data.test.x()).unwrap();
        assert_eq!(t.final_acc(), accuracy(&z, data.test.y()));
    }

    #[test]
    fn student_heads_must_match_setting() {
        let cfg = tiny_cfg();
        let data = load_data(&cfg).unwrap();
        let teacher = init_teacher(&cfg, &data).unwrap();
        let single = init_student(&RunConfig { setting: Setting::CeOnly, ..cfg.clone() }, &data).unwrap();
        assert!(distill_from(&cfg, &teacher, &data, single).is_err());
        let wrong_teacher = DualHeadNet::init(&[6, 4], 5, None, &mut Rng::new(0)).unwrap();
        assert!(distill(&cfg, &wrong_teacher, &data).is_err());
    }

    #[test]
    fn teacher_milestones_rescale() {
        let cfg = RunConfig::default();
        assert_eq!(teacher_milestones(&cfg), vec![15, 22]);
    }
}
