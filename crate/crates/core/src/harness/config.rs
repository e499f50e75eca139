use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{AuxHead, DEFAULT_AUX_HIDDEN};

/// Which losses reach which head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// CE on the single main head.
    CeOnly,
    /// BinaryKL on the single main head.
    BklOnly,
    /// CE + α·BinaryKL, both on the single main head.
    CePlusBkl,
    /// CE on the main head, α·BinaryKL-Norm on the aux head.
    Dhkd,
    /// CE on the main head, α·vanilla KD on the aux head.
    DhkdVanilla,
}

impl Setting {
    pub const ALL: [Setting; 5] = [Setting::CeOnly, Setting::BklOnly, Setting::CePlusBkl, Setting::Dhkd, Setting::DhkdVanilla];

    pub fn name(self) -> &'static str {
        match self {
            Setting::CeOnly => "ce_only",
            Setting::BklOnly => "bkl_only",
            Setting::CePlusBkl => "ce_plus_bkl",
            Setting::Dhkd => "dhkd",
            Setting::DhkdVanilla => "dhkd_vanilla",
        }
    }

    pub fn dual_head(self) -> bool {
        matches!(self, Setting::Dhkd | Setting::DhkdVanilla)
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setting::ALL.into_iter().find(|v| v.name() == s.replace('-', "_")).ok_or_else(|| {
            Error::Config(format!("unknown setting {s:?} (expected one of ce_only, bkl_only, ce_plus_bkl, dhkd, dhkd_vanilla)"))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxKind {
    Linear,
    Mlp,
}

/// Everything that determines a run. Field names double as config-file
/// keys and (kebab-cased) CLI flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub data_seed: u64,
    /// IDX inputs; when set they replace the synthetic data.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Hidden and feature widths of the teacher backbone.
    pub teacher_widths: Vec<usize>,
    /// Hidden and feature widths of the student backbone.
    pub student_widths: Vec<usize>,
    pub aux_head: AuxKind,
    pub aux_hidden: usize,
    pub tau: f64,
    pub alpha: f64,
    pub alignment: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub milestones: Vec<usize>,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub setting: Setting,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            classes: 10,
            dim: 32,
            separation: 3.0,
            train_per_class: 500,
            test_per_class: 200,
            data_seed: 0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            teacher_widths: vec![256, 256],
            student_widths: vec![64, 32],
            aux_head: AuxKind::Mlp,
            aux_hidden: DEFAULT_AUX_HIDDEN,
            tau: 2.0,
            alpha: 1.0,
            alignment: true,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 60,
            teacher_epochs: 30,
            milestones: vec![30, 45],
            batch_size: 64,
            clip_norm: None,
            seed: 0,
            setting: Setting::Dhkd,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "classes",
    "dim",
    "separation",
    "train_per_class",
    "test_per_class",
    "data_seed",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "teacher_widths",
    "student_widths",
    "aux_head",
    "aux_hidden",
    "tau",
    "alpha",
    "alignment",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "teacher_epochs",
    "milestones",
    "batch_size",
    "clip_norm",
    "seed",
    "setting",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn parse_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn join(v: &[usize]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Set one field from its textual form. Keys may use `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "classes" => self.classes = parse(k, v)?,
            "dim" => self.dim = parse(k, v)?,
            "separation" => self.separation = parse(k, v)?,
            "train_per_class" => self.train_per_class = parse(k, v)?,
            "test_per_class" => self.test_per_class = parse(k, v)?,
            "data_seed" => self.data_seed = parse(k, v)?,
            "train_images" => self.train_images = parse_path(v),
            "train_labels" => self.train_labels = parse_path(v),
            "test_images" => self.test_images = parse_path(v),
            "test_labels" => self.test_labels = parse_path(v),
            "teacher_widths" => self.teacher_widths = parse_list(k, v)?,
            "student_widths" => self.student_widths = parse_list(k, v)?,
            "aux_head" => {
                self.aux_head = match v {
                    "linear" => AuxKind::Linear,
                    "mlp" => AuxKind::Mlp,
                    _ => return Err(Error::Config(format!("aux_head: expected linear or mlp, got {v:?}"))),
                }
            }
            "aux_hidden" => self.aux_hidden = parse(k, v)?,
            "tau" => self.tau = parse(k, v)?,
            "alpha" => self.alpha = parse(k, v)?,
            "alignment" => self.alignment = parse_bool(k, v)?,
            "lr" => self.lr = parse(k, v)?,
            "momentum" => self.momentum = parse(k, v)?,
            "weight_decay" => self.weight_decay = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(k, v)?,
            "milestones" => self.milestones = parse_list(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "clip_norm" => self.clip_norm = if v == "none" || v == "off" { None } else { Some(parse(k, v)?) },
            "seed" => self.seed = parse(k, v)?,
            "setting" => self.setting = v.parse()?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Textual value of one field, in the form `set` accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key.replace('-', "_").as_str() {
            "classes" => self.classes.to_string(),
            "dim" => self.dim.to_string(),
            "separation" => self.separation.to_string(),
            "train_per_class" => self.train_per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "train_images" => show_path(&self.train_images),
            "train_labels" => show_path(&self.train_labels),
            "test_images" => show_path(&self.test_images),
            "test_labels" => show_path(&self.test_labels),
            "teacher_widths" => join(&self.teacher_widths),
            "student_widths" => join(&self.student_widths),
            "aux_head" => match self.aux_head {
                AuxKind::Linear => "linear".into(),
                AuxKind::Mlp => "mlp".into(),
            },
            "aux_hidden" => self.aux_hidden.to_string(),
            "tau" => self.tau.to_string(),
            "alpha" => self.alpha.to_string(),
            "alignment" => if self.alignment { "on" } else { "off" }.into(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "epochs" => self.epochs.to_string(),
            "teacher_epochs" => self.teacher_epochs.to_string(),
            "milestones" => join(&self.milestones),
            "batch_size" => self.batch_size.to_string(),
            "clip_norm" => self.clip_norm.map_or("none".into(), |v| v.to_string()),
            "seed" => self.seed.to_string(),
            "setting" => self.setting.name().into(),
            _ => return None,
        })
    }

    /// Config-file rendering that `apply_text` reads back to an equal value.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap())).collect()
    }

    pub fn aux(&self) -> AuxHead {
        match self.aux_head {
            AuxKind::Linear => AuxHead::Linear,
            AuxKind::Mlp => AuxHead::Mlp { hidden: self.aux_hidden },
        }
    }

    pub fn uses_idx(&self) -> bool {
        self.train_images.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be > 0, got {}", self.tau));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be ≥ 0, got {}", self.alpha));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be ≥ 0, got {}", self.lr));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0, 1) and weight_decay must be ≥ 0".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be ≥ 1".into());
        }
        if self.teacher_widths.is_empty() || self.student_widths.is_empty() {
            return fail("teacher_widths and student_widths need at least one width".into());
        }
        if self.teacher_widths.contains(&0) || self.student_widths.contains(&0) || self.aux_hidden == 0 {
            return fail("layer widths must be ≥ 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if self.train_images.is_some() != self.train_labels.is_some() || self.test_images.is_some() != self.test_labels.is_some() {
            return fail("IDX images and labels must be given together".into());
        }
        if self.test_images.is_some() && self.train_images.is_none() {
            return fail("IDX test files given without training files".into());
        }
        Ok(())
    }
}
