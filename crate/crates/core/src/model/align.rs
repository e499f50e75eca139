use super::mlp::MlpGrads;
use crate::error::{Error, Result};
use crate::numerics::dot;

/// Below this norm of `g_ce` the projection is skipped.
const MIN_CE_NORM: f64 = 1e-30;

/// Remove from `g_bkl` its component along `g_ce` when the two point in
/// opposing directions; otherwise return `g_bkl` unchanged.
pub fn align_gradients(g_bkl: &[f64], g_ce: &[f64]) -> Result<Vec<f64>> {
    let mut out = g_bkl.to_vec();
    align_in_place(&mut out, g_ce)?;
    Ok(out)
}

/// In-place form of [`align_gradients`]. Returns whether the pair conflicted
/// (negative inner product).
pub fn align_in_place(g_bkl: &mut [f64], g_ce: &[f64]) -> Result<bool> {
    if g_bkl.len() != g_ce.len() {
        return Err(Error::shape("align_gradients", format!("length {}", g_ce.len()), format!("{}", g_bkl.len())));
    }
    let d = dot(g_bkl, g_ce);
    if d >= 0.0 {
        return Ok(false);
    }
    let nn = dot(g_ce, g_ce);
    if nn.sqrt() < MIN_CE_NORM {
        return Ok(true);
    }
    let c = d / nn;
    for (b, &e) in g_bkl.iter_mut().zip(g_ce) {
        *b -= c * e;
    }
    Ok(true)
}

/// Counts of backbone tensors seen and found in conflict.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AlignStats {
    pub tensors: usize,
    pub conflicts: usize,
}

impl AlignStats {
    pub fn add(&mut self, other: AlignStats) {
        self.tensors += other.tensors;
        self.conflicts += other.conflicts;
    }

    pub fn rate(&self) -> f64 {
        if self.tensors == 0 {
            0.0
        } else {
            self.conflicts as f64 / self.tensors as f64
        }
    }
}

/// Count conflicting tensor pairs without modifying anything.
pub fn count_conflicts(g_kd: &MlpGrads, g_ce: &MlpGrads) -> AlignStats {
    let mut stats = AlignStats::default();
    for (a, b) in g_kd.tensors().zip(g_ce.tensors()) {
        stats.tensors += 1;
        if dot(a, b) < 0.0 {
            stats.conflicts += 1;
        }
    }
    stats
}

/// Apply the projection to every weight matrix and bias vector of `g_kd`
/// independently, each against the matching tensor of `g_ce`.
pub fn align_per_tensor(g_kd: &mut MlpGrads, g_ce: &MlpGrads) -> Result<AlignStats> {
    if g_kd.layers.len() != g_ce.layers.len() {
        return Err(Error::shape("align_per_tensor", format!("{} layers", g_ce.layers.len()), format!("{}", g_kd.layers.len())));
    }
    let mut stats = AlignStats::default();
    for (a, b) in g_kd.tensors_mut().zip(g_ce.tensors()) {
        stats.tensors += 1;
        if align_in_place(a, b)? {
            stats.conflicts += 1;
        }
    }
    Ok(stats)
}
