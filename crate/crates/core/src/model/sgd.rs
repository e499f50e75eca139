use super::mlp::{Mlp, MlpGrads};
use super::net::{DualHeadNet, NetGrads};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// velocity: `v ← m·v + g + wd·θ`, then `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: NetGrads,
}

impl SgdState {
    pub fn new(net: &DualHeadNet, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdState { lr, momentum, weight_decay, velocity: NetGrads::zeros_like(net) }
    }

    pub fn velocity(&self) -> &NetGrads {
        &self.velocity
    }
}

/// One optimizer step. A gradient containing NaN or ±∞ is refused before
/// any parameter or velocity is touched.
pub fn sgd_step(net: &mut DualHeadNet, grads: &NetGrads, state: &mut SgdState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let (lr, m, wd) = (state.lr, state.momentum, state.weight_decay);
    let (backbone, main, aux) = net.parts_mut();
    let v = &mut state.velocity;
    step_mlp(backbone, &grads.backbone, &mut v.backbone, lr, m, wd)?;
    step_mlp(main, &grads.main_head, &mut v.main_head, lr, m, wd)?;
    match (aux, &grads.aux_head, &mut v.aux_head) {
        (Some(p), Some(g), Some(vel)) => step_mlp(p, g, vel, lr, m, wd),
        (None, None, None) => Ok(()),
        _ => Err(Error::shape("sgd_step", "aux gradient matching the network", "mismatched aux head")),
    }
}

fn step_mlp(mlp: &mut Mlp, grads: &MlpGrads, vel: &mut MlpGrads, lr: f64, m: f64, wd: f64) -> Result<()> {
    if grads.layers.len() != mlp.layers().len() || vel.layers.len() != mlp.layers().len() {
        return Err(Error::shape("sgd_step", format!("{} layers", mlp.layers().len()), format!("{}", grads.layers.len())));
    }
    for ((layer, g), v) in mlp.layers_mut().iter_mut().zip(&grads.layers).zip(&mut vel.layers) {
        if g.weight.shape() != layer.weight.shape() || g.bias.len() != layer.bias.len() {
            return Err(Error::shape("sgd_step", format!("{:?}", layer.weight.shape()), format!("{:?}", g.weight.shape())));
        }
        update(layer.weight.as_mut_slice(), g.weight.as_slice(), v.weight.as_mut_slice(), lr, m, wd);
        update(&mut layer.bias, &g.bias, &mut v.bias, lr, m, wd);
    }
    Ok(())
}

fn update(theta: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, m: f64, wd: f64) {
    for ((t, &gi), vi) in theta.iter_mut().zip(g).zip(v) {
        *vi = m * *vi + gi + wd * *t;
        *t -= lr * *vi;
    }
}

/// Rescale `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut NetGrads, max_norm: f64) -> f64 {
    let n = grads.norm_sq().sqrt();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

/// Step-decay schedule: `base · factor^(number of milestones ≤ epoch)`.
pub fn step_lr(base: f64, epoch: usize, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base * factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer};
    use crate::numerics::Matrix;

    fn scalar_net(theta: f64) -> DualHeadNet {
        let bb = Mlp::new(vec![Layer { weight: Matrix::identity(1), bias: vec![0.0] }], Activation::Relu).unwrap();
        let main = Mlp::new(vec![Layer { weight: Matrix::from_raw(1, 1, vec![theta]), bias: vec![0.0] }], Activation::Identity).unwrap();
        DualHeadNet::new(bb, main, None).unwrap()
    }

    fn unit_grad_on_classifier(net: &DualHeadNet) -> NetGrads {
        let mut g = NetGrads::zeros_like(net);
        g.main_head.layers[0].weight.as_mut_slice()[0] = 1.0;
        g
    }

    #[test]
    fn plain_step() {
        let mut net = scalar_net(0.0);
        let g = unit_grad_on_classifier(&net);
        let mut s = SgdState::new(&net, 0.1, 0.0, 0.0);
        sgd_step(&mut net, &g, &mut s).unwrap();
        assert!((net.classifier()[(0, 0)] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut net = scalar_net(0.0);
        let g = unit_grad_on_classifier(&net);
        let mut s = SgdState::new(&net, 0.1, 0.9, 0.0);
        sgd_step(&mut net, &g, &mut s).unwrap();
        sgd_step(&mut net, &g, &mut s).unwrap();
        assert!((net.classifier()[(0, 0)] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut rng = crate::numerics::Rng::new(1);
        let mut net = DualHeadNet::init(&[3, 4], 2, Some(crate::model::AuxHead::Linear), &mut rng).unwrap();
        let before = net.clone();
        let g = NetGrads::zeros_like(&net);
        let mut s = SgdState::new(&net, 0.5, 0.9, 0.0);
        sgd_step(&mut net, &g, &mut s).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut net = scalar_net(2.0);
        let g = NetGrads::zeros_like(&net);
        let mut s = SgdState::new(&net, 0.1, 0.0, 0.5);
        sgd_step(&mut net, &g, &mut s).unwrap();
        assert!((net.classifier()[(0, 0)] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_refused_untouched() {
        let mut net = scalar_net(1.0);
        let mut g = unit_grad_on_classifier(&net);
        g.backbone.layers[0].bias[0] = f64::NAN;
        let mut s = SgdState::new(&net, 0.1, 0.9, 0.0);
        let before = (net.clone(), s.clone());
        assert!(matches!(sgd_step(&mut net, &g, &mut s), Err(Error::NonFiniteGradient)));
        assert_eq!((net, s), before);
    }

    #[test]
    fn clipping_and_schedule() {
        let net = scalar_net(0.0);
        let mut g = unit_grad_on_classifier(&net);
        g.main_head.layers[0].bias[0] = 1.0;
        let n = clip_global_norm(&mut g, 1.0);
        assert!((n - 2f64.sqrt()).abs() < 1e-15);
        assert!((g.norm_sq() - 1.0).abs() < 1e-15);
        assert_eq!(step_lr(0.05, 0, &[30, 45], 0.1), 0.05);
        assert!((step_lr(0.05, 30, &[30, 45], 0.1) - 0.005).abs() < 1e-18);
        assert!((step_lr(0.05, 59, &[30, 45], 0.1) - 0.0005).abs() < 1e-18);
    }
}
