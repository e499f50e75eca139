use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Affine layer `x·W + b` with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Fully connected network with ReLU between layers. The activation after
/// the last layer is configurable: feature extractors end in ReLU, heads end
/// in identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    output_activation: Activation,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Matrix>,
    preacts: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient buffer shaped like an `Mlp`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>, output_activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("an Mlp needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::shape("Mlp::new", format!("bias of {} in layer {i}", l.out_dim()), format!("{}", l.bias.len())));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::shape("Mlp::new", format!("layer {i} input {}", layers[i - 1].out_dim()), format!("{}", l.in_dim())));
            }
        }
        Ok(Mlp { layers, output_activation })
    }

    /// Kaiming-uniform weights (bound `√(6/fan_in)`) for layers followed by
    /// ReLU, `√(3/fan_in)` for a final identity layer; zero biases.
    pub fn init(widths: &[usize], output_activation: Activation, rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (widths[i], widths[i + 1]);
                let relu_after = i + 1 < n || output_activation == Activation::Relu;
                let gain = if relu_after { 6.0 } else { 3.0 };
                let bound = (gain / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.uniform_in(-bound, bound)).collect();
                Layer { weight: Matrix::from_raw(fan_in, fan_out, data), bias: vec![0.0; fan_out] }
            })
            .collect();
        Mlp::new(layers, output_activation)
    }

    pub fn zeros(widths: &[usize], output_activation: Activation) -> Result<Self> {
        let layers = widths.windows(2).map(|w| Layer { weight: Matrix::zeros(w[0], w[1]), bias: vec![0.0; w[1]] }).collect();
        Mlp::new(layers, output_activation)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim() * l.out_dim() + l.out_dim()).sum()
    }

    fn relu_after(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.output_activation == Activation::Relu
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("Mlp::forward", format!("{} input columns", self.input_dim()), format!("{}", x.cols())));
        }
        let mut cache = MlpCache { inputs: Vec::with_capacity(self.layers.len()), preacts: Vec::with_capacity(self.layers.len()) };
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&l.weight)?;
            z.add_row_vector(&l.bias)?;
            let next = if self.relu_after(i) { z.map(|v| v.max(0.0)) } else { z.clone() };
            cache.inputs.push(h);
            cache.preacts.push(z);
            h = next;
        }
        Ok((h, cache))
    }

    /// Forward pass without keeping the cache.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("Mlp::infer", format!("{} input columns", self.input_dim()), format!("{}", x.cols())));
        }
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?;
            h.add_row_vector(&l.bias)?;
            if self.relu_after(i) {
                h.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Parameter gradients and `∂/∂input` given `∂/∂output`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if cache.preacts.len() != self.layers.len() {
            return Err(Error::shape(
                "Mlp::backward",
                format!("cache for {} layers", self.layers.len()),
                format!("{}", cache.preacts.len()),
            ));
        }
        let last = &cache.preacts[self.layers.len() - 1];
        if grad_out.shape() != last.shape() {
            return Err(Error::shape(
                "Mlp::backward",
                format!("{}x{} output gradient", last.rows(), last.cols()),
                format!("{}x{}", grad_out.rows(), grad_out.cols()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if self.relu_after(i) {
                g = g.zip_map(&cache.preacts[i], |gv, z| if z > 0.0 { gv } else { 0.0 })?;
            }
            let weight = cache.inputs[i].t_matmul(&g)?;
            let bias = g.column_sums();
            let g_in = g.matmul_t(&self.layers[i].weight)?;
            grads.push(LayerGrad { weight, bias });
            g = g_in;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, g))
    }

    /// All parameters flattened layer by layer (weight row-major, then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("Mlp::set_params_flat", format!("{}", self.param_count()), format!("{}", flat.len())));
        }
        let mut pos = 0;
        for l in &mut self.layers {
            let nw = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[pos..pos + nw]);
            pos += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }
}

impl MlpCache {
    /// Pre-activations of every layer, in order.
    pub fn preacts(&self) -> &[Matrix] {
        &self.preacts
    }
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers()
                .iter()
                .map(|l| LayerGrad { weight: Matrix::zeros(l.in_dim(), l.out_dim()), bias: vec![0.0; l.out_dim()] })
                .collect(),
        }
    }

    /// Each weight matrix and each bias vector as its own flat tensor.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flatten().copied().collect()
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, s: f64, other: &MlpGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape("MlpGrads::add_scaled", format!("{} layers", self.layers.len()), format!("{}", other.layers.len())));
        }
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            if a.len() != b.len() {
                return Err(Error::shape("MlpGrads::add_scaled", format!("{}", a.len()), format!("{}", b.len())));
            }
            for (x, &y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.tensors().flatten().map(|v| v * v).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|v| v.is_finite())
    }
}
