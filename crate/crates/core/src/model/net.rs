use super::mlp::{Activation, Mlp, MlpCache, MlpGrads};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Default hidden width of a nonlinear auxiliary head.
pub const DEFAULT_AUX_HIDDEN: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuxHead {
    Linear,
    Mlp { hidden: usize },
}

impl Default for AuxHead {
    fn default() -> Self {
        AuxHead::Mlp { hidden: DEFAULT_AUX_HIDDEN }
    }
}

/// Backbone `D → d` (ReLU features), linear main classifier `d → K`, and an
/// optional auxiliary head `d → K`. Teachers are built without the aux head.
#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadNet {
    backbone: Mlp,
    main_head: Mlp,
    aux_head: Option<Mlp>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    backbone: MlpCache,
    main_head: MlpCache,
    aux_head: Option<MlpCache>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub features: Matrix,
    pub main_logits: Matrix,
    pub aux_logits: Option<Matrix>,
    pub cache: ForwardCache,
}

/// Gradients with the two backbone contributions kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub backbone_from_main: MlpGrads,
    pub backbone_from_aux: Option<MlpGrads>,
    pub main_head: MlpGrads,
    pub aux_head: Option<MlpGrads>,
}

/// Gradient buffer shaped like a `DualHeadNet`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub backbone: MlpGrads,
    pub main_head: MlpGrads,
    pub aux_head: Option<MlpGrads>,
}

impl DualHeadNet {
    pub fn new(backbone: Mlp, main_head: Mlp, aux_head: Option<Mlp>) -> Result<Self> {
        if backbone.output_activation() != Activation::Relu {
            return Err(Error::InvalidArgument("backbone must end in ReLU".into()));
        }
        if main_head.layers().len() != 1 || main_head.output_activation() != Activation::Identity {
            return Err(Error::InvalidArgument("main head must be a single linear layer".into()));
        }
        let d = backbone.output_dim();
        if main_head.input_dim() != d {
            return Err(Error::shape("DualHeadNet::new", format!("main head input {d}"), format!("{}", main_head.input_dim())));
        }
        if let Some(aux) = &aux_head {
            if aux.output_activation() != Activation::Identity {
                return Err(Error::InvalidArgument("aux head must end in identity".into()));
            }
            if aux.input_dim() != d || aux.output_dim() != main_head.output_dim() {
                return Err(Error::shape(
                    "DualHeadNet::new",
                    format!("aux head {d}→{}", main_head.output_dim()),
                    format!("{}→{}", aux.input_dim(), aux.output_dim()),
                ));
            }
        }
        Ok(DualHeadNet { backbone, main_head, aux_head })
    }

    /// Randomly initialised network. `backbone_widths` runs from the input
    /// dimension to the feature dimension. Parameters are drawn backbone
    /// first, then main head, then aux head, so the aux head never shifts the
    /// draws of the other two.
    pub fn init(backbone_widths: &[usize], classes: usize, aux: Option<AuxHead>, rng: &mut Rng) -> Result<Self> {
        let backbone = Mlp::init(backbone_widths, Activation::Relu, rng)?;
        let d = backbone.output_dim();
        let main_head = Mlp::init(&[d, classes], Activation::Identity, rng)?;
        let aux_head = match aux {
            None => None,
            Some(AuxHead::Linear) => Some(Mlp::init(&[d, classes], Activation::Identity, rng)?),
            Some(AuxHead::Mlp { hidden }) => Some(Mlp::init(&[d, hidden, classes], Activation::Identity, rng)?),
        };
        DualHeadNet::new(backbone, main_head, aux_head)
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn main_head(&self) -> &Mlp {
        &self.main_head
    }

    pub fn aux_head(&self) -> Option<&Mlp> {
        self.aux_head.as_ref()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Mlp, &mut Mlp, Option<&mut Mlp>) {
        (&mut self.backbone, &mut self.main_head, self.aux_head.as_mut())
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.main_head.output_dim()
    }

    /// Classifier weights `d×K`.
    pub fn classifier(&self) -> &Matrix {
        &self.main_head.layers()[0].weight
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count() + self.main_head.param_count() + self.aux_head.as_ref().map_or(0, Mlp::param_count)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        let (features, backbone) = self.backbone.forward(x)?;
        let (main_logits, main_head) = self.main_head.forward(&features)?;
        let (aux_logits, aux_head) = match &self.aux_head {
            Some(h) => {
                let (z, c) = h.forward(&features)?;
                (Some(z), Some(c))
            }
            None => (None, None),
        };
        Ok(Forward { features, main_logits, aux_logits, cache: ForwardCache { backbone, main_head, aux_head } })
    }

    /// Features and main logits without caching.
    pub fn infer(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let features = self.backbone.infer(x)?;
        let logits = self.main_head.infer(&features)?;
        Ok((features, logits))
    }

    pub fn aux_logits(&self, features: &Matrix) -> Result<Option<Matrix>> {
        self.aux_head.as_ref().map(|h| h.infer(features)).transpose()
    }

    /// Backpropagate the main-logit gradient (and the aux-logit gradient when
    /// the net has an aux head). Main-head gradients come only from
    /// `grad_main`, aux-head gradients only from `grad_aux`.
    pub fn backward(&self, cache: &ForwardCache, grad_main: &Matrix, grad_aux: Option<&Matrix>) -> Result<Backward> {
        if self.aux_head.is_some() != cache.aux_head.is_some() {
            return Err(Error::shape("DualHeadNet::backward", "cache from this network", "cache with different heads"));
        }
        let (main_head, g_feat_main) = self.main_head.backward(&cache.main_head, grad_main)?;
        let (backbone_from_main, _) = self.backbone.backward(&cache.backbone, &g_feat_main)?;
        let (aux_head, backbone_from_aux) = match (&self.aux_head, &cache.aux_head, grad_aux) {
            (Some(h), Some(c), Some(g)) => {
                let (gh, g_feat) = h.backward(c, g)?;
                let (gb, _) = self.backbone.backward(&cache.backbone, &g_feat)?;
                (Some(gh), Some(gb))
            }
            (None, _, Some(_)) => {
                return Err(Error::InvalidArgument("aux gradient given to a network without an aux head".into()));
            }
            _ => (None, None),
        };
        Ok(Backward { backbone_from_main, backbone_from_aux, main_head, aux_head })
    }
}

impl NetGrads {
    pub fn zeros_like(net: &DualHeadNet) -> Self {
        NetGrads {
            backbone: MlpGrads::zeros_like(net.backbone()),
            main_head: MlpGrads::zeros_like(net.main_head()),
            aux_head: net.aux_head().map(MlpGrads::zeros_like),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.is_finite() && self.main_head.is_finite() && self.aux_head.as_ref().is_none_or(MlpGrads::is_finite)
    }

    pub fn norm_sq(&self) -> f64 {
        self.backbone.norm_sq() + self.main_head.norm_sq() + self.aux_head.as_ref().map_or(0.0, MlpGrads::norm_sq)
    }

    pub fn scale(&mut self, s: f64) {
        self.backbone.scale(s);
        self.main_head.scale(s);
        if let Some(a) = &mut self.aux_head {
            a.scale(s);
        }
    }

    /// Flattened in backbone, main head, aux head order (matches
    /// `DualHeadNet::params_flat`).
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.backbone.flat();
        v.extend(self.main_head.flat());
        if let Some(a) = &self.aux_head {
            v.extend(a.flat());
        }
        v
    }
}

impl DualHeadNet {
    pub fn params_flat(&self) -> Vec<f64> {
        let mut v = self.backbone.params_flat();
        v.extend(self.main_head.params_flat());
        if let Some(a) = &self.aux_head {
            v.extend(a.params_flat());
        }
        v
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("DualHeadNet::set_params_flat", format!("{}", self.param_count()), format!("{}", flat.len())));
        }
        let nb = self.backbone.param_count();
        let nm = self.main_head.param_count();
        self.backbone.set_params_flat(&flat[..nb])?;
        self.main_head.set_params_flat(&flat[nb..nb + nm])?;
        if let Some(a) = &mut self.aux_head {
            a.set_params_flat(&flat[nb + nm..])?;
        }
        Ok(())
    }
}
