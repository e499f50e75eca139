//! MLP building blocks with manual backprop, the dual-head student, the
//! gradient-alignment projection, SGD and model persistence.

mod align;
mod io;
mod mlp;
mod net;
mod sgd;

pub use align::{align_gradients, align_in_place, align_per_tensor, count_conflicts, AlignStats};
pub use io::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use mlp::{Activation, Layer, LayerGrad, Mlp, MlpCache, MlpGrads};
pub use net::{AuxHead, Backward, DualHeadNet, Forward, ForwardCache, NetGrads, DEFAULT_AUX_HIDDEN};
pub use sgd::{clip_global_norm, sgd_step, step_lr, SgdState};
