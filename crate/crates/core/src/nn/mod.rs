//! Dense tensors in, logits out: the fixed layer menu, the clipped
//! cross-entropy loss and architecture presets.

mod layer;
mod loss;
mod model;
mod presets;

pub use layer::LayerSpec;
pub use loss::{backward, cross_entropy, loss, loss_and_grad, ClippedLoss, LossAndGrad, LossOutput};
pub use model::{argmax_rows, ForwardPass, Gradients, Model, PixelDomain, Want};
pub use presets::Arch;
