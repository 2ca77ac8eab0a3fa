//! Small deterministic CNN engine: the layer kinds needed by the discovery FCN
//! and the impact CNN, softmax cross-entropy, Adam/SGD and weight files.

mod io;
mod network;
pub mod ops;
mod optim;
mod spec;
mod tensor;

pub use io::{decode_weights, encode_weights, load_weights, save_weights, weights_digest};
pub use network::{
    backward, backward_from_output_grad, forward, predict, Gradients, Mode, Trace, WeightSet,
};
pub use optim::{Algorithm, OptimizerConfig, OptimizerState};
pub use spec::{
    resolve_layer, window_geometry, Activation, LayerKind, LayerSpec, NetworkSpec, Padding,
    ResolvedLayer, Rounding, Shape,
};
pub use tensor::{Scalar, Tensor};
