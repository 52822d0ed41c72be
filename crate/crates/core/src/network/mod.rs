//! MLP encoders with a classifier head, forward passes and SGD training.

mod arch;
mod model;
mod train;

pub use arch::{
    ArchitectureDescriptor, Block, LayerKind, LayerSpec, PermGroup, TensorAxis, HEAD_BIAS,
    HEAD_WEIGHT,
};
pub use model::{
    argmax, capture_activations, cross_entropy, evaluate, evaluate_with, forward, init_encoder,
    init_head, init_model, logits_from_last_capture, Encoder, EvalResult, ExpertRecord, Head,
    Model, LN_EPS,
};
pub use train::{linear_probe, make_expert, train, train_head, Schedule, TrainConfig};
