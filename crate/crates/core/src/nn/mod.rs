//! Dense numerical core: matrices, MLPs with manual backpropagation, Adam,
//! and the probability heads built on top of them.

pub mod adam;
pub mod dist;
pub mod matrix;
pub mod mlp;

pub use adam::Adam;
pub use dist::{
    categorical_entropy, categorical_head, categorical_logprob, gaussian_head, gaussian_logprob, log_softmax, softmax,
    DistSample, SampleValue,
};
pub use matrix::Matrix;
pub use mlp::{
    clip_grad_norm, mlp_backward, mlp_forward, Activation, BatchTrace, Dense, Ensemble, EnsembleBatchTrace,
    EnsembleGradients, EnsembleRecord, EnsembleTrace, Gradients, Head, Mlp, MlpRecord, Trace,
};
