//! Dense feed-forward networks: parameters, probabilities, and gradients.

pub mod matrix;
pub mod network;
pub mod params;
pub mod prob;

pub use matrix::Matrix;
pub use network::{
    accuracy, backward_params, forward, layer_inputs, mean_loss, per_sample_grad_sq_norms,
    per_sample_grad_squares, predict_labels, predict_probs, row_losses, weighted_loss_and_grad,
    Batch, Objective,
};
pub use params::{mlp_specs, Activation, Layer, LayerSpec, ParamSet};
pub use prob::{
    argmax, cross_entropy, entropy, kl_div, softmax, total_variation, ProbDist, LOG_CLAMP,
    SIMPLEX_TOL,
};
