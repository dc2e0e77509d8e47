//! Minimal differentiable recurrent network: one LSTM layer, losses, Adam.
//!
//! Everything is `f64`. Gradients with respect to parameters and inputs come
//! from the same reverse pass in [`lstm::backward`].

pub mod adam;
pub mod loss;
pub mod lstm;

pub use adam::{AdamConfig, AdamState};
pub use loss::{bce, bce_grad, bce_logit_grad, mse, sigmoid, BCE_CLAMP};
pub use lstm::{
    backward, backward_trace, forward_sequence, lstm_step, Gradients, LstmParams, RecurrentState,
    StepLoss, Trace,
};
