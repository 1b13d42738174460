//! Trajectory prediction conditioned on history, images and an intent.

pub mod model;
#[cfg(test)]
mod tests;

pub use model::{
    positional_encoding, train_traj, ModalPrediction, ModalPredictionSet, State, TrajConfig, TrajExample, TrajPredictor,
};
