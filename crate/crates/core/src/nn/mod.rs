//! Neural IVIM estimator: network, objectives, training and weight files.

mod io;
mod loss;
mod network;
mod train;

pub use io::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_FORMAT_VERSION};
pub use loss::{
    loss_dc, loss_supervised, loss_total, loss_unsupervised, LossAxis, LossWeights, TrainingMode,
};
pub use network::{
    init_network, predict, predict_samples, Activation, NetworkConfig, NetworkWeights, OutputRanges,
    OutputTransform, Prediction,
};
pub use train::{gradient_check, loss_and_gradient, train, TrainingConfig, TrainingHistory};
