//! Ensemble of learned delta-state dynamics models.

mod buffer;
mod model;
mod normalizer;
mod train;

pub use buffer::TransitionBuffer;
pub use model::{Dynamics, DynamicsModel, EnsembleMember, ModelEnsemble, Perturbation};
pub use normalizer::{Normalizer, STD_FLOOR};
pub use train::{
    train_ensemble, train_model, Adam, DynamicsTrainConfig, EarlyStopping, ModelTrainReport, TrainReport,
};
