//! Self-supervised cross-view association: geometric encoder, distances,
//! losses, training and checkpoints.

pub mod checkpoint;
pub mod distance;
pub mod encoder;
pub mod fourier;
pub mod loss;
pub mod train;

pub use checkpoint::Checkpoint;
pub use distance::{image_distance, instance_distance_matrix};
pub use encoder::{EncoderInput, EncoderShape, GeometricEncoder, Parameters};
pub use fourier::fourier_encode;
pub use loss::{reprojection_loss, triplet_loss, LossBreakdown};
pub use train::{
    loss_and_grad, loss_and_grad_into, resume, sync_accuracy, train, triplet_distances,
    AssocConfig, Instance, SyncAccuracy, SyncDataset, TrainState, TripletData,
};
