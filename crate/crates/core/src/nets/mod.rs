//! Small convolutional regressors with hand-written backpropagation: the
//! facial expression network (three-term loss) and the eye network (L2 on
//! standardised targets).

mod gradcheck;
mod layers;
mod loss;
mod model;
mod tensor;
mod train;

pub use gradcheck::{max_gradient_error, random_layer_spec, LAYER_KINDS};
pub use layers::{ForwardCache, LayerSpec, Network, NetworkSpec, Shape};
pub use loss::{eye_loss, facial_kernel, facial_loss, kernel_loss, loss_visibility, LossWeights};
pub use model::{
    eye_frame_scale, eye_samples, eye_state, eye_training_samples, face_label_state, face_training_samples, kernel_scale, image_pixels,
    predict_expression, predict_eye, Model, ModelKind, ModelMeta, TargetNorm,
};
pub use tensor::Tensor;
pub use train::{
    batch_gradient, batch_tensor, predict_batch, train, DecayInterval, EpochRecord, TrainConfig, TrainSample,
};
