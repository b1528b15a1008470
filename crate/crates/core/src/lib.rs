//! Face and eye performance capture for headset wearers.
//!
//! The crate covers the whole offline/online loop at desk scale: a linear
//! morphable face model with weak-perspective projection, seeded synthetic
//! face and IR-eye corpora with headset occlusion, landmark-based model
//! fitting, a classical pupil tracker with an ellipse-ratio gaze baseline,
//! a small autodiff-free CNN engine with the two regressors, and the
//! per-frame capture pipeline with its evaluation metrics.

pub mod capture;
pub mod dataset;
pub mod error;
pub mod face_model;
pub mod image;
pub mod inverse_fit;
pub mod nets;
pub mod pupil;
pub mod seed;
pub mod synth_eye;
pub mod synth_face;

pub use error::{Error, Result};
