//! Synthetic facial training corpus: seeded bases, rendering, headset
//! masking, lower-face cropping and crop augmentation.

mod basis_gen;
mod crop;
mod dataset;
mod hmd;
pub(crate) mod raster;
mod render;

pub use basis_gen::{gen_basis, SyntheticBasisSpec, Y_MOUTH};
pub use crop::{
    crop_face_region, lower_face_centroid, random_crops, Raster, Window, CROP_COLS, CROP_ROWS,
    DEFAULT_CROP_COUNT, REGION_COLS, REGION_ROWS,
};
pub(crate) use crop::random_windows;
pub use dataset::{
    frame_expression, frame_pose, gen_face_dataset, render_unmasked, sample_as_gray, subject_params,
    synthesize_frame, FaceDataConfig, FaceFrame,
};
pub use hmd::{mask_hmd, mask_hmd_rgb, HmdProxy};
pub use render::{rasterize, render_buffers, render_face, render_face_rgb, RenderBuffers, BACKGROUND};
