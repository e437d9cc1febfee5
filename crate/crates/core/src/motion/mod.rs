//! Stage II: per-frame displacements predicted from two orthographic views.

mod field;
mod model;
mod optimize;

pub use field::{
    flat_view_index, flatten_displacement, flatten_view, motion_amplitude, reconstruct_3d, reconstruct_backward,
    smoothness_loss, DisplacementField, FlatViewVector,
};
pub use model::{time_encoding, ForwardCache, MotionModel, DEFAULT_HIDDEN, EMBED_DIM, TIME_FREQUENCIES};
pub use optimize::{
    optimize_motion, optimize_motion_from, predict_field, render_frames, Stage2Config, Stage2Output, Stage2State,
    DEFAULT_BETA, DEFAULT_FRAMES, DEFAULT_FRAME_SIZE, DEFAULT_ITERS, DEFAULT_LAMBDA_S, DEFAULT_LR,
};
