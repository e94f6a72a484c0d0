//! Gaze trajectories, PPM images, and the dataset manifest.

mod gaze;
mod manifest;
mod ppm;

pub use gaze::{
    fit_length, load_gaze_csv, normalize_gaze, parse_gaze_csv, write_gaze_csv, GazeTrajectory,
};
pub use manifest::{
    split_dataset, DatasetManifest, LabeledSample, SampleEntry, Split, MANIFEST_VERSION,
};
pub use ppm::{decode_ppm, encode_ppm, load_ppm, normalize_image, write_ppm, ImageSample};

/// Coordinate frame gaze is rescaled into before encoding.
pub const GAZE_FRAME: f64 = 224.0;

/// Default trajectory length after padding or truncation.
pub const GAZE_LEN: usize = 176;

/// Model-ready gaze: rescaled into the `GAZE_FRAME` square, then fitted to
/// `len` points, as an `len×2` tensor.
pub fn gaze_input(gaze: &GazeTrajectory, len: usize) -> crate::Result<crate::nd::Tensor> {
    fit_length(&normalize_gaze(gaze, GAZE_FRAME)?, len)?.to_tensor()
}
