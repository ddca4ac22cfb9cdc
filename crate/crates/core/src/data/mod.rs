//! Synthetic sequences with exact ground truth, flow file formats and
//! flow visualisation.

mod color;
mod dataset;
mod flo;
mod image;
mod kitti;
mod pngio;
mod scene;
mod suite;

pub use color::{color_wheel, flow_color, flow_to_color};
pub use dataset::{
    read_frame, read_mask, write_frame, write_mask, Dataset, DatasetEntry, DatasetManifest,
    GenerateSpec, DATASET_VERSION, DATASET_FILE,
};
pub use flo::{decode_flo, encode_flo, read_flo, write_flo, FLO_MAGIC};
pub use image::Image;
pub use kitti::{read_kitti_png, write_kitti_png};
pub use scene::{blur, generate, Degradation, SceneSpec, SequenceSample, Shape, Sprite, Texture};
pub use suite::SuiteSpec;

/// Writes interleaved 8-bit RGB as a PNG.
pub fn write_rgb8(path: &std::path::Path, width: usize, height: usize, rgb: &[u8]) -> crate::Result<()> {
    let samples: Vec<u16> = rgb.iter().map(|&b| b as u16).collect();
    pngio::write(path, width, height, 3, false, &samples)
}
