//! Image rasters, PPM I/O, Gaussian blurring and weather corruptions.

mod blur;
mod corruption;
mod image;

pub use blur::{
    convolve_separable, double_gaussian_blur, gaussian_blur, gaussian_kernel, gaussian_kernel_with_radius, Kernel1D,
};
pub use corruption::{apply_corruption, corrupt_dataset, CorruptionChain, CorruptionKind, CorruptionSpec};
pub use image::{decode_ppm, encode_ppm, read_image, write_image, Image};
