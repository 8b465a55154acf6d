//! Image-space pieces: priors, edge detection, fidelity metrics, raster IO.

pub mod canny;
pub mod io;
pub mod metrics;
pub mod regularizers;

pub use canny::{canny_edges, gt_baseline_point, BaselinePoint, CannyParams, FinMode};
pub use metrics::{mse, psnr, ssim};
pub use regularizers::{r_canny, r_mean, r_soft_edge, r_tv, ChannelMeans};
