//! Workbench for comparing human gaze heatmaps with CNN saliency maps.

pub mod autodiff;
pub mod compare;
pub mod gaze;
pub mod image;
pub mod imgstats;
pub mod map;
pub mod model;
pub mod saliency;
pub mod stats;
pub mod tensor;
pub mod trainer;
pub mod workbench;

#[cfg(any(test, feature = "oracle"))]
pub mod oracle;

pub use tensor::Tensor;
