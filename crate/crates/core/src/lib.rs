//! Deeply supervised active learning for binary image segmentation.

pub mod active;
pub mod data;
pub mod metrics;
pub mod segnet;
pub mod tensor;
