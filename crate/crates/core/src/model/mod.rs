//! Detector graph: YOLOv5 convolutional blocks, Swin encoder blocks and
//! their integration, plus output decoding and checkpoints.

mod blocks;
pub mod checkpoint;
mod config;
mod decode;
pub mod swin;
mod yolo;

pub use blocks::{Bottleneck, ConvBlock, Sppf, C3};
pub use config::{scaled_anchors, ModelConfig, SwinConfig, CANONICAL_ANCHORS, NUM_ANCHORS, SPPF_KERNEL, STRIDES};
pub use decode::decode;
pub use swin::{attention_mask, roll, window_partition, window_reverse, SwinBlock, SwinStage, WindowAttention};
pub use yolo::{Detect, DetectionOutput, Detector, LayerInfo, Stage, SwinYolo};
