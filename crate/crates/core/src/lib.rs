//! Calibrated RGB-D early fusion for object detection.
//!
//! The pipeline projects depth-sensor point clouds into the camera image,
//! scales the resulting depth maps to 8 bits, stacks them with RGB as a
//! fourth channel, and trains a small two-stage detector on RGB, depth or
//! fused inputs.
//!
//! Modules, in pipeline order:
//!
//! - [`calib`]: calibration files, pinhole projection, calibration-pair pruning.
//! - [`depth`]: point cloud to depth map, depth statistics, normalization and scaling.
//! - [`fusion`]: RGB-D packing, PNG persistence, channel selection, input normalization.
//! - [`dataset`]: COCO ingestion, splits, class balance, variant views, synthetic scenes.
//! - [`detect`]: anchors, IoU, NMS, RoI pooling, the detector network and checkpoints.
//! - [`train`]: Nesterov SGD, early stopping, repeated runs.
//! - [`evaluate`]: matching, AP, mAP@0.5, Mean Precision, aggregation and reports.
//! - [`pipeline`]: directory-level glue between the modules, shared by the CLI and tests.
//! - [`cli`]: the `rgbd` command-line tool.
//!
//! [`tensor`] holds the dense arrays the detector computes on and [`seed`] the
//! seed derivation every random stream goes through.

pub mod calib;
pub mod cli;
pub mod dataset;
pub mod depth;
pub mod detect;
pub mod evaluate;
pub mod fusion;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod train;
