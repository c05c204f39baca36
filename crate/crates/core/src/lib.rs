pub mod cli;
pub mod clustering;
pub mod component_features;
pub mod fusion_calibration;
pub mod histogram_scoring;
pub mod lgst_scoring;
pub mod localization;
pub mod mask_ops;
pub mod model;
pub mod pseudo_label;
pub mod synth_bench;
pub mod tensor_io;
