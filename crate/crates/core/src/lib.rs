//! Intensity-assisted LiDAR SLAM on organized scans.

pub mod config;
pub mod evaluate;
pub mod exec;
pub mod features;
pub mod geometry;
pub mod ikd;
pub mod image;
pub mod loop_closure;
pub mod mapping;
pub mod odometry;
pub mod pipeline;
pub mod planes;
pub mod pose_graph;
pub mod scan;
pub mod synth;
