//! File formats: images, raw tensors, flat key-value configs and manifests.

pub mod config;
pub mod image;
pub mod kv;
pub mod manifest;
pub mod rawtensor;
