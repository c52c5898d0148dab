//! Adversarial multi-task learning for vocal bursts.

pub mod audio_io;
pub mod dataset;
pub mod diffcore;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod trainer;
