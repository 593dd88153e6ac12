//! Timestamp-supervised temporal activity segmentation.
//!
//! Videos come as per-frame feature sequences with a single annotated frame
//! per action segment. A graph network propagates those sparse labels along
//! the timeline into dense framewise labels, which in turn supervise a
//! multi-stage temporal convolutional segmenter. Training alternates between
//! the two models; see [`trainer`] for the schedule.

mod bytes;
pub mod data;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod segmenter;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{Matrix, Real};
