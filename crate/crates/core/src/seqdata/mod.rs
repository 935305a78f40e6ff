//! Dynamics sequences, their on-disk formats, manifests, and batching.
//!
//! A [`DynSequence`] is a `T x 103` matrix: 100 expression coefficients
//! followed by 3 jaw rotations (radians) per frame. Static shape, global pose
//! and translation never enter this crate.

mod batch;
mod fdyn;
mod manifest;
mod shape_stats;

pub use batch::{make_batches, pad_or_crop, Batch, BatchStream, CropPadPolicy, Dataset, LabelMap};
pub use fdyn::{
    decode_sequence, encode_sequence, read_sequence, write_sequence, FDYN_MAGIC, FDYN_VERSION,
};
pub use manifest::{
    read_manifest, validate_manifest, write_manifest, Group, Manifest, SpeakerSummary, Split,
    UtteranceRecord, ValidationReport, Violation, ViolationKind,
};
pub use shape_stats::{read_shape_stats, write_shape_stats, ShapeStatsRow};

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};

pub const EXPRESSION_DIM: usize = 100;
pub const JAW_DIM: usize = 3;
/// Columns per frame: expression then jaw.
pub const FEATURE_DIM: usize = EXPRESSION_DIM + JAW_DIM;
pub const DEFAULT_FPS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DynSequence {
    frames: Array2<f32>,
    fps: f64,
}

impl DynSequence {
    pub fn new(frames: Array2<f32>, fps: f64) -> Result<Self> {
        if frames.ncols() != FEATURE_DIM {
            return Err(Error::Dimension {
                expected: FEATURE_DIM,
                found: frames.ncols(),
            });
        }
        if frames.nrows() == 0 {
            return Err(Error::Data("sequence has no frames".into()));
        }
        if let Some((i, _)) = frames.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at frame {}, column {}",
                i / FEATURE_DIM,
                i % FEATURE_DIM
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Data(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            frames: frames.as_standard_layout().into_owned(),
            fps,
        })
    }

    pub fn true_length(&self) -> usize {
        self.frames.nrows()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = fps;
        self
    }

    pub fn frames(&self) -> ArrayView2<'_, f32> {
        self.frames.view()
    }

    pub fn expression(&self) -> ArrayView2<'_, f32> {
        self.frames.slice(s![.., ..EXPRESSION_DIM])
    }

    pub fn jaw(&self) -> ArrayView2<'_, f32> {
        self.frames.slice(s![.., EXPRESSION_DIM..])
    }

    pub fn into_frames(self) -> Array2<f32> {
        self.frames
    }
}
