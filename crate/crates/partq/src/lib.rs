//! Part-based person re-identification with jointly learned part quality scores.
//!
//! The model splits a backbone feature map into `K` horizontal part stripes and
//! learns, per stripe, an embedding plus a scalar quality score in `(0, 1)`.
//! Quality scores are never annotated: they are optimized end-to-end because the
//! pair-weighted part distance feeds the triplet loss, so lowering the score of
//! an unreliable (occluded) part is the only way to lower the loss. A global
//! branch adds identity-aware spatial attention and pair-adaptive global
//! features aggregated from the regions both images of a pair have visible.
//! Retrieval runs in two stages: a quality-weighted part distance ranks the
//! gallery, then the top `n` candidates are re-ranked by a blend of part and
//! pairwise global distances.
//!
//! All numeric code is generic over the scalar type via [`Scalar`] (`f32` for
//! fast training runs, `f64` for gradient checking); concrete aliases such as
//! [`Model32`] are exported at the crate root.

use std::fmt;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub mod agfe;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod isa;
pub mod metrics;
pub mod model;
pub mod part_branch;
pub mod retrieval;
pub mod synth;
pub mod train;
pub mod viz;

pub use error::{Error, Result};

/// Scalar type the whole crate is generic over.
///
/// `f32` and `f64` implement it; the associated constants drive the binary
/// wire formats (checkpoints, feature dumps).
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Wire tag identifying the element type in binary containers.
    const DTYPE: u8;
    /// Element width in bytes on the wire.
    const WIDTH: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const WIDTH: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Shorthand for lifting an `f64` literal into the generic scalar type.
#[inline]
pub(crate) fn sc<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("literal representable in scalar type")
}

pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = train::Trainer<f32>;
pub type Trainer64 = train::Trainer<f64>;
pub type GalleryRecord32 = retrieval::GalleryRecord<f32>;
pub type GalleryRecord64 = retrieval::GalleryRecord<f64>;
