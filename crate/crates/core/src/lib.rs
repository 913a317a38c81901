//! Ground-truth inference for repeated object-detection and
//! instance-segmentation labels.
//!
//! Several annotators label the same images; this crate estimates one label
//! set per image. The localization stage ([`localize`]) matches labels from
//! different annotators by generalized IoU and fuses their regions, which
//! turns the problem into per-group classification solved by majority vote
//! or Dawid-Skene EM ([`inference`]). Weighted boxes fusion ([`wbf`]) is
//! provided as the keep-everything baseline.
//!
//! All geometry is exact: coordinates are arbitrary-precision rationals and
//! masks are integer bitmaps. The crate is `no_std` and needs only `alloc`.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod bbox;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod localize;
pub mod mask;
pub mod model;
pub mod rational;
pub mod seed;
pub mod split;
pub mod synth;
pub mod wbf;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use geometry::{FusionPolicy, Region};
pub use mask::{Bitmap, Mask};
pub use model::{AnnotatorId, Category, CategoryId, Dataset, ImageId, ImageRecord, InstanceLabel, LabelId};
pub use rational::Rational;
