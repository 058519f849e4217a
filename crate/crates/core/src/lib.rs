//! Zero-shot co-segmentation, part co-segmentation and semantic point
//! correspondence over dense ViT patch descriptors.
//!
//! Descriptors arrive as VITD files (see [`descriptor_store`]) written by an
//! external extractor. Everything downstream of extraction lives here:
//! clustering, saliency voting, part discovery, best-buddy matching, the
//! evaluation metrics, and the [`pipeline`] drivers used by the CLI.

pub mod binning;
pub mod clustering;
pub mod correspondence;
pub mod cosegmentation;
pub mod descriptor_store;
pub mod error;
pub mod feature_analysis;
pub mod mask;
pub mod metrics;
pub mod part_cosegmentation;
pub mod pipeline;
pub mod render;

pub use descriptor_store::{DescriptorField, DescriptorMatrix, Facet, Field, FieldMeta, SaliencyField};
pub use error::{Error, Result};
pub use mask::LabelMask;
