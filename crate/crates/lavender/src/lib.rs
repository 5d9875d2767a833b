//! Attention-alignment fine-tuning for a toy vision-language transformer.
//!
//! A student transformer answers questions about a synthetic color grid while
//! its per-word text-to-patch attention maps are pulled, via an MSE loss,
//! toward low-entropy teacher saliency maps. The total objective is
//!
//! ```text
//! L_total = L_vlm + lambda * L_att
//! ```
//!
//! where `L_vlm` is the usual next-token negative log-likelihood and `L_att`
//! measures the squared distance between the aligner-refined student map and
//! the teacher map for each matched word. The weight `lambda` plays the role
//! of an inverse noise variance on the map mismatch.
//!
//! The pipeline has two stages: teacher maps are generated (or loaded) once
//! up front, then training jointly minimizes the two losses with a choice of
//! attention aggregation, word matching, and fine-tuning strategy. See the
//! guide under `book/` for a narrated tour.

pub mod agg;
pub mod aligner;
pub mod analysis;
pub mod checkpoint;
pub mod error;
pub mod params;
pub mod recon;
pub mod rng;
pub mod teacher;
pub mod tensor;
pub mod train;
pub mod vlm;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
