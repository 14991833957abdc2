//! Single-concept learning: the query encoder, norm adaptation and the
//! concept-module artifact.

pub mod acn;
pub mod module;
pub mod qformer;

pub use acn::{acn, acn_var};
pub use module::{ConceptModule, LayerFactors, ModuleMeta};
pub use qformer::{QFormer, QFormerConfig};
