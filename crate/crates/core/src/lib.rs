//! Local-descriptor image retrieval with aggregated match kernels, regional
//! aggregation over detected or gridded regions, an inverted-file index,
//! spatial verification and junk-aware evaluation.

pub mod codebook;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod index;
pub mod kernels;
pub mod regional;
pub mod rerank;
pub mod rng;
pub mod synthetic;

pub use codebook::{train_codebook, Codebook};
pub use dataset::DatasetManifest;
pub use error::{Error, ErrorClass, Result};
pub use eval::{average_precision, evaluate, GroundTruth, Metrics, Protocol, QueryTruth};
pub use features::{Descriptor, ImageFeatures, RegionBox};
pub use index::{build_index, query, IndexConfig, IndexMode, Pooling, RankedResult, RetrievalIndex, Searcher};
pub use kernels::{aggregate, kernel_similarity, AggregatedRepresentation, AggregationMode, SelectivityParams};
pub use regional::{aggregate_regional, regional_similarity, select_regions, RegionSet, RegionStrategy, RegionalMode};
pub use rng::DetRng;
