//! Ravel: large-scale qualitative evaluation of generative image model outputs.
//!
//! The crate turns two splits of embedded images (typically real and
//! generated) into an immutable *artifact bundle*: k-means clusters over the
//! union of both splits, per-cluster quality and diversity metrics,
//! dataset-level Fréchet distance and improved precision/recall, and 2D
//! projections of cluster centroids and cluster members. A read-only HTTP
//! server exposes a finalized bundle to the browser explorer.
//!
//! The stages are usable on their own:
//!
//! - [`dataset`]: manifest and embedding sidecar ingest, thumbnails.
//! - [`clustering`]: seeded k-means++ and Lloyd iteration.
//! - [`metrics`]: k-NN manifolds, per-image flags, cluster metrics,
//!   Fréchet distance, dataset summary.
//! - [`projection`]: UMAP and PCA layouts.
//! - [`pipeline`]: the end-to-end offline run that writes a bundle.
//! - [`server`]: the bundle HTTP API.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod clustering;
pub mod dataset;
pub mod metrics;
pub mod neighbors;
pub mod pipeline;
pub mod projection;
pub mod server;
pub mod synth;

mod json;

pub use clustering::{assign, kmeans, kmeans_pp_init, ClusteringResult, KMeansParams};
pub use dataset::{
    DatasetHandle, EmbeddingMatrix, EmbeddingMeta, ImageRecord, Side, SplitNames,
};
pub use projection::{pca_project, project_bundle, umap_project, Projection2D, UmapParams};
pub use metrics::{
    build_manifold, cluster_metrics, dataset_summary, frechet_distance, per_image_flags,
    ClusterMetricsRow, DatasetSummary, ManifoldIndex, PerImageFlags,
};


pub use pipeline::{run_all, ArtifactBundle, RunConfig};
