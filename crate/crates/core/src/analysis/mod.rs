//! Representation and budget analysis: the k>1 token bottleneck, class
//! separability scoring, PCA projection, inference token accounting, and
//! the ablation sweep driver.

pub mod budget;
pub mod features;
pub mod fisher;
pub mod pca;
pub mod sweep;
pub mod topk;

pub use budget::{inference_token_count, BudgetConfig};
pub use features::{probe_features, ProbeFeatures};
pub use fisher::{fisher_ratio, LabeledFeatures, ScatterDecomposition};
pub use pca::{pca_project, scatter_svg, PcaResult};
pub use sweep::{sweep, SweepAxis, SweepRow};
pub use topk::top_k_world_tokens;
