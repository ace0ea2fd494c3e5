//! Task discrepancy maximization: class-wise channel weights built from
//! representativeness scores.
//!
//! * Support attention (SAM) scores each class prototype's channels against
//!   its own mean spatial feature (intra) and the other classes' (inter), and
//!   maps both through FC blocks into a support weight per class.
//! * Query attention (QAM) scores a query's channels against its own mean
//!   spatial feature and maps that into a query weight.
//! * The task weight for class `i` blends the two and scales both the class
//!   prototype and the query before the distance is taken.

mod diagnostic;
mod fc;
mod scores;
mod weights;

pub use diagnostic::{channel_variance_diagnostic, ChannelVariance};
pub use fc::{fc_block_forward, FcBlockParams};
pub use scores::{inter_score, intra_score, prototype, spatial_pool, PoolMode, ScoreVector, SpatialMap};
pub use weights::{
    apply_weights, init_tdm, query_weights, support_weights, task_weights, TdmParams, TdmSettings, TdmStats,
};

pub(crate) use scores::{pool, prototypes};
pub(crate) use weights::{TdmGraph, TdmVars};
