//! Second-stage refinement of decoded proposals: actionness grouping (TAG),
//! boundary adjustment against TAG candidates, learned re-ranking and
//! Soft-NMS.

mod adjust;
mod nms;
mod rank;
mod tag;

pub use adjust::{adjust_boundaries, AdjustConfig};
pub use nms::{soft_nms, SoftNmsConfig};
pub use rank::{
    fit_ranker, interpolate_actionness, rank_proposals, ranker_features, Ranker, RankerConfig, RankerTrainConfig,
    CONTEXT_POINTS, INSIDE_POINTS, RANKER_POINTS, RANKER_PREFIX,
};
pub use tag::{tag_group, DEFAULT_TAG_THRESHOLDS};
