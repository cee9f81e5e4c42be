//! Pose inversion: a coarse pose distribution regressed from a global
//! embedding, refined by matching against re-rendered views and RANSAC-PnP.

pub mod inverse;
pub mod invert;
pub mod matching;
pub mod pnp;
pub mod ransac;

pub use inverse::{
    coarse_mode, pose_target, train_inverse_model, GmmComponent, InverseConfig, InverseMetadata, InverseModel,
    PoseDistribution, TrainedInverse,
};
pub use invert::{
    invert, pose_rows, refine_pose, FineResult, InversionConfig, InversionReport, InversionStatus, MatchSource,
    PoseEstimate, QueryView,
};
pub use matching::{detect_keypoints, match_features, oracle_correspondences, Correspondence, MatchConfig, MIN_SAMPLE};
pub use pnp::{reprojection_error, solve_pnp, PnpConfig, PnpResult};
pub use ransac::{ransac_pnp, required_iterations, RansacConfig, RansacResult};
