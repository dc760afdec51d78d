//! Prediction regions built from calibration scores under each supported
//! sampling design.
//!
//! | engine | design | guarantee |
//! |---|---|---|
//! | [`split_interval_exchangeable`] | SRS with or without replacement | `>= 1 - alpha` |
//! | [`split_interval_weighted`] | PPS with replacement (WOR approximately) | `>= 1 - alpha` |
//! | [`full_conformal_interval`] | as above, no data split | `>= 1 - alpha` |
//! | [`classification_set`] | either of the above | `>= 1 - alpha` |
//! | [`stratified_interval`] | any of the above within strata | `>= 1 - alpha` per stratum |
//! | [`cluster_subsample_once`] | SRS of clusters | `>= 1 - alpha` |
//! | [`cluster_repeated_subsample`] | SRS of clusters | `>= 1 - 2 alpha` |
//! | [`cluster_double_conformal`] | SRS of clusters, no covariates | `>= 1 - alpha` |
//! | [`cluster_pooled_cdf`] | SRS of clusters | asymptotic only |
//! | [`poststrat_weights`] + weighted engine | post-stratified SRS | approximate |

mod cluster;
mod full;
mod region;
mod split;
mod stratified;

pub use cluster::{
    cluster_double_conformal, cluster_pooled_cdf, cluster_repeated_subsample,
    cluster_subsample_once, observed_cluster_interval, ClusterGroup, ClusterSubsampleEngine,
    ClusteredCalibration, PooledPadding, ThresholdEngine,
};
pub use full::{full_conformal_interval, GridSpec, OlsFitter, RegressionFitter, TrainingData};
pub use region::{Endpoint, Method, PredictionRegion, Region, RegionNote};
pub use split::{
    classification_set, split_interval_exchangeable, split_interval_weighted,
    split_interval_with_weight, CalibrationContext, TestWeight,
};
pub use stratified::{
    poststrat_weights, stratified_interval, PostStratWeights, StratifiedCalibration,
};

use crate::error::{Error, Result};

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}
