//! Instruments over trained models: fusion-weight trajectories, relative log
//! amplitude of layer features, and the Hessian's dominant eigenvalue.
//! None of them modify the model they inspect.

mod frequency;
mod hessian;
mod weights;

pub use frequency::{layer_frequency_report, relative_log_amplitude, FrequencyCurve, FrequencyReport, AMP_EPS};
pub use hessian::{
    fixed_batches, hessian_spectrum, hvp, loss_gradient, max_eigenvalue, FixedBatch, HessianOptions, HessianRecord,
    HessianReport, HessianScope, PowerIteration,
};
pub use weights::{track_weights, WeightTrajectory};

use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::TargetMode;
use crate::trainer::{train_loop, Callback, TrainState};

#[derive(Clone, Debug, PartialEq)]
pub struct BiasProbe {
    pub state: TrainState,
    pub trajectory: WeightTrajectory,
    /// Fusion weights after the last update.
    pub final_alpha: Vec<f64>,
}

/// Pre-trains the fusion model of `config` under `target` and returns how
/// its fusion weights evolved. Runs for different targets share seed,
/// batches and initial weights.
pub fn feature_bias_probe(
    target: TargetMode,
    config: &ExperimentConfig,
    data: &Dataset,
    callbacks: &mut [&mut dyn Callback],
) -> Result<BiasProbe> {
    if !matches!(target, TargetMode::RawPixelsNormalized | TargetMode::FeatureRegression) {
        return Err(Error::invalid(
            "feature_bias_probe",
            format!("target {target:?} is neither normalized pixels nor feature regression"),
        ));
    }
    if config.model.mff.is_none() {
        return Err(Error::config("model.mff", "the bias probe needs a fusion model"));
    }
    let mut cfg = config.clone();
    cfg.model.target_mode = target;
    let mut state = TrainState::new(cfg)?;
    let out = train_loop(&mut state, data, callbacks, None)?;
    let trajectory = WeightTrajectory::from_records(&out.records)?;
    let final_alpha = match state.model.fusion_weights() {
        Some(a) => a,
        None => trajectory.last().map(<[f64]>::to_vec).unwrap_or_default(),
    };
    Ok(BiasProbe {
        state,
        trajectory,
        final_alpha,
    })
}
