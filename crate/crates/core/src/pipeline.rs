//! Per-vehicle fitting and scoring shared by the command line and bindings.

use serde::{Deserialize, Serialize};

use crate::baselines::{lr_fit, mc_fit};
use crate::config::ToolkitConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    lr_rows, observed_day, score_vehicle, split_days, Predictor, VehicleScore,
};
use crate::geo::GridSpec;
use crate::iohmm::{em_fit, ObservedDay};
use crate::persist::{VehicleModel, FORMAT_VERSION};
use crate::seeds;
use crate::sequences::{ActivityDay, SequenceRecord};
use crate::states::{activity_features, select_state_count, StateSelection};

const TAG_STATES: u64 = 1;
const TAG_EM: u64 = 2;

/// Training days of a vehicle: the first `train_frac` of its active days.
pub fn training_records(
    records: Vec<SequenceRecord>,
    config: &ToolkitConfig,
) -> Result<Vec<SequenceRecord>> {
    Ok(split_days(records, config.train_frac, |r| &r.day)?.train)
}

/// Chooses `|H|` from the vehicle's training days.
pub fn select_states(
    vehicle_id: &str,
    train: &[SequenceRecord],
    config: &ToolkitConfig,
) -> Result<StateSelection> {
    let days: Vec<ActivityDay> = train.iter().map(|r| r.day.clone()).collect();
    select_state_count(
        &activity_features(&days),
        &config.k_candidates,
        config.kmeans_restarts,
        seeds::derive(seeds::vehicle_seed(config.seed, vehicle_id), TAG_STATES),
    )
}

/// Splits chronologically, chooses `|H|`, and fits the IOHMM and both
/// baselines on the training days.
pub fn fit_vehicle(
    vehicle_id: &str,
    records: Vec<SequenceRecord>,
    grid: &GridSpec,
    config: &ToolkitConfig,
) -> Result<VehicleModel> {
    config.validate()?;
    for r in &records {
        r.validate()?;
    }
    let train = training_records(records, config)?;
    let vehicle_seed = seeds::vehicle_seed(config.seed, vehicle_id);
    let days: Vec<ActivityDay> = train.iter().map(|r| r.day.clone()).collect();
    let selection = select_states(vehicle_id, &train, config)?;
    let observed: Vec<ObservedDay> = train.iter().map(observed_day).collect();
    let fit = em_fit(
        &observed,
        selection.n_states,
        selection.labels(),
        &config.em(seeds::derive(vehicle_seed, TAG_EM)),
    )?;
    let last = train.last().expect("split keeps at least one training day");
    Ok(VehicleModel {
        format_version: FORMAT_VERSION,
        vehicle_id: vehicle_id.to_string(),
        grid: *grid,
        config: config.clone(),
        vehicle_seed,
        n_states: selection.n_states,
        selection,
        train_until: last.day.date(),
        n_train_days: train.len(),
        markov_chain: mc_fit(&days, config.mc_alpha)?,
        linear_duration: lr_fit(&lr_rows(&train))?,
        iohmm: fit.model,
        trace: fit.best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleEvaluation {
    pub vehicle_id: String,
    pub n_test_days: usize,
    pub iohmm: VehicleScore,
    pub markov_chain: VehicleScore,
    pub linear_duration: VehicleScore,
}

/// Active days after the model's training period, in order.
pub fn test_records(model: &VehicleModel, records: &[SequenceRecord]) -> Vec<SequenceRecord> {
    let mut test: Vec<SequenceRecord> = records
        .iter()
        .filter(|r| !r.day.is_empty() && r.day.date() > model.train_until)
        .cloned()
        .collect();
    test.sort_by_key(|r| r.day.day_start);
    test
}

/// Scores all three predictors on the vehicle's test days.
pub fn evaluate_vehicle(
    model: &VehicleModel,
    records: &[SequenceRecord],
) -> Result<VehicleEvaluation> {
    let test = test_records(model, records);
    if test.is_empty() {
        return Err(Error::Precondition(format!(
            "vehicle {}: no active days after {}",
            model.vehicle_id, model.train_until
        )));
    }
    let id = model.vehicle_id.as_str();
    Ok(VehicleEvaluation {
        vehicle_id: id.to_string(),
        n_test_days: test.len(),
        iohmm: score_vehicle(&Predictor::Iohmm(&model.iohmm), id, &test)?,
        markov_chain: score_vehicle(&Predictor::MarkovChain(&model.markov_chain), id, &test)?,
        linear_duration: score_vehicle(&Predictor::Linear(&model.linear_duration), id, &test)?,
    })
}
