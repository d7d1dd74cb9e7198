//! Input-output hidden Markov model: parameterization, scaled
//! forward-backward inference and EM estimation.

mod em;
mod inference;
mod model;

pub use em::{
    em_fit, em_refine, m_step, smoothed_responsibilities, EmConfig, EmFit, EmIteration, EmRun,
};
pub use inference::{
    forward_backward, forward_backward_day, forward_filter, log_likelihood, EncodedDay,
    ObservedDay, PosteriorTables,
};
pub use model::{log_gaussian, ContextScaler, EncodedObs, IohmmModel, Observation};
