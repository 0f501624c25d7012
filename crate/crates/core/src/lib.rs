//! Doubly robust estimation of the average treatment effect on the treated
//! when a confounder is missing at random.

pub mod data;
pub mod estimators;
pub mod glm;
pub mod inference;
pub mod numeric;
pub mod oddsratio;
pub mod nuisance;
pub mod rng;
pub mod sim;
pub mod toy;

pub use data::{Dataset, ObservedRecord};
pub use estimators::{EstimateReport, EstimationError, EstimatorKind};
pub use nuisance::{fit_nuisances, FitRecipe, Misspecification, Nuisance, NuisanceFits};
