//! Exact and Monte Carlo tools for the two-dimensional drainage network:
//! each open site of level `t` drains to the nearest open site of level
//! `t + 1`, ties broken by a fair coin.

pub mod analytics;
pub mod bw;
pub mod coupling;
pub mod environment;
pub mod exact;
pub mod mc;
pub mod network;
pub mod stats;

pub use analytics::{AnalyticsError, ModelConstants};
pub use bw::BwError;
pub use coupling::{CanonicalPair, ConditioningPath, CouplingCase, CouplingError, Rule3Reading, SideEvent};
pub use environment::{Environment, EnvironmentError, SiteCoord, SiteSource, SiteState};
pub use exact::{ExactError, Poly};
pub use mc::{Estimate, ExperimentConfig, McError};
pub use network::{hop, trace, LatticePath, NetworkError};
