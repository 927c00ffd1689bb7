//! Synthetic coupled world, the centralized oracle, and the baselines.

mod oracle;
mod world;

pub use oracle::{run_oracle, run_oracle_from, OracleRun};
pub use world::{
    extract_m, extract_m_block, generate, AnomalyConfig, AnomalyEvent, AnomalyMode, Coupling, Dataset, Edge,
    Episode, GlobalModel, LocalMap, World, WorldConfig, DIVERGENCE_LIMIT,
};
