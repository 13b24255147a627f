//! Kolmogorov-flow trajectory generation and the on-disk dataset format.

mod dataset;
mod ns;

pub use dataset::{
    generate_dataset, sidecar_path, ChannelStats, Header, Sidecar, Split, Splits, TrajectoryDataset, HEADER_LEN,
    MAGIC, VERSION,
};
pub use ns::{simulate_trajectory, trajectory_rng, NsConfig, NsSolver};
