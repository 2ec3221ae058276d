//! Synthetic kinematic driving world: scripted maneuvers, labels, token rendering and datasets.

pub mod dataset;
pub mod labels;
pub mod render;
pub mod scenario;

pub use dataset::{build_dataset, make_sample, Dataset, DatasetHeader, Sample, SYNC_K};
pub use labels::{ground_truth, label_meta_actions};
pub use render::{features, Renderer, FEATURES};
pub use scenario::{generate_scenario, EgoState, LonCommand, Maneuver, Obstacle, Scenario, Steer, SynthConfig};
