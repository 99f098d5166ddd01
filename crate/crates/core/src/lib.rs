//! Active learning with multiple classifier heads. Samples are ranked by how
//! much the auxiliary heads disagree with each other and with the main head.

pub mod acquisition;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod trainer;

pub use acquisition::{AcquisitionScore, McdalOptions, Strategy};
pub use data::{Dataset, LabeledData, Oracle, Pool, PoolSnapshot};
pub use error::{Error, Result};
pub use experiment::{run_experiment, DataSource, ExperimentConfig, MetricsFormat, StageRecord};
pub use losses::DistanceKind;
pub use model::{Head, MlpSpec, ThreeHeadClassifier};
pub use numeric::{LrSchedule, Matrix, Rng};
pub use trainer::{TrainConfig, TrainLog};
