//! Training and inference-cost analysis for tiny CNNs with a single
//! confidence-thresholded early exit.
//!
//! The crate builds two-exit models from declarative TOML specs, trains
//! them with a weighted joint loss (optionally copying the early exit's
//! depthwise filters into an "early view" head on the final classifier for
//! the first part of training), replays confidence-threshold exit policies
//! over cached evaluation records, and derives accuracy-vs-FLOPS benefit
//! curves from them. Everything is deterministic: a fixed seed reproduces
//! byte-identical parameters, checkpoints, and CSV outputs.

pub mod arch;
pub mod benefit;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flops;
pub mod graph;
pub mod ops;
pub mod params;
pub mod policy;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod util;

pub use arch::{ArchitectureSpec, EeVariant, LayerCfg};
pub use benefit::{benefit_curve, compare_runs, tradeoff_table, BenefitCurvePoint, TradeoffPoint};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{load_cifar10, synth_dataset, Dataset};
pub use error::{Error, Result};
pub use flops::{count_flops, count_params, FlopsBreakdown};
pub use graph::{build_model, compile, ForwardOutput, GraphModel, Mode, Trace};
pub use params::{Param, ParamSet};
pub use policy::{
    confidence_distribution, decide, ee_rate, mean_flops, overthinking_report,
    standalone_accuracy, total_accuracy, EvalRecord, Exit, ExitDecision,
};
pub use tensor::{DType, Scalar, Tensor};
pub use train::{train, transfer_early_view_weights, History, TrainConfig, TrainState};
