//! Zeroth-order training of physics-informed networks in high dimensions.
//!
//! The solver combines three kinds of randomness per step: a minibatch of
//! collocation points with a random subset of operator terms, a rank-`r`
//! parameter subspace refreshed every `F` steps, and a Gaussian core inside
//! that subspace. Both sides of the symmetric difference quotient reuse one
//! spatial draw.

pub mod error;
pub mod harness;
pub mod jets;
pub mod ledger;
pub mod net;
pub mod optimizer;
pub mod rng;
pub mod spatial;
pub mod subspace;
pub mod verify;

pub use error::{Result, SdzeError};
pub use jets::{Activation, Jet2, JetBatch};
pub use ledger::{AllocationLedger, LedgerReport, Phase};
pub use net::{MlpParams, PerturbView, Sign};
pub use rng::{derive_stream, RngStream, Role, StreamKey};
pub use spatial::{
    ExactField, JetField, NoiseDiagnostics, Nonlinearity, Normalization, PdeProblem, RunningMoments, SolutionKind,
    SpatialSample,
};
pub use subspace::{plan_reshape, LayerSubspace, ReshapePlan, SplitSide};
pub use optimizer::{
    continue_training, lr_schedule, sdze_step, sdze_step_naive, train, train_with, History, LrSchedule, Objective, PdeObjective, SdzeConfig,
    StepRecord, Trainer,
};
