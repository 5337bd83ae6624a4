//! Losses, synthetic data, the optimiser loop and the deformation metrics.

mod data;
mod eval;
mod loss;
mod normalize;
mod optim;
mod trainer;

pub use data::{make_noisy_pair, reconstruction_input, synth_dataset, synth_material, Family, ATOMIC_NUMBERS};
pub use eval::{evaluate, evaluate_with, DeformationReport, EvalMode, SampleReport};
pub use loss::{loss, loss_tape, param_loss_tape, LossSpec};
pub use normalize::Normalizer;
pub use optim::{clip_global_norm, Adam};
pub use trainer::{train, CurvePoint, Task, TrainConfig, TrainOutcome};
