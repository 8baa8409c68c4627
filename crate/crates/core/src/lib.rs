//! Timescale-aware AdamW: a small reverse-mode autodiff engine, the AdamW
//! optimizer and its EMA view, scale-invariant MLPs, hyperparameter transfer
//! rules and an experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ema;
pub mod error;
pub mod graph;
pub mod harness;
pub mod optim;
pub mod si_net;
pub mod tensor;
pub mod transfer;

pub use ema::{
    ema_weights, log_log_slope, mean_abs_weight, relative_update_size_mc, relative_update_size_mc_chains,
    relative_update_size_theory, timescale_of, Ema, EmaWeights, MagnitudeRecord, McEstimate, Timescale,
};
pub use error::{Error, Result};
pub use graph::{Evaluation, Graph, NodeId, Op};
pub use optim::{
    adamw_step, adamw_update, ema_form_update, from_timescale, schedule_eta, AdamW, EmaView, HyperParams, OptState,
    ParamGroup, ScheduleKind, ScheduleSpec,
};
pub use si_net::{build_si_mlp, InitScale, InitSpec, NetMode, SINetSpec, SiMlp};
pub use tensor::Tensor;
pub use transfer::{
    scale_for_dataset, scale_for_width_direct, scale_for_width_timescale_fixed, theorem1_map, BaseRun, ScaleMap,
    WidthTransfer,
};
