mod optim;
mod param;
mod tape;

pub use optim::{adamw_step, AdamState, AdamW, AdamWConfig, CosineSchedule};
pub use param::{Bound, ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tape, Var};
