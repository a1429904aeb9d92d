//! Differentiable compute substrate: tensors, a reverse-mode tape, the layer
//! set the encoders need, momentum SGD and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::{Checkpoint, RngState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{BufferUpdate, Graph, Var};
pub use optim::{OptimizerState, Schedule, SgdConfig, StepStats};
pub use params::{Component, Gradients, Param, ParamId, ParameterSet};
pub use tensor::{Real, Tensor};

/// Applies queued running-statistic updates to their buffers.
pub fn apply_buffer_updates<T: Real>(params: &mut ParameterSet<T>, updates: Vec<BufferUpdate<T>>) {
    for u in updates {
        params.get_mut(u.id).value = u.value;
    }
}

#[cfg(test)]
mod tests;
