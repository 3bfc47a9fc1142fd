use serde::{Deserialize, Serialize};

use crate::dataio::TensorContainer;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar};

/// Writes every parameter under its name. Values are stored as `f32`.
pub fn save_params<S: Scalar>(store: &ParamStore<S>, container: &mut TensorContainer) {
    for (_, p) in store.iter() {
        container.insert(p.name.clone(), p.value.cast());
    }
}

fn check_and_collect<S: Scalar>(
    store: &ParamStore<S>,
    container: &TensorContainer,
    required: impl Fn(&str) -> bool,
) -> Result<Vec<(crate::numerics::ParamId, crate::numerics::Tensor<S>)>> {
    let mut missing = Vec::new();
    let mut updates = Vec::new();
    for (id, p) in store.iter() {
        match container.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => updates.push((id, t.cast())),
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            None if required(&p.name) => missing.push(p.name.clone()),
            None => {}
        }
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing {} tensor(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(updates)
}

/// Replaces every parameter value with the container's tensor of the same
/// name. Nothing is modified unless all names are present with matching
/// shapes.
pub fn load_params<S: Scalar>(store: &mut ParamStore<S>, container: &TensorContainer) -> Result<()> {
    let updates = check_and_collect(store, container, |_| true)?;
    for (id, t) in updates {
        store.get_mut(id).value = t;
    }
    Ok(())
}

/// Loads the parameters the container provides, leaving the rest untouched.
/// Names accepted by `required` must be present. Returns how many were loaded.
pub fn load_params_matching<S: Scalar>(
    store: &mut ParamStore<S>,
    container: &TensorContainer,
    required: impl Fn(&str) -> bool,
) -> Result<usize> {
    let updates = check_and_collect(store, container, required)?;
    let n = updates.len();
    for (id, t) in updates {
        store.get_mut(id).value = t;
    }
    Ok(n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainableReport {
    pub trainable_count: usize,
    pub total_count: usize,
    pub fraction: f64,
    /// Trainable scalars inside the transformer stack (adapters only).
    pub backbone_trainable: usize,
    /// Names of trainable tensors.
    pub trainable_tensors: Vec<String>,
}

fn is_backbone(name: &str) -> bool {
    name.starts_with("block.") || name.starts_with("ln_f.") || name.starts_with("pos.")
}

pub fn trainable_report<S: Scalar>(store: &ParamStore<S>) -> TrainableReport {
    let mut report = TrainableReport {
        trainable_count: 0,
        total_count: 0,
        fraction: 0.0,
        backbone_trainable: 0,
        trainable_tensors: Vec::new(),
    };
    for (_, p) in store.iter() {
        let n = p.value.numel();
        report.total_count += n;
        if p.trainable {
            report.trainable_count += n;
            report.trainable_tensors.push(p.name.clone());
            if is_backbone(&p.name) {
                report.backbone_trainable += n;
            }
        }
    }
    if report.total_count > 0 {
        report.fraction = report.trainable_count as f64 / report.total_count as f64;
    }
    report
}
