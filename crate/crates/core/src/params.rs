//! Named-parameter plumbing shared by models, optimizers, checkpoints, and
//! the gradient checker.
//!
//! Parameter names are dot-paths (e.g. `encoder.layer0.fw.w_ih`). Visit
//! order is fixed by each model's implementation and is the checkpoint
//! payload order.

use crate::error::Result;
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::{Real, Tensor};
use crate::util::fnv1a64;
use std::collections::HashMap;

/// A model whose trainable and frozen tensors can be walked by name.
/// The `trainable` flag distinguishes optimizer targets from fixed state
/// (frozen tables, batch-norm running statistics).
pub trait ParamGroup<F: Real> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<F>, bool));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<F>, bool));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Snapshot of all named tensors in visit order.
pub fn named_params<F: Real, M: ParamGroup<F>>(model: &M) -> Vec<(String, Tensor<F>, bool)> {
    let mut out = Vec::new();
    model.visit("", &mut |name, t, trainable| {
        out.push((name.to_string(), t.clone(), trainable));
    });
    out
}

pub fn trainable_names<F: Real, M: ParamGroup<F>>(model: &M) -> Vec<String> {
    let mut out = Vec::new();
    model.visit("", &mut |name, _, trainable| {
        if trainable {
            out.push(name.to_string());
        }
    });
    out
}

/// FNV-1a over names and little-endian payloads, in visit order. Two
/// models agree iff their parameters are bitwise identical.
pub fn param_checksum<F: Real, M: ParamGroup<F>>(model: &M) -> u64 {
    let mut h = 0u64;
    model.visit("", &mut |name, t, _| {
        h = fnv1a64(name.as_bytes(), h);
        h = fnv1a64(&t.to_le_bytes(), h);
    });
    h
}

/// Checksum over a subset of the tree selected by name prefix.
pub fn param_checksum_prefix<F: Real, M: ParamGroup<F>>(model: &M, prefix: &str) -> u64 {
    let mut h = 0u64;
    model.visit("", &mut |name, t, _| {
        if name.starts_with(prefix) {
            h = fnv1a64(name.as_bytes(), h);
            h = fnv1a64(&t.to_le_bytes(), h);
        }
    });
    h
}

/// Records which tape leaf holds each trainable parameter during one
/// forward pass, so gradients can be routed back by name.
#[derive(Default)]
pub struct Binder {
    entries: Vec<(String, NodeId)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a trainable parameter as a tape leaf.
    pub fn leaf<F: Real>(
        &mut self,
        tape: &mut Tape<F>,
        name: impl Into<String>,
        value: &Tensor<F>,
    ) -> NodeId {
        let id = tape.leaf(value.clone());
        self.entries.push((name.into(), id));
        id
    }

    /// Insert a frozen tensor as a constant: hard gradient isolation, the
    /// backward pass cannot reach it.
    pub fn frozen<F: Real>(&self, tape: &mut Tape<F>, value: &Tensor<F>) -> NodeId {
        tape.constant(value.clone())
    }

    pub fn entries(&self) -> &[(String, NodeId)] {
        &self.entries
    }

    /// Pull gradients for every bound parameter out of a backward result.
    /// Parameters the loss never reached are absent from the map.
    pub fn collect<F: Real>(&self, grads: &Gradients<F>) -> HashMap<String, Tensor<F>> {
        let mut out = HashMap::new();
        for (name, id) in &self.entries {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Convenience for optimizers: look up a tensor by dot-path and mutate it.
pub fn update_param<F: Real, M: ParamGroup<F>>(
    model: &mut M,
    target: &str,
    f: impl FnOnce(&mut Tensor<F>),
) -> Result<()> {
    let mut f = Some(f);
    let mut found = false;
    model.visit_mut("", &mut |name, t, _| {
        if name == target {
            if let Some(f) = f.take() {
                f(t);
                found = true;
            }
        }
    });
    if found {
        Ok(())
    } else {
        Err(crate::error::Error::Contract(format!(
            "unknown parameter path: {target}"
        )))
    }
}
