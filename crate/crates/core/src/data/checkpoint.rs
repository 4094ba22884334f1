//! Model and optimizer state on disk.

use std::path::Path;

use serde_json::{json, Value};

use crate::data::tensorfile::TensorFile;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Named weights, momentum buffers, iteration counter and the config that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub params: Vec<(String, Tensor)>,
    /// Empty when no optimizer state was saved.
    pub momentum: Vec<(String, Tensor)>,
    pub config: Value,
}

impl Checkpoint {
    pub fn from_params(iteration: u64, params: &ParamSet, momentum: Option<&[Tensor]>, config: Value) -> Self {
        let named = |ts: &mut dyn Iterator<Item = (&str, &Tensor)>| ts.map(|(n, t)| (n.to_string(), t.clone())).collect::<Vec<_>>();
        let momentum = match momentum {
            Some(m) => named(&mut params.iter().map(|(n, _)| n).zip(m.iter())),
            None => Vec::new(),
        };
        Self {
            iteration,
            params: named(&mut params.iter()),
            momentum,
            config,
        }
    }

    /// Copies the weights into `params`, which must have the same names and shapes.
    pub fn restore_params(&self, params: &mut ParamSet) -> Result<()> {
        params.load_named(self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Momentum buffers in the order of `params`.
    pub fn momentum_for(&self, params: &ParamSet) -> Result<Option<Vec<Tensor>>> {
        if self.momentum.is_empty() {
            return Ok(None);
        }
        let mut scratch = params.clone();
        scratch.load_named(self.momentum.iter().map(|(n, t)| (n.as_str(), t)))?;
        Ok(Some(scratch.iter().map(|(_, t)| t.clone()).collect()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(ckpt.params.len() + ckpt.momentum.len());
    tensors.extend(ckpt.params.iter().map(|(n, t)| (format!("param/{n}"), t.clone())));
    tensors.extend(ckpt.momentum.iter().map(|(n, t)| (format!("momentum/{n}"), t.clone())));
    TensorFile {
        meta: json!({
            "kind": CHECKPOINT_KIND,
            "iteration": ckpt.iteration,
            "config": ckpt.config,
        }),
        tensors,
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = TensorFile::load(path)?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if file.meta.get("kind").and_then(Value::as_str) != Some(CHECKPOINT_KIND) {
        return Err(corrupt("not a checkpoint"));
    }
    let iteration = file.meta.get("iteration").and_then(Value::as_u64).ok_or_else(|| corrupt("missing iteration"))?;
    let config = file.meta.get("config").cloned().unwrap_or(Value::Null);
    let mut params = Vec::new();
    let mut momentum = Vec::new();
    for (name, t) in file.tensors {
        if let Some(n) = name.strip_prefix("param/") {
            params.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix("momentum/") {
            momentum.push((n.to_string(), t));
        } else {
            return Err(corrupt(&format!("unexpected tensor {name}")));
        }
    }
    Ok(Checkpoint {
        iteration,
        params,
        momentum,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{HeadConfig, KeypointHead};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head_params(channels: usize) -> ParamSet {
        let mut params = ParamSet::new();
        let cfg = HeadConfig { head_channels: channels, ..Default::default() };
        KeypointHead::new(&mut params, &cfg, 16, 14, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        params
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let params = head_params(16);
        let momentum: Vec<Tensor> = params.iter().map(|(_, t)| t.scale(0.5)).collect();
        let ckpt = Checkpoint::from_params(42, &params, Some(&momentum), json!({"seed": 3}));
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        let mut restored = head_params(16);
        let id = restored.find("head.deconv.weight").unwrap();
        *restored.get_mut(id) = Tensor::zeros(params.get(id).shape());
        back.restore_params(&mut restored).unwrap();
        for ((_, a), (_, b)) in restored.iter().zip(params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(back.momentum_for(&params).unwrap().unwrap(), momentum);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&Checkpoint::from_params(1, &head_params(16), None, Value::Null), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn mismatched_head_names_the_tensor() {
        let ckpt = Checkpoint::from_params(0, &head_params(16), None, Value::Null);
        let mut other = head_params(32);
        let before = other.clone();
        match ckpt.restore_params(&mut other) {
            Err(Error::TensorShape { name, .. }) => assert!(name.starts_with("head."), "{name}"),
            other => panic!("expected a shape error, got {other:?}"),
        }
        assert_eq!(other, before);
    }
}
