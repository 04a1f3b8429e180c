//! Training checkpoints: parameters, batch-norm buffers, Adam moments and
//! the configuration they were produced with.
//!
//! Every random draw in training is derived from `(seed, step, ...)`, so
//! the step counter is the whole RNG state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::fusion_net::{FusionNet, NetConfig};
use crate::tensor::Tensor;

const KIND: &str = "ivfuse-checkpoint";

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    step: u64,
    adam_t: u64,
    backbone: String,
    net: NetConfig,
    config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub net: NetConfig,
    /// Backbone kind the run used.
    pub backbone: String,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub adam_t: u64,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        archive::to_bytes(&self.meta()?, &self.tensors())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::write(path, &self.meta()?, &self.tensors())
    }

    fn meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(Meta {
            kind: KIND.into(),
            step: self.step,
            adam_t: self.adam_t,
            backbone: self.backbone.clone(),
            net: self.net.clone(),
            config: self.config.clone(),
        })?)
    }

    fn tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let names = self.params.iter().map(|(n, _)| n);
        out.extend(self.params.iter().map(|(n, t)| (format!("param/{n}"), t.clone())));
        out.extend(self.buffers.iter().map(|(n, t)| (format!("buffer/{n}"), t.clone())));
        out.extend(names.clone().zip(&self.adam_m).map(|(n, t)| (format!("adam_m/{n}"), t.clone())));
        out.extend(names.zip(&self.adam_v).map(|(n, t)| (format!("adam_v/{n}"), t.clone())));
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = archive::read(path)?;
        Self::from_parts(meta, tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = archive::from_bytes(bytes)?;
        Self::from_parts(meta, tensors)
    }

    fn from_parts(meta: serde_json::Value, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let meta: Meta = serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
        if meta.kind != KIND {
            return Err(Error::Checkpoint(format!("not a checkpoint (kind {:?})", meta.kind)));
        }
        let mut ck = Checkpoint {
            step: meta.step,
            config: meta.config,
            net: meta.net,
            backbone: meta.backbone,
            params: Vec::new(),
            buffers: Vec::new(),
            adam_t: meta.adam_t,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
        };
        for (name, t) in tensors {
            match name.split_once('/') {
                Some(("param", n)) => ck.params.push((n.to_owned(), t)),
                Some(("buffer", n)) => ck.buffers.push((n.to_owned(), t)),
                Some(("adam_m", _)) => ck.adam_m.push(t),
                Some(("adam_v", _)) => ck.adam_v.push(t),
                _ => return Err(Error::Checkpoint(format!("unexpected tensor {name}"))),
            }
        }
        if ck.adam_m.len() != ck.params.len() || ck.adam_v.len() != ck.params.len() {
            return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
        }
        Ok(ck)
    }

    /// Rebuild the network; fails when the stored tensors do not fit the
    /// stored network configuration.
    pub fn build_net(&self) -> Result<FusionNet> {
        let mut net = FusionNet::new(self.net.clone(), 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        net.store_mut().load_from(&self.params, &self.buffers).map_err(Error::Checkpoint)?;
        Ok(net)
    }

    /// Reject resuming under a different network configuration.
    pub fn check_net(&self, expected: &NetConfig) -> Result<()> {
        if &self.net != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint network {} does not match configured network {}",
                serde_json::to_string(&self.net)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(())
    }
}

pub fn load_net(path: &Path) -> Result<(FusionNet, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.build_net()?, ck))
}
