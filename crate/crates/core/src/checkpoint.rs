//! Checkpoints: the network's parameters, running statistics and training
//! provenance in one checksummed archive. Round-trips are byte-identical
//! because entries are stored in sorted name order and the metadata JSON
//! has a fixed field order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, TensorData};
use crate::model::TinySegNet;
use crate::tensor::{Tensor, U8Tensor};

pub const ARCH_TAG: &str = "tinysegnet-v1";
const META_ENTRY: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub num_classes: u32,
    pub epochs: u32,
    pub seed: u64,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub stats: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_net(net: &TinySegNet, epochs: u32, seed: u64, source: &str) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                arch: ARCH_TAG.to_string(),
                num_classes: net.num_classes as u32,
                epochs,
                seed,
                source: source.to_string(),
            },
            params: net.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            stats: net.named_stats(),
        }
    }

    /// Instantiate a network from the stored tensors. The architecture tag
    /// and the full set of parameter/statistic names must match.
    pub fn build_net(&self) -> Result<TinySegNet> {
        if self.meta.arch != ARCH_TAG {
            return Err(Error::ArchMismatch(format!(
                "checkpoint arch '{}', this build supports '{ARCH_TAG}'",
                self.meta.arch
            )));
        }
        let mut net = TinySegNet::new(self.meta.num_classes as usize, 0);
        let expected: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        if self.params.len() != expected.len() {
            return Err(Error::ArchMismatch(format!(
                "checkpoint has {} parameter tensors, architecture wants {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (name, t) in &self.params {
            let dst = net
                .param_mut(name)
                .map_err(|_| Error::ArchMismatch(format!("unexpected parameter '{name}'")))?;
            if dst.shape() != t.shape() {
                return Err(Error::ArchMismatch(format!(
                    "parameter '{name}': checkpoint shape {:?}, architecture shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
        for (name, v) in &self.stats {
            net.set_stat(name, v.clone())
                .map_err(|e| Error::ArchMismatch(format!("statistic '{name}': {e}")))?;
        }
        Ok(net)
    }

    /// Load the stored tensors into an existing network of the same shape.
    pub fn apply_to(&self, net: &mut TinySegNet) -> Result<()> {
        if self.meta.num_classes as usize != net.num_classes {
            return Err(Error::ArchMismatch(format!(
                "checkpoint has {} classes, net has {}",
                self.meta.num_classes, net.num_classes
            )));
        }
        let rebuilt = self.build_net()?;
        *net = rebuilt;
        Ok(())
    }

    fn to_entries(&self) -> Vec<(String, TensorData)> {
        let mut entries = Vec::new();
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let n = meta.len();
        entries.push((META_ENTRY.to_string(), TensorData::U8(U8Tensor::new(vec![n], meta).expect("meta shape"))));
        for (name, t) in &self.params {
            entries.push((format!("param/{name}"), TensorData::F32(t.clone())));
        }
        for (name, v) in &self.stats {
            let n = v.len();
            entries.push((
                format!("stat/{name}"),
                TensorData::F32(Tensor::new(vec![n], v.clone()).expect("stat shape")),
            ));
        }
        entries
    }

    fn from_entries(entries: Vec<(String, TensorData)>) -> Result<Self> {
        let mut meta = None;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        for (name, t) in entries {
            if name == META_ENTRY {
                let bytes = t.as_u8()?.data().to_vec();
                meta = Some(
                    serde_json::from_slice::<CheckpointMeta>(&bytes)
                        .map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?,
                );
            } else if let Some(p) = name.strip_prefix("param/") {
                params.push((p.to_string(), t.as_f32()?.clone()));
            } else if let Some(s) = name.strip_prefix("stat/") {
                stats.push((s.to_string(), t.as_f32()?.data().to_vec()));
            } else {
                return Err(Error::format(format!("unknown checkpoint entry '{name}'")));
            }
        }
        Ok(Checkpoint {
            meta: meta.ok_or_else(|| Error::format("checkpoint missing metadata entry"))?,
            params,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_archive(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(io::read_archive(path)?)
    }
}
