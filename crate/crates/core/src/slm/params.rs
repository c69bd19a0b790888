use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

use super::model::Binding;

/// Which parameters form the adaptable subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdaptableSet {
    /// Every layer-norm gain and shift.
    NormOnly,
    /// Layer norms plus the encoder's convolutional subsampling layers.
    NormPlusConv,
    All,
    None,
}

impl AdaptableSet {
    pub fn matches(self, path: &str) -> bool {
        let is_norm = path.ends_with(".gamma") || path.ends_with(".beta");
        let is_conv = path.starts_with("encoder.conv.");
        match self {
            AdaptableSet::NormOnly => is_norm,
            AdaptableSet::NormPlusConv => is_norm || is_conv,
            AdaptableSet::All => true,
            AdaptableSet::None => false,
        }
    }
}

impl FromStr for AdaptableSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "NORM_ONLY" => Ok(Self::NormOnly),
            "NORM_PLUS_CONV" => Ok(Self::NormPlusConv),
            "ALL" => Ok(Self::All),
            "NONE" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown adaptable set {s:?}"))),
        }
    }
}

impl fmt::Display for AdaptableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::NormOnly => "NORM_ONLY",
            Self::NormPlusConv => "NORM_PLUS_CONV",
            Self::All => "ALL",
            Self::None => "NONE",
        };
        f.write_str(s)
    }
}

/// Named parameter store partitioned into adaptable and frozen paths.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    adaptable: BTreeSet<String>,
    selection: Option<AdaptableSet>,
}

/// Copy of the adaptable tensors at one point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSnapshot {
    /// Total number of scalar entries held.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

impl ModelParams {
    pub(crate) fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            tensors,
            adaptable: BTreeSet::new(),
            selection: None,
        }
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.tensors.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn adaptable_paths(&self) -> &BTreeSet<String> {
        &self.adaptable
    }

    pub fn frozen_paths(&self) -> impl Iterator<Item = &str> {
        self.paths().filter(|p| !self.adaptable.contains(*p))
    }

    pub fn selection(&self) -> Option<AdaptableSet> {
        self.selection
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn num_adaptable(&self) -> usize {
        self.adaptable.iter().map(|p| self.tensors[p].numel()).sum()
    }

    /// Marks exactly the paths matched by `set` as adaptable and tracks
    /// gradients on them only.
    pub fn select(&mut self, set: AdaptableSet) {
        self.adaptable.clear();
        for (path, t) in &mut self.tensors {
            let on = set.matches(path);
            t.set_requires_grad(on);
            if on {
                self.adaptable.insert(path.clone());
            }
        }
        self.selection = Some(set);
    }

    /// Freezes every tensor and forgets the selection.
    pub fn clear_selection(&mut self) {
        self.adaptable.clear();
        for t in self.tensors.values_mut() {
            t.set_requires_grad(false);
        }
        self.selection = None;
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors.values_mut() {
            t.zero_grad();
        }
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        Binding::new(
            self.tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        )
    }

    /// Adds the tape's leaf gradients into the tensors' `grad` buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (path, t) in &mut self.tensors {
            if let Some(g) = binding.get(path).and_then(|v| tape.grad(v)) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            entries: self
                .adaptable
                .iter()
                .map(|p| {
                    let t = &self.tensors[p];
                    let copy = Tensor::new(t.data().to_vec(), t.shape().to_vec())
                        .expect("shape is consistent");
                    (p.clone(), copy)
                })
                .collect(),
        }
    }

    /// Writes the snapshot's tensors back. Tensors absent from the snapshot are untouched.
    pub fn restore(&mut self, snap: &ParamSnapshot) -> Result<()> {
        for (path, saved) in &snap.entries {
            let t = self
                .tensors
                .get(path)
                .ok_or_else(|| Error::Snapshot(format!("unknown parameter {path}")))?;
            if t.shape() != saved.shape() {
                return Err(Error::Snapshot(format!(
                    "{path}: shape {:?} does not match snapshot {:?}",
                    t.shape(),
                    saved.shape()
                )));
            }
        }
        for (path, saved) in &snap.entries {
            let t = self.tensors.get_mut(path).expect("checked above");
            t.data_mut().copy_from_slice(saved.data());
        }
        Ok(())
    }

    /// SHA-256 over every path, shape and the raw bits of every value.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (path, t) in &self.tensors {
            h.update((path.len() as u64).to_le_bytes());
            h.update(path.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Hex form of [`ModelParams::digest`].
    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}
