//! Parameter bundles on disk: one tensor container per named parameter group
//! plus a JSON manifest describing the model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::hash;
use crate::nn::Param;

pub const MANIFEST_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest<M> {
    pub kind: String,
    pub model: M,
    pub groups: Vec<GroupEntry>,
}

/// Named `f32` arrays in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGroups {
    groups: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl ParamGroups {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.groups.push((name.into(), shape, data));
    }

    pub fn push_param(&mut self, name: impl Into<String>, shape: Vec<usize>, p: &Param) {
        self.push(name, shape, p.value.clone());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.groups
            .iter()
            .map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice()))
    }

    /// Remove and return a group, checking its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let pos = self
            .groups
            .iter()
            .position(|(n, _, _)| n == name)
            .ok_or_else(|| Error::format("model bundle", format!("missing group `{name}`")))?;
        let (_, s, d) = self.groups.remove(pos);
        if s != shape {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                actual: s,
            });
        }
        Ok(d)
    }

    /// Fingerprint over all group names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut acc = String::new();
        for (n, s, d) in &self.groups {
            acc.push_str(&format!("{n}:{s:?}:{};", hash::f32_hash(d)));
        }
        hash::bytes_hash(acc.as_bytes())
    }
}

pub fn save<M: Serialize>(dir: &Path, kind: &str, model: &M, groups: &ParamGroups) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, shape, data) in groups.iter() {
        let bytes = container::encode_f32(shape, data)?;
        let file = format!("{name}.dnft");
        crate::fsutil::write_atomic(&dir.join(&file), &bytes)?;
        entries.push(GroupEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            file,
            sha256: hash::bytes_hash(&bytes),
        });
    }
    let manifest = BundleManifest {
        kind: kind.to_string(),
        model,
        groups: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    crate::fsutil::write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(())
}

pub fn load<M: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(M, ParamGroups)> {
    let text = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: BundleManifest<M> = serde_json::from_slice(&text)?;
    if manifest.kind != kind {
        return Err(Error::format(
            "model bundle",
            format!("expected kind `{kind}`, found `{}`", manifest.kind),
        ));
    }
    let mut groups = ParamGroups::new();
    let mut seen = BTreeMap::new();
    for entry in &manifest.groups {
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(Error::format("model bundle", format!("bad file name `{}`", entry.file)));
        }
        if seen.insert(entry.name.clone(), ()).is_some() {
            return Err(Error::format("model bundle", format!("duplicate group `{}`", entry.name)));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        if hash::bytes_hash(&bytes) != entry.sha256 {
            return Err(Error::format(
                "model bundle",
                format!("checksum mismatch for `{}`", entry.name),
            ));
        }
        let (shape, data) = container::decode_f32(&bytes)?;
        if shape != entry.shape {
            return Err(Error::Shape {
                expected: entry.shape.clone(),
                actual: shape,
            });
        }
        groups.push(entry.name.clone(), shape, data);
    }
    Ok((manifest.model, groups))
}
