//! Named parameter storage and its on-disk form.
//!
//! A parameter set is persisted as two files: a JSON manifest listing
//! `{name, shape}` entries in order, and a binary file holding every value as
//! a little-endian `f64`, concatenated in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    params: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name: parameter layout
    /// is fixed by model construction code.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter whose name and shape match from `other`.
    /// Returns the names that were not found or had a different shape.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut mismatched = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            match other.by_name(name) {
                Some(t) if t.shape() == self.values[i].shape() => self.values[i] = t.clone(),
                _ => mismatched.push(name.clone()),
            }
        }
        mismatched
    }

    pub fn manifest_json(&self) -> Result<String> {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(n, v)| ManifestEntry {
                    name: n.clone(),
                    shape: v.shape().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("parameter manifest", e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_values() * 8);
        for v in &self.values {
            for x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_parts(manifest: &str, bytes: &[u8]) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(manifest).map_err(|e| Error::json("parameter manifest", e))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter manifest version {}",
                manifest.version
            )));
        }
        let total: usize = manifest
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        if bytes.len() != total * 8 {
            return Err(Error::Format(format!(
                "parameter binary holds {} bytes, manifest needs {}",
                bytes.len(),
                total * 8
            )));
        }
        let mut store = ParamStore::new();
        let mut values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        for p in manifest.params {
            let n = p.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            let t = Tensor::new(&p.shape, data)?;
            if store.id(&p.name).is_some() {
                return Err(Error::Format(format!("duplicate parameter {}", p.name)));
            }
            store.add(p.name, t);
        }
        Ok(store)
    }

    pub fn save(&self, manifest_path: &Path, bin_path: &Path) -> Result<()> {
        fs::write(manifest_path, self.manifest_json()?).map_err(|e| Error::io(manifest_path, e))?;
        fs::write(bin_path, self.to_bytes()).map_err(|e| Error::io(bin_path, e))
    }

    pub fn load(manifest_path: &Path, bin_path: &Path) -> Result<Self> {
        let manifest =
            fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        Self::from_parts(&manifest, &bytes)
    }
}

/// Lazily records parameters as leaves on one tape.
pub struct ParamBinder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track_grad: bool,
}

impl<'a> ParamBinder<'a> {
    pub fn new(store: &'a ParamStore, track_grad: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            track_grad,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let mut t = self.store.get(id).clone();
        t.set_requires_grad(self.track_grad);
        let v = tape.leaf(t);
        self.vars[id.0] = Some(v);
        v
    }

    /// Adds `scale` times each bound parameter's tape gradient into `acc`.
    pub fn accumulate_grads(&self, tape: &Tape, acc: &mut GradBuffer, scale: f64) {
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if let Some(g) = tape.grad(*v) {
                acc.0[i]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += scale * b);
            }
        }
    }
}

/// One gradient buffer per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer(pub Vec<Vec<f64>>);

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.values.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "a.weight",
            Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap(),
        );
        s.add(
            "a.bias",
            Tensor::new(&[3], vec![0.5, 0.25, -0.125]).unwrap(),
        );
        s
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let s = sample_store();
        let manifest = s.manifest_json().unwrap();
        let bytes = s.to_bytes();
        let back = ParamStore::from_parts(&manifest, &bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.manifest_json().unwrap(), manifest);
    }

    #[test]
    fn binary_is_little_endian_in_manifest_order() {
        let s = sample_store();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..8], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[6 * 8..7 * 8], &0.5f64.to_le_bytes());
    }

    #[test]
    fn truncated_binary_rejected() {
        let s = sample_store();
        let bytes = s.to_bytes();
        assert!(
            ParamStore::from_parts(&s.manifest_json().unwrap(), &bytes[..bytes.len() - 8]).is_err()
        );
    }
}
