//! Named parameter storage, Adam, and the on-disk checkpoint container:
//! a directory holding one raw little-endian tensor file per parameter and a
//! plain-text manifest with name, dtype, shape, byte length and content hash.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Result, VtoError};
use crate::graph::{Graph, Grads, NodeId};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ParamSet<F: Scalar> {
    entries: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    pub fn serialized_bytes(&self) -> usize {
        self.total_elements() * F::BYTES
    }

    /// SHA-256 over every tensor's little-endian bytes in insertion order.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.entries {
            hasher.update(name.as_bytes());
            hasher.update(tensor_bytes(value));
        }
        hex(&hasher.finalize())
    }

    pub fn convert<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, value) in &self.entries {
            out.insert(name.clone(), value.mapv(|e| T::cast(e.as_f64())));
        }
        out
    }
}

/// Maps parameter names to graph nodes for one forward pass.
pub struct Bound {
    ids: IndexMap<String, NodeId>,
}

impl Bound {
    /// Interns every parameter into the graph. `trainable` decides whether
    /// gradients are tracked; `trainable_filter` can freeze a subset.
    pub fn bind<F: Scalar>(
        graph: &mut Graph<F>,
        params: &ParamSet<F>,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound {
        let mut ids = IndexMap::new();
        for (name, value) in params.iter() {
            let id = if trainable(name) {
                graph.leaf(value.clone())
            } else {
                graph.constant(value.clone())
            };
            ids.insert(name.to_string(), id);
        }
        Bound { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collects gradients per parameter name after `Graph::backward`.
    pub fn gradients<F: Scalar>(&self, grads: &Grads<F>) -> IndexMap<String, ArrayD<F>> {
        let mut out = IndexMap::new();
        for (name, id) in &self.ids {
            if let Some(g) = grads.get(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

// -- initialization ----------------------------------------------------------

pub fn randn<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let v: Vec<F> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            F::cast(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn uniform<F: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let v: Vec<F> = (0..n)
        .map(|_| F::cast(rng.gen_range(lo..hi)))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

// -- optimizer ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: IndexMap<String, ArrayD<F>>,
    pub v: IndexMap<String, ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update with global-norm gradient clipping.
    pub fn update(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &IndexMap<String, ArrayD<F>>,
        lr: f64,
        clip_norm: f64,
    ) {
        let mut sq = 0.0f64;
        for g in grads.values() {
            sq += g.iter().map(|e| e.as_f64() * e.as_f64()).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let b1 = F::cast(self.beta1);
        let b2 = F::cast(self.beta2);
        let one_b1 = F::cast(1.0 - self.beta1);
        let one_b2 = F::cast(1.0 - self.beta2);
        let sc = F::cast(scale);

        for (name, grad) in grads {
            let g = grad.mapv(|e| e * sc);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m = m.mapv(|e| e * b1) + g.mapv(|e| e * one_b1);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v = v.mapv(|e| e * b2) + g.mapv(|e| e * e * one_b2);

            let p = params.get_mut(name);
            let lrf = F::cast(lr);
            let bc1f = F::cast(bc1);
            let bc2f = F::cast(bc2);
            let epsf = F::cast(self.eps);
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pe, &me, &ve| {
                    let mhat = me / bc1f;
                    let vhat = ve / bc2f;
                    *pe = *pe - lrf * mhat / (vhat.sqrt() + epsf);
                });
        }
    }
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Self::new()
    }
}

// -- checkpoint container ----------------------------------------------------

fn tensor_bytes<F: Scalar>(value: &ArrayD<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(value.len() * F::BYTES);
    for &e in value.as_standard_layout().iter() {
        e.write_le(&mut out);
    }
    out
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_params<F: Scalar>(dir: &Path, params: &ParamSet<F>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VtoError::io(dir, e))?;
    let mut manifest = String::new();
    for (name, value) in params.iter() {
        let bytes = tensor_bytes(value);
        let shape = value
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let shape = if shape.is_empty() { "scalar".into() } else { shape };
        let digest = hex(&Sha256::digest(&bytes));
        let file = dir.join(format!("{name}.bin"));
        fs::write(&file, &bytes).map_err(|e| VtoError::io(&file, e))?;
        manifest.push_str(&format!(
            "{name}\t{}\t{shape}\t{}\t{digest}\n",
            F::DTYPE,
            bytes.len()
        ));
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| VtoError::io(&mpath, e))?;
    Ok(())
}

pub fn load_params<F: Scalar>(dir: &Path) -> Result<ParamSet<F>> {
    let mpath = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&mpath).map_err(|e| VtoError::io(&mpath, e))?;
    let mut params = ParamSet::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(VtoError::Corruption(format!(
                "manifest line {} has {} fields, expected 5",
                lineno + 1,
                fields.len()
            )));
        }
        let (name, dtype, shape_s, len_s, digest) =
            (fields[0], fields[1], fields[2], fields[3], fields[4]);
        if dtype != F::DTYPE {
            return Err(VtoError::Load(format!(
                "parameter {name} has dtype {dtype}, expected {}",
                F::DTYPE
            )));
        }
        let shape: Vec<usize> = if shape_s == "scalar" {
            vec![]
        } else {
            shape_s
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| VtoError::Corruption(format!("bad shape {shape_s}")))
                })
                .collect::<Result<_>>()?
        };
        let expected_len: usize = len_s
            .parse()
            .map_err(|_| VtoError::Corruption(format!("bad byte length {len_s}")))?;
        let file = dir.join(format!("{name}.bin"));
        let bytes = fs::read(&file).map_err(|e| VtoError::io(&file, e))?;
        if bytes.len() != expected_len {
            return Err(VtoError::Corruption(format!(
                "{name}: {} bytes on disk, manifest says {expected_len}",
                bytes.len()
            )));
        }
        let actual_digest = hex(&Sha256::digest(&bytes));
        if actual_digest != digest {
            return Err(VtoError::Corruption(format!(
                "{name}: content hash mismatch"
            )));
        }
        let n: usize = shape.iter().product();
        if n * F::BYTES != bytes.len() {
            return Err(VtoError::Corruption(format!(
                "{name}: shape {shape_s} does not match byte length"
            )));
        }
        let values: Vec<F> = bytes
            .chunks_exact(F::BYTES)
            .map(|c| F::read_le(c))
            .collect();
        params.insert(name, ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap());
    }
    Ok(params)
}
