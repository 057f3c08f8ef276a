//! Named parameter tables, the per-step tape session that binds them, and
//! the checkpoint file format.

use std::collections::HashMap;
use std::path::Path;

use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"OLVC";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered table of named tensors. Order is insertion order and is part of
/// the checkpoint format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.with_grad(false));
        self.trainable.push(true);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Scalar count over tables whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .map(|id| self.get(id).numel())
            .sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Sets the trainable flag on every table whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            trainable: self.trainable.clone(),
            lookup: self.lookup.clone(),
        }
    }

    /// Bit-level equality of names, shapes and payloads.
    pub fn bit_eq(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a
                        .data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}

/// Gradients for every table of a [`ParamStore`]; `None` means untouched.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn empty(len: usize) -> Self {
        ParamGrads {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Adds `other` into `self`, table by table in id order.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a = *a + *b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// One forward/backward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a, T: Scalar = f32> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    track_grads: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// Inference session: nothing records gradients.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Session {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads: false,
        }
    }

    /// Training session: trainable tables record gradients.
    pub fn training(store: &'a ParamStore<T>) -> Self {
        Session {
            track_grads: true,
            ..Session::inference(store)
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph handle for a parameter, bound on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let grad = self.track_grads && self.store.is_trainable(id);
        let v = self.g.leaf(self.store.get(id).clone().with_grad(grad));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads<T>> {
        let mut grads = self.g.backward(loss)?;
        let per_param = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect();
        Ok(ParamGrads { grads: per_param })
    }
}

/// Finite-difference check over every trainable scalar of `store`: the
/// worst relative error between tape gradients and central differences of
/// the scalar returned by `loss`.
pub fn finite_diff_check_params<F>(store: &ParamStore<f64>, loss: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Session<f64>) -> Result<Var>,
{
    let mut s = Session::training(store);
    let l = loss(&mut s)?;
    let grads = s.backward(l)?;
    let mut probe = store.clone();
    let eval = |probe: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::inference(probe);
        let l = loss(&mut s)?;
        Ok(s.g.value(l).item())
    };
    let mut worst = 0.0f64;
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(id).map_or(0.0, |g| g[i]);
            worst = worst.max(crate::numerics::relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// Writes a checkpoint: magic `OLVC`, u32 version, u64 config length and
/// JSON config, u32 table count, then per table the name, trainable flag,
/// shape and little-endian f32 payload.
pub fn save_checkpoint(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, store)?)
}

pub fn encode_checkpoint(config: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(config)?;
    w.u64(cfg.len() as u64);
    w.bytes(&cfg);
    w.u32(store.len() as u32);
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        w.u32(name.len() as u32);
        w.bytes(name);
        w.u8(store.is_trainable(id) as u8);
        let t = store.get(id);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f32s(t.data());
    }
    Ok(w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u64("config length")? as usize;
    let at = r.offset();
    let cfg: serde_json::Value = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| Error::format(at, format!("config JSON: {e}")))?;
    let count = r.u32("table count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.utf8(name_len, "name")?;
        let trainable = r.u8("trainable flag")? != 0;
        let ndim = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let at = r.offset();
        let numel = shape.iter().product();
        let data = r.f32s(numel, "payload")?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        let id = store
            .add(name, t)
            .map_err(|e| Error::format(at, e.to_string()))?;
        store.trainable[id.0] = trainable;
    }
    r.finish()?;
    Ok((cfg, store))
}
