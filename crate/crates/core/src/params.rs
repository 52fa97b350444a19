//! Parameter storage, forward sessions and the SGD optimizer.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted in parameter totals.
    Trainable,
    /// State such as running statistics; never differentiated.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub kind: ParamKind,
}

/// Named tensors owned by a model. Layers refer to entries by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.push(name.into(), value, ParamKind::Trainable)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.push(name.into(), value, ParamKind::Buffer)
    }

    fn push(&mut self, name: String, value: Tensor<S>, kind: ParamKind) -> ParamId {
        self.entries.push(Entry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry<S> {
        &self.entries[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        self.entries[id.0].value.check_same_shape(&value)?;
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.numel()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copies every entry of `src` whose name and shape match one here.
    /// Returns the number of entries copied.
    pub fn copy_matching(&mut self, src: &ParamStore<S>) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(s) = src.entries.iter().find(|s| s.name == e.name && s.value.shape() == e.value.shape()) {
                e.value = s.value.clone();
                copied += 1;
            }
        }
        copied
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
        }
    }

    /// Flat little-endian dump: magic, entry count, then per entry the name,
    /// kind, shape and `f64` values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[matches!(e.kind, ParamKind::Buffer) as u8])?;
            w.write_all(&(e.value.rank() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Io("not a parameter dump".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Io(e.to_string()))?;
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(S::from_f64_lossy(f64::from_le_bytes(b)));
            }
            let value = Tensor::new(&shape, data)?;
            store.push(name, value, if kind[0] == 1 { ParamKind::Buffer } else { ParamKind::Trainable });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

const DUMP_MAGIC: &[u8; 8] = b"TADAPRM1";

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    #[default]
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

/// One forward pass: a fresh tape plus lazily bound parameters.
pub struct Session<'a, S> {
    pub tape: Tape<S>,
    store: &'a mut ParamStore<S>,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    /// Whether trainable parameters are recorded with `requires_grad`.
    pub track_params: bool,
}

impl<'a, S: Scalar> Session<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, mode: Mode) -> Self {
        let n = store.len();
        Session { tape: Tape::new(), store, bound: vec![None; n], mode, track_params: true }
    }

    /// Forward-only session: parameters are bound as constants.
    pub fn inference(store: &'a mut ParamStore<S>, mode: Mode) -> Self {
        let mut s = Self::new(store, mode);
        s.track_params = false;
        s
    }

    /// Session continuing `tape`, with the listed parameters already bound
    /// to existing variables.
    pub fn on_tape(store: &'a mut ParamStore<S>, mode: Mode, tape: Tape<S>, preset: &[(ParamId, Var)]) -> Self {
        let mut s = Self::new(store, mode);
        s.tape = tape;
        for &(id, v) in preset {
            s.bound[id.0] = Some(v);
        }
        s
    }

    pub fn into_tape(self) -> Tape<S> {
        self.tape
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let rg = self.track_params && e.kind == ParamKind::Trainable;
        let v = self.tape.leaf(e.value.clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn input(&mut self, x: Tensor<S>) -> Var {
        self.tape.constant(x)
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.tape.value(v)
    }

    /// Gradients of every bound trainable parameter.
    pub fn param_grads(&self, grads: &Gradients<S>) -> Vec<(ParamId, Tensor<S>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v)).map(|g| (ParamId(i), g.clone())))
            .collect()
    }
}

/// Stochastic gradient descent with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub lr: S,
    pub momentum: S,
    velocity: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: S, momentum: S) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)]) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(dim_err!("gradient {:?} does not match parameter {:?}", g.shape(), p.shape()));
            }
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                *vi = self.momentum * *vi + *gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
