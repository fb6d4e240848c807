use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{Result, Rows, Tape, Tensor, TensorError, Var};

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor) {
        self.tensors.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.tensors
            .get(key)
            .ok_or_else(|| TensorError::Invalid(format!("missing parameter {key}")))
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.tensors.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Scalar count over keys accepted by `filter`.
    pub fn count_where(&self, filter: impl Fn(&str) -> bool) -> u64 {
        self.tensors
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, t)| t.len() as u64)
            .sum()
    }

    /// SHA-256 over keys, shapes and values of the accepted tensors.
    pub fn checksum_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (k, t) in self.tensors.iter().filter(|(k, _)| filter(k)) {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }
}

/// Initial value of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, with the fan-in the leading extent.
    Uniform,
    Zeros,
    Ones,
    /// Embedding rows: uniform in `±1/sqrt(width)`.
    Table,
}

/// Deterministic per-key initialization: the value of a key depends only on
/// the seed, the key and the shape.
pub fn init_tensor(seed: u64, key: &str, shape: &[usize], init: Init) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::full(shape, 1.0),
        Init::Uniform | Init::Table => {
            let mut h: u64 = seed ^ 0x6a09_e667_f3bc_c908;
            for b in key.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            let fan_in = match init {
                Init::Table => shape.last(),
                _ => shape.first(),
            };
            let fan_in = fan_in.copied().unwrap_or(1).max(1);
            let a = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-a..=a)).collect();
            Tensor::new(shape.to_vec(), data).expect("init shape")
        }
    }
}

/// Part of a stored tensor a tape variable stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Region {
    Full,
    /// Selected rows and leading columns of a 2-D tensor.
    Rows(Rows, usize),
    /// Leading entries of a 1-D tensor.
    Prefix(usize),
}

/// A trainable parameter (or slice) placed on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Binding {
    pub key: String,
    pub region: Region,
    pub var: Var,
}

/// Supplies parameters to the shared forward pass. The same forward code
/// serves the weight-sharing supernet, standalone models, extraction and
/// fresh initialization by swapping the binder.
pub trait Binder<'a> {
    /// Rows `rows` and the leading `cols` columns of a 2-D weight.
    fn weight(&mut self, t: &mut Tape<'a>, key: &str, rows: Rows, cols: usize) -> Result<Var>;
    /// Leading `len` entries of a 1-D parameter.
    fn vector(&mut self, t: &mut Tape<'a>, key: &str, len: usize, init: Init) -> Result<Var>;
    /// A whole embedding table of shape `[rows × cols]`.
    fn table(&mut self, t: &mut Tape<'a>, key: &str, rows: usize, cols: usize) -> Result<Var>;
}

/// How a [`StoreBinder`] interprets stored shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Tensors are at maximal shape; slices are copied out.
    Shared,
    /// Tensors already have exactly the requested shape; they are borrowed
    /// and row indices are ignored.
    Compact,
}

/// Reads parameters from a [`ParamStore`] and records the trainable ones.
pub struct StoreBinder<'a, 'f> {
    store: &'a ParamStore,
    mode: BindMode,
    trainable: &'f dyn Fn(&str) -> bool,
    pub bindings: Vec<Binding>,
}

impl<'a, 'f> StoreBinder<'a, 'f> {
    pub fn new(store: &'a ParamStore, mode: BindMode, trainable: &'f dyn Fn(&str) -> bool) -> Self {
        StoreBinder {
            store,
            mode,
            trainable,
            bindings: Vec::new(),
        }
    }

    fn borrow(&mut self, t: &mut Tape<'a>, key: &str, tensor: &'a Tensor) -> Var {
        if (self.trainable)(key) {
            let var = t.param(tensor);
            self.bindings.push(Binding {
                key: key.to_string(),
                region: Region::Full,
                var,
            });
            var
        } else {
            t.frozen(tensor)
        }
    }

    fn owned(&mut self, t: &mut Tape<'a>, key: &str, value: Tensor, region: Region) -> Var {
        let train = (self.trainable)(key);
        let var = t.leaf(value, train);
        if train {
            self.bindings.push(Binding {
                key: key.to_string(),
                region,
                var,
            });
        }
        var
    }

    fn mismatch(key: &str, have: &[usize], want: Vec<usize>) -> TensorError {
        TensorError::Invalid(format!("parameter {key}: stored shape {have:?}, requested {want:?}"))
    }
}

impl<'a> Binder<'a> for StoreBinder<'a, '_> {
    fn weight(&mut self, t: &mut Tape<'a>, key: &str, rows: Rows, cols: usize) -> Result<Var> {
        let tensor = self.store.get(key)?;
        let s = tensor.shape();
        match self.mode {
            BindMode::Compact => {
                if s != [rows.len(), cols] {
                    return Err(Self::mismatch(key, s, vec![rows.len(), cols]));
                }
                Ok(self.borrow(t, key, tensor))
            }
            BindMode::Shared => {
                if s.len() == 2 && rows.is_identity_for(s[0]) && cols == s[1] {
                    return Ok(self.borrow(t, key, tensor));
                }
                let slice = tensor.gather2d(&rows, cols)?;
                Ok(self.owned(t, key, slice, Region::Rows(rows, cols)))
            }
        }
    }

    fn vector(&mut self, t: &mut Tape<'a>, key: &str, len: usize, _init: Init) -> Result<Var> {
        let tensor = self.store.get(key)?;
        let s = tensor.shape();
        if s.len() != 1 || s[0] < len || (self.mode == BindMode::Compact && s[0] != len) {
            return Err(Self::mismatch(key, s, vec![len]));
        }
        if s[0] == len {
            return Ok(self.borrow(t, key, tensor));
        }
        let prefix = Tensor::new(vec![len], tensor.data()[..len].to_vec())?;
        Ok(self.owned(t, key, prefix, Region::Prefix(len)))
    }

    fn table(&mut self, t: &mut Tape<'a>, key: &str, rows: usize, cols: usize) -> Result<Var> {
        let tensor = self.store.get(key)?;
        if tensor.shape() != [rows, cols] {
            return Err(Self::mismatch(key, tensor.shape(), vec![rows, cols]));
        }
        Ok(self.borrow(t, key, tensor))
    }
}

/// Copies every requested slice of a source store into a new compact store.
pub struct RecordingBinder<'s> {
    src: &'s ParamStore,
    pub out: ParamStore,
}

impl<'s> RecordingBinder<'s> {
    pub fn new(src: &'s ParamStore) -> Self {
        RecordingBinder {
            src,
            out: ParamStore::new(),
        }
    }

    fn record(&mut self, t: &mut Tape<'_>, key: &str, value: Tensor) -> Var {
        self.out.insert(key, value.clone());
        t.constant(value)
    }
}

impl<'a> Binder<'a> for RecordingBinder<'_> {
    fn weight(&mut self, t: &mut Tape<'a>, key: &str, rows: Rows, cols: usize) -> Result<Var> {
        let slice = self.src.get(key)?.gather2d(&rows, cols)?;
        Ok(self.record(t, key, slice))
    }

    fn vector(&mut self, t: &mut Tape<'a>, key: &str, len: usize, _init: Init) -> Result<Var> {
        let src = self.src.get(key)?;
        if src.rank() != 1 || src.len() < len {
            return Err(StoreBinder::mismatch(key, src.shape(), vec![len]));
        }
        let v = Tensor::new(vec![len], src.data()[..len].to_vec())?;
        Ok(self.record(t, key, v))
    }

    fn table(&mut self, t: &mut Tape<'a>, key: &str, rows: usize, cols: usize) -> Result<Var> {
        let src = self.src.get(key)?;
        if src.shape() != [rows, cols] {
            return Err(StoreBinder::mismatch(key, src.shape(), vec![rows, cols]));
        }
        Ok(self.record(t, key, src.clone()))
    }
}

/// Creates freshly initialized parameters at exactly the requested shapes.
pub struct InitBinder {
    seed: u64,
    pub out: ParamStore,
}

impl InitBinder {
    pub fn new(seed: u64) -> Self {
        InitBinder {
            seed,
            out: ParamStore::new(),
        }
    }

    fn create(&mut self, t: &mut Tape<'_>, key: &str, shape: &[usize], init: Init) -> Var {
        let v = init_tensor(self.seed, key, shape, init);
        self.out.insert(key, v.clone());
        t.constant(v)
    }
}

impl<'a> Binder<'a> for InitBinder {
    fn weight(&mut self, t: &mut Tape<'a>, key: &str, rows: Rows, cols: usize) -> Result<Var> {
        Ok(self.create(t, key, &[rows.len(), cols], Init::Uniform))
    }

    fn vector(&mut self, t: &mut Tape<'a>, key: &str, len: usize, init: Init) -> Result<Var> {
        Ok(self.create(t, key, &[len], init))
    }

    fn table(&mut self, t: &mut Tape<'a>, key: &str, rows: usize, cols: usize) -> Result<Var> {
        Ok(self.create(t, key, &[rows, cols], Init::Table))
    }
}
