use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

/// Handle to one array inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named real arrays plus a version counter bumped by every optimizer update.
///
/// Arrays are registered once; their shapes never change afterwards. A clone
/// is an independent snapshot (used for the target network).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
    by_name: BTreeMap<String, usize>,
    version: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::config(format!(
                "parameter {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("initial value of {name}")));
        }
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.tensors.push(Tensor { name, shape, values });
        Ok(ParamId(id))
    }

    /// Weight matrix `[out, in]` drawn uniformly from ±1/√in.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        out_dim: usize,
        in_dim: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let values = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, vec![out_dim, in_dim], values)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        let len = shape.iter().product();
        self.insert(name, shape, vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    #[inline]
    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].values
    }

    /// Mutable view of an array's values. Shape is fixed; only contents change.
    #[inline]
    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].values
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Overwrites every value with `other`'s. Shapes and names must agree.
    pub fn copy_from(&mut self, other: &ParameterSet) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.values.copy_from_slice(&src.values);
        }
        self.version = other.version;
        Ok(())
    }

    /// Checks that `other` has the same names, order and shapes.
    pub fn check_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::config(format!(
                    "parameter layout mismatch: {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Largest absolute elementwise difference against a same-layout set.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Writes the checkpoint layout:
    ///
    /// ```text
    /// magic   b"LNDACKPT"
    /// u32     format version (1)
    /// u64     parameter-set version counter
    /// u32     array count
    /// per array:
    ///   u32   name byte length, then UTF-8 name
    ///   u32   rank, then rank × u64 dims
    ///   f64   row-major values
    /// ```
    ///
    /// All integers and floats are little-endian; floats are raw IEEE-754 bits.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT.to_le_bytes())?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParameterSet> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let format = read_u32(&mut r)?;
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format version {format}")));
        }
        let version = read_u64(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut set = ParameterSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                values.push(f64::from_le_bytes(buf));
            }
            set.insert(name, shape, values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        set.version = version;
        Ok(set)
    }

    /// Loads a checkpoint into `self`, requiring an identical layout.
    pub fn load_values_from_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let loaded = ParameterSet::read_checkpoint(r)?;
        self.copy_from(&loaded)
            .map_err(|e| Error::Checkpoint(format!("checkpoint does not match model: {e}")))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LNDACKPT";
const CHECKPOINT_FORMAT: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Gradient accumulators aligned one-to-one with a [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape {
    grads: Vec<Vec<f64>>,
}

impl GradientTape {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        GradientTape {
            grads: params
                .tensors
                .iter()
                .map(|t| vec![0.0; t.values.len()])
                .collect(),
        }
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn arrays(&self) -> &[Vec<f64>] {
        &self.grads
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_aligned_with(&self, params: &ParameterSet) -> bool {
        self.grads.len() == params.tensors.len()
            && self
                .grads
                .iter()
                .zip(&params.tensors)
                .all(|(g, t)| g.len() == t.values.len())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &GradientTape) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }
}
