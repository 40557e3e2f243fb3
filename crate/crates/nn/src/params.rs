//! Named parameter storage with a flat binary checkpoint format.
//!
//! Weight blob layout (all little-endian):
//! `magic "S2RWGT01"` · `u32 count` · per tensor: `u32 name_len` · name bytes
//! · `u32 ndim` · `u64 dim…` · `f64 data…` (row-major).

use std::io::{self, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

const WEIGHT_MAGIC: &[u8; 8] = b"S2RWGT01";

#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

struct Param {
    name: String,
    value: ArrayD<f64>,
}

/// Flat list of named parameters. Ids are stable for the lifetime of the
/// store, so models hold `ParamId`s and look values up per step.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut buf = Vec::new();
        buf.write_all(WEIGHT_MAGIC)?;
        buf.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            write_named_tensor(&mut buf, &p.name, &p.value)?;
        }
        std::fs::write(path, buf)
    }

    /// Load a blob saved by [`ParamStore::save`] into an already-built store.
    /// Names and shapes must match exactly; this is the checkpoint/config
    /// mismatch guard.
    pub fn load_into(&mut self, path: &Path) -> io::Result<()> {
        let data = std::fs::read(path)?;
        let mut r = io::Cursor::new(data);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(bad_data(format!("bad weight magic in {}", path.display())));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        if count != self.params.len() {
            return Err(bad_data(format!(
                "checkpoint has {count} tensors, model expects {}",
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let (name, value) = read_named_tensor(&mut r)?;
            if name != p.name {
                return Err(bad_data(format!(
                    "checkpoint tensor `{name}` where model expects `{}`",
                    p.name
                )));
            }
            if value.shape() != p.value.shape() {
                return Err(bad_data(format!(
                    "shape mismatch for `{name}`: checkpoint {:?}, model {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }
}

pub(crate) fn bad_data(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub(crate) fn write_named_tensor<W: Write>(
    w: &mut W,
    name: &str,
    value: &ArrayD<f64>,
) -> io::Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(value.ndim() as u32)?;
    for &d in value.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in value.as_standard_layout().iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub(crate) fn read_named_tensor<R: Read>(r: &mut R) -> io::Result<(String, ArrayD<f64>)> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    if name_len > 4096 {
        return Err(bad_data("unreasonable tensor name length".into()));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| bad_data(e.to_string()))?;
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    let value = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| bad_data(e.to_string()))?;
    Ok((name, value))
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

/// Xavier/Glorot uniform for a weight stored as `[fan_in, fan_out]`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut v = ArrayD::zeros(IxDyn(&[fan_in, fan_out]));
    for x in v.iter_mut() {
        *x = rng.random_range(-a..a);
    }
    v
}

pub fn normal_init<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<f64> {
    let mut v = ArrayD::zeros(IxDyn(shape));
    for x in v.iter_mut() {
        *x = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    v
}

/// Kaiming-style normal init for conv kernels `[out_c, in_c, kh, kw]`.
pub fn kaiming_conv<R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<f64> {
    assert_eq!(shape.len(), 4);
    let fan_in = shape[1] * shape[2] * shape[3];
    normal_init(rng, shape, (2.0 / fan_in as f64).sqrt())
}
