//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "GBERTCKP"
//! version      u32      (currently 1)
//! meta_len     u64, then meta_len bytes of UTF-8 metadata
//! n_params     u32
//! per param:   name_len u32, name bytes, ndim u32, dims u64 * ndim,
//!              values f64 * prod(dims)
//! has_opt      u8
//! if has_opt:  step u64, lr f64, beta1 f64, beta2 f64, eps f64,
//!              per param (same order): m f64 * numel, v f64 * numel
//! ```
//!
//! Values are always stored as 64-bit floats; 32-bit runs widen exactly.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AdamConfig, AdamState, NumericsError, ParamStore, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"GBERTCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: String,
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamState<T>>,
}

fn put_u32(w: &mut impl Write, x: u32) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_u64(w: &mut impl Write, x: u64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64(w: &mut impl Write, x: f64) -> io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_values<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> io::Result<()> {
    for &x in t.data() {
        put_f64(w, x.to_f64())?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N], NumericsError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| NumericsError::Checkpoint(format!("truncated: {e}")))?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32, NumericsError> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64, NumericsError> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64(r: &mut impl Read) -> Result<f64, NumericsError> {
    Ok(f64::from_le_bytes(get(r)?))
}

fn get_values<T: Real>(r: &mut impl Read, shape: &[usize]) -> Result<Tensor<T>, NumericsError> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::of(get_f64(r)?));
    }
    Tensor::new(shape.to_vec(), data)
}

impl<T: Real> Checkpoint<T> {
    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, VERSION)?;
        put_u64(w, self.metadata.len() as u64)?;
        w.write_all(self.metadata.as_bytes())?;
        put_u32(w, self.params.len() as u32)?;
        for (name, p) in self.params.iter() {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                put_u64(w, d as u64)?;
            }
            put_values(w, &p.value)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(opt) => {
                w.write_all(&[1])?;
                put_u64(w, opt.step)?;
                for x in [opt.config.lr, opt.config.beta1, opt.config.beta2, opt.config.eps] {
                    put_f64(w, x)?;
                }
                for (m, v) in opt.m.iter().zip(&opt.v) {
                    put_values(w, m)?;
                    put_values(w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, NumericsError> {
        let magic: [u8; 8] = get(r)?;
        if &magic != MAGIC {
            return Err(NumericsError::Checkpoint("bad magic".into()));
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = get_u64(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(|e| NumericsError::Checkpoint(format!("truncated metadata: {e}")))?;
        let metadata = String::from_utf8(meta).map_err(|_| NumericsError::Checkpoint("metadata is not UTF-8".into()))?;

        let n = get_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = get_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| NumericsError::Checkpoint(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| NumericsError::Checkpoint("name is not UTF-8".into()))?;
            let ndim = get_u32(r)? as usize;
            let shape = (0..ndim).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            params.insert(name, get_values(r, &shape)?)?;
        }
        let [has_opt] = get::<1>(r)?;
        let optimizer = match has_opt {
            0 => None,
            1 => {
                let step = get_u64(r)?;
                let config = AdamConfig { lr: get_f64(r)?, beta1: get_f64(r)?, beta2: get_f64(r)?, eps: get_f64(r)? };
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for (_, p) in params.iter() {
                    m.push(get_values(r, p.value.shape())?);
                    v.push(get_values(r, p.value.shape())?);
                }
                Some(AdamState { config, step, m, v })
            }
            x => return Err(NumericsError::Checkpoint(format!("bad optimizer flag {x}"))),
        };
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).unwrap_or(0) != 0 {
            return Err(NumericsError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { metadata, params, optimizer })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self, NumericsError> {
        let f = File::open(path).map_err(|e| NumericsError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
