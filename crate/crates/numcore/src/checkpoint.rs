//! Versioned binary container for parameters and optimizer state.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "EQGCKPT\0"
//! version      u32       currently 1
//! header_len   u64
//! header       header_len bytes of UTF-8 (opaque here; JSON by convention)
//! n_params     u32
//! n_params times:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   values     prod(dims) x f64
//! optimizer    u8        0 = none, 1 = Adam
//! if Adam:
//!   lr, beta1, beta2, eps   4 x f64
//!   step                    u64
//!   n_params times: first moment, prod(dims) x f64
//!   n_params times: second moment, prod(dims) x f64
//! ```

use std::io::{Read, Write};

use crate::{Adam, NumError, ParamStore, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"EQGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(w.write_all(&buf)?)
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r)?))
}

fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn get_string<R: Read>(r: &mut R, n: usize) -> Result<String> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| NumError::Format(format!("invalid UTF-8: {e}")))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(w, FORMAT_VERSION)?;
        put_u64(w, self.header.len() as u64)?;
        w.write_all(self.header.as_bytes())?;
        put_u32(w, self.params.len() as u32)?;
        for (_, name, t) in self.params.iter() {
            put_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.rank() as u32)?;
            for d in t.shape() {
                put_u64(w, *d as u64)?;
            }
            put_f64s(w, t.data())?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(adam) => {
                w.write_all(&[1])?;
                put_f64s(w, &[adam.lr, adam.beta1, adam.beta2, adam.eps])?;
                put_u64(w, adam.step)?;
                for m in &adam.m {
                    put_f64s(w, m.data())?;
                }
                for v in &adam.v {
                    put_f64s(w, v.data())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let magic: [u8; 8] = take(r)?;
        if &magic != MAGIC {
            return Err(NumError::Format("not a checkpoint (bad magic)".to_string()));
        }
        let version = get_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(NumError::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = get_u64(r)? as usize;
        let header = get_string(r, header_len)?;
        let n = get_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name_len = get_u32(r)? as usize;
            let name = get_string(r, name_len)?;
            let rank = get_u32(r)? as usize;
            let dims = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let values = get_f64s(r, dims.iter().product())?;
            params.add(name, Tensor::new(dims, values)?)?;
        }
        let tag: [u8; 1] = take(r)?;
        let optimizer = match tag[0] {
            0 => None,
            1 => {
                let lr = get_f64(r)?;
                let mut adam = Adam::new(&params, lr);
                adam.beta1 = get_f64(r)?;
                adam.beta2 = get_f64(r)?;
                adam.eps = get_f64(r)?;
                adam.step = get_u64(r)?;
                for m in adam.m.iter_mut() {
                    let vals = get_f64s(r, m.len())?;
                    m.data_mut().copy_from_slice(&vals);
                }
                for v in adam.v.iter_mut() {
                    let vals = get_f64s(r, v.len())?;
                    v.data_mut().copy_from_slice(&vals);
                }
                Some(adam)
            }
            t => return Err(NumError::Format(format!("unknown optimizer tag {t}"))),
        };
        Ok(Checkpoint { header, params, optimizer })
    }
}
