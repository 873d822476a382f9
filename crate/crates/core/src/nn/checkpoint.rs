//! Binary model checkpoints: header, named `f64` tensors, BN running
//! statistics and (optionally) Adam state. Little-endian throughout.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::AdamState;
use super::model::{BnLayerStats, BnState, Model};
use super::params::{LayerKind, ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TTACKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    for v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get(r)?))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get(r)?))
}

fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| Ok(f64::from_le_bytes(get(r)?))).collect()
}

impl Checkpoint {
    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u32(&mut w, VERSION)?;
        let params = &self.model.params;
        put_u32(&mut w, params.len() as u32)?;
        for t in params.iter() {
            put_u32(&mut w, t.name.len() as u32)?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.kind.code()])?;
            put_u32(&mut w, t.shape.len() as u32)?;
            for &d in &t.shape {
                put_u64(&mut w, d as u64)?;
            }
            put_f64s(&mut w, &t.data)?;
        }
        let bn = &self.model.bn;
        put_u32(&mut w, bn.layers.len() as u32)?;
        put_f64s(&mut w, &[bn.momentum, bn.eps])?;
        for l in &bn.layers {
            put_u32(&mut w, l.mean.len() as u32)?;
            put_f64s(&mut w, &l.mean)?;
            put_f64s(&mut w, &l.var)?;
        }
        match &self.optimizer {
            None => w.write_all(&[0])?,
            Some(s) => {
                w.write_all(&[1])?;
                put_u64(&mut w, s.step)?;
                for (m, v) in s.m.iter().zip(&s.v) {
                    put_f64s(&mut w, m)?;
                    put_f64s(&mut w, v)?;
                }
            }
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        if &get::<8>(&mut r)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = get_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = get_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let kind = LayerKind::from_code(get::<1>(&mut r)?[0])?;
            let ndim = get_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| Ok(get_u64(&mut r)? as usize)).collect::<Result<Vec<_>>>()?;
            let data = get_f64s(&mut r, shape.iter().product())?;
            tensors.push(Tensor { name, kind, shape, data });
        }
        let params = ParamSet::new(tensors)?;
        let n_layers = get_u32(&mut r)? as usize;
        let mv = get_f64s(&mut r, 2)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let c = get_u32(&mut r)? as usize;
            layers.push(BnLayerStats {
                mean: get_f64s(&mut r, c)?,
                var: get_f64s(&mut r, c)?,
            });
        }
        let bn = BnState {
            layers,
            momentum: mv[0],
            eps: mv[1],
        };
        let optimizer = match get::<1>(&mut r)?[0] {
            0 => None,
            1 => {
                let step = get_u64(&mut r)?;
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for t in params.iter() {
                    m.push(get_f64s(&mut r, t.len())?);
                    v.push(get_f64s(&mut r, t.len())?);
                }
                Some(AdamState { step, m, v })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        Ok(Self {
            model: Model { params, bn },
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(bytes.as_slice())
    }
}
