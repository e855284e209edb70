//! Binary checkpoint: magic `SAPF1`, a TOML header with the model config,
//! then every parameter as name, shape and little-endian `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 6] = b"SAPF1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Nar,
    Ar,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: Kind,
    model: ModelConfig,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_len(r: &mut impl Read, what: &str, limit: u64) -> Result<usize> {
    let v = get_u64(r)?;
    if v > limit {
        return Err(Error::Checkpoint(format!("{what} of {v} exceeds sanity limit {limit}")));
    }
    Ok(v as usize)
}

pub fn write<T: Scalar>(w: &mut impl Write, kind: Kind, cfg: &ModelConfig, ps: &ParamStore<T>) -> Result<()> {
    let header = toml::to_string(&Header { kind, model: cfg.clone() })
        .map_err(|e| Error::Checkpoint(format!("cannot encode header: {e}")))?;
    w.write_all(MAGIC)?;
    put_u64(w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    put_u64(w, ps.len() as u64)?;
    for (_, p) in ps.iter() {
        put_u64(w, p.name.len() as u64)?;
        w.write_all(p.name.as_bytes())?;
        put_u64(w, p.tensor.shape().len() as u64)?;
        for &d in p.tensor.shape() {
            put_u64(w, d as u64)?;
        }
        for &v in p.tensor.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read<T: Scalar>(r: &mut impl Read) -> Result<(Kind, ModelConfig, ParamStore<T>)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short for a checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a SAPF1 checkpoint".into()));
    }
    let hlen = get_len(r, "header length", 1 << 20)?;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let text = String::from_utf8(hbuf).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let header: Header = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header.model.validate()?;
    let count = get_len(r, "parameter count", 1 << 20)?;
    let mut ps = ParamStore::new();
    for _ in 0..count {
        let nlen = get_len(r, "name length", 4096)?;
        let mut nbuf = vec![0u8; nlen];
        r.read_exact(&mut nbuf)?;
        let name = String::from_utf8(nbuf).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = get_len(r, "rank", 8)?;
        let shape = (0..rank).map(|_| get_len(r, "dimension", 1 << 24)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(T::lit(f64::from_le_bytes(b)));
        }
        ps.register(name, Tensor::from_vec(shape, data)?)?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last parameter".into()));
    }
    Ok((header.kind, header.model, ps))
}

pub fn save<T: Scalar>(path: &Path, kind: Kind, cfg: &ModelConfig, ps: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, kind, cfg, ps)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Kind, ModelConfig, ParamStore<T>)> {
    read(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let mut ps = ParamStore::<f64>::new();
        ps.register("a.w", Tensor::matrix(2, 3, vec![0.1, -2.0, 3.5, 1e-300, f64::MAX, 0.0])).unwrap();
        ps.register("b", Tensor::scalar(7.0)).unwrap();
        let cfg = ModelConfig::default();
        let mut buf = Vec::new();
        write(&mut buf, Kind::Ar, &cfg, &ps).unwrap();
        let (kind, cfg2, ps2) = read::<f64>(&mut buf.as_slice()).unwrap();
        assert_eq!((kind, cfg2), (Kind::Ar, cfg));
        assert_eq!(ps2.len(), 2);
        for ((_, a), (_, b)) in ps.iter().zip(ps2.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        assert!(matches!(read::<f64>(&mut &b"NOPE00"[..]), Err(Error::Checkpoint(_))));
        let mut buf = Vec::new();
        write(&mut buf, Kind::Nar, &ModelConfig::default(), &ParamStore::<f64>::new()).unwrap();
        buf.push(0);
        assert!(read::<f64>(&mut buf.as_slice()).is_err());
        buf.truncate(10);
        assert!(read::<f64>(&mut buf.as_slice()).is_err());
    }
}
