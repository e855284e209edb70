//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.toml    dims and the ordered session list
//! <dir>/pool.inv         speaker pool (interfering candidates)
//! <dir>/<id>.feat        b"SAPFEAT1", u64 T, u64 F, T·F f64 (all little-endian)
//! <dir>/<id>.tok         one "token speaker start end" line per token
//! <dir>/<id>.inv         one "id v1 .. vd" line per genuine speaker
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use sapf_core::tsot::TimedToken;
use sapf_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{io_err, HarnessError, Result};
use crate::synth::{generate_sessions, ProfileRecord, Session, SynthSpec, World};

const FEAT_MAGIC: &[u8; 8] = b"SAPFEAT1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub feature_dim: usize,
    pub d_spk: usize,
    pub vocab_size: usize,
    pub sessions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub d_spk: usize,
    pub vocab_size: usize,
    pub pool: Vec<ProfileRecord>,
    pub sessions: Vec<Session>,
}

impl Dataset {
    /// Training and held-out splits drawn from one synthetic world.
    pub fn generate(cfg: &Config) -> Result<(Dataset, Dataset)> {
        let spec = cfg.synth_spec();
        let world = World::new(&spec)?;
        let split = |name: &str, n: usize, salt: u64| -> Result<Dataset> {
            let spec = SynthSpec { num_sessions: n, ..spec.clone() };
            let sessions = generate_sessions(&world, &spec, &format!("{name}_"), cfg.seed.wrapping_add(salt))?;
            Ok(Dataset {
                feature_dim: spec.feature_dim,
                d_spk: spec.d_spk,
                vocab_size: spec.vocab_size,
                pool: world.pool.clone(),
                sessions,
            })
        };
        Ok((split("train", cfg.num_sessions, 1)?, split("dev", cfg.num_dev_sessions, 2)?))
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Largest number of genuine speakers in any session.
    pub fn max_speakers(&self) -> usize {
        self.sessions.iter().map(|s| s.inventory.len()).max().unwrap_or(0)
    }

    pub fn total_frames(&self) -> usize {
        self.sessions.iter().map(Session::frames).sum()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = Manifest {
            feature_dim: self.feature_dim,
            d_spk: self.d_spk,
            vocab_size: self.vocab_size,
            sessions: self.sessions.iter().map(|s| s.id.clone()).collect(),
        };
        let text = toml::to_string(&manifest).map_err(|e| HarnessError::Config(e.to_string()))?;
        write(&dir.join("manifest.toml"), text.as_bytes())?;
        write(&dir.join("pool.inv"), inv_text(&self.pool).as_bytes())?;
        for s in &self.sessions {
            write(&dir.join(format!("{}.feat", s.id)), &feat_bytes(&s.features))?;
            write(&dir.join(format!("{}.tok", s.id)), tok_text(&s.tokens).as_bytes())?;
            write(&dir.join(format!("{}.inv", s.id)), inv_text(&s.inventory).as_bytes())?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.toml");
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| bad(&mpath, e.to_string()))?;
        let pool = parse_inv(&dir.join("pool.inv"), m.d_spk)?;
        let sessions = m
            .sessions
            .iter()
            .map(|id| {
                let features = parse_feat(&dir.join(format!("{id}.feat")), m.feature_dim)?;
                let tpath = dir.join(format!("{id}.tok"));
                let tokens = parse_tok(&tpath, features.rows())?;
                let inventory = parse_inv(&dir.join(format!("{id}.inv")), m.d_spk)?;
                if let Some(t) = tokens.iter().find(|t| !inventory.iter().any(|p| p.id == t.speaker)) {
                    return Err(bad(&tpath, format!("speaker {:?} is not in the session inventory", t.speaker)));
                }
                Ok(Session { id: id.clone(), features, tokens, inventory })
            })
            .collect::<Result<_>>()?;
        Ok(Self { feature_dim: m.feature_dim, d_spk: m.d_spk, vocab_size: m.vocab_size, pool, sessions })
    }

    /// Content hash over every file the dataset consists of, in write order.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        let manifest = Manifest {
            feature_dim: self.feature_dim,
            d_spk: self.d_spk,
            vocab_size: self.vocab_size,
            sessions: self.sessions.iter().map(|s| s.id.clone()).collect(),
        };
        h.update(toml::to_string(&manifest).unwrap_or_default());
        h.update(inv_text(&self.pool));
        for s in &self.sessions {
            h.update(feat_bytes(&s.features));
            h.update(tok_text(&s.tokens));
            h.update(inv_text(&s.inventory));
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn bad(path: &Path, msg: impl Into<String>) -> HarnessError {
    HarnessError::Dataset { path: PathBuf::from(path), msg: msg.into() }
}

fn feat_bytes(x: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * x.len());
    out.extend_from_slice(FEAT_MAGIC);
    out.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn parse_feat(path: &Path, dim: usize) -> Result<Tensor> {
    let b = fs::read(path).map_err(io_err(path))?;
    if b.len() < 24 || &b[..8] != FEAT_MAGIC {
        return Err(bad(path, "missing feature header"));
    }
    let word = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap()) as usize;
    let (t, f) = (word(8), word(16));
    if f != dim {
        return Err(bad(path, format!("{f} features per frame, manifest says {dim}")));
    }
    let body = &b[24..];
    if t.checked_mul(f).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
        return Err(bad(path, format!("header says {t}×{f} but payload has {} bytes", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Tensor::matrix(t, f, data))
}

fn tok_text(tokens: &[TimedToken]) -> String {
    tokens.iter().map(|t| format!("{} {} {} {}\n", t.token, t.speaker, t.start_frame, t.end_frame)).collect()
}

fn parse_tok(path: &Path, frames: usize) -> Result<Vec<TimedToken>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|e| bad(path, format!("line {}: {e}", i + 1)));
            if f.len() != 4 {
                return Err(bad(path, format!("line {}: expected 4 fields, got {}", i + 1, f.len())));
            }
            let t = TimedToken::new(num(f[0])?, f[1], num(f[2])?, num(f[3])?);
            if t.start_frame > t.end_frame || t.end_frame >= frames {
                return Err(bad(path, format!("line {}: span {}..={} outside {frames} frames", i + 1, t.start_frame, t.end_frame)));
            }
            Ok(t)
        })
        .collect()
}

fn inv_text(profiles: &[ProfileRecord]) -> String {
    let mut out = String::new();
    for p in profiles {
        out.push_str(&p.id);
        for v in &p.vector {
            out.push(' ');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

fn parse_inv(path: &Path, dim: usize) -> Result<Vec<ProfileRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let mut f = line.split_whitespace();
            let id = f.next().ok_or_else(|| bad(path, format!("line {}: empty", i + 1)))?.to_string();
            let vector = f
                .map(|s| s.parse::<f64>().map_err(|e| bad(path, format!("line {}: {e}", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            if vector.len() != dim {
                return Err(bad(path, format!("line {}: {} values, expected {dim}", i + 1, vector.len())));
            }
            Ok(ProfileRecord { id, vector })
        })
        .collect()
}
