//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "WINNCKPT" | u32 version | [u8; 32] config hash | u64 body length
//! body
//! [u8; 32] SHA-256 of body
//! ```
//!
//! The pool samples live next to the checkpoint as a raw `f64` dump
//! (`<file>.pool`); the body holds only the pool index and the dump's hash.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::{PoolRecord, PseudoNegativePool, RngState, Streams, TrainState};
use crate::error::{Result, WinnError};
use crate::image_io::{decode_raw, encode_raw};
use crate::params::{ModelParams, Role};
use crate::tensor::{numel, Tensor};
use crate::train::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 8] = b"WINNCKPT";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;
const TRAILER_LEN: usize = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("format version {found}, this build reads {VERSION}")]
    Version { found: u32 },
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after the checksum")]
    TrailingBytes(usize),
    #[error("body checksum mismatch")]
    Checksum,
    #[error("written for a different configuration (config hash mismatch)")]
    ConfigHash,
    #[error("pool sidecar {0}: checksum mismatch")]
    PoolChecksum(PathBuf),
    #[error("malformed body at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
}

/// A cascade's training state plus what is needed to use it on its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Canonical TOML of the run configuration.
    pub config: String,
    /// Classifiers of the completed earlier cascades, in order.
    pub previous: Vec<ModelParams>,
    /// What this cascade's synthesis starts from: the previous cascade's
    /// final samples (`None` in the first cascade).
    pub seed_samples: Option<Tensor>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.config.as_bytes()).into()
    }
}

pub fn pool_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".pool");
    PathBuf::from(s)
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }
    fn shape(&mut self, s: &[usize]) {
        self.u32(s.len() as u32);
        for &d in s {
            self.u64(d as u64);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.shape(t.shape());
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn tensors(&mut self, ts: &[Tensor]) {
        self.u32(ts.len() as u32);
        for t in ts {
            self.tensor(t);
        }
    }
    fn params(&mut self, p: &ModelParams) {
        self.u32(p.len() as u32);
        for e in p.entries() {
            self.str(&e.name);
            self.u8(e.role.tag());
            self.tensor(&e.value);
        }
    }
    fn rng(&mut self, r: &RngState) {
        self.bytes(&r.seed);
        self.u64(r.stream);
        self.u128(r.word_pos);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn malformed(&self, message: impl Into<String>) -> LoadError {
        LoadError::Malformed {
            offset: self.pos,
            message: message.into(),
        }
    }
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], LoadError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.malformed(format!("field of {n} bytes runs past the end"))),
        }
    }
    fn array<const N: usize>(&mut self) -> std::result::Result<[u8; N], LoadError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> std::result::Result<u8, LoadError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> std::result::Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> std::result::Result<usize, LoadError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.malformed(format!("{v} does not fit in usize")))
    }
    fn u128(&mut self) -> std::result::Result<u128, LoadError> {
        Ok(u128::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> std::result::Result<f64, LoadError> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn str(&mut self) -> std::result::Result<String, LoadError> {
        let n = self.usize()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.malformed("string is not UTF-8"))
    }
    fn shape(&mut self) -> std::result::Result<Vec<usize>, LoadError> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(self.malformed(format!("tensor rank {rank}")));
        }
        (0..rank).map(|_| self.usize()).collect()
    }
    fn tensor(&mut self) -> std::result::Result<Tensor, LoadError> {
        let shape = self.shape()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| self.malformed(format!("tensor {shape:?} runs past the end")))?;
        let data = self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(shape, data).expect("length matches shape"))
    }
    fn tensors(&mut self) -> std::result::Result<Vec<Tensor>, LoadError> {
        let n = self.u32()?;
        (0..n).map(|_| self.tensor()).collect()
    }
    fn params(&mut self) -> std::result::Result<ModelParams, LoadError> {
        let n = self.u32()?;
        let mut p = ModelParams::new();
        for _ in 0..n {
            let name = self.str()?;
            let tag = self.u8()?;
            let role = Role::from_tag(tag).ok_or_else(|| self.malformed(format!("unknown role tag {tag}")))?;
            let value = self.tensor()?;
            p.push(name, value, role).map_err(|e| self.malformed(e.to_string()))?;
        }
        Ok(p)
    }
    fn rng(&mut self) -> std::result::Result<RngState, LoadError> {
        Ok(RngState {
            seed: self.array()?,
            stream: self.u64()?,
            word_pos: self.u128()?,
        })
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> WinnError + '_ {
    move |e| WinnError::io(path, e)
}

/// Serializes a checkpoint; the second value is the pool sidecar.
pub fn encode(ck: &Checkpoint, pool_file: &str) -> (Vec<u8>, Vec<u8>) {
    let st = &ck.state;
    let pool = &st.pool;
    let mut pool_shape = vec![pool.len()];
    pool_shape.extend_from_slice(pool.item_shape());
    let sidecar = encode_raw(&Tensor::new(pool_shape, pool.data().to_vec()).expect("pool is consistent"));

    let mut w = Writer(Vec::new());
    w.str(&ck.config);
    w.u64(st.cascade as u64);
    w.u64(st.stage as u64);
    w.u32(ck.previous.len() as u32);
    for p in &ck.previous {
        w.params(p);
    }
    match &ck.seed_samples {
        Some(t) => {
            w.u8(1);
            w.tensor(t);
        }
        None => w.u8(0),
    }
    w.params(&st.params);
    let a = &st.adam;
    for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
        w.f64(v);
    }
    w.u64(a.step);
    w.tensors(&a.m);
    w.tensors(&a.v);
    for r in [&st.streams.classify, &st.streams.synthesis, &st.streams.pool] {
        w.rng(&RngState::of(r));
    }
    w.tensor(&st.last_samples);
    w.shape(pool.item_shape());
    w.u64(pool.len() as u64);
    for r in pool.records() {
        w.u64(r.stage as u64);
        w.u64(r.cascade as u64);
    }
    w.u64(pool.draws());
    w.str(pool_file);
    w.bytes(&Sha256::digest(&sidecar));
    let body = w.0;

    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.config_hash());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&Sha256::digest(&body));
    (out, sidecar)
}

/// Checks the container and returns the body with the declared config hash.
fn open(bytes: &[u8]) -> std::result::Result<(&[u8], [u8; 32]), LoadError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(LoadError::Magic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(LoadError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(LoadError::Version { found: version });
    }
    let hash: [u8; 32] = bytes[12..44].try_into().expect("32 bytes");
    let body_len = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes"));
    let expected = usize::try_from(body_len)
        .ok()
        .and_then(|b| b.checked_add(HEADER_LEN + TRAILER_LEN))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(LoadError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(LoadError::TrailingBytes(bytes.len() - expected));
    }
    let body = &bytes[HEADER_LEN..expected - TRAILER_LEN];
    if Sha256::digest(body).as_slice() != &bytes[expected - TRAILER_LEN..] {
        return Err(LoadError::Checksum);
    }
    Ok((body, hash))
}

/// Parses a checkpoint; `sidecar` supplies the pool dump named in the body.
pub fn decode(
    bytes: &[u8],
    expected_config: Option<&[u8; 32]>,
    sidecar: impl FnOnce(&str) -> Result<Vec<u8>>,
) -> Result<Checkpoint> {
    let (body, hash) = open(bytes)?;
    if expected_config.is_some_and(|h| *h != hash) {
        return Err(LoadError::ConfigHash.into());
    }
    let mut r = Reader { buf: body, pos: 0 };
    let config = r.str()?;
    if Sha256::digest(config.as_bytes()).as_slice() != hash {
        return Err(LoadError::ConfigHash.into());
    }
    let cascade = r.usize()?;
    let stage = r.usize()?;
    let n_prev = r.u32()?;
    let previous = (0..n_prev).map(|_| r.params()).collect::<std::result::Result<Vec<_>, _>>()?;
    let seed_samples = match r.u8()? {
        0 => None,
        1 => Some(r.tensor()?),
        t => return Err(r.malformed(format!("bad flag {t}")).into()),
    };
    let params = r.params()?;
    let config_adam = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let step = r.u64()?;
    let m = r.tensors()?;
    let v = r.tensors()?;
    let shapes_match = |ts: &[Tensor]| {
        ts.len() == params.len() && ts.iter().zip(params.values()).all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match(&m) || !shapes_match(&v) {
        return Err(r.malformed("optimizer moments do not match the parameters").into());
    }
    let classify = r.rng()?.restore();
    let synthesis = r.rng()?.restore();
    let pool_rng = r.rng()?.restore();
    let last_samples = r.tensor()?;
    let item_shape = r.shape()?;
    let n = r.usize()?;
    if n.checked_mul(16).is_none_or(|b| b > body.len() - r.pos) {
        return Err(r.malformed(format!("pool index of {n} records runs past the end")).into());
    }
    let records = (0..n)
        .map(|_| {
            Ok(PoolRecord {
                stage: r.usize()?,
                cascade: r.usize()?,
            })
        })
        .collect::<std::result::Result<Vec<_>, LoadError>>()?;
    let draws = r.u64()?;
    let pool_file = r.str()?;
    let pool_hash: [u8; 32] = r.array()?;
    if r.pos != body.len() {
        return Err(r.malformed("unread bytes at the end of the body").into());
    }
    let raw = sidecar(&pool_file)?;
    if Sha256::digest(&raw).as_slice() != pool_hash {
        return Err(LoadError::PoolChecksum(pool_file.into()).into());
    }
    let dump = decode_raw(&raw)?;
    let mut want = vec![n];
    want.extend_from_slice(&item_shape);
    if dump.shape() != want {
        return Err(WinnError::Checkpoint(format!(
            "pool dump has shape {:?}, index says {want:?}",
            dump.shape()
        )));
    }
    debug_assert_eq!(dump.numel(), n * numel(&item_shape));
    let pool = PseudoNegativePool::from_parts(&item_shape, dump.into_data(), records, draws)?;
    Ok(Checkpoint {
        config,
        previous,
        seed_samples,
        state: TrainState {
            cascade,
            stage,
            params,
            adam: AdamState {
                config: config_adam,
                step,
                m,
                v,
            },
            pool,
            streams: Streams {
                classify,
                synthesis,
                pool: pool_rng,
            },
            last_samples,
        },
    })
}

/// Writes `path` and its pool sidecar; returns the files written.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<Vec<PathBuf>> {
    let side = pool_path(path);
    let name = side
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| WinnError::usage(format!("{}: checkpoint needs a UTF-8 file name", path.display())))?
        .to_string();
    let (bytes, sidecar) = encode(ck, &name);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(&side, sidecar).map_err(io(&side))?;
    fs::write(path, bytes).map_err(io(path))?;
    Ok(vec![path.to_path_buf(), side])
}

/// Loads a checkpoint, optionally insisting on a configuration hash.
pub fn load(path: &Path, expected_config: Option<&[u8; 32]>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io(path))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    decode(&bytes, expected_config, |name| {
        if Path::new(name).components().count() != 1 {
            return Err(WinnError::Checkpoint(format!("pool sidecar name {name:?} is not a plain file name")));
        }
        let p = dir.join(name);
        fs::read(&p).map_err(io(&p))
    })
}
