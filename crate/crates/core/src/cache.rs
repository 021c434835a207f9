//! On-disk cache of transition tables.
//!
//! A cache file is keyed by a SHA-256 of everything the tables depend on:
//! the mode matrices, the running and terminal weights, the horizon and the
//! table parameters. A file whose version, key or checksum does not match is
//! treated as a miss and rebuilt.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Mat, QuadraticCost, SwitchedLinearSystem};
use crate::transition::{Interpolation, RawMode, TableError, TableParams, TransitionTables};

const MAGIC: &[u8; 8] = b"SIOMSTBL";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Hex SHA-256 identifying the tables built from these inputs.
pub fn table_key(sys: &SwitchedLinearSystem, cost: &QuadraticCost, params: &TableParams) -> String {
    let mut h = Sha256::new();
    h.update(CACHE_VERSION.to_le_bytes());
    h.update((sys.n_states() as u64).to_le_bytes());
    for j in 0..sys.n_modes() {
        h.update(b"mode");
        for row in sys.mode(j).to_strings() {
            for e in row {
                h.update(e.as_bytes());
                h.update([0]);
            }
        }
    }
    h.update(b"q");
    for row in cost.q_expr().to_strings() {
        for e in row {
            h.update(e.as_bytes());
            h.update([0]);
        }
    }
    h.update(b"p1");
    for v in cost.p1().iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    for v in [cost.t0(), cost.t_m(), params.max_step, params.anchor_limit] {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update((params.samples as u64).to_le_bytes());
    h.update([interp_tag(params.interpolation)]);
    hex::encode(h.finalize())
}

fn interp_tag(i: Interpolation) -> u8 {
    match i {
        Interpolation::Linear => 0,
        Interpolation::Cubic => 1,
    }
}

#[derive(Debug, Clone)]
pub struct TableCache {
    dir: PathBuf,
}

impl TableCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        TableCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.tbl"))
    }

    /// Cached tables for these inputs, or `None` on a miss or a stale file.
    pub fn load(
        &self,
        sys: &SwitchedLinearSystem,
        cost: &QuadraticCost,
        params: &TableParams,
    ) -> Option<TransitionTables> {
        let key = table_key(sys, cost, params);
        let bytes = fs::read(self.path_for(&key)).ok()?;
        decode(&bytes, &key, sys.n_modes())
    }

    pub fn store(
        &self,
        tables: &TransitionTables,
        sys: &SwitchedLinearSystem,
        cost: &QuadraticCost,
    ) -> Result<PathBuf, CacheError> {
        let key = table_key(sys, cost, &tables.params());
        let path = self.path_for(&key);
        let io_err = |source| CacheError::Io { path: path.display().to_string(), source };
        fs::create_dir_all(&self.dir).map_err(|source| CacheError::Io { path: self.dir.display().to_string(), source })?;
        let bytes = encode(tables, &key);
        // write-then-rename so readers never see a partial file
        let tmp = path.with_extension("tbl.tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&bytes).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(path)
    }

    /// Loads the tables or builds and stores them. The flag is true on a hit.
    pub fn load_or_build(
        &self,
        sys: &SwitchedLinearSystem,
        cost: &QuadraticCost,
        params: TableParams,
    ) -> Result<(TransitionTables, bool), CacheError> {
        if let Some(t) = self.load(sys, cost, &params) {
            return Ok((t, true));
        }
        let t = TransitionTables::build(sys, cost, params)?;
        self.store(&t, sys, cost)?;
        Ok((t, false))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn mat(&mut self, m: &Mat) {
        for v in m.iter() {
            self.f64(*v);
        }
    }
}

fn encode(t: &TransitionTables, key: &str) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    w.0.extend_from_slice(key.as_bytes());
    let p = t.params();
    w.f64(t.t0());
    w.f64(t.t_m());
    w.u64(t.n_states() as u64);
    w.u64(p.samples as u64);
    w.f64(p.max_step);
    w.0.push(interp_tag(p.interpolation));
    w.f64(p.anchor_limit);
    w.u64(t.n_modes() as u64);
    for j in 0..t.n_modes() {
        let m = t.raw_mode(j);
        for series in [m.phi, m.phi_inv, m.psi] {
            for x in series {
                w.mat(x);
            }
        }
        w.u64(m.anchors.len() as u64);
        for (start, a, b) in m.anchors {
            w.u64(start as u64);
            w.mat(a);
            w.mat(b);
        }
        w.mat(m.terminal);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, k: usize) -> Option<&[u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(k)?)?;
        self.pos += k;
        Some(s)
    }
    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    fn mat(&mut self, n: usize) -> Option<Mat> {
        let mut v = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            v.push(self.f64()?);
        }
        Some(Mat::from_vec(n, n, v))
    }
    fn mats(&mut self, count: usize, n: usize) -> Option<Vec<Mat>> {
        (0..count).map(|_| self.mat(n)).collect()
    }
}

fn decode(bytes: &[u8], key: &str, n_modes: usize) -> Option<TransitionTables> {
    if bytes.len() < 32 {
        return None;
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return None;
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC || u32::from_le_bytes(r.take(4)?.try_into().ok()?) != CACHE_VERSION {
        return None;
    }
    if r.take(key.len())? != key.as_bytes() {
        return None;
    }
    let t0 = r.f64()?;
    let t_m = r.f64()?;
    let n = r.u64()? as usize;
    let samples = r.u64()? as usize;
    let max_step = r.f64()?;
    let interpolation = match r.take(1)?[0] {
        0 => Interpolation::Linear,
        1 => Interpolation::Cubic,
        _ => return None,
    };
    let anchor_limit = r.f64()?;
    if r.u64()? as usize != n_modes {
        return None;
    }
    let mut modes = Vec::with_capacity(n_modes);
    for _ in 0..n_modes {
        let phi = r.mats(samples + 1, n)?;
        let phi_inv = r.mats(samples + 1, n)?;
        let psi = r.mats(samples + 1, n)?;
        let count = r.u64()? as usize;
        let mut anchors = Vec::with_capacity(count.min(samples + 1));
        for _ in 0..count {
            anchors.push((r.u64()? as usize, r.mat(n)?, r.mat(n)?));
        }
        let terminal = r.mat(n)?;
        modes.push(RawMode { phi, phi_inv, psi, anchors, terminal });
    }
    if r.pos != body.len() {
        return None;
    }
    let params = TableParams { samples, max_step, interpolation, anchor_limit };
    TransitionTables::from_raw(t0, t_m, n, params, modes).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    #[test]
    fn round_trip_and_staleness() {
        let s = Scenario::builtin("spring_mass").unwrap();
        let params = s.table_params(2.0, 0.01);
        let dir = std::env::temp_dir().join(format!("sioms-cache-test-{}", std::process::id()));
        let cache = TableCache::new(&dir);
        let (built, hit) = cache.load_or_build(&s.system, &s.cost, params).unwrap();
        assert!(!hit);
        let (loaded, hit) = cache.load_or_build(&s.system, &s.cost, params).unwrap();
        assert!(hit);
        assert_eq!(built.max_difference(&loaded), 0.0);

        // a different weight is a different key
        let other = s.cost.with_horizon(0.0, 1.9).unwrap();
        assert!(cache.load(&s.system, &other, &s.table_params(1.9, 0.01)).is_none());

        // corruption is detected and ignored
        let path = cache.path_for(&table_key(&s.system, &s.cost, &params));
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x55;
        fs::write(&path, bytes).unwrap();
        assert!(cache.load(&s.system, &s.cost, &params).is_none());
        fs::remove_dir_all(dir).ok();
    }
}
