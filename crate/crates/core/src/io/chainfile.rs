//! Line-delimited JSON chain files.
//!
//! The first line is a header record carrying the descriptor, schedule,
//! acceptance counters and initial state; each following line is one
//! snapshot. Latent values are stored as a SHA-256 digest unless a full dump
//! is requested.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gp::ProjectionSpec;
use crate::inference::{AcceptanceStats, Chain, ChainDescriptor, MoveCounter, Schedule, Snapshot};

pub const CHAIN_FILE: &str = "chain.jsonl";
const LOCK_FILE: &str = ".lock";
const FORMAT: &str = "gpadapt-chain/1";

/// Holds the output-directory lock for as long as it lives.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    /// Creates the lock file; fails if another writer holds it.
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Hex SHA-256 of the little-endian bytes of `values`.
pub fn fvals_digest(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// `"101"` for `[true, false, true]`.
pub fn mask_bits(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn parse_mask_bits(bits: &str) -> Result<Vec<bool>> {
    bits.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            _ => Err(Error::InvalidInput(format!("bad mask character '{c}'"))),
        })
        .collect()
}

/// Finite values as JSON numbers, infinities and NaN as strings.
mod lossless {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotRecord {
    iter: usize,
    a: f64,
    b: String,
    q: Vec<f64>,
    sigma: Option<f64>,
    fvals_len: usize,
    fvals_sha256: String,
    #[serde(with = "lossless")]
    log_posterior: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fvals: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Counter {
    attempts: u64,
    accepts: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    format: String,
    model: String,
    family: String,
    mode: String,
    d: usize,
    extra_axis: bool,
    sites: usize,
    seed: u64,
    iterations: usize,
    burn_in: usize,
    thin: usize,
    snapshots: usize,
    accept_a: Counter,
    accept_b: Counter,
    accept_q: Counter,
    accept_plane: Counter,
    accept_sigma: Counter,
    ess: Counter,
    initial: SnapshotRecord,
}

fn counter(c: &MoveCounter) -> Counter {
    Counter {
        attempts: c.attempts,
        accepts: c.accepts,
    }
}

fn move_counter(c: &Counter) -> MoveCounter {
    MoveCounter {
        attempts: c.attempts,
        accepts: c.accepts,
    }
}

fn record(s: &Snapshot, full: bool) -> SnapshotRecord {
    let q = s.spec.q();
    let d = q.nrows();
    SnapshotRecord {
        iter: s.iter,
        a: s.spec.a(),
        b: mask_bits(s.spec.mask()),
        q: (0..d).flat_map(|i| (0..d).map(move |j| q[(i, j)])).collect(),
        sigma: s.sigma,
        fvals_len: s.fvals.len(),
        fvals_sha256: fvals_digest(&s.fvals),
        log_posterior: s.log_posterior,
        fvals: full.then(|| s.fvals.clone()),
    }
}

fn snapshot(r: SnapshotRecord, extra_axis: bool, line: usize) -> Result<Snapshot> {
    let load = |message: String| Error::Load { line, message };
    let mask = parse_mask_bits(&r.b).map_err(|e| load(e.to_string()))?;
    let d = mask.len();
    if r.q.len() != d * d {
        return Err(load(format!("rotation has {} entries for d = {d}", r.q.len())));
    }
    let q = DMatrix::from_row_slice(d, d, &r.q);
    let spec = ProjectionSpec::new(r.a, mask, q, extra_axis).map_err(|e| load(e.to_string()))?;
    let fvals = match r.fvals {
        Some(f) => {
            if f.len() != r.fvals_len || fvals_digest(&f) != r.fvals_sha256 {
                return Err(load("latent values do not match their digest".into()));
            }
            f
        }
        None => Vec::new(),
    };
    Ok(Snapshot {
        iter: r.iter,
        spec,
        sigma: r.sigma,
        fvals,
        log_posterior: r.log_posterior,
    })
}

/// Writes `dir/chain.jsonl` under the directory lock. `full_fvals` adds the
/// latent values to every record.
pub fn persist_chain(chain: &Chain, dir: &Path, full_fvals: bool) -> Result<PathBuf> {
    let _lock = DirLock::acquire(dir)?;
    let path = dir.join(CHAIN_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    let desc = &chain.descriptor;
    let header = HeaderRecord {
        format: FORMAT.into(),
        model: desc.model.clone(),
        family: desc.family.to_string(),
        mode: desc.mode.to_string(),
        d: desc.d,
        extra_axis: desc.extra_axis,
        sites: desc.sites,
        seed: chain.seed,
        iterations: chain.schedule.iterations,
        burn_in: chain.schedule.burn_in,
        thin: chain.schedule.thin,
        snapshots: chain.snapshots.len(),
        accept_a: counter(&chain.stats.a),
        accept_b: counter(&chain.stats.b),
        accept_q: counter(&chain.stats.q),
        accept_plane: counter(&chain.stats.plane),
        accept_sigma: counter(&chain.stats.sigma),
        ess: counter(&chain.stats.ess),
        initial: record(&chain.initial, full_fvals),
    };
    write_json(&mut out, &path, &header)?;
    for s in &chain.snapshots {
        write_json(&mut out, &path, &record(s, full_fvals))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn write_json<T: Serialize>(out: &mut impl Write, path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Error::io(path, e))
}

/// Reads a chain written by [`persist_chain`].
pub fn load_chain(dir: &Path) -> Result<Chain> {
    let path = dir.join(CHAIN_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Load {
            line: 1,
            message: "missing header record".into(),
        })?
        .map_err(|e| Error::io(&path, e))?;
    let header: HeaderRecord = serde_json::from_str(&first).map_err(|e| Error::Load {
        line: 1,
        message: e.to_string(),
    })?;
    let load1 = |message: String| Error::Load { line: 1, message };
    if header.format != FORMAT {
        return Err(load1(format!("unsupported format '{}'", header.format)));
    }
    let descriptor = ChainDescriptor {
        model: header.model,
        family: header.family.parse().map_err(|e: Error| load1(e.to_string()))?,
        mode: header.mode.parse().map_err(|e: Error| load1(e.to_string()))?,
        d: header.d,
        extra_axis: header.extra_axis,
        sites: header.sites,
    };
    let schedule = Schedule::new(header.iterations, Some(header.burn_in), header.thin)
        .map_err(|e| load1(e.to_string()))?;
    let initial = snapshot(header.initial, header.extra_axis, 1)?;
    let mut snapshots = Vec::with_capacity(header.snapshots);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line.map_err(|e| Error::io(&path, e))?;
        let rec: SnapshotRecord = serde_json::from_str(&text).map_err(|e| Error::Load {
            line: line_no,
            message: e.to_string(),
        })?;
        snapshots.push(snapshot(rec, header.extra_axis, line_no)?);
    }
    if snapshots.len() != header.snapshots {
        return Err(Error::Load {
            line: snapshots.len() + 2,
            message: format!("expected {} snapshots, found {}", header.snapshots, snapshots.len()),
        });
    }
    Ok(Chain {
        descriptor,
        seed: header.seed,
        schedule,
        initial,
        snapshots,
        stats: AcceptanceStats {
            a: move_counter(&header.accept_a),
            b: move_counter(&header.accept_b),
            q: move_counter(&header.accept_q),
            plane: move_counter(&header.accept_plane),
            sigma: move_counter(&header.accept_sigma),
            ess: move_counter(&header.ess),
        },
    })
}
