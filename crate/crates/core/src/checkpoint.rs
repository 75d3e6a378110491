//! DCRM model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! "DCRM"                      4 bytes
//! version = 1                 u32
//! D, K, L                     u32 ×3
//! tail bitmap                 ceil(K/8) bytes, bit (k % 8) of byte k/8 set for tail classes
//! uniform weights             f32 × P·D
//! residual weights            f32 × P·D
//! neighbors m                 u32
//! tau, alpha0, beta0          f64 ×3
//! head_threshold              u64
//! class counts                u64 × K
//! prototypes                  f64 × K·D
//! standard deviations         f64 × K·D
//! for each tail class, ascending:
//!     |S_t|                   u32
//!     S_t                     u32 × |S_t|
//!     similarities            f64 × |S_t|
//!     drift vectors           f64 × |S_t|·D
//!     probabilities           f64 × (|S_t| + 1), self term last
//!     alpha_t, beta_t         f64 ×2
//! ```
//!
//! `P` is the total proxy count: classes in index order, one proxy per
//! head class and `L` per tail class, each proxy `D` contiguous values.

use std::fs;
use std::path::Path;

use crate::classifier::{DcrModel, MultiProxyClassifier};
use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::stats::{ClassStats, Partition, StatsConfig, TailDrift};

pub const DCRM_MAGIC: [u8; 4] = *b"DCRM";
pub const DCRM_VERSION: u32 = 1;

pub fn encode_model(model: &DcrModel) -> Vec<u8> {
    let stats = &model.stats;
    let d = model.uniform.dim();
    let k = model.uniform.num_classes();
    let mut out = Vec::new();
    out.extend_from_slice(&DCRM_MAGIC);
    put_u32(&mut out, DCRM_VERSION);
    put_u32(&mut out, d as u32);
    put_u32(&mut out, k as u32);
    put_u32(&mut out, model.uniform.proxies() as u32);
    let mut bitmap = vec![0u8; k.div_ceil(8)];
    for (c, &t) in model.uniform.tail_mask().iter().enumerate() {
        if t {
            bitmap[c / 8] |= 1 << (c % 8);
        }
    }
    out.extend_from_slice(&bitmap);
    for clf in [&model.uniform, &model.residual] {
        for &w in clf.weights() {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    put_u32(&mut out, stats.config.neighbors as u32);
    put_f64(&mut out, stats.config.tau);
    put_f64(&mut out, stats.config.alpha0);
    put_f64(&mut out, stats.config.beta0);
    out.extend_from_slice(&(stats.config.head_threshold as u64).to_le_bytes());
    for &n in &stats.class_counts {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    for row in stats.prototypes.iter().chain(&stats.std_devs) {
        row.iter().for_each(|&v| put_f64(&mut out, v));
    }
    for entry in stats.drift.iter().flatten() {
        put_u32(&mut out, entry.neighbors.len() as u32);
        entry.neighbors.iter().for_each(|&j| put_u32(&mut out, j as u32));
        entry.similarities.iter().for_each(|&v| put_f64(&mut out, v));
        entry.drifts.iter().flatten().for_each(|&v| put_f64(&mut out, v));
        entry.probabilities.iter().for_each(|&v| put_f64(&mut out, v));
        put_f64(&mut out, entry.alpha);
        put_f64(&mut out, entry.beta);
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<DcrModel> {
    let mut r = ByteReader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if magic != DCRM_MAGIC {
        return Err(Error::BadMagic {
            expected: DCRM_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != DCRM_VERSION {
        return Err(Error::VersionMismatch {
            expected: DCRM_VERSION,
            found: version,
        });
    }
    let d = r.u32("dimension")? as usize;
    let k = r.u32("class count")? as usize;
    let proxies = r.u32("proxy count")? as usize;
    if d == 0 || k == 0 || proxies == 0 {
        return Err(Error::Malformed("checkpoint declares an empty model".into()));
    }
    let mut tail_mask = vec![false; k];
    let bitmap: Vec<u8> = (0..k.div_ceil(8))
        .map(|_| r.array::<1>("tail bitmap").map(|b| b[0]))
        .collect::<Result<_>>()?;
    for (c, t) in tail_mask.iter_mut().enumerate() {
        *t = bitmap[c / 8] & (1 << (c % 8)) != 0;
    }
    let total = tail_mask.iter().map(|&t| if t { proxies } else { 1 }).sum::<usize>() * d;
    let mut read_weights = |what: &str| -> Result<MultiProxyClassifier> {
        let w = (0..total)
            .map(|_| r.f32(what).map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        MultiProxyClassifier::from_parts(d, &tail_mask, proxies, w)
    };
    let uniform = read_weights("uniform weights")?;
    let residual = read_weights("residual weights")?;

    let config = StatsConfig {
        neighbors: r.u32("neighbors")? as usize,
        tau: r.f64("tau")?,
        alpha0: r.f64("alpha0")?,
        beta0: r.f64("beta0")?,
        head_threshold: r.u64("head threshold")? as usize,
    };
    let class_counts = (0..k)
        .map(|_| r.u64("class counts").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let read_rows = |what: &str, r: &mut ByteReader| -> Result<Vec<Vec<f64>>> {
        (0..k).map(|_| (0..d).map(|_| r.f64(what)).collect()).collect()
    };
    let prototypes = read_rows("prototypes", &mut r)?;
    let std_devs = read_rows("standard deviations", &mut r)?;
    let partition = Partition::from_tail_mask(&tail_mask);
    let mut drift = vec![None; k];
    for &t in &partition.tail {
        let m = r.u32("neighbor count")? as usize;
        if m > k {
            return Err(Error::Malformed(format!("tail class {t} lists {m} neighbors")));
        }
        let neighbors = (0..m)
            .map(|_| r.u32("neighbors").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let similarities = (0..m).map(|_| r.f64("similarities")).collect::<Result<Vec<_>>>()?;
        let drifts = (0..m)
            .map(|_| (0..d).map(|_| r.f64("drift vectors")).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        let probabilities = (0..=m).map(|_| r.f64("probabilities")).collect::<Result<Vec<_>>>()?;
        drift[t] = Some(TailDrift {
            neighbors,
            similarities,
            drifts,
            probabilities,
            alpha: r.f64("alpha")?,
            beta: r.f64("beta")?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after checkpoint",
            r.remaining()
        )));
    }
    let stats = ClassStats {
        config,
        class_counts,
        prototypes,
        std_devs,
        partition,
        drift,
    };
    stats
        .check_invariants()
        .map_err(|e| Error::Malformed(format!("checkpoint statistics are inconsistent: {e}")))?;
    DcrModel::new(uniform, residual, stats)
}

pub fn write_model(model: &DcrModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<DcrModel> {
    decode_model(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}
