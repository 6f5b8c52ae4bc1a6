//! CSV metrics and the run manifest.
//!
//! `metrics.csv` and `rounds.csv` hold only deterministic values, so two runs
//! with the same configuration and seed produce identical bytes; wall-clock
//! time goes to `timing.csv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::cascade::{MetricRow, RoundRecord};
use crate::error::{Result, WinnError};
use crate::train::LossMode;

pub const METRICS_FILE: &str = "metrics.csv";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const MANIFEST_FILE: &str = "manifest.sha256";

pub const METRICS_HEADER: &str =
    "cascade,stage,inner_step,loss,wasserstein,penalty,lambda,cross_entropy,total,mean_f_pos,mean_f_neg,clamped,pool_size";
pub const ROUNDS_HEADER: &str =
    "cascade,stage,threshold,pos_min,pos_max,mean_score,min_score,budget_exhausted,mean_stop_step";
pub const TIMING_HEADER: &str = "cascade,stage,seconds";

pub fn metrics_line(row: &MetricRow) -> String {
    let r = &row.report;
    let mode = match r.mode {
        LossMode::Wasserstein => "wasserstein",
        LossMode::CrossEntropy => "cross_entropy",
    };
    format!(
        "{},{},{},{mode},{},{},{},{},{},{},{},{},{}",
        row.cascade,
        row.stage,
        row.inner_step,
        r.wasserstein,
        r.penalty,
        r.lambda,
        r.cross_entropy,
        r.total,
        r.mean_f_pos,
        r.mean_f_neg,
        r.clamped,
        row.pool_size
    )
}

pub fn rounds_line(r: &RoundRecord) -> String {
    let n = r.scores.len().max(1) as f64;
    let mean = r.scores.iter().sum::<f64>() / n;
    let min = r.scores.iter().copied().fold(f64::INFINITY, f64::min);
    let exhausted = r.budget_exhausted.iter().filter(|&&b| b).count();
    let steps = r.stop_step.iter().sum::<usize>() as f64 / n;
    format!(
        "{},{},{},{},{},{mean},{min},{exhausted},{steps}",
        r.cascade, r.stage, r.threshold, r.pos_min, r.pos_max
    )
}

/// An append-only CSV file with a fixed header.
#[derive(Debug)]
pub struct CsvFile {
    path: PathBuf,
}

impl CsvFile {
    /// Creates (or truncates) the file and writes the header.
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| WinnError::io(dir, e))?;
        }
        fs::write(path, format!("{header}\n")).map_err(|e| WinnError::io(path, e))?;
        Ok(CsvFile { path: path.to_path_buf() })
    }

    /// Reopens an existing file, keeping only the rows for which `keep`
    /// holds; used when resuming from a checkpoint so that rows written after
    /// it are replaced rather than duplicated.
    pub fn resume(path: &Path, header: &str, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Self::create(path, header),
            Err(e) => return Err(WinnError::io(path, e)),
        };
        let mut lines = text.lines();
        if lines.next() != Some(header) {
            return Err(WinnError::usage(format!("{}: unexpected header", path.display())));
        }
        let mut out = format!("{header}\n");
        for l in lines.filter(|l| keep(l)) {
            out.push_str(l);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| WinnError::io(path, e))?;
        Ok(CsvFile { path: path.to_path_buf() })
    }

    pub fn append<S: AsRef<str>>(&mut self, lines: &[S]) -> Result<()> {
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| WinnError::io(&self.path, e))?;
        let mut buf = String::new();
        for l in lines {
            buf.push_str(l.as_ref());
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| WinnError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// `(cascade, stage)` of a metrics, rounds or timing row.
pub fn row_stage(line: &str) -> Option<(usize, usize)> {
    let mut it = line.split(',');
    Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
}

/// Hashes every file under `root` into `root/manifest.sha256`, one
/// `<hex digest>  <relative path>` line per file, sorted by path.
pub fn write_manifest(root: &Path) -> Result<PathBuf> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| WinnError::io(root, e.into()))?;
        let rel = entry.path().strip_prefix(root).expect("walked below root");
        if entry.file_type().is_file() && rel != Path::new(MANIFEST_FILE) {
            files.push(rel.to_path_buf());
        }
    }
    files.sort();
    let mut out = String::new();
    for rel in &files {
        let p = root.join(rel);
        let bytes = fs::read(&p).map_err(|e| WinnError::io(&p, e))?;
        // Forward slashes regardless of platform.
        let name: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        out.push_str(&format!("{}  {}\n", hex::encode(Sha256::digest(&bytes)), name.join("/")));
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, out).map_err(|e| WinnError::io(&path, e))?;
    Ok(path)
}

/// Recomputes the manifest and lists entries whose file is missing or whose
/// digest differs.
pub fn verify_manifest(root: &Path) -> Result<Vec<String>> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| WinnError::io(&path, e))?;
    let mut bad = Vec::new();
    for line in text.lines() {
        let (hex, name) = line
            .split_once("  ")
            .ok_or_else(|| WinnError::usage(format!("malformed manifest line {line:?}")))?;
        let actual = fs::read(root.join(name)).ok().map(|b| hex::encode(Sha256::digest(&b)));
        if actual.as_deref() != Some(hex) {
            bad.push(name.to_string());
        }
    }
    Ok(bad)
}
