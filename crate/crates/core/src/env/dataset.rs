//! Dataset export: one CSV/PGM pair per rendered observation plus a JSONL
//! manifest, laid out as `<out>/<episode>/<leg>/<k>.{csv,pgm}` with
//! deterministic ordering by (episode, leg, sample index).

use super::obs::{AugmentedSample, FrameLabels};
use super::EnvError;
use crate::trajectory::Pose;
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Augmentation set for one leg of one episode.
pub struct LegSamples {
    pub episode: usize,
    pub leg: usize,
    /// The `(x, y, psi)` filter covariance the poses were drawn from.
    pub covariance: Matrix3<f64>,
    pub samples: Vec<AugmentedSample>,
}

/// One manifest line describing an exported observation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub episode: usize,
    pub leg: usize,
    pub k: usize,
    pub file_csv: String,
    pub file_pgm: String,
    pub t: f64,
    pub sample_pose: Pose,
    /// Action labels in the sampled observation frame (m).
    pub labels: FrameLabels,
    /// Key into `covariances.jsonl`.
    pub covariance_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CovarianceEntry {
    id: String,
    /// Row-major 3x3 `(x, y, psi)` covariance.
    cov: Vec<f64>,
}

/// Paths produced by an export.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub manifest_path: PathBuf,
    pub covariances_path: PathBuf,
    pub entries: usize,
}

/// PGM height scale for observation windows (m mapped to full 16-bit range).
const WINDOW_PGM_SCALE: f64 = 0.5;

fn write_window_csv(path: &Path, sample: &AugmentedSample) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let w = sample.obs.spec.width_px;
    for row in sample.obs.window.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

fn write_window_pgm(path: &Path, sample: &AugmentedSample) -> std::io::Result<()> {
    let (w, h) = (sample.obs.spec.width_px, sample.obs.spec.height_px);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P5")?;
    writeln!(f, "{w} {h}")?;
    writeln!(f, "65535")?;
    for v in &sample.obs.window {
        let q = (v / WINDOW_PGM_SCALE * 65535.0).clamp(0.0, 65535.0) as u16;
        f.write_all(&q.to_be_bytes())?;
    }
    Ok(())
}

/// Write all samples plus `manifest.jsonl` and `covariances.jsonl` under
/// `out`. Returns the manifest description; fails with path context on I/O
/// errors.
pub fn export_dataset(legs: &[LegSamples], out: &Path) -> Result<DatasetManifest, EnvError> {
    if legs.is_empty() || legs.iter().all(|l| l.samples.is_empty()) {
        return Err(EnvError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "nothing to export",
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| io_ctx(e, out))?;
    let manifest_path = out.join("manifest.jsonl");
    let covariances_path = out.join("covariances.jsonl");
    let mut manifest =
        std::io::BufWriter::new(std::fs::File::create(&manifest_path).map_err(|e| io_ctx(e, &manifest_path))?);
    let mut covs = std::io::BufWriter::new(
        std::fs::File::create(&covariances_path).map_err(|e| io_ctx(e, &covariances_path))?,
    );

    let mut ordered: Vec<&LegSamples> = legs.iter().collect();
    ordered.sort_by_key(|l| (l.episode, l.leg));

    let mut entries = 0usize;
    for leg in ordered {
        let dir = out.join(leg.episode.to_string()).join(leg.leg.to_string());
        std::fs::create_dir_all(&dir).map_err(|e| io_ctx(e, &dir))?;
        let cov_id = format!("ep{}_leg{}", leg.episode, leg.leg);
        let cov_row_major: Vec<f64> = (0..3)
            .flat_map(|r| (0..3).map(move |c| (r, c)))
            .map(|(r, c)| leg.covariance[(r, c)])
            .collect();
        writeln!(
            covs,
            "{}",
            serde_json::to_string(&CovarianceEntry {
                id: cov_id.clone(),
                cov: cov_row_major,
            })
            .expect("serializable")
        )
        .map_err(|e| io_ctx(e, &covariances_path))?;

        for (k, sample) in leg.samples.iter().enumerate() {
            let csv_path = dir.join(format!("{k}.csv"));
            let pgm_path = dir.join(format!("{k}.pgm"));
            write_window_csv(&csv_path, sample).map_err(|e| io_ctx(e, &csv_path))?;
            write_window_pgm(&pgm_path, sample).map_err(|e| io_ctx(e, &pgm_path))?;
            let entry = ManifestEntry {
                episode: leg.episode,
                leg: leg.leg,
                k,
                file_csv: rel(out, &csv_path),
                file_pgm: rel(out, &pgm_path),
                t: sample.obs.t,
                sample_pose: sample.sample_pose,
                labels: sample.labels,
                covariance_id: cov_id.clone(),
            };
            writeln!(manifest, "{}", serde_json::to_string(&entry).expect("serializable"))
                .map_err(|e| io_ctx(e, &manifest_path))?;
            entries += 1;
        }
    }
    Ok(DatasetManifest {
        manifest_path,
        covariances_path,
        entries,
    })
}

/// Read back the windows referenced by a manifest (for round-trip checks and
/// external consumers).
pub fn load_manifest(manifest_path: &Path) -> Result<Vec<(ManifestEntry, Vec<f64>)>, EnvError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| io_ctx(e, manifest_path))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| EnvError::Io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
        let csv = std::fs::read_to_string(base.join(&entry.file_csv))
            .map_err(|e| io_ctx(e, &base.join(&entry.file_csv)))?;
        let window: Vec<f64> = csv
            .lines()
            .flat_map(|l| l.split(','))
            .map(|s| s.parse::<f64>().expect("malformed height"))
            .collect();
        out.push((entry, window));
    }
    Ok(out)
}

fn rel(base: &Path, path: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn io_ctx(e: std::io::Error, path: &Path) -> EnvError {
    EnvError::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}
