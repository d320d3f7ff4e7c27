//! Datasets and the synthetic rotated benchmark.
//!
//! The benchmark plants C Gaussian class clusters on a circle in the first
//! two coordinates and pads the rest with nuisance noise; each domain is the
//! same layout rotated by its angle. Nearby angles make nearby domains, and
//! large rotations walk one class into another's base-frame position, which
//! is what gives the held-out angles genuine cross-domain confusion.

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Standard deviation of the nuisance coordinates (variance 0.25).
pub const NUISANCE_STD: f64 = 0.5;
/// Radius of the circle the class means sit on.
pub const CLASS_RADIUS: f64 = 3.0;

/// All samples of one domain. `domain` doubles as the rotation angle in
/// degrees for generated data; arbitrary integer tags are fine for external
/// feature files.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: i32,
    pub features: Tensor,
    pub labels: Vec<u32>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    pub fn validate(&self, classes: u32) -> Result<()> {
        if self.features.rows != self.labels.len() {
            return Err(Error::usage(format!(
                "domain {}: {} feature rows vs {} labels",
                self.domain,
                self.features.rows,
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::usage(format!(
                "domain {}: label {} out of range for {} classes",
                self.domain, bad, classes
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::NonFinite {
                context: format!("features of domain {}", self.domain),
            });
        }
        Ok(())
    }

    /// Split into (train, held-out) with a seeded shuffle.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> (DomainDataset, DomainDataset) {
        let n = self.len();
        let n_holdout = ((n as f64) * holdout_fraction).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, self.domain as u64));
        idx.shuffle(&mut rng);
        let (hold, train) = idx.split_at(n_holdout.min(n));
        (self.subset(train), self.subset(hold))
    }

    /// The rows at `idx`, as a new dataset for the same domain.
    pub fn subset(&self, idx: &[usize]) -> DomainDataset {
        DomainDataset {
            domain: self.domain,
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// One minibatch. Origins are tracked per row because negative batches mix
/// several domains and replay-buffer entries.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub features: Tensor,
    pub labels: Vec<u32>,
    pub domains: Vec<i32>,
}

impl DomainBatch {
    pub fn from_dataset(ds: &DomainDataset, idx: &[usize]) -> DomainBatch {
        DomainBatch {
            features: ds.features.select_rows(idx),
            labels: idx.iter().map(|&i| ds.labels[i]).collect(),
            domains: vec![ds.domain; idx.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenate batches row-wise.
    pub fn concat(parts: &[DomainBatch]) -> Result<DomainBatch> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat of zero batches"))?;
        let cols = first.features.cols;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        let mut domains = Vec::new();
        for p in parts {
            if p.features.cols != cols {
                return Err(Error::shape(
                    "batch_concat",
                    format!("{} vs {} feature columns", cols, p.features.cols),
                ));
            }
            features.extend_from_slice(&p.features.data);
            labels.extend_from_slice(&p.labels);
            domains.extend_from_slice(&p.domains);
        }
        Ok(DomainBatch {
            features: Tensor::new(labels.len(), cols, features)?,
            labels,
            domains,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub classes: u32,
    pub dim: usize,
    pub samples_per_class: usize,
    pub source_angles: Vec<f64>,
    pub target_angles: Vec<f64>,
    pub geometry_seed: u64,
    /// Isotropic standard deviation of each class cluster.
    pub noise_scale: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            classes: 4,
            dim: 16,
            samples_per_class: 200,
            source_angles: vec![15.0, 30.0, 45.0, 60.0, 75.0],
            target_angles: vec![0.0, 90.0],
            geometry_seed: 0,
            noise_scale: 0.5,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("benchmark needs at least 2 classes".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("benchmark dim must be at least 2".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::Config("noise_scale must be positive".into()));
        }
        let mut ids: Vec<i32> = self
            .source_angles
            .iter()
            .chain(&self.target_angles)
            .map(|&a| a.round() as i32)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.source_angles.len() + self.target_angles.len() {
            return Err(Error::Config(
                "source and target angles must be pairwise distinct".into(),
            ));
        }
        Ok(())
    }
}

/// Counterclockwise rotation of the first two coordinates.
pub fn rotate2(x: f64, y: f64, angle_deg: f64) -> (f64, f64) {
    let r = angle_deg.to_radians();
    let (s, c) = r.sin_cos();
    (x * c - y * s, x * s + y * c)
}

fn generate_domain(spec: &BenchmarkSpec, base_angles: &[f64], angle: f64, seed: u64) -> Result<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, (angle.round() as i64) as u64));
    let n = spec.classes as usize * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, &base) in base_angles.iter().enumerate() {
        let (mx, my) = (CLASS_RADIUS * base.cos(), CLASS_RADIUS * base.sin());
        for _ in 0..spec.samples_per_class {
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            let (px, py) = (mx + spec.noise_scale * nx, my + spec.noise_scale * ny);
            let (rx, ry) = rotate2(px, py, angle);
            data.push(rx);
            data.push(ry);
            for _ in 2..spec.dim {
                let nn: f64 = StandardNormal.sample(&mut rng);
                data.push(NUISANCE_STD * nn);
            }
            labels.push(k as u32);
        }
    }
    Ok(DomainDataset {
        domain: angle.round() as i32,
        features: Tensor::new(n, spec.dim, data)?,
        labels,
    })
}

/// Generate (sources, targets). Reproducible bit-for-bit from (spec, seed):
/// each domain draws from its own derived stream and the class geometry
/// depends only on `geometry_seed`.
pub fn generate_rotated_benchmark(
    spec: &BenchmarkSpec,
    seed: u64,
) -> Result<(Vec<DomainDataset>, Vec<DomainDataset>)> {
    spec.validate()?;
    // Class means: equally spaced on the circle, with a common offset drawn
    // from the geometry seed.
    let mut geo_rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed);
    let offset: f64 = geo_rng.gen::<f64>() * std::f64::consts::TAU;
    let base_angles: Vec<f64> = (0..spec.classes)
        .map(|k| offset + std::f64::consts::TAU * k as f64 / spec.classes as f64)
        .collect();

    let gen_all = |angles: &[f64]| -> Result<Vec<DomainDataset>> {
        angles
            .iter()
            .map(|&a| generate_domain(spec, &base_angles, a, seed))
            .collect()
    };
    Ok((gen_all(&spec.source_angles)?, gen_all(&spec.target_angles)?))
}

// ── CSV interchange ─────────────────────────────────────────────────────────
// Schema: header `domain,label,f0,...,f{d-1}`, one sample per row. Floats are
// written in Rust's shortest round-trip form, so save followed by load
// reproduces the dataset exactly.

pub fn save_feature_csv(path: &Path, ds: &DomainDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    header.extend((0..ds.dim()).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec = vec![ds.domain.to_string(), ds.labels[i].to_string()];
        rec.extend(ds.features.row_slice(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Load one domain's samples. The file must carry a single domain id; the
/// optional `expected_dim` pins the feature arity. Malformed rows are
/// reported with their line number.
pub fn load_feature_csv(path: &Path, expected_dim: Option<usize>) -> Result<DomainDataset> {
    let pstr = path.display().to_string();
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "domain" || &headers[1] != "label" {
        return Err(Error::CsvData {
            path: pstr,
            line: 1,
            detail: "header must be domain,label,f0,...".into(),
        });
    }
    let dim = headers.len() - 2;
    for (i, h) in headers.iter().skip(2).enumerate() {
        if h != format!("f{i}") {
            return Err(Error::CsvData {
                path: pstr,
                line: 1,
                detail: format!("feature column {} named {:?}, expected f{}", i + 2, h, i),
            });
        }
    }
    if let Some(d) = expected_dim {
        if d != dim {
            return Err(Error::CsvData {
                path: pstr,
                line: 1,
                detail: format!("{} feature columns, expected {}", dim, d),
            });
        }
    }

    let mut domain: Option<i32> = None;
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec
            .position()
            .map(|p| p.line() as usize)
            .unwrap_or(0);
        let fail = |detail: String| Error::CsvData {
            path: pstr.clone(),
            line,
            detail,
        };
        if rec.len() != dim + 2 {
            return Err(fail(format!("{} fields, expected {}", rec.len(), dim + 2)));
        }
        let d: i32 = rec[0]
            .parse()
            .map_err(|_| fail(format!("bad domain id {:?}", &rec[0])))?;
        match domain {
            None => domain = Some(d),
            Some(prev) if prev != d => {
                return Err(fail(format!(
                    "mixed domain ids {} and {}; one file holds one domain",
                    prev, d
                )))
            }
            _ => {}
        }
        let label: u32 = rec[1]
            .parse()
            .map_err(|_| fail(format!("bad label {:?}", &rec[1])))?;
        labels.push(label);
        for f in rec.iter().skip(2) {
            let v: f64 = f
                .parse()
                .map_err(|_| fail(format!("bad feature value {:?}", f)))?;
            if !v.is_finite() {
                return Err(fail(format!("non-finite feature value {:?}", f)));
            }
            data.push(v);
        }
    }
    let domain = domain.ok_or_else(|| Error::CsvData {
        path: pstr.clone(),
        line: 1,
        detail: "file has no data rows".into(),
    })?;
    Ok(DomainDataset {
        domain,
        features: Tensor::new(labels.len(), dim, data)?,
        labels,
    })
}

// ── batching ────────────────────────────────────────────────────────────────

/// Shuffled index order for one epoch, derived statelessly from (seed,
/// domain stream, epoch). The trainer leans on this to resume mid-run
/// without serializing cursors.
pub fn epoch_order(n: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive2(seed, stream, epoch));
    idx.shuffle(&mut rng);
    idx
}

/// One epoch of minibatches: shuffled without replacement, trailing short
/// batch included, so the union of one epoch is the dataset exactly once.
pub fn batch_iter<'a, R: Rng>(
    ds: &'a DomainDataset,
    batch_size: usize,
    rng: &mut R,
) -> impl Iterator<Item = DomainBatch> + 'a {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    let chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    chunks
        .into_iter()
        .map(move |c| DomainBatch::from_dataset(ds, &c))
}
