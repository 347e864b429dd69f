//! Timestamped domain sequences and the rotating two-moons generator.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;

/// One timestamped labelled sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub timestamp: f64,
    /// One sample per row.
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows `idx` as a new domain with the same timestamp.
    pub fn subset(&self, idx: &[usize]) -> Domain {
        let dim = self.input_dim();
        let inputs = Matrix::from_fn(idx.len(), dim, |i, j| self.inputs[(idx[i], j)]);
        Domain {
            timestamp: self.timestamp,
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoMoonsConfig {
    pub num_domains: usize,
    pub samples_per_domain: usize,
    pub rotation_deg: f64,
    pub noise_sigma: f64,
    pub train_count: usize,
}

impl Default for TwoMoonsConfig {
    fn default() -> Self {
        TwoMoonsConfig {
            num_domains: 12,
            samples_per_domain: 200,
            rotation_deg: 18.0,
            noise_sigma: 0.10,
            train_count: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSequence {
    pub domains: Vec<Domain>,
    pub train_count: usize,
    pub num_classes: usize,
    pub generator: Option<TwoMoonsConfig>,
    pub seed: Option<u64>,
}

impl DomainSequence {
    pub fn new(domains: Vec<Domain>, train_count: usize, num_classes: usize) -> Result<Self> {
        let seq = DomainSequence {
            domains,
            train_count,
            num_classes,
            generator: None,
            seed: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Invalid("domain list is empty".into()));
        }
        if self.train_count < 1 || self.train_count >= self.domains.len() {
            return Err(Error::Invalid(format!(
                "train_count {} must be in [1, {})",
                self.train_count,
                self.domains.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Invalid("need at least two classes".into()));
        }
        let dim = self.domains[0].input_dim();
        for (i, d) in self.domains.iter().enumerate() {
            if d.inputs.rows() != d.labels.len() {
                return Err(Error::Invalid(format!(
                    "domain {i}: {} inputs but {} labels",
                    d.inputs.rows(),
                    d.labels.len()
                )));
            }
            if d.input_dim() != dim {
                return Err(Error::Invalid(format!("domain {i}: feature width differs")));
            }
            if let Some(&bad) = d.labels.iter().find(|&&l| l >= self.num_classes) {
                return Err(Error::Invalid(format!("domain {i}: label {bad} out of range")));
            }
            if !d.timestamp.is_finite() || !d.inputs.is_finite() {
                return Err(Error::Invalid(format!("domain {i}: non-finite values")));
            }
            if i > 0 && d.timestamp <= self.domains[i - 1].timestamp {
                return Err(Error::Invalid(format!(
                    "timestamps must increase strictly (domain {i})"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.domains[0].input_dim()
    }

    pub fn train_domains(&self) -> &[Domain] {
        &self.domains[..self.train_count]
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (self.train_count..self.domains.len()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SequenceFile {
            version: SEQUENCE_FORMAT_VERSION,
            num_domains: self.domains.len(),
            train_count: self.train_count,
            num_classes: self.num_classes,
            generator_params: self.generator,
            seed: self.seed,
            domains: self
                .domains
                .iter()
                .map(|d| DomainRecord {
                    timestamp: d.timestamp,
                    samples: (0..d.len())
                        .map(|i| {
                            let mut row: Vec<Value> =
                                d.inputs.row(i).iter().map(|&x| Value::from(x)).collect();
                            row.push(Value::from(d.labels[i] as u64));
                            row
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SequenceFile = serde_json::from_str(text)?;
        if file.version != SEQUENCE_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported sequence format version {}",
                file.version
            )));
        }
        if file.num_domains != file.domains.len() {
            return Err(Error::Invalid(format!(
                "header says {} domains, file holds {}",
                file.num_domains,
                file.domains.len()
            )));
        }
        let mut domains = Vec::with_capacity(file.domains.len());
        for (di, rec) in file.domains.into_iter().enumerate() {
            let width = rec.samples.first().map_or(1, Vec::len);
            if width < 2 {
                return Err(Error::Invalid(format!("domain {di}: sample rows too short")));
            }
            let mut data = Vec::with_capacity(rec.samples.len() * (width - 1));
            let mut labels = Vec::with_capacity(rec.samples.len());
            for (si, row) in rec.samples.iter().enumerate() {
                if row.len() != width {
                    return Err(Error::Invalid(format!("domain {di}, sample {si}: ragged row")));
                }
                for v in &row[..width - 1] {
                    data.push(v.as_f64().ok_or_else(|| {
                        Error::Invalid(format!("domain {di}, sample {si}: non-numeric feature"))
                    })?);
                }
                let label = row[width - 1].as_u64().ok_or_else(|| {
                    Error::Invalid(format!("domain {di}, sample {si}: label is not an integer"))
                })?;
                labels.push(label as usize);
            }
            domains.push(Domain {
                timestamp: rec.timestamp,
                inputs: Matrix::new(labels.len(), width - 1, data)?,
                labels,
            });
        }
        let seq = DomainSequence {
            domains,
            train_count: file.train_count,
            num_classes: file.num_classes,
            generator: file.generator_params,
            seed: file.seed,
        };
        seq.validate()?;
        Ok(seq)
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    version: u32,
    num_domains: usize,
    train_count: usize,
    num_classes: usize,
    generator_params: Option<TwoMoonsConfig>,
    seed: Option<u64>,
    domains: Vec<DomainRecord>,
}

#[derive(Serialize, Deserialize)]
struct DomainRecord {
    timestamp: f64,
    samples: Vec<Vec<Value>>,
}

pub fn save_sequence(seq: &DomainSequence, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, seq.to_json()?)?;
    Ok(())
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<DomainSequence> {
    DomainSequence::from_json(&fs::read_to_string(path)?)
}

/// Writes `x1,x2,...,label` rows for one domain.
pub fn write_domain_csv(domain: &Domain, mut out: impl Write) -> Result<()> {
    let header: Vec<String> = (1..=domain.input_dim()).map(|i| format!("x{i}")).collect();
    writeln!(out, "{},label", header.join(","))?;
    for i in 0..domain.len() {
        for x in domain.inputs.row(i) {
            write!(out, "{x},")?;
        }
        writeln!(out, "{}", domain.labels[i])?;
    }
    Ok(())
}

/// Counterclockwise planar rotation of `point` about `center`.
pub fn rotate2d(point: [f64; 2], angle_rad: f64, center: [f64; 2]) -> [f64; 2] {
    let (s, c) = angle_rad.sin_cos();
    let dx = point[0] - center[0];
    let dy = point[1] - center[1];
    [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
}

/// Noiseless canonical moons: `n/2` points on the upper arc (class 0) then
/// `n/2` on the lower arc (class 1), with `θ` evenly spaced over `[0, π]`.
pub fn canonical_moons(samples: usize) -> Vec<([f64; 2], usize)> {
    let half = samples / 2;
    let theta = |i: usize| {
        if half > 1 {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        } else {
            0.0
        }
    };
    let upper = (0..half).map(|i| ([theta(i).cos(), theta(i).sin()], 0));
    let lower = (0..half).map(|i| ([1.0 - theta(i).cos(), 0.5 - theta(i).sin()], 1));
    upper.chain(lower).collect()
}

/// Centroid of the noiseless domain-0 point set; the fixed rotation center.
pub fn moons_center(samples: usize) -> [f64; 2] {
    let pts = canonical_moons(samples);
    let n = pts.len() as f64;
    let (sx, sy) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (p, _)| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

/// Rotating two-moons sequence: domain `t` is the canonical moons rotated
/// counterclockwise about [`moons_center`] by `t · rotation_deg`, then
/// perturbed with isotropic Gaussian noise. Timestamps are `0, 1, …`.
pub fn gen_two_moons(cfg: &TwoMoonsConfig, seed: u64) -> Result<DomainSequence> {
    if cfg.samples_per_domain == 0 || !cfg.samples_per_domain.is_multiple_of(2) {
        return Err(Error::Argument(format!(
            "samples_per_domain must be even and positive, got {}",
            cfg.samples_per_domain
        )));
    }
    if cfg.num_domains < 2 {
        return Err(Error::Argument("need at least two domains".into()));
    }
    if cfg.noise_sigma < 0.0 || !cfg.noise_sigma.is_finite() || !cfg.rotation_deg.is_finite() {
        return Err(Error::Argument("noise and rotation must be finite, noise >= 0".into()));
    }
    let base = canonical_moons(cfg.samples_per_domain);
    let center = moons_center(cfg.samples_per_domain);
    let mut rng = SeededRng::new(seed);

    let domains = (0..cfg.num_domains)
        .map(|t| {
            let angle = (t as f64 * cfg.rotation_deg).to_radians();
            let mut data = Vec::with_capacity(base.len() * 2);
            let mut labels = Vec::with_capacity(base.len());
            for &(p, label) in &base {
                let q = rotate2d(p, angle, center);
                let nx = rng.normal();
                let ny = rng.normal();
                data.push(q[0] + cfg.noise_sigma * nx);
                data.push(q[1] + cfg.noise_sigma * ny);
                labels.push(label);
            }
            Domain {
                timestamp: t as f64,
                inputs: Matrix::new(labels.len(), 2, data).expect("consistent shape"),
                labels,
            }
        })
        .collect();

    let seq = DomainSequence {
        domains,
        train_count: cfg.train_count,
        num_classes: 2,
        generator: Some(*cfg),
        seed: Some(seed),
    };
    seq.validate().map_err(|e| Error::Argument(e.to_string()))?;
    Ok(seq)
}
