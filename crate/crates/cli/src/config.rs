//! Pipeline configuration: one JSON document, every field optional.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use pnr_core::classifier::ClassifierConfig;
use pnr_core::digest::{sha256, to_hex, Digest32};
use pnr_core::tomography::SolverOptions;
use pnr_core::waveform::DetectorParams;

use crate::error::{CliError, Result};

/// Where the classifier templates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Histogram modes of the reference probe's traces; no ground truth used.
    Histogram,
    /// Per-class mean traces using the simulator's ground truth.
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub detector: DetectorParams,
    pub classifier: ClassifierConfig,
    pub solver: SolverOptions,
    /// Mean photon numbers |α|² of the probe states.
    pub ladder: Vec<f64>,
    pub shots_per_probe: usize,
    pub seed: u64,
    /// Not part of the digest: moving the outputs does not change them.
    pub output_dir: PathBuf,
    /// Photon-number truncation M of the reconstruction.
    pub truncation: usize,
    /// Outcome classes N, the last one pooling n ≥ N−1.
    pub outcomes: usize,
    pub reference_source: ReferenceSource,
    /// The ladder value nearest this one supplies the classifier templates.
    pub reference_probe: f64,
}

pub fn default_ladder() -> Vec<f64> {
    (0..19).map(|i| 0.3 + 5.7 * i as f64 / 18.0).collect()
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorParams::default(),
            classifier: ClassifierConfig::default(),
            solver: SolverOptions::default(),
            ladder: default_ladder(),
            shots_per_probe: 10_000,
            seed: 20_240_547,
            output_dir: PathBuf::from("out"),
            truncation: 70,
            outcomes: 7,
            reference_source: ReferenceSource::Histogram,
            reference_probe: 5.7,
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Directory for all pipeline outputs.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shots per probe.
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    /// Comma-separated mean photon numbers.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
    /// Smoothing weight γ.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Photon-number truncation M.
    #[arg(long, global = true)]
    pub truncation: Option<usize>,
    /// Simulated detection efficiency.
    #[arg(long, global = true)]
    pub efficiency: Option<f64>,
    /// Additive noise standard deviation in volts.
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    /// Trigger jitter standard deviation in seconds.
    #[arg(long, global = true)]
    pub jitter_sigma: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub reference_source: Option<ReferenceSource>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` if given, otherwise the defaults, then applies the
    /// overrides and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.shots {
            self.shots_per_probe = v;
        }
        if let Some(v) = &o.ladder {
            self.ladder = v.clone();
        }
        if let Some(v) = o.gamma {
            self.solver.gamma = v;
        }
        if let Some(v) = o.truncation {
            self.truncation = v;
        }
        if let Some(v) = o.efficiency {
            self.detector.efficiency = v;
        }
        if let Some(v) = o.noise_sigma {
            self.detector.noise_sigma = v;
        }
        if let Some(v) = o.jitter_sigma {
            self.detector.jitter_sigma = v;
        }
        if let Some(v) = o.reference_source {
            self.reference_source = v;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        if self.ladder.is_empty() {
            return bad("ladder", "must not be empty".into());
        }
        for (i, &v) in self.ladder.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("ladder[{i}]"), format!("{v} is not a finite value >= 0"));
            }
            if i > 0 && v <= self.ladder[i - 1] {
                return bad(
                    &format!("ladder[{i}]"),
                    format!("{v} does not exceed ladder[{}] = {}", i - 1, self.ladder[i - 1]),
                );
            }
        }
        if !self.ladder.iter().any(|&v| v >= 4.0) {
            return bad(
                "ladder",
                "needs at least one value >= 4 to populate the high photon-number classes".into(),
            );
        }
        if self.shots_per_probe == 0 {
            return bad("shots_per_probe", "must be >= 1".into());
        }
        if self.outcomes < 2 {
            return bad("outcomes", format!("must be >= 2, got {}", self.outcomes));
        }
        if self.truncation < self.outcomes {
            return bad(
                "truncation",
                format!("{} is below outcomes = {}", self.truncation, self.outcomes),
            );
        }
        if !(self.reference_probe.is_finite() && self.reference_probe > 0.0) {
            return bad(
                "reference_probe",
                format!("{} is not a finite value > 0", self.reference_probe),
            );
        }
        self.detector.validate().or_else(|e| bad("detector", e.to_string()))?;
        self.classifier
            .validate()
            .or_else(|e| bad("classifier", e.to_string()))?;
        self.solver.validate().or_else(|e| bad("solver", e.to_string()))?;
        let span = self.detector.record_length as f64 * self.detector.dt();
        if self.classifier.window_end >= span {
            return bad(
                "classifier.window_end",
                format!("{} s lies beyond the {span} s record", self.classifier.window_end),
            );
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without `output_dir`.
    pub fn digest(&self) -> Digest32 {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        sha256(value.to_string().as_bytes())
    }

    pub fn digest_hex(&self) -> String {
        to_hex(&self.digest())
    }

    /// Index of the ladder value nearest `reference_probe`; ties go to the
    /// lower value.
    pub fn reference_index(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.ladder.iter().enumerate() {
            if (v - self.reference_probe).abs() < (self.ladder[best] - self.reference_probe).abs() {
                best = i;
            }
        }
        best
    }
}

/// Seed of a named substream: the first eight bytes of
/// `sha256(seed ‖ stage ‖ 0 ‖ index)`, little-endian.
pub fn stage_seed(seed: u64, stage: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(17 + stage.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(stage.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(&index.to_le_bytes());
    let d = sha256(&bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
