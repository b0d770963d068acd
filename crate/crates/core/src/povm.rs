//! Photon-number-basis detector model.
//!
//! A phase-insensitive detector is fully described by the diagonal of each
//! POVM element in the Fock basis, so everything here is a real matrix:
//!
//! * [`ProbeMatrix`] (D×M): photon-number distributions of coherent probes,
//! * [`PovmMatrix`] (M×N): `θ_k^(n)`, probability of outcome `n` given `k` photons,
//! * [`StatisticsMatrix`] (D×N): outcome frequencies per probe.
//!
//! The forward model is the matrix product `P = F·Π`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum and sign tolerance used when validating externally supplied matrices.
pub const VALIDATION_TOLERANCE: f64 = 1e-9;

/// A coherent state probe, characterised by its mean photon number `|α|²`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CoherentProbe(f64);

impl CoherentProbe {
    pub fn new(mean_photon_number: f64) -> Result<Self> {
        if !mean_photon_number.is_finite() || mean_photon_number < 0.0 {
            return Err(Error::Domain(format!(
                "mean photon number must be finite and >= 0, got {mean_photon_number}"
            )));
        }
        Ok(Self(mean_photon_number))
    }

    pub fn vacuum() -> Self {
        Self(0.0)
    }

    pub fn mean_photon_number(self) -> f64 {
        self.0
    }

    pub fn photon_distribution(self, truncation: usize) -> PhotonNumberDistribution {
        let weights = (0..truncation).map(|k| poisson_pmf_unchecked(self.0, k)).collect();
        PhotonNumberDistribution { weights }
    }
}

impl TryFrom<f64> for CoherentProbe {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<CoherentProbe> for f64 {
    fn from(p: CoherentProbe) -> f64 {
        p.0
    }
}

/// Builds a probe list, rejecting any negative or non-finite entry.
pub fn probes_from_means(means: &[f64]) -> Result<Vec<CoherentProbe>> {
    means.iter().map(|&m| CoherentProbe::new(m)).collect()
}

/// Natural log of `k!`.
pub fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

/// Poisson probability `mean^k e^{-mean} / k!`, evaluated in log space.
pub fn poisson_pmf(mean: f64, k: usize) -> Result<f64> {
    if !mean.is_finite() || mean < 0.0 {
        return Err(Error::Domain(format!(
            "Poisson mean must be finite and >= 0, got {mean}"
        )));
    }
    Ok(poisson_pmf_unchecked(mean, k))
}

fn poisson_pmf_unchecked(mean: f64, k: usize) -> f64 {
    if mean == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    (k as f64 * mean.ln() - mean - ln_factorial(k)).exp()
}

/// Poisson distribution over `outcomes` classes with the tail `n >= outcomes-1`
/// folded into the last class.
pub fn folded_poisson(mean: f64, outcomes: usize) -> Result<Vec<f64>> {
    if outcomes == 0 {
        return Err(Error::Domain("at least one outcome required".into()));
    }
    let mut row = Vec::with_capacity(outcomes);
    for n in 0..outcomes - 1 {
        row.push(poisson_pmf(mean, n)?);
    }
    let head: f64 = row.iter().sum();
    row.push((1.0 - head).max(0.0));
    Ok(row)
}

/// Diagonal of a phase-insensitive state in the Fock basis, truncated at `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonNumberDistribution {
    weights: Vec<f64>,
}

impl PhotonNumberDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("photon-number weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if total > 1.0 + VALIDATION_TOLERANCE {
            return Err(Error::Domain(format!("photon-number weights sum to {total} > 1")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn truncation(&self) -> usize {
        self.weights.len()
    }

    /// Outcome probabilities `p_n = Σ_k w_k θ_k^(n)`.
    pub fn outcome_probabilities(&self, povm: &PovmMatrix) -> Result<Vec<f64>> {
        if self.truncation() != povm.truncation() {
            return Err(Error::Shape(format!(
                "distribution truncation {} differs from POVM truncation {}",
                self.truncation(),
                povm.truncation()
            )));
        }
        let w = DVector::from_column_slice(&self.weights);
        Ok(povm.entries.tr_mul(&w).iter().copied().collect())
    }
}

/// D×M matrix of coherent-state photon-number distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMatrix {
    probes: Vec<CoherentProbe>,
    entries: DMatrix<f64>,
}

impl ProbeMatrix {
    pub fn probes(&self) -> &[CoherentProbe] {
        &self.probes
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn truncation(&self) -> usize {
        self.entries.ncols()
    }

    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Builds `F_{i,k} = |α_i|^{2k} e^{-|α_i|²} / k!` for `k < truncation`.
///
/// Rows are not renormalised: the deficit is the Poisson tail beyond the cutoff.
pub fn probe_matrix(probes: &[CoherentProbe], truncation: usize) -> Result<ProbeMatrix> {
    if truncation == 0 {
        return Err(Error::Domain("truncation must be >= 1".into()));
    }
    if probes.is_empty() {
        return Err(Error::Domain("at least one probe required".into()));
    }
    let entries = DMatrix::from_fn(probes.len(), truncation, |i, k| {
        poisson_pmf_unchecked(probes[i].mean_photon_number(), k)
    });
    Ok(ProbeMatrix {
        probes: probes.to_vec(),
        entries,
    })
}

/// M×N matrix of diagonal POVM elements `θ_k^(n)`.
///
/// Rows index the photon number `k`, columns the detector outcome `n`. When
/// `overflow_outcome` is set the last column is the "`n >= N-1`" bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PovmWire", into = "PovmWire")]
pub struct PovmMatrix {
    entries: DMatrix<f64>,
    overflow_outcome: bool,
}

impl PovmMatrix {
    /// Validates nonnegativity and completeness (each row sums to one).
    pub fn new(entries: DMatrix<f64>, overflow_outcome: bool) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Shape("POVM matrix must be non-empty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("POVM entries".into()));
        }
        for (k, row) in entries.row_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| **v < -VALIDATION_TOLERANCE) {
                return Err(Error::Domain(format!("negative POVM entry {v} in row {k}")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > VALIDATION_TOLERANCE {
                return Err(Error::Domain(format!("POVM row {k} sums to {sum}, expected 1")));
            }
        }
        Ok(Self {
            entries,
            overflow_outcome,
        })
    }

    /// Skips validation; callers guarantee every row lies on the simplex.
    pub(crate) fn from_feasible(entries: DMatrix<f64>, overflow_outcome: bool) -> Self {
        Self {
            entries,
            overflow_outcome,
        }
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn truncation(&self) -> usize {
        self.entries.nrows()
    }

    pub fn outcomes(&self) -> usize {
        self.entries.ncols()
    }

    pub fn overflow_outcome(&self) -> bool {
        self.overflow_outcome
    }

    /// `θ_k^(n)`.
    pub fn theta(&self, k: usize, n: usize) -> f64 {
        self.entries[(k, n)]
    }

    /// Convex combination `a·self + (1-a)·other`.
    pub fn mix(&self, other: &PovmMatrix, a: f64) -> Result<PovmMatrix> {
        if self.entries.shape() != other.entries.shape() {
            return Err(Error::Shape("POVM shapes differ".into()));
        }
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Domain(format!("mixing weight {a} outside [0, 1]")));
        }
        let entries = &self.entries * a + &other.entries * (1.0 - a);
        Ok(Self::from_feasible(entries, self.overflow_outcome))
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(
            "k",
            self.entries
                .row_iter()
                .enumerate()
                .map(|(k, r)| (k.to_string(), r.iter().copied().collect())),
            self.outcomes(),
        )
    }
}

/// Binomial-loss model of a PNRD with per-photon efficiency `η`:
/// `θ_k^(n) = C(k,n) η^n (1-η)^{k-n}`, with the last column collecting `n >= N-1`.
pub fn binomial_loss_povm(efficiency: f64, outcomes: usize, truncation: usize) -> Result<PovmMatrix> {
    if !(0.0..=1.0).contains(&efficiency) {
        return Err(Error::Domain(format!("efficiency {efficiency} outside [0, 1]")));
    }
    if outcomes < 2 {
        return Err(Error::Domain("at least two outcomes required".into()));
    }
    if truncation < outcomes {
        return Err(Error::Domain(format!(
            "truncation {truncation} must be >= outcomes {outcomes}"
        )));
    }
    let ln_fact: Vec<f64> = {
        let mut acc = 0.0;
        let mut v = Vec::with_capacity(truncation);
        for k in 0..truncation {
            if k > 1 {
                acc += (k as f64).ln();
            }
            v.push(acc);
        }
        v
    };
    let mut entries = DMatrix::zeros(truncation, outcomes);
    for k in 0..truncation {
        let mut head = 0.0;
        for n in 0..(outcomes - 1).min(k + 1) {
            let theta = binomial_weight(&ln_fact, k, n, efficiency);
            entries[(k, n)] = theta;
            head += theta;
        }
        entries[(k, outcomes - 1)] = (1.0 - head).max(0.0);
    }
    Ok(PovmMatrix::from_feasible(entries, true))
}

fn binomial_weight(ln_fact: &[f64], k: usize, n: usize, eta: f64) -> f64 {
    if eta == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    if eta == 1.0 {
        return if n == k { 1.0 } else { 0.0 };
    }
    let ln_choose = ln_fact[k] - ln_fact[n] - ln_fact[k - n];
    (ln_choose + n as f64 * eta.ln() + (k - n) as f64 * (1.0 - eta).ln()).exp()
}

/// D×N matrix of outcome frequencies, one row per probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StatisticsWire", into = "StatisticsWire")]
pub struct StatisticsMatrix {
    probes: Vec<CoherentProbe>,
    entries: DMatrix<f64>,
    shot_counts: Option<Vec<u64>>,
    overflow_outcome: bool,
}

impl StatisticsMatrix {
    /// Rows may sum to slightly less than one when they come from a truncated
    /// forward model; they may never exceed one.
    pub fn new(
        probes: Vec<CoherentProbe>,
        entries: DMatrix<f64>,
        shot_counts: Option<Vec<u64>>,
        overflow_outcome: bool,
    ) -> Result<Self> {
        if probes.len() != entries.nrows() {
            return Err(Error::Shape(format!(
                "{} probes for {} statistics rows",
                probes.len(),
                entries.nrows()
            )));
        }
        if entries.ncols() == 0 {
            return Err(Error::Shape("statistics need at least one outcome".into()));
        }
        if let Some(counts) = &shot_counts {
            if counts.len() != entries.nrows() {
                return Err(Error::Shape("shot_counts length differs from row count".into()));
            }
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("statistics entries".into()));
        }
        for (i, row) in entries.row_iter().enumerate() {
            if row
                .iter()
                .any(|v| *v < -VALIDATION_TOLERANCE || *v > 1.0 + VALIDATION_TOLERANCE)
            {
                return Err(Error::Domain(format!("statistics row {i} has entries outside [0, 1]")));
            }
            if row.sum() > 1.0 + VALIDATION_TOLERANCE {
                return Err(Error::Domain(format!("statistics row {i} sums above 1")));
            }
        }
        Ok(Self {
            probes,
            entries,
            shot_counts,
            overflow_outcome,
        })
    }

    /// Builds frequencies from per-probe outcome counts.
    pub fn from_counts(probes: Vec<CoherentProbe>, counts: &[Vec<u64>], overflow_outcome: bool) -> Result<Self> {
        let outcomes = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|c| c.len() != outcomes) {
            return Err(Error::Shape("ragged count rows".into()));
        }
        let mut entries = DMatrix::zeros(counts.len(), outcomes);
        let mut totals = Vec::with_capacity(counts.len());
        for (i, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            if total == 0 {
                return Err(Error::Domain(format!("probe row {i} has no shots")));
            }
            for (n, c) in row.iter().enumerate() {
                entries[(i, n)] = *c as f64 / total as f64;
            }
            totals.push(total);
        }
        Self::new(probes, entries, Some(totals), overflow_outcome)
    }

    pub fn probes(&self) -> &[CoherentProbe] {
        &self.probes
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn shot_counts(&self) -> Option<&[u64]> {
        self.shot_counts.as_deref()
    }

    pub fn outcomes(&self) -> usize {
        self.entries.ncols()
    }

    pub fn overflow_outcome(&self) -> bool {
        self.overflow_outcome
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.entries.row(i).iter().copied().collect()
    }

    pub fn to_csv(&self) -> String {
        matrix_csv(
            "mean_photon_number",
            self.entries
                .row_iter()
                .zip(&self.probes)
                .map(|(r, p)| (p.mean_photon_number().to_string(), r.iter().copied().collect())),
            self.outcomes(),
        )
    }
}

fn matrix_csv(key: &str, rows: impl Iterator<Item = (String, Vec<f64>)>, outcomes: usize) -> String {
    let mut out = String::from(key);
    for n in 0..outcomes {
        out.push_str(&format!(",n{n}"));
    }
    out.push('\n');
    for (label, row) in rows {
        out.push_str(&label);
        for v in row.iter() {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Forward model `P = F·Π`.
pub fn detection_probabilities(povm: &PovmMatrix, probes: &ProbeMatrix) -> Result<StatisticsMatrix> {
    if probes.truncation() != povm.truncation() {
        return Err(Error::Shape(format!(
            "probe truncation {} differs from POVM truncation {}",
            probes.truncation(),
            povm.truncation()
        )));
    }
    let mut entries = probes.entries() * povm.entries();
    entries.apply(|v| *v = v.clamp(0.0, 1.0));
    Ok(StatisticsMatrix {
        probes: probes.probes().to_vec(),
        entries,
        shot_counts: None,
        overflow_outcome: povm.overflow_outcome(),
    })
}

/// Total-variation distance between corresponding POVM columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PovmDistance {
    pub per_outcome: Vec<f64>,
    pub max: f64,
}

pub fn povm_distance(a: &PovmMatrix, b: &PovmMatrix) -> Result<PovmDistance> {
    if a.entries.shape() != b.entries.shape() {
        return Err(Error::Shape(format!(
            "POVM shapes {:?} and {:?} differ",
            a.entries.shape(),
            b.entries.shape()
        )));
    }
    let per_outcome: Vec<f64> = a
        .entries
        .column_iter()
        .zip(b.entries.column_iter())
        .map(|(ca, cb)| 0.5 * ca.iter().zip(cb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .collect();
    let max = per_outcome.iter().copied().fold(0.0, f64::max);
    Ok(PovmDistance { per_outcome, max })
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

#[derive(Serialize, Deserialize)]
struct PovmWire {
    truncation: usize,
    outcomes: usize,
    overflow_outcome: bool,
    entries: Vec<Vec<f64>>,
}

impl From<PovmMatrix> for PovmWire {
    fn from(p: PovmMatrix) -> Self {
        PovmWire {
            truncation: p.truncation(),
            outcomes: p.outcomes(),
            overflow_outcome: p.overflow_outcome,
            entries: rows_of(&p.entries),
        }
    }
}

impl TryFrom<PovmWire> for PovmMatrix {
    type Error = Error;
    fn try_from(w: PovmWire) -> Result<Self> {
        let entries = array_of(&w.entries, w.truncation, w.outcomes)?;
        PovmMatrix::new(entries, w.overflow_outcome)
    }
}

#[derive(Serialize, Deserialize)]
struct StatisticsWire {
    outcomes: usize,
    overflow_outcome: bool,
    probes: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shot_counts: Option<Vec<u64>>,
    entries: Vec<Vec<f64>>,
}

impl From<StatisticsMatrix> for StatisticsWire {
    fn from(s: StatisticsMatrix) -> Self {
        StatisticsWire {
            outcomes: s.outcomes(),
            overflow_outcome: s.overflow_outcome,
            probes: s.probes.iter().map(|p| p.mean_photon_number()).collect(),
            shot_counts: s.shot_counts.clone(),
            entries: rows_of(&s.entries),
        }
    }
}

impl TryFrom<StatisticsWire> for StatisticsMatrix {
    type Error = Error;
    fn try_from(w: StatisticsWire) -> Result<Self> {
        let entries = array_of(&w.entries, w.probes.len(), w.outcomes)?;
        StatisticsMatrix::new(
            probes_from_means(&w.probes)?,
            entries,
            w.shot_counts,
            w.overflow_outcome,
        )
    }
}

fn rows_of(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn array_of(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape(format!("expected a {nrows}x{ncols} array of rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Row sums of the probe matrix; `1 - sum` is the truncated Poisson tail.
pub fn probe_row_mass(probes: &ProbeMatrix) -> DVector<f64> {
    probes.entries().column_sum()
}
