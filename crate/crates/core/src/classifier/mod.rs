//! Photon-number discrimination by template matching.
//!
//! Each outcome class has a reference trace over a short window on the rising
//! edge. A shot is assigned to the class whose reference is closest in sum of
//! squared differences. The single-point baseline compares one sample only.

mod histogram;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::waveform::{Shot, Waveform};

pub use histogram::{build_references_histogram, find_peaks, freedman_diaconis_width, Peak};

/// Relative slack used when snapping window edges to the sample grid.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub window_start: f64,
    pub window_end: f64,
    pub single_point_time: f64,
    /// Bins per time sample; `None` uses the Freedman–Diaconis width.
    pub histogram_bins: Option<usize>,
    /// Minimum peak prominence as a fraction of the histogram maximum.
    pub peak_min_prominence: f64,
    /// Peaks closer than this many bins are merged into the more prominent one.
    pub peak_min_separation: usize,
    /// Minimum peak prominence in units of the square root of the peak count.
    pub peak_min_significance: f64,
    /// Minimum shots per label for supervised references.
    pub min_shots_per_label: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            window_start: 300e-12,
            window_end: 500e-12,
            single_point_time: 400e-12,
            histogram_bins: None,
            peak_min_prominence: 0.05,
            peak_min_separation: 2,
            peak_min_significance: 3.0,
            min_shots_per_label: 50,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.window_start, self.window_end, self.single_point_time]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("classifier window".into()));
        }
        if self.window_start >= self.window_end {
            return Err(Error::Domain(format!(
                "window_start ({}) must be before window_end ({})",
                self.window_start, self.window_end
            )));
        }
        if self.single_point_time < self.window_start || self.single_point_time > self.window_end {
            return Err(Error::Domain(format!(
                "single_point_time {} lies outside the window",
                self.single_point_time
            )));
        }
        if !(0.0..1.0).contains(&self.peak_min_prominence) {
            return Err(Error::Domain(format!(
                "peak_min_prominence must lie in [0, 1), got {}",
                self.peak_min_prominence
            )));
        }
        if !(self.peak_min_significance.is_finite() && self.peak_min_significance >= 0.0) {
            return Err(Error::Domain(format!(
                "peak_min_significance must be finite and >= 0, got {}",
                self.peak_min_significance
            )));
        }
        if self.histogram_bins == Some(0) {
            return Err(Error::Domain("histogram_bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sample indices covered by `[start, end]`, snapped inward to the grid.
/// The window must lie inside the waveform.
pub fn window_indices(w: &Waveform, start: f64, end: f64) -> Result<(usize, usize)> {
    let outside = || Error::Window {
        start,
        end,
        first: w.t0(),
        last: w.last_time(),
    };
    let first = ((start - w.t0()) / w.dt() - GRID_EPS).ceil();
    let last = ((end - w.t0()) / w.dt() + GRID_EPS).floor();
    let slack = GRID_EPS * w.dt();
    if start < w.t0() - slack || end > w.last_time() + slack || first > last {
        return Err(outside());
    }
    Ok((first as usize, last as usize))
}

fn nearest_index(w: &Waveform, t: f64) -> Result<usize> {
    let i = ((t - w.t0()) / w.dt()).round();
    if i < 0.0 || i > (w.len() - 1) as f64 {
        return Err(Error::Window {
            start: t,
            end: t,
            first: w.t0(),
            last: w.last_time(),
        });
    }
    Ok(i as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ReferenceWire", into = "ReferenceWire")]
pub struct ReferenceSet {
    window_start: f64,
    window_end: f64,
    /// Time of the first template sample.
    t0: f64,
    dt: f64,
    single_point_time: f64,
    templates: Vec<Vec<f64>>,
}

impl ReferenceSet {
    /// `templates[ℓ]` is the reference for label ℓ; the last label is the
    /// overflow class.
    pub fn new(config: &ClassifierConfig, t0: f64, dt: f64, templates: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        if templates.len() < 2 {
            return Err(Error::Shape("need at least two templates".into()));
        }
        let len = templates[0].len();
        if len == 0 || templates.iter().any(|t| t.len() != len) {
            return Err(Error::Shape("templates must be nonempty and equally long".into()));
        }
        if templates.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("template sample".into()));
        }
        let refs = Self {
            window_start: config.window_start,
            window_end: config.window_end,
            t0,
            dt,
            single_point_time: config.single_point_time,
            templates,
        };
        let sp = refs.template_index(config.single_point_time)?;
        for l in 1..refs.templates.len() {
            if refs.templates[l][sp] <= refs.templates[l - 1][sp] {
                return Err(Error::Domain(format!(
                    "template values at the single-point time must increase with label; \
                     label {l} is not above label {}",
                    l - 1
                )));
            }
        }
        Ok(refs)
    }

    pub fn outcomes(&self) -> usize {
        self.templates.len()
    }

    pub fn templates(&self) -> &[Vec<f64>] {
        &self.templates
    }

    pub fn template(&self, label: usize) -> &[f64] {
        &self.templates[label]
    }

    pub fn window(&self) -> (f64, f64) {
        (self.window_start, self.window_end)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.templates[0].len())
            .map(|i| self.t0 + i as f64 * self.dt)
            .collect()
    }

    fn template_index(&self, t: f64) -> Result<usize> {
        let i = ((t - self.t0) / self.dt).round();
        let len = self.templates[0].len();
        if i < 0.0 || i >= len as f64 {
            return Err(Error::Window {
                start: t,
                end: t,
                first: self.t0,
                last: self.t0 + (len - 1) as f64 * self.dt,
            });
        }
        Ok(i as usize)
    }

    /// Offset of the template window within `w`, after checking the grids agree.
    fn offset_in(&self, w: &Waveform) -> Result<usize> {
        if ((w.dt() - self.dt) / self.dt).abs() > GRID_EPS {
            return Err(Error::Shape(format!(
                "waveform sample spacing {} differs from reference spacing {}",
                w.dt(),
                self.dt
            )));
        }
        let len = self.templates[0].len();
        let first = ((self.t0 - w.t0()) / w.dt()).round();
        if first < 0.0 || first + len as f64 > w.len() as f64 {
            return Err(Error::Window {
                start: self.window_start,
                end: self.window_end,
                first: w.t0(),
                last: w.last_time(),
            });
        }
        Ok(first as usize)
    }
}

#[derive(Serialize, Deserialize)]
struct ReferenceWire {
    window_start: f64,
    window_end: f64,
    single_point_time: f64,
    t0: f64,
    dt: f64,
    labels: Vec<String>,
    templates: Vec<Vec<f64>>,
}

fn label_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|l| if l + 1 == n { format!(">={l}") } else { l.to_string() })
        .collect()
}

impl From<ReferenceSet> for ReferenceWire {
    fn from(r: ReferenceSet) -> Self {
        Self {
            window_start: r.window_start,
            window_end: r.window_end,
            single_point_time: r.single_point_time,
            t0: r.t0,
            dt: r.dt,
            labels: label_names(r.templates.len()),
            templates: r.templates,
        }
    }
}

impl TryFrom<ReferenceWire> for ReferenceSet {
    type Error = Error;
    fn try_from(w: ReferenceWire) -> Result<Self> {
        if w.labels.len() != w.templates.len() {
            return Err(Error::Shape("label count differs from template count".into()));
        }
        let config = ClassifierConfig {
            window_start: w.window_start,
            window_end: w.window_end,
            single_point_time: w.single_point_time,
            ..ClassifierConfig::default()
        };
        ReferenceSet::new(&config, w.t0, w.dt, w.templates)
    }
}

fn check_common_grid(waveforms: &[&Waveform]) -> Result<()> {
    let first = waveforms.first().ok_or_else(|| Error::Shape("no waveforms".into()))?;
    for (i, w) in waveforms.iter().enumerate() {
        if w.len() != first.len() || w.dt() != first.dt() || w.t0() != first.t0() {
            return Err(Error::Shape(format!(
                "waveform {i} is sampled on a different grid from waveform 0"
            )));
        }
    }
    Ok(())
}

/// Mean trace per detected photon number, with `m ≥ N−1` pooled into the
/// overflow label.
pub fn build_references_supervised(shots: &[Shot], config: &ClassifierConfig, outcomes: usize) -> Result<ReferenceSet> {
    config.validate()?;
    if outcomes < 2 {
        return Err(Error::Domain("need at least two outcomes".into()));
    }
    let waveforms: Vec<&Waveform> = shots.iter().map(|s| &s.waveform).collect();
    check_common_grid(&waveforms)?;
    let w0 = waveforms[0];
    let (first, last) = window_indices(w0, config.window_start, config.window_end)?;
    let len = last - first + 1;

    let mut sums = vec![vec![0.0; len]; outcomes];
    let mut counts = vec![0usize; outcomes];
    for s in shots {
        let l = (s.true_detected_photons as usize).min(outcomes - 1);
        counts[l] += 1;
        for (acc, v) in sums[l].iter_mut().zip(&s.waveform.samples()[first..=last]) {
            *acc += v;
        }
    }
    for (label, &found) in counts.iter().enumerate() {
        if found < config.min_shots_per_label.max(1) {
            return Err(Error::Coverage {
                label,
                found,
                required: config.min_shots_per_label.max(1),
            });
        }
    }
    let templates = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    ReferenceSet::new(config, w0.time(first), w0.dt(), templates)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: usize,
    /// Sum of squared differences against each template.
    pub sse: Vec<f64>,
}

/// First index of the minimum, so ties go to the smaller label.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

pub fn pattern_scores(w: &Waveform, refs: &ReferenceSet) -> Result<Classification> {
    let off = refs.offset_in(w)?;
    let len = refs.templates[0].len();
    let seg = &w.samples()[off..off + len];
    let sse: Vec<f64> = refs
        .templates
        .iter()
        .map(|t| seg.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    Ok(Classification {
        label: argmin(&sse),
        sse,
    })
}

pub fn classify_pattern(w: &Waveform, refs: &ReferenceSet) -> Result<usize> {
    Ok(pattern_scores(w, refs)?.label)
}

pub fn classify_single_point(w: &Waveform, refs: &ReferenceSet, config: &ClassifierConfig) -> Result<usize> {
    let i = nearest_index(w, config.single_point_time)?;
    let j = refs.template_index(config.single_point_time)?;
    let v = w.samples()[i];
    let dist: Vec<f64> = refs.templates.iter().map(|t| (v - t[j]).abs()).collect();
    Ok(argmin(&dist))
}

pub fn classify_batch(waveforms: &[&Waveform], refs: &ReferenceSet) -> Result<Vec<Classification>> {
    waveforms.par_iter().map(|w| pattern_scores(w, refs)).collect()
}

pub fn classify_batch_single_point(
    waveforms: &[&Waveform],
    refs: &ReferenceSet,
    config: &ClassifierConfig,
) -> Result<Vec<usize>> {
    waveforms
        .par_iter()
        .map(|w| classify_single_point(w, refs, config))
        .collect()
}

pub fn count_labels(labels: &[usize], outcomes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; outcomes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= outcomes {
            return Err(Error::Domain(format!(
                "label {l} at position {i} is outside 0..{outcomes}"
            )));
        }
        counts[l] += 1;
    }
    Ok(counts)
}

/// Relative frequency of each label.
pub fn accumulate_statistics(labels: &[usize], outcomes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Domain("no labels to accumulate".into()));
    }
    let counts = count_labels(labels, outcomes)?;
    let total = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

/// `shot,label,sse_0,…` per classified waveform.
pub fn classification_csv(results: &[Classification]) -> String {
    let n = results.first().map_or(0, |r| r.sse.len());
    let mut out = String::from("shot,label");
    for l in 0..n {
        out.push_str(&format!(",sse_{l}"));
    }
    out.push('\n');
    for (i, r) in results.iter().enumerate() {
        out.push_str(&format!("{i},{}", r.label));
        for v in &r.sse {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}
