//! Reference extraction from per-time amplitude histograms.
//!
//! At every sample in the window the amplitudes of all shots form a
//! multi-modal histogram, one mode per photon number. The modes are ordered
//! by amplitude and connected across time to form the templates.
//!
//! Unless a fixed bin count is configured, each time sample gets its own
//! Freedman–Diaconis width from the amplitudes of all shots at that time.
//! Fine bins on a unimodal histogram produce counting-noise bumps, so a peak
//! must also stand out from the Poisson error of its own height.

use super::{check_common_grid, window_indices, ClassifierConfig, ReferenceSet};
use crate::error::{Error, Result};
use crate::waveform::Waveform;

/// Upper bound on bins per histogram, guarding against a tiny bin width.
const MAX_BINS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub bin: usize,
    pub prominence: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `2·IQR·n^(-1/3)`, falling back to a Sturges-sized width when the
/// interquartile range collapses.
pub fn freedman_diaconis_width(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 1.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let iqr = quantile(&v, 0.75) - quantile(&v, 0.25);
    if iqr > 0.0 {
        return 2.0 * iqr / n.cbrt();
    }
    let range = v[v.len() - 1] - v[0];
    if range > 0.0 {
        range / (n.log2() + 1.0).ceil()
    } else {
        1.0
    }
}

/// Local maxima of `counts` with their topographic prominence.
///
/// The histogram is treated as zero outside its range, so edge bins can be
/// peaks. Flat tops report their middle bin. Peaks below `min_prominence`
/// are dropped, then peaks closer than `min_separation` bins to a more
/// prominent one. The result is sorted by bin.
pub fn find_peaks(counts: &[f64], min_prominence: f64, min_separation: usize) -> Vec<Peak> {
    let mut c = Vec::with_capacity(counts.len() + 2);
    c.push(0.0);
    c.extend_from_slice(counts);
    c.push(0.0);

    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < c.len() {
        if c[i] > c[i - 1] {
            let mut j = i;
            while j + 1 < c.len() - 1 && c[j + 1] == c[i] {
                j += 1;
            }
            if c[j + 1] < c[i] {
                let top = (i + j) / 2;
                let h = c[top];
                let mut left = h;
                for k in (0..i).rev() {
                    if c[k] > h {
                        break;
                    }
                    left = left.min(c[k]);
                }
                let mut right = h;
                for &v in &c[j + 1..] {
                    if v > h {
                        break;
                    }
                    right = right.min(v);
                }
                let prominence = h - left.max(right);
                if prominence >= min_prominence && prominence > 0.0 {
                    peaks.push(Peak {
                        bin: top - 1,
                        prominence,
                    });
                }
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    peaks.sort_by(|a, b| b.prominence.total_cmp(&a.prominence).then(a.bin.cmp(&b.bin)));
    let mut kept: Vec<Peak> = Vec::with_capacity(peaks.len());
    for p in peaks {
        if kept.iter().all(|k| k.bin.abs_diff(p.bin) >= min_separation) {
            kept.push(p);
        }
    }
    kept.sort_by_key(|p| p.bin);
    kept
}

/// Amplitude modes at one time sample, ascending.
fn modes(values: &[f64], config: &ClassifierConfig, want: usize) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let bins = match config.histogram_bins {
        Some(b) => b,
        None => ((range / freedman_diaconis_width(values)).ceil() as usize).clamp(1, MAX_BINS),
    };
    let bin_width = if range > 0.0 { range / bins as f64 } else { 1.0 };
    let bin_of = |v: f64| (((v - lo) / bin_width) as usize).min(bins - 1);

    let mut counts = vec![0.0; bins];
    let mut sums = vec![0.0; bins];
    for &v in values {
        let b = bin_of(v);
        counts[b] += 1.0;
        sums[b] += v;
    }
    let max = counts.iter().cloned().fold(0.0, f64::max);
    let mut peaks: Vec<Peak> = find_peaks(&counts, config.peak_min_prominence * max, config.peak_min_separation)
        .into_iter()
        .filter(|p| p.prominence >= config.peak_min_significance * counts[p.bin].sqrt())
        .collect();
    if peaks.len() > want {
        peaks.sort_by(|a, b| b.prominence.total_cmp(&a.prominence).then(a.bin.cmp(&b.bin)));
        peaks.truncate(want);
        peaks.sort_by_key(|p| p.bin);
    }
    // Each mode is the centroid of the samples in the peak bin and its two neighbours.
    peaks
        .iter()
        .map(|p| {
            let range = p.bin.saturating_sub(1)..=(p.bin + 1).min(bins - 1);
            let n: f64 = counts[range.clone()].iter().sum();
            sums[range].iter().sum::<f64>() / n
        })
        .collect()
}

/// Builds templates from histogram modes, without ground truth.
///
/// A time sample is resolved when its histogram shows either `outcomes`
/// modes, which fix the labels in ascending order, or a single mode, which
/// all labels share. Unresolved samples are filled per label by linear
/// interpolation between the nearest resolved samples, held constant past
/// the ends.
pub fn build_references_histogram(
    waveforms: &[&Waveform],
    config: &ClassifierConfig,
    outcomes: usize,
) -> Result<ReferenceSet> {
    config.validate()?;
    if outcomes < 2 {
        return Err(Error::Domain("need at least two outcomes".into()));
    }
    check_common_grid(waveforms)?;
    let w0 = waveforms[0];
    let (first, last) = window_indices(w0, config.window_start, config.window_end)?;

    let mut column = vec![0.0; waveforms.len()];
    let mut resolved: Vec<Option<Vec<f64>>> = Vec::with_capacity(last - first + 1);
    let mut separated = false;
    for j in first..=last {
        for (c, w) in column.iter_mut().zip(waveforms) {
            *c = w.samples()[j];
        }
        let m = modes(&column, config, outcomes);
        resolved.push(match m.len() {
            n if n == outcomes => {
                separated = true;
                Some(m)
            }
            1 => Some(vec![m[0]; outcomes]),
            _ => None,
        });
    }
    if !separated {
        return Err(Error::InsufficientSeparation { expected: outcomes });
    }

    let known: Vec<usize> = (0..resolved.len()).filter(|&j| resolved[j].is_some()).collect();
    let mut templates = vec![vec![0.0; resolved.len()]; outcomes];
    for j in 0..resolved.len() {
        let before = known.iter().rev().find(|&&k| k <= j).copied();
        let after = known.iter().find(|&&k| k >= j).copied();
        for (l, t) in templates.iter_mut().enumerate() {
            let at = |k: usize| resolved[k].as_ref().expect("resolved sample")[l];
            t[j] = match (before, after) {
                (Some(a), Some(b)) if a == b => at(a),
                (Some(a), Some(b)) => {
                    let f = (j - a) as f64 / (b - a) as f64;
                    at(a) + f * (at(b) - at(a))
                }
                (Some(a), None) => at(a),
                (None, Some(b)) => at(b),
                (None, None) => unreachable!("at least one resolved sample exists"),
            };
        }
    }

    ReferenceSet::new(config, w0.time(first), w0.dt(), templates).map_err(|e| match e {
        Error::Domain(_) => Error::InsufficientSeparation { expected: outcomes },
        other => other,
    })
}
