//! Synthetic single-shot detector waveforms.
//!
//! The nanostrip is modelled as a kinetic inductance `L_k` in series with a
//! photon-number-dependent hotspot resistance `R_N(t)`, shunted by the load
//! `R_L` and fed from a constant bias `I_b`:
//!
//! ```text
//! L_k dI_det/dt = (I_b − I_det)·R_L − I_det·R_N(t)
//! ```
//!
//! `R_N = m·R0` while the hotspot lives and zero afterwards. Both phases are
//! linear first-order systems, so the trace is evaluated in closed form.

mod container;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, Poisson, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::digest::{self, Digest32};
use crate::error::{Error, Result};
use crate::povm::CoherentProbe;

pub use container::{read_container, shots_to_csv, write_container, ContainerHeader, CONTAINER_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorParams {
    /// L_k, henries.
    pub kinetic_inductance: f64,
    /// R_L, ohms.
    pub load_resistance: f64,
    /// R0, ohms per simultaneous hotspot.
    pub hotspot_resistance_per_photon: f64,
    /// τ_hs, seconds.
    pub hotspot_duration: f64,
    /// Time of photon absorption relative to the trace origin, seconds.
    pub hotspot_onset: f64,
    /// I_b, amperes.
    pub bias_current: f64,
    pub efficiency: f64,
    pub amplifier_gain: f64,
    /// Single-pole bandwidth in hertz; `None` disables the filter.
    pub analog_bandwidth: Option<f64>,
    /// Additive white noise after the amplifier, volts.
    pub noise_sigma: f64,
    /// Trigger jitter, seconds.
    pub jitter_sigma: f64,
    pub sample_rate: f64,
    pub record_length: usize,
    /// Half-width of a per-run uniform error on the delivered mean photon
    /// number, as a fraction (0.03 = ±3%). Zero disables it.
    pub amplitude_error: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            kinetic_inductance: 500e-9,
            load_resistance: 50.0,
            hotspot_resistance_per_photon: 1e3,
            hotspot_duration: 150e-12,
            hotspot_onset: 300e-12,
            bias_current: 33.5e-6,
            efficiency: 0.547,
            // Puts the single-hotspot plateau I_b·R_L·R0/(R0+R_L) at 10 mV.
            amplifier_gain: 10e-3 * (1e3 + 50.0) / (33.5e-6 * 50.0 * 1e3),
            analog_bandwidth: Some(10e9),
            noise_sigma: 0.15e-3,
            jitter_sigma: 2e-12,
            sample_rate: 50e9,
            record_length: 512,
            amplitude_error: 0.0,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite and > 0, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite and >= 0, got {v}")))
    }
}

impl DetectorParams {
    /// Noise-free variant of these parameters (no noise, no jitter).
    pub fn noiseless(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            jitter_sigma: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("kinetic_inductance", self.kinetic_inductance)?;
        positive("load_resistance", self.load_resistance)?;
        positive("hotspot_resistance_per_photon", self.hotspot_resistance_per_photon)?;
        positive("hotspot_duration", self.hotspot_duration)?;
        non_negative("hotspot_onset", self.hotspot_onset)?;
        positive("bias_current", self.bias_current)?;
        positive("amplifier_gain", self.amplifier_gain)?;
        if let Some(b) = self.analog_bandwidth {
            positive("analog_bandwidth", b)?;
        }
        non_negative("noise_sigma", self.noise_sigma)?;
        non_negative("jitter_sigma", self.jitter_sigma)?;
        positive("sample_rate", self.sample_rate)?;
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::Domain(format!(
                "efficiency must lie in [0, 1], got {}",
                self.efficiency
            )));
        }
        if self.record_length == 0 {
            return Err(Error::Domain("record_length must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.amplitude_error) {
            return Err(Error::Domain(format!(
                "amplitude_error must lie in [0, 1), got {}",
                self.amplitude_error
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn digest(&self) -> Result<Digest32> {
        digest::json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    dt: f64,
    t0: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, dt: f64, t0: f64) -> Result<Self> {
        positive("dt", dt)?;
        if !t0.is_finite() {
            return Err(Error::NonFinite("t0".into()));
        }
        if samples.is_empty() {
            return Err(Error::Shape("waveform has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("waveform sample {i}")));
        }
        Ok(Self { samples, dt, t0 })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn last_time(&self) -> f64 {
        self.time(self.samples.len() - 1)
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| a * v).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shot {
    pub true_incident_photons: u32,
    pub true_detected_photons: u32,
    pub waveform: Waveform,
}

pub fn sample_incident_photons<R: Rng + ?Sized>(probe: CoherentProbe, rng: &mut R) -> u32 {
    let mean = probe.mean_photon_number();
    if mean == 0.0 {
        return 0;
    }
    // CoherentProbe guarantees a finite positive mean here.
    let d = Poisson::new(mean).expect("valid Poisson mean");
    d.sample(rng) as u32
}

pub fn thin_by_efficiency<R: Rng + ?Sized>(n: u32, efficiency: f64, rng: &mut R) -> Result<u32> {
    let d = Binomial::new(u64::from(n), efficiency)
        .map_err(|_| Error::Domain(format!("efficiency must lie in [0, 1], got {efficiency}")))?;
    Ok(d.sample(rng) as u32)
}

/// Device current `I_det` and load current `I_s` at every sample time.
pub fn circuit_currents(m: u32, params: &DetectorParams) -> (Vec<f64>, Vec<f64>) {
    let ib = params.bias_current;
    let n = params.record_length;
    if m == 0 {
        return (vec![ib; n], vec![0.0; n]);
    }
    let r_l = params.load_resistance;
    let r_n = f64::from(m) * params.hotspot_resistance_per_photon;
    let lk = params.kinetic_inductance;
    let tau_on = lk / (r_l + r_n);
    let tau_off = lk / r_l;
    let i_inf = ib * r_l / (r_l + r_n);
    let hs = params.hotspot_duration;
    let i_end = i_inf + (ib - i_inf) * (-hs / tau_on).exp();

    let dt = params.dt();
    let mut i_det = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt - params.hotspot_onset;
        let v = if t <= 0.0 {
            ib
        } else if t < hs {
            i_inf + (ib - i_inf) * (-t / tau_on).exp()
        } else {
            ib - (ib - i_end) * (-(t - hs) / tau_off).exp()
        };
        i_det.push(v);
    }
    let i_s = i_det.iter().map(|&i| ib - i).collect();
    (i_det, i_s)
}

/// Amplified load voltage for `m` simultaneous hotspots, before the analog chain.
pub fn circuit_response(m: u32, params: &DetectorParams) -> Waveform {
    let (_, i_s) = circuit_currents(m, params);
    let k = params.load_resistance * params.amplifier_gain;
    Waveform {
        samples: i_s.into_iter().map(|i| i * k).collect(),
        dt: params.dt(),
        t0: 0.0,
    }
}

/// Single-pole low-pass, jitter by resampling, then additive noise.
///
/// The jitter and noise draws happen even when their sigma is zero so that
/// the random stream consumed per shot does not depend on the settings.
pub fn apply_analog_chain<R: Rng + ?Sized>(w: &Waveform, params: &DetectorParams, rng: &mut R) -> Waveform {
    let mut out = w.samples.clone();

    if let Some(b) = params.analog_bandwidth {
        let a = 1.0 - (-w.dt * std::f64::consts::TAU * b).exp();
        let mut y = out[0];
        for s in out.iter_mut() {
            y += a * (*s - y);
            *s = y;
        }
    }

    let shift: f64 = rng.sample(rand_distr::StandardNormal);
    let shift = shift * params.jitter_sigma / w.dt;
    if shift != 0.0 {
        out = resample_shifted(&out, shift);
    }

    let noise = Normal::new(0.0, params.noise_sigma).expect("validated noise sigma");
    for s in out.iter_mut() {
        *s += noise.sample(rng);
    }

    Waveform {
        samples: out,
        dt: w.dt,
        t0: w.t0,
    }
}

/// `y[i] = x(i − shift)` by linear interpolation, holding the end values.
fn resample_shifted(x: &[f64], shift: f64) -> Vec<f64> {
    let last = x.len() - 1;
    (0..x.len())
        .map(|i| {
            let s = i as f64 - shift;
            if s <= 0.0 {
                x[0]
            } else if s >= last as f64 {
                x[last]
            } else {
                let j = s.floor() as usize;
                let f = s - j as f64;
                x[j] + f * (x[j + 1] - x[j])
            }
        })
        .collect()
}

fn shot_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Simulates `shots` independent detections of one probe.
///
/// Shot `i` draws from its own ChaCha stream, so the output does not depend
/// on the rayon thread count.
pub fn run_experiment(probe: CoherentProbe, shots: usize, params: &DetectorParams, seed: u64) -> Result<Vec<Shot>> {
    params.validate()?;
    if shots == 0 {
        return Err(Error::Domain("shots must be >= 1".into()));
    }

    let mean = if params.amplitude_error > 0.0 {
        // The last stream index is reserved for the per-run systematic draw.
        let mut rng = shot_rng(seed, u64::MAX);
        let e = params.amplitude_error;
        let u: f64 = Uniform::new_inclusive(-e, e)
            .expect("validated amplitude error")
            .sample(&mut rng);
        probe.mean_photon_number() * (1.0 + u)
    } else {
        probe.mean_photon_number()
    };
    let delivered = CoherentProbe::new(mean)?;

    (0..shots)
        .into_par_iter()
        .map(|i| {
            let mut rng = shot_rng(seed, i as u64);
            let n = sample_incident_photons(delivered, &mut rng);
            let m = thin_by_efficiency(n, params.efficiency, &mut rng)?;
            let clean = circuit_response(m, params);
            Ok(Shot {
                true_incident_photons: n,
                true_detected_photons: m,
                waveform: apply_analog_chain(&clean, params, &mut rng),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn probe(x: f64) -> CoherentProbe {
        CoherentProbe::new(x).unwrap()
    }

    fn peak(w: &Waveform) -> f64 {
        w.samples().iter().cloned().fold(f64::MIN, f64::max)
    }

    #[test]
    fn vacuum_probe_never_emits() {
        let mut r = rng(1);
        assert!((0..1000).all(|_| sample_incident_photons(CoherentProbe::vacuum(), &mut r) == 0));
    }

    #[test]
    fn poisson_sampling_moments() {
        let mut r = rng(2);
        let n = 1_000_000;
        let sum: u64 = (0..n)
            .map(|_| u64::from(sample_incident_photons(probe(5.7), &mut r)))
            .sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 5.7).abs() < 0.01, "mean {mean}");

        let zeros = (0..n)
            .filter(|_| sample_incident_photons(probe(1.0), &mut r) == 0)
            .count();
        let p0 = zeros as f64 / n as f64;
        assert!((p0 - (-1.0f64).exp()).abs() < 0.002, "p0 {p0}");
    }

    #[test]
    fn thinning_edges_and_mean() {
        let mut r = rng(3);
        assert_eq!(thin_by_efficiency(9, 1.0, &mut r).unwrap(), 9);
        assert_eq!(thin_by_efficiency(9, 0.0, &mut r).unwrap(), 0);
        assert!(thin_by_efficiency(9, 1.5, &mut r).is_err());

        let n = 1_000_000;
        let sum: u64 = (0..n)
            .map(|_| u64::from(thin_by_efficiency(10, 0.547, &mut r).unwrap()))
            .sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 5.47).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn zero_photons_give_flat_trace() {
        let p = DetectorParams::default();
        let w = circuit_response(0, &p);
        assert_eq!(w.len(), p.record_length);
        assert!(w.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn long_hotspot_reaches_plateau() {
        let p = DetectorParams {
            hotspot_duration: 1.0,
            ..DetectorParams::default()
        };
        let w = circuit_response(1, &p);
        let r0 = p.hotspot_resistance_per_photon;
        let rl = p.load_resistance;
        let plateau = p.bias_current * rl * p.amplifier_gain * r0 / (r0 + rl);
        // 10 ns past onset is ~21 time constants.
        assert_relative_eq!(*w.samples().last().unwrap(), plateau, max_relative = 1e-9);
        assert_relative_eq!(plateau, 10e-3, max_relative = 1e-12);
    }

    #[test]
    fn initial_slope_scales_with_photon_number() {
        // Sample finely so the first step after onset approximates dV/dt at 0+.
        let p = DetectorParams {
            sample_rate: 1e15,
            record_length: 300_002,
            ..DetectorParams::default()
        };
        let onset = (p.hotspot_onset * p.sample_rate).round() as usize;
        let slope = |m: u32| {
            let w = circuit_response(m, &p);
            (w.samples()[onset + 1] - w.samples()[onset]) / w.dt()
        };
        let expected = |m: u32| {
            p.amplifier_gain * p.load_resistance * p.bias_current * f64::from(m) * p.hotspot_resistance_per_photon
                / p.kinetic_inductance
        };
        assert_relative_eq!(slope(1), expected(1), max_relative = 1e-3);
        assert_relative_eq!(slope(2) / slope(1), 2.0, max_relative = 2e-3);
    }

    #[test]
    fn currents_are_conserved() {
        let p = DetectorParams::default();
        for m in 0..8 {
            let (i_det, i_s) = circuit_currents(m, &p);
            for (a, b) in i_det.iter().zip(&i_s) {
                assert_relative_eq!(a + b, p.bias_current, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn peak_increases_with_photon_number() {
        let p = DetectorParams::default();
        let peaks: Vec<f64> = (1..=10).map(|m| peak(&circuit_response(m, &p))).collect();
        assert!(peaks.windows(2).all(|w| w[1] > w[0]), "{peaks:?}");
    }

    #[test]
    fn identity_chain() {
        let p = DetectorParams {
            analog_bandwidth: None,
            ..DetectorParams::default().noiseless()
        };
        let w = circuit_response(3, &p);
        assert_eq!(apply_analog_chain(&w, &p, &mut rng(4)), w);
    }

    #[test]
    fn low_pass_rise_time() {
        // A 1 GHz pole sampled at 1 TS/s is close to the continuous system.
        let b = 1e9;
        let p = DetectorParams {
            analog_bandwidth: Some(b),
            sample_rate: 1e12,
            ..DetectorParams::default().noiseless()
        };
        let mut x = vec![0.0; 4000];
        x[100..].iter_mut().for_each(|v| *v = 1.0);
        let w = Waveform::new(x, p.dt(), 0.0).unwrap();
        let y = apply_analog_chain(&w, &p, &mut rng(5));
        let cross = |level: f64| y.samples().iter().position(|&v| v >= level).unwrap() as f64;
        let rise = (cross(0.9) - cross(0.1)) * p.dt();
        // 10-90% of a first-order system: ln(9)/(2πB) ≈ 0.35/B.
        let exact = 9f64.ln() / (std::f64::consts::TAU * b);
        assert_relative_eq!(rise, exact, max_relative = 0.01);
        assert_relative_eq!(rise, 0.35 / b, max_relative = 0.01);
    }

    #[test]
    fn noise_standard_deviation() {
        let sigma = 1e-3;
        let p = DetectorParams {
            noise_sigma: sigma,
            jitter_sigma: 0.0,
            analog_bandwidth: None,
            record_length: 100_000,
            ..DetectorParams::default()
        };
        let y = apply_analog_chain(&circuit_response(0, &p), &p, &mut rng(6));
        let n = y.len() as f64;
        let mean = y.samples().iter().sum::<f64>() / n;
        let var = y.samples().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() / sigma - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn chain_is_linear_without_jitter() {
        let p = DetectorParams {
            jitter_sigma: 0.0,
            noise_sigma: 1e-3,
            ..DetectorParams::default()
        };
        let w = circuit_response(4, &p);
        let zero = circuit_response(0, &p);
        let a = -2.5;
        let base = apply_analog_chain(&zero, &p, &mut rng(7));
        let y1 = apply_analog_chain(&w, &p, &mut rng(7));
        let ya = apply_analog_chain(&w.scaled(a), &p, &mut rng(7));
        for i in 0..w.len() {
            let lhs = ya.samples()[i] - base.samples()[i];
            let rhs = a * (y1.samples()[i] - base.samples()[i]);
            assert!((lhs - rhs).abs() <= 1e-15, "sample {i}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn jitter_shifts_by_interpolation() {
        let y = resample_shifted(&[0.0, 1.0, 2.0, 3.0], 0.5);
        assert_eq!(y, vec![0.0, 0.5, 1.5, 2.5]);
        let y = resample_shifted(&[0.0, 1.0, 2.0, 3.0], -1.0);
        assert_eq!(y, vec![1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn vacuum_shots_are_noise_only() {
        let p = DetectorParams::default();
        let shots = run_experiment(CoherentProbe::vacuum(), 200, &p, 8).unwrap();
        assert!(shots
            .iter()
            .all(|s| s.true_detected_photons == 0 && s.true_incident_photons == 0));
        let max = shots
            .iter()
            .flat_map(|s| s.waveform.samples())
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max < 8.0 * p.noise_sigma);
    }

    #[test]
    fn experiment_is_deterministic() {
        let p = DetectorParams::default();
        let a = run_experiment(probe(2.0), 300, &p, 9).unwrap();
        let b = run_experiment(probe(2.0), 300, &p, 9).unwrap();
        assert_eq!(a, b);
        let c = run_experiment(probe(2.0), 300, &p, 10).unwrap();
        assert_ne!(a, c);
        assert!(a.iter().all(|s| s.true_detected_photons <= s.true_incident_photons));
    }

    #[test]
    fn independent_of_thread_count() {
        let p = DetectorParams::default();
        let a = run_experiment(probe(3.0), 500, &p, 11).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_experiment(probe(3.0), 500, &p, 11).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn amplitude_error_changes_delivered_mean() {
        let base = DetectorParams::default().noiseless();
        let p = DetectorParams {
            amplitude_error: 0.5,
            ..base.clone()
        };
        let mean = |params: &DetectorParams| {
            let s = run_experiment(probe(4.0), 20_000, params, 12).unwrap();
            s.iter().map(|s| f64::from(s.true_incident_photons)).sum::<f64>() / s.len() as f64
        };
        assert!((mean(&base) - 4.0).abs() < 0.05);
        assert!((mean(&p) - 4.0).abs() > 0.05);
    }

    #[test]
    fn validation() {
        assert!(DetectorParams::default().validate().is_ok());
        let bad = [
            DetectorParams {
                efficiency: 1.1,
                ..Default::default()
            },
            DetectorParams {
                noise_sigma: -1.0,
                ..Default::default()
            },
            DetectorParams {
                kinetic_inductance: 0.0,
                ..Default::default()
            },
            DetectorParams {
                record_length: 0,
                ..Default::default()
            },
            DetectorParams {
                analog_bandwidth: Some(f64::NAN),
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
        assert!(run_experiment(probe(1.0), 0, &DetectorParams::default(), 0).is_err());
        assert!(Waveform::new(vec![], 1.0, 0.0).is_err());
        assert!(Waveform::new(vec![f64::NAN], 1.0, 0.0).is_err());
    }

    #[test]
    fn params_json_defaults() {
        let p: DetectorParams = serde_json::from_str(r#"{"efficiency": 0.3}"#).unwrap();
        assert_eq!(p.efficiency, 0.3);
        assert_eq!(p.record_length, 512);
        let p: DetectorParams = serde_json::from_str(r#"{"analog_bandwidth": null}"#).unwrap();
        assert_eq!(p.analog_bandwidth, None);
        assert!(serde_json::from_str::<DetectorParams>(r#"{"typo": 1}"#).is_err());
    }
}
