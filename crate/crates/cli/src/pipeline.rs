//! Pipeline stages. Each one reads what the previous stage left in the
//! output directory and checks that it was produced under the same config
//! digest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use pnr_core::classifier::{
    build_references_histogram, build_references_supervised, classify_batch, classify_batch_single_point, count_labels,
    ReferenceSet,
};
use pnr_core::digest::to_hex;
use pnr_core::povm::{
    binomial_loss_povm, folded_poisson, povm_distance, probe_matrix, total_variation, CoherentProbe, PovmMatrix,
    StatisticsMatrix,
};
use pnr_core::tomography::{reconstruct, SolverReport};
use pnr_core::waveform::{read_container, run_experiment, write_container, ContainerHeader, Shot, Waveform};

use crate::config::{stage_seed, PipelineConfig, ReferenceSource};
use crate::error::{CliError, Result};
use crate::svg::{self, Mark, Panel, Series, PALETTE};

pub const MANIFEST: &str = "manifest.json";
pub const REFERENCES: &str = "references.json";
pub const STATS_JSON: &str = "stats.json";
pub const STATS_CSV: &str = "stats.csv";
pub const STATS_SINGLE_POINT_CSV: &str = "stats-single-point.csv";
pub const STATS_TRUTH_CSV: &str = "stats-truth.csv";
pub const POVM_JSON: &str = "povm.json";
pub const POVM_CSV: &str = "povm.csv";
pub const REPORT_JSON: &str = "report.json";
pub const STATISTICS_SVG: &str = "statistics.svg";
pub const POVM_SVG: &str = "povm.svg";
pub const ERRORS_SVG: &str = "classifier-errors.svg";

/// Largest photon number drawn in the POVM chart.
const CHART_MAX_K: usize = 15;

pub fn shots_file(index: usize) -> String {
    format!("shots-{index:02}.bin")
}

pub fn labels_file(index: usize) -> String {
    format!("labels-{index:02}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub index: usize,
    pub mean_photon_number: f64,
    pub file: String,
    pub records: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub params_digest: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub probes: Vec<ProbeFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFile {
    pub config_digest: String,
    pub source: ReferenceSource,
    pub probe_index: usize,
    pub mean_photon_number: f64,
    pub references: ReferenceSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeErrors {
    pub mean_photon_number: f64,
    pub shots: u64,
    pub pattern_errors: u64,
    pub single_point_errors: u64,
}

/// Output of the classify stage. Rows of all three matrices follow the
/// probe ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedStatistics {
    pub config_digest: String,
    pub reference_source: ReferenceSource,
    pub reference_probe: f64,
    pub pattern: StatisticsMatrix,
    pub single_point: StatisticsMatrix,
    /// Frequencies of the simulator's detected photon numbers, folded at N−1.
    pub ground_truth: StatisticsMatrix,
    pub errors: Vec<ProbeErrors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TomographyOutput {
    pub config_digest: String,
    pub truncation: usize,
    pub outcomes: usize,
    pub gamma: f64,
    pub povm: PovmMatrix,
    pub report: SolverReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub mean_photon_number: f64,
    /// Folded Poisson row at the configured efficiency.
    pub theory: Vec<f64>,
    pub pattern_tv: f64,
    pub single_point_tv: f64,
    pub ground_truth_tv: f64,
    pub pattern_error_rate: f64,
    pub single_point_error_rate: f64,
}

/// Per-outcome sum over the ladder of |measured − theory|.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveDeviation {
    pub pattern: Vec<f64>,
    pub single_point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub configured_efficiency: f64,
    /// θ_1^(1) of the reconstruction.
    pub estimated_efficiency: f64,
    pub efficiency_error: f64,
    pub converged: bool,
    pub iterations_used: usize,
    /// Column total-variation distances to the binomial model at the
    /// estimated efficiency.
    pub column_tv_vs_estimated_model: Vec<f64>,
    pub max_column_tv_vs_estimated_model: f64,
    pub column_tv_vs_configured_model: Vec<f64>,
    pub max_column_tv_vs_configured_model: f64,
    pub max_entry_error_vs_configured_model: f64,
    /// Largest θ_k^(n) with k < n.
    pub max_dark_entry: f64,
    pub pattern_error_rate: f64,
    pub single_point_error_rate: f64,
    pub curve_deviation: CurveDeviation,
    pub probes: Vec<ProbeSummary>,
    pub charts: Vec<String>,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(CliError::io(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("output types serialize");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(path, e))
}

/// Attaches `path` to container and I/O failures from the core library.
fn at(path: &Path) -> impl FnOnce(pnr_core::Error) -> CliError + '_ {
    move |e| match e {
        pnr_core::Error::Io(source) => CliError::Io {
            path: path.to_path_buf(),
            source,
        },
        pnr_core::Error::Container(m) => CliError::input(path, m),
        other => other.into(),
    }
}

fn check_digest(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(CliError::DigestMismatch {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: expected.to_string(),
        })
    }
}

pub fn simulate(cfg: &PipelineConfig) -> Result<Manifest> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let digest = cfg.digest();
    let params_digest = cfg.detector.digest()?;

    let mut probes = Vec::with_capacity(cfg.ladder.len());
    for (i, &mean) in cfg.ladder.iter().enumerate() {
        let seed = stage_seed(cfg.seed, "simulate", i as u64);
        let shots = run_experiment(CoherentProbe::new(mean)?, cfg.shots_per_probe, &cfg.detector, seed)?;
        let header = ContainerHeader {
            record_length: cfg.detector.record_length,
            sample_rate: cfg.detector.sample_rate,
            t0: shots[0].waveform.t0(),
            dt: cfg.detector.dt(),
            mean_photon_number: mean,
            params_digest,
            config_digest: digest,
            record_count: shots.len() as u64,
        };
        let file = shots_file(i);
        let path = dir.join(&file);
        let out = File::create(&path).map_err(CliError::io(&path))?;
        write_container(BufWriter::new(out), &header, &shots).map_err(at(&path))?;
        probes.push(ProbeFile {
            index: i,
            mean_photon_number: mean,
            file,
            records: header.record_count,
            seed,
        });
    }

    let manifest = Manifest {
        config_digest: to_hex(&digest),
        params_digest: to_hex(&params_digest),
        seed: cfg.seed,
        config: cfg.clone(),
        probes,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_manifest(cfg: &PipelineConfig) -> Result<Manifest> {
    let path = cfg.output_dir.join(MANIFEST);
    let manifest: Manifest = read_json(&path)?;
    check_digest(&path, &manifest.config_digest, &cfg.digest_hex())?;
    if manifest.probes.len() != cfg.ladder.len() {
        return Err(CliError::input(
            &path,
            format!(
                "lists {} probes, the ladder has {}",
                manifest.probes.len(),
                cfg.ladder.len()
            ),
        ));
    }
    Ok(manifest)
}

pub fn load_shots(cfg: &PipelineConfig, entry: &ProbeFile) -> Result<Vec<Shot>> {
    let path = cfg.output_dir.join(&entry.file);
    let file = File::open(&path).map_err(CliError::io(&path))?;
    let (header, shots) = read_container(BufReader::new(file)).map_err(at(&path))?;
    check_digest(&path, &to_hex(&header.config_digest), &cfg.digest_hex())?;
    if header.mean_photon_number != entry.mean_photon_number || header.record_count != entry.records {
        return Err(CliError::input(&path, "header disagrees with the manifest"));
    }
    Ok(shots)
}

pub fn build_references(cfg: &PipelineConfig, shots: &[Shot]) -> Result<ReferenceSet> {
    Ok(match cfg.reference_source {
        ReferenceSource::Histogram => {
            let ws: Vec<&Waveform> = shots.iter().map(|s| &s.waveform).collect();
            build_references_histogram(&ws, &cfg.classifier, cfg.outcomes)?
        }
        ReferenceSource::Supervised => build_references_supervised(shots, &cfg.classifier, cfg.outcomes)?,
    })
}

pub fn classify(cfg: &PipelineConfig) -> Result<ClassifiedStatistics> {
    let manifest = load_manifest(cfg)?;
    let dir = &cfg.output_dir;
    let digest = cfg.digest_hex();
    let outcomes = cfg.outcomes;

    let ri = cfg.reference_index();
    let refs = build_references(cfg, &load_shots(cfg, &manifest.probes[ri])?)?;
    write_json(
        &dir.join(REFERENCES),
        &ReferenceFile {
            config_digest: digest.clone(),
            source: cfg.reference_source,
            probe_index: ri,
            mean_photon_number: cfg.ladder[ri],
            references: refs.clone(),
        },
    )?;

    let mut pattern_counts = Vec::new();
    let mut single_counts = Vec::new();
    let mut truth_counts = Vec::new();
    let mut errors = Vec::new();
    for entry in &manifest.probes {
        let shots = load_shots(cfg, entry)?;
        let ws: Vec<&Waveform> = shots.iter().map(|s| &s.waveform).collect();
        let pattern: Vec<usize> = classify_batch(&ws, &refs)?.into_iter().map(|c| c.label).collect();
        let single = classify_batch_single_point(&ws, &refs, &cfg.classifier)?;
        let truth: Vec<usize> = shots
            .iter()
            .map(|s| (s.true_detected_photons as usize).min(outcomes - 1))
            .collect();

        let path = dir.join(labels_file(entry.index));
        let out = File::create(&path).map_err(CliError::io(&path))?;
        let mut out = BufWriter::new(out);
        let mut write = || -> std::io::Result<()> {
            writeln!(out, "shot,n,m,truth,pattern,single_point")?;
            for (i, s) in shots.iter().enumerate() {
                writeln!(
                    out,
                    "{i},{},{},{},{},{}",
                    s.true_incident_photons, s.true_detected_photons, truth[i], pattern[i], single[i]
                )?;
            }
            out.flush()
        };
        write().map_err(CliError::io(&path))?;

        let wrong = |labels: &[usize]| labels.iter().zip(&truth).filter(|(a, b)| a != b).count() as u64;
        errors.push(ProbeErrors {
            mean_photon_number: entry.mean_photon_number,
            shots: shots.len() as u64,
            pattern_errors: wrong(&pattern),
            single_point_errors: wrong(&single),
        });
        pattern_counts.push(count_labels(&pattern, outcomes)?);
        single_counts.push(count_labels(&single, outcomes)?);
        truth_counts.push(count_labels(&truth, outcomes)?);
    }

    let probes: Vec<CoherentProbe> = cfg
        .ladder
        .iter()
        .map(|&m| CoherentProbe::new(m))
        .collect::<pnr_core::Result<_>>()?;
    let stats = ClassifiedStatistics {
        config_digest: digest,
        reference_source: cfg.reference_source,
        reference_probe: cfg.ladder[ri],
        pattern: StatisticsMatrix::from_counts(probes.clone(), &pattern_counts, true)?,
        single_point: StatisticsMatrix::from_counts(probes.clone(), &single_counts, true)?,
        ground_truth: StatisticsMatrix::from_counts(probes, &truth_counts, true)?,
        errors,
    };
    write_bytes(&dir.join(STATS_CSV), stats.pattern.to_csv().as_bytes())?;
    write_bytes(
        &dir.join(STATS_SINGLE_POINT_CSV),
        stats.single_point.to_csv().as_bytes(),
    )?;
    write_bytes(&dir.join(STATS_TRUTH_CSV), stats.ground_truth.to_csv().as_bytes())?;
    write_json(&dir.join(STATS_JSON), &stats)?;
    Ok(stats)
}

/// Reconstructs the POVM from the pattern-matching statistics. The outputs
/// are written before a convergence failure is reported.
pub fn tomography(cfg: &PipelineConfig, stats_path: Option<&Path>) -> Result<TomographyOutput> {
    let dir = &cfg.output_dir;
    let path: PathBuf = stats_path.map_or_else(|| dir.join(STATS_JSON), Path::to_path_buf);
    let stats: ClassifiedStatistics = read_json(&path)?;
    let digest = cfg.digest_hex();
    check_digest(&path, &stats.config_digest, &digest)?;
    let p = &stats.pattern;
    if p.probes().len() != cfg.ladder.len() {
        return Err(CliError::input(
            &path,
            format!(
                "{} statistics rows for a ladder of {}",
                p.probes().len(),
                cfg.ladder.len()
            ),
        ));
    }
    if p.probes()
        .iter()
        .zip(&cfg.ladder)
        .any(|(a, b)| a.mean_photon_number() != *b)
    {
        return Err(CliError::input(&path, "probe means differ from the configured ladder"));
    }
    if p.outcomes() != cfg.outcomes {
        return Err(CliError::input(
            &path,
            format!("{} outcome columns, config says {}", p.outcomes(), cfg.outcomes),
        ));
    }

    let f = probe_matrix(p.probes(), cfg.truncation)?;
    let (povm, report) = reconstruct(p, &f, &cfg.solver)?;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    write_bytes(&dir.join(POVM_CSV), povm.to_csv().as_bytes())?;
    let out = TomographyOutput {
        config_digest: digest,
        truncation: cfg.truncation,
        outcomes: cfg.outcomes,
        gamma: cfg.solver.gamma,
        povm,
        report,
    };
    write_json(&dir.join(POVM_JSON), &out)?;
    if !out.report.converged {
        return Err(CliError::NotConverged {
            iterations: out.report.iterations_used,
        });
    }
    Ok(out)
}

fn curve_deviation(measured: &StatisticsMatrix, theory: &[Vec<f64>]) -> Vec<f64> {
    (0..measured.outcomes())
        .map(|n| {
            theory
                .iter()
                .enumerate()
                .map(|(i, row)| (measured.entries()[(i, n)] - row[n]).abs())
                .sum()
        })
        .collect()
}

pub fn report(cfg: &PipelineConfig) -> Result<Report> {
    let dir = &cfg.output_dir;
    let digest = cfg.digest_hex();
    load_manifest(cfg)?;
    let stats_path = dir.join(STATS_JSON);
    let stats: ClassifiedStatistics = read_json(&stats_path)?;
    check_digest(&stats_path, &stats.config_digest, &digest)?;
    let povm_path = dir.join(POVM_JSON);
    let tomo: TomographyOutput = read_json(&povm_path)?;
    check_digest(&povm_path, &tomo.config_digest, &digest)?;

    let povm = &tomo.povm;
    let (m, n) = (povm.truncation(), povm.outcomes());
    if n < 2 || m < 2 {
        return Err(CliError::input(&povm_path, "POVM too small to estimate the efficiency"));
    }
    let eta = cfg.detector.efficiency;
    let eta_hat = povm.theta(1, 1);
    let estimated_model = binomial_loss_povm(eta_hat.clamp(0.0, 1.0), n, m)?;
    let configured_model = binomial_loss_povm(eta, n, m)?;
    let vs_estimated = povm_distance(povm, &estimated_model)?;
    let vs_configured = povm_distance(povm, &configured_model)?;
    let max_entry_error = (povm.entries() - configured_model.entries()).amax();
    let max_dark_entry = (0..m)
        .flat_map(|k| (k + 1..n).map(move |j| (k, j)))
        .map(|(k, j)| povm.theta(k, j))
        .fold(0.0, f64::max);

    let theory: Vec<Vec<f64>> = cfg
        .ladder
        .iter()
        .map(|&mean| folded_poisson(eta * mean, n))
        .collect::<pnr_core::Result<_>>()?;
    let probes: Vec<ProbeSummary> = stats
        .errors
        .iter()
        .enumerate()
        .map(|(i, e)| ProbeSummary {
            mean_photon_number: e.mean_photon_number,
            theory: theory[i].clone(),
            pattern_tv: total_variation(&stats.pattern.row(i), &theory[i]),
            single_point_tv: total_variation(&stats.single_point.row(i), &theory[i]),
            ground_truth_tv: total_variation(&stats.ground_truth.row(i), &theory[i]),
            pattern_error_rate: e.pattern_errors as f64 / e.shots as f64,
            single_point_error_rate: e.single_point_errors as f64 / e.shots as f64,
        })
        .collect();
    let total_shots: u64 = stats.errors.iter().map(|e| e.shots).sum();
    let rate = |f: fn(&ProbeErrors) -> u64| stats.errors.iter().map(f).sum::<u64>() as f64 / total_shots as f64;

    let charts = vec![STATISTICS_SVG.to_string(), POVM_SVG.to_string(), ERRORS_SVG.to_string()];
    write_bytes(
        &dir.join(STATISTICS_SVG),
        statistics_chart(&digest, &stats, &theory).as_bytes(),
    )?;
    write_bytes(
        &dir.join(POVM_SVG),
        povm_chart(&digest, povm, &estimated_model, eta_hat).as_bytes(),
    )?;
    write_bytes(&dir.join(ERRORS_SVG), errors_chart(&digest, &probes).as_bytes())?;

    let report = Report {
        config_digest: digest,
        configured_efficiency: eta,
        estimated_efficiency: eta_hat,
        efficiency_error: eta_hat - eta,
        converged: tomo.report.converged,
        iterations_used: tomo.report.iterations_used,
        column_tv_vs_estimated_model: vs_estimated.per_outcome,
        max_column_tv_vs_estimated_model: vs_estimated.max,
        column_tv_vs_configured_model: vs_configured.per_outcome,
        max_column_tv_vs_configured_model: vs_configured.max,
        max_entry_error_vs_configured_model: max_entry_error,
        max_dark_entry,
        pattern_error_rate: rate(|e| e.pattern_errors),
        single_point_error_rate: rate(|e| e.single_point_errors),
        curve_deviation: CurveDeviation {
            pattern: curve_deviation(&stats.pattern, &theory),
            single_point: curve_deviation(&stats.single_point, &theory),
        },
        probes,
        charts,
    };
    write_json(&dir.join(REPORT_JSON), &report)?;
    Ok(report)
}

fn outcome_name(n: usize, outcomes: usize) -> String {
    if n + 1 == outcomes {
        format!("n>={n}")
    } else {
        format!("n={n}")
    }
}

fn statistics_chart(digest: &str, stats: &ClassifiedStatistics, theory: &[Vec<f64>]) -> String {
    let means: Vec<f64> = stats.pattern.probes().iter().map(|p| p.mean_photon_number()).collect();
    let outcomes = stats.pattern.outcomes();
    let column = |m: &StatisticsMatrix, n: usize| -> Vec<(f64, f64)> {
        means
            .iter()
            .enumerate()
            .map(|(i, &x)| (x, m.entries()[(i, n)]))
            .collect()
    };
    let panels: Vec<Panel> = (0..outcomes)
        .map(|n| Panel {
            title: outcome_name(n, outcomes),
            x_label: "mean photon number".into(),
            y_label: "frequency".into(),
            series: vec![
                Series {
                    name: "theory".into(),
                    color: PALETTE[7],
                    mark: Mark::Line,
                    points: means.iter().enumerate().map(|(i, &x)| (x, theory[i][n])).collect(),
                },
                Series {
                    name: "pattern".into(),
                    color: PALETTE[0],
                    mark: Mark::Dots,
                    points: column(&stats.pattern, n),
                },
                Series {
                    name: "single point".into(),
                    color: PALETTE[3],
                    mark: Mark::Squares,
                    points: column(&stats.single_point, n),
                },
            ],
        })
        .collect();
    svg::render("Outcome frequency per probe", digest, &panels, 3)
}

fn povm_chart(digest: &str, povm: &PovmMatrix, model: &PovmMatrix, eta_hat: f64) -> String {
    let (m, n) = (povm.truncation(), povm.outcomes());
    let kmax = m.min(CHART_MAX_K + 1);
    let panels: Vec<Panel> = (0..n)
        .map(|j| Panel {
            title: outcome_name(j, n),
            x_label: "photon number k".into(),
            y_label: "θ_k".into(),
            series: vec![
                Series {
                    name: "reconstructed".into(),
                    color: PALETTE[0],
                    mark: Mark::Bars {
                        width: 0.7,
                        offset: 0.0,
                    },
                    points: (0..kmax).map(|k| (k as f64, povm.theta(k, j))).collect(),
                },
                Series {
                    name: format!("binomial η={eta_hat:.4}"),
                    color: PALETTE[1],
                    mark: Mark::Line,
                    points: (0..kmax).map(|k| (k as f64, model.theta(k, j))).collect(),
                },
            ],
        })
        .collect();
    svg::render("Reconstructed POVM elements", digest, &panels, 3)
}

fn errors_chart(digest: &str, probes: &[ProbeSummary]) -> String {
    let xs: Vec<f64> = (0..probes.len()).map(|i| i as f64).collect();
    let panel = Panel {
        title: "Misclassified fraction by probe index".into(),
        x_label: "probe index".into(),
        y_label: "error rate".into(),
        series: vec![
            Series {
                name: "pattern".into(),
                color: PALETTE[0],
                mark: Mark::Bars {
                    width: 0.4,
                    offset: -0.2,
                },
                points: xs.iter().zip(probes).map(|(&x, p)| (x, p.pattern_error_rate)).collect(),
            },
            Series {
                name: "single point".into(),
                color: PALETTE[3],
                mark: Mark::Bars {
                    width: 0.4,
                    offset: 0.2,
                },
                points: xs
                    .iter()
                    .zip(probes)
                    .map(|(&x, p)| (x, p.single_point_error_rate))
                    .collect(),
            },
        ],
    };
    svg::render("Pattern matching vs single point", digest, &[panel], 1)
}

/// Runs all four stages. A convergence failure still produces the report and
/// is returned afterwards.
pub fn full(cfg: &PipelineConfig) -> Result<Report> {
    simulate(cfg)?;
    classify(cfg)?;
    let pending = match tomography(cfg, None) {
        Ok(_) => None,
        Err(e @ CliError::NotConverged { .. }) => Some(e),
        Err(e) => return Err(e),
    };
    let report = report(cfg)?;
    match pending {
        Some(e) => Err(e),
        None => Ok(report),
    }
}
