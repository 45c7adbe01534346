//! Timing instrumentation and the grow latency models.
//!
//! Instances record per-phase timing samples (match, comms, add/update)
//! keyed by subgraph size and transport. Offline, ordinary least squares with
//! five-fold cross-validation fits one linear model per (phase, transport)
//! group, reporting MAPE and R². The module also carries the closed-form
//! upper bound for nested match time over a branching hierarchy and the
//! aggregate grow-latency predictor assembled from the component models.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grow phase a sample was measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Match,
    Comms,
    AddUpdate,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Match => "match",
            Phase::Comms => "comms",
            Phase::AddUpdate => "add_update",
        }
    }
}

/// Where the instance's parent link runs: within the same process or across
/// a socket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Intra,
    Inter,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Intra => "intra",
            Transport::Inter => "inter",
        }
    }
}

/// One timing observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub level: u32,
    pub phase: Phase,
    pub n: u64,
    pub duration_s: f64,
    pub transport: Transport,
}

/// One line of the sample log: a model sample or a per-level total used by
/// the coverage diagnostic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogRecord {
    Sample(TimingSample),
    LevelTotal { level: u32, n: u64, duration_s: f64 },
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    level: u32,
    phase: String,
    n: u64,
    duration_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    transport: Option<Transport>,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        let raw = match self {
            LogRecord::Sample(s) => RawRecord {
                level: s.level,
                phase: s.phase.as_str().to_string(),
                n: s.n,
                duration_s: s.duration_s,
                transport: Some(s.transport),
            },
            LogRecord::LevelTotal { level, n, duration_s } => RawRecord {
                level: *level,
                phase: "total".to_string(),
                n: *n,
                duration_s: *duration_s,
                transport: None,
            },
        };
        serde_json::to_string(&raw).expect("log record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, FitError> {
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| FitError::Log(format!("bad record: {e}")))?;
        match raw.phase.as_str() {
            "total" => Ok(LogRecord::LevelTotal {
                level: raw.level,
                n: raw.n,
                duration_s: raw.duration_s,
            }),
            "match" | "comms" | "add_update" => {
                let phase = match raw.phase.as_str() {
                    "match" => Phase::Match,
                    "comms" => Phase::Comms,
                    _ => Phase::AddUpdate,
                };
                Ok(LogRecord::Sample(TimingSample {
                    level: raw.level,
                    phase,
                    n: raw.n,
                    duration_s: raw.duration_s,
                    transport: raw.transport.unwrap_or(Transport::Intra),
                }))
            }
            other => Err(FitError::Log(format!("unknown phase {other:?}"))),
        }
    }
}

/// Shared sample sink. In-process hierarchies share one recorder; each
/// spawned instance process owns its own and dumps it to a file.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    records: Arc<Mutex<Vec<LogRecord>>>,
}

impl Recorder {
    pub fn new() -> Self {
        Recorder::default()
    }

    pub fn record_sample(&self, sample: TimingSample) {
        self.records.lock().expect("recorder lock").push(LogRecord::Sample(sample));
    }

    pub fn record_total(&self, level: u32, n: u64, duration_s: f64) {
        self.records
            .lock()
            .expect("recorder lock")
            .push(LogRecord::LevelTotal { level, n, duration_s });
    }

    pub fn snapshot(&self) -> Vec<LogRecord> {
        self.records.lock().expect("recorder lock").clone()
    }

    pub fn clear(&self) {
        self.records.lock().expect("recorder lock").clear();
    }

    pub fn append_to_file(&self, path: &Path) -> std::io::Result<()> {
        let mut file = fs::OpenOptions::new().create(true).append(true).open(path)?;
        for record in self.snapshot() {
            writeln!(file, "{}", record.to_json_line())?;
        }
        Ok(())
    }
}

/// Reads a sample log written by [`Recorder::append_to_file`].
pub fn load_log(path: &Path) -> Result<Vec<LogRecord>, FitError> {
    let file = fs::File::open(path).map_err(|e| FitError::Log(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| FitError::Log(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(LogRecord::from_json_line(&line)?);
    }
    Ok(out)
}

/// A fitted linear model `duration = beta * n + beta0` with averaged
/// cross-validation quality metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub beta: f64,
    pub beta0: f64,
    pub r2: f64,
    pub mape: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("degenerate design: all sample sizes are equal")]
    DegenerateDesign,
    #[error("prediction/observation lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty observation set")]
    Empty,
    #[error("observation #{0} is zero; MAPE is undefined")]
    ZeroObservation(usize),
    #[error("sample log error: {0}")]
    Log(String),
}

const CV_FOLDS: usize = 5;
const CV_SHUFFLE_SEED: u64 = 0x5eed_f01d;

/// Ordinary least squares with the nonnegative clamps: a negative slope
/// collapses to a flat model and a negative intercept is zeroed with the
/// slope refit through the origin.
fn ols_clamped(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    if sxx == 0.0 {
        return (0.0, mean_y.max(0.0));
    }
    let beta = sxy / sxx;
    let beta0 = mean_y - beta * mean_x;
    if beta < 0.0 {
        (0.0, mean_y.max(0.0))
    } else if beta0 < 0.0 {
        let sxx0: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy0: f64 = points.iter().map(|p| p.0 * p.1).sum();
        ((sxy0 / sxx0).max(0.0), 0.0)
    } else {
        (beta, beta0)
    }
}

/// Fits `duration = beta * n + beta0` by least squares and validates with
/// five-fold cross-validation (contiguous folds after a seeded shuffle).
/// Returns full-data coefficients with fold-averaged MAPE and R².
pub fn fit_linear(samples: &[(f64, f64)]) -> Result<LinearModel, FitError> {
    if samples.len() < 10 {
        return Err(FitError::TooFewSamples {
            got: samples.len(),
            need: 10,
        });
    }
    let first = samples[0].0;
    if samples.iter().all(|p| p.0 == first) {
        return Err(FitError::DegenerateDesign);
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(CV_SHUFFLE_SEED);
    order.shuffle(&mut rng);

    let fold_len = samples.len().div_ceil(CV_FOLDS);
    let mut mapes = Vec::with_capacity(CV_FOLDS);
    let mut r2s = Vec::with_capacity(CV_FOLDS);
    for fold in order.chunks(fold_len) {
        let held: Vec<(f64, f64)> = fold.iter().map(|i| samples[*i]).collect();
        let train: Vec<(f64, f64)> = order
            .iter()
            .filter(|i| !fold.contains(i))
            .map(|i| samples[*i])
            .collect();
        if train.is_empty() || held.is_empty() {
            continue;
        }
        let (beta, beta0) = ols_clamped(&train);
        let mut abs_pct = Vec::new();
        let mut ss_res = 0.0;
        let mean_obs = held.iter().map(|p| p.1).sum::<f64>() / held.len() as f64;
        let mut ss_tot = 0.0;
        for (x, y) in &held {
            let pred = beta * x + beta0;
            ss_res += (y - pred).powi(2);
            ss_tot += (y - mean_obs).powi(2);
            if *y != 0.0 {
                abs_pct.push(((pred - y) / y).abs());
            }
        }
        if !abs_pct.is_empty() {
            mapes.push(abs_pct.iter().sum::<f64>() / abs_pct.len() as f64);
        }
        r2s.push(if ss_tot == 0.0 {
            if ss_res < 1e-30 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - ss_res / ss_tot
        });
    }

    let (beta, beta0) = ols_clamped(samples);
    Ok(LinearModel {
        beta,
        beta0,
        r2: r2s.iter().sum::<f64>() / r2s.len() as f64,
        mape: if mapes.is_empty() {
            0.0
        } else {
            mapes.iter().sum::<f64>() / mapes.len() as f64
        },
    })
}

/// Mean absolute percentage error.
pub fn mape(predictions: &[f64], observations: &[f64]) -> Result<f64, FitError> {
    if predictions.len() != observations.len() {
        return Err(FitError::LengthMismatch(predictions.len(), observations.len()));
    }
    if observations.is_empty() {
        return Err(FitError::Empty);
    }
    let mut total = 0.0;
    for (i, (p, o)) in predictions.iter().zip(observations).enumerate() {
        if *o == 0.0 {
            return Err(FitError::ZeroObservation(i));
        }
        total += ((p - o) / o).abs();
    }
    Ok(total / observations.len() as f64)
}

/// Parameters of the nested-match upper bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    /// Minimum branching factor between levels; must exceed 1.
    pub b: f64,
    /// Top-level graph size (vertices plus edges).
    pub s0: f64,
    /// Single-level match time at the top level.
    pub t0: f64,
    pub beta: f64,
    pub beta0: f64,
}

/// Closed-form upper bound on total nested match time:
/// `t0 * b * (1 - 1/s0) / (b - 1) + beta0 * log_b(s0)`.
pub fn geometric_bound(p: &BoundParams) -> f64 {
    assert!(p.b > 1.0, "branching factor must exceed 1");
    assert!(p.s0 >= 1.0, "top-level graph size must be at least 1");
    p.t0 * p.b * (1.0 - 1.0 / p.s0) / (p.b - 1.0) + p.beta0 * p.s0.log(p.b)
}

/// Per-component coefficients for the aggregate grow predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    pub inter_beta: f64,
    pub inter_beta0: f64,
    pub intra_beta: f64,
    pub intra_beta0: f64,
    pub attach_beta: f64,
    pub attach_beta0: f64,
}

/// Reference coefficients measured on dedicated dual-socket HPC hardware
/// with internode links over IP-over-InfiniBand. Useful for prediction
/// demos; fits on local hardware produce their own set.
pub fn reference_coefficients() -> CoefficientSet {
    CoefficientSet {
        inter_beta: 1.5829e-5,
        inter_beta0: 0.0020992,
        intra_beta: 9.0824e-6,
        intra_beta0: 0.000631_96,
        attach_beta: 3.4583e-5,
        attach_beta0: 0.0,
    }
}

/// Aggregate grow-latency prediction for a request of size `n` crossing
/// `m` internode links and `p` intranode links, with `q` nested levels
/// applying the subgraph:
/// `2*t0 + m*(inter) + p*(intra) + q*n*attach_beta`.
pub fn predict_t_mg(
    n: f64,
    m_inter_links: f64,
    p_intra_links: f64,
    q_levels: f64,
    coeffs: &CoefficientSet,
    t0: f64,
) -> f64 {
    2.0 * t0
        + m_inter_links * (coeffs.inter_beta * n + coeffs.inter_beta0)
        + p_intra_links * (coeffs.intra_beta * n + coeffs.intra_beta0)
        + q_levels * n * coeffs.attach_beta
}

/// One fitted (phase, transport) group.
#[derive(Debug, Clone, Serialize)]
pub struct FitGroupReport {
    pub phase: Phase,
    pub transport: Transport,
    pub samples: usize,
    pub model: LinearModel,
}

/// Groups model samples by (phase, transport) and fits each group.
/// Groups with too few samples are reported as errors by group key.
pub fn fit_groups(records: &[LogRecord]) -> Result<Vec<FitGroupReport>, FitError> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(Phase, Transport), Vec<(f64, f64)>> = BTreeMap::new();
    for record in records {
        if let LogRecord::Sample(s) = record {
            groups
                .entry((s.phase, s.transport))
                .or_default()
                .push((s.n as f64, s.duration_s));
        }
    }
    if groups.is_empty() {
        return Err(FitError::Empty);
    }
    let mut out = Vec::new();
    for ((phase, transport), points) in groups {
        let model = fit_linear(&points)?;
        out.push(FitGroupReport {
            phase,
            transport,
            samples: points.len(),
            model,
        });
    }
    Ok(out)
}

/// Plain-text table for a fit report.
pub fn render_fit_table(reports: &[FitGroupReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:<6} {:>8} {:>14} {:>14} {:>10} {:>10}",
        "phase", "link", "samples", "beta", "beta0", "avg MAPE", "avg R2"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<12} {:<6} {:>8} {:>14.6e} {:>14.6e} {:>10.5} {:>10.5}",
            r.phase.as_str(),
            r.transport.as_str(),
            r.samples,
            r.model.beta,
            r.model.beta0,
            r.model.mape,
            r.model.r2
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_recovers_exactly() {
        let samples: Vec<(f64, f64)> = (1..=20).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        let m = fit_linear(&samples).unwrap();
        assert!((m.beta - 2.0).abs() < 1e-12);
        assert!((m.beta0 - 1.0).abs() < 1e-12);
        assert!((m.r2 - 1.0).abs() < 1e-12);
        assert!(m.mape < 1e-12);
    }

    #[test]
    fn degenerate_design_rejected() {
        let samples: Vec<(f64, f64)> = (0..12).map(|i| (5.0, i as f64)).collect();
        assert_eq!(fit_linear(&samples).unwrap_err(), FitError::DegenerateDesign);
    }

    #[test]
    fn too_few_samples_rejected() {
        let samples = vec![(1.0, 1.0); 9];
        assert!(matches!(
            fit_linear(&samples).unwrap_err(),
            FitError::TooFewSamples { got: 9, need: 10 }
        ));
    }

    #[test]
    fn negative_intercept_clamps_to_origin() {
        // A steep line with a negative true intercept.
        let samples: Vec<(f64, f64)> = (1..=30)
            .map(|i| (i as f64 * 10.0, (3.0 * i as f64 * 10.0 - 5.0).max(0.0)))
            .collect();
        let m = fit_linear(&samples).unwrap();
        assert_eq!(m.beta0, 0.0);
        assert!(m.beta > 0.0);
    }

    #[test]
    fn mape_cases() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mape(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        // Hand check: |3-2|/2 + |3-6|/6 over 2 = (0.5 + 0.5) / 2.
        let got = mape(&[3.0, 3.0], &[2.0, 6.0]).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
        assert!(matches!(mape(&[1.0], &[0.0]), Err(FitError::ZeroObservation(0))));
        assert!(matches!(mape(&[1.0], &[1.0, 2.0]), Err(FitError::LengthMismatch(1, 2))));
    }

    #[test]
    fn bound_degenerate_and_large_cases() {
        let p = BoundParams {
            b: 2.0,
            s0: 1.0,
            t0: 1.0,
            beta: 1.0,
            beta0: 1.0,
        };
        assert_eq!(geometric_bound(&p), 0.0);

        let p = BoundParams {
            b: 2.0,
            s0: 1e6,
            t0: 1.0,
            beta: 1.0,
            beta0: 0.0,
        };
        let ratio = geometric_bound(&p) / p.t0;
        assert!(ratio >= 1.99 && ratio <= 2.0, "ratio {ratio}");
    }

    #[test]
    fn predictor_trivial_points() {
        let coeffs = reference_coefficients();
        let t0 = 0.0123;
        // Zero-size request leaves only intercepts.
        let got = predict_t_mg(0.0, 1.0, 3.0, 4.0, &coeffs, t0);
        let want = 2.0 * t0 + coeffs.inter_beta0 + 3.0 * coeffs.intra_beta0;
        assert!((got - want).abs() < 1e-15);
        // No links, no levels.
        assert!((predict_t_mg(94.0, 0.0, 0.0, 0.0, &coeffs, t0) - 2.0 * t0).abs() < 1e-15);
    }

    #[test]
    fn log_roundtrip() {
        let rec = Recorder::new();
        rec.record_sample(TimingSample {
            level: 2,
            phase: Phase::Comms,
            n: 2240,
            duration_s: 0.0211,
            transport: Transport::Intra,
        });
        rec.record_total(2, 2240, 0.03);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.jsonl");
        rec.append_to_file(&path).unwrap();
        let back = load_log(&path).unwrap();
        assert_eq!(back, rec.snapshot());
    }

    #[test]
    fn fit_groups_by_phase_and_transport() {
        let mut records = Vec::new();
        for i in 1..=20u64 {
            records.push(LogRecord::Sample(TimingSample {
                level: 1,
                phase: Phase::Comms,
                n: i * 10,
                duration_s: 2e-6 * (i * 10) as f64 + 1e-3,
                transport: Transport::Inter,
            }));
            records.push(LogRecord::Sample(TimingSample {
                level: 3,
                phase: Phase::AddUpdate,
                n: i * 10,
                duration_s: 3e-6 * (i * 10) as f64,
                transport: Transport::Intra,
            }));
        }
        let reports = fit_groups(&records).unwrap();
        assert_eq!(reports.len(), 2);
        let comms = reports
            .iter()
            .find(|r| r.phase == Phase::Comms && r.transport == Transport::Inter)
            .unwrap();
        assert!((comms.model.beta - 2e-6).abs() < 1e-12);
        let table = render_fit_table(&reports);
        assert!(table.contains("add_update"));
    }
}
