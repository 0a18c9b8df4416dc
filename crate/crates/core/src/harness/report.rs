//! Results tables, summaries and corner-plot histograms.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::evaluate::mean_std;
use super::null::NullDistribution;
use super::run::{RunResult, TOOL_VERSION};
use super::select::GridPointResult;
use super::HarnessError;
use crate::diffcore::Tensor;
use crate::flows::{Architecture, FlowModel};
use crate::metrics::Statistic;
use crate::seeds::derive_seed;
use crate::targets::{sample_cmog, write_points_csv};

/// Dimensions whose pairs get 2-D histograms.
const CORNER_PAIR_DIMS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowKind {
    /// A grid point, statistics averaged over replicas.
    Grid,
    /// The grid point with the lowest replica-mean KS.
    AverageBest,
    /// The best replica of the average-best point; spreads are over
    /// evaluation repeats.
    AbsoluteBest,
    /// Published full-scale numbers, for comparison only.
    Reference,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            RowKind::Grid => "grid",
            RowKind::AverageBest => "average-best",
            RowKind::AbsoluteBest => "absolute-best",
            RowKind::Reference => "reference",
        }
    }
}

/// Full-scale 4-D A-RQS row (values are mean and spread).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub dim: usize,
    pub hidden: (usize, usize),
    pub bijectors: usize,
    pub architecture: Architecture,
    pub knots: usize,
    pub ks: (f64, f64),
    pub swd: (f64, f64),
    pub fnorm: (f64, f64),
    pub epochs: f64,
    pub training_seconds: f64,
    pub prediction_seconds: f64,
}

pub const REFERENCE_ROW: ReferenceRow = ReferenceRow {
    dim: 4,
    hidden: (3, 128),
    bijectors: 2,
    architecture: Architecture::ARqs,
    knots: 8,
    ks: (1.2, 0.1),
    swd: (2.6, 0.4),
    fnorm: (0.7, 0.2),
    epochs: 670.0,
    training_seconds: 7606.0,
    prediction_seconds: 54.0,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub kind: RowKind,
    pub dim: usize,
    /// Layers x width, such as `3x128`.
    pub hidden_layers: String,
    pub bijectors: usize,
    pub algorithm: String,
    pub spline_knots: Option<usize>,
    pub ks: (f64, f64),
    pub swd: (f64, f64),
    pub fnorm: (f64, f64),
    /// p-value of the mean KS against the null.
    pub ks_p_value: Option<f64>,
    pub epochs: f64,
    pub training_seconds: f64,
    pub prediction_seconds: f64,
    pub replicas: usize,
    pub failed_replicas: usize,
    pub master_seed: Option<u64>,
}

fn hidden_label(hidden: &[usize]) -> String {
    match hidden {
        [] => "0".into(),
        [w, rest @ ..] if rest.iter().all(|v| v == w) => format!("{}x{w}", hidden.len()),
        h => h.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-"),
    }
}

fn nan_pair() -> (f64, f64) {
    (f64::NAN, f64::NAN)
}

impl ResultsRow {
    fn skeleton(kind: RowKind, point: &GridPointResult, master_seed: u64) -> Self {
        let c = &point.config;
        Self {
            kind,
            dim: c.dim,
            hidden_layers: hidden_label(&c.hidden),
            bijectors: c.bijectors,
            algorithm: c.architecture.name().to_string(),
            spline_knots: c.architecture.is_spline().then_some(c.bins),
            ks: nan_pair(),
            swd: nan_pair(),
            fnorm: nan_pair(),
            ks_p_value: None,
            epochs: f64::NAN,
            training_seconds: f64::NAN,
            prediction_seconds: f64::NAN,
            replicas: point.replicas.len(),
            failed_replicas: point.failed_count(),
            master_seed: Some(master_seed),
        }
    }

    /// Replica-mean statistics with spreads across replicas.
    pub fn average(kind: RowKind, point: &GridPointResult, master_seed: u64) -> Self {
        let mut row = Self::skeleton(kind, point, master_seed);
        let ok: Vec<_> = point.successful().collect();
        if ok.is_empty() {
            return row;
        }
        let spread = |s| point.replica_spread(s).unwrap_or_else(nan_pair);
        row.ks = spread(Statistic::Ks);
        row.swd = spread(Statistic::Swd);
        row.fnorm = spread(Statistic::Fn);
        let mean_of = |f: &dyn Fn(&super::select::ReplicaResult) -> f64| {
            mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>()).0
        };
        row.epochs = mean_of(&|r| r.train.as_ref().unwrap().epochs as f64);
        row.training_seconds = mean_of(&|r| r.train.as_ref().unwrap().seconds);
        row.prediction_seconds = mean_of(&|r| r.evaluation.as_ref().unwrap().prediction_seconds());
        row
    }

    /// Single-replica statistics with spreads across evaluation repeats.
    pub fn single(point: &GridPointResult, replica: usize, master_seed: u64) -> Self {
        let mut row = Self::skeleton(RowKind::AbsoluteBest, point, master_seed);
        let Some(r) = point.replicas.iter().find(|r| r.replica == replica) else {
            return row;
        };
        if let (Ok(t), Ok(e)) = (&r.train, &r.evaluation) {
            let pair = |s| {
                let o = e.outcome(s);
                (o.mean, o.std)
            };
            row.ks = pair(Statistic::Ks);
            row.swd = pair(Statistic::Swd);
            row.fnorm = pair(Statistic::Fn);
            row.ks_p_value = Some(e.outcome(Statistic::Ks).p_value);
            row.epochs = t.epochs as f64;
            row.training_seconds = t.seconds;
            row.prediction_seconds = e.prediction_seconds();
        }
        row
    }

    pub fn reference(r: &ReferenceRow) -> Self {
        Self {
            kind: RowKind::Reference,
            dim: r.dim,
            hidden_layers: format!("{}x{}", r.hidden.0, r.hidden.1),
            bijectors: r.bijectors,
            algorithm: r.architecture.name().to_string(),
            spline_knots: Some(r.knots),
            ks: r.ks,
            swd: r.swd,
            fnorm: r.fnorm,
            ks_p_value: None,
            epochs: r.epochs,
            training_seconds: r.training_seconds,
            prediction_seconds: r.prediction_seconds,
            replicas: 10,
            failed_replicas: 0,
            master_seed: None,
        }
    }
}

/// One row per grid point, then the absolute-best replica and, for 4-D
/// runs, the full-scale reference row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub tool_version: String,
    pub master_seed: u64,
    pub rows: Vec<ResultsRow>,
}

const HEADER: [&str; 22] = [
    "kind",
    "dim",
    "hidden_layers",
    "bijectors",
    "algorithm",
    "spline_knots",
    "ks_mean",
    "ks_std",
    "swd_mean",
    "swd_std",
    "fn_mean",
    "fn_std",
    "ks_p_value",
    "epochs",
    "training_seconds",
    "prediction_seconds",
    "replicas",
    "failed_replicas",
    "tool_version",
    "master_seed",
    "spread",
    "note",
];

fn num(v: f64) -> String {
    v.to_string()
}

impl ResultsTable {
    pub fn from_run(run: &RunResult) -> Self {
        let seed = run.master_seed();
        let best = run.selection.as_ref().ok();
        let mut rows: Vec<ResultsRow> = run
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let kind = if best.is_some_and(|s| s.average_best == i) {
                    RowKind::AverageBest
                } else {
                    RowKind::Grid
                };
                ResultsRow::average(kind, p, seed)
            })
            .collect();
        if let Some(s) = best {
            rows.push(ResultsRow::single(&run.points[s.average_best], s.absolute_best, seed));
        }
        if run.config.target.dim == REFERENCE_ROW.dim {
            rows.push(ResultsRow::reference(&REFERENCE_ROW));
        }
        Self {
            tool_version: run.tool_version.clone(),
            master_seed: seed,
            rows,
        }
    }

    /// CSV text. Without timing the three time columns are left blank,
    /// which makes the text a pure function of the run configuration.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let write = |w: &mut csv::Writer<Vec<u8>>, rec: Vec<String>| {
            w.write_record(&rec).expect("writing to memory");
        };
        write(&mut w, HEADER.iter().map(|s| s.to_string()).collect());
        for r in &self.rows {
            let timing = |v: f64| if with_timing || r.kind == RowKind::Reference { num(v) } else { String::new() };
            let (spread, note) = match r.kind {
                RowKind::Grid | RowKind::AverageBest => ("replicas", ""),
                RowKind::AbsoluteBest => ("repeats", ""),
                RowKind::Reference => ("replicas", "published full-scale result, not reproduced"),
            };
            write(
                &mut w,
                vec![
                    r.kind.name().into(),
                    r.dim.to_string(),
                    r.hidden_layers.clone(),
                    r.bijectors.to_string(),
                    r.algorithm.clone(),
                    r.spline_knots.map(|k| k.to_string()).unwrap_or_default(),
                    num(r.ks.0),
                    num(r.ks.1),
                    num(r.swd.0),
                    num(r.swd.1),
                    num(r.fnorm.0),
                    num(r.fnorm.1),
                    r.ks_p_value.map(num).unwrap_or_default(),
                    num(r.epochs),
                    timing(r.training_seconds),
                    timing(r.prediction_seconds),
                    r.replicas.to_string(),
                    r.failed_replicas.to_string(),
                    self.tool_version.clone(),
                    r.master_seed.map(|s| s.to_string()).unwrap_or_default(),
                    spread.into(),
                    note.into(),
                ],
            );
        }
        String::from_utf8(w.into_inner().expect("flushing to memory")).expect("csv is utf-8")
    }
}

/// Counts of the test and flow samples in the same bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram1d {
    pub dim: usize,
    /// `bins + 1` increasing edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub test: Vec<u64>,
    pub flow: Vec<u64>,
    /// Flow points outside the edges.
    pub flow_outside: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    pub dims: (usize, usize),
    pub edges: (Vec<f64>, Vec<f64>),
    /// Row-major over (bin of first dim, bin of second dim).
    pub test: Vec<u64>,
    pub flow: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CornerData {
    pub one_d: Vec<Histogram1d>,
    pub two_d: Vec<Histogram2d>,
}

/// Edges spanning the finite values of `column`.
fn edges_for(column: impl Iterator<Item = f64>, bins: usize) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in column.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        (lo, hi) = (-0.5, 0.5);
    } else if lo == hi {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    edges.push(hi);
    edges
}

fn bin_of(edges: &[f64], x: f64) -> Option<usize> {
    let bins = edges.len() - 1;
    if !(x >= edges[0] && x <= edges[bins]) {
        return None;
    }
    Some(edges[1..bins].partition_point(|&e| e <= x))
}

/// Histograms over ranges set by the test sample: one per dimension and one
/// per pair among the first few dimensions.
pub fn corner_histograms(test: &Tensor, flow: &Tensor, bins: usize) -> Result<CornerData, HarnessError> {
    if bins == 0 || test.rows() == 0 {
        return Err(HarnessError::Invalid("histograms need bins and test points".into()));
    }
    if test.cols() != flow.cols() {
        return Err(HarnessError::Invalid("test and flow samples differ in width".into()));
    }
    let d = test.cols();
    let edges: Vec<Vec<f64>> = (0..d)
        .map(|j| edges_for((0..test.rows()).map(|i| test.at(i, j)), bins))
        .collect();
    let count1 = |t: &Tensor, j: usize| {
        let mut c = vec![0u64; bins];
        let mut outside = 0;
        for i in 0..t.rows() {
            match bin_of(&edges[j], t.at(i, j)) {
                Some(b) => c[b] += 1,
                None => outside += 1,
            }
        }
        (c, outside)
    };
    let one_d = (0..d)
        .map(|j| {
            let (test_counts, _) = count1(test, j);
            let (flow_counts, flow_outside) = count1(flow, j);
            Histogram1d {
                dim: j,
                edges: edges[j].clone(),
                test: test_counts,
                flow: flow_counts,
                flow_outside,
            }
        })
        .collect();
    let count2 = |t: &Tensor, a: usize, b: usize| {
        let mut c = vec![0u64; bins * bins];
        for i in 0..t.rows() {
            if let (Some(p), Some(q)) = (bin_of(&edges[a], t.at(i, a)), bin_of(&edges[b], t.at(i, b))) {
                c[p * bins + q] += 1;
            }
        }
        c
    };
    let k = d.min(CORNER_PAIR_DIMS);
    let mut two_d = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            two_d.push(Histogram2d {
                dims: (a, b),
                edges: (edges[a].clone(), edges[b].clone()),
                test: count2(test, a, b),
                flow: count2(flow, a, b),
            });
        }
    }
    Ok(CornerData { one_d, two_d })
}

impl CornerData {
    /// `dim,bin,lo,hi,test_count,flow_count`, 0-based dimensions.
    pub fn one_d_csv(&self) -> String {
        let mut s = String::from("dim,bin,lo,hi,test_count,flow_count\n");
        for h in &self.one_d {
            for b in 0..h.test.len() {
                let _ = writeln!(
                    s,
                    "{},{b},{},{},{},{}",
                    h.dim,
                    h.edges[b],
                    h.edges[b + 1],
                    h.test[b],
                    h.flow[b]
                );
            }
        }
        s
    }

    /// `dim_a,dim_b,bin_a,bin_b,a_lo,a_hi,b_lo,b_hi,test_count,flow_count`.
    pub fn two_d_csv(&self) -> String {
        let mut s = String::from("dim_a,dim_b,bin_a,bin_b,a_lo,a_hi,b_lo,b_hi,test_count,flow_count\n");
        for h in &self.two_d {
            let (ea, eb) = &h.edges;
            let nb = eb.len() - 1;
            for p in 0..ea.len() - 1 {
                for q in 0..nb {
                    let _ = writeln!(
                        s,
                        "{},{},{p},{q},{},{},{},{},{},{}",
                        h.dims.0,
                        h.dims.1,
                        ea[p],
                        ea[p + 1],
                        eb[q],
                        eb[q + 1],
                        h.test[p * nb + q],
                        h.flow[p * nb + q]
                    );
                }
            }
        }
        s
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_points(path: &Path, points: &Tensor) -> Result<(), HarnessError> {
    let f = std::fs::File::create(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_points_csv(points, std::io::BufWriter::new(f))?;
    Ok(())
}

fn summary_json(run: &RunResult) -> serde_json::Value {
    let points: Vec<_> = run
        .points
        .iter()
        .map(|p| {
            let replicas: Vec<_> = p
                .replicas
                .iter()
                .map(|r| {
                    let tests = r.evaluation.as_ref().map(|e| {
                        e.outcomes
                            .iter()
                            .map(|o| {
                                json!({
                                    "statistic": o.statistic.name(),
                                    "mean": o.mean,
                                    "std": o.std,
                                    "p_value": o.p_value,
                                    "p_value_range": [o.p_value_range.0, o.p_value_range.1],
                                    "sigma": o.sigma.label(),
                                    "failure": o.failure,
                                })
                            })
                            .collect::<Vec<_>>()
                    });
                    json!({
                        "replica": r.replica,
                        "model_seed": r.model_seed,
                        "train_seed": r.train_seed,
                        "eval_seed": r.eval_seed,
                        "epochs": r.train.as_ref().ok().map(|t| t.epochs),
                        "best_val_loss": r.train.as_ref().ok().map(|t| t.best_val_loss),
                        "train_error": r.train.as_ref().err(),
                        "tests": tests.as_ref().ok(),
                        "evaluation_error": tests.as_ref().err(),
                        "discarded_repeats": r.evaluation.as_ref().ok().map(|e| e.discarded_repeats),
                        "non_finite_points": r.evaluation.as_ref().ok().map(|e| e.non_finite_points),
                        "untrained_ks": r.untrained.as_ref().map(|e| e.outcome(Statistic::Ks).mean),
                    })
                })
                .collect();
            json!({
                "label": p.config.label(),
                "config": p.config,
                "failed_replicas": p.failed_count(),
                "replicas": replicas,
            })
        })
        .collect();
    let nulls: Vec<_> = run
        .nulls
        .iter()
        .map(|n| {
            json!({
                "statistic": n.statistic.name(),
                "n_pseudo": n.n_pseudo,
                "sample_size": n.sample_size,
                "seed": n.seed,
                "mean": n.mean,
                "threshold_1sigma": n.thresholds[0],
                "threshold_2sigma": n.thresholds[1],
                "threshold_3sigma": n.thresholds[2],
            })
        })
        .collect();
    json!({
        "tool_version": run.tool_version,
        "master_seed": run.master_seed(),
        "dim": run.config.target.dim,
        "target_seed": run.config.target.seed,
        "sizes": run.config.sizes,
        "nulls": nulls,
        "selection": run.selection.as_ref().ok(),
        "selection_error": run.selection.as_ref().err(),
        "points": points,
    })
}

/// Writes `results.csv`, `summary.json` and, when a model is given,
/// `test_samples.csv`, `flow_samples.csv`, `corner_1d.csv` and
/// `corner_2d.csv`, plus a `manifest.json` listing them. Returns the paths
/// written.
pub fn emit_report(
    run: &RunResult,
    best: Option<&FlowModel>,
    dir: &Path,
    bins: usize,
) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut written = Vec::new();
    let put = |written: &mut Vec<PathBuf>, name: &str, text: &str| -> Result<(), HarnessError> {
        let path = dir.join(name);
        write_file(&path, text)?;
        written.push(path);
        Ok(())
    };
    put(&mut written, "results.csv", &ResultsTable::from_run(run).to_csv(true))?;
    let summary = serde_json::to_string_pretty(&summary_json(run)).expect("summary serializes");
    put(&mut written, "summary.json", &summary)?;
    if let Some(model) = best {
        let seed = run.master_seed();
        let n = run.config.sizes.test;
        let test = sample_cmog(&run.config.target, n, derive_seed(seed, "corner-test", 0)).data;
        let flow = model.sample(n, derive_seed(seed, "corner-flow", 0))?.data;
        for (name, points) in [("test_samples.csv", &test), ("flow_samples.csv", &flow)] {
            let path = dir.join(name);
            write_points(&path, points)?;
            written.push(path);
        }
        let corner = corner_histograms(&test, &flow, bins)?;
        put(&mut written, "corner_1d.csv", &corner.one_d_csv())?;
        put(&mut written, "corner_2d.csv", &corner.two_d_csv())?;
    }
    let files: Vec<String> = written
        .iter()
        .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
        .collect();
    let manifest = json!({
        "tool_version": run.tool_version,
        "master_seed": run.master_seed(),
        "files": files,
    });
    let path = dir.join("manifest.json");
    write_file(&path, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    written.push(path);
    Ok(written)
}

#[derive(Serialize, Deserialize)]
struct NullFile {
    tool_version: String,
    nulls: Vec<NullDistribution>,
}

pub fn save_nulls(nulls: &[NullDistribution], path: &Path) -> Result<(), HarnessError> {
    let file = NullFile {
        tool_version: TOOL_VERSION.to_string(),
        nulls: nulls.to_vec(),
    };
    let text = serde_json::to_string(&file).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_file(path, &text)
}

pub fn load_nulls(path: &Path) -> Result<Vec<NullDistribution>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: NullFile = serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(file.nulls)
}
