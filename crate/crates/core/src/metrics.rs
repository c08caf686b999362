//! Accuracy, knowledge/backward transfer, and report export.
//!
//! `accmatrix.csv` columns: `task,phase,mode,seed,accuracy`. `phase` is
//! `during` (scored right after the task was trained) or `end` (scored after
//! the whole sequence); accuracies are fractions.
//!
//! `summary.csv` columns: `mode,acc_mean,acc_std,kt_mean,kt_std,bt_mean,bt_std`,
//! all in percent with two decimals; std is the sample standard deviation
//! across seeds (0 for a single seed). `summary.json` holds the same
//! statistics at full precision plus per-seed values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::image_batch;
use crate::compose::ComposeMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::ContinualState;

const EVAL_BATCH: usize = 256;

/// Fraction of rows whose first maximal logit matches the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2();
    if n != labels.len() {
        return Err(Error::dim("accuracy", &[n, c], &[labels.len()]));
    }
    if n == 0 {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    Ok(count_correct(logits, labels) as f64 / n as f64)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

/// Test accuracy of task `t` under `mode`.
pub fn eval_accuracy(state: &ContinualState, t: usize, test: &Dataset, mode: ComposeMode) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Data(format!("task {t} has no test data")));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = state.predict(&image_batch(test, chunk), t, mode)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| test.labels[i]).collect();
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f64 / test.len() as f64)
}

fn mean_gap(a: &[f64], b: &[f64], op: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(op, &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::Data(format!("{op} of zero tasks")));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>() / a.len() as f64)
}

/// `(1/m) Σ (acc_link,i − acc_a,i)`.
pub fn knowledge_transfer(acc_link: &[f64], acc_a: &[f64]) -> Result<f64> {
    mean_gap(acc_link, acc_a, "knowledge_transfer")
}

/// `(1/m) Σ (acc_end,i − acc_during,i)`.
pub fn backward_transfer(acc_end: &[f64], acc_during: &[f64]) -> Result<f64> {
    mean_gap(acc_end, acc_during, "backward_transfer")
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Accuracies of one training run: the per-task "during" scores and one
/// column of end scores per evaluated mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub run: String,
    pub during_mode: String,
    pub during: Vec<f64>,
    pub end: BTreeMap<String, Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn tasks(&self) -> usize {
        self.during.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.tasks();
        for col in self.end.values() {
            if col.len() != m {
                return Err(Error::dim("accuracy matrix", &[m], &[col.len()]));
            }
        }
        let all = self.during.iter().chain(self.end.values().flatten());
        if let Some(bad) = all.into_iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Data(format!("accuracy {bad} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn bt(&self, mode: &str) -> Result<f64> {
        let end = self
            .end
            .get(mode)
            .ok_or_else(|| Error::Index(format!("no end column for mode {mode}")))?;
        backward_transfer(end, &self.during)
    }
}

/// Label of the run whose "during" column pairs with an end mode.
pub fn during_label(end_mode: &str) -> &str {
    match end_mode {
        "bidirectional" => "forward",
        "bidirectional-k" => "forward-k",
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub matrices: Vec<AccuracyMatrix>,
}

impl SeedResult {
    /// End accuracies of `mode`, searching every matrix.
    pub fn end(&self, mode: &str) -> Option<&[f64]> {
        self.matrices.iter().find_map(|m| m.end.get(mode).map(Vec::as_slice))
    }

    fn during_for(&self, mode: &str) -> Option<&[f64]> {
        let label = during_label(mode);
        self.matrices
            .iter()
            .find(|m| m.during_mode == label)
            .map(|m| m.during.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub acc: Vec<f64>,
    /// Empty when no standalone run is available to pair with.
    pub kt: Vec<f64>,
    pub bt: Vec<f64>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub kt_mean: Option<f64>,
    pub kt_std: Option<f64>,
    pub bt_mean: f64,
    pub bt_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub seeds: Vec<SeedResult>,
}

pub const STANDALONE_MODE: &str = "adapters";

fn mode_rank(mode: &str) -> usize {
    ["adapters", "forward", "bidirectional", "forward-k", "bidirectional-k"]
        .iter()
        .position(|m| *m == mode)
        .unwrap_or(usize::MAX)
}

impl Report {
    /// Every end mode present, in canonical order.
    pub fn modes(&self) -> Vec<String> {
        let mut modes: Vec<String> = Vec::new();
        for s in &self.seeds {
            for m in &s.matrices {
                for k in m.end.keys() {
                    if !modes.contains(k) {
                        modes.push(k.clone());
                    }
                }
            }
        }
        modes.sort_by_key(|m| (mode_rank(m), m.clone()));
        modes
    }

    /// Per-mode statistics across seeds.
    pub fn summary(&self) -> Result<Vec<ModeSummary>> {
        if self.seeds.is_empty() {
            return Err(Error::Data("report has no seeds".into()));
        }
        let mut out = Vec::new();
        for mode in self.modes() {
            let (mut acc, mut kt, mut bt) = (Vec::new(), Vec::new(), Vec::new());
            let mut paired = true;
            for s in &self.seeds {
                let end = s
                    .end(&mode)
                    .ok_or_else(|| Error::Data(format!("seed {} lacks mode {mode}", s.seed)))?;
                let during = s
                    .during_for(&mode)
                    .ok_or_else(|| Error::Data(format!("seed {} lacks a during column for {mode}", s.seed)))?;
                acc.push(mean(end));
                bt.push(backward_transfer(end, during)?);
                match s.end(STANDALONE_MODE) {
                    Some(a) if paired => kt.push(knowledge_transfer(end, a)?),
                    _ => paired = false,
                }
            }
            if !paired {
                kt.clear();
            }
            out.push(ModeSummary {
                acc_mean: mean(&acc),
                acc_std: sample_std(&acc),
                kt_mean: (!kt.is_empty()).then(|| mean(&kt)),
                kt_std: (!kt.is_empty()).then(|| sample_std(&kt)),
                bt_mean: mean(&bt),
                bt_std: sample_std(&bt),
                mode,
                acc,
                kt,
                bt,
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AccRow {
    task: usize,
    phase: String,
    mode: String,
    seed: u64,
    accuracy: f64,
}

fn storage(path: &Path, e: impl Into<std::io::Error>) -> Error {
    Error::storage(path, e.into())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::storage(path, io),
        other => Error::Format {
            field: "accmatrix",
            msg: format!("{}: {other:?}", path.display()),
        },
    }
}

/// Writes `accmatrix.csv` rows for every seed and matrix to `path`.
pub fn write_accmatrix(seeds: &[SeedResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for s in seeds {
        for m in &s.matrices {
            m.validate()?;
            let mut rows: Vec<(&str, &str, &[f64])> = vec![("during", m.during_mode.as_str(), &m.during)];
            rows.extend(m.end.iter().map(|(k, v)| ("end", k.as_str(), v.as_slice())));
            for (phase, mode, col) in rows {
                for (task, &accuracy) in col.iter().enumerate() {
                    w.serialize(AccRow {
                        task,
                        phase: phase.into(),
                        mode: mode.into(),
                        seed: s.seed,
                        accuracy,
                    })
                    .map_err(|e| csv_err(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| storage(path, e))
}

/// Rebuilds per-seed matrices from an `accmatrix.csv`.
pub fn read_accmatrix(path: &Path) -> Result<Vec<SeedResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    // seed -> during label -> (during column, end columns)
    type Cols = BTreeMap<usize, f64>;
    let mut acc: BTreeMap<u64, BTreeMap<String, (Cols, BTreeMap<String, Cols>)>> = BTreeMap::new();
    for row in r.deserialize::<AccRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let runs = acc.entry(row.seed).or_default();
        match row.phase.as_str() {
            "during" => {
                runs.entry(row.mode).or_default().0.insert(row.task, row.accuracy);
            }
            "end" => {
                let run = runs.entry(during_label(&row.mode).to_string()).or_default();
                run.1.entry(row.mode).or_default().insert(row.task, row.accuracy);
            }
            other => {
                return Err(Error::Format {
                    field: "phase",
                    msg: format!("unknown phase {other:?} in {}", path.display()),
                })
            }
        }
    }
    let column = |c: Cols| -> Result<Vec<f64>> {
        if c.keys().copied().ne(0..c.len()) {
            return Err(Error::Format {
                field: "task",
                msg: format!("task ids in {} are not contiguous from 0", path.display()),
            });
        }
        Ok(c.into_values().collect())
    };
    let mut seeds = Vec::new();
    for (seed, runs) in acc {
        let mut matrices = Vec::new();
        for (label, (during, ends)) in runs {
            let m = AccuracyMatrix {
                run: run_name(&label).to_string(),
                during: column(during)?,
                end: ends
                    .into_iter()
                    .map(|(k, v)| Ok((k, column(v)?)))
                    .collect::<Result<_>>()?,
                during_mode: label,
            };
            m.validate()?;
            matrices.push(m);
        }
        seeds.push(SeedResult { seed, matrices });
    }
    Ok(seeds)
}

fn run_name(during_label: &str) -> &str {
    match during_label {
        "forward" => "linked",
        "forward-k" => "constant",
        other => other,
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Writes `accmatrix.csv`, `summary.csv` and `summary.json` into `dir`.
pub fn export_report(report: &Report, dir: &Path) -> Result<Vec<ModeSummary>> {
    fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
    write_accmatrix(&report.seeds, &dir.join("accmatrix.csv"))?;
    let summary = report.summary()?;

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["mode", "acc_mean", "acc_std", "kt_mean", "kt_std", "bt_mean", "bt_std"])
        .map_err(|e| csv_err(&path, e))?;
    for s in &summary {
        let opt = |x: Option<f64>| x.map(pct).unwrap_or_default();
        w.write_record([
            s.mode.clone(),
            pct(s.acc_mean),
            pct(s.acc_std),
            opt(s.kt_mean),
            opt(s.kt_std),
            pct(s.bt_mean),
            pct(s.bt_std),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| storage(&path, e))?;

    let json = serde_json::json!({
        "config": report.config,
        "seeds": report.seeds.iter().map(|s| s.seed).collect::<Vec<_>>(),
        "modes": summary,
    });
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&json).expect("json");
    fs::write(&path, text + "\n").map_err(|e| storage(&path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn matrix(during_mode: &str, during: Vec<f64>, end: &[(&str, Vec<f64>)]) -> AccuracyMatrix {
        AccuracyMatrix {
            run: run_name(during_mode).into(),
            during_mode: during_mode.into(),
            during,
            end: end.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    #[test]
    fn counting_accuracy() {
        let logits = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 1.0], &[0.0, 3.0]]);
        assert_eq!(accuracy_from_logits(&logits, &[0, 1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy_from_logits(&logits, &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(matches!(
            accuracy_from_logits(&Tensor::zeros(&[0, 2]), &[]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn transfer_hand_values() {
        assert_abs_diff_eq!(knowledge_transfer(&[0.90, 0.80], &[0.85, 0.75]).unwrap(), 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(backward_transfer(&[0.80, 0.90], &[0.78, 0.91]).unwrap(), 0.005, epsilon = 1e-12);
        assert_eq!(knowledge_transfer(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(matches!(knowledge_transfer(&[0.1], &[0.1, 0.2]), Err(Error::Dimension { .. })));
        assert!(matches!(backward_transfer(&[0.1, 0.2], &[0.1]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_seed_std_is_zero() {
        assert_eq!(sample_std(&[0.4]), 0.0);
        assert_abs_diff_eq!(sample_std(&[1.0, 3.0]), 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn export_rows_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = 3;
        let standalone = matrix("adapters", vec![0.5, 0.5, 0.5], &[("adapters", vec![0.5, 0.5, 0.5])]);
        let linked = matrix(
            "forward",
            vec![0.5, 0.75, 1.0],
            &[("forward", vec![0.5, 0.5, 1.0]), ("bidirectional", vec![0.75, 0.5, 1.0])],
        );
        let seeds = vec![SeedResult {
            seed: 3,
            matrices: vec![standalone, linked],
        }];
        let path = dir.path().join("acc.csv");
        write_accmatrix(&seeds, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // one during column per run plus one end column per mode
        assert_eq!(text.lines().count(), 1 + m * (2 + 3));
        assert!(text.starts_with("task,phase,mode,seed,accuracy\n"));

        let back = read_accmatrix(&path).unwrap();
        assert_eq!(back, seeds);
    }

    #[test]
    fn single_matrix_row_count() {
        let dir = tempfile::tempdir().unwrap();
        let m = matrix(
            "forward",
            vec![0.5, 0.75],
            &[("forward", vec![0.5, 0.5]), ("bidirectional", vec![0.75, 0.5]), ("x", vec![1.0, 1.0])],
        );
        let path = dir.path().join("acc.csv");
        write_accmatrix(&[SeedResult { seed: 0, matrices: vec![m] }], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1 + 2 * (1 + 3));
    }

    fn two_seed_report() -> Report {
        let seed = |s: u64, bump: f64| SeedResult {
            seed: s,
            matrices: vec![
                matrix("adapters", vec![0.5, 0.6], &[("adapters", vec![0.5, 0.6])]),
                matrix(
                    "forward",
                    vec![0.5 + bump, 0.7],
                    &[("forward", vec![0.5 + bump, 0.7]), ("bidirectional", vec![0.6 + bump, 0.7])],
                ),
            ],
        };
        Report {
            config: serde_json::json!({}),
            seeds: vec![seed(0, 0.0), seed(1, 0.1)],
        }
    }

    #[test]
    fn summary_statistics() {
        let s = two_seed_report().summary().unwrap();
        let get = |m: &str| s.iter().find(|x| x.mode == m).unwrap();
        let a = get("adapters");
        assert_eq!(a.kt_mean, Some(0.0));
        assert_eq!(a.bt_mean, 0.0);
        let f = get("forward");
        assert_abs_diff_eq!(f.kt[0], 0.05, epsilon = 1e-12);
        assert_abs_diff_eq!(f.kt[1], 0.10, epsilon = 1e-12);
        assert_eq!(f.bt, vec![0.0, 0.0]);
        let b = get("bidirectional");
        assert_abs_diff_eq!(b.bt_mean, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn export_is_idempotent_and_recomputable() {
        let dir = tempfile::tempdir().unwrap();
        let report = two_seed_report();
        export_report(&report, dir.path()).unwrap();
        let first: Vec<Vec<u8>> = ["accmatrix.csv", "summary.csv", "summary.json"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        export_report(&report, dir.path()).unwrap();
        for (f, bytes) in ["accmatrix.csv", "summary.csv", "summary.json"].iter().zip(&first) {
            assert_eq!(&fs::read(dir.path().join(f)).unwrap(), bytes, "{f}");
        }
        let seeds = read_accmatrix(&dir.path().join("accmatrix.csv")).unwrap();
        let again = Report {
            config: report.config.clone(),
            seeds,
        };
        assert_eq!(again.summary().unwrap(), report.summary().unwrap());
    }

    #[test]
    fn out_of_range_accuracy_rejected() {
        let m = matrix("adapters", vec![1.5], &[("adapters", vec![0.5])]);
        assert!(matches!(m.validate(), Err(Error::Data(_))));
    }
}
