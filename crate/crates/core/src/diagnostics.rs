//! Inter-task gradient conflict, frozen-feature probes and metric export.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calibration::csv_err;
use crate::error::{dim_err, Error, Result};
use crate::numcore::Matrix;

pub use crate::trainer::task_gradients;

/// Pairwise cosine similarities between task gradients at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub epoch: usize,
    /// `K × K`, symmetric.
    pub pairwise_cos: Matrix,
    /// Fraction of off-diagonal pairs with negative cosine.
    pub conflict_rate: f64,
    pub mean_cos: f64,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `⟨a, b⟩ / (‖a‖‖b‖)`, or 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn pairwise_cosine(grads: &[Vec<f64>], epoch: usize) -> Result<ConflictReport> {
    let k = grads.len();
    if k < 2 {
        return Err(Error::Contract(format!(
            "gradient conflict needs at least 2 tasks, got {k}"
        )));
    }
    let len = grads[0].len();
    if let Some(g) = grads.iter().find(|g| g.len() != len) {
        return Err(dim_err(
            "pairwise_cosine",
            format!("gradient lengths {len} and {}", g.len()),
        ));
    }
    let mut cos = Matrix::zeros(k, k);
    let (mut sum, mut negative) = (0.0, 0usize);
    for a in 0..k {
        cos.set(a, a, if norm(&grads[a]) > 0.0 { 1.0 } else { 0.0 });
        for b in a + 1..k {
            let c = cosine(&grads[a], &grads[b]);
            cos.set(a, b, c);
            cos.set(b, a, c);
            sum += c;
            if c < 0.0 {
                negative += 1;
            }
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(ConflictReport {
        epoch,
        pairwise_cos: cos,
        conflict_rate: negative as f64 / pairs,
        mean_cos: sum / pairs,
    })
}

impl ConflictReport {
    /// Upper-triangle entries as export rows.
    pub fn records(&self) -> Vec<ConflictRecord> {
        let k = self.pairwise_cos.rows();
        let mut out = Vec::new();
        for a in 0..k {
            for b in a + 1..k {
                out.push(ConflictRecord {
                    epoch: self.epoch,
                    task_a: a,
                    task_b: b,
                    cos: self.pairwise_cos.get(a, b),
                });
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub knn5: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Labelled feature rows.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub features: &'a Matrix,
    pub labels: &'a [usize],
}

impl Labeled<'_> {
    fn check(&self, what: &str) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return Err(dim_err(
                "probe",
                format!("{what}: {} rows, {} labels", self.features.rows(), self.labels.len()),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearProbeOptions {
    pub learning_rate: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for LinearProbeOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            max_iter: 2000,
            grad_tol: 1e-6,
        }
    }
}

fn class_count(train: &[usize], test: &[usize]) -> usize {
    train.iter().chain(test).max().map_or(0, |m| m + 1)
}

/// Multinomial logistic regression on features standardised with the
/// training moments; returns test accuracy.
pub fn probe_linear(train: Labeled<'_>, test: Labeled<'_>, opts: &LinearProbeOptions) -> Result<f64> {
    train.check("train")?;
    test.check("test")?;
    let mut seen: Vec<usize> = train.labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Contract(
            "linear probe needs at least two classes in train".into(),
        ));
    }
    if train.features.cols() != test.features.cols() {
        return Err(dim_err("probe_linear", "train and test feature widths differ"));
    }
    let (n, p) = train.features.shape();
    let c = class_count(train.labels, test.labels);
    let (mean, std) = column_moments(train.features);
    let x = standardize(train.features, &mean, &std);
    let xt = standardize(test.features, &mean, &std);
    let mut w = Matrix::zeros(p, c);
    let mut b = vec![0.0; c];
    for _ in 0..opts.max_iter {
        let mut logits = x.matmul(&w)?;
        add_bias(&mut logits, &b);
        let probs = crate::numcore::row_softmax(&logits);
        let mut resid = probs;
        for (i, &y) in train.labels.iter().enumerate() {
            resid.set(i, y, resid.get(i, y) - 1.0);
        }
        let gw = x.t_matmul(&resid)?.scale(1.0 / n as f64);
        let gb: Vec<f64> = (0..c)
            .map(|j| (0..n).map(|i| resid.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        let gnorm = (gw.frobenius_sq() + gb.iter().map(|v| v * v).sum::<f64>()).sqrt();
        if gnorm < opts.grad_tol {
            break;
        }
        w.axpy(-opts.learning_rate, &gw)?;
        b.iter_mut().zip(&gb).for_each(|(bi, g)| *bi -= opts.learning_rate * g);
    }
    let mut logits = xt.matmul(&w)?;
    add_bias(&mut logits, &b);
    let correct = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == test.labels[i])
        .count();
    Ok(accuracy(correct, test.labels.len()))
}

/// `k`-nearest-neighbour vote by Euclidean distance. Ties between classes
/// go to the smaller summed neighbour distance, then to the lower class.
pub fn probe_knn(train: Labeled<'_>, test: Labeled<'_>, k: usize) -> Result<f64> {
    train.check("train")?;
    test.check("test")?;
    if train.labels.len() < k || k == 0 {
        return Err(Error::Contract(format!(
            "{k}-NN needs at least {k} training points, got {}",
            train.labels.len()
        )));
    }
    if train.features.cols() != test.features.cols() {
        return Err(dim_err("probe_knn", "train and test feature widths differ"));
    }
    let c = class_count(train.labels, test.labels);
    let mut correct = 0;
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(train.labels.len());
    for i in 0..test.features.rows() {
        let q = test.features.row(i);
        dist.clear();
        dist.extend((0..train.features.rows()).map(|j| {
            let d2: f64 = q.iter().zip(train.features.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            (d2.sqrt(), j)
        }));
        dist.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let mut votes = vec![(0usize, 0.0f64); c];
        for &(d, j) in &dist[..k] {
            let v = &mut votes[train.labels[j]];
            v.0 += 1;
            v.1 += d;
        }
        let mut best = 0;
        for cls in 1..c {
            let (n, s) = votes[cls];
            let (bn, bs) = votes[best];
            if n > bn || (n == bn && n > 0 && s < bs) {
                best = cls;
            }
        }
        if best == test.labels[i] {
            correct += 1;
        }
    }
    Ok(accuracy(correct, test.labels.len()))
}

pub fn probe(train: Labeled<'_>, test: Labeled<'_>) -> Result<ProbeResult> {
    Ok(ProbeResult {
        top1: probe_linear(train, test, &LinearProbeOptions::default())?,
        knn5: probe_knn(train, test, 5)?,
        n_train: train.labels.len(),
        n_test: test.labels.len(),
    })
}

fn accuracy(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    let c = m.cols();
    for (k, v) in m.data_mut().iter_mut().enumerate() {
        *v += b[k % c];
    }
}

fn column_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, p) = x.shape();
    let nf = n.max(1) as f64;
    let mean: Vec<f64> = (0..p).map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / nf).collect();
    let std = (0..p)
        .map(|j| ((0..n).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / nf).sqrt())
        .collect();
    (mean, std)
}

fn standardize(x: &Matrix, mean: &[f64], std: &[f64]) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let centred = x.get(i, j) - mean[j];
        if std[j] > 1e-12 {
            centred / std[j]
        } else {
            centred
        }
    })
}

/// One loss value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub batch: usize,
    pub stage: String,
    pub loss_name: String,
    pub value: f64,
}

/// One off-diagonal cosine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub epoch: usize,
    pub task_a: usize,
    pub task_b: usize,
    pub cos: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub losses: Vec<MetricRecord>,
    pub conflicts: Vec<ConflictReport>,
}

impl MetricHistory {
    pub fn conflict_records(&self) -> Vec<ConflictRecord> {
        self.conflicts.iter().flat_map(ConflictReport::records).collect()
    }
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "batch", "stage", "loss_name", "value"];
pub const CONFLICT_HEADER: [&str; 4] = ["epoch", "task_a", "task_b", "cos"];

pub fn write_metrics_csv<W: Write>(records: &[MetricRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.batch.to_string(),
            r.stage.clone(),
            r.loss_name.clone(),
            r.value.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_conflict_csv<W: Write>(records: &[ConflictRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CONFLICT_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.task_a.to_string(),
            r.task_b.to_string(),
            r.cos.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes both streams.
pub fn export_metrics<A: Write, B: Write>(history: &MetricHistory, metrics: A, conflict: B) -> Result<()> {
    write_metrics_csv(&history.losses, metrics)?;
    write_conflict_csv(&history.conflict_records(), conflict)
}

fn read_rows<R: Read>(input: R, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows = r.records();
    let head = rows
        .next()
        .ok_or_else(|| Error::Format("CSV is empty; expected a header row".into()))?
        .map_err(csv_err)?;
    if head.iter().collect::<Vec<_>>() != header {
        return Err(Error::Format(format!(
            "unexpected CSV header {:?}, expected {:?}",
            head.iter().collect::<Vec<_>>(),
            header
        )));
    }
    rows.map(|r| r.map_err(csv_err)).collect()
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
        Error::Format(format!(
            "bad {name} field in CSV row {:?}",
            rec.iter().collect::<Vec<_>>()
        ))
    })
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricRecord>> {
    read_rows(input, &METRICS_HEADER)?
        .iter()
        .map(|rec| {
            Ok(MetricRecord {
                epoch: field(rec, 0, "epoch")?,
                batch: field(rec, 1, "batch")?,
                stage: field(rec, 2, "stage")?,
                loss_name: field(rec, 3, "loss_name")?,
                value: field(rec, 4, "value")?,
            })
        })
        .collect()
}

pub fn read_conflict_csv<R: Read>(input: R) -> Result<Vec<ConflictRecord>> {
    read_rows(input, &CONFLICT_HEADER)?
        .iter()
        .map(|rec| {
            Ok(ConflictRecord {
                epoch: field(rec, 0, "epoch")?,
                task_a: field(rec, 1, "task_a")?,
                task_b: field(rec, 2, "task_b")?,
                cos: field(rec, 3, "cos")?,
            })
        })
        .collect()
}
