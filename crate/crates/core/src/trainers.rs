//! End-to-end loss assembly and the three training engines.
//!
//! Every engine minimizes the mean over anchors of `D(p(.|i) || q(.|i))`:
//!
//! - [`run_sne`]: `p` from perplexity-calibrated Gaussians on the inputs, `q`
//!   from the kernel on a free or encoder-produced low-dimensional embedding.
//!   Full batch.
//! - [`run_cluster`]: `p` from a k-nearest-neighbor graph on the inputs, `q`
//!   from cluster-probability overlap of a linear softmax head. Mini-batched,
//!   with `p` restricted to the batch and renormalized.
//! - [`run_supcon`]: `p` uniform over same-label batch members, `q` from the
//!   kernel on encoder outputs. Class-balanced mini-batches.
//!
//! Each run returns a [`TrainReport`] with per-step loss and per-tensor
//! gradient norms (taken before any clipping) plus metric snapshots.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::divergence::Divergence;
use crate::error::{Error, Result};
use crate::evaluation::{self, argmax_rows, holdout_split, select, select_rows};
use crate::kernels::{
    self, ClusterPass, KernelFamily, KernelPass, KernelSpec, NeighborhoodDistribution,
};
use crate::model::{Adam, ClusterHead, Encoder, EncoderKind, FreeEmbedding, Model, Parameters};
use crate::rng::SeededRng;
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sne,
    Cluster,
    Supcon,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sne => "sne",
            Task::Cluster => "cluster",
            Task::Supcon => "supcon",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sne" => Ok(Task::Sne),
            "cluster" => Ok(Task::Cluster),
            "supcon" => Ok(Task::Supcon),
            _ => Err(Error::Config(format!(
                "unknown task {s:?}; expected sne, cluster or supcon"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SneMode {
    /// Optimize the embedding table directly.
    Free,
    /// Embedding produced by an encoder applied to the inputs.
    Parametric,
}

/// Default kernel scale per task and family.
pub fn default_scale(task: Task, family: KernelFamily) -> f64 {
    match (task, family) {
        (Task::Supcon, KernelFamily::Angular) => 10.0,
        _ => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub task: Task,
    pub divergence: Divergence,
    pub kernel: KernelSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// SNE input-side perplexity.
    pub perplexity: f64,
    /// Neighbors per point in the clustering supervisory graph.
    pub k: usize,
    /// Cluster count for the clustering head.
    pub clusters: usize,
    pub out_dim: usize,
    pub hidden: usize,
    pub encoder: EncoderKind,
    pub mode: SneMode,
    /// Standard deviation of the free-embedding initialization.
    pub init_std: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Steps between metric snapshots; the final step always gets one.
    pub metric_every: usize,
    /// Neighbors for snapshot kNN accuracy, capped at the training-split size.
    pub knn_k: usize,
    /// Collapse is flagged when the windowed validation accuracy falls below
    /// `collapse_low x chance` after having exceeded `collapse_high x chance`.
    pub collapse_low: f64,
    pub collapse_high: f64,
    pub collapse_window: usize,
}

impl LossConfig {
    pub fn new(task: Task, divergence: Divergence) -> Self {
        let family = match task {
            Task::Supcon => KernelFamily::Angular,
            _ => KernelFamily::Distance,
        };
        LossConfig {
            task,
            divergence,
            kernel: KernelSpec {
                family,
                scale: default_scale(task, family),
            },
            batch_size: 256,
            epochs: 100,
            lr: 1e-3,
            seed: 0,
            perplexity: 30.0,
            k: 10,
            clusters: 10,
            out_dim: if task == Task::Supcon { 16 } else { 2 },
            hidden: 64,
            encoder: EncoderKind::Mlp1,
            mode: SneMode::Free,
            init_std: 1e-2,
            clip_norm: None,
            metric_every: 10,
            knn_k: 7,
            collapse_low: 1.5,
            collapse_high: 3.0,
            collapse_window: 3,
        }
    }

    pub fn with_kernel(mut self, family: KernelFamily) -> Self {
        self.kernel = KernelSpec {
            family,
            scale: default_scale(self.task, family),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 4 {
            return bad(format!("batch_size must be >= 4, got {}", self.batch_size));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite value >= 0, got {}", self.lr));
        }
        if !(self.kernel.scale > 0.0 && self.kernel.scale.is_finite()) {
            return bad(format!("kernel scale must be > 0, got {}", self.kernel.scale));
        }
        if self.out_dim < 1 || self.hidden < 1 {
            return bad("out_dim and hidden must be >= 1".into());
        }
        if self.metric_every < 1 || self.knn_k < 1 || self.collapse_window < 1 {
            return bad("metric_every, knn_k and collapse_window must be >= 1".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        match self.task {
            Task::Sne if !(self.perplexity >= 2.0) => {
                bad(format!("perplexity must be >= 2, got {}", self.perplexity))
            }
            Task::Cluster if self.clusters < 2 => {
                bad(format!("clusters must be >= 2, got {}", self.clusters))
            }
            Task::Cluster if self.k < 1 => bad("k must be >= 1".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub loss: f64,
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSnapshot {
    /// Index of the last completed step.
    pub step: usize,
    pub values: Vec<(String, f64)>,
}

impl MetricSnapshot {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub task: Task,
    pub divergence: Divergence,
    pub tensor_names: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<MetricSnapshot>,
    pub collapsed: bool,
}

impl TrainReport {
    fn new(task: Task, divergence: Divergence, names: Vec<&'static str>) -> Self {
        TrainReport {
            task,
            divergence,
            tensor_names: names.into_iter().map(String::from).collect(),
            steps: Vec::new(),
            snapshots: Vec::new(),
            collapsed: false,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Global gradient norm per step (l2 over all tensors).
    pub fn total_grad_norms(&self) -> Vec<f64> {
        self.steps
            .iter()
            .map(|s| s.grad_norms.iter().map(|g| g * g).sum::<f64>().sqrt())
            .collect()
    }

    /// Metric names in order of first appearance.
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for s in &self.snapshots {
            for (n, _) in &s.values {
                if !names.contains(n) {
                    names.push(n.clone());
                }
            }
        }
        names
    }

    pub fn final_metric(&self, name: &str) -> Option<f64> {
        self.snapshots.iter().rev().find_map(|s| s.get(name))
    }
}

/// Spike summary of one gradient-norm series over its first `window` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeStats {
    pub tensor: String,
    pub max: f64,
    pub median: f64,
    /// `max / median`.
    pub ratio: f64,
}

pub const SPIKE_WINDOW: usize = 50;

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Max, median and max/median of a series over its first `window` entries.
pub fn spike_stats(series: &[f64], window: usize) -> (f64, f64, f64) {
    let mut w: Vec<f64> = series.iter().take(window.max(1)).copied().collect();
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let med = median(&mut w);
    (max, med, max / med)
}

/// Spike statistics per parameter tensor, followed by one entry named
/// `total` for the global norm.
pub fn grad_norm_series(report: &TrainReport, window: usize) -> Result<Vec<SpikeStats>> {
    if report.steps.is_empty() {
        return Err(Error::Precondition("report has no steps".into()));
    }
    let mut out = Vec::with_capacity(report.tensor_names.len() + 1);
    for (t, name) in report.tensor_names.iter().enumerate() {
        let series: Vec<f64> = report.steps.iter().map(|s| s.grad_norms[t]).collect();
        let (max, median, ratio) = spike_stats(&series, window);
        out.push(SpikeStats {
            tensor: name.clone(),
            max,
            median,
            ratio,
        });
    }
    let (max, median, ratio) = spike_stats(&report.total_grad_norms(), window);
    out.push(SpikeStats {
        tensor: "total".into(),
        max,
        median,
        ratio,
    });
    Ok(out)
}

/// Mean row divergence between `p` and `q`, and `dL/dq` (zero diagonal).
pub fn loss_and_grad(
    divergence: Divergence,
    p: &NeighborhoodDistribution,
    q: &NeighborhoodDistribution,
) -> Result<(f64, Matrix)> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!(
            "p has {} rows, q has {}",
            p.len(),
            q.len()
        )));
    }
    let n = p.len();
    let inv = 1.0 / n as f64;
    let (pm, qm) = (p.matrix(), q.matrix());
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        let (pr, qr) = (pm.row(i), qm.row(i));
        let (ps, qs) = (
            pr.as_slice().expect("standard layout"),
            qr.as_slice().expect("standard layout"),
        );
        loss += divergence.value(ps, qs);
        for j in 0..n {
            if j != i {
                grad[[i, j]] = inv * divergence.grad_entry(ps[j], qs[j]);
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Loss and gradient of a full assembly with respect to each parameter tensor.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: Vec<Matrix>,
}

/// Kernel-based loss on an embedding `z`: returns the loss and `dL/dz`.
pub fn kernel_loss(
    divergence: Divergence,
    p: &NeighborhoodDistribution,
    kernel: &KernelSpec,
    z: &Matrix,
) -> Result<(f64, Matrix)> {
    let pass = KernelPass::forward(z, kernel)?;
    let (loss, g) = loss_and_grad(divergence, p, pass.q())?;
    Ok((loss, pass.backward(z, &g)?))
}

/// Kernel-based loss on `encoder(x)`, with gradients for every encoder tensor.
pub fn encoder_loss(
    divergence: Divergence,
    p: &NeighborhoodDistribution,
    kernel: &KernelSpec,
    encoder: &Encoder,
    x: &Matrix,
) -> Result<Evaluation> {
    let z = encoder.forward(x)?;
    let (loss, dz) = kernel_loss(divergence, p, kernel, &z)?;
    Ok(Evaluation {
        loss,
        grads: encoder.backward(x, &dz)?.params,
    })
}

/// Cluster-overlap loss for `head` on `x`, with gradients for the head.
pub fn cluster_loss(
    divergence: Divergence,
    p: &NeighborhoodDistribution,
    head: &ClusterHead,
    x: &Matrix,
) -> Result<Evaluation> {
    let phi = head.forward(x)?;
    let pass = ClusterPass::forward(&phi)?;
    let (loss, g) = loss_and_grad(divergence, p, pass.q())?;
    let dphi = pass.backward(&phi, &g)?;
    Ok(Evaluation {
        loss,
        grads: head.backward(x, &dphi)?.params,
    })
}

fn l2(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Checks the loss, records it with the raw gradient norms, then applies the
/// optional clipping.
fn record_step(
    report: &mut TrainReport,
    config: &LossConfig,
    loss: f64,
    grads: &mut [Matrix],
) -> Result<()> {
    let step = report.steps.len();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            divergence: config.divergence,
        });
    }
    let grad_norms: Vec<f64> = grads.iter().map(l2).collect();
    if let Some(limit) = config.clip_norm {
        let total = grad_norms.iter().map(|g| g * g).sum::<f64>().sqrt();
        if total > limit {
            let s = limit / total;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * s));
        }
    }
    report.steps.push(StepRecord { loss, grad_norms });
    Ok(())
}

/// Inside a training loop, inputs are already validated, so a domain error
/// from the loss can only mean the parameters blew up.
fn at_step<T>(r: Result<T>, step: usize, divergence: Divergence) -> Result<T> {
    r.map_err(|e| match e {
        Error::Domain(msg) => {
            log::debug!("step {step}: {msg}");
            Error::NonFiniteLoss { step, divergence }
        }
        other => other,
    })
}

fn optimizer_step(
    adam: &mut Adam,
    params: Vec<&mut Matrix>,
    grads: &[Matrix],
    step: usize,
    divergence: Divergence,
) -> Result<()> {
    adam.step(params, grads).map_err(|e| match e {
        Error::NonFiniteGradient { .. } => Error::NonFiniteLoss { step, divergence },
        other => other,
    })
}

fn snapshot_due(config: &LossConfig, step: usize, total: usize) -> bool {
    let done = step + 1;
    done == total || done.is_multiple_of(config.metric_every)
}

/// `k` for snapshot kNN metrics, capped at the training-split size.
fn snapshot_k(config: &LossConfig, n: usize) -> usize {
    config.knn_k.min(holdout_split(n).0.len()).max(1)
}

fn embedding_metrics(z: &Matrix, labels: &[usize], knn_k: usize) -> Result<Vec<(String, f64)>> {
    Ok(vec![
        ("knn".into(), evaluation::holdout_knn_accuracy(z, labels, knn_k)?),
        ("silhouette".into(), evaluation::silhouette(z, labels)?),
    ])
}

#[derive(Debug, Clone)]
pub struct SneOutcome {
    pub report: TrainReport,
    pub embedding: Matrix,
    pub model: Model,
}

/// SNE with the configured divergence. `init` replaces the random
/// free-embedding initialization. With `labels`, snapshots record held-out
/// kNN accuracy and silhouette of the embedding.
pub fn run_sne(
    config: &LossConfig,
    x: &Matrix,
    labels: Option<&[usize]>,
    init: Option<Matrix>,
) -> Result<SneOutcome> {
    config.validate()?;
    let n = x.nrows();
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Dimension(format!("{n} rows but {} labels", l.len())));
        }
    }
    let p = kernels::supervisory_sne(x, config.perplexity)?;
    let mut rng = SeededRng::new(config.seed);
    let mut adam = Adam::new(config.lr);
    let total = config.epochs;
    let (div, kernel) = (config.divergence, config.kernel);

    let mut model = match config.mode {
        SneMode::Free => {
            let table = match init {
                Some(t) => {
                    if t.nrows() != n {
                        return Err(Error::Dimension(format!(
                            "initial embedding has {} rows, data has {n}",
                            t.nrows()
                        )));
                    }
                    t
                }
                None => FreeEmbedding::init(n, config.out_dim, config.init_std, &mut rng).table,
            };
            Model::Free(FreeEmbedding { table })
        }
        SneMode::Parametric => Model::Encoder(Encoder::init(
            config.encoder,
            x.ncols(),
            config.hidden,
            config.out_dim,
            &mut rng,
        )),
    };
    let names = match &model {
        Model::Free(m) => m.tensor_names(),
        Model::Encoder(m) => m.tensor_names(),
        Model::ClusterHead(_) => unreachable!(),
    };
    let mut report = TrainReport::new(Task::Sne, div, names);

    let embed = |model: &Model| -> Result<Matrix> {
        match model {
            Model::Free(m) => Ok(m.table.clone()),
            Model::Encoder(e) => e.forward(x),
            Model::ClusterHead(_) => unreachable!(),
        }
    };

    for step in 0..total {
        let (loss, mut grads) = match &model {
            Model::Free(m) => {
                let (loss, dz) = at_step(kernel_loss(div, &p, &kernel, &m.table), step, div)?;
                (loss, vec![dz])
            }
            Model::Encoder(e) => {
                let ev = at_step(encoder_loss(div, &p, &kernel, e, x), step, div)?;
                (ev.loss, ev.grads)
            }
            Model::ClusterHead(_) => unreachable!(),
        };
        record_step(&mut report, config, loss, &mut grads)?;
        let params = match &mut model {
            Model::Free(m) => m.tensors_mut(),
            Model::Encoder(e) => e.tensors_mut(),
            Model::ClusterHead(_) => unreachable!(),
        };
        optimizer_step(&mut adam, params, &grads, step, div)?;
        if let (Some(l), true) = (labels, snapshot_due(config, step, total)) {
            let z = embed(&model)?;
            report.snapshots.push(MetricSnapshot {
                step,
                values: embedding_metrics(&z, l, snapshot_k(config, n))?,
            });
        }
    }
    let embedding = embed(&model)?;
    if !embedding.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: total,
            divergence: div,
        });
    }
    Ok(SneOutcome {
        report,
        embedding,
        model,
    })
}

/// Shuffled index batches covering `0..n`. A trailing batch smaller than 4
/// is merged into the one before it. `batch >= n` gives one ordered batch.
fn epoch_batches(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if batch >= n {
        return vec![idx];
    }
    rng.shuffle(&mut idx);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 4) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    batches
}

/// The supervisory `p` restricted to `idx`. Rows that keep no mass fall back
/// to a uniform row over their `k` nearest batch members.
pub fn batch_knn_distribution(
    p: &NeighborhoodDistribution,
    x: &Matrix,
    idx: &[usize],
    k: usize,
) -> NeighborhoodDistribution {
    let xb = select_rows(x, idx);
    let kb = k.min(idx.len() - 1);
    p.restrict(idx, |a| {
        let d: Vec<f64> = (0..idx.len())
            .map(|c| {
                let diff = &xb.row(a) - &xb.row(c);
                diff.dot(&diff)
            })
            .collect();
        let d = Array2::from_shape_vec((1, d.len()), d).expect("one row");
        let mut order: Vec<usize> = (0..idx.len()).filter(|&c| c != a).collect();
        order.sort_by(|&u, &v| d[[0, u]].total_cmp(&d[[0, v]]).then(u.cmp(&v)));
        let mut row = vec![0.0; idx.len()];
        for &c in order.iter().take(kb) {
            row[c] = 1.0 / kb as f64;
        }
        row
    })
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub report: TrainReport,
    pub assignments: Matrix,
    pub head: ClusterHead,
}

impl ClusterOutcome {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.assignments)
    }
}

/// Cluster-overlap training of a linear softmax head against a fixed
/// k-nearest-neighbor graph. `init` replaces the random head. With `labels`,
/// snapshots record Hungarian accuracy of the argmax assignment.
pub fn run_cluster(
    config: &LossConfig,
    x: &Matrix,
    labels: Option<&[usize]>,
    init: Option<ClusterHead>,
) -> Result<ClusterOutcome> {
    config.validate()?;
    let n = x.nrows();
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Dimension(format!("{n} rows but {} labels", l.len())));
        }
    }
    let p = kernels::supervisory_knn(x, config.k)?;
    let mut rng = SeededRng::new(config.seed);
    let mut head = match init {
        Some(h) => {
            if h.input_dim() != x.ncols() {
                return Err(Error::Dimension(format!(
                    "head expects {} features, data has {}",
                    h.input_dim(),
                    x.ncols()
                )));
            }
            h
        }
        None => ClusterHead::init(x.ncols(), config.clusters, &mut rng),
    };
    let mut adam = Adam::new(config.lr);
    let mut report = TrainReport::new(Task::Cluster, config.divergence, head.tensor_names());
    let per_epoch = epoch_batches(n, config.batch_size, &mut rng.clone()).len();
    let total = config.epochs * per_epoch;
    let mut step = 0;
    for _ in 0..config.epochs {
        for idx in epoch_batches(n, config.batch_size, &mut rng) {
            let xb = select_rows(x, &idx);
            let pb = if idx.len() == n {
                p.clone()
            } else {
                batch_knn_distribution(&p, x, &idx, config.k)
            };
            let ev = cluster_loss(config.divergence, &pb, &head, &xb).map_err(|e| match e {
                Error::DegenerateRow { row } => Error::DegenerateRow { row: idx[row] },
                other => other,
            });
            let ev = at_step(ev, step, config.divergence)?;
            let mut grads = ev.grads;
            record_step(&mut report, config, ev.loss, &mut grads)?;
            optimizer_step(&mut adam, head.tensors_mut(), &grads, step, config.divergence)?;
            if let (Some(l), true) = (labels, snapshot_due(config, step, total)) {
                let pred = argmax_rows(&head.forward(x)?);
                report.snapshots.push(MetricSnapshot {
                    step,
                    values: vec![("hungarian".into(), evaluation::hungarian_accuracy(&pred, l)?)],
                });
            }
            step += 1;
        }
    }
    let assignments = head.forward(x)?;
    Ok(ClusterOutcome {
        report,
        assignments,
        head,
    })
}

/// Class-balanced batches: each batch holds `per_class` members of every
/// class, drawn from per-class shuffled queues that reshuffle when exhausted.
struct BalancedSampler {
    queues: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    per_class: usize,
}

impl BalancedSampler {
    fn new(members: Vec<Vec<usize>>, batch_size: usize, rng: &mut SeededRng) -> Result<Self> {
        let classes = members.len();
        let per_class = batch_size / classes.max(1);
        if per_class < 2 {
            return Err(Error::Config(format!(
                "batch_size {batch_size} leaves fewer than 2 samples per class for {classes} classes"
            )));
        }
        for (c, m) in members.iter().enumerate() {
            if m.len() < 2 {
                return Err(Error::SingletonClass { class: c });
            }
        }
        let mut queues = members;
        for q in &mut queues {
            rng.shuffle(q);
        }
        let cursors = vec![0; queues.len()];
        Ok(BalancedSampler {
            queues,
            cursors,
            per_class,
        })
    }

    fn next_batch(&mut self, rng: &mut SeededRng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.per_class * self.queues.len());
        for (q, cur) in self.queues.iter_mut().zip(self.cursors.iter_mut()) {
            let take = self.per_class.min(q.len());
            if *cur + take > q.len() {
                rng.shuffle(q);
                *cur = 0;
            }
            batch.extend_from_slice(&q[*cur..*cur + take]);
            *cur += take;
        }
        batch
    }
}

#[derive(Debug, Clone)]
pub struct SupconOutcome {
    pub report: TrainReport,
    pub encoder: Encoder,
}

/// Supervised contrastive training of an encoder on the training part of
/// [`evaluation::holdout_split`]. Snapshots record held-out kNN accuracy,
/// which also drives the collapse flag.
pub fn run_supcon(config: &LossConfig, x: &Matrix, labels: &[usize]) -> Result<SupconOutcome> {
    config.validate()?;
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} rows but {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if classes < 2 {
        return Err(Error::Precondition("supcon needs at least 2 classes".into()));
    }
    let (train, _) = holdout_split(n);
    let mut members = vec![Vec::new(); classes];
    for &i in &train {
        members[labels[i]].push(i);
    }
    let mut rng = SeededRng::new(config.seed);
    let mut encoder = Encoder::init(
        config.encoder,
        x.ncols(),
        config.hidden,
        config.out_dim,
        &mut rng,
    );
    let mut sampler = BalancedSampler::new(members, config.batch_size, &mut rng)?;
    let per_epoch = (train.len() / (sampler.per_class * classes)).max(1);
    let total = config.epochs * per_epoch;
    let mut adam = Adam::new(config.lr);
    let mut report = TrainReport::new(Task::Supcon, config.divergence, encoder.tensor_names());
    let chance = 1.0 / classes as f64;
    let mut window: Vec<f64> = Vec::new();
    let mut peaked = false;

    for step in 0..total {
        let idx = sampler.next_batch(&mut rng);
        let yb = select(labels, &idx);
        let p = kernels::supervisory_labels(&yb)?;
        let xb = select_rows(x, &idx);
        let ev = at_step(
            encoder_loss(config.divergence, &p, &config.kernel, &encoder, &xb),
            step,
            config.divergence,
        )?;
        let mut grads = ev.grads;
        record_step(&mut report, config, ev.loss, &mut grads)?;
        optimizer_step(&mut adam, encoder.tensors_mut(), &grads, step, config.divergence)?;
        if snapshot_due(config, step, total) {
            let z = encoder.forward(x)?;
            let acc = evaluation::holdout_knn_accuracy(&z, labels, snapshot_k(config, n))?;
            window.push(acc);
            if window.len() > config.collapse_window {
                window.remove(0);
            }
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            if avg > config.collapse_high * chance {
                peaked = true;
            } else if peaked && avg < config.collapse_low * chance && !report.collapsed {
                log::info!("collapse detected at step {step}: windowed kNN accuracy {avg:.3}");
                report.collapsed = true;
            }
            report.snapshots.push(MetricSnapshot {
                step,
                values: vec![("knn".into(), acc)],
            });
        }
    }
    Ok(SupconOutcome { report, encoder })
}
