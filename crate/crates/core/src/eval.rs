//! Cross-validation with replication, per-epoch downsampling and
//! accuracy/AUC metrics.
//!
//! Seeds: replication `r` assigns folds with `derive(seed, "folds", [r])`;
//! the model of fold `f` in replication `r` is seeded with
//! `derive(seed, "model", [r, f])`, and its epoch `e` shuffles with
//! `derive(model_seed, "epoch", [e])` and downsamples with
//! `derive(model_seed, "downsample", [e])`.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, EmbeddingMatrix};
use crate::groups::GroupTable;
use crate::model::{ModelConfig, Trainer};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Auc,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Auc => "auc",
        }
    }
}

/// Partitions `labels` into `k` folds of ascending indices.
///
/// Stratified splitting shuffles each class separately and deals its
/// members round-robin, carrying the fold cursor from one class to the
/// next, so fold sizes differ by at most one and per-class counts too.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64, stratified: bool) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    if labels.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} items cannot fill {k} folds",
            labels.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut folds = vec![Vec::new(); k];
    let mut cursor = 0;
    let mut deal = |order: Vec<usize>, folds: &mut Vec<Vec<usize>>| {
        for i in order {
            folds[cursor % k].push(i);
            cursor += 1;
        }
    };
    if stratified {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut by_class = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class[y].push(i);
        }
        for (c, mut members) in by_class.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            if members.len() < k {
                return Err(Error::InvalidArgument(format!(
                    "class {c} has {} items, fewer than {k} folds",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            deal(members, &mut folds);
        }
    } else {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        deal(all, &mut folds);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Balances `indices` by keeping every item of the smallest class and
/// sampling the other classes without replacement down to that count.
/// The result keeps the input order.
pub fn downsample(indices: &[usize], labels: &[usize], seed: u64) -> Result<Vec<usize>> {
    let classes = indices.iter().map(|&i| labels[i]).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (pos, &i) in indices.iter().enumerate() {
        by_class[labels[i]].push(pos);
    }
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|c| !c.is_empty()).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument("downsampling needs at least two classes".into()));
    }
    let target = present.iter().map(|c| c.len()).min().expect("two classes");
    let mut rng = seed::rng(seed);
    let mut keep = vec![false; indices.len()];
    for members in by_class.iter().filter(|c| !c.is_empty()) {
        if members.len() == target {
            members.iter().for_each(|&p| keep[p] = true);
        } else {
            for p in rand::seq::index::sample(&mut rng, members.len(), target) {
                keep[members[p]] = true;
            }
        }
    }
    Ok(indices
        .iter()
        .zip(keep)
        .filter_map(|(&i, k)| k.then_some(i))
        .collect())
}

pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Empty("no predictions to score".into()));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Area under the ROC curve of `scores` for `positive[i]` items, via the
/// rank-sum statistic with average ranks for ties.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} gold labels",
            scores.len(),
            positive.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as u64;
    let n_neg = positive.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share the average (start + 1 + end) / 2.
        let twice_avg = (start + 1 + end) as u64;
        let pos_in_tie = order[start..end].iter().filter(|&&i| positive[i]).count() as u64;
        twice_rank_sum += pos_in_tie * twice_avg;
        start = end;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Cross-validation protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub folds: usize,
    pub replications: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub metric: Metric,
    pub downsample: bool,
    pub stratified: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            folds: 10,
            replications: 5,
            epochs: 20,
            batch_size: 50,
            seed: 0,
            metric: Metric::Accuracy,
            downsample: false,
            stratified: true,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Training schedule of a single model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub downsample: bool,
}

/// Trains on `train` indices of `data` and returns the training-set loss
/// (without dropout) after each epoch.
pub fn fit(
    trainer: &mut Trainer,
    data: &Dataset,
    train: &[usize],
    schedule: Schedule,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Empty("no training documents".into()));
    }
    let model_seed = trainer.config.seed;
    let mut losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let e = epoch as u64;
        let mut order = if schedule.downsample {
            downsample(train, &data.labels, seed::derive(model_seed, "downsample", &[e]))?
        } else {
            train.to_vec()
        };
        order.shuffle(&mut seed::rng(seed::derive(model_seed, "epoch", &[e])));
        for chunk in order.chunks(schedule.batch_size) {
            let batch: Vec<(&[usize], usize)> = chunk
                .iter()
                .map(|&i| (data.documents[i].as_slice(), data.labels[i]))
                .collect();
            trainer.train_step(&batch)?;
        }
        let loss = training_loss(trainer, data, train)?;
        on_epoch(epoch, loss);
        losses.push(loss);
    }
    Ok(losses)
}

fn training_loss(trainer: &Trainer, data: &Dataset, items: &[usize]) -> Result<f64> {
    let batch: Vec<(&[usize], usize)> = items
        .iter()
        .map(|&i| (data.documents[i].as_slice(), data.labels[i]))
        .collect();
    trainer.evaluate_loss(&batch)
}

/// Scores `model` on the `test` indices.
pub fn score(trainer: &Trainer, data: &Dataset, test: &[usize], metric: Metric) -> Result<f64> {
    let docs: Vec<&[usize]> = test.iter().map(|&i| data.documents[i].as_slice()).collect();
    let preds = trainer.predict(&docs)?;
    let gold: Vec<usize> = test.iter().map(|&i| data.labels[i]).collect();
    match metric {
        Metric::Accuracy => {
            let labels: Vec<usize> = preds.iter().map(|p| p.label).collect();
            accuracy(&labels, &gold)
        }
        Metric::Auc => {
            let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
            let positive: Vec<bool> = gold.iter().map(|&g| g == 1).collect();
            auc(&scores, &positive)
        }
    }
}

/// Inputs shared by every fold.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub dataset: Dataset,
    pub pretrained: EmbeddingMatrix,
    pub groups: Option<GroupTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldRecord {
    pub replication: usize,
    pub fold: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub model_seed: u64,
    pub final_loss: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub fold_seed: u64,
    /// Mean of the fold values.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config_echo: String,
    pub metric: Metric,
    pub folds: Vec<FoldRecord>,
    pub replications: Vec<ReplicationRecord>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean, min and max of a non-empty slice.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

struct FoldTask {
    replication: usize,
    fold: usize,
    train: Vec<usize>,
    test: Vec<usize>,
}

fn run_fold(
    task: &FoldTask,
    data: &ExperimentData,
    template: &ModelConfig,
    protocol: &Protocol,
) -> Result<FoldRecord> {
    let model_seed = seed::derive(protocol.seed, "model", &[task.replication as u64, task.fold as u64]);
    let config = ModelConfig {
        seed: model_seed,
        num_classes: data.dataset.num_classes().max(2),
        ..template.clone()
    };
    let mut trainer = Trainer::new(config, &data.pretrained, data.groups.as_ref())?;
    let schedule = Schedule {
        epochs: protocol.epochs,
        batch_size: protocol.batch_size,
        downsample: protocol.downsample,
    };
    let losses = fit(&mut trainer, &data.dataset, &task.train, schedule, |e, l| {
        log::debug!(
            "rep {} fold {} epoch {}: loss {l:.6}",
            task.replication + 1,
            task.fold + 1,
            e + 1
        )
    })?;
    let value = score(&trainer, &data.dataset, &task.test, protocol.metric)?;
    Ok(FoldRecord {
        replication: task.replication,
        fold: task.fold,
        train_size: task.train.len(),
        test_size: task.test.len(),
        model_seed,
        final_loss: *losses.last().expect("at least one epoch"),
        value,
    })
}

/// Runs `R × k` cross-validation. `jobs` caps the number of folds trained
/// concurrently; results do not depend on it.
pub fn run_experiment(
    data: &ExperimentData,
    template: &ModelConfig,
    protocol: &Protocol,
    config_echo: &str,
    jobs: usize,
) -> Result<ExperimentReport> {
    protocol.validate()?;
    template.validate()?;
    let labels = &data.dataset.labels;
    let mut tasks = Vec::new();
    let mut fold_seeds = Vec::new();
    for r in 0..protocol.replications {
        let fold_seed = seed::derive(protocol.seed, "folds", &[r as u64]);
        fold_seeds.push(fold_seed);
        let folds = kfold_split(labels, protocol.folds, fold_seed, protocol.stratified)?;
        for (f, test) in folds.iter().enumerate() {
            let train: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|&(g, _)| g != f)
                .flat_map(|(_, items)| items.iter().copied())
                .collect();
            tasks.push(FoldTask {
                replication: r,
                fold: f,
                train,
                test: test.clone(),
            });
        }
    }

    let results: Vec<Mutex<Option<Result<FoldRecord>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let t = next.fetch_add(1, Ordering::SeqCst);
        let Some(task) = tasks.get(t) else { break };
        let out = run_fold(task, data, template, protocol).map_err(|e| {
            Error::InvalidArgument(format!(
                "replication {} fold {}: {e}",
                task.replication + 1,
                task.fold + 1
            ))
        });
        let failed = out.is_err();
        *results[t].lock().expect("result slot") = Some(out);
        if failed {
            next.store(tasks.len(), Ordering::SeqCst);
        }
    };
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }

    let mut folds = Vec::with_capacity(tasks.len());
    for slot in results {
        match slot.into_inner().expect("result slot") {
            Some(Ok(rec)) => folds.push(rec),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    if folds.len() != tasks.len() {
        return Err(Error::InvalidArgument("experiment aborted before all folds ran".into()));
    }

    let replications: Vec<ReplicationRecord> = (0..protocol.replications)
        .map(|r| {
            let values: Vec<f64> = folds.iter().filter(|f| f.replication == r).map(|f| f.value).collect();
            ReplicationRecord {
                replication: r,
                fold_seed: fold_seeds[r],
                value: summarize(&values).0,
            }
        })
        .collect();
    let per_rep: Vec<f64> = replications.iter().map(|r| r.value).collect();
    let (mean, min, max) = summarize(&per_rep);
    Ok(ExperimentReport {
        config_echo: config_echo.to_string(),
        metric: protocol.metric,
        folds,
        replications,
        mean,
        min,
        max,
    })
}

impl ExperimentReport {
    /// Structured text: commented config echo, one line per fold, one per
    /// replication, then a `key=value` aggregate block.
    pub fn render(&self) -> String {
        let m = self.metric.as_str();
        let mut out = String::new();
        out.push_str("# experiment report\n");
        for line in self.config_echo.lines() {
            let _ = writeln!(out, "# {line}");
        }
        out.push_str("\n[folds]\n");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "replication={} fold={} train={} test={} model_seed={} final_loss={:.6} {m}={:.6}",
                f.replication + 1,
                f.fold + 1,
                f.train_size,
                f.test_size,
                f.model_seed,
                f.final_loss,
                f.value
            );
        }
        out.push_str("\n[replications]\n");
        for r in &self.replications {
            let _ = writeln!(
                out,
                "replication={} fold_seed={} {m}={:.6}",
                r.replication + 1,
                r.fold_seed,
                r.value
            );
        }
        out.push_str("\n[summary]\n");
        let _ = writeln!(out, "metric={m}");
        let _ = writeln!(out, "replications={}", self.replications.len());
        let _ = writeln!(out, "fold_records={}", self.folds.len());
        let _ = writeln!(out, "mean={:.6}", self.mean);
        let _ = writeln!(out, "min={:.6}", self.min);
        let _ = writeln!(out, "max={:.6}", self.max);
        out
    }
}
