//! A k-nearest-neighbor fingerprinting attack and the experiments used to
//! score defenses against it.
//!
//! Traces are reduced to a fixed feature vector (volumes, duration, burst
//! statistics, the direction prefix and inter-arrival deciles), compared
//! with L1 distance after min-max scaling fitted on the training split, and
//! classified by neighbor vote. Packet kinds are ignored throughout: the
//! adversary cannot tell dummies from real cells.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitting::empirical_quantile;
use crate::traces::{interarrival_times, Corpus, Direction, DirectionFilter, Trace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trace is empty")]
    EmptyTrace,
    #[error("invalid k={k} for {train} training points (threshold {threshold})")]
    InvalidK { k: usize, train: usize, threshold: usize },
    #[error("label {label:?} has {found} instances, need at least {needed}")]
    InsufficientInstances { label: String, needed: usize, found: usize },
    #[error("need {needed} background traces, have {found}")]
    InsufficientBackground { needed: usize, found: usize },
    #[error("no positive instances")]
    NoPositives,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Label used for every non-monitored page in open-world experiments.
pub const NON_MONITORED: &str = "__non_monitored__";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Largest pause, in seconds, between packets of one burst.
    pub burst_gap: f64,
    /// Number of leading packet directions kept.
    pub sign_prefix: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { burst_gap: 0.05, sign_prefix: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Default)]
struct BurstStats {
    count: f64,
    total: f64,
    max: f64,
}

/// Feature layout: outgoing/incoming cell counts, outgoing/incoming bytes,
/// duration, outgoing/incoming burst counts, mean burst lengths and max
/// burst lengths, then `sign_prefix` direction signs (+1 outgoing, -1
/// incoming, 0 past the end), then the nine deciles of inter-arrival times.
pub fn extract_features(trace: &Trace, cfg: &FeatureConfig) -> Result<FeatureVector, EvalError> {
    if trace.is_empty() {
        return Err(EvalError::EmptyTrace);
    }
    let events = trace.events();
    let mut cells = [0.0f64; 2];
    let mut bytes = [0.0f64; 2];
    let slot = |d: Direction| match d {
        Direction::Outgoing => 0,
        Direction::Incoming => 1,
    };
    for e in events {
        cells[slot(e.direction)] += 1.0;
        bytes[slot(e.direction)] += f64::from(e.size);
    }

    let mut bursts = [BurstStats::default(), BurstStats::default()];
    let mut run = 1.0f64;
    for i in 1..=events.len() {
        let continues = i < events.len()
            && events[i].direction == events[i - 1].direction
            && events[i].time - events[i - 1].time <= cfg.burst_gap;
        if continues {
            run += 1.0;
        } else {
            let b = &mut bursts[slot(events[i - 1].direction)];
            b.count += 1.0;
            b.total += run;
            b.max = b.max.max(run);
            run = 1.0;
        }
    }
    let mean = |b: &BurstStats| if b.count > 0.0 { b.total / b.count } else { 0.0 };

    let mut v = Vec::with_capacity(11 + cfg.sign_prefix + 9);
    v.extend_from_slice(&cells);
    v.extend_from_slice(&bytes);
    v.push(trace.duration());
    v.extend([bursts[0].count, bursts[1].count, mean(&bursts[0]), mean(&bursts[1]), bursts[0].max, bursts[1].max]);
    v.extend((0..cfg.sign_prefix).map(|i| events.get(i).map_or(0.0, |e| e.direction.sign() as f64)));
    let iat = interarrival_times(trace, DirectionFilter::Both).unwrap_or_default();
    v.extend((1..=9).map(|d| empirical_quantile(&iat, d as f64 / 10.0).unwrap_or(0.0)));
    Ok(FeatureVector(v))
}

/// A k-NN classifier over min-max scaled features with L1 distance.
#[derive(Debug, Clone)]
pub struct KnnModel {
    mins: Vec<f64>,
    spans: Vec<f64>,
    points: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl KnnModel {
    pub fn fit(train: &[(&FeatureVector, usize)]) -> Result<Self, EvalError> {
        let first = train.first().ok_or(EvalError::InvalidK { k: 0, train: 0, threshold: 0 })?;
        let dim = first.0.dim();
        if train.iter().any(|(f, _)| f.dim() != dim) {
            return Err(EvalError::InvalidParams("feature vectors differ in length".into()));
        }
        let mut mins = vec![f64::INFINITY; dim];
        let mut maxs = vec![f64::NEG_INFINITY; dim];
        for (f, _) in train {
            for (j, &x) in f.0.iter().enumerate() {
                mins[j] = mins[j].min(x);
                maxs[j] = maxs[j].max(x);
            }
        }
        let spans: Vec<f64> = mins.iter().zip(&maxs).map(|(lo, hi)| hi - lo).collect();
        let mut model = KnnModel { mins, spans, points: Vec::with_capacity(train.len()), labels: Vec::new() };
        for (f, label) in train {
            let scaled = model.scale(f);
            model.points.push(scaled);
            model.labels.push(*label);
        }
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn scale(&self, f: &FeatureVector) -> Vec<f64> {
        f.0.iter()
            .zip(self.mins.iter().zip(&self.spans))
            .map(|(&x, (&lo, &span))| if span > 0.0 { (x - lo) / span } else { 0.0 })
            .collect()
    }

    /// Labels of the `k` nearest training points, nearest first. Equal
    /// distances keep training order.
    pub fn neighbors(&self, x: &FeatureVector, k: usize) -> Result<Vec<usize>, EvalError> {
        if k == 0 || k > self.points.len() {
            return Err(EvalError::InvalidK { k, train: self.points.len(), threshold: 0 });
        }
        let q = self.scale(x);
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum(), i))
            .collect();
        dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dist.truncate(k);
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(dist.into_iter().map(|(_, i)| self.labels[i]).collect())
    }

    /// Vote counts per label among the `k` nearest neighbors, highest
    /// first; ties go to the label whose first vote came from the nearer
    /// neighbor.
    pub fn votes(&self, x: &FeatureVector, k: usize) -> Result<Vec<(usize, usize)>, EvalError> {
        Ok(tally(&self.neighbors(x, k)?))
    }

    /// The plurality label if it has at least `threshold` votes.
    pub fn classify(&self, x: &FeatureVector, k: usize, threshold: usize) -> Result<Option<usize>, EvalError> {
        if threshold == 0 || threshold > k {
            return Err(EvalError::InvalidK { k, train: self.points.len(), threshold });
        }
        let votes = self.votes(x, k)?;
        Ok(votes.first().filter(|(_, n)| *n >= threshold).map(|(label, _)| *label))
    }
}

fn tally(neighbors: &[usize]) -> Vec<(usize, usize)> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &label in neighbors {
        match counts.iter_mut().find(|(l, _)| *l == label) {
            Some(entry) => entry.1 += 1,
            None => counts.push((label, 1)),
        }
    }
    // Stable: equal counts keep first-seen (nearest) order.
    counts.sort_by_key(|c| std::cmp::Reverse(c.1));
    counts
}

/// Classifies `x` against string-labeled training vectors. `None` is a
/// reject: the plurality label fell short of `vote_threshold`.
pub fn knn_classify(
    train: &[(FeatureVector, String)],
    k: usize,
    x: &FeatureVector,
    vote_threshold: usize,
) -> Result<Option<String>, EvalError> {
    let mut names: Vec<&str> = Vec::new();
    let indexed: Vec<(&FeatureVector, usize)> = train
        .iter()
        .map(|(f, l)| {
            let id = names.iter().position(|n| n == l).unwrap_or_else(|| {
                names.push(l);
                names.len() - 1
            });
            (f, id)
        })
        .collect();
    if indexed.is_empty() {
        return Err(EvalError::InvalidK { k, train: 0, threshold: vote_threshold });
    }
    let model = KnnModel::fit(&indexed)?;
    Ok(model.classify(x, k, vote_threshold)?.map(|i| names[i].to_string()))
}

/// Settings shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k: usize,
    pub folds: usize,
    pub features: FeatureConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 5, folds: 10, features: FeatureConfig::default() }
    }
}

/// A curve and the area under it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Precision-recall curve with the random-guess baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcCurve {
    /// (recall, precision) points.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    /// Positives over total instances.
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub world_size: usize,
    pub accuracy: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub f1: f64,
    pub roc: Option<Curve>,
    pub proc: Option<ProcCurve>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "experiment,world_size,accuracy,tpr,fpr,precision,f1,roc_auc,proc_auc,proc_baseline";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.experiment,
            self.world_size,
            self.accuracy,
            self.tpr,
            self.fpr,
            self.precision,
            self.f1,
            opt(self.roc.as_ref().map(|c| c.auc)),
            opt(self.proc.as_ref().map(|c| c.auc)),
            opt(self.proc.as_ref().map(|c| c.baseline)),
        )
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Trapezoidal area under points taken in order.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Assigns each instance to one of `folds` folds so every label is spread
/// evenly. Deterministic for a seed.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut assignment = vec![0; labels.len()];
    let mut offset = 0;
    for members in by_label.values_mut() {
        members.shuffle(&mut rng);
        for (j, &i) in members.iter().enumerate() {
            assignment[i] = (j + offset) % folds;
        }
        offset += members.len();
    }
    assignment
}

/// `(label, count)` pairs, highest count first.
pub type Votes = Vec<(usize, usize)>;

/// Features and integer labels of a corpus; label ids follow
/// [`Corpus::labels`] order.
pub struct Dataset {
    pub features: Vec<FeatureVector>,
    pub labels: Vec<usize>,
    pub names: Vec<String>,
}

impl Dataset {
    pub fn from_corpus(corpus: &Corpus, cfg: &FeatureConfig) -> Result<Self, EvalError> {
        let names = corpus.labels();
        let features = corpus.traces.par_iter().map(|t| extract_features(t, cfg)).collect::<Result<Vec<_>, _>>()?;
        let labels =
            corpus.traces.iter().map(|t| names.iter().position(|n| n == t.label()).expect("label listed")).collect();
        Ok(Dataset { features, labels, names })
    }

    fn check_instances(&self, needed: usize) -> Result<(), EvalError> {
        for (id, name) in self.names.iter().enumerate() {
            let found = self.labels.iter().filter(|&&l| l == id).count();
            if found < needed {
                return Err(EvalError::InsufficientInstances { label: name.clone(), needed, found });
            }
        }
        Ok(())
    }

    /// Cross-validated neighbor votes for every instance.
    pub fn cross_validated_votes(&self, k: usize, folds: usize, seed: u64) -> Result<Vec<Votes>, EvalError> {
        if folds < 2 {
            return Err(EvalError::InvalidParams(format!("need at least 2 folds, got {folds}")));
        }
        let assignment = stratified_folds(&self.labels, folds, seed);
        let per_fold = (0..folds)
            .into_par_iter()
            .map(|fold| -> Result<Vec<(usize, Votes)>, EvalError> {
                let train: Vec<(&FeatureVector, usize)> = (0..self.labels.len())
                    .filter(|&i| assignment[i] != fold)
                    .map(|i| (&self.features[i], self.labels[i]))
                    .collect();
                if train.len() < k {
                    return Err(EvalError::InvalidK { k, train: train.len(), threshold: 0 });
                }
                let model = KnnModel::fit(&train)?;
                (0..self.labels.len())
                    .filter(|&i| assignment[i] == fold)
                    .map(|i| Ok((i, model.votes(&self.features[i], k)?)))
                    .collect()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut votes = vec![Vec::new(); self.labels.len()];
        for (i, v) in per_fold.into_iter().flatten() {
            votes[i] = v;
        }
        Ok(votes)
    }
}

/// Closed-world accuracy under stratified cross-validation. Accuracy is the
/// true positive rate; precision equals accuracy since nothing is
/// rejected, and the false positive rate is the micro-averaged
/// one-vs-rest rate `errors / (N * (classes - 1))`.
pub fn closed_world_eval(corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<EvalReport, EvalError> {
    let data = Dataset::from_corpus(corpus, &cfg.features)?;
    closed_world_on(&data, cfg, seed)
}

pub fn closed_world_on(data: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport, EvalError> {
    data.check_instances(cfg.folds)?;
    let votes = data.cross_validated_votes(cfg.k, cfg.folds, seed)?;
    let correct = votes.iter().zip(&data.labels).filter(|(v, &l)| v.first().map(|x| x.0) == Some(l)).count();
    let n = data.labels.len() as f64;
    let accuracy = correct as f64 / n;
    let classes = data.names.len() as f64;
    let fpr = if classes > 1.0 { (n - correct as f64) / (n * (classes - 1.0)) } else { 0.0 };
    Ok(EvalReport {
        experiment: "closed_world".into(),
        world_size: 0,
        accuracy,
        tpr: accuracy,
        fpr,
        precision: accuracy,
        f1: accuracy,
        roc: None,
        proc: None,
    })
}

fn monitored_score(votes: &[(usize, usize)], monitored: &[bool]) -> usize {
    votes.iter().filter(|(l, _)| monitored[*l]).map(|(_, n)| *n).max().unwrap_or(0)
}

/// ROC curve from vote scores: an instance is flagged at threshold `t` when
/// its score is at least `t`, for `t` from `k + 1` (nothing flagged) down
/// to 0 (everything flagged).
pub fn roc_curve(scores: &[usize], positives: &[bool], k: usize) -> Result<Curve, EvalError> {
    let p = positives.iter().filter(|&&x| x).count();
    let n = positives.len() - p;
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut points: Vec<(f64, f64)> = (0..=k + 1)
        .rev()
        .map(|t| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for (&s, &pos) in scores.iter().zip(positives) {
                if s >= t {
                    if pos {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            let fpr = if n > 0 { fp as f64 / n as f64 } else { 0.0 };
            (fpr, tp as f64 / p as f64)
        })
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    if points.first() != Some(&(0.0, 0.0)) {
        points.insert(0, (0.0, 0.0));
    }
    if points.last() != Some(&(1.0, 1.0)) {
        points.push((1.0, 1.0));
    }
    let auc = trapezoid(&points);
    Ok(Curve { points, auc })
}

/// Precision-recall curve from vote scores, sweeping the threshold from `k`
/// down to 0. Thresholds that flag nothing have no precision and are
/// skipped; the curve is extended flat to zero recall from its first point.
pub fn proc_curve(scores: &[usize], positives: &[bool], k: usize) -> Result<ProcCurve, EvalError> {
    let p = positives.iter().filter(|&&x| x).count();
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut points = Vec::with_capacity(k + 1);
    for t in (0..=k).rev() {
        let (mut tp, mut fp) = (0usize, 0usize);
        for (&s, &pos) in scores.iter().zip(positives) {
            if s >= t {
                if pos {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp > 0 {
            points.push((tp as f64 / p as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    let mut area_points = Vec::with_capacity(points.len() + 1);
    area_points.push((0.0, points[0].1));
    area_points.extend_from_slice(&points);
    Ok(ProcCurve { auc: trapezoid(&area_points), points, baseline: p as f64 / positives.len() as f64 })
}

/// Picks half of the labels (rounded down) as monitored, at random.
pub fn monitored_split(label_count: usize, seed: u64) -> Vec<bool> {
    let mut ids: Vec<usize> = (0..label_count).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut monitored = vec![false; label_count];
    for &i in &ids[..label_count / 2] {
        monitored[i] = true;
    }
    monitored
}

/// Splits the pages into monitored and non-monitored halves and scores each
/// cross-validated instance by the largest vote count any monitored page
/// received. Returns the ROC and precision-recall curves of that score.
pub fn roc_binarized(corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<(Curve, ProcCurve), EvalError> {
    let data = Dataset::from_corpus(corpus, &cfg.features)?;
    roc_binarized_on(&data, cfg, seed)
}

pub fn roc_binarized_on(data: &Dataset, cfg: &EvalConfig, seed: u64) -> Result<(Curve, ProcCurve), EvalError> {
    let labels = data.names.len();
    if labels < 4 || !labels.is_multiple_of(2) {
        return Err(EvalError::InvalidParams(format!("need an even number of at least 4 labels, got {labels}")));
    }
    data.check_instances(cfg.folds)?;
    let monitored = monitored_split(labels, seed);
    let votes = data.cross_validated_votes(cfg.k, cfg.folds, seed)?;
    let scores: Vec<usize> = votes.iter().map(|v| monitored_score(v, &monitored)).collect();
    let positives: Vec<bool> = data.labels.iter().map(|&l| monitored[l]).collect();
    Ok((roc_curve(&scores, &positives, cfg.k)?, proc_curve(&scores, &positives, cfg.k)?))
}

/// Closed-world accuracy plus the binarized ROC and precision-recall
/// curves, on one set of features.
pub fn evaluate_corpus(corpus: &Corpus, cfg: &EvalConfig, seed: u64) -> Result<EvalReport, EvalError> {
    let data = Dataset::from_corpus(corpus, &cfg.features)?;
    let mut report = closed_world_on(&data, cfg, seed)?;
    let (roc, proc) = roc_binarized_on(&data, cfg, seed)?;
    report.experiment = "closed_world_binarized".into();
    report.roc = Some(roc);
    report.proc = Some(proc);
    Ok(report)
}

/// Open-world settings: neighbors, required votes, and folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenWorldConfig {
    pub k: usize,
    pub vote_threshold: usize,
    pub folds: usize,
    pub features: FeatureConfig,
}

impl Default for OpenWorldConfig {
    fn default() -> Self {
        OpenWorldConfig { k: 4, vote_threshold: 4, folds: 10, features: FeatureConfig::default() }
    }
}

/// Open-world evaluation: all monitored pages plus the first `w`
/// background traces (merged into one non-monitored class) for each world
/// size `w`. A monitored instance counts as a true positive only when its
/// own page is predicted. A false positive is any prediction of a monitored
/// page that is wrong; the false positive rate counts non-monitored
/// instances predicted as monitored. Rejects become non-monitored.
pub fn open_world_eval(
    monitored: &Corpus,
    background: &Corpus,
    cfg: &OpenWorldConfig,
    world_sizes: &[usize],
    seed: u64,
) -> Result<Vec<EvalReport>, EvalError> {
    let largest = world_sizes.iter().copied().max().unwrap_or(0);
    if largest > background.len() {
        return Err(EvalError::InsufficientBackground { needed: largest, found: background.len() });
    }
    if cfg.vote_threshold == 0 || cfg.vote_threshold > cfg.k {
        return Err(EvalError::InvalidK { k: cfg.k, train: 0, threshold: cfg.vote_threshold });
    }
    let mon = Dataset::from_corpus(monitored, &cfg.features)?;
    mon.check_instances(cfg.folds)?;
    let bg_features = background
        .traces
        .par_iter()
        .take(largest)
        .map(|t| extract_features(t, &cfg.features))
        .collect::<Result<Vec<_>, _>>()?;
    let bg_label = mon.names.len();
    let mut reports = Vec::with_capacity(world_sizes.len());
    for &w in world_sizes {
        let mut names = mon.names.clone();
        names.push(NON_MONITORED.to_string());
        let data = Dataset {
            features: mon.features.iter().chain(&bg_features[..w]).cloned().collect(),
            labels: mon.labels.iter().copied().chain(std::iter::repeat_n(bg_label, w)).collect(),
            names,
        };
        let votes = data.cross_validated_votes(cfg.k, cfg.folds, seed)?;
        let (mut tp, mut wrong_page, mut bg_flagged, mut correct) = (0usize, 0usize, 0usize, 0usize);
        for (v, &truth) in votes.iter().zip(&data.labels) {
            let predicted = v.first().filter(|(_, n)| *n >= cfg.vote_threshold).map_or(bg_label, |(l, _)| *l);
            if predicted == truth {
                correct += 1;
                if truth != bg_label {
                    tp += 1;
                }
            } else if predicted != bg_label {
                if truth == bg_label {
                    bg_flagged += 1;
                } else {
                    wrong_page += 1;
                }
            }
        }
        let positives = mon.labels.len();
        let tpr = tp as f64 / positives as f64;
        let fpr = if w > 0 { bg_flagged as f64 / w as f64 } else { 0.0 };
        let flagged = tp + wrong_page + bg_flagged;
        let precision = if flagged > 0 { tp as f64 / flagged as f64 } else { 0.0 };
        let is_monitored: Vec<bool> = (0..=bg_label).map(|l| l != bg_label).collect();
        let scores: Vec<usize> = votes.iter().map(|v| monitored_score(v, &is_monitored)).collect();
        let pos: Vec<bool> = data.labels.iter().map(|&l| l != bg_label).collect();
        reports.push(EvalReport {
            experiment: "open_world".into(),
            world_size: w,
            accuracy: correct as f64 / data.labels.len() as f64,
            tpr,
            fpr,
            precision,
            f1: f1_score(precision, tpr),
            roc: if w > 0 { Some(roc_curve(&scores, &pos, cfg.k)?) } else { None },
            proc: Some(proc_curve(&scores, &pos, cfg.k)?),
        });
    }
    Ok(reports)
}

/// Reassigns labels by a seeded random permutation of the trace order.
pub fn permute_labels(corpus: &Corpus, seed: u64) -> Corpus {
    let mut labels: Vec<String> = corpus.traces.iter().map(|t| t.label().to_string()).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let traces = corpus.traces.iter().zip(labels).map(|(t, l)| t.clone().with_label(l)).collect();
    Corpus { traces, metadata: corpus.metadata.clone() }
}

/// Spearman rank correlation, averaging ranks over ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traces::{parse_trace, PacketEvent, PacketKind};

    #[test]
    fn two_cell_features() {
        let t = parse_trace("0.0\t+1500\n0.1\t-1500", "x").unwrap();
        let f = extract_features(&t, &FeatureConfig::default()).unwrap();
        assert_eq!(f.dim(), 11 + 30 + 9);
        assert_eq!(&f.0[..2], &[1.0, 1.0]);
        assert_eq!(&f.0[11..14], &[1.0, -1.0, 0.0]);
        assert_eq!(f, extract_features(&t, &FeatureConfig::default()).unwrap());
    }

    #[test]
    fn dummies_change_features() {
        let raw = parse_trace("0.0\t+1500\n0.1\t-1500", "x").unwrap();
        let mut events = raw.events().to_vec();
        events.push(PacketEvent { time: 0.2, direction: Direction::Outgoing, size: 1500, kind: PacketKind::Dummy });
        let padded = Trace::new("x", events).unwrap();
        let cfg = FeatureConfig::default();
        assert_ne!(extract_features(&raw, &cfg).unwrap(), extract_features(&padded, &cfg).unwrap());
    }

    #[test]
    fn burst_features_split_on_gap_and_direction() {
        let t = parse_trace("0.0\t+1\n0.01\t+1\n0.5\t+1\n0.51\t-1\n0.52\t-1\n0.53\t-1", "x").unwrap();
        let f = extract_features(&t, &FeatureConfig { burst_gap: 0.05, sign_prefix: 0 }).unwrap();
        // bursts out/in, mean out/in, max out/in
        assert_eq!(&f.0[5..11], &[2.0, 1.0, 1.5, 3.0, 2.0, 3.0]);
    }

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector(v.to_vec())
    }

    #[test]
    fn knn_identity_and_threshold() {
        let train = vec![
            (fv(&[0.0, 0.0]), "a".to_string()),
            (fv(&[0.1, 0.0]), "a".to_string()),
            (fv(&[1.0, 1.0]), "b".to_string()),
            (fv(&[0.9, 1.0]), "b".to_string()),
            (fv(&[0.5, 0.5]), "c".to_string()),
        ];
        assert_eq!(knn_classify(&train, 1, &fv(&[1.0, 1.0]), 1).unwrap(), Some("b".to_string()));
        // All five neighbors split 2/2/1, so three votes are never reached.
        assert_eq!(knn_classify(&train, 5, &fv(&[0.5, 0.5]), 3).unwrap(), None);
        assert!(knn_classify(&train, 6, &fv(&[0.5, 0.5]), 1).is_err());
        assert!(knn_classify(&train, 2, &fv(&[0.5, 0.5]), 3).is_err());
        assert!(knn_classify(&train, 2, &fv(&[0.5, 0.5]), 0).is_err());
    }

    #[test]
    fn knn_separates_linearly_separable_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let mut point = |class: usize| {
            let x: f64 = rng.random_range(0.0..1.0);
            let y: f64 = rng.random_range(0.0..1.0);
            // Classes either side of x + y = 1, separated by a margin.
            let shift = if class == 0 { -0.6 } else { 0.6 };
            fv(&[x + shift, y + shift])
        };
        let train: Vec<(FeatureVector, String)> = (0..200).map(|i| (point(i % 2), format!("c{}", i % 2))).collect();
        let test: Vec<(FeatureVector, String)> = (0..200).map(|i| (point(i % 2), format!("c{}", i % 2))).collect();
        let correct = test
            .iter()
            .filter(|(x, label)| knn_classify(&train, 5, x, 1).unwrap().as_deref() == Some(label.as_str()))
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.95, "accuracy {correct}/200");
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..100).map(|i| i / 10).collect();
        let folds = stratified_folds(&labels, 10, 1);
        for f in 0..10 {
            for l in 0..10 {
                let n = (0..100).filter(|&i| folds[i] == f && labels[i] == l).count();
                assert_eq!(n, 1);
            }
        }
        assert_eq!(folds, stratified_folds(&labels, 10, 1));
    }

    #[test]
    fn perfect_and_uninformative_curves() {
        let positives = [true, true, false, false];
        let perfect = [5, 5, 0, 0];
        let roc = roc_curve(&perfect, &positives, 5).unwrap();
        assert_eq!(roc.auc, 1.0);
        let pr = proc_curve(&perfect, &positives, 5).unwrap();
        assert_eq!(pr.auc, 1.0);
        assert_eq!(pr.baseline, 0.5);

        let flat = [3, 3, 3, 3];
        assert_eq!(roc_curve(&flat, &positives, 5).unwrap().auc, 0.5);
        assert_eq!(proc_curve(&flat, &positives, 5).unwrap().auc, 0.5);

        let all = proc_curve(&[1, 2], &[true, true], 5).unwrap();
        assert_eq!(all.baseline, 1.0);
        assert_eq!(proc_curve(&[1, 2], &[false, false], 5), Err(EvalError::NoPositives));
    }

    #[test]
    fn raising_threshold_never_raises_fpr() {
        let scores = [0, 1, 2, 3, 4, 5, 2, 3, 1, 0];
        let positives = [false, true, false, true, true, true, false, false, true, false];
        let roc = roc_curve(&scores, &positives, 5).unwrap();
        for w in roc.points.windows(2) {
            assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn f1_conventions() {
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert!((f1_score(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_extremes() {
        let x = [0.5, 0.4, 0.3, 0.2, 0.1];
        assert_eq!(spearman(&x, &[1.0, 2.0, 3.0, 4.0, 5.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 2.0, 3.0, 4.0, 6.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0, 1.0, 1.0, 1.0, 1.0]), None);
    }

    #[test]
    fn identical_instances_classify_perfectly() {
        let mut traces = Vec::new();
        for page in 0..4 {
            let text: String = (0..=page).map(|i| format!("{}\t+1500\n{}\t-1500\n", i, i as f64 + 0.5)).collect();
            for _ in 0..10 {
                traces.push(parse_trace(&text, &format!("p{page}")).unwrap());
            }
        }
        let corpus = Corpus::new(traces).unwrap();
        let report = closed_world_eval(&corpus, &EvalConfig::default(), 1).unwrap();
        assert_eq!(report.accuracy, 1.0);
        let (roc, proc) = roc_binarized(&corpus, &EvalConfig::default(), 1).unwrap();
        assert_eq!(roc.auc, 1.0);
        assert_eq!(proc.auc, 1.0);
    }

    #[test]
    fn too_few_instances_rejected() {
        let traces = (0..4).map(|i| parse_trace("0\t+1\n1\t-1", &format!("p{i}")).unwrap()).collect();
        let corpus = Corpus::new(traces).unwrap();
        assert!(matches!(
            closed_world_eval(&corpus, &EvalConfig::default(), 1),
            Err(EvalError::InsufficientInstances { .. })
        ));
    }
}
