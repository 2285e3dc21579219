//! Representation quality metrics.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Uniform;

use crate::bagging::{extract_embeddings, BagTable};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{EncoderParams, FeatureSource};
use crate::rng::{keyed, Stream};
use crate::tensor::{dot, Graph, Tensor};
use crate::train::{cosine_lr, sgd_momentum_step, zero_velocity};

fn check_pair(emb: &Tensor, labels: &[u32], what: &str) -> Result<()> {
    if emb.rows() != labels.len() {
        return Err(Error::Labels(format!(
            "{what}: {} embeddings but {} labels",
            emb.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Smallest label among those with the highest count.
fn majority(votes: impl Iterator<Item = u32>) -> u32 {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for v in votes {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(l, _)| l)
        .expect("at least one vote")
}

/// k-NN predictions by cosine similarity (rows are assumed unit norm).
///
/// Neighbor ties go to the lower training index; vote ties to the smaller label.
pub fn knn_predict(train: &Tensor, train_labels: &[u32], test: &Tensor, k: usize) -> Result<Vec<u32>> {
    check_pair(train, train_labels, "train")?;
    if k == 0 || k > train.rows() {
        return Err(Error::InvalidParameter(format!(
            "k={k} with {} training rows",
            train.rows()
        )));
    }
    if train.cols() != test.cols() {
        return Err(Error::Dimension(format!(
            "train width {} vs test width {}",
            train.cols(),
            test.cols()
        )));
    }
    let n = train.rows();
    let mut idx: Vec<usize> = Vec::with_capacity(n);
    let mut scores = vec![0.0; n];
    let mut out = Vec::with_capacity(test.rows());
    for r in 0..test.rows() {
        let q = test.row(r);
        for (i, s) in scores.iter_mut().enumerate() {
            *s = dot(q, train.row(i));
        }
        idx.clear();
        idx.extend(0..n);
        let order = |&i: &usize, &j: &usize| scores[j].total_cmp(&scores[i]).then(i.cmp(&j));
        if k < n {
            idx.select_nth_unstable_by(k - 1, order);
        }
        out.push(majority(idx[..k].iter().map(|&i| train_labels[i])));
    }
    Ok(out)
}

fn accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

pub fn knn_eval(train: &Tensor, train_labels: &[u32], test: &Tensor, test_labels: &[u32], k: usize) -> Result<f64> {
    check_pair(test, test_labels, "test")?;
    Ok(accuracy(&knn_predict(train, train_labels, test, k)?, test_labels))
}

fn argmax_rows(logits: &Tensor) -> Vec<u32> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

fn class_count(labels: &[u32]) -> Result<usize> {
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Labels(format!("need at least two classes, found {distinct}")));
    }
    Ok(classes)
}

fn glorot(rows: usize, cols: usize, seed: u64, tag: u64) -> Tensor {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-s, s).expect("finite bounds");
    let mut rng = keyed(seed, Stream::Probe, tag, 0);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(dist)).collect())
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed(seed, Stream::Probe, 1_000_000 + epoch as u64, 0));
    order.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Linear softmax classifier on frozen features; returns test accuracy.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
    config: &ProbeConfig,
) -> Result<f64> {
    check_pair(train, train_labels, "train")?;
    check_pair(test, test_labels, "test")?;
    let classes = class_count(train_labels)?;
    let d = train.cols();
    let mut params = [Tensor::zeros(vec![d, classes]), Tensor::zeros(vec![1, classes])];
    let mut velocity = zero_velocity(params.iter());
    let per_epoch = train.rows().div_ceil(config.batch_size.max(1));
    let total = config.epochs * per_epoch;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for ids in batches(train.rows(), config.batch_size, config.seed, epoch) {
            let mut g = Graph::new();
            let x = g.constant(train.gather_rows(&ids));
            let w = g.parameter(params[0].clone());
            let b = g.parameter(params[1].clone());
            let ones = g.constant(Tensor::full(vec![ids.len(), 1], 1.0));
            let xw = g.matmul(x, w)?;
            let bt = g.matmul(ones, b)?;
            let logits = g.add(xw, bt)?;
            let loss = g.log_softmax_nll(logits, ids.iter().map(|&i| train_labels[i] as usize).collect())?;
            let eval = g.evaluate(&HashMap::new())?;
            let grads = g.backpropagate(&eval, loss)?;
            let grads = [grads.get(w).expect("w").clone(), grads.get(b).expect("b").clone()];
            let lr = cosine_lr(step, total, config.lr);
            sgd_momentum_step(
                params.iter_mut(),
                &grads,
                &mut velocity,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
            step += 1;
        }
    }
    let mut logits = vec![0.0; test.rows() * classes];
    crate::tensor::matmul_into(test.values(), params[0].values(), test.rows(), d, classes, &mut logits);
    for row in logits.chunks_exact_mut(classes) {
        row.iter_mut().zip(params[1].values()).for_each(|(l, b)| *l += b);
    }
    Ok(accuracy(
        &argmax_rows(&Tensor::matrix(test.rows(), classes, logits)),
        test_labels,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone learning rate; the new head uses `head_lr_mult` times this.
    pub lr: f64,
    pub head_lr_mult: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            head_lr_mult: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Seeded stratified selection of `floor(fraction · n_c)` rows per class,
/// returned in ascending order.
pub fn stratified_subset(labels: &[u32], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "label fraction {fraction} outside (0, 1]"
        )));
    }
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut chosen = Vec::new();
    let mut uncovered = Vec::new();
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let take = (fraction * members.len() as f64 + 1e-9).floor() as usize;
        if take == 0 {
            uncovered.push(c as u32);
            continue;
        }
        members.shuffle(&mut keyed(seed, Stream::Subset, c as u64, 0));
        chosen.extend_from_slice(&members[..take]);
    }
    if !uncovered.is_empty() {
        return Err(Error::UncoveredClasses {
            fraction,
            classes: uncovered,
        });
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Fine-tunes the backbone of `init` plus a fresh linear head on `train`
/// and returns accuracy on `test`.
pub fn supervised_train(init: &EncoderParams, train: &Dataset, test: &Dataset, config: &FinetuneConfig) -> Result<f64> {
    let train_labels = train.require_labels()?;
    let test_labels = test.require_labels()?;
    let classes = class_count(train_labels)?;
    let n_backbone = 2 * init.spec.hidden_dims.len();
    let width = init.spec.backbone_dim();
    let mut net = init.clone();
    let mut head = [glorot(width, classes, config.seed, 0), Tensor::zeros(vec![1, classes])];
    let mut v_backbone = zero_velocity(net.tensors().take(n_backbone));
    let mut v_head = zero_velocity(head.iter());
    let per_epoch = train.len().div_ceil(config.batch_size.max(1));
    let total = config.epochs * per_epoch;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for ids in batches(train.len(), config.batch_size, config.seed, epoch) {
            let mut g = Graph::new();
            let bound = net.bind(&mut g, true);
            let x = g.constant(train.rows(&ids));
            let h = net.build_backbone(&mut g, &bound, x)?;
            let w = g.parameter(head[0].clone());
            let b = g.parameter(head[1].clone());
            let ones = g.constant(Tensor::full(vec![ids.len(), 1], 1.0));
            let hw = g.matmul(h, w)?;
            let bt = g.matmul(ones, b)?;
            let logits = g.add(hw, bt)?;
            let loss = g.log_softmax_nll(logits, ids.iter().map(|&i| train_labels[i] as usize).collect())?;
            let eval = g.evaluate(&HashMap::new())?;
            let grads = g.backpropagate(&eval, loss)?;
            let lr = cosine_lr(step, total, config.lr);
            let g_backbone: Vec<Tensor> = bound.gradients(&grads).into_iter().take(n_backbone).collect();
            let g_head = [grads.get(w).expect("w").clone(), grads.get(b).expect("b").clone()];
            sgd_momentum_step(
                net.tensors_mut().take(n_backbone),
                &g_backbone,
                &mut v_backbone,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
            sgd_momentum_step(
                head.iter_mut(),
                &g_head,
                &mut v_head,
                lr * config.head_lr_mult,
                config.momentum,
                config.weight_decay,
            )?;
            step += 1;
        }
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let x = g.constant(test.to_tensor());
    let h = net.build_backbone(&mut g, &bound, x)?;
    let w = g.constant(head[0].clone());
    let b = g.constant(head[1].clone());
    let ones = g.constant(Tensor::full(vec![test.len(), 1], 1.0));
    let hw = g.matmul(h, w)?;
    let bt = g.matmul(ones, b)?;
    let logits = g.add(hw, bt)?;
    let eval = g.evaluate(&HashMap::new())?;
    Ok(accuracy(&argmax_rows(eval.value(logits)), test_labels))
}

/// Fine-tunes on a seeded stratified `fraction` of the labeled training rows.
pub fn finetune_fraction(
    init: &EncoderParams,
    train: &Dataset,
    test: &Dataset,
    fraction: f64,
    config: &FinetuneConfig,
) -> Result<f64> {
    let subset = stratified_subset(train.require_labels()?, fraction, config.seed)?;
    supervised_train(init, &train.subset(&subset), test, config)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BagDistance {
    pub value: f64,
    /// Anchors whose bag held only themselves.
    pub skipped: usize,
}

/// Mean over anchors of the mean `‖e_a − e_p‖²` over `p ∈ Ω_a \ {a}`.
pub fn bag_distance_embeddings(emb: &Tensor, bags: &BagTable) -> Result<BagDistance> {
    if emb.rows() != bags.len() {
        return Err(Error::Bags(format!(
            "{} bags for {} embeddings",
            bags.len(),
            emb.rows()
        )));
    }
    let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
    for (a, m) in bags.iter().enumerate() {
        if m.len() <= 1 {
            skipped += 1;
            continue;
        }
        let ea = emb.row(a);
        let sum: f64 = m
            .iter()
            .filter(|&&p| p != a)
            .map(|&p| ea.iter().zip(emb.row(p)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
            .sum();
        total += sum / (m.len() - 1) as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Bags("every bag is a singleton".into()));
    }
    Ok(BagDistance {
        value: total / counted as f64,
        skipped,
    })
}

/// Bag distance under the encoder's un-augmented embeddings.
pub fn bag_distance(params: &EncoderParams, bags: &BagTable, data: &Dataset) -> Result<BagDistance> {
    let e = extract_embeddings(params, data, FeatureSource::Projection, 256)?;
    bag_distance_embeddings(&e.to_tensor(), bags)
}

/// Mean squared distance over unordered same-label pairs.
pub fn intra_class_distance(emb: &Tensor, labels: &[u32]) -> Result<f64> {
    check_pair(emb, labels, "embeddings")?;
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let (mut total, mut pairs) = (0.0, 0usize);
    for members in &by_class {
        for (x, &i) in members.iter().enumerate() {
            for &j in &members[x + 1..] {
                total += emb
                    .row(i)
                    .iter()
                    .zip(emb.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Labels("no pair of instances shares a label".into()));
    }
    Ok(total / pairs as f64)
}

/// One metric line: `metric=<name> value=<v> seed=<s> config=<hash> n_train=<a> n_test=<b>`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "metric={} value={} seed={} config={:016x} n_train={} n_test={}",
            self.metric, self.value, self.seed, self.config, self.n_train, self.n_test
        )
    }
}

impl EvalReport {
    pub fn new(
        metric: impl Into<String>,
        value: f64,
        seed: u64,
        config: u64,
        n_train: usize,
        n_test: usize,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidParameter(format!("non-finite metric value {value}")));
        }
        Ok(Self {
            metric: metric.into(),
            value,
            seed,
            config,
            n_train,
            n_test,
        })
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed report line `{line}`"));
        let mut fields = HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(bad)?;
            if fields.insert(k, v).is_some() {
                return Err(bad());
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(bad);
        let metric = get("metric")?;
        if metric.is_empty() || fields.len() != 6 {
            return Err(bad());
        }
        Self::new(
            metric,
            get("value")?.parse().map_err(|_| bad())?,
            get("seed")?.parse().map_err(|_| bad())?,
            u64::from_str_radix(get("config")?, 16).map_err(|_| bad())?,
            get("n_train")?.parse().map_err(|_| bad())?,
            get("n_test")?.parse().map_err(|_| bad())?,
        )
    }
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let text: String = reports.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(EvalReport::parse)
        .collect()
}
