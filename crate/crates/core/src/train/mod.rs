//! Training loops: contrastive teacher pretraining with a momentum key
//! encoder, and bag-aware student distillation.

mod optim;

use std::fmt;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

pub use optim::{cosine_lr, sgd_momentum_step, zero_velocity};

use crate::augment::AugmentationPolicy;
use crate::bagging::{bag_by_strategy, extract_embeddings, sample_positive, BagStrategy, BagTable};
use crate::data::{Checkpoint, CheckpointMeta, Dataset};
use crate::error::{Error, Result};
use crate::losses::{distill_loss, AnchorBatch, Objective};
use crate::membank::MemoryBank;
use crate::nets::{init_params, momentum_update, EncoderParams, EncoderSpec, FeatureSource, Role};
use crate::rng::{keyed, Stream};
use crate::tensor::GraphError;

/// Where the bags that supply positives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelationSource {
    /// Fixed bags built from teacher embeddings.
    Teacher,
    /// Bags rebuilt from the student every `rebag_period_epochs`.
    StudentOnline,
    /// No inter-sample term.
    None,
}

/// Which network produces the keys during distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TeacherParams {
    Pretrained,
    /// An exponential moving average of the student.
    MomentumOfStudent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Bingo,
    KdL2,
    Rkd,
}

macro_rules! named_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($name => Some($ty::$variant),)+ _ => None }
            }

            pub const NAMES: &'static [&'static str] = &[$($name),+];
        }
    };
}

named_enum!(RelationSource { Teacher => "teacher", StudentOnline => "student-online", None => "none" });
named_enum!(TeacherParams { Pretrained => "pretrained", MomentumOfStudent => "momentum-of-student" });
named_enum!(ObjectiveKind { Bingo => "bingo", KdL2 => "kd-l2", Rkd => "rkd" });

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden_dims: Vec<usize>,
    pub proj_hidden_dim: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub bank_capacity: usize,
    /// EMA coefficient of the momentum (key) encoder.
    pub momentum_m: f64,
    pub seed: u64,
    pub bag_strategy: BagStrategy,
    pub relation_source: RelationSource,
    pub teacher_params: TeacherParams,
    pub rebag_period_epochs: usize,
    pub lambda_inter: f64,
    pub objective: ObjectiveKind,
    pub feature_source: FeatureSource,
    pub kmeans_max_iters: usize,
    pub augmentation: AugmentationPolicy,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64],
            proj_hidden_dim: 64,
            embed_dim: 32,
            epochs: 100,
            batch_size: 64,
            base_lr: 0.03,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            tau: 0.2,
            bank_capacity: 1024,
            momentum_m: 0.999,
            seed: 0,
            bag_strategy: BagStrategy::Knn { k: 5 },
            relation_source: RelationSource::Teacher,
            teacher_params: TeacherParams::Pretrained,
            rebag_period_epochs: 5,
            lambda_inter: 1.0,
            objective: ObjectiveKind::Bingo,
            feature_source: FeatureSource::Projection,
            kmeans_max_iters: 50,
            augmentation: AugmentationPolicy::default(),
            log_every: 10,
        }
    }
}

fn feature_name(f: FeatureSource) -> &'static str {
    match f {
        FeatureSource::Projection => "projection",
        FeatureSource::Backbone => "backbone",
    }
}

pub fn parse_feature_source(s: &str) -> Option<FeatureSource> {
    match s {
        "projection" => Some(FeatureSource::Projection),
        "backbone" => Some(FeatureSource::Backbone),
        _ => None,
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

pub fn parse_dims(key: &str, value: &str) -> Result<Vec<usize>> {
    let value = value.trim();
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|t| parse(key, t)).collect()
}

pub fn format_dims(dims: &[usize]) -> String {
    if dims.is_empty() {
        "none".into()
    } else {
        dims.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

impl TrainConfig {
    /// Every settable key with a one-line description.
    pub const KEYS: &'static [(&'static str, &'static str)] = &[
        ("hidden_dims", "backbone hidden widths, comma separated or `none`"),
        ("proj_hidden_dim", "projection head hidden width"),
        ("embed_dim", "embedding width"),
        ("epochs", "passes over the training set"),
        ("batch_size", "anchors per step"),
        ("base_lr", "peak learning rate of the cosine schedule"),
        ("sgd_momentum", "SGD momentum"),
        ("weight_decay", "L2 weight decay"),
        ("tau", "InfoNCE temperature"),
        ("bank_capacity", "memory bank size; must be a multiple of batch_size"),
        ("momentum_m", "EMA coefficient of the momentum encoder"),
        ("seed", "master seed"),
        ("bag_strategy", "knn | kmeans | labels (online rebagging)"),
        ("bag_param", "K for knn, C for kmeans"),
        ("relation_source", "teacher | student-online | none"),
        ("teacher_params", "pretrained | momentum-of-student"),
        ("rebag_period_epochs", "epochs between online rebagging"),
        ("lambda_inter", "weight of the inter-sample term"),
        ("objective", "bingo | kd-l2 | rkd"),
        ("feature_source", "projection | backbone features for bagging"),
        ("kmeans_max_iters", "Lloyd iteration cap"),
        ("noise_sigma", "augmentation: additive Gaussian noise"),
        ("mask_prob", "augmentation: coordinate dropout probability"),
        ("scale_lo", "augmentation: lower bound of the random scale"),
        ("scale_hi", "augmentation: upper bound of the random scale"),
        ("log_every", "steps between metric lines"),
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.augmentation;
        Some(match key {
            "hidden_dims" => format_dims(&self.hidden_dims),
            "proj_hidden_dim" => self.proj_hidden_dim.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "base_lr" => self.base_lr.to_string(),
            "sgd_momentum" => self.sgd_momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "tau" => self.tau.to_string(),
            "bank_capacity" => self.bank_capacity.to_string(),
            "momentum_m" => self.momentum_m.to_string(),
            "seed" => self.seed.to_string(),
            "bag_strategy" => self.bag_strategy.name().into(),
            "bag_param" => self.bag_strategy.param().to_string(),
            "relation_source" => self.relation_source.name().into(),
            "teacher_params" => self.teacher_params.name().into(),
            "rebag_period_epochs" => self.rebag_period_epochs.to_string(),
            "lambda_inter" => self.lambda_inter.to_string(),
            "objective" => self.objective.name().into(),
            "feature_source" => feature_name(self.feature_source).into(),
            "kmeans_max_iters" => self.kmeans_max_iters.to_string(),
            "noise_sigma" => a.noise_sigma.to_string(),
            "mask_prob" => a.mask_prob.to_string(),
            "scale_lo" => a.scale_lo.to_string(),
            "scale_hi" => a.scale_hi.to_string(),
            "log_every" => self.log_every.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &[&str]| Error::Config(format!("{key}: `{v}` is not one of {}", what.join(", ")));
        match key {
            "hidden_dims" => self.hidden_dims = parse_dims(key, v)?,
            "proj_hidden_dim" => self.proj_hidden_dim = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "bank_capacity" => self.bank_capacity = parse(key, v)?,
            "momentum_m" => self.momentum_m = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "bag_strategy" => {
                self.bag_strategy = BagStrategy::from_parts(v, self.bag_strategy.param())
                    .ok_or_else(|| bad(&["knn", "kmeans", "labels"]))?
            }
            "bag_param" => {
                self.bag_strategy =
                    BagStrategy::from_parts(self.bag_strategy.name(), parse(key, v)?).expect("known strategy name")
            }
            "relation_source" => {
                self.relation_source = RelationSource::parse(v).ok_or_else(|| bad(RelationSource::NAMES))?
            }
            "teacher_params" => {
                self.teacher_params = TeacherParams::parse(v).ok_or_else(|| bad(TeacherParams::NAMES))?
            }
            "rebag_period_epochs" => self.rebag_period_epochs = parse(key, v)?,
            "lambda_inter" => self.lambda_inter = parse(key, v)?,
            "objective" => self.objective = ObjectiveKind::parse(v).ok_or_else(|| bad(ObjectiveKind::NAMES))?,
            "feature_source" => {
                self.feature_source = parse_feature_source(v).ok_or_else(|| bad(&["projection", "backbone"]))?
            }
            "kmeans_max_iters" => self.kmeans_max_iters = parse(key, v)?,
            "noise_sigma" => self.augmentation.noise_sigma = parse(key, v)?,
            "mask_prob" => self.augmentation.mask_prob = parse(key, v)?,
            "scale_lo" => self.augmentation.scale_lo = parse(key, v)?,
            "scale_hi" => self.augmentation.scale_hi = parse(key, v)?,
            "log_every" => self.log_every = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Resolved `(key, value)` pairs in [`Self::KEYS`] order.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        Self::KEYS
            .iter()
            .map(|&(k, _)| (k, self.get(k).expect("every listed key has a value")))
            .collect()
    }

    /// First eight bytes of SHA-256 over the canonical `key=value` text.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_kv(self.to_kv().iter().map(|(k, v)| (*k, v.as_str())))
    }

    pub fn spec(&self, input_dim: usize) -> Result<EncoderSpec> {
        EncoderSpec::new(
            input_dim,
            self.hidden_dims.clone(),
            self.proj_hidden_dim,
            self.embed_dim,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidParameter(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size == 0 || self.bank_capacity == 0 || !self.bank_capacity.is_multiple_of(self.batch_size) {
            return fail(format!(
                "batch_size {} must divide bank_capacity {}",
                self.batch_size, self.bank_capacity
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum_m) {
            return fail(format!("momentum_m {} outside [0, 1]", self.momentum_m));
        }
        if !(self.sgd_momentum >= 0.0 && self.weight_decay >= 0.0 && self.lambda_inter >= 0.0) {
            return fail("sgd_momentum, weight_decay and lambda_inter must be non-negative".into());
        }
        if self.rebag_period_epochs == 0 || self.log_every == 0 {
            return fail("rebag_period_epochs and log_every must be positive".into());
        }
        if self.bag_strategy.param() == 0 && !matches!(self.bag_strategy, BagStrategy::Labels { .. }) {
            return fail("bag_param must be positive".into());
        }
        self.augmentation.validate()
    }

    fn policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            seed: self.seed,
            ..self.augmentation.clone()
        }
    }
}

pub fn fingerprint_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> u64 {
    let mut h = Sha256::new();
    for (k, v) in pairs {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_intra: Option<f64>,
    pub loss_inter: Option<f64>,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| x.to_string());
        write!(
            f,
            "step={} lr={} loss={} loss_intra={} loss_inter={}",
            self.step,
            self.lr,
            self.loss,
            opt(self.loss_intra),
            opt(self.loss_inter)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One entry per optimizer step.
    pub metrics: Vec<StepMetrics>,
    pub bank_filled: usize,
    /// Anchors whose bag was a singleton, summed over steps.
    pub positive_fallbacks: usize,
    pub rebags: usize,
}

impl TrainOutcome {
    /// Metric lines every `every` steps plus the final step.
    pub fn metric_lines(&self, every: usize) -> String {
        let every = every.max(1);
        let last = self.metrics.len().saturating_sub(1);
        let mut out = String::new();
        for m in self.metrics.iter().filter(|m| m.step % every == 0 || m.step == last) {
            out.push_str(&m.to_string());
            out.push('\n');
        }
        out
    }

    pub fn write_metrics(&self, path: &Path, every: usize) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.metric_lines(every).as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }
}

fn steps_per_epoch(config: &TrainConfig, data: &Dataset) -> Result<usize> {
    let per = data.len() / config.batch_size;
    if per == 0 && config.epochs > 0 {
        return Err(Error::InvalidParameter(format!(
            "batch_size {} exceeds dataset size {}",
            config.batch_size,
            data.len()
        )));
    }
    Ok(per)
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed(seed, Stream::Shuffle, epoch as u64, 0));
    order
}

/// Numeric failures inside a step surface as a non-finite loss at that step.
fn at_step(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Graph(GraphError::NonFinite { .. }) => Error::NonFiniteLoss { step },
        other => other,
    }
}

struct Stepper {
    velocity: Vec<crate::tensor::Tensor>,
    total_steps: usize,
}

impl Stepper {
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        config: &TrainConfig,
        step: usize,
        student: &mut EncoderParams,
        keys: &EncoderParams,
        batch: &AnchorBatch<'_>,
        bank: &mut MemoryBank,
        objective: Objective,
    ) -> Result<StepMetrics> {
        let wrap = at_step(step);
        let loss = distill_loss(student, keys, batch, &config.policy(), bank, config.tau, objective).map_err(&wrap)?;
        let (eval, values) = loss.evaluate().map_err(&wrap)?;
        if !values.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = loss.gradients(&eval).map_err(&wrap)?;
        let lr = cosine_lr(step, self.total_steps, config.base_lr);
        sgd_momentum_step(
            student.tensors_mut(),
            &grads,
            &mut self.velocity,
            lr,
            config.sgd_momentum,
            config.weight_decay,
        )?;
        bank.enqueue_batch(&loss.teacher_keys)?;
        Ok(StepMetrics {
            step,
            lr,
            loss: values.total,
            loss_intra: values.intra,
            loss_inter: values.inter,
        })
    }
}

/// Contrastive pretraining: an online encoder `f_q` against keys from its
/// momentum copy `f_k`, with `f_k` outputs feeding the bank.
pub fn pretrain_teacher(config: &TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.spec(data.input_dim())?;
    let per_epoch = steps_per_epoch(config, data)?;
    let mut f_q = init_params(&spec, config.seed);
    let mut f_k = f_q.clone().with_role(Role::MomentumKey);
    let mut bank = MemoryBank::with_random_keys(config.bank_capacity, spec.embed_dim, config.seed)?;
    let mut stepper = Stepper {
        velocity: zero_velocity(f_q.tensors()),
        total_steps: config.epochs * per_epoch,
    };
    let mut metrics = Vec::with_capacity(stepper.total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, data.len());
        for ids in order.chunks_exact(config.batch_size) {
            let x = data.rows(ids);
            let batch = AnchorBatch {
                anchors: &x,
                positives: &x,
                anchor_ids: ids,
                step: step as u64,
            };
            let objective = Objective::Bingo { lambda_inter: 0.0 };
            metrics.push(stepper.step(config, step, &mut f_q, &f_k, &batch, &mut bank, objective)?);
            momentum_update(&f_q, &mut f_k, config.momentum_m)?;
            step += 1;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: f_q.with_role(Role::Teacher),
            fingerprint: config.fingerprint(),
            meta: CheckpointMeta {
                seed: config.seed,
                steps: step as u64,
                stage: "pretrain".into(),
            },
        },
        metrics,
        bank_filled: bank.filled(),
        positive_fallbacks: 0,
        rebags: 0,
    })
}

/// Trains a fresh student against `teacher` with positives drawn from bags.
pub fn distill(config: &TrainConfig, teacher: &Checkpoint, bags: &BagTable, data: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.spec(data.input_dim())?;
    let t = &teacher.params;
    t.validate()?;
    if t.spec.input_dim != spec.input_dim || t.spec.embed_dim != spec.embed_dim {
        return Err(Error::SpecMismatch(format!(
            "teacher {}→{} vs student {}→{}",
            t.spec.input_dim, t.spec.embed_dim, spec.input_dim, spec.embed_dim
        )));
    }
    if config.relation_source == RelationSource::Teacher && bags.len() != data.len() {
        return Err(Error::Bags(format!("{} bags for {} instances", bags.len(), data.len())));
    }
    let per_epoch = steps_per_epoch(config, data)?;
    let mut student = init_params(&spec, config.seed);
    let mut ema = match config.teacher_params {
        TeacherParams::Pretrained => None,
        TeacherParams::MomentumOfStudent => Some(student.clone().with_role(Role::MomentumKey)),
    };
    let mut bank = MemoryBank::with_random_keys(config.bank_capacity, spec.embed_dim, config.seed)?;
    let mut stepper = Stepper {
        velocity: zero_velocity(student.tensors()),
        total_steps: config.epochs * per_epoch,
    };
    let objective = match config.objective {
        ObjectiveKind::Bingo if config.relation_source == RelationSource::None => {
            Objective::Bingo { lambda_inter: 0.0 }
        }
        ObjectiveKind::Bingo => Objective::Bingo {
            lambda_inter: config.lambda_inter,
        },
        ObjectiveKind::KdL2 => Objective::KdL2,
        ObjectiveKind::Rkd => Objective::Rkd,
    };
    let needs_positives = matches!(objective, Objective::Bingo { lambda_inter } if lambda_inter != 0.0);

    let mut online: Option<BagTable> = None;
    let mut rebags = 0;
    let mut fallbacks = 0;
    let mut metrics = Vec::with_capacity(stepper.total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        if needs_positives
            && config.relation_source == RelationSource::StudentOnline
            && epoch % config.rebag_period_epochs == 0
        {
            let e = extract_embeddings(&student, data, config.feature_source, 256)?;
            online = Some(bag_by_strategy(
                config.bag_strategy,
                &e,
                data.labels(),
                config.kmeans_max_iters,
                config.seed ^ epoch as u64,
            )?);
            rebags += 1;
        }
        let current = online.as_ref().unwrap_or(bags);
        let order = epoch_order(config.seed, epoch, data.len());
        for ids in order.chunks_exact(config.batch_size) {
            let anchors = data.rows(ids);
            let positives = if needs_positives {
                let pos: Vec<usize> = ids
                    .iter()
                    .map(|&a| {
                        let draw = sample_positive(
                            current,
                            a,
                            &mut keyed(config.seed, Stream::Positive, a as u64, step as u64),
                        );
                        fallbacks += usize::from(draw.fallback);
                        draw.index
                    })
                    .collect();
                data.rows(&pos)
            } else {
                anchors.clone()
            };
            let batch = AnchorBatch {
                anchors: &anchors,
                positives: &positives,
                anchor_ids: ids,
                step: step as u64,
            };
            let keys = ema.as_ref().unwrap_or(t);
            metrics.push(stepper.step(config, step, &mut student, keys, &batch, &mut bank, objective)?);
            if let Some(m) = ema.as_mut() {
                momentum_update(&student, m, config.momentum_m)?;
            }
            step += 1;
        }
    }
    let fingerprint = fingerprint_kv(
        config
            .to_kv()
            .iter()
            .map(|(k, v)| (*k, v.as_str()))
            .chain([("teacher", format!("{:016x}", teacher.fingerprint).as_str())]),
    );
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            params: student,
            fingerprint,
            meta: CheckpointMeta {
                seed: config.seed,
                steps: step as u64,
                stage: "distill".into(),
            },
        },
        metrics,
        bank_filled: bank.filled(),
        positive_fallbacks: fallbacks,
        rebags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagging::bag_labels;
    use crate::data::gen_blobs;
    use crate::losses::intra_loss;

    fn small() -> TrainConfig {
        TrainConfig {
            hidden_dims: vec![8],
            proj_hidden_dim: 8,
            embed_dim: 4,
            epochs: 2,
            batch_size: 8,
            bank_capacity: 32,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn data() -> Dataset {
        gen_blobs(40, 6, 4, 3.0, 0.5, 1).unwrap()
    }

    #[test]
    fn config_keys_round_trip() {
        let c = TrainConfig::default();
        let mut d = TrainConfig::default();
        for (k, v) in c.to_kv() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(d.set("nope", "1").is_err());
        assert!(d.set("epochs", "x").is_err());
        d.set("bag_strategy", "kmeans").unwrap();
        d.set("bag_param", "7").unwrap();
        assert_eq!(d.bag_strategy, BagStrategy::KMeans { clusters: 7 });
        assert_ne!(c.fingerprint(), d.fingerprint());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for (k, v) in [
            ("base_lr", "0"),
            ("tau", "-1"),
            ("bank_capacity", "100"),
            ("batch_size", "0"),
        ] {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let c = TrainConfig { epochs: 0, ..small() };
        let out = pretrain_teacher(&c, &data()).unwrap();
        let init = init_params(&c.spec(6).unwrap(), c.seed);
        assert_eq!(out.checkpoint.params.layers, init.layers);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let a = pretrain_teacher(&small(), &data()).unwrap();
        let b = pretrain_teacher(&small(), &data()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.metric_lines(1), b.metric_lines(1));
        assert_eq!(a.metrics.len(), 2 * (40 / 8));
        assert_eq!(a.bank_filled, 32);
    }

    #[test]
    fn distill_leaves_teacher_untouched() {
        let teacher = pretrain_teacher(&small(), &data()).unwrap().checkpoint;
        let before = teacher.clone();
        let bags = bag_labels(data().labels().unwrap()).unwrap();
        let out = distill(&small(), &teacher, &bags, &data()).unwrap();
        assert_eq!(teacher, before);
        assert_eq!(out.metrics.len(), 10);
        assert!(out.metrics.iter().all(|m| m.loss.is_finite() && m.loss_inter.is_some()));
        // Filled count: 32 random keys at start, then 8 per step, capped.
        assert_eq!(out.bank_filled, 32);
    }

    #[test]
    fn first_step_matches_standalone_intra_loss() {
        let c = TrainConfig {
            lambda_inter: 0.0,
            augmentation: AugmentationPolicy::identity(),
            ..small()
        };
        let d = data();
        let teacher = pretrain_teacher(&small(), &d).unwrap().checkpoint;
        let bags = bag_labels(d.labels().unwrap()).unwrap();
        let out = distill(&c, &teacher, &bags, &d).unwrap();

        let ids = &epoch_order(c.seed, 0, d.len())[..c.batch_size];
        let x = d.rows(ids);
        let student = init_params(&c.spec(6).unwrap(), c.seed);
        let bank = MemoryBank::with_random_keys(c.bank_capacity, c.embed_dim, c.seed).unwrap();
        let batch = AnchorBatch {
            anchors: &x,
            positives: &x,
            anchor_ids: ids,
            step: 0,
        };
        let policy = AugmentationPolicy {
            seed: c.seed,
            ..c.augmentation.clone()
        };
        let standalone = intra_loss(&student, &teacher.params, &batch, &policy, &bank, c.tau).unwrap();
        assert_eq!(out.metrics[0].loss, standalone.value().unwrap().total);
    }

    #[test]
    fn relation_none_equals_zero_lambda() {
        let d = data();
        let teacher = pretrain_teacher(&small(), &d).unwrap().checkpoint;
        let bags = bag_labels(d.labels().unwrap()).unwrap();
        let none = TrainConfig {
            relation_source: RelationSource::None,
            ..small()
        };
        let zero = TrainConfig {
            lambda_inter: 0.0,
            ..small()
        };
        let a = distill(&none, &teacher, &bags, &d).unwrap();
        let b = distill(&zero, &teacher, &bags, &d).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert!(a.metrics.iter().all(|m| m.loss_inter.is_none()));
    }

    #[test]
    fn ablation_switches_run() {
        let d = data();
        let teacher = pretrain_teacher(&small(), &d).unwrap().checkpoint;
        let bags = bag_labels(d.labels().unwrap()).unwrap();
        let online = TrainConfig {
            relation_source: RelationSource::StudentOnline,
            rebag_period_epochs: 1,
            bag_strategy: BagStrategy::Knn { k: 3 },
            ..small()
        };
        assert_eq!(distill(&online, &teacher, &bags, &d).unwrap().rebags, 2);
        let ema = TrainConfig {
            teacher_params: TeacherParams::MomentumOfStudent,
            ..small()
        };
        distill(&ema, &teacher, &bags, &d).unwrap();
        for objective in [ObjectiveKind::KdL2, ObjectiveKind::Rkd] {
            let c = TrainConfig { objective, ..small() };
            let out = distill(&c, &teacher, &bags, &d).unwrap();
            assert!(out.metrics.iter().all(|m| m.loss_intra.is_none()));
        }
    }

    #[test]
    fn mismatched_bags_are_rejected() {
        let d = data();
        let teacher = pretrain_teacher(&small(), &d).unwrap().checkpoint;
        let bags = bag_labels(&[0, 1, 0]).unwrap();
        assert!(matches!(distill(&small(), &teacher, &bags, &d), Err(Error::Bags(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let c = TrainConfig {
            base_lr: 1e300,
            ..small()
        };
        match pretrain_teacher(&c, &data()) {
            Err(Error::NonFiniteLoss { step }) => assert!(step >= 1),
            Err(Error::NonFiniteGradient { .. }) => {}
            other => panic!("expected a numeric failure, got {other:?}"),
        }
    }

    #[test]
    fn metric_line_format() {
        let m = StepMetrics {
            step: 3,
            lr: 0.5,
            loss: 1.25,
            loss_intra: Some(1.0),
            loss_inter: None,
        };
        assert_eq!(m.to_string(), "step=3 lr=0.5 loss=1.25 loss_intra=1 loss_inter=na");
    }
}
