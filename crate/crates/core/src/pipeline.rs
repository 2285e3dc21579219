//! End-to-end comparison runs on synthetic blobs: pretrain a teacher, bag
//! the training split with it, then train students under several arms and
//! score each on the same bags and held-out split.

use crate::bagging::{bag_by_strategy, extract_embeddings, BagTable};
use crate::data::{gen_blobs, split_stratified, Checkpoint, Dataset};
use crate::error::Result;
use crate::eval::{bag_distance_embeddings, intra_class_distance, knn_eval};
use crate::nets::{EncoderParams, FeatureSource};
use crate::train::{distill, pretrain_teacher, ObjectiveKind, RelationSource, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Student trained contrastively on its own, no teacher.
    NoDistill,
    /// Intra-sample distillation only.
    IntraOnly,
    /// Intra plus inter-sample distillation with teacher bags.
    Bingo,
    /// As `Bingo`, with bags rebuilt from the student during training.
    StudentOnline,
    /// Embedding regression onto the teacher.
    KdL2,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::NoDistill,
        Arm::IntraOnly,
        Arm::Bingo,
        Arm::StudentOnline,
        Arm::KdL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::NoDistill => "no-distill",
            Arm::IntraOnly => "intra-only",
            Arm::Bingo => "bingo",
            Arm::StudentOnline => "student-online",
            Arm::KdL2 => "kd-l2",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub class_sep: f64,
    pub noise: f64,
    pub val_fraction: f64,
    pub teacher: TrainConfig,
    /// Base student config; arms override the relation source and objective.
    pub student: TrainConfig,
    pub eval_k: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// The comparison setup used by the acceptance run: 5000 blobs in 32
    /// dimensions, a wide teacher and a narrow, briefly trained student.
    pub fn blobs(seed: u64) -> Self {
        let teacher = TrainConfig {
            hidden_dims: vec![128, 128],
            epochs: 30,
            ..TrainConfig::default()
        };
        let student = TrainConfig {
            hidden_dims: vec![32],
            epochs: 10,
            ..TrainConfig::default()
        };
        Self {
            n: 5000,
            dim: 32,
            classes: 10,
            class_sep: 3.0,
            noise: 1.0,
            val_fraction: 0.2,
            teacher,
            student,
            eval_k: 10,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: Arm,
    pub checkpoint: Checkpoint,
    /// k-NN accuracy of held-out rows against training rows.
    pub knn_acc: f64,
    /// Bag distance on the training split under the teacher bags.
    pub bag_dis: f64,
    /// Intra-class distance on the held-out split.
    pub intra_class: f64,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub seed: u64,
    pub teacher: Checkpoint,
    pub teacher_knn: f64,
    pub bags: BagTable,
    pub bag_purity: f64,
    pub arms: Vec<ArmResult>,
}

impl ExperimentResult {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|r| r.arm == arm)
    }
}

pub fn arm_config(base: &TrainConfig, arm: Arm) -> TrainConfig {
    let mut c = base.clone();
    match arm {
        Arm::NoDistill | Arm::Bingo => {}
        Arm::IntraOnly => c.relation_source = RelationSource::None,
        Arm::StudentOnline => c.relation_source = RelationSource::StudentOnline,
        Arm::KdL2 => c.objective = ObjectiveKind::KdL2,
    }
    c
}

fn embed(params: &EncoderParams, data: &Dataset) -> Result<crate::tensor::Tensor> {
    Ok(extract_embeddings(params, data, FeatureSource::Projection, 256)?.to_tensor())
}

pub fn split_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let all = gen_blobs(cfg.n, cfg.dim, cfg.classes, cfg.class_sep, cfg.noise, cfg.seed)?;
    split_stratified(&all, cfg.val_fraction, cfg.seed)
}

/// Scores a trained encoder on the shared bags and held-out split.
pub fn score(
    params: &EncoderParams,
    bags: &BagTable,
    train: &Dataset,
    val: &Dataset,
    k: usize,
) -> Result<(f64, f64, f64)> {
    let tr = embed(params, train)?;
    let va = embed(params, val)?;
    let knn = knn_eval(&tr, train.require_labels()?, &va, val.require_labels()?, k)?;
    let bag_dis = bag_distance_embeddings(&tr, bags)?.value;
    let intra = intra_class_distance(&va, val.require_labels()?)?;
    Ok((knn, bag_dis, intra))
}

pub fn run_experiment(cfg: &ExperimentConfig, arms: &[Arm]) -> Result<ExperimentResult> {
    let (train, val) = split_data(cfg)?;
    let teacher_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.teacher.clone()
    };
    let teacher = pretrain_teacher(&teacher_cfg, &train)?.checkpoint;
    let student_cfg = TrainConfig {
        seed: cfg.seed,
        ..cfg.student.clone()
    };
    let te = extract_embeddings(&teacher.params, &train, student_cfg.feature_source, 256)?;
    let bags = bag_by_strategy(
        student_cfg.bag_strategy,
        &te,
        train.labels(),
        student_cfg.kmeans_max_iters,
        cfg.seed,
    )?;
    let bag_purity = bags.purity(train.require_labels()?);
    let teacher_knn = knn_eval(
        &embed(&teacher.params, &train)?,
        train.require_labels()?,
        &embed(&teacher.params, &val)?,
        val.require_labels()?,
        cfg.eval_k,
    )?;

    let mut results = Vec::with_capacity(arms.len());
    for &arm in arms {
        let c = arm_config(&student_cfg, arm);
        let outcome = match arm {
            Arm::NoDistill => pretrain_teacher(&c, &train)?,
            _ => distill(&c, &teacher, &bags, &train)?,
        };
        let (knn_acc, bag_dis, intra_class) = score(&outcome.checkpoint.params, &bags, &train, &val, cfg.eval_k)?;
        results.push(ArmResult {
            arm,
            losses: outcome.metrics.iter().map(|m| m.loss).collect(),
            checkpoint: outcome.checkpoint,
            knn_acc,
            bag_dis,
            intra_class,
        });
    }
    Ok(ExperimentResult {
        seed: cfg.seed,
        teacher,
        teacher_knn,
        bags,
        bag_purity,
        arms: results,
    })
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
