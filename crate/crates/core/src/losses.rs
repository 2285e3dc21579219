//! Training objectives.
//!
//! All contrastive terms share one InfoNCE core: the positive logit
//! `q·k⁺/τ` competes against itself plus every bank key `q·k⁻/τ`. Keys are
//! constants; only the query path carries gradients.

use std::collections::HashMap;

use crate::augment::AugmentationPolicy;
use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::nets::{encoder_forward, BoundEncoder, EncoderParams};
use crate::tensor::{norm, Evaluation, Graph, NodeId, Tensor};

const KEY_TOLERANCE: f64 = 1e-6;

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let n = norm(t.row(r));
        if !n.is_finite() || (n - 1.0).abs() > KEY_TOLERANCE {
            return Err(Error::InvalidParameter(format!("{what} row {r} has norm {n}")));
        }
    }
    Ok(())
}

/// Adds the batched InfoNCE loss (mean over rows of `q`) to `g`.
///
/// `q` is a `B×D` node of unit rows, `k_pos` the matching `B×D` keys and
/// `negatives` an `M×D` bank snapshot.
pub fn info_nce_node(g: &mut Graph, q: NodeId, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if negatives.is_empty() || negatives.rows() == 0 {
        return Err(Error::EmptyBank);
    }
    check_unit_rows(negatives, "negative key")?;
    let bank_t = g.constant(negatives.transpose());
    info_nce_against(g, q, k_pos, bank_t, tau)
}

/// As [`info_nce_node`] with the transposed bank already in the graph.
fn info_nce_against(g: &mut Graph, q: NodeId, k_pos: &Tensor, bank_t: NodeId, tau: f64) -> Result<NodeId> {
    check_unit_rows(k_pos, "positive key")?;
    let rows = g.shape(q)[0];
    let k = g.constant(k_pos.clone());
    let qs = g.scale(q, 1.0 / tau)?;
    let pos = g.dot_rows(qs, k)?;
    let neg = g.matmul(qs, bank_t)?;
    let logits = g.concat_cols(&[pos, neg])?;
    Ok(g.log_softmax_nll(logits, vec![0; rows])?)
}

/// InfoNCE value for constant queries.
pub fn info_nce(q: &Tensor, k_pos: &Tensor, negatives: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let qn = g.constant(q.clone());
    let loss = info_nce_node(&mut g, qn, k_pos, negatives, tau)?;
    Ok(g.evaluate(&HashMap::new())?.value(loss).item())
}

/// Mean over rows of `‖s_i − t_i‖²`.
pub fn kd_l2_node(g: &mut Graph, student: NodeId, teacher: &Tensor) -> Result<NodeId> {
    if g.shape(student) != teacher.shape() {
        return Err(Error::Dimension(format!(
            "student {:?} vs teacher {:?}",
            g.shape(student),
            teacher.shape()
        )));
    }
    let rows = teacher.rows();
    let t = g.constant(teacher.clone());
    let diff = g.sub(student, t)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / rows as f64)?)
}

pub fn kd_l2(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let loss = kd_l2_node(&mut g, s, teacher)?;
    Ok(g.evaluate(&HashMap::new())?.value(loss).item())
}

/// Mean squared difference between the off-diagonal entries of the student
/// and teacher `B×B` cosine-similarity matrices.
pub fn rkd_graph_node(g: &mut Graph, student: NodeId, teacher: &Tensor) -> Result<NodeId> {
    if g.shape(student) != teacher.shape() {
        return Err(Error::Dimension(format!(
            "student {:?} vs teacher {:?}",
            g.shape(student),
            teacher.shape()
        )));
    }
    let b = teacher.rows();
    if b < 2 {
        return Err(Error::InvalidParameter(format!(
            "relational loss needs B >= 2, got {b}"
        )));
    }
    let mut teacher_sim = vec![0.0; b * b];
    crate::tensor::matmul_nt_into(
        teacher.values(),
        teacher.values(),
        b,
        teacher.cols(),
        b,
        &mut teacher_sim,
    );
    let mask: Vec<f64> = (0..b * b).map(|i| if i / b == i % b { 0.0 } else { 1.0 }).collect();

    let st = g.transpose(student)?;
    let ss = g.matmul(student, st)?;
    let ts = g.constant(Tensor::matrix(b, b, teacher_sim));
    let diff = g.sub(ss, ts)?;
    let mask = g.constant(Tensor::matrix(b, b, mask));
    let off = g.mul(diff, mask)?;
    let sq = g.mul(off, off)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / (b * (b - 1)) as f64)?)
}

pub fn rkd_graph(student: &Tensor, teacher: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.clone());
    let loss = rkd_graph_node(&mut g, s, teacher)?;
    Ok(g.evaluate(&HashMap::new())?.value(loss).item())
}

/// One step's anchors and the positives drawn from their bags.
#[derive(Clone, Copy, Debug)]
pub struct AnchorBatch<'a> {
    /// `B × input_dim` anchor rows.
    pub anchors: &'a Tensor,
    /// `B × input_dim` positive rows, aligned with `anchors`.
    pub positives: &'a Tensor,
    /// Dataset index of each anchor; keys the view draws.
    pub anchor_ids: &'a [usize],
    pub step: u64,
}

/// The three augmented views of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub student_anchor: Tensor,
    pub teacher_anchor: Tensor,
    pub student_positive: Tensor,
}

impl Views {
    pub fn sample(policy: &AugmentationPolicy, batch: &AnchorBatch<'_>) -> Views {
        let (b, d) = (batch.anchors.rows(), batch.anchors.cols());
        let mut t1 = Vec::with_capacity(b * d);
        let mut t2 = Vec::with_capacity(b * d);
        let mut t3 = Vec::with_capacity(b * d);
        for (r, &id) in batch.anchor_ids.iter().enumerate() {
            let (a, k, p) =
                policy.sample_three_views(batch.anchors.row(r), batch.positives.row(r), id as u64, batch.step);
            t1.extend(a);
            t2.extend(k);
            t3.extend(p);
        }
        Views {
            student_anchor: Tensor::matrix(b, d, t1),
            teacher_anchor: Tensor::matrix(b, d, t2),
            student_positive: Tensor::matrix(b, d, t3),
        }
    }
}

/// What the student is trained against during distillation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// `L_intra + λ·L_inter`; λ = 0 is the intra-only arm.
    Bingo { lambda_inter: f64 },
    /// Embedding regression onto the teacher key.
    KdL2,
    /// Similarity-graph matching against the teacher keys.
    Rkd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Terms {
    intra: bool,
    inter: Option<f64>,
    kd_l2: bool,
    rkd: bool,
}

/// A built step loss: the graph, its named outputs and the student leaves.
pub struct StepLoss {
    pub graph: Graph,
    pub total: NodeId,
    pub intra: Option<NodeId>,
    pub inter: Option<NodeId>,
    pub student: BoundEncoder,
    /// `f_T(t2(x_a))`, shared by both contrastive terms and fed to the bank.
    pub teacher_keys: Tensor,
    student_embeddings: Vec<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepValues {
    pub total: f64,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

impl StepLoss {
    /// Evaluates the graph; a degenerate student embedding is an error here.
    pub fn evaluate(&self) -> Result<(Evaluation, StepValues)> {
        let eval = self.graph.evaluate(&HashMap::new())?;
        let bad: Vec<usize> = eval
            .degenerate_rows()
            .iter()
            .filter(|(n, _)| self.student_embeddings.contains(n))
            .map(|&(_, r)| r)
            .collect();
        if let Some(&first) = bad.first() {
            return Err(Error::DegenerateEmbedding {
                count: bad.len(),
                first,
            });
        }
        let values = StepValues {
            total: eval.value(self.total).item(),
            intra: self.intra.map(|n| eval.value(n).item()),
            inter: self.inter.map(|n| eval.value(n).item()),
        };
        Ok((eval, values))
    }

    /// Student parameter gradients, in [`EncoderParams::tensors`] order.
    pub fn gradients(&self, eval: &Evaluation) -> Result<Vec<Tensor>> {
        let grads = self.graph.backpropagate(eval, self.total)?;
        Ok(self.student.gradients(&grads))
    }

    pub fn value(&self) -> Result<StepValues> {
        Ok(self.evaluate()?.1)
    }
}

fn teacher_keys(teacher: &EncoderParams, views: &Tensor) -> Result<Tensor> {
    let fwd = encoder_forward(teacher, views)?;
    if let Some(&first) = fwd.degenerate_rows.first() {
        return Err(Error::DegenerateEmbedding {
            count: fwd.degenerate_rows.len(),
            first,
        });
    }
    Ok(fwd.embeddings)
}

fn build(
    student: &EncoderParams,
    teacher: &EncoderParams,
    views: &Views,
    bank: &MemoryBank,
    tau: f64,
    terms: Terms,
) -> Result<StepLoss> {
    if student.spec.embed_dim != teacher.spec.embed_dim || student.spec.input_dim != teacher.spec.input_dim {
        return Err(Error::SpecMismatch(format!(
            "student {:?} and teacher {:?} must share input and embedding widths",
            student.spec, teacher.spec
        )));
    }
    let keys = teacher_keys(teacher, &views.teacher_anchor)?;
    let needs_bank = terms.intra || terms.inter.is_some();
    let mut g = Graph::new();
    let bank_t = if needs_bank {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        let negatives = bank.negatives_view()?;
        Some(g.constant(negatives.transpose()))
    } else {
        None
    };

    let bound = student.bind(&mut g, true);
    let mut student_embeddings = Vec::new();
    let mut parts: Vec<NodeId> = Vec::new();

    let x1 = g.constant(views.student_anchor.clone());
    let q1 = student.build_forward(&mut g, &bound, x1)?.embedding;
    student_embeddings.push(q1);

    let mut intra = None;
    if terms.intra {
        let l = info_nce_against(&mut g, q1, &keys, bank_t.expect("bank"), tau)?;
        intra = Some(l);
        parts.push(l);
    }
    let mut inter = None;
    if let Some(weight) = terms.inter {
        let x3 = g.constant(views.student_positive.clone());
        let q3 = student.build_forward(&mut g, &bound, x3)?.embedding;
        student_embeddings.push(q3);
        let l = info_nce_against(&mut g, q3, &keys, bank_t.expect("bank"), tau)?;
        inter = Some(l);
        parts.push(if weight == 1.0 { l } else { g.scale(l, weight)? });
    }
    if terms.kd_l2 {
        parts.push(kd_l2_node(&mut g, q1, &keys)?);
    }
    if terms.rkd {
        parts.push(rkd_graph_node(&mut g, q1, &keys)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(StepLoss {
        graph: g,
        total,
        intra,
        inter,
        student: bound,
        teacher_keys: keys,
        student_embeddings,
    })
}

/// `InfoNCE(f_S(t1(x_a)), f_T(t2(x_a)))` against the bank.
pub fn intra_loss(
    student: &EncoderParams,
    teacher: &EncoderParams,
    batch: &AnchorBatch<'_>,
    policy: &AugmentationPolicy,
    bank: &MemoryBank,
    tau: f64,
) -> Result<StepLoss> {
    let views = Views::sample(policy, batch);
    build(
        student,
        teacher,
        &views,
        bank,
        tau,
        Terms {
            intra: true,
            ..Terms::default()
        },
    )
}

/// `InfoNCE(f_S(t3(x_p)), f_T(t2(x_a)))` against the bank.
pub fn inter_loss(
    student: &EncoderParams,
    teacher: &EncoderParams,
    batch: &AnchorBatch<'_>,
    policy: &AugmentationPolicy,
    bank: &MemoryBank,
    tau: f64,
) -> Result<StepLoss> {
    let views = Views::sample(policy, batch);
    build(
        student,
        teacher,
        &views,
        bank,
        tau,
        Terms {
            inter: Some(1.0),
            ..Terms::default()
        },
    )
}

/// `L_intra + λ·L_inter` with one positive per anchor.
pub fn bingo_step_loss(
    student: &EncoderParams,
    teacher: &EncoderParams,
    batch: &AnchorBatch<'_>,
    policy: &AugmentationPolicy,
    bank: &MemoryBank,
    tau: f64,
    lambda_inter: f64,
) -> Result<StepLoss> {
    distill_loss(
        student,
        teacher,
        batch,
        policy,
        bank,
        tau,
        Objective::Bingo { lambda_inter },
    )
}

pub fn distill_loss(
    student: &EncoderParams,
    teacher: &EncoderParams,
    batch: &AnchorBatch<'_>,
    policy: &AugmentationPolicy,
    bank: &MemoryBank,
    tau: f64,
    objective: Objective,
) -> Result<StepLoss> {
    let views = Views::sample(policy, batch);
    distill_loss_with_views(student, teacher, &views, bank, tau, objective)
}

/// As [`distill_loss`] with views already drawn.
pub fn distill_loss_with_views(
    student: &EncoderParams,
    teacher: &EncoderParams,
    views: &Views,
    bank: &MemoryBank,
    tau: f64,
    objective: Objective,
) -> Result<StepLoss> {
    let terms = match objective {
        Objective::Bingo { lambda_inter } => Terms {
            intra: true,
            inter: (lambda_inter != 0.0).then_some(lambda_inter),
            ..Terms::default()
        },
        Objective::KdL2 => Terms {
            kd_l2: true,
            ..Terms::default()
        },
        Objective::Rkd => Terms {
            rkd: true,
            ..Terms::default()
        },
    };
    build(student, teacher, views, bank, tau, terms)
}
