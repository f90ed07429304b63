//! Two-level domain alignment.
//!
//! Category level: each branch pseudo-labels the target graphs for the other
//! branch, filtered by a confidence threshold `zeta`, giving the coupled
//! losses [`coupled_loss_l1`] / [`coupled_loss_l2`]. Feature level: learnable
//! per-node perturbations on source features are optimized adversarially
//! against a domain classifier ([`adversarial_round`]), with every row
//! projected back into an epsilon ball.

use crate::autodiff::{Optimizer, Tape, Tensor};
use crate::encoder::{
    domain_classifier, mp_forward, sp_forward, BranchOutput, DualEncoderParams, PreparedGraph,
};
use crate::error::{DetaError, Result};
use crate::survival::PROB_FLOOR;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Mp,
    Sp,
}

impl Branch {
    pub fn other(self) -> Branch {
        match self {
            Branch::Mp => Branch::Sp,
            Branch::Sp => Branch::Mp,
        }
    }
}

/// Forward through the selected branch.
pub fn branch_forward(
    tape: &Tape,
    branch: Branch,
    g: &PreparedGraph,
    params: &DualEncoderParams,
    delta: Option<&Tensor>,
) -> Result<BranchOutput> {
    match branch {
        Branch::Mp => mp_forward(tape, g, params, delta),
        Branch::Sp => sp_forward(tape, g, params, delta),
    }
}

// ── Pseudo-label filtering ───────────────────────────────────────────

/// Target graphs that survived the confidence filter, with their labels.
#[derive(Clone, Debug, Default)]
pub struct PseudoLabelBatch {
    /// Indices into the filtered batch (positions of the kept graphs).
    pub kept_indices: Vec<usize>,
    /// Argmax bins (1-based), ties resolved toward the smaller bin.
    pub labels: Vec<usize>,
    /// Max probabilities of the kept graphs under the filtering branch.
    pub source_confidences: Vec<f64>,
}

/// Keeps exactly the graphs whose max probability exceeds `zeta`.
pub fn filter_pseudo_labels(dists: &[Vec<f64>], zeta: f64) -> Result<PseudoLabelBatch> {
    if !(0.0..1.0).contains(&zeta) {
        return Err(DetaError::invalid(format!(
            "zeta must lie in [0, 1), got {zeta}"
        )));
    }
    let mut batch = PseudoLabelBatch::default();
    for (i, dist) in dists.iter().enumerate() {
        let (mut best, mut best_p) = (0usize, f64::NEG_INFINITY);
        for (j, &p) in dist.iter().enumerate() {
            if p > best_p {
                best = j;
                best_p = p;
            }
        }
        if best_p > zeta {
            batch.kept_indices.push(i);
            batch.labels.push(best + 1);
            batch.source_confidences.push(best_p);
        }
    }
    Ok(batch)
}

// ── Loss building blocks ─────────────────────────────────────────────

/// Mean of a non-empty list of scalar tensors, on the tape.
pub fn mean_scalars(tape: &Tape, parts: &[Tensor]) -> Result<Tensor> {
    let mut stacked = parts
        .first()
        .ok_or_else(|| DetaError::Empty("mean over no scalars".into()))?
        .clone();
    for p in &parts[1..] {
        stacked = tape.concat_cols(&stacked, p)?;
    }
    tape.mean(&stacked)
}

/// `-log hazard[bin]` with the probability floored before the log.
fn cross_entropy_at(tape: &Tape, hazard: &Tensor, bin: usize) -> Result<Tensor> {
    let k = hazard.numel();
    if bin == 0 || bin > k {
        return Err(DetaError::invalid(format!("label bin {bin} outside [1, {k}]")));
    }
    let mut onehot = vec![0.0; k];
    onehot[bin - 1] = 1.0;
    let mask = Tensor::new(hazard.shape(), onehot)?;
    let log_h = tape.log(&tape.clamp_min(hazard, PROB_FLOOR)?)?;
    tape.neg(&tape.sum(&tape.mul(&log_h, &mask)?)?)
}

/// Confidence-filtered pseudo-label cross-entropy: `producer` labels the
/// target batch (no gradient flows through it), `producer.other()` is scored
/// on the kept graphs. Returns `None` when the filter keeps nothing.
pub fn pseudo_label_term(
    tape: &Tape,
    params: &DualEncoderParams,
    producer: Branch,
    target: &[&PreparedGraph],
    zeta: f64,
) -> Result<Option<Tensor>> {
    // Label pass on a throwaway tape: predictions become plain integers, so
    // no gradient can reach the producing branch.
    let dists: Vec<Vec<f64>> = target
        .iter()
        .map(|g| {
            let scratch = Tape::new();
            branch_forward(&scratch, producer, g, params, None).map(|o| o.hazard.data())
        })
        .collect::<Result<_>>()?;
    let batch = filter_pseudo_labels(&dists, zeta)?;
    if batch.kept_indices.is_empty() {
        return Ok(None);
    }
    let student = producer.other();
    let mut parts = Vec::with_capacity(batch.kept_indices.len());
    for (&idx, &label) in batch.kept_indices.iter().zip(&batch.labels) {
        let out = branch_forward(tape, student, target[idx], params, None)?;
        parts.push(cross_entropy_at(tape, &out.hazard, label)?);
    }
    Ok(Some(mean_scalars(tape, &parts)?))
}

/// Mean cross-entropy of `branch` on the true source labels.
fn source_ce_term(
    tape: &Tape,
    params: &DualEncoderParams,
    branch: Branch,
    source: &[&PreparedGraph],
) -> Result<Tensor> {
    if source.is_empty() {
        return Err(DetaError::Empty("coupled loss needs a source batch".into()));
    }
    let mut parts = Vec::with_capacity(source.len());
    for g in source {
        let label = g.graph.label.ok_or_else(|| {
            DetaError::invalid("coupled loss: source graph missing survival label")
        })?;
        let out = branch_forward(tape, branch, g, params, None)?;
        parts.push(cross_entropy_at(tape, &out.hazard, label.time_bin)?);
    }
    mean_scalars(tape, &parts)
}

/// Coupled loss with the MP branch as the pseudo-label producer: the SP
/// branch learns the MP-filtered target labels while the MP branch fits the
/// source labels.
pub fn coupled_loss_l1(
    tape: &Tape,
    params: &DualEncoderParams,
    source: &[&PreparedGraph],
    target: &[&PreparedGraph],
    zeta: f64,
) -> Result<Tensor> {
    let source_term = source_ce_term(tape, params, Branch::Mp, source)?;
    match pseudo_label_term(tape, params, Branch::Mp, target, zeta)? {
        Some(pseudo) => tape.add(&pseudo, &source_term),
        None => Ok(source_term),
    }
}

/// Mirror image of [`coupled_loss_l1`] with branch roles exchanged.
pub fn coupled_loss_l2(
    tape: &Tape,
    params: &DualEncoderParams,
    source: &[&PreparedGraph],
    target: &[&PreparedGraph],
    zeta: f64,
) -> Result<Tensor> {
    let source_term = source_ce_term(tape, params, Branch::Sp, source)?;
    match pseudo_label_term(tape, params, Branch::Sp, target, zeta)? {
        Some(pseudo) => tape.add(&pseudo, &source_term),
        None => Ok(source_term),
    }
}

// ── Adversarial feature alignment ────────────────────────────────────

/// `log D` / `log(1 - D)` of one branch output, clamped away from 0.
fn log_d(tape: &Tape, params: &DualEncoderParams, out: &BranchOutput, of_source: bool) -> Result<Tensor> {
    let p = domain_classifier(tape, params, &out.graph_embedding, out.category_dist())?;
    let arg = if of_source {
        p
    } else {
        let one = Tensor::filled(vec![1, 1], 1.0);
        tape.add(&tape.neg(&p)?, &one)?
    };
    tape.sum(&tape.log(&tape.clamp_min(&arg, PROB_FLOOR)?)?)
}

/// Eq.-style adversarial objective:
/// `mean_target log(1 - D(H, p)) + mean_source log D(H, p)`.
/// Source outputs must be computed with perturbations applied, target outputs
/// without; every branch output is one sample for the shared classifier.
pub fn adversarial_loss(
    tape: &Tape,
    params: &DualEncoderParams,
    source_outputs: &[BranchOutput],
    target_outputs: &[BranchOutput],
) -> Result<Tensor> {
    if source_outputs.is_empty() || target_outputs.is_empty() {
        return Err(DetaError::Empty(
            "adversarial loss needs outputs from both domains".into(),
        ));
    }
    let src_terms: Vec<Tensor> = source_outputs
        .iter()
        .map(|o| log_d(tape, params, o, true))
        .collect::<Result<_>>()?;
    let tgt_terms: Vec<Tensor> = target_outputs
        .iter()
        .map(|o| log_d(tape, params, o, false))
        .collect::<Result<_>>()?;
    tape.add(
        &mean_scalars(tape, &tgt_terms)?,
        &mean_scalars(tape, &src_terms)?,
    )
}

// ── Perturbations ────────────────────────────────────────────────────

/// Per-graph additive feature offsets for both branches.
#[derive(Clone, Debug)]
pub struct GraphDeltas {
    pub mp: Tensor,
    pub sp: Tensor,
}

/// One delta pair per source graph, all rows bounded by `epsilon`.
#[derive(Clone, Debug)]
pub struct Perturbations {
    pub epsilon: f64,
    deltas: Vec<GraphDeltas>,
}

impl Perturbations {
    /// Zero-initialized offsets matching each graph's feature matrix.
    pub fn zeros(graphs: &[PreparedGraph], epsilon: f64) -> Self {
        let deltas = graphs
            .iter()
            .map(|g| {
                let shape = vec![g.node_count(), g.graph.feat_dim()];
                GraphDeltas {
                    mp: Tensor::zeros(shape.clone()),
                    sp: Tensor::zeros(shape),
                }
            })
            .collect();
        Perturbations { epsilon, deltas }
    }

    pub fn get(&self, graph_index: usize) -> &GraphDeltas {
        &self.deltas[graph_index]
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Projects both offsets of one graph back into the epsilon ball.
    pub fn project(&mut self, graph_index: usize) {
        for t in [&self.deltas[graph_index].mp, &self.deltas[graph_index].sp] {
            let shape = t.shape();
            let mut data = t.data();
            project_rows_in_place(&mut data, shape[1], self.epsilon);
            t.set_data(data).expect("projection preserves shape");
        }
    }

    /// Largest per-node row norm across both offsets of one graph.
    pub fn max_row_norm(&self, graph_index: usize) -> f64 {
        let mut max = 0.0f64;
        for t in [&self.deltas[graph_index].mp, &self.deltas[graph_index].sp] {
            let shape = t.shape();
            let data = t.data();
            for row in data.chunks(shape[1]) {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                max = max.max(norm);
            }
        }
        max
    }
}

fn project_rows_in_place(data: &mut [f64], width: usize, epsilon: f64) {
    // The relative slack keeps the projection exactly idempotent: a row
    // rescaled to norm epsilon can re-measure a few ulps above it.
    let bound = epsilon * (1.0 + 1e-12);
    for row in data.chunks_mut(width) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > bound {
            let scale = if norm > 0.0 { epsilon / norm } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }
}

/// Rescales every row with Euclidean norm above `epsilon` to norm exactly
/// `epsilon`; rows inside the ball are untouched.
pub fn project_perturbation(delta: &[f64], width: usize, epsilon: f64) -> Result<Vec<f64>> {
    if epsilon < 0.0 {
        return Err(DetaError::invalid("epsilon must be non-negative"));
    }
    if width == 0 || delta.len() % width != 0 {
        return Err(DetaError::invalid(format!(
            "delta length {} is not a multiple of width {width}",
            delta.len()
        )));
    }
    let mut out = delta.to_vec();
    project_rows_in_place(&mut out, width, epsilon);
    Ok(out)
}

// ── The adversarial round ────────────────────────────────────────────

/// Knobs of one min-max round.
#[derive(Clone, Copy, Debug)]
pub struct RoundConfig {
    pub n_d: usize,
    pub lambda_ap: f64,
    pub lr_delta: f64,
}

/// Loss values observed during a round.
#[derive(Clone, Copy, Debug, Default)]
pub struct RoundStats {
    /// L_AP after the classifier ascent steps (the value the descent sees).
    pub l_ap: f64,
}

fn forward_batches(
    tape: &Tape,
    params: &DualEncoderParams,
    source: &[(usize, &PreparedGraph)],
    target: &[&PreparedGraph],
    perturbations: &Perturbations,
    use_delta: bool,
) -> Result<(Vec<BranchOutput>, Vec<BranchOutput>)> {
    let mut src = Vec::with_capacity(source.len() * 2);
    for &(idx, g) in source {
        let (dmp, dsp) = if use_delta {
            let d = perturbations.get(idx);
            (Some(d.mp.clone()), Some(d.sp.clone()))
        } else {
            (None, None)
        };
        src.push(mp_forward(tape, g, params, dmp.as_ref())?);
        src.push(sp_forward(tape, g, params, dsp.as_ref())?);
    }
    let mut tgt = Vec::with_capacity(target.len() * 2);
    for g in target {
        tgt.push(mp_forward(tape, g, params, None)?);
        tgt.push(sp_forward(tape, g, params, None)?);
    }
    Ok((src, tgt))
}

/// One min-max round: `n_d` ascent steps on the domain classifier with the
/// encoder and offsets frozen, then one descent step on the offsets and the
/// encoder with the classifier frozen, then projection back into the epsilon
/// ball. A zero `lambda_ap` skips the round entirely.
pub fn adversarial_round(
    params: &DualEncoderParams,
    source: &[(usize, &PreparedGraph)],
    target: &[&PreparedGraph],
    perturbations: &mut Perturbations,
    dclf_opt: &mut Optimizer,
    encoder_opt: &mut Optimizer,
    cfg: &RoundConfig,
) -> Result<RoundStats> {
    if cfg.lambda_ap == 0.0 {
        return Ok(RoundStats::default());
    }
    let use_delta = perturbations.epsilon > 0.0;
    let dclf_tensors = params.dclf_tensors();

    // (a) classifier ascent: maximize L_AP by descending on -L_AP.
    for _ in 0..cfg.n_d {
        let tape = Tape::new();
        let (src, tgt) = forward_batches(&tape, params, source, target, perturbations, use_delta)?;
        let l_ap = adversarial_loss(&tape, params, &src, &tgt)?;
        let objective = tape.neg(&l_ap)?;
        tape.backward(&objective)?;
        let refs: Vec<&Tensor> = dclf_tensors.iter().collect();
        dclf_opt.step(&refs)?;
    }

    // (b) one descent step on encoder and offsets, classifier frozen.
    let tape = Tape::new();
    let (src, tgt) = forward_batches(&tape, params, source, target, perturbations, use_delta)?;
    let l_ap = adversarial_loss(&tape, params, &src, &tgt)?;
    let stats = RoundStats { l_ap: l_ap.item() };
    let objective = tape.scalar_mul(&l_ap, cfg.lambda_ap)?;
    tape.backward(&objective)?;
    let encoder_tensors = params.encoder_tensors();
    let refs: Vec<&Tensor> = encoder_tensors.iter().collect();
    encoder_opt.step(&refs)?;
    if use_delta {
        for &(idx, _) in source {
            let d = perturbations.get(idx);
            for t in [d.mp.clone(), d.sp.clone()] {
                if let Some(grad) = t.take_grad() {
                    let lr = cfg.lr_delta;
                    t.update_data(|i, v| v - lr * grad[i]);
                }
            }
            // (c) projection keeps every row inside the epsilon ball.
            perturbations.project(idx);
        }
    }
    Ok(stats)
}
