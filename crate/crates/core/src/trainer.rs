//! Two-stage training: source-only pre-training of both branches, then graph
//! domain adaptation combining the survival loss, the coupled pseudo-label
//! losses (alternating per iteration), and the adversarial min-max rounds.

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    adversarial_round, coupled_loss_l1, coupled_loss_l2, mean_scalars, Perturbations, RoundConfig,
};
use crate::autodiff::{Optimizer, OptimizerKind, Tape, Tensor};
use crate::encoder::{
    fused_predict, mp_forward, sp_forward, DualEncoderParams, EncoderDims, PreparedGraph,
};
use crate::error::{DetaError, Result};
use crate::survival::{c_index, kaplan_meier, log_rank, risk_score, KmCurve, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

impl From<OptimizerChoice> for OptimizerKind {
    fn from(c: OptimizerChoice) -> Self {
        match c {
            OptimizerChoice::Adam => OptimizerKind::Adam,
            OptimizerChoice::Sgd => OptimizerKind::Sgd,
        }
    }
}

/// Every knob of the two training stages.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub k_bins: usize,
    pub knn_k: usize,
    pub k_sp: usize,
    pub hidden: usize,
    pub mp_layers: usize,
    pub sp_layers: usize,
    pub head_hidden: usize,
    pub dclf_hidden: usize,
    pub lr_encoder: f64,
    pub lr_dclf: f64,
    pub lr_delta: f64,
    pub optimizer: OptimizerChoice,
    pub zeta: f64,
    pub epsilon: f64,
    pub n_d: usize,
    pub pretrain_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_surv: f64,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub lambda_ap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_bins: 4,
            knn_k: 8,
            k_sp: 3,
            hidden: 64,
            mp_layers: 2,
            sp_layers: 2,
            head_hidden: 32,
            dclf_hidden: 32,
            lr_encoder: 0.005,
            lr_dclf: 0.005,
            lr_delta: 0.1,
            optimizer: OptimizerChoice::Adam,
            zeta: 0.8,
            epsilon: 0.5,
            n_d: 1,
            pretrain_epochs: 30,
            adapt_epochs: 30,
            batch_size: 32,
            seed: 7,
            lambda_surv: 1.0,
            lambda_l1: 1.0,
            lambda_l2: 1.0,
            lambda_ap: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k_bins", self.k_bins),
            ("knn_k", self.knn_k),
            ("k_sp", self.k_sp),
            ("hidden", self.hidden),
            ("mp_layers", self.mp_layers),
            ("sp_layers", self.sp_layers),
            ("head_hidden", self.head_hidden),
            ("dclf_hidden", self.dclf_hidden),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(DetaError::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_dclf", self.lr_dclf),
            ("lr_delta", self.lr_delta),
        ] {
            if v <= 0.0 {
                return Err(DetaError::invalid(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.zeta) {
            return Err(DetaError::invalid("zeta must lie in [0, 1)"));
        }
        if self.epsilon < 0.0 {
            return Err(DetaError::invalid("epsilon must be non-negative"));
        }
        for (name, v) in [
            ("lambda_surv", self.lambda_surv),
            ("lambda_l1", self.lambda_l1),
            ("lambda_l2", self.lambda_l2),
            ("lambda_ap", self.lambda_ap),
        ] {
            if v < 0.0 {
                return Err(DetaError::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn dims_for(&self, feat_dim: usize) -> EncoderDims {
        EncoderDims {
            feat_dim,
            hidden: self.hidden,
            mp_layers: self.mp_layers,
            sp_layers: self.sp_layers,
            k_sp: self.k_sp,
            k_bins: self.k_bins,
            head_hidden: self.head_hidden,
            dclf_hidden: self.dclf_hidden,
        }
    }
}

/// Seeded parameter initialization for this config and feature width.
pub fn init_params(cfg: &TrainConfig, feat_dim: usize) -> Result<DualEncoderParams> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    DualEncoderParams::init(cfg.dims_for(feat_dim), &mut rng)
}

/// Fresh tensors with copied values; training mutates the copy only.
pub fn deep_clone(params: &DualEncoderParams) -> DualEncoderParams {
    let clone_t = |t: &Tensor| Tensor::new(t.shape(), t.data()).expect("same shape");
    DualEncoderParams {
        dims: params.dims.clone(),
        mp_layers: params.mp_layers.iter().map(&clone_t).collect(),
        sp_layers: params
            .sp_layers
            .iter()
            .map(|l| crate::encoder::SpLayer {
                combine: clone_t(&l.combine),
                aggregate: clone_t(&l.aggregate),
            })
            .collect(),
        head_mp: clone_mlp(&params.head_mp, &clone_t),
        head_sp: clone_mlp(&params.head_sp, &clone_t),
        dclf: clone_mlp(&params.dclf, &clone_t),
    }
}

fn clone_mlp(
    mlp: &crate::encoder::Mlp,
    clone_t: &impl Fn(&Tensor) -> Tensor,
) -> crate::encoder::Mlp {
    crate::encoder::Mlp {
        layers: mlp
            .layers
            .iter()
            .map(|l| crate::encoder::Linear {
                weight: clone_t(&l.weight),
                bias: clone_t(&l.bias),
            })
            .collect(),
    }
}

// ── Survival loss on the tape ────────────────────────────────────────

/// Discrete-time NLL of one hazard row against one label, on the tape:
/// uncensored `-[log S(y) + log h(y)]`, censored `-log S(min(y+1, K))`,
/// with `log S(y) = sum_{j<=y} log(1 - h_j)`.
fn nll_on_tape(tape: &Tape, hazard: &Tensor, time_bin: usize, uncensored: bool) -> Result<Tensor> {
    let k = hazard.numel();
    if time_bin == 0 || time_bin > k {
        return Err(DetaError::DimensionMismatch {
            field: "time_bin".into(),
            expected: format!("within [1, {k}]"),
            found: time_bin.to_string(),
        });
    }
    let ones = Tensor::filled(hazard.shape(), 1.0);
    let one_minus = tape.add(&tape.neg(hazard)?, &ones)?;
    let log_surv_terms = tape.log(&tape.clamp_min(&one_minus, PROB_FLOOR)?)?;
    let prefix_mask = |upto: usize| -> Result<Tensor> {
        let mut m = vec![0.0; k];
        m[..upto].iter_mut().for_each(|v| *v = 1.0);
        Tensor::new(hazard.shape(), m)
    };
    if uncensored {
        let log_s = tape.sum(&tape.mul(&log_surv_terms, &prefix_mask(time_bin)?)?)?;
        let mut onehot = vec![0.0; k];
        onehot[time_bin - 1] = 1.0;
        let e_y = Tensor::new(hazard.shape(), onehot)?;
        let log_h = tape.sum(&tape.mul(
            &tape.log(&tape.clamp_min(hazard, PROB_FLOOR)?)?,
            &e_y,
        )?)?;
        tape.neg(&tape.add(&log_s, &log_h)?)
    } else {
        let upto = (time_bin + 1).min(k);
        let log_s = tape.sum(&tape.mul(&log_surv_terms, &prefix_mask(upto)?)?)?;
        tape.neg(&log_s)
    }
}

/// Mean over the batch of the summed branch NLLs (both hazard heads).
pub fn batch_survival_loss(
    tape: &Tape,
    params: &DualEncoderParams,
    batch: &[&PreparedGraph],
) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(batch.len());
    for g in batch {
        let label = g
            .graph
            .label
            .ok_or_else(|| DetaError::invalid("survival loss needs labeled graphs"))?;
        let mp = mp_forward(tape, g, params, None)?;
        let sp = sp_forward(tape, g, params, None)?;
        let nll_mp = nll_on_tape(tape, &mp.hazard, label.time_bin, label.uncensored)?;
        let nll_sp = nll_on_tape(tape, &sp.hazard, label.time_bin, label.uncensored)?;
        parts.push(tape.add(&nll_mp, &nll_sp)?);
    }
    mean_scalars(tape, &parts)
}

// ── Pre-training ─────────────────────────────────────────────────────

pub struct PretrainOutput {
    pub params: DualEncoderParams,
    /// Mean per-graph loss per epoch.
    pub trace: Vec<f64>,
}

fn check_labeled(data: &[PreparedGraph], k_bins: usize, stage: &str) -> Result<()> {
    if data.is_empty() {
        return Err(DetaError::Empty(format!("{stage}: empty dataset")));
    }
    for g in data {
        match g.graph.label {
            None => {
                return Err(DetaError::invalid(format!(
                    "{stage}: dataset contains unlabeled graphs"
                )))
            }
            Some(l) if l.time_bin > k_bins => {
                return Err(DetaError::DimensionMismatch {
                    field: "time_bin".into(),
                    expected: format!("<= {k_bins}"),
                    found: l.time_bin.to_string(),
                });
            }
            _ => {}
        }
    }
    Ok(())
}

fn check_feat_dim(data: &[PreparedGraph], feat_dim: usize) -> Result<()> {
    for g in data {
        if g.graph.feat_dim() != feat_dim {
            return Err(DetaError::DimensionMismatch {
                field: "feat_dim".into(),
                expected: feat_dim.to_string(),
                found: g.graph.feat_dim().to_string(),
            });
        }
    }
    Ok(())
}

/// Trains both branches on the labeled source domain with the survival NLL.
pub fn pretrain(source: &[PreparedGraph], cfg: &TrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    check_labeled(source, cfg.k_bins, "pretrain")?;
    let feat_dim = source[0].graph.feat_dim();
    check_feat_dim(source, feat_dim)?;
    let params = init_params(cfg, feat_dim)?;
    let mut opt = Optimizer::new(cfg.optimizer.into(), cfg.lr_encoder);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);

    let encoder_tensors = params.encoder_tensors();
    let mut trace = Vec::with_capacity(cfg.pretrain_epochs);
    let mut order: Vec<usize> = (0..source.len()).collect();
    for _epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedGraph> = chunk.iter().map(|&i| &source[i]).collect();
            let tape = Tape::new();
            let loss = batch_survival_loss(&tape, &params, &batch)?;
            epoch_loss += loss.item() * batch.len() as f64;
            tape.backward(&loss)?;
            let refs: Vec<&Tensor> = encoder_tensors.iter().collect();
            opt.step(&refs)?;
        }
        let mean = epoch_loss / source.len() as f64;
        if !mean.is_finite() {
            return Err(DetaError::invalid("pretrain loss became non-finite"));
        }
        trace.push(mean);
    }
    Ok(PretrainOutput { params, trace })
}

// ── Adaptation ───────────────────────────────────────────────────────

/// Per-epoch means of every loss term active during adaptation.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdaptEpoch {
    pub l_surv: f64,
    pub l1: f64,
    pub l2: f64,
    pub l_ap: f64,
}

pub struct AdaptOutput {
    pub params: DualEncoderParams,
    pub trace: Vec<AdaptEpoch>,
    pub coupling_l1_steps: usize,
    pub coupling_l2_steps: usize,
}

/// Fine-tunes pretrained parameters with the full adaptation objective:
/// per iteration one adversarial round, then a descent step on the survival
/// loss plus one coupled loss, alternating L1 (even iterations) and L2 (odd).
/// Target labels are never read; if present they are ignored with a warning.
pub fn adapt(
    pretrained: &DualEncoderParams,
    source: &[PreparedGraph],
    target: &[PreparedGraph],
    cfg: &TrainConfig,
) -> Result<AdaptOutput> {
    cfg.validate()?;
    check_labeled(source, cfg.k_bins, "adapt")?;
    if target.is_empty() {
        return Err(DetaError::Empty("adapt: empty target dataset".into()));
    }
    let feat_dim = pretrained.dims.feat_dim;
    check_feat_dim(source, feat_dim)?;
    check_feat_dim(target, feat_dim)?;
    if target.iter().any(|g| g.graph.label.is_some()) {
        log::warn!("adapt: target dataset carries labels; they are ignored");
    }
    // Physically strip target labels so nothing downstream can read them.
    let target: Vec<PreparedGraph> = target
        .iter()
        .map(|g| {
            let mut g = g.clone();
            g.graph.label = None;
            g
        })
        .collect();

    let params = deep_clone(pretrained);
    let mut enc_opt = Optimizer::new(cfg.optimizer.into(), cfg.lr_encoder);
    let mut dclf_opt = Optimizer::new(cfg.optimizer.into(), cfg.lr_dclf);
    let mut perts = Perturbations::zeros(source, cfg.epsilon);
    let round_cfg = RoundConfig {
        n_d: cfg.n_d,
        lambda_ap: cfg.lambda_ap,
        lr_delta: cfg.lr_delta,
    };
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(3);

    let mut src_order: Vec<usize> = (0..source.len()).collect();
    let mut tgt_order: Vec<usize> = (0..target.len()).collect();
    let mut iteration = 0usize;
    let mut l1_steps = 0usize;
    let mut l2_steps = 0usize;
    let mut trace = Vec::with_capacity(cfg.adapt_epochs);

    for _epoch in 0..cfg.adapt_epochs {
        src_order.shuffle(&mut shuffle_rng);
        tgt_order.shuffle(&mut shuffle_rng);
        let mut tgt_cursor = 0usize;
        let mut sums = AdaptEpoch::default();
        let mut n_iters = 0usize;
        let mut n_l1 = 0usize;
        let mut n_l2 = 0usize;

        for chunk in src_order.chunks(cfg.batch_size) {
            let src_batch: Vec<(usize, &PreparedGraph)> =
                chunk.iter().map(|&i| (i, &source[i])).collect();
            let tgt_batch: Vec<&PreparedGraph> = (0..chunk.len())
                .map(|_| {
                    let g = &target[tgt_order[tgt_cursor]];
                    tgt_cursor = (tgt_cursor + 1) % target.len();
                    g
                })
                .collect();

            let stats = adversarial_round(
                &params,
                &src_batch,
                &tgt_batch,
                &mut perts,
                &mut dclf_opt,
                &mut enc_opt,
                &round_cfg,
            )?;
            sums.l_ap += stats.l_ap;

            // Coupling step: survival loss plus the alternating coupled loss.
            let use_l1 = iteration % 2 == 0;
            let lambda_x = if use_l1 { cfg.lambda_l1 } else { cfg.lambda_l2 };
            let src_refs: Vec<&PreparedGraph> = src_batch.iter().map(|&(_, g)| g).collect();
            let tape = Tape::new();
            let mut terms: Vec<Tensor> = Vec::new();
            if cfg.lambda_surv > 0.0 {
                let l_surv = batch_survival_loss(&tape, &params, &src_refs)?;
                sums.l_surv += l_surv.item();
                terms.push(tape.scalar_mul(&l_surv, cfg.lambda_surv)?);
            }
            if lambda_x > 0.0 {
                let lx = if use_l1 {
                    coupled_loss_l1(&tape, &params, &src_refs, &tgt_batch, cfg.zeta)?
                } else {
                    coupled_loss_l2(&tape, &params, &src_refs, &tgt_batch, cfg.zeta)?
                };
                if use_l1 {
                    sums.l1 += lx.item();
                    n_l1 += 1;
                } else {
                    sums.l2 += lx.item();
                    n_l2 += 1;
                }
                terms.push(tape.scalar_mul(&lx, lambda_x)?);
            }
            if use_l1 {
                l1_steps += 1;
            } else {
                l2_steps += 1;
            }
            if !terms.is_empty() {
                let mut loss = terms[0].clone();
                for t in &terms[1..] {
                    loss = tape.add(&loss, t)?;
                }
                tape.backward(&loss)?;
                let encoder_tensors = params.encoder_tensors();
                let with_grads: Vec<&Tensor> = encoder_tensors
                    .iter()
                    .filter(|t| t.grad().is_some())
                    .collect();
                enc_opt.step(&with_grads)?;
            }
            iteration += 1;
            n_iters += 1;
        }

        let epoch = AdaptEpoch {
            l_surv: sums.l_surv / n_iters.max(1) as f64,
            l1: sums.l1 / n_l1.max(1) as f64,
            l2: sums.l2 / n_l2.max(1) as f64,
            l_ap: sums.l_ap / n_iters.max(1) as f64,
        };
        for v in [epoch.l_surv, epoch.l1, epoch.l2, epoch.l_ap] {
            if !v.is_finite() {
                return Err(DetaError::invalid("adaptation loss became non-finite"));
            }
        }
        trace.push(epoch);
    }
    Ok(AdaptOutput {
        params,
        trace,
        coupling_l1_steps: l1_steps,
        coupling_l2_steps: l2_steps,
    })
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Metrics of one labeled dataset under frozen parameters.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub n_graphs: usize,
    pub c_index: f64,
    pub median_risk: f64,
    /// Kaplan-Meier curves of the low/high risk groups (median split);
    /// absent when one group is empty (all risks tied).
    pub km_low: Option<KmCurve>,
    pub km_high: Option<KmCurve>,
    /// Log-rank (statistic, p-value) for the same split.
    pub logrank: Option<(f64, f64)>,
    pub risks: Vec<f64>,
}

/// Fused per-graph prediction, risk scoring, concordance, and median-risk
/// stratification with Kaplan-Meier curves and a log-rank test.
pub fn evaluate(params: &DualEncoderParams, data: &[PreparedGraph]) -> Result<EvalReport> {
    if data.len() < 2 {
        return Err(DetaError::invalid("evaluate needs at least 2 graphs"));
    }
    let mut risks = Vec::with_capacity(data.len());
    let mut bins = Vec::with_capacity(data.len());
    let mut events = Vec::with_capacity(data.len());
    for g in data {
        let label = g
            .graph
            .label
            .ok_or_else(|| DetaError::invalid("evaluate needs labeled graphs"))?;
        let hazard = fused_predict(g, params)?;
        risks.push(risk_score(&hazard));
        bins.push(label.time_bin);
        events.push(label.uncensored);
    }
    let c = c_index(&risks, &bins, &events)?;

    let mut sorted = risks.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let high: Vec<usize> = (0..n).filter(|&i| risks[i] > median).collect();
    let low: Vec<usize> = (0..n).filter(|&i| risks[i] <= median).collect();
    let (km_low, km_high, logrank) = if high.is_empty() || low.is_empty() {
        (None, None, None)
    } else {
        let times = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) {
            (
                idx.iter().map(|&i| bins[i] as f64).collect(),
                idx.iter().map(|&i| events[i]).collect(),
            )
        };
        let (tl, el) = times(&low);
        let (th, eh) = times(&high);
        let lr = log_rank(&tl, &el, &th, &eh).ok();
        (
            Some(kaplan_meier(&tl, &el)?),
            Some(kaplan_meier(&th, &eh)?),
            lr,
        )
    };
    Ok(EvalReport {
        n_graphs: n,
        c_index: c,
        median_risk: median,
        km_low,
        km_high,
        logrank,
        risks,
    })
}

/// Shuffles the labels of a labeled dataset; the permutation-null control.
pub fn shuffle_labels(data: &[PreparedGraph], seed: u64) -> Vec<PreparedGraph> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut labels: Vec<_> = data.iter().map(|g| g.graph.label).collect();
    labels.shuffle(&mut rng);
    data.iter()
        .zip(labels)
        .map(|(g, label)| {
            let mut g = g.clone();
            g.graph.label = label;
            g
        })
        .collect()
}
