//! Paired source/target synthetic graph-survival datasets with controllable
//! domain shift.
//!
//! Each graph draws a latent risk class; node features come from a
//! class-specific Gaussian (target means translated by `mu_shift` along a
//! fixed random direction, covariance scaled by `sigma_shift`), edges from a
//! KNN graph, and the event time from a class-constant geometric hazard over
//! the bins. Category shift is realized by skewing the target's class prior.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DetaError, Result};
use crate::graphs::{knn_graph, Domain, SurvivalLabel, WSIGraph};

/// Standard deviation of the class mean locations.
const CLASS_MEAN_SPREAD: f64 = 0.45;
/// Per-node feature noise around the class mean (source scale).
const NODE_NOISE: f64 = 1.0;
/// Hazard ladder endpoints: class 0 is the least risky, class L-1 the most.
const HAZARD_LO: f64 = 0.008;
const HAZARD_HI: f64 = 0.995;

/// Generator configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftConfig {
    pub graphs_per_domain: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub feature_dim: usize,
    pub latent_classes: usize,
    pub mu_shift: f64,
    pub sigma_shift: f64,
    /// Class prior of the target domain; the source prior is uniform.
    pub target_prior: Vec<f64>,
    pub censor_rate: f64,
    pub k_bins: usize,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            graphs_per_domain: 400,
            nodes_min: 15,
            nodes_max: 25,
            feature_dim: 8,
            latent_classes: 4,
            mu_shift: 2.0,
            sigma_shift: 1.0,
            target_prior: vec![0.1, 0.2, 0.3, 0.4],
            censor_rate: 0.15,
            k_bins: 4,
            knn_k: 8,
            seed: 7,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_classes < 1 {
            return Err(DetaError::invalid("latent_classes must be >= 1"));
        }
        if self.graphs_per_domain == 0 {
            return Err(DetaError::invalid("graphs_per_domain must be positive"));
        }
        if self.nodes_min < 2 || self.nodes_max < self.nodes_min {
            return Err(DetaError::invalid("node range must satisfy 2 <= min <= max"));
        }
        if self.knn_k == 0 || self.knn_k >= self.nodes_min {
            return Err(DetaError::invalid(format!(
                "knn_k={} must satisfy 1 <= k < nodes_min={}",
                self.knn_k, self.nodes_min
            )));
        }
        if self.feature_dim == 0 {
            return Err(DetaError::invalid("feature_dim must be positive"));
        }
        if self.k_bins < 2 {
            return Err(DetaError::invalid("k_bins must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.censor_rate) {
            return Err(DetaError::invalid("censor_rate must lie in [0, 1]"));
        }
        if self.target_prior.len() != self.latent_classes {
            return Err(DetaError::invalid(format!(
                "target_prior has {} entries for {} classes",
                self.target_prior.len(),
                self.latent_classes
            )));
        }
        if self.target_prior.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(DetaError::invalid("target_prior entries must lie in [0, 1]"));
        }
        let sum: f64 = self.target_prior.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DetaError::invalid(format!(
                "target_prior must sum to 1, got {sum}"
            )));
        }
        if self.sigma_shift <= 0.0 {
            return Err(DetaError::invalid("sigma_shift must be positive"));
        }
        Ok(())
    }
}

/// Per-class geometric hazards, logit-linear between the ladder endpoints.
/// Extreme classes concentrate on the first and last bins, which keeps the
/// class ordering recoverable from discretized times.
pub fn class_hazards(latent_classes: usize) -> Vec<f64> {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let (lo, hi) = (logit(HAZARD_LO), logit(HAZARD_HI));
    (0..latent_classes)
        .map(|l| {
            let t = if latent_classes == 1 {
                0.5
            } else {
                l as f64 / (latent_classes - 1) as f64
            };
            let z = lo + (hi - lo) * t;
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}

/// Exact bin distribution of the geometric hazard clamped to `k_bins`.
pub fn bin_pmf(rho: f64, k_bins: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k_bins);
    let mut surv = 1.0;
    for _ in 1..k_bins {
        out.push(surv * rho);
        surv *= 1.0 - rho;
    }
    out.push(surv);
    out
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; consumes two uniforms per draw.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_class<R: Rng>(prior: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (i, &p) in prior.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    prior.len() - 1
}

struct DomainSetup {
    class_means: Vec<Vec<f64>>,
    shift: Vec<f64>,
    hazards: Vec<f64>,
}

fn setup(cfg: &ShiftConfig) -> DomainSetup {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let class_means = (0..cfg.latent_classes)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| CLASS_MEAN_SPREAD * standard_normal(&mut rng))
                .collect()
        })
        .collect();
    let mut shift: Vec<f64> = (0..cfg.feature_dim)
        .map(|_| standard_normal(&mut rng))
        .collect();
    let norm = shift.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut shift {
        *v *= cfg.mu_shift / norm;
    }
    DomainSetup {
        class_means,
        shift,
        hazards: class_hazards(cfg.latent_classes),
    }
}

fn generate_graph(
    cfg: &ShiftConfig,
    setup: &DomainSetup,
    domain: Domain,
    index: usize,
) -> Result<WSIGraph> {
    // Per-graph derived stream keeps generation order-independent.
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let domain_tag: u64 = match domain {
        Domain::Source => 1,
        Domain::Target => 2,
    };
    rng.set_stream((domain_tag << 32) | (index as u64 + 1));

    let uniform = vec![1.0 / cfg.latent_classes as f64; cfg.latent_classes];
    let prior = match domain {
        Domain::Source => &uniform,
        Domain::Target => &cfg.target_prior,
    };
    let class = sample_class(prior, &mut rng);
    let n = rng.gen_range(cfg.nodes_min..=cfg.nodes_max);
    let noise = match domain {
        Domain::Source => NODE_NOISE,
        Domain::Target => NODE_NOISE * cfg.sigma_shift,
    };
    let mut features = Vec::with_capacity(n * cfg.feature_dim);
    for _ in 0..n {
        for j in 0..cfg.feature_dim {
            let mut v = setup.class_means[class][j] + noise * standard_normal(&mut rng);
            if domain == Domain::Target {
                v += setup.shift[j];
            }
            features.push(v);
        }
    }
    let edges = knn_graph(&features, n, cfg.feature_dim, cfg.knn_k)?;

    let rho = setup.hazards[class];
    let mut event_bin = cfg.k_bins;
    for t in 1..cfg.k_bins {
        if rng.gen_range(0.0..1.0) < rho {
            event_bin = t;
            break;
        }
    }
    let label = if cfg.censor_rate > 0.0 && rng.gen_range(0.0..1.0) < cfg.censor_rate {
        SurvivalLabel {
            time_bin: rng.gen_range(1..=event_bin),
            uncensored: false,
        }
    } else {
        SurvivalLabel {
            time_bin: event_bin,
            uncensored: true,
        }
    };
    WSIGraph::new(n, cfg.feature_dim, features, edges, Some(label), domain)
}

/// Generates the labeled source and target datasets. Target labels exist in
/// the files for evaluation only; adaptation must ignore them.
pub fn generate_domain_pair(cfg: &ShiftConfig) -> Result<(Vec<WSIGraph>, Vec<WSIGraph>)> {
    cfg.validate()?;
    let setup = setup(cfg);
    let mut source = Vec::with_capacity(cfg.graphs_per_domain);
    let mut target = Vec::with_capacity(cfg.graphs_per_domain);
    for i in 0..cfg.graphs_per_domain {
        source.push(generate_graph(cfg, &setup, Domain::Source, i)?);
        target.push(generate_graph(cfg, &setup, Domain::Target, i)?);
    }
    Ok((source, target))
}

/// Label-bin histogram and per-dimension feature moments of a labeled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub n_graphs: usize,
    pub bin_counts: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_var: Vec<f64>,
}

pub fn dataset_summary(graphs: &[WSIGraph], k_bins: usize) -> Result<DatasetSummary> {
    if graphs.is_empty() {
        return Err(DetaError::Empty("summary of empty dataset".into()));
    }
    let d = graphs[0].feat_dim();
    let mut bin_counts = vec![0usize; k_bins];
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    let mut rows = 0usize;
    for g in graphs {
        let label = g
            .label
            .ok_or_else(|| DetaError::invalid("summary needs a labeled dataset"))?;
        if label.time_bin > k_bins {
            return Err(DetaError::DimensionMismatch {
                field: "time_bin".into(),
                expected: format!("<= {k_bins}"),
                found: label.time_bin.to_string(),
            });
        }
        bin_counts[label.time_bin - 1] += 1;
        if g.feat_dim() != d {
            return Err(DetaError::invalid("mixed feature dims in dataset"));
        }
        for node in 0..g.node_count() {
            for (j, &v) in g.feature_row(node).iter().enumerate() {
                sum[j] += v;
                sum_sq[j] += v * v;
            }
            rows += 1;
        }
    }
    let feature_mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
    let feature_var: Vec<f64> = sum_sq
        .iter()
        .zip(&feature_mean)
        .map(|(sq, m)| sq / rows as f64 - m * m)
        .collect();
    Ok(DatasetSummary {
        n_graphs: graphs.len(),
        bin_counts,
        feature_mean,
        feature_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::save_jsonl;

    fn small_cfg() -> ShiftConfig {
        ShiftConfig {
            graphs_per_domain: 40,
            nodes_min: 6,
            nodes_max: 10,
            knn_k: 3,
            seed: 11,
            ..ShiftConfig::default()
        }
    }

    #[test]
    fn zero_censor_rate_gives_all_events() {
        let cfg = ShiftConfig {
            censor_rate: 0.0,
            ..small_cfg()
        };
        let (src, tgt) = generate_domain_pair(&cfg).unwrap();
        for g in src.iter().chain(&tgt) {
            assert!(g.label.unwrap().uncensored);
        }
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let (a_src, a_tgt) = generate_domain_pair(&cfg).unwrap();
        let (b_src, b_tgt) = generate_domain_pair(&cfg).unwrap();
        let paths: Vec<_> = ["a_src", "a_tgt", "b_src", "b_tgt"]
            .iter()
            .map(|n| dir.path().join(format!("{n}.jsonl")))
            .collect();
        save_jsonl(&paths[0], &a_src).unwrap();
        save_jsonl(&paths[1], &a_tgt).unwrap();
        save_jsonl(&paths[2], &b_src).unwrap();
        save_jsonl(&paths[3], &b_tgt).unwrap();
        assert_eq!(
            std::fs::read(&paths[0]).unwrap(),
            std::fs::read(&paths[2]).unwrap()
        );
        assert_eq!(
            std::fs::read(&paths[1]).unwrap(),
            std::fs::read(&paths[3]).unwrap()
        );
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_domain_pair(&small_cfg()).unwrap().0;
        let b = generate_domain_pair(&ShiftConfig {
            seed: 12,
            ..small_cfg()
        })
        .unwrap()
        .0;
        assert_ne!(a[0].features(), b[0].features());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_cfg();
        cfg.latent_classes = 0;
        assert!(generate_domain_pair(&cfg).is_err());

        let mut cfg = small_cfg();
        cfg.target_prior = vec![0.5, 0.5];
        assert!(cfg.validate().is_err());

        let mut cfg = small_cfg();
        cfg.target_prior = vec![0.5, 0.2, 0.2, 0.2];
        assert!(cfg.validate().is_err());

        // More classes than bins is allowed.
        let cfg = ShiftConfig {
            latent_classes: 6,
            target_prior: vec![1.0 / 6.0; 6],
            ..small_cfg()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn hazard_ladder_is_increasing() {
        for l in 1..8 {
            let h = class_hazards(l);
            assert_eq!(h.len(), l);
            for w in h.windows(2) {
                assert!(w[1] > w[0]);
            }
            assert!(h.iter().all(|&r| (0.0..1.0).contains(&r)));
        }
    }

    #[test]
    fn bin_histogram_matches_mixture_expectation() {
        // Uniform source prior: each bin count is Binomial(n, p_bin) with
        // p_bin the hazard-ladder mixture mass; check within 3 sigma.
        let cfg = ShiftConfig {
            graphs_per_domain: 400,
            censor_rate: 0.0,
            nodes_min: 6,
            nodes_max: 8,
            knn_k: 3,
            ..ShiftConfig::default()
        };
        let (src, _) = generate_domain_pair(&cfg).unwrap();
        let summary = dataset_summary(&src, cfg.k_bins).unwrap();
        let hazards = class_hazards(cfg.latent_classes);
        let mut p = vec![0.0; cfg.k_bins];
        for &rho in &hazards {
            for (j, q) in bin_pmf(rho, cfg.k_bins).iter().enumerate() {
                p[j] += q / hazards.len() as f64;
            }
        }
        let n = cfg.graphs_per_domain as f64;
        for (j, &count) in summary.bin_counts.iter().enumerate() {
            let mean = n * p[j];
            let sigma = (n * p[j] * (1.0 - p[j])).sqrt();
            assert!(
                (count as f64 - mean).abs() <= 3.0 * sigma,
                "bin {j}: count {count}, expected {mean:.1} +- {:.1}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn summary_is_permutation_invariant_and_needs_labels() {
        let (src, _) = generate_domain_pair(&small_cfg()).unwrap();
        let summary = dataset_summary(&src, 4).unwrap();
        let mut shuffled = src.clone();
        shuffled.reverse();
        let other = dataset_summary(&shuffled, 4).unwrap();
        assert_eq!(summary.bin_counts, other.bin_counts);
        // Moments are accumulation-order sensitive in the last ulps.
        for (a, b) in summary
            .feature_mean
            .iter()
            .chain(&summary.feature_var)
            .zip(other.feature_mean.iter().chain(&other.feature_var))
        {
            assert!((a - b).abs() < 1e-12);
        }

        let mut unlabeled = src;
        unlabeled[0].label = None;
        assert!(dataset_summary(&unlabeled, 4).is_err());
    }

    /// Logistic probe on pooled node-feature means, trained to separate the
    /// domains; near-chance accuracy means the feature distributions match.
    fn domain_probe_accuracy(cfg: &ShiftConfig) -> f64 {
        let (src, tgt) = generate_domain_pair(cfg).unwrap();
        let pooled = |g: &WSIGraph| -> Vec<f64> {
            let d = g.feat_dim();
            let mut m = vec![0.0; d];
            for i in 0..g.node_count() {
                for (j, &v) in g.feature_row(i).iter().enumerate() {
                    m[j] += v / g.node_count() as f64;
                }
            }
            m
        };
        let mut xs: Vec<(Vec<f64>, f64)> = src.iter().map(|g| (pooled(g), 0.0)).collect();
        xs.extend(tgt.iter().map(|g| (pooled(g), 1.0)));
        // Deterministic interleaved split: even indices train, odd test.
        let d = cfg.feature_dim;
        let mut w = vec![0.0; d + 1];
        let train: Vec<&(Vec<f64>, f64)> = xs.iter().step_by(2).collect();
        let test: Vec<&(Vec<f64>, f64)> = xs.iter().skip(1).step_by(2).collect();
        for _ in 0..400 {
            let mut grad = vec![0.0; d + 1];
            for (x, y) in &train {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
                let p = 1.0 / (1.0 + (-z).exp());
                for j in 0..d {
                    grad[j] += (p - y) * x[j];
                }
                grad[d] += p - y;
            }
            for j in 0..=d {
                w[j] -= 0.5 * grad[j] / train.len() as f64;
            }
        }
        let correct = test
            .iter()
            .filter(|(x, y)| {
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
                (z > 0.0) == (*y > 0.5)
            })
            .count();
        correct as f64 / test.len() as f64
    }

    #[test]
    fn unshifted_domains_are_indistinguishable() {
        let cfg = ShiftConfig {
            mu_shift: 0.0,
            sigma_shift: 1.0,
            target_prior: vec![0.25; 4],
            graphs_per_domain: 300,
            nodes_min: 10,
            nodes_max: 16,
            knn_k: 4,
            seed: 3,
            ..ShiftConfig::default()
        };
        let acc = domain_probe_accuracy(&cfg);
        assert!(acc <= 0.55, "probe accuracy {acc}");
    }

    #[test]
    fn large_shift_is_linearly_separable() {
        let cfg = ShiftConfig {
            mu_shift: 3.0,
            target_prior: vec![0.25; 4],
            graphs_per_domain: 300,
            nodes_min: 10,
            nodes_max: 16,
            knn_k: 4,
            seed: 3,
            ..ShiftConfig::default()
        };
        let acc = domain_probe_accuracy(&cfg);
        assert!(acc >= 0.95, "probe accuracy {acc}");
    }
}
