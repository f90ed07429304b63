//! Discrete-time survival mathematics and evaluation statistics.
//!
//! Hazards are length-`K` probability vectors `h(j|x)`; survival follows as
//! `S(y) = prod_{j<=y} (1 - h(j))`. Censorship follows the convention
//! `c = 1` (here `uncensored = true`) when the event was observed.

use crate::error::{DetaError, Result};

/// Probabilities are clamped to at least this before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// One scored subject: observed bin, censorship status, predicted hazard.
#[derive(Clone, Debug)]
pub struct SurvivalRecord {
    pub time_bin: usize,
    pub uncensored: bool,
    pub hazard: Vec<f64>,
}

impl SurvivalRecord {
    pub fn new(time_bin: usize, uncensored: bool, hazard: Vec<f64>) -> Result<Self> {
        validate_hazard(&hazard)?;
        if time_bin == 0 || time_bin > hazard.len() {
            return Err(DetaError::invalid(format!(
                "time_bin {} outside [1, {}]",
                time_bin,
                hazard.len()
            )));
        }
        Ok(SurvivalRecord {
            time_bin,
            uncensored,
            hazard,
        })
    }
}

fn validate_hazard(hazard: &[f64]) -> Result<()> {
    if hazard.is_empty() {
        return Err(DetaError::Empty("hazard vector".into()));
    }
    if hazard.iter().any(|&h| !(0.0..=1.0).contains(&h) || !h.is_finite()) {
        return Err(DetaError::invalid("hazard entries must lie in [0, 1]"));
    }
    let sum: f64 = hazard.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(DetaError::invalid(format!(
            "hazard must sum to 1, got {sum}"
        )));
    }
    Ok(())
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], f: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = f * (m - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < m {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[m - 1]
    }
}

/// Maps positive observed times to bins `1..=k_bins` using quantiles of the
/// uncensored times as bin edges. Monotone in the time value.
pub fn discretize_times(times: &[f64], uncensored: &[bool], k_bins: usize) -> Result<Vec<usize>> {
    if k_bins < 2 {
        return Err(DetaError::invalid("k_bins must be >= 2"));
    }
    if times.len() != uncensored.len() {
        return Err(DetaError::invalid("times and censor flags differ in length"));
    }
    let mut events: Vec<f64> = times
        .iter()
        .zip(uncensored)
        .filter(|(_, &u)| u)
        .map(|(&t, _)| t)
        .collect();
    if events.is_empty() {
        return Err(DetaError::Empty(
            "discretize_times needs at least one uncensored time".into(),
        ));
    }
    events.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edges: Vec<f64> = (1..k_bins)
        .map(|j| quantile(&events, j as f64 / k_bins as f64))
        .collect();
    Ok(times
        .iter()
        .map(|&t| 1 + edges.iter().filter(|&&e| e < t).count())
        .collect())
}

/// `S(y) = prod_{j=1..y} (1 - h(j))` for every `y`.
pub fn survival_function(hazard: &[f64]) -> Vec<f64> {
    let mut s = 1.0;
    hazard
        .iter()
        .map(|h| {
            s *= 1.0 - h;
            s
        })
        .collect()
}

/// Negative log-likelihood over the records, summed:
/// uncensored contribute `-(log S(y) + log h(y))`, censored contribute
/// `-log S(min(y+1, K))`. Probabilities are floored at [`PROB_FLOOR`].
pub fn surv_nll(records: &[SurvivalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(DetaError::Empty("surv_nll over no records".into()));
    }
    let mut loss = 0.0;
    for r in records {
        let k = r.hazard.len();
        let s = survival_function(&r.hazard);
        let y = r.time_bin;
        if r.uncensored {
            loss -= s[y - 1].max(PROB_FLOOR).ln() + r.hazard[y - 1].max(PROB_FLOOR).ln();
        } else {
            let yc = (y + 1).min(k);
            loss -= s[yc - 1].max(PROB_FLOOR).ln();
        }
    }
    Ok(loss)
}

/// Scalar risk: the negative sum of the survival curve. Higher means the
/// event is expected earlier.
pub fn risk_score(hazard: &[f64]) -> f64 {
    -survival_function(hazard).iter().sum::<f64>()
}

/// Harrell's concordance index. Pairs `(i, j)` are comparable when
/// `T_i < T_j` and subject `i` is uncensored; concordant when
/// `risk_i > risk_j`; risk ties count one half.
pub fn c_index(risks: &[f64], time_bins: &[usize], uncensored: &[bool]) -> Result<f64> {
    let n = risks.len();
    if n != time_bins.len() || n != uncensored.len() {
        return Err(DetaError::invalid("c_index inputs differ in length"));
    }
    if n < 2 {
        return Err(DetaError::invalid("c_index needs at least 2 records"));
    }
    let mut concordant = 0.0;
    let mut comparable = 0u64;
    for i in 0..n {
        if !uncensored[i] {
            continue;
        }
        for j in 0..n {
            if time_bins[i] < time_bins[j] {
                comparable += 1;
                if risks[i] > risks[j] {
                    concordant += 1.0;
                } else if risks[i] == risks[j] {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(DetaError::invalid(
            "c_index: no comparable pair (all times tied or all early subjects censored)",
        ));
    }
    Ok(concordant / comparable as f64)
}

/// Kaplan-Meier step curve: one `(time, survival)` point per distinct event
/// time. An all-censored sample yields no points (survival stays 1).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KmCurve {
    pub points: Vec<(f64, f64)>,
}

impl KmCurve {
    pub fn final_survival(&self) -> f64 {
        self.points.last().map_or(1.0, |p| p.1)
    }
}

/// Product-limit estimator over (time, censorship) pairs.
pub fn kaplan_meier(times: &[f64], uncensored: &[bool]) -> Result<KmCurve> {
    if times.is_empty() || times.len() != uncensored.len() {
        return Err(DetaError::Empty("kaplan_meier over no records".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let n = times.len();
    let mut curve = KmCurve::default();
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = times[order[i]];
        let at_risk = n - i;
        let mut events = 0usize;
        let mut j = i;
        while j < n && times[order[j]] == t {
            if uncensored[order[j]] {
                events += 1;
            }
            j += 1;
        }
        if events > 0 {
            s *= 1.0 - events as f64 / at_risk as f64;
            curve.points.push((t, s));
        }
        i = j;
    }
    Ok(curve)
}

/// Complementary error function (Chebyshev fit; absolute error below 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398
                                + t * (1.48851587
                                    + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Survival function of the chi-square distribution with one degree of
/// freedom: `p = erfc(sqrt(x / 2))`.
pub fn chi2_sf_1dof(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

/// Two-sample log-rank test. Returns `(chi-square statistic, p-value)`.
pub fn log_rank(
    times_a: &[f64],
    events_a: &[bool],
    times_b: &[f64],
    events_b: &[bool],
) -> Result<(f64, f64)> {
    if times_a.is_empty() || times_b.is_empty() {
        return Err(DetaError::Empty("log_rank needs two non-empty groups".into()));
    }
    let total_events = events_a.iter().chain(events_b).filter(|&&e| e).count();
    if total_events == 0 {
        return Err(DetaError::invalid("log_rank: zero events in both groups"));
    }
    // Pool subjects as (time, in_group_a, event).
    let mut pool: Vec<(f64, bool, bool)> = times_a
        .iter()
        .zip(events_a)
        .map(|(&t, &e)| (t, true, e))
        .chain(times_b.iter().zip(events_b).map(|(&t, &e)| (t, false, e)))
        .collect();
    pool.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());

    let n = pool.len();
    let mut num = 0.0; // sum of (observed_a - expected_a)
    let mut var = 0.0;
    let mut i = 0;
    let mut at_risk_a = times_a.len() as f64;
    let mut at_risk = n as f64;
    while i < n {
        let t = pool[i].0;
        let mut d = 0.0;
        let mut d_a = 0.0;
        let mut leaving = 0.0;
        let mut leaving_a = 0.0;
        let mut j = i;
        while j < n && pool[j].0 == t {
            leaving += 1.0;
            if pool[j].1 {
                leaving_a += 1.0;
            }
            if pool[j].2 {
                d += 1.0;
                if pool[j].1 {
                    d_a += 1.0;
                }
            }
            j += 1;
        }
        if d > 0.0 {
            let frac_a = at_risk_a / at_risk;
            num += d_a - d * frac_a;
            if at_risk > 1.0 {
                var += d * frac_a * (1.0 - frac_a) * (at_risk - d) / (at_risk - 1.0);
            }
        }
        at_risk -= leaving;
        at_risk_a -= leaving_a;
        i = j;
    }
    if var <= 0.0 {
        return Ok((0.0, 1.0));
    }
    let stat = num * num / var;
    Ok((stat, chi2_sf_1dof(stat)))
}
