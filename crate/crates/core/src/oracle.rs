//! Brute-force reference implementations used to verify the fast paths.
//!
//! Everything here is written independently of the production code: its own
//! softmax, its own densities, exhaustive enumeration instead of bounds.
//! Slow on purpose; only meant for desk-scale toys in tests and the
//! acceptance suite.

use crate::graph::{CausalNetwork, WeightSet, LN_2PI};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Compensated (Neumaier) summation.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Reference softmax with compensated normalization.
pub fn softmax_oracle(z: &[f64]) -> Vec<f64> {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
    let total = stable_sum(&e);
    e.iter().map(|v| v / total).collect()
}

/// Reference log-sum-exp.
pub fn logsumexp_oracle(z: &[f64]) -> f64 {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
    zmax + stable_sum(&e).ln()
}

/// Exhaustive pairwise Mann-Whitney statistic, ties counted one half.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    assert!(pairs > 0.0, "need both classes");
    wins / pairs
}

/// Result of brute-force enumeration at one location.
#[derive(Debug, Clone)]
pub struct ToyEnumeration {
    /// Log marginal likelihood of `(y, u = 0)`.
    pub logp: f64,
    /// Delta-method standard error of `logp` from the noise integration.
    pub se: f64,
    /// Exact posterior marginals per node (up to the noise Monte Carlo).
    pub marginals: Vec<Vec<f64>>,
}

/// Enumerates all latent state combinations and integrates the per-state
/// activation noises by Monte Carlo.
///
/// `leak_eff[i][m]` is the node's effective leak logit at this location
/// (global leak plus any prior offset, already scaled). `lny` is the log of
/// the observed damage proxy. The exclusivity observation `u = 0` is
/// included when the network carries the node.
pub fn enumerate_toy(
    net: &CausalNetwork,
    w: &WeightSet,
    leak_eff: &[Vec<f64>],
    lny: f64,
    n_samples: usize,
    seed: u64,
) -> ToyEnumeration {
    let n = net.n_nodes();
    let states: Vec<usize> = (0..n).map(|i| net.states(i)).collect();
    let n_combos: usize = states.iter().product::<usize>().max(1);

    // Combo tables: per-combo state tuple, parent-config index per node,
    // and the noise-independent observation terms.
    let mut combo_states = vec![vec![0usize; n]; n_combos];
    for c in 0..n_combos {
        let mut rem = c;
        for i in 0..n {
            combo_states[c][i] = rem % states[i];
            rem /= states[i];
        }
    }
    let pconfigs: Vec<usize> = (0..n)
        .map(|i| net.parents(i).iter().map(|&p| states[p]).product::<usize>().max(1))
        .collect();
    let parent_cfg = |c: usize, i: usize| -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for &p in net.parents(i) {
            idx += combo_states[c][p] * stride;
            stride *= states[p];
        }
        idx
    };
    let mut combo_base = vec![0.0f64; n_combos];
    for c in 0..n_combos {
        // Observation: ln y ~ N(mu, obs_noise^2), density of y.
        let mut mu = w.obs_leak;
        for (slot, &k) in net.obs_parents().iter().enumerate() {
            let x = combo_states[c][k];
            mu += w.obs[slot][x] * x as f64;
        }
        let wn = w.obs_noise.abs();
        let r = lny - mu;
        let mut lp = -lny - wn.ln() - 0.5 * LN_2PI - r * r / (2.0 * wn * wn);
        if net.xor_enabled() {
            let prod: f64 =
                net.xor_parents().iter().map(|&k| combo_states[c][k] as f64).product();
            lp += -w.sigma_xor.ln() - 0.5 * LN_2PI - prod * prod / (2.0 * w.sigma_xor * w.sigma_xor);
        }
        combo_base[c] = lp;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log_ps = Vec::with_capacity(n_samples);
    // Conditional posterior marginals per sample, combined afterwards with
    // self-normalized importance weights over the noise draws.
    let mut cond_margs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_samples);
    let mut logits = vec![0.0f64; 8];
    for _ in 0..n_samples {
        // Per node and parent config: log softmax table at this noise draw.
        let mut tables: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let si = states[i];
            let eps: Vec<f64> = (0..si).map(|_| rng.sample(StandardNormal)).collect();
            let mut table = vec![0.0; pconfigs[i] * si];
            for pc in 0..pconfigs[i] {
                logits.clear();
                for m in 0..si {
                    let mut z = 0.0;
                    if m > 0 {
                        z = leak_eff[i][m] + w.noise[i][m] * eps[m];
                        let mut rem = pc;
                        for (slot, &p) in net.parents(i).iter().enumerate() {
                            let xp = rem % states[p];
                            rem /= states[p];
                            z += w.parent[i][slot][m] * xp as f64;
                        }
                    }
                    logits.push(z);
                }
                let lse = logsumexp_oracle(&logits);
                for m in 0..si {
                    table[pc * si + m] = logits[m] - lse;
                }
            }
            tables.push(table);
        }

        let mut combo_logp = vec![0.0f64; n_combos];
        for c in 0..n_combos {
            let mut lp = combo_base[c];
            for i in 0..n {
                lp += tables[i][parent_cfg(c, i) * states[i] + combo_states[c][i]];
            }
            combo_logp[c] = lp;
        }
        let sample_logp = logsumexp_oracle(&combo_logp);
        log_ps.push(sample_logp);
        let mut cond: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; states[i]]).collect();
        for c in 0..n_combos {
            let wgt = (combo_logp[c] - sample_logp).exp();
            for i in 0..n {
                cond[i][combo_states[c][i]] += wgt;
            }
        }
        cond_margs.push(cond);
    }

    // log mean p with a delta-method standard error.
    let a_max = log_ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = log_ps.iter().map(|&a| (a - a_max).exp()).collect();
    let mean = stable_sum(&scaled) / n_samples as f64;
    let var = if n_samples > 1 {
        scaled.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / (n_samples as f64 - 1.0)
    } else {
        0.0
    };
    let logp = a_max + mean.ln();
    let se = (var / n_samples as f64).sqrt() / mean;

    let weight_total = stable_sum(&scaled);
    let mut marginals: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; states[i]]).collect();
    for (s_idx, cond) in cond_margs.iter().enumerate() {
        let wgt = scaled[s_idx] / weight_total;
        for i in 0..n {
            for m in 0..states[i] {
                marginals[i][m] += wgt * cond[i][m];
            }
        }
    }
    ToyEnumeration { logp, se, marginals }
}
