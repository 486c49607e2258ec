//! Stochastic variational EM: mini-batch posterior updates by coordinate
//! ascent, preconditioned gradient updates of the shared weights with L1
//! shrinkage, and curvature-parameter refresh.
//!
//! Every update here is the exact derivative of the objective assembled in
//! [`crate::bounds`]; the gradient test suite pins each component against
//! central finite differences of that objective.

use crate::bounds::{
    dlambda_dxi, elbo, expected_moments, node_bound, optimal_alpha,
    state_stats, LatentWeighting, MomentCache, SiteData, VariationalParams, XiCache,
};
use crate::graph::{CausalNetwork, GraphError, PriorAttachment, WeightSet, OBS_NOISE_MIN};
use crate::parallel::par_map;
use std::time::Instant;
use thiserror::Error;

/// Factorized categorical posteriors, one row per (location, node).
/// Rows are normalized; the leak input is implicitly fixed active and is not
/// stored.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorField {
    data: Vec<Vec<f64>>,
    states: Vec<usize>,
    n: usize,
}

impl PosteriorField {
    pub fn uniform(net: &CausalNetwork, n: usize) -> PosteriorField {
        PosteriorField {
            data: (0..net.n_nodes())
                .map(|i| vec![1.0 / net.states(i) as f64; n * net.states(i)])
                .collect(),
            states: (0..net.n_nodes()).map(|i| net.states(i)).collect(),
            n,
        }
    }

    /// Initializes each row from the site's prior logit offsets (softmax of
    /// the offsets reproduces the clipped prior), uniform where absent.
    pub fn from_priors(net: &CausalNetwork, sites: &SiteData) -> PosteriorField {
        let mut q = PosteriorField::uniform(net, sites.n_locations());
        for i in 0..net.n_nodes() {
            for l in 0..sites.n_locations() {
                if let Some(b) = sites.prior_row(net, i, l) {
                    let p = crate::graph::conditional_categorical(b);
                    q.row_mut(i, l).copy_from_slice(&p);
                }
            }
        }
        q
    }

    pub fn n_locations(&self) -> usize {
        self.n
    }

    pub fn n_nodes(&self) -> usize {
        self.states.len()
    }

    pub fn row(&self, node: usize, l: usize) -> &[f64] {
        let s = self.states[node];
        &self.data[node][l * s..(l + 1) * s]
    }

    pub fn row_mut(&mut self, node: usize, l: usize) -> &mut [f64] {
        let s = self.states[node];
        &mut self.data[node][l * s..(l + 1) * s]
    }

    /// Pins a row to the inactive state (used for pruned locations).
    pub fn pin_inactive(&mut self, node: usize, l: usize) {
        let row = self.row_mut(node, l);
        row.fill(0.0);
        row[0] = 1.0;
    }

    pub fn max_normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, s) in self.states.iter().enumerate() {
            for l in 0..self.n {
                let sum: f64 = self.data[i][l * s..(l + 1) * s].iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().flatten().any(|v| v.is_nan())
    }

    /// Copies of every node's row at one location.
    pub fn clone_rows(&self, l: usize) -> Vec<Vec<f64>> {
        (0..self.states.len()).map(|i| self.row(i, l).to_vec()).collect()
    }
}

/// Identity of one free parameter. State-0 weights are pinned at zero and
/// never appear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    Leak { node: usize, state: usize },
    Parent { node: usize, slot: usize, state: usize },
    Noise { node: usize, state: usize },
    PriorScale { node: usize },
    Obs { slot: usize, state: usize },
    ObsLeak,
    ObsNoise,
}

/// Deterministic flattening of the free parameters of a network, shared by
/// the optimizer, the preconditioner, and the finite-difference harness.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    ids: Vec<ParamId>,
    leak_off: Vec<usize>,
    parent_off: Vec<Vec<usize>>,
    noise_off: Vec<usize>,
    prior_idx: Vec<Option<usize>>,
    obs_off: Vec<usize>,
    obs_leak_idx: usize,
    obs_noise_idx: usize,
}

impl ParamLayout {
    pub fn new(net: &CausalNetwork) -> ParamLayout {
        let mut ids = Vec::new();
        let mut leak_off = Vec::new();
        let mut parent_off = Vec::new();
        let mut noise_off = Vec::new();
        let mut prior_idx = Vec::new();
        for i in 0..net.n_nodes() {
            leak_off.push(ids.len());
            for m in 1..net.states(i) {
                ids.push(ParamId::Leak { node: i, state: m });
            }
            let mut slots = Vec::new();
            for s in 0..net.parents(i).len() {
                slots.push(ids.len());
                for m in 1..net.states(i) {
                    ids.push(ParamId::Parent { node: i, slot: s, state: m });
                }
            }
            parent_off.push(slots);
            noise_off.push(ids.len());
            for m in 1..net.states(i) {
                ids.push(ParamId::Noise { node: i, state: m });
            }
            if net.prior_attachment(i) == PriorAttachment::Scaled {
                prior_idx.push(Some(ids.len()));
                ids.push(ParamId::PriorScale { node: i });
            } else {
                prior_idx.push(None);
            }
        }
        let mut obs_off = Vec::new();
        for (slot, &k) in net.obs_parents().iter().enumerate() {
            obs_off.push(ids.len());
            for m in 1..net.states(k) {
                ids.push(ParamId::Obs { slot, state: m });
            }
        }
        let obs_leak_idx = ids.len();
        ids.push(ParamId::ObsLeak);
        let obs_noise_idx = ids.len();
        ids.push(ParamId::ObsNoise);
        ParamLayout { ids, leak_off, parent_off, noise_off, prior_idx, obs_off, obs_leak_idx, obs_noise_idx }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, j: usize) -> ParamId {
        self.ids[j]
    }

    pub fn leak_index(&self, node: usize, state: usize) -> usize {
        self.leak_off[node] + state - 1
    }

    pub fn parent_index(&self, node: usize, slot: usize, state: usize) -> usize {
        self.parent_off[node][slot] + state - 1
    }

    pub fn noise_index(&self, node: usize, state: usize) -> usize {
        self.noise_off[node] + state - 1
    }

    pub fn prior_index(&self, node: usize) -> Option<usize> {
        self.prior_idx[node]
    }

    pub fn obs_index(&self, slot: usize, state: usize) -> usize {
        self.obs_off[slot] + state - 1
    }

    pub fn obs_leak_index(&self) -> usize {
        self.obs_leak_idx
    }

    pub fn obs_noise_index(&self) -> usize {
        self.obs_noise_idx
    }

    pub fn flatten(&self, w: &WeightSet) -> Vec<f64> {
        self.ids
            .iter()
            .map(|id| match *id {
                ParamId::Leak { node, state } => w.leak[node][state],
                ParamId::Parent { node, slot, state } => w.parent[node][slot][state],
                ParamId::Noise { node, state } => w.noise[node][state],
                ParamId::PriorScale { node } => w.prior_scale[node],
                ParamId::Obs { slot, state } => w.obs[slot][state],
                ParamId::ObsLeak => w.obs_leak,
                ParamId::ObsNoise => w.obs_noise,
            })
            .collect()
    }

    pub fn unflatten_into(&self, v: &[f64], w: &mut WeightSet) {
        assert_eq!(v.len(), self.ids.len());
        for (id, &val) in self.ids.iter().zip(v) {
            match *id {
                ParamId::Leak { node, state } => w.leak[node][state] = val,
                ParamId::Parent { node, slot, state } => w.parent[node][slot][state] = val,
                ParamId::Noise { node, state } => w.noise[node][state] = val,
                ParamId::PriorScale { node } => w.prior_scale[node] = val,
                ParamId::Obs { slot, state } => w.obs[slot][state] = val,
                ParamId::ObsLeak => w.obs_leak = val,
                ParamId::ObsNoise => w.obs_noise = val,
            }
        }
    }

    pub fn name(&self, net: &CausalNetwork, j: usize) -> String {
        match self.ids[j] {
            ParamId::Leak { node, state } => format!("w0[{},{state}]", net.kind(node)),
            ParamId::Parent { node, slot, state } => format!(
                "w[{}->{},{state}]",
                net.kind(net.parents(node)[slot]),
                net.kind(node)
            ),
            ParamId::Noise { node, state } => format!("weps[{},{state}]", net.kind(node)),
            ParamId::PriorScale { node } => format!("walpha[{}]", net.kind(node)),
            ParamId::Obs { slot, state } => {
                format!("wy[{},{state}]", net.kind(net.obs_parents()[slot]))
            }
            ParamId::ObsLeak => "w0y".to_string(),
            ParamId::ObsNoise => "wepsy".to_string(),
        }
    }
}

/// How the curvature parameters are refreshed each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum XiMode {
    #[default]
    FixedPoint,
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    #[default]
    Identity,
    /// Diagonal scaling by the inverse root of a running mean of squared
    /// gradients (decay 0.9, floor 1e-8).
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub e_step_sweeps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// L1 strength anchoring the latent leak weights at zero. The
    /// identification constraint pins only the baseline state; without this
    /// anchor the leaks can drift until one state swallows the posterior
    /// (the quadratic bound is loose for uncertain states, so the objective
    /// rewards deterministic latents).
    pub lambda_leak: f64,
    /// Project causal influence weights (latent-to-latent and
    /// latent-to-observation) onto the nonnegative cone after each step.
    /// Hazards and damage can only brighten the proxy and only promote each
    /// other; without the constraint a state is free to claim the dark tail
    /// of the data and invert its meaning.
    pub nonnegative_influence: bool,
    pub sigma_xor: f64,
    pub seed: u64,
    /// Relative audit-objective change below which an epoch counts toward
    /// convergence.
    pub convergence_tol: f64,
    /// Consecutive converging epochs required to stop.
    pub convergence_patience: usize,
    pub xi_mode: XiMode,
    pub full_batch: bool,
    /// Skip every weight update; posterior-only optimization.
    pub e_step_only: bool,
    pub preconditioner: Preconditioner,
    pub weighting: LatentWeighting,
    /// Worker threads for the per-location phases; 0 means all available.
    pub workers: usize,
    /// Cap on the fixed audit batch used for the per-epoch trace.
    pub audit_size: usize,
}

impl Default for FitConfig {
    fn default() -> FitConfig {
        FitConfig {
            learning_rate: 0.05,
            batch_size: 256,
            max_epochs: 200,
            e_step_sweeps: 2,
            lambda1: 0.001,
            lambda2: 0.001,
            lambda_leak: 2.0,
            nonnegative_influence: true,
            sigma_xor: 0.1,
            seed: 42,
            convergence_tol: 1e-5,
            convergence_patience: 5,
            xi_mode: XiMode::FixedPoint,
            full_batch: false,
            e_step_only: false,
            preconditioner: Preconditioner::Identity,
            weighting: LatentWeighting::Probability,
            workers: 1,
            audit_size: 1024,
        }
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("objective diverged (NaN) at epoch {epoch}, location {location}")]
    Diverged { epoch: usize, location: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub weights: WeightSet,
    pub posterior: PosteriorField,
    pub xi: VariationalParams,
    /// Audit objective per completed epoch.
    pub trace: Vec<f64>,
    pub epochs_run: usize,
    pub converged: bool,
    pub wall_time_s: f64,
}

/// Everything mutated across epochs; checkpointable.
#[derive(Debug, Clone)]
pub struct FitState {
    pub w: WeightSet,
    pub q: PosteriorField,
    pub xi: VariationalParams,
    pub precond: Vec<f64>,
    pub next_epoch: usize,
    pub trace: Vec<f64>,
    pub streak: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub audit_elbo: f64,
    pub grad_norm: f64,
}

// ---------------------------------------------------------------------------
// E-step
// ---------------------------------------------------------------------------

/// Gradient of the non-entropy objective with respect to one posterior row,
/// with every other row held fixed. `rows[k]` is the current row of node `k`
/// at location `l`. The coordinate-ascent update is the softmax of this
/// vector; state 0 always gets logit 0.
fn posterior_logits(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    rows: &[Vec<f64>],
    params: &VariationalParams,
    cache: &XiCache,
    node: usize,
    l: usize,
    weighting: LatentWeighting,
) -> Vec<f64> {
    let s = net.states(node);
    let mut t = vec![0.0; s];
    let wn2 = w.obs_noise * w.obs_noise;

    // Observation coupling. The node's own mean contribution cancels out of
    // its derivative, leaving the residual against every other parent.
    if let Some(slot) = net.obs_slot(node) {
        let mut s_other = 0.0;
        for (sl, &k) in net.obs_parents().iter().enumerate() {
            if sl != slot {
                for (m, &qv) in rows[k].iter().enumerate() {
                    s_other += w.obs[sl][m] * m as f64 * qv;
                }
            }
        }
        let r_other = sites.lny[l] - w.obs_leak - s_other;
        for m in 1..s {
            let c = w.obs[slot][m] * m as f64;
            t[m] += c * (2.0 * r_other - c) / (2.0 * wn2);
        }
    }

    // Own latent term: the bound normalizer does not depend on this row.
    {
        let parent_stats: Vec<(f64, f64)> =
            net.parents(node).iter().map(|&p| state_stats(&rows[p])).collect();
        let mc = expected_moments(
            net,
            w,
            node,
            &parent_stats,
            sites.prior_row(net, node, l),
            &cache.lam[node],
        );
        match weighting {
            LatentWeighting::Probability => {
                for m in 1..s {
                    t[m] += mc.ez[m];
                }
            }
            LatentWeighting::StateValue => {
                let eb =
                    node_bound(&mc, &params.xi[node], &cache.lam[node], cache.s_softplus[node]);
                for m in 1..s {
                    t[m] += m as f64 * (mc.ez[m] - eb);
                }
            }
        }
    }

    // Exclusivity coupling.
    if let Some(partner) = net.xor_partner(node) {
        let (_, x2p) = state_stats(&rows[partner]);
        let sig2 = w.sigma_xor * w.sigma_xor;
        for m in 1..s {
            t[m] -= (m * m) as f64 * x2p / (2.0 * sig2);
        }
    }

    // Back-propagated terms from each active child.
    for &child in net.children(node) {
        if !sites.is_active(child, l) {
            continue;
        }
        let slot = net.parents(child).iter().position(|&p| p == node).unwrap();
        let parent_stats: Vec<(f64, f64)> =
            net.parents(child).iter().map(|&p| state_stats(&rows[p])).collect();
        let mc = expected_moments(
            net,
            w,
            child,
            &parent_stats,
            sites.prior_row(net, child, l),
            &cache.lam[child],
        );
        let (x_own, _) = parent_stats[slot];
        let q_child = &rows[child];
        let omega_mass = weighting.bound_mass(q_child);
        let lam = &cache.lam[child];
        let s_lam = cache.s_lam[child];
        let sc = net.states(child);
        let mdeg = sc - 1;
        let mut dez = vec![0.0; sc];
        let mut dez2 = vec![0.0; sc];
        for m in 1..s {
            let mf = m as f64;
            // The row moves this parent's statistics by dX = m, dX2 = m^2.
            let d_delta = mf * mf - 2.0 * x_own * mf;
            for mi in 0..sc {
                let pw = w.parent[child][slot][mi];
                dez[mi] = pw * mf;
                dez2[mi] = 2.0 * mc.ez[mi] * pw * mf + pw * pw * d_delta;
            }
            let mut f_dot = 0.0;
            for r in 0..sc {
                f_dot += 16.0 * lam[r] * lam[r] * dez2[r];
                f_dot += 8.0 * (mdeg as f64 - 1.0) * lam[r] * dez[r];
                for c in 0..sc {
                    if c != r {
                        let pwr = w.parent[child][slot][r];
                        let pwc = w.parent[child][slot][c];
                        let dezz =
                            mc.ez[c] * pwr * mf + mc.ez[r] * pwc * mf + pwr * pwc * d_delta;
                        f_dot += 16.0 * lam[r] * lam[c] * dezz;
                    }
                }
            }
            let d_alpha2 = f_dot / (16.0 * s_lam * s_lam);
            let mut d_eb = -s_lam * d_alpha2;
            for mi in 0..sc {
                d_eb += lam[mi] * dez2[mi] + 0.5 * dez[mi];
            }
            let mut contrib = -omega_mass * d_eb;
            for (mi, &qv) in q_child.iter().enumerate() {
                contrib += weighting.omega(mi, qv) * dez[mi];
            }
            t[m] += contrib;
        }
    }

    t
}

/// One coordinate-ascent pass over the nodes of location `l`, in the fixed
/// declaration order, each update using the latest values. Every updated row
/// is an exact coordinate maximizer of the objective, so repeated passes
/// never decrease it. Returns the location on a NaN.
pub fn e_step_update(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &mut PosteriorField,
    params: &VariationalParams,
    cache: &XiCache,
    l: usize,
    weighting: LatentWeighting,
) -> Result<(), usize> {
    let mut rows = q.clone_rows(l);
    sweep_rows(net, sites, w, &mut rows, params, cache, l, weighting)?;
    for (node, row) in rows.into_iter().enumerate() {
        q.row_mut(node, l).copy_from_slice(&row);
    }
    Ok(())
}

fn sweep_rows(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    rows: &mut [Vec<f64>],
    params: &VariationalParams,
    cache: &XiCache,
    l: usize,
    weighting: LatentWeighting,
) -> Result<(), usize> {
    for node in 0..net.n_nodes() {
        if !sites.is_active(node, l) {
            continue;
        }
        let t = posterior_logits(net, sites, w, rows, params, cache, node, l, weighting);
        if t.iter().any(|v| v.is_nan()) {
            return Err(l);
        }
        let p = crate::graph::conditional_categorical(&t);
        rows[node].copy_from_slice(&p);
    }
    Ok(())
}

/// Batch sweep. Locations are independent given the weights, so fresh rows
/// are computed in parallel from a snapshot and applied afterwards; node
/// order within a location stays sequential.
fn e_step_sweep(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &mut PosteriorField,
    params: &VariationalParams,
    cache: &XiCache,
    batch: &[usize],
    weighting: LatentWeighting,
    workers: usize,
) -> Result<(), usize> {
    let snapshot: &PosteriorField = q;
    let updates = par_map(batch.len(), workers, |bi| {
        let l = batch[bi];
        let mut rows = snapshot.clone_rows(l);
        let bad = sweep_rows(net, sites, w, &mut rows, params, cache, l, weighting).is_err();
        (l, rows, bad)
    });
    for (l, rows, bad) in updates {
        if bad {
            return Err(l);
        }
        for (node, row) in rows.into_iter().enumerate() {
            q.row_mut(node, l).copy_from_slice(&row);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Weight gradients
// ---------------------------------------------------------------------------

/// Gradient of the batch objective with respect to every free weight, in
/// [`ParamLayout`] order. Locations are processed in sorted order and their
/// contributions folded sequentially, so the result is independent of both
/// batch permutation and worker count.
pub fn grad_weights(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    params: &VariationalParams,
    batch: &[usize],
    weighting: LatentWeighting,
    layout: &ParamLayout,
    workers: usize,
) -> Vec<f64> {
    assert!(!batch.is_empty(), "grad_weights: empty batch");
    let mut order: Vec<usize> = batch.to_vec();
    order.sort_unstable();
    let cache = XiCache::new(params);
    let per_loc = par_map(order.len(), workers, |bi| {
        grad_at(net, sites, w, q, &cache, order[bi], weighting, layout)
    });
    let mut g = vec![0.0; layout.len()];
    for gl in per_loc {
        for (a, b) in g.iter_mut().zip(gl) {
            *a += b;
        }
    }
    g
}

fn grad_at(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    cache: &XiCache,
    l: usize,
    weighting: LatentWeighting,
    layout: &ParamLayout,
) -> Vec<f64> {
    let mut g = vec![0.0; layout.len()];
    let wn = w.obs_noise;
    let wn2 = wn * wn;
    let lny = sites.lny[l];

    // Observation block.
    let n_obs = net.obs_parents().len();
    let mut s_k = vec![0.0; n_obs];
    let mut t_k = vec![0.0; n_obs];
    for (slot, &k) in net.obs_parents().iter().enumerate() {
        for (m, &qv) in q.row(k, l).iter().enumerate() {
            let c = w.obs[slot][m] * m as f64;
            s_k[slot] += c * qv;
            t_k[slot] += c * c * qv;
        }
    }
    let s_total: f64 = s_k.iter().sum();
    let r = lny - w.obs_leak - s_total;
    let v_extra: f64 = (0..n_obs).map(|s| t_k[s] - s_k[s] * s_k[s]).sum();
    for (slot, &k) in net.obs_parents().iter().enumerate() {
        for (m, &qv) in q.row(k, l).iter().enumerate().skip(1) {
            let mf = m as f64;
            g[layout.obs_index(slot, m)] +=
                mf * qv * (r + s_k[slot] - w.obs[slot][m] * mf) / wn2;
        }
    }
    g[layout.obs_leak_index()] += r / wn2;
    g[layout.obs_noise_index()] += -1.0 / wn + (r * r + v_extra) / (wn2 * wn);

    // Latent blocks.
    for i in 0..net.n_nodes() {
        if !sites.is_active(i, l) {
            continue;
        }
        let parent_stats: Vec<(f64, f64)> =
            net.parents(i).iter().map(|&p| state_stats(q.row(p, l))).collect();
        let prior = sites.prior_row(net, i, l);
        let mc = expected_moments(net, w, i, &parent_stats, prior, &cache.lam[i]);
        let lam = &cache.lam[i];
        let s_lam = cache.s_lam[i];
        let q_row = q.row(i, l);
        let omega_mass = weighting.bound_mass(q_row);
        let s = net.states(i);
        let mdeg = s - 1;

        // Accumulates one parameter's contribution given its moment
        // perturbations (dez, dez2, dezz as a closure over (r, c)).
        let mut apply = |g_idx: usize,
                         dez: &[f64],
                         dez2: &[f64],
                         dezz: &dyn Fn(usize, usize) -> f64| {
            let mut f_dot = 0.0;
            for rr in 0..s {
                f_dot += 16.0 * lam[rr] * lam[rr] * dez2[rr];
                f_dot += 8.0 * (mdeg as f64 - 1.0) * lam[rr] * dez[rr];
                for cc in 0..s {
                    if cc != rr {
                        f_dot += 16.0 * lam[rr] * lam[cc] * dezz(rr, cc);
                    }
                }
            }
            let d_alpha2 = f_dot / (16.0 * s_lam * s_lam);
            let mut d_eb = -s_lam * d_alpha2;
            for mi in 0..s {
                d_eb += lam[mi] * dez2[mi] + 0.5 * dez[mi];
            }
            let mut val = -omega_mass * d_eb;
            for (mi, &qv) in q_row.iter().enumerate() {
                val += weighting.omega(mi, qv) * dez[mi];
            }
            g[g_idx] += val;
        };

        let mut dez = vec![0.0; s];
        let mut dez2 = vec![0.0; s];

        // Leak weights.
        for mt in 1..s {
            dez.fill(0.0);
            dez2.fill(0.0);
            dez[mt] = 1.0;
            dez2[mt] = 2.0 * mc.ez[mt];
            let ez = &mc.ez;
            apply(layout.leak_index(i, mt), &dez, &dez2, &|rr, cc| {
                let mut v = 0.0;
                if rr == mt {
                    v += ez[cc];
                }
                if cc == mt {
                    v += ez[rr];
                }
                v
            });
        }

        // Parent weights.
        for (slot, &(x, x2)) in parent_stats.iter().enumerate() {
            let delta = x2 - x * x;
            for mt in 1..s {
                dez.fill(0.0);
                dez2.fill(0.0);
                dez[mt] = x;
                dez2[mt] = 2.0 * mc.ez[mt] * x + 2.0 * w.parent[i][slot][mt] * delta;
                let ez = &mc.ez;
                let pw = &w.parent[i][slot];
                apply(layout.parent_index(i, slot, mt), &dez, &dez2, &|rr, cc| {
                    let mut v = 0.0;
                    if rr == mt {
                        v += ez[cc] * x + pw[cc] * delta;
                    }
                    if cc == mt {
                        v += ez[rr] * x + pw[rr] * delta;
                    }
                    v
                });
            }
        }

        // Noise weights only enter the second moments.
        for mt in 1..s {
            dez.fill(0.0);
            dez2.fill(0.0);
            dez2[mt] = 2.0 * w.noise[i][mt];
            apply(layout.noise_index(i, mt), &dez, &dez2, &|_, _| 0.0);
        }

        // Prior-attachment scale.
        if let (Some(g_idx), Some(b)) = (layout.prior_index(i), prior) {
            for mt in 0..s {
                dez[mt] = b[mt];
                dez2[mt] = 2.0 * mc.ez[mt] * b[mt];
            }
            let ez = &mc.ez;
            apply(g_idx, &dez, &dez2, &|rr, cc| ez[cc] * b[rr] + ez[rr] * b[cc]);
        }
    }
    g
}

// ---------------------------------------------------------------------------
// M-step
// ---------------------------------------------------------------------------

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Preconditioned ascent step followed by the proximal L1 shrinkage:
/// observation weights (excluding the observation leak and noise) shrink by
/// `rho * lambda1`, learnable prior-attachment scales by `rho * lambda2`.
/// The observation noise is clamped away from zero.
pub fn m_step(
    w: &mut WeightSet,
    grad: &[f64],
    cfg: &FitConfig,
    layout: &ParamLayout,
    precond: &mut [f64],
) -> Result<(), FitError> {
    if !(cfg.learning_rate > 0.0) {
        return Err(FitError::BadConfig(format!(
            "learning rate must be positive, got {}",
            cfg.learning_rate
        )));
    }
    assert_eq!(grad.len(), layout.len());
    assert_eq!(precond.len(), layout.len());
    let rho = cfg.learning_rate;
    let mut v = layout.flatten(w);
    for j in 0..v.len() {
        let scale = match cfg.preconditioner {
            Preconditioner::Identity => 1.0,
            Preconditioner::Adaptive => {
                precond[j] = 0.9 * precond[j] + 0.1 * grad[j] * grad[j];
                1.0 / (precond[j] + 1e-8).sqrt()
            }
        };
        v[j] += rho * scale * grad[j];
        match layout.id(j) {
            ParamId::Obs { .. } => {
                v[j] = soft_threshold(v[j], rho * cfg.lambda1);
                if cfg.nonnegative_influence {
                    v[j] = v[j].max(0.0);
                }
            }
            ParamId::Parent { .. } => {
                if cfg.nonnegative_influence {
                    v[j] = v[j].max(0.0);
                }
            }
            ParamId::PriorScale { .. } => v[j] = soft_threshold(v[j], rho * cfg.lambda2),
            ParamId::Leak { .. } => v[j] = soft_threshold(v[j], rho * cfg.lambda_leak),
            ParamId::ObsNoise => {
                if v[j].abs() < OBS_NOISE_MIN {
                    v[j] = if v[j] < 0.0 { -OBS_NOISE_MIN } else { OBS_NOISE_MIN };
                }
            }
            _ => {}
        }
    }
    layout.unflatten_into(&v, w);
    Ok(())
}

// ---------------------------------------------------------------------------
// Curvature updates
// ---------------------------------------------------------------------------

/// Batch-summed, weighting-scaled bound normalizer of one node; the part of
/// the objective that moves when that node's `xi` row moves (negated).
/// Logit moments are lambda-independent, so callers pass them precomputed
/// and only the optimal-shift second moment is refreshed per probe.
fn xi_objective(
    moments: &[MomentCache],
    masses: &[f64],
    xi_row: &[f64],
) -> f64 {
    let lam: Vec<f64> = xi_row.iter().map(|&x| crate::bounds::lambda_xi(x)).collect();
    let s_lam: f64 = lam.iter().sum();
    let s_sp: f64 = xi_row.iter().map(|&x| crate::bounds::softplus(x)).sum();
    let mut total = 0.0;
    for (mc, &mass) in moments.iter().zip(masses) {
        let mut b = -crate::bounds::alpha_sq_of(mc, &lam) * s_lam + s_sp;
        for m in 0..mc.len {
            b += lam[m] * (mc.ez2[m] - xi_row[m] * xi_row[m]) + 0.5 * (mc.ez[m] - xi_row[m]);
        }
        total += mass * b;
    }
    total
}

/// Refreshes the curvature parameters on a batch. In fixed-point mode the
/// per-state tightness point `xi_m^2 = mean_l E[(z_m - alpha_l)^2]` is
/// iterated against the closed-form shift; in gradient mode a projected
/// ascent step with halving line search is taken. Either way a candidate is
/// only accepted if the objective does not regress.
pub fn update_xi(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    params: &mut VariationalParams,
    batch: &[usize],
    cfg: &FitConfig,
) {
    debug_assert!(params.is_nonnegative());
    for node in 0..net.n_nodes() {
        let s = net.states(node);
        // Per-location first/second logit moments are fixed during the
        // refresh; only lambda and the shift move.
        let lam_now: Vec<f64> =
            params.xi[node].iter().map(|&x| crate::bounds::lambda_xi(x)).collect();
        let moments: Vec<MomentCache> = batch
            .iter()
            .filter(|&&l| sites.is_active(node, l))
            .map(|&l| {
                let parent_stats: Vec<(f64, f64)> =
                    net.parents(node).iter().map(|&p| state_stats(q.row(p, l))).collect();
                expected_moments(
                    net,
                    w,
                    node,
                    &parent_stats,
                    sites.prior_row(net, node, l),
                    &lam_now,
                )
            })
            .collect();
        if moments.is_empty() {
            continue;
        }

        let masses: Vec<f64> = batch
            .iter()
            .filter(|&&l| sites.is_active(node, l))
            .map(|&l| cfg.weighting.bound_mass(q.row(node, l)))
            .collect();
        let old = params.xi[node].clone();
        let before = xi_objective(&moments, &masses, &old);

        let mut candidate = match cfg.xi_mode {
            XiMode::FixedPoint => {
                let mut xi = old.clone();
                for _ in 0..50 {
                    let lam: Vec<f64> =
                        xi.iter().map(|&x| crate::bounds::lambda_xi(x)).collect();
                    let mut c2 = vec![0.0; s];
                    for mc in &moments {
                        let alpha = optimal_alpha(mc.ez(), &lam);
                        for m in 0..s {
                            c2[m] += mc.ez2[m] - 2.0 * alpha * mc.ez[m] + alpha * alpha;
                        }
                    }
                    let mut delta: f64 = 0.0;
                    for m in 0..s {
                        let target = (c2[m] / moments.len() as f64).max(0.0).sqrt();
                        delta = delta.max((target - xi[m]).abs());
                        xi[m] = 0.5 * xi[m] + 0.5 * target;
                    }
                    if delta < 1e-10 {
                        break;
                    }
                }
                xi
            }
            XiMode::Gradient => {
                let mut grad = vec![0.0; s];
                let lam: Vec<f64> =
                    old.iter().map(|&x| crate::bounds::lambda_xi(x)).collect();
                let s_lam: f64 = lam.iter().sum();
                for (bi, &l) in
                    batch.iter().filter(|&&l| sites.is_active(node, l)).enumerate()
                {
                    let mc = &moments[bi];
                    let mass = cfg.weighting.bound_mass(q.row(node, l));
                    for m in 0..s {
                        let dlam = dlambda_dxi(old[m]);
                        let mut f_dot = 32.0 * lam[m] * dlam * mc.ez2[m]
                            + 8.0 * (s as f64 - 2.0) * dlam * mc.ez[m];
                        for rr in 0..s {
                            if rr != m {
                                f_dot += 32.0 * dlam * lam[rr] * mc.ezz_at(m, rr);
                            }
                        }
                        let f = mc.ealpha2 * 16.0 * s_lam * s_lam;
                        let g_dot = 32.0 * dlam * s_lam;
                        let d_alpha2 = (f_dot * 16.0 * s_lam * s_lam - f * g_dot)
                            / (16.0 * s_lam * s_lam).powi(2);
                        let sig = 1.0 / (1.0 + (-old[m]).exp());
                        let d_eb = -s_lam * d_alpha2 - mc.ealpha2 * dlam
                            + dlam * (mc.ez2[m] - old[m] * old[m])
                            - 2.0 * lam[m] * old[m]
                            - 0.5
                            + sig;
                        grad[m] += -mass * d_eb;
                    }
                }
                let mut step = 0.5;
                let mut xi = old.clone();
                for _ in 0..40 {
                    let probe: Vec<f64> = old
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &gm)| (x + step * gm).max(0.0))
                        .collect();
                    if xi_objective(&moments, &masses, &probe) <= before + 1e-9 {
                        xi = probe;
                        break;
                    }
                    step *= 0.5;
                }
                xi
            }
        };

        // Backstop: halve toward the previous value until the bound part of
        // the objective has not regressed by more than 1e-9.
        let mut ok = false;
        for _ in 0..30 {
            let after = xi_objective(&moments, &masses, &candidate);
            if after <= before + 1e-9 {
                ok = true;
                break;
            }
            for (c, &o) in candidate.iter_mut().zip(&old) {
                *c = 0.5 * (*c + o);
            }
        }
        if ok {
            params.xi[node] = candidate;
        } else {
            params.xi[node] = old;
            params.converged = false;
        }
    }
}

/// Seeds the curvature parameters from the fixed point at the current
/// posterior, per node, independent of epoch state.
pub fn init_xi(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    batch: &[usize],
) -> VariationalParams {
    let mut params = VariationalParams::constant(net, 1.0);
    for node in 0..net.n_nodes() {
        let s = net.states(node);
        let lam = vec![0.125; s];
        let mut c2 = vec![0.0; s];
        let mut count = 0usize;
        for &l in batch {
            if !sites.is_active(node, l) {
                continue;
            }
            let parent_stats: Vec<(f64, f64)> =
                net.parents(node).iter().map(|&p| state_stats(q.row(p, l))).collect();
            let mc =
                expected_moments(net, w, node, &parent_stats, sites.prior_row(net, node, l), &lam);
            let alpha = optimal_alpha(mc.ez(), &lam);
            for m in 0..s {
                c2[m] += mc.ez2[m] - 2.0 * alpha * mc.ez[m] + alpha * alpha;
            }
            count += 1;
        }
        if count > 0 {
            for m in 0..s {
                params.xi[node][m] = (c2[m] / count as f64).max(0.0).sqrt();
            }
        }
    }
    params
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seeded sub-stream: every random draw of the fit derives from
/// `(seed, epoch, purpose)`, so resuming from any epoch reproduces the
/// uninterrupted run exactly.
pub fn epoch_rng(seed: u64, epoch: u64, purpose: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ splitmix64(epoch.wrapping_mul(3) ^ purpose.wrapping_mul(0x5bd1e995)),
    ))
}

fn sample_batch(n: usize, size: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let size = size.min(n);
    if size == n {
        return (0..n).collect();
    }
    // Partial Fisher-Yates over an index vector, then sorted for the
    // deterministic reduction order.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(size);
    idx.sort_unstable();
    idx
}

/// Initializes weights per the default scheme: latent leaks zero (the
/// per-location prior offsets carry the prior), every other free weight
/// drawn from `N(0, 0.01^2)`, observation noise 1, attachment scales 1.
/// The observation leak starts at the mean observed log proxy: started at
/// zero instead, several data standard deviations off, the uniformly
/// negative early residual pushes every observation weight into a
/// sign-inverted basin.
pub fn init_weights(net: &CausalNetwork, sigma_xor: f64, seed: u64, lny_mean: f64) -> WeightSet {
    use rand::Rng;
    let mut rng = epoch_rng(seed, 0, 0xC0FFEE);
    let normal = rand_distr::Normal::new(0.0, 0.01).unwrap();
    let mut w = WeightSet::zeros(net);
    w.sigma_xor = sigma_xor;
    for i in 0..net.n_nodes() {
        for m in 1..net.states(i) {
            w.noise[i][m] = rng.sample(normal);
            for s in 0..net.parents(i).len() {
                w.parent[i][s][m] = rng.sample(normal);
            }
        }
    }
    for (slot, &k) in net.obs_parents().iter().enumerate() {
        for m in 1..net.states(k) {
            w.obs[slot][m] = rng.sample(normal);
        }
    }
    w.obs_leak = lny_mean + rng.sample(normal);
    w.obs_noise = 1.0;
    w
}

/// Mean log damage proxy, the default observation-leak starting point.
pub fn mean_lny(sites: &SiteData) -> f64 {
    sites.lny.iter().sum::<f64>() / sites.lny.len().max(1) as f64
}

pub fn init_state(
    net: &CausalNetwork,
    sites: &SiteData,
    w_init: WeightSet,
    cfg: &FitConfig,
) -> Result<FitState, FitError> {
    w_init.validate(net)?;
    let n = sites.n_locations();
    if n == 0 {
        return Err(FitError::BadConfig("empty active set".into()));
    }
    if !cfg.full_batch && cfg.batch_size == 0 {
        return Err(FitError::BadConfig("batch_size must be at least 1".into()));
    }
    let mut q = PosteriorField::from_priors(net, sites);
    for i in 0..net.n_nodes() {
        if let Some(mask) = &sites.active[i] {
            for l in 0..n {
                if !mask[l] {
                    q.pin_inactive(i, l);
                }
            }
        }
    }
    let audit = audit_batch(n, cfg);
    let xi = init_xi(net, sites, &w_init, &q, &audit);
    let layout = ParamLayout::new(net);
    Ok(FitState {
        w: w_init,
        q,
        xi,
        precond: vec![0.0; layout.len()],
        next_epoch: 0,
        trace: Vec::new(),
        streak: 0,
    })
}

pub fn audit_batch(n: usize, cfg: &FitConfig) -> Vec<usize> {
    if cfg.full_batch || cfg.audit_size >= n {
        (0..n).collect()
    } else {
        let mut rng = epoch_rng(cfg.seed, u64::MAX, 0xA0D17);
        sample_batch(n, cfg.audit_size.max(1), &mut rng)
    }
}

/// Outcome of a completed loop (trace and state live in [`FitState`]).
#[derive(Debug, Clone, Copy)]
pub struct FitOutcome {
    pub converged: bool,
    pub epochs_run: usize,
}

/// Runs epochs `state.next_epoch .. cfg.max_epochs`, invoking the callback
/// after each epoch. Each epoch samples a batch, performs the configured
/// number of posterior sweeps, refreshes the curvature parameters, and —
/// unless posterior-only mode is set — takes one proximal gradient step on
/// the weights.
pub fn run_fit(
    net: &CausalNetwork,
    sites: &SiteData,
    cfg: &FitConfig,
    state: &mut FitState,
    mut on_epoch: impl FnMut(&EpochStats, &FitState),
) -> Result<FitOutcome, FitError> {
    let layout = ParamLayout::new(net);
    let n = sites.n_locations();
    let audit = audit_batch(n, cfg);
    let mut converged = false;

    let start_epoch = state.next_epoch;
    for epoch in start_epoch..cfg.max_epochs {
        let batch = if cfg.full_batch {
            (0..n).collect::<Vec<_>>()
        } else {
            let mut rng = epoch_rng(cfg.seed, epoch as u64, 0xBA7C4);
            sample_batch(n, cfg.batch_size, &mut rng)
        };

        let cache = XiCache::new(&state.xi);
        for _ in 0..cfg.e_step_sweeps.max(1) {
            if let Err(l) = e_step_sweep(
                net,
                sites,
                &state.w,
                &mut state.q,
                &state.xi,
                &cache,
                &batch,
                cfg.weighting,
                cfg.workers,
            ) {
                return Err(FitError::Diverged { epoch, location: l });
            }
        }

        update_xi(net, sites, &state.w, &state.q, &mut state.xi, &batch, cfg);

        let mut grad_norm = 0.0;
        if !cfg.e_step_only {
            // Per-location mean gradient, so the learning rate is
            // batch-size invariant.
            let mut g = grad_weights(
                net,
                sites,
                &state.w,
                &state.q,
                &state.xi,
                &batch,
                cfg.weighting,
                &layout,
                cfg.workers,
            );
            let scale = 1.0 / batch.len() as f64;
            for v in &mut g {
                *v *= scale;
            }
            grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !grad_norm.is_finite() {
                return Err(FitError::Diverged { epoch, location: batch[0] });
            }
            m_step(&mut state.w, &g, cfg, &layout, &mut state.precond)?;
        }

        let audit_elbo = par_elbo(net, sites, &state.w, &state.q, &state.xi, &audit, cfg);
        if !audit_elbo.is_finite() {
            return Err(FitError::Diverged { epoch, location: audit[0] });
        }
        let improved = match state.trace.last() {
            Some(&prev) => {
                let rel = (audit_elbo - prev).abs() / prev.abs().max(1.0);
                rel < cfg.convergence_tol
            }
            None => false,
        };
        state.streak = if improved { state.streak + 1 } else { 0 };
        state.trace.push(audit_elbo);
        state.next_epoch = epoch + 1;
        on_epoch(&EpochStats { epoch, audit_elbo, grad_norm }, state);
        if state.streak >= cfg.convergence_patience {
            converged = true;
            break;
        }
    }

    // Polish pass: bring every location's posterior up to date with the
    // final weights. Skipped for a zero-epoch fit, which must return its
    // inputs untouched.
    if cfg.max_epochs > 0 {
        let all: Vec<usize> = (0..n).collect();
        let cache = XiCache::new(&state.xi);
        for _ in 0..2 {
            if let Err(l) = e_step_sweep(
                net,
                sites,
                &state.w,
                &mut state.q,
                &state.xi,
                &cache,
                &all,
                cfg.weighting,
                cfg.workers,
            ) {
                return Err(FitError::Diverged { epoch: state.next_epoch, location: l });
            }
        }
    }

    Ok(FitOutcome { converged, epochs_run: state.next_epoch })
}

fn par_elbo(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    xi: &VariationalParams,
    batch: &[usize],
    cfg: &FitConfig,
) -> f64 {
    let cache = XiCache::new(xi);
    let terms = par_map(batch.len(), cfg.workers, |bi| {
        crate::bounds::elbo_at(net, sites, w, q, xi, &cache, batch[bi], cfg.weighting)
    });
    terms.into_iter().sum()
}

/// End-to-end fit with default initialization of the mutable state.
pub fn fit(
    net: &CausalNetwork,
    sites: &SiteData,
    w_init: WeightSet,
    cfg: &FitConfig,
) -> Result<FitResult, FitError> {
    let start = Instant::now();
    let mut state = init_state(net, sites, w_init, cfg)?;
    let outcome = run_fit(net, sites, cfg, &mut state, |_, _| {})?;
    Ok(FitResult {
        weights: state.w,
        posterior: state.q,
        xi: state.xi,
        trace: state.trace,
        epochs_run: outcome.epochs_run,
        converged: outcome.converged,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Public wrapper for the batch objective used everywhere in this module.
pub fn batch_elbo(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    xi: &VariationalParams,
    batch: &[usize],
    weighting: LatentWeighting,
) -> f64 {
    elbo(net, sites, w, q, xi, batch, weighting)
}
