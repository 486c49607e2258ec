//! Quadratic variational bounds and the evidence lower bound they assemble.
//!
//! The log-sum-exp normalizer of each latent node's softmax is intractable in
//! expectation, so it is bounded in two stages: the sum of exponentials is
//! bounded by a product of sigmoids around a shift `alpha`, and each
//! `log(1 + e^x)` is then bounded by its quadratic envelope with curvature
//! `lambda(xi)`. Minimizing over `alpha` in closed form leaves a bound that
//! depends only on the first and second moments of the activation logits
//! under the factorized posterior; those moments and the assembled
//! per-location objective live here.

use crate::graph::{CausalNetwork, WeightSet, LN_2PI};
use crate::inference::PosteriorField;

/// Variational curvature parameters, one per node and state (state 0
/// included). Nonnegative by contract.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub xi: Vec<Vec<f64>>,
    /// Cleared when a fixed-point refinement hit its iteration cap.
    pub converged: bool,
}

impl VariationalParams {
    pub fn constant(net: &CausalNetwork, value: f64) -> VariationalParams {
        assert!(value >= 0.0);
        VariationalParams {
            xi: (0..net.n_nodes()).map(|i| vec![value; net.states(i)]).collect(),
            converged: true,
        }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.xi.iter().flatten().all(|&x| x >= 0.0)
    }
}

/// Per-node cache of `lambda(xi)` with its sums, rebuilt whenever `xi`
/// changes and shared by the objective, the posterior updates, and the
/// gradients.
#[derive(Debug, Clone)]
pub struct XiCache {
    pub lam: Vec<Vec<f64>>,
    pub s_lam: Vec<f64>,
    pub s_softplus: Vec<f64>,
}

impl XiCache {
    pub fn new(params: &VariationalParams) -> XiCache {
        let lam: Vec<Vec<f64>> = params
            .xi
            .iter()
            .map(|row| row.iter().map(|&x| lambda_xi(x)).collect())
            .collect();
        let s_lam = lam.iter().map(|row| row.iter().sum()).collect();
        let s_softplus = params
            .xi
            .iter()
            .map(|row| row.iter().map(|&x| softplus(x)).sum())
            .collect();
        XiCache { lam, s_lam, s_softplus }
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Curvature coefficient of the quadratic envelope of `log(1 + e^x)`:
/// `lambda(xi) = (sigma(xi) - 1/2) / (2 xi)`, evaluated as
/// `tanh(xi/2) / (4 xi)` which is the same function without cancellation.
/// The limit at 0 is 1/8; the value decreases monotonically toward 0.
pub fn lambda_xi(xi: f64) -> f64 {
    assert!(xi >= 0.0, "lambda_xi: negative input {xi}");
    if xi < 1e-6 {
        // Series around 0: 1/8 - xi^2/96 + xi^4/960.
        0.125 - xi * xi / 96.0
    } else {
        (0.5 * xi).tanh() / (4.0 * xi)
    }
}

/// Derivative of [`lambda_xi`] on the nonnegative half-line.
pub fn dlambda_dxi(xi: f64) -> f64 {
    assert!(xi >= 0.0, "dlambda_dxi: negative input {xi}");
    if xi < 1e-4 {
        // Series: -xi/48 + xi^3/240.
        -xi / 48.0 + xi * xi * xi / 240.0
    } else {
        let t = (0.5 * xi).tanh();
        let sech2 = 1.0 - t * t;
        sech2 / (8.0 * xi) - t / (4.0 * xi * xi)
    }
}

/// Pointwise two-stage upper bound on `log sum_m exp(z_m)`:
/// `alpha + sum_m [lambda(xi_m)((z_m - alpha)^2 - xi_m^2)
///               + (z_m - alpha - xi_m)/2 + log(1 + e^{xi_m})]`.
pub fn lse_upper_bound(z: &[f64], alpha: f64, xi: &[f64]) -> f64 {
    assert_eq!(z.len(), xi.len(), "lse_upper_bound: length mismatch");
    let mut acc = alpha;
    for (&zm, &xm) in z.iter().zip(xi) {
        let lam = lambda_xi(xm);
        let d = zm - alpha;
        acc += lam * (d * d - xm * xm) + 0.5 * (d - xm) + softplus(xm);
    }
    acc
}

/// Closed-form minimizer of the expected bound over the shift `alpha`:
/// `(4 sum_m ez_m lam_m - (1 - M)) / (4 sum_m lam_m)` with `M = len - 1`.
pub fn optimal_alpha(ez: &[f64], lam: &[f64]) -> f64 {
    assert_eq!(ez.len(), lam.len());
    let m = ez.len() - 1;
    let s_lam: f64 = lam.iter().sum();
    assert!(s_lam > 0.0, "optimal_alpha: lambda sum must be positive");
    let s_wz: f64 = ez.iter().zip(lam).map(|(&e, &l)| e * l).sum();
    (4.0 * s_wz - (1.0 - m as f64)) / (4.0 * s_lam)
}

/// Expected value of the pre-substitution bound at a fixed scalar shift,
/// using only first and second logit moments. Used by the `xi` refinement
/// and its minimality checks.
pub fn expected_lse_bound(ez: &[f64], ez2: &[f64], alpha: f64, xi: &[f64]) -> f64 {
    let mut acc = alpha;
    for m in 0..ez.len() {
        let lam = lambda_xi(xi[m]);
        let c2 = ez2[m] - 2.0 * alpha * ez[m] + alpha * alpha;
        acc += lam * (c2 - xi[m] * xi[m]) + 0.5 * (ez[m] - alpha - xi[m]) + softplus(xi[m]);
    }
    acc
}

/// Stationarity residual of the expected bound in `xi_m`; zero at the
/// minimizer. The trailing three terms cancel identically, so the residual
/// reduces to `dlambda(xi) * (E[(z - alpha)^2] - xi^2)`.
pub fn xi_stationarity_residual(c2: f64, xi: f64) -> f64 {
    dlambda_dxi(xi) * (c2 - xi * xi) - 2.0 * xi * lambda_xi(xi) - 0.5 + sigmoid(xi)
}

/// Minimizes the expected bound over `xi >= 0` at a fixed shift. The
/// closed-form `xi_m = sqrt(max(E[(z_m - alpha)^2], 0))` is the tightness
/// point; a damped fixed-point pass confirms the stationarity residual and
/// returns the best iterate with a convergence flag.
pub fn minimize_xi_fixedpoint(ez: &[f64], ez2: &[f64], alpha: f64) -> (Vec<f64>, bool) {
    let c2: Vec<f64> = ez
        .iter()
        .zip(ez2)
        .map(|(&e, &e2)| (e2 - 2.0 * alpha * e + alpha * alpha).max(0.0))
        .collect();
    let mut xi: Vec<f64> = c2.iter().map(|v| v.sqrt()).collect();
    for _ in 0..100 {
        let residual = xi
            .iter()
            .zip(&c2)
            .map(|(&x, &c)| xi_stationarity_residual(c, x).abs())
            .fold(0.0, f64::max);
        if residual < 1e-8 {
            return (xi, true);
        }
        for (x, &c) in xi.iter_mut().zip(&c2) {
            *x = 0.5 * *x + 0.5 * c.sqrt();
        }
    }
    (xi, false)
}

/// Hard cap on states per node; keeps the moment kernel allocation-free.
pub const MAX_STATES: usize = 8;

/// First and second moments of one node's activation logits under the
/// factorized posterior of its parents.
///
/// `ezz` stores the cross moments of the state logits row-major
/// (`ezz[r * MAX_STATES + s]`); the two logits share the parent draw but
/// not the per-state noise, so the diagonal equals `ez2` and the
/// off-diagonal carries the shared-parent covariance. Storage is inline
/// with capacity [`MAX_STATES`]; entries beyond `len` are unspecified.
#[derive(Debug, Clone)]
pub struct MomentCache {
    pub ez: [f64; MAX_STATES],
    pub ez2: [f64; MAX_STATES],
    pub ezz: [f64; MAX_STATES * MAX_STATES],
    pub len: usize,
    pub ealpha2: f64,
}

impl MomentCache {
    pub fn ezz_at(&self, r: usize, s: usize) -> f64 {
        self.ezz[r * MAX_STATES + s]
    }

    pub fn ez(&self) -> &[f64] {
        &self.ez[..self.len]
    }

    pub fn ez2(&self) -> &[f64] {
        &self.ez2[..self.len]
    }
}

/// Mean and second moment of a node's numeric state value under one
/// posterior row.
pub fn state_stats(q_row: &[f64]) -> (f64, f64) {
    let mut x = 0.0;
    let mut x2 = 0.0;
    for (m, &q) in q_row.iter().enumerate() {
        let mf = m as f64;
        x += mf * q;
        x2 += mf * mf * q;
    }
    (x, x2)
}

/// Computes the logit moments of `node` at one location.
///
/// `parent_stats` carries `(E[x_k], E[x_k^2])` per parent slot;
/// `prior_logit`, when present, is added to the leak weight per state;
/// `lam` is the node's curvature row from [`XiCache`].
pub fn expected_moments(
    net: &CausalNetwork,
    w: &WeightSet,
    node: usize,
    parent_stats: &[(f64, f64)],
    prior_logit: Option<&[f64]>,
    lam: &[f64],
) -> MomentCache {
    let s = net.states(node);
    assert!(s <= MAX_STATES);
    assert_eq!(parent_stats.len(), net.parents(node).len());
    let scale = w.prior_scale[node];

    let mut mc = MomentCache {
        ez: [0.0; MAX_STATES],
        ez2: [0.0; MAX_STATES],
        ezz: [0.0; MAX_STATES * MAX_STATES],
        len: s,
        ealpha2: 0.0,
    };
    for m in 0..s {
        let mut e = w.leak[node][m];
        if let Some(b) = prior_logit {
            e += scale * b[m];
        }
        let mut v = w.noise[node][m] * w.noise[node][m];
        for (slot, &(x, x2)) in parent_stats.iter().enumerate() {
            let pw = w.parent[node][slot][m];
            e += pw * x;
            v += pw * pw * (x2 - x * x);
        }
        mc.ez[m] = e;
        mc.ez2[m] = e * e + v;
    }
    for r in 0..s {
        mc.ezz[r * MAX_STATES + r] = mc.ez2[r];
        for c in (r + 1)..s {
            let mut cov = 0.0;
            for (slot, &(x, x2)) in parent_stats.iter().enumerate() {
                cov += w.parent[node][slot][r] * w.parent[node][slot][c] * (x2 - x * x);
            }
            let v = mc.ez[r] * mc.ez[c] + cov;
            mc.ezz[r * MAX_STATES + c] = v;
            mc.ezz[c * MAX_STATES + r] = v;
        }
    }
    mc.ealpha2 = alpha_sq_of(&mc, lam);
    mc
}

/// [`expected_alpha_sq`] over a moment cache's inline storage.
pub fn alpha_sq_of(mc: &MomentCache, lam: &[f64]) -> f64 {
    let s = mc.len;
    let m = s - 1;
    let s_lam: f64 = lam.iter().sum();
    let mut f = (m as f64 - 1.0) * (m as f64 - 1.0);
    for r in 0..s {
        f += 16.0 * lam[r] * lam[r] * mc.ez2[r];
        f += 8.0 * (m as f64 - 1.0) * lam[r] * mc.ez[r];
        for c in 0..s {
            if c != r {
                f += 16.0 * lam[r] * lam[c] * mc.ezz[r * MAX_STATES + c];
            }
        }
    }
    f / (16.0 * s_lam * s_lam)
}

/// Second moment of the closed-form optimal shift, as a ratio of
/// curvature-weighted logit moments.
pub fn expected_alpha_sq(ez: &[f64], ez2: &[f64], ezz: &[f64], lam: &[f64]) -> f64 {
    let s = ez.len();
    let m = s - 1;
    let s_lam: f64 = lam.iter().sum();
    let mut f = (m as f64 - 1.0) * (m as f64 - 1.0);
    for r in 0..s {
        f += 16.0 * lam[r] * lam[r] * ez2[r];
        f += 8.0 * (m as f64 - 1.0) * lam[r] * ez[r];
        for c in 0..s {
            if c != r {
                f += 16.0 * lam[r] * lam[c] * ezz[r * s + c];
            }
        }
    }
    f / (16.0 * s_lam * s_lam)
}

/// Expected value of the optimized upper bound on the node's log-sum-exp
/// normalizer. Subtracted from the expected chosen-state logit, this yields
/// the node's contribution to the objective.
pub fn node_bound(mc: &MomentCache, xi: &[f64], lam: &[f64], s_softplus: f64) -> f64 {
    let s_lam: f64 = lam.iter().sum();
    let mut b = -mc.ealpha2 * s_lam + s_softplus;
    for m in 0..mc.len {
        b += lam[m] * (mc.ez2[m] - xi[m] * xi[m]) + 0.5 * (mc.ez[m] - xi[m]);
    }
    b
}

/// How each latent node's expected-logit and bound terms are weighted in the
/// objective and everything derived from it.
///
/// `Probability` weights the chosen-state logit by its posterior probability
/// and subtracts the bound normalizer once per node; this is the variant
/// under which the objective is a true lower bound of the enumerable
/// log-likelihood (see the oracle tests). `StateValue` multiplies both parts
/// by the numeric state value as well; it is retained for comparison and is
/// not a guaranteed lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LatentWeighting {
    #[default]
    Probability,
    StateValue,
}

impl LatentWeighting {
    /// `(omega_m, d omega_m / d q_m)` pairs are implicit: omega is linear in
    /// the row, so only the coefficients are needed.
    pub(crate) fn omega(self, m: usize, q: f64) -> f64 {
        match self {
            LatentWeighting::Probability => q,
            LatentWeighting::StateValue => m as f64 * q,
        }
    }

    /// Total weight multiplying the node's bound normalizer.
    pub(crate) fn bound_mass(self, q_row: &[f64]) -> f64 {
        match self {
            LatentWeighting::Probability => 1.0,
            LatentWeighting::StateValue => {
                q_row.iter().enumerate().map(|(m, &q)| m as f64 * q).sum()
            }
        }
    }
}

/// Per-location observed data and prior evidence, aligned with the active
/// location set of a scene.
#[derive(Debug, Clone)]
pub struct SiteData {
    /// `ln y` per location, after the positivity clamp.
    pub lny: Vec<f64>,
    /// Per node: per-location rows of additive logit offsets (length
    /// `n * states(i)`, row-major), or `None` when the node has no prior.
    pub prior_logits: Vec<Option<Vec<f64>>>,
    /// Per node: per-location activity mask, `None` meaning all active.
    /// A masked-out node is treated as absent at that location: its
    /// posterior row stays pinned at state 0 and its terms are skipped.
    pub active: Vec<Option<Vec<bool>>>,
}

impl SiteData {
    pub fn new(net: &CausalNetwork, lny: Vec<f64>) -> SiteData {
        SiteData {
            lny,
            prior_logits: vec![None; net.n_nodes()],
            active: vec![None; net.n_nodes()],
        }
    }

    pub fn n_locations(&self) -> usize {
        self.lny.len()
    }

    pub fn is_active(&self, node: usize, l: usize) -> bool {
        match &self.active[node] {
            Some(mask) => mask[l],
            None => true,
        }
    }

    pub fn prior_row(&self, net: &CausalNetwork, node: usize, l: usize) -> Option<&[f64]> {
        let s = net.states(node);
        self.prior_logits[node].as_deref().map(|v| &v[l * s..(l + 1) * s])
    }
}

/// Evidence lower bound over a batch of locations: observation term, the
/// quadratic-bound latent terms, the exclusivity penalty, and the posterior
/// entropy, summed in batch order. Deterministic given its inputs.
pub fn elbo(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    params: &VariationalParams,
    batch: &[usize],
    weighting: LatentWeighting,
) -> f64 {
    assert!(!batch.is_empty(), "elbo: empty batch");
    let cache = XiCache::new(params);
    batch.iter().map(|&l| elbo_at(net, sites, w, q, params, &cache, l, weighting)).sum()
}

/// Single-location objective term; the batch objective is the plain sum.
pub fn elbo_at(
    net: &CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    params: &VariationalParams,
    cache: &XiCache,
    l: usize,
    weighting: LatentWeighting,
) -> f64 {
    let mut total = 0.0;

    // Observation: E[log p(y | parents)] under the factorized posterior.
    let lny = sites.lny[l];
    let wn2 = w.obs_noise * w.obs_noise;
    let mut mean_shift = 0.0;
    let mut var_extra = 0.0;
    for (slot, &k) in net.obs_parents().iter().enumerate() {
        let row = q.row(k, l);
        let mut s_k = 0.0;
        let mut t_k = 0.0;
        for (m, &qv) in row.iter().enumerate() {
            let c = w.obs[slot][m] * m as f64;
            s_k += c * qv;
            t_k += c * c * qv;
        }
        mean_shift += s_k;
        var_extra += t_k - s_k * s_k;
    }
    let r = lny - w.obs_leak - mean_shift;
    total += -lny - w.obs_noise.abs().ln() - 0.5 * LN_2PI - (r * r + var_extra) / (2.0 * wn2);

    // Latent nodes: expected chosen-state logit minus the bound normalizer.
    for i in 0..net.n_nodes() {
        if !sites.is_active(i, l) {
            continue;
        }
        let parent_stats: Vec<(f64, f64)> =
            net.parents(i).iter().map(|&p| state_stats(q.row(p, l))).collect();
        let mc = expected_moments(
            net,
            w,
            i,
            &parent_stats,
            sites.prior_row(net, i, l),
            &cache.lam[i],
        );
        let eb = node_bound(&mc, &params.xi[i], &cache.lam[i], cache.s_softplus[i]);
        let row = q.row(i, l);
        let mut term = -weighting.bound_mass(row) * eb;
        for (m, &qv) in row.iter().enumerate() {
            term += weighting.omega(m, qv) * mc.ez[m];
        }
        total += term;
    }

    // Exclusivity observation at u = 0.
    if net.xor_enabled() {
        let sig2 = w.sigma_xor * w.sigma_xor;
        let prod: f64 = net
            .xor_parents()
            .iter()
            .map(|&k| state_stats(q.row(k, l)).1)
            .product();
        total += -0.5 * (LN_2PI + sig2.ln()) - prod / (2.0 * sig2);
    }

    // Posterior entropy, with 0 ln 0 = 0.
    for i in 0..net.n_nodes() {
        if !sites.is_active(i, l) {
            continue;
        }
        for &qv in q.row(i, l) {
            if qv > 0.0 {
                total -= qv * qv.ln();
            }
        }
    }
    total
}
