//! Per-location categorical priors: log-normal fragility curves for building
//! damage, a configurable weak logistic family standing in for global
//! loss-model output, ground-failure probability grids for landslide and
//! liquefaction, and their attachment to the network as logit offsets.

use crate::bounds::SiteData;
use crate::graph::{CausalNetwork, HazardKind, PriorAttachment};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("fragility medians must be positive and strictly increasing")]
    BadMedians,
    #[error("fragility dispersions must be positive")]
    BadDispersions,
    #[error("prior vectors must have equal length, got {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("prior field missing node {0}")]
    MissingNode(HazardKind),
    #[error("prior field covers {have} locations, scene has {want}")]
    MissingLocation { have: usize, want: usize },
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Log-normal exceedance curve per damage state: median shaking `theta_d`
/// (in g) and dispersion `beta_d`, one pair per state `d = 1..=M`, medians
/// strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct FragilityCurve {
    pub medians: Vec<f64>,
    pub betas: Vec<f64>,
}

impl FragilityCurve {
    pub fn new(medians: Vec<f64>, betas: Vec<f64>) -> Result<FragilityCurve, PriorError> {
        if medians.is_empty() || medians.iter().any(|&t| !(t > 0.0)) {
            return Err(PriorError::BadMedians);
        }
        if medians.windows(2).any(|w| w[1] <= w[0]) {
            return Err(PriorError::BadMedians);
        }
        if betas.len() != medians.len() || betas.iter().any(|&b| !(b > 0.0)) {
            return Err(PriorError::BadDispersions);
        }
        Ok(FragilityCurve { medians, betas })
    }

    pub fn n_states(&self) -> usize {
        self.medians.len()
    }

    /// Exceedance probability of state `d` (1-based) at the given shaking.
    pub fn exceedance(&self, pga: f64, d: usize) -> f64 {
        if pga <= 0.0 {
            return 0.0;
        }
        normal_cdf((pga / self.medians[d - 1]).ln() / self.betas[d - 1])
    }
}

/// State probabilities by successive differencing of exceedance curves:
/// `[1 - E_1, E_1 - E_2, ..., E_M]`. Unequal dispersions can cross; any
/// negative difference is clipped to zero and the vector renormalized, with
/// the second return flagging that a clip happened.
pub fn hazus_state_probs(pga: f64, curve: &FragilityCurve) -> (Vec<f64>, bool) {
    let m = curve.n_states();
    let mut exceed = Vec::with_capacity(m + 2);
    exceed.push(1.0);
    for d in 1..=m {
        exceed.push(curve.exceedance(pga, d));
    }
    exceed.push(0.0);
    let mut clipped = false;
    let mut probs: Vec<f64> = (0..=m)
        .map(|d| {
            let p = exceed[d] - exceed[d + 1];
            if p < 0.0 {
                clipped = true;
                0.0
            } else {
                p
            }
        })
        .collect();
    let total: f64 = probs.iter().sum();
    if clipped && total > 0.0 {
        for p in &mut probs {
            *p /= total;
        }
    }
    (probs, clipped)
}

/// Configurable logistic exceedance family with deliberately weak default
/// discrimination, standing in for rapid global loss-model priors.
#[derive(Debug, Clone, PartialEq)]
pub struct PagerStubConfig {
    /// Emit a uniform vector regardless of shaking.
    pub flat: bool,
    /// Asymptotic exceedance ceiling per state.
    pub ceilings: Vec<f64>,
    /// Logistic slope per state.
    pub slopes: Vec<f64>,
    /// Logistic midpoint (g) per state.
    pub midpoints: Vec<f64>,
}

impl PagerStubConfig {
    /// Weak near-uniform discrimination across three damage states.
    pub fn weak_default(n_states: usize) -> PagerStubConfig {
        let ceilings: Vec<f64> =
            (0..n_states).map(|d| 0.5 / (1.0 + d as f64)).collect();
        PagerStubConfig {
            flat: false,
            ceilings,
            slopes: vec![0.8; n_states],
            midpoints: vec![0.8; n_states],
        }
    }

    pub fn flat(n_states: usize) -> PagerStubConfig {
        PagerStubConfig { flat: true, ..PagerStubConfig::weak_default(n_states) }
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

/// Logistic exceedance curves with the same state differencing as
/// [`hazus_state_probs`]. Zero shaking always yields the no-damage vector
/// (the logistic is renormalized to start at zero).
pub fn pager_stub_probs(pga: f64, cfg: &PagerStubConfig) -> Vec<f64> {
    let m = cfg.ceilings.len();
    if cfg.flat {
        return vec![1.0 / (m as f64 + 1.0); m + 1];
    }
    let mut exceed = Vec::with_capacity(m + 2);
    exceed.push(1.0);
    for d in 0..m {
        let s0 = sigmoid(-cfg.slopes[d] * cfg.midpoints[d]);
        let raw = (sigmoid(cfg.slopes[d] * (pga - cfg.midpoints[d])) - s0) / (1.0 - s0);
        exceed.push(cfg.ceilings[d] * raw.max(0.0));
    }
    exceed.push(0.0);
    let mut probs: Vec<f64> = (0..=m).map(|d| (exceed[d] - exceed[d + 1]).max(0.0)).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Which family produces the building-damage prior.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorMode {
    Hazus,
    Pager,
    /// Convex combination `gamma * hazus + (1 - gamma) * pager`.
    Combined(f64),
}

/// Pointwise combination of two normalized prior vectors.
pub fn combine_priors(
    p_hazus: &[f64],
    p_pager: &[f64],
    mode: &PriorMode,
) -> Result<Vec<f64>, PriorError> {
    if p_hazus.len() != p_pager.len() {
        return Err(PriorError::LengthMismatch(p_hazus.len(), p_pager.len()));
    }
    let mixed: Vec<f64> = match mode {
        PriorMode::Hazus => p_hazus.to_vec(),
        PriorMode::Pager => p_pager.to_vec(),
        PriorMode::Combined(gamma) => p_hazus
            .iter()
            .zip(p_pager)
            .map(|(&a, &b)| gamma * a + (1.0 - gamma) * b)
            .collect(),
    };
    let total: f64 = mixed.iter().sum();
    Ok(mixed.iter().map(|v| v / total).collect())
}

/// Per-location prior probability vectors per node.
#[derive(Debug, Clone, Default)]
pub struct PriorField {
    /// Per node: `None` (no prior) or row-major `n x states(i)` vectors.
    pub probs: Vec<Option<Vec<f64>>>,
    pub n_locations: usize,
}

impl PriorField {
    pub fn empty(net: &CausalNetwork, n: usize) -> PriorField {
        PriorField { probs: vec![None; net.n_nodes()], n_locations: n }
    }

    pub fn set_node(&mut self, node: usize, rows: Vec<f64>) {
        self.probs[node] = Some(rows);
    }

    pub fn row(&self, net: &CausalNetwork, node: usize, l: usize) -> Option<&[f64]> {
        let s = net.states(node);
        self.probs[node].as_deref().map(|v| &v[l * s..(l + 1) * s])
    }
}

const PRIOR_CLIP: f64 = 1e-6;

/// Converts one prior probability vector to logit offsets against state 0,
/// with each probability clipped into `[1e-6, 1 - 1e-6]` first so degenerate
/// grids cannot produce infinite logits. The state-0 offset is zero.
pub fn prior_logits(p: &[f64]) -> Vec<f64> {
    let clip = |v: f64| v.clamp(PRIOR_CLIP, 1.0 - PRIOR_CLIP);
    let p0 = clip(p[0]);
    p.iter().enumerate().map(|(m, &v)| if m == 0 { 0.0 } else { (clip(v) / p0).ln() }).collect()
}

/// Wires a prior field into per-location logit offsets on the given site
/// data. Every node with an attachment other than `None` must be covered at
/// every location.
pub fn attach_priors(
    net: &CausalNetwork,
    field: &PriorField,
    sites: &mut SiteData,
) -> Result<(), PriorError> {
    let n = sites.n_locations();
    if field.n_locations != n {
        return Err(PriorError::MissingLocation { have: field.n_locations, want: n });
    }
    for i in 0..net.n_nodes() {
        if net.prior_attachment(i) == PriorAttachment::None {
            continue;
        }
        let s = net.states(i);
        let rows = field.probs[i].as_ref().ok_or(PriorError::MissingNode(net.kind(i)))?;
        if rows.len() != n * s {
            return Err(PriorError::MissingLocation { have: rows.len() / s, want: n });
        }
        let mut offsets = vec![0.0; n * s];
        for l in 0..n {
            let logits = prior_logits(&rows[l * s..(l + 1) * s]);
            offsets[l * s..(l + 1) * s].copy_from_slice(&logits);
        }
        sites.prior_logits[i] = Some(offsets);
    }
    Ok(())
}

/// Builds the per-location prior field of a scene: building damage from the
/// configured family applied to the shaking grid, landslide and liquefaction
/// as binary vectors from their probability grids.
pub fn field_from_scene(
    net: &CausalNetwork,
    scene: &crate::scene::Scene,
    bd_mode: &PriorMode,
    curve: Option<&FragilityCurve>,
    pager: &PagerStubConfig,
) -> Result<PriorField, PriorError> {
    let n = scene.n_active();
    let mut field = PriorField::empty(net, n);
    for i in 0..net.n_nodes() {
        if net.prior_attachment(i) == PriorAttachment::None {
            continue;
        }
        let s = net.states(i);
        let mut rows = vec![0.0; n * s];
        match net.kind(i) {
            HazardKind::BuildingDamage => {
                for (j, &cell) in scene.active.iter().enumerate() {
                    let pga = scene.pga.values[cell].max(0.0);
                    let p = match bd_mode {
                        PriorMode::Hazus => {
                            let c = curve.ok_or(PriorError::MissingNode(net.kind(i)))?;
                            hazus_state_probs(pga, c).0
                        }
                        PriorMode::Pager => pager_stub_probs(pga, pager),
                        PriorMode::Combined(gamma) => {
                            let c = curve.ok_or(PriorError::MissingNode(net.kind(i)))?;
                            combine_priors(
                                &hazus_state_probs(pga, c).0,
                                &pager_stub_probs(pga, pager),
                                &PriorMode::Combined(*gamma),
                            )?
                        }
                    };
                    if p.len() != s {
                        return Err(PriorError::LengthMismatch(p.len(), s));
                    }
                    rows[j * s..(j + 1) * s].copy_from_slice(&p);
                }
            }
            HazardKind::Landslide | HazardKind::Liquefaction => {
                let grid = if net.kind(i) == HazardKind::Landslide {
                    &scene.prior_ls
                } else {
                    &scene.prior_lf
                };
                for (j, &cell) in scene.active.iter().enumerate() {
                    let p = grid.values[cell].clamp(0.0, 1.0);
                    rows[j * s] = 1.0 - p;
                    rows[j * s + 1] = p;
                }
            }
        }
        field.set_node(i, rows);
    }
    Ok(field)
}

/// Prior probability of any building damage per active location; used by
/// compensated pruning and the prior-vs-posterior comparisons.
pub fn prior_damage_probs(net: &CausalNetwork, field: &PriorField) -> Option<Vec<f64>> {
    let bd = net.node_index(HazardKind::BuildingDamage)?;
    let s = net.states(bd);
    field.probs[bd]
        .as_ref()
        .map(|rows| (0..field.n_locations).map(|l| 1.0 - rows[l * s]).collect())
}

/// Site data for a scene: observed log proxies plus attached prior offsets
/// and the building-damage activity mask.
pub fn build_site_data(
    net: &CausalNetwork,
    scene: &crate::scene::Scene,
    field: &PriorField,
    bd_mask: Option<Vec<bool>>,
) -> Result<SiteData, PriorError> {
    let mut sites = SiteData::new(net, scene.lny());
    attach_priors(net, field, &mut sites)?;
    if let (Some(mask), Some(bd)) = (bd_mask, net.node_index(HazardKind::BuildingDamage)) {
        if mask.iter().any(|&a| !a) {
            sites.active[bd] = Some(mask);
        }
    }
    Ok(sites)
}
