//! Causal network topology and the exact conditional densities of every node.
//!
//! The model family is a three-layer directed network: latent multi-state
//! hazard nodes (landslide, liquefaction, building damage), an always-on leak
//! input with index 0, and two observed leaves — a log-normal damage-proxy
//! value `y` whose parents are the hazard nodes, and a narrow-Gaussian
//! exclusivity observation `u` whose parents are landslide and liquefaction.
//! Weights are shared across locations; per-location evidence (priors) enters
//! as additive logit offsets on top of the leak weight.

use thiserror::Error;

/// The latent hazard nodes. Declaration order is the fixed sweep order used
/// by the coordinate-ascent posterior updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HazardKind {
    Landslide,
    Liquefaction,
    BuildingDamage,
}

impl HazardKind {
    pub const ALL: [HazardKind; 3] = [
        HazardKind::Landslide,
        HazardKind::Liquefaction,
        HazardKind::BuildingDamage,
    ];

    pub fn short(self) -> &'static str {
        match self {
            HazardKind::Landslide => "LS",
            HazardKind::Liquefaction => "LF",
            HazardKind::BuildingDamage => "BD",
        }
    }

    pub fn parse(s: &str) -> Option<HazardKind> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LS" | "LANDSLIDE" => Some(HazardKind::Landslide),
            "LF" | "LIQUEFACTION" => Some(HazardKind::Liquefaction),
            "BD" | "BUILDING_DAMAGE" | "BUILDINGDAMAGE" => Some(HazardKind::BuildingDamage),
            _ => None,
        }
    }
}

impl std::fmt::Display for HazardKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

/// How per-location prior evidence is wired into a node's activation logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorAttachment {
    /// No prior input.
    None,
    /// Prior log-odds added at fixed unit weight (hyperparameter).
    Fixed,
    /// Prior log-odds scaled by a learnable attachment weight.
    Scaled,
}

/// Declarative description of a network. The observation leaf `y`, the leak
/// input, and (when `xor_parents` is nonempty) the exclusivity leaf `u` are
/// always part of the model and need not be listed as nodes.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    /// Latent nodes present in the model.
    pub nodes: Vec<HazardKind>,
    /// Number of active states per node (`M_i >= 1`), parallel to `nodes`.
    /// A node with `M_i` active states has `M_i + 1` states in total.
    pub cardinality: Vec<usize>,
    /// Directed edges among latent nodes, `(parent, child)`.
    pub edges: Vec<(HazardKind, HazardKind)>,
    /// Latent parents of the observation leaf `y`.
    pub obs_parents: Vec<HazardKind>,
    /// Parents of the exclusivity leaf `u`; empty disables the node,
    /// otherwise exactly two distinct nodes are required.
    pub xor_parents: Vec<HazardKind>,
    /// Prior wiring per node, parallel to `nodes`.
    pub prior_attachment: Vec<PriorAttachment>,
}

impl NetworkSpec {
    /// The standard three-hazard topology: binary landslide and liquefaction
    /// feeding building damage with `m_bd` damage states, all three observed
    /// through `y`, exclusivity on (LS, LF), priors on every node.
    pub fn standard(m_bd: usize) -> NetworkSpec {
        use HazardKind::*;
        NetworkSpec {
            nodes: vec![Landslide, Liquefaction, BuildingDamage],
            cardinality: vec![1, 1, m_bd],
            edges: vec![(Landslide, BuildingDamage), (Liquefaction, BuildingDamage)],
            obs_parents: vec![Landslide, Liquefaction, BuildingDamage],
            xor_parents: vec![Landslide, Liquefaction],
            prior_attachment: vec![
                PriorAttachment::Scaled,
                PriorAttachment::Scaled,
                PriorAttachment::Fixed,
            ],
        }
    }

    /// A minimal single-node network: building damage observed through `y`,
    /// no exclusivity leaf.
    pub fn bd_only(m_bd: usize, prior: PriorAttachment) -> NetworkSpec {
        NetworkSpec {
            nodes: vec![HazardKind::BuildingDamage],
            cardinality: vec![m_bd],
            edges: vec![],
            obs_parents: vec![HazardKind::BuildingDamage],
            xor_parents: vec![],
            prior_attachment: vec![prior],
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("cycle detected among latent-node edges")]
    Cycle,
    #[error("exclusivity node must have exactly 2 distinct parents, got {0}")]
    XorArity(usize),
    #[error("node {node} has cardinality {m}, need at least 1 active state")]
    Cardinality { node: HazardKind, m: usize },
    #[error("node {node} has {m} active states, the supported maximum is 7")]
    CardinalityTooLarge { node: HazardKind, m: usize },
    #[error("node {0} referenced but not declared")]
    UnknownNode(HazardKind),
    #[error("node {0} declared more than once")]
    DuplicateNode(HazardKind),
    #[error("field {0} must be parallel to the node list")]
    ShapeMismatch(&'static str),
    #[error("observation noise weight must be nonzero")]
    ZeroObservationNoise,
    #[error("exclusivity sigma must be at least {min}, got {got}")]
    SigmaTooSmall { min: f64, got: f64 },
    #[error("observation value must be positive, got {0}")]
    NonPositiveObservation(f64),
}

/// Validated, immutable network handle. Node indices are positions in the
/// declared node list and are stable for the lifetime of the network.
#[derive(Debug, Clone)]
pub struct CausalNetwork {
    nodes: Vec<HazardKind>,
    card: Vec<usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    obs_parents: Vec<usize>,
    xor_parents: Vec<usize>,
    prior_attachment: Vec<PriorAttachment>,
}

/// Validates a [`NetworkSpec`] and returns the immutable network handle.
///
/// The observation leaf and the leak input are implicit and always present;
/// they cannot appear as edge endpoints, which rules out the classic
/// leaf-to-latent cycle by construction. Cycles among latent nodes are
/// rejected here.
pub fn build_network(spec: &NetworkSpec) -> Result<CausalNetwork, GraphError> {
    let n = spec.nodes.len();
    if spec.cardinality.len() != n {
        return Err(GraphError::ShapeMismatch("cardinality"));
    }
    if spec.prior_attachment.len() != n {
        return Err(GraphError::ShapeMismatch("prior_attachment"));
    }
    for (i, &k) in spec.nodes.iter().enumerate() {
        if spec.nodes[..i].contains(&k) {
            return Err(GraphError::DuplicateNode(k));
        }
    }
    for (i, &m) in spec.cardinality.iter().enumerate() {
        if m < 1 {
            return Err(GraphError::Cardinality { node: spec.nodes[i], m });
        }
        if m + 1 > crate::bounds::MAX_STATES {
            return Err(GraphError::CardinalityTooLarge { node: spec.nodes[i], m });
        }
    }
    let index_of = |k: HazardKind| -> Result<usize, GraphError> {
        spec.nodes
            .iter()
            .position(|&n| n == k)
            .ok_or(GraphError::UnknownNode(k))
    };

    let mut parents = vec![Vec::new(); n];
    let mut children = vec![Vec::new(); n];
    for &(p, c) in &spec.edges {
        let (pi, ci) = (index_of(p)?, index_of(c)?);
        if !parents[ci].contains(&pi) {
            parents[ci].push(pi);
            children[pi].push(ci);
        }
    }

    // Kahn's algorithm over the latent edges.
    let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
    let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop() {
        seen += 1;
        for &c in &children[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push(c);
            }
        }
    }
    if seen != n {
        return Err(GraphError::Cycle);
    }

    let obs_parents = spec
        .obs_parents
        .iter()
        .map(|&k| index_of(k))
        .collect::<Result<Vec<_>, _>>()?;
    let xor_parents = spec
        .xor_parents
        .iter()
        .map(|&k| index_of(k))
        .collect::<Result<Vec<_>, _>>()?;
    if !xor_parents.is_empty() && (xor_parents.len() != 2 || xor_parents[0] == xor_parents[1]) {
        return Err(GraphError::XorArity(xor_parents.len()));
    }

    Ok(CausalNetwork {
        nodes: spec.nodes.clone(),
        card: spec.cardinality.clone(),
        parents,
        children,
        obs_parents,
        xor_parents,
        prior_attachment: spec.prior_attachment.clone(),
    })
}

impl CausalNetwork {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn kind(&self, i: usize) -> HazardKind {
        self.nodes[i]
    }

    pub fn node_index(&self, k: HazardKind) -> Option<usize> {
        self.nodes.iter().position(|&n| n == k)
    }

    /// Number of active states of node `i`.
    pub fn m(&self, i: usize) -> usize {
        self.card[i]
    }

    /// Total number of states of node `i`, including the inactive state 0.
    pub fn states(&self, i: usize) -> usize {
        self.card[i] + 1
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// The other parents of `child` besides `i`.
    pub fn spouses(&self, i: usize, child: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents[child].iter().copied().filter(move |&p| p != i)
    }

    pub fn obs_parents(&self) -> &[usize] {
        &self.obs_parents
    }

    pub fn obs_slot(&self, node: usize) -> Option<usize> {
        self.obs_parents.iter().position(|&p| p == node)
    }

    pub fn xor_enabled(&self) -> bool {
        !self.xor_parents.is_empty()
    }

    pub fn xor_parents(&self) -> &[usize] {
        &self.xor_parents
    }

    /// The other exclusivity parent when `node` is one of them.
    pub fn xor_partner(&self, node: usize) -> Option<usize> {
        match *self.xor_parents.as_slice() {
            [a, b] if a == node => Some(b),
            [a, b] if b == node => Some(a),
            _ => None,
        }
    }

    pub fn prior_attachment(&self, i: usize) -> PriorAttachment {
        self.prior_attachment[i]
    }
}

/// All causal coefficients of a network. Values are shared across locations.
///
/// Index conventions:
/// - `parent[i][s][m]` weights parent slot `s` of node `i` (aligned with
///   `CausalNetwork::parents(i)`) toward target state `m` of node `i`; the
///   parent contributes its numeric state value as the input.
/// - `obs[s][m]` weights observation-parent slot `s` (aligned with
///   `CausalNetwork::obs_parents()`) when that parent is in state `m`.
/// - Entries for state 0 are identically zero; this is the identification
///   constraint that pins the inactive state as the softmax baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub parent: Vec<Vec<Vec<f64>>>,
    pub noise: Vec<Vec<f64>>,
    pub leak: Vec<Vec<f64>>,
    pub obs: Vec<Vec<f64>>,
    pub obs_leak: f64,
    pub obs_noise: f64,
    /// Learnable prior-attachment scale per node; fixed at 1 unless the
    /// node's attachment is [`PriorAttachment::Scaled`].
    pub prior_scale: Vec<f64>,
    /// Standard deviation of the Gaussian relaxation of the exclusivity
    /// observation.
    pub sigma_xor: f64,
}

/// Smallest admissible `sigma_xor`; below this the exclusivity penalty
/// dominates every other term of the objective.
pub const SIGMA_XOR_MIN: f64 = 1e-3;

/// Smallest admissible `|obs_noise|`; it appears in denominators throughout.
pub const OBS_NOISE_MIN: f64 = 1e-3;

impl WeightSet {
    pub fn zeros(net: &CausalNetwork) -> WeightSet {
        let n = net.n_nodes();
        WeightSet {
            parent: (0..n)
                .map(|i| net.parents(i).iter().map(|_| vec![0.0; net.states(i)]).collect())
                .collect(),
            noise: (0..n).map(|i| vec![0.0; net.states(i)]).collect(),
            leak: (0..n).map(|i| vec![0.0; net.states(i)]).collect(),
            obs: net.obs_parents().iter().map(|&k| vec![0.0; net.states(k)]).collect(),
            obs_leak: 0.0,
            obs_noise: 1.0,
            prior_scale: vec![1.0; n],
            sigma_xor: 0.1,
        }
    }

    pub fn validate(&self, net: &CausalNetwork) -> Result<(), GraphError> {
        if self.obs_noise == 0.0 || !self.obs_noise.is_finite() {
            return Err(GraphError::ZeroObservationNoise);
        }
        if net.xor_enabled() && self.sigma_xor < SIGMA_XOR_MIN {
            return Err(GraphError::SigmaTooSmall { min: SIGMA_XOR_MIN, got: self.sigma_xor });
        }
        for i in 0..net.n_nodes() {
            if self.leak[i][0] != 0.0 || self.noise[i][0] != 0.0 {
                return Err(GraphError::ShapeMismatch("state-0 weight must be zero"));
            }
            for s in 0..net.parents(i).len() {
                if self.parent[i][s][0] != 0.0 {
                    return Err(GraphError::ShapeMismatch("state-0 weight must be zero"));
                }
            }
        }
        for o in &self.obs {
            if o[0] != 0.0 {
                return Err(GraphError::ShapeMismatch("state-0 weight must be zero"));
            }
        }
        Ok(())
    }
}

/// Activation logits of node `i` given a full parent-state assignment and one
/// noise draw per state. `parent_states` is aligned with
/// `CausalNetwork::parents(i)`; `eps` has one entry per state of `i` (entry 0
/// is unused since the state-0 noise weight is zero). Returns a vector with
/// `z[0] == 0` exactly. An inactive parent (state 0) contributes nothing.
pub fn activation_logits(
    net: &CausalNetwork,
    w: &WeightSet,
    i: usize,
    parent_states: &[usize],
    eps: &[f64],
) -> Vec<f64> {
    assert_eq!(parent_states.len(), net.parents(i).len(), "missing parent state");
    assert_eq!(eps.len(), net.states(i));
    let mut z = vec![0.0; net.states(i)];
    for m in 1..net.states(i) {
        let mut v = w.leak[i][m] + w.noise[i][m] * eps[m];
        for (slot, &x) in parent_states.iter().enumerate() {
            v += w.parent[i][slot][m] * x as f64;
        }
        z[m] = v;
    }
    z
}

/// Softmax with max-subtraction. Total on finite input; the output sums to 1
/// up to rounding.
pub fn conditional_categorical(z: &[f64]) -> Vec<f64> {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

/// Numerically safe log-sum-exp, used as the softmax normalizer.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !zmax.is_finite() {
        return zmax;
    }
    zmax + z.iter().map(|&v| (v - zmax).exp()).sum::<f64>().ln()
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// Log-density of the damage-proxy observation `y` given its parents'
/// states: `ln y` is normal with mean `obs_leak + sum_k obs[k][m_k] * m_k`
/// and standard deviation `|obs_noise|`. Rejects `y <= 0`.
pub fn observation_logpdf(
    net: &CausalNetwork,
    w: &WeightSet,
    y: f64,
    parent_states: &[usize],
) -> Result<f64, GraphError> {
    if !(y > 0.0) {
        return Err(GraphError::NonPositiveObservation(y));
    }
    assert_eq!(parent_states.len(), net.obs_parents().len(), "missing parent state");
    let mut mu = w.obs_leak;
    for (slot, &x) in parent_states.iter().enumerate() {
        mu += w.obs[slot][x] * x as f64;
    }
    let lny = y.ln();
    let r = lny - mu;
    Ok(-lny - w.obs_noise.abs().ln() - 0.5 * LN_2PI - r * r / (2.0 * w.obs_noise * w.obs_noise))
}

/// Log-density of the exclusivity observation: `u` is normal with mean equal
/// to the product of the numeric parent states and standard deviation
/// `sigma`. Rejects nonpositive sigma.
pub fn xor_logpdf(u: f64, parent_states: &[usize], sigma: f64) -> Result<f64, GraphError> {
    if !(sigma > 0.0) {
        return Err(GraphError::SigmaTooSmall { min: 0.0, got: sigma });
    }
    let prod: f64 = parent_states.iter().map(|&x| x as f64).product();
    let r = u - prod;
    Ok(-sigma.ln() - 0.5 * LN_2PI - r * r / (2.0 * sigma * sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_net() -> CausalNetwork {
        build_network(&NetworkSpec::standard(3)).unwrap()
    }

    #[test]
    fn minimal_topology_builds() {
        let net = build_network(&NetworkSpec::bd_only(1, PriorAttachment::None)).unwrap();
        assert_eq!(net.n_nodes(), 1);
        assert_eq!(net.states(0), 2);
        assert!(!net.xor_enabled());
    }

    #[test]
    fn standard_topology_builds() {
        let net = toy_net();
        assert_eq!(net.n_nodes(), 3);
        let bd = net.node_index(HazardKind::BuildingDamage).unwrap();
        assert_eq!(net.parents(bd).len(), 2);
        assert_eq!(net.obs_parents().len(), 3);
        assert!(net.xor_enabled());
        assert_eq!(net.m(bd), 3);
    }

    #[test]
    fn cycle_rejected() {
        use HazardKind::*;
        let mut spec = NetworkSpec::standard(2);
        spec.edges.push((BuildingDamage, Landslide));
        assert_eq!(build_network(&spec).unwrap_err(), GraphError::Cycle);
    }

    #[test]
    fn bad_cardinality_rejected() {
        let mut spec = NetworkSpec::standard(2);
        spec.cardinality[2] = 0;
        assert!(matches!(build_network(&spec).unwrap_err(), GraphError::Cardinality { .. }));
    }

    #[test]
    fn xor_arity_rejected() {
        let mut spec = NetworkSpec::standard(2);
        spec.xor_parents = vec![HazardKind::Landslide];
        assert_eq!(build_network(&spec).unwrap_err(), GraphError::XorArity(1));
    }

    #[test]
    fn logits_only_leak_when_parents_inactive() {
        let net = toy_net();
        let bd = net.node_index(HazardKind::BuildingDamage).unwrap();
        let mut w = WeightSet::zeros(&net);
        w.leak[bd] = vec![0.0, 0.3, -0.2, 1.1];
        let z = activation_logits(&net, &w, bd, &[0, 0], &[0.0; 4]);
        assert_eq!(z, vec![0.0, 0.3, -0.2, 1.1]);
    }

    #[test]
    fn logits_zero_for_zero_weights() {
        let net = toy_net();
        let bd = net.node_index(HazardKind::BuildingDamage).unwrap();
        let w = WeightSet::zeros(&net);
        let z = activation_logits(&net, &w, bd, &[1, 1], &[0.5; 4]);
        assert_eq!(z, vec![0.0; 4]);
    }

    #[test]
    fn logits_accumulate_parent_contributions() {
        // One active landslide parent at weight 2 plus leak 0.5 gives 2.5.
        let net = toy_net();
        let bd = net.node_index(HazardKind::BuildingDamage).unwrap();
        let ls = net.node_index(HazardKind::Landslide).unwrap();
        let slot = net.parents(bd).iter().position(|&p| p == ls).unwrap();
        let mut w = WeightSet::zeros(&net);
        w.parent[bd][slot][1] = 2.0;
        w.leak[bd][1] = 0.5;
        let z = activation_logits(&net, &w, bd, &[1, 0], &[0.0; 4]);
        assert!((z[1] - 2.5).abs() < 1e-15);
        assert_eq!(z[0], 0.0);
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let p = conditional_categorical(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = conditional_categorical(&[0.0, 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_compensated_oracle() {
        use crate::oracle::softmax_oracle;
        let cases: Vec<Vec<f64>> = vec![
            vec![0.0, 1.0, 2.0],
            vec![-700.0, 0.0, 700.0],
            vec![3.5, 3.5, 3.5, 3.5],
            vec![0.1, -9.7, 4.2, 1.9, -2.2],
        ];
        for z in cases {
            let fast = conditional_categorical(&z);
            let slow = softmax_oracle(&z);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let z = [0.3, -1.2, 4.0, 2.2];
        let p = conditional_categorical(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + 123.456).collect();
        let q = conditional_categorical(&shifted);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_logpdf_closed_form() {
        let net = toy_net();
        let mut w = WeightSet::zeros(&net);
        w.obs_leak = -1.3;
        w.obs_noise = 1.0;
        // Zero residual: y = exp(obs_leak), all parents inactive.
        let lp = observation_logpdf(&net, &w, (-1.3f64).exp(), &[0, 0, 0]).unwrap();
        assert!((lp - (1.3 - 0.5 * LN_2PI)).abs() < 1e-12);
        // Standard log-normal at y = 1.
        w.obs_leak = 0.0;
        let lp = observation_logpdf(&net, &w, 1.0, &[0, 0, 0]).unwrap();
        assert!((lp + 0.5 * LN_2PI).abs() < 1e-12);
        assert!(observation_logpdf(&net, &w, 0.0, &[0, 0, 0]).is_err());
        assert!(observation_logpdf(&net, &w, -2.0, &[0, 0, 0]).is_err());
    }

    #[test]
    fn observation_logpdf_matches_direct_density() {
        // Log of the closed-form log-normal density, evaluated directly.
        let net = toy_net();
        let mut w = WeightSet::zeros(&net);
        w.obs_leak = 0.4;
        w.obs_noise = 0.7;
        w.obs[0][1] = 0.9; // LS
        w.obs[2][2] = 1.4; // BD state 2
        let y = 0.37;
        let states = [1usize, 0, 2];
        let mu = w.obs_leak + 0.9 * 1.0 + 1.4 * 2.0;
        let dens = 1.0 / (y * 0.7 * (2.0 * std::f64::consts::PI).sqrt())
            * (-(y.ln() - mu).powi(2) / (2.0 * 0.7f64.powi(2))).exp();
        let lp = observation_logpdf(&net, &w, y, &states).unwrap();
        assert!((lp - dens.ln()).abs() < 1e-12);
    }

    #[test]
    fn observation_density_integrates_to_one() {
        // Numeric quadrature over y in (0, inf) on a log-spaced grid.
        let net = toy_net();
        let mut w = WeightSet::zeros(&net);
        for &(mu, sig) in &[(0.0, 0.3), (-3.0, 1.0), (3.0, 2.0), (1.0, 0.5)] {
            w.obs_leak = mu;
            w.obs_noise = sig;
            // Substituting t = ln y turns the integral into a plain normal.
            let lo = mu - 10.0 * sig;
            let hi = mu + 10.0 * sig;
            let n = 20_000;
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for j in 0..=n {
                let t = lo + j as f64 * h;
                let y = t.exp();
                let f = observation_logpdf(&net, &w, y, &[0, 0, 0]).unwrap().exp() * y;
                let wgt = if j == 0 || j == n { 0.5 } else { 1.0 };
                total += wgt * f * h;
            }
            assert!((total - 1.0).abs() < 1e-4, "integral {total} for mu={mu} sig={sig}");
        }
    }

    #[test]
    fn xor_logpdf_cases() {
        let base = xor_logpdf(0.0, &[0, 0], 0.1).unwrap();
        assert!((base - (1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 0.1)).ln()).abs() < 1e-12);
        // Residual 2 at sigma 0.1 costs 200 in log density.
        let lp = xor_logpdf(0.0, &[1, 2], 0.1).unwrap();
        assert!((lp - (base - 200.0)).abs() < 1e-9);
        // Halving sigma at zero residual raises the density by ln 2.
        let halved = xor_logpdf(0.0, &[0, 0], 0.05).unwrap();
        assert!((halved - base - 2f64.ln()).abs() < 1e-12);
        assert!(xor_logpdf(0.0, &[0, 0], 0.0).is_err());
    }

    #[test]
    fn state_zero_logit_identically_zero() {
        let net = toy_net();
        let bd = net.node_index(HazardKind::BuildingDamage).unwrap();
        let mut w = WeightSet::zeros(&net);
        w.leak[bd][1] = 3.0;
        w.parent[bd][0][2] = -1.0;
        w.noise[bd][3] = 2.0;
        for states in [[0, 0], [1, 1], [0, 1]] {
            let z = activation_logits(&net, &w, bd, &states, &[0.7; 4]);
            assert_eq!(z[0], 0.0);
        }
    }

    #[test]
    fn uniform_when_inactive_and_zero_weights() {
        let net = toy_net();
        let bd = net.node_index(HazardKind::BuildingDamage).unwrap();
        let w = WeightSet::zeros(&net);
        let p = conditional_categorical(&activation_logits(&net, &w, bd, &[0, 0], &[0.0; 4]));
        for v in &p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}
