//! Compares the objective at the generative weights against a fitted run,
//! each with its posterior fully ascended. Diagnostic tool for preset and
//! optimizer tuning.

use qvcbi_core::bounds::{SiteData, VariationalParams, XiCache};
use qvcbi_core::graph::WeightSet;
use qvcbi_core::inference::{batch_elbo, e_step_update, update_xi, FitConfig, PosteriorField};
use qvcbi_core::priors::{build_site_data, field_from_scene, PagerStubConfig, PriorMode};
use qvcbi_core::synth::{sample_scene, scenario_presets};
use qvcbi_core::LatentWeighting;

fn ascend(
    net: &qvcbi_core::CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    sweeps: usize,
) -> (PosteriorField, VariationalParams, f64) {
    let n = sites.n_locations();
    let batch: Vec<usize> = (0..n).collect();
    let mut q = PosteriorField::from_priors(net, sites);
    let mut params = VariationalParams::constant(net, 1.0);
    let cfg = FitConfig::default();
    for _ in 0..sweeps {
        let cache = XiCache::new(&params);
        for &l in &batch {
            e_step_update(net, sites, w, &mut q, &params, &cache, l, LatentWeighting::Probability)
                .unwrap();
        }
        update_xi(net, sites, w, &q, &mut params, &batch, &cfg);
    }
    let e = batch_elbo(net, sites, w, &q, &params, &batch, LatentWeighting::Probability);
    (q, params, e)
}

fn main() {
    let mut cfg = scenario_presets("clean").unwrap();
    cfg.nrows = 64;
    cfg.ncols = 64;
    let (scene, net, truth) = sample_scene(&cfg).unwrap();
    let field = field_from_scene(
        &net,
        &scene,
        &PriorMode::Hazus,
        Some(&cfg.curve),
        &PagerStubConfig::weak_default(3),
    )
    .unwrap();
    let sites = build_site_data(&net, &scene, &field, None).unwrap();

    let (q_true, _, e_true) = ascend(&net, &sites, &cfg.weights, 12);
    println!("objective at generative weights: {e_true:.2}");

    // Posterior accuracy at the generative weights (upper envelope for any
    // fit of this family).
    let bd = net.node_index(qvcbi_core::HazardKind::BuildingDamage).unwrap();
    for class in 0..net.states(bd) {
        let scores: Vec<f64> = (0..sites.n_locations()).map(|l| q_true.row(bd, l)[class]).collect();
        let labels: Vec<bool> =
            (0..sites.n_locations()).map(|c| truth.states[bd][c] == class).collect();
        let auc = qvcbi_core::eval::roc_auc(&scores, &labels).unwrap().auc;
        println!("  BD class {class}: AUC at true weights = {auc:.4}");
    }
    for (name, idx) in [("LS", 0usize), ("LF", 1usize)] {
        let scores: Vec<f64> = (0..sites.n_locations()).map(|l| q_true.row(idx, l)[1]).collect();
        let labels: Vec<bool> =
            (0..sites.n_locations()).map(|c| truth.states[idx][c] == 1).collect();
        let auc = qvcbi_core::eval::roc_auc(&scores, &labels).unwrap().auc;
        let n_pos = labels.iter().filter(|&&l| l).count();
        println!("  {name}: AUC at true weights = {auc:.4} (positives {n_pos})");
        // Where do the worst false positives sit?
        let mut fp: Vec<(f64, usize)> = scores
            .iter()
            .zip(&labels)
            .enumerate()
            .filter(|(_, (_, &l))| !l)
            .map(|(c, (&s, _))| (s, c))
            .collect();
        fp.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut by_bd = [0usize; 4];
        let mut other_hazard = 0usize;
        for &(_, c) in fp.iter().take(n_pos.max(10)) {
            by_bd[truth.states[bd][c]] += 1;
            if truth.states[1 - idx][c] == 1 {
                other_hazard += 1;
            }
        }
        println!("    top-FP by true damage state: {by_bd:?}; other hazard active: {other_hazard}");
        let mean_pos: f64 = scores
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l)
            .map(|(&s, _)| s)
            .sum::<f64>()
            / n_pos.max(1) as f64;
        println!("    mean score at positives: {mean_pos:.3}");
        for &(s, c) in fp.iter().take(3) {
            let pr = sites.prior_row(&net, idx, c).unwrap().to_vec();
            println!(
                "    FP cell {c}: q={s:.3} lny={:.2} prior_logit={pr:?} bd_truth={} q_bd={:?}",
                sites.lny[c],
                truth.states[bd][c],
                q_true.row(bd, c).iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }

    // Objective at a deliberately degenerate configuration resembling what
    // long unregularized fits drift into: catch-all damage state, wide
    // observation noise, drowned priors.
    let mut w_bad = cfg.weights.clone();
    w_bad.leak[bd] = vec![0.0, -1.87, 3.91, -3.83];
    let ls = net.node_index(qvcbi_core::HazardKind::Landslide).unwrap();
    let lf = net.node_index(qvcbi_core::HazardKind::Liquefaction).unwrap();
    w_bad.leak[ls] = vec![0.0, -3.80];
    w_bad.leak[lf] = vec![0.0, -3.79];
    let slot = net.obs_slot(bd).unwrap();
    w_bad.obs[slot] = vec![0.0, -0.76, 0.35, 0.56];
    w_bad.obs[net.obs_slot(ls).unwrap()] = vec![0.0, -0.28];
    w_bad.obs[net.obs_slot(lf).unwrap()] = vec![0.0, -0.91];
    w_bad.obs_leak = -2.45;
    w_bad.obs_noise = 1.05;
    let (q_bad, p_bad, e_bad) = ascend(&net, &sites, &w_bad, 12);
    println!("objective at degenerate weights: {e_bad:.2}");

    let (_, p_true2, _) = ascend(&net, &sites, &cfg.weights, 12);
    for (tag, w, q, params) in
        [("true", &cfg.weights, &q_true, &p_true2), ("bad", &w_bad, &q_bad, &p_bad)]
    {
        let t = term_breakdown(&net, &sites, w, q, params);
        println!(
            "  [{tag}] obs={:.1} latent={:.1} xor={:.1} entropy={:.1}",
            t.0, t.1, t.2, t.3
        );
    }
}

/// Sum of each objective component over all locations.
fn term_breakdown(
    net: &qvcbi_core::CausalNetwork,
    sites: &SiteData,
    w: &WeightSet,
    q: &PosteriorField,
    params: &VariationalParams,
) -> (f64, f64, f64, f64) {
    use qvcbi_core::bounds::{expected_moments, node_bound, state_stats};
    let cache = XiCache::new(params);
    let (mut obs, mut latent, mut xor, mut entropy) = (0.0, 0.0, 0.0, 0.0);
    let wn2 = w.obs_noise * w.obs_noise;
    for l in 0..sites.n_locations() {
        let lny = sites.lny[l];
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
        obs += -lny
            - w.obs_noise.abs().ln()
            - 0.5 * qvcbi_core::graph::LN_2PI
            - (r * r + var_extra) / (2.0 * wn2);
        for i in 0..net.n_nodes() {
            let stats: Vec<(f64, f64)> =
                net.parents(i).iter().map(|&p| state_stats(q.row(p, l))).collect();
            let mc = expected_moments(net, w, i, &stats, sites.prior_row(net, i, l), &cache.lam[i]);
            let eb = node_bound(&mc, &params.xi[i], &cache.lam[i], cache.s_softplus[i]);
            let mut term = -eb;
            for (m, &qv) in q.row(i, l).iter().enumerate() {
                let _ = m;
                term += qv * mc.ez[m];
            }
            latent += term;
        }
        if net.xor_enabled() {
            let sig2 = w.sigma_xor * w.sigma_xor;
            let prod: f64 =
                net.xor_parents().iter().map(|&k| state_stats(q.row(k, l)).1).product();
            xor += -0.5 * (qvcbi_core::graph::LN_2PI + sig2.ln()) - prod / (2.0 * sig2);
        }
        for i in 0..net.n_nodes() {
            for &qv in q.row(i, l) {
                if qv > 0.0 {
                    entropy -= qv * qv.ln();
                }
            }
        }
    }
    (obs, latent, xor, entropy)
}
