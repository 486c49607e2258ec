//! Missing-footprint scenario diagnostics: strict vs compensated pruning.

use qvcbi_core::eval::roc_auc;
use qvcbi_core::graph::HazardKind;
use qvcbi_core::inference::{fit, init_weights, mean_lny, FitConfig, Preconditioner};
use qvcbi_core::priors::{
    build_site_data, field_from_scene, prior_damage_probs, PagerStubConfig, PriorMode,
};
use qvcbi_core::scene::{prune_by_footprint, PruneMode};
use qvcbi_core::synth::{sample_scene, scenario_presets};

fn main() {
    let preset = scenario_presets("missing-footprint").unwrap();
    let (scene, net, truth) = sample_scene(&preset).unwrap();
    let field = field_from_scene(
        &net,
        &scene,
        &PriorMode::Hazus,
        Some(&preset.curve),
        &PagerStubConfig::weak_default(3),
    )
    .unwrap();
    let damage_prior = prior_damage_probs(&net, &field);
    let bd = net.node_index(HazardKind::BuildingDamage).unwrap();
    let n = scene.n_active();
    let n_damaged = (0..n).filter(|&c| truth.states[bd][c] > 0).count();
    let n_building = truth.building.iter().filter(|&&b| b).count();
    let corrupted_damaged = (0..n)
        .filter(|&c| truth.states[bd][c] > 0 && scene.footprint.values[c] == 0.0)
        .count();
    println!(
        "cells {n}, buildings {n_building}, damaged {n_damaged}, damaged-with-corrupted-footprint {corrupted_damaged}"
    );

    for (name, mode) in [
        ("strict", PruneMode::Strict),
        ("compensated", PruneMode::Compensated(0.2)),
    ] {
        let mask = prune_by_footprint(&scene, mode, damage_prior.as_deref()).unwrap();
        let kept = mask.iter().filter(|&&a| a).count();
        let bd_mask = if mask.iter().all(|&a| a) { None } else { Some(mask.clone()) };
        let sites = build_site_data(&net, &scene, &field, bd_mask).unwrap();
        let cfg = FitConfig {
            learning_rate: 0.01,
            batch_size: 512,
            max_epochs: 400,
            preconditioner: Preconditioner::Adaptive,
            seed: 42,
            ..Default::default()
        };
        let w0 = init_weights(&net, cfg.sigma_xor, cfg.seed, mean_lny(&sites));
        let res = fit(&net, &sites, w0, &cfg).unwrap();
        let scores: Vec<f64> = (0..n).map(|l| 1.0 - res.posterior.row(bd, l)[0]).collect();
        let labels: Vec<bool> = (0..n).map(|c| truth.states[bd][c] > 0).collect();
        let roc = roc_auc(&scores, &labels).unwrap();
        let recall = roc.tpr_at_fpr(0.1);
        // Recall split by corrupted/retained damaged cells at that
        // operating point.
        let thr = {
            let mut best = f64::INFINITY;
            for i in 0..roc.fpr.len() {
                if roc.fpr[i] <= 0.1 + 1e-12 {
                    best = roc.thresholds[i];
                }
            }
            best
        };
        let mut hit_retained = 0;
        let mut hit_corrupted = 0;
        let mut n_retained = 0;
        let mut n_corrupted = 0;
        for c in 0..n {
            if truth.states[bd][c] == 0 {
                continue;
            }
            let corrupted = scene.footprint.values[c] == 0.0;
            if corrupted {
                n_corrupted += 1;
                if scores[c] >= thr {
                    hit_corrupted += 1;
                }
            } else {
                n_retained += 1;
                if scores[c] >= thr {
                    hit_retained += 1;
                }
            }
        }
        println!(
            "{name}: kept {kept}/{n}, auc {:.3}, recall@0.1 {recall:.3} (retained {hit_retained}/{n_retained}, corrupted {hit_corrupted}/{n_corrupted}), thr {thr:.3}",
            roc.auc
        );
    }
}
