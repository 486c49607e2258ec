//! Subcommand implementations shared by the binary and the test suite.

use crate::checkpoint::{self, CHECKPOINT_FILE, RUNNING_MARKER};
use crate::config::{load_curve, write_curve, ConfigError, RunConfig};
use qvcbi_core::bounds::SiteData;
use qvcbi_core::eval::{
    confusion_binary, cross_entropy, one_vs_rest, roc_auc, ClassMetrics, MetricsReport,
    NodeReport,
};
use qvcbi_core::graph::{build_network, CausalNetwork, HazardKind};
use qvcbi_core::inference::{
    self, init_weights, run_fit, FitError, PosteriorField,
};
use qvcbi_core::priors::{build_site_data, field_from_scene, prior_damage_probs, PriorField};
use qvcbi_core::scene::{
    assemble_scene, prune_by_footprint, read_grid, read_ground_truth, read_shakemap_xml,
    write_grid, write_ground_truth, write_posterior_outputs, AssembleOptions, Scene,
};
use qvcbi_core::synth::{sample_scene, scenario_presets, RecommendedPrior};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("fit diverged: {0}")]
    Diverged(String),
}

impl CliError {
    /// 2 for configuration problems, 3 for data problems, 4 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

/// Common invocation flags.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub out_override: Option<PathBuf>,
    pub seed_override: Option<u64>,
    pub workers: usize,
    pub deterministic: bool,
    pub verbosity: u8,
}

impl Default for Invocation {
    fn default() -> Invocation {
        Invocation {
            out_override: None,
            seed_override: None,
            workers: 0,
            deterministic: false,
            verbosity: 1,
        }
    }
}

impl Invocation {
    pub fn from_env() -> Invocation {
        let verbosity = match std::env::var("QVCBI_LOG").as_deref() {
            Ok("quiet") => 0,
            Ok("debug") => 2,
            _ => 1,
        };
        Invocation { verbosity, ..Invocation::default() }
    }

    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers
        }
    }
}

fn out_dir(cfg: &RunConfig, inv: &Invocation) -> PathBuf {
    inv.out_override.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    seed: u64,
    workers: usize,
    wall_s: f64,
    extra: &[(&str, String)],
) -> Result<(), CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "[run]");
    let _ = writeln!(out, "command = \"{command}\"");
    let _ = writeln!(out, "version = \"{}\"", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "seed = {seed}");
    let _ = writeln!(out, "workers = {workers}");
    let _ = writeln!(out, "wall_time_s = {wall_s}");
    for (k, v) in extra {
        let _ = writeln!(out, "{k} = {v}");
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "[config]");
    let _ = writeln!(out, "echo = '''");
    out.push_str(&cfg.canonical());
    let _ = writeln!(out, "'''");
    std::fs::write(dir.join("manifest.toml"), out).map_err(data_err)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

/// Files produced by scene synthesis, for the pipeline handoff.
#[derive(Debug, Clone)]
pub struct SynthOutputs {
    pub dpm: PathBuf,
    pub pga: PathBuf,
    pub prior_ls: PathBuf,
    pub prior_lf: PathBuf,
    pub footprint: PathBuf,
    pub curve: PathBuf,
    pub truth: Vec<(HazardKind, PathBuf)>,
    pub recommended_prior: RecommendedPrior,
}

pub fn cmd_synth(cfg: &RunConfig, inv: &Invocation) -> Result<SynthOutputs, CliError> {
    let start = Instant::now();
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("synth command needs a [synth] section".into()))?;
    let mut scfg = scenario_presets(&synth.preset).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if let Some(r) = synth.rows {
        scfg.nrows = r;
    }
    if let Some(c) = synth.cols {
        scfg.ncols = c;
    }
    if let Some(s) = inv.seed_override.or(synth.seed) {
        scfg.seed = s;
    }
    let dir = out_dir(cfg, inv);
    std::fs::create_dir_all(&dir).map_err(data_err)?;
    let (scene, net, truth) = sample_scene(&scfg).map_err(data_err)?;

    let paths = SynthOutputs {
        dpm: dir.join("dpm.asc"),
        pga: dir.join("pga.asc"),
        prior_ls: dir.join("prior_ls.asc"),
        prior_lf: dir.join("prior_lf.asc"),
        footprint: dir.join("footprint.asc"),
        curve: dir.join("curve.toml"),
        truth: Vec::new(),
        recommended_prior: scfg.recommended_prior,
    };
    write_grid(&scene.dpm, &paths.dpm).map_err(data_err)?;
    write_grid(&scene.pga, &paths.pga).map_err(data_err)?;
    write_grid(&scene.prior_ls, &paths.prior_ls).map_err(data_err)?;
    write_grid(&scene.prior_lf, &paths.prior_lf).map_err(data_err)?;
    write_grid(&scene.footprint, &paths.footprint).map_err(data_err)?;
    write_curve(&paths.curve, &scfg.curve)?;

    let mut paths = paths;
    for i in 0..net.n_nodes() {
        let kind = net.kind(i);
        let p = dir.join(format!("truth_{}.csv", kind.short().to_ascii_lowercase()));
        write_ground_truth(
            &p,
            &scene.dpm,
            (0..scene.dpm.len()).map(|c| (c, truth.states[i][c])),
        )
        .map_err(data_err)?;
        paths.truth.push((kind, p));
    }

    write_manifest(
        &dir,
        "synth",
        cfg,
        scfg.seed,
        1,
        start.elapsed().as_secs_f64(),
        &[
            ("preset", format!("\"{}\"", synth.preset)),
            ("rows", scfg.nrows.to_string()),
            ("cols", scfg.ncols.to_string()),
            ("xor_forced", truth.xor_forced.to_string()),
        ],
    )?;
    if inv.verbosity > 0 {
        println!("synth: wrote scene ({}x{}) to {}", scfg.nrows, scfg.ncols, dir.display());
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

/// Everything a fit leaves behind in memory, for eval and the pipeline.
pub struct FitArtifacts {
    pub net: CausalNetwork,
    pub scene: Scene,
    pub sites: SiteData,
    pub field: PriorField,
    pub bd_mask: Option<Vec<bool>>,
    pub posterior: PosteriorField,
    pub trace: Vec<f64>,
    pub converged: bool,
    pub epochs_run: usize,
}

fn load_scene(cfg: &RunConfig) -> Result<Scene, CliError> {
    let dpm = read_grid(cfg.data.dpm.as_ref().unwrap()).map_err(data_err)?;
    let pga = match (&cfg.data.pga, &cfg.data.shakemap) {
        (Some(p), _) => read_grid(p).map_err(data_err)?,
        (None, Some(p)) => read_shakemap_xml(p).map_err(data_err)?,
        (None, None) => unreachable!("validated earlier"),
    };
    let prior_ls = read_grid(cfg.priors.ls_grid.as_ref().unwrap()).map_err(data_err)?;
    let prior_lf = read_grid(cfg.priors.lf_grid.as_ref().unwrap()).map_err(data_err)?;
    let footprint = read_grid(cfg.data.footprint.as_ref().unwrap()).map_err(data_err)?;
    let opts = AssembleOptions {
        y_floor: cfg.data.y_floor,
        allow_nearest_resample: cfg.data.allow_nearest_resample,
    };
    assemble_scene(dpm, pga, prior_ls, prior_lf, footprint, &opts).map_err(data_err)
}

/// Assembles the problem a fit or an evaluation runs on.
pub fn prepare_problem(
    cfg: &RunConfig,
) -> Result<(CausalNetwork, Scene, SiteData, PriorField, Option<Vec<bool>>), CliError> {
    cfg.validate_files(true)?;
    let scene = load_scene(cfg)?;
    let net = build_network(&cfg.network_spec()).map_err(data_err)?;
    let curve = match &cfg.priors.curve_file {
        Some(p) => Some(load_curve(p)?),
        None => None,
    };
    let field = field_from_scene(&net, &scene, &cfg.prior_mode()?, curve.as_ref(), &cfg.pager_stub())
        .map_err(data_err)?;
    let prior_damage = prior_damage_probs(&net, &field);
    let mask = prune_by_footprint(&scene, cfg.prune_mode()?, prior_damage.as_deref())
        .map_err(data_err)?;
    let bd_mask =
        if mask.iter().all(|&a| a) { None } else { Some(mask) };
    let sites =
        build_site_data(&net, &scene, &field, bd_mask.clone()).map_err(data_err)?;
    Ok((net, scene, sites, field, bd_mask))
}

pub fn cmd_fit(cfg: &RunConfig, inv: &Invocation) -> Result<FitArtifacts, CliError> {
    let start = Instant::now();
    let dir = out_dir(cfg, inv);
    std::fs::create_dir_all(&dir).map_err(data_err)?;
    let (net, scene, sites, field, bd_mask) = prepare_problem(cfg)?;
    let workers = inv.effective_workers();
    let fit_cfg = cfg.fit_config(inv.seed_override, workers)?;

    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let marker = dir.join(RUNNING_MARKER);
    let mut state = if marker.exists() && ckpt_path.exists() {
        let s = checkpoint::load(&ckpt_path, &net, sites.n_locations())?;
        if inv.verbosity > 0 {
            println!("resuming from checkpoint at epoch {}", s.next_epoch);
        }
        s
    } else {
        let w0 = init_weights(
            &net,
            fit_cfg.sigma_xor,
            fit_cfg.seed,
            inference::mean_lny(&sites),
        );
        inference::init_state(&net, &sites, w0, &fit_cfg).map_err(|e| map_fit_err(e))?
    };
    std::fs::write(&marker, b"fit in progress\n").map_err(data_err)?;

    let every = cfg.fit.checkpoint_every.max(1);
    let verbosity = inv.verbosity;
    let net_ref = &net;
    let ckpt_ref = &ckpt_path;
    let outcome = run_fit(&net, &sites, &fit_cfg, &mut state, |stats, st| {
        if verbosity > 0 {
            println!(
                "epoch={} audit_elbo={} grad_norm={}",
                stats.epoch, stats.audit_elbo, stats.grad_norm
            );
        }
        if (stats.epoch + 1) % every == 0 {
            let _ = checkpoint::save(ckpt_ref, net_ref, st);
        }
    })
    .map_err(map_fit_err)?;

    write_posterior_outputs(&dir, &scene, &net, &state.q, bd_mask.as_deref())
        .map_err(data_err)?;
    let mut trace_csv = String::from("epoch,audit_elbo\n");
    for (e, v) in state.trace.iter().enumerate() {
        let _ = writeln!(trace_csv, "{e},{v}");
    }
    std::fs::write(dir.join("elbo_trace.csv"), trace_csv).map_err(data_err)?;
    write_manifest(
        &dir,
        "fit",
        cfg,
        fit_cfg.seed,
        workers,
        start.elapsed().as_secs_f64(),
        &[
            ("epochs_run", outcome.epochs_run.to_string()),
            ("converged", outcome.converged.to_string()),
            ("active_locations", sites.n_locations().to_string()),
        ],
    )?;
    let _ = std::fs::remove_file(&marker);

    Ok(FitArtifacts {
        net,
        scene,
        sites,
        field,
        bd_mask,
        posterior: state.q,
        trace: state.trace,
        converged: outcome.converged,
        epochs_run: outcome.epochs_run,
    })
}

fn map_fit_err(e: FitError) -> CliError {
    match e {
        FitError::Diverged { .. } => CliError::Diverged(e.to_string()),
        FitError::BadConfig(msg) => CliError::Config(ConfigError::Invalid(msg)),
        FitError::Graph(g) => CliError::Data(g.to_string()),
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Reads a posterior field back from the per-state grids in `dir`.
pub fn read_posterior(
    dir: &Path,
    scene: &Scene,
    net: &CausalNetwork,
) -> Result<PosteriorField, CliError> {
    let mut q = PosteriorField::uniform(net, scene.n_active());
    for i in 0..net.n_nodes() {
        let tag = net.kind(i).short().to_ascii_lowercase();
        for m in 0..net.states(i) {
            let path = dir.join(format!("posterior_{tag}_state{m}.asc"));
            let g = read_grid(&path).map_err(data_err)?;
            if g.ncols != scene.dpm.ncols || g.nrows != scene.dpm.nrows {
                return Err(CliError::Data(format!(
                    "{} does not match the scene extent",
                    path.display()
                )));
            }
            for (j, &cell) in scene.active.iter().enumerate() {
                q.row_mut(i, j)[m] = g.values[cell];
            }
        }
    }
    Ok(q)
}

/// Per-node evaluation against the configured ground-truth files. The
/// posterior may come from memory (pipeline) or be read back from grids.
pub fn evaluate(
    cfg: &RunConfig,
    inv: &Invocation,
    net: &CausalNetwork,
    scene: &Scene,
    field: &PriorField,
    q: &PosteriorField,
) -> Result<MetricsReport, CliError> {
    let dir = out_dir(cfg, inv);
    std::fs::create_dir_all(&dir).map_err(data_err)?;
    let active_index = scene.active_index();
    let mut report = MetricsReport::default();

    for i in 0..net.n_nodes() {
        let kind = net.kind(i);
        let Some(truth_path) = cfg.truth_path(kind) else { continue };
        let truth =
            read_ground_truth(truth_path, &scene.dpm, net.m(i)).map_err(data_err)?;
        if truth.points.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no usable ground-truth points",
                truth_path.display()
            )));
        }
        let s = net.states(i);
        let mut per_class = Vec::new();
        let mut matched = 0usize;
        let mut excluded_total = 0usize;
        for class in 0..s {
            let (scores, labels, excluded) =
                one_vs_rest(q, i, &active_index, &truth.points, class);
            excluded_total = excluded;
            matched = scores.len();
            if matched == 0 {
                return Err(CliError::Data(format!(
                    "{}: no ground-truth points fall on active cells",
                    truth_path.display()
                )));
            }
            let n_pos = labels.iter().filter(|&&l| l).count();
            if n_pos == 0 || n_pos == labels.len() {
                continue; // class absent from the truth; no curve to draw
            }
            let post = roc_auc(&scores, &labels).map_err(data_err)?;
            // Prior scores for the same class.
            let prior_scores: Vec<f64> = truth
                .points
                .iter()
                .filter_map(|&(cell, _)| active_index[cell])
                .map(|l| field.row(net, i, l).map(|r| r[class]).unwrap_or(1.0 / s as f64))
                .collect();
            let prior = roc_auc(&prior_scores, &labels).map_err(data_err)?;
            // Per-class binary cross-entropy of this class's score.
            let binary: Vec<([f64; 2], usize)> = scores
                .iter()
                .zip(&labels)
                .map(|(&p, &l)| ([1.0 - p, p], l as usize))
                .collect();
            let xent = cross_entropy(binary.iter().map(|(p, l)| (p.as_slice(), *l)))
                .map_err(data_err)?;
            per_class.push(ClassMetrics {
                class,
                auc_posterior: post.auc,
                auc_prior: prior.auc,
                cross_entropy: xent,
            });
            if cfg.output.write_roc {
                let tag = kind.short().to_ascii_lowercase();
                std::fs::write(dir.join(format!("roc_{tag}_class{class}.csv")), post.to_csv())
                    .map_err(data_err)?;
            }
        }

        // Binary damaged-vs-undamaged confusion on 1 - p(state 0).
        let damage_scores: Vec<f64> = truth
            .points
            .iter()
            .filter_map(|&(cell, _)| active_index[cell])
            .map(|l| 1.0 - q.row(i, l)[0])
            .collect();
        let damage_labels: Vec<bool> = truth
            .points
            .iter()
            .filter(|&&(cell, _)| active_index[cell].is_some())
            .map(|&(_, t)| t > 0)
            .collect();
        let confusion = confusion_binary(&damage_scores, &damage_labels, 0.5);

        report.nodes.push(NodeReport {
            node: kind.short().to_string(),
            per_class,
            confusion,
            threshold: 0.5,
            n_points: matched,
            excluded: excluded_total + truth.skipped_outside,
        });
    }

    if report.nodes.is_empty() {
        return Err(CliError::Config(ConfigError::Invalid(
            "no ground-truth paths configured; nothing to evaluate".into(),
        )));
    }

    std::fs::write(dir.join("metrics.csv"), report.to_csv()).map_err(data_err)?;
    std::fs::write(dir.join("metrics.txt"), report.to_text()).map_err(data_err)?;
    // Row-normalized confusion rates, damaged-true row first.
    let mut conf = String::from("node,threshold,tp,fp,fn,tn\n");
    for n in &report.nodes {
        let _ = writeln!(
            conf,
            "{},{},{},{},{},{}",
            n.node,
            n.threshold,
            n.confusion[0][0],
            n.confusion[0][1],
            n.confusion[1][0],
            n.confusion[1][1]
        );
    }
    std::fs::write(dir.join("confusion.csv"), conf).map_err(data_err)?;
    // Binary prior-vs-posterior comparison table.
    let mut cmp = String::from("node,model,auc\n");
    for i in 0..net.n_nodes() {
        let kind = net.kind(i);
        let Some(truth_path) = cfg.truth_path(kind) else { continue };
        let truth = read_ground_truth(truth_path, &scene.dpm, net.m(i)).map_err(data_err)?;
        let pairs: Vec<(usize, usize)> = truth
            .points
            .iter()
            .filter_map(|&(cell, t)| active_index[cell].map(|l| (l, t)))
            .collect();
        let labels: Vec<bool> = pairs.iter().map(|&(_, t)| t > 0).collect();
        if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
            continue;
        }
        let post_scores: Vec<f64> = pairs.iter().map(|&(l, _)| 1.0 - q.row(i, l)[0]).collect();
        let prior_scores: Vec<f64> = pairs
            .iter()
            .map(|&(l, _)| field.row(net, i, l).map(|r| 1.0 - r[0]).unwrap_or(0.5))
            .collect();
        let tag = kind.short();
        let _ = writeln!(
            cmp,
            "{tag},posterior,{}",
            roc_auc(&post_scores, &labels).map_err(data_err)?.auc
        );
        let _ = writeln!(
            cmp,
            "{tag},prior,{}",
            roc_auc(&prior_scores, &labels).map_err(data_err)?.auc
        );
    }
    std::fs::write(dir.join("prior_comparison.csv"), cmp).map_err(data_err)?;
    if inv.verbosity > 0 {
        print!("{}", report.to_text());
    }
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, inv: &Invocation) -> Result<MetricsReport, CliError> {
    let (net, scene, _sites, field, _mask) = prepare_problem(cfg)?;
    let dir = out_dir(cfg, inv);
    let q = read_posterior(&dir, &scene, &net)?;
    evaluate(cfg, inv, &net, &scene, &field, &q)
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

/// synth (when configured) then fit then eval, with the synthesized files
/// wired into the derived configuration.
pub fn cmd_pipeline(cfg: &RunConfig, inv: &Invocation) -> Result<MetricsReport, CliError> {
    let mut cfg = cfg.clone();
    if let Some(out) = &inv.out_override {
        cfg.output.dir = out.clone();
    }
    let inner = Invocation { out_override: None, ..inv.clone() };
    if cfg.synth.is_some() {
        let outputs = cmd_synth(&cfg, &inner)?;
        cfg.data.dpm = Some(outputs.dpm.clone());
        cfg.data.pga = Some(outputs.pga.clone());
        cfg.data.footprint = Some(outputs.footprint.clone());
        cfg.priors.ls_grid = Some(outputs.prior_ls.clone());
        cfg.priors.lf_grid = Some(outputs.prior_lf.clone());
        cfg.priors.curve_file = Some(outputs.curve.clone());
        for (kind, path) in &outputs.truth {
            match kind {
                HazardKind::BuildingDamage => cfg.data.ground_truth_bd = Some(path.clone()),
                HazardKind::Landslide => cfg.data.ground_truth_ls = Some(path.clone()),
                HazardKind::Liquefaction => cfg.data.ground_truth_lf = Some(path.clone()),
            }
        }
    }
    let artifacts = cmd_fit(&cfg, &inner)?;
    evaluate(&cfg, &inner, &artifacts.net, &artifacts.scene, &artifacts.field, &artifacts.posterior)
}
