//! Fit-state checkpoints: a line-based text format with shortest-roundtrip
//! float printing, so a resumed run continues bit-for-bit where the
//! interrupted one left off.

use crate::config::ConfigError;
use qvcbi_core::bounds::VariationalParams;
use qvcbi_core::graph::{CausalNetwork, WeightSet};
use qvcbi_core::inference::{FitState, ParamLayout, PosteriorField};
use std::fmt::Write as _;
use std::path::Path;

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const RUNNING_MARKER: &str = "RUNNING.marker";

fn join_floats(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad float '{t}'")))
        .collect()
}

pub fn save(path: impl AsRef<Path>, net: &CausalNetwork, state: &FitState) -> std::io::Result<()> {
    let layout = ParamLayout::new(net);
    let mut out = String::from("qvcbi-checkpoint 1\n");
    let _ = writeln!(out, "epoch {}", state.next_epoch);
    let _ = writeln!(out, "streak {}", state.streak);
    let _ = writeln!(out, "trace {}", join_floats(&state.trace));
    let _ = writeln!(out, "params {}", join_floats(&layout.flatten(&state.w)));
    let _ = writeln!(out, "sigma_xor {}", state.w.sigma_xor);
    let _ = writeln!(out, "precond {}", join_floats(&state.precond));
    for (i, row) in state.xi.xi.iter().enumerate() {
        let _ = writeln!(out, "xi:{i} {}", join_floats(row));
    }
    for i in 0..net.n_nodes() {
        let mut all = Vec::with_capacity(state.q.n_locations() * net.states(i));
        for l in 0..state.q.n_locations() {
            all.extend_from_slice(state.q.row(i, l));
        }
        let _ = writeln!(out, "q:{i} {}", join_floats(&all));
    }
    // Atomic-enough: write then rename, so an interrupt cannot leave a
    // half-written checkpoint under the canonical name.
    let tmp = path.as_ref().with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)
}

pub fn load(
    path: impl AsRef<Path>,
    net: &CausalNetwork,
    n_locations: usize,
) -> Result<FitState, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.to_path_buf(), source: e })?;
    let bad = |msg: String| ConfigError::Parse { path: path.to_path_buf(), msg };
    let layout = ParamLayout::new(net);
    let mut w = WeightSet::zeros(net);
    let mut q = PosteriorField::uniform(net, n_locations);
    let mut xi = VariationalParams::constant(net, 0.0);
    let mut next_epoch = 0usize;
    let mut streak = 0usize;
    let mut trace = Vec::new();
    let mut precond = vec![0.0; layout.len()];

    for (k, line) in text.lines().enumerate() {
        if k == 0 {
            if line.trim() != "qvcbi-checkpoint 1" {
                return Err(bad(format!("unexpected header '{line}'")));
            }
            continue;
        }
        let Some((key, rest)) = line.split_once(' ') else {
            return Err(bad(format!("malformed line '{line}'")));
        };
        match key {
            "epoch" => next_epoch = rest.trim().parse().map_err(|_| bad("bad epoch".into()))?,
            "streak" => streak = rest.trim().parse().map_err(|_| bad("bad streak".into()))?,
            "trace" => trace = parse_floats(rest).map_err(bad)?,
            "params" => {
                let v = parse_floats(rest).map_err(bad)?;
                if v.len() != layout.len() {
                    return Err(bad(format!(
                        "checkpoint has {} parameters, network needs {}",
                        v.len(),
                        layout.len()
                    )));
                }
                layout.unflatten_into(&v, &mut w);
            }
            "sigma_xor" => {
                w.sigma_xor = rest.trim().parse().map_err(|_| bad("bad sigma_xor".into()))?
            }
            "precond" => {
                precond = parse_floats(rest).map_err(bad)?;
                if precond.len() != layout.len() {
                    return Err(bad("preconditioner length mismatch".into()));
                }
            }
            _ if key.starts_with("xi:") => {
                let i: usize =
                    key[3..].parse().map_err(|_| bad(format!("bad node id '{key}'")))?;
                let v = parse_floats(rest).map_err(bad)?;
                if i >= net.n_nodes() || v.len() != net.states(i) {
                    return Err(bad("xi shape mismatch".into()));
                }
                xi.xi[i] = v;
            }
            _ if key.starts_with("q:") => {
                let i: usize =
                    key[2..].parse().map_err(|_| bad(format!("bad node id '{key}'")))?;
                let v = parse_floats(rest).map_err(bad)?;
                let s = net.states(i);
                if i >= net.n_nodes() || v.len() != n_locations * s {
                    return Err(bad("posterior shape mismatch".into()));
                }
                for l in 0..n_locations {
                    q.row_mut(i, l).copy_from_slice(&v[l * s..(l + 1) * s]);
                }
            }
            other => return Err(bad(format!("unknown key '{other}'"))),
        }
    }
    Ok(FitState { w, q, xi, precond, next_epoch, trace, streak })
}
