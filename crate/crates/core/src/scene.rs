//! Raster ingestion and outputs: ESRI ASCII grids, scene assembly with
//! positivity clamping, footprint pruning, ground-truth points, ShakeMap
//! documents, and posterior grid writers.

use crate::graph::CausalNetwork;
use crate::inference::PosteriorField;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("grid geometry mismatch: {0}")]
    Geometry(String),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> SceneError {
    SceneError::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

/// Regular grid in the plate-carree sense used throughout: row-major values,
/// row 0 at the northern edge, lower-left corner registration.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn filled(ncols: usize, nrows: usize, value: f64) -> Grid {
        Grid {
            ncols,
            nrows,
            xllcorner: 0.0,
            yllcorner: 0.0,
            cellsize: 1.0,
            nodata_value: -9999.0,
            values: vec![value; ncols * nrows],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_nodata(&self, idx: usize) -> bool {
        self.values[idx] == self.nodata_value
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.cellsize == other.cellsize
            && (self.xllcorner - other.xllcorner).abs() < 1e-9
            && (self.yllcorner - other.yllcorner).abs() < 1e-9
    }

    /// Cell index containing a point, floor rule on both axes; `None`
    /// outside the extent.
    pub fn cell_of(&self, lon: f64, lat: f64) -> Option<usize> {
        let col = ((lon - self.xllcorner) / self.cellsize).floor();
        let row_s = ((lat - self.yllcorner) / self.cellsize).floor();
        if col < 0.0 || row_s < 0.0 || col >= self.ncols as f64 || row_s >= self.nrows as f64 {
            return None;
        }
        let row = self.nrows - 1 - row_s as usize;
        Some(row * self.ncols + col as usize)
    }

    /// Center coordinates of a cell index.
    pub fn center_of(&self, idx: usize) -> (f64, f64) {
        let row = idx / self.ncols;
        let col = idx % self.ncols;
        let lon = self.xllcorner + (col as f64 + 0.5) * self.cellsize;
        let lat = self.yllcorner + ((self.nrows - 1 - row) as f64 + 0.5) * self.cellsize;
        (lon, lat)
    }

    /// New grid with this grid's geometry and a constant fill.
    pub fn like(&self, value: f64) -> Grid {
        Grid { values: vec![value; self.len()], ..self.clone() }
    }
}

/// Parses an ESRI ASCII grid. Header keywords are case-insensitive; both
/// corner and center registrations are accepted (centers are converted to
/// corners). Each data line must carry exactly `ncols` values and there must
/// be exactly `nrows` data lines, north to south.
pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid, SceneError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);

    let mut ncols: Option<usize> = None;
    let mut nrows: Option<usize> = None;
    let mut xll: Option<(f64, bool)> = None; // (value, is_center)
    let mut yll: Option<(f64, bool)> = None;
    let mut cellsize: Option<f64> = None;
    let mut nodata = -9999.0f64;
    let mut values: Vec<f64> = Vec::new();
    let mut data_rows = 0usize;
    let mut in_data = false;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let mut tokens = line.split_whitespace();
        let Some(first) = tokens.next() else { continue };
        if !in_data {
            let key = first.to_ascii_lowercase();
            let mut header_value = |name: &str| -> Result<f64, SceneError> {
                let tok = tokens
                    .next()
                    .ok_or_else(|| parse_err(path, lineno, format!("missing value for {name}")))?;
                tok.parse::<f64>()
                    .map_err(|_| parse_err(path, lineno, format!("bad {name} value '{tok}'")))
            };
            match key.as_str() {
                "ncols" => {
                    let v = header_value("ncols")?;
                    ncols = Some(v as usize);
                    continue;
                }
                "nrows" => {
                    let v = header_value("nrows")?;
                    nrows = Some(v as usize);
                    continue;
                }
                "xllcorner" => {
                    xll = Some((header_value("xllcorner")?, false));
                    continue;
                }
                "yllcorner" => {
                    yll = Some((header_value("yllcorner")?, false));
                    continue;
                }
                "xllcenter" => {
                    xll = Some((header_value("xllcenter")?, true));
                    continue;
                }
                "yllcenter" => {
                    yll = Some((header_value("yllcenter")?, true));
                    continue;
                }
                "cellsize" => {
                    cellsize = Some(header_value("cellsize")?);
                    continue;
                }
                "nodata_value" => {
                    nodata = header_value("nodata_value")?;
                    continue;
                }
                _ => {
                    in_data = true; // first data line
                }
            }
        }
        // Data line.
        let ncols = ncols.ok_or_else(|| parse_err(path, lineno, "data before ncols header"))?;
        let mut row: Vec<f64> = Vec::with_capacity(ncols);
        for tok in std::iter::once(first).chain(tokens) {
            let v = tok
                .parse::<f64>()
                .map_err(|_| parse_err(path, lineno, format!("non-numeric token '{tok}'")))?;
            row.push(v);
        }
        if row.len() != ncols {
            return Err(parse_err(
                path,
                lineno,
                format!("row has {} values, expected {ncols}", row.len()),
            ));
        }
        values.extend_from_slice(&row);
        data_rows += 1;
    }

    let ncols = ncols.ok_or_else(|| parse_err(path, 0, "missing ncols header"))?;
    let nrows = nrows.ok_or_else(|| parse_err(path, 0, "missing nrows header"))?;
    let (mut x, xc) = xll.ok_or_else(|| parse_err(path, 0, "missing xllcorner header"))?;
    let (mut y, yc) = yll.ok_or_else(|| parse_err(path, 0, "missing yllcorner header"))?;
    let cellsize = cellsize.ok_or_else(|| parse_err(path, 0, "missing cellsize header"))?;
    if !(cellsize > 0.0) {
        return Err(parse_err(path, 0, "cellsize must be positive"));
    }
    if xc {
        x -= cellsize / 2.0;
    }
    if yc {
        y -= cellsize / 2.0;
    }
    if data_rows != nrows {
        return Err(parse_err(path, 0, format!("found {data_rows} data rows, expected {nrows}")));
    }
    for (i, v) in values.iter().enumerate() {
        if *v != nodata && !v.is_finite() {
            return Err(parse_err(path, 0, format!("non-finite value at cell {i}")));
        }
    }
    Ok(Grid { ncols, nrows, xllcorner: x, yllcorner: y, cellsize, nodata_value: nodata, values })
}

/// Writes an ESRI ASCII grid. Values are printed with Rust's shortest
/// round-trip float formatting, so `read_grid(write_grid(g)) == g` exactly.
pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", grid.ncols);
    let _ = writeln!(out, "nrows {}", grid.nrows);
    let _ = writeln!(out, "xllcorner {}", grid.xllcorner);
    let _ = writeln!(out, "yllcorner {}", grid.yllcorner);
    let _ = writeln!(out, "cellsize {}", grid.cellsize);
    let _ = writeln!(out, "NODATA_value {}", grid.nodata_value);
    for r in 0..grid.nrows {
        let row = &grid.values[r * grid.ncols..(r + 1) * grid.ncols];
        let mut line = String::new();
        for (c, v) in row.iter().enumerate() {
            if c > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{v}");
        }
        out.push_str(&line);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone)]
pub struct AssembleOptions {
    /// Lower clamp for damage-proxy values; the log-normal observation
    /// model needs strictly positive input.
    pub y_floor: f64,
    /// Permit nearest-neighbor resampling of secondary grids onto the
    /// damage-proxy geometry when extents agree but resolution differs.
    pub allow_nearest_resample: bool,
}

impl Default for AssembleOptions {
    fn default() -> AssembleOptions {
        AssembleOptions { y_floor: 1e-4, allow_nearest_resample: false }
    }
}

/// Aligned raster stack plus the active (valid damage-proxy) location set.
/// The exclusivity observation is identically zero at every location and is
/// not stored.
#[derive(Debug, Clone)]
pub struct Scene {
    pub dpm: Grid,
    pub pga: Grid,
    pub prior_ls: Grid,
    pub prior_lf: Grid,
    pub footprint: Grid,
    /// Row-major cell indices with valid (non-NODATA) damage-proxy values,
    /// in ascending order.
    pub active: Vec<usize>,
    pub y_floor: f64,
}

impl Scene {
    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Active-set position per cell (inverse of `active`).
    pub fn active_index(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.dpm.len()];
        for (j, &cell) in self.active.iter().enumerate() {
            map[cell] = Some(j);
        }
        map
    }

    /// `ln y` per active location.
    pub fn lny(&self) -> Vec<f64> {
        self.active.iter().map(|&c| self.dpm.values[c].ln()).collect()
    }
}

fn resample_nearest(target: &Grid, src: &Grid) -> Result<Grid, SceneError> {
    let mut out = target.like(src.nodata_value);
    out.nodata_value = src.nodata_value;
    for idx in 0..target.len() {
        let (lon, lat) = target.center_of(idx);
        match src.cell_of(lon, lat) {
            Some(s) => out.values[idx] = src.values[s],
            None => {
                return Err(SceneError::Geometry(
                    "resample target extends outside source extent".into(),
                ))
            }
        }
    }
    Ok(out)
}

/// Clamps the damage proxy into `[y_floor, 1]`, aligns every grid onto its
/// geometry, and collects the active set. Cells with NODATA damage proxy are
/// excluded from inference entirely.
pub fn assemble_scene(
    dpm: Grid,
    pga: Grid,
    prior_ls: Grid,
    prior_lf: Grid,
    footprint: Grid,
    opts: &AssembleOptions,
) -> Result<Scene, SceneError> {
    let align = |name: &str, g: Grid| -> Result<Grid, SceneError> {
        if g.same_geometry(&dpm) {
            Ok(g)
        } else if opts.allow_nearest_resample {
            resample_nearest(&dpm, &g)
        } else {
            Err(SceneError::Geometry(format!("{name} grid does not match damage-proxy geometry")))
        }
    };
    let pga = align("pga", pga)?;
    let prior_ls = align("landslide prior", prior_ls)?;
    let prior_lf = align("liquefaction prior", prior_lf)?;
    let footprint = align("footprint", footprint)?;

    let mut dpm = dpm;
    let mut active = Vec::new();
    for idx in 0..dpm.len() {
        if dpm.is_nodata(idx) {
            continue;
        }
        dpm.values[idx] = dpm.values[idx].clamp(opts.y_floor, 1.0);
        active.push(idx);
    }
    Ok(Scene { dpm, pga, prior_ls, prior_lf, footprint, active, y_floor: opts.y_floor })
}

/// Footprint-based pruning of building-damage inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneMode {
    /// No pruning.
    None,
    /// Cells without footprint are removed from building-damage inference
    /// and reintegrated with all mass on the no-damage state.
    Strict,
    /// Footprint-free cells are retained when the prior probability of any
    /// damage reaches the threshold.
    Compensated(f64),
}

/// Per-active-location building-damage activity mask. Landslide and
/// liquefaction inference is never pruned. `prior_damage`, required in
/// compensated mode, is the prior probability of any damage per active
/// location.
pub fn prune_by_footprint(
    scene: &Scene,
    mode: PruneMode,
    prior_damage: Option<&[f64]>,
) -> Result<Vec<bool>, SceneError> {
    let mask: Vec<bool> = match mode {
        PruneMode::None => vec![true; scene.n_active()],
        PruneMode::Strict => scene
            .active
            .iter()
            .map(|&c| !scene.footprint.is_nodata(c) && scene.footprint.values[c] != 0.0)
            .collect(),
        PruneMode::Compensated(tau) => {
            let pd = prior_damage.ok_or_else(|| {
                SceneError::Invalid("compensated pruning needs a building-damage prior".into())
            })?;
            if pd.len() != scene.n_active() {
                return Err(SceneError::Invalid(format!(
                    "prior covers {} locations, scene has {}",
                    pd.len(),
                    scene.n_active()
                )));
            }
            scene
                .active
                .iter()
                .zip(pd)
                .map(|(&c, &p)| {
                    (!scene.footprint.is_nodata(c) && scene.footprint.values[c] != 0.0) || p >= tau
                })
                .collect()
        }
    };
    Ok(mask)
}

/// Full-extent per-state probability grids for one node plus the argmax
/// class grid. Pruned locations carry probability one on state 0; NODATA
/// damage-proxy cells carry NODATA everywhere. Argmax ties resolve to the
/// lowest state index.
pub fn posterior_grids(
    scene: &Scene,
    net: &CausalNetwork,
    node: usize,
    q: &PosteriorField,
    active_mask: Option<&[bool]>,
) -> (Vec<Grid>, Grid) {
    let s = net.states(node);
    let mut grids: Vec<Grid> = (0..s).map(|_| scene.dpm.like(scene.dpm.nodata_value)).collect();
    let mut class = scene.dpm.like(scene.dpm.nodata_value);
    for (j, &cell) in scene.active.iter().enumerate() {
        let pruned = active_mask.map(|m| !m[j]).unwrap_or(false);
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for m in 0..s {
            let p = if pruned {
                if m == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                q.row(node, j)[m]
            };
            grids[m].values[cell] = p;
            if p > best_p {
                best_p = p;
                best = m;
            }
        }
        class.values[cell] = best as f64;
    }
    (grids, class)
}

/// Writes the per-state probability grids and the class grid for every node.
/// Returns the written paths.
pub fn write_posterior_outputs(
    dir: impl AsRef<Path>,
    scene: &Scene,
    net: &CausalNetwork,
    q: &PosteriorField,
    bd_mask: Option<&[bool]>,
) -> Result<Vec<PathBuf>, SceneError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    for i in 0..net.n_nodes() {
        let mask = if net.kind(i) == crate::graph::HazardKind::BuildingDamage {
            bd_mask
        } else {
            None
        };
        let (grids, class) = posterior_grids(scene, net, i, q, mask);
        let tag = net.kind(i).short().to_ascii_lowercase();
        for (m, g) in grids.iter().enumerate() {
            let path = dir.join(format!("posterior_{tag}_state{m}.asc"));
            write_grid(g, &path)?;
            written.push(path);
        }
        let path = dir.join(format!("class_{tag}.asc"));
        write_grid(&class, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// Ground-truth points mapped onto grid cells.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// `(cell index, class)` pairs inside the extent.
    pub points: Vec<(usize, usize)>,
    pub skipped_outside: usize,
}

/// Reads `lon,lat,class` records and maps each point into its containing
/// cell (floor rule). Points outside the extent are counted and skipped;
/// classes above `max_class` are an error.
pub fn read_ground_truth(
    path: impl AsRef<Path>,
    grid: &Grid,
    max_class: usize,
) -> Result<GroundTruth, SceneError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut points = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if lineno == 1 {
            if line != "lon,lat,class" {
                return Err(parse_err(path, 1, format!("expected header lon,lat,class, got '{line}'")));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(parse_err(path, lineno, format!("expected 3 fields, got {}", parts.len())));
        }
        let lon: f64 = parts[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad lon '{}'", parts[0])))?;
        let lat: f64 = parts[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad lat '{}'", parts[1])))?;
        let class: usize = parts[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("bad class '{}'", parts[2])))?;
        if class > max_class {
            return Err(parse_err(path, lineno, format!("class {class} out of range 0..={max_class}")));
        }
        match grid.cell_of(lon, lat) {
            Some(cell) => points.push((cell, class)),
            None => skipped += 1,
        }
    }
    Ok(GroundTruth { points, skipped_outside: skipped })
}

/// Writes ground-truth points at cell centers.
pub fn write_ground_truth(
    path: impl AsRef<Path>,
    grid: &Grid,
    classes: impl Iterator<Item = (usize, usize)>,
) -> Result<(), SceneError> {
    let path = path.as_ref();
    let mut out = String::from("lon,lat,class\n");
    for (cell, class) in classes {
        let (lon, lat) = grid.center_of(cell);
        let _ = writeln!(out, "{lon},{lat},{class}");
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// ShakeMap-style XML
// ---------------------------------------------------------------------------

fn xml_attr(tag: &str, name: &str) -> Option<String> {
    let pat = format!("{name}=\"");
    let start = tag.find(&pat)? + pat.len();
    let end = tag[start..].find('"')? + start;
    Some(tag[start..end].to_string())
}

/// Extracts the PGA column of a ShakeMap-style grid document onto a regular
/// grid. When LON/LAT columns are declared each sample lands in its nearest
/// cell; otherwise rows are taken in row-major north-to-south order. Units
/// of percent-g are converted to g.
pub fn read_shakemap_xml(path: impl AsRef<Path>) -> Result<Grid, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;

    let spec_start = text
        .find("<grid_specification")
        .ok_or_else(|| parse_err(path, 0, "missing grid_specification element"))?;
    let spec_end = text[spec_start..]
        .find("/>")
        .map(|e| spec_start + e)
        .ok_or_else(|| parse_err(path, 0, "unterminated grid_specification"))?;
    let spec_tag = &text[spec_start..spec_end];
    let need = |name: &str| -> Result<f64, SceneError> {
        xml_attr(spec_tag, name)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| parse_err(path, 0, format!("grid_specification missing {name}")))
    };
    let lon_min = need("lon_min")?;
    let lat_min = need("lat_min")?;
    let nlon = need("nlon")? as usize;
    let nlat = need("nlat")? as usize;
    let dlon = need("nominal_lon_spacing")?;
    let dlat = need("nominal_lat_spacing")?;
    if (dlon - dlat).abs() > 1e-9 {
        return Err(parse_err(path, 0, "only square cells are supported"));
    }

    let mut fields: Vec<(usize, String, String)> = Vec::new();
    let mut rest = &text[..];
    while let Some(pos) = rest.find("<grid_field") {
        let tag_end = rest[pos..]
            .find("/>")
            .map(|e| pos + e)
            .ok_or_else(|| parse_err(path, 0, "unterminated grid_field"))?;
        let tag = &rest[pos..tag_end];
        let index = xml_attr(tag, "index")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| parse_err(path, 0, "grid_field missing index"))?;
        let name = xml_attr(tag, "name").unwrap_or_default();
        let units = xml_attr(tag, "units").unwrap_or_default();
        fields.push((index, name, units));
        rest = &rest[tag_end..];
    }
    let find_col = |name: &str| fields.iter().find(|(_, n, _)| n.eq_ignore_ascii_case(name));
    let Some((pga_idx, _, pga_units)) = find_col("PGA") else {
        let available: Vec<&str> = fields.iter().map(|(_, n, _)| n.as_str()).collect();
        return Err(parse_err(
            path,
            0,
            format!("no PGA field declared; available fields: {}", available.join(", ")),
        ));
    };
    let unit_scale = match pga_units.to_ascii_lowercase().as_str() {
        "pctg" | "percent-g" | "%g" => 0.01,
        _ => 1.0,
    };
    let lon_col = find_col("LON").map(|(i, _, _)| *i);
    let lat_col = find_col("LAT").map(|(i, _, _)| *i);

    let data_start = text
        .find("<grid_data>")
        .ok_or_else(|| parse_err(path, 0, "missing grid_data element"))?
        + "<grid_data>".len();
    let data_end = text
        .find("</grid_data>")
        .ok_or_else(|| parse_err(path, 0, "unterminated grid_data"))?;
    let block = &text[data_start..data_end];

    let mut grid = Grid {
        ncols: nlon,
        nrows: nlat,
        xllcorner: lon_min - dlon / 2.0,
        yllcorner: lat_min - dlat / 2.0,
        cellsize: dlon,
        nodata_value: -9999.0,
        values: vec![-9999.0; nlon * nlat],
    };

    let mut rows = 0usize;
    for line in block.lines() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let get = |col1: usize| -> Result<f64, SceneError> {
            toks.get(col1 - 1)
                .and_then(|t| t.parse::<f64>().ok())
                .ok_or_else(|| parse_err(path, 0, format!("bad grid_data row '{line}'")))
        };
        let pga = get(*pga_idx)? * unit_scale;
        match (lon_col, lat_col) {
            (Some(lc), Some(tc)) => {
                let lon = get(lc)?;
                let lat = get(tc)?;
                if let Some(cell) = grid.cell_of(lon, lat) {
                    grid.values[cell] = pga;
                }
            }
            _ => {
                if rows >= nlon * nlat {
                    return Err(parse_err(path, 0, "more grid_data rows than nlon*nlat"));
                }
                grid.values[rows] = pga;
            }
        }
        rows += 1;
    }
    if rows != nlon * nlat {
        return Err(parse_err(
            path,
            0,
            format!("grid_data has {rows} rows, expected {}", nlon * nlat),
        ));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("qvcbi-scene-{}-{name}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn single_cell_grid_roundtrip() {
        let p = tmp("one.asc");
        std::fs::write(
            &p,
            "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n0.5\n",
        )
        .unwrap();
        let g = read_grid(&p).unwrap();
        assert_eq!((g.ncols, g.nrows), (1, 1));
        assert_eq!(g.values, vec![0.5]);
    }

    #[test]
    fn row_length_mismatch_reports_line() {
        let p = tmp("bad.asc");
        std::fs::write(
            &p,
            "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2 3\n4 5\n",
        )
        .unwrap();
        let err = read_grid(&p).unwrap_err();
        match err {
            SceneError::Parse { line, .. } => assert_eq!(line, 8),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_numeric_token_reports_line() {
        let p = tmp("tok.asc");
        std::fs::write(
            &p,
            "ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 x\n",
        )
        .unwrap();
        assert!(matches!(read_grid(&p).unwrap_err(), SceneError::Parse { line: 7, .. }));
    }

    #[test]
    fn center_registration_converts_to_corner() {
        let p = tmp("center.asc");
        std::fs::write(
            &p,
            "ncols 1\nnrows 1\nxllcenter 10\nyllcenter 20\ncellsize 2\nNODATA_value -9999\n1\n",
        )
        .unwrap();
        let g = read_grid(&p).unwrap();
        assert_eq!((g.xllcorner, g.yllcorner), (9.0, 19.0));
    }

    #[test]
    fn write_read_write_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Grid::filled(16, 16, 0.0);
        for v in &mut g.values {
            *v = rng.random_range(-1.0..1.0);
        }
        g.xllcorner = -72.123456;
        g.yllcorner = 18.5;
        g.cellsize = 0.0008333333333333;
        let p1 = tmp("rt1.asc");
        let p2 = tmp("rt2.asc");
        write_grid(&g, &p1).unwrap();
        let g2 = read_grid(&p1).unwrap();
        assert_eq!(g, g2);
        write_grid(&g2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    fn small_scene() -> Scene {
        let mut dpm = Grid::filled(2, 2, 0.3);
        dpm.values[3] = -9999.0; // NODATA
        dpm.values[1] = 0.0; // clamps to the floor
        let pga = Grid::filled(2, 2, 0.4);
        let ls = Grid::filled(2, 2, 0.1);
        let lf = Grid::filled(2, 2, 0.05);
        let mut fp = Grid::filled(2, 2, 1.0);
        fp.values[2] = 0.0;
        assemble_scene(dpm, pga, ls, lf, fp, &AssembleOptions::default()).unwrap()
    }

    #[test]
    fn assemble_clamps_and_excludes_nodata() {
        let s = small_scene();
        assert_eq!(s.active, vec![0, 1, 2]);
        assert_eq!(s.dpm.values[1], 1e-4);
    }

    #[test]
    fn assemble_rejects_shifted_geometry() {
        let dpm = Grid::filled(2, 2, 0.3);
        let mut pga = Grid::filled(2, 2, 0.4);
        pga.xllcorner = 0.5;
        let ls = Grid::filled(2, 2, 0.1);
        let lf = Grid::filled(2, 2, 0.05);
        let fp = Grid::filled(2, 2, 1.0);
        let err =
            assemble_scene(dpm, pga, ls, lf, fp, &AssembleOptions::default()).unwrap_err();
        assert!(matches!(err, SceneError::Geometry(_)));
    }

    #[test]
    fn nearest_resample_opt_in() {
        // A coarser shaking grid over the same extent resamples onto the
        // damage-proxy geometry when explicitly allowed.
        let dpm = Grid::filled(4, 4, 0.3);
        let mut pga = Grid::filled(2, 2, 0.0);
        pga.cellsize = 2.0;
        pga.values = vec![0.1, 0.2, 0.3, 0.4];
        let ls = Grid::filled(4, 4, 0.1);
        let lf = Grid::filled(4, 4, 0.05);
        let fp = Grid::filled(4, 4, 1.0);
        let opts = AssembleOptions { allow_nearest_resample: true, ..Default::default() };
        let s = assemble_scene(dpm, pga, ls, lf, fp, &opts).unwrap();
        assert!(s.pga.same_geometry(&s.dpm));
        // NW quadrant of the fine grid picks the NW coarse sample.
        assert_eq!(s.pga.values[0], 0.1);
        assert_eq!(s.pga.values[1], 0.1);
        assert_eq!(s.pga.values[3], 0.2);
        assert_eq!(s.pga.values[15], 0.4);
    }

    #[test]
    fn pruning_modes() {
        let s = small_scene();
        let all = prune_by_footprint(&s, PruneMode::None, None).unwrap();
        assert_eq!(all, vec![true, true, true]);
        let strict = prune_by_footprint(&s, PruneMode::Strict, None).unwrap();
        assert_eq!(strict, vec![true, true, false]);
        // Cell 2 has no footprint but a damage prior above the threshold.
        let comp =
            prune_by_footprint(&s, PruneMode::Compensated(0.2), Some(&[0.0, 0.0, 0.3])).unwrap();
        assert_eq!(comp, vec![true, true, true]);
        let comp =
            prune_by_footprint(&s, PruneMode::Compensated(0.4), Some(&[0.0, 0.0, 0.3])).unwrap();
        assert_eq!(comp, vec![true, true, false]);
    }

    #[test]
    fn posterior_grids_fill_rules() {
        use crate::graph::{build_network, NetworkSpec, PriorAttachment};
        let net = build_network(&NetworkSpec::bd_only(1, PriorAttachment::None)).unwrap();
        let s = small_scene();
        let mut q = PosteriorField::uniform(&net, s.n_active());
        q.row_mut(0, 0).copy_from_slice(&[0.2, 0.8]);
        let mask = vec![true, true, false];
        let (grids, class) = posterior_grids(&s, &net, 0, &q, Some(&mask));
        assert_eq!(grids.len(), 2);
        assert_eq!(grids[1].values[0], 0.8);
        // Pruned cell carries all mass on state 0.
        assert_eq!(grids[0].values[2], 1.0);
        assert_eq!(grids[1].values[2], 0.0);
        // NODATA dpm cell stays NODATA.
        assert_eq!(grids[0].values[3], -9999.0);
        assert_eq!(class.values[0], 1.0);
        // Uniform row ties resolve to the lowest state.
        assert_eq!(class.values[1], 0.0);
    }

    #[test]
    fn ground_truth_mapping() {
        let g = Grid::filled(4, 4, 0.0);
        let p = tmp("truth.csv");
        std::fs::write(&p, "lon,lat,class\n0.5,3.5,1\n2.0,2.0,0\n9.5,0.5,2\n").unwrap();
        let t = read_ground_truth(&p, &g, 3).unwrap();
        // (0.5, 3.5) is the center of the top-left cell.
        assert_eq!(t.points[0], (0, 1));
        // (2.0, 2.0) sits on shared edges; floor sends it to column 2,
        // southern row index 2, i.e. grid row 1.
        assert_eq!(t.points[1], (6, 0)); // grid row 1, column 2
        assert_eq!(t.skipped_outside, 1);
        // Bad header and out-of-range class are rejected.
        std::fs::write(&p, "lat,lon,class\n").unwrap();
        assert!(read_ground_truth(&p, &g, 3).is_err());
        std::fs::write(&p, "lon,lat,class\n0.5,0.5,7\n").unwrap();
        assert!(read_ground_truth(&p, &g, 3).is_err());
    }

    #[test]
    fn shakemap_parsing() {
        let p = tmp("shake.xml");
        std::fs::write(
            &p,
            r#"<shakemap_grid>
<grid_specification lon_min="10.0" lat_min="40.0" lon_max="10.2" lat_max="40.2" nlon="2" nlat="2" nominal_lon_spacing="0.1" nominal_lat_spacing="0.1"/>
<grid_field index="1" name="LON" units="dd"/>
<grid_field index="2" name="LAT" units="dd"/>
<grid_field index="3" name="PGA" units="pctg"/>
<grid_data>
10.0 40.1 50.0
10.1 40.1 25.0
10.0 40.0 10.0
10.1 40.0 5.0
</grid_data>
</shakemap_grid>"#,
        )
        .unwrap();
        let g = read_shakemap_xml(&p).unwrap();
        assert_eq!((g.ncols, g.nrows), (2, 2));
        // Percent-g converts to g; (10.0, 40.1) is the NW cell.
        assert_eq!(g.values[0], 0.5);
        assert_eq!(g.values[3], 0.05);

        std::fs::write(
            &p,
            r#"<grid_specification lon_min="0" lat_min="0" nlon="1" nlat="1" nominal_lon_spacing="1" nominal_lat_spacing="1"/>
<grid_field index="1" name="MMI" units="intensity"/>
<grid_data>
3.0
</grid_data>"#,
        )
        .unwrap();
        let err = read_shakemap_xml(&p).unwrap_err();
        assert!(err.to_string().contains("MMI"), "{err}");
    }
}
