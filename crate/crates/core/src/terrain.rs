//! Heightmap sandbox with a kinematic dozer and an approximate blade-sand
//! interaction model.
//!
//! The terrain is a uniform grid of heights over a flat target grade. Sand
//! piles are Gaussian blobs with compact support (cut off at four sigma).
//! The blade is a straight segment perpendicular to the dozer heading; each
//! forward sub-cell step cuts the swept cells down to the target height,
//! loads the removed volume up to the blade capacity, and side-casts any
//! overflow to the cells flanking the blade ends. Crossing the dump strip at
//! the +x edge removes the carried load from the map. Every operation
//! conserves sand volume exactly (map + blade + dumped).

use crate::trajectory::Pose;
use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum TerrainError {
    /// Sand piles could not be placed within the retry budget.
    PlacementFailure,
    /// Dozer pose left the map.
    OutOfBounds { x: f64, y: f64 },
}

impl fmt::Display for TerrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TerrainError::PlacementFailure => write!(f, "could not place sand piles"),
            TerrainError::OutOfBounds { x, y } => {
                write!(f, "dozer pose ({x:.3}, {y:.3}) left the map")
            }
        }
    }
}

impl std::error::Error for TerrainError {}

/// Uniform grid of terrain heights (m), row-major with `index = iy*width + ix`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heightmap {
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub target_h: f64,
    h: Vec<f64>,
}

impl Heightmap {
    pub fn flat(width: usize, height: usize, cell_size: f64, target_h: f64) -> Self {
        assert!(width > 0 && height > 0 && cell_size > 0.0);
        assert!(target_h >= 0.0, "heights must stay non-negative");
        Heightmap {
            cell_size,
            width,
            height,
            target_h,
            h: vec![target_h; width * height],
        }
    }

    pub fn extent_x(&self) -> f64 {
        self.width as f64 * self.cell_size
    }

    pub fn extent_y(&self) -> f64 {
        self.height as f64 * self.cell_size
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x <= self.extent_x() && y <= self.extent_y()
    }

    /// Cell index under a world point, clamped into the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> (usize, usize) {
        let ix = ((x / self.cell_size).floor() as isize).clamp(0, self.width as isize - 1);
        let iy = ((y / self.cell_size).floor() as isize).clamp(0, self.height as isize - 1);
        (ix as usize, iy as usize)
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.h[iy * self.width + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        assert!(v >= 0.0);
        self.h[iy * self.width + ix] = v;
    }

    /// Bilinear height at a world point (cell-center anchored); points
    /// outside the map evaluate to the target height.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        if !self.contains(x, y) {
            return self.target_h;
        }
        let fx = (x / self.cell_size - 0.5).clamp(0.0, self.width as f64 - 1.0);
        let fy = (y / self.cell_size - 0.5).clamp(0.0, self.height as f64 - 1.0);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let h00 = self.get(x0, y0);
        let h10 = self.get(x1, y0);
        let h01 = self.get(x0, y1);
        let h11 = self.get(x1, y1);
        h00 * (1.0 - tx) * (1.0 - ty)
            + h10 * tx * (1.0 - ty)
            + h01 * (1.0 - tx) * ty
            + h11 * tx * ty
    }

    /// Total sand volume above zero (m^3).
    pub fn total_volume(&self) -> f64 {
        self.h.iter().sum::<f64>() * self.cell_area()
    }

    /// Volume above the target grade (m^3) — the grading quality metric.
    pub fn uncleared_volume(&self) -> f64 {
        self.h
            .iter()
            .map(|&v| (v - self.target_h).max(0.0))
            .sum::<f64>()
            * self.cell_area()
    }

    pub fn heights(&self) -> &[f64] {
        &self.h
    }

    /// Add a compact-support Gaussian blob of the given volume; returns the
    /// volume actually deposited on the grid.
    pub fn add_pile(&mut self, cx: f64, cy: f64, volume: f64, sigma: f64) -> f64 {
        let amplitude = volume / (2.0 * std::f64::consts::PI * sigma * sigma);
        let reach = 4.0 * sigma;
        let (ix0, iy0) = self.cell_at(cx - reach, cy - reach);
        let (ix1, iy1) = self.cell_at(cx + reach, cy + reach);
        let mut placed = 0.0;
        for iy in iy0..=iy1 {
            for ix in ix0..=ix1 {
                let x = (ix as f64 + 0.5) * self.cell_size;
                let y = (iy as f64 + 0.5) * self.cell_size;
                let r2 = (x - cx).powi(2) + (y - cy).powi(2);
                if r2 <= reach * reach {
                    let dh = amplitude * (-r2 / (2.0 * sigma * sigma)).exp();
                    self.h[iy * self.width + ix] += dh;
                    placed += dh;
                }
            }
        }
        placed * self.cell_area()
    }
}

/// Kinematic dozer: planar pose, blade geometry, and carried load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DozerBody {
    pub pose: Pose,
    /// Blade segment length perpendicular to heading (m).
    pub blade_width: f64,
    /// Maximum carried volume (m^3).
    pub blade_capacity: f64,
    /// Currently carried volume (m^3).
    pub blade_load: f64,
    /// Drive speed (m/s), same magnitude in reverse.
    pub speed: f64,
}

/// Episode randomization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnConfig {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub target_h: f64,
    pub piles_min: usize,
    pub piles_max: usize,
    pub pile_volume_min: f64,
    pub pile_volume_max: f64,
    pub pile_sigma_min: f64,
    pub pile_sigma_max: f64,
    /// Width of the dump strip at the +x edge (m).
    pub dump_margin: f64,
    pub blade_width: f64,
    pub blade_capacity: f64,
    pub dozer_speed: f64,
    pub max_retries: usize,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        // 100 x 100 cells at 2.5 cm: the 250 x 250 cm sandbox footprint.
        SpawnConfig {
            width: 100,
            height: 100,
            cell_size: 0.025,
            target_h: 0.0,
            piles_min: 2,
            piles_max: 4,
            pile_volume_min: 0.008,
            pile_volume_max: 0.02,
            pile_sigma_min: 0.09,
            pile_sigma_max: 0.14,
            dump_margin: 0.15,
            blade_width: 0.3,
            blade_capacity: 0.02,
            dozer_speed: 0.4,
            max_retries: 200,
        }
    }
}

impl SpawnConfig {
    /// World x beyond which carried sand is dumped out of the episode.
    pub fn dump_line(&self) -> f64 {
        self.width as f64 * self.cell_size - self.dump_margin
    }
}

/// Randomize sand piles on a flat base and place the dozer on the border
/// away from the piles, facing the map interior.
pub fn spawn_episode(
    rng: &mut impl Rng,
    cfg: &SpawnConfig,
) -> Result<(Heightmap, DozerBody), TerrainError> {
    let mut hm = Heightmap::flat(cfg.width, cfg.height, cfg.cell_size, cfg.target_h);
    let n_piles = rng.gen_range(cfg.piles_min..=cfg.piles_max);
    let mut piles: Vec<(f64, f64, f64)> = Vec::new(); // (cx, cy, reach)

    for _ in 0..n_piles {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let sigma = rng.gen_range(cfg.pile_sigma_min..=cfg.pile_sigma_max);
            let volume = rng.gen_range(cfg.pile_volume_min..=cfg.pile_volume_max);
            let reach = 4.0 * sigma;
            let x_max = cfg.dump_line() - reach;
            let y_max = hm.extent_y() - reach;
            if x_max <= reach || y_max <= reach {
                continue;
            }
            let cx = rng.gen_range(reach..x_max);
            let cy = rng.gen_range(reach..y_max);
            // Keep pile cores disjoint so volumes stay attributable.
            if piles
                .iter()
                .any(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() < pr + reach)
            {
                continue;
            }
            hm.add_pile(cx, cy, volume, sigma);
            piles.push((cx, cy, reach));
            placed = true;
            break;
        }
        if !placed {
            return Err(TerrainError::PlacementFailure);
        }
    }

    // Dozer on the -x border at clear ground, facing +x (the dump direction).
    for _ in 0..cfg.max_retries {
        let margin = cfg.blade_width;
        let y = rng.gen_range(margin..hm.extent_y() - margin);
        let x = margin;
        if piles
            .iter()
            .all(|&(px, py, pr)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() > pr + margin)
        {
            let dozer = DozerBody {
                pose: Pose::planar(x, y, 0.0),
                blade_width: cfg.blade_width,
                blade_capacity: cfg.blade_capacity,
                blade_load: 0.0,
                speed: cfg.dozer_speed,
            };
            return Ok((hm, dozer));
        }
    }
    Err(TerrainError::PlacementFailure)
}

/// Volume bookkeeping for one dozer step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepOutcome {
    /// Volume moved from the map into the blade (m^3).
    pub loaded: f64,
    /// Overflow side-cast back onto the map (m^3).
    pub spilled: f64,
    /// Volume removed from the episode at the dump strip (m^3).
    pub dumped: f64,
}

/// Advance the dozer by `step` metres along its heading (negative = reverse
/// with the blade lifted) and apply the blade-sand interaction.
///
/// `|step|` must not exceed the cell size so the sweep cannot skip cells.
/// The dump strip is the band `x > dump_line`.
pub fn advance_dozer(
    hm: &mut Heightmap,
    d: &mut DozerBody,
    step: f64,
    dump_line: f64,
) -> Result<StepOutcome, TerrainError> {
    assert!(
        step.abs() <= hm.cell_size + 1e-12,
        "step {step} exceeds one cell"
    );
    let (sin_h, cos_h) = d.pose.att.psi.sin_cos();
    let nx = d.pose.p.x + step * cos_h;
    let ny = d.pose.p.y + step * sin_h;
    if !hm.contains(nx, ny) {
        return Err(TerrainError::OutOfBounds { x: nx, y: ny });
    }
    d.pose.p.x = nx;
    d.pose.p.y = ny;

    let mut outcome = StepOutcome::default();
    if step > 0.0 {
        outcome = sweep_blade(hm, d);
    }
    if d.pose.p.x > dump_line && d.blade_load > 0.0 {
        outcome.dumped += d.blade_load;
        d.blade_load = 0.0;
    }
    Ok(outcome)
}

/// Move the dozer without blade contact (blade lifted), bounds-checked.
pub fn move_dozer(hm: &Heightmap, d: &mut DozerBody, step: f64) -> Result<(), TerrainError> {
    let (sin_h, cos_h) = d.pose.att.psi.sin_cos();
    let nx = d.pose.p.x + step * cos_h;
    let ny = d.pose.p.y + step * sin_h;
    if !hm.contains(nx, ny) {
        return Err(TerrainError::OutOfBounds { x: nx, y: ny });
    }
    d.pose.p.x = nx;
    d.pose.p.y = ny;
    Ok(())
}

/// Unique cells under the blade segment at the dozer's current pose.
fn blade_cells(hm: &Heightmap, d: &DozerBody) -> BTreeSet<(usize, usize)> {
    let (sin_h, cos_h) = d.pose.att.psi.sin_cos();
    let perp = Vector2::new(-sin_h, cos_h);
    let center = Vector2::new(d.pose.p.x, d.pose.p.y);
    let half = d.blade_width / 2.0;
    let n = (d.blade_width / (hm.cell_size / 2.0)).ceil() as usize + 1;
    let mut cells = BTreeSet::new();
    for i in 0..=n {
        let s = -half + d.blade_width * i as f64 / n as f64;
        let p = center + s * perp;
        if hm.contains(p.x, p.y) {
            cells.insert(hm.cell_at(p.x, p.y));
        }
    }
    cells
}

fn sweep_blade(hm: &mut Heightmap, d: &mut DozerBody) -> StepOutcome {
    let cells = blade_cells(hm, d);
    let area = hm.cell_area();
    let mut removed = 0.0;
    for &(ix, iy) in &cells {
        let excess = hm.get(ix, iy) - hm.target_h;
        if excess > 0.0 {
            removed += excess * area;
            hm.set(ix, iy, hm.target_h);
        }
    }
    if removed == 0.0 {
        return StepOutcome::default();
    }
    let capacity_left = d.blade_capacity - d.blade_load;
    let loaded = removed.min(capacity_left);
    d.blade_load += loaded;
    let spilled = removed - loaded;
    if spilled > 0.0 {
        // Side-cast the overflow to the two cells just beyond the blade ends.
        let (sin_h, cos_h) = d.pose.att.psi.sin_cos();
        let perp = Vector2::new(-sin_h, cos_h);
        let center = Vector2::new(d.pose.p.x, d.pose.p.y);
        let off = d.blade_width / 2.0 + hm.cell_size;
        for side in [-1.0, 1.0] {
            let p = center + side * off * perp;
            let (ix, iy) = hm.cell_at(p.x, p.y);
            let dh = spilled / 2.0 / area;
            hm.set(ix, iy, hm.get(ix, iy) + dh);
        }
    }
    StepOutcome {
        loaded,
        spilled,
        dumped: 0.0,
    }
}

/// Spread the carried load over a blade-radius disc at the dozer's position
/// (the blade lifting at the end of a push). Returns the deposited volume.
pub fn deposit_load(hm: &mut Heightmap, d: &mut DozerBody) -> f64 {
    if d.blade_load <= 0.0 {
        return 0.0;
    }
    let radius = d.blade_width / 2.0;
    let (cx, cy) = (d.pose.p.x, d.pose.p.y);
    let (ix0, iy0) = hm.cell_at(cx - radius, cy - radius);
    let (ix1, iy1) = hm.cell_at(cx + radius, cy + radius);
    let mut cells = Vec::new();
    for iy in iy0..=iy1 {
        for ix in ix0..=ix1 {
            let x = (ix as f64 + 0.5) * hm.cell_size;
            let y = (iy as f64 + 0.5) * hm.cell_size;
            if (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius {
                cells.push((ix, iy));
            }
        }
    }
    if cells.is_empty() {
        cells.push(hm.cell_at(cx, cy));
    }
    let area = hm.cell_area();
    let dh = d.blade_load / cells.len() as f64 / area;
    for &(ix, iy) in &cells {
        hm.set(ix, iy, hm.get(ix, iy) + dh);
    }
    let deposited = d.blade_load;
    d.blade_load = 0.0;
    deposited
}

/// True when more than half the blade capacity was filled during a leg.
pub fn decision_success(blade_load_at_leg_end: f64, capacity: f64) -> bool {
    blade_load_at_leg_end > 0.5 * capacity
}

/// Episode-level grading quality numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeMetrics {
    pub episode_time: f64,
    pub uncleared_volume: f64,
    pub legs: usize,
}

/// Sidecar metadata for exported heightmap snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeightmapMeta {
    pub cell_size: f64,
    pub width: usize,
    pub height: usize,
    pub target_h: f64,
    /// Height (m) mapped to the full 16-bit range in the PGM rendering.
    pub pgm_height_scale: f64,
}

/// Write the grid as CSV rows of heights in metres (row-major, exact floats).
pub fn write_heightmap_csv(path: &Path, hm: &Heightmap) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for iy in 0..hm.height {
        let row: Vec<String> = (0..hm.width).map(|ix| hm.get(ix, iy).to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

/// Parse a heightmap grid written by [`write_heightmap_csv`].
pub fn read_heightmap_csv(
    path: &Path,
    cell_size: f64,
    target_h: f64,
) -> std::io::Result<Heightmap> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        rows.push(
            line.split(',')
                .map(|s| s.parse::<f64>().expect("malformed height"))
                .collect(),
        );
    }
    let height = rows.len();
    let width = rows[0].len();
    let mut hm = Heightmap::flat(width, height, cell_size, target_h);
    for (iy, row) in rows.iter().enumerate() {
        for (ix, &v) in row.iter().enumerate() {
            hm.h[iy * width + ix] = v;
        }
    }
    Ok(hm)
}

/// Write a 16-bit binary PGM for quick viewing; `height_scale` metres maps to
/// the full range.
pub fn write_heightmap_pgm(path: &Path, hm: &Heightmap, height_scale: f64) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P5")?;
    writeln!(f, "{} {}", hm.width, hm.height)?;
    writeln!(f, "65535")?;
    for iy in 0..hm.height {
        for ix in 0..hm.width {
            let v = (hm.get(ix, iy) / height_scale * 65535.0).clamp(0.0, 65535.0) as u16;
            f.write_all(&v.to_be_bytes())?;
        }
    }
    Ok(())
}
