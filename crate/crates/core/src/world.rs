//! Occupancy-grid worlds: procedural generation, image-file I/O and
//! robot-radius inflation.
//!
//! Cells are stored row-major with row 0 at the bottom (smallest y). Image
//! files store row 0 at the top, so load/save flip vertically.

use crate::geometry::Point;
use image::{ColorType, GrayImage, ImageEncoder, ImageReader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const OBSTACLE: u8 = 0;
pub const FREE: u8 = 1;

/// Half of the robot's width; the clearance every planned or executed pose keeps.
pub const ROBOT_RADIUS: f64 = 0.425;
pub const DEFAULT_RESOLUTION: f64 = 0.1;
pub const DEFAULT_EXTENT: f64 = 25.0;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("unsatisfiable world spec: {0}")]
    Unsatisfiable(String),
}

/// Binary world raster with metric resolution.
///
/// `origin` is the world position of the lower-left corner of cell (0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Point,
    cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Point,
        cells: Vec<u8>,
    ) -> Result<Self, WorldError> {
        if width == 0 || height == 0 {
            return Err(WorldError::InvalidGrid(format!("empty grid {width}x{height}")));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(WorldError::InvalidGrid(format!("resolution {resolution} must be > 0")));
        }
        if cells.len() != width * height {
            return Err(WorldError::InvalidGrid(format!(
                "{} cells for a {width}x{height} grid",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&c| c > 1) {
            return Err(WorldError::InvalidGrid(format!("cell value {bad} is not 0 or 1")));
        }
        Ok(Self { width, height, resolution, origin, cells })
    }

    pub fn filled(width: usize, height: usize, resolution: f64, origin: Point, value: u8) -> Result<Self, WorldError> {
        Self::new(width, height, resolution, origin, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn width_m(&self) -> f64 {
        self.width as f64 * self.resolution
    }

    pub fn height_m(&self) -> f64 {
        self.height as f64 * self.resolution
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.cells[self.index(col, row)]
    }

    pub fn set(&mut self, col: usize, row: usize, value: u8) {
        debug_assert!(value <= 1);
        let i = self.index(col, row);
        self.cells[i] = value;
    }

    pub fn is_free(&self, col: usize, row: usize) -> bool {
        self.get(col, row) == FREE
    }

    /// Free test on signed indices; anything outside the grid is blocked.
    pub fn is_free_signed(&self, col: i64, row: i64) -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < self.width
            && (row as usize) < self.height
            && self.is_free(col as usize, row as usize)
    }

    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let (c, r) = self.cell_of_signed(p);
        if c >= 0 && r >= 0 && (c as usize) < self.width && (r as usize) < self.height {
            Some((c as usize, r as usize))
        } else {
            None
        }
    }

    pub fn cell_of_signed(&self, p: Point) -> (i64, i64) {
        (
            ((p.x - self.origin.x) / self.resolution).floor() as i64,
            ((p.y - self.origin.y) / self.resolution).floor() as i64,
        )
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Point {
        Point::new(
            self.origin.x + (col as f64 + 0.5) * self.resolution,
            self.origin.y + (row as f64 + 0.5) * self.resolution,
        )
    }

    pub fn contains(&self, p: Point) -> bool {
        self.cell_of(p).is_some()
    }

    /// True when `p` lies inside the grid on a free cell.
    pub fn is_free_at(&self, p: Point) -> bool {
        self.cell_of(p).is_some_and(|(c, r)| self.is_free(c, r))
    }

    pub fn free_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c == FREE).count()
    }

    /// Number of cells whose value differs from `other` (grids must share dimensions).
    pub fn diff_count(&self, other: &OccupancyGrid) -> usize {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.cells.iter().zip(&other.cells).filter(|(a, b)| a != b).count()
    }

    /// Area in m² of the largest 4-connected free component.
    pub fn largest_free_component_area(&self) -> f64 {
        let mut seen = vec![false; self.cells.len()];
        let mut best = 0usize;
        let mut queue = VecDeque::new();
        for start in 0..self.cells.len() {
            if seen[start] || self.cells[start] != FREE {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut size = 0;
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (c, r) = ((i % self.width) as i64, (i / self.width) as i64);
                for (dc, dr) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                    let (nc, nr) = (c + dc, r + dr);
                    if self.is_free_signed(nc, nr) {
                        let j = self.index(nc as usize, nr as usize);
                        if !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
            best = best.max(size);
        }
        best as f64 * self.resolution * self.resolution
    }

    fn fill_rect(&mut self, c0: i64, r0: i64, c1: i64, r1: i64, value: u8) {
        let c0 = c0.max(0) as usize;
        let r0 = r0.max(0) as usize;
        let c1 = (c1.max(0) as usize).min(self.width);
        let r1 = (r1.max(0) as usize).min(self.height);
        for r in r0..r1 {
            for c in c0..c1 {
                self.set(c, r, value);
            }
        }
    }

    fn add_boundary(&mut self) {
        let (w, h) = (self.width as i64, self.height as i64);
        self.fill_rect(0, 0, w, 1, OBSTACLE);
        self.fill_rect(0, h - 1, w, h, OBSTACLE);
        self.fill_rect(0, 0, 1, h, OBSTACLE);
        self.fill_rect(w - 1, 0, w, h, OBSTACLE);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldKind {
    OpenRoom,
    RoomsAndCorridors,
    Maze,
    HiddenGapCorridor,
    ScatterObstacles,
}

impl std::str::FromStr for WorldKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open-room" => Ok(Self::OpenRoom),
            "rooms-and-corridors" => Ok(Self::RoomsAndCorridors),
            "maze" => Ok(Self::Maze),
            "hidden-gap-corridor" => Ok(Self::HiddenGapCorridor),
            "scatter-obstacles" => Ok(Self::ScatterObstacles),
            other => Err(format!("unknown world kind '{other}'")),
        }
    }
}

impl std::fmt::Display for WorldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::OpenRoom => "open-room",
            Self::RoomsAndCorridors => "rooms-and-corridors",
            Self::Maze => "maze",
            Self::HiddenGapCorridor => "hidden-gap-corridor",
            Self::ScatterObstacles => "scatter-obstacles",
        };
        f.write_str(s)
    }
}

/// Parameters for procedural world generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub kind: WorldKind,
    pub width_m: f64,
    pub height_m: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    /// Doorway / corridor / gap width.
    #[serde(default = "default_gap")]
    pub gap_width_m: f64,
    /// Lateral position of the hidden gap's center; sampled from the seed when absent.
    #[serde(default)]
    pub gap_offset_m: Option<f64>,
    #[serde(default = "default_density")]
    pub obstacle_density: f64,
    #[serde(default = "default_wall")]
    pub wall_thickness_m: f64,
    pub seed: u64,
}

fn default_resolution() -> f64 {
    DEFAULT_RESOLUTION
}
fn default_gap() -> f64 {
    1.2
}
fn default_density() -> f64 {
    0.1
}
fn default_wall() -> f64 {
    0.2
}

impl WorldSpec {
    pub fn new(kind: WorldKind, width_m: f64, height_m: f64, seed: u64) -> Self {
        Self {
            kind,
            width_m,
            height_m,
            resolution: DEFAULT_RESOLUTION,
            gap_width_m: default_gap(),
            gap_offset_m: None,
            obstacle_density: default_density(),
            wall_thickness_m: default_wall(),
            seed,
        }
    }

    pub fn with_gap(mut self, width_m: f64, offset_m: Option<f64>) -> Self {
        self.gap_width_m = width_m;
        self.gap_offset_m = offset_m;
        self
    }
}

fn cells_for(meters: f64, resolution: f64) -> i64 {
    (meters / resolution).round() as i64
}

/// Generates a world grid; a pure function of the spec (seed included).
pub fn generate_map(spec: &WorldSpec) -> Result<OccupancyGrid, WorldError> {
    let bad = |m: String| Err(WorldError::Unsatisfiable(m));
    if !(spec.resolution > 0.0) {
        return bad(format!("resolution {} must be positive", spec.resolution));
    }
    if !(spec.width_m > 0.0 && spec.height_m > 0.0) {
        return bad(format!("world size {}x{} must be positive", spec.width_m, spec.height_m));
    }
    if !(0.0..1.0).contains(&spec.obstacle_density) {
        return bad(format!("obstacle density {} outside [0, 1)", spec.obstacle_density));
    }
    if !(spec.wall_thickness_m > 0.0) || !(spec.gap_width_m > 0.0) {
        return bad("wall thickness and gap width must be positive".into());
    }
    let w = cells_for(spec.width_m, spec.resolution);
    let h = cells_for(spec.height_m, spec.resolution);
    if w < 3 || h < 3 {
        return bad(format!("world of {w}x{h} cells is too small"));
    }
    let mut grid = OccupancyGrid::filled(w as usize, h as usize, spec.resolution, Point::default(), FREE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        WorldKind::OpenRoom => grid.add_boundary(),
        WorldKind::HiddenGapCorridor => hidden_gap(&mut grid, spec, &mut rng)?,
        WorldKind::Maze => maze(&mut grid, spec, &mut rng)?,
        WorldKind::RoomsAndCorridors => rooms(&mut grid, spec, &mut rng)?,
        WorldKind::ScatterObstacles => scatter(&mut grid, spec, &mut rng),
    }
    let area = grid.largest_free_component_area();
    if area < 4.0 {
        return bad(format!("largest free region is {area:.2} m², need at least 4 m²"));
    }
    Ok(grid)
}

fn hidden_gap(grid: &mut OccupancyGrid, spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<(), WorldError> {
    let res = spec.resolution;
    let (w, h) = (grid.width as i64, grid.height as i64);
    let gap = cells_for(spec.gap_width_m, res);
    if gap < 1 || gap > w - 2 {
        return Err(WorldError::Unsatisfiable(format!(
            "gap width {} m does not fit in a {} m wide world",
            spec.gap_width_m, spec.width_m
        )));
    }
    let offset = match spec.gap_offset_m {
        Some(o) => o,
        None => {
            let lo = res + spec.gap_width_m / 2.0;
            let hi = spec.width_m - res - spec.gap_width_m / 2.0;
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                spec.width_m / 2.0
            }
        }
    };
    let start = cells_for(offset - spec.gap_width_m / 2.0, res);
    if start < 1 || start + gap > w - 1 {
        return Err(WorldError::Unsatisfiable(format!(
            "gap at offset {offset} m (width {} m) leaves the room interior",
            spec.gap_width_m
        )));
    }
    let thick = cells_for(spec.wall_thickness_m, res).max(1);
    let r0 = h / 2 - thick / 2;
    if r0 < 2 || r0 + thick > h - 2 {
        return Err(WorldError::Unsatisfiable("world too short for a dividing wall".into()));
    }
    grid.add_boundary();
    grid.fill_rect(0, r0, w, r0 + thick, OBSTACLE);
    grid.fill_rect(start, r0, start + gap, r0 + thick, FREE);
    Ok(())
}

/// Rows of the dividing wall of a hidden-gap world, as generated by [`generate_map`].
pub fn hidden_gap_wall_rows(spec: &WorldSpec) -> std::ops::Range<usize> {
    let h = cells_for(spec.height_m, spec.resolution);
    let thick = cells_for(spec.wall_thickness_m, spec.resolution).max(1);
    let r0 = h / 2 - thick / 2;
    r0 as usize..(r0 + thick) as usize
}

fn maze(grid: &mut OccupancyGrid, spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<(), WorldError> {
    let res = spec.resolution;
    let corridor = cells_for(spec.gap_width_m, res).max(1);
    let wall = cells_for(spec.wall_thickness_m, res).max(1);
    let pitch = corridor + wall;
    let nx = (grid.width as i64 - wall) / pitch;
    let ny = (grid.height as i64 - wall) / pitch;
    if nx < 2 || ny < 2 {
        return Err(WorldError::Unsatisfiable(format!(
            "maze with {} m corridors needs a larger world",
            spec.gap_width_m
        )));
    }
    grid.cells.fill(OBSTACLE);
    let origin_of = |i: i64, j: i64| (wall + i * pitch, wall + j * pitch);
    let mut visited = vec![false; (nx * ny) as usize];
    let mut stack = vec![(0i64, 0i64)];
    visited[0] = true;
    let (c, r) = origin_of(0, 0);
    grid.fill_rect(c, r, c + corridor, r + corridor, FREE);
    while let Some(&(i, j)) = stack.last() {
        let options: Vec<(i64, i64)> = [(1, 0), (-1, 0), (0, 1), (0, -1)]
            .into_iter()
            .map(|(di, dj)| (i + di, j + dj))
            .filter(|&(a, b)| a >= 0 && b >= 0 && a < nx && b < ny && !visited[(b * nx + a) as usize])
            .collect();
        if options.is_empty() {
            stack.pop();
            continue;
        }
        let (a, b) = options[rng.random_range(0..options.len())];
        visited[(b * nx + a) as usize] = true;
        let (c0, r0) = origin_of(i.min(a), j.min(b));
        let (c1, r1) = origin_of(i.max(a), j.max(b));
        grid.fill_rect(c0, r0, c1 + corridor, r1 + corridor, FREE);
        stack.push((a, b));
    }
    Ok(())
}

fn rooms(grid: &mut OccupancyGrid, spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<(), WorldError> {
    const ROOM_SIZE_M: f64 = 5.0;
    let res = spec.resolution;
    let nrx = ((spec.width_m / ROOM_SIZE_M).round() as i64).max(1);
    let nry = ((spec.height_m / ROOM_SIZE_M).round() as i64).max(1);
    let door = cells_for(spec.gap_width_m, res).max(1);
    let wall = cells_for(spec.wall_thickness_m, res).max(1);
    let (w, h) = (grid.width as i64, grid.height as i64);
    let xs: Vec<i64> = (0..=nrx).map(|i| i * (w - 1) / nrx).collect();
    let ys: Vec<i64> = (0..=nry).map(|j| j * (h - 1) / nry).collect();
    let room_w = xs[1] - xs[0];
    let room_h = ys[1] - ys[0];
    if (nrx > 1 && room_h < door + 2 * wall + 2) || (nry > 1 && room_w < door + 2 * wall + 2) {
        return Err(WorldError::Unsatisfiable(format!(
            "doors of {} m do not fit in rooms of this world",
            spec.gap_width_m
        )));
    }
    grid.add_boundary();
    for &x in &xs[1..xs.len() - 1] {
        grid.fill_rect(x - wall / 2, 0, x - wall / 2 + wall, h, OBSTACLE);
    }
    for &y in &ys[1..ys.len() - 1] {
        grid.fill_rect(0, y - wall / 2, w, y - wall / 2 + wall, OBSTACLE);
    }
    // Random spanning tree over the room graph, plus occasional extra doors.
    let n = (nrx * nry) as usize;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut i = i;
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut edges = Vec::new();
    for j in 0..nry {
        for i in 0..nrx {
            if i + 1 < nrx {
                edges.push((i, j, true));
            }
            if j + 1 < nry {
                edges.push((i, j, false));
            }
        }
    }
    for k in (1..edges.len()).rev() {
        let m = rng.random_range(0..=k);
        edges.swap(k, m);
    }
    for (i, j, horizontal) in edges {
        let a = (j * nrx + i) as usize;
        let b = if horizontal { a + 1 } else { a + nrx as usize };
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let extra = rng.random_bool(0.25);
        if ra == rb && !extra {
            continue;
        }
        parent[ra] = rb;
        if horizontal {
            let x = xs[(i + 1) as usize];
            let lo = ys[j as usize] + wall + 1;
            let hi = ys[(j + 1) as usize] - wall - door;
            let y = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            grid.fill_rect(x - wall / 2, y, x - wall / 2 + wall, y + door, FREE);
        } else {
            let y = ys[(j + 1) as usize];
            let lo = xs[i as usize] + wall + 1;
            let hi = xs[(i + 1) as usize] - wall - door;
            let x = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            grid.fill_rect(x, y - wall / 2, x + door, y - wall / 2 + wall, FREE);
        }
    }
    Ok(())
}

fn scatter(grid: &mut OccupancyGrid, spec: &WorldSpec, rng: &mut ChaCha8Rng) {
    grid.add_boundary();
    let (w, h) = (grid.width as i64, grid.height as i64);
    let interior = ((w - 2) * (h - 2)) as f64;
    let target = (spec.obstacle_density * interior).round() as usize;
    let base = grid.width * grid.height - grid.free_count();
    let lo = cells_for(0.3, spec.resolution).max(1);
    let hi = cells_for(1.2, spec.resolution).max(lo + 1);
    for _ in 0..10_000 {
        let occupied = grid.width * grid.height - grid.free_count() - base;
        if occupied >= target {
            break;
        }
        let sw = rng.random_range(lo..=hi);
        let sh = rng.random_range(lo..=hi);
        let c = rng.random_range(1..(w - 1).max(2));
        let r = rng.random_range(1..(h - 1).max(2));
        grid.fill_rect(c, r, (c + sw).min(w - 1), (r + sh).min(h - 1), OBSTACLE);
    }
}

/// Marks every cell whose center lies closer than `radius` to an obstacle-cell
/// center as an obstacle.
pub fn inflate_obstacles(grid: &OccupancyGrid, radius: f64) -> OccupancyGrid {
    assert!(radius >= 0.0, "inflation radius must be non-negative");
    let mut out = grid.clone();
    if radius == 0.0 {
        return out;
    }
    let res = grid.resolution;
    let reach = (radius / res).ceil() as i64;
    let offsets: Vec<(i64, i64)> = (-reach..=reach)
        .flat_map(|dr| (-reach..=reach).map(move |dc| (dc, dr)))
        .filter(|&(dc, dr)| ((dc * dc + dr * dr) as f64).sqrt() * res < radius)
        .collect();
    let (w, h) = (grid.width as i64, grid.height as i64);
    for r in 0..h {
        for c in 0..w {
            if grid.is_free(c as usize, r as usize) {
                continue;
            }
            // Only obstacle cells bordering free space can be the nearest obstacle of a free cell.
            let border = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|&(dc, dr)| grid.is_free_signed(c + dc, r + dr));
            if !border {
                continue;
            }
            for &(dc, dr) in &offsets {
                let (nc, nr) = (c + dc, r + dr);
                if nc >= 0 && nr >= 0 && nc < w && nr < h {
                    out.set(nc as usize, nr as usize, OBSTACLE);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Map files

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("cannot read map image {path}: {source}")]
    Unreadable { path: PathBuf, source: image::ImageError },
    #[error("map image {path} is not 8-bit grayscale (found {color:?})")]
    NotGrayscale { path: PathBuf, color: ColorType },
    #[error("missing map sidecar {0}")]
    MissingSidecar(PathBuf),
    #[error("invalid map sidecar {path}: {reason}")]
    InvalidSidecar { path: PathBuf, reason: String },
    #[error("unsupported map format for {0} (expected .pgm or .png)")]
    UnsupportedFormat(PathBuf),
    #[error("cannot write map {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error(transparent)]
    Grid(#[from] WorldError),
}

/// Metadata stored next to a map image as `<stem>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapMeta {
    pub resolution_m: f64,
    pub origin_xy_m: [f64; 2],
}

pub fn sidecar_path(map_path: &Path) -> PathBuf {
    map_path.with_extension("json")
}

/// Pixel threshold: values below it are obstacles.
pub const FREE_THRESHOLD: u8 = 128;

pub fn grid_from_pixels(pixels: &GrayImage, meta: &MapMeta) -> Result<OccupancyGrid, WorldError> {
    let (w, h) = (pixels.width() as usize, pixels.height() as usize);
    let mut cells = vec![OBSTACLE; w * h];
    for (x, y, p) in pixels.enumerate_pixels() {
        let row = h - 1 - y as usize;
        cells[row * w + x as usize] = u8::from(p.0[0] >= FREE_THRESHOLD);
    }
    OccupancyGrid::new(w, h, meta.resolution_m, Point::new(meta.origin_xy_m[0], meta.origin_xy_m[1]), cells)
}

pub fn grid_to_pixels(grid: &OccupancyGrid) -> GrayImage {
    let (w, h) = (grid.width, grid.height);
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let row = h - 1 - y as usize;
        image::Luma([if grid.get(x as usize, row) == FREE { 255 } else { 0 }])
    })
}

enum MapFormat {
    Pgm,
    Png,
}

fn map_format(path: &Path) -> Result<MapFormat, MapIoError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => Ok(MapFormat::Pgm),
        Some("png") => Ok(MapFormat::Png),
        _ => Err(MapIoError::UnsupportedFormat(path.to_path_buf())),
    }
}

pub fn load_map(path: &Path) -> Result<OccupancyGrid, MapIoError> {
    map_format(path)?;
    let unreadable = |source| MapIoError::Unreadable { path: path.to_path_buf(), source };
    let img = ImageReader::open(path)
        .map_err(|e| unreadable(image::ImageError::IoError(e)))?
        .with_guessed_format()
        .map_err(|e| unreadable(image::ImageError::IoError(e)))?
        .decode()
        .map_err(unreadable)?;
    let pixels = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => return Err(MapIoError::NotGrayscale { path: path.to_path_buf(), color: other.color() }),
    };
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|_| MapIoError::MissingSidecar(side.clone()))?;
    let meta: MapMeta = serde_json::from_str(&text)
        .map_err(|e| MapIoError::InvalidSidecar { path: side.clone(), reason: e.to_string() })?;
    Ok(grid_from_pixels(&pixels, &meta)?)
}

pub fn save_map(grid: &OccupancyGrid, path: &Path) -> Result<(), MapIoError> {
    let format = map_format(path)?;
    let write_err = |reason: String| MapIoError::Write { path: path.to_path_buf(), reason };
    let pixels = grid_to_pixels(grid);
    let file = fs::File::create(path).map_err(|e| write_err(e.to_string()))?;
    let writer = std::io::BufWriter::new(file);
    let (w, h) = (pixels.width(), pixels.height());
    match format {
        MapFormat::Pgm => {
            use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
            PnmEncoder::new(writer)
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(pixels.as_raw(), w, h, image::ExtendedColorType::L8)
                .map_err(|e| write_err(e.to_string()))?;
        }
        MapFormat::Png => {
            image::codecs::png::PngEncoder::new(writer)
                .write_image(pixels.as_raw(), w, h, image::ExtendedColorType::L8)
                .map_err(|e| write_err(e.to_string()))?;
        }
    }
    let meta = MapMeta { resolution_m: grid.resolution, origin_xy_m: [grid.origin.x, grid.origin.y] };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta).expect("sidecar serializes"))
        .map_err(|e| MapIoError::Write { path: side, reason: e.to_string() })?;
    Ok(())
}
