//! Procedural 2.5-D indoor worlds on a metric cell grid.
//!
//! A world is a dense `width x height` grid of [`CellState`] at `scale`
//! meters per cell (x = column = east, y = row = north, origin at the
//! southwest corner). Geometry is planar; walls and objects share one
//! uniform height, which is all the renderer needs for a 2.5-D view.
//!
//! Generation is a binary-space partition of the interior into rooms,
//! connected by door gaps carved through the partition walls, with
//! axis-aligned object rectangles scattered inside rooms. Everything is
//! drawn from a seeded ChaCha stream, so `(config, seed)` fully determines
//! the grid.
//!
//! Distances between points are grid geodesics: 8-connected over `Free`
//! cells, orthogonal steps cost `scale`, diagonal steps cost `sqrt(2) *
//! scale`. Searches track *integer* step counts per kind and only convert
//! to meters at the end, so two correct searches can never disagree by a
//! rounding ulp.

use std::collections::BinaryHeap;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Point;

/// Number of object classes in the standard palette (wall excluded).
pub const NUM_CLASSES: usize = 12;

/// Thickness of generated walls, in cells.
const WALL_THICKNESS: usize = 2;

/// Occupancy of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellState {
    Free,
    Wall,
    /// An object instance of the given semantic class (`0..NUM_CLASSES`).
    Object(u8),
}

impl CellState {
    #[inline]
    pub fn is_free(self) -> bool {
        self == CellState::Free
    }

    /// Byte encoding used by the world file: 0 free, 1 wall, 2+k class k.
    pub fn to_byte(self) -> u8 {
        match self {
            CellState::Free => 0,
            CellState::Wall => 1,
            CellState::Object(k) => 2 + k,
        }
    }

    pub fn from_byte(b: u8, class_count: usize) -> Option<CellState> {
        match b {
            0 => Some(CellState::Free),
            1 => Some(CellState::Wall),
            k => {
                let class = (k - 2) as usize;
                (class < class_count).then_some(CellState::Object(k - 2))
            }
        }
    }
}

/// RGB colors (linear, 0..=1) for walls and object classes. The same
/// palette colors appear in rendered views and in top-down maps, which is
/// what lets a model associate the two.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub wall: [f32; 3],
    pub classes: Vec<[f32; 3]>,
}

impl Palette {
    /// The fixed 12-class palette. Hues are spread far apart so that
    /// distance shading in views never makes two classes collide.
    pub fn standard() -> Self {
        Palette {
            wall: [0.46, 0.43, 0.40],
            classes: vec![
                [0.85, 0.10, 0.10], // red
                [0.90, 0.55, 0.10], // orange
                [0.92, 0.86, 0.14], // yellow
                [0.55, 0.85, 0.10], // lime
                [0.10, 0.70, 0.22], // green
                [0.10, 0.76, 0.65], // teal
                [0.12, 0.80, 0.92], // cyan
                [0.16, 0.45, 0.90], // azure
                [0.12, 0.12, 0.85], // blue
                [0.55, 0.16, 0.85], // purple
                [0.86, 0.12, 0.76], // magenta
                [0.55, 0.36, 0.16], // brown
            ],
        }
    }

    /// Color of a non-free cell; `None` for `Free`.
    pub fn color_of(&self, c: CellState) -> Option<[f32; 3]> {
        match c {
            CellState::Free => None,
            CellState::Wall => Some(self.wall),
            CellState::Object(k) => Some(self.classes[k as usize]),
        }
    }
}

/// Exact grid path cost as step counts; meters only materialize in
/// [`Steps::meters`], so equal costs compare equal bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Steps {
    pub orth: u32,
    pub diag: u32,
}

impl Steps {
    pub const ZERO: Steps = Steps { orth: 0, diag: 0 };

    #[inline]
    pub fn meters(self, scale: f64) -> f64 {
        self.orth as f64 * scale + self.diag as f64 * (std::f64::consts::SQRT_2 * scale)
    }

    #[inline]
    fn value(self) -> f64 {
        // Unit-scale cost used for comparisons inside searches.
        self.orth as f64 + self.diag as f64 * std::f64::consts::SQRT_2
    }

    #[inline]
    fn plus(self, diagonal: bool) -> Steps {
        if diagonal {
            Steps { orth: self.orth, diag: self.diag + 1 }
        } else {
            Steps { orth: self.orth + 1, diag: self.diag }
        }
    }
}

/// 8-connected neighborhood, orthogonals first. Fixed order keeps every
/// search deterministic.
pub const NEIGHBORS: [(i32, i32, bool); 8] = [
    (1, 0, false),
    (-1, 0, false),
    (0, 1, false),
    (0, -1, false),
    (1, 1, true),
    (1, -1, true),
    (-1, 1, true),
    (-1, -1, true),
];

#[derive(Debug, Clone)]
struct Components {
    /// Per-cell component label; 0 for non-free cells, 1.. for free cells.
    label: Vec<u32>,
    /// Cell count per label (index 0 unused).
    area_cells: Vec<usize>,
    /// Label of the largest free component (0 when there are no free cells).
    largest: u32,
}

/// A generated indoor world.
#[derive(Debug, Clone)]
pub struct World {
    width: usize,
    height: usize,
    cells: Vec<CellState>,
    /// Meters per cell. Stored at f32 so in-memory and file-loaded worlds
    /// carry bit-identical geometry.
    scale: f32,
    wall_height: f32,
    seed: u64,
    palette: Palette,
    comp: Components,
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.cells == other.cells
            && self.scale.to_bits() == other.scale.to_bits()
            && self.wall_height.to_bits() == other.wall_height.to_bits()
            && self.seed == other.seed
            && self.palette == other.palette
    }
}

impl World {
    /// Assemble a world from raw parts, validating the structural
    /// invariants (closed boundary ring, sane dimensions, class ids within
    /// the palette).
    pub fn from_parts(
        width: usize,
        height: usize,
        cells: Vec<CellState>,
        scale: f32,
        wall_height: f32,
        seed: u64,
        palette: Palette,
    ) -> Result<World> {
        if width < 3 || height < 3 {
            return Err(Error::InvalidConfig(format!("world {width}x{height} too small")));
        }
        if cells.len() != width * height {
            return Err(Error::InvalidConfig(format!(
                "cell count {} does not match {width}x{height}",
                cells.len()
            )));
        }
        if !(scale > 0.0) || !(wall_height > 0.0) {
            return Err(Error::InvalidConfig("scale and wall height must be positive".into()));
        }
        for y in 0..height {
            for x in 0..width {
                if (x == 0 || y == 0 || x == width - 1 || y == height - 1)
                    && cells[y * width + x] != CellState::Wall
                {
                    return Err(Error::InvalidConfig(format!("boundary cell ({x},{y}) is not Wall")));
                }
                if let CellState::Object(k) = cells[y * width + x] {
                    if k as usize >= palette.classes.len() {
                        return Err(Error::InvalidConfig(format!("class id {k} outside palette")));
                    }
                }
            }
        }
        let comp = label_components(width, height, &cells);
        Ok(World { width, height, cells, scale, wall_height, seed, palette, comp })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Meters per cell.
    pub fn scale_m(&self) -> f64 {
        self.scale as f64
    }

    pub fn wall_height_m(&self) -> f64 {
        self.wall_height as f64
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> CellState {
        self.cells[y * self.width + x]
    }

    #[inline]
    pub fn is_free_cell(&self, x: usize, y: usize) -> bool {
        self.cell(x, y).is_free()
    }

    /// World extent in meters, (east, north).
    pub fn extent(&self) -> (f64, f64) {
        (self.width as f64 * self.scale_m(), self.height as f64 * self.scale_m())
    }

    /// Cell containing a point, or `None` outside the grid.
    pub fn cell_of_point(&self, p: Point) -> Option<(usize, usize)> {
        let s = self.scale_m();
        if !(p.x.is_finite() && p.y.is_finite()) || p.x < 0.0 || p.y < 0.0 {
            return None;
        }
        let x = (p.x / s).floor() as usize;
        let y = (p.y / s).floor() as usize;
        (x < self.width && y < self.height).then_some((x, y))
    }

    pub fn is_free_point(&self, p: Point) -> bool {
        self.cell_of_point(p).map(|(x, y)| self.is_free_cell(x, y)).unwrap_or(false)
    }

    /// Center of a cell in world coordinates.
    pub fn cell_center(&self, x: usize, y: usize) -> Point {
        let s = self.scale_m();
        Point::new((x as f64 + 0.5) * s, (y as f64 + 0.5) * s)
    }

    /// Area of the largest free-connected component, in square meters.
    /// This is the world's "navigable area" for sampling budgets.
    pub fn navigable_area(&self) -> f64 {
        let cells = if self.comp.largest == 0 {
            0
        } else {
            self.comp.area_cells[self.comp.largest as usize]
        };
        cells as f64 * self.scale_m() * self.scale_m()
    }

    /// All cells of the largest free component, row-major order.
    pub fn largest_component_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if self.comp.largest == 0 {
            return out;
        }
        for y in 0..self.height {
            for x in 0..self.width {
                if self.comp.label[y * self.width + x] == self.comp.largest {
                    out.push((x, y));
                }
            }
        }
        out
    }

    pub fn in_largest_component(&self, p: Point) -> bool {
        match self.cell_of_point(p) {
            Some((x, y)) => {
                self.comp.largest != 0 && self.comp.label[y * self.width + x] == self.comp.largest
            }
            None => false,
        }
    }

    /// Radius of the disc with the same area as the free component
    /// containing `p`: `sqrt(area / pi)`. Small for pocket rooms and
    /// narrow side spaces; an error when `p` is occupied or off-grid.
    pub fn clearance_radius(&self, p: Point) -> Result<f64> {
        let (x, y) = self
            .cell_of_point(p)
            .ok_or_else(|| Error::InvalidPose(format!("point ({}, {}) outside world", p.x, p.y)))?;
        let label = self.comp.label[y * self.width + x];
        if label == 0 {
            return Err(Error::InvalidPose(format!(
                "point ({}, {}) is not in free space",
                p.x, p.y
            )));
        }
        let area = self.comp.area_cells[label as usize] as f64 * self.scale_m() * self.scale_m();
        Ok((area / std::f64::consts::PI).sqrt())
    }

    /// Grid-geodesic distance in meters between the cells containing `a`
    /// and `b`; `None` when no free path connects them. Errors when either
    /// point is outside the grid.
    pub fn geodesic_distance(&self, a: Point, b: Point) -> Result<Option<f64>> {
        let ca = self
            .cell_of_point(a)
            .ok_or_else(|| Error::InvalidPose(format!("point ({}, {}) outside world", a.x, a.y)))?;
        let cb = self
            .cell_of_point(b)
            .ok_or_else(|| Error::InvalidPose(format!("point ({}, {}) outside world", b.x, b.y)))?;
        Ok(self.grid_distance(ca, cb).map(|s| s.meters(self.scale_m())))
    }

    /// A* between two cells (octile heuristic, exact integer step costs).
    pub fn grid_distance(&self, from: (usize, usize), to: (usize, usize)) -> Option<Steps> {
        if !self.is_free_cell(from.0, from.1) || !self.is_free_cell(to.0, to.1) {
            return None;
        }
        if from == to {
            return Some(Steps::ZERO);
        }
        // Quick reject: different components never connect.
        let la = self.comp.label[from.1 * self.width + from.0];
        let lb = self.comp.label[to.1 * self.width + to.0];
        if la != lb {
            return None;
        }

        let octile = |x: usize, y: usize| -> f64 {
            let dx = (x as i64 - to.0 as i64).unsigned_abs() as f64;
            let dy = (y as i64 - to.1 as i64).unsigned_abs() as f64;
            let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
            (hi - lo) + lo * std::f64::consts::SQRT_2
        };

        let idx = |x: usize, y: usize| y * self.width + x;
        let mut best: Vec<Option<Steps>> = vec![None; self.cells.len()];
        let mut heap: BinaryHeap<SearchEntry> = BinaryHeap::new();
        best[idx(from.0, from.1)] = Some(Steps::ZERO);
        heap.push(SearchEntry { priority: octile(from.0, from.1), steps: Steps::ZERO, x: from.0, y: from.1 });

        while let Some(entry) = heap.pop() {
            let cur = best[idx(entry.x, entry.y)].expect("popped cell has a cost");
            if entry.steps != cur {
                continue; // stale entry
            }
            if (entry.x, entry.y) == to {
                return Some(cur);
            }
            for &(dx, dy, diagonal) in &NEIGHBORS {
                let nx = entry.x as i32 + dx;
                let ny = entry.y as i32 + dy;
                if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !self.is_free_cell(nx, ny) {
                    continue;
                }
                let cand = cur.plus(diagonal);
                let slot = &mut best[idx(nx, ny)];
                if slot.map_or(true, |old| cand.value() < old.value()) {
                    *slot = Some(cand);
                    heap.push(SearchEntry { priority: cand.value() + octile(nx, ny), steps: cand, x: nx, y: ny });
                }
            }
        }
        None
    }

    /// Dijkstra from one cell to every free cell. Entry is `None` for
    /// unreachable or non-free cells.
    pub fn grid_distances_from(&self, from: (usize, usize)) -> Vec<Option<Steps>> {
        let idx = |x: usize, y: usize| y * self.width + x;
        let mut best: Vec<Option<Steps>> = vec![None; self.cells.len()];
        if !self.is_free_cell(from.0, from.1) {
            return best;
        }
        let mut heap: BinaryHeap<SearchEntry> = BinaryHeap::new();
        best[idx(from.0, from.1)] = Some(Steps::ZERO);
        heap.push(SearchEntry { priority: 0.0, steps: Steps::ZERO, x: from.0, y: from.1 });
        while let Some(entry) = heap.pop() {
            let cur = best[idx(entry.x, entry.y)].expect("popped cell has a cost");
            if entry.steps != cur {
                continue;
            }
            for &(dx, dy, diagonal) in &NEIGHBORS {
                let nx = entry.x as i32 + dx;
                let ny = entry.y as i32 + dy;
                if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !self.is_free_cell(nx, ny) {
                    continue;
                }
                let cand = cur.plus(diagonal);
                let slot = &mut best[idx(nx, ny)];
                if slot.map_or(true, |old| cand.value() < old.value()) {
                    *slot = Some(cand);
                    heap.push(SearchEntry { priority: cand.value(), steps: cand, x: nx, y: ny });
                }
            }
        }
        best
    }

    /// Shortest cell path between two free cells (A*, same cost model as
    /// [`World::grid_distance`]). With `no_corner_cut` a diagonal move also
    /// requires both adjacent orthogonal cells to be free, which keeps a
    /// follower's straight-line motion from clipping wall corners.
    pub fn grid_path(
        &self,
        from: (usize, usize),
        to: (usize, usize),
        no_corner_cut: bool,
    ) -> Option<Vec<(usize, usize)>> {
        self.grid_path_with(from, to, no_corner_cut, &|_, _| true)
    }

    /// [`World::grid_path`] restricted to cells where `passable` also
    /// holds (on top of being free). Planners use it to keep paths away
    /// from walls without changing the world's collision geometry.
    pub fn grid_path_with(
        &self,
        from: (usize, usize),
        to: (usize, usize),
        no_corner_cut: bool,
        passable: &dyn Fn(usize, usize) -> bool,
    ) -> Option<Vec<(usize, usize)>> {
        if !self.is_free_cell(from.0, from.1)
            || !self.is_free_cell(to.0, to.1)
            || !passable(from.0, from.1)
            || !passable(to.0, to.1)
        {
            return None;
        }
        if from == to {
            return Some(vec![from]);
        }
        let idx = |x: usize, y: usize| y * self.width + x;
        let octile = |x: usize, y: usize| -> f64 {
            let dx = (x as i64 - to.0 as i64).unsigned_abs() as f64;
            let dy = (y as i64 - to.1 as i64).unsigned_abs() as f64;
            let (lo, hi) = if dx < dy { (dx, dy) } else { (dy, dx) };
            (hi - lo) + lo * std::f64::consts::SQRT_2
        };
        let mut best: Vec<Option<Steps>> = vec![None; self.cells.len()];
        let mut parent: Vec<u32> = vec![u32::MAX; self.cells.len()];
        let mut heap: BinaryHeap<SearchEntry> = BinaryHeap::new();
        best[idx(from.0, from.1)] = Some(Steps::ZERO);
        heap.push(SearchEntry { priority: octile(from.0, from.1), steps: Steps::ZERO, x: from.0, y: from.1 });
        while let Some(entry) = heap.pop() {
            let cur = best[idx(entry.x, entry.y)].expect("popped cell has a cost");
            if entry.steps != cur {
                continue;
            }
            if (entry.x, entry.y) == to {
                let mut path = vec![to];
                let mut at = idx(to.0, to.1);
                while parent[at] != u32::MAX {
                    at = parent[at] as usize;
                    path.push((at % self.width, at / self.width));
                }
                path.reverse();
                return Some(path);
            }
            for &(dx, dy, diagonal) in &NEIGHBORS {
                let nx = entry.x as i32 + dx;
                let ny = entry.y as i32 + dy;
                if nx < 0 || ny < 0 || nx as usize >= self.width || ny as usize >= self.height {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                if !self.is_free_cell(nx, ny) || !passable(nx, ny) {
                    continue;
                }
                if no_corner_cut
                    && diagonal
                    && !(self.is_free_cell(nx, entry.y) && self.is_free_cell(entry.x, ny))
                {
                    continue;
                }
                let cand = cur.plus(diagonal);
                let slot = &mut best[idx(nx, ny)];
                if slot.map_or(true, |old| cand.value() < old.value()) {
                    *slot = Some(cand);
                    parent[idx(nx, ny)] = idx(entry.x, entry.y) as u32;
                    heap.push(SearchEntry { priority: cand.value() + octile(nx, ny), steps: cand, x: nx, y: ny });
                }
            }
        }
        None
    }
}

/// Heap entry ordered by ascending priority.
#[derive(Debug, Clone, Copy, PartialEq)]
struct SearchEntry {
    priority: f64,
    steps: Steps,
    x: usize,
    y: usize,
}

impl Eq for SearchEntry {}

impl Ord for SearchEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Costs are finite and non-negative, so partial_cmp is total here.
        other.priority.partial_cmp(&self.priority).expect("finite priorities")
    }
}

impl PartialOrd for SearchEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn label_components(width: usize, height: usize, cells: &[CellState]) -> Components {
    let mut label = vec![0u32; cells.len()];
    let mut area_cells = vec![0usize]; // index 0 unused
    let mut next = 1u32;
    let mut stack = Vec::new();
    for start in 0..cells.len() {
        if !cells[start].is_free() || label[start] != 0 {
            continue;
        }
        let mut count = 0usize;
        label[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            count += 1;
            let (x, y) = (i % width, i / width);
            for &(dx, dy, _) in &NEIGHBORS {
                let nx = x as i32 + dx;
                let ny = y as i32 + dy;
                if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if cells[j].is_free() && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            }
        }
        area_cells.push(count);
        next += 1;
    }
    let largest = (1..area_cells.len())
        .max_by_key(|&i| (area_cells[i], std::cmp::Reverse(i)))
        .map(|i| i as u32)
        .unwrap_or(0);
    Components { label, area_cells, largest }
}

/// Knobs for [`generate_world`]. Extents are sampled per axis, everything
/// else is fixed by the config.
#[derive(Debug, Clone)]
pub struct WorldGenConfig {
    /// Minimum world edge length in meters.
    pub extent_min_m: f64,
    /// Maximum world edge length in meters.
    pub extent_max_m: f64,
    /// Meters per cell.
    pub scale: f32,
    /// Uniform wall/object height in meters.
    pub wall_height: f32,
    pub rooms_min: usize,
    pub rooms_max: usize,
    /// Smallest allowed room edge, meters.
    pub min_room_m: f64,
    /// Width of carved door gaps, meters.
    pub door_width_m: f64,
    /// Expected objects per square meter of room area.
    pub object_density: f64,
    /// Number of semantic classes to draw objects from (<= palette size).
    pub classes: usize,
}

impl Default for WorldGenConfig {
    fn default() -> Self {
        WorldGenConfig {
            extent_min_m: 12.0,
            extent_max_m: 20.0,
            scale: 0.05,
            wall_height: 2.5,
            rooms_min: 4,
            rooms_max: 8,
            min_room_m: 3.0,
            door_width_m: 0.9,
            object_density: 0.12,
            classes: NUM_CLASSES,
        }
    }
}

impl WorldGenConfig {
    fn validate(&self) -> Result<()> {
        if !(self.extent_min_m >= 3.0 && self.extent_max_m >= self.extent_min_m) {
            return Err(Error::InvalidConfig("extent range must satisfy 3 <= min <= max".into()));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::InvalidConfig("scale must be in (0, 1] meters per cell".into()));
        }
        if self.rooms_min < 1 || self.rooms_max < self.rooms_min {
            return Err(Error::InvalidConfig("room count range is empty".into()));
        }
        let s = self.scale as f64;
        let door_cells = (self.door_width_m / s).round() as usize;
        let min_room_cells = (self.min_room_m / s).round() as usize;
        if door_cells < 3 {
            return Err(Error::InvalidConfig("door width must cover at least 3 cells".into()));
        }
        if min_room_cells < door_cells + 2 {
            return Err(Error::InvalidConfig("min room size too small for door width".into()));
        }
        if self.classes == 0 || self.classes > NUM_CLASSES {
            return Err(Error::InvalidConfig(format!("classes must be in 1..={NUM_CLASSES}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize, // exclusive
    y1: usize, // exclusive
}

impl Rect {
    fn w(self) -> usize {
        self.x1 - self.x0
    }
    fn h(self) -> usize {
        self.y1 - self.y0
    }
    fn area(self) -> usize {
        self.w() * self.h()
    }
}

/// Generate a world from `(cfg, seed)`. The same pair always yields the
/// same grid; generation fails only when object placement keeps breaking
/// the floor plan apart, which the retry budget makes vanishingly rare.
pub fn generate_world(cfg: &WorldGenConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.scale as f64;

    let ew = rng.gen_range(cfg.extent_min_m..=cfg.extent_max_m);
    let eh = rng.gen_range(cfg.extent_min_m..=cfg.extent_max_m);
    let width = (ew / s).round() as usize;
    let height = (eh / s).round() as usize;

    let min_room = (cfg.min_room_m / s).round() as usize;
    let door_w = (cfg.door_width_m / s).round() as usize;
    let target_rooms = rng.gen_range(cfg.rooms_min..=cfg.rooms_max);

    let mut cells = vec![CellState::Free; width * height];
    // Closed boundary ring.
    for y in 0..height {
        for x in 0..width {
            if x < WALL_THICKNESS
                || y < WALL_THICKNESS
                || x >= width - WALL_THICKNESS
                || y >= height - WALL_THICKNESS
            {
                cells[y * width + x] = CellState::Wall;
            }
        }
    }

    // Binary-space partition of the interior: repeatedly split the largest
    // splittable leaf until the target room count is reached.
    let interior = Rect {
        x0: WALL_THICKNESS,
        y0: WALL_THICKNESS,
        x1: width - WALL_THICKNESS,
        y1: height - WALL_THICKNESS,
    };
    let mut leaves = vec![interior];
    while leaves.len() < target_rooms {
        let splittable = |r: &Rect| {
            r.w() >= 2 * min_room + WALL_THICKNESS || r.h() >= 2 * min_room + WALL_THICKNESS
        };
        let Some(pick) = (0..leaves.len())
            .filter(|&i| splittable(&leaves[i]))
            .max_by_key(|&i| leaves[i].area())
        else {
            break;
        };
        let r = leaves.swap_remove(pick);
        let split_x = if r.w() >= 2 * min_room + WALL_THICKNESS && r.h() >= 2 * min_room + WALL_THICKNESS {
            if r.w() == r.h() {
                rng.gen_bool(0.5)
            } else {
                r.w() > r.h()
            }
        } else {
            r.w() >= 2 * min_room + WALL_THICKNESS
        };
        if split_x {
            let lo = r.x0 + min_room;
            let hi = r.x1 - min_room - WALL_THICKNESS;
            let sx = rng.gen_range(lo..=hi);
            for y in r.y0..r.y1 {
                for x in sx..sx + WALL_THICKNESS {
                    cells[y * width + x] = CellState::Wall;
                }
            }
            // Door through the new wall.
            let d0 = rng.gen_range(r.y0 + 1..=r.y1 - door_w - 1);
            for y in d0..d0 + door_w {
                for x in sx..sx + WALL_THICKNESS {
                    cells[y * width + x] = CellState::Free;
                }
            }
            leaves.push(Rect { x1: sx, ..r });
            leaves.push(Rect { x0: sx + WALL_THICKNESS, ..r });
        } else {
            let lo = r.y0 + min_room;
            let hi = r.y1 - min_room - WALL_THICKNESS;
            let sy = rng.gen_range(lo..=hi);
            for y in sy..sy + WALL_THICKNESS {
                for x in r.x0..r.x1 {
                    cells[y * width + x] = CellState::Wall;
                }
            }
            let d0 = rng.gen_range(r.x0 + 1..=r.x1 - door_w - 1);
            for y in sy..sy + WALL_THICKNESS {
                for x in d0..d0 + door_w {
                    cells[y * width + x] = CellState::Free;
                }
            }
            leaves.push(Rect { y1: sy, ..r });
            leaves.push(Rect { y0: sy + WALL_THICKNESS, ..r });
        }
    }

    // Object placement, re-rolled wholesale if it fragments free space.
    let before_objects = cells.clone();
    let total_free = before_objects.iter().filter(|c| c.is_free()).count();
    const LAYOUT_RETRIES: usize = 8;
    for attempt in 0..=LAYOUT_RETRIES {
        cells = before_objects.clone();
        place_objects(&mut cells, width, &leaves, cfg, s, &mut rng);
        let comp = label_components(width, height, &cells);
        let largest = if comp.largest == 0 { 0 } else { comp.area_cells[comp.largest as usize] };
        let area_ok = largest as f64 * s * s >= 4.0;
        let cohesion_ok = largest * 10 >= total_free * 7; // >= 70% of free cells stay connected
        if area_ok && cohesion_ok {
            return World::from_parts(width, height, cells, cfg.scale, cfg.wall_height, seed, Palette::standard());
        }
        if attempt == LAYOUT_RETRIES {
            return Err(Error::WorldGen(format!(
                "object placement kept fragmenting free space after {LAYOUT_RETRIES} retries (seed {seed})"
            )));
        }
    }
    unreachable!("loop either returns a world or errors out");
}

fn place_objects(
    cells: &mut [CellState],
    width: usize,
    rooms: &[Rect],
    cfg: &WorldGenConfig,
    s: f64,
    rng: &mut ChaCha8Rng,
) {
    for room in rooms {
        let area_m2 = room.area() as f64 * s * s;
        let expect = area_m2 * cfg.object_density;
        let mut n = expect.floor() as usize;
        if rng.gen_bool(expect.fract().clamp(0.0, 1.0)) {
            n += 1;
        }
        for _ in 0..n {
            let class = rng.gen_range(0..cfg.classes) as u8;
            let ow = ((rng.gen_range(0.3..=1.0) / s).round() as usize).max(2);
            let oh = ((rng.gen_range(0.3..=1.0) / s).round() as usize).max(2);
            // Keep a 2-cell margin to the room bounds so doors stay usable.
            if room.w() < ow + 4 || room.h() < oh + 4 {
                continue;
            }
            'tries: for _ in 0..20 {
                let ox = rng.gen_range(room.x0 + 2..=room.x1 - ow - 2);
                let oy = rng.gen_range(room.y0 + 2..=room.y1 - oh - 2);
                // The rectangle plus a 1-cell apron must be free, so
                // objects never fuse with walls or each other.
                for y in oy.saturating_sub(1)..oy + oh + 1 {
                    for x in ox.saturating_sub(1)..ox + ow + 1 {
                        if !cells[y * width + x].is_free() {
                            continue 'tries;
                        }
                    }
                }
                for y in oy..oy + oh {
                    for x in ox..ox + ow {
                        cells[y * width + x] = CellState::Object(class);
                    }
                }
                break;
            }
        }
    }
}

// --- world file format -----------------------------------------------------
//
// Little-endian throughout:
//   magic  b"E2MW"
//   u16    version (= 1)
//   u32    width, u32 height
//   f32    scale, f32 wall_height
//   u64    seed
//   u16    class count
//   3xf32  wall color, then 3xf32 per class
//   u8     per cell, row-major (0 free, 1 wall, 2+k object class k)

const WORLD_MAGIC: &[u8; 4] = b"E2MW";
const WORLD_VERSION: u16 = 1;

pub fn write_world(w: &World, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(64 + w.cells.len());
    buf.extend_from_slice(WORLD_MAGIC);
    buf.extend_from_slice(&WORLD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(w.width as u32).to_le_bytes());
    buf.extend_from_slice(&(w.height as u32).to_le_bytes());
    buf.extend_from_slice(&w.scale.to_le_bytes());
    buf.extend_from_slice(&w.wall_height.to_le_bytes());
    buf.extend_from_slice(&w.seed.to_le_bytes());
    buf.extend_from_slice(&(w.palette.classes.len() as u16).to_le_bytes());
    for c in w.palette.wall {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    for class in &w.palette.classes {
        for c in class {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf.extend(w.cells.iter().map(|c| c.to_byte()));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_world(path: &Path) -> Result<World> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = ByteReader::new(&bytes, path);
    let magic = r.take(4)?;
    if magic != WORLD_MAGIC {
        return Err(Error::format(path, "bad magic (not a world file)"));
    }
    let version = r.u16()?;
    if version != WORLD_VERSION {
        return Err(Error::format(path, format!("unsupported world version {version}")));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let scale = r.f32()?;
    let wall_height = r.f32()?;
    let seed = r.u64()?;
    let class_count = r.u16()? as usize;
    let mut wall = [0f32; 3];
    for c in &mut wall {
        *c = r.f32()?;
    }
    let mut classes = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let mut rgb = [0f32; 3];
        for c in &mut rgb {
            *c = r.f32()?;
        }
        classes.push(rgb);
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(path, "width*height overflows"))?;
    let raw = r.take(n)?;
    if r.remaining() != 0 {
        return Err(Error::format(path, "trailing bytes after cell data"));
    }
    let mut cells = Vec::with_capacity(n);
    for (i, &b) in raw.iter().enumerate() {
        let cell = CellState::from_byte(b, class_count)
            .ok_or_else(|| Error::format(path, format!("invalid cell byte {b} at index {i}")))?;
        cells.push(cell);
    }
    World::from_parts(width, height, cells, scale, wall_height, seed, Palette { wall, classes })
}

/// Minimal little-endian cursor with path-aware errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader { bytes, at: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.at)));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn path(&self) -> &Path {
        self.path
    }
}
