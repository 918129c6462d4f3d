//! Top-down semantic maps accumulated from ground-truth visibility.
//!
//! A map is a square RGB image centered on a path's start position,
//! world-axis-aligned, covering [-6, 6] m on both axes. Each pixel stands
//! for the world point at its center: if any accumulation pose saw that
//! point (within sensing range, inside the horizontal field of view, and
//! with an unobstructed straight segment), the pixel takes the point's
//! ground color — open space, wall, or object class — and otherwise stays
//! void. Accumulation poses are every third pose of the path plus its
//! final pose, followed by a full 360-degree sweep at the final position.
//! The walked trajectory is then rasterized on top as a 3-pixel-wide
//! polyline whose color ramps from a start hue to an end hue, encoding
//! direction.
//!
//! Alongside the RGB raster, the map keeps a per-pixel observation code
//! (`kind`) recording what the pixel depicts. The code grid is what the
//! ablation masks and the visibility tests read, so recoloring never has
//! to reverse-engineer pixel values.

use crate::error::Result;
use crate::geom::{wrap_angle, Point, Pose};
use crate::render::CameraConfig;
use crate::sampler::{Path, TripletSpec};
use crate::world::{CellState, World};

/// Map side length in pixels.
pub const MAP_RESOLUTION_PX: usize = 128;
/// Half of the mapped extent: the map covers [-6, 6] m around the start.
pub const MAP_HALF_EXTENT_M: f64 = 6.0;
/// Accumulate a pose every this many actions along the path.
pub const POSE_SUBSAMPLE: usize = 3;
/// Poses in the terminal sweep (72 five-degree turns, every third kept).
pub const SWEEP_POSES: usize = 24;

/// Color of never-observed pixels.
pub const VOID_COLOR: [f32; 3] = [0.05, 0.05, 0.08];
/// Color of observed free-space pixels.
pub const OPEN_SPACE_COLOR: [f32; 3] = [0.75, 0.75, 0.72];
/// Replacement obstacle color for the semantics-masking ablation.
pub const UNIFORM_OBSTACLE_COLOR: [f32; 3] = [0.30, 0.30, 0.32];
/// Replacement ground color for the space-masking ablation.
pub const NEUTRAL_GROUND_COLOR: [f32; 3] = [0.50, 0.50, 0.50];
/// Trajectory ramp endpoints: the line starts blue and ends red.
pub const TRAJECTORY_START_COLOR: [f32; 3] = [0.00, 0.35, 1.00];
pub const TRAJECTORY_END_COLOR: [f32; 3] = [1.00, 0.15, 0.00];

/// Per-pixel observation codes.
pub mod pixel {
    /// Never observed.
    pub const VOID: u8 = 0;
    /// Observed free space.
    pub const OPEN: u8 = 1;
    /// Observed wall.
    pub const WALL: u8 = 2;
    /// Observed object of class `code - CLASS_BASE`.
    pub const CLASS_BASE: u8 = 3;
    /// Overdrawn by the trajectory line.
    pub const TRAJECTORY: u8 = 255;
}

/// Map raster geometry.
#[derive(Debug, Clone)]
pub struct MapConfig {
    pub resolution_px: usize,
    pub half_extent_m: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig { resolution_px: MAP_RESOLUTION_PX, half_extent_m: MAP_HALF_EXTENT_M }
    }
}

/// A rendered top-down semantic map. `rgb` is `size x size x 3` row-major
/// with row 0 at the north edge; `kind` holds the observation code of
/// every pixel. `origin` is the path start `p_s`, which lies in the
/// center pixel `(size/2, size/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub size: usize,
    pub half_extent_m: f64,
    pub origin: Point,
    pub rgb: Vec<f32>,
    pub kind: Vec<u8>,
}

impl SemanticMap {
    pub fn rgb_at(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.size + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn kind_at(&self, row: usize, col: usize) -> u8 {
        self.kind[row * self.size + col]
    }

    /// World point at the center of a pixel.
    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        let delta = 2.0 * self.half_extent_m / self.size as f64;
        Point::new(
            self.origin.x - self.half_extent_m + (col as f64 + 0.5) * delta,
            self.origin.y + self.half_extent_m - (row as f64 + 0.5) * delta,
        )
    }

    /// Pixel containing a world point, or `None` outside the extent.
    pub fn pixel_of(&self, p: Point) -> Option<(usize, usize)> {
        let delta = 2.0 * self.half_extent_m / self.size as f64;
        let col = ((p.x - self.origin.x + self.half_extent_m) / delta).floor();
        let row = ((self.origin.y + self.half_extent_m - p.y) / delta).floor();
        (col >= 0.0 && row >= 0.0 && (col as usize) < self.size && (row as usize) < self.size)
            .then(|| (row as usize, col as usize))
    }

    /// 8-bit RGB bytes for image export.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

/// One visibility source: a pose, optionally with its field of view
/// widened to the full circle (used for the terminal sweep, whose 24
/// 15-degree-spaced headings cover every direction because 15/2 < hfov/2).
#[derive(Debug, Clone, Copy)]
pub struct VisPose {
    pub pose: Pose,
    pub full_circle: bool,
}

/// Accumulation poses of a path: every [`POSE_SUBSAMPLE`]-th pose of the
/// executed sequence, the final pose, and the terminal 360-degree sweep.
pub fn accumulation_poses(path: &Path) -> Vec<VisPose> {
    let mut seq = vec![path.start];
    seq.extend(path.steps.iter().map(|&(p, _)| p));
    let mut out: Vec<VisPose> = seq
        .iter()
        .step_by(POSE_SUBSAMPLE)
        .map(|&pose| VisPose { pose, full_circle: false })
        .collect();
    let last = *seq.last().expect("pose sequence nonempty");
    if (seq.len() - 1) % POSE_SUBSAMPLE != 0 {
        out.push(VisPose { pose: last, full_circle: false });
    }
    out.push(VisPose { pose: last, full_circle: true });
    out
}

/// Walk the straight segment from `from` to `to` cell by cell; true when
/// no occupied cell is entered strictly before the cell containing `to`
/// (that cell's own state does not block its visibility). Both points
/// must be inside the grid.
fn segment_visible(w: &World, from: Point, to: Point) -> bool {
    let target = match w.cell_of_point(to) {
        Some(c) => c,
        None => return false,
    };
    let (mut cx, mut cy) = match w.cell_of_point(from) {
        Some(c) => c,
        None => return false,
    };
    if (cx, cy) == target {
        return true;
    }
    let dist = from.dist(to);
    let dir = ((to.x - from.x) / dist, (to.y - from.y) / dist);
    let s = w.scale_m();
    let (dx, dy) = dir;
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let mut t_max_x = if dx != 0.0 {
        let edge = if dx > 0.0 { (cx as f64 + 1.0) * s } else { cx as f64 * s };
        (edge - from.x) / dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy != 0.0 {
        let edge = if dy > 0.0 { (cy as f64 + 1.0) * s } else { cy as f64 * s };
        (edge - from.y) / dy
    } else {
        f64::INFINITY
    };
    let t_delta_x = if dx != 0.0 { s / dx.abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { s / dy.abs() } else { f64::INFINITY };
    let mut icx = cx as i64;
    let mut icy = cy as i64;
    loop {
        if t_max_x < t_max_y {
            t_max_x += t_delta_x;
            icx += step_x;
        } else {
            t_max_y += t_delta_y;
            icy += step_y;
        }
        if icx < 0 || icy < 0 || icx as usize >= w.width() || icy as usize >= w.height() {
            return false;
        }
        cx = icx as usize;
        cy = icy as usize;
        if (cx, cy) == target {
            return true;
        }
        if !w.is_free_cell(cx, cy) {
            return false;
        }
    }
}

/// Observation code for a world point by its cell state.
fn ground_code(w: &World, p: Point) -> Option<u8> {
    let (x, y) = w.cell_of_point(p)?;
    Some(match w.cell(x, y) {
        CellState::Free => pixel::OPEN,
        CellState::Wall => pixel::WALL,
        CellState::Object(k) => pixel::CLASS_BASE + k,
    })
}

/// Mark every map pixel observed from any of `poses` into `kind`
/// (row-major `size x size`, [`pixel::VOID`] elsewhere). Exposed for the
/// visibility property tests; [`build_semantic_map`] drives it.
pub fn accumulate_visibility(
    w: &World,
    poses: &[VisPose],
    origin: Point,
    cam: &CameraConfig,
    cfg: &MapConfig,
) -> Vec<u8> {
    let g = cfg.resolution_px;
    let delta = 2.0 * cfg.half_extent_m / g as f64;
    let mut kind = vec![pixel::VOID; g * g];
    // Pixel center of (row, col), mirroring SemanticMap::pixel_center.
    let center = |row: usize, col: usize| {
        Point::new(
            origin.x - cfg.half_extent_m + (col as f64 + 0.5) * delta,
            origin.y + cfg.half_extent_m - (row as f64 + 0.5) * delta,
        )
    };
    for vp in poses {
        let p = vp.pose.pos;
        // Rows/cols whose centers can possibly be in range.
        let col_lo = ((p.x - cam.depth_max - (origin.x - cfg.half_extent_m)) / delta - 1.0)
            .floor()
            .max(0.0) as usize;
        let col_hi = (((p.x + cam.depth_max - (origin.x - cfg.half_extent_m)) / delta) + 1.0)
            .ceil()
            .min(g as f64) as usize;
        let row_lo = (((origin.y + cfg.half_extent_m - (p.y + cam.depth_max)) / delta) - 1.0)
            .floor()
            .max(0.0) as usize;
        let row_hi = (((origin.y + cfg.half_extent_m - (p.y - cam.depth_max)) / delta) + 1.0)
            .ceil()
            .min(g as f64) as usize;
        for row in row_lo..row_hi {
            for col in col_lo..col_hi {
                if kind[row * g + col] != pixel::VOID {
                    continue; // a pixel's ground code is pose-independent
                }
                let q = center(row, col);
                let d = p.dist(q);
                if d > cam.depth_max {
                    continue;
                }
                if !vp.full_circle && d > 1e-12 {
                    let ang = wrap_angle((q.y - p.y).atan2(q.x - p.x) - vp.pose.heading);
                    if ang.abs() > cam.hfov / 2.0 {
                        continue;
                    }
                }
                let Some(code) = ground_code(w, q) else { continue };
                if segment_visible(w, p, q) {
                    kind[row * g + col] = code;
                }
            }
        }
    }
    kind
}

/// Build the semantic map of a path: visibility accumulation, ground
/// colors, then the directional trajectory overlay. Deterministic in all
/// inputs.
pub fn build_semantic_map(
    w: &World,
    path: &Path,
    cam: &CameraConfig,
    cfg: &MapConfig,
) -> Result<SemanticMap> {
    let g = cfg.resolution_px;
    let origin = path.start.pos;
    let kind = accumulate_visibility(w, &accumulation_poses(path), origin, cam, cfg);

    let mut rgb = vec![0f32; g * g * 3];
    let palette = w.palette();
    for (i, &k) in kind.iter().enumerate() {
        let color = match k {
            pixel::VOID => VOID_COLOR,
            pixel::OPEN => OPEN_SPACE_COLOR,
            pixel::WALL => palette.wall,
            c => palette.classes[(c - pixel::CLASS_BASE) as usize],
        };
        rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
    }

    let mut map = SemanticMap { size: g, half_extent_m: cfg.half_extent_m, origin, rgb, kind };
    overlay_trajectory(&mut map, path);
    Ok(map)
}

/// Rasterize the walked position sequence as a 3-pixel-wide polyline
/// whose color ramps from [`TRAJECTORY_START_COLOR`] at `p_s` to
/// [`TRAJECTORY_END_COLOR`] at the final position.
fn overlay_trajectory(map: &mut SemanticMap, path: &Path) {
    let mut positions = vec![path.start.pos];
    positions.extend(path.steps.iter().map(|&(p, _)| p.pos));
    let n = positions.len();
    let delta = 2.0 * map.half_extent_m / map.size as f64;

    let mut stamp = |p: Point, t: f64| {
        let Some((row, col)) = map.pixel_of(p) else { return };
        let color = [
            TRAJECTORY_START_COLOR[0] + t as f32 * (TRAJECTORY_END_COLOR[0] - TRAJECTORY_START_COLOR[0]),
            TRAJECTORY_START_COLOR[1] + t as f32 * (TRAJECTORY_END_COLOR[1] - TRAJECTORY_START_COLOR[1]),
            TRAJECTORY_START_COLOR[2] + t as f32 * (TRAJECTORY_END_COLOR[2] - TRAJECTORY_START_COLOR[2]),
        ];
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (r, c) = (row as i64 + dr, col as i64 + dc);
                if r < 0 || c < 0 || r as usize >= map.size || c as usize >= map.size {
                    continue;
                }
                let i = r as usize * map.size + c as usize;
                map.kind[i] = pixel::TRAJECTORY;
                map.rgb[i * 3..i * 3 + 3].copy_from_slice(&color);
            }
        }
    };

    if n == 1 {
        stamp(positions[0], 0.0);
        return;
    }
    for i in 0..n - 1 {
        let (a, b) = (positions[i], positions[i + 1]);
        let seg = a.dist(b);
        // Quarter-pixel sampling covers every crossed pixel with a 3x3 brush.
        let samples = (seg / (delta * 0.25)).ceil().max(1.0) as usize;
        for s in 0..=samples {
            let u = s as f64 / samples as f64;
            let p = Point::new(a.x + (b.x - a.x) * u, a.y + (b.y - a.y) * u);
            let t = (i as f64 + u) / (n - 1) as f64;
            stamp(p, t);
        }
    }
}

/// Map-information masks and the target-view mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// Recolor all object classes to one uniform obstacle color.
    NoSemantics,
    /// Recolor open space and void to one uniform ground color.
    NoSpace,
    /// Leave the map alone; flag the triplet so the target feature is
    /// replaced by zeros in the model.
    NoTarget,
}

impl std::str::FromStr for AblationMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_semantics" => Ok(AblationMode::NoSemantics),
            "no_space" => Ok(AblationMode::NoSpace),
            "no_target" => Ok(AblationMode::NoTarget),
            other => Err(crate::Error::InvalidConfig(format!(
                "unknown ablation mode '{other}' (expected no_semantics, no_space, or no_target)"
            ))),
        }
    }
}

/// Apply one ablation to a (triplet, map) pair, returning modified
/// copies. Recoloring reads the observation codes, so the trajectory is
/// always preserved; the codes themselves record what was observed and
/// stay untouched.
pub fn apply_ablation(
    t: &TripletSpec,
    m: &SemanticMap,
    mode: AblationMode,
) -> (TripletSpec, SemanticMap) {
    let mut t = t.clone();
    let mut m = m.clone();
    match mode {
        AblationMode::NoSemantics => {
            for (i, &k) in m.kind.iter().enumerate() {
                if k >= pixel::CLASS_BASE && k != pixel::TRAJECTORY || k == pixel::WALL {
                    m.rgb[i * 3..i * 3 + 3].copy_from_slice(&UNIFORM_OBSTACLE_COLOR);
                }
            }
        }
        AblationMode::NoSpace => {
            for (i, &k) in m.kind.iter().enumerate() {
                if k == pixel::OPEN || k == pixel::VOID {
                    m.rgb[i * 3..i * 3 + 3].copy_from_slice(&NEUTRAL_GROUND_COLOR);
                }
            }
        }
        AblationMode::NoTarget => {
            t.no_target = true;
        }
    }
    (t, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::oracles;
    use crate::sampler::{sample_triplets, sample_viewpoints, Action};
    use crate::world::{generate_world, CellState, Palette, World, WorldGenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;
    use std::f64::consts::PI;

    /// Round free room of the given radius (meters) with an object-class
    /// rim, centered in the grid.
    fn round_room(radius_m: f64, scale: f32) -> (World, Point) {
        let s = scale as f64;
        let half_cells = ((radius_m + 0.5) / s).ceil() as usize + 2;
        let side = 2 * half_cells + 1;
        let c = half_cells as f64 + 0.5;
        let mut cells = vec![CellState::Wall; side * side];
        for y in 0..side {
            for x in 0..side {
                let d = ((x as f64 + 0.5 - c).powi(2) + (y as f64 + 0.5 - c).powi(2)).sqrt() * s;
                if d < radius_m {
                    cells[y * side + x] = CellState::Free;
                } else if d < radius_m + 0.12 {
                    let octant = (y as f64 + 0.5 - c).atan2(x as f64 + 0.5 - c);
                    let class = (((octant + PI) / (2.0 * PI) * 8.0) as u8).min(7);
                    cells[y * side + x] = CellState::Object(class);
                }
            }
        }
        // keep the boundary ring solid wall
        let w = World::from_parts(side, side, cells, scale, 2.5, 0, Palette::standard()).unwrap();
        let center = w.cell_center(half_cells, half_cells);
        (w, center)
    }

    fn stop_only_path(pose: Pose) -> Path {
        Path { start: pose, steps: vec![(pose, Action::Stop)] }
    }

    fn small_world(seed: u64) -> World {
        let cfg = WorldGenConfig {
            extent_min_m: 6.0,
            extent_max_m: 7.0,
            rooms_min: 2,
            rooms_max: 3,
            min_room_m: 2.0,
            door_width_m: 0.8,
            ..WorldGenConfig::default()
        };
        generate_world(&cfg, seed).unwrap()
    }

    #[test]
    fn sweep_in_round_room_paints_an_open_disc_with_class_rim() {
        let (w, center) = round_room(2.0, 0.05);
        let path = stop_only_path(Pose { pos: center, heading: 0.3 });
        let cam = CameraConfig::default();
        let map = build_semantic_map(&w, &path, &cam, &MapConfig::default()).unwrap();

        let px_m = 2.0 * map.half_extent_m / map.size as f64;
        let open = map.kind.iter().filter(|&&k| k == pixel::OPEN).count();
        let disc_px = PI * (2.0f64 / px_m).powi(2);
        assert!(
            (open as f64) > 0.85 * disc_px && (open as f64) < 1.05 * disc_px,
            "open pixels {open} vs disc {disc_px:.0}"
        );
        // Spot-check along +x: open inside, class rim at the boundary, void beyond.
        let probe = |dx: f64, dy: f64| {
            let (r, c) = map.pixel_of(Point::new(center.x + dx, center.y + dy)).unwrap();
            map.kind_at(r, c)
        };
        // Open inside, class rim at the boundary (on all four axes — the
        // sweep covers the full circle), void beyond.
        assert_eq!(probe(1.0, 0.0), pixel::OPEN);
        for (dx, dy) in [(2.04, 0.0), (-2.04, 0.0), (0.0, 2.04), (0.0, -2.04)] {
            assert!(probe(dx, dy) >= pixel::CLASS_BASE, "rim kind at ({dx},{dy})");
        }
        assert_eq!(probe(2.4, 0.0), pixel::VOID);
        // A one-pixel-thick ring of first-hit rim cells gets class colors;
        // the staircase curvature shadows roughly half the cell centers.
        let rim = map
            .kind
            .iter()
            .filter(|&&k| k >= pixel::CLASS_BASE && k != pixel::TRAJECTORY)
            .count();
        assert!(rim > 40, "rim pixels {rim}");
    }

    #[test]
    fn center_pixel_lies_on_the_trajectory() {
        let w = small_world(41);
        let free = w.largest_component_cells();
        let pos = w.cell_center(free[free.len() / 3].0, free[free.len() / 3].1);
        let path = stop_only_path(Pose { pos, heading: 1.0 });
        let map = build_semantic_map(&w, &path, &CameraConfig::default(), &MapConfig::default())
            .unwrap();
        let g = map.size;
        assert_eq!(map.kind_at(g / 2, g / 2), pixel::TRAJECTORY);
        assert_eq!(map.pixel_of(pos), Some((g / 2, g / 2)));
        // Zero-length trajectory: the ramp collapses onto one point and
        // the final stamp wins.
        assert_eq!(map.rgb_at(g / 2, g / 2), TRAJECTORY_END_COLOR);
    }

    #[test]
    fn trajectory_ramps_from_blue_start_to_red_end() {
        let w = small_world(46);
        // Walk straight ahead as far as the follower machinery allows:
        // find a start cell with room in the +x direction.
        let free = w.largest_component_cells();
        let (sx, sy) = free
            .iter()
            .copied()
            .find(|&(x, y)| (0..30).all(|i| x + i < w.width() && w.is_free_cell(x + i, y)))
            .expect("a 1.5 m straight corridor cell");
        let mut pose = Pose { pos: w.cell_center(sx, sy), heading: 0.0 };
        let start = pose;
        let mut steps = Vec::new();
        for _ in 0..25 {
            let (next, collided) = Action::Forward.apply(&w, pose).unwrap();
            assert!(!collided);
            pose = next;
            steps.push((pose, Action::Forward));
        }
        steps.push((pose, Action::Stop));
        let path = Path { start, steps };
        let map = build_semantic_map(&w, &path, &CameraConfig::default(), &MapConfig::default())
            .unwrap();
        let g = map.size;
        // Center (= start) is stamped only by early, blue-ish samples;
        // the final position only by late, red-ish ones.
        let c0 = map.rgb_at(g / 2, g / 2);
        assert_eq!(map.kind_at(g / 2, g / 2), pixel::TRAJECTORY);
        assert!(c0[2] > c0[0], "start pixel {c0:?} should lean blue");
        let (er, ec) = map.pixel_of(pose.pos).unwrap();
        let c1 = map.rgb_at(er, ec);
        assert_eq!(map.kind_at(er, ec), pixel::TRAJECTORY);
        assert!(c1[0] > c1[2], "end pixel {c1:?} should lean red");
    }

    /// Independent reconstruction of the accumulation pose set: the
    /// builder models the terminal sweep as one full-circle pose, the
    /// oracle side lists all 24 discrete headings.
    fn oracle_poses(path: &Path) -> Vec<Pose> {
        let mut seq = vec![path.start];
        seq.extend(path.steps.iter().map(|&(p, _)| p));
        let mut out: Vec<Pose> = seq.iter().copied().step_by(POSE_SUBSAMPLE).collect();
        let last = *seq.last().unwrap();
        out.push(last);
        for k in 0..SWEEP_POSES {
            out.push(Pose {
                pos: last.pos,
                heading: wrap_angle(last.heading + k as f64 * (2.0 * PI / SWEEP_POSES as f64)),
            });
        }
        out
    }

    #[test]
    fn observed_pixels_match_brute_force_visibility_oracle() {
        let w = small_world(42);
        let cam = CameraConfig::default();
        let cfg = MapConfig { resolution_px: 96, ..MapConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vps = sample_viewpoints(&w, &CameraConfig { width: 8, height: 8, ..cam.clone() }, &mut rng)
            .unwrap();
        let sampling = sample_triplets(&w, &vps, &mut rng).unwrap();
        let t = sampling
            .triplets
            .iter()
            .min_by_key(|t| t.path.steps.len())
            .expect("at least one triplet");
        let map = build_semantic_map(&w, &t.path, &cam, &cfg).unwrap();
        let poses = oracle_poses(&t.path);

        // Deterministic pixel sample (the full raster against an
        // all-cells oracle is quadratic); trajectory pixels are skipped
        // because the overlay hides their observation code.
        let mut checked = 0;
        for row in (0..cfg.resolution_px).step_by(3) {
            for col in (0..cfg.resolution_px).step_by(3) {
                if map.kind_at(row, col) == pixel::TRAJECTORY {
                    continue;
                }
                let q = map.pixel_center(row, col);
                if w.cell_of_point(q).is_none() {
                    assert_eq!(map.kind_at(row, col), pixel::VOID);
                    continue;
                }
                let want = oracles::point_observed_brute(&w, &poses, q, cam.depth_max, cam.hfov);
                let got = map.kind_at(row, col) != pixel::VOID;
                assert_eq!(got, want, "pixel ({row},{col}) at {q:?}");
                checked += 1;
            }
        }
        // The world covers only part of the 12 m map extent; the rest is
        // asserted void above rather than run through the oracle.
        assert!(checked > 250, "only {checked} pixels checked");
    }

    #[test]
    fn extra_poses_never_remove_observations() {
        let w = small_world(43);
        let cam = CameraConfig::default();
        let cfg = MapConfig { resolution_px: 64, ..MapConfig::default() };
        let free = w.largest_component_cells();
        let origin = w.cell_center(free[free.len() / 2].0, free[free.len() / 2].1);
        let mk = |cells: &[usize], full: bool| -> Vec<VisPose> {
            cells
                .iter()
                .map(|&i| VisPose {
                    pose: Pose { pos: w.cell_center(free[i].0, free[i].1), heading: (i % 7) as f64 },
                    full_circle: full,
                })
                .collect()
        };
        let base = mk(&[10, free.len() / 2, free.len() - 20], false);
        let mut extended = base.clone();
        extended.extend(mk(&[40, free.len() / 4], true));
        let a = accumulate_visibility(&w, &base, origin, &cam, &cfg);
        let b = accumulate_visibility(&w, &extended, origin, &cam, &cfg);
        for (i, (&ka, &kb)) in a.iter().zip(&b).enumerate() {
            if ka != pixel::VOID {
                assert_eq!(ka, kb, "pixel {i} changed or vanished");
            }
        }
        assert!(b.iter().filter(|&&k| k != pixel::VOID).count()
            > a.iter().filter(|&&k| k != pixel::VOID).count());
    }

    #[test]
    fn map_building_is_deterministic() {
        let w = small_world(44);
        let free = w.largest_component_cells();
        let pos = w.cell_center(free[8].0, free[8].1);
        let path = stop_only_path(Pose { pos, heading: -2.0 });
        let cam = CameraConfig::default();
        let cfg = MapConfig::default();
        let a = build_semantic_map(&w, &path, &cam, &cfg).unwrap();
        let b = build_semantic_map(&w, &path, &cam, &cfg).unwrap();
        assert_eq!(a, b);
    }

    fn test_triplet_and_map() -> (World, TripletSpec, SemanticMap) {
        let w = small_world(45);
        let cam = CameraConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vps = sample_viewpoints(&w, &CameraConfig { width: 8, height: 8, ..cam.clone() }, &mut rng)
            .unwrap();
        let sampling = sample_triplets(&w, &vps, &mut rng).unwrap();
        let t = sampling.triplets.into_iter().next().expect("a triplet");
        let map = build_semantic_map(&w, &t.path, &cam, &MapConfig::default()).unwrap();
        (w, t, map)
    }

    #[test]
    fn no_semantics_folds_every_obstacle_into_one_color() {
        let (_, t, map) = test_triplet_and_map();
        let (t2, m2) = apply_ablation(&t, &map, AblationMode::NoSemantics);
        assert!(!t2.no_target);
        let mut colors: HashSet<[u32; 3]> = HashSet::new();
        for i in 0..m2.size * m2.size {
            if m2.kind[i] == pixel::TRAJECTORY {
                continue;
            }
            let c = [
                m2.rgb[i * 3].to_bits(),
                m2.rgb[i * 3 + 1].to_bits(),
                m2.rgb[i * 3 + 2].to_bits(),
            ];
            colors.insert(c);
        }
        assert!(colors.len() <= 4, "{} distinct non-trajectory colors", colors.len());
        // Obstacles all carry the uniform color now.
        for i in 0..m2.size * m2.size {
            let k = m2.kind[i];
            if k == pixel::WALL || (k >= pixel::CLASS_BASE && k != pixel::TRAJECTORY) {
                assert_eq!(
                    [m2.rgb[i * 3], m2.rgb[i * 3 + 1], m2.rgb[i * 3 + 2]],
                    UNIFORM_OBSTACLE_COLOR
                );
            }
        }
    }

    #[test]
    fn no_space_removes_the_open_space_color() {
        let (_, t, map) = test_triplet_and_map();
        let open_before = map
            .kind
            .iter()
            .enumerate()
            .filter(|&(i, &k)| {
                k == pixel::OPEN
                    && [map.rgb[i * 3], map.rgb[i * 3 + 1], map.rgb[i * 3 + 2]] == OPEN_SPACE_COLOR
            })
            .count();
        assert!(open_before > 0);
        let (_, m2) = apply_ablation(&t, &map, AblationMode::NoSpace);
        for i in 0..m2.size * m2.size {
            let c = [m2.rgb[i * 3], m2.rgb[i * 3 + 1], m2.rgb[i * 3 + 2]];
            assert_ne!(c, OPEN_SPACE_COLOR, "open-space color survived at {i}");
            assert_ne!(c, VOID_COLOR, "void color survived at {i}");
            if m2.kind[i] == pixel::OPEN || m2.kind[i] == pixel::VOID {
                assert_eq!(c, NEUTRAL_GROUND_COLOR);
            }
        }
    }

    #[test]
    fn no_target_flags_the_triplet_and_keeps_the_map() {
        let (_, t, map) = test_triplet_and_map();
        let (t2, m2) = apply_ablation(&t, &map, AblationMode::NoTarget);
        assert!(t2.no_target);
        assert_eq!(map.rgb, m2.rgb);
        assert_eq!(map.kind, m2.kind);
    }

    #[test]
    fn ablation_mode_parsing_rejects_unknown_names() {
        assert_eq!("no_semantics".parse::<AblationMode>().unwrap(), AblationMode::NoSemantics);
        assert_eq!("no_space".parse::<AblationMode>().unwrap(), AblationMode::NoSpace);
        assert_eq!("no_target".parse::<AblationMode>().unwrap(), AblationMode::NoTarget);
        assert!("everything".parse::<AblationMode>().is_err());
    }
}
