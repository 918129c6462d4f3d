//! Egocentric RGBD rendering and agent motion against the cell grid.
//!
//! The renderer is a 2.5-D column raycaster: one ray per image column
//! through a pinhole camera, traversing cells with an Amanatides-Woo DDA
//! until it enters a non-free cell (the boundary ring guarantees a hit).
//! The hit paints a vertical wall slice — palette color times a distance
//! shading factor — between a flat ceiling and floor; the camera sits at
//! half wall height, so slices are vertically symmetric.
//!
//! Depth is *planar*: the distance along the camera's forward axis, not
//! along the ray, clamped to `[depth_min, depth_max]`. It is constant down
//! each column (the 2.5-D scene has no vertical structure), which keeps
//! the channel exactly reconstructable by a ray-march oracle.
//!
//! Motion uses the same traversal: [`step_forward`] sweeps the agent's
//! center along the step segment and reports a collision when the segment
//! crosses any non-free cell, leaving the pose unchanged in that case.

use crate::error::{Error, Result};
use crate::geom::{Point, Pose};
use crate::world::{CellState, World};

/// Depth channel lower bound, meters.
pub const DEPTH_MIN_M: f64 = 0.5;
/// Depth channel upper bound (and sensing range), meters.
pub const DEPTH_MAX_M: f64 = 5.0;
/// Forward step length used by motion and explorable-distance probing.
pub const FORWARD_STEP_M: f64 = 0.10;
/// Step budget for explorable-distance probing (50 x 0.10 m = 5 m reach).
pub const EXPLORE_MAX_STEPS: usize = 50;

/// Pinhole camera intrinsics and depth range.
#[derive(Debug, Clone)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub hfov: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 64,
            height: 64,
            hfov: std::f64::consts::FRAC_PI_2,
            depth_min: DEPTH_MIN_M,
            depth_max: DEPTH_MAX_M,
        }
    }
}

impl CameraConfig {
    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("camera resolution must be positive".into()));
        }
        if !(self.hfov > 0.0 && self.hfov < std::f64::consts::PI) {
            return Err(Error::InvalidConfig("hfov must be in (0, pi)".into()));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err(Error::InvalidConfig("depth range must satisfy 0 < min < max".into()));
        }
        Ok(())
    }

    /// Signed angle of a column's ray relative to the camera forward axis
    /// (positive = left of forward, matching CCW headings).
    pub fn column_angle(&self, col: usize) -> f64 {
        let u = 2.0 * (col as f64 + 0.5) / self.width as f64 - 1.0;
        // Columns grow to the right of the view, so negate.
        (-u * (self.hfov / 2.0).tan()).atan()
    }

    fn tan_vfov_half(&self) -> f64 {
        (self.hfov / 2.0).tan() * self.height as f64 / self.width as f64
    }
}

/// One egocentric RGBD frame. `rgb` is `height x width x 3` row-major
/// (row 0 at the top of the image), values in `[0, 1]`; `depth` is
/// `height x width` planar depth in meters, clamped to the camera range
/// and constant down each column.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbdImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
}

impl RgbdImage {
    pub fn rgb_at(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.width + col]
    }
}

/// First non-free cell along a ray, as (euclidean distance to the cell's
/// entry point, cell state). `max_t` bounds the walk; `None` past it.
/// Starts from the cell containing `from`, which must be free.
pub(crate) fn cast_ray(w: &World, from: Point, dir: (f64, f64), max_t: f64) -> Option<(f64, CellState)> {
    let s = w.scale_m();
    let (mut cx, mut cy) = w.cell_of_point(from).expect("ray origin inside world");
    let (dx, dy) = dir;

    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    // Distance along the ray to the first vertical / horizontal cell
    // boundary, then the per-cell increments.
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
        let t_entry;
        if t_max_x < t_max_y {
            t_entry = t_max_x;
            t_max_x += t_delta_x;
            icx += step_x;
        } else {
            t_entry = t_max_y;
            t_max_y += t_delta_y;
            icy += step_y;
        }
        if t_entry > max_t {
            return None;
        }
        if icx < 0 || icy < 0 || icx as usize >= w.width() || icy as usize >= w.height() {
            return None; // walked out of the grid (only possible with finite max_t)
        }
        cx = icx as usize;
        cy = icy as usize;
        let cell = w.cell(cx, cy);
        if !cell.is_free() {
            return Some((t_entry, cell));
        }
    }
}

fn require_free_pose(w: &World, pose: Pose) -> Result<()> {
    match w.cell_of_point(pose.pos) {
        None => Err(Error::InvalidPose(format!(
            "position ({:.3}, {:.3}) outside world",
            pose.pos.x, pose.pos.y
        ))),
        Some((x, y)) if !w.is_free_cell(x, y) => Err(Error::InvalidPose(format!(
            "position ({:.3}, {:.3}) inside occupied cell ({x}, {y})",
            pose.pos.x, pose.pos.y
        ))),
        Some(_) => Ok(()),
    }
}

/// Render one egocentric RGBD frame. Errors when the pose is outside the
/// grid or inside an occupied cell.
pub fn render_rgbd(w: &World, pose: Pose, cam: &CameraConfig) -> Result<RgbdImage> {
    cam.validate()?;
    require_free_pose(w, pose)?;

    const FLOOR: [f32; 3] = [0.24, 0.22, 0.20];
    const CEILING: [f32; 3] = [0.88, 0.88, 0.90];

    let (wpx, hpx) = (cam.width, cam.height);
    let mut rgb = vec![0f32; hpx * wpx * 3];
    let mut depth = vec![0f32; hpx * wpx];

    let half_h_world = w.wall_height_m() / 2.0; // camera sits at half wall height
    let tan_v = cam.tan_vfov_half();
    // Long enough to cross the whole grid; the wall ring stops every ray.
    let (ex, ey) = w.extent();
    let t_limit = ex + ey;

    for col in 0..wpx {
        let phi = cam.column_angle(col);
        let angle = pose.heading + phi;
        let dir = (angle.cos(), angle.sin());
        let hit = cast_ray(w, pose.pos, dir, t_limit);

        // Planar depth: projection of the ray hit onto the forward axis.
        let (z_true, color) = match hit {
            Some((t, cell)) => {
                let z = t * phi.cos();
                (z, w.palette().color_of(cell).expect("hit cell is occupied"))
            }
            None => (f64::INFINITY, [0.0, 0.0, 0.0]),
        };
        let z_clamped = z_true.clamp(cam.depth_min, cam.depth_max) as f32;
        let shade = (1.0 - z_clamped / cam.depth_max as f32).max(0.3);

        // Vertical extent of the wall slice, in pixels from image center.
        let half_px = if z_true.is_finite() {
            (half_h_world / (z_true.max(1e-3) * tan_v)) * (hpx as f64 / 2.0)
        } else {
            0.0
        };
        for row in 0..hpx {
            let dy = (row as f64 + 0.5) - hpx as f64 / 2.0;
            let px = if dy.abs() <= half_px {
                [color[0] * shade, color[1] * shade, color[2] * shade]
            } else if dy < 0.0 {
                CEILING
            } else {
                FLOOR
            };
            let i = (row * wpx + col) * 3;
            rgb[i] = px[0];
            rgb[i + 1] = px[1];
            rgb[i + 2] = px[2];
            depth[row * wpx + col] = z_clamped;
        }
    }
    Ok(RgbdImage { width: wpx, height: hpx, rgb, depth })
}

/// Semantic classes visible in a frame: which object classes (by palette
/// index) any column ray hits within the camera's depth range. Ground
/// truth for the linear probe; walls and out-of-range hits don't count.
pub fn visible_classes(w: &World, pose: Pose, cam: &CameraConfig) -> Result<Vec<bool>> {
    cam.validate()?;
    require_free_pose(w, pose)?;
    let mut present = vec![false; w.palette().classes.len()];
    let (ex, ey) = w.extent();
    for col in 0..cam.width {
        let phi = cam.column_angle(col);
        let angle = pose.heading + phi;
        if let Some((t, CellState::Object(k))) = cast_ray(w, pose.pos, (angle.cos(), angle.sin()), ex + ey)
        {
            if t * phi.cos() <= cam.depth_max {
                present[k as usize] = true;
            }
        }
    }
    Ok(present)
}

/// True when the straight segment between two points stays in free
/// cells the whole way (both endpoints included).
pub fn line_of_sight(w: &World, from: Point, to: Point) -> bool {
    if !w.is_free_point(from) || !w.is_free_point(to) {
        return false;
    }
    let d = from.dist(to);
    if d < 1e-12 {
        return true;
    }
    let dir = ((to.x - from.x) / d, (to.y - from.y) / d);
    cast_ray(w, from, dir, d).is_none()
}

/// Result of a forward step attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub pose: Pose,
    pub collided: bool,
}

/// Try to move `step_m` along the current heading. The swept center
/// segment is traversed cell-by-cell; crossing any non-free cell (or
/// leaving the grid) is a collision and the pose stays put.
pub fn step_forward(w: &World, pose: Pose, step_m: f64) -> Result<StepOutcome> {
    require_free_pose(w, pose)?;
    if !(step_m > 0.0 && step_m.is_finite()) {
        return Err(Error::InvalidArgument(format!("step length {step_m} must be positive")));
    }
    let (fx, fy) = pose.forward();
    let candidate = Point::new(pose.pos.x + fx * step_m, pose.pos.y + fy * step_m);
    let collided = !w.is_free_point(candidate)
        || cast_ray(w, pose.pos, (fx, fy), step_m).is_some();
    if collided {
        Ok(StepOutcome { pose, collided: true })
    } else {
        Ok(StepOutcome { pose: Pose { pos: candidate, heading: pose.heading }, collided: false })
    }
}

/// Maximal explorable distance straight ahead: repeated 0.10 m forward
/// steps (at most [`EXPLORE_MAX_STEPS`]) until one collides; the raw
/// traveled distance is clamped to the depth range `[0.5, 5.0]` m.
pub fn explorable_distance(w: &World, pose: Pose) -> Result<f64> {
    let mut probe = pose;
    let mut successes = 0usize;
    for _ in 0..EXPLORE_MAX_STEPS {
        let out = step_forward(w, probe, FORWARD_STEP_M)?;
        if out.collided {
            break;
        }
        probe = out.pose;
        successes += 1;
    }
    let raw = successes as f64 * FORWARD_STEP_M;
    Ok(raw.clamp(DEPTH_MIN_M, DEPTH_MAX_M))
}
