//! Independent reference implementations used to cross-check the fast
//! paths. Each oracle deliberately takes a different algorithmic route
//! from the code it validates (different traversal, different
//! discretization), shares only type definitions with it, and trades speed
//! for obviousness. The `verify` CLI subcommand and the test suites both
//! run them.

use crate::geom::{wrap_angle, Point, Pose};
use crate::render::CameraConfig;
use crate::world::{CellState, World, NEIGHBORS};

/// Area of the largest free-connected component in square meters, by
/// breadth-first flooding with an explicit visited set (the production
/// labeling uses a DFS stack over a label array).
pub fn largest_free_area_m2(w: &World) -> f64 {
    let mut visited = vec![false; w.width() * w.height()];
    let mut best = 0usize;
    for sy in 0..w.height() {
        for sx in 0..w.width() {
            let start = sy * w.width() + sx;
            if visited[start] || !w.is_free_cell(sx, sy) {
                continue;
            }
            let mut count = 0usize;
            let mut queue = std::collections::VecDeque::new();
            visited[start] = true;
            queue.push_back((sx, sy));
            while let Some((x, y)) = queue.pop_front() {
                count += 1;
                for &(dx, dy, _) in &NEIGHBORS {
                    let nx = x as i32 + dx;
                    let ny = y as i32 + dy;
                    if nx < 0 || ny < 0 || nx as usize >= w.width() || ny as usize >= w.height() {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    let j = ny * w.width() + nx;
                    if w.is_free_cell(nx, ny) && !visited[j] {
                        visited[j] = true;
                        queue.push_back((nx, ny));
                    }
                }
            }
            best = best.max(count);
        }
    }
    best as f64 * w.scale_m() * w.scale_m()
}

/// Uniform-cost geodesic between two cells by label-correcting sweeps (no
/// heap, no heuristic): relax every free cell against its neighbors until
/// nothing changes. Costs are integer step-count pairs exactly like the
/// production search, so agreement must be exact, not approximate.
pub fn geodesic_uniform_cost(w: &World, from: (usize, usize), to: (usize, usize)) -> Option<f64> {
    if !w.is_free_cell(from.0, from.1) || !w.is_free_cell(to.0, to.1) {
        return None;
    }
    // (orth, diag) pairs; compare by unit-scale value.
    let value = |(o, d): (u32, u32)| o as f64 + d as f64 * std::f64::consts::SQRT_2;
    let mut dist: Vec<Option<(u32, u32)>> = vec![None; w.width() * w.height()];
    dist[from.1 * w.width() + from.0] = Some((0, 0));
    let mut changed = true;
    while changed {
        changed = false;
        for y in 0..w.height() {
            for x in 0..w.width() {
                let Some(cur) = dist[y * w.width() + x] else { continue };
                for &(dx, dy, diagonal) in &NEIGHBORS {
                    let nx = x as i32 + dx;
                    let ny = y as i32 + dy;
                    if nx < 0 || ny < 0 || nx as usize >= w.width() || ny as usize >= w.height() {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if !w.is_free_cell(nx, ny) {
                        continue;
                    }
                    let cand = if diagonal { (cur.0, cur.1 + 1) } else { (cur.0 + 1, cur.1) };
                    let slot = &mut dist[ny * w.width() + nx];
                    if slot.map_or(true, |old| value(cand) < value(old)) {
                        *slot = Some(cand);
                        changed = true;
                    }
                }
            }
        }
    }
    dist[to.1 * w.width() + to.0].map(|(o, d)| {
        o as f64 * w.scale_m() + d as f64 * (std::f64::consts::SQRT_2 * w.scale_m())
    })
}

/// Minimum pairwise geodesic distance over a set of points, exhaustively
/// over all pairs. Geodesic distance can never be smaller than straight-
/// line distance, so pairs separated by more than `cutoff` meters in a
/// straight line are accepted without running a search; every remaining
/// pair goes through [`geodesic_uniform_cost`].
///
/// Returns the smallest geodesic distance found among pairs at or below
/// the cutoff (straight-line), or `None` when every pair clears the
/// cutoff outright.
pub fn min_pairwise_geodesic_below(w: &World, points: &[Point], cutoff: f64) -> Option<f64> {
    let mut min: Option<f64> = None;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if points[i].dist(points[j]) > cutoff {
                continue;
            }
            let a = w.cell_of_point(points[i]).expect("viewpoint inside world");
            let b = w.cell_of_point(points[j]).expect("viewpoint inside world");
            let d = geodesic_uniform_cost(w, a, b).unwrap_or(f64::INFINITY);
            if min.map_or(true, |m| d < m) {
                min = Some(d);
            }
        }
    }
    min
}

/// True when any cell of `kind` exists in the grid (test helper for
/// constructed scenes).
pub fn contains_cell(w: &World, kind: CellState) -> bool {
    w.cells().iter().any(|&c| c == kind)
}

/// Planar depth for one image column by brute-force ray marching: walk
/// the column's ray in 1 mm increments, probing cell occupancy at every
/// sample point, and project the first occupied sample onto the camera
/// forward axis (the renderer instead walks cell boundaries analytically).
/// Clamped to the camera depth range like the rendered channel.
pub fn ray_march_depth(w: &World, pose: Pose, cam: &CameraConfig, col: usize) -> f64 {
    const STEP: f64 = 0.001;
    let phi = cam.column_angle(col);
    let angle = pose.heading + phi;
    let (dx, dy) = (angle.cos(), angle.sin());
    let (ex, ey) = w.extent();
    let mut t = STEP;
    let limit = ex + ey;
    while t <= limit {
        let p = Point::new(pose.pos.x + dx * t, pose.pos.y + dy * t);
        match w.cell_of_point(p) {
            Some((cx, cy)) if !w.is_free_cell(cx, cy) => {
                return (t * phi.cos()).clamp(cam.depth_min, cam.depth_max);
            }
            None => break,
            _ => {}
        }
        t += STEP;
    }
    cam.depth_max
}

/// Collision verdict for a forward step by fine sweeping: sample the
/// swept center segment every 1 mm (endpoint included) and report a
/// collision when any sample sits in an occupied cell or off the grid.
pub fn sweep_collides(w: &World, pose: Pose, step_m: f64) -> bool {
    const STEP: f64 = 0.001;
    let (fx, fy) = pose.forward();
    let n = (step_m / STEP).ceil() as usize;
    for i in 1..=n {
        let t = (i as f64 * STEP).min(step_m);
        let p = Point::new(pose.pos.x + fx * t, pose.pos.y + fy * t);
        if !w.is_free_point(p) {
            return true;
        }
    }
    false
}

/// Line-of-sight verdict for a straight segment by brute force over every
/// grid cell: the segment is clear when no occupied cell other than the
/// one containing `to` intersects its interior strictly before the end
/// (slab test per cell, no grid traversal). The fast path walks the
/// segment cell by cell instead.
pub fn segment_clear_slab(w: &World, from: Point, to: Point) -> bool {
    let target = match w.cell_of_point(to) {
        Some(c) => c,
        None => return false,
    };
    if w.cell_of_point(from).is_none() {
        return false;
    }
    let (dx, dy) = (to.x - from.x, to.y - from.y);
    let s = w.scale_m();
    for cy in 0..w.height() {
        for cx in 0..w.width() {
            if w.is_free_cell(cx, cy) || (cx, cy) == target {
                continue;
            }
            // Parametric overlap of the segment with the cell square.
            let (x0, x1) = (cx as f64 * s, (cx + 1) as f64 * s);
            let (y0, y1) = (cy as f64 * s, (cy + 1) as f64 * s);
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            let mut miss = false;
            for (f, d, a0, a1) in [(from.x, dx, x0, x1), (from.y, dy, y0, y1)] {
                if d == 0.0 {
                    if f < a0 || f > a1 {
                        miss = true;
                        break;
                    }
                } else {
                    let (t0, t1) = ((a0 - f) / d, (a1 - f) / d);
                    lo = lo.max(t0.min(t1));
                    hi = hi.min(t0.max(t1));
                }
            }
            // Only a crossing with positive interior length blocks; a
            // corner graze has measure zero.
            if !miss && lo < hi && lo < 1.0 && hi > 0.0 {
                return false;
            }
        }
    }
    true
}

/// Whether any pose in `poses` observes the world point `q`: within
/// `depth_max` meters, inside the horizontal field of view, and with a
/// clear straight segment per [`segment_clear_slab`].
pub fn point_observed_brute(
    w: &World,
    poses: &[Pose],
    q: Point,
    depth_max: f64,
    hfov: f64,
) -> bool {
    poses.iter().any(|pose| {
        let d = pose.pos.dist(q);
        if d > depth_max {
            return false;
        }
        if d > 1e-12 {
            let ang = wrap_angle((q.y - pose.pos.y).atan2(q.x - pose.pos.x) - pose.heading);
            if ang.abs() > hfov / 2.0 {
                return false;
            }
        }
        segment_clear_slab(w, pose.pos, q)
    })
}
