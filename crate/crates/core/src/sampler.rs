//! Viewpoint, view-pair, and path sampling.
//!
//! A world is turned into training raw material in three stages:
//!
//! 1. [`sample_viewpoints`] scatters positions across the largest free
//!    component (rejection sampling under clearance and spacing
//!    constraints) and captures four RGBD views at uniformly random
//!    headings per position, each with its explorable-distance label.
//! 2. [`make_view_pairs`] groups each viewpoint's views into two pairs
//!    carrying the signed angular offset between their headings.
//! 3. [`sample_triplets`] pairs source and target viewpoints within a
//!    geodesic radius and drives a discrete shortest-path follower
//!    between them; the surviving (source view, target view, path)
//!    triples are what the mapper and dataset modules consume.
//!
//! Every stage draws from a caller-seeded RNG and is deterministic given
//! the seed; acceptance order matters (the spacing constraint is checked
//! against previously accepted points), so viewpoint sampling is
//! sequential by design. Worlds are independent and can be processed in
//! parallel by the caller with per-world generators.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{wrap_angle, Point, Pose};
use crate::render::{
    explorable_distance, render_rgbd, step_forward, CameraConfig, RgbdImage, FORWARD_STEP_M,
};
use crate::world::World;

/// Views captured at each viewpoint.
pub const VIEWS_PER_VIEWPOINT: usize = 4;
/// Minimum disc-equivalent clearance radius for a viewpoint, meters.
pub const MIN_CLEARANCE_M: f64 = 1.5;
/// Minimum pairwise geodesic spacing between viewpoints, meters (strict).
pub const MIN_SPACING_M: f64 = 0.40;
/// Viewpoint count cap per world.
pub const MAX_VIEWPOINTS: usize = 500;
/// Maximum source-to-target geodesic distance for a triplet, meters.
pub const MAX_TRIPLET_GEODESIC_M: f64 = 7.0;
/// Follower turn increment: 5 degrees.
pub const TURN_INCREMENT_RAD: f64 = 5.0 * PI / 180.0;
/// Follower stops turning once the heading error is within half a turn.
pub const HEADING_TOL_RAD: f64 = 2.5 * PI / 180.0;
/// Action budget per path, Stop excluded.
pub const MAX_PATH_ACTIONS: usize = 140;
/// A path succeeds when its final pose is geodesically this close to the
/// target, meters.
pub const ARRIVAL_TOL_M: f64 = 0.50;
/// The follower walks until this close (euclidean) to its last waypoint.
pub const WAYPOINT_TOL_M: f64 = 0.075;

/// Identity of one captured view: viewpoint index and view slot packed
/// into a single integer. Unique within a world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ViewId(pub u32);

impl ViewId {
    pub fn new(viewpoint: usize, slot: usize) -> Self {
        debug_assert!(slot < VIEWS_PER_VIEWPOINT);
        ViewId((viewpoint * VIEWS_PER_VIEWPOINT + slot) as u32)
    }

    pub fn viewpoint(self) -> usize {
        self.0 as usize / VIEWS_PER_VIEWPOINT
    }

    pub fn slot(self) -> usize {
        self.0 as usize % VIEWS_PER_VIEWPOINT
    }
}

/// One captured view: a heading, its rendered frame, and the
/// explorable-distance label measured at capture time.
#[derive(Debug, Clone)]
pub struct OrientedView {
    pub heading: f64,
    pub image: RgbdImage,
    pub d_star: f64,
}

/// A sampled position with its four captured views.
#[derive(Debug, Clone)]
pub struct Viewpoint {
    pub id: u32,
    pub position: Point,
    pub views: Vec<OrientedView>,
}

impl Viewpoint {
    /// Pose of one of this viewpoint's views.
    pub fn pose(&self, slot: usize) -> Pose {
        Pose { pos: self.position, heading: self.views[slot].heading }
    }
}

/// Resolve a view id against the viewpoint list it was issued for.
pub fn resolve_view(vps: &[Viewpoint], id: ViewId) -> &OrientedView {
    &vps[id.viewpoint()].views[id.slot()]
}

/// Pose of the view behind `id`.
pub fn resolve_pose(vps: &[Viewpoint], id: ViewId) -> Pose {
    vps[id.viewpoint()].pose(id.slot())
}

/// Two views at one position plus their ground-truth angular offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewPair {
    pub a: ViewId,
    pub b: ViewId,
    pub theta_star: f64,
}

/// Discrete agent actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    TurnLeft,
    TurnRight,
    Forward,
    Stop,
}

impl Action {
    /// Apply this action to a pose. Turning rotates 5 degrees and cannot
    /// collide; Forward delegates to the collision-checked step and
    /// reports the collision instead of moving; Stop is the identity.
    pub fn apply(self, w: &World, pose: Pose) -> Result<(Pose, bool)> {
        match self {
            Action::TurnLeft => {
                Ok((Pose { pos: pose.pos, heading: wrap_angle(pose.heading + TURN_INCREMENT_RAD) }, false))
            }
            Action::TurnRight => {
                Ok((Pose { pos: pose.pos, heading: wrap_angle(pose.heading - TURN_INCREMENT_RAD) }, false))
            }
            Action::Forward => {
                let out = step_forward(w, pose, FORWARD_STEP_M)?;
                Ok((out.pose, out.collided))
            }
            Action::Stop => Ok((pose, false)),
        }
    }
}

/// An executed action sequence. `steps[i]` records the pose *after* its
/// action, so replaying the actions from `start` through [`Action::apply`]
/// must reproduce every recorded pose exactly. The last step is always
/// `Stop`; no recorded step collided.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub start: Pose,
    pub steps: Vec<(Pose, Action)>,
}

impl Path {
    /// Actions taken before the terminating Stop.
    pub fn action_count(&self) -> usize {
        self.steps.iter().filter(|(_, a)| *a != Action::Stop).count()
    }

    pub fn final_pose(&self) -> Pose {
        self.steps.last().map(|(p, _)| *p).unwrap_or(self.start)
    }

    /// Forward distance traveled, meters (0.10 m per Forward).
    pub fn traveled_m(&self) -> f64 {
        self.steps.iter().filter(|(_, a)| *a == Action::Forward).count() as f64 * FORWARD_STEP_M
    }
}

/// A (source view, target view, connecting path) unit. `no_target` is set
/// only by the map ablation that hides the target view from the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletSpec {
    pub source: ViewId,
    pub target: ViewId,
    pub path: Path,
    pub no_target: bool,
}

/// Signed angular offset from heading `h0` to heading `h1`: the shorter
/// rotation, wrapped into (-pi, pi], positive counter-clockwise. An exact
/// half turn reports +pi.
pub fn angular_offset(h0: f64, h1: f64) -> f64 {
    wrap_angle(h1 - h0)
}

/// Number of viewpoints to aim for in a world: four per square meter of
/// navigable area, capped at [`MAX_VIEWPOINTS`].
pub fn viewpoint_target_count(w: &World) -> usize {
    ((4.0 * w.navigable_area()).ceil() as usize).min(MAX_VIEWPOINTS)
}

/// Sample viewpoints and capture their views. Positions are drawn
/// uniformly over the largest free component (uniform cell, then uniform
/// within the cell) and kept when the clearance radius is at least 1.5 m
/// and the geodesic distance to every previously accepted viewpoint
/// exceeds 0.40 m. Sampling stops at the target count or after a bounded
/// number of attempts, so saturated worlds return fewer viewpoints (the
/// caller records that); zero accepted viewpoints is an error.
pub fn sample_viewpoints(
    w: &World,
    cam: &CameraConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Viewpoint>> {
    if w.navigable_area() <= 0.0 {
        return Err(Error::Sampling("world has no navigable area".into()));
    }
    let target = viewpoint_target_count(w);
    let free = w.largest_component_cells();
    let s = w.scale_m();

    let mut accepted: Vec<Point> = Vec::with_capacity(target);
    let max_attempts = 200 * target;
    let mut attempts = 0usize;
    'sampling: while accepted.len() < target && attempts < max_attempts {
        attempts += 1;
        let (cx, cy) = free[rng.gen_range(0..free.len())];
        let p = Point::new((cx as f64 + rng.gen::<f64>()) * s, (cy as f64 + rng.gen::<f64>()) * s);
        if w.clearance_radius(p)? < MIN_CLEARANCE_M {
            continue;
        }
        for &q in &accepted {
            // Geodesic distance is never shorter than the straight line,
            // so distant points skip the search entirely.
            if p.dist(q) <= MIN_SPACING_M {
                match w.geodesic_distance(p, q)? {
                    Some(d) if d > MIN_SPACING_M => {}
                    _ => continue 'sampling,
                }
            }
        }
        accepted.push(p);
    }
    if accepted.is_empty() {
        return Err(Error::Sampling(format!(
            "no viewpoint satisfied the clearance/spacing constraints after {attempts} attempts"
        )));
    }

    accepted
        .into_iter()
        .enumerate()
        .map(|(i, position)| capture_viewpoint(w, cam, i as u32, position, rng))
        .collect()
}

/// Capture the four random-heading views of one viewpoint position.
pub fn capture_viewpoint(
    w: &World,
    cam: &CameraConfig,
    id: u32,
    position: Point,
    rng: &mut impl Rng,
) -> Result<Viewpoint> {
    let views = (0..VIEWS_PER_VIEWPOINT)
        .map(|_| {
            let heading = wrap_angle(rng.gen_range(-PI..PI));
            let pose = Pose { pos: position, heading };
            Ok(OrientedView {
                heading,
                image: render_rgbd(w, pose, cam)?,
                d_star: explorable_distance(w, pose)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Viewpoint { id, position, views })
}

/// Group a viewpoint's four views into two pairs, (0,1) and (2,3), with
/// their angular offsets.
pub fn make_view_pairs(v: &Viewpoint) -> [ViewPair; 2] {
    assert_eq!(v.views.len(), VIEWS_PER_VIEWPOINT, "viewpoint must carry 4 views");
    let pair = |a: usize, b: usize| ViewPair {
        a: ViewId::new(v.id as usize, a),
        b: ViewId::new(v.id as usize, b),
        theta_star: angular_offset(v.views[a].heading, v.views[b].heading),
    };
    [pair(0, 1), pair(2, 3)]
}

use crate::render::line_of_sight;

/// Planned paths keep this many cells of clearance from obstacles (the
/// agent body is not a point; waypoints hugging walls make the discrete
/// heading drift clip them).
const PLAN_CLEARANCE_CELLS: i64 = 1;
/// Cells this close (Chebyshev) to the start or target stay passable for
/// planning even inside the clearance band, so paths can leave and enter
/// tight endpoints.
const ENDPOINT_RELAX_CELLS: i64 = 2;
/// Waypoint smoothing never aims further ahead than this, which bounds
/// the lateral drift a 2.5-degree heading error can accumulate.
const LOOKAHEAD_M: f64 = 1.0;
/// Smoothing segments are validated with two side rays at this offset, so
/// the walk corridor has width and does not graze corners.
const LOS_MARGIN_M: f64 = 0.06;
/// Intermediate waypoints are routing hints: passing within this distance
/// counts as reaching them (the final waypoint keeps the tight tolerance).
const INTERMEDIATE_REACH_M: f64 = 0.15;

/// Waypoint chain for a walk: grid shortest path over the clearance-eroded
/// grid with corner cutting forbidden, cell centers as waypoints, and the
/// exact target point as the final waypoint.
fn plan_waypoints(w: &World, from: Point, target: Point) -> Option<Vec<Point>> {
    let a = w.cell_of_point(from)?;
    let b = w.cell_of_point(target)?;
    let clear = |x: usize, y: usize| -> bool {
        let near = |c: (usize, usize)| {
            (x as i64 - c.0 as i64).abs() <= ENDPOINT_RELAX_CELLS
                && (y as i64 - c.1 as i64).abs() <= ENDPOINT_RELAX_CELLS
        };
        if near(a) || near(b) {
            return true;
        }
        for dy in -PLAN_CLEARANCE_CELLS..=PLAN_CLEARANCE_CELLS {
            for dx in -PLAN_CLEARANCE_CELLS..=PLAN_CLEARANCE_CELLS {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0
                    || ny < 0
                    || nx as usize >= w.width()
                    || ny as usize >= w.height()
                    || !w.is_free_cell(nx as usize, ny as usize)
                {
                    return false;
                }
            }
        }
        true
    };
    let cells = w.grid_path_with(a, b, true, &clear)?;
    let mut wps: Vec<Point> = cells[1..].iter().map(|&(x, y)| w.cell_center(x, y)).collect();
    wps.pop();
    wps.push(target);
    Some(wps)
}

/// Line of sight widened by two parallel side rays: true when the whole
/// walk corridor of width 2 x [`LOS_MARGIN_M`] is free.
fn aim_visible(w: &World, from: Point, to: Point) -> bool {
    if !line_of_sight(w, from, to) {
        return false;
    }
    let d = from.dist(to);
    if d < 1e-9 {
        return true;
    }
    let (nx, ny) = (-(to.y - from.y) / d, (to.x - from.x) / d);
    [-LOS_MARGIN_M, LOS_MARGIN_M].iter().all(|off| {
        line_of_sight(
            w,
            Point::new(from.x + nx * off, from.y + ny * off),
            Point::new(to.x + nx * off, to.y + ny * off),
        )
    })
}

/// Drive from `start` to within [`ARRIVAL_TOL_M`] of `target` with
/// discrete actions. Plans a clearance-respecting grid waypoint chain,
/// then greedily aims at the furthest waypoint whose walk corridor is
/// visible (capped at [`LOOKAHEAD_M`]): turns 5 degrees along the shorter
/// rotation while the heading error exceeds 2.5 degrees, otherwise steps
/// 0.10 m forward. The walk ends on reaching the final waypoint within
/// [`WAYPOINT_TOL_M`] or on exhausting the action budget, and succeeds
/// iff the final pose is geodesically within 0.50 m of the target. A
/// target already that close yields a bare Stop. One replan is allowed
/// after a collision; a second collision, or no clearance-safe path, is a
/// failure (`None`) — callers pair the source with a new target. Errors
/// only on precondition violations (start occupied or target in a
/// different component).
pub fn shortest_path_follow(w: &World, start: Pose, target: Point) -> Result<Option<Path>> {
    let start_geo = w
        .geodesic_distance(start.pos, target)?
        .ok_or_else(|| Error::Sampling("follower target is unreachable from start".into()))?;
    if start_geo <= ARRIVAL_TOL_M {
        return Ok(Some(Path { start, steps: vec![(start, Action::Stop)] }));
    }

    let mut waypoints = match plan_waypoints(w, start.pos, target) {
        Some(wps) => wps,
        None => return Ok(None),
    };
    let mut pose = start;
    let mut steps: Vec<(Pose, Action)> = Vec::new();
    let mut wp_idx = 0usize;
    let mut replanned = false;

    loop {
        let arrived = pose.pos.dist(*waypoints.last().expect("waypoints nonempty")) <= WAYPOINT_TOL_M;
        if arrived || steps.len() >= MAX_PATH_ACTIONS {
            steps.push((pose, Action::Stop));
            let final_geo = w.geodesic_distance(pose.pos, target)?.unwrap_or(f64::INFINITY);
            return Ok((final_geo <= ARRIVAL_TOL_M).then_some(Path { start, steps }));
        }

        // Skip waypoints already passed, then aim at the furthest one
        // within the lookahead whose corridor is clear.
        while wp_idx + 1 < waypoints.len() && pose.pos.dist(waypoints[wp_idx]) <= INTERMEDIATE_REACH_M
        {
            wp_idx += 1;
        }
        for j in (wp_idx..waypoints.len()).rev() {
            if j == wp_idx {
                break;
            }
            if pose.pos.dist(waypoints[j]) <= LOOKAHEAD_M && aim_visible(w, pose.pos, waypoints[j]) {
                wp_idx = j;
                break;
            }
        }
        let aim = waypoints[wp_idx];
        let bearing = (aim.y - pose.pos.y).atan2(aim.x - pose.pos.x);
        let err = wrap_angle(bearing - pose.heading);

        if err.abs() > HEADING_TOL_RAD {
            let action = if err > 0.0 { Action::TurnLeft } else { Action::TurnRight };
            let (next, _) = action.apply(w, pose)?;
            pose = next;
            steps.push((pose, action));
        } else {
            let (next, collided) = Action::Forward.apply(w, pose)?;
            if collided {
                if replanned {
                    return Ok(None);
                }
                replanned = true;
                waypoints = match plan_waypoints(w, pose.pos, target) {
                    Some(wps) => wps,
                    None => return Ok(None),
                };
                wp_idx = 0;
            } else {
                pose = next;
                steps.push((pose, Action::Forward));
            }
        }
    }
}

/// Triplet sampling result: the accepted triplets plus how many follower
/// attempts failed along the way (for the sampling manifest).
#[derive(Debug, Clone)]
pub struct TripletSampling {
    pub triplets: Vec<TripletSpec>,
    pub follower_failures: usize,
}

/// Pair viewpoints into (source view, target view, path) triplets.
///
/// Each viewpoint is represented by a single one of its views here, so a
/// viewpoint joins at most one triplet — as its source or its target —
/// and the consumed view images are all distinct across the output.
/// Viewpoints are visited in random order; candidate targets are the
/// still-unconsumed viewpoints within 7.0 m geodesic distance, tried in
/// random order with a fresh follower run each, and a follower failure
/// moves on to the next candidate.
pub fn sample_triplets(
    w: &World,
    vps: &[Viewpoint],
    rng: &mut impl Rng,
) -> Result<TripletSampling> {
    if vps.len() < 2 {
        return Err(Error::Sampling(format!(
            "need at least 2 viewpoints to form triplets, got {}",
            vps.len()
        )));
    }
    let mut consumed: HashSet<usize> = HashSet::new();
    let mut order: Vec<usize> = (0..vps.len()).collect();
    order.shuffle(rng);

    let mut triplets = Vec::new();
    let mut follower_failures = 0usize;

    for &si in &order {
        if consumed.contains(&si) {
            continue;
        }
        let src = &vps[si];
        let src_slot = rng.gen_range(0..VIEWS_PER_VIEWPOINT);

        let src_cell = w.cell_of_point(src.position).expect("viewpoint inside world");
        let dists = w.grid_distances_from(src_cell);
        let mut cands: Vec<usize> = (0..vps.len())
            .filter(|&ti| {
                if ti == si || consumed.contains(&ti) {
                    return false;
                }
                let (tx, ty) = w.cell_of_point(vps[ti].position).expect("viewpoint inside world");
                dists[ty * w.width() + tx]
                    .map(|st| st.meters(w.scale_m()) <= MAX_TRIPLET_GEODESIC_M)
                    .unwrap_or(false)
            })
            .collect();
        cands.shuffle(rng);

        for ti in cands {
            let tgt_slot = rng.gen_range(0..VIEWS_PER_VIEWPOINT);
            let start = src.pose(src_slot);
            match shortest_path_follow(w, start, vps[ti].position)? {
                Some(path) => {
                    consumed.insert(si);
                    consumed.insert(ti);
                    triplets.push(TripletSpec {
                        source: ViewId::new(si, src_slot),
                        target: ViewId::new(ti, tgt_slot),
                        path,
                        no_target: false,
                    });
                    break;
                }
                None => follower_failures += 1,
            }
        }
    }
    Ok(TripletSampling { triplets, follower_failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;
    use crate::world::{generate_world, CellState, Palette, World, WorldGenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corridor(len_cells: usize, wide_cells: usize, scale: f32) -> World {
        let (tw, th) = (len_cells + 4, wide_cells + 4);
        let mut cells = vec![CellState::Wall; tw * th];
        for y in 2..2 + wide_cells {
            for x in 2..2 + len_cells {
                cells[y * tw + x] = CellState::Free;
            }
        }
        World::from_parts(tw, th, cells, scale, 2.5, 0, Palette::standard()).unwrap()
    }

    fn test_world(seed: u64) -> World {
        let cfg = WorldGenConfig {
            extent_min_m: 7.0,
            extent_max_m: 9.0,
            rooms_min: 2,
            rooms_max: 4,
            min_room_m: 2.5,
            door_width_m: 0.8,
            ..WorldGenConfig::default()
        };
        generate_world(&cfg, seed).unwrap()
    }

    #[test]
    fn angular_offset_known_values() {
        let deg = |d: f64| d * PI / 180.0;
        assert!((angular_offset(deg(350.0), deg(10.0)) - deg(20.0)).abs() < 1e-12);
        assert_eq!(angular_offset(1.234, 1.234), 0.0);
        assert_eq!(angular_offset(0.0, PI), PI);
        assert_eq!(angular_offset(0.0, -PI), PI); // half-turn tie goes counter-clockwise
        assert!((angular_offset(-2.0, 2.0) - (4.0 - 2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn angular_offset_stays_in_range_and_antisymmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let a = rng.gen_range(-30.0..30.0f64);
            let b = rng.gen_range(-30.0..30.0f64);
            let t = angular_offset(a, b);
            assert!(t > -PI && t <= PI, "offset {t} out of range");
            let back = angular_offset(b, a);
            if t.abs() < PI - 1e-9 {
                assert!((back + t).abs() < 1e-9, "not antisymmetric: {t} vs {back}");
            }
        }
    }

    #[test]
    fn offsets_of_random_heading_pairs_cover_the_circle_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut bins = [0usize; 8];
        let n = 10_000;
        for _ in 0..n {
            let h0 = wrap_angle(rng.gen_range(-PI..PI));
            let h1 = wrap_angle(rng.gen_range(-PI..PI));
            let t = angular_offset(h0, h1);
            let bin = (((t + PI) / (2.0 * PI) * 8.0) as usize).min(7);
            bins[bin] += 1;
        }
        // Each octant expects n/8 = 1250, sigma ~ 33; allow 5 sigma.
        for (i, &c) in bins.iter().enumerate() {
            assert!((c as f64 - 1250.0).abs() < 165.0, "bin {i}: {c}");
        }
    }

    #[test]
    fn viewpoint_target_count_follows_area_formula() {
        // 10 m^2 exactly: 2560 cells at scale 0.0625 (64 x 40).
        let w = corridor(64, 40, 0.0625);
        assert_eq!(viewpoint_target_count(&w), 40);
        // 200 m^2 exactly: 51200 cells (320 x 160) -> capped at 500.
        let big = corridor(320, 160, 0.0625);
        assert_eq!(viewpoint_target_count(&big), 500);
    }

    #[test]
    fn sampled_viewpoints_satisfy_all_constraints() {
        let w = test_world(31);
        let cam = CameraConfig { width: 16, height: 16, ..CameraConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vps = sample_viewpoints(&w, &cam, &mut rng).unwrap();
        assert!(!vps.is_empty());
        assert!(vps.len() <= viewpoint_target_count(&w));

        for vp in &vps {
            assert!(w.in_largest_component(vp.position));
            assert!(w.clearance_radius(vp.position).unwrap() >= MIN_CLEARANCE_M);
            assert_eq!(vp.views.len(), VIEWS_PER_VIEWPOINT);
            for v in &vp.views {
                assert!(v.heading > -PI && v.heading <= PI);
                assert!((0.5..=5.0).contains(&v.d_star));
                assert_eq!(v.image.width, 16);
            }
        }
        // Exhaustive pairwise geodesic check through the independent oracle.
        let pts: Vec<Point> = vps.iter().map(|v| v.position).collect();
        if let Some(min) = oracles::min_pairwise_geodesic_below(&w, &pts, MIN_SPACING_M) {
            assert!(min > MIN_SPACING_M, "closest pair at {min} m");
        }
    }

    #[test]
    fn viewpoint_sampling_is_deterministic() {
        let w = test_world(32);
        let cam = CameraConfig { width: 8, height: 8, ..CameraConfig::default() };
        let a = sample_viewpoints(&w, &cam, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_viewpoints(&w, &cam, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.position, y.position);
            for (u, v) in x.views.iter().zip(&y.views) {
                assert_eq!(u.heading, v.heading);
                assert_eq!(u.image, v.image);
                assert_eq!(u.d_star, v.d_star);
            }
        }
    }

    #[test]
    fn view_pairs_carry_wrapped_offsets() {
        let w = corridor(120, 120, 0.05);
        let cam = CameraConfig { width: 8, height: 8, ..CameraConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vp = capture_viewpoint(&w, &cam, 0, Point::new(3.0, 3.0), &mut rng).unwrap();
        for (v, h) in vp.views.iter_mut().zip([0.1, 1.1, -2.0, 2.0]) {
            v.heading = h;
        }
        let [p0, p1] = make_view_pairs(&vp);
        assert!((p0.theta_star - 1.0).abs() < 1e-12);
        assert!((p1.theta_star - (4.0 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(p0.a, ViewId::new(0, 0));
        assert_eq!(p1.b, ViewId::new(0, 3));
    }

    #[test]
    fn follower_stops_immediately_when_target_is_within_arrival_tolerance() {
        let w = corridor(120, 120, 0.05);
        let start = Pose::new(3.0, 3.0, 1.0);
        let target = Point::new(3.3, 3.1);
        let path = shortest_path_follow(&w, start, target).unwrap().unwrap();
        assert_eq!(path.action_count(), 0);
        assert_eq!(path.steps, vec![(start, Action::Stop)]);
    }

    #[test]
    fn straight_corridor_takes_exactly_thirty_forward_steps() {
        let w = corridor(160, 20, 0.05);
        let s = w.scale_m();
        let start = Pose::new(w.cell_center(10, 12).x, w.cell_center(10, 12).y, 0.0);
        let target = Point::new(start.pos.x + 3.0, start.pos.y);
        assert!(w.is_free_point(target), "target must sit in the corridor (scale {s})");
        let path = shortest_path_follow(&w, start, target).unwrap().unwrap();
        let forwards = path.steps.iter().filter(|(_, a)| *a == Action::Forward).count();
        let turns = path.action_count() - forwards;
        assert_eq!(forwards, 30);
        assert_eq!(turns, 0);
        assert_eq!(path.steps.last().unwrap().1, Action::Stop);
    }

    #[test]
    fn follower_reaches_random_targets_and_replays_exactly() {
        let w = test_world(33);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let free = w.largest_component_cells();
        let mut successes = 0;
        let mut considered = 0;
        while considered < 200 {
            let (ax, ay) = free[rng.gen_range(0..free.len())];
            let (bx, by) = free[rng.gen_range(0..free.len())];
            let start = Pose {
                pos: w.cell_center(ax, ay),
                heading: wrap_angle(rng.gen_range(-PI..PI)),
            };
            let target = w.cell_center(bx, by);
            // Stay in the operating envelope triplet sampling uses.
            let geo = w.geodesic_distance(start.pos, target).unwrap().unwrap();
            if geo > MAX_TRIPLET_GEODESIC_M {
                continue;
            }
            considered += 1;
            let Some(path) = shortest_path_follow(&w, start, target).unwrap() else {
                continue;
            };
            successes += 1;
            assert!(path.action_count() <= MAX_PATH_ACTIONS);
            assert_eq!(path.steps.last().unwrap().1, Action::Stop);

            // Final position within arrival tolerance, by the independent
            // uniform-cost oracle.
            let fp = path.final_pose().pos;
            let a = w.cell_of_point(fp).unwrap();
            let b = w.cell_of_point(target).unwrap();
            let d = oracles::geodesic_uniform_cost(&w, a, b).unwrap();
            assert!(d <= ARRIVAL_TOL_M + 1e-9, "ended {d} m from target");

            // Closed-loop replay: the recorded poses are exactly what the
            // actions produce.
            let mut pose = path.start;
            for &(expected, action) in &path.steps {
                let (next, collided) = action.apply(&w, pose).unwrap();
                assert!(!collided, "recorded path contains a colliding step");
                assert_eq!(next.pos.x.to_bits(), expected.pos.x.to_bits());
                assert_eq!(next.pos.y.to_bits(), expected.pos.y.to_bits());
                assert_eq!(next.heading.to_bits(), expected.heading.to_bits());
                pose = next;
            }
        }
        assert!(successes >= 180, "only {successes}/200 follower runs succeeded");
    }

    #[test]
    fn triplets_respect_uniqueness_and_radius() {
        let w = test_world(34);
        let cam = CameraConfig { width: 8, height: 8, ..CameraConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vps = sample_viewpoints(&w, &cam, &mut rng).unwrap();
        let sampling = sample_triplets(&w, &vps, &mut rng).unwrap();
        assert!(!sampling.triplets.is_empty());

        let mut seen: HashSet<ViewId> = HashSet::new();
        let mut seen_vps: HashSet<usize> = HashSet::new();
        for t in &sampling.triplets {
            assert!(seen.insert(t.source), "view {:?} consumed twice", t.source);
            assert!(seen.insert(t.target), "view {:?} consumed twice", t.target);
            // One view represents each viewpoint, so a viewpoint joins at
            // most one triplet end to end.
            assert!(seen_vps.insert(t.source.viewpoint()), "viewpoint consumed twice");
            assert!(seen_vps.insert(t.target.viewpoint()), "viewpoint consumed twice");
            let d = w
                .geodesic_distance(
                    vps[t.source.viewpoint()].position,
                    vps[t.target.viewpoint()].position,
                )
                .unwrap()
                .unwrap();
            assert!(d <= MAX_TRIPLET_GEODESIC_M + 1e-9);

            let fp = t.path.final_pose().pos;
            let d_end = w
                .geodesic_distance(fp, vps[t.target.viewpoint()].position)
                .unwrap()
                .unwrap();
            assert!(d_end <= ARRIVAL_TOL_M + 1e-9);
            assert_eq!(t.path.start.heading, vps[t.source.viewpoint()].views[t.source.slot()].heading);
        }
    }

    #[test]
    fn two_viewpoints_yield_at_most_one_triplet() {
        let w = corridor(160, 40, 0.05);
        let cam = CameraConfig { width: 8, height: 8, ..CameraConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = capture_viewpoint(&w, &cam, 0, Point::new(2.0, 1.2), &mut rng).unwrap();
        let b = capture_viewpoint(&w, &cam, 1, Point::new(5.0, 1.2), &mut rng).unwrap();
        let sampling = sample_triplets(&w, &[a, b], &mut rng).unwrap();
        assert_eq!(sampling.triplets.len(), 1);
    }

    #[test]
    fn distant_viewpoints_yield_no_triplets() {
        let w = corridor(200, 40, 0.05); // 10 m long
        let cam = CameraConfig { width: 8, height: 8, ..CameraConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = capture_viewpoint(&w, &cam, 0, Point::new(1.0, 1.2), &mut rng).unwrap();
        let b = capture_viewpoint(&w, &cam, 1, Point::new(9.5, 1.2), &mut rng).unwrap();
        let sampling = sample_triplets(&w, &[a, b], &mut rng).unwrap();
        assert!(sampling.triplets.is_empty());
    }

    #[test]
    fn path_lengths_concentrate_below_radius_with_small_overshoot_tail() {
        let w = test_world(35);
        let cam = CameraConfig { width: 8, height: 8, ..CameraConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vps = sample_viewpoints(&w, &cam, &mut rng).unwrap();
        let sampling = sample_triplets(&w, &vps, &mut rng).unwrap();
        assert!(sampling.triplets.len() >= 20, "{} triplets", sampling.triplets.len());
        let lengths: Vec<f64> = sampling.triplets.iter().map(|t| t.path.traveled_m()).collect();
        let over = lengths.iter().filter(|&&l| l > MAX_TRIPLET_GEODESIC_M).count();
        // Follower overshoot may push a few walks past the geodesic radius,
        // but only a small tail.
        assert!(
            over * 5 <= lengths.len(),
            "{over}/{} paths longer than {MAX_TRIPLET_GEODESIC_M} m",
            lengths.len()
        );
    }
}
