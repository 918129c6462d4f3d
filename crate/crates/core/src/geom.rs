//! Planar geometry primitives shared by the simulation modules.
//!
//! Conventions: world coordinates are metric, x grows east and y grows
//! north. A heading is the angle in radians from the +x axis, measured
//! counter-clockwise, kept in the half-open interval (-pi, pi].

/// A point in world coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Agent position plus heading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub pos: Point,
    /// Radians in (-pi, pi], counter-clockwise from +x.
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { pos: Point::new(x, y), heading: wrap_angle(heading) }
    }

    /// Unit forward vector for the current heading.
    pub fn forward(self) -> (f64, f64) {
        (self.heading.cos(), self.heading.sin())
    }
}

/// Wrap an angle to (-pi, pi]. Inputs that land exactly on -pi (an
/// ambiguous half-turn) come back as +pi so the interval stays half-open.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid yields [-pi, pi); fold the closed end onto +pi.
    if r <= -PI {
        PI
    } else {
        r
    }
}
