//! Analytic shapes in their local frame: ray intersection, surface normals,
//! inside tests and distance-like implicit functions.

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

const EPS_T: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned box centred at the origin.
    Box { half_extents: [f64; 3] },
    /// Axis along local `z`, centred at the origin.
    Cylinder { radius: f64, height: f64 },
    /// Segment along local `z` of the given length, centred at the origin.
    Capsule { radius: f64, length: f64 },
    /// `(|x/a|^(2/e2) + |y/b|^(2/e2))^(e2/e1) + |z/c|^(2/e1) = 1`
    Superellipsoid { semi_axes: [f64; 3], e1: f64, e2: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct LocalHit {
    pub t: f64,
    /// Outward unit normal in the local frame.
    pub normal: Vec3,
}

impl Shape {
    pub fn validate(&self) -> Result<(), String> {
        let positive = |v: f64, what: &str| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(format!("{what} must be positive, got {v}")) };
        match *self {
            Shape::Box { half_extents } => half_extents.iter().try_for_each(|&h| positive(h, "box half extent")),
            Shape::Cylinder { radius, height } => positive(radius, "cylinder radius").and(positive(height, "cylinder height")),
            Shape::Capsule { radius, length } => positive(radius, "capsule radius").and(positive(length, "capsule length")),
            Shape::Superellipsoid { semi_axes, e1, e2 } => {
                semi_axes.iter().try_for_each(|&a| positive(a, "semi-axis"))?;
                for e in [e1, e2] {
                    if !(e > 0.0 && e <= 2.0) {
                        return Err(format!("superellipsoid exponent {e} outside (0, 2]"));
                    }
                }
                Ok(())
            }
        }
    }

    /// Half extents of the local axis-aligned bounding box.
    pub fn local_half_extents(&self) -> Vec3 {
        match *self {
            Shape::Box { half_extents } => Vec3::from(half_extents),
            Shape::Cylinder { radius, height } => Vec3::new(radius, radius, height / 2.0),
            Shape::Capsule { radius, length } => Vec3::new(radius, radius, length / 2.0 + radius),
            Shape::Superellipsoid { semi_axes, .. } => Vec3::from(semi_axes),
        }
    }

    /// Nearest intersection with `t > 0` of the ray `o + t d`.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<LocalHit> {
        match *self {
            Shape::Box { half_extents } => intersect_box(o, d, &Vec3::from(half_extents)),
            Shape::Cylinder { radius, height } => intersect_cylinder(o, d, radius, height / 2.0),
            Shape::Capsule { radius, length } => intersect_capsule(o, d, radius, length / 2.0),
            Shape::Superellipsoid { semi_axes, e1, e2 } => {
                Superellipsoid::new(semi_axes, e1, e2).intersect(o, d)
            }
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.implicit(p) < 0.0
    }

    /// Signed implicit function, negative inside and 1-Lipschitz. Exact
    /// signed distance for box, cylinder and capsule; a scaled gauge function
    /// for superellipsoids (see [`Superellipsoid::gauge_distance`]).
    pub fn implicit(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Box { half_extents } => {
                let q = p.abs() - Vec3::from(half_extents);
                let outside = q.sup(&Vec3::zeros()).norm();
                outside + q.max().min(0.0)
            }
            Shape::Cylinder { radius, height } => {
                let dr = p.xy().norm() - radius;
                let dz = p.z.abs() - height / 2.0;
                let outside = (dr.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dr.max(dz).min(0.0)
            }
            Shape::Capsule { radius, length } => {
                let h = length / 2.0;
                let c = Vec3::new(0.0, 0.0, p.z.clamp(-h, h));
                (p - c).norm() - radius
            }
            Shape::Superellipsoid { semi_axes, e1, e2 } => Superellipsoid::new(semi_axes, e1, e2).gauge_distance(p),
        }
    }

    /// Closed-form surface area, when one exists.
    pub fn analytic_area(&self) -> Option<f64> {
        use std::f64::consts::PI;
        match *self {
            Shape::Box { half_extents: [a, b, c] } => Some(8.0 * (a * b + b * c + c * a)),
            Shape::Cylinder { radius, height } => Some(2.0 * PI * radius * (height + radius)),
            Shape::Capsule { radius, length } => Some(4.0 * PI * radius * radius + 2.0 * PI * radius * length),
            Shape::Superellipsoid { semi_axes: [a, b, c], e1, e2 } if e1 == 1.0 && e2 == 1.0 && a == b && b == c => {
                Some(4.0 * PI * a * a)
            }
            Shape::Superellipsoid { .. } => None,
        }
    }

    /// Closed-form volume, when one exists.
    pub fn analytic_volume(&self) -> Option<f64> {
        use std::f64::consts::PI;
        match *self {
            Shape::Box { half_extents: [a, b, c] } => Some(8.0 * a * b * c),
            Shape::Cylinder { radius, height } => Some(PI * radius * radius * height),
            Shape::Capsule { radius, length } => Some(4.0 / 3.0 * PI * radius.powi(3) + PI * radius * radius * length),
            Shape::Superellipsoid { semi_axes: [a, b, c], e1, e2 } if e1 == 1.0 && e2 == 1.0 => Some(4.0 / 3.0 * PI * a * b * c),
            Shape::Superellipsoid { .. } => None,
        }
    }
}

/// Slab test; returns `(t_enter, t_exit, entry axis)`.
fn slab(o: &Vec3, d: &Vec3, h: &Vec3) -> Option<(f64, f64, usize)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for k in 0..3 {
        if d[k].abs() < 1e-300 {
            if o[k].abs() > h[k] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut a, mut b) = ((-h[k] - o[k]) * inv, (h[k] - o[k]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a > t0 {
            t0 = a;
            axis = k;
        }
        t1 = t1.min(b);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1, axis))
}

fn intersect_box(o: &Vec3, d: &Vec3, h: &Vec3) -> Option<LocalHit> {
    let (t0, _t1, axis) = slab(o, d, h)?;
    if t0 <= EPS_T {
        return None;
    }
    let mut normal = Vec3::zeros();
    normal[axis] = -d[axis].signum();
    Some(LocalHit { t: t0, normal })
}

/// Entry into the infinite cylinder `x² + y² = r²`.
fn infinite_cylinder_entry(o: &Vec3, d: &Vec3, r: f64) -> Option<f64> {
    let a = d.x * d.x + d.y * d.y;
    if a < 1e-300 {
        return None;
    }
    let b = o.x * d.x + o.y * d.y;
    let c = o.x * o.x + o.y * o.y - r * r;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (t > EPS_T).then_some(t)
}

fn sphere_entry(o: &Vec3, d: &Vec3, center: &Vec3, r: f64) -> Option<f64> {
    let oc = o - center;
    let a = d.norm_squared();
    let b = oc.dot(d);
    let c = oc.norm_squared() - r * r;
    let disc = b * b - a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (t > EPS_T).then_some(t)
}

fn intersect_cylinder(o: &Vec3, d: &Vec3, r: f64, hz: f64) -> Option<LocalHit> {
    let mut best: Option<LocalHit> = None;
    let mut consider = |t: f64, normal: Vec3| {
        if best.is_none_or(|b| t < b.t) {
            best = Some(LocalHit { t, normal });
        }
    };
    if let Some(t) = infinite_cylinder_entry(o, d, r) {
        let p = o + d * t;
        if p.z.abs() <= hz {
            consider(t, Vec3::new(p.x, p.y, 0.0) / r);
        }
    }
    if d.z.abs() > 1e-300 {
        for zc in [-hz, hz] {
            let t = (zc - o.z) / d.z;
            if t > EPS_T {
                let p = o + d * t;
                if p.x * p.x + p.y * p.y <= r * r {
                    consider(t, Vec3::new(0.0, 0.0, zc.signum()));
                }
            }
        }
    }
    best
}

fn intersect_capsule(o: &Vec3, d: &Vec3, r: f64, hz: f64) -> Option<LocalHit> {
    let mut best: Option<LocalHit> = None;
    let mut consider = |t: f64, normal: Vec3| {
        if best.is_none_or(|b| t < b.t) {
            best = Some(LocalHit { t, normal });
        }
    };
    if let Some(t) = infinite_cylinder_entry(o, d, r) {
        let p = o + d * t;
        if p.z.abs() <= hz {
            consider(t, Vec3::new(p.x, p.y, 0.0) / r);
        }
    }
    for zc in [-hz, hz] {
        let c = Vec3::new(0.0, 0.0, zc);
        if let Some(t) = sphere_entry(o, d, &c, r) {
            let p = o + d * t;
            consider(t, (p - c) / r);
        }
    }
    best
}

/// Superellipsoid with precomputed exponents.
#[derive(Debug, Clone, Copy)]
pub struct Superellipsoid {
    axes: Vec3,
    e1: f64,
    /// 2 / e2
    pxy: f64,
    /// e2 / e1
    pouter: f64,
    /// 2 / e1
    pz: f64,
}

impl Superellipsoid {
    pub fn new(semi_axes: [f64; 3], e1: f64, e2: f64) -> Self {
        Superellipsoid {
            axes: Vec3::from(semi_axes),
            e1,
            pxy: 2.0 / e2,
            pouter: e2 / e1,
            pz: 2.0 / e1,
        }
    }

    /// Inside-outside function; `< 1` inside.
    pub fn f(&self, p: &Vec3) -> f64 {
        let x = (p.x / self.axes.x).abs().powf(self.pxy);
        let y = (p.y / self.axes.y).abs().powf(self.pxy);
        let z = (p.z / self.axes.z).abs().powf(self.pz);
        (x + y).powf(self.pouter) + z
    }

    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        let ax = (p.x / self.axes.x).abs();
        let ay = (p.y / self.axes.y).abs();
        let az = (p.z / self.axes.z).abs();
        let s = ax.powf(self.pxy) + ay.powf(self.pxy);
        let outer = if s > 0.0 { self.pouter * s.powf(self.pouter - 1.0) } else { 0.0 };
        let gx = outer * self.pxy * ax.powf(self.pxy - 1.0) * p.x.signum() / self.axes.x;
        let gy = outer * self.pxy * ay.powf(self.pxy - 1.0) * p.y.signum() / self.axes.y;
        let gz = self.pz * az.powf(self.pz - 1.0) * p.z.signum() / self.axes.z;
        Vec3::new(gx, gy, gz)
    }

    /// `N(p) = F(p)^(e1/2)` is positively homogeneous of degree one and
    /// convex, with the solid as its unit ball.
    pub fn gauge(&self, p: &Vec3) -> f64 {
        self.f(p).powf(self.e1 / 2.0)
    }

    /// Radius of a ball about the centre contained in the solid. Exponents at
    /// most 1 give a solid containing the inscribed ellipsoid; otherwise the
    /// octahedron `|x/a| + |y/b| + |z/c| ≤ 1` is contained.
    pub fn inradius(&self) -> f64 {
        let e2 = 2.0 / self.pxy;
        if self.e1 <= 1.0 && e2 <= 1.0 {
            self.axes.min()
        } else {
            1.0 / self.axes.map(|a| 1.0 / (a * a)).sum().sqrt()
        }
    }

    /// `r_in (N(p) − 1)`: same zero set and sign as `F − 1`, and 1-Lipschitz
    /// because `N(x) − N(y) ≤ N(x − y) ≤ |x − y| / r_in`.
    pub fn gauge_distance(&self, p: &Vec3) -> f64 {
        self.inradius() * (self.gauge(p) - 1.0)
    }

    /// The function `F` restricted to a line is quasi-convex (sublevel sets
    /// are convex for exponents in (0, 2]), so a golden-section search finds
    /// an interior point if one exists, and bisection then locates the entry.
    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<LocalHit> {
        let (t0, t1, _) = slab(o, d, &self.axes)?;
        let t0 = t0.max(EPS_T);
        if t1 <= t0 {
            return None;
        }
        let g = |t: f64| self.f(&(o + d * t));
        let tol = 1e-7 / d.norm();
        let inside_t = if g(t0) < 1.0 {
            Some(t0)
        } else {
            const INV_PHI: f64 = 0.618_033_988_749_894_9;
            let (mut a, mut b) = (t0, t1);
            let mut c = b - INV_PHI * (b - a);
            let mut e = a + INV_PHI * (b - a);
            let (mut fc, mut fe) = (g(c), g(e));
            let mut found = None;
            while b - a > tol {
                if fc < 1.0 {
                    found = Some(c);
                    break;
                }
                if fe < 1.0 {
                    found = Some(e);
                    break;
                }
                if fc < fe {
                    b = e;
                    e = c;
                    fe = fc;
                    c = b - INV_PHI * (b - a);
                    fc = g(c);
                } else {
                    a = c;
                    c = e;
                    fc = fe;
                    e = a + INV_PHI * (b - a);
                    fe = g(e);
                }
            }
            found
        }?;
        let (mut lo, mut hi) = (t0, inside_t);
        if g(lo) < 1.0 {
            // ray starts inside the bounding slab already inside the shape
            hi = lo;
        } else {
            while hi - lo > tol * 0.01 {
                let mid = 0.5 * (lo + hi);
                if g(mid) < 1.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
        }
        let p = o + d * hi;
        let grad = self.gradient(&p);
        let normal = if grad.norm() > 0.0 { grad.normalize() } else { -d.normalize() };
        Some(LocalHit { t: hi, normal })
    }
}
