use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Part vocabulary shared by all composite shapes.
pub const PART_NAMES: [&str; 4] = ["body", "top", "base", "fin"];

const BODY: usize = 0;
const TOP: usize = 1;
const BASE: usize = 2;
const FIN: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    PlaneCross,
    /// Cylinder body with a cone on top.
    CylinderCone,
    /// Thin stick with a sphere on top.
    Lollipop,
    /// Cylinder, nose cone and three fins.
    Rocket,
    /// Slab on four legs.
    Table,
    /// Disc base, stem and conical shade.
    Lamp,
    /// Bar between two spheres; the spheres differ only by position.
    Dumbbell,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 12] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Cylinder,
        ShapeFamily::Torus,
        ShapeFamily::Cone,
        ShapeFamily::PlaneCross,
        ShapeFamily::CylinderCone,
        ShapeFamily::Lollipop,
        ShapeFamily::Rocket,
        ShapeFamily::Table,
        ShapeFamily::Lamp,
        ShapeFamily::Dumbbell,
    ];

    pub const COMPOSITES: [ShapeFamily; 6] = [
        ShapeFamily::CylinderCone,
        ShapeFamily::Lollipop,
        ShapeFamily::Rocket,
        ShapeFamily::Table,
        ShapeFamily::Lamp,
        ShapeFamily::Dumbbell,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Cylinder => "cylinder",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Cone => "cone",
            ShapeFamily::PlaneCross => "plane-cross",
            ShapeFamily::CylinderCone => "cylinder-cone",
            ShapeFamily::Lollipop => "lollipop",
            ShapeFamily::Rocket => "rocket",
            ShapeFamily::Table => "table",
            ShapeFamily::Lamp => "lamp",
            ShapeFamily::Dumbbell => "dumbbell",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name).ok_or_else(|| {
            let known: Vec<_> = Self::ALL.iter().map(|f| f.name()).collect();
            Error::Config(format!("unknown shape family `{name}`; known: {}", known.join(", ")))
        })
    }

    pub fn is_composite(self) -> bool {
        Self::COMPOSITES.contains(&self)
    }
}

/// One synthetic cloud request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: ShapeFamily,
    pub points: usize,
    /// Gaussian noise added to every coordinate.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 8 {
            return Err(Error::Config(format!("points per cloud must be at least 8, got {}", self.points)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Analytic surfaces; cylinders and cones have their axis along z.
#[derive(Clone, Copy, Debug)]
enum Surface {
    Sphere { c: Point, r: f64 },
    Box { c: Point, half: [f64; 3] },
    Cylinder { c: Point, r: f64, h: f64 },
    /// `c` is the center of the base disc; the apex sits at `c + h·z`.
    Cone { c: Point, r: f64, h: f64 },
    Torus { big: f64, small: f64 },
    /// Square of half-width `half` through `c`, normal along `axis`.
    Square { c: Point, axis: usize, half: f64 },
}

fn uniform_disc(rng: &mut ChaCha8Rng, r: f64) -> (f64, f64) {
    let rho = r * rng.gen::<f64>().sqrt();
    let t = rng.gen_range(0.0..2.0 * PI);
    (rho * t.cos(), rho * t.sin())
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Point {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let t = rng.gen_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    [s * t.cos(), s * t.sin(), z]
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Sphere { r, .. } => 4.0 * PI * r * r,
            Surface::Box { half: [a, b, c], .. } => 8.0 * (a * b + b * c + a * c),
            Surface::Cylinder { r, h, .. } => 2.0 * PI * r * h + 2.0 * PI * r * r,
            Surface::Cone { r, h, .. } => PI * r * (r * r + h * h).sqrt() + PI * r * r,
            Surface::Torus { big, small } => 4.0 * PI * PI * big * small,
            Surface::Square { half, .. } => 4.0 * half * half,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match *self {
            Surface::Sphere { c, r } => {
                let u = unit_vector(rng);
                [c[0] + r * u[0], c[1] + r * u[1], c[2] + r * u[2]]
            }
            Surface::Box { c, half } => {
                let faces = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.gen_range(0.0..total);
                let mut axis = 2;
                for (i, &a) in faces.iter().enumerate() {
                    if pick < a {
                        axis = i;
                        break;
                    }
                    pick -= a;
                }
                let mut p = [0.0; 3];
                for (d, v) in p.iter_mut().enumerate() {
                    *v = if d == axis {
                        if rng.gen::<bool>() {
                            half[d]
                        } else {
                            -half[d]
                        }
                    } else {
                        rng.gen_range(-half[d]..half[d])
                    };
                }
                [c[0] + p[0], c[1] + p[1], c[2] + p[2]]
            }
            Surface::Cylinder { c, r, h } => {
                let side = 2.0 * PI * r * h;
                if rng.gen_range(0.0..side + 2.0 * PI * r * r) < side {
                    let t = rng.gen_range(0.0..2.0 * PI);
                    [c[0] + r * t.cos(), c[1] + r * t.sin(), c[2] + rng.gen_range(-h / 2.0..h / 2.0)]
                } else {
                    let (x, y) = uniform_disc(rng, r);
                    let z = if rng.gen::<bool>() { h / 2.0 } else { -h / 2.0 };
                    [c[0] + x, c[1] + y, c[2] + z]
                }
            }
            Surface::Cone { c, r, h } => {
                let side = PI * r * (r * r + h * h).sqrt();
                if rng.gen_range(0.0..side + PI * r * r) < side {
                    // lateral area density grows linearly with the radius
                    let s = rng.gen::<f64>().sqrt();
                    let t = rng.gen_range(0.0..2.0 * PI);
                    [c[0] + s * r * t.cos(), c[1] + s * r * t.sin(), c[2] + (1.0 - s) * h]
                } else {
                    let (x, y) = uniform_disc(rng, r);
                    [c[0] + x, c[1] + y, c[2]]
                }
            }
            Surface::Torus { big, small } => loop {
                let u = rng.gen_range(0.0..2.0 * PI);
                let v = rng.gen_range(0.0..2.0 * PI);
                let ring = big + small * v.cos();
                if rng.gen_range(0.0..big + small) <= ring {
                    break [ring * u.cos(), ring * u.sin(), small * v.sin()];
                }
            },
            Surface::Square { c, axis, half } => {
                let mut p = c;
                for (d, v) in p.iter_mut().enumerate() {
                    if d != axis {
                        *v += rng.gen_range(-half..half);
                    }
                }
                p
            }
        }
    }
}

/// Unit sphere from antipodal pairs (plus one equilateral triple when the
/// count is odd), so the centroid is the origin.
fn antipodal_sphere(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    if n % 2 == 1 {
        let a = unit_vector(rng);
        let helper = if a[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let b = normalize(cross(a, helper));
        let c = cross(a, b);
        let (s, co) = (3f64.sqrt() / 2.0, -0.5);
        pts.push(a);
        pts.push([co * a[0] + s * c[0], co * a[1] + s * c[1], co * a[2] + s * c[2]]);
        pts.push([co * a[0] - s * c[0], co * a[1] - s * c[1], co * a[2] - s * c[2]]);
    }
    while pts.len() < n {
        let u = unit_vector(rng);
        pts.push(u);
        pts.push([-u[0], -u[1], -u[2]]);
    }
    pts
}

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Point) -> Point {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Components of one randomly proportioned instance with their part labels.
fn components(family: ShapeFamily, rng: &mut ChaCha8Rng) -> Vec<(Surface, usize)> {
    let o = [0.0; 3];
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    match family {
        ShapeFamily::Sphere => vec![(Surface::Sphere { c: o, r: 1.0 }, BODY)],
        ShapeFamily::Cube => {
            let s = u(0.8, 1.0);
            vec![(Surface::Box { c: o, half: [s, s * u(0.85, 1.15), s * u(0.85, 1.15)] }, BODY)]
        }
        ShapeFamily::Cylinder => vec![(Surface::Cylinder { c: o, r: u(0.35, 0.6), h: u(1.4, 2.2) }, BODY)],
        ShapeFamily::Torus => vec![(Surface::Torus { big: 1.0, small: u(0.2, 0.4) }, BODY)],
        ShapeFamily::Cone => vec![(Surface::Cone { c: o, r: u(0.6, 1.0), h: u(1.2, 2.0) }, BODY)],
        ShapeFamily::PlaneCross => {
            let half = u(0.8, 1.0);
            vec![
                (Surface::Square { c: o, axis: 0, half }, BODY),
                (Surface::Square { c: o, axis: 1, half: half * u(0.7, 1.0) }, BODY),
            ]
        }
        ShapeFamily::CylinderCone => {
            let (r, h) = (u(0.35, 0.5), u(1.2, 1.8));
            vec![
                (Surface::Cylinder { c: o, r, h }, BODY),
                (Surface::Cone { c: [0.0, 0.0, h / 2.0], r: r * u(1.0, 1.4), h: u(0.6, 1.0) }, TOP),
            ]
        }
        ShapeFamily::Lollipop => {
            let h = u(1.4, 2.0);
            vec![
                (Surface::Cylinder { c: o, r: u(0.06, 0.1), h }, BODY),
                (Surface::Sphere { c: [0.0, 0.0, h / 2.0 + 0.35], r: u(0.35, 0.5) }, TOP),
            ]
        }
        ShapeFamily::Rocket => {
            let (r, h) = (u(0.25, 0.35), u(1.6, 2.2));
            let fin = u(0.25, 0.4);
            let mut parts = vec![
                (Surface::Cylinder { c: o, r, h }, BODY),
                (Surface::Cone { c: [0.0, 0.0, h / 2.0], r, h: u(0.5, 0.8) }, TOP),
            ];
            for k in 0..3 {
                let t = 2.0 * PI * k as f64 / 3.0;
                let d = r + fin / 2.0;
                let (sx, sy) = (fin / 2.0 * t.cos().abs() + 0.02, fin / 2.0 * t.sin().abs() + 0.02);
                parts.push((
                    Surface::Box { c: [d * t.cos(), d * t.sin(), -h / 2.0 + 0.25], half: [sx, sy, 0.25] },
                    FIN,
                ));
            }
            parts
        }
        ShapeFamily::Table => {
            let (w, d, leg) = (u(0.9, 1.2), u(0.6, 0.9), u(0.8, 1.2));
            let mut parts = vec![(Surface::Box { c: [0.0, 0.0, leg / 2.0], half: [w, d, 0.06] }, TOP)];
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                parts.push((
                    Surface::Cylinder { c: [sx * (w - 0.1), sy * (d - 0.1), 0.0], r: 0.06, h: leg },
                    BODY,
                ));
            }
            parts
        }
        ShapeFamily::Lamp => {
            let h = u(1.2, 1.8);
            vec![
                (Surface::Cylinder { c: [0.0, 0.0, -h / 2.0], r: u(0.5, 0.7), h: 0.08 }, BASE),
                (Surface::Cylinder { c: o, r: 0.05, h }, BODY),
                (Surface::Cone { c: [0.0, 0.0, h / 2.0 - 0.2], r: u(0.5, 0.7), h: u(0.5, 0.7) }, TOP),
            ]
        }
        ShapeFamily::Dumbbell => {
            let (h, r) = (u(1.2, 1.8), u(0.3, 0.45));
            vec![
                (Surface::Cylinder { c: o, r: 0.08, h }, BODY),
                (Surface::Sphere { c: [0.0, 0.0, h / 2.0 + r * 0.8], r }, TOP),
                (Surface::Sphere { c: [0.0, 0.0, -h / 2.0 - r * 0.8], r }, BASE),
            ]
        }
    }
}

/// Centers at the centroid and scales the farthest point to unit norm.
fn normalize_cloud(pts: &mut [Point]) {
    let n = pts.len() as f64;
    let mut c = [0.0; 3];
    for p in pts.iter() {
        for d in 0..3 {
            c[d] += p[d] / n;
        }
    }
    let mut r: f64 = 0.0;
    for p in pts.iter_mut() {
        for d in 0..3 {
            p[d] -= c[d];
        }
        r = r.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if r > 0.0 {
        for p in pts.iter_mut() {
            for v in p.iter_mut() {
                *v /= r;
            }
        }
    }
}

/// One instance of `family` with `points` points. Features are the
/// coordinates; composites carry part labels.
pub fn sample_shape(family: ShapeFamily, points: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let (mut coords, parts) = if family == ShapeFamily::Sphere {
        (antipodal_sphere(points, rng), vec![BODY; points])
    } else {
        let comps = components(family, rng);
        let areas: Vec<f64> = comps.iter().map(|(s, _)| s.area()).collect();
        let total: f64 = areas.iter().sum();
        let mut coords = Vec::with_capacity(points);
        let mut parts = Vec::with_capacity(points);
        // every component gets at least one point so composites show all parts
        for (s, part) in &comps {
            coords.push(s.sample(rng));
            parts.push(*part);
        }
        while coords.len() < points {
            let mut pick = rng.gen_range(0.0..total);
            let mut j = comps.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    j = i;
                    break;
                }
                pick -= a;
            }
            coords.push(comps[j].0.sample(rng));
            parts.push(comps[j].1);
        }
        coords.truncate(points);
        parts.truncate(points);
        (coords, parts)
    };
    normalize_cloud(&mut coords);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
        for p in coords.iter_mut() {
            for v in p.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }
    let labels = family.is_composite().then_some(parts);
    PointCloud::from_coords(coords, labels)
}

/// `count` instances generated sequentially from `spec.seed`.
pub fn gen_shapes(spec: &SyntheticSpec, count: usize) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    let mut rng = super::stream_rng(spec.seed, &[]);
    (0..count)
        .map(|_| sample_shape(spec.family, spec.points, spec.noise, &mut rng))
        .collect()
}
