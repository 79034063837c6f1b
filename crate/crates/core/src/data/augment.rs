use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RotationAxis {
    Z,
    /// Uniformly random axis.
    Any,
}

/// Augmentations applied in order: rotate, scale, shift, jitter, color drop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_axis: RotationAxis,
    /// Angles are uniform in `[-max, max]` radians.
    pub max_angle: f64,
    pub scale: [f64; 2],
    /// Per-axis shift, uniform in `[-shift, shift]`.
    pub shift: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub color_drop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::identity()
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_axis: RotationAxis::Z,
            max_angle: 0.0,
            scale: [1.0, 1.0],
            shift: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            color_drop: 0.0,
        }
    }

    /// Full z rotation, scale in [0.8, 1.2], small shift and jitter.
    pub fn standard() -> Self {
        AugmentConfig {
            rotation_axis: RotationAxis::Z,
            max_angle: std::f64::consts::PI,
            scale: [0.8, 1.2],
            shift: 0.1,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            color_drop: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.scale;
        let bad = |m: String| Err(Error::Config(m));
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!("scale range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        if !(0.0..=1.0).contains(&self.color_drop) {
            return bad(format!("color_drop must be a probability, got {}", self.color_drop));
        }
        for (name, v) in [
            ("max_angle", self.max_angle),
            ("shift", self.shift),
            ("jitter_sigma", self.jitter_sigma),
            ("jitter_clip", self.jitter_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Rotation matrix about a unit `axis` by `angle` radians (Rodrigues).
pub fn rotation_matrix(axis: Point, angle: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    let [x, y, z] = axis;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Applies `f` to every coordinate and copies the result into the first
/// three feature channels, which hold positions.
fn map_positions(cloud: &mut PointCloud, mut f: impl FnMut(Point) -> Point) {
    let c = cloud.channels;
    for (i, p) in cloud.coords.iter_mut().enumerate() {
        *p = f(*p);
        if c >= 3 {
            cloud.feats[i * c..i * c + 3].copy_from_slice(p);
        }
    }
}

pub fn rotate(cloud: &PointCloud, axis: Point, angle: f64) -> PointCloud {
    let r = rotation_matrix(axis, angle);
    let mut out = cloud.clone();
    map_positions(&mut out, |p| {
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2])
    });
    out
}

/// Random augmentation. Feature channels 0..3 are positions and follow the
/// coordinates; channels from 3 on are colors and may be dropped.
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<PointCloud> {
    cfg.validate()?;
    let axis = match cfg.rotation_axis {
        RotationAxis::Z => [0.0, 0.0, 1.0],
        RotationAxis::Any => UnitSphere.sample(rng),
    };
    let angle = if cfg.max_angle > 0.0 {
        rng.gen_range(-cfg.max_angle..=cfg.max_angle)
    } else {
        0.0
    };
    let mut out = if angle != 0.0 { rotate(cloud, axis, angle) } else { cloud.clone() };

    let [lo, hi] = cfg.scale;
    let s = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    if s != 1.0 {
        map_positions(&mut out, |p| p.map(|v| v * s));
    }

    if cfg.shift > 0.0 {
        let t: Point = [0; 3].map(|_| rng.gen_range(-cfg.shift..=cfg.shift));
        map_positions(&mut out, |p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]]);
    }

    if cfg.jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.jitter_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let clip = if cfg.jitter_clip > 0.0 { cfg.jitter_clip } else { f64::INFINITY };
        map_positions(&mut out, |p| p.map(|v| v + normal.sample(rng).clamp(-clip, clip)));
    }

    if cfg.color_drop > 0.0 && out.channels > 3 && rng.gen_bool(cfg.color_drop) {
        let c = out.channels;
        for row in out.feats.chunks_mut(c) {
            row[3..].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(out)
}
