//! Procedural moving-shape scenes.
//!
//! Every surface (the background and each object) carries its own texture,
//! defined in surface coordinates so it moves rigidly with the surface. A
//! texture is smooth value noise plus a per-texel grain. The background
//! translates by a fixed velocity per frame (camera ego-motion); objects move
//! with their own constant velocities and are drawn in index order, later
//! objects on top. Decoys are static, unlabelled shapes drawn beneath the
//! objects.
//!
//! In camouflage mode every surface draws its base color from one shared
//! distribution, so a single frame has the same color statistics inside and
//! outside the objects. A decoy looks exactly like an object of its class;
//! only motion between frames tells them apart.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::rng::{mix64, Rng};
use crate::tensor::{Shape4, Tensor};

use super::pnm::{dequantize, quantize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Background plus up to three shape classes (circle, square, triangle).
    pub num_classes: usize,
    /// Inclusive range for the number of objects in a sequence.
    pub objects: (usize, usize),
    /// Inclusive range for the number of decoys: static, unlabelled shapes
    /// drawn beneath the objects.
    pub decoys: (usize, usize),
    /// Circumradius range in pixels; every shape fits inside its circle.
    pub radius: (f64, f64),
    /// Object speed range, pixels per frame.
    pub speed: (f64, f64),
    /// Background translation per frame as `(dy, dx)`.
    pub background_velocity: (f64, f64),
    pub camouflage: bool,
    /// Which surfaces get a fresh texture every frame instead of carrying
    /// one texture along.
    pub texture_refresh: TextureRefresh,
    /// Standard deviation of per-pixel Gaussian sensor noise.
    pub noise_std: f64,
    pub sequence_length: usize,
    /// Lattice spacing of the smooth texture component, pixels.
    pub texture_cell: f64,
    /// Peak-to-peak amplitude of the smooth texture component.
    pub texture_contrast: f64,
    /// Peak-to-peak amplitude of the one-texel grain component.
    pub grain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureRefresh {
    Never,
    /// Moving objects only.
    Objects,
    /// Background, decoys and objects.
    All,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 96,
            num_classes: 4,
            objects: (1, 3),
            decoys: (0, 0),
            radius: (9.0, 14.0),
            speed: (2.0, 3.5),
            background_velocity: (0.0, 1.0),
            camouflage: false,
            texture_refresh: TextureRefresh::Never,
            noise_std: 0.02,
            sequence_length: 10,
            texture_cell: 6.0,
            texture_contrast: 0.5,
            grain: 0.3,
        }
    }
}

impl SceneConfig {
    /// Flat, randomly colored surfaces over a static background, with decoys
    /// outnumbering the moving objects.
    pub fn camouflage() -> Self {
        Self {
            camouflage: true,
            decoys: (3, 5),
            radius: (11.0, 15.0),
            speed: (4.0, 6.0),
            background_velocity: (0.0, 0.0),
            sequence_length: 5,
            texture_contrast: 0.0,
            grain: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v == 0 || v % 32 != 0 {
                return Err(Error::param(format!("{name} {v} must be a positive multiple of 32")));
            }
        }
        if !(2..=SHAPES.len() + 1).contains(&self.num_classes) {
            return Err(Error::param(format!(
                "num_classes {} must be in 2..={} (background plus shape classes)",
                self.num_classes,
                SHAPES.len() + 1
            )));
        }
        if self.objects.0 > self.objects.1 || self.objects.1 == 0 {
            return Err(Error::param(format!("objects range {:?} is empty", self.objects)));
        }
        if self.decoys.0 > self.decoys.1 {
            return Err(Error::param(format!("decoys range {:?} is empty", self.decoys)));
        }
        let finite_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !finite_range(self.radius) || self.radius.0 <= 0.0 {
            return Err(Error::param(format!("radius range {:?} is invalid", self.radius)));
        }
        if !finite_range(self.speed) || self.speed.0 < 0.0 {
            return Err(Error::param(format!("speed range {:?} is invalid", self.speed)));
        }
        if self.sequence_length == 0 {
            return Err(Error::param("sequence_length must be positive"));
        }
        let checks = [
            ("noise_std", self.noise_std, true),
            ("texture_cell", self.texture_cell, false),
            ("texture_contrast", self.texture_contrast, true),
            ("grain", self.grain, true),
            ("background_velocity.0", self.background_velocity.0, true),
            ("background_velocity.1", self.background_velocity.1, true),
        ];
        for (name, v, zero_ok) in checks {
            let ok = v.is_finite() && (name.starts_with("background") || v > 0.0 || (zero_ok && v == 0.0));
            if !ok {
                return Err(Error::param(format!("{name} = {v} is invalid")));
            }
        }
        let side = self.height.min(self.width) as f64;
        if 2.0 * self.radius.1 > side {
            return Err(Error::param(format!(
                "objects of radius {} do not fit in a {}x{} frame",
                self.radius.1, self.height, self.width
            )));
        }
        let travel = self.speed.1 * (self.sequence_length - 1) as f64;
        if 2.0 * self.radius.1 + travel > side {
            return Err(Error::param(format!(
                "radius {} with speed {} over {} frames cannot stay inside a {}x{} frame",
                self.radius.1, self.speed.1, self.sequence_length, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

/// Shape of each foreground class; class `c` draws `SHAPES[c - 1]`.
pub const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

const SQRT3: f64 = 1.732_050_807_568_877_2;

impl Shape {
    /// Whether the offset `(dx, dy)` from the center lies inside a shape of
    /// circumradius `r`. The square is axis-aligned; the equilateral
    /// triangle points up (negative `y`).
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => {
                let half = r * std::f64::consts::FRAC_1_SQRT_2;
                dx.abs() <= half && dy.abs() <= half
            }
            // Bottom edge at y = r/2, slanted edges through the apex (0, -r).
            Shape::Triangle => dy <= r / 2.0 && SQRT3 * dx.abs() - dy <= r,
        }
    }

    pub fn area(self, r: f64) -> f64 {
        match self {
            Shape::Circle => std::f64::consts::PI * r * r,
            Shape::Square => 2.0 * r * r,
            Shape::Triangle => 3.0 * SQRT3 / 4.0 * r * r,
        }
    }

    pub fn perimeter(self, r: f64) -> f64 {
        match self {
            Shape::Circle => 2.0 * std::f64::consts::PI * r,
            Shape::Square => 4.0 * std::f64::consts::SQRT_2 * r,
            Shape::Triangle => 3.0 * SQRT3 * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u8,
    pub shape: Shape,
    pub radius: f64,
    /// Center `(y, x)` in frame 0, continuous pixel coordinates (pixel
    /// `(i, j)` covers `[i, i+1) × [j, j+1)`).
    pub center: (f64, f64),
    /// `(dy, dx)` per frame.
    pub velocity: (f64, f64),
}

impl SceneObject {
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        (
            self.center.0 + self.velocity.0 * t as f64,
            self.center.1 + self.velocity.1 * t as f64,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Sequence {
    /// `1 × 3 × h × w` frames with values on the 8-bit grid `k / 255`.
    pub frames: Vec<Tensor>,
    pub masks: Vec<LabelMask>,
    pub objects: Vec<SceneObject>,
    pub decoys: Vec<SceneObject>,
}

/// Base colors: background first, then one per shape class.
const PALETTE: [[f64; 3]; 4] = [
    [0.45, 0.50, 0.45],
    [0.80, 0.30, 0.25],
    [0.25, 0.40, 0.80],
    [0.85, 0.75, 0.25],
];
/// In camouflage mode every surface draws its base color uniformly from
/// this range per channel, from its texture key.
const CAMOUFLAGE_RANGE: (f64, f64) = (0.2, 0.8);

/// Hash of integer lattice coordinates to a uniform value in `[0, 1)`.
fn lattice(key: u64, ix: i64, iy: i64, channel: u64) -> f64 {
    let h = mix64(mix64(mix64(key ^ ix as u64) ^ iy as u64) ^ channel);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

struct Texture {
    key: u64,
    base: [f64; 3],
}

impl Texture {
    /// Class `class` surface (0 for the background) with texture `key`.
    fn new(cfg: &SceneConfig, key: u64, class: usize) -> Self {
        let base = if cfg.camouflage {
            let (lo, hi) = CAMOUFLAGE_RANGE;
            [0, 1, 2].map(|c| lo + (hi - lo) * lattice(key, i64::MIN, i64::MIN, c))
        } else {
            PALETTE[class]
        };
        Self { key, base }
    }

    fn sample(&self, cfg: &SceneConfig, u: f64, v: f64, channel: usize) -> f64 {
        let c = channel as u64;
        let (gu, gv) = (u / cfg.texture_cell, v / cfg.texture_cell);
        let (iu, iv) = (gu.floor(), gv.floor());
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fu, fv) = (smooth(gu - iu), smooth(gv - iv));
        let (iu, iv) = (iu as i64, iv as i64);
        let at = |du: i64, dv: i64| lattice(self.key, iu + du, iv + dv, c);
        let top = at(0, 0) + (at(1, 0) - at(0, 0)) * fu;
        let bottom = at(0, 1) + (at(1, 1) - at(0, 1)) * fu;
        let noise = top + (bottom - top) * fv;
        let grain = lattice(self.key ^ 0x9e37_79b9_7f4a_7c15, u.floor() as i64, v.floor() as i64, c);
        self.base[channel] + cfg.texture_contrast * (noise - 0.5) + cfg.grain * (grain - 0.5)
    }
}

fn random_shape(cfg: &SceneConfig, rng: &mut Rng) -> (u8, f64) {
    let class = rng.int_range(1, cfg.num_classes - 1) as u8;
    (class, rng.uniform_range(cfg.radius.0, cfg.radius.1))
}

fn place_objects(cfg: &SceneConfig, rng: &mut Rng) -> Vec<SceneObject> {
    let count = rng.int_range(cfg.objects.0, cfg.objects.1);
    let span = (cfg.sequence_length - 1) as f64;
    (0..count)
        .map(|_| {
            let (class, radius) = random_shape(cfg, rng);
            let speed = rng.uniform_range(cfg.speed.0, cfg.speed.1);
            let angle = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
            let velocity = (speed * libm::sin(angle), speed * libm::cos(angle));
            // Keep the whole circumscribed circle inside the frame for every
            // frame of the sequence.
            let mut axis = |extent: usize, v: f64| {
                let lo = radius - (v * span).min(0.0);
                let hi = extent as f64 - radius - (v * span).max(0.0);
                rng.uniform_range(lo, hi)
            };
            let cy = axis(cfg.height, velocity.0);
            let cx = axis(cfg.width, velocity.1);
            SceneObject {
                class,
                shape: SHAPES[class as usize - 1],
                radius,
                center: (cy, cx),
                velocity,
            }
        })
        .collect()
}

fn place_decoys(cfg: &SceneConfig, rng: &mut Rng) -> Vec<SceneObject> {
    if cfg.decoys.1 == 0 {
        return Vec::new();
    }
    let count = rng.int_range(cfg.decoys.0, cfg.decoys.1);
    (0..count)
        .map(|_| {
            let (class, radius) = random_shape(cfg, rng);
            let cy = rng.uniform_range(radius, cfg.height as f64 - radius);
            let cx = rng.uniform_range(radius, cfg.width as f64 - radius);
            SceneObject {
                class,
                shape: SHAPES[class as usize - 1],
                radius,
                center: (cy, cx),
                velocity: (0.0, 0.0),
            }
        })
        .collect()
}

/// Renders a sequence; deterministic in `(config, seed)`.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64) -> Result<Sequence> {
    cfg.validate()?;
    let mut rng = Rng::derive(seed, 0);
    let objects = place_objects(cfg, &mut rng);
    let decoys = place_decoys(cfg, &mut rng);
    // Decoys first so that objects are drawn over them.
    let surfaces: Vec<&SceneObject> = decoys.iter().chain(&objects).collect();
    let keys: Vec<u64> = (0..decoys.len())
        .map(|k| mix64(!seed ^ mix64(k as u64 + 1)))
        .chain((0..objects.len()).map(|k| mix64(seed ^ mix64(k as u64 + 1))))
        .collect();
    let refreshed = |key: u64, t: usize, refresh: bool| if refresh { mix64(key ^ mix64(t as u64 + 1)) } else { key };

    let (h, w) = (cfg.height, cfg.width);
    let shape = Shape4::new(1, 3, h, w)?;
    let mut frames = Vec::with_capacity(cfg.sequence_length);
    let mut masks = Vec::with_capacity(cfg.sequence_length);
    for t in 0..cfg.sequence_length {
        let mut noise = Rng::derive(seed, 1 + t as u64);
        let centers: Vec<(f64, f64)> = surfaces.iter().map(|o| o.center_at(t)).collect();
        let all = cfg.texture_refresh == TextureRefresh::All;
        let frame_textures: Vec<Texture> = surfaces
            .iter()
            .zip(&keys)
            .enumerate()
            .map(|(k, (o, &key))| {
                let refresh = all || (cfg.texture_refresh == TextureRefresh::Objects && k >= decoys.len());
                Texture::new(cfg, refreshed(key, t, refresh), o.class as usize)
            })
            .collect();
        let frame_background = Texture::new(cfg, refreshed(mix64(seed), t, all), 0);
        let shift = (cfg.background_velocity.0 * t as f64, cfg.background_velocity.1 * t as f64);
        let mut labels = vec![0u8; h * w];
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let top = surfaces
                    .iter()
                    .zip(&centers)
                    .rposition(|(o, c)| o.shape.contains(px - c.1, py - c.0, o.radius));
                let (tex, u, v) = match top {
                    Some(k) => (&frame_textures[k], px - centers[k].1, py - centers[k].0),
                    None => (&frame_background, px - shift.1, py - shift.0),
                };
                labels[y * w + x] = match top {
                    Some(k) if k >= decoys.len() => surfaces[k].class,
                    _ => 0,
                };
                for c in 0..3 {
                    let mut value = tex.sample(cfg, u, v, c);
                    if cfg.noise_std > 0.0 {
                        value += cfg.noise_std * noise.normal();
                    }
                    data[c * h * w + y * w + x] = dequantize(quantize(value as f32));
                }
            }
        }
        frames.push(Tensor::from_vec(shape, data)?);
        masks.push(LabelMask::new(1, h, w, labels)?);
    }
    Ok(Sequence {
        frames,
        masks,
        objects,
        decoys,
    })
}
