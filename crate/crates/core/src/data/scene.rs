use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

/// Surface colouring in surface-local coordinates (pixels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Flat { rgb: [f64; 3] },
    /// `base + dx * x + dy * y`; bilinear resampling reproduces it exactly.
    Affine {
        base: [f64; 3],
        dx: [f64; 3],
        dy: [f64; 3],
    },
    /// A few random plane waves around a random base colour.
    Seeded { seed: u64 },
}

impl Default for Texture {
    fn default() -> Self {
        Texture::Seeded { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: [f64; 3],
    kx: f64,
    ky: f64,
    phase: f64,
}

#[derive(Debug, Clone)]
enum Shader {
    Affine {
        base: [f64; 3],
        dx: [f64; 3],
        dy: [f64; 3],
    },
    Waves {
        base: [f64; 3],
        waves: Vec<Wave>,
    },
}

impl Shader {
    fn new(t: &Texture) -> Self {
        match *t {
            Texture::Flat { rgb } => Shader::Affine {
                base: rgb,
                dx: [0.0; 3],
                dy: [0.0; 3],
            },
            Texture::Affine { base, dx, dy } => Shader::Affine { base, dx, dy },
            Texture::Seeded { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let base = [0; 3].map(|_| rng.random_range(0.35..0.65));
                let waves = (0..3)
                    .map(|_| {
                        let freq = rng.random_range(0.1..0.6);
                        let dir = rng.random_range(0.0..std::f64::consts::TAU);
                        Wave {
                            amp: [0; 3].map(|_| rng.random_range(0.04..0.12)),
                            kx: freq * dir.cos(),
                            ky: freq * dir.sin(),
                            phase: rng.random_range(0.0..std::f64::consts::TAU),
                        }
                    })
                    .collect();
                Shader::Waves { base, waves }
            }
        }
    }

    fn eval(&self, x: f64, y: f64) -> [f64; 3] {
        match self {
            Shader::Affine { base, dx, dy } => [0, 1, 2].map(|c| base[c] + dx[c] * x + dy[c] * y),
            Shader::Waves { base, waves } => {
                let mut out = *base;
                for w in waves {
                    let s = (w.kx * x + w.ky * y + w.phase).sin();
                    for c in 0..3 {
                        out[c] += w.amp[c] * s;
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Covers `[-half_width, half_width) x [-half_height, half_height)`.
    Rect { half_width: f64, half_height: f64 },
    Ellipse { rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Rect {
                half_width,
                half_height,
            } => -half_width <= dx && dx < half_width && -half_height <= dy && dy < half_height,
            Shape::Ellipse { rx, ry } => (dx / rx).powi(2) + (dy / ry).powi(2) < 1.0,
        }
    }

    fn extent(&self) -> (f64, f64) {
        match *self {
            Shape::Rect {
                half_width,
                half_height,
            } => (2.0 * half_width, 2.0 * half_height),
            Shape::Ellipse { rx, ry } => (2.0 * rx, 2.0 * ry),
        }
    }
}

/// A textured shape translating along `position + velocity t + acceleration t^2 / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sprite {
    pub shape: Shape,
    /// Centre `(x, y)` at frame 0, in pixels; pixel `(col, row)` sits at `(col, row)`.
    pub position: [f64; 2],
    /// Pixels per frame.
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub acceleration: [f64; 2],
    #[serde(default)]
    pub texture: Texture,
}

impl Sprite {
    fn position_at(&self, t: f64) -> [f64; 2] {
        [0, 1].map(|i| self.position[i] + self.velocity[i] * t + 0.5 * self.acceleration[i] * t * t)
    }

    /// Displacement between frames `t` and `t + 1`.
    fn displacement(&self, t: usize) -> [f64; 2] {
        let (a, b) = (self.position_at(t as f64), self.position_at(t as f64 + 1.0));
        [b[0] - a[0], b[1] - a[1]]
    }
}

/// Image degradation applied to rendered frames only; ground truth is exact.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Degradation {
    /// Gaussian blur standard deviation in pixels, 0 disables.
    pub blur_sigma: f64,
    /// Additive Gaussian noise standard deviation, 0 disables.
    pub noise_sigma: f64,
}

impl Degradation {
    pub const CLEAN: Degradation = Degradation {
        blur_sigma: 0.0,
        noise_sigma: 0.0,
    };
    pub const FINAL: Degradation = Degradation {
        blur_sigma: 1.5,
        noise_sigma: 0.02,
    };
}

fn default_max_flow() -> f64 {
    16.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub background: Texture,
    /// Pixels per frame; the background is an infinite plane.
    #[serde(default)]
    pub background_velocity: [f64; 2],
    /// Back to front: later sprites cover earlier ones.
    #[serde(default)]
    pub sprites: Vec<Sprite>,
    #[serde(default)]
    pub degradation: Degradation,
    /// Largest displacement magnitude any surface may have between frames.
    #[serde(default = "default_max_flow")]
    pub max_flow: f64,
}

impl SceneSpec {
    pub fn static_scene(width: usize, height: usize) -> Self {
        SceneSpec {
            width,
            height,
            background: Texture::default(),
            background_velocity: [0.0; 2],
            sprites: Vec::new(),
            degradation: Degradation::CLEAN,
            max_flow: default_max_flow(),
        }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if frames < 2 {
            return Err(Error::Contract(format!("need at least 2 frames, got {frames}")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Spec("canvas must be non-empty".into()));
        }
        let d = self.degradation;
        if !(d.blur_sigma >= 0.0 && d.noise_sigma >= 0.0) {
            return Err(Error::Spec("degradation sigmas must be >= 0".into()));
        }
        let bg = self.background_velocity;
        let mag = |v: [f64; 2]| v[0].hypot(v[1]);
        if !(mag(bg) <= self.max_flow) {
            return Err(Error::Spec(format!(
                "background speed {} exceeds max_flow {}",
                mag(bg),
                self.max_flow
            )));
        }
        for (i, s) in self.sprites.iter().enumerate() {
            let (w, h) = s.shape.extent();
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Spec(format!("sprite {i} has an empty shape")));
            }
            if w > self.width as f64 || h > self.height as f64 {
                return Err(Error::Spec(format!(
                    "sprite {i} ({w}x{h}) is larger than the {}x{} canvas",
                    self.width, self.height
                )));
            }
            for t in 0..frames - 1 {
                let m = mag(s.displacement(t));
                if !(m <= self.max_flow) {
                    return Err(Error::Spec(format!(
                        "sprite {i} moves {m} px at frame {t}, above max_flow {}",
                        self.max_flow
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `frames[t]` is `3 x H x W`; `flows[t]` (`2 x H x W`, channels u, v) and
/// `occlusions[t]` (`1 x H x W`, binary) relate frame `t` to frame `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<Image>,
    pub flows: Vec<Image>,
    pub occlusions: Vec<Image>,
    pub spec: SceneSpec,
}

struct Scene<'a> {
    spec: &'a SceneSpec,
    background: Shader,
    sprites: Vec<Shader>,
}

/// Topmost surface at a point: `None` is the background.
type Surface = Option<usize>;

impl Scene<'_> {
    fn top(&self, t: f64, x: f64, y: f64) -> Surface {
        self.spec.sprites.iter().enumerate().rev().find_map(|(i, s)| {
            let p = s.position_at(t);
            s.shape.contains(x - p[0], y - p[1]).then_some(i)
        })
    }

    fn covered_above(&self, below: Surface, t: f64, x: f64, y: f64) -> bool {
        let first = below.map_or(0, |i| i + 1);
        self.spec.sprites[first..].iter().any(|s| {
            let p = s.position_at(t);
            s.shape.contains(x - p[0], y - p[1])
        })
    }

    fn colour(&self, surface: Surface, t: f64, x: f64, y: f64) -> [f64; 3] {
        match surface {
            None => {
                let v = self.spec.background_velocity;
                self.background.eval(x - v[0] * t, y - v[1] * t)
            }
            Some(i) => {
                let p = self.spec.sprites[i].position_at(t);
                self.sprites[i].eval(x - p[0], y - p[1])
            }
        }
    }

    fn displacement(&self, surface: Surface, t: usize) -> [f64; 2] {
        match surface {
            None => self.spec.background_velocity,
            Some(i) => self.spec.sprites[i].displacement(t),
        }
    }

    fn render(&self, t: usize) -> Image {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut im = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64, y as f64);
                let rgb = self.colour(self.top(t as f64, fx, fy), t as f64, fx, fy);
                for (c, v) in rgb.into_iter().enumerate() {
                    im.set(c, y, x, v);
                }
            }
        }
        im
    }

    fn ground_truth(&self, t: usize) -> (Image, Image) {
        let (w, h) = (self.spec.width, self.spec.height);
        let mut flow = Image::zeros(2, h, w);
        let mut occ = Image::zeros(1, h, w);
        let next = t as f64 + 1.0;
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64, y as f64);
                let s = self.top(t as f64, fx, fy);
                let d = self.displacement(s, t);
                flow.set(0, y, x, d[0]);
                flow.set(1, y, x, d[1]);
                let (qx, qy) = (fx + d[0], fy + d[1]);
                let outside = qx < 0.0 || qy < 0.0 || qx > (w - 1) as f64 || qy > (h - 1) as f64;
                if outside || self.covered_above(s, next, qx, qy) {
                    occ.set(0, y, x, 1.0);
                }
            }
        }
        (flow, occ)
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
pub fn blur(im: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return im.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (im.height as isize, im.width as isize);
    let pass = |src: &Image, horizontal: bool| {
        let mut out = Image::zeros(src.channels, src.height, src.width);
        for c in 0..src.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let o = j as isize - r;
                        let (sy, sx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += kv * src.at(c, sy as usize, sx as usize);
                    }
                    out.set(c, y as usize, x as usize, acc);
                }
            }
        }
        out
    };
    pass(&pass(im, true), false)
}

/// Renders `frames` frames of `spec` together with exact forward flow and
/// occlusion ground truth between consecutive frames.
///
/// A pixel is occluded when its point lands outside the canvas at the next
/// frame or under a surface nearer than its own. `seed` drives the noise.
pub fn generate(spec: &SceneSpec, frames: usize, seed: u64) -> Result<SequenceSample> {
    spec.validate(frames)?;
    let scene = Scene {
        spec,
        background: Shader::new(&spec.background),
        sprites: spec.sprites.iter().map(|s| Shader::new(&s.texture)).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (spec.degradation.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.degradation.noise_sigma).expect("finite sigma"));
    let mut images = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut im = blur(&scene.render(t), spec.degradation.blur_sigma);
        for v in &mut im.data {
            if let Some(n) = &noise {
                *v += n.sample(&mut rng);
            }
            *v = v.clamp(0.0, 1.0);
        }
        images.push(im);
    }
    let (flows, occlusions) = (0..frames - 1).map(|t| scene.ground_truth(t)).unzip();
    Ok(SequenceSample {
        frames: images,
        flows,
        occlusions,
        spec: spec.clone(),
    })
}
