use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::{Degradation, SceneSpec, Shape, Sprite, Texture};
use crate::error::{Error, Result};

/// Distribution of random translating-sprite scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSpec {
    pub width: usize,
    pub height: usize,
    pub min_sprites: usize,
    pub max_sprites: usize,
    /// Sprite half extents as fractions of the canvas size.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest initial sprite speed, pixels per frame.
    pub max_speed: f64,
    /// Largest per-axis acceleration, pixels per frame squared.
    pub max_acceleration: f64,
    /// Largest background (camera pan) speed.
    pub max_background_speed: f64,
    pub degradation: Degradation,
    pub max_flow: f64,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        SuiteSpec::shift(64, 64)
    }
}

impl SuiteSpec {
    /// Textured sprites in near-constant translation over a slowly panning
    /// background.
    pub fn shift(width: usize, height: usize) -> Self {
        SuiteSpec {
            width,
            height,
            min_sprites: 1,
            max_sprites: 3,
            min_size: 0.12,
            max_size: 0.3,
            max_speed: 3.0,
            max_acceleration: 0.1,
            max_background_speed: 1.0,
            degradation: Degradation::CLEAN,
            max_flow: 8.0,
        }
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.min_sprites > self.max_sprites {
            return Err(Error::Spec("min_sprites exceeds max_sprites".into()));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 0.5) {
            return Err(Error::Spec("sprite sizes must satisfy 0 < min <= max <= 0.5".into()));
        }
        let worst = self.max_speed
            + self.max_acceleration * std::f64::consts::SQRT_2 * frames as f64;
        if worst > self.max_flow || self.max_background_speed > self.max_flow {
            return Err(Error::Spec(format!(
                "speeds up to {worst} px/frame exceed max_flow {}",
                self.max_flow
            )));
        }
        Ok(())
    }

    /// Draws scene `index` of the suite; independent of other indices.
    pub fn scene(&self, seed: u64, index: u64) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let (w, h) = (self.width as f64, self.height as f64);
        let disk = |r: f64, rng: &mut ChaCha8Rng| {
            let rad = r * rng.random::<f64>().sqrt();
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            [rad * ang.cos(), rad * ang.sin()]
        };
        let background_velocity = disk(self.max_background_speed, &mut rng);
        let background = Texture::Seeded { seed: rng.random() };
        let n = rng.random_range(self.min_sprites..=self.max_sprites);
        let sprites = (0..n)
            .map(|_| {
                let sx = rng.random_range(self.min_size..=self.max_size) * w;
                let sy = rng.random_range(self.min_size..=self.max_size) * h;
                let shape = if rng.random_bool(0.5) {
                    Shape::Rect {
                        half_width: sx,
                        half_height: sy,
                    }
                } else {
                    Shape::Ellipse { rx: sx, ry: sy }
                };
                let a = self.max_acceleration;
                Sprite {
                    shape,
                    position: [rng.random_range(0.0..w), rng.random_range(0.0..h)],
                    velocity: disk(self.max_speed, &mut rng),
                    acceleration: [rng.random_range(-a..=a), rng.random_range(-a..=a)],
                    texture: Texture::Seeded { seed: rng.random() },
                }
            })
            .collect();
        SceneSpec {
            width: self.width,
            height: self.height,
            background,
            background_velocity,
            sprites,
            degradation: self.degradation,
            max_flow: self.max_flow,
        }
    }
}
