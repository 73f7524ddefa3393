//! Synthetic time-lapse rain scenes and the `[0, 1] <-> [-1, 1]` image mapping.
//!
//! A scene is one procedural background plus `T` frames, each frame the
//! background with an independent additive rain layer, clipped to `[0, 1]`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// Row-major `height × width × channels` image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width * height * channels != data.len() {
            return Err(invalid(
                "image",
                alloc::format!("{}x{}x{} needs {} samples, got {}", width, height, channels, width * height * channels, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        (self.width, self.height, self.channels) == (other.width, other.height, other.channels)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Copy as a `[H, W, C]` tensor without rescaling.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.shape(), self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => Self::new(w, h, c, t.data().to_vec()),
            ref s => Err(invalid("image", alloc::format!("expected H x W x C, got {:?}", s))),
        }
    }
}

/// Maps a `[0, 1]` image to a `[-1, 1]` tensor via `2x - 1`.
pub fn normalize(img: &Image) -> Result<Tensor> {
    if let Some(v) = img.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(invalid("normalize", alloc::format!("sample {} outside [0, 1]", v)));
    }
    Tensor::new(&img.shape(), img.data.iter().map(|v| 2.0 * v - 1.0).collect())
}

/// Inverse of [`normalize`]: `(x + 1) / 2`.
pub fn denormalize(t: &Tensor) -> Result<Image> {
    let mut img = Image::from_tensor(t)?;
    img.data.iter_mut().for_each(|v| *v = (*v + 1.0) * 0.5);
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RainPreset {
    Light,
    Medium,
    Heavy,
}

impl RainPreset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "light" => Some(Self::Light),
            "medium" => Some(Self::Medium),
            "heavy" => Some(Self::Heavy),
            _ => None,
        }
    }
}

/// Sampling ranges for the streaks of one rain layer. Ranges are inclusive
/// `(low, high)` pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainParams {
    pub count: (usize, usize),
    /// Streak length in pixels.
    pub length: (f64, f64),
    /// Degrees from vertical; every streak of a layer stays within 5° of a
    /// per-layer direction drawn from this range.
    pub angle: (f64, f64),
    /// Stroke width in pixels.
    pub width: (f64, f64),
    pub intensity: (f64, f64),
    /// Uniform additive haze.
    pub fog: f64,
}

impl RainParams {
    /// Preset scaled so streak density per pixel does not depend on `size`.
    pub fn preset(preset: RainPreset, size: usize) -> Self {
        let area = (size * size) as f64 / 1024.0;
        let scale = |n: usize| libm::round(n as f64 * area) as usize;
        let len_scale = (size as f64 / 32.0).max(0.5);
        let (count, length, intensity) = match preset {
            RainPreset::Light => ((4, 8), (4.0, 8.0), (0.2, 0.45)),
            RainPreset::Medium => ((8, 14), (5.0, 11.0), (0.3, 0.6)),
            RainPreset::Heavy => ((16, 26), (6.0, 14.0), (0.35, 0.7)),
        };
        Self {
            count: (scale(count.0), scale(count.1).max(scale(count.0))),
            length: (length.0 * len_scale, length.1 * len_scale),
            angle: (-20.0, 20.0),
            width: (0.8, 1.6),
            intensity,
            fog: 0.0,
        }
    }

    pub fn none() -> Self {
        Self {
            count: (0, 0),
            length: (1.0, 1.0),
            angle: (0.0, 0.0),
            width: (1.0, 1.0),
            intensity: (0.0, 0.0),
            fog: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "rain_params";
        let ranges = [
            (self.count.0 as f64, self.count.1 as f64),
            self.length,
            self.width,
            self.intensity,
        ];
        if ranges.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi)) {
            return Err(invalid(OP, "ranges must be finite, non-negative and ordered"));
        }
        let (a0, a1) = self.angle;
        if !(a0 > -45.0 && a1 < 45.0 && a0 <= a1) {
            return Err(invalid(OP, "angle range must lie within (-45, 45) degrees"));
        }
        if !(self.fog.is_finite() && self.fog >= 0.0) {
            return Err(invalid(OP, "fog must be non-negative"));
        }
        Ok(())
    }
}

/// Bijective 64-bit mixer used to derive child seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of frame `t`'s rain layer within the scene seeded by `scene_seed`.
pub fn frame_seed(scene_seed: u64, t: usize) -> u64 {
    mix_seed(scene_seed, t as u64 + 1)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Procedural RGB background in `[0, 1]`: three octaves of smoothed value
/// noise, a linear gradient and a few flat rectangles.
pub fn gen_background(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xB6));
    let mut img = Image::zeros(size, size, 3);
    let base: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.15..0.55));

    let mut octaves = Vec::new();
    let mut cells = 2usize;
    for amp in [0.28, 0.14, 0.07] {
        let n = cells + 1;
        let grid: Vec<f64> = (0..n * n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        octaves.push((cells, n, amp, grid));
        cells *= 2;
    }
    let gradient: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let gradient_angle = rng.random_range(0.0..core::f64::consts::TAU);
    let (gs, gc) = (libm::sin(gradient_angle), libm::cos(gradient_angle));

    let inv = 1.0 / size.max(1) as f64;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) * inv, (y as f64 + 0.5) * inv);
            let ramp = (u - 0.5) * gc + (v - 0.5) * gs;
            for c in 0..3 {
                let mut value = base[c] + gradient[c] * ramp * 2.0;
                for (cells, n, amp, grid) in &octaves {
                    let (fx, fy) = (u * *cells as f64, v * *cells as f64);
                    let (ix, iy) = ((fx as usize).min(cells - 1), (fy as usize).min(cells - 1));
                    let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                    let at = |gx: usize, gy: usize| grid[(gy * n + gx) * 3 + c];
                    let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                    let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                    value += amp * (top * (1.0 - ty) + bottom * ty);
                }
                img.data[(y * size + x) * 3 + c] = value;
            }
        }
    }

    let rects = rng.random_range(2..=4);
    for _ in 0..rects {
        let w = rng.random_range(size / 6..=size / 2).max(1);
        let h = rng.random_range(size / 6..=size / 2).max(1);
        let x0 = rng.random_range(0..size.saturating_sub(w).max(1));
        let y0 = rng.random_range(0..size.saturating_sub(h).max(1));
        let color: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.05..0.75));
        let alpha = rng.random_range(0.4..0.8);
        for y in y0..(y0 + h).min(size) {
            for x in x0..(x0 + w).min(size) {
                for (c, &col) in color.iter().enumerate() {
                    let p = &mut img.data[(y * size + x) * 3 + c];
                    *p = *p * (1.0 - alpha) + col * alpha;
                }
            }
        }
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Additive, non-negative rain layer: anti-aliased line segments plus an
/// optional uniform fog term. The same value is added to every channel.
pub fn gen_rain_layer(params: &RainParams, seed: u64, size: usize) -> Result<Image> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5A1));
    let mut layer = vec![0.0f64; size * size];
    let count = if params.count.1 > params.count.0 {
        rng.random_range(params.count.0..=params.count.1)
    } else {
        params.count.0
    };
    let direction = uniform(&mut rng, params.angle);
    let spread = (
        (direction - 5.0).max(params.angle.0),
        (direction + 5.0).min(params.angle.1),
    );
    let extent = size as f64;
    for _ in 0..count {
        let length = uniform(&mut rng, params.length);
        let angle = uniform(&mut rng, spread).to_radians();
        let width = uniform(&mut rng, params.width);
        let intensity = uniform(&mut rng, params.intensity);
        let cx = rng.random_range(-0.25 * length..extent + 0.25 * length);
        let cy = rng.random_range(-0.25 * length..extent + 0.25 * length);
        let (dx, dy) = (libm::sin(angle), libm::cos(angle));
        let (x0, y0) = (cx - dx * length * 0.5, cy - dy * length * 0.5);
        let (x1, y1) = (cx + dx * length * 0.5, cy + dy * length * 0.5);
        let reach = width * 0.5 + 1.0;
        let lo_x = libm::floor(x0.min(x1) - reach).max(0.0) as usize;
        let hi_x = (libm::ceil(x0.max(x1) + reach).max(0.0) as usize).min(size);
        let lo_y = libm::floor(y0.min(y1) - reach).max(0.0) as usize;
        let hi_y = (libm::ceil(y0.max(y1) + reach).max(0.0) as usize).min(size);
        let seg2 = (x1 - x0) * (x1 - x0) + (y1 - y0) * (y1 - y0);
        for py in lo_y..hi_y {
            for px in lo_x..hi_x {
                let (qx, qy) = (px as f64 + 0.5, py as f64 + 0.5);
                let t = if seg2 > 0.0 {
                    (((qx - x0) * (x1 - x0) + (qy - y0) * (y1 - y0)) / seg2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (ex, ey) = (qx - (x0 + t * (x1 - x0)), qy - (y0 + t * (y1 - y0)));
                let dist = libm::sqrt(ex * ex + ey * ey);
                let coverage = (width * 0.5 + 0.5 - dist).clamp(0.0, 1.0);
                layer[py * size + px] += intensity * coverage;
            }
        }
    }
    let data = layer.iter().flat_map(|&v| [v + params.fog; 3]).collect();
    Image::new(size, size, 3, data)
}

/// One static background and `T` rainy frames of it.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeLapseScene {
    pub scene_id: String,
    pub seed: u64,
    pub background: Image,
    pub frames: Vec<Image>,
}

impl TimeLapseScene {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// `frame_t = clip(background + rain_t, [0, 1])` for `t < frames`.
pub fn gen_scene(seed: u64, size: usize, frames: usize, params: &RainParams) -> Result<TimeLapseScene> {
    if frames < 2 {
        return Err(Error::InvalidArgument {
            op: "gen_scene",
            reason: alloc::format!("a scene needs at least 2 frames, got {}", frames),
        });
    }
    let background = gen_background(seed, size);
    let frames = (0..frames)
        .map(|t| {
            let rain = gen_rain_layer(params, frame_seed(seed, t), size)?;
            let data = background
                .data()
                .iter()
                .zip(rain.data())
                .map(|(b, r)| (b + r).clamp(0.0, 1.0))
                .collect();
            Image::new(size, size, 3, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TimeLapseScene {
        scene_id: alloc::format!("scene_{:04}", seed),
        seed,
        background,
        frames,
    })
}

/// `count` scenes with ids `scene_0000, scene_0001, ...`; scene `i` uses
/// seed `mix_seed(seed, i)`.
pub fn gen_scenes(seed: u64, count: usize, size: usize, frames: usize, params: &RainParams) -> Result<Vec<TimeLapseScene>> {
    (0..count)
        .map(|i| {
            let mut scene = gen_scene(mix_seed(seed, i as u64), size, frames, params)?;
            scene.scene_id = alloc::format!("scene_{:04}", i);
            Ok(scene)
        })
        .collect()
}
