//! Procedural bitemporal scenes with pixel-accurate change labels.
//!
//! A scene is a smooth textured background shared by both dates plus a set
//! of flat-colored rectangles and discs. Each object independently changes
//! with probability `p_change` by appearing, vanishing or moving between the
//! two dates. The label marks exactly the pixels whose noiseless renderings
//! differ. The second date then receives a global brightness shift, and both
//! dates get clipped Gaussian noise; neither nuisance affects the label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::netpbm::Image;
use crate::error::{Error, Result};
use crate::model::ChangeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct GenParams {
    /// Side length; must be a positive multiple of 8.
    pub size: usize,
    pub n_objects: usize,
    pub p_change: f64,
    pub noise_sigma: f64,
    pub illum_shift: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            size: 64,
            n_objects: 6,
            p_change: 0.5,
            noise_sigma: 0.04,
            illum_shift: 0.2,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::Input(format!(
                "image size must be a positive multiple of 8, got {}",
                self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.p_change) {
            return Err(Error::Input(format!("p_change must lie in [0, 1], got {}", self.p_change)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.illum_shift >= 0.0) {
            return Err(Error::Input("noise_sigma and illum_shift must be >= 0".into()));
        }
        Ok(())
    }
}

/// One bitemporal pair with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub x1: Image,
    pub x2: Image,
    /// `1×H×W` binary map.
    pub label: ChangeMap,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: usize, y0: usize, w: usize, h: usize },
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn covers(&self, x: usize, y: usize) -> bool {
        match *self {
            Shape::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Disc { cx, cy, r } => {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    fn extent(&self) -> (usize, usize) {
        match *self {
            Shape::Rect { w, h, .. } => (w, h),
            Shape::Disc { r, .. } => {
                let d = (2.0 * r).ceil() as usize;
                (d, d)
            }
        }
    }

    fn placed_at(&self, x0: usize, y0: usize) -> Shape {
        match *self {
            Shape::Rect { w, h, .. } => Shape::Rect { x0, y0, w, h },
            Shape::Disc { r, .. } => Shape::Disc {
                cx: x0 as f64 + r,
                cy: y0 as f64 + r,
                r,
            },
        }
    }

    fn origin(&self) -> (usize, usize) {
        match *self {
            Shape::Rect { x0, y0, .. } => (x0, y0),
            Shape::Disc { cx, cy, r } => ((cx - r).round() as usize, (cy - r).round() as usize),
        }
    }
}

struct Object {
    shape: Shape,
    color: [f64; 3],
}

fn random_position(rng: &mut ChaCha8Rng, size: usize, extent: (usize, usize)) -> (usize, usize) {
    (
        rng.random_range(0..=size - extent.0),
        rng.random_range(0..=size - extent.1),
    )
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let n = size * size;
    let mut bg = vec![0.0; 3 * n];
    let tau = std::f64::consts::TAU;
    for c in 0..3 {
        let base = rng.random_range(0.3..0.7);
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.random_range(0.03..0.08),
                    rng.random_range(0.5..2.5) * tau / size as f64,
                    rng.random_range(0.5..2.5) * tau / size as f64,
                    rng.random_range(0.0..tau),
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let mut v = base;
                for &(amp, fx, fy, phase) in &waves {
                    v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                v += rng.random_range(-0.03..0.03);
                bg[c * n + y * size + x] = v;
            }
        }
    }
    bg
}

fn render(bg: &[f64], size: usize, objects: &[&Object]) -> Vec<f64> {
    let n = size * size;
    let mut img = bg.to_vec();
    for obj in objects {
        for y in 0..size {
            for x in 0..size {
                if obj.shape.covers(x, y) {
                    for c in 0..3 {
                        img[c * n + y * size + x] = obj.color[c];
                    }
                }
            }
        }
    }
    img
}

/// Generates one pair deterministically from `seed`.
pub fn generate_pair(seed: u64, params: &GenParams) -> Result<Sample> {
    params.validate()?;
    let size = params.size;
    let n = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background(&mut rng, size);
    let bg_mean: Vec<f64> = (0..3)
        .map(|c| bg[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();

    let min_side = (size / 12).max(3);
    let max_side = (size / 4).max(min_side + 1);
    let mut first: Vec<Object> = Vec::new();
    let mut second: Vec<Object> = Vec::new();
    for _ in 0..params.n_objects {
        let shape = if rng.random_bool(0.5) {
            Shape::Rect {
                x0: 0,
                y0: 0,
                w: rng.random_range(min_side..=max_side),
                h: rng.random_range(min_side..=max_side),
            }
        } else {
            let r = rng.random_range(min_side..=max_side) as f64 / 2.0;
            Shape::Disc { cx: r, cy: r, r }
        };
        let (x0, y0) = random_position(&mut rng, size, shape.extent());
        let shape = shape.placed_at(x0, y0);
        let mut color = [0.0; 3];
        for _ in 0..32 {
            color = [rng.random(), rng.random(), rng.random()];
            let contrast: f64 = color
                .iter()
                .zip(&bg_mean)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / 3.0;
            if contrast >= 0.25 {
                break;
            }
        }
        let obj = Object { shape, color };
        if rng.random_bool(params.p_change) {
            match rng.random_range(0..3) {
                0 => second.push(obj),
                1 => first.push(obj),
                _ => {
                    let (ox, oy) = obj.shape.origin();
                    let extent = obj.shape.extent();
                    // Move far enough that the footprint visibly changes.
                    let (nx, ny) = loop {
                        let (nx, ny) = random_position(&mut rng, size, extent);
                        if nx.abs_diff(ox) + ny.abs_diff(oy) >= 3 {
                            break (nx, ny);
                        }
                    };
                    second.push(Object {
                        shape: obj.shape.placed_at(nx, ny),
                        color: obj.color,
                    });
                    first.push(obj);
                }
            }
        } else {
            second.push(Object {
                shape: obj.shape,
                color: obj.color,
            });
            first.push(obj);
        }
    }
    // Unchanged and changed objects are painted in creation order in both
    // dates, so overlaps resolve identically.
    let clean1 = render(&bg, size, &first.iter().collect::<Vec<_>>());
    let clean2 = render(&bg, size, &second.iter().collect::<Vec<_>>());
    let label: Vec<u8> = (0..n)
        .map(|p| u8::from((0..3).any(|c| clean1[c * n + p] != clean2[c * n + p])))
        .collect();

    let shift = if rng.random_bool(0.5) {
        params.illum_shift
    } else {
        -params.illum_shift
    };
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Input(e.to_string()))?;
    let mut finish = |img: Vec<f64>, offset: f64| -> Vec<f64> {
        img.into_iter()
            .map(|v| {
                let eps = if params.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (v + offset + eps).clamp(0.0, 1.0)
            })
            .collect()
    };
    let x1 = finish(clean1, 0.0);
    let x2 = finish(clean2, shift);
    Ok(Sample {
        id: format!("{seed:010}"),
        x1: Image::new(3, size, size, x1)?,
        x2: Image::new(3, size, size, x2)?,
        label: ChangeMap::new([1, size, size], label)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(p_change: f64, n_objects: usize) -> GenParams {
        GenParams {
            size: 32,
            n_objects,
            p_change,
            noise_sigma: 0.0,
            illum_shift: 0.0,
        }
    }

    #[test]
    fn no_change_means_identical_images() {
        for seed in 0..10 {
            let s = generate_pair(seed, &quiet(0.0, 5)).unwrap();
            assert_eq!(s.x1, s.x2);
            assert_eq!(s.label.count_changed(), 0);
        }
    }

    #[test]
    fn forced_change_is_labelled() {
        for seed in 0..20 {
            let s = generate_pair(seed, &quiet(1.0, 1)).unwrap();
            assert!(s.label.count_changed() > 0, "seed {seed}");
        }
    }

    #[test]
    fn deterministic() {
        let p = GenParams::default();
        assert_eq!(generate_pair(77, &p).unwrap(), generate_pair(77, &p).unwrap());
        assert_ne!(generate_pair(77, &p).unwrap().x1, generate_pair(78, &p).unwrap().x1);
    }

    #[test]
    fn label_sound_without_nuisances() {
        for seed in 0..20 {
            let s = generate_pair(seed, &quiet(0.6, 8)).unwrap();
            let n = 32 * 32;
            for p in 0..n {
                let differs = (0..3).any(|c| s.x1.data[c * n + p] != s.x2.data[c * n + p]);
                assert_eq!(differs, s.label.data()[p] == 1, "seed {seed} pixel {p}");
            }
        }
    }

    #[test]
    fn values_clipped() {
        let p = GenParams {
            noise_sigma: 0.3,
            illum_shift: 0.4,
            ..GenParams::default()
        };
        let s = generate_pair(3, &p).unwrap();
        assert!(s.x1.data.iter().chain(&s.x2.data).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_params() {
        assert!(generate_pair(0, &GenParams { size: 30, ..GenParams::default() }).is_err());
        assert!(generate_pair(0, &GenParams { p_change: 1.5, ..GenParams::default() }).is_err());
    }
}
