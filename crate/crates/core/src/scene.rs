//! Procedural linear-RGB scenes used as clean training and test content.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::tensor::Tensor;

struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    gains: [f64; 3],
}

fn waves(rng: &mut impl Rng, count: usize, min_wavelength: f64, max_wavelength: f64) -> Vec<Wave> {
    (0..count)
        .map(|_| {
            let lambda = rng.random_range(min_wavelength..max_wavelength);
            let theta = rng.random_range(0.0..PI);
            let k = 2.0 * PI / lambda;
            Wave {
                kx: k * libm::cos(theta),
                ky: k * libm::sin(theta),
                phase: rng.random_range(0.0..2.0 * PI),
                gains: [
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                ],
            }
        })
        .collect()
}

fn render(c: usize, h: usize, w: usize, waves: &[Wave], base: [f64; 3], amplitude: f64) -> Tensor {
    let norm = amplitude / waves.len().max(1) as f64;
    Tensor::from_fn(c, h, w, |ch, y, x| {
        let s: f64 = waves
            .iter()
            .map(|wv| wv.gains[ch % 3] * libm::sin(wv.kx * x as f64 + wv.ky * y as f64 + wv.phase))
            .sum();
        base[ch % 3] + norm * s
    })
}

/// Band-limited texture: a few sinusoids with wavelengths of 16 to 48 px
/// rescaled to span `[0.05, 0.95]`.
pub fn smooth_texture(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let base = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let ws = waves(rng, 6, 16.0, 48.0);
    let raw = render(c, h, w, &ws, base, 1.0);
    let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = if hi > lo { 0.9 / (hi - lo) } else { 0.0 };
    raw.map(|v| (0.05 + k * (v - lo)).clamp(0.05, 0.95))
}

fn soft_step(d: f64, softness: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-d / softness))
}

/// A textured background with soft-edged discs and boxes on top; finer
/// detail than [`smooth_texture`] so restoration has edges to recover.
pub fn natural_scene(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    let base = [
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
        rng.random_range(0.2..0.6),
    ];
    let ws = waves(rng, 8, 6.0, 40.0);
    let mut img = render(3, h, w, &ws, base, 0.6);
    let shapes = rng.random_range(3..7);
    let scale = h.min(w) as f64;
    for _ in 0..shapes {
        let colour = [
            rng.random::<f64>(),
            rng.random::<f64>(),
            rng.random::<f64>(),
        ];
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let size = rng.random_range(0.08..0.3) * scale;
        let disc = rng.random_bool(0.5);
        let softness = rng.random_range(0.4..1.2);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    size - libm::hypot(dx, dy)
                } else {
                    size - libm::fabs(dx).max(libm::fabs(dy))
                };
                let a = soft_step(inside, softness);
                for (ch, &col) in colour.iter().enumerate() {
                    let v = img.at(ch, y, x);
                    img.set(ch, y, x, v + a * (col - v));
                }
            }
        }
    }
    img.clamp01()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn scenes_are_in_range_and_seeded() {
        let a = natural_scene(32, 40, &mut stream(1, "s"));
        let b = natural_scene(32, 40, &mut stream(1, "s"));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let t = smooth_texture(3, 16, 16, &mut stream(2, "t"));
        assert!(t.data().iter().all(|v| (0.05..=0.95).contains(v)));
        assert!(t.max_abs() > 0.0);
    }
}
