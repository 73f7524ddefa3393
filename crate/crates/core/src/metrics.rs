//! PSNR and SSIM on `[0, 1]` images with peak value 1.

use core::fmt;

use crate::data::Image;
use crate::error::{invalid, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// The images are identical.
    Infinite,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Self::Finite(db) => Some(db),
            Self::Infinite => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(db) => write!(f, "{:.4}", db),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: Psnr,
    pub ssim: f64,
}

fn check_shapes(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(crate::error::mismatch(op, &a.shape(), &b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("mse", a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

pub fn psnr(a: &Image, b: &Image) -> Result<Psnr> {
    let err = mse(a, b)?;
    Ok(if err == 0.0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(-10.0 * libm::log10(err))
    })
}

/// Normalized 2D Gaussian weights, row-major `SSIM_WINDOW × SSIM_WINDOW`.
pub fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: [f64; SSIM_WINDOW] = core::array::from_fn(|i| {
        let d = i as f64 - half;
        libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    });
    let mut w: [f64; SSIM_WINDOW * SSIM_WINDOW] = core::array::from_fn(|k| g[k / SSIM_WINDOW] * g[k % SSIM_WINDOW]);
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Mean local SSIM over every fully contained window position, averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_shapes("ssim", a, b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(
            "ssim",
            alloc::format!("image {}x{} is smaller than the {}x{} window", w, h, SSIM_WINDOW, SSIM_WINDOW),
        ));
    }
    if ch == 0 {
        return Err(invalid("ssim", "image has no channels"));
    }
    let window = gaussian_window();
    let (nx, ny) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..ch {
        let mut channel_sum = 0.0;
        for y0 in 0..ny {
            for x0 in 0..nx {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let k = window[dy * SSIM_WINDOW + dx];
                        let (va, vb) = (a.get(x0 + dx, y0 + dy, c), b.get(x0 + dx, y0 + dy, c));
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                channel_sum += num / den;
            }
        }
        total += channel_sum / (nx * ny) as f64;
    }
    Ok(total / ch as f64)
}

pub fn evaluate(a: &Image, b: &Image) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn constant(v: f64, size: usize, ch: usize) -> Image {
        Image::new(size, size, ch, vec![v; size * size * ch]).unwrap()
    }

    fn pattern(seed: u64, size: usize) -> Image {
        crate::data::gen_background(seed, size)
    }

    #[test]
    fn psnr_closed_forms() {
        let a = constant(0.3, 4, 3);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);
        let b = constant(0.4, 4, 3);
        let db = psnr(&a, &b).unwrap().finite().unwrap();
        assert!((db - 20.0).abs() < 1e-9, "{db}");
        let db = psnr(&constant(0.0, 4, 1), &constant(1.0, 4, 1)).unwrap().finite().unwrap();
        assert_eq!(db, 0.0);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert!(psnr(&constant(0.0, 4, 3), &constant(0.0, 5, 3)).is_err());
        assert!(ssim(&constant(0.0, 12, 3), &constant(0.0, 12, 1)).is_err());
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let a = constant(0.0, 4, 1);
        let mut last = f64::INFINITY;
        for k in 1..=50 {
            let db = psnr(&a, &constant(k as f64 / 50.0, 4, 1)).unwrap().finite().unwrap();
            assert!(db < last);
            last = db;
        }
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = pattern(3, 24);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let s = ssim(&constant(0.2, 16, 3), &constant(0.8, 16, 3)).unwrap();
        let expected = (2.0 * 0.16 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert!((s - expected).abs() < 1e-10, "{s} vs {expected}");
        assert!((s - 0.470666).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        assert!(ssim(&constant(0.5, 10, 1), &constant(0.5, 10, 1)).is_err());
    }

    // Unweighted-sum oracle built directly from the 1D Gaussian, evaluated at
    // every window position with independent loops.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let norm: f64 = g.iter().sum::<f64>().powi(2);
        let mut acc = 0.0;
        let mut count = 0usize;
        for c in 0..a.channels() {
            for y in 0..=a.height() - 11 {
                for x in 0..=a.width() - 11 {
                    let mut m = [0.0f64; 5];
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = g[i] * g[j] / norm;
                            let (p, q) = (a.get(x + j, y + i, c), b.get(x + j, y + i, c));
                            m[0] += k * p;
                            m[1] += k * q;
                            m[2] += k * p * p;
                            m[3] += k * q * q;
                            m[4] += k * p * q;
                        }
                    }
                    let (vp, vq, cv) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
                    acc += ((2.0 * m[0] * m[1] + 1e-4) * (2.0 * cv + 9e-4))
                        / ((m[0] * m[0] + m[1] * m[1] + 1e-4) * (vp + vq + 9e-4));
                    count += 1;
                }
            }
        }
        acc / count as f64
    }

    #[test]
    fn anti_correlated_images_score_negative() {
        let size = 16;
        let data: Vec<f64> = (0..size * size)
            .map(|i| if (i % size + i / size) % 2 == 0 { 0.25 } else { 0.75 })
            .collect();
        let a = Image::new(size, size, 1, data.clone()).unwrap();
        let b = Image::new(size, size, 1, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "{s}");
        assert!((s - ssim_oracle(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_oracle_on_backgrounds() {
        let (a, b) = (pattern(1, 20), pattern(2, 20));
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ssim_is_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000) {
            let (a, b) = (pattern(sa, 14), pattern(sb, 14));
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn psnr_invariant_under_shared_permutation(seed in 0u64..1000, shift in 1usize..64) {
            let (a, b) = (pattern(seed, 8), pattern(seed + 1, 8));
            let n = 64;
            let permute = |img: &Image| {
                let mut out = img.clone();
                for p in 0..n {
                    let q = (p * 5 + shift) % n;
                    for c in 0..3 {
                        out.data_mut()[q * 3 + c] = img.data()[p * 3 + c];
                    }
                }
                out
            };
            let before = psnr(&a, &b).unwrap().finite().unwrap();
            let after = psnr(&permute(&a), &permute(&b)).unwrap().finite().unwrap();
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
