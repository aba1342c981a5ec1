use crate::error::{Error, Result};
use crate::types::Image;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use std::cell::RefCell;

/// Unconstrained multi-channel float raster (interleaved channels).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatRaster {
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Per-channel high-pass: zero every FFT bin whose radial frequency is below
/// `cutoff` × Nyquist, then keep the real part of the inverse transform.
pub fn highpass(img: &Image, cutoff: f64) -> Result<FloatRaster> {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0; h * w * 3];
    for c in 0..3 {
        let plane = highpass_plane(&img.channel(c), h, w, cutoff)?;
        for (p, v) in plane.into_iter().enumerate() {
            data[p * 3 + c] = v;
        }
    }
    Ok(FloatRaster {
        height: h,
        width: w,
        channels: 3,
        data,
    })
}

pub fn highpass_plane(plane: &[f64], h: usize, w: usize, cutoff: f64) -> Result<Vec<f64>> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Argument(format!("cutoff must be in (0, 1), got {cutoff}")));
    }
    if plane.len() != h * w {
        return Err(Error::Argument(format!(
            "plane has {} values, expected {h}x{w}",
            plane.len()
        )));
    }
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    PLANNER.with(|planner| {
        let mut planner = planner.borrow_mut();
        fft2(&mut planner, &mut buf, h, w, false);
        // Radial frequency normalized so that Nyquist on either axis is 1.
        let norm = |k: usize, n: usize| {
            let f = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            2.0 * f / n as f64
        };
        for ky in 0..h {
            let fy = norm(ky, h);
            for kx in 0..w {
                let fx = norm(kx, w);
                if (fy * fy + fx * fx).sqrt() < cutoff {
                    buf[ky * w + kx] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut planner, &mut buf, h, w, true);
    });
    let scale = 1.0 / (h * w) as f64;
    Ok(buf.into_iter().map(|c| c.re * scale).collect())
}

fn fft2(planner: &mut FftPlanner<f64>, buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    row_fft.process(buf);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constant_image_maps_to_zero() {
        let img = Image::constant(16, 24, [0.3, 0.6, 0.9]).unwrap();
        let out = highpass(&img, 0.25).unwrap();
        assert!(out.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn nyquist_checkerboard_passes_unchanged() {
        let (h, w) = (16, 16);
        let data: Vec<f32> = (0..h * w)
            .flat_map(|p| {
                let v = if (p / w + p % w) % 2 == 0 { 1.0 } else { 0.0 };
                [v; 3]
            })
            .collect();
        let img = Image::new(h, w, data).unwrap();
        let out = highpass(&img, 0.25).unwrap();
        // The checkerboard's mean is DC and gets removed; the rest is untouched.
        for (p, v) in out.channel(0).iter().enumerate() {
            let expected = f64::from(img.get(p / w, p % w, 0)) - 0.5;
            assert!((v - expected).abs() < 1e-6, "{v} vs {expected}");
        }
    }

    #[test]
    fn pure_nyquist_pattern_is_identity() {
        let (h, w) = (8, 12);
        let plane: Vec<f64> = (0..h * w)
            .map(|p| if (p / w + p % w) % 2 == 0 { 0.5 } else { -0.5 })
            .collect();
        let out = highpass_plane(&plane, h, w, 0.25).unwrap();
        for (a, b) in out.iter().zip(&plane) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn white_noise_loses_energy_and_residual_is_smooth() {
        let (h, w) = (32, 32);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let plane: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
        let out = highpass_plane(&plane, h, w, 0.25).unwrap();
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!(energy(&out) < energy(&plane));
        let residual: Vec<f64> = plane.iter().zip(&out).map(|(a, b)| a - b).collect();
        // Smoothness: neighbor differences of the residual are much smaller than those of the input.
        let roughness = |v: &[f64]| {
            (0..h)
                .flat_map(|y| (0..w - 1).map(move |x| (y, x)))
                .map(|(y, x)| (v[y * w + x + 1] - v[y * w + x]).powi(2))
                .sum::<f64>()
        };
        assert!(roughness(&residual) < 0.1 * roughness(&plane));
    }

    #[test]
    fn cutoff_validated() {
        let img = Image::constant(4, 4, [0.0; 3]).unwrap();
        assert!(highpass(&img, 0.0).is_err());
        assert!(highpass(&img, 1.0).is_err());
    }
}
