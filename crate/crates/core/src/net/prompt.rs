use super::{ModelParams, EMBED_DIM, G};
use crate::error::Result;
use crate::types::PointPrompt;
use std::f64::consts::TAU;

/// Fourier positional embedding of a point prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding(pub Vec<f64>);

impl PromptEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `[sin, cos]` of the pixel-center coordinates (mapped to `[-1, 1]`) projected
/// through the frozen Gaussian matrix, with scale 2π.
pub fn encode_prompt(params: &ModelParams, pt: PointPrompt, height: usize, width: usize) -> Result<PromptEmbedding> {
    pt.check_bounds(height, width)?;
    let y = 2.0 * (pt.row as f64 + 0.5) / height as f64 - 1.0;
    let x = 2.0 * (pt.col as f64 + 0.5) / width as f64 - 1.0;
    Ok(PromptEmbedding(fourier_features(params, y, x)))
}

/// Same features evaluated at normalized coordinates in `[-1, 1]`.
pub(crate) fn fourier_features(params: &ModelParams, y: f64, x: f64) -> Vec<f64> {
    let proj = params.slice(G::PromptProj);
    let half = EMBED_DIM / 2;
    let mut out = vec![0.0; EMBED_DIM];
    for j in 0..half {
        let z = TAU * (x * proj[j] + y * proj[half + j]);
        out[j] = z.sin();
        out[half + j] = z.cos();
    }
    out
}

/// Positional features of every cell center of a `rows`×`cols` grid.
pub(crate) fn cell_positions(params: &ModelParams, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols * EMBED_DIM);
    for r in 0..rows {
        for c in 0..cols {
            let y = 2.0 * (r as f64 + 0.5) / rows as f64 - 1.0;
            let x = 2.0 * (c as f64 + 0.5) / cols as f64 - 1.0;
            out.extend(fourier_features(params, y, x));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Seed;

    #[test]
    fn same_point_same_embedding() {
        let p = ModelParams::init(Seed(0));
        let a = encode_prompt(&p, PointPrompt::new(10, 20), 64, 64).unwrap();
        let b = encode_prompt(&p, PointPrompt::new(10, 20), 64, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), EMBED_DIM);
    }

    #[test]
    fn components_bounded() {
        let p = ModelParams::init(Seed(1));
        for r in (0..64).step_by(7) {
            for c in (0..64).step_by(5) {
                let e = encode_prompt(&p, PointPrompt::new(r, c), 64, 64).unwrap();
                assert!(e.0.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn distinct_points_differ() {
        for seed in 0..5 {
            let p = ModelParams::init(Seed(seed));
            let a = encode_prompt(&p, PointPrompt::new(3, 4), 32, 32).unwrap();
            let b = encode_prompt(&p, PointPrompt::new(3, 5), 32, 32).unwrap();
            assert_ne!(a, b);
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let p = ModelParams::init(Seed(0));
        assert!(encode_prompt(&p, PointPrompt::new(0, 32), 32, 32).is_err());
    }

    #[test]
    fn cell_center_matches_pixel_prompt() {
        let p = ModelParams::init(Seed(0));
        // Cell (1, 2) of a 4x4 grid on 32x32 pixels is centered between pixels 11/12 and 19/20.
        let cells = cell_positions(&p, 4, 4);
        let y = 2.0 * 12.0 / 32.0 - 1.0;
        let x = 2.0 * 20.0 / 32.0 - 1.0;
        let direct = fourier_features(&p, y, x);
        for (a, b) in cells[(4 + 2) * EMBED_DIM..(4 + 3) * EMBED_DIM].iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
