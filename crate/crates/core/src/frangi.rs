//! Frangi vesselness and multiscale optimal-scale selection.
//!
//! Per pixel and scale, the Hessian eigenvalues (|λ1| ≤ |λ2|) feed the
//! classical two-factor response
//!
//! ```text
//! V = 0                                            if λ2 ≥ 0
//! V = exp(−R_B²/2β²) · (1 − exp(−S²/2c²))          otherwise
//! ```
//!
//! with R_B = λ1/λ2 penalizing blob-like isotropy and S = ‖H‖_F rewarding
//! any second-order structure at all. Bright tubes on dark background make
//! λ2 strongly negative across the tube, so the first branch suppresses dark
//! tubes and edges where curvature is positive.
//!
//! The multiscale pass scans a σ grid and keeps, independently per pixel, the
//! scale that maximizes V, together with the scale-normalized Hessian at that
//! winning scale for downstream descriptors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalespace::{eig2x2, frobenius_norm_sq, hessian_at_scale, HessianField, ScaleGrid};

/// Sensitivity constants: β divides the blobness ratio, c divides the
/// structure strength. Both strictly positive; construction enforces it.
#[derive(Debug, Clone, Copy)]
pub struct FrangiParams {
    beta: f64,
    c: f64,
}

impl FrangiParams {
    pub fn new(beta: f64, c: f64) -> Result<Self> {
        if !beta.is_finite() || beta <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "beta must be positive and finite, got {beta}"
            )));
        }
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "c must be positive and finite, got {c}"
            )));
        }
        Ok(Self { beta, c })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

impl Default for FrangiParams {
    fn default() -> Self {
        Self { beta: 0.5, c: 0.5 }
    }
}

/// Vesselness of one precomputed Hessian field. Exactly 0 wherever λ2 ≥ 0
/// (positive curvature or flat), otherwise in (0, 1).
pub fn vesselness_at_scale(hess: &HessianField, params: &FrangiParams) -> Image {
    let two_beta_sq = 2.0 * params.beta * params.beta;
    let two_c_sq = 2.0 * params.c * params.c;
    let (h, w) = (hess.hxx.height(), hess.hxx.width());
    let mut out = vec![0.0; h * w];
    out.par_iter_mut().enumerate().for_each(|(n, o)| {
        let a = hess.hxx.data()[n];
        let b = hess.hxy.data()[n];
        let c = hess.hyy.data()[n];
        let e = eig2x2(a, b, c);
        *o = if e.lambda2 >= 0.0 {
            0.0
        } else {
            let rb = e.lambda1 / e.lambda2;
            let s2 = frobenius_norm_sq(a, b, c);
            (-(rb * rb) / two_beta_sq).exp() * (1.0 - (-s2 / two_c_sq).exp())
        };
    });
    Image::from_vec(h, w, out).expect("vesselness preserves shape")
}

/// Per-pixel result of the σ grid search: the winning response, the winning
/// scale, and the scale-normalized Hessian components at that scale.
#[derive(Debug, Clone)]
pub struct VesselnessResult {
    pub vesselness: Image,
    pub sigma_star: Image,
    pub hxx: Image,
    pub hxy: Image,
    pub hyy: Image,
}

impl VesselnessResult {
    pub fn hessian_at(&self, i: usize, j: usize) -> (f64, f64, f64) {
        (self.hxx[(i, j)], self.hxy[(i, j)], self.hyy[(i, j)])
    }
}

/// Grid search σ* = argmax V(σ), scanned in ascending order with strict
/// improvement required, so ties resolve to the smallest scale.
pub fn multiscale_vesselness(
    x: &Image,
    grid: &ScaleGrid,
    params: &FrangiParams,
) -> Result<VesselnessResult> {
    let mut best: Option<VesselnessResult> = None;
    for &sigma in grid.sigmas() {
        let hess = hessian_at_scale(x, sigma)?;
        let v = vesselness_at_scale(&hess, params);
        match &mut best {
            None => {
                let sigma_star = Image::from_fn(x.height(), x.width(), |_, _| sigma);
                best = Some(VesselnessResult {
                    vesselness: v,
                    sigma_star,
                    hxx: hess.hxx,
                    hxy: hess.hxy,
                    hyy: hess.hyy,
                });
            }
            Some(b) => {
                for n in 0..v.len() {
                    if v.data()[n] > b.vesselness.data()[n] {
                        b.vesselness.data_mut()[n] = v.data()[n];
                        b.sigma_star.data_mut()[n] = sigma;
                        b.hxx.data_mut()[n] = hess.hxx.data()[n];
                        b.hxy.data_mut()[n] = hess.hxy.data()[n];
                        b.hyy.data_mut()[n] = hess.hyy.data()[n];
                    }
                }
            }
        }
    }
    best.ok_or_else(|| Error::InvalidParam("scale grid is empty".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    fn field(hxx: f64, hxy: f64, hyy: f64) -> HessianField {
        HessianField {
            sigma: 1.0,
            hxx: Image::from_fn(1, 1, |_, _| hxx),
            hxy: Image::from_fn(1, 1, |_, _| hxy),
            hyy: Image::from_fn(1, 1, |_, _| hyy),
        }
    }

    /// Horizontal bright bar with a Gaussian cross-section of scale w/4,
    /// which puts the best-response scale at w/(2√2).
    fn bar_phantom(height: usize, width: usize, bar_width: f64) -> Image {
        let center = height as f64 / 2.0;
        let s = bar_width / 4.0;
        Image::from_fn(height, width, |i, _| {
            let d = i as f64 - center;
            (-d * d / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn params_reject_nonpositive_constants() {
        assert!(FrangiParams::new(0.0, 0.5).is_err());
        assert!(FrangiParams::new(0.5, -1.0).is_err());
        assert!(FrangiParams::new(f64::NAN, 0.5).is_err());
        assert!(FrangiParams::new(0.5, 0.5).is_ok());
    }

    #[test]
    fn positive_lambda2_gives_exact_zero() {
        let p = FrangiParams::default();
        // dark tube: both eigenvalues positive
        assert_eq!(vesselness_at_scale(&field(1.0, 0.0, 2.0), &p)[(0, 0)], 0.0);
        // mixed-sign with the dominant one positive
        assert_eq!(vesselness_at_scale(&field(5.0, 0.0, -1.0), &p)[(0, 0)], 0.0);
    }

    #[test]
    fn flat_pixel_gives_exact_zero() {
        let p = FrangiParams::default();
        assert_eq!(vesselness_at_scale(&field(0.0, 0.0, 0.0), &p)[(0, 0)], 0.0);
    }

    #[test]
    fn ideal_line_response_value() {
        // λ1 = 0, λ2 = −1 with β = c = 0.5: V = 1·(1 − e⁻²)
        let p = FrangiParams::default();
        let v = vesselness_at_scale(&field(0.0, 0.0, -1.0), &p)[(0, 0)];
        assert!((v - 0.864665).abs() < 1e-6, "v = {v}");
        assert!((v - (1.0 - (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn response_stays_in_unit_interval() {
        let p = FrangiParams::default();
        let mut rng = Pcg32::new(3);
        for _ in 0..5 {
            let x = Image::from_fn(32, 32, |_, _| rng.next_f64());
            let hess = hessian_at_scale(&x, 1.5).unwrap();
            let v = vesselness_at_scale(&hess, &p);
            assert!(v.data().iter().all(|&t| (0.0..=1.0).contains(&t)));
        }
    }

    #[test]
    fn constant_image_selects_smallest_scale_with_zero_response() {
        let x = Image::from_fn(24, 24, |_, _| 0.3);
        let r = multiscale_vesselness(&x, &ScaleGrid::default(), &FrangiParams::default()).unwrap();
        assert!(r.vesselness.data().iter().all(|&v| v == 0.0));
        assert!(r.sigma_star.data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn single_scale_grid_matches_direct_evaluation() {
        let mut rng = Pcg32::new(9);
        let x = Image::from_fn(24, 24, |_, _| rng.next_f64());
        let grid = ScaleGrid::new(2.0, 2.0, 0.5).unwrap();
        let p = FrangiParams::default();
        let multi = multiscale_vesselness(&x, &grid, &p).unwrap();
        let single = vesselness_at_scale(&hessian_at_scale(&x, 2.0).unwrap(), &p);
        assert_eq!(multi.vesselness.data(), single.data());
        assert!(multi.sigma_star.data().iter().all(|&s| s == 2.0));
    }

    #[test]
    fn winner_dominates_every_scale() {
        let mut rng = Pcg32::new(17);
        let x = Image::from_fn(24, 24, |_, _| rng.next_f64());
        let grid = ScaleGrid::default();
        let p = FrangiParams::default();
        let multi = multiscale_vesselness(&x, &grid, &p).unwrap();
        for &sigma in grid.sigmas() {
            let v = vesselness_at_scale(&hessian_at_scale(&x, sigma).unwrap(), &p);
            for n in 0..v.len() {
                assert!(multi.vesselness.data()[n] >= v.data()[n]);
            }
        }
    }

    #[test]
    fn bar_centerline_scale_tracks_width() {
        let x = bar_phantom(64, 128, 8.0);
        let r = multiscale_vesselness(&x, &ScaleGrid::default(), &FrangiParams::default()).unwrap();
        let mut row: Vec<f64> = (0..128).map(|j| r.sigma_star[(32, j)]).collect();
        row.sort_by(f64::total_cmp);
        let median = row[row.len() / 2];
        let target = 8.0 / (2.0 * 2.0f64.sqrt());
        assert!(
            (median - target).abs() <= 0.5,
            "median sigma* {median} vs {target}"
        );
    }

    #[test]
    fn intensity_scaling_preserves_branch_and_blobness_ratio() {
        let x = bar_phantom(64, 64, 8.0);
        let half = x.map(|v| 0.5 * v);
        let h1 = hessian_at_scale(&x, 2.0).unwrap();
        let h2 = hessian_at_scale(&half, 2.0).unwrap();
        for j in 0..64 {
            let (a1, b1, c1) = h1.components_at(32, j);
            let (a2, b2, c2) = h2.components_at(32, j);
            let e1 = eig2x2(a1, b1, c1);
            let e2 = eig2x2(a2, b2, c2);
            assert!(e1.lambda2 < 0.0 && e2.lambda2 < 0.0);
            let rb1 = e1.lambda1 / e1.lambda2;
            let rb2 = e2.lambda1 / e2.lambda2;
            assert!((rb1 - rb2).abs() < 1e-10, "column {j}: {rb1} vs {rb2}");
        }
    }

    #[test]
    fn constant_offset_leaves_response_unchanged() {
        let x = bar_phantom(48, 48, 6.0);
        let shifted = x.map(|v| v + 0.17);
        let grid = ScaleGrid::default();
        let p = FrangiParams::default();
        let a = multiscale_vesselness(&x, &grid, &p).unwrap();
        let b = multiscale_vesselness(&shifted, &grid, &p).unwrap();
        let mut worst = 0.0f64;
        for n in 0..a.vesselness.len() {
            worst = worst.max((a.vesselness.data()[n] - b.vesselness.data()[n]).abs());
        }
        assert!(worst < 1e-6, "offset changed response by {worst}");
    }
}
