//! Scale-normalized Gaussian-derivative filtering and 2×2 symmetric eigenanalysis.
//!
//! The Hessian of an image at scale σ is computed by convolving with sampled
//! derivatives of a 2D Gaussian and multiplying by σ² so that responses are
//! comparable across scales. All 2D kernels are separable outer products of 1D
//! factors, and the convolutions here exploit that: one pass along each axis.
//!
//! Borders use mirror reflection (the edge sample is not repeated), so a
//! constant image stays constant all the way into the corners and no spurious
//! gradients appear at the frame.
//!
//! The convolution is implemented as correlation (no kernel flip). Every 1D
//! factor used here is either even or odd under t → −t, and the odd factor g′
//! only ever appears twice in the same product (the mixed derivative), so the
//! Hessian is identical under either convention.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Ascending grid of scales for multiscale filtering.
///
/// Construction validates positivity and ordering, so a `ScaleGrid` is never
/// empty and its `sigmas()` are strictly increasing.
#[derive(Debug, Clone)]
pub struct ScaleGrid {
    sigmas: Vec<f64>,
}

impl ScaleGrid {
    /// Linear grid `{min, min+step, …}` up to and including `max` (within one
    /// part in 10⁹ of a step, so binary-inexact endpoints still land).
    pub fn new(sigma_min: f64, sigma_max: f64, step: f64) -> Result<Self> {
        if !sigma_min.is_finite() || !sigma_max.is_finite() || !step.is_finite() {
            return Err(Error::InvalidParam(
                "scale grid bounds and step must be finite".into(),
            ));
        }
        if sigma_min <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "sigma-min must be positive, got {sigma_min}"
            )));
        }
        if step <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "sigma step must be positive, got {step}"
            )));
        }
        if sigma_max < sigma_min {
            return Err(Error::InvalidParam(format!(
                "scale grid is empty: sigma-min {sigma_min} exceeds sigma-max {sigma_max}"
            )));
        }
        let mut sigmas = Vec::new();
        let mut k = 0u32;
        loop {
            let s = sigma_min + f64::from(k) * step;
            if s > sigma_max + step * 1e-9 {
                break;
            }
            sigmas.push(s);
            k += 1;
        }
        Ok(Self { sigmas })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }
}

impl Default for ScaleGrid {
    /// σ ∈ {1.0, 1.5, …, 5.0}.
    fn default() -> Self {
        ScaleGrid::new(1.0, 5.0, 0.5).expect("default grid parameters are valid")
    }
}

/// Sampled 1D Gaussian and its first two derivatives at scale σ, on the
/// support t ∈ [−r, r] with r = ⌈4σ⌉.
///
/// Truncation at 4σ strands a few parts in 10⁵ of mass and moments outside
/// the support, which is enough to leak a visible response on constant and
/// quadratic images. The samples are therefore corrected to satisfy exactly
/// the three integral identities the discrete operators rely on:
///
/// * Σ g = 1 (smoothing preserves constants),
/// * Σ g″ = 0 (second derivative kills constants),
/// * Σ t²·g″ = 2 (second derivative of t² is 2, at every σ).
///
/// g′ is odd, so its sum vanishes by symmetry and it is left as sampled.
#[derive(Debug, Clone)]
pub struct DerivativeKernels {
    sigma: f64,
    radius: usize,
    g: Vec<f64>,
    g1: Vec<f64>,
    g2: Vec<f64>,
}

impl DerivativeKernels {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "kernel scale must be positive and finite, got {sigma}"
            )));
        }
        let radius = (4.0 * sigma).ceil() as usize;
        let n = 2 * radius + 1;
        let s2 = sigma * sigma;
        let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
        let mut g = vec![0.0; n];
        let mut g1 = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        for idx in 0..n {
            let t = idx as f64 - radius as f64;
            let gt = norm * (-t * t / (2.0 * s2)).exp();
            g[idx] = gt;
            g1[idx] = -t / s2 * gt;
            g2[idx] = (t * t - s2) / (s2 * s2) * gt;
        }
        let mass: f64 = g.iter().sum();
        for v in &mut g {
            *v /= mass;
        }
        let mean: f64 = g2.iter().sum::<f64>() / n as f64;
        for v in &mut g2 {
            *v -= mean;
        }
        let second_moment: f64 = g2
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let t = idx as f64 - radius as f64;
                t * t * v
            })
            .sum();
        let gain = 2.0 / second_moment;
        for v in &mut g2 {
            *v *= gain;
        }
        Ok(Self {
            sigma,
            radius,
            g,
            g1,
            g2,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn g1(&self) -> &[f64] {
        &self.g1
    }

    pub fn g2(&self) -> &[f64] {
        &self.g2
    }

    /// 2D ∂²G/∂i² kernel as an outer product (row factor g″, column factor g).
    pub fn gxx(&self) -> Image {
        outer(&self.g2, &self.g)
    }

    /// 2D ∂²G/∂i∂j kernel (both factors g′).
    pub fn gxy(&self) -> Image {
        outer(&self.g1, &self.g1)
    }

    /// 2D ∂²G/∂j² kernel (row factor g, column factor g″).
    pub fn gyy(&self) -> Image {
        outer(&self.g, &self.g2)
    }
}

fn outer(col: &[f64], row: &[f64]) -> Image {
    Image::from_fn(col.len(), row.len(), |i, j| col[i] * row[j])
}

/// Mirror-reflected index (the edge sample is not repeated): …2 1 | 0 1 2 … n−1 | n−2 n−3…
fn reflect(idx: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * n - 2;
    let mut p = idx.rem_euclid(period);
    if p >= n {
        p = period - p;
    }
    p as usize
}

/// Correlate along the column axis (the kernel slides within each row).
///
/// Rows are distributed across threads; each output element is one serial dot
/// product, so the result is identical at every thread count.
fn conv_cols(x: &Image, k: &[f64]) -> Image {
    let (h, w) = (x.height(), x.width());
    let r = (k.len() - 1) as isize / 2;
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(i, row_out)| {
        let row_in = &x.data()[i * w..(i + 1) * w];
        for (j, o) in row_out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (m, &kv) in k.iter().enumerate() {
                let jj = reflect(j as isize + m as isize - r, w);
                acc += kv * row_in[jj];
            }
            *o = acc;
        }
    });
    Image::from_vec(h, w, out).expect("convolution preserves shape")
}

/// Correlate along the row axis (the kernel slides within each column).
fn conv_rows(x: &Image, k: &[f64]) -> Image {
    let (h, w) = (x.height(), x.width());
    let r = (k.len() - 1) as isize / 2;
    let mut out = vec![0.0; h * w];
    out.par_chunks_mut(w).enumerate().for_each(|(i, row_out)| {
        // Accumulate tap by tap so each output element sees the taps in the
        // same order as a scalar loop would.
        for (m, &kv) in k.iter().enumerate() {
            let ii = reflect(i as isize + m as isize - r, h);
            let row_in = &x.data()[ii * w..(ii + 1) * w];
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o += kv * v;
            }
        }
    });
    Image::from_vec(h, w, out).expect("convolution preserves shape")
}

/// Scale-normalized Hessian components of an image at one scale:
/// each is σ² · (x ∗ sampled second-derivative kernel).
#[derive(Debug, Clone)]
pub struct HessianField {
    pub sigma: f64,
    pub hxx: Image,
    pub hxy: Image,
    pub hyy: Image,
}

impl HessianField {
    pub fn components_at(&self, i: usize, j: usize) -> (f64, f64, f64) {
        (self.hxx[(i, j)], self.hxy[(i, j)], self.hyy[(i, j)])
    }

    /// Pack as a 3-channel field (Hxx, Hxy, Hyy) for serialization.
    pub fn to_field(&self) -> crate::image::MultiChannelField {
        crate::image::MultiChannelField::from_channels(&[&self.hxx, &self.hxy, &self.hyy])
            .expect("components share one shape")
    }
}

pub fn hessian_at_scale(x: &Image, sigma: f64) -> Result<HessianField> {
    if x.is_empty() {
        return Err(Error::Shape("cannot filter an empty image".into()));
    }
    let k = DerivativeKernels::new(sigma)?;
    let s2 = sigma * sigma;
    let hxx = conv_rows(&conv_cols(x, k.g()), k.g2()).map(|v| s2 * v);
    let hxy = conv_rows(&conv_cols(x, k.g1()), k.g1()).map(|v| s2 * v);
    let hyy = conv_rows(&conv_cols(x, k.g2()), k.g()).map(|v| s2 * v);
    Ok(HessianField {
        sigma,
        hxx,
        hxy,
        hyy,
    })
}

/// Eigen decomposition of a symmetric 2×2 matrix, ordered by |λ|:
/// |λ1| ≤ |λ2|, each eigenvector unit-length with its first nonzero
/// component ≥ 0 (and no negative zeros).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenPair {
    pub lambda1: f64,
    pub lambda2: f64,
    pub v1: [f64; 2],
    pub v2: [f64; 2],
}

/// Eigenvalues and eigenvectors of [[hxx, hxy], [hxy, hyy]].
///
/// The larger-magnitude eigenvalue is taken as mean ± disc with the sign of
/// the mean, which never cancels; the smaller one comes from the determinant
/// quotient. A repeated eigenvalue (disc = 0) has no preferred directions and
/// yields the fixed basis (1,0), (0,1).
pub fn eig2x2(hxx: f64, hxy: f64, hyy: f64) -> EigenPair {
    let (a, b, c) = (hxx, hxy, hyy);
    let mean = 0.5 * (a + c);
    let disc = f64::hypot(0.5 * (a - c), b);
    let big = if mean >= 0.0 {
        mean + disc
    } else {
        mean - disc
    };
    let (lambda1, lambda2) = if big == 0.0 {
        (0.0, 0.0)
    } else {
        ((a * c - b * b) / big, big)
    };
    if disc == 0.0 {
        return EigenPair {
            lambda1,
            lambda2,
            v1: [1.0, 0.0],
            v2: [0.0, 1.0],
        };
    }
    // (A − λ2·I) annihilates v2, so v2 is orthogonal to either row of that
    // matrix; the larger-norm candidate avoids the row that degenerates.
    let u = [b, lambda2 - a];
    let w = [lambda2 - c, b];
    let pick = if u[0] * u[0] + u[1] * u[1] >= w[0] * w[0] + w[1] * w[1] {
        u
    } else {
        w
    };
    let nrm = f64::hypot(pick[0], pick[1]);
    let e2 = [pick[0] / nrm, pick[1] / nrm];
    let e1 = [-e2[1], e2[0]];
    EigenPair {
        lambda1,
        lambda2,
        v1: canonical(e1),
        v2: canonical(e2),
    }
}

/// Flip so the first nonzero component is positive; the `+ 0.0` turns any
/// −0.0 into +0.0 so canonical vectors are bitwise comparable.
fn canonical(v: [f64; 2]) -> [f64; 2] {
    let lead = if v[0] != 0.0 { v[0] } else { v[1] };
    if lead < 0.0 {
        [-v[0] + 0.0, -v[1] + 0.0]
    } else {
        [v[0] + 0.0, v[1] + 0.0]
    }
}

/// ‖H‖_F² = Hxx² + 2Hxy² + Hyy² for symmetric H; equals λ1² + λ2².
pub fn frobenius_norm_sq(hxx: f64, hxy: f64, hyy: f64) -> f64 {
    hxx * hxx + 2.0 * hxy * hxy + hyy * hyy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    #[test]
    fn grid_default_covers_one_to_five_by_half() {
        let grid = ScaleGrid::default();
        let expect: Vec<f64> = (0..9).map(|k| 1.0 + 0.5 * k as f64).collect();
        assert_eq!(grid.sigmas(), expect.as_slice());
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(ScaleGrid::new(3.0, 1.0, 0.5).is_err());
        assert!(ScaleGrid::new(0.0, 1.0, 0.5).is_err());
        assert!(ScaleGrid::new(1.0, 2.0, 0.0).is_err());
        assert!(ScaleGrid::new(1.0, 2.0, -0.5).is_err());
        assert!(ScaleGrid::new(f64::NAN, 2.0, 0.5).is_err());
    }

    #[test]
    fn grid_single_point() {
        let grid = ScaleGrid::new(2.0, 2.0, 0.5).unwrap();
        assert_eq!(grid.sigmas(), &[2.0]);
    }

    #[test]
    fn kernels_reject_nonpositive_sigma() {
        assert!(DerivativeKernels::new(0.0).is_err());
        assert!(DerivativeKernels::new(-1.0).is_err());
        assert!(DerivativeKernels::new(f64::NAN).is_err());
    }

    #[test]
    fn kernel_support_is_four_sigma() {
        assert_eq!(DerivativeKernels::new(1.0).unwrap().radius(), 4);
        assert_eq!(DerivativeKernels::new(1.5).unwrap().radius(), 6);
        assert_eq!(DerivativeKernels::new(2.5).unwrap().radius(), 10);
        assert_eq!(DerivativeKernels::new(1.0).unwrap().g().len(), 9);
    }

    #[test]
    fn gxy_antisymmetric_with_zero_sum() {
        let k = DerivativeKernels::new(2.0).unwrap();
        let gxy = k.gxy();
        let n = gxy.height();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(gxy[(i, j)], -gxy[(n - 1 - i, j)]);
                assert_eq!(gxy[(i, j)], -gxy[(i, n - 1 - j)]);
            }
        }
        let sum: f64 = gxy.data().iter().sum();
        assert!(sum.abs() < 1e-10);
    }

    #[test]
    fn gxx_zero_sum_and_center_value() {
        for sigma in [1.0, 2.0, 3.5] {
            let k = DerivativeKernels::new(sigma).unwrap();
            let sum: f64 = k.gxx().data().iter().sum();
            assert!(sum.abs() < 1e-6, "sigma {sigma}: sum {sum}");
        }
        // ∂²G/∂i² at the origin is −1/(2πσ⁴); the moment corrections shift
        // the center sample by a fraction of the truncated tail (≈0.25% at
        // σ = 2), which is the price of exact constant/quadratic behavior.
        let k = DerivativeKernels::new(2.0).unwrap();
        let r = k.radius();
        let center = k.gxx()[(r, r)];
        let analytic = -1.0 / (32.0 * std::f64::consts::PI);
        assert!(
            ((center - analytic) / analytic).abs() < 5e-3,
            "center {center} vs analytic {analytic}"
        );
    }

    #[test]
    fn constant_image_has_zero_hessian() {
        let x = Image::from_fn(32, 32, |_, _| 0.7);
        for sigma in [1.0, 5.0] {
            let h = hessian_at_scale(&x, sigma).unwrap();
            for img in [&h.hxx, &h.hxy, &h.hyy] {
                let worst = img.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(worst < 1e-6, "sigma {sigma}: residual {worst}");
            }
        }
    }

    #[test]
    fn reflection_keeps_constant_images_constant_at_borders() {
        let x = Image::from_fn(9, 7, |_, _| 0.7);
        let k = DerivativeKernels::new(1.5).unwrap();
        for out in [conv_cols(&x, k.g()), conv_rows(&x, k.g())] {
            let first = out[(0, 0)];
            assert!((first - 0.7).abs() < 1e-12);
            assert!(out.data().iter().all(|&v| v == first));
        }
    }

    #[test]
    fn quadratic_image_recovers_second_derivative() {
        let x = Image::from_fn(64, 64, |i, _| (i * i) as f64);
        for sigma in [1.0, 2.0, 3.0] {
            let h = hessian_at_scale(&x, sigma).unwrap();
            let m = (4.0 * sigma).ceil() as usize;
            let want = 2.0 * sigma * sigma;
            for i in m..64 - m {
                for j in m..64 - m {
                    assert!(
                        (h.hxx[(i, j)] - want).abs() / want < 1e-3,
                        "sigma {sigma} at ({i},{j}): {}",
                        h.hxx[(i, j)]
                    );
                    assert!(h.hxy[(i, j)].abs() / want < 1e-3);
                    assert!(h.hyy[(i, j)].abs() / want < 1e-3);
                }
            }
        }
    }

    #[test]
    fn mixed_partial_matches_transposed_computation() {
        let mut rng = Pcg32::new(41);
        let x = Image::from_fn(48, 40, |_, _| rng.next_f64());
        let xt = Image::from_fn(40, 48, |i, j| x[(j, i)]);
        let hxy = hessian_at_scale(&x, 1.5).unwrap().hxy;
        let hxy_t = hessian_at_scale(&xt, 1.5).unwrap().hxy;
        let mut worst = 0.0f64;
        for i in 0..48 {
            for j in 0..40 {
                worst = worst.max((hxy[(i, j)] - hxy_t[(j, i)]).abs());
            }
        }
        assert!(worst < 1e-10, "transpose mismatch {worst}");
    }

    #[test]
    fn empty_image_is_rejected() {
        let x = Image::zeros(0, 0);
        assert!(hessian_at_scale(&x, 1.0).is_err());
    }

    #[test]
    fn single_column_image_filters_without_panicking() {
        let x = Image::from_fn(16, 1, |i, _| (i as f64 / 15.0).sin());
        let h = hessian_at_scale(&x, 1.0).unwrap();
        assert!(h.hxx.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reflect_is_identity_in_range_and_mirrors_outside() {
        for j in 0..5isize {
            assert_eq!(reflect(j, 5), j as usize);
        }
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(-7, 5), 1);
        assert_eq!(reflect(12, 5), 4);
        assert_eq!(reflect(-3, 1), 0);
    }

    #[test]
    fn eig_diagonal_matrix() {
        let e = eig2x2(2.0, 0.0, -5.0);
        assert_eq!(e.lambda1, 2.0);
        assert_eq!(e.lambda2, -5.0);
        assert_eq!(e.v1, [1.0, 0.0]);
        assert_eq!(e.v2, [0.0, 1.0]);
    }

    #[test]
    fn eig_repeated_eigenvalue_uses_fixed_basis() {
        let e = eig2x2(1.0, 0.0, 1.0);
        assert_eq!(e.lambda1, 1.0);
        assert_eq!(e.lambda2, 1.0);
        assert_eq!(e.v1, [1.0, 0.0]);
        assert_eq!(e.v2, [0.0, 1.0]);
    }

    #[test]
    fn eig_zero_matrix() {
        let e = eig2x2(0.0, 0.0, 0.0);
        assert_eq!(e.lambda1, 0.0);
        assert_eq!(e.lambda2, 0.0);
        assert_eq!(e.v1, [1.0, 0.0]);
        assert_eq!(e.v2, [0.0, 1.0]);
    }

    fn check_eig(a: f64, b: f64, c: f64) {
        let e = eig2x2(a, b, c);
        assert!(e.lambda1.abs() <= e.lambda2.abs() + 1e-12);
        let scale = 1.0f64.max(a.abs()).max(b.abs()).max(c.abs());
        // reconstruction λ1·v1v1ᵀ + λ2·v2v2ᵀ
        let r = |p: usize, q: usize| e.lambda1 * e.v1[p] * e.v1[q] + e.lambda2 * e.v2[p] * e.v2[q];
        assert!((r(0, 0) - a).abs() < 1e-10 * scale, "({a},{b},{c})");
        assert!((r(0, 1) - b).abs() < 1e-10 * scale, "({a},{b},{c})");
        assert!((r(1, 1) - c).abs() < 1e-10 * scale, "({a},{b},{c})");
        for v in [e.v1, e.v2] {
            assert!((f64::hypot(v[0], v[1]) - 1.0).abs() < 1e-12);
            let lead = if v[0] != 0.0 { v[0] } else { v[1] };
            assert!(lead > 0.0, "sign convention violated for {v:?}");
            assert!(v[0].is_sign_positive() || v[0] != 0.0);
            assert!(v[1].is_sign_positive() || v[1] != 0.0);
        }
        assert!((e.v1[0] * e.v2[0] + e.v1[1] * e.v2[1]).abs() < 1e-12);
    }

    #[test]
    fn eig_reconstructs_random_matrices() {
        let mut rng = Pcg32::new(7);
        for _ in 0..10_000 {
            let a = rng.next_range(-10.0, 10.0);
            let b = rng.next_range(-10.0, 10.0);
            let c = rng.next_range(-10.0, 10.0);
            check_eig(a, b, c);
        }
        // near-degenerate and axis-aligned corners
        check_eig(1.0, 1e-300, 1.0);
        check_eig(-3.0, 0.0, -3.0);
        check_eig(0.0, 2.0, 0.0);
        check_eig(5.0, 0.0, 0.0);
        check_eig(1.0, 1e-9, 1.0 + 1e-9);
    }

    #[test]
    fn frobenius_matches_eigenvalue_norm() {
        let mut rng = Pcg32::new(11);
        for _ in 0..1000 {
            let a = rng.next_range(-4.0, 4.0);
            let b = rng.next_range(-4.0, 4.0);
            let c = rng.next_range(-4.0, 4.0);
            let e = eig2x2(a, b, c);
            let f2 = frobenius_norm_sq(a, b, c);
            let l2 = e.lambda1 * e.lambda1 + e.lambda2 * e.lambda2;
            if f2 > 0.0 {
                assert!((f2 - l2).abs() / f2 < 1e-8);
            } else {
                assert_eq!(l2, 0.0);
            }
        }
    }

    #[test]
    fn rotating_the_image_rotates_the_eigenvectors() {
        // Gaussian-profile horizontal bar; rotated a quarter turn it becomes
        // vertical, so eigenvalues must agree and eigenvectors must follow.
        let n = 48;
        let x = Image::from_fn(n, n, |i, _| {
            let d = i as f64 - 23.0;
            (-d * d / 8.0).exp()
        });
        // y[i][j] = x[j][n−1−i]: row-axis unit vectors map (vr,vc) → (−vc,vr).
        let y = Image::from_fn(n, n, |i, j| x[(j, n - 1 - i)]);
        let hx = hessian_at_scale(&x, 2.0).unwrap();
        let hy = hessian_at_scale(&y, 2.0).unwrap();
        let margin = 8;
        for i in margin..n - margin {
            for j in margin..n - margin {
                let (xi, xj) = (j, n - 1 - i);
                let (a, b, c) = hx.components_at(xi, xj);
                let ex = eig2x2(a, b, c);
                let (a2, b2, c2) = hy.components_at(i, j);
                let ey = eig2x2(a2, b2, c2);
                assert!((ex.lambda1 - ey.lambda1).abs() < 1e-4);
                assert!((ex.lambda2 - ey.lambda2).abs() < 1e-4);
                // Direction comparison only where the direction is defined:
                // a near-repeated eigenvalue has no stable eigenbasis.
                let gap = f64::hypot(0.5 * (a - c), b);
                if gap > 1e-6 * (1.0 + frobenius_norm_sq(a, b, c).sqrt()) {
                    let rot = [-ex.v2[1], ex.v2[0]];
                    let dot = (rot[0] * ey.v2[0] + rot[1] * ey.v2[1]).abs();
                    assert!(dot > 1.0 - 1e-4, "({i},{j}): |dot| {dot}");
                }
            }
        }
    }
}
