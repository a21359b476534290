//! Training objectives with analytic gradients, plus the Dice evaluation
//! metric.
//!
//! Everything reduces with plain left-to-right summation over the pixel
//! buffer, so values are bitwise-reproducible. Gradients are returned as
//! images of ∂value/∂pixel and are verified against central finite
//! differences in the tests.

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Predictions are clamped to this band before any log.
const CLAMP_LO: f64 = 1e-7;
const CLAMP_HI: f64 = 1.0 - 1e-7;

/// Smoothing for the soft-Dice denominator.
#[derive(Debug, Clone, Copy)]
pub struct SegLossParams {
    delta: f64,
}

impl SegLossParams {
    pub fn new(delta: f64) -> Result<Self> {
        if !delta.is_finite() || delta <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "dice smoothing must be positive and finite, got {delta}"
            )));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

impl Default for SegLossParams {
    fn default() -> Self {
        Self { delta: 1e-6 }
    }
}

/// Cross-entropy plus soft-Dice segmentation loss:
///
/// ```text
/// L = −(1/N) Σ y_n log ŷ_n  +  1 − 2Σ y_n ŷ_n / (Σ y_n² + Σ ŷ_n² + δ)
/// ```
///
/// Predictions are clamped to [1e-7, 1−1e-7] first; the gradient is zero at
/// clamped pixels (the clamp is flat there).
pub fn seg_loss(pred: &Image, truth: &Mask, params: &SegLossParams) -> Result<(f64, Image)> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let n = pred.len() as f64;
    let mut ce_sum = 0.0;
    let mut inter = 0.0; // Σ y·ŷ
    let mut truth_sq = 0.0; // Σ y²
    let mut pred_sq = 0.0; // Σ ŷ²
    for (&p_raw, &y_u8) in pred.data().iter().zip(truth.data()) {
        let p = p_raw.clamp(CLAMP_LO, CLAMP_HI);
        let y = f64::from(y_u8);
        ce_sum += y * p.ln();
        inter += y * p;
        truth_sq += y * y;
        pred_sq += p * p;
    }
    let denom = truth_sq + pred_sq + params.delta;
    let value = -ce_sum / n + (1.0 - 2.0 * inter / denom);
    let grad = Image::from_vec(
        pred.height(),
        pred.width(),
        pred.data()
            .iter()
            .zip(truth.data())
            .map(|(&p_raw, &y_u8)| {
                if !(CLAMP_LO..=CLAMP_HI).contains(&p_raw) {
                    return 0.0;
                }
                let p = p_raw;
                let y = f64::from(y_u8);
                let d_ce = -y / (n * p);
                let d_dice = (-2.0 * y * denom + 4.0 * inter * p) / (denom * denom);
                d_ce + d_dice
            })
            .collect(),
    )
    .expect("gradient shares the prediction shape");
    Ok((value, grad))
}

/// Stabilizers of the structural-similarity ratio.
#[derive(Debug, Clone, Copy)]
pub struct SsimParams {
    c1: f64,
    c2: f64,
}

impl SsimParams {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        if !c1.is_finite() || c1 <= 0.0 || !c2.is_finite() || c2 <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "ssim stabilizers must be positive and finite, got c1 = {c1}, c2 = {c2}"
            )));
        }
        Ok(Self { c1, c2 })
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { c1: 0.01, c2: 0.03 }
    }
}

/// Structural similarity with whole-image statistics (population variance):
///
/// ```text
/// S = (2 μ_A μ_B + c1)(2 σ_AB + c2) / ((μ_A² + μ_B² + c1)(σ_A² + σ_B² + c2))
/// ```
///
/// Returns the value and the gradients with respect to A and B. Numerator
/// and denominator are built from the same subexpressions, so S(A, A) is
/// exactly 1.
pub fn ssim(a: &Image, b: &Image, params: &SsimParams) -> Result<(f64, Image, Image)> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "ssim inputs differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Shape(
            "structural similarity needs at least 2 pixels".into(),
        ));
    }
    let n = a.len() as f64;
    let mu_a = a.mean();
    let mu_b = b.mean();
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        var_a += (x - mu_a) * (x - mu_a);
        var_b += (y - mu_b) * (y - mu_b);
        cov += (x - mu_a) * (y - mu_b);
    }
    var_a /= n;
    var_b /= n;
    cov /= n;
    let u = 2.0 * mu_a * mu_b + params.c1;
    let v = 2.0 * cov + params.c2;
    let p = mu_a * mu_a + mu_b * mu_b + params.c1;
    let q = var_a + var_b + params.c2;
    let value = (u * v) / (p * q);
    // ∂S/∂A_n = (∂u·v + u·∂v)/(pq) − uv(∂p·q + p·∂q)/(pq)²
    // with ∂u = 2μ_B/N, ∂v = 2(B_n−μ_B)/N, ∂p = 2μ_A/N, ∂q = 2(A_n−μ_A)/N,
    // and symmetrically for B.
    let pq = p * q;
    let grad = |own: &[f64], other: &[f64], mu_own: f64, mu_other: f64| -> Vec<f64> {
        own.iter()
            .zip(other)
            .map(|(&x, &y)| {
                let du = 2.0 * mu_other / n;
                let dv = 2.0 * (y - mu_other) / n;
                let dp = 2.0 * mu_own / n;
                let dq = 2.0 * (x - mu_own) / n;
                (du * v + u * dv) / pq - (u * v) * (dp * q + p * dq) / (pq * pq)
            })
            .collect()
    };
    let grad_a = Image::from_vec(a.height(), a.width(), grad(a.data(), b.data(), mu_a, mu_b))
        .expect("gradient shares the input shape");
    let grad_b = Image::from_vec(b.height(), b.width(), grad(b.data(), a.data(), mu_b, mu_a))
        .expect("gradient shares the input shape");
    Ok((value, grad_a, grad_b))
}

/// Weights of the two similarity terms.
#[derive(Debug, Clone, Copy)]
pub struct SimLossParams {
    l1_weight: f64,
    ssim_weight: f64,
    ssim: SsimParams,
}

impl SimLossParams {
    pub fn new(l1_weight: f64, ssim_weight: f64, ssim: SsimParams) -> Result<Self> {
        if !l1_weight.is_finite()
            || l1_weight < 0.0
            || !ssim_weight.is_finite()
            || ssim_weight < 0.0
        {
            return Err(Error::InvalidParam(format!(
                "similarity weights must be nonnegative, got {l1_weight} and {ssim_weight}"
            )));
        }
        Ok(Self {
            l1_weight,
            ssim_weight,
            ssim,
        })
    }

    pub fn l1_weight(&self) -> f64 {
        self.l1_weight
    }

    pub fn ssim_weight(&self) -> f64 {
        self.ssim_weight
    }

    pub fn ssim(&self) -> &SsimParams {
        &self.ssim
    }
}

impl Default for SimLossParams {
    fn default() -> Self {
        Self {
            l1_weight: 1.0,
            ssim_weight: 1.0,
            ssim: SsimParams::default(),
        }
    }
}

/// Latent-alignment loss pulling the student latent toward the teacher's:
///
/// ```text
/// L = w_l1 · Σ |zS_n − zI_n|  +  w_ssim · (1 − S(zS, zI))
/// ```
///
/// Zero exactly when the latents are equal. The returned gradient is with
/// respect to zS; the L1 subgradient at a tie is taken as 0.
pub fn sim_loss(z_s: &Image, z_i: &Image, params: &SimLossParams) -> Result<(f64, Image)> {
    let (s, grad_s, _) = ssim(z_s, z_i, &params.ssim)?;
    let mut l1 = 0.0;
    for (&a, &b) in z_s.data().iter().zip(z_i.data()) {
        l1 += (a - b).abs();
    }
    let value = params.l1_weight * l1 + params.ssim_weight * (1.0 - s);
    let grad = Image::from_vec(
        z_s.height(),
        z_s.width(),
        z_s.data()
            .iter()
            .zip(z_i.data())
            .zip(grad_s.data())
            .map(|((&a, &b), &gs)| {
                let sign = if a > b {
                    1.0
                } else if a < b {
                    -1.0
                } else {
                    0.0
                };
                params.l1_weight * sign - params.ssim_weight * gs
            })
            .collect(),
    )
    .expect("gradient shares the latent shape");
    Ok((value, grad))
}

/// Weights for the combined student objective.
#[derive(Debug, Clone, Copy)]
pub struct StructLossParams {
    omega1: f64,
    omega2: f64,
    seg: SegLossParams,
    sim: SimLossParams,
}

impl StructLossParams {
    pub fn new(omega1: f64, omega2: f64, seg: SegLossParams, sim: SimLossParams) -> Result<Self> {
        if !omega1.is_finite() || omega1 < 0.0 || !omega2.is_finite() || omega2 < 0.0 {
            return Err(Error::InvalidParam(format!(
                "objective weights must be nonnegative, got {omega1} and {omega2}"
            )));
        }
        Ok(Self {
            omega1,
            omega2,
            seg,
            sim,
        })
    }

    pub fn omega1(&self) -> f64 {
        self.omega1
    }

    pub fn omega2(&self) -> f64 {
        self.omega2
    }

    pub fn seg(&self) -> &SegLossParams {
        &self.seg
    }

    pub fn sim(&self) -> &SimLossParams {
        &self.sim
    }
}

impl Default for StructLossParams {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 5.0,
            seg: SegLossParams::default(),
            sim: SimLossParams::default(),
        }
    }
}

/// Combined student objective ω1·seg(ŷS, y) + ω2·sim(zS, zI); returns the
/// value and the gradients with respect to ŷS and zS.
pub fn struct_loss(
    pred_s: &Image,
    truth: &Mask,
    z_s: &Image,
    z_i: &Image,
    params: &StructLossParams,
) -> Result<(f64, Image, Image)> {
    let (seg_v, seg_g) = seg_loss(pred_s, truth, &params.seg)?;
    let (sim_v, sim_g) = sim_loss(z_s, z_i, &params.sim)?;
    let value = params.omega1 * seg_v + params.omega2 * sim_v;
    let grad_pred = seg_g.map(|g| params.omega1 * g);
    let grad_z = sim_g.map(|g| params.omega2 * g);
    Ok((value, grad_pred, grad_z))
}

/// Overlap metric 2|A∩B| / (|A| + |B|); two empty masks score 1.
pub fn dice_score(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += usize::from(x == 1 && y == 1);
    }
    let total = a.count_positive() + b.count_positive();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
