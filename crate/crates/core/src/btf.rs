//! Bipolar tensor field: a per-pixel pair of scaled eigenvectors that loads
//! bright tubular pixels onto the tangent direction and background pixels
//! onto the orthogonal one.
//!
//! The magnitudes combine a global intensity rank with a local shape factor:
//!
//! ```text
//! α1 = P(x ≤ x_ij) · exp(−ε λ1²/‖H‖_F²)
//! α2 = P(x > x_ij) · exp(−ε λ2²/‖H‖_F²)
//! ```
//!
//! On a bright vessel the pixel ranks high (P(≤) large) and λ1 ≈ 0, so α1
//! dominates and the first pole α1·v1 points along the vessel. On background
//! the rank factor flips and |λ2| ≫ 0 near structures, so the second pole
//! α2·v2 dominates. The stacked field Ψ = (α1·v1, α2·v2) is the 4-channel
//! network input downstream.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frangi::{multiscale_vesselness, FrangiParams};
use crate::image::{Image, MultiChannelField};
use crate::scalespace::{eig2x2, frobenius_norm_sq, EigenPair, ScaleGrid};

/// Below this squared Frobenius norm a Hessian is considered flat.
///
/// Exactly-constant regions do not produce exactly-zero components: the
/// kernel corrections leave ~1e-17-scale crumbs that σ² amplifies to at most
/// ~1e-14 per component (F² ≤ ~4e-28), while any structural response at
/// meaningful contrast has F² ≥ ~1e-17. The threshold sits in the middle of
/// that gulf so flat pixels take the defined limit (shape factors = 1,
/// repeated-eigenvalue basis) instead of amplifying rounding noise.
pub const FLAT_FROB_SQ: f64 = 1e-24;

/// Shape-factor sensitivity ε; strictly positive, default 0.5.
#[derive(Debug, Clone, Copy)]
pub struct BtfParams {
    epsilon: f64,
}

impl BtfParams {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

impl Default for BtfParams {
    fn default() -> Self {
        Self { epsilon: 0.5 }
    }
}

/// Exact order statistics of an image's intensities.
///
/// `p_le` counts ranks directly, so P(x ≤ max) = 1 with no rounding, and
/// `p_gt` is the floating-point complement 1 − P(≤), which for any P(≤) in
/// [0,1] satisfies P(≤) + P(>) == 1 exactly (the sum rounds back to 1.0 even
/// in the half-ulp tie case).
#[derive(Debug, Clone)]
pub struct CdfTable {
    sorted: Vec<f64>,
}

impl CdfTable {
    pub fn new(x: &Image) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Shape(
                "empty image has no intensity distribution".into(),
            ));
        }
        let mut sorted = x.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self { sorted })
    }

    /// P(x ≤ t) = #{values ≤ t} / n.
    pub fn p_le(&self, t: f64) -> f64 {
        let count = self.sorted.partition_point(|&v| v <= t);
        count as f64 / self.sorted.len() as f64
    }

    /// P(x > t) = 1 − P(x ≤ t).
    pub fn p_gt(&self, t: f64) -> f64 {
        1.0 - self.p_le(t)
    }
}

/// Pole magnitudes for one pixel given its eigen pair, squared Frobenius
/// norm, and intensity ranks. Both results lie in [0, 1].
pub fn alpha_magnitudes(
    eig: &EigenPair,
    frob_sq: f64,
    p_le: f64,
    p_gt: f64,
    params: &BtfParams,
) -> (f64, f64) {
    if frob_sq <= FLAT_FROB_SQ {
        return (p_le, p_gt);
    }
    let f1 = (-params.epsilon * eig.lambda1 * eig.lambda1 / frob_sq).exp();
    let f2 = (-params.epsilon * eig.lambda2 * eig.lambda2 / frob_sq).exp();
    (p_le * f1, p_gt * f2)
}

/// Assemble the 4-channel field (α1·v1_x, α1·v1_y, α2·v2_x, α2·v2_y) using
/// the scale-normalized Hessian at each pixel's optimal scale.
pub fn build_btf(
    x: &Image,
    grid: &ScaleGrid,
    fp: &FrangiParams,
    bp: &BtfParams,
) -> Result<MultiChannelField> {
    let res = multiscale_vesselness(x, grid, fp)?;
    let cdf = CdfTable::new(x)?;
    let (h, w) = (x.height(), x.width());
    let quads: Vec<[f64; 4]> = (0..h * w)
        .into_par_iter()
        .map(|n| {
            let (mut a, mut b, mut c) = (res.hxx.data()[n], res.hxy.data()[n], res.hyy.data()[n]);
            let mut frob_sq = frobenius_norm_sq(a, b, c);
            if frob_sq <= FLAT_FROB_SQ {
                // flat: fall back to the repeated-eigenvalue basis
                (a, b, c) = (0.0, 0.0, 0.0);
                frob_sq = 0.0;
            }
            let e = eig2x2(a, b, c);
            let t = x.data()[n];
            let (a1, a2) = alpha_magnitudes(&e, frob_sq, cdf.p_le(t), cdf.p_gt(t), bp);
            [a1 * e.v1[0], a1 * e.v1[1], a2 * e.v2[0], a2 * e.v2[1]]
        })
        .collect();
    let mut field = MultiChannelField::zeros(4, h, w);
    for (n, q) in quads.iter().enumerate() {
        for (ch, &v) in q.iter().enumerate() {
            field.channel_mut(ch)[n] = v;
        }
    }
    Ok(field)
}

/// How to visualize a 4-channel field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// One ellipse per spacing×spacing block, axes α1·v1 and α2·v2.
    Glyph,
    /// Per-pixel color: v1 orientation → hue, α1 → value.
    Hue,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "glyph" => Ok(RenderMode::Glyph),
            "hue" => Ok(RenderMode::Hue),
            other => Err(Error::InvalidParam(format!(
                "render mode must be 'glyph' or 'hue', got '{other}'"
            ))),
        }
    }
}

/// Row-major 8-bit RGB raster (3 bytes per pixel).
#[derive(Debug, Clone)]
pub struct RgbRaster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbRaster {
    pub fn black(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; 3 * height * width],
        }
    }

    pub fn put(&mut self, i: usize, j: usize, rgb: [u8; 3]) {
        let n = 3 * (i * self.width + j);
        self.data[n..n + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, i: usize, j: usize) -> [u8; 3] {
        let n = 3 * (i * self.width + j);
        [self.data[n], self.data[n + 1], self.data[n + 2]]
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::codec(path, e))
    }
}

const POLE1_COLOR: [u8; 3] = [235, 140, 52];
const POLE2_COLOR: [u8; 3] = [66, 135, 245];

/// Render a 4-channel field. Glyph mode draws one ellipse per
/// `glyph_spacing`-sized block (64×64 at spacing 8 → an 8×8 lattice); hue
/// mode colors every pixel by first-pole orientation and magnitude.
pub fn render_btf(
    field: &MultiChannelField,
    mode: RenderMode,
    glyph_spacing: usize,
) -> Result<RgbRaster> {
    if field.channels() != 4 {
        return Err(Error::Shape(format!(
            "render expects a 4-channel field, got {} channels",
            field.channels()
        )));
    }
    let (h, w) = (field.height(), field.width());
    let mut out = RgbRaster::black(h, w);
    match mode {
        RenderMode::Hue => {
            for i in 0..h {
                for j in 0..w {
                    let c0 = field[(0, i, j)];
                    let c1 = field[(1, i, j)];
                    let a1 = f64::hypot(c0, c1);
                    if a1 <= 1e-12 {
                        continue;
                    }
                    // canonical v1 keeps the angle in (−π/2, π/2]
                    let angle = f64::atan2(c1 / a1, c0 / a1);
                    let hue = (angle + std::f64::consts::FRAC_PI_2) / std::f64::consts::PI;
                    out.put(
                        i,
                        j,
                        hsv_to_rgb(hue.clamp(0.0, 1.0), 1.0, a1.clamp(0.0, 1.0)),
                    );
                }
            }
        }
        RenderMode::Glyph => {
            if glyph_spacing == 0 {
                return Err(Error::InvalidParam(
                    "glyph spacing must be at least 1".into(),
                ));
            }
            let k = glyph_spacing;
            for bi in (0..h).step_by(k) {
                for bj in (0..w).step_by(k) {
                    let bh = k.min(h - bi);
                    let bw = k.min(w - bj);
                    draw_glyph(field, &mut out, bi, bj, bh, bw);
                }
            }
        }
    }
    Ok(out)
}

/// Ellipse for one block, sampled at the block's center pixel.
fn draw_glyph(
    field: &MultiChannelField,
    out: &mut RgbRaster,
    bi: usize,
    bj: usize,
    bh: usize,
    bw: usize,
) {
    let ci = bi + (bh - 1) / 2;
    let cj = bj + (bw - 1) / 2;
    let c0 = field[(0, ci, cj)];
    let c1 = field[(1, ci, cj)];
    let c2 = field[(2, ci, cj)];
    let c3 = field[(3, ci, cj)];
    let a1 = f64::hypot(c0, c1);
    let a2 = f64::hypot(c2, c3);
    if a1 <= 1e-6 && a2 <= 1e-6 {
        return;
    }
    let v1 = if a1 > 1e-12 {
        [c0 / a1, c1 / a1]
    } else {
        // only the second pole is visible; take its perpendicular
        [-c3 / a2, c2 / a2]
    };
    let v2 = [-v1[1], v1[0]];
    let reach = (bh.min(bw) as f64) / 2.0 - 0.5;
    let (r1, r2) = (a1 * reach, a2 * reach);
    let color = if a1 >= a2 { POLE1_COLOR } else { POLE2_COLOR };
    for i in bi..bi + bh {
        for j in bj..bj + bw {
            let di = i as f64 - ci as f64;
            let dj = j as f64 - cj as f64;
            let u = di * v1[0] + dj * v1[1];
            let t = di * v2[0] + dj * v2[1];
            if axis_term(u, r1) + axis_term(t, r2) <= 1.0 {
                out.put(i, j, color);
            }
        }
    }
}

/// One term of the ellipse inequality; a collapsed axis degenerates to a
/// half-pixel-wide slab.
fn axis_term(coord: f64, radius: f64) -> f64 {
    if radius >= 0.3 {
        (coord / radius) * (coord / radius)
    } else if coord.abs() <= 0.5 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h * 6.0).rem_euclid(6.0);
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let q = |t: f64| ((t + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}
