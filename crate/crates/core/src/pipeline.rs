//! Three-stage training orchestration: teacher encoder, student encoder
//! supervised through the shared decoder, then the fusion segmenter on
//! patch-swapped latent stacks. Also home to the synthetic tubular phantoms
//! (with domain-shift presets), the Γ patch-swap operator, inference, and
//! evaluation, plus the run-directory formats (`config.txt`, `loss.csv`,
//! `eval.csv`).
//!
//! Determinism: every random choice flows from the config seed through
//! [`Pcg32`] streams drawn in a fixed serial order; batch work fans out over
//! rayon but folds back in sample order, so runs are bitwise-reproducible at
//! any thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::btf::{build_btf, BtfParams};
use crate::error::{Error, Result};
use crate::frangi::FrangiParams;
use crate::image::{snap_unit, Image, Mask, MultiChannelField};
use crate::losses::{
    dice_score, seg_loss, struct_loss, SegLossParams, SimLossParams, StructLossParams,
};
use crate::net::{adam_step, AdamState, ConvNet, LrSchedule};
use crate::rng::Pcg32;
use crate::scalespace::ScaleGrid;

// ---------------------------------------------------------------------------
// synthetic phantoms

/// Rendering recipe for one image domain: how bright the vessels are, how
/// noisy the scan is, and how wide the tubes run.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDescriptor {
    name: String,
    background: f64,
    contrast: f64,
    noise_sigma: f64,
    bright_vessels: bool,
    width_range: (f64, f64),
}

impl DomainDescriptor {
    pub fn new(
        name: impl Into<String>,
        background: f64,
        contrast: f64,
        noise_sigma: f64,
        bright_vessels: bool,
        width_range: (f64, f64),
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&background) {
            return Err(Error::InvalidParam(format!(
                "background level must lie in [0,1], got {background}"
            )));
        }
        if !contrast.is_finite() || contrast <= 0.0 {
            return Err(Error::InvalidParam(format!(
                "vessel contrast must be positive, got {contrast}"
            )));
        }
        if !noise_sigma.is_finite() || noise_sigma < 0.0 {
            return Err(Error::InvalidParam(format!(
                "noise sigma must be nonnegative, got {noise_sigma}"
            )));
        }
        let (lo, hi) = width_range;
        if !lo.is_finite() || !hi.is_finite() || lo < 1.0 || hi < lo {
            return Err(Error::InvalidParam(format!(
                "width range [{lo}, {hi}] is degenerate: need 1 ≤ lo ≤ hi"
            )));
        }
        Ok(Self {
            name: name.into(),
            background,
            contrast,
            noise_sigma,
            bright_vessels,
            width_range,
        })
    }

    /// Training distribution: bright tubes on a dark ground, moderate noise.
    pub fn source() -> Self {
        Self::new("source", 0.15, 0.7, 0.03, true, (4.0, 9.0)).unwrap()
    }

    /// Cross-modality analogue: same geometry, dark-on-bright polarity.
    pub fn inverted() -> Self {
        Self::new("inverted", 0.15, 0.7, 0.03, false, (4.0, 9.0)).unwrap()
    }

    /// Resolution analogue: tubes twice as wide.
    pub fn wide() -> Self {
        Self::new("wide", 0.15, 0.7, 0.03, true, (8.0, 18.0)).unwrap()
    }

    /// Pathology analogue: half the vessel-to-background contrast.
    pub fn low_contrast() -> Self {
        Self::new("low-contrast", 0.15, 0.35, 0.03, true, (4.0, 9.0)).unwrap()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn contrast(&self) -> f64 {
        self.contrast
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn bright_vessels(&self) -> bool {
        self.bright_vessels
    }

    pub fn width_range(&self) -> (f64, f64) {
        self.width_range
    }
}

/// One synthetic image with its exact ground-truth mask.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub image: Image,
    pub mask: Mask,
    pub domain: DomainDescriptor,
}

/// A tube is a sinusoidally offset centerline with a Gaussian cross-section.
/// The profile falls to e⁻² at the mask boundary (σ_cross = width/4), so the
/// mask is exactly the profile thresholded there.
struct TubeCurve {
    vertical: bool,
    center: f64,
    amplitude: f64,
    cycles: f64,
    phase: f64,
    width: f64,
}

impl TubeCurve {
    fn sample(
        descriptor: &DomainDescriptor,
        extent_h: usize,
        extent_w: usize,
        rng: &mut Pcg32,
    ) -> Self {
        let vertical = rng.next_bool(0.5);
        let across = if vertical { extent_w } else { extent_h } as f64;
        let (lo, hi) = descriptor.width_range;
        TubeCurve {
            vertical,
            center: rng.next_range(0.2 * across, 0.8 * across),
            amplitude: rng.next_range(0.0, 0.12 * across),
            cycles: rng.next_range(0.5, 1.5),
            phase: rng.next_range(0.0, std::f64::consts::TAU),
            width: rng.next_range(lo, hi),
        }
    }

    /// Offset distance from pixel (i, j) to the centerline, measured across
    /// the sweep axis. This is the curve's defining metric: image profile
    /// and mask both derive from it, which is what makes the mask exact.
    fn distance(&self, i: usize, j: usize, h: usize, w: usize) -> f64 {
        let (along, across, span) = if self.vertical {
            (i as f64, j as f64, h as f64)
        } else {
            (j as f64, i as f64, w as f64)
        };
        let centerline = self.center
            + self.amplitude
                * (std::f64::consts::TAU * self.cycles * along / span + self.phase).sin();
        (across - centerline).abs()
    }

    fn profile(&self, d: f64) -> f64 {
        let s = self.width / 4.0;
        (-d * d / (2.0 * s * s)).exp()
    }
}

/// Draws `count` random tubular phantoms (1–3 curves each) and rasterizes
/// them with the descriptor's background, contrast, noise, and polarity.
/// Masks come from the same centerline distances as the intensity profile,
/// thresholded at half the tube width.
pub fn generate_phantoms(
    count: usize,
    descriptor: &DomainDescriptor,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<PhantomSample>> {
    if count == 0 {
        return Err(Error::InvalidParam(
            "phantom count must be at least 1".into(),
        ));
    }
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("phantom size {h}x{w} is empty")));
    }
    let mut rng = Pcg32::new(seed);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let n_curves = 1 + rng.next_below(3) as usize;
        let curves: Vec<TubeCurve> = (0..n_curves)
            .map(|_| TubeCurve::sample(descriptor, h, w, &mut rng))
            .collect();
        let mut image = Image::zeros(h, w);
        let mut mask = Mask::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let mut tube = 0.0_f64;
                let mut inside = false;
                for c in &curves {
                    let d = c.distance(i, j, h, w);
                    tube = tube.max(c.profile(d));
                    inside |= d <= c.width / 2.0;
                }
                let mut v = descriptor.background + descriptor.contrast * tube;
                if descriptor.noise_sigma > 0.0 {
                    v += descriptor.noise_sigma * rng.next_gaussian();
                }
                image[(i, j)] = snap_unit(v.clamp(0.0, 1.0));
                mask.data_mut()[i * w + j] = u8::from(inside);
            }
        }
        if !descriptor.bright_vessels {
            image = image.negate();
        }
        samples.push(PhantomSample {
            image,
            mask,
            domain: descriptor.clone(),
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// patch-swap fusion

/// The two full-resolution latents produced by the encoders, validated to
/// share a shape and the sigmoid range.
#[derive(Debug, Clone)]
pub struct LatentPair {
    z_i: Image,
    z_s: Image,
}

impl LatentPair {
    pub fn new(z_i: Image, z_s: Image) -> Result<Self> {
        if !z_i.same_shape(&z_s) {
            return Err(Error::Shape(format!(
                "latents differ: {}x{} vs {}x{}",
                z_i.height(),
                z_i.width(),
                z_s.height(),
                z_s.width()
            )));
        }
        for z in [&z_i, &z_s] {
            if z.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParam(
                    "latent values must lie in [0,1]".into(),
                ));
            }
        }
        Ok(Self { z_i, z_s })
    }

    pub fn z_i(&self) -> &Image {
        &self.z_i
    }

    pub fn z_s(&self) -> &Image {
        &self.z_s
    }
}

/// Patch grid geometry and per-patch swap probability for Γ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    patch_size: usize,
    swap_prob: f64,
}

impl FusionParams {
    pub fn new(patch_size: usize, swap_prob: f64) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidParam("patch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&swap_prob) {
            return Err(Error::InvalidParam(format!(
                "swap probability must lie in [0,1], got {swap_prob}"
            )));
        }
        Ok(Self {
            patch_size,
            swap_prob,
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn swap_prob(&self) -> f64 {
        self.swap_prob
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            patch_size: 16,
            swap_prob: 0.5,
        }
    }
}

/// Γ: stacks (zI, zS) into two channels and exchanges whole grid patches
/// between them with the configured probability.
///
/// The grid is anchored at (0,0) and non-overlapping; ragged edge patches
/// swap as smaller rectangles. One Bernoulli draw is consumed per patch in
/// row-major order regardless of outcome, so the rng stream advances the
/// same way for every probability. Per-pixel content is conserved: each
/// position holds the same unordered value pair before and after.
pub fn gamma_fuse(pair: &LatentPair, params: &FusionParams, rng: &mut Pcg32) -> MultiChannelField {
    let (h, w) = (pair.z_i.height(), pair.z_i.width());
    let mut out = MultiChannelField::from_channels(&[&pair.z_i, &pair.z_s])
        .expect("latent pair shapes agree by construction");
    let k = params.patch_size;
    for i0 in (0..h).step_by(k) {
        for j0 in (0..w).step_by(k) {
            let swap = rng.next_bool(params.swap_prob);
            if !swap {
                continue;
            }
            for i in i0..(i0 + k).min(h) {
                for j in j0..(j0 + k).min(w) {
                    let a = out[(0, i, j)];
                    out[(0, i, j)] = out[(1, i, j)];
                    out[(1, i, j)] = a;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// training configuration

/// Everything a training run depends on, flat enough to round-trip through
/// `config.txt`. Derived parameter objects are built on demand so their
/// constructors enforce the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Epochs for stages 1, 2, 3.
    pub stage_epochs: [usize; 3],
    pub batch_size: usize,
    /// Initial learning rates; each halves every 3 epochs. Zero disables
    /// updates (useful for ablations).
    pub lr_intensity: f64,
    pub lr_structure: f64,
    pub lr_fusion: f64,
    /// Weights of the segmentation and similarity terms in stage 2.
    pub omega1: f64,
    pub omega2: f64,
    /// Keep updating the shared decoder during stage 2 (default: frozen).
    pub update_decoder_stage2: bool,
    pub patch_size: usize,
    pub swap_prob: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_step: f64,
    pub beta: f64,
    pub c: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage_epochs: [100, 100, 100],
            batch_size: 5,
            lr_intensity: 5e-4,
            lr_structure: 5e-4,
            lr_fusion: 1e-3,
            omega1: 1.0,
            omega2: 5.0,
            update_decoder_stage2: false,
            patch_size: 16,
            swap_prob: 0.5,
            sigma_min: 1.0,
            sigma_max: 5.0,
            sigma_step: 0.5,
            beta: 0.5,
            c: 0.5,
            epsilon: 0.5,
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 50 epochs total, sized for 64×64 phantoms.
    ///
    /// Single-sample batches: with only 16 training images and a rate that
    /// halves every 3 epochs, the optimizer's total step budget is what
    /// limits learning, and 16 steps per epoch instead of 4 is the
    /// difference between a converged teacher and a half-trained one.
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            stage_epochs: [20, 15, 15],
            batch_size: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("intensity", self.lr_intensity),
            ("structure", self.lr_structure),
            ("fusion", self.lr_fusion),
        ] {
            if !rate.is_finite() || rate < 0.0 {
                return Err(Error::InvalidParam(format!(
                    "{name} learning rate must be nonnegative and finite, got {rate}"
                )));
            }
        }
        if self.stage_epochs.contains(&0) {
            return Err(Error::InvalidParam(
                "every stage needs at least one epoch".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch size must be at least 1".into()));
        }
        self.scale_grid()?;
        self.frangi()?;
        self.btf()?;
        self.fusion()?;
        self.struct_params()?;
        Ok(())
    }

    pub fn scale_grid(&self) -> Result<ScaleGrid> {
        ScaleGrid::new(self.sigma_min, self.sigma_max, self.sigma_step)
    }

    pub fn frangi(&self) -> Result<FrangiParams> {
        FrangiParams::new(self.beta, self.c)
    }

    pub fn btf(&self) -> Result<BtfParams> {
        BtfParams::new(self.epsilon)
    }

    pub fn fusion(&self) -> Result<FusionParams> {
        FusionParams::new(self.patch_size, self.swap_prob)
    }

    pub fn struct_params(&self) -> Result<StructLossParams> {
        StructLossParams::new(
            self.omega1,
            self.omega2,
            SegLossParams::default(),
            SimLossParams::default(),
        )
    }
}

// ---------------------------------------------------------------------------
// training stages

#[derive(Debug)]
pub struct Stage1Output {
    pub intensity_encoder: ConvNet,
    pub decoder: ConvNet,
    /// Mean segmentation loss over the training set after each epoch.
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug)]
pub struct Stage2Output {
    pub structure_encoder: ConvNet,
    /// The shared decoder as of the end of stage 2 (bitwise-equal to the
    /// stage-1 decoder unless `update_decoder_stage2` is set).
    pub decoder: ConvNet,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug)]
pub struct Stage3Output {
    pub segmenter: ConvNet,
    pub epoch_losses: Vec<f64>,
}

fn require_samples(phantoms: &[PhantomSample]) -> Result<()> {
    if phantoms.is_empty() {
        return Err(Error::InvalidParam("training set is empty".into()));
    }
    Ok(())
}

/// Zero rate means "never step"; otherwise the 3-epoch halving schedule.
fn schedule_for(rate: f64) -> Result<Option<LrSchedule>> {
    if rate == 0.0 {
        Ok(None)
    } else {
        LrSchedule::new(rate).map(Some)
    }
}

fn rate_at(schedule: &Option<LrSchedule>, epoch: usize) -> f64 {
    schedule.as_ref().map_or(0.0, |s| s.lr_at(epoch))
}

fn image_field(img: &Image) -> MultiChannelField {
    MultiChannelField::from_channels(&[img]).expect("single plane always stacks")
}

/// Serial mean of per-sample gradient vectors, in sample order.
fn mean_gradients(per_sample: &[Vec<f64>]) -> Vec<f64> {
    let n = per_sample.len() as f64;
    let mut acc = vec![0.0; per_sample[0].len()];
    for grads in per_sample {
        for (a, g) in acc.iter_mut().zip(grads) {
            *a += g;
        }
    }
    for a in &mut acc {
        *a /= n;
    }
    acc
}

fn check_finite(stage: usize, epoch: usize, loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "stage {stage} diverged: mean loss {loss} after epoch {epoch}"
        )));
    }
    Ok(loss)
}

fn stage1_sample_loss(
    encoder: &ConvNet,
    decoder: &ConvNet,
    input: &MultiChannelField,
    mask: &Mask,
    seg: &SegLossParams,
) -> Result<f64> {
    let (z, _) = encoder.forward(input)?;
    let (y, _) = decoder.forward(&z)?;
    Ok(seg_loss(&y.channel_image(0), mask, seg)?.0)
}

/// Stage 1: joint teacher training. The intensity encoder and the shared
/// decoder minimize the segmentation loss on raw images.
pub fn train_stage1(phantoms: &[PhantomSample], config: &TrainConfig) -> Result<Stage1Output> {
    config.validate()?;
    require_samples(phantoms)?;
    let mut rng = Pcg32::new(config.seed);
    let mut encoder = ConvNet::intensity_encoder(&mut rng);
    let mut decoder = ConvNet::latent_decoder(&mut rng);
    let mut adam_e = AdamState::new(encoder.parameter_count());
    let mut adam_d = AdamState::new(decoder.parameter_count());
    let schedule = schedule_for(config.lr_intensity)?;
    let seg = SegLossParams::default();
    let inputs: Vec<MultiChannelField> = phantoms.iter().map(|p| image_field(&p.image)).collect();
    let order: Vec<usize> = (0..phantoms.len()).collect();

    let mut epoch_losses = Vec::with_capacity(config.stage_epochs[0]);
    for epoch in 0..config.stage_epochs[0] {
        let lr = rate_at(&schedule, epoch);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(Vec<f64>, Vec<f64>)> = batch
                .par_iter()
                .map(|&n| {
                    let (z, cache_e) = encoder.forward(&inputs[n])?;
                    let (y, cache_d) = decoder.forward(&z)?;
                    let (_, dpred) = seg_loss(&y.channel_image(0), &phantoms[n].mask, &seg)?;
                    let (gd, dz) = decoder.backward(&cache_d, &image_field(&dpred))?;
                    let (ge, _) = encoder.backward(&cache_e, &dz)?;
                    Ok((ge, gd))
                })
                .collect::<Result<_>>()?;
            let (ge, gd): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            adam_step(&mut encoder, &mean_gradients(&ge), &mut adam_e, lr)?;
            adam_step(&mut decoder, &mean_gradients(&gd), &mut adam_d, lr)?;
        }
        let losses: Vec<f64> = order
            .par_iter()
            .map(|&n| stage1_sample_loss(&encoder, &decoder, &inputs[n], &phantoms[n].mask, &seg))
            .collect::<Result<_>>()?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        epoch_losses.push(check_finite(1, epoch + 1, mean)?);
    }
    Ok(Stage1Output {
        intensity_encoder: encoder,
        decoder,
        epoch_losses,
    })
}

/// Tensor-field inputs for the structure encoder, one per phantom.
pub fn compute_btfs(
    phantoms: &[PhantomSample],
    config: &TrainConfig,
) -> Result<Vec<MultiChannelField>> {
    let grid = config.scale_grid()?;
    let frangi = config.frangi()?;
    let btf = config.btf()?;
    phantoms
        .par_iter()
        .map(|p| build_btf(&p.image, &grid, &frangi, &btf))
        .collect()
}

fn stage2_sample_loss(
    encoder: &ConvNet,
    decoder: &ConvNet,
    input: &MultiChannelField,
    z_i: &Image,
    mask: &Mask,
    params: &StructLossParams,
) -> Result<f64> {
    let (zf, _) = encoder.forward(input)?;
    let (y, _) = decoder.forward(&zf)?;
    Ok(struct_loss(&y.channel_image(0), mask, &zf.channel_image(0), z_i, params)?.0)
}

/// Stage 2: student training. The structure encoder consumes tensor fields
/// and minimizes ω1·seg + ω2·sim against the frozen teacher's latents. The
/// teacher is never touched; the shared decoder updates only when
/// `update_decoder_stage2` is set.
pub fn train_stage2(
    phantoms: &[PhantomSample],
    btfs: &[MultiChannelField],
    teacher: &ConvNet,
    decoder: &ConvNet,
    config: &TrainConfig,
) -> Result<Stage2Output> {
    config.validate()?;
    require_samples(phantoms)?;
    if btfs.len() != phantoms.len() {
        return Err(Error::Shape(format!(
            "{} tensor fields for {} phantoms",
            btfs.len(),
            phantoms.len()
        )));
    }
    let mut rng = Pcg32::new(config.seed.wrapping_add(2));
    let mut encoder = ConvNet::structure_encoder(&mut rng);
    let mut dec = decoder.clone();
    let mut adam_e = AdamState::new(encoder.parameter_count());
    let mut adam_d = AdamState::new(dec.parameter_count());
    let schedule = schedule_for(config.lr_structure)?;
    let params = config.struct_params()?;

    // the teacher is frozen, so its latents are constants of the stage
    let teacher_latents: Vec<Image> = phantoms
        .par_iter()
        .map(|p| Ok(teacher.forward(&image_field(&p.image))?.0.channel_image(0)))
        .collect::<Result<_>>()?;
    let order: Vec<usize> = (0..phantoms.len()).collect();

    let mut epoch_losses = Vec::with_capacity(config.stage_epochs[1]);
    for epoch in 0..config.stage_epochs[1] {
        let lr = rate_at(&schedule, epoch);
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(Vec<f64>, Vec<f64>)> = batch
                .par_iter()
                .map(|&n| {
                    let (zf, cache_e) = encoder.forward(&btfs[n])?;
                    let (y, cache_d) = dec.forward(&zf)?;
                    let (_, grad_pred, grad_z_direct) = struct_loss(
                        &y.channel_image(0),
                        &phantoms[n].mask,
                        &zf.channel_image(0),
                        &teacher_latents[n],
                        &params,
                    )?;
                    let (gd, mut dz) = dec.backward(&cache_d, &image_field(&grad_pred))?;
                    for (a, b) in dz.data_mut().iter_mut().zip(grad_z_direct.data()) {
                        *a += b;
                    }
                    let (ge, _) = encoder.backward(&cache_e, &dz)?;
                    Ok((ge, gd))
                })
                .collect::<Result<_>>()?;
            let (ge, gd): (Vec<_>, Vec<_>) = results.into_iter().unzip();
            adam_step(&mut encoder, &mean_gradients(&ge), &mut adam_e, lr)?;
            if config.update_decoder_stage2 {
                adam_step(&mut dec, &mean_gradients(&gd), &mut adam_d, lr)?;
            }
        }
        let losses: Vec<f64> = order
            .par_iter()
            .map(|&n| {
                stage2_sample_loss(
                    &encoder,
                    &dec,
                    &btfs[n],
                    &teacher_latents[n],
                    &phantoms[n].mask,
                    &params,
                )
            })
            .collect::<Result<_>>()?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        epoch_losses.push(check_finite(2, epoch + 1, mean)?);
    }
    Ok(Stage2Output {
        structure_encoder: encoder,
        decoder: dec,
        epoch_losses,
    })
}

/// Stage 3: with both encoders frozen, the fusion segmenter trains on
/// patch-swapped latent stacks Γ(zI, zS).
///
/// Logged losses are measured on the unswapped (test-time) stacks after each
/// epoch, so the curve is a function of the checkpoint alone and not of the
/// swap draws.
pub fn train_stage3(
    phantoms: &[PhantomSample],
    btfs: &[MultiChannelField],
    intensity_encoder: &ConvNet,
    structure_encoder: &ConvNet,
    config: &TrainConfig,
) -> Result<Stage3Output> {
    config.validate()?;
    require_samples(phantoms)?;
    if btfs.len() != phantoms.len() {
        return Err(Error::Shape(format!(
            "{} tensor fields for {} phantoms",
            btfs.len(),
            phantoms.len()
        )));
    }
    let mut rng = Pcg32::new(config.seed.wrapping_add(3));
    let mut segmenter = ConvNet::fusion_segmenter(&mut rng);
    let mut adam = AdamState::new(segmenter.parameter_count());
    let schedule = schedule_for(config.lr_fusion)?;
    let fusion = config.fusion()?;
    let seg = SegLossParams::default();

    // frozen encoders: latents are constants of the stage
    let pairs: Vec<LatentPair> = phantoms
        .par_iter()
        .zip(btfs)
        .map(|(p, tf)| {
            let z_i = intensity_encoder
                .forward(&image_field(&p.image))?
                .0
                .channel_image(0);
            let z_s = structure_encoder.forward(tf)?.0.channel_image(0);
            LatentPair::new(z_i, z_s)
        })
        .collect::<Result<_>>()?;
    let unswapped: Vec<MultiChannelField> = pairs
        .iter()
        .map(|p| {
            MultiChannelField::from_channels(&[p.z_i(), p.z_s()]).expect("latent pair shapes agree")
        })
        .collect();
    let order: Vec<usize> = (0..phantoms.len()).collect();

    let mut epoch_losses = Vec::with_capacity(config.stage_epochs[2]);
    for epoch in 0..config.stage_epochs[2] {
        let lr = rate_at(&schedule, epoch);
        for batch in order.chunks(config.batch_size) {
            // swap draws happen serially, in sample order, before the
            // parallel fan-out — the rng stream is thread-count-independent
            let fused: Vec<MultiChannelField> = batch
                .iter()
                .map(|&n| gamma_fuse(&pairs[n], &fusion, &mut rng))
                .collect();
            let grads: Vec<Vec<f64>> = batch
                .par_iter()
                .zip(fused)
                .map(|(&n, x)| {
                    let (y, cache) = segmenter.forward(&x)?;
                    let (_, dpred) = seg_loss(&y.channel_image(0), &phantoms[n].mask, &seg)?;
                    let (g, _) = segmenter.backward(&cache, &image_field(&dpred))?;
                    Ok(g)
                })
                .collect::<Result<_>>()?;
            adam_step(&mut segmenter, &mean_gradients(&grads), &mut adam, lr)?;
        }
        let losses: Vec<f64> = order
            .par_iter()
            .map(|&n| {
                let (y, _) = segmenter.forward(&unswapped[n])?;
                Ok(seg_loss(&y.channel_image(0), &phantoms[n].mask, &seg)?.0)
            })
            .collect::<Result<_>>()?;
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        epoch_losses.push(check_finite(3, epoch + 1, mean)?);
    }
    Ok(Stage3Output {
        segmenter,
        epoch_losses,
    })
}

// ---------------------------------------------------------------------------
// inference & evaluation

/// The three trained networks needed at test time.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub intensity_encoder: ConvNet,
    pub structure_encoder: ConvNet,
    pub segmenter: ConvNet,
}

impl ModelBundle {
    pub fn new(
        intensity_encoder: ConvNet,
        structure_encoder: ConvNet,
        segmenter: ConvNet,
    ) -> Result<Self> {
        let contract = [
            ("intensity encoder", &intensity_encoder, 1),
            ("structure encoder", &structure_encoder, 4),
            ("segmenter", &segmenter, 2),
        ];
        for (name, net, in_ch) in contract {
            if net.in_channels() != in_ch || net.out_channels() != 1 {
                return Err(Error::Shape(format!(
                    "{name} must map {in_ch} channels to 1, got {} to {}",
                    net.in_channels(),
                    net.out_channels()
                )));
            }
        }
        Ok(Self {
            intensity_encoder,
            structure_encoder,
            segmenter,
        })
    }
}

/// Test-time path: concatenate the two latents without any swapping, decode,
/// and threshold at 0.5 (ties to background). Consults no rng; repeated
/// calls are bitwise-identical.
pub fn infer(
    bundle: &ModelBundle,
    x: &Image,
    grid: &ScaleGrid,
    frangi: &FrangiParams,
    btf: &BtfParams,
) -> Result<(Image, Mask)> {
    let z_i = bundle
        .intensity_encoder
        .forward(&image_field(x))?
        .0
        .channel_image(0);
    let tensor_field = build_btf(x, grid, frangi, btf)?;
    let z_s = bundle
        .structure_encoder
        .forward(&tensor_field)?
        .0
        .channel_image(0);
    let stacked = MultiChannelField::from_channels(&[&z_i, &z_s])?;
    let prob = bundle.segmenter.forward(&stacked)?.0.channel_image(0);
    let mask = Mask::from_probability(&prob);
    Ok((prob, mask))
}

/// One evaluated sample: position in the input list, its domain name, and
/// the Dice overlap against ground truth.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub sample: usize,
    pub domain: String,
    pub dice: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct DiceSummary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
}

fn summarize(dices: &[f64]) -> DiceSummary {
    let mut sorted = dices.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    DiceSummary {
        mean: dices.iter().sum::<f64>() / n as f64,
        median,
        min: sorted[0],
    }
}

/// Per-sample Dice scores plus overall and per-domain summaries.
#[derive(Debug, Clone)]
pub struct EvalReport {
    rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn rows(&self) -> &[EvalRow] {
        &self.rows
    }

    pub fn overall(&self) -> DiceSummary {
        summarize(&self.rows.iter().map(|r| r.dice).collect::<Vec<_>>())
    }

    /// Summaries grouped by domain, in first-appearance order.
    pub fn by_domain(&self) -> Vec<(String, DiceSummary)> {
        let mut names: Vec<&str> = Vec::new();
        for row in &self.rows {
            if !names.contains(&row.domain.as_str()) {
                names.push(&row.domain);
            }
        }
        names
            .iter()
            .map(|&name| {
                let dices: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.domain == name)
                    .map(|r| r.dice)
                    .collect();
                (name.to_string(), summarize(&dices))
            })
            .collect()
    }
}

/// Runs [`infer`] over every sample and scores it against its ground truth.
pub fn evaluate(
    bundle: &ModelBundle,
    samples: &[PhantomSample],
    grid: &ScaleGrid,
    frangi: &FrangiParams,
    btf: &BtfParams,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidParam(
            "evaluation needs at least one sample".into(),
        ));
    }
    let rows: Vec<EvalRow> = samples
        .par_iter()
        .enumerate()
        .map(|(n, s)| {
            let (_, predicted) = infer(bundle, &s.image, grid, frangi, btf)?;
            Ok(EvalRow {
                sample: n,
                domain: s.domain.name().to_string(),
                dice: dice_score(&predicted, &s.mask)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport { rows })
}

// ---------------------------------------------------------------------------
// run-directory formats

/// `key = value` lines, LF-terminated, one per config field.
pub fn write_config(path: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    let kv: &[(&str, String)] = &[
        ("seed", config.seed.to_string()),
        ("epochs_stage1", config.stage_epochs[0].to_string()),
        ("epochs_stage2", config.stage_epochs[1].to_string()),
        ("epochs_stage3", config.stage_epochs[2].to_string()),
        ("batch_size", config.batch_size.to_string()),
        ("lr_intensity", config.lr_intensity.to_string()),
        ("lr_structure", config.lr_structure.to_string()),
        ("lr_fusion", config.lr_fusion.to_string()),
        ("omega1", config.omega1.to_string()),
        ("omega2", config.omega2.to_string()),
        (
            "update_decoder_stage2",
            config.update_decoder_stage2.to_string(),
        ),
        ("patch_size", config.patch_size.to_string()),
        ("swap_prob", config.swap_prob.to_string()),
        ("sigma_min", config.sigma_min.to_string()),
        ("sigma_max", config.sigma_max.to_string()),
        ("sigma_step", config.sigma_step.to_string()),
        ("beta", config.beta.to_string()),
        ("c", config.c.to_string()),
        ("epsilon", config.epsilon.to_string()),
    ];
    for (k, v) in kv {
        let _ = writeln!(text, "{k} = {v}");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `key = value` lines (`#` comments and blank lines allowed) on top
/// of the defaults. Does not validate ranges — callers validate after any
/// further overrides.
pub fn read_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut config = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected `key = value`, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| {
            Error::Format(format!(
                "{}:{}: cannot parse {value:?} as {what} for key {key}",
                path.display(),
                lineno + 1
            ))
        };
        let as_f64 = || value.parse::<f64>().map_err(|_| bad("a number"));
        let as_usize = || value.parse::<usize>().map_err(|_| bad("an integer"));
        match key {
            "seed" => config.seed = value.parse().map_err(|_| bad("an integer"))?,
            "epochs_stage1" => config.stage_epochs[0] = as_usize()?,
            "epochs_stage2" => config.stage_epochs[1] = as_usize()?,
            "epochs_stage3" => config.stage_epochs[2] = as_usize()?,
            "batch_size" => config.batch_size = as_usize()?,
            "lr_intensity" => config.lr_intensity = as_f64()?,
            "lr_structure" => config.lr_structure = as_f64()?,
            "lr_fusion" => config.lr_fusion = as_f64()?,
            "omega1" => config.omega1 = as_f64()?,
            "omega2" => config.omega2 = as_f64()?,
            "update_decoder_stage2" => {
                config.update_decoder_stage2 = value.parse().map_err(|_| bad("true or false"))?
            }
            "patch_size" => config.patch_size = as_usize()?,
            "swap_prob" => config.swap_prob = as_f64()?,
            "sigma_min" => config.sigma_min = as_f64()?,
            "sigma_max" => config.sigma_max = as_f64()?,
            "sigma_step" => config.sigma_step = as_f64()?,
            "beta" => config.beta = as_f64()?,
            "c" => config.c = as_f64()?,
            "epsilon" => config.epsilon = as_f64()?,
            other => {
                return Err(Error::Format(format!(
                    "{}:{}: unknown config key {other:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
    }
    Ok(config)
}

/// `epoch,mean_loss` rows, 1-based epochs, LF line endings.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,mean_loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        let _ = writeln!(text, "{},{loss}", epoch + 1);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `sample,domain,dice` rows, LF line endings.
pub fn write_eval_csv(path: impl AsRef<Path>, report: &EvalReport) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("sample,domain,dice\n");
    for row in report.rows() {
        let _ = writeln!(text, "{},{},{}", row.sample, row.domain, row.dice);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// run-directory orchestration

fn stage_dir(run_dir: &Path, stage: usize) -> PathBuf {
    run_dir.join(format!("stage{stage}"))
}

fn load_stage_net(run_dir: &Path, stage: usize, file: &str) -> Result<ConvNet> {
    let path = stage_dir(run_dir, stage).join(file);
    if !path.exists() {
        return Err(Error::InvalidParam(format!(
            "missing checkpoint {}: run stage {stage} first",
            path.display()
        )));
    }
    ConvNet::read_checkpoint(path)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains stage 1 and writes `stage1/{checkpoint.vmck, decoder.vmck,
/// loss.csv}` plus the run's `config.txt`.
pub fn run_stage1(
    run_dir: &Path,
    phantoms: &[PhantomSample],
    config: &TrainConfig,
) -> Result<Stage1Output> {
    let out = train_stage1(phantoms, config)?;
    let dir = stage_dir(run_dir, 1);
    ensure_dir(&dir)?;
    write_config(run_dir.join("config.txt"), config)?;
    out.intensity_encoder
        .write_checkpoint(dir.join("checkpoint.vmck"))?;
    out.decoder.write_checkpoint(dir.join("decoder.vmck"))?;
    write_loss_csv(dir.join("loss.csv"), &out.epoch_losses)?;
    Ok(out)
}

/// Loads the stage-1 nets, trains stage 2, writes `stage2/*`.
pub fn run_stage2(
    run_dir: &Path,
    phantoms: &[PhantomSample],
    config: &TrainConfig,
) -> Result<Stage2Output> {
    let teacher = load_stage_net(run_dir, 1, "checkpoint.vmck")?;
    let decoder = load_stage_net(run_dir, 1, "decoder.vmck")?;
    let btfs = compute_btfs(phantoms, config)?;
    let out = train_stage2(phantoms, &btfs, &teacher, &decoder, config)?;
    let dir = stage_dir(run_dir, 2);
    ensure_dir(&dir)?;
    write_config(run_dir.join("config.txt"), config)?;
    out.structure_encoder
        .write_checkpoint(dir.join("checkpoint.vmck"))?;
    out.decoder.write_checkpoint(dir.join("decoder.vmck"))?;
    write_loss_csv(dir.join("loss.csv"), &out.epoch_losses)?;
    Ok(out)
}

/// Loads both encoders, trains stage 3, writes `stage3/*`.
pub fn run_stage3(
    run_dir: &Path,
    phantoms: &[PhantomSample],
    config: &TrainConfig,
) -> Result<Stage3Output> {
    let intensity = load_stage_net(run_dir, 1, "checkpoint.vmck")?;
    let structure = load_stage_net(run_dir, 2, "checkpoint.vmck")?;
    let btfs = compute_btfs(phantoms, config)?;
    let out = train_stage3(phantoms, &btfs, &intensity, &structure, config)?;
    let dir = stage_dir(run_dir, 3);
    ensure_dir(&dir)?;
    write_config(run_dir.join("config.txt"), config)?;
    out.segmenter
        .write_checkpoint(dir.join("checkpoint.vmck"))?;
    write_loss_csv(dir.join("loss.csv"), &out.epoch_losses)?;
    Ok(out)
}

/// Assembles the test-time bundle from a completed run directory.
pub fn load_bundle(run_dir: &Path) -> Result<ModelBundle> {
    ModelBundle::new(
        load_stage_net(run_dir, 1, "checkpoint.vmck")?,
        load_stage_net(run_dir, 2, "checkpoint.vmck")?,
        load_stage_net(run_dir, 3, "checkpoint.vmck")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Conv3x3, Layer};

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            stage_epochs: [2, 2, 2],
            batch_size: 2,
            ..TrainConfig::default()
        }
    }

    fn tiny_phantoms(seed: u64) -> Vec<PhantomSample> {
        generate_phantoms(3, &DomainDescriptor::source(), (24, 24), seed).unwrap()
    }

    #[test]
    fn descriptor_rejects_degenerate_widths() {
        assert!(DomainDescriptor::new("x", 0.1, 0.5, 0.0, true, (0.5, 4.0)).is_err());
        assert!(DomainDescriptor::new("x", 0.1, 0.5, 0.0, true, (6.0, 4.0)).is_err());
    }

    #[test]
    fn phantoms_are_seed_deterministic() {
        let a = generate_phantoms(4, &DomainDescriptor::source(), (32, 32), 9).unwrap();
        let b = generate_phantoms(4, &DomainDescriptor::source(), (32, 32), 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
        }
    }

    #[test]
    fn phantom_count_zero_is_rejected() {
        assert!(generate_phantoms(0, &DomainDescriptor::source(), (16, 16), 1).is_err());
    }

    #[test]
    fn noiseless_mask_is_the_profile_thresholded_at_e_minus_two() {
        // profile(d = width/2) = e⁻², independent of width, so the union of
        // per-curve masks equals thresholding the max profile
        let desc = DomainDescriptor::new("clean", 0.2, 0.6, 0.0, true, (5.0, 8.0)).unwrap();
        let samples = generate_phantoms(5, &desc, (48, 48), 17).unwrap();
        let threshold = 0.2 + 0.6 * (-2.0_f64).exp();
        for s in &samples {
            assert!(s.mask.count_positive() > 0);
            for (n, &v) in s.image.data().iter().enumerate() {
                let inside = s.mask.data()[n] == 1;
                // snap_unit moves values by ≤ 2^-54; stay clear of the knife edge
                if (v - threshold).abs() > 1e-9 {
                    assert_eq!(inside, v > threshold, "pixel {n}: value {v}");
                }
            }
        }
    }

    #[test]
    fn polarity_flip_is_an_exact_negation() {
        let bright = generate_phantoms(3, &DomainDescriptor::source(), (32, 32), 23).unwrap();
        let dark = generate_phantoms(3, &DomainDescriptor::inverted(), (32, 32), 23).unwrap();
        for (b, d) in bright.iter().zip(&dark) {
            assert_eq!(d.image.negate().data(), b.image.data());
            assert_eq!(d.mask.data(), b.mask.data());
        }
    }

    #[test]
    fn latent_pair_validates_shape_and_range() {
        let a = Image::zeros(4, 4);
        assert!(LatentPair::new(a.clone(), Image::zeros(4, 5)).is_err());
        let mut out_of_range = Image::zeros(4, 4);
        out_of_range.data_mut()[0] = 1.5;
        assert!(LatentPair::new(a.clone(), out_of_range).is_err());
        assert!(LatentPair::new(a.clone(), a).is_ok());
    }

    fn random_latents(seed: u64, h: usize, w: usize) -> LatentPair {
        let mut rng = Pcg32::new(seed);
        let z_i = Image::from_fn(h, w, |_, _| rng.next_f64());
        let z_s = Image::from_fn(h, w, |_, _| rng.next_f64());
        LatentPair::new(z_i, z_s).unwrap()
    }

    #[test]
    fn fusion_probability_zero_is_the_identity() {
        let pair = random_latents(31, 20, 20);
        let params = FusionParams::new(7, 0.0).unwrap();
        let out = gamma_fuse(&pair, &params, &mut Pcg32::new(1));
        assert_eq!(out.channel(0), pair.z_i().data());
        assert_eq!(out.channel(1), pair.z_s().data());
    }

    #[test]
    fn fusion_probability_one_is_the_full_exchange() {
        let pair = random_latents(32, 20, 20);
        let params = FusionParams::new(7, 1.0).unwrap();
        let out = gamma_fuse(&pair, &params, &mut Pcg32::new(1));
        assert_eq!(out.channel(0), pair.z_s().data());
        assert_eq!(out.channel(1), pair.z_i().data());
    }

    #[test]
    fn fusion_conserves_per_pixel_value_pairs() {
        for &p in &[0.3, 0.7] {
            let pair = random_latents(33, 23, 19); // ragged against patch 8
            let params = FusionParams::new(8, p).unwrap();
            let out = gamma_fuse(&pair, &params, &mut Pcg32::new(5));
            let mut swapped = 0;
            for n in 0..pair.z_i().len() {
                let before = (pair.z_i().data()[n], pair.z_s().data()[n]);
                let after = (out.channel(0)[n], out.channel(1)[n]);
                assert!(
                    after == before || after == (before.1, before.0),
                    "pixel {n}"
                );
                if after != before {
                    swapped += 1;
                }
            }
            assert!(swapped > 0, "p = {p} swapped nothing");
        }
    }

    #[test]
    fn fusion_patch_larger_than_image_swaps_whole_image_or_nothing() {
        let pair = random_latents(34, 8, 8);
        let params = FusionParams::new(100, 1.0).unwrap();
        let out = gamma_fuse(&pair, &params, &mut Pcg32::new(2));
        assert_eq!(out.channel(0), pair.z_s().data());
    }

    #[test]
    fn fusion_of_equal_latents_is_invariant_to_swaps() {
        let mut rng = Pcg32::new(35);
        let z = Image::from_fn(16, 16, |_, _| rng.next_f64());
        let pair = LatentPair::new(z.clone(), z).unwrap();
        let params = FusionParams::default();
        let out = gamma_fuse(&pair, &params, &mut Pcg32::new(99));
        assert_eq!(out.channel(0), pair.z_i().data());
        assert_eq!(out.channel(1), pair.z_i().data());
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let bad = [
            TrainConfig {
                lr_intensity: -1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                stage_epochs: [1, 0, 1],
                ..TrainConfig::default()
            },
            TrainConfig {
                swap_prob: 1.5,
                ..TrainConfig::default()
            },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn stage1_zero_rate_leaves_the_seeded_init_untouched() {
        let phantoms = tiny_phantoms(41);
        let mut config = tiny_config(7);
        config.stage_epochs = [1, 1, 1];
        config.lr_intensity = 0.0;
        let out = train_stage1(&phantoms, &config).unwrap();
        let mut rng = Pcg32::new(7);
        let fresh_e = ConvNet::intensity_encoder(&mut rng);
        let fresh_d = ConvNet::latent_decoder(&mut rng);
        assert_eq!(out.intensity_encoder.parameters(), fresh_e.parameters());
        assert_eq!(out.decoder.parameters(), fresh_d.parameters());
    }

    #[test]
    fn stage1_is_bitwise_reproducible_and_learns() {
        let phantoms = tiny_phantoms(42);
        let mut config = tiny_config(8);
        config.stage_epochs = [4, 1, 1];
        let a = train_stage1(&phantoms, &config).unwrap();
        let b = train_stage1(&phantoms, &config).unwrap();
        assert_eq!(
            a.intensity_encoder.parameters(),
            b.intensity_encoder.parameters()
        );
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.epoch_losses.len(), 4);
        assert!(a.epoch_losses[3] < a.epoch_losses[0]);
    }

    #[test]
    fn stage1_rejects_empty_training_set() {
        assert!(train_stage1(&[], &tiny_config(1)).is_err());
    }

    #[test]
    fn stage2_freezes_decoder_by_default_and_updates_behind_the_flag() {
        let phantoms = tiny_phantoms(43);
        let config = tiny_config(9);
        let stage1 = train_stage1(&phantoms, &config).unwrap();
        let btfs = compute_btfs(&phantoms, &config).unwrap();
        let teacher_before = stage1.intensity_encoder.parameters();

        let frozen = train_stage2(
            &phantoms,
            &btfs,
            &stage1.intensity_encoder,
            &stage1.decoder,
            &config,
        )
        .unwrap();
        assert_eq!(stage1.intensity_encoder.parameters(), teacher_before);
        assert_eq!(frozen.decoder.parameters(), stage1.decoder.parameters());

        let mut updating = config.clone();
        updating.update_decoder_stage2 = true;
        let moved = train_stage2(
            &phantoms,
            &btfs,
            &stage1.intensity_encoder,
            &stage1.decoder,
            &updating,
        )
        .unwrap();
        assert_ne!(moved.decoder.parameters(), stage1.decoder.parameters());
    }

    #[test]
    fn stage2_logged_loss_is_recomputable_from_the_checkpoint() {
        let phantoms = tiny_phantoms(44);
        let config = tiny_config(10);
        let stage1 = train_stage1(&phantoms, &config).unwrap();
        let btfs = compute_btfs(&phantoms, &config).unwrap();
        let stage2 = train_stage2(
            &phantoms,
            &btfs,
            &stage1.intensity_encoder,
            &stage1.decoder,
            &config,
        )
        .unwrap();
        let params = config.struct_params().unwrap();
        let mut offline = 0.0;
        for (p, tf) in phantoms.iter().zip(&btfs) {
            let z_i = stage1
                .intensity_encoder
                .forward(&image_field(&p.image))
                .unwrap()
                .0
                .channel_image(0);
            offline += stage2_sample_loss(
                &stage2.structure_encoder,
                &stage2.decoder,
                tf,
                &z_i,
                &p.mask,
                &params,
            )
            .unwrap();
        }
        offline /= phantoms.len() as f64;
        let logged = *stage2.epoch_losses.last().unwrap();
        assert!((logged - offline).abs() < 1e-6, "{logged} vs {offline}");
    }

    #[test]
    fn stage3_trains_only_the_segmenter_and_logs_unswapped_loss() {
        let phantoms = tiny_phantoms(45);
        let config = tiny_config(11);
        let stage1 = train_stage1(&phantoms, &config).unwrap();
        let btfs = compute_btfs(&phantoms, &config).unwrap();
        let stage2 = train_stage2(
            &phantoms,
            &btfs,
            &stage1.intensity_encoder,
            &stage1.decoder,
            &config,
        )
        .unwrap();
        let e_i_before = stage1.intensity_encoder.parameters();
        let e_s_before = stage2.structure_encoder.parameters();
        let stage3 = train_stage3(
            &phantoms,
            &btfs,
            &stage1.intensity_encoder,
            &stage2.structure_encoder,
            &config,
        )
        .unwrap();
        assert_eq!(stage1.intensity_encoder.parameters(), e_i_before);
        assert_eq!(stage2.structure_encoder.parameters(), e_s_before);
        assert_eq!(stage3.epoch_losses.len(), config.stage_epochs[2]);
        // rerunning is bitwise: swap draws come from the config seed
        let again = train_stage3(
            &phantoms,
            &btfs,
            &stage1.intensity_encoder,
            &stage2.structure_encoder,
            &config,
        )
        .unwrap();
        assert_eq!(again.segmenter.parameters(), stage3.segmenter.parameters());
        assert_eq!(again.epoch_losses, stage3.epoch_losses);
    }

    fn zero_bundle() -> ModelBundle {
        let zero_net = |in_ch: usize| {
            ConvNet::new(vec![
                Layer::Conv(Conv3x3::zeros(in_ch, 1).unwrap()),
                Layer::Sigmoid,
            ])
            .unwrap()
        };
        ModelBundle::new(zero_net(1), zero_net(4), zero_net(2)).unwrap()
    }

    #[test]
    fn bundle_enforces_channel_contracts() {
        let mut rng = Pcg32::new(46);
        let e_i = ConvNet::intensity_encoder(&mut rng);
        let e_s = ConvNet::structure_encoder(&mut rng);
        let d_t = ConvNet::fusion_segmenter(&mut rng);
        assert!(ModelBundle::new(e_s.clone(), e_i.clone(), d_t.clone()).is_err());
        assert!(ModelBundle::new(e_i, e_s, d_t).is_ok());
    }

    #[test]
    fn inference_is_bitwise_deterministic_and_bounded() {
        let bundle = zero_bundle();
        let phantoms = tiny_phantoms(47);
        let grid = ScaleGrid::default();
        let (fp, bp) = (FrangiParams::default(), BtfParams::default());
        let (p1, m1) = infer(&bundle, &phantoms[0].image, &grid, &fp, &bp).unwrap();
        let (p2, m2) = infer(&bundle, &phantoms[0].image, &grid, &fp, &bp).unwrap();
        assert_eq!(p1.data(), p2.data());
        assert_eq!(m1.data(), m2.data());
        assert!(p1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_bundle_predicts_all_background_dice_zero() {
        // all outputs are exactly 0.5 and ties go to background
        let bundle = zero_bundle();
        let phantoms = tiny_phantoms(48);
        let report = evaluate(
            &bundle,
            &phantoms,
            &ScaleGrid::default(),
            &FrangiParams::default(),
            &BtfParams::default(),
        )
        .unwrap();
        for row in report.rows() {
            assert_eq!(row.dice, 0.0);
            assert_eq!(row.domain, "source");
        }
        assert_eq!(report.overall().mean, 0.0);
    }

    #[test]
    fn evaluate_rejects_empty_and_scores_duplicates_identically() {
        let bundle = zero_bundle();
        let grid = ScaleGrid::default();
        let (fp, bp) = (FrangiParams::default(), BtfParams::default());
        assert!(evaluate(&bundle, &[], &grid, &fp, &bp).is_err());
        let phantoms = tiny_phantoms(49);
        let doubled: Vec<PhantomSample> = phantoms.iter().chain(phantoms.iter()).cloned().collect();
        let report = evaluate(&bundle, &doubled, &grid, &fp, &bp).unwrap();
        for n in 0..phantoms.len() {
            assert_eq!(
                report.rows()[n].dice,
                report.rows()[n + phantoms.len()].dice
            );
        }
    }

    #[test]
    fn eval_report_groups_by_domain() {
        let rows = vec![
            EvalRow {
                sample: 0,
                domain: "a".into(),
                dice: 0.2,
            },
            EvalRow {
                sample: 1,
                domain: "b".into(),
                dice: 0.8,
            },
            EvalRow {
                sample: 2,
                domain: "a".into(),
                dice: 0.4,
            },
        ];
        let report = EvalReport { rows };
        let overall = report.overall();
        assert!((overall.mean - (0.2 + 0.8 + 0.4) / 3.0).abs() < 1e-15);
        assert_eq!(overall.median, 0.4);
        assert_eq!(overall.min, 0.2);
        let by = report.by_domain();
        assert_eq!(by[0].0, "a");
        assert!((by[0].1.mean - 0.3).abs() < 1e-15);
        assert_eq!(by[0].1.median, 0.30000000000000004);
        assert_eq!(by[1].0, "b");
        assert_eq!(by[1].1.min, 0.8);
    }

    #[test]
    fn config_roundtrips_through_key_value_text() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        let mut config = TrainConfig::reference(99);
        config.update_decoder_stage2 = true;
        config.swap_prob = 0.25;
        write_config(&path, &config).unwrap();
        let back = read_config(&path).unwrap();
        assert_eq!(back, config);
        // comments and blanks are tolerated; junk keys are not
        std::fs::write(&path, "# comment\n\nseed = 5\n").unwrap();
        assert_eq!(read_config(&path).unwrap().seed, 5);
        std::fs::write(&path, "sigma_mon = 1\n").unwrap();
        assert!(read_config(&path).is_err());
        std::fs::write(&path, "seed\n").unwrap();
        assert!(read_config(&path).is_err());
    }

    #[test]
    fn csv_writers_use_lf_and_dot_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let loss_path = dir.path().join("loss.csv");
        write_loss_csv(&loss_path, &[0.75, 0.5]).unwrap();
        let text = std::fs::read_to_string(&loss_path).unwrap();
        assert_eq!(text, "epoch,mean_loss\n1,0.75\n2,0.5\n");
        let eval_path = dir.path().join("eval.csv");
        let report = EvalReport {
            rows: vec![EvalRow {
                sample: 0,
                domain: "source".into(),
                dice: 0.875,
            }],
        };
        write_eval_csv(&eval_path, &report).unwrap();
        let text = std::fs::read_to_string(&eval_path).unwrap();
        assert_eq!(text, "sample,domain,dice\n0,source,0.875\n");
        assert!(!text.contains('\r'));
    }

    #[test]
    fn run_directory_gates_stages_and_assembles_the_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path();
        let phantoms = tiny_phantoms(50);
        let config = tiny_config(12);

        // stage 2 before stage 1: the error names the missing checkpoint
        let err = run_stage2(run, &phantoms, &config).unwrap_err();
        assert!(err.to_string().contains("stage1"), "{err}");
        assert!(load_bundle(run).is_err());

        run_stage1(run, &phantoms, &config).unwrap();
        assert!(run.join("stage1/checkpoint.vmck").exists());
        assert!(run.join("stage1/decoder.vmck").exists());
        assert!(run.join("config.txt").exists());
        let loss_text = std::fs::read_to_string(run.join("stage1/loss.csv")).unwrap();
        assert_eq!(loss_text.lines().count(), config.stage_epochs[0] + 1);

        run_stage2(run, &phantoms, &config).unwrap();
        run_stage3(run, &phantoms, &config).unwrap();
        let bundle = load_bundle(run).unwrap();
        let report = evaluate(
            &bundle,
            &phantoms,
            &config.scale_grid().unwrap(),
            &config.frangi().unwrap(),
            &config.btf().unwrap(),
        )
        .unwrap();
        assert_eq!(report.rows().len(), phantoms.len());
    }
}
