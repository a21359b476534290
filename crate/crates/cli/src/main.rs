//! `vessel`: the toolkit's command-line surface. Thin synchronous shell over
//! the library — each subcommand parses flags, calls one library entry
//! point, and maps the error family to an exit code:
//!
//! 0 success · 1 usage or validation error · 2 I/O or file-format error ·
//! 3 numeric failure (divergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vessel_core::io::{load_image, read_field, save_image, save_mask, write_field, ChannelSelect};
use vessel_core::{
    build_btf, evaluate, generate_phantoms, infer, load_bundle, multiscale_vesselness, read_config,
    render_btf, run_stage1, run_stage2, run_stage3, write_eval_csv, BtfParams, DiceSummary,
    DomainDescriptor, Error, EvalReport, FrangiParams, Image, MultiChannelField, PhantomSample,
    RenderMode, Result, ScaleGrid, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "vessel",
    version,
    about = "Tubular-structure filtering, bipolar tensor fields, and the two-encoder segmentation pipeline"
)]
struct Cli {
    /// Cap the worker thread pool (default: one thread per core)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

// the variant sizes differ by design: `train` simply has many knobs, and a
// one-shot CLI parses exactly one of these
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Command {
    /// Multiscale vesselness: write the per-pixel response and optimal scale
    Vesselness(VesselnessCmd),
    /// Bipolar tensor field: write the 4-channel descriptor
    Btf(BtfCmd),
    /// Generate synthetic tubular phantoms with ground-truth masks
    Synth(SynthCmd),
    /// Train the three-stage pipeline into a run directory
    Train(TrainCmd),
    /// Segment one image with a trained run directory
    Infer(InferCmd),
    /// Score a trained run directory and write eval.csv
    Eval(EvalCmd),
    /// Render a 4-channel tensor field to a PNG
    Render(RenderCmd),
}

#[derive(Args)]
struct InputArgs {
    /// Input image: 8-bit PNG/PGM or a 1-channel VMTF field
    input: PathBuf,

    /// Color plane to read from RGB inputs
    #[arg(long, default_value = "gray")]
    channel: ChannelSelect,

    /// Invert intensities after loading (for dark-vessel modalities)
    #[arg(long)]
    negate: bool,
}

impl InputArgs {
    fn load(&self) -> Result<Image> {
        load_image(&self.input, self.channel, self.negate)
    }
}

#[derive(Args)]
struct FilterArgs {
    /// Smallest filter scale in pixels
    #[arg(long, default_value_t = 1.0)]
    sigma_min: f64,

    /// Largest filter scale in pixels
    #[arg(long, default_value_t = 5.0)]
    sigma_max: f64,

    /// Spacing of the scale grid
    #[arg(long, default_value_t = 0.5)]
    sigma_step: f64,

    /// Blob-vs-line sensitivity of the vesselness response
    #[arg(long, default_value_t = 0.5)]
    beta: f64,

    /// Structureness normalization of the vesselness response
    #[arg(long, default_value_t = 0.5)]
    c: f64,
}

impl FilterArgs {
    fn grid(&self) -> Result<ScaleGrid> {
        ScaleGrid::new(self.sigma_min, self.sigma_max, self.sigma_step)
    }

    fn frangi(&self) -> Result<FrangiParams> {
        FrangiParams::new(self.beta, self.c)
    }
}

#[derive(Args)]
struct VesselnessCmd {
    #[command(flatten)]
    input: InputArgs,

    #[command(flatten)]
    filter: FilterArgs,

    /// Output VMTF for the vesselness response
    #[arg(long)]
    out: PathBuf,

    /// Output VMTF for the optimal scales (default: <out>.sigma.vmtf)
    #[arg(long)]
    sigma_out: Option<PathBuf>,

    /// Also write an 8-bit preview of the response
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RenderArg {
    /// One orientation ellipse per block
    Glyph,
    /// Per-pixel orientation hue, magnitude value
    Hue,
}

impl From<RenderArg> for RenderMode {
    fn from(arg: RenderArg) -> RenderMode {
        match arg {
            RenderArg::Glyph => RenderMode::Glyph,
            RenderArg::Hue => RenderMode::Hue,
        }
    }
}

#[derive(Args)]
struct BtfCmd {
    #[command(flatten)]
    input: InputArgs,

    #[command(flatten)]
    filter: FilterArgs,

    /// Pole sharpness ε of the tensor magnitudes
    #[arg(long, default_value_t = 0.5)]
    epsilon: f64,

    /// Output VMTF for the 4-channel tensor field
    #[arg(long)]
    out: PathBuf,

    /// Also render the field to a PNG (requires --png)
    #[arg(long, requires = "png")]
    render: Option<RenderArg>,

    /// Path of the rendered PNG
    #[arg(long, requires = "render")]
    png: Option<PathBuf>,

    /// Block size of glyph rendering
    #[arg(long, default_value_t = 8)]
    glyph_spacing: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    /// Bright vessels, moderate noise
    Source,
    /// Dark-on-bright polarity
    Inverted,
    /// Vessels twice as wide
    Wide,
    /// Half the vessel contrast
    LowContrast,
}

impl DomainArg {
    fn descriptor(self) -> DomainDescriptor {
        match self {
            DomainArg::Source => DomainDescriptor::source(),
            DomainArg::Inverted => DomainDescriptor::inverted(),
            DomainArg::Wide => DomainDescriptor::wide(),
            DomainArg::LowContrast => DomainDescriptor::low_contrast(),
        }
    }
}

fn descriptor_by_name(name: &str) -> Result<DomainDescriptor> {
    match name {
        "source" => Ok(DomainDescriptor::source()),
        "inverted" => Ok(DomainDescriptor::inverted()),
        "wide" => Ok(DomainDescriptor::wide()),
        "low-contrast" => Ok(DomainDescriptor::low_contrast()),
        other => Err(Error::Format(format!("unknown domain name {other:?}"))),
    }
}

#[derive(Args)]
struct SynthCmd {
    /// Directory for the numbered samples and manifest.csv
    #[arg(long)]
    out_dir: PathBuf,

    /// Phantom generator seed (required: no hidden entropy)
    #[arg(long)]
    seed: u64,

    /// Number of samples
    #[arg(long, default_value_t = 16)]
    count: usize,

    /// Image side length in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,

    /// Rendering recipe of the generated domain
    #[arg(long, value_enum, default_value_t = DomainArg::Source)]
    domain: DomainArg,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Args)]
struct TrainCmd {
    /// Run directory for checkpoints, loss curves, and config
    #[arg(long)]
    run_dir: PathBuf,

    /// Stage to train; each stage requires the previous one's checkpoints
    #[arg(long, value_enum)]
    stage: StageArg,

    /// Master seed (required: no hidden entropy). Training data derives
    /// from seed+1, so data and optimizer streams never overlap.
    #[arg(long)]
    seed: u64,

    /// Training-set size [default: 16]
    #[arg(long)]
    count: Option<usize>,

    /// Phantom side length in pixels [default: 64]
    #[arg(long)]
    size: Option<usize>,

    /// Training-data domain [default: source]
    #[arg(long, value_enum)]
    domain: Option<DomainArg>,

    /// Config file of `key = value` lines; explicit flags override it
    #[arg(long)]
    config: Option<PathBuf>,

    /// Stage-1 epochs [default: 100]
    #[arg(long)]
    epochs_stage1: Option<usize>,

    /// Stage-2 epochs [default: 100]
    #[arg(long)]
    epochs_stage2: Option<usize>,

    /// Stage-3 epochs [default: 100]
    #[arg(long)]
    epochs_stage3: Option<usize>,

    /// Samples per optimizer step [default: 5]
    #[arg(long)]
    batch_size: Option<usize>,

    /// Initial rate of the intensity pathway [default: 5e-4]
    #[arg(long)]
    lr_intensity: Option<f64>,

    /// Initial rate of the structure pathway [default: 5e-4]
    #[arg(long)]
    lr_structure: Option<f64>,

    /// Initial rate of the fusion segmenter [default: 1e-3]
    #[arg(long)]
    lr_fusion: Option<f64>,

    /// Weight of the stage-2 segmentation term [default: 1]
    #[arg(long)]
    omega1: Option<f64>,

    /// Weight of the stage-2 similarity term [default: 5]
    #[arg(long)]
    omega2: Option<f64>,

    /// Keep updating the shared decoder in stage 2 [default: false]
    #[arg(long)]
    update_decoder_stage2: Option<bool>,

    /// Side length of the fusion swap patches [default: 16]
    #[arg(long)]
    patch_size: Option<usize>,

    /// Per-patch swap probability [default: 0.5]
    #[arg(long)]
    swap_prob: Option<f64>,

    /// Smallest tensor-field scale [default: 1]
    #[arg(long)]
    sigma_min: Option<f64>,

    /// Largest tensor-field scale [default: 5]
    #[arg(long)]
    sigma_max: Option<f64>,

    /// Tensor-field scale spacing [default: 0.5]
    #[arg(long)]
    sigma_step: Option<f64>,

    /// Vesselness blob-vs-line sensitivity [default: 0.5]
    #[arg(long)]
    beta: Option<f64>,

    /// Vesselness structureness normalization [default: 0.5]
    #[arg(long)]
    c: Option<f64>,

    /// Tensor pole sharpness [default: 0.5]
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct InferCmd {
    #[command(flatten)]
    input: InputArgs,

    /// Trained run directory (stages 1–3 complete)
    #[arg(long)]
    run_dir: PathBuf,

    /// Output PNG of per-pixel vessel probability
    #[arg(long)]
    prob: PathBuf,

    /// Output PNG of the thresholded binary mask
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    /// Trained run directory (stages 1–3 complete)
    #[arg(long)]
    run_dir: PathBuf,

    /// Score a synth directory instead of regenerating the training set
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RenderCmd {
    /// 4-channel VMTF tensor field
    input: PathBuf,

    /// Rendering mode
    #[arg(long, value_enum, default_value_t = RenderArg::Hue)]
    mode: RenderArg,

    /// Output PNG
    #[arg(long)]
    out: PathBuf,

    /// Block size of glyph rendering
    #[arg(long, default_value_t = 8)]
    glyph_spacing: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return if usage_error {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS // --help / --version
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Shape(_) | Error::InvalidParam(_) => 1,
                Error::Io { .. } | Error::Codec { .. } | Error::Format(_) => 2,
                Error::Numeric(_) => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParam("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidParam(format!("cannot size the thread pool: {e}")))?;
    }
    match cli.command {
        Command::Vesselness(cmd) => cmd_vesselness(cmd),
        Command::Btf(cmd) => cmd_btf(cmd),
        Command::Synth(cmd) => cmd_synth(cmd),
        Command::Train(cmd) => cmd_train(cmd),
        Command::Infer(cmd) => cmd_infer(cmd),
        Command::Eval(cmd) => cmd_eval(cmd),
        Command::Render(cmd) => cmd_render(cmd),
    }
}

fn single_channel(img: &Image) -> MultiChannelField {
    MultiChannelField::from_channels(&[img]).expect("one plane always stacks")
}

fn cmd_vesselness(cmd: VesselnessCmd) -> Result<()> {
    let x = cmd.input.load()?;
    let res = multiscale_vesselness(&x, &cmd.filter.grid()?, &cmd.filter.frangi()?)?;
    write_field(&single_channel(&res.vesselness), &cmd.out)?;
    let sigma_out = cmd
        .sigma_out
        .unwrap_or_else(|| cmd.out.with_extension("sigma.vmtf"));
    write_field(&single_channel(&res.sigma_star), &sigma_out)?;
    if let Some(png) = &cmd.png {
        save_image(&res.vesselness, png)?;
    }
    println!("wrote {} and {}", cmd.out.display(), sigma_out.display());
    Ok(())
}

fn cmd_btf(cmd: BtfCmd) -> Result<()> {
    let x = cmd.input.load()?;
    let field = build_btf(
        &x,
        &cmd.filter.grid()?,
        &cmd.filter.frangi()?,
        &BtfParams::new(cmd.epsilon)?,
    )?;
    write_field(&field, &cmd.out)?;
    if let Some(mode) = cmd.render {
        let png = cmd.png.expect("clap enforces --render requires --png");
        render_btf(&field, mode.into(), cmd.glyph_spacing)?.save_png(&png)?;
    }
    println!("wrote {}", cmd.out.display());
    Ok(())
}

fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{index:03}.png")),
        dir.join(format!("{index:03}.mask.png")),
    )
}

fn cmd_synth(cmd: SynthCmd) -> Result<()> {
    let samples = generate_phantoms(
        cmd.count,
        &cmd.domain.descriptor(),
        (cmd.size, cmd.size),
        cmd.seed,
    )?;
    std::fs::create_dir_all(&cmd.out_dir).map_err(|e| Error::io(&cmd.out_dir, e))?;
    let mut manifest = String::from("sample,domain\n");
    for (n, s) in samples.iter().enumerate() {
        let (img_path, mask_path) = sample_paths(&cmd.out_dir, n);
        save_image(&s.image, &img_path)?;
        save_mask(&s.mask, &mask_path)?;
        manifest.push_str(&format!("{n},{}\n", s.domain.name()));
    }
    let manifest_path = cmd.out_dir.join("manifest.csv");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    println!("wrote {} samples to {}", cmd.count, cmd.out_dir.display());
    Ok(())
}

/// What the phantoms were generated from, recorded next to config.txt so
/// later `train`/`eval` invocations reuse the identical training set.
struct DataSpec {
    count: usize,
    size: usize,
    domain: String,
    data_seed: u64,
}

impl DataSpec {
    fn generate(&self) -> Result<Vec<PhantomSample>> {
        generate_phantoms(
            self.count,
            &descriptor_by_name(&self.domain)?,
            (self.size, self.size),
            self.data_seed,
        )
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = format!(
            "count = {}\nsize = {}\ndomain = {}\ndata_seed = {}\n",
            self.count, self.size, self.domain, self.data_seed
        );
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn read(path: &Path) -> Result<DataSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec = DataSpec {
            count: 0,
            size: 0,
            domain: String::new(),
            data_seed: 0,
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad =
                |msg: String| Error::Format(format!("{}:{}: {msg}", path.display(), lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse = |what: &str| bad(format!("cannot parse {value:?} as {what} for {key}"));
            match key {
                "count" => spec.count = value.parse().map_err(|_| parse("an integer"))?,
                "size" => spec.size = value.parse().map_err(|_| parse("an integer"))?,
                "domain" => spec.domain = value.to_string(),
                "data_seed" => spec.data_seed = value.parse().map_err(|_| parse("an integer"))?,
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(spec)
    }
}

fn cmd_train(cmd: TrainCmd) -> Result<()> {
    let mut config = match &cmd.config {
        Some(path) => read_config(path)?,
        None => TrainConfig::default(),
    };
    config.seed = cmd.seed;
    macro_rules! apply {
        ($($flag:ident => $field:ident $([$idx:literal])?),* $(,)?) => {
            $(if let Some(v) = cmd.$flag { config.$field $([$idx])? = v; })*
        };
    }
    apply!(
        epochs_stage1 => stage_epochs[0],
        epochs_stage2 => stage_epochs[1],
        epochs_stage3 => stage_epochs[2],
        batch_size => batch_size,
        lr_intensity => lr_intensity,
        lr_structure => lr_structure,
        lr_fusion => lr_fusion,
        omega1 => omega1,
        omega2 => omega2,
        update_decoder_stage2 => update_decoder_stage2,
        patch_size => patch_size,
        swap_prob => swap_prob,
        sigma_min => sigma_min,
        sigma_max => sigma_max,
        sigma_step => sigma_step,
        beta => beta,
        c => c,
        epsilon => epsilon,
    );
    config.validate()?;

    let spec = DataSpec {
        count: cmd.count.unwrap_or(16),
        size: cmd.size.unwrap_or(64),
        domain: cmd
            .domain
            .unwrap_or(DomainArg::Source)
            .descriptor()
            .name()
            .to_string(),
        data_seed: cmd.seed.wrapping_add(1),
    };
    std::fs::create_dir_all(&cmd.run_dir).map_err(|e| Error::io(&cmd.run_dir, e))?;
    let spec_path = cmd.run_dir.join("data.txt");
    if spec_path.exists() {
        let existing = DataSpec::read(&spec_path)?;
        if (
            existing.count,
            existing.size,
            &existing.domain,
            existing.data_seed,
        ) != (spec.count, spec.size, &spec.domain, spec.data_seed)
        {
            return Err(Error::InvalidParam(format!(
                "{} was trained on different data (count {}, size {}, domain {}, seed {}); \
                 match those flags or use a fresh run directory",
                spec_path.display(),
                existing.count,
                existing.size,
                existing.domain,
                existing.data_seed
            )));
        }
    } else {
        spec.write(&spec_path)?;
    }
    let phantoms = spec.generate()?;

    let stages = match cmd.stage {
        StageArg::All => vec![StageArg::One, StageArg::Two, StageArg::Three],
        single => vec![single],
    };
    for stage in stages {
        let (n, losses) = match stage {
            StageArg::One => (
                1,
                run_stage1(&cmd.run_dir, &phantoms, &config)?.epoch_losses,
            ),
            StageArg::Two => (
                2,
                run_stage2(&cmd.run_dir, &phantoms, &config)?.epoch_losses,
            ),
            StageArg::Three => (
                3,
                run_stage3(&cmd.run_dir, &phantoms, &config)?.epoch_losses,
            ),
            StageArg::All => unreachable!("expanded above"),
        };
        println!(
            "stage {n}: {} epochs, mean loss {:.6} -> {:.6}",
            losses.len(),
            losses.first().unwrap(),
            losses.last().unwrap()
        );
    }
    Ok(())
}

fn run_params(run_dir: &Path) -> Result<(TrainConfig, ScaleGrid, FrangiParams, BtfParams)> {
    let config = read_config(run_dir.join("config.txt"))?;
    let grid = config.scale_grid()?;
    let frangi = config.frangi()?;
    let btf = config.btf()?;
    Ok((config, grid, frangi, btf))
}

fn cmd_infer(cmd: InferCmd) -> Result<()> {
    let x = cmd.input.load()?;
    let bundle = load_bundle(&cmd.run_dir)?;
    let (_, grid, frangi, btf) = run_params(&cmd.run_dir)?;
    let (prob, mask) = infer(&bundle, &x, &grid, &frangi, &btf)?;
    save_image(&prob, &cmd.prob)?;
    save_mask(&mask, &cmd.mask)?;
    println!("wrote {} and {}", cmd.prob.display(), cmd.mask.display());
    Ok(())
}

fn load_data_dir(dir: &Path) -> Result<Vec<PhantomSample>> {
    let manifest_path = dir.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (index, domain) = line.split_once(',').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected `sample,domain`",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        let index: usize = index.trim().parse().map_err(|_| {
            Error::Format(format!(
                "{}:{}: bad sample index {index:?}",
                manifest_path.display(),
                lineno + 1
            ))
        })?;
        let (img_path, mask_path) = sample_paths(dir, index);
        samples.push(PhantomSample {
            image: load_image(&img_path, ChannelSelect::Gray, false)?,
            mask: vessel_core::io::load_mask(&mask_path)?,
            domain: descriptor_by_name(domain.trim())?,
        });
    }
    if samples.is_empty() {
        return Err(Error::Format(format!(
            "{}: manifest lists no samples",
            manifest_path.display()
        )));
    }
    Ok(samples)
}

fn print_summary(label: &str, s: &DiceSummary, count: usize) {
    println!(
        "{label}: mean {:.4} median {:.4} min {:.4} ({count} samples)",
        s.mean, s.median, s.min
    );
}

fn cmd_eval(cmd: EvalCmd) -> Result<()> {
    let samples = match &cmd.data_dir {
        Some(dir) => load_data_dir(dir)?,
        None => DataSpec::read(&cmd.run_dir.join("data.txt"))?.generate()?,
    };
    let bundle = load_bundle(&cmd.run_dir)?;
    let (_, grid, frangi, btf) = run_params(&cmd.run_dir)?;
    let report: EvalReport = evaluate(&bundle, &samples, &grid, &frangi, &btf)?;
    write_eval_csv(cmd.run_dir.join("eval.csv"), &report)?;
    print_summary("overall", &report.overall(), report.rows().len());
    for (domain, summary) in report.by_domain() {
        let count = report.rows().iter().filter(|r| r.domain == domain).count();
        print_summary(&domain, &summary, count);
    }
    Ok(())
}

fn cmd_render(cmd: RenderCmd) -> Result<()> {
    let field = read_field(&cmd.input)?;
    render_btf(&field, cmd.mode.into(), cmd.glyph_spacing)?.save_png(&cmd.out)?;
    println!("wrote {}", cmd.out.display());
    Ok(())
}
