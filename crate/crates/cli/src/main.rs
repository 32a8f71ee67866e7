//! `megre`: dataset generation, training, reconstruction, evaluation and QSM
//! from the command line.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures (with a
//! JSON error object on standard error).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use megre_core::autodiff::Tensor;
use megre_core::container::{write_atomic, Axis, Container};
use megre_core::dataset::{self, DatasetSpec};
use megre_core::metrics::score;
use megre_core::phantom::{echo_times, PhantomKind};
use megre_core::preview::encode_pgm;
use megre_core::qsm::{self, DipoleSettings, FitSettings};
use megre_core::sampling::{self, SamplingMode, SamplingPattern};
use megre_core::training::{self, Checkpoint, EvalReport, SliceEntry, SpoMode, Stage, TrainConfig, TrainHooks};
use megre_core::{Error, KSpaceData, MultiEchoImage};
use serde_json::json;

#[derive(Parser)]
#[command(name = "megre", version, about = "Multi-echo GRE reconstruction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a seeded synthetic dataset (one container per slice).
    GenPhantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        echoes: usize,
        #[arg(long, default_value_t = 4)]
        coils: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "shepp-logan-like")]
        kind: PhantomKind,
    },
    /// Writes a sampling pattern: a variable-density mask or a fresh learnable one.
    MakePattern {
        #[arg(long, value_enum)]
        mode: PatternKind,
        #[arg(long, default_value_t = sampling::DEFAULT_RATIO)]
        ratio: f32,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        echoes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Variable-density decay power.
        #[arg(long, default_value_t = 2.0)]
        decay: f32,
        /// Side of the fully sampled central block (variable density only).
        #[arg(long, default_value_t = 4)]
        acs: usize,
        /// Per-echo weights for learned-init; one shared map otherwise.
        #[arg(long)]
        multi: bool,
    },
    /// Trains a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory; overrides `dataset` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Runs only this stage. Without it the joint stage runs, followed by
        /// the frozen-mask stage when the config has one.
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
        /// Continues from the checkpoint at `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Reconstructs one slice container with a trained checkpoint.
    Recon {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Writes the zero-filled image instead of running the network.
        #[arg(long)]
        zero_filled: bool,
    },
    /// Scores reconstructions against labels (files or directories of files).
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Field-map fit and dipole inversion of a multi-echo image container.
    Qsm {
        #[arg(long)]
        recon: PathBuf,
        /// First echo time and echo spacing in ms, e.g. `1.972,3.384`.
        #[arg(long, value_parser = parse_pair)]
        tes: (f32, f32),
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        reg: f64,
        /// Main-field direction `y,x,z`.
        #[arg(long, value_parser = parse_triple, default_value = "0,0,1")]
        b0: [f64; 3],
        /// Voxels whose first echo is below this fraction of the maximum are skipped.
        #[arg(long, default_value_t = 0.05)]
        support: f32,
        /// Also writes PGM previews next to `--out`.
        #[arg(long)]
        pgm: bool,
    },
    /// Writes the sampling pattern of a checkpoint plus PGM previews.
    ExportPattern {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the five ablation configurations and writes a comparison table.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PatternKind {
    Vd,
    LearnedInit,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Joint,
    FrozenMask,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Joint => Stage::Joint,
            StageArg::FrozenMask => Stage::FrozenMask,
        }
    }
}

fn parse_pair(s: &str) -> Result<(f32, f32), String> {
    let v: Vec<f32> = s
        .split(',')
        .map(|p| p.trim().parse::<f32>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected two comma-separated numbers, got `{s}`")),
    }
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected three comma-separated numbers, got `{s}`"))
}

type CliResult<T = ()> = Result<T, Error>;

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// `dir/name` with `suffix` appended to the file stem, e.g. `out_prob.pgm`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn pattern_container(pattern: &SamplingPattern, masks: &Tensor) -> CliResult<Container> {
    let (h, w) = pattern.grid();
    let mut c = Container::new(json!({
        "mode": pattern.mode(),
        "n_echoes": pattern.n_echoes(),
        "height": h,
        "width": w,
        "target_ratio": pattern.target_ratio(),
        "slope": pattern.slope(),
        "force_dc": pattern.force_dc(),
        "acs_lines": pattern.acs_lines(),
    }));
    let axes = [Axis::Echo, Axis::Ky, Axis::Kx];
    c.push_f32("masks", &axes, masks.clone())?;
    if let Some(w) = pattern.weights() {
        c.push_f32("weights", &axes, w.clone())?;
        c.push_f32("probabilities", &axes, pattern.probabilities()?)?;
    }
    Ok(c)
}

/// One centred PGM per echo of `stack` (`(echo, ky, kx)`), values in `[0, 1]`.
fn write_stack_pgm(stack: &Tensor, base: &Path, label: &str) -> CliResult {
    for j in 0..stack.shape()[0] {
        let plane = sampling::fftshift(&stack.index0(j)?)?;
        let bytes = encode_pgm(&plane, Some((0.0, 1.0)))?;
        write_atomic(&sibling(base, &format!("_{label}_echo{j}.pgm")), &bytes)?;
    }
    Ok(())
}

fn gen_phantom(out: &Path, spec: DatasetSpec) -> CliResult {
    let slices = dataset::generate(&spec)?;
    dataset::write_dataset(out, &spec, &slices)?;
    eprintln!("wrote {} slices to {}", slices.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn make_pattern(
    mode: PatternKind,
    ratio: f32,
    size: usize,
    echoes: usize,
    seed: u64,
    decay: f32,
    acs: usize,
    multi: bool,
    out: &Path,
) -> CliResult {
    let pattern = match mode {
        PatternKind::Vd => {
            let mask = sampling::manual_variable_density(size, size, ratio, decay, acs, seed)?;
            SamplingPattern::manual(&mask, echoes)?
        }
        PatternKind::LearnedInit => {
            let m = if multi { SamplingMode::SpoMulti } else { SamplingMode::SpoSingle };
            SamplingPattern::learned(m, echoes, size, size, ratio, seed)?
        }
    };
    let masks = pattern.sample(seed)?;
    pattern_container(&pattern, &masks)?.write(out)
}

fn train(config_path: &Path, out: &Path, data: Option<PathBuf>, stage: Option<StageArg>, resume: bool) -> CliResult {
    let text = fs::read_to_string(config_path).map_err(|source| Error::Io {
        path: config_path.to_path_buf(),
        source,
    })?;
    let mut config: TrainConfig = serde_json::from_str(&text)?;
    if let Some(d) = data {
        config.dataset = Some(d);
    }
    let Some(dir) = config.dataset.clone() else {
        return Err(Error::InvalidArgument("no dataset: set `dataset` in the config or pass --data".into()));
    };
    let (_, slices) = dataset::read_dataset(&dir)?;
    let resume_ck = if resume { Some(Checkpoint::load(out)?) } else { None };
    let mut progress = |row: &training::CurveRow| {
        eprintln!(
            "[{:?}] epoch {} loss {:.4} val psnr {:.3} ssim {:.4}",
            row.stage, row.epoch, row.loss, row.val_psnr, row.val_ssim
        );
    };
    let outcome = match stage {
        Some(s) => {
            config.stage = s.into();
            let hooks = TrainHooks {
                checkpoint_path: Some(out),
                on_epoch: Some(&mut progress),
            };
            training::train(&config, &slices, resume_ck, hooks)?
        }
        None if resume_ck.is_some() => {
            return Err(Error::InvalidArgument("--resume needs an explicit --stage".into()));
        }
        None => training::train_pipeline(&config, &slices, Some(out))?,
    };
    write_json(&sibling(out, ".report.json"), &outcome.report)?;
    write_atomic(
        &sibling(out, ".curves.csv"),
        training::curves_csv(&outcome.report.curves).as_bytes(),
    )?;
    let v = &outcome.report.validation;
    eprintln!(
        "validation psnr {:.3} ± {:.3} ssim {:.4} (zero-filled {:.3})",
        v.mean_psnr, v.std_psnr, v.mean_ssim, outcome.report.zero_filled.mean_psnr
    );
    Ok(())
}

fn recon(ckpt: &Path, input: &Path, out: &Path, zero_filled: bool) -> CliResult {
    let ck = Checkpoint::load(ckpt)?;
    let c = Container::read(input)?;
    let kspace = KSpaceData::new(
        c.c64("kspace")?.clone(),
        c.f32("masks")?.clone(),
        c.meta.get("noise_sigma").and_then(|v| v.as_f64()).unwrap_or(0.0) as f32,
    )?;
    let coils = megre_core::CoilSensitivities::new(c.c64("coils")?.clone())?;
    // Fully sampled input is undersampled with the checkpoint's pattern;
    // anything else is taken as already acquired.
    let masks = if kspace.masks().data().iter().all(|&m| m == 1.0) {
        ck.eval_masks()?
    } else {
        kspace.masks().clone()
    };
    let images = if zero_filled {
        training::zero_filled(&kspace, &coils, &masks)?
    } else {
        training::reconstruct(&ck.model, &kspace, &coils, &masks)?
    };
    let meta = json!({
        "fingerprint": ck.config.fingerprint()?,
        "echo_times": c.meta.get("echo_times"),
        "index": c.meta.get("index"),
        "zero_filled": zero_filled,
    });
    dataset::image_container(&images, meta)?.write(out)
}

/// Pairs of `(slice index, recon file, reference file)`.
fn eval_pairs(recon: &Path, reference: &Path) -> CliResult<Vec<(usize, PathBuf, PathBuf)>> {
    if !recon.is_dir() {
        return Ok(vec![(0, recon.to_path_buf(), reference.to_path_buf())]);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(recon)
        .map_err(|source| Error::Io {
            path: recon.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "met"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no .met files in {}", recon.display())));
    }
    Ok(names
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let r = reference.join(p.file_name().unwrap_or_default());
            (i, p, r)
        })
        .collect())
}

fn eval(recon: &Path, reference: &Path, out: &Path) -> CliResult {
    let mut entries = Vec::new();
    let mut fingerprint = String::new();
    for (i, rp, lp) in eval_pairs(recon, reference)? {
        let rc = Container::read(&rp)?;
        let lc = Container::read(&lp)?;
        let index = rc.meta.get("index").and_then(|v| v.as_u64()).map_or(i, |v| v as usize);
        if let Some(f) = rc.meta.get("fingerprint").and_then(|v| v.as_str()) {
            fingerprint = f.to_string();
        }
        let s = score(&dataset::images_from_container(&rc)?, &dataset::images_from_container(&lc)?)?;
        entries.push(SliceEntry {
            slice: index,
            psnr: s.psnr,
            ssim: s.ssim,
        });
    }
    let report = EvalReport::from_entries(fingerprint, entries);
    write_json(out, &report)?;
    eprintln!("psnr {:.3} ssim {:.4}", report.mean_psnr, report.mean_ssim);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_qsm(recon: &Path, tes: (f32, f32), out: &Path, reg: f64, b0: [f64; 3], support: f32, pgm: bool) -> CliResult {
    let images: MultiEchoImage = dataset::images_from_container(&Container::read(recon)?)?;
    let times = echo_times(tes.0, tes.1, images.n_echoes());
    let first = images.magnitude(0);
    let peak = first.data().iter().fold(0.0f32, |m, &v| m.max(v));
    let mask = first.map(|v| if v > support * peak { 1.0 } else { 0.0 });
    let fit = qsm::fit_field_lm(&images, &times, Some(&mask), &FitSettings::default())?;
    let settings = DipoleSettings {
        b0_direction: b0,
        reg_weight: reg,
        ..DipoleSettings::default()
    };
    let chi = qsm::dipole_invert(&fit.field, &settings)?.zip_with(&mask, |c, m| c * m)?;
    let status = fit.status_map();
    let maps = [
        ("m0", &fit.m0),
        ("r2star", &fit.r2star),
        ("phi0", &fit.phi0),
        ("field", &fit.field),
        ("residual", &fit.residual),
        ("status", &status),
        ("chi", &chi),
    ];
    let meta = json!({
        "echo_times": times,
        "dipole": settings,
        "median_residual": fit.median_residual(),
        "fitted_voxels": fit.fitted().count(),
    });
    dataset::map_container(&maps, meta)?.write(out)?;
    if pgm {
        for (name, map) in [("field", &fit.field), ("chi", &chi), ("r2star", &fit.r2star)] {
            write_atomic(&sibling(out, &format!("_{name}.pgm")), &encode_pgm(map, None)?)?;
        }
    }
    eprintln!(
        "fitted {} voxels, median residual {:.4e}",
        fit.fitted().count(),
        fit.median_residual()
    );
    Ok(())
}

fn export_pattern(ckpt: &Path, out: &Path) -> CliResult {
    let ck = Checkpoint::load(ckpt)?;
    let masks = ck.eval_masks()?;
    pattern_container(&ck.pattern, &masks)?.write(out)?;
    write_stack_pgm(&masks, out, "mask")?;
    if ck.pattern.weights().is_some() {
        write_stack_pgm(&ck.pattern.probabilities()?, out, "prob")?;
    }
    Ok(())
}

fn ablation(data: &Path, out: &Path, config: Option<PathBuf>, seeds: &[u64]) -> CliResult {
    let base: TrainConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|source| Error::Io { path: p.clone(), source })?;
            serde_json::from_str(&text)?
        }
        None => TrainConfig::default(),
    };
    let (_, slices) = dataset::read_dataset(data)?;
    let base = TrainConfig {
        dataset: Some(data.to_path_buf()),
        spo: SpoMode::None,
        ..base
    };
    let rows = training::run_ablation(&base, &slices, seeds)?;
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    write_json(&out.join("ablation.json"), &rows)?;
    let md = training::ablation_markdown(&rows);
    write_atomic(&out.join("ablation.md"), md.as_bytes())?;
    print!("{md}");
    eprintln!(
        "rank correlation of PSNR with lower field-fit residual: {:.3}",
        training::psnr_residual_rank_correlation(&rows)?
    );
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("MEGRE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("MEGRE_THREADS must be a non-negative integer, got `{v}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::GenPhantom {
            out,
            n,
            size,
            echoes,
            coils,
            noise,
            seed,
            kind,
        } => gen_phantom(
            &out,
            DatasetSpec {
                n_slices: n,
                size,
                n_echoes: echoes,
                n_coils: coils,
                noise_sigma: noise,
                seed,
                kind,
                ..DatasetSpec::default()
            },
        ),
        Command::MakePattern {
            mode,
            ratio,
            size,
            echoes,
            seed,
            out,
            decay,
            acs,
            multi,
        } => make_pattern(mode, ratio, size, echoes, seed, decay, acs, multi, &out),
        Command::Train {
            config,
            out,
            data,
            stage,
            resume,
        } => train(&config, &out, data, stage, resume),
        Command::Recon {
            ckpt,
            input,
            out,
            zero_filled,
        } => recon(&ckpt, &input, &out, zero_filled),
        Command::Eval { recon, reference, out } => eval(&recon, &reference, &out),
        Command::Qsm {
            recon,
            tes,
            out,
            reg,
            b0,
            support,
            pgm,
        } => run_qsm(&recon, tes, &out, reg, b0, support, pgm),
        Command::ExportPattern { ckpt, out } => export_pattern(&ckpt, &out),
        Command::Ablation {
            data,
            out,
            config,
            seeds,
        } => ablation(&data, &out, config, &seeds),
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Tensor(_) => "tensor",
        Error::InvalidArgument(_) => "invalid-argument",
        Error::Contract(_) => "contract",
        Error::NonFiniteLoss { .. } => "non-finite-loss",
        Error::Container(_) => "container",
        Error::Io { .. } => "io",
        Error::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": error_kind(&e), "message": e.to_string()}));
            ExitCode::from(2)
        }
    }
}
