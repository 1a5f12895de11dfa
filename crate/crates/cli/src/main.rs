//! `primcomp` command-line front end.
//!
//! Exit codes: 0 on success, 1 when a command fails while running, 2 for
//! usage and validation errors (bad flags, missing or mismatched inputs).

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use primcomp::gradsuite::{self, Component};
use primcomp::networks::Checkpoint;
use primcomp::training::{
    camera_angles, derive_seed, edit_scene_file, generate_dataset, sample_scene, save_gray, save_gray16, save_rgb, train, value_range,
    Dataset, DatasetSpec, Edit, Model, RunFiles, SceneFile, SceneSample, TrainConfig,
};
use primcomp::Real;

#[derive(Parser)]
#[command(name = "primcomp", version, about = "Controllable image synthesis from 3D primitives")]
struct Cli {
    /// Worker threads; 1 gives the bitwise-reproducible mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed (meaning depends on the command).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML configuration: a dataset spec for gen-data, a training config for train.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural training dataset.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Sample images and scene files from a checkpoint.
    Sample(SampleArgs),
    /// Re-render a scene file after a pose or camera edit.
    Edit(EditArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of full-scene (c = 1) images.
    #[arg(long)]
    composites: Option<usize>,
    /// Number of background-only (c = 0) images.
    #[arg(long)]
    backgrounds: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Fewest objects in a full scene.
    #[arg(long)]
    min_objects: Option<usize>,
    /// Most objects in a full scene.
    #[arg(long)]
    max_objects: Option<usize>,
    /// Exact object count; shorthand for equal min and max.
    #[arg(long, conflicts_with_all = ["min_objects", "max_objects"])]
    objects: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Built-in configuration: default or smoke.
    #[arg(long, conflicts_with = "resume")]
    preset: Option<String>,
    /// Override the number of training steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from this checkpoint (optimizer state included).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of images to sample.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// 1 renders every primitive, 0 the background alone.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(0..=1))]
    c: u8,
    /// Also write each primitive's refined colour, alpha, depth and instance weight.
    #[arg(long)]
    dump_intermediates: bool,
}

#[derive(Args)]
struct EditArgs {
    /// Scene file written by sample or edit.
    #[arg(long)]
    scene: PathBuf,
    /// One of "translate i dx dy dz", "rotate i axis degrees", "camera azimuth elevation".
    #[arg(long)]
    edit: String,
    /// Use this checkpoint instead of the one named in the scene file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Emit this many frames that ramp the edit from none to full.
    #[arg(long)]
    sweep: Option<usize>,
    /// Also write the refined layers of every output image.
    #[arg(long)]
    dump_intermediates: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Which group of checks to run.
    #[arg(long, default_value = "all", value_parser = ["all", "autodiff", "projection", "warp", "losses", "networks"])]
    component: String,
    /// Number of random seeds per check.
    #[arg(long, default_value_t = gradsuite::DEFAULT_SEEDS)]
    seeds: u64,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Display) -> Failure {
    Failure {
        code: 2,
        message: message.to_string(),
    }
}

fn runtime(message: impl Display) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

impl From<primcomp::Error> for Failure {
    fn from(e: primcomp::Error) -> Self {
        use primcomp::Error::*;
        match e {
            Config(_) | Invalid(_) | Dataset(_) | Checkpoint(_) => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Sample(a) => sample_cmd(&cli, a),
        Command::Edit(a) => edit_cmd(&cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(&cli, a),
    }
}

fn required_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| usage("--out <dir> is required"))
}

fn no_config(cli: &Cli, command: &str) -> CmdResult {
    match &cli.config {
        Some(_) => Err(usage(format!("{command} reads its configuration from the checkpoint; drop --config"))),
        None => Ok(()),
    }
}

fn read_text(path: &Path, what: &str) -> Result<String, Failure> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Model, Failure> {
    if !path.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path).map_err(|e| usage(format!("cannot load checkpoint {}: {e}", path.display())))?;
    Model::from_checkpoint(&ckpt).map_err(|e| usage(format!("checkpoint {}: {e}", path.display())))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CmdResult {
    let out = required_out(cli)?;
    let mut spec = match &cli.config {
        Some(p) => DatasetSpec::from_toml(&read_text(p, "dataset spec")?)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    if let Some(n) = a.composites {
        spec.composite_count = n;
    }
    if let Some(n) = a.backgrounds {
        spec.background_count = n;
    }
    if let Some(s) = a.size {
        // keep the field of view when resizing
        spec.camera.focal *= s as Real / spec.camera.width as Real;
        spec.camera.width = s;
        spec.camera.height = s;
    }
    if let Some(n) = a.objects {
        spec.min_objects = n;
        spec.max_objects = n;
    }
    if let Some(n) = a.min_objects {
        spec.min_objects = n;
    }
    if let Some(n) = a.max_objects {
        spec.max_objects = n;
    }
    spec.validate()?;
    generate_dataset(&spec, out)?;
    println!(
        "wrote {} composites and {} backgrounds ({}x{}, seed {}) to {}",
        spec.composite_count,
        spec.background_count,
        spec.image_size(),
        spec.image_size(),
        spec.seed,
        out.display()
    );
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let out = required_out(cli)?;
    if !a.data.is_dir() {
        return Err(usage(format!("dataset directory {} does not exist", a.data.display())));
    }
    let mut model = match &a.resume {
        Some(ckpt) => {
            if cli.config.is_some() || cli.seed.is_some() {
                return Err(usage("--resume continues the checkpoint's own config; drop --config and --seed"));
            }
            load_checkpoint(ckpt)?
        }
        None => {
            let mut config = match (&cli.config, &a.preset) {
                (Some(_), Some(_)) => return Err(usage("give either --config or --preset, not both")),
                (Some(p), None) => TrainConfig::from_toml(&read_text(p, "config")?)?,
                (None, Some(name)) => TrainConfig::preset(name)?,
                (None, None) => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            if let Some(n) = a.steps {
                config.steps = n;
            }
            let log = RunFiles::new(out).log;
            if fs::metadata(&log).map(|m| m.len() > 0).unwrap_or(false) {
                return Err(usage(format!("{} already holds a run; pass --resume or pick another --out", out.display())));
            }
            Model::new(config)?
        }
    };
    if let (Some(_), Some(n)) = (&a.resume, a.steps) {
        if n < model.step {
            return Err(usage(format!("--steps {n} is below the checkpoint's step {}", model.step)));
        }
        model.config.steps = n;
    }
    let data = Dataset::load(&a.data)?;
    data.check_compatible(&model.config)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), model.config.to_toml())?;
    let total = model.config.steps;
    let start = model.step;
    let every = a.log_every;
    let records = train(&mut model, &data, out, |r| {
        let done = r.step + 1;
        if every > 0 && (done % every == 0 || done == total) {
            let rep = &r.report;
            eprintln!(
                "step {done}/{total}  adv_d {:.4}  r1 {:.4}  adv_g {:.4}  com {:.4}  geo {:.4}{}",
                rep.adv_d,
                rep.r1,
                rep.adv_g,
                rep.com,
                rep.geo,
                if r.aborted { "  (aborted)" } else { "" }
            );
        }
    })?;
    let aborted = records.iter().filter(|r| r.aborted).count();
    println!(
        "trained steps {start}..{} ({aborted} aborted); latest checkpoint {}",
        model.step,
        RunFiles::new(out).latest.display()
    );
    Ok(())
}

/// Writes `image` as `<dir>/<stem>.png`, its scene file, and optional layer dumps.
fn write_scene(dir: &Path, stem: &str, sample: &SceneSample, scene: &SceneFile, dump: bool) -> CmdResult {
    save_rgb(&sample.image, &dir.join(format!("{stem}.png")))?;
    fs::write(dir.join(format!("{stem}.toml")), scene.to_toml())?;
    if dump {
        dump_layers(&dir.join(format!("{stem}_layers")), sample)?;
    }
    Ok(())
}

/// Per primitive `j`: refined colour, alpha, instance weight (8-bit) and
/// depth (16-bit, normalized to the min/max stored in the file name).
fn dump_layers(dir: &Path, sample: &SceneSample) -> CmdResult {
    fs::create_dir_all(dir)?;
    for (j, (layer, weight)) in sample.layers.iter().zip(&sample.weights).enumerate() {
        let (Some(layer), Some(weight)) = (layer, weight) else {
            continue;
        };
        save_rgb(&layer.color, &dir.join(format!("layer{j}_color.png")))?;
        save_gray(&layer.alpha, &dir.join(format!("layer{j}_alpha.png")))?;
        save_gray(weight, &dir.join(format!("layer{j}_weight.png")))?;
        let (lo, hi) = value_range(&layer.depth);
        save_gray16(&layer.depth, lo, hi, &dir.join(format!("layer{j}_depth_{lo:.6}_{hi:.6}.png")))?;
    }
    Ok(())
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn sample_cmd(cli: &Cli, a: &SampleArgs) -> CmdResult {
    no_config(cli, "sample")?;
    let out = required_out(cli)?;
    let model = load_checkpoint(&a.checkpoint)?;
    fs::create_dir_all(out)?;
    let seed = cli.seed.unwrap_or(0);
    let ckpt = absolute(&a.checkpoint);
    for i in 0..a.count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[i as u64]));
        let sample = sample_scene(&model, None, None, a.c == 1, &mut rng)?;
        let scene = SceneFile::from_sample(&sample, &model, ckpt.clone());
        write_scene(out, &format!("sample_{i:03}"), &sample, &scene, a.dump_intermediates)?;
    }
    println!("wrote {} samples (seed {seed}) to {}", a.count, out.display());
    Ok(())
}

fn edit_cmd(cli: &Cli, a: &EditArgs) -> CmdResult {
    no_config(cli, "edit")?;
    let out = required_out(cli)?;
    let scene = SceneFile::from_toml(&read_text(&a.scene, "scene file")?)?;
    let edit: Edit = a.edit.parse()?;
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| scene.checkpoint.clone());
    let model = load_checkpoint(&ckpt)?;
    scene.verify(&model)?;
    fs::create_dir_all(out)?;
    match a.sweep {
        None => {
            let (sample, file) = edit_scene_file(&model, &scene, &edit)?;
            write_scene(out, "edited", &sample, &file, a.dump_intermediates)?;
            println!("wrote {}", out.join("edited.png").display());
        }
        Some(frames) => {
            if frames < 2 {
                return Err(usage("--sweep needs at least 2 frames"));
            }
            let start = camera_angles(&scene.camera, &model.config.camera);
            for k in 0..frames {
                let t = k as Real / (frames - 1) as Real;
                let (sample, file) = edit_scene_file(&model, &scene, &edit.scaled(t, start))?;
                write_scene(out, &format!("frame_{k:03}"), &sample, &file, a.dump_intermediates)?;
            }
            println!("wrote {frames} frames to {}", out.display());
        }
    }
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> CmdResult {
    if cli.config.is_some() {
        return Err(usage("gradcheck takes no --config"));
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be positive"));
    }
    let components: Vec<Component> = match a.component.as_str() {
        "all" => Component::ALL.to_vec(),
        name => vec![name.parse()?],
    };
    let first = cli.seed.unwrap_or(0);
    let mut lines = vec![gradsuite::table_header()];
    println!("{}", lines[0]);
    let mut failed = 0;
    for c in components {
        for row in gradsuite::run_component(c, first, a.seeds)? {
            println!("{row}");
            failed += usize::from(!row.passed());
            lines.push(row.to_string());
        }
    }
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.txt"), lines.join("\n") + "\n")?;
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} gradient checks above threshold")));
    }
    Ok(())
}
