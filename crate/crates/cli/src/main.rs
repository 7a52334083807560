use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scenedyn::metrics::{evaluate, DEFAULT_K};
use scenedyn::motionfield::TrainOptions;
use scenedyn::pipeline::service::{spawn_service, ServiceConfig, SynthSpec};
use scenedyn::pipeline::{
    AccumulationMode, FlowInput, PipelineConfig, SceneFile, WorldState, DATA_DIR_ENV, SCENE_MAGIC_LINE,
    WORLD_MAGIC,
};
use scenedyn::propagation::{FrameRecord, MotionSeed, PropagationConfig, PropagationMode, DEFAULT_HORIZON};
use scenedyn::synthscene::{generate_expanding_scene, SynthConfig};
use scenedyn::{FlowSampleSet, Vec3};

#[derive(Parser)]
#[command(
    name = "scenedyn",
    version,
    about = "Scene-level motion field consolidation and looping point dynamics"
)]
struct Cli {
    /// Default directory for outputs that are not given explicitly.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = ".")]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic expanding scene file.
    Synth(SynthArgs),
    /// Run the headless pipeline over every view of a scene.
    Run(RunArgs),
    /// Start the streaming service.
    Serve(ServeArgs),
    /// Score flow files (scene or world files) with MCA and FMV.
    Metrics(MetricsArgs),
    /// Dump frames 0..=T of a saved world as binary frame records.
    Export(ExportArgs),
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got `{s}`"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad number `{p}`"))?;
    }
    Ok(out)
}

#[derive(Args)]
struct SynthArgs {
    /// Output scene file [default: <data-dir>/scene.sdsc].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    views: usize,
    #[arg(long, default_value_t = 2000)]
    points: usize,
    /// Nuisance rotation per view, degrees.
    #[arg(long, default_value_t = 10.0)]
    nuisance_deg: f64,
    /// Standard deviation of position noise, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Also write a JSON manifest of the counts.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct FieldArgs {
    /// Field training iterations per step.
    #[arg(long, default_value_t = TrainOptions::default().iterations)]
    iterations: usize,
    #[arg(long, default_value_t = TrainOptions::default().learning_rate)]
    lr: f64,
    /// Seeds the field initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-initialize the field before every update.
    #[arg(long)]
    cold_start: bool,
    /// Per-axis step multiplier ψ.
    #[arg(long, value_parser = parse_vec3, default_value = "1,1,1")]
    step: [f64; 3],
    /// Loop horizon T in frames.
    #[arg(long, default_value_t = DEFAULT_HORIZON)]
    horizon: usize,
    /// Integrate forward only (no loop).
    #[arg(long)]
    forward_only: bool,
    /// Neighbourhood size for metrics.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

impl FieldArgs {
    fn config(&self, naive: bool) -> PipelineConfig {
        PipelineConfig {
            train: TrainOptions { iterations: self.iterations, learning_rate: self.lr, seed: self.seed },
            propagation: PropagationConfig {
                step: self.step,
                horizon: self.horizon,
                mode: if self.forward_only {
                    PropagationMode::ForwardOnly
                } else {
                    PropagationMode::Bidirectional
                },
                ..Default::default()
            },
            mode: if naive { AccumulationMode::Naive } else { AccumulationMode::Aligned },
            cold_start: self.cold_start,
            k: self.k,
            field_seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct SeedArgs {
    /// Motion seed anchors (repeatable), x,y,z.
    #[arg(long = "seed-at", value_parser = parse_vec3)]
    seed_at: Vec<[f64; 3]>,
    /// Radius shared by every --seed-at anchor, meters.
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
}

impl SeedArgs {
    fn apply(&self, mut world: WorldState) -> Result<WorldState> {
        for a in &self.seed_at {
            let seed = MotionSeed::new(Vec3::from(*a), self.radius, None)?;
            world = world.with_seed(seed)?.0;
        }
        Ok(world)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scene file; a synthetic scene is generated when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Synthetic scene seed (without --scene).
    #[arg(long, default_value_t = 7)]
    synth_seed: u64,
    /// Accumulate flows without alignment.
    #[arg(long)]
    naive: bool,
    #[command(flatten)]
    field: FieldArgs,
    #[command(flatten)]
    seeds: SeedArgs,
    /// Save the final world here.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8765)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Scene to load; a synthetic scene is generated when omitted.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    #[command(flatten)]
    field: FieldArgs,
}

#[derive(Args)]
struct MetricsArgs {
    files: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
}

#[derive(Args)]
struct ExportArgs {
    /// World file to render.
    world: PathBuf,
    /// Output directory [default: <data-dir>/frames].
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    seeds: SeedArgs,
}

fn load_scene(path: Option<&Path>, synth_seed: u64) -> Result<SceneFile> {
    match path {
        Some(p) => SceneFile::load(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(SynthSpec { seed: synth_seed, ..Default::default() }.scene()),
    }
}

fn synth(args: SynthArgs, data_dir: &Path) -> Result<()> {
    let config = SynthConfig {
        seed: args.seed,
        n_views: args.views,
        points_per_view: args.points,
        nuisance_angle: args.nuisance_deg.to_radians(),
        position_noise: args.noise,
        ..Default::default()
    };
    if config.n_views == 0 {
        bail!("--views must be at least 1");
    }
    let mut scene = SceneFile::from_synthetic(&generate_expanding_scene(&config));
    scene.meta.insert("generator".into(), "synth".into());
    scene.meta.insert("seed".into(), args.seed.to_string());
    let out = args.out.unwrap_or_else(|| data_dir.join("scene.sdsc"));
    scene.save(&out).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "wrote {} initial={} views={} flows={}",
        out.display(),
        scene.initial.len(),
        scene.views.len(),
        scene.total_flows()
    );
    if let Some(m) = args.manifest {
        let manifest = serde_json::json!({
            "initial_points": scene.initial.len(),
            "views": scene.views.len(),
            "view_points": scene.views.iter().map(|v| v.points.len()).collect::<Vec<_>>(),
            "view_flows": scene.views.iter().map(|v| match &v.flow { FlowInput::Samples(s) => s.len(), _ => 0 }).collect::<Vec<_>>(),
            "total_flows": scene.total_flows(),
        });
        std::fs::write(&m, serde_json::to_string_pretty(&manifest)? + "\n")?;
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let scene = load_scene(args.scene.as_deref(), args.synth_seed)?;
    let mut world = WorldState::new(args.field.config(args.naive), &scene.initial)?;
    world = args.seeds.apply(world)?;
    for view in &scene.views {
        let step = world.apply(view)?;
        println!("{}", step.to_json());
    }
    println!(
        "{}",
        serde_json::json!({
            "final": true,
            "steps": world.step_counter,
            "accumulated": world.accumulated_flows.len(),
            "gaussians": world.gaussians.len(),
            "dynamic": world.trajectories.dynamic_count(),
            "field_version": world.field.version(),
            "state_hash": format!("{:016x}", world.state_hash()),
        })
    );
    if let Some(path) = args.save {
        world.save(&path).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let scene = load_scene(args.scene.as_deref(), 7)?;
    let world = WorldState::new(args.field.config(false), &scene.initial)?;
    let bind = format!("{}:{}", args.host, args.port).parse().context("bind address")?;
    let handle = spawn_service(world, scene, ServiceConfig { bind, fps: args.fps })?;
    eprintln!("serving on ws://{}", handle.addr());
    handle.join();
    Ok(())
}

fn flows_of(path: &Path) -> Result<FlowSampleSet> {
    let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if data.starts_with(&WORLD_MAGIC) {
        return Ok((*WorldState::from_bytes(&data)?.accumulated_flows).clone());
    }
    if data.starts_with(SCENE_MAGIC_LINE.as_bytes()) {
        let scene = scenedyn::pipeline::read_scene(&data)?;
        let mut all = FlowSampleSet::default();
        for v in &scene.views {
            all.extend_from(&v.samples()?);
        }
        return Ok(all);
    }
    bail!("{}: neither a scene nor a world file", path.display())
}

fn metrics(args: MetricsArgs) -> Result<()> {
    if args.files.is_empty() {
        bail!("no input files");
    }
    for f in &args.files {
        let report = evaluate(&flows_of(f)?, args.k)?;
        println!("file={} {report}", f.display());
    }
    Ok(())
}

fn export(args: ExportArgs, data_dir: &Path) -> Result<()> {
    let mut world =
        WorldState::load(&args.world).with_context(|| format!("reading {}", args.world.display()))?;
    world = args.seeds.apply(world)?;
    let out = args.out.unwrap_or_else(|| data_dir.join("frames"));
    std::fs::create_dir_all(&out)?;
    let snap = scenedyn::pipeline::RenderSnapshot::from_world(&world, 0);
    let horizon = snap.horizon();
    for t in 0..=horizon {
        let record = FrameRecord::from_render_set(&snap.compose(t), t, horizon, t as u64, snap.field_version);
        std::fs::write(out.join(format!("frame_{t:05}.sdfr")), record.encode())?;
    }
    println!("wrote {} frames to {}", horizon + 1, out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(a) => synth(a, &cli.data_dir),
        Command::Run(a) => run(a),
        Command::Serve(a) => serve(a),
        Command::Metrics(a) => metrics(a),
        Command::Export(a) => export(a, &cli.data_dir),
    }
}
