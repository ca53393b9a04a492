use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use particle_augment::augment::{parse_policy, Magnitude, OrderMode, PolicyApplicator};
use particle_augment::data::{read_manifest, stratified_split_indices, write_manifest, ManifestEntry};
use particle_augment::filter::FilterConfig;
use particle_augment::pipeline::synthetic::{self, write_expected_states};
use particle_augment::pipeline::{
    initial_checkpoint, load_datasets, run_training, Checkpoint, DistanceOracle, OutputObserver, PipelineConfig,
    TrajectoryWriter, CHECKPOINT_FILE, TRAJECTORY_FILE,
};
use particle_augment::rng::{Purpose, Streams};
use particle_augment::{Error, Image, Result};

#[derive(Parser)]
#[command(
    name = "particle-augment",
    version,
    about = "Online augmentation policy search with a particle filter"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the built-in classifier while searching augmentation policies.
    Train(TrainArgs),
    /// Run the filter against the analytic distance oracle.
    FilterSim(SimArgs),
    /// Apply a policy to PNG images.
    Augment(AugmentArgs),
    /// Split a manifest into two class-stratified manifests.
    Split(SplitArgs),
    /// Print the particle table stored in a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    /// Directory receiving every file this command writes.
    #[arg(long, default_value = "pa-output")]
    output: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train with the fixed `pipeline.baseline_policy` and no filter.
    #[arg(long)]
    baseline: bool,
    #[arg(long, value_parser = parse_order)]
    order: Option<OrderMode>,
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Number of filter steps; overrides `synthetic.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AugmentArgs {
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "pa-output")]
    output: PathBuf,
    /// Comma-separated application probabilities, one per operation.
    #[arg(long, value_parser = parse_policy_arg)]
    policy: Option<Vec<f64>>,
    #[arg(long, default_value_t = 3)]
    magnitude: u8,
    #[arg(long, value_parser = parse_order, default_value = "fixed")]
    order: OrderMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    /// A `path,label` manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "pa-output")]
    output: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

fn parse_order(s: &str) -> std::result::Result<OrderMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy_arg(s: &str) -> std::result::Result<Vec<f64>, String> {
    parse_policy(s).map_err(|e| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Invalid(_) => 1,
        Error::Io { .. } | Error::Load { .. } | Error::Checkpoint(_) => 2,
        Error::Numerical(_) | Error::DegenerateUpdate => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    let start = match &args.resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            if let Some(threads) = args.common.threads {
                ckpt.config.threads = threads;
            }
            cfg = ckpt.config.clone();
            Some(ckpt)
        }
        None => {
            if let Some(epochs) = args.epochs {
                cfg.pipeline.epochs = epochs;
            }
            if args.baseline {
                cfg.pipeline.baseline = true;
            }
            if let Some(order) = args.order {
                cfg.pipeline.order = order;
            }
            None
        }
    };
    cfg.validate()?;
    let (train, val) = load_datasets(&cfg)?;
    let start = match start {
        Some(ckpt) => ckpt,
        None => initial_checkpoint(&cfg, &train)?,
    };
    let state_dim = start.particles.state_dim();
    let mut observer = OutputObserver::new(&args.common.output, &cfg, state_dim, args.resume.is_some())?;
    let out = run_training(start, &train, val.as_ref(), &mut observer)?;

    println!("epochs          {}", cfg.pipeline.epochs);
    println!("filter steps    {}", out.reports.len());
    if let Some(loss) = out.epoch_losses.last() {
        println!("final loss      {loss:.5}");
    }
    println!("train accuracy  {:.4}", out.train_accuracy);
    if let Some(acc) = out.val_accuracy {
        println!("val accuracy    {acc:.4}");
    }
    println!("wall time       {:.2} s", out.wall_seconds);
    println!("trajectory      {}", args.common.output.join(TRAJECTORY_FILE).display());
    println!("checkpoint      {}", args.common.output.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn filter_sim(args: &SimArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(steps) = args.steps {
        cfg.synthetic.steps = steps;
    }
    cfg.validate()?;
    let filter: FilterConfig = cfg.filter_config()?;
    let oracle = DistanceOracle {
        target: cfg.synthetic.target(filter.state_dim),
        gamma: cfg.synthetic.gamma,
    };
    let run = synthetic::run_synthetic(&filter, &oracle, cfg.synthetic.steps)?;

    let dir = &args.common.output;
    create_dir(dir)?;
    let path = dir.join("expected_state.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_expected_states(&run, &oracle, file)?;
    let mut log = TrajectoryWriter::create(&dir.join(TRAJECTORY_FILE), &cfg, filter.state_dim)?;
    for step in &run.steps {
        log.write_rows(&step.rows)?;
    }
    log.into_inner()?;

    let initial = synthetic::l1_distance(&run.initial_expected_state, &oracle.target);
    let last = synthetic::l1_distance(run.final_expected_state(), &oracle.target);
    println!("steps              {}", run.steps.len());
    println!("initial L1 to x*   {initial:.6}");
    println!("final L1 to x*     {last:.6}");
    println!(
        "resampled steps    {}",
        run.steps.iter().filter(|s| s.resampled).count()
    );
    println!("expected states    {}", path.display());
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(Error::io(input, std::io::Error::from(std::io::ErrorKind::NotFound)))
    }
}

fn augment(args: &AugmentArgs) -> Result<()> {
    let magnitude = Magnitude::new(args.magnitude)?;
    let policy = args.policy.clone().unwrap_or_else(|| vec![0.0; 15]);
    let app = PolicyApplicator::new(magnitude, args.order);
    let inputs = png_inputs(&args.input)?;
    create_dir(&args.output)?;
    let streams = Streams::new(args.seed);
    for (i, path) in inputs.iter().enumerate() {
        let img = Image::load_png(path)?;
        let out = app.apply(&policy, &img, &mut streams.stream(Purpose::Augment, 0, i as u64));
        let name = path.file_name().expect("input files have names");
        out.save_png(&args.output.join(name))?;
    }
    println!("augmented {} image(s) into {}", inputs.len(), args.output.display());
    Ok(())
}

fn split(args: &SplitArgs) -> Result<()> {
    let entries = read_manifest(&args.manifest)?;
    if entries.is_empty() {
        return Err(Error::load(&args.manifest, "manifest lists no samples"));
    }
    let labels: Vec<usize> = entries.iter().map(|e| e.label).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = Streams::new(args.seed).stream(Purpose::SplitTrain, 0, 0);
    let (subset, remainder) = stratified_split_indices(&labels, classes, args.fraction, &mut rng)?;
    create_dir(&args.output)?;
    let pick = |idx: &[usize]| -> Vec<ManifestEntry> {
        idx.iter()
            .map(|&i| ManifestEntry {
                path: fs::canonicalize(&entries[i].path).unwrap_or_else(|_| entries[i].path.clone()),
                label: entries[i].label,
            })
            .collect()
    };
    for (name, idx) in [("subset.csv", &subset), ("remainder.csv", &remainder)] {
        let path = args.output.join(name);
        write_manifest(&path, &pick(idx))?;
        println!("{:<14} {} samples  {}", name, idx.len(), path.display());
    }
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let set = &ckpt.particles;
    let spec = ckpt.trainer.model.spec();
    println!("seed              {}", ckpt.seed);
    println!("completed epochs  {}", ckpt.completed_epochs);
    println!("filter epoch      {}", set.epoch);
    println!(
        "model             {}x{} -> {} classes, conv {}, hidden {}",
        spec.width, spec.height, spec.classes, spec.conv_filters, spec.hidden
    );
    println!("optimizer step    {}", ckpt.trainer.optimizer.step);
    println!("particles         {}", set.len());
    println!("effective size    {:.4}", set.effective_sample_size());
    println!();
    let mut header = format!("{:>5} {:>10}", "index", "weight");
    for j in 1..=set.state_dim() {
        header.push_str(&format!(" {:>6}", format!("p_{j}")));
    }
    println!("{header}");
    for (i, p) in set.particles.iter().enumerate() {
        let mut line = format!("{i:>5} {:>10.6}", p.weight);
        for x in &p.state {
            line.push_str(&format!(" {x:>6.3}"));
        }
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PA_LOG_LEVEL", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::FilterSim(a) => filter_sim(a),
        Command::Augment(a) => augment(a),
        Command::Split(a) => split(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
