use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ll3d_core::datagen::{read_scene, write_scene, Task};
use ll3d_core::encoders::Prompt;
use ll3d_core::geometry::Box3D;
use ll3d_core::lm::{GenerationConfig, Strategy};
use ll3d_core::pipeline::{
    evaluate, fusion_ablation, teacher_forced_accuracy, train, Checkpoint, EvalOptions, EvalTask, Model, RunConfig,
};
use ll3d_core::textio::{human_turn, ASSISTANT_TAG};
use ll3d_core::Error;

/// Point-cloud instruction tuning on synthetic scenes.
#[derive(Parser, Debug)]
#[command(name = "ll3d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic scene set and its training samples.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for scene JSON files, samples and vocabulary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Warm up the scene encoder, pre-train the language model, and save
    /// both frozen in an untuned checkpoint.
    PretrainLm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Instruction-tune the prompt encoder, querying transformer and projector.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one task and write JSON and CSV reports.
    Eval(EvalArgs),
    /// Generate one response for a scene and instruction.
    Generate(GenerateArgs),
    /// Train both fusion variants from one base checkpoint and compare them.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Checkpoint utilities.
    Checkpoint {
        #[command(subcommand)]
        action: CheckpointCommand,
    },
}

#[derive(Subcommand, Debug)]
enum CheckpointCommand {
    /// Print the header, step and parameter summary.
    Inspect { path: PathBuf },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Untuned checkpoint from `pretrain-lm`; without it the base models are
    /// prepared first.
    #[arg(long, conflicts_with = "finetune_from")]
    init: Option<PathBuf>,
    /// Continue from a tuned checkpoint, e.g. on a single task.
    #[arg(long)]
    finetune_from: Option<PathBuf>,
    /// Train only on samples of this task.
    #[arg(long)]
    task: Option<String>,
    /// Number of steps to run (defaults to `train.total_steps`).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ClickMode {
    None,
    Related,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: String,
    /// Scene directory to evaluate on instead of the checkpoint's dataset.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// Question answering: add clicks on the related objects.
    #[arg(long, value_enum, default_value_t = ClickMode::None)]
    click: ClickMode,
    /// JSON map from scene id to proposal boxes `[cx, cy, cz, w, h, l]`.
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Greedy,
    Beam,
    Sample,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    /// Instruction text; wrapped in the human/assistant frame unless it
    /// already ends with the assistant identifier.
    #[arg(long)]
    instruction: String,
    /// Click prompt `x,y,z` (repeatable).
    #[arg(long, value_parser = parse_click)]
    click: Vec<[f64; 3]>,
    /// Box prompt `cx,cy,cz,w,h,l` (repeatable).
    #[arg(long = "box", value_parser = parse_box)]
    boxes: Vec<Box3D>,
    #[command(flatten)]
    decode: DecodeArgs,
}

fn parse_reals<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers, got {}", parts.len()));
    }
    let mut out = [0.0f64; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("`{p}` is not a number"))?;
        if !o.is_finite() {
            return Err(format!("`{p}` is not finite"));
        }
    }
    Ok(out)
}

fn parse_click(s: &str) -> Result<[f64; 3], String> {
    parse_reals::<3>(s)
}

fn parse_box(s: &str) -> Result<Box3D, String> {
    let v = parse_reals::<6>(s)?;
    Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| e.to_string())
}

impl DecodeArgs {
    fn apply(&self, base: &GenerationConfig) -> GenerationConfig {
        let mut g = base.clone();
        if let Some(s) = self.strategy {
            g.strategy = match s {
                StrategyArg::Greedy => Strategy::Greedy,
                StrategyArg::Beam => Strategy::Beam,
                StrategyArg::Sample => Strategy::Sample,
            };
        }
        if let Some(seed) = self.seed {
            g.seed = seed;
        }
        if let Some(n) = self.max_new_tokens {
            g.max_new_tokens = n;
        }
        g
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn datagen(config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let ds = cfg.dataset()?;
    let scenes = out.join("scenes");
    create_dir(&scenes)?;
    for s in &ds.scenes {
        write_scene(&scenes.join(format!("{}.json", s.id)), s)?;
    }
    write_json(&out.join("samples.json"), &ds.samples)?;
    ds.vocabulary().save(&out.join("vocab.txt"))?;
    println!("{} scenes, {} samples written to {}", ds.scenes.len(), ds.samples.len(), out.display());
    Ok(())
}

fn pretrain(config: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let cfg = load_config(config)?;
    let ds = cfg.dataset()?;
    let mut model = Model::new(cfg.clone(), ds.vocabulary())?;
    let t = Instant::now();
    let report = model.prepare(&ds, &cfg.heldout()?)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Checkpoint::capture(&model, None).save(out)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    println!("prepared in {:.1}s; saved {}", t.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn run_train(args: &TrainArgs) -> anyhow::Result<()> {
    let (mut model, mut state, mut ds) = match (&args.finetune_from, &args.init) {
        (Some(path), _) | (None, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            let expected = match &args.config {
                Some(c) => Some(RunConfig::load(c)?),
                None => None,
            };
            let (mut model, mut state) = ck.restore(expected.as_ref())?;
            if let Some(cfg) = expected {
                model.config.train = cfg.train;
                model.config.generation = cfg.generation;
            }
            if args.finetune_from.is_none() {
                state = ll3d_core::pipeline::TrainState::new(&model);
            } else {
                state.step = 0;
            }
            let ds = model.config.dataset()?;
            (model, state, ds)
        }
        (None, None) => {
            let cfg = load_config(args.config.as_deref())?;
            let ds = cfg.dataset()?;
            let mut model = Model::new(cfg.clone(), ds.vocabulary())?;
            let report = model.prepare(&ds, &cfg.heldout()?)?;
            log::info!("prepared base models: {report:?}");
            let state = ll3d_core::pipeline::TrainState::new(&model);
            (model, state, ds)
        }
    };
    if let Some(t) = &args.task {
        let task: Task = t.parse()?;
        ds.samples.retain(|s| s.task == task);
        if ds.samples.is_empty() {
            bail!(Error::Invalid(format!("dataset has no {} samples", task.name())));
        }
    }
    let steps = args.steps.unwrap_or(model.config.train.total_steps);
    model.config.train.total_steps = steps;
    create_dir(&args.out)?;
    let every = model.config.train.checkpoint_every;
    let mut saved: Vec<PathBuf> = Vec::new();
    let out = args.out.clone();
    let t = Instant::now();
    let report = train(&mut model, &mut state, &ds, steps, |m, step, _| {
        if every > 0 && step % every == 0 && step < steps {
            let mut ck = Checkpoint::capture(m, None);
            ck.step = step as u64;
            let p = out.join(format!("step-{step}.ckpt"));
            ck.save(&p)?;
            saved.push(p);
        }
        Ok(true)
    })?;
    let last = out.join(format!("step-{}.ckpt", state.step));
    Checkpoint::capture(&model, Some(&state)).save(&last)?;
    saved.push(last);
    let mut log = String::from("step,loss\n");
    for (s, l) in &report.losses {
        log.push_str(&format!("{s},{l}\n"));
    }
    std::fs::write(out.join("loss.csv"), log)?;
    let acc = teacher_forced_accuracy(&model, &ds)?;
    println!(
        "trained {} steps in {:.1}s; final loss {:.4}; teacher-forced accuracy {acc:.4}",
        state.step,
        t.elapsed().as_secs_f64(),
        report.losses.last().map_or(f64::NAN, |l| l.1)
    );
    for p in saved {
        println!("saved {}", p.display());
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let task: EvalTask = args.task.parse()?;
    let (model, _) = Checkpoint::load(&args.checkpoint)?.restore(None)?;
    let mut cfg = model.config.clone();
    if let Some(dir) = &args.scenes {
        cfg.paths.scenes = Some(dir.clone());
    }
    let ds = cfg.dataset()?;
    let mut opts = EvalOptions::new(task, args.decode.apply(&model.config.generation));
    opts.click_related = matches!(args.click, ClickMode::Related);
    if opts.click_related && task != EvalTask::Qa {
        bail!(Error::Invalid("--click related applies to the qa task only".into()));
    }
    if let Some(p) = &args.proposals {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let raw: HashMap<String, Vec<[f64; 6]>> = serde_json::from_str(&text).map_err(Error::from)?;
        let mut props = HashMap::new();
        for (k, v) in raw {
            let boxes = v
                .into_iter()
                .map(|b| Box3D::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]))
                .collect::<Result<Vec<_>, _>>()?;
            props.insert(k, boxes);
        }
        opts.proposals = Some(props);
    }
    let report = evaluate(&model, &ds, &opts)?;
    let stem = if opts.click_related { format!("{task}_click") } else { task.to_string() };
    report.write(&args.out, &stem)?;
    for r in &report.metrics {
        let thr = r.threshold.map(|t| format!("@{t}")).unwrap_or_default();
        println!("{}{thr}: {:.4} ({} items)", r.metric, r.value, r.n_items);
    }
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> anyhow::Result<()> {
    let (model, _) = Checkpoint::load(&args.checkpoint)?.restore(None)?;
    let scene = read_scene(&args.scene)?;
    let ctx = model.scene_context(&scene)?;
    let prompts: Vec<Prompt> = args
        .click
        .iter()
        .map(|&c| Prompt::Click(c))
        .chain(args.boxes.iter().map(|&b| Prompt::Box(b)))
        .collect();
    let instruction = if args.instruction.trim_end().ends_with(ASSISTANT_TAG) {
        args.instruction.clone()
    } else {
        format!("{} {ASSISTANT_TAG}", human_turn(&args.instruction))
    };
    let gen = args.decode.apply(&model.config.generation);
    let (text, _) = model.respond(&ctx, &prompts, &instruction, &gen)?;
    println!("{text}");
    Ok(())
}

fn ablate(checkpoint: &Path, steps: usize, out: &Path) -> anyhow::Result<()> {
    let (model, _) = Checkpoint::load(checkpoint)?.restore(None)?;
    let ds = model.config.dataset()?;
    let report = fusion_ablation(&model, &ds, steps)?;
    report.write(out, "fusion_ablation")?;
    for r in &report.rows {
        println!(
            "{:?}: loss {:.4}, teacher-forced accuracy {:.4}, localize IoU {:.4}",
            r.fusion, r.final_loss, r.teacher_forced_accuracy, r.localize_iou
        );
    }
    Ok(())
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let ck = Checkpoint::load(path)?;
    println!("format: LL3D v{}", ll3d_core::pipeline::VERSION);
    println!("step: {}", ck.step);
    println!("vocabulary: {} tokens", ck.vocab.len());
    println!("optimizer state: {}", if ck.optimizer.is_some() { "yes" } else { "no" });
    let mut groups: Vec<(String, usize, usize, bool)> = Vec::new();
    for p in &ck.params {
        let prefix = p.name.split('.').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|g| g.0 == prefix) {
            Some(g) => {
                g.1 += 1;
                g.2 += p.values.len();
                g.3 &= p.frozen;
            }
            None => groups.push((prefix, 1, p.values.len(), p.frozen)),
        }
    }
    for (name, n, values, frozen) in groups {
        println!("{name}: {n} tensors, {values} values, {}", if frozen { "frozen" } else { "trainable" });
    }
    println!("fusion: {:?}", ck.config.mmt.fusion);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Datagen { config, out } => datagen(config.as_deref(), out),
        Command::PretrainLm { config, out } => pretrain(config.as_deref(), out),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Generate(a) => run_generate(a),
        Command::Ablate { checkpoint, steps, out } => ablate(checkpoint, *steps, out),
        Command::Checkpoint {
            action: CheckpointCommand::Inspect { path },
        } => inspect(path),
    }
}

/// Numeric failures exit with 3, every other failure is a data error (2).
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NonFinite(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
