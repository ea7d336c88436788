use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use georecon::formats::{write_depth, write_png};
use georecon::geometry::read_poses;
use georecon::gsplat::GaussianSet;
use georecon::losses::write_report;
use georecon::pipeline::{
    evaluate, generate, input_views, load_dataset, summarize, write_scenes, Checkpoint, Config, Predictor, SceneData, Trainer,
};
use georecon::scenegen::POSES_FILE;
use georecon::{gradsuite, Error, Result};

/// Sparse-view reconstruction with occupancy proposals and 3D Gaussians.
#[derive(Parser)]
#[command(name = "georecon", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set lr=3e-4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// File, then GEO_RECON_SEED, then `--set`.
    fn resolve(&self) -> Result<Config> {
        let cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.with_env_seed()?.with_overrides(&self.set)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate training and evaluation scenes with occupancy ground truth
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train stage 1 (occupancy proposal) or stage 2 (Gaussian reconstruction)
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Dataset root written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint, resolved config and log
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint; only --set overrides apply
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stage-1 checkpoint, needed for anchor_source = pred
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Reconstruct one scene from a subset of its views
    Infer {
        #[arg(long)]
        ckpt2: PathBuf,
        /// Without it, anchors come from the scene's ground-truth occupancy
        #[arg(long)]
        ckpt1: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        /// Comma-separated input view indices
        #[arg(long, default_value = "0,9,18,27")]
        views: String,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a Gaussian file at the poses of a poses.jsonl file (or scene directory)
    Render {
        #[arg(long)]
        gaussians: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate on held-out scenes and write a metrics report
    Eval {
        #[arg(long)]
        ckpt2: PathBuf,
        #[arg(long)]
        ckpt1: Option<PathBuf>,
        /// Evaluation scenes (e.g. <data>/eval)
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated input view counts; defaults to eval_views of the checkpoint
        #[arg(long)]
        views: Option<String>,
    },
    /// Run the finite-difference gradient suite
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("expected a comma-separated list of integers, got {s:?}"))))
        .collect()
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::Io { path: p.into(), source: e })
}

fn gen_data(out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    create_dir(out)?;
    for (split, n, eval) in [("train", cfg.n_scenes, false), ("eval", cfg.n_eval_scenes, true)] {
        let t = Instant::now();
        let scenes = generate(&cfg, n, eval)?;
        write_scenes(&out.join(split), &scenes)?;
        let occ: f64 = scenes.iter().map(|s| s.occupancy.occupied_fraction()).sum::<f64>() / n.max(1) as f64;
        println!("{split}: {n} scenes, mean occupied fraction {occ:.4}, {:.1}s", t.elapsed().as_secs_f64());
    }
    cfg.save(&out.join("config.txt"))
}

fn train(stage: u8, data: &Path, out: &Path, resume: Option<&Path>, stage1: Option<&Path>, args: &ConfigArgs) -> Result<()> {
    let s1 = stage1.map(Checkpoint::load).transpose()?;
    let mut trainer = match resume {
        Some(p) => {
            // the checkpoint's config, with --set applied (e.g. more steps)
            let mut ck = Checkpoint::load(p)?;
            ck.config = ck.config.clone().with_overrides(&args.set)?;
            Trainer::resume(&ck, 0, s1.as_ref())?
        }
        None => Trainer::new(stage, args.resolve()?, 0, s1.as_ref())?,
    };
    if trainer.stage != stage {
        return Err(Error::Config(format!("checkpoint is stage {} but --stage {stage}", trainer.stage)));
    }
    let root = if data.join("train").is_dir() { data.join("train") } else { data.to_path_buf() };
    let scenes = load_dataset(&root, &trainer.cfg)?;
    trainer.total_steps = trainer.cfg.total_steps(scenes.len());
    create_dir(out)?;
    trainer.cfg.save(&out.join("config.txt"))?;
    let log_path = out.join(format!("stage{stage}_log.txt"));
    let f =
        fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
    let mut log = BufWriter::new(f);
    let every = trainer.cfg.log_every.max(1) as u64;
    let t = Instant::now();
    let ckpt_path = out.join(format!("stage{stage}.ckpt"));
    let result = trainer.run(&scenes, |s| {
        let _ = writeln!(log, "{s}");
        if s.step % every == 0 {
            println!("{s} ({:.1}s)", t.elapsed().as_secs_f64());
        }
    });
    log.flush().map_err(|e| Error::Io { path: log_path, source: e })?;
    result?;
    trainer.checkpoint().save(&ckpt_path)?;
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn infer(ckpt2: &Path, ckpt1: Option<&Path>, scene: &Path, views: &str, max_tokens: Option<usize>, out: &Path) -> Result<()> {
    let mut c2 = Checkpoint::load(ckpt2)?;
    if let Some(m) = max_tokens {
        c2.config = c2.config.clone().with_overrides(&[format!("max_tokens_infer={m}")])?;
    }
    let c1 = ckpt1.map(Checkpoint::load).transpose()?;
    let pred = Predictor::from_checkpoints(&c2, c1.as_ref())?;
    let data = SceneData::load(scene, &c2.config)?;
    let idx = parse_list(views)?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.bundle.views.len()) {
        return Err(Error::Invalid(format!("view {bad} out of range, scene has {}", data.bundle.views.len())));
    }
    let vs: Vec<_> = idx.iter().map(|&i| &data.bundle.views[i]).collect();
    let rec = pred.reconstruct(&input_views(&vs), Some(&data.occupancy))?;
    create_dir(out)?;
    rec.gaussians.save(&out.join("gaussians.3dgs"))?;
    match &rec.occupancy {
        Some(o) => o.save(&out.join("occupancy.occg"))?,
        None => data.occupancy.save(&out.join("occupancy.occg"))?,
    }
    println!("{} anchors, {} Gaussians -> {}", rec.anchors.len(), rec.gaussians.len(), out.display());
    Ok(())
}

fn render(gaussians: &Path, poses: &Path, out: &Path) -> Result<()> {
    let set = GaussianSet::load(gaussians)?;
    let pfile = if poses.is_dir() { poses.join(POSES_FILE) } else { poses.to_path_buf() };
    let f = fs::File::open(&pfile).map_err(|e| Error::Io { path: pfile.clone(), source: e })?;
    let poses = read_poses(BufReader::new(f)).map_err(|e| Error::Format { path: pfile.clone(), detail: e.to_string() })?;
    create_dir(out)?;
    for (i, p) in poses.iter().enumerate() {
        let r = set.render(p)?;
        write_png(&out.join(format!("view_{i:03}_rgb.png")), &r.image)?;
        write_png(&out.join(format!("view_{i:03}_alpha.png")), &r.alpha)?;
        write_depth(&out.join(format!("view_{i:03}_depth.bin")), &r.depth)?;
    }
    println!("rendered {} views of {} Gaussians", poses.len(), set.len());
    Ok(())
}

fn eval(ckpt2: &Path, ckpt1: Option<&Path>, data: &Path, out: &Path, views: Option<&str>) -> Result<()> {
    let c2 = Checkpoint::load(ckpt2)?;
    let c1 = ckpt1.map(Checkpoint::load).transpose()?;
    let pred = Predictor::from_checkpoints(&c2, c1.as_ref())?;
    let counts = match views {
        Some(v) => parse_list(v)?,
        None => c2.config.eval_view_counts()?,
    };
    let root = if data.join("eval").is_dir() { data.join("eval") } else { data.to_path_buf() };
    let scenes = load_dataset(&root, &c2.config)?;
    let rows = evaluate(&pred, &scenes, &counts)?;
    if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(d)?;
    }
    let f = fs::File::create(out).map_err(|e| Error::Io { path: out.into(), source: e })?;
    let mut w = BufWriter::new(f);
    write_report(&mut w, &rows).and_then(|_| w.flush()).map_err(|e| Error::Io { path: out.into(), source: e })?;
    for m in summarize(&rows) {
        println!(
            "views {:>2}: psnr {:.2} ssim {:.4} perc {:.4} chamfer {:.4} fscore {:.4}",
            m.n_input_views, m.psnr, m.ssim, m.perc_proxy, m.chamfer, m.fscore
        );
    }
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let t = Instant::now();
    let entries = gradsuite::run(seed)?;
    for e in &entries {
        println!("{e}");
    }
    let failed = entries.iter().filter(|e| !e.passes()).count();
    println!("{} checks, {failed} failed, {:.1}s", entries.len(), t.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Error::NonFinite(format!("{failed} gradient checks above tolerance")));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { out, cfg } => gen_data(&out, &cfg),
        Cmd::Train { stage, data, out, resume, stage1, cfg } => train(stage, &data, &out, resume.as_deref(), stage1.as_deref(), &cfg),
        Cmd::Infer { ckpt2, ckpt1, scene, views, max_tokens, out } => infer(&ckpt2, ckpt1.as_deref(), &scene, &views, max_tokens, &out),
        Cmd::Render { gaussians, poses, out } => render(&gaussians, &poses, &out),
        Cmd::Eval { ckpt2, ckpt1, data, out, views } => eval(&ckpt2, ckpt1.as_deref(), &data, &out, views.as_deref()),
        Cmd::Gradcheck { seed } => gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
