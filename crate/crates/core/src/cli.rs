//! Subcommands of the `stp` binary.
//!
//! Every run writes into `out_dir`: `config.echo` (the resolved config),
//! `losses.csv`, `ckpt.stpc` and `report.txt`. Errors end the process with
//! a nonzero code and one line `error[<category>]: <message>` on stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgAction, ArgMatches, Command};
use log::info;

use crate::config::{RunConfig, KEYS};
use crate::data::{export_clip, load_image, PairSampler};
use crate::downstream::{
    bc_train, collect_demos, load_demos, motion_probe, rollout_eval, save_demos, BcController, ProbeConfig, Trajectory,
};
use crate::training::{Container, StepStats, Trainer};
use crate::viz::write_attention_overlay;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "step,total,spatial,temporal,lr";

/// Fixed file names inside a run directory.
pub mod layout {
    pub const CONFIG: &str = "config.echo";
    pub const LOSSES: &str = "losses.csv";
    pub const CHECKPOINT: &str = "ckpt.stpc";
    pub const REPORT: &str = "report.txt";
    pub const DEMOS: &str = "demos.stpc";
    pub const ATTENTION: &str = "attention.png";
}

/// Process exit code for an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Data(_) => 3,
        Error::Checkpoint(_) => 4,
        Error::Io { .. } | Error::Image { .. } => 5,
        Error::Shape(_) => 6,
        Error::Numerics(_) => 7,
        Error::Diverged(_) => 8,
    }
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key=value config file"));
    KEYS.iter().fold(cmd, |cmd, (key, default, help)| {
        let mut arg = Arg::new(*key).long(key.replace('_', "-")).value_name("VALUE").help(*help);
        if !default.is_empty() {
            arg = arg.long_help(format!("{help} [default: {default}]"));
        }
        cmd.arg(arg)
    })
}

fn checkpoint_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").help("checkpoint to load [default: <out_dir>/ckpt.stpc]"))
        .arg(Arg::new("force").long("force").action(ArgAction::SetTrue).help("accept a checkpoint whose config digest differs"))
}

pub fn command() -> Command {
    Command::new("stp")
        .about("Spatiotemporal predictive pre-training at desk scale")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(config_args(
            Command::new("pretrain")
                .about("pre-train the encoder and both decoders")
                .arg(Arg::new("resume").long("resume").action(ArgAction::SetTrue).help("continue from <out_dir>/ckpt.stpc"))
                .arg(Arg::new("force").long("force").action(ArgAction::SetTrue).help("resume despite a config digest mismatch"))
                .arg(Arg::new("save_every").long("save-every").value_name("STEPS").help("also checkpoint every STEPS steps"))
                .arg(Arg::new("until").long("until").value_name("STEP").help("stop after STEP steps; the schedule still spans --steps")),
        ))
        .subcommand(config_args(checkpoint_args(
            Command::new("probe").about("linear motion-direction probe on frozen features, against a random-init encoder"),
        )))
        .subcommand(config_args(checkpoint_args(
            Command::new("bc")
                .about("behavior cloning on frozen features in the toy reaching env")
                .arg(Arg::new("demos").long("demos").value_name("FILE").help("demo file; collected with the scripted expert if absent"))
                .arg(Arg::new("baseline").long("baseline").action(ArgAction::SetTrue).help("also evaluate a random-init encoder")),
        )))
        .subcommand(config_args(checkpoint_args(
            Command::new("attention")
                .about("last-layer CLS attention heatmap overlaid on an image")
                .arg(Arg::new("image").long("image").value_name("FILE").required(true).help("input image (png or ppm)"))
                .arg(Arg::new("out").long("out").value_name("FILE").help("output image [default: <out_dir>/attention.png]")),
        )))
        .subcommand(config_args(
            Command::new("synth-data")
                .about("write the synthetic corpus as frame folders plus its manifest")
                .arg(Arg::new("out").long("out").value_name("DIR").help("target directory [default: <out_dir>/clips]")),
        ))
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return 0;
            }
            let msg = e.kind().as_str().unwrap_or("invalid arguments").to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    match dispatch(&matches) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().ok_or_else(|| Error::InvalidArgument("missing subcommand".into()))?;
    let mut cfg = resolve_config(sub, None)?;
    let ckpt = checkpoint_path(&cfg, sub);
    if name != "pretrain" {
        // Downstream commands start from the echo of the run that wrote the checkpoint.
        let echo = ckpt.parent().map(|d| d.join(layout::CONFIG)).filter(|p| p.exists());
        if echo.is_some() {
            cfg = resolve_config(sub, echo.as_deref())?;
        }
    }
    match name {
        "pretrain" => {
            let opts = PretrainOptions {
                resume: sub.get_flag("resume"),
                force: sub.get_flag("force"),
                save_every: opt_parse(sub, "save_every")?.unwrap_or(0),
                until: opt_parse(sub, "until")?,
            };
            cmd_pretrain(&cfg, &opts).map(|_| ())
        }
        "probe" => cmd_probe(&cfg, Some(ckpt.as_path()), sub.get_flag("force")).map(|_| ()),
        "bc" => cmd_bc(
            &cfg,
            Some(ckpt.as_path()),
            sub.get_flag("force"),
            sub.get_one::<String>("demos").map(Path::new),
            sub.get_flag("baseline"),
        )
        .map(|_| ()),
        "attention" => {
            let image = PathBuf::from(sub.get_one::<String>("image").expect("required"));
            let out = sub.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| cfg.out_dir().join(layout::ATTENTION));
            cmd_attention(&cfg, Some(ckpt.as_path()), sub.get_flag("force"), &image, &out)
        }
        "synth-data" => {
            let out = sub.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| cfg.out_dir().join("clips"));
            cmd_synth_data(&cfg, &out)
        }
        other => Err(Error::InvalidArgument(format!("unknown subcommand `{other}`"))),
    }
}

fn opt_parse(m: &ArgMatches, id: &str) -> Result<Option<u64>> {
    m.get_one::<String>(id)
        .map(|s| s.parse().map_err(|e| Error::InvalidArgument(format!("--{}: `{s}`: {e}", id.replace('_', "-")))))
        .transpose()
}

fn checkpoint_path(cfg: &RunConfig, m: &ArgMatches) -> PathBuf {
    m.try_get_one::<String>("checkpoint")
        .ok()
        .flatten()
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.out_dir().join(layout::CHECKPOINT))
}

/// Defaults, then the run echo, then `--config`, then `STP_*` variables,
/// then flags.
fn resolve_config(m: &ArgMatches, echo: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = echo {
        cfg.apply_file(path)?;
    }
    if let Some(path) = m.get_one::<String>("config") {
        cfg.apply_file(Path::new(path))?;
    }
    cfg.apply_env(std::env::vars())?;
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn append_report(dir: &Path, section: &str, body: &str) -> Result<()> {
    let path = dir.join(layout::REPORT);
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    write!(f, "[{section}]\n{body}\n").map_err(|e| Error::io(&path, e))
}

pub fn csv_row(s: &StepStats) -> String {
    format!("{},{},{},{},{}", s.step, s.total, s.spatial, s.temporal, s.lr)
}

/// Reads the `step` column of an existing loss CSV, keeping rows before `step`.
fn csv_prefix(path: &Path, step: u64) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines() {
        let keep = match line.split(',').next().map(str::parse::<u64>) {
            Some(Ok(s)) => s < step,
            _ => line == CSV_HEADER,
        };
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Resolves `auto` pixel statistics against the training corpus.
fn resolved(cfg: &RunConfig) -> Result<RunConfig> {
    let mut cfg = cfg.clone();
    if cfg.get("pixel_mean") == "auto" || cfg.get("pixel_std") == "auto" {
        let clips = cfg.load_clips()?;
        cfg.resolve_pixel_stats(&clips)?;
    }
    Ok(cfg)
}

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from the run directory's checkpoint.
    pub resume: bool,
    /// Accept a checkpoint whose config digest differs.
    pub force: bool,
    /// Checkpoint every this many steps, 0 for the end only.
    pub save_every: u64,
    /// Stop early at this step.
    pub until: Option<u64>,
}

/// Trains (or resumes) and writes the run directory; returns the trainer.
pub fn cmd_pretrain(cfg: &RunConfig, opts: &PretrainOptions) -> Result<Trainer> {
    let PretrainOptions { resume, force, save_every, until } = *opts;
    let clips = cfg.load_clips()?;
    let mut cfg = cfg.clone();
    cfg.resolve_pixel_stats(&clips)?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let train = cfg.train()?;
    let sampler = PairSampler::new(clips, train.interval, train.crop, train.seed)?;
    let mut trainer = Trainer::new(&cfg.model()?, train)?;
    let digest = cfg.digest();
    let ckpt = dir.join(layout::CHECKPOINT);
    let csv_path = dir.join(layout::LOSSES);
    let mut csv = format!("{CSV_HEADER}\n");
    if resume {
        trainer.load(&ckpt, digest, force)?;
        csv = csv_prefix(&csv_path, trainer.step)?;
        info!("resuming at step {}", trainer.step);
    }
    write_file(&dir.join(layout::CONFIG), &cfg.to_text())?;
    let total = trainer.cfg.total_steps;
    let stop = until.unwrap_or(total).min(total);
    let mut last = None;
    while trainer.step < stop {
        let until = if save_every > 0 { (trainer.step / save_every + 1) * save_every } else { stop }.min(stop);
        let stats = trainer.fit(&sampler, until, |s| {
            if s.step % 50 == 0 || s.step + 1 == total {
                info!("step {} total {:.4} spatial {:.4} temporal {:.4} lr {:.3e}", s.step, s.total, s.spatial, s.temporal, s.lr);
            }
        })?;
        for s in &stats {
            csv.push_str(&csv_row(s));
            csv.push('\n');
        }
        last = stats.last().copied().or(last);
        write_file(&csv_path, &csv)?;
        trainer.save(&ckpt, digest)?;
    }
    if last.is_none() {
        write_file(&csv_path, &csv)?;
        trainer.save(&ckpt, digest)?;
    }
    let mut body = format!("steps={}\ndigest={digest:016x}\n", trainer.step);
    if let Some(s) = last {
        writeln!(body, "final_total={}\nfinal_spatial={}\nfinal_temporal={}", s.total, s.spatial, s.temporal).expect("string write");
    }
    append_report(&dir, "pretrain", &body)?;
    Ok(trainer)
}

/// A trainer for `cfg` with weights from `ckpt`.
fn load_trained(cfg: &RunConfig, ckpt: Option<&Path>, force: bool) -> Result<Trainer> {
    let mut trainer = Trainer::new(&cfg.model()?, cfg.train()?)?;
    if let Some(path) = ckpt {
        let c = Container::load(path)?;
        trainer.restore(&c, cfg.digest(), force)?;
    }
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub pretrained: f64,
    pub random_init: f64,
    pub labelled_pairs: usize,
}

/// Motion probe of the checkpoint's encoder and of the same architecture at
/// its initialization, on held-out synthetic clips.
pub fn cmd_probe(cfg: &RunConfig, ckpt: Option<&Path>, force: bool) -> Result<ProbeOutcome> {
    let cfg = resolved(cfg)?;
    let trainer = load_trained(&cfg, ckpt, force)?;
    let clips = cfg.synth_manifest("probe_seed", "probe_clips")?.generate()?;
    let n = clips.len();
    let interval = cfg.train()?.interval;
    let probe_seed: u64 = cfg.parse("probe_seed")?;
    let pairs = PairSampler::new(clips, interval, None, probe_seed)?.batch(0, n)?;
    let pc = ProbeConfig { iterations: cfg.parse("probe_iterations")?, seed: probe_seed, ..ProbeConfig::default() };
    let encoder = &trainer.model.encoder;
    let a = motion_probe(encoder, &trainer.params, &pairs, &pc)?;
    let b = motion_probe(encoder, &trainer.model.init_params(trainer.cfg.seed), &pairs, &pc)?;
    let out = ProbeOutcome { pretrained: a.test_accuracy, random_init: b.test_accuracy, labelled_pairs: a.n_train + a.n_test };
    let body = format!(
        "pairs={}\npretrained_test_accuracy={:.4}\nrandom_init_test_accuracy={:.4}\npretrained_train_accuracy={:.4}\nrandom_init_train_accuracy={:.4}\n",
        out.labelled_pairs, a.test_accuracy, b.test_accuracy, a.train_accuracy, b.train_accuracy
    );
    print!("{body}");
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    append_report(&dir, "probe", &body)?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcOutcome {
    /// Success rate per evaluation base seed.
    pub pretrained: Vec<f64>,
    pub random_init: Option<Vec<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains an MLP policy on frozen features and evaluates it per base seed.
pub fn cmd_bc(cfg: &RunConfig, ckpt: Option<&Path>, force: bool, demos: Option<&Path>, baseline: bool) -> Result<BcOutcome> {
    let cfg = resolved(cfg)?;
    let trainer = load_trained(&cfg, ckpt, force)?;
    let env = cfg.env()?;
    let dir = cfg.out_dir();
    create_dir(&dir)?;
    let demos: Vec<Trajectory> = match demos {
        Some(path) => load_demos(path)?,
        None => {
            let d = collect_demos(&env, cfg.parse("bc_demos")?, cfg.parse("bc_demo_seed")?)?;
            save_demos(&dir.join(layout::DEMOS), &d, cfg.digest())?;
            d
        }
    };
    if demos.is_empty() {
        return Err(Error::Data("no demonstrations".into()));
    }
    let pcfg = cfg.policy()?;
    let episodes: usize = cfg.parse("bc_episodes")?;
    let seeds = cfg.bc_seeds()?;
    let evaluate = |params: &crate::numerics::ParamStore<f32>| -> Result<(Vec<f64>, f64)> {
        let (policy, report) = bc_train(&trainer.model.encoder, params, &demos, &pcfg)?;
        let mut rates = Vec::new();
        for &base in &seeds {
            let mut ctl = BcController::new(&policy, &trainer.model.encoder, params);
            rates.push(rollout_eval(&env, &mut ctl, episodes, base)?);
        }
        Ok((rates, report.final_mse))
    };
    let (pretrained, mse) = evaluate(&trainer.params)?;
    let mut body = format!("demos={}\nepisodes_per_seed={episodes}\npolicy_train_mse={mse:.5}\n", demos.len());
    for (s, r) in seeds.iter().zip(&pretrained) {
        writeln!(body, "pretrained_success[seed={s}]={r:.4}").expect("string write");
    }
    writeln!(body, "pretrained_success_mean={:.4}", mean(&pretrained)).expect("string write");
    let random_init = if baseline {
        let (rates, _) = evaluate(&trainer.model.init_params(trainer.cfg.seed))?;
        for (s, r) in seeds.iter().zip(&rates) {
            writeln!(body, "random_init_success[seed={s}]={r:.4}").expect("string write");
        }
        writeln!(body, "random_init_success_mean={:.4}", mean(&rates)).expect("string write");
        Some(rates)
    } else {
        None
    };
    print!("{body}");
    append_report(&dir, "bc", &body)?;
    Ok(BcOutcome { pretrained, random_init })
}

pub fn cmd_attention(cfg: &RunConfig, ckpt: Option<&Path>, force: bool, image: &Path, out: &Path) -> Result<()> {
    let cfg = resolved(cfg)?;
    let trainer = load_trained(&cfg, ckpt, force)?;
    let img = load_image(image)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_attention_overlay(&trainer.model.encoder, &trainer.params, &img, out)?;
    println!("{}", out.display());
    Ok(())
}

/// Exports every synthetic clip as `clip_NNNN/frame_NNNN.ppm` and writes
/// `manifest.txt`, from which the same corpus can be regenerated.
pub fn cmd_synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = cfg.synth_manifest("synth_seed", "synth_clips")?;
    let clips = manifest.generate()?;
    create_dir(out)?;
    for (i, clip) in clips.iter().enumerate() {
        export_clip(clip, &out.join(format!("clip_{i:04}")))?;
    }
    write_file(&out.join("manifest.txt"), &manifest.to_string())?;
    println!("{} clips in {}", clips.len(), out.display());
    Ok(())
}
