//! Command-line workflows over the side network: data generation, training,
//! evaluation, gradient checks, profiling, ablation sweeps, and activation
//! dumps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Arg, ArgAction, ArgMatches, Command};
use serde_json::json;

use tds_core::autodiff::checkpoint::load_checkpoint;
use tds_core::autodiff::ops;
use tds_core::config::{parse_list, ConfigError, Preset, RunConfig};
use tds_core::data::{gen_clip, generate, load_dataset, save_dataset, VideoClip};
use tds_core::model::TdsModel;
use tds_core::profiler::{compare, render_table, to_json, Topology};
use tds_core::train::{evaluate, gradcheck_model, train, EpochMetrics};
use tds_core::viz::{activation_maps, compose_panels, write_ppm};

/// Threshold for `gradcheck` to succeed.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<i32, Failure>;

fn invalid<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Invalid(msg.into()))
}

fn config_keys() -> Vec<&'static str> {
    RunConfig::preset(Preset::Tiny).entries().into_iter().map(|(k, _)| k).collect()
}

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn common_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(Arg::new("preset").long("preset").default_value("tiny").help("tiny or paper"))
        .arg(Arg::new("config").long("config").value_name("PATH").help("key = value settings file"))
        .arg(Arg::new("out").long("out").value_name("DIR").default_value("out"));
    for key in config_keys() {
        let name = flag_name(key);
        cmd = cmd.arg(Arg::new(key).long(name).value_name("VALUE").help_heading("Config"));
    }
    cmd
}

fn data_arg() -> Arg {
    Arg::new("data").long("data").value_name("DIR").help("directory with train.tdsd and val.tdsd")
}

fn cli() -> Command {
    Command::new("tds")
        .about("Temporal-difference side network on synthetic drift videos")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(common_args(Command::new("gen-data").about("Write the synthetic train/val sets")))
        .subcommand(
            common_args(Command::new("train").about("Train the side network"))
                .arg(data_arg()),
        )
        .subcommand(
            common_args(Command::new("eval").about("Score a checkpoint"))
                .arg(data_arg())
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("PATH").required(true))
                .arg(Arg::new("split").long("split").default_value("val").value_parser(["train", "val"])),
        )
        .subcommand(
            common_args(Command::new("gradcheck").about("Finite-difference check of the full network"))
                .arg(Arg::new("eps").long("eps").default_value("1e-5").value_parser(clap::value_parser!(f64)))
                .arg(
                    Arg::new("per-tensor")
                        .long("per-tensor")
                        .default_value("4")
                        .value_parser(clap::value_parser!(usize))
                        .help("entries probed per parameter tensor"),
                ),
        )
        .subcommand(
            common_args(Command::new("profile").about("FLOP and retained-memory report"))
                .arg(Arg::new("topology").long("topology").default_value("side,inbackbone,full")),
        )
        .subcommand(
            common_args(Command::new("ablate").about("Train once per value of one config axis"))
                .arg(data_arg())
                .arg(
                    Arg::new("axis")
                        .long("axis")
                        .required(true)
                        .help("config key, or keys joined by `+` to vary together"),
                )
                .arg(Arg::new("values").long("values").required(true))
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .default_value("1")
                        .value_parser(clap::value_parser!(u64).range(1..))
                        .help("consecutive seeds per value, starting at --seed"),
                ),
        )
        .subcommand(
            common_args(Command::new("dump-activations").about("Per-frame activation maps as PPM"))
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("PATH"))
                .arg(Arg::new("layer").long("layer").value_parser(clap::value_parser!(usize)))
                .arg(Arg::new("class").long("class").default_value("0").value_parser(clap::value_parser!(usize)))
                .arg(
                    Arg::new("clip-seed")
                        .long("clip-seed")
                        .default_value("0")
                        .value_parser(clap::value_parser!(u64)),
                )
                .arg(
                    Arg::new("static")
                        .long("static")
                        .action(ArgAction::SetTrue)
                        .help("repeat the first frame for the whole clip"),
                )
                .arg(Arg::new("scale").long("scale").default_value("8").value_parser(clap::value_parser!(usize))),
        )
}

/// Preset, then `TDS_SEED`, then `--config`, then explicit flags.
fn resolve_config(m: &ArgMatches) -> Result<RunConfig, Failure> {
    let preset: Preset = m.get_one::<String>("preset").expect("defaulted").parse()?;
    let mut rc = RunConfig::preset(preset);
    if let Ok(seed) = std::env::var("TDS_SEED") {
        rc.set("seed", &seed)?;
    }
    if let Some(path) = m.get_one::<String>("config") {
        let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("cannot read config {path}: {e}")))?;
        rc.apply_text(&text)?;
    }
    for key in config_keys() {
        if let Some(v) = m.get_one::<String>(key) {
            rc.set(key, v)?;
        }
    }
    rc.validate()?;
    Ok(rc)
}

fn out_dir(m: &ArgMatches) -> Result<PathBuf, Failure> {
    let dir = PathBuf::from(m.get_one::<String>("out").expect("defaulted"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn datasets(m: &ArgMatches, rc: &RunConfig) -> Result<(Vec<VideoClip>, Vec<VideoClip>), Failure> {
    match m.get_one::<String>("data") {
        Some(dir) => {
            let dir = Path::new(dir);
            let load = |name: &str| load_dataset(&dir.join(name)).with_context(|| format!("loading {name} from {}", dir.display()));
            Ok((load("train.tdsd")?, load("val.tdsd")?))
        }
        None => Ok(generate(&rc.data)),
    }
}

fn load_model(rc: &RunConfig, checkpoint: Option<&String>) -> Result<TdsModel, Failure> {
    let mut model = TdsModel::new(&rc.model, rc.train.seed).context("building model")?;
    if let Some(path) = checkpoint {
        let arrays = load_checkpoint(Path::new(path)).with_context(|| format!("reading checkpoint {path}"))?;
        model.store.load_named_arrays(&arrays).with_context(|| format!("loading checkpoint {path}"))?;
    }
    Ok(model)
}

/// Train one model into `dir`, writing `metrics.jsonl`, `model.ckpt`, and
/// `config.txt`.
fn train_into(
    dir: &Path,
    rc: &RunConfig,
    train_set: &[VideoClip],
    val_set: &[VideoClip],
    out: &mut dyn Write,
) -> Result<Vec<EpochMetrics>, Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join("config.txt"), &rc.to_text())?;
    let mut model = TdsModel::new(&rc.model, rc.train.seed).context("building model")?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut io_error = None;
    let mut on_epoch = |e: &EpochMetrics| {
        let line = serde_json::to_string(e).expect("metrics serialize");
        if let Err(err) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
            io_error.get_or_insert(err);
        }
        let _ = writeln!(
            out,
            "epoch {:>3}  loss {:.4}  train {:.3}  val {}  ({:.1}s)",
            e.epoch,
            e.loss,
            e.top1,
            e.val_top1.map_or("-".to_string(), |v| format!("{v:.3}")),
            e.seconds
        );
    };
    let history = train(&mut model, &rc.train, &rc.data, train_set, val_set, Some(&dir.join("model.ckpt")), &mut on_epoch)
        .context("training")?;
    if let Some(err) = io_error {
        return Err(anyhow::Error::from(err).context(format!("writing {}", metrics_path.display())).into());
    }
    Ok(history)
}

fn cmd_gen_data(m: &ArgMatches, rc: &RunConfig, out: &mut dyn Write) -> Outcome {
    let dir = out_dir(m)?;
    let (tr, va) = generate(&rc.data);
    save_dataset(&dir.join("train.tdsd"), &tr).context("writing train.tdsd")?;
    save_dataset(&dir.join("val.tdsd"), &va).context("writing val.tdsd")?;
    write_text(&dir.join("config.txt"), &rc.to_text())?;
    writeln!(out, "wrote {} train and {} val clips to {}", tr.len(), va.len(), dir.display()).ok();
    Ok(EXIT_OK)
}

fn cmd_train(m: &ArgMatches, rc: &RunConfig, out: &mut dyn Write) -> Outcome {
    let dir = out_dir(m)?;
    let (tr, va) = datasets(m, rc)?;
    let history = train_into(&dir, rc, &tr, &va, out)?;
    let last = history.last().expect("at least one epoch");
    writeln!(
        out,
        "final train top1 {:.4} val top1 {}",
        last.top1,
        last.val_top1.map_or("-".to_string(), |v| format!("{v:.4}"))
    )
    .ok();
    Ok(EXIT_OK)
}

fn cmd_eval(m: &ArgMatches, rc: &RunConfig, out: &mut dyn Write) -> Outcome {
    let dir = out_dir(m)?;
    let model = load_model(rc, m.get_one::<String>("checkpoint"))?;
    let (tr, va) = datasets(m, rc)?;
    let split = m.get_one::<String>("split").expect("defaulted");
    let clips = if split == "train" { &tr } else { &va };
    if clips.is_empty() {
        return invalid(format!("{split} split is empty"));
    }
    let metrics = evaluate(&model, clips, None, 0).context("evaluating")?;
    let text = serde_json::to_string_pretty(&json!({ "split": split, "metrics": metrics })).expect("serialize");
    write_text(&dir.join("eval.json"), &text)?;
    writeln!(out, "{split}: top1 {:.4} top5 {:.4} loss {:.4} over {} clips", metrics.top1, metrics.top5, metrics.loss, metrics.count).ok();
    Ok(EXIT_OK)
}

fn cmd_gradcheck(m: &ArgMatches, rc: &RunConfig, out: &mut dyn Write) -> Outcome {
    let dir = out_dir(m)?;
    let eps = *m.get_one::<f64>("eps").expect("defaulted");
    let per_tensor = *m.get_one::<usize>("per-tensor").expect("defaulted");
    if !(eps > 0.0) {
        return invalid(format!("--eps must be positive, got {eps}"));
    }
    let model = load_model(rc, None)?;
    let class = 1.min(rc.data.num_classes() - 1);
    let clip = gen_clip(class, rc.data.data_seed, &rc.data);
    let started = Instant::now();
    let report = gradcheck_model(&model, &clip, eps, per_tensor, rc.train.seed).context("gradient check")?;
    let seconds = started.elapsed().as_secs_f64();
    let pass = report.max_relative_error < GRADCHECK_TOLERANCE;
    let text = serde_json::to_string_pretty(&json!({
        "max_relative_error": report.max_relative_error,
        "entries_checked": report.entries_checked,
        "worst": report.worst,
        "analytic_at_worst": report.analytic_at_worst,
        "numeric_at_worst": report.numeric_at_worst,
        "eps": eps,
        "seconds": seconds,
        "pass": pass,
    }))
    .expect("serialize");
    write_text(&dir.join("gradcheck.json"), &text)?;
    writeln!(out, "max relative error: {:e}", report.max_relative_error).ok();
    writeln!(out, "entries checked: {} in {seconds:.1}s", report.entries_checked).ok();
    if pass {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed: {:e} >= {GRADCHECK_TOLERANCE:e}", report.max_relative_error);
        Ok(EXIT_RUNTIME)
    }
}

fn cmd_profile(m: &ArgMatches, rc: &RunConfig, out: &mut dyn Write) -> Outcome {
    let dir = out_dir(m)?;
    let names: Vec<String> = parse_list("topology", m.get_one::<String>("topology").expect("defaulted"))?;
    let topologies = names
        .iter()
        .map(|n| n.parse::<Topology>().map_err(Failure::Invalid))
        .collect::<Result<Vec<_>, _>>()?;
    let reports = compare(&rc.model, &topologies).context("profiling")?;
    write_text(&dir.join("profile.json"), &to_json(&reports))?;
    write!(out, "{}", render_table(&reports)).ok();
    let bytes: Vec<u64> = reports.iter().map(|r| r.total_retained_bytes).collect();
    if bytes.len() > 1 {
        let strict = bytes.windows(2).all(|w| w[0] < w[1]);
        writeln!(out, "retained bytes strictly increasing in listed order: {strict}").ok();
    }
    Ok(EXIT_OK)
}

fn cmd_ablate(m: &ArgMatches, rc: &RunConfig, out: &mut dyn Write) -> Outcome {
    let dir = out_dir(m)?;
    let axis_arg = m.get_one::<String>("axis").expect("required");
    let keys: Vec<String> = axis_arg.split('+').map(|k| k.trim().replace('-', "_")).collect();
    let seeds = *m.get_one::<u64>("seeds").expect("defaulted");
    let raw = m.get_one::<String>("values").expect("required");
    let values = tds_core::model::config::sweep_values(axis_arg, raw)?;
    // resolve every run before training any of them
    let mut runs = Vec::new();
    for value in &values {
        let parts: Vec<&str> = value.split('+').collect();
        if parts.len() != keys.len() {
            return invalid(format!("value `{value}` has {} parts for {} axis keys", parts.len(), keys.len()));
        }
        let mut cfg = rc.clone();
        for (k, v) in keys.iter().zip(&parts) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        runs.push((value.clone(), cfg));
    }
    let axis = keys.join("+");
    let mut summary = Vec::new();
    for (value, cfg) in &runs {
        let run_dir = dir.join(format!("{axis}={value}"));
        let mut finals = Vec::new();
        for s in 0..seeds {
            let mut seeded = cfg.clone();
            seeded.train.seed = cfg.train.seed + s;
            writeln!(out, "== {axis}={value} seed {}", seeded.train.seed).ok();
            let (tr, va) = datasets(m, &seeded)?;
            let history = train_into(&run_dir.join(format!("seed-{}", seeded.train.seed)), &seeded, &tr, &va, out)?;
            finals.push(history.last().expect("at least one epoch").clone());
        }
        let mean = |f: &dyn Fn(&EpochMetrics) -> f64| finals.iter().map(f).sum::<f64>() / finals.len() as f64;
        let entry = json!({
            "axis": axis,
            "value": value,
            "seeds": (0..seeds).map(|s| cfg.train.seed + s).collect::<Vec<_>>(),
            "train_top1": finals.iter().map(|e| e.top1).collect::<Vec<_>>(),
            "val_top1": finals.iter().map(|e| e.val_top1).collect::<Vec<_>>(),
            "mean_train_top1": mean(&|e| e.top1),
            "mean_val_top1": mean(&|e| e.val_top1.unwrap_or(f64::NAN)),
        });
        write_text(&run_dir.join("metrics.json"), &serde_json::to_string_pretty(&entry).expect("serialize"))?;
        summary.push(entry);
    }
    write_text(&dir.join("ablate.json"), &serde_json::to_string_pretty(&summary).expect("serialize"))?;
    writeln!(out, "{:<24} {:>10} {:>10}", axis, "train", "val").ok();
    for e in &summary {
        writeln!(
            out,
            "{:<24} {:>10.4} {:>10.4}",
            e["value"].as_str().unwrap_or_default(),
            e["mean_train_top1"].as_f64().unwrap_or(f64::NAN),
            e["mean_val_top1"].as_f64().unwrap_or(f64::NAN)
        )
        .ok();
    }
    Ok(EXIT_OK)
}

fn cmd_dump(m: &ArgMatches, rc: &RunConfig, out: &mut dyn Write) -> Outcome {
    let dir = out_dir(m)?;
    let layer = m.get_one::<usize>("layer").copied().unwrap_or(rc.model.layers - 1);
    if layer >= rc.model.layers {
        return invalid(format!("--layer {layer} out of range for {} layers", rc.model.layers));
    }
    if !rc.model.motion_enabled() {
        return invalid(format!("sme_mode `{}` has no motion adapter to visualise", rc.model.sme_mode));
    }
    let class = *m.get_one::<usize>("class").expect("defaulted");
    if class >= rc.data.num_classes() {
        return invalid(format!("--class {class} out of range for {} classes", rc.data.num_classes()));
    }
    let model = load_model(rc, m.get_one::<String>("checkpoint"))?;
    let clip = gen_clip(class, *m.get_one::<u64>("clip-seed").expect("defaulted"), &rc.data);
    let video = if m.get_flag("static") {
        let first = ops::narrow(&clip.frames, 1, 0, 1).context("slicing first frame")?;
        ops::index_select(&first, 1, &vec![0; rc.data.frames]).context("repeating first frame")?
    } else {
        clip.frames.clone()
    };
    let maps = activation_maps(&model, &video, layer).context("computing activation maps")?;
    let scale = *m.get_one::<usize>("scale").expect("defaulted");
    for (f, &idx) in maps.indices.iter().enumerate() {
        let (w, h, gray) = compose_panels(&[&maps.without_sme[f], &maps.with_sme[f], &maps.motion[f]], maps.grid, scale);
        let path = dir.join(format!("layer{layer}_frame{idx:02}.ppm"));
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_ppm(BufWriter::new(file), w, h, &gray).with_context(|| format!("writing {}", path.display()))?;
    }
    write_text(&dir.join("activations.json"), &serde_json::to_string_pretty(&maps).expect("serialize"))?;
    let peak = maps.motion.iter().flatten().cloned().fold(0.0, f64::max);
    writeln!(
        out,
        "wrote {} frames ({}x{} grid; panels: without SME | with SME | motion) to {}; peak motion {peak:.3e}",
        maps.indices.len(),
        maps.grid.0,
        maps.grid.1,
        dir.display()
    )
    .ok();
    Ok(EXIT_OK)
}

/// Run one command line. `args[0]` is the program name.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve_config(sub).and_then(|rc| {
        writeln!(out, "# resolved config ({name})\n{}", rc.to_text()).ok();
        match name {
            "gen-data" => cmd_gen_data(sub, &rc, out),
            "train" => cmd_train(sub, &rc, out),
            "eval" => cmd_eval(sub, &rc, out),
            "gradcheck" => cmd_gradcheck(sub, &rc, out),
            "profile" => cmd_profile(sub, &rc, out),
            "ablate" => cmd_ablate(sub, &rc, out),
            "dump-activations" => cmd_dump(sub, &rc, out),
            other => unreachable!("unhandled subcommand {other}"),
        }
    });
    match result {
        Ok(code) => code,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            EXIT_INVALID
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
