//! Command-line surface: dataset generation, training, evaluation, ablation
//! matrices and the self-check battery, all writing artifacts under one
//! output root.
//!
//! The root comes from `--out`, then the `CMLAB_OUT` environment variable,
//! then `./out`.  Commands are deterministic for fixed inputs: rerunning one
//! reproduces its output files byte for byte, except the wall-clock fields
//! of a run manifest.  Failures print a single JSON object on stderr
//! (`{"error":{"kind":...,"message":...}}`) and exit nonzero; argument
//! errors are clap's usual usage messages.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{load_dataset, write_dataset, Dataset};
use crate::training::{
    ablation_csv, num, run_ablation, AblationRow, EvalReport, ExperimentConfig, Trainer,
};
use crate::tensor::load_checkpoint;
use crate::{verify, Error, Result};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CMLAB_OUT";

/// Cross-modal adaptation laboratory: paired 2D/3D segmentation on synthetic
/// scenes, with patch-pooled mimicry and adversarial output alignment.
#[derive(Debug, Parser)]
#[command(name = "cmlab", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the dataset splits plus manifest under <out>/dataset.
    GenData(GenDataArgs),
    /// Train one configuration; writes a manifest, metrics and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled split; writes a per-class IoU table.
    Eval(EvalArgs),
    /// Train a matrix of variants and seeds; writes a comparison table.
    Ablate(AblateArgs),
    /// Run the self-check battery and report per-check timing.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Experiment config (TOML); only the [data] section matters here.
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Output root (default: $CMLAB_OUT, then ./out).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override the dataset seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Output root (default: $CMLAB_OUT, then ./out).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the variant (baseline, cml, scml, dscml, dscml+cmal,
    /// dscml+cmal+pl).
    #[arg(long)]
    pub variant: Option<String>,
    /// Override the discriminator alignment (a, b or c).
    #[arg(long)]
    pub alignment: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(value_name = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Labeled split: source-train, target-val or target-test.
    #[arg(value_name = "SPLIT")]
    pub split: String,
    /// Output root (default: $CMLAB_OUT, then ./out).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Matrix config (TOML): [base] config sections, seeds, and [[rows]].
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Output root (default: $CMLAB_OUT, then ./out).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads for independent cells (never changes any result).
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Deliberately falsify one named check to prove the battery catches it.
    #[arg(long, hide = true, value_name = "CHECK")]
    pub corrupt: Option<String>,
}

/// An ablation matrix: the base configuration, the seeds, and one row per
/// variant under test.  Unknown keys anywhere are errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Parses arguments and runs one command; the binary's whole body.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: &Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

/// The one-line JSON body printed on stderr when a command fails.
pub fn error_json(e: &Error) -> String {
    let kind = match e {
        Error::Io { .. } => "io",
        Error::Config(_) => "config",
        Error::Dataset(_) => "dataset",
        Error::Scene(_) => "scene",
        Error::Train(_) => "train",
        Error::Checkpoint(_) => "checkpoint",
        Error::Verify(_) => "verify",
    };
    json!({"error": {"kind": kind, "message": e.to_string()}}).to_string()
}

/// Output root resolution: flag, then environment, then `./out`.
fn out_root(flag: Option<&Path>) -> PathBuf {
    out_root_from(flag, std::env::var_os(OUT_ENV))
}

fn out_root_from(flag: Option<&Path>, env: Option<std::ffi::OsString>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or(env.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Loads `<root>/dataset` when it exists (it must match the config's data
/// section), otherwise generates the dataset in memory.  Stored scenes
/// round-trip bit for bit, so results never depend on which path ran.
fn dataset_for(cfg: &ExperimentConfig, root: &Path) -> Result<(Dataset, String)> {
    let dir = root.join("dataset");
    if dir.join("manifest.json").exists() {
        let ds = load_dataset(&dir)?;
        if ds.config != cfg.data {
            return Err(Error::Config(format!(
                "dataset at {} disagrees with the [data] section of this config; \
                 regenerate it or choose another --out",
                dir.display()
            )));
        }
        Ok((ds, dir.display().to_string()))
    } else {
        Ok((Dataset::generate(&cfg.data)?, "generated in memory".to_string()))
    }
}

/// Training must never touch the sealed target-train labels; the counter
/// proves it after the fact.
fn assert_sealed_untouched(ds: &Dataset) -> Result<()> {
    let reads = ds.sealed.reads();
    if reads != 0 {
        return Err(Error::Train(format!(
            "sealed target-train labels were read {reads} times during training"
        )));
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<ExitCode> {
    let mut cfg = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.data.seed = seed;
    }
    let dir = out_root(a.out.as_deref()).join("dataset");
    write_dataset(&cfg.data, &dir)?;
    let d = &cfg.data;
    println!(
        "dataset: {} ({}x{} px, {} pts, {} classes; {}+{}+{}+{} scenes)",
        dir.display(),
        d.height,
        d.width,
        d.n_points,
        d.classes,
        d.source_train,
        d.target_train,
        d.target_val,
        d.target_test
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: &TrainArgs) -> Result<ExitCode> {
    let mut cfg = read_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.run.master_seed = seed;
    }
    if let Some(v) = &a.variant {
        cfg.run.variant = v.clone();
    }
    if let Some(al) = &a.alignment {
        cfg.run.alignment = al.clone();
    }
    cfg.validate()?;

    let root = out_root(a.out.as_deref());
    let fp = cfg.fingerprint();
    let run_dir = root
        .join("runs")
        .join(format!("{}-seed{}-{}", cfg.run.variant, cfg.run.master_seed, &fp[..12]));
    let (ds, ds_source) = dataset_for(&cfg, &root)?;

    // Everything needed to reproduce the run goes down before training
    // starts; `started_unix_ms` is the one wall-clock field.
    let manifest = json!({
        "format": "cmlab-run-v1",
        "tool": {"name": "cmlab", "version": env!("CARGO_PKG_VERSION")},
        "config_fingerprint": fp,
        "master_seed": cfg.run.master_seed,
        "variant": cfg.run.variant,
        "alignment": cfg.run.alignment,
        "dataset": ds_source,
        "artifacts": {
            "config": "config.toml",
            "metrics": "metrics.jsonl",
            "checkpoint": "checkpoint",
        },
        "config": serde_json::to_value(&cfg).expect("config serializes"),
        "started_unix_ms": unix_ms(),
    });
    let manifest_text =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&run_dir.join("manifest.json"), &manifest_text)?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml_string())?;

    let mut trainer = Trainer::new(&cfg, &ds)?;
    let mut lines = String::new();
    let test = trainer.run(
        &mut |line: &str| {
            lines.push_str(line);
            lines.push('\n');
        },
        Some(&run_dir.join("checkpoints")),
    )?;
    write_text(&run_dir.join("metrics.jsonl"), &lines)?;
    trainer.save_state(&run_dir.join("checkpoint"))?;
    assert_sealed_untouched(&ds)?;

    let m = &test.metrics;
    println!("run: {}", run_dir.display());
    println!(
        "target-test mIoU: 2d {} 3d {} avg {}",
        num(m.miou_2d),
        num(m.miou_3d),
        num(m.miou_avg)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: &EvalArgs) -> Result<ExitCode> {
    let root = out_root(a.out.as_deref());
    let (_, meta) = load_checkpoint(&a.checkpoint)?;
    let cfg: ExperimentConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint carries no usable config: {e}")))?;
    cfg.validate()?;
    let (ds, _) = dataset_for(&cfg, &root)?;
    let trainer = Trainer::resume(&cfg, &ds, &a.checkpoint)?;
    let report = trainer.evaluate(&a.split)?;
    let csv = eval_csv(&ds.class_names, &report);
    let path =
        root.join("eval").join(format!("{}-{}.csv", &cfg.fingerprint()[..12], a.split));
    write_text(&path, &csv)?;
    print!("{csv}");
    println!("table: {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Per-class IoU for the three heads, one row per class, mIoU last.  A class
/// absent from both prediction and truth leaves its cells empty.
fn eval_csv(class_names: &[String], r: &EvalReport) -> String {
    let cell = |v: Option<f64>| v.map(num).unwrap_or_default();
    let mut s = String::from("class,iou_2d,iou_3d,iou_avg\n");
    for (c, name) in class_names.iter().enumerate() {
        s.push_str(&format!(
            "{name},{},{},{}\n",
            cell(r.report_2d.per_class[c]),
            cell(r.report_3d.per_class[c]),
            cell(r.report_avg.per_class[c]),
        ));
    }
    s.push_str(&format!(
        "miou,{},{},{}\n",
        num(r.metrics.miou_2d),
        num(r.metrics.miou_3d),
        num(r.metrics.miou_avg)
    ));
    s
}

fn cmd_ablate(a: &AblateArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let matrix: MatrixConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("matrix parse: {e}")))?;
    matrix.base.validate()?;
    let root = out_root(a.out.as_deref());
    let (ds, _) = dataset_for(&matrix.base, &root)?;
    let report = run_ablation(&matrix.base, &matrix.rows, &matrix.seeds, &ds, a.threads)?;
    assert_sealed_untouched(&ds)?;
    let csv = ablation_csv(&report);
    let path = root.join("ablation.csv");
    write_text(&path, &csv)?;
    print!("{csv}");
    for cell in &report.cells {
        if let Err(msg) = &cell.result {
            eprintln!("cell {} / seed {} failed: {msg}", cell.row, cell.seed);
        }
    }
    println!("table: {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: &VerifyArgs) -> Result<ExitCode> {
    if let Some(name) = &a.corrupt {
        if !verify::check_names().contains(&name.as_str()) {
            return Err(Error::Verify(format!(
                "unknown check '{name}'; run the battery without --corrupt to list names"
            )));
        }
    }
    let report = verify::run(a.corrupt.as_deref());
    print!("{}", report.render());
    Ok(if report.all_passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::MiouReport;
    use crate::training::EvalMetrics;

    #[test]
    fn out_root_prefers_flag_then_env_then_default() {
        let flag = PathBuf::from("/a");
        let env = Some(std::ffi::OsString::from("/b"));
        assert_eq!(out_root_from(Some(&flag), env.clone()), PathBuf::from("/a"));
        assert_eq!(out_root_from(None, env), PathBuf::from("/b"));
        assert_eq!(out_root_from(None, None), PathBuf::from("out"));
    }

    #[test]
    fn error_json_is_machine_readable() {
        let e = Error::Config("bad key".to_string());
        let v: serde_json::Value = serde_json::from_str(&error_json(&e)).unwrap();
        assert_eq!(v["error"]["kind"], "config");
        assert_eq!(v["error"]["message"], "config error: bad key");
    }

    #[test]
    fn eval_csv_rows_and_absent_classes() {
        let rep = |per_class: Vec<Option<f64>>, miou: f64| MiouReport {
            classes: 2,
            confusion: vec![0; 4],
            per_class,
            miou,
        };
        let r = EvalReport {
            metrics: EvalMetrics { miou_2d: 0.5, miou_3d: 0.25, miou_avg: 0.375 },
            report_2d: rep(vec![Some(0.5), None], 0.5),
            report_3d: rep(vec![Some(0.25), None], 0.25),
            report_avg: rep(vec![Some(0.375), None], 0.375),
        };
        let names = vec!["ground".to_string(), "pillar".to_string()];
        let csv = eval_csv(&names, &r);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,iou_2d,iou_3d,iou_avg");
        assert!(lines[1].starts_with("ground,5.0000000000000000e-1,"));
        assert_eq!(lines[2], "pillar,,,");
        assert!(lines[3].starts_with("miou,5.0000000000000000e-1,2.5000000000000000e-1,"));
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn matrix_config_rejects_unknown_keys() {
        let err = toml::from_str::<MatrixConfig>("seeds = [1]\nbudget = 3\n");
        assert!(err.is_err());
        let ok: MatrixConfig = toml::from_str("seeds = [1, 2]\n").unwrap();
        assert_eq!(ok.seeds, vec![1, 2]);
        assert!(ok.rows.is_empty());
    }

    #[test]
    fn cli_parses_every_verb() {
        for argv in [
            vec!["cmlab", "gen-data", "--config", "c.toml"],
            vec!["cmlab", "train", "--config", "c.toml", "--seed", "7", "--variant", "dscml"],
            vec!["cmlab", "eval", "ckpt", "target-val", "--out", "root"],
            vec!["cmlab", "ablate", "--config", "m.toml", "--threads", "2"],
            vec!["cmlab", "verify"],
        ] {
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
        assert!(Cli::try_parse_from(["cmlab", "train"]).is_err(), "--config is required");
    }
}
