//! `fairnet` command-line driver.
//!
//! Every subcommand writes its outputs under `--out` together with a
//! `manifest.json` of sha256 hashes. Failures print one JSON line to stderr
//! and exit with code 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use fairnet::data::save_csv;
use fairnet::error::FairNetError;
use fairnet::metrics::{percent, FairnessReport};
use fairnet::pipeline::{
    evaluate_artifacts, load_split_data, run_experiment, run_variants, sha256_hex, sweep,
    Artifacts, Evaluation, PipelineConfig, RunReport, SweepAxis, Variant,
};
use fairnet::theory::{
    delta_p, monte_carlo_validate, predicted_group_perf, preservation_condition, TheoryInputs,
};

#[derive(Parser, Debug)]
#[command(
    name = "fairnet",
    version,
    about = "Detector-gated low-rank adapters for group fairness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; omitted sections and keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "fairnet-out")]
    out: PathBuf,
    /// Overrides the training seed and the synthetic data seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run all four stages and write report.json plus a checkpoint bundle.
    Train(Common),
    /// Evaluate a checkpoint bundle on the test split the config describes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Bundle written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides detector.threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Sweep the threshold, the sensitive-label fraction or the label noise rate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// threshold | label_fraction | noise_rate
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(
            long,
            value_delimiter = ',',
            required = true,
            allow_hyphen_values = true
        )]
        values: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Ablation report for one variant or all four.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// full_method | no_detector | no_contrastive | neither | all
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// Closed-form group performance, accuracy change and preservation condition.
    Theory {
        /// JSON object with p, perf_base, perf_lora, tpr, fpr.
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long, default_value = "fairnet-out")]
        out: PathBuf,
        /// Monte Carlo draws; 0 skips the simulation.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the configured synthetic dataset (with split tags) as CSV.
    GenData(Common),
    /// Print every config key with its default and meaning.
    ConfigReference {
        /// Also write config-reference.md and default-config.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Collects output files, then writes them and a manifest after checking
/// each one reads back with the expected hash.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    fn add_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.add(name, text);
        Ok(())
    }

    fn commit(self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))?;
        let mut entries = Vec::new();
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            let back = fs::read(&path)?;
            let sha = sha256_hex(&back);
            if sha != sha256_hex(bytes) {
                bail!("{} did not read back intact", path.display());
            }
            entries.push(ManifestEntry {
                path: name.clone(),
                bytes: back.len(),
                sha256: sha,
            });
        }
        let mut manifest = serde_json::to_string_pretty(&json!({ "files": entries }))?;
        manifest.push('\n');
        fs::write(self.dir.join("manifest.json"), manifest)?;
        Ok(())
    }
}

fn metrics_line(label: &str, r: &FairnessReport) -> String {
    format!(
        "{label:<15} ACC {:>5}  WGA {:>5}  EOD {:>5}  DP {:>5}  EOp {:>5}",
        percent(Some(r.acc)),
        percent(Some(r.wga)),
        percent(r.eod),
        percent(Some(r.dp)),
        percent(r.eop)
    )
}

fn summarise(e: &Evaluation) {
    println!("{}", metrics_line("ERM", &e.base));
    println!("{}", metrics_line("FairNet", &e.fairnet));
    println!(
        "detector        TPR {:>5}  FPR {:>5}  ratio {}  triggered {}",
        percent(Some(e.detector_rates.tpr)),
        percent(Some(e.detector_rates.fpr)),
        e.detector_rates
            .ratio
            .map_or("n/a".to_string(), |r| format!("{r:.2}")),
        e.triggered
    );
}

fn cmd_train(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let (report, art) = run_experiment(&cfg)?;
    let mut out = Outputs::new(&common.out);
    out.add("report.json", report_bytes(&report)?);
    out.add("checkpoint.json", art.to_json()?);
    out.add(
        "config.json",
        format!("{}\n", report.config.to_json_pretty()?),
    );
    out.commit()?;
    summarise(&report.evaluation);
    Ok(())
}

fn report_bytes(report: &RunReport) -> anyhow::Result<String> {
    Ok(format!("{}\n", report.to_json_pretty()?))
}

fn cmd_evaluate(common: &Common, checkpoint: &Path, threshold: Option<f64>) -> anyhow::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(t) = threshold {
        cfg.detector.threshold = t;
        cfg.validate()?;
    }
    let text = fs::read_to_string(checkpoint)
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let art = Artifacts::from_json(&text)?;
    let evaluation = evaluate_artifacts(&cfg, &art)?;
    let mut out = Outputs::new(&common.out);
    out.add_json("evaluation.json", &evaluation)?;
    out.commit()?;
    summarise(&evaluation);
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str, values: &[f64], jobs: usize) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let axis = SweepAxis::parse(axis)?;
    let result = sweep(&cfg, axis, values, jobs.max(1))?;
    let mut out = Outputs::new(&common.out);
    let csv = result.to_csv()?;
    out.add("sweep.csv", csv.clone());
    out.add_json("sweep.json", &result)?;
    out.commit()?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(common: &Common, variant: &str) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let variants: Vec<Variant> = if variant == "all" {
        Variant::ALL.to_vec()
    } else {
        vec![Variant::parse(variant)?]
    };
    let reports = run_variants(&cfg, &variants)?;
    let mut out = Outputs::new(&common.out);
    let mut table = String::from("variant,acc,wga,eod,dp,eop,triggered\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &reports {
        let f = &r.evaluation.fairnet;
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.evaluation.variant.name(),
            f.acc,
            f.wga,
            opt(f.eod),
            f.dp,
            opt(f.eop),
            r.evaluation.triggered
        ));
    }
    out.add_json("ablation.json", &reports)?;
    out.add("ablation.csv", table);
    out.commit()?;
    if let Some(first) = reports.first() {
        println!("{}", metrics_line("ERM", &first.evaluation.base));
    }
    for r in &reports {
        println!(
            "{}",
            metrics_line(r.evaluation.variant.name(), &r.evaluation.fairnet)
        );
    }
    Ok(())
}

fn cmd_theory(inputs: &Path, dir: &Path, samples: usize, seed: u64) -> anyhow::Result<()> {
    let text = fs::read_to_string(inputs)
        .with_context(|| format!("reading inputs {}", inputs.display()))?;
    let x: TheoryInputs = serde_json::from_str(&text)
        .map_err(|e| FairNetError::InvalidConfig(format!("theory inputs: {e}")))?;
    x.validate()?;
    let monte_carlo = if samples > 0 {
        Some(monte_carlo_validate(&x, samples, seed)?)
    } else {
        None
    };
    let value = json!({
        "inputs": x,
        "predicted_group": predicted_group_perf(&x),
        "delta_p": delta_p(&x),
        "preservation": preservation_condition(&x),
        "monte_carlo": monte_carlo,
    });
    let mut out = Outputs::new(dir);
    out.add_json("theory.json", &value)?;
    out.commit()?;
    let g = predicted_group_perf(&x);
    println!(
        "G1 {}  G2 {}  delta P {:+.4}",
        percent(Some(g[0])),
        percent(Some(g[1])),
        delta_p(&x)
    );
    Ok(())
}

fn cmd_gen_data(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    if cfg.data.csv.is_some() {
        bail!(FairNetError::InvalidConfig(
            "gen-data needs a synthetic data section, not data.csv".into()
        ));
    }
    let ds = load_split_data(&cfg)?;
    fs::create_dir_all(&common.out)?;
    let tmp = common.out.join("data.csv");
    save_csv(&ds, &tmp)?;
    let bytes = fs::read(&tmp)?;
    let mut out = Outputs::new(&common.out);
    out.add("data.csv", bytes);
    out.commit()?;
    println!("{} rows, {} features", ds.len(), ds.dim());
    Ok(())
}

/// Dotted key, meaning. Every leaf of the default config must appear here.
const KEY_DOCS: &[(&str, &str)] = &[
    (
        "data.csv",
        "CSV file with header f0..f{d-1},label,sensitive,split; null generates synthetic data",
    ),
    ("data.synthetic.n", "number of synthetic samples"),
    (
        "data.synthetic.d",
        "feature count: feature 0 carries the label, feature 1 the spurious attribute",
    ),
    ("data.synthetic.p", "minority share P(s = 1)"),
    (
        "data.synthetic.align",
        "P(spurious attribute agrees with the label) in the majority group",
    ),
    (
        "data.synthetic.signal_snr",
        "mean offset of the label feature in units of its noise",
    ),
    (
        "data.synthetic.spurious_snr",
        "mean offset of the spurious feature in units of its noise",
    ),
    (
        "data.synthetic.seed",
        "data generation seed (set together with pipeline.seed by --seed)",
    ),
    (
        "data.split",
        "train / validation / test fractions, split within each (label, group) cell",
    ),
    ("model.hidden", "hidden layer widths of the base network"),
    (
        "model.activation",
        "hidden activation: tanh | relu | identity",
    ),
    ("model.learning_rate", "ERM step size"),
    ("model.batch_size", "ERM mini-batch size"),
    (
        "model.epochs",
        "ERM epochs; the epoch with the best validation accuracy is kept",
    ),
    (
        "detector.layer",
        "1-based layer whose output the detector reads",
    ),
    (
        "detector.threshold",
        "gate fires when the detector score is strictly above this value",
    ),
    (
        "detector.gate",
        "auto | switch | trained; auto uses the known labels as a switch in clean full mode",
    ),
    (
        "detector.lof_k",
        "LOF neighbour count for pseudo-labels in unlabeled mode",
    ),
    ("detector.training.hidden", "detector hidden width"),
    ("detector.training.pooling", "none | attention"),
    ("detector.training.attention_dim", "attention pooling width"),
    ("detector.training.learning_rate", "detector step size"),
    ("detector.training.batch_size", "detector mini-batch size"),
    ("detector.training.epochs", "detector epochs"),
    (
        "detector.training.class_weights",
        "inverse_frequency | uniform | {custom: {majority, minority}}",
    ),
    (
        "adapter.layer",
        "1-based layer whose weights the adapter corrects",
    ),
    ("adapter.rank", "adapter rank r"),
    ("adapter.learning_rate", "adapter step size"),
    ("adapter.batch_size", "adapter mini-batch size"),
    ("adapter.epochs", "adapter epochs; 0 leaves B = 0"),
    (
        "adapter.negatives",
        "hard | random negative target selection",
    ),
    (
        "adapter.task",
        "off | triggered | all: which samples add cross-entropy during adapter training",
    ),
    (
        "loss.lambda_d",
        "weight of the detector loss in the composite objective",
    ),
    (
        "loss.lambda_c",
        "weight of the triplet loss in the composite objective",
    ),
    ("loss.margin", "triplet margin"),
    (
        "pipeline.mode",
        "full | partial | unlabeled sensitive-label availability",
    ),
    (
        "pipeline.label_fraction",
        "share of training samples keeping their sensitive label in partial mode",
    ),
    (
        "pipeline.contamination",
        "share of samples pseudo-labeled minority in unlabeled mode",
    ),
    (
        "pipeline.noise_rate",
        "share of training sensitive labels corrupted",
    ),
    ("pipeline.noise_kind", "randomize (fair coin) | flip"),
    (
        "pipeline.variant",
        "full_method | no_detector | no_contrastive | neither",
    ),
    (
        "pipeline.seed",
        "master seed for splits, masking, noise and all training",
    ),
    (
        "pipeline.monte_carlo_samples",
        "draws for the report's Monte Carlo check; 0 skips it",
    ),
];

fn leaves(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn config_reference() -> anyhow::Result<(String, String)> {
    let defaults = PipelineConfig::default();
    let value = serde_json::to_value(&defaults)?;
    let mut flat = Vec::new();
    leaves("", &value, &mut flat);
    let mut text = String::from("| key | default | meaning |\n|---|---|---|\n");
    for (key, default) in &flat {
        let doc = KEY_DOCS
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, d)| *d)
            .ok_or_else(|| anyhow::anyhow!("config key {key} has no reference entry"))?;
        text.push_str(&format!("| `{key}` | `{default}` | {doc} |\n"));
    }
    Ok((text, format!("{}\n", defaults.to_json_pretty()?)))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Evaluate {
            common,
            checkpoint,
            threshold,
        } => cmd_evaluate(&common, &checkpoint, threshold),
        Command::Sweep {
            common,
            axis,
            values,
            jobs,
        } => cmd_sweep(&common, &axis, &values, jobs),
        Command::Ablate { common, variant } => cmd_ablate(&common, &variant),
        Command::Theory {
            inputs,
            out,
            samples,
            seed,
        } => cmd_theory(&inputs, &out, samples, seed),
        Command::GenData(common) => cmd_gen_data(&common),
        Command::ConfigReference { out } => {
            let (table, defaults) = config_reference()?;
            if let Some(dir) = out {
                let mut o = Outputs::new(&dir);
                o.add("config-reference.md", table.clone());
                o.add("default-config.json", defaults);
                o.commit()?;
            }
            print!("{table}");
            Ok(())
        }
    }
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| {
            e.downcast_ref::<FairNetError>()
                .map(FairNetError::kind)
                .or_else(|| e.downcast_ref::<std::io::Error>().map(|_| "io"))
        })
        .unwrap_or("error");
    let message = format!("{err:#}").replace('\n', " ");
    json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("usage error")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", json!({ "error": "usage", "message": message }));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_key_is_documented() {
        let (table, defaults) = config_reference().unwrap();
        assert_eq!(table.lines().count(), KEY_DOCS.len() + 2);
        assert_eq!(
            PipelineConfig::from_json(&defaults).unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn error_lines_are_single_line_json() {
        let err =
            anyhow::Error::new(FairNetError::InvalidConfig("bad\nvalue".into())).context("loading");
        let line = error_line(&err);
        assert!(!line.contains('\n'));
        let v: Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["error"], "invalid_config");
        let io = anyhow::Error::new(std::io::Error::from(std::io::ErrorKind::NotFound))
            .context("reading");
        assert!(error_line(&io).contains("\"error\":\"io\""));
    }
}
