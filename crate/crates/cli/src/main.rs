use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hmoe::checkpoint::Checkpoint;
use hmoe::config::ExperimentConfig;
use hmoe::inference::{predict, score, PredictMode};
use hmoe::report::{self, EvalReport, Summary};
use hmoe::training::{generate_dataset, prepare_data, run_training, RngStreams};

#[derive(Parser)]
#[command(
    name = "hmoe",
    version,
    about = "Hypernetwork mixture of experts experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, summary, checkpoint and dumps.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint in MIX or OOD mode.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV; defaults to the checkpoint task's generated data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "MIX")]
        mode: PredictMode,
        /// Where to write predictions.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the task's dataset as CSV.
    Gendata {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Destination CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    /// Any config key, e.g. `--set loss.lambda_kl=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => {
                Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            }
            None => None,
        };
        let mut overrides = Vec::new();
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("override `{kv}` is not KEY=VALUE");
            };
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(t) = &self.task {
            overrides.push(("task".into(), format!("\"{t}\"")));
        }
        if let Some(v) = &self.variant {
            overrides.push(("variant".into(), format!("\"{v}\"")));
        }
        if let Some(s) = self.seed {
            overrides.push(("seed".into(), s.to_string()));
        }
        Ok(ExperimentConfig::resolve(text.as_deref(), &overrides)?)
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn train(cfg: ExperimentConfig, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let (train_set, val_set) = prepare_data(&cfg)?;
    let outcome = run_training(&cfg, &train_set, &val_set)?;
    report::write_metrics(create(&dir.join("metrics.csv"))?, &outcome.history)?;

    let summary = Summary::build(&cfg, &outcome, &train_set, &val_set)?;
    fs::write(dir.join("summary.json"), summary.to_json()?)?;
    Checkpoint::new(cfg.clone(), outcome.model.clone()).save(&dir.join("checkpoint.json"))?;

    let x = train_set.inputs()?;
    let mix = predict(&outcome.model, &x, PredictMode::Mix)?;
    let gates = mix.gate.as_ref().expect("MIX prediction carries gates");
    report::write_gate_values(create(&dir.join("gate_values.csv"))?, gates)?;
    let v = outcome.model.embed(&x)?;
    let clusters = mix.clusters().unwrap_or_default();
    report::write_encoder_outputs(
        create(&dir.join("encoder_outputs.csv"))?,
        &v,
        &clusters,
        &train_set.d,
    )?;

    if let Some(l) = summary.final_losses {
        println!(
            "final losses: L_y={:.6} L_en={:.6} L_kl={:.6} L_ad={:.6} L_d={:.6}",
            l.l_y, l.l_en, l.l_kl, l.l_ad, l.l_d
        );
    }
    println!(
        "train {m}: MIX={:.6} OOD={:.6}  val {m}: MIX={:.6} OOD={:.6}",
        summary.train.mix,
        summary.train.ood,
        summary.val.mix,
        summary.val.ood,
        m = summary.metric
    );
    let c = &summary.clustering;
    match c.silhouette {
        Some(sc) => println!(
            "clusters used: {}  purity: {:.4}  silhouette: {sc:.4}",
            c.clusters_used, c.purity
        ),
        None => println!(
            "clusters used: {}  purity: {:.4}",
            c.clusters_used, c.purity
        ),
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data: Option<&Path>,
    mode: PredictMode,
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let cfg = &ckpt.config;
    let dataset = match data {
        Some(p) => report::read_dataset_csv(p, cfg.is_classification())?,
        None => generate_dataset(cfg, &mut RngStreams::new(cfg.seed).data)?,
    };
    dataset.validate()?;
    let spec = &ckpt.model.spec;
    if dataset.input_dim() != spec.input_dim() || dataset.output_dim() != spec.output_dim() {
        bail!(
            "dataset has {} inputs / {} outputs but the checkpoint expects {} / {}",
            dataset.input_dim(),
            dataset.output_dim(),
            spec.input_dim(),
            spec.output_dim()
        );
    }
    let classification = dataset.n_classes.is_some();
    let pred = predict(&ckpt.model, &dataset.inputs()?, mode)?;
    let rep = EvalReport {
        mode,
        metric: if classification { "accuracy" } else { "mse" }.into(),
        value: score(&pred, &dataset.y, classification)?,
        n: dataset.len(),
    };
    println!(
        "{} {} = {:.6} (n = {})",
        rep.mode, rep.metric, rep.value, rep.n
    );
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        report::write_predictions(create(&dir.join("predictions.csv"))?, &pred, classification)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&rep)?)?;
    }
    Ok(())
}

fn gendata(cfg: ExperimentConfig, out: &Path) -> Result<()> {
    let data = generate_dataset(&cfg, &mut RngStreams::new(cfg.seed).data)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    report::write_dataset(create(out)?, &data)?;
    println!("wrote {} rows to {}", data.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => train(cfg.resolve()?, out),
        Command::Eval {
            checkpoint,
            data,
            mode,
            out,
        } => eval(&checkpoint, data.as_deref(), mode, out.as_deref()),
        Command::Gendata { cfg, out } => gendata(cfg.resolve()?, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
