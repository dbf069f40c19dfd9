use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semdas::embeddings::{generate_synthetic, SyntheticGenConfig};
use semdas::harness::{self, ExperimentConfig};
use semdas::selection::SchemeConfig;
use semdas::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "semdas", version, about = "Semantic data sourcing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic embedding file.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        num_identities: usize,
        #[arg(long, default_value_t = 8)]
        samples_per_identity: usize,
        #[arg(long, default_value_t = 64)]
        dimension: usize,
        #[arg(long, default_value_t = 0.05)]
        sigma: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run one experiment and write its metrics CSV.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep k and/or query quantization and write the metrics CSV.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Quantization settings, e.g. `*x2,*x8,*x32,16x32`.
        #[arg(long)]
        quant: Option<String>,
        /// Extra JSCM(1:w) schemes, one per listed rate weight.
        #[arg(long, value_delimiter = ',')]
        jscm_grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a metrics CSV into latency-vs-missing-rate columns per scheme.
    Report {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dimension: Option<usize>,
    /// Schemes separated by `;`, e.g. `JSCM(1:0.09);BSS;BCS;RS`.
    #[arg(long)]
    schemes: Option<String>,
    /// k values, e.g. `1..8` or `1,2,4`.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    payload_bits: Option<u64>,
    #[arg(long)]
    score_mode: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Use embeddings from this file instead of synthetic ones.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl ExperimentArgs {
    fn build(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_text(&fs::read_to_string(path)?)?;
        }
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(v) = self.trials {
            set("trials", v.to_string())?;
        }
        if let Some(v) = self.seed {
            set("master_seed", v.to_string())?;
        }
        if let Some(v) = self.dimension {
            set("dimension", v.to_string())?;
        }
        if let Some(v) = &self.schemes {
            set("schemes", v.clone())?;
        }
        if let Some(v) = &self.k {
            set("k_sweep", v.clone())?;
        }
        if let Some(v) = self.snr_db {
            set("avg_snr_db", v.to_string())?;
        }
        if let Some(v) = self.payload_bits {
            set("payload_bits", v.to_string())?;
        }
        if let Some(v) = &self.score_mode {
            set("score_mode", v.clone())?;
        }
        if let Some(v) = self.sigma {
            set("intra_class_noise_sigma", v.to_string())?;
        }
        if let Some(p) = &self.embeddings {
            set("embedding_source", format!("file:{}", p.display()))?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn write_rows(rows: &[harness::MetricsRow], exp: &harness::Experiment, out: &PathBuf) -> Result<()> {
    harness::export_csv(rows, &exp.config, out)?;
    eprintln!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            num_identities,
            samples_per_identity,
            dimension,
            sigma,
            seed,
        } => {
            let store = generate_synthetic(&SyntheticGenConfig {
                num_identities,
                samples_per_identity,
                dimension,
                intra_class_noise_sigma: sigma,
                seed,
            })?;
            store.export(&out)?;
            eprintln!(
                "wrote {} embeddings (D={}) to {}",
                store.len(),
                dimension,
                out.display()
            );
        }
        Command::Run { exp, out } => {
            let experiment = harness::Experiment::new(exp.build()?)?;
            let rows = experiment.run()?;
            write_rows(&rows, &experiment, &out)?;
        }
        Command::Sweep {
            exp,
            quant,
            jscm_grid,
            out,
        } => {
            let mut cfg = exp.build()?;
            if let Some(q) = quant {
                cfg.set("quantization_sweep", &q)?;
            }
            for w_rate in jscm_grid {
                let s = SchemeConfig::Jscm {
                    w_semantic: 1.0,
                    w_rate,
                };
                if !cfg.schemes.contains(&s) {
                    cfg.schemes.push(s);
                }
            }
            let experiment = harness::Experiment::new(cfg)?;
            let rows = harness::sweep_quantization(&experiment.config)?;
            write_rows(&rows, &experiment, &out)?;
        }
        Command::Report { input, out } => {
            let text = fs::read_to_string(&input)?;
            let rows = harness::parse_csv(&text, &input)?;
            let report = harness::report(&rows);
            match out {
                Some(path) => fs::write(path, report)?,
                None => print!("{report}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
