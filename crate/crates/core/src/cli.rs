//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_panel, write_panel, ColumnMap};
use crate::engine::{
    default_matrix, parse_window, report_from_bundle, run_backtest, run_matrix, validate_data,
    write_bundle, Layout, MatrixResult, MatrixRow, RunConfig, Strategy,
};
use crate::error::{Error, Result};
use crate::features::{write_feature_csv, AssetFeatures};
use crate::synth::{generate_synthetic, Generator, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "dynmom", version, about = "Dynamic trend classification and momentum backtests")]
pub struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[arg(long, global = true, value_enum, default_value = "json")]
    pub output_format: OutputFormat,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one strategy and write its artifact bundle.
    Backtest(RunArgs),
    /// Run a table of strategies on a shared panel and window.
    Matrix {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated strategies such as `dma@tvp,single:12@cp,naive:12`
        /// (default: the full comparison table).
        #[arg(long)]
        rows: Option<String>,
        #[arg(long, default_value = "standard")]
        layout: String,
    },
    /// List per-asset coverage, data problems and summary statistics.
    ValidateData {
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic panel and its ground truth.
    Synth {
        /// JSON generator spec; overrides the generator flags.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "iid-gaussian")]
        generator: String,
        #[arg(long, default_value_t = 10)]
        assets: usize,
        #[arg(long, default_value_t = 240)]
        months: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute a report from a backtest bundle, optionally over a sub-window.
    Report {
        #[arg(long)]
        run: PathBuf,
        /// `START:END`, e.g. `2009m03:2010m06`.
        #[arg(long)]
        window: Option<String>,
        #[arg(long, default_value_t = 10.0)]
        gamma: f64,
        #[arg(long, default_value_t = 0.10)]
        expost_target: f64,
    },
    /// Dump momentum, labels and ex-ante volatility of one asset.
    Features {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        asset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Run settings; each flag maps to one config key.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Key-value config file; its entries override flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Comma-separated look-backs in months.
    #[arg(long)]
    pub lookbacks: Option<String>,
    /// cp | tvp
    #[arg(long)]
    pub lambda: Option<String>,
    /// dma | dms | single:L | naive:L, optionally suffixed `@cp` or `@tvp`
    #[arg(long)]
    pub combine: Option<String>,
    /// fixed:C | cv1 | cv2 | bayes
    #[arg(long)]
    pub cutoff: Option<String>,
    /// Cost schedule file.
    #[arg(long)]
    pub costs: Option<PathBuf>,
    /// `START:END` evaluation window.
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma_target: Option<f64>,
    #[arg(long)]
    pub expost_target: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub train_months: Option<usize>,
    #[arg(long)]
    pub ewma_decay: Option<f64>,
    /// running | zero
    #[arg(long)]
    pub ewma_mean: Option<String>,
    #[arg(long)]
    pub vol_floor: Option<f64>,
    #[arg(long)]
    pub prior_scale: Option<f64>,
    #[arg(long)]
    pub tvp_grid: Option<String>,
    #[arg(long)]
    pub alpha_grid: Option<String>,
    /// updated | prior
    #[arg(long)]
    pub laplace: Option<String>,
    /// selected | forecast
    #[arg(long)]
    pub alpha_timing: Option<String>,
    /// mean-square | variance
    #[arg(long)]
    pub bayes_moment: Option<String>,
    /// Look-back of the naive fee benchmark.
    #[arg(long)]
    pub benchmark: Option<usize>,
    /// Also write per-asset single-filter traces.
    #[arg(long)]
    pub filter_trace: bool,
}

impl RunArgs {
    /// Builds the run configuration: defaults, then flags, then the config file.
    pub fn to_config(&self, jobs: Option<usize>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let num = |v: Option<f64>| v.map(|v| v.to_string());
        let pairs: Vec<(&str, Option<String>)> = vec![
            ("data", path(&self.data)),
            ("output", path(&self.output)),
            ("lookbacks", self.lookbacks.clone()),
            ("combine", self.combine.clone()),
            ("lambda", self.lambda.clone()),
            ("cutoff", self.cutoff.clone()),
            ("costs", path(&self.costs)),
            ("window", self.window.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("sigma_target", num(self.sigma_target)),
            ("expost_target", num(self.expost_target)),
            ("gamma", num(self.gamma)),
            ("train_months", self.train_months.map(|v| v.to_string())),
            ("ewma_decay", num(self.ewma_decay)),
            ("ewma_mean", self.ewma_mean.clone()),
            ("vol_floor", num(self.vol_floor)),
            ("prior_scale", num(self.prior_scale)),
            ("tvp_grid", self.tvp_grid.clone()),
            ("alpha_grid", self.alpha_grid.clone()),
            ("laplace", self.laplace.clone()),
            ("alpha_timing", self.alpha_timing.clone()),
            ("bayes_moment", self.bayes_moment.clone()),
            ("benchmark", self.benchmark.map(|v| v.to_string())),
            ("jobs", jobs.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.filter_trace = self.filter_trace;
        if let Some(p) = &self.config {
            cfg.apply_kv(&fs::read_to_string(p)?)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::config("no data path given (--data or `data =` in the config)"))
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    let written = out
        .write_all(text.as_bytes())
        .and_then(|()| if text.ends_with('\n') { Ok(()) } else { out.write_all(b"\n") });
    match written {
        // a closed pipe (`| head`) is not a failure of the run
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn single_row_csv(row: MatrixRow) -> Result<String> {
    MatrixResult {
        layout: Layout::Standard,
        fee_benchmark: String::new(),
        rows: vec![row],
    }
    .to_csv()
}

pub fn run(cli: Cli) -> Result<()> {
    let format = cli.output_format;
    match cli.command {
        Command::Backtest(args) => {
            let cfg = args.to_config(cli.jobs)?;
            let panel = load_panel(data_path(&cfg)?, &ColumnMap::default())?;
            let result = run_backtest(&panel, &cfg)?;
            if let Some(dir) = &cfg.output {
                write_bundle(&result, &cfg, &cfg.lookbacks, dir)?;
            }
            match format {
                OutputFormat::Json => emit(&serde_json::to_string_pretty(&result.doc(&cfg))?),
                OutputFormat::Csv => emit(&single_row_csv(MatrixRow {
                    strategy: result.strategy.to_string(),
                    row: result.strategy.row_label(),
                    group: result.strategy.group_label().into(),
                    report: result.report.clone(),
                })?),
            }
        }
        Command::Matrix { run, rows, layout } => {
            let cfg = run.to_config(cli.jobs)?;
            let panel = load_panel(data_path(&cfg)?, &ColumnMap::default())?;
            let strategies = match rows {
                Some(list) => list
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| Strategy::parse_with(s.trim(), cfg.strategy.lambda))
                    .collect::<Result<Vec<_>>>()?,
                None => default_matrix(&cfg.lookbacks),
            };
            let result = run_matrix(&panel, &cfg, &strategies, layout.parse()?)?;
            let csv = result.to_csv()?;
            if let Some(dir) = &cfg.output {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("compare.csv"), &csv)?;
                fs::write(
                    dir.join("compare.json"),
                    serde_json::to_string_pretty(&result)? + "\n",
                )?;
            }
            match format {
                OutputFormat::Json => emit(&serde_json::to_string_pretty(&result)?),
                OutputFormat::Csv => emit(&csv),
            }
        }
        Command::ValidateData { data } => {
            let diag = validate_data(&data, &ColumnMap::default())?;
            match format {
                OutputFormat::Json => emit(&serde_json::to_string_pretty(&diag)?)?,
                OutputFormat::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["asset_id", "asset_class", "start", "end", "months", "mean", "vol", "sharpe"])?;
                    for a in &diag.assets {
                        w.write_record([
                            a.asset_id.clone(),
                            a.asset_class.to_string(),
                            a.start.clone(),
                            a.end.clone(),
                            a.months.to_string(),
                            format!("{:.2}", a.mean),
                            a.vol.map(|v| format!("{v:.2}")).unwrap_or_default(),
                            a.sharpe.map(|v| format!("{v:.2}")).unwrap_or_default(),
                        ])?;
                    }
                    let body = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
                    emit(&String::from_utf8_lossy(&body))?;
                    for f in &diag.findings {
                        eprintln!("{}: {}: {}", f.location, f.asset_id, f.message);
                    }
                }
            }
            if diag.findings.is_empty() {
                Ok(())
            } else {
                Err(Error::Panel(format!("{} data problem(s) found", diag.findings.len())))
            }
        }
        Command::Synth {
            spec,
            generator,
            assets,
            months,
            seed,
            out,
        } => {
            let spec: SynthSpec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => {
                    let generator = match generator.as_str() {
                        "iid-gaussian" => Generator::IidGaussian { mean: 0.0, sd: 0.05 },
                        "ar1" => Generator::Ar1 { phi: 0.1, sd: 0.05 },
                        "regime-switching-logit" => Generator::RegimeSwitchingLogit {
                            lookbacks: vec![1],
                            before: vec![0.0, 20.0],
                            after: vec![0.0, -20.0],
                            flip_month: Some(months / 2),
                            abs_sd: 0.05,
                        },
                        other => return Err(Error::config(format!("unknown generator `{other}`"))),
                    };
                    SynthSpec::new(generator, assets, months)
                }
            };
            let (panel, truth) = generate_synthetic(&spec, seed)?;
            fs::create_dir_all(&out)?;
            write_panel(&panel, &out.join("panel.csv"))?;
            let json = serde_json::to_string_pretty(&truth)?;
            fs::write(out.join("truth.json"), json + "\n")?;
            emit(&format!(
                "{} assets, {} months -> {}",
                panel.assets().len(),
                panel.calendar_len(),
                out.display()
            ))
        }
        Command::Report {
            run,
            window,
            gamma,
            expost_target,
        } => {
            let window = window.as_deref().map(parse_window).transpose()?;
            let report = report_from_bundle(&run, window, gamma, expost_target)?;
            match format {
                OutputFormat::Json => emit(&serde_json::to_string_pretty(&report)?),
                OutputFormat::Csv => emit(&single_row_csv(MatrixRow {
                    strategy: run.display().to_string(),
                    row: String::new(),
                    group: String::new(),
                    report,
                })?),
            }
        }
        Command::Features { run, asset, out } => {
            let cfg = run.to_config(cli.jobs)?;
            let panel = load_panel(data_path(&cfg)?, &ColumnMap::default())?;
            let series = panel
                .get(&asset)
                .ok_or_else(|| Error::config(format!("asset `{asset}` is not in the panel")))?;
            let features = AssetFeatures::compute(&series.returns, &cfg.lookbacks, &cfg.ewma);
            write_feature_csv(series, &features, &out)
        }
    }
}
