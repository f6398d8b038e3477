use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use instyle_cli::commands::{
    self, EvalArgs, FilterArgs, MatchArgs, StylizeArgs, SweepArgs, TrainArgs, TrainInput,
};
use instyle_cli::config::{style_seed, DataPaths, PipelineConfig};
use instyle_cli::{log, pipeline, CliError};
use instyle_core::matcher::MatchOrder;
use instyle_core::trainer::ScheduleMode;

#[derive(Parser)]
#[command(
    name = "instyle",
    version,
    about = "Style-aware text-to-video retrieval adaptation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Record that the run must be reproducible. All stages already are.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-style data set.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        styles: Option<usize>,
        #[arg(long)]
        queries_per_style: Option<usize>,
        #[arg(long)]
        pool_size: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        content_dim: Option<usize>,
        #[arg(long)]
        style_strength: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        held_out_fraction: Option<f64>,
    },
    /// Assign each query its most similar unclaimed clip.
    Match {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        order: Option<MatchOrder>,
        #[arg(long)]
        shortlist: Option<usize>,
    },
    /// Fit a style transform on pseudo pairs and caption every pool clip.
    Stylize {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        style_out: PathBuf,
        #[arg(long)]
        styled_out: PathBuf,
        #[arg(long)]
        tag: String,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Style index, used to derive the caption noise seed.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Keep styled pairs whose judge similarity exceeds the threshold.
    Filter {
        #[arg(long)]
        styled: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tag: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train adapter heads on one or more generated pair sets.
    Train {
        /// Generated pair files, one per style.
        #[arg(long = "pairs", required = true)]
        pairs: Vec<PathBuf>,
        /// Styled caption files, in the same order as --pairs.
        #[arg(long = "styled", required = true)]
        styled: Vec<PathBuf>,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        schedule: Option<ScheduleMode>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        queue: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Text-to-video retrieval metrics; prints a JSON report.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(
            long,
            conflicts_with = "zero_shot",
            required_unless_present = "zero_shot"
        )]
        adapter: Option<PathBuf>,
        #[arg(long)]
        zero_shot: bool,
        /// Rank only against the ground-truth clips of these queries.
        #[arg(long)]
        restrict_to_truth: bool,
        #[arg(long)]
        ranks_out: Option<PathBuf>,
    },
    /// Run every stage and write a comparison report.
    Pipeline {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use an existing data set directory instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        styles: Option<usize>,
    },
    /// Retained pair counts over a threshold grid; prints JSON.
    Sweep {
        #[arg(long)]
        styled: PathBuf,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.26, 0.27, 0.28, 0.29, 0.30])]
        thresholds: Vec<f64>,
    },
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    );
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.global.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.seed, cli.global.seed);
    cfg.deterministic |= cli.global.deterministic;
    if let Some(threads) = cli.global.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    log(
        "start",
        &[
            ("seed", cfg.seed.to_string()),
            ("threads", rayon::current_num_threads().to_string()),
            ("deterministic", cfg.deterministic.to_string()),
        ],
    );

    match cli.command {
        Command::Synth {
            out,
            styles,
            queries_per_style,
            pool_size,
            dim,
            content_dim,
            style_strength,
            noise,
            held_out_fraction,
        } => {
            let mut synth = cfg.synth_config();
            set(&mut synth.n_styles, styles);
            set(&mut synth.queries_per_style, queries_per_style);
            set(&mut synth.pool_size, pool_size);
            set(&mut synth.dim, dim);
            set(&mut synth.content_dim, content_dim);
            set(&mut synth.style_strength, style_strength);
            set(&mut synth.cross_modal_noise, noise);
            set(&mut synth.held_out_fraction, held_out_fraction);
            commands::synth(&synth, &out)?;
        }
        Command::Match {
            queries,
            pool,
            out,
            order,
            shortlist,
        } => {
            set(&mut cfg.match_order, order);
            set(&mut cfg.shortlist, shortlist);
            cfg.validate()?;
            commands::match_pairs(&MatchArgs {
                queries,
                pool,
                out,
                config: cfg.match_config(),
            })?;
        }
        Command::Stylize {
            pairs,
            queries,
            pool,
            style_out,
            styled_out,
            tag,
            lambda,
            sigma,
            index,
        } => {
            set(&mut cfg.ridge_lambda, lambda);
            set(&mut cfg.noise_sigma, sigma);
            cfg.validate()?;
            commands::stylize(&StylizeArgs {
                pairs,
                queries,
                pool,
                style_out,
                styled_out,
                tag,
                ridge_lambda: cfg.ridge_lambda,
                noise_sigma: cfg.noise_sigma,
                seed: style_seed(cfg.seed, index),
            })?;
        }
        Command::Filter {
            styled,
            pool,
            out,
            tag,
            threshold,
        } => {
            set(&mut cfg.threshold, threshold);
            cfg.validate()?;
            commands::filter(&FilterArgs {
                styled,
                pool,
                out,
                threshold: cfg.threshold,
                tag,
            })?;
        }
        Command::Train {
            pairs,
            styled,
            pool,
            out,
            loss_log,
            schedule,
            batch_size,
            epochs,
            lr,
            momentum,
            queue,
            temperature,
        } => {
            if pairs.len() != styled.len() {
                return Err(CliError::Usage(
                    "--pairs and --styled must be given the same number of times".into(),
                ));
            }
            set(&mut cfg.schedule, schedule);
            set(&mut cfg.batch_size, batch_size);
            set(&mut cfg.epochs, epochs);
            set(&mut cfg.learning_rate, lr);
            set(&mut cfg.momentum, momentum);
            set(&mut cfg.queue_capacity, queue);
            set(&mut cfg.temperature, temperature);
            cfg.validate()?;
            let inputs = pairs
                .into_iter()
                .zip(styled)
                .map(|(pairs, styled)| TrainInput { pairs, styled })
                .collect();
            commands::train(&TrainArgs {
                inputs,
                pool,
                out,
                loss_log,
                temperature: cfg.temperature,
                config: cfg.train_config(cfg.schedule),
            })?;
        }
        Command::Eval {
            queries,
            gallery,
            truth,
            adapter,
            zero_shot: _,
            restrict_to_truth,
            ranks_out,
        } => {
            let report = commands::eval(&EvalArgs {
                queries,
                gallery,
                truth,
                adapter,
                restrict_to_truth,
                ranks_out,
            })?;
            print_json(&report);
        }
        Command::Pipeline { out, data, styles } => {
            set(&mut cfg.out_dir, out);
            set(&mut cfg.synth.n_styles, styles);
            if let Some(dir) = data {
                cfg.data = Some(DataPaths::from_dir(&dir)?);
            }
            let report = pipeline::run(&cfg)?;
            print_json(&report);
        }
        Command::Sweep {
            styled,
            pool,
            thresholds,
        } => {
            let rows = commands::sweep(&SweepArgs {
                styled,
                pool,
                thresholds,
            })?;
            print_json(&rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log(
                "error",
                &[
                    ("kind", e.error_name()),
                    ("message", format!("{:?}", e.to_string())),
                ],
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
