use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedcc", version, about = "Federated learning attack/defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated seeds; defaults to the config seed
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment once per seed
    Run(Common),
    /// Per-layer cluster distance of the updates in one round
    LayerAnalysis {
        #[command(flatten)]
        common: Common,
        /// Round whose updates are analysed
        #[arg(long, default_value_t = 1)]
        round: usize,
    },
    /// Compare FedCC under each similarity metric
    MetricAblation(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(c) => fedcc::report::cmd_run(&c.config, &c.out, &c.seeds).map(|s| {
            println!("mean final accuracy {:.2}", s.mean_final_accuracy);
            if let Some(conf) = s.mean_final_confidence {
                println!("mean final backdoor confidence {conf:.4}");
            }
        }),
        Command::LayerAnalysis { common: c, round } => {
            fedcc::report::cmd_layer_analysis(&c.config, &c.out, &c.seeds, round).map(|all| {
                for (seed, rows) in all {
                    for r in rows {
                        println!("seed {seed} {} {:.6}", r.layer, r.root_distance);
                    }
                }
            })
        }
        Command::MetricAblation(c) => fedcc::report::cmd_metric_ablation(&c.config, &c.out, &c.seeds).map(|rows| {
            for r in rows {
                println!("{} {:.2}", r.metric, r.mean_final_accuracy);
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
