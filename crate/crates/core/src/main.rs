use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdn::data::{Dataset, DatasetDescriptor, Split};
use sdn::eval::{self, report, Embedder, EmbedderConfig, RocSuiteConfig};
use sdn::trainer::{load_model, run_training};
use sdn::{workflows, Error, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "sdn", about = "Set Distribution Networks at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file, optionally resuming a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate sets from codes drawn from the prior.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        num_sets: usize,
        #[arg(long, default_value_t = 8)]
        set_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Encode image sets and regenerate them from their codes.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an evaluation suite on the test split and write a CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long)]
        out: PathBuf,
        /// Trained embedder for the roc suite; one is trained and saved next to `out` if absent.
        #[arg(long)]
        embedder: Option<PathBuf>,
        /// Comma-separated contamination fractions for the roc suite.
        #[arg(long, value_delimiter = ',')]
        label_noise: Vec<f64>,
        #[arg(long, default_value_t = 8)]
        n_gen: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dataset utilities.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Render a synthetic sprite dataset as `<out>/<identity>/<view>.png`.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        identities: usize,
        #[arg(long, default_value_t = 24)]
        views: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Consistency,
    Setsize,
    Roc,
    PriorCheck,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, seed } => {
            let mut c = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            let out = run_training(&c, resume.as_deref(), None)?;
            println!("{}", out.final_checkpoint.display());
        }
        Command::Sample { ckpt, num_sets, set_size, out, seed } => {
            let (_, model) = load_model(&ckpt)?;
            for (k, c) in workflows::sample_to_dir(&model, num_sets, set_size, seed, &out)?.iter().enumerate() {
                println!("set_{k:03} {c}");
            }
        }
        Command::Reconstruct { ckpt, input, out, seed } => {
            let (_, model) = load_model(&ckpt)?;
            for (name, c) in workflows::reconstruct_dir(&model, &input, &out, seed)? {
                println!("{name} {c}");
            }
        }
        Command::Eval { ckpt, suite, out, embedder, label_noise, n_gen, seed } => {
            let (config, model) = load_model(&ckpt)?;
            let data = Dataset::build(&DatasetDescriptor::from_config(&config))?;
            if data.test.is_empty() {
                return Err(Error::Eval("the test split is empty".into()));
            }
            let sets = data.fixed_sets(Split::Test, config.set_size)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let text = match suite {
                Suite::Consistency => {
                    let m = eval::code_match_rate(&model, &sets, n_gen, &mut rng)?;
                    println!("mean code_match_rate {:.4}", m.mean);
                    report::consistency_csv(&m, &sets.identity_ids)
                }
                Suite::Setsize => {
                    let ks: Vec<usize> = (0..).map(|p| 1 << p).take_while(|&k| k <= config.set_size).collect();
                    report::setsize_csv(&eval::set_size_consistency(&model, &sets, &ks, n_gen, seed)?)
                }
                Suite::Roc => {
                    let emb = match embedder {
                        Some(p) => Embedder::load(&p)?,
                        None => {
                            let (e, acc) = Embedder::train(&data, &EmbedderConfig { seed, ..EmbedderConfig::default() })?;
                            println!("embedder held-out accuracy {acc:.3}");
                            let p = out.with_extension("embedder.sdn");
                            e.save(&p)?;
                            e
                        }
                    };
                    let cfg = RocSuiteConfig { n_gen, free_sets: sets.num_sets(), seed, label_noise };
                    let curves = eval::roc_suite(&model, &emb, &sets, &cfg)?;
                    let auc = report::auc_csv(&curves);
                    print!("{auc}");
                    write(&out.with_extension("auc.csv"), &auc)?;
                    report::roc_csv(&curves)
                }
                Suite::PriorCheck => {
                    let r = eval::prior_brute_force_check(&model, Some(&sets))?;
                    println!("total prior mass {:.9}", r.total_mass);
                    report::prior_csv(&r)
                }
            };
            write(&out, &text)?;
        }
        Command::Data { command: DataCommand::Synth { out, identities, views, seed, size } } => {
            let d = workflows::synth_to_dir(identities, views, seed, size, &out)?;
            println!("wrote {} identities x {views} views to {}", d.identities.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
