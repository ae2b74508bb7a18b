//! Command-line front end: trains energy nets, samples from them, estimates
//! likelihoods and runs the diagnostics. Every command is deterministic given
//! its config and seed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mdsm_core::analysis::{
    concentration_stats, default_mode_threshold, denoising_residual_score, mode_coverage, nn_check,
    ood_energy_score, shell_score_error, DEFAULT_OOD_NOISE_DRAWS,
};
use mdsm_core::io::{encode_idx_images, load_checkpoint, load_dataset, save_checkpoint, to_csv, write_file};
use mdsm_core::likelihood::{ais_logz, bits_per_dim, mean_log_density, reverse_ais_logz};
use mdsm_core::sampler::{denoise_jump, inpaint, sample, trace_csv};
use mdsm_core::train::train;
use mdsm_core::{Checkpoint, Config, DataKind, EnergyNet, SampleOutput, ShellSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "mdsm", version, about)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an energy net; writes resolved.toml, loss.csv and checkpoints
    Train,
    /// Annealed Langevin sampling followed by a denoising jump
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of chains
        #[arg(long)]
        n: Option<usize>,
        /// Number of annealing steps
        #[arg(long)]
        steps: Option<usize>,
        /// Also write the per-step energy trace
        #[arg(long)]
        trace: bool,
    },
    /// One denoising jump applied to every row of a CSV file
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Sample the free coordinates with the given ones clamped to the input
    Inpaint {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV rows; one chain per row
        #[arg(long)]
        input: PathBuf,
        /// Clamped coordinate indices, comma separated
        #[arg(long, value_delimiter = ',', required = true)]
        known: Vec<usize>,
    },
    /// Log partition function by AIS, optionally with reverse AIS and bits/dim
    Logz {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out CSV rows: enables reverse AIS and log-likelihood
        #[arg(long)]
        data: Option<PathBuf>,
        /// Data range per model unit for bits/dim (256 for 8-bit pixels)
        #[arg(long, default_value_t = 1.0)]
        domain_scale: f64,
    },
    /// Norm and angle statistics of isotropic Gaussian noise
    Concentration {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Shell half-width for shell_fraction
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
    },
    /// Score error against the ring oracle on shells of varying radius
    ShellError {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 0.3)]
        sigma_eval: f64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Per-mode counts of samples under the ring oracle
    Modes {
        /// CSV samples
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Nearest training rows of each sample
    NnCheck {
        #[arg(long)]
        samples: PathBuf,
        /// CSV dataset; defaults to the configured training data
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Outlier scores: smoothed energy and denoising residual per row
    Ood {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_OOD_NOISE_DRAWS)]
        n_noise: usize,
    },
}

impl Command {
    /// Independent random stream per command; stream 1 draws ring data.
    fn stream(&self) -> u64 {
        match self {
            Command::Train => 0,
            Command::Sample { .. } => 2,
            Command::Denoise { .. } => 3,
            Command::Inpaint { .. } => 4,
            Command::Logz { .. } => 5,
            Command::Concentration { .. } => 6,
            Command::ShellError { .. } => 7,
            Command::Modes { .. } => 8,
            Command::NnCheck { .. } => 9,
            Command::Ood { .. } => 10,
        }
    }
}

struct Run {
    config: Config,
    /// Relative dataset paths resolve against this directory.
    base: PathBuf,
    out: PathBuf,
    /// Metrics are also written to a file only when `--out` was given.
    out_given: bool,
    rng: ChaCha8Rng,
}

impl Run {
    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out_file(name);
        write_file(&path, contents)?;
        Ok(path)
    }

    /// Prints a metrics document and echoes it to `<out>/<name>` when an
    /// output directory was requested.
    fn report(&self, name: &str, value: &serde_json::Value) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        print!("{text}");
        if self.out_given {
            self.write(name, text)?;
        }
        Ok(())
    }
}

fn read_config(cli: &Cli, embedded: Option<&Config>) -> Result<(Config, PathBuf)> {
    let (config, base) = match &cli.config {
        Some(path) => {
            let c = Config::load(path).with_context(|| format!("loading config {}", path.display()))?;
            let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (c, base)
        }
        None => (embedded.cloned().unwrap_or_default(), PathBuf::from(".")),
    };
    let mut config = config;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok((config.resolve().context("resolving config")?, base))
}

fn open_run(cli: &Cli, embedded: Option<&Config>) -> Result<Run> {
    let (config, base) = read_config(cli, embedded)?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(cli.command.stream());
    Ok(Run {
        config,
        base,
        out,
        out_given: cli.out.is_some(),
        rng,
    })
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_csv(path: &Path) -> Result<Tensor> {
    load_dataset(path, DataKind::Csv2d).with_context(|| format!("reading {}", path.display()))
}

fn run_train(cli: &Cli) -> Result<()> {
    let ctx = open_run(cli, None)?;
    let config = &ctx.config;
    let data = config.dataset(&ctx.base).context("loading dataset")?;
    let mut net = EnergyNet::init(config.net_config(data.cols()))?;
    ctx.write("resolved.toml", config.to_toml())?;
    let report = train(&data, &mut net, &config.train_config()?, |step, net| {
        save_checkpoint(net, step, Some(config), &ctx.out_file(&format!("step-{step:06}.ckpt")))
    })
    .context("training")?;
    ctx.write("loss.csv", report.to_csv())?;
    let final_path = ctx.out_file("final.ckpt");
    save_checkpoint(&net, config.train.steps, Some(config), &final_path)?;
    let last = report.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    let tail = report.window_mean(report.history.len(), 100);
    println!(
        "{}",
        json!({
            "steps": config.train.steps,
            "params": net.config().param_count(),
            "final_loss": last,
            "mean_loss_last_100": tail,
            "checkpoint": final_path,
        })
    );
    Ok(())
}

/// Also writes image-domain samples as IDX, clipped to `[0, 1]`, when the
/// training data were square images.
fn export_images(ctx: &Run, name: &str, x: &Tensor) -> Result<()> {
    if ctx.config.data.kind != DataKind::IdxImages {
        return Ok(());
    }
    let side = (x.cols() as f64).sqrt().round() as usize;
    if side * side != x.cols() {
        return Ok(());
    }
    ctx.write(name, encode_idx_images(&x.map(|v| v.clamp(0.0, 1.0)), side, side)?)?;
    Ok(())
}

fn write_sample_output(ctx: &Run, out: &SampleOutput, prefix: &str) -> Result<()> {
    let path = ctx.write(&format!("{prefix}.csv"), to_csv(&out.samples))?;
    ctx.write(&format!("{prefix}_noisy.csv"), to_csv(&out.noisy))?;
    if let Some(trace) = &out.trace {
        ctx.write(&format!("{prefix}_trace.csv"), trace_csv(trace))?;
    }
    export_images(ctx, &format!("{prefix}.idx"), &out.samples)?;
    println!("{}", json!({ "rows": out.samples.rows(), "samples": path }));
    Ok(())
}

fn run_sample(cli: &Cli, checkpoint: &Path, n: Option<usize>, steps: Option<usize>, trace: bool) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let mut ctx = open_run(cli, ck.header.config.as_ref())?;
    if let Some(n) = n {
        ctx.config.sample.n_chains = n;
    }
    if let Some(steps) = steps {
        ctx.config.sample.n_steps = steps;
    }
    let schedule = ctx.config.anneal()?;
    let cfg = ctx.config.sample_config(trace);
    let out = sample(&ck.net, &schedule, &cfg, &mut ctx.rng).context("sampling")?;
    write_sample_output(&ctx, &out, "samples")
}

fn run_denoise(cli: &Cli, checkpoint: &Path, input: &Path) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let ctx = open_run(cli, ck.header.config.as_ref())?;
    let x = read_csv(input)?;
    let y = denoise_jump(&ck.net, &x, ctx.config.noise.sigma0).context("denoising")?;
    let path = ctx.write("denoised.csv", to_csv(&y))?;
    export_images(&ctx, "denoised.idx", &y)?;
    println!("{}", json!({ "rows": y.rows(), "denoised": path }));
    Ok(())
}

fn run_inpaint(cli: &Cli, checkpoint: &Path, input: &Path, known: &[usize]) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let mut ctx = open_run(cli, ck.header.config.as_ref())?;
    let x = read_csv(input)?;
    let mut mask = vec![false; x.cols()];
    for &j in known {
        if j >= mask.len() {
            bail!("known coordinate {j} out of range for {} columns", mask.len());
        }
        mask[j] = true;
    }
    ctx.config.sample.n_chains = x.rows();
    let schedule = ctx.config.anneal()?;
    let cfg = ctx.config.sample_config(false);
    let out = inpaint(&ck.net, &x, &mask, &schedule, &cfg, &mut ctx.rng).context("inpainting")?;
    write_sample_output(&ctx, &out, "inpainted")
}

fn run_logz(cli: &Cli, checkpoint: &Path, data: Option<&Path>, domain_scale: f64) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let mut ctx = open_run(cli, ck.header.config.as_ref())?;
    let ais = ctx.config.ais.clone();
    let forward = ais_logz(&ck.net, &ais, &mut ctx.rng).context("forward AIS")?;
    let mut doc = json!({ "forward": serde_json::from_str::<serde_json::Value>(&forward.to_json())? });
    if let Some(path) = data {
        let x = read_csv(path)?;
        let reverse = reverse_ais_logz(&ck.net, &x, &ais, &mut ctx.rng).context("reverse AIS")?;
        let ll = mean_log_density(&ck.net, &x, forward.log_z)?;
        let ll_rev = mean_log_density(&ck.net, &x, reverse.log_z)?;
        let d = x.cols();
        doc["reverse"] = serde_json::from_str(&reverse.to_json())?;
        // a lower bound on logZ gives an upper bound on log-likelihood, and vice versa
        doc["mean_log_density"] = json!({ "forward": ll, "reverse": ll_rev });
        doc["bits_per_dim"] = json!({
            "forward": bits_per_dim(ll, d, domain_scale)?,
            "reverse": bits_per_dim(ll_rev, d, domain_scale)?,
        });
    }
    ctx.report("logz.json", &doc)
}

fn run_concentration(cli: &Cli, d: usize, sigma: f64, n: usize, epsilon: f64) -> Result<()> {
    let mut ctx = open_run(cli, None)?;
    let stats = concentration_stats(ShellSpec::new(d, sigma, epsilon)?, n, &mut ctx.rng)?;
    ctx.report("concentration.json", &serde_json::to_value(stats)?)
}

fn ring_oracle(ctx: &Run) -> Result<mdsm_core::GmmOracle> {
    if ctx.config.data.kind != DataKind::Ring {
        bail!("this command needs the ring dataset, whose density is known");
    }
    Ok(ctx.config.data.oracle()?)
}

fn run_shell_error(cli: &Cli, checkpoint: &Path, radii: &[f64], sigma_eval: f64, n: usize) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let mut ctx = open_run(cli, ck.header.config.as_ref())?;
    let oracle = ring_oracle(&ctx)?;
    let sigma0 = ctx.config.noise.sigma0;
    let errors = shell_score_error(&ck.net, &oracle, radii, sigma_eval, sigma0, n, &mut ctx.rng)?;
    ctx.report(
        "shell_error.json",
        &json!({ "sigma_eval": sigma_eval, "sigma0": sigma0, "n": n, "shells": errors }),
    )
}

fn run_modes(cli: &Cli, samples: &Path, threshold: Option<f64>) -> Result<()> {
    let ctx = open_run(cli, None)?;
    let oracle = ring_oracle(&ctx)?;
    let x = read_csv(samples)?;
    let threshold = threshold.unwrap_or_else(|| default_mode_threshold(&oracle, ctx.config.noise.sigma0));
    let cov = mode_coverage(&x, &oracle, threshold)?;
    ctx.report("modes.json", &serde_json::to_value(cov)?)
}

fn run_nn_check(cli: &Cli, samples: &Path, data: Option<&Path>, k: usize) -> Result<()> {
    let ctx = open_run(cli, None)?;
    let x = read_csv(samples)?;
    let dataset = match data {
        Some(p) => read_csv(p)?,
        None => ctx.config.dataset(&ctx.base).context("loading dataset")?,
    };
    let nn = nn_check(&x, &dataset, k)?;
    let nearest: Vec<f64> = nn.distances.iter().map(|d| d[0]).collect();
    let min = nearest.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = nearest.iter().sum::<f64>() / nearest.len() as f64;
    ctx.report(
        "nn_check.json",
        &json!({ "k": k, "min_distance": min, "mean_nearest_distance": mean, "neighbors": nn }),
    )
}

fn run_ood(cli: &Cli, checkpoint: &Path, input: &Path, n_noise: usize) -> Result<()> {
    let ck = open_checkpoint(checkpoint)?;
    let mut ctx = open_run(cli, ck.header.config.as_ref())?;
    let x = read_csv(input)?;
    let sigma0 = ctx.config.noise.sigma0;
    let energy = ood_energy_score(&ck.net, &x, sigma0, n_noise, &mut ctx.rng)?;
    let residual = denoising_residual_score(&ck.net, &x, sigma0, n_noise, &mut ctx.rng)?;
    let mut text = String::from("energy_score,residual_score\n");
    for (e, r) in energy.data().iter().zip(residual.data()) {
        text.push_str(&format!("{e:e},{r:e}\n"));
    }
    let path = ctx.write("ood.csv", text)?;
    println!(
        "{}",
        json!({ "rows": x.rows(), "mean_energy_score": energy.mean(), "mean_residual_score": residual.mean(), "scores": path })
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => run_train(cli),
        Command::Sample {
            checkpoint,
            n,
            steps,
            trace,
        } => run_sample(cli, checkpoint, *n, *steps, *trace),
        Command::Denoise { checkpoint, input } => run_denoise(cli, checkpoint, input),
        Command::Inpaint {
            checkpoint,
            input,
            known,
        } => run_inpaint(cli, checkpoint, input, known),
        Command::Logz {
            checkpoint,
            data,
            domain_scale,
        } => run_logz(cli, checkpoint, data.as_deref(), *domain_scale),
        Command::Concentration { d, sigma, n, epsilon } => run_concentration(cli, *d, *sigma, *n, *epsilon),
        Command::ShellError {
            checkpoint,
            radii,
            sigma_eval,
            n,
        } => run_shell_error(cli, checkpoint, radii, *sigma_eval, *n),
        Command::Modes { samples, threshold } => run_modes(cli, samples, *threshold),
        Command::NnCheck { samples, data, k } => run_nn_check(cli, samples, data.as_deref(), *k),
        Command::Ood {
            checkpoint,
            input,
            n_noise,
        } => run_ood(cli, checkpoint, input, *n_noise),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
