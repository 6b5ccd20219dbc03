use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use po2q::actquant::GradVariant;
use po2q::fixture::{generate_fixture_with, FixtureConfig};
use po2q::pipeline::{run_ablation, run_baseline, run_quantize, Mode, QuantOutcome, RunConfig, RunPaths, Stage};

#[derive(Parser, Debug)]
#[command(name = "po2q", version, about = "Power-of-two post-training quantization")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the synthetic fixture model and write it with its datasets.
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    Quick,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum VariantArg {
    #[value(name = "paper")]
    Constant,
    Derived,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Float model manifest (JSON).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Weight container; defaults to weights.bin next to the manifest.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Calibration set.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Output path for the quantized model.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Line-delimited JSON report; defaults to the output path with a .jsonl extension.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    wbits: u8,
    #[arg(long, default_value_t = 4)]
    abits: u8,
    #[arg(long, value_enum, default_value_t = ModeArg::Quick)]
    mode: ModeArg,
    /// Weight iterations per unit (the first fifth searches exponents).
    #[arg(long)]
    iters_weight: Option<usize>,
    /// Activation exponent iterations per unit.
    #[arg(long)]
    iters_act: Option<usize>,
    /// Spread of the loss exponent above 1.
    #[arg(long)]
    alpha: Option<f64>,
    /// Shift applied to the mean batch-norm γ.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Labeled evaluation set.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Produce the unoptimized rounded-log model instead.
    #[arg(long, conflicts_with = "ablation")]
    baseline: bool,
    /// Compare naive, scale-group-only and adaptive-P runs on --eval.
    #[arg(long)]
    ablation: bool,
    /// Clipped-branch constants of the activation exponent gradient.
    #[arg(long, value_enum, default_value_t = VariantArg::Constant)]
    grad_variant: VariantArg,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr_u: Option<f32>,
    #[arg(long)]
    lr_v: Option<f32>,
    #[arg(long)]
    lr_act: Option<f32>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    mu: Option<f32>,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        let mode = match self.mode {
            ModeArg::Full => Mode::Full,
            ModeArg::Quick => Mode::Quick,
        };
        let mut cfg = RunConfig::new(mode, self.wbits, self.abits);
        if let Some(n) = self.iters_weight {
            cfg = cfg.with_iters_weight(n);
        }
        if let Some(n) = self.iters_act {
            cfg.iters_act = n;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.beta_shift = b;
        }
        cfg.seed = self.seed;
        cfg.grad_variant = match self.grad_variant {
            VariantArg::Constant => GradVariant::Constant,
            VariantArg::Derived => GradVariant::Derived,
        };
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        if let Some(v) = self.lr_u {
            cfg.lr_u = v;
        }
        if let Some(v) = self.lr_v {
            cfg.lr_v = v;
        }
        if let Some(v) = self.lr_act {
            cfg.lr_act = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        cfg
    }

    fn paths(&self) -> Result<RunPaths, String> {
        let need = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| format!("missing required flag --{flag}"));
        let out = need(&self.out, "out")?;
        Ok(RunPaths {
            model: need(&self.model, "model")?,
            weights: self.weights.clone(),
            calib: need(&self.calib, "calib")?,
            report: self.report.clone().unwrap_or_else(|| out.with_extension("jsonl")),
            out,
            eval: self.eval.clone(),
        })
    }
}

fn print_outcome(o: &QuantOutcome) {
    for u in &o.units {
        let exps: Vec<String> = u.weights.iter().map(|l| format!("{}{:?}", l.layer, l.exponents)).collect();
        println!(
            "unit {} P={:.2} loss {:.4} -> {:.4}  {}",
            u.unit,
            u.p_value,
            u.loss_naive,
            u.loss_weights,
            exps.join(" ")
        );
    }
    println!(
        "equivalence: {} values over {} boundaries, {} mismatches, {} float multiplies",
        o.equivalence.values_compared, o.equivalence.boundaries, o.equivalence.mismatches, o.equivalence.ops.float_mul
    );
    if let (Some(a), Some(f)) = (o.accuracy, o.fp_accuracy) {
        println!("accuracy {:.2}% (float {:.2}%)", 100.0 * a, 100.0 * f);
    }
    println!("method {} finished in {:.1}s", o.method.name(), o.elapsed_secs);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(Command::Fixture { out, seed }) = cli.command {
        return match generate_fixture_with(&FixtureConfig::new(seed)).and_then(|f| {
            f.write(&out)?;
            Ok(f.test_accuracy)
        }) {
            Ok(acc) => {
                println!("fixture written to {} (held-out accuracy {:.2}%)", out.display(), 100.0 * acc);
                ExitCode::SUCCESS
            }
            Err(e) => {
                error!("fixture generation failed: {e}");
                ExitCode::from(Stage::Load.exit_code() as u8)
            }
        };
    }
    let args = cli.run;
    let paths = match args.paths() {
        Ok(p) => p,
        Err(msg) => {
            error!("{msg}");
            return ExitCode::from(Stage::Config.exit_code() as u8);
        }
    };
    let cfg = args.config();
    let result = if args.ablation {
        run_ablation(&cfg, &paths).map(|t| println!("{t}"))
    } else if args.baseline {
        run_baseline(&cfg, &paths).map(|o| print_outcome(&o))
    } else {
        run_quantize(&cfg, &paths).map(|o| print_outcome(&o))
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e} [{}]", e.source.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
