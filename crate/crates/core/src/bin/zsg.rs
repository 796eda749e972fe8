use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use offline_zsg::envgen::{collect_dataset, derive_seed, figure1_instance, sample_contexts, uniform_behaviors};
use offline_zsg::exact::{family_value, zsg_optimum};
use offline_zsg::harness::{
    calibrate_for, cell_summaries, decomposition_report, read_metrics_csv, records, run_experiment, slope_fits,
    sweep, write_cells_csv, write_metrics_csv, write_slopes_csv, AsymptoteMode, BehaviorChoice, ClassChoice,
    ContextSampling, ExperimentConfig, FamilySource, GeneratorSpec, LearnerKind, OracleMode, SlProxyMode,
    SweepConfig,
};
use offline_zsg::io::{config_digest, read_env_spec, read_policy, write_datasets, write_env_spec, write_policy, EnvSpec, Provenance};
use offline_zsg::model::{FeatureKind, RewardMode};
use offline_zsg::ppe::LinearPpeConfig;
use offline_zsg::{Error, Result};

#[derive(Parser)]
#[command(name = "zsg", about = "Offline zero-shot generalization experiments on contextual linear MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write an environment spec (JSON) for a random or counterexample family.
    Generate(GenerateArgs),
    /// Collect behavior datasets from an environment spec.
    Collect(CollectArgs),
    /// Run learners and write the metrics CSV.
    Run(RunArgs),
    /// Run a grid over n and K; write metrics, cell summaries and slopes.
    Sweep(SweepArgs),
    /// Decomposition table, cell summaries and slopes from a metrics CSV.
    Report(ReportArgs),
    /// Pick the smallest bonus constant 2^e reaching the target coverage.
    CalibrateBeta(CalibrateArgs),
    /// Exact zero-shot value and suboptimality of a policy file.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    OneHot,
    Explicit,
}

#[derive(Args)]
struct GeneratorArgs {
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long, default_value_t = 2)]
    actions: usize,
    #[arg(long, default_value_t = 2)]
    horizon: usize,
    /// Feature dimension for explicit features.
    #[arg(long, default_value_t = 0)]
    dim: usize,
    #[arg(long, value_enum, default_value = "one-hot")]
    features: FeatureArg,
    #[arg(long, default_value_t = 1.0)]
    dirichlet_alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    reward_spread: f64,
    /// Draw Bernoulli rewards instead of returning the mean.
    #[arg(long)]
    bernoulli: bool,
}

impl GeneratorArgs {
    fn spec(&self, seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            seed,
            num_states: self.states,
            num_actions: self.actions,
            horizon: self.horizon,
            dim: self.dim,
            feature_kind: match self.features {
                FeatureArg::OneHot => FeatureKind::TabularOneHot,
                FeatureArg::Explicit => FeatureKind::Explicit,
            },
            dirichlet_alpha: self.dirichlet_alpha,
            reward_spread: self.reward_spread,
            reward_mode: if self.bernoulli {
                RewardMode::Bernoulli
            } else {
                RewardMode::Deterministic
            },
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    generator: GeneratorArgs,
    /// Number of contexts in the family.
    #[arg(long, default_value_t = 2)]
    contexts: usize,
    /// Emit the two-context counterexample instead of a random family.
    #[arg(long)]
    figure1: bool,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Attach uniform behaviors (the counterexample ships its skewed ones).
    #[arg(long)]
    uniform_behaviors: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long = "K")]
    k: usize,
    /// Ignore behaviors in the spec and act uniformly.
    #[arg(long)]
    uniform_behavior: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Figure1,
    Generator,
    Spec,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Default,
    AllDeterministic,
    SoftmaxGrid,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Load the full experiment config from JSON; other experiment flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "figure1")]
    source: SourceArg,
    /// Environment spec for `--source spec`.
    #[arg(long)]
    env: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[arg(long, default_value_t = 8)]
    population_size: usize,
    /// Keep one generator population across repetitions.
    #[arg(long)]
    fixed_population: bool,
    /// Use the behaviors shipped with the source instead of uniform ones.
    #[arg(long)]
    native_behaviors: bool,
    /// Cycle through the population instead of i.i.d. draws.
    #[arg(long)]
    cycle: bool,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long = "K", default_value_t = 1000)]
    k: usize,
    /// Number of context groups for grouped learners; defaults to n.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "perm,pppo,pevi")]
    learners: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_constant: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, value_enum, default_value = "default")]
    class: ClassArg,
    #[arg(long, default_value_t = 64)]
    class_size: usize,
    #[arg(long, default_value_t = 1 << 16)]
    class_budget: u64,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long, default_value_t = 1 << 20)]
    zsg_budget: u64,
    /// Score PERM with exact Bellman backups and zero uncertainty.
    #[arg(long)]
    exact_oracle: bool,
    /// Use the covering-number form of the SL proxy.
    #[arg(long)]
    covering_sl: bool,
    /// Record measured wall time (makes the CSV nondeterministic).
    #[arg(long)]
    timing: bool,
}

impl ExperimentArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            let cfg: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
            cfg.validate()?;
            return Ok(cfg);
        }
        let source = match self.source {
            SourceArg::Figure1 => FamilySource::Figure1 { epsilon: self.epsilon },
            SourceArg::Generator => FamilySource::Generator {
                generator: self.generator.spec(self.seed),
                population_size: self.population_size,
                fixed_population: self.fixed_population,
            },
            SourceArg::Spec => FamilySource::SpecFile {
                path: self
                    .env
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("--source spec needs --env".into()))?
                    .display()
                    .to_string(),
            },
        };
        let learners = self
            .learners
            .iter()
            .map(|s| LearnerKind::parse(s.trim()))
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = ExperimentConfig::new(source, self.n, self.k, learners);
        cfg.behavior = if self.native_behaviors {
            BehaviorChoice::Native
        } else {
            BehaviorChoice::Uniform
        };
        cfg.sampling = if self.cycle {
            ContextSampling::Cycle
        } else {
            ContextSampling::Iid
        };
        cfg.m = self.m.unwrap_or(self.n);
        cfg.ppe = LinearPpeConfig {
            lambda: self.lambda,
            beta_constant: self.beta_constant,
            delta: self.delta,
        };
        cfg.class = match self.class {
            ClassArg::Default => ClassChoice::Default {
                fallback_size: self.class_size,
            },
            ClassArg::AllDeterministic => ClassChoice::AllDeterministic,
            ClassArg::SoftmaxGrid => ClassChoice::SoftmaxGrid { size: self.class_size },
        };
        cfg.class_budget = self.class_budget;
        cfg.pppo_alpha = self.alpha;
        cfg.seed = self.seed;
        cfg.repetitions = self.reps;
        cfg.zsg_budget = self.zsg_budget;
        cfg.oracle = if self.exact_oracle {
            OracleMode::Exact
        } else {
            OracleMode::Linear
        };
        cfg.sl_proxy = if self.covering_sl {
            SlProxyMode::Covering
        } else {
            SlProxyMode::FiniteClass
        };
        cfg.timing = self.timing;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Metrics CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for one policy file per record plus each repetition's population spec.
    #[arg(long)]
    policy_dir: Option<PathBuf>,
    /// Print the resolved config as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AsymptoteArg {
    MinObserved,
    Zero,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    n_values: Vec<usize>,
    #[arg(long = "K-values", value_delimiter = ',', required = true)]
    k_values: Vec<usize>,
    #[arg(long, value_enum, default_value = "min-observed")]
    asymptote: AsymptoteArg,
    /// Output prefix: writes <prefix>.metrics.csv, <prefix>.cells.csv, <prefix>.slopes.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    slack: f64,
    #[arg(long, value_enum, default_value = "min-observed")]
    asymptote: AsymptoteArg,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    #[arg(long, default_value_t = 3)]
    held_out: usize,
    #[arg(long, default_value_t = 200)]
    redraws: usize,
    #[arg(long, default_value_t = -10, allow_hyphen_values = true)]
    min_exp: i32,
    #[arg(long, default_value_t = 4, allow_hyphen_values = true)]
    max_exp: i32,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 1 << 20)]
    zsg_budget: u64,
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => emit(text),
    }
}

/// Writes to stdout; a closed pipe ends output quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn asymptote(a: AsymptoteArg) -> AsymptoteMode {
    match a {
        AsymptoteArg::MinObserved => AsymptoteMode::MinObserved,
        AsymptoteArg::Zero => AsymptoteMode::Zero,
    }
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let spec = if args.figure1 {
        let f1 = figure1_instance(args.epsilon)?;
        let behaviors = if args.uniform_behaviors {
            uniform_behaviors(&f1.family)
        } else {
            f1.behaviors
        };
        EnvSpec::from_family(&f1.family, Some(&behaviors))
    } else {
        let family = sample_contexts(&args.generator.spec(args.seed).to_generator(), args.contexts)?;
        let behaviors = uniform_behaviors(&family);
        EnvSpec::from_family(&family, args.uniform_behaviors.then_some(&behaviors[..]))
    };
    Ok(fs::write(&args.out, write_env_spec(&spec)?)?)
}

fn collect(args: &CollectArgs) -> Result<()> {
    let spec = read_env_spec(&fs::read_to_string(&args.env)?)?;
    let family = spec.to_family()?;
    let behaviors = match (args.uniform_behavior, spec.to_behaviors()?) {
        (false, Some(b)) => b,
        _ => uniform_behaviors(&family),
    };
    let datasets = family
        .contexts()
        .iter()
        .zip(&behaviors)
        .enumerate()
        .map(|(i, (m, b))| collect_dataset(m, b, args.k, derive_seed(args.seed, 1, i as u64), i))
        .collect::<Result<Vec<_>>>()?;
    Ok(fs::write(&args.out, write_datasets(&datasets))?)
}

fn run(args: &RunArgs) -> Result<()> {
    let cfg = args.experiment.config()?;
    if args.dump_config {
        emit(&format!("{}\n", serde_json::to_string_pretty(&cfg)?))?;
        return Ok(());
    }
    let outcomes = run_experiment(&cfg)?;
    if let Some(dir) = &args.policy_dir {
        fs::create_dir_all(dir)?;
        let digest = config_digest(&cfg)?;
        let per_rep = cfg.learners.len();
        for (i, o) in outcomes.iter().enumerate() {
            let rep = i / per_rep;
            let r = &o.record;
            let prov = Provenance::new(r.learner.name(), r.seed, &digest)
                .with("master_seed", cfg.seed)
                .with("repetition", rep)
                .with("n", r.n)
                .with("K", r.k)
                .with("m", r.m)
                .with("subopt", r.subopt);
            fs::write(dir.join(format!("{}_rep{rep}.policy", r.learner)), write_policy(&o.policy, &prov))?;
            if i % per_rep == 0 {
                let spec = EnvSpec::from_family(&o.population, None);
                fs::write(dir.join(format!("population_rep{rep}.json")), write_env_spec(&spec)?)?;
            }
        }
    }
    write_out(args.out.as_deref(), &write_metrics_csv(&records(&outcomes)))
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let out = sweep(&SweepConfig {
        base: args.experiment.config()?,
        n_values: args.n_values.clone(),
        k_values: args.k_values.clone(),
        asymptote: asymptote(args.asymptote),
    })?;
    let prefix = args.out.display().to_string();
    fs::write(format!("{prefix}.metrics.csv"), write_metrics_csv(&out.records))?;
    fs::write(format!("{prefix}.cells.csv"), write_cells_csv(&out.cells))?;
    fs::write(format!("{prefix}.slopes.csv"), write_slopes_csv(&out.slopes))?;
    emit(&write_slopes_csv(&out.slopes))
}

fn report(args: &ReportArgs) -> Result<()> {
    let recs = read_metrics_csv(&fs::read_to_string(&args.metrics)?)?;
    let cells = cell_summaries(&recs);
    let mut text = decomposition_report(&recs, args.slack).to_table();
    text.push_str(&write_cells_csv(&cells));
    text.push_str(&write_slopes_csv(&slope_fits(&cells, asymptote(args.asymptote))));
    emit(&text)
}

fn calibrate(args: &CalibrateArgs) -> Result<()> {
    let cfg = args.experiment.config()?;
    let rep = calibrate_for(&cfg, args.held_out, args.redraws, args.min_exp..=args.max_exp)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&rep)?))
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let family = read_env_spec(&fs::read_to_string(&args.env)?)?.to_family()?;
    let (policy, _) = read_policy(&fs::read_to_string(&args.policy)?)?;
    if !policy.matches_model(family.first()) {
        return Err(Error::InvalidArgument("policy shape does not match the environment".into()));
    }
    let value = family_value(&family, &policy)?;
    let opt = zsg_optimum(&family, args.zsg_budget as u128, 0);
    let line = serde_json::json!({
        "value": value,
        "optimal_value": opt.value,
        "subopt": opt.value - value,
        "optimum_exact": opt.exact,
    });
    emit(&format!("{line}\n"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Collect(a) => collect(a),
        Command::Run(a) => run(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Report(a) => report(a),
        Command::CalibrateBeta(a) => calibrate(a),
        Command::Evaluate(a) => evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(2)
        }
    }
}
