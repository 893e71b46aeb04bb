use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chatmpc_core::interpreter::corpus::{load_corpus, BuiltinCorpus};
use chatmpc_core::interpreter::embed::EmbedderConfig;
use chatmpc_core::scenarios::{DrivingCaseId, NavEnvId};
use chatmpc_core::session::log::trajectory_csv;
use chatmpc_core::session::{read_log, run_session, run_trials, SessionConfig, TrajectoryLog, UserConfig};
use chatmpc_core::theory::{
    acceptance_sweep, exp_bound_constants, finite_time_bound, gradient_sweep, interaction_complexity,
    run_convergence_experiment, total_violations, AcceptanceSweepConfig, ConvergenceConfig, ConvergenceReport,
    FeedbackChannel, GradientSweepConfig, UserSpec, ViolationKind,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "chatmpc", version, about = "Prompt-personalized sampling MPC")]
struct Cli {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Session config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    NavA,
    NavB,
    #[value(name = "drive-1")]
    Drive1,
    #[value(name = "drive-2")]
    Drive2,
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusArg {
    Navigation,
    Driving,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum SweepArg {
    Gradient,
    Acceptance,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Run one session; `--out` receives the NDJSON log.
    Run {
        #[arg(long, value_enum)]
        scenario: Option<ScenarioArg>,
        /// Disable the scripted user.
        #[arg(long)]
        no_prompts: bool,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Sequential navigation trials with persistent parameters; `--out` is a directory.
    Trials {
        #[arg(long, value_enum, default_value = "nav-a")]
        scenario: ScenarioArg,
        #[arg(long, default_value_t = 3)]
        count: u32,
    },
    /// Bounds for one setting, or the verification sweeps.
    Theory {
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        eta0: f64,
        #[arg(long, default_value_t = 0.01)]
        eps: f64,
        /// Initial error for the single-setting runs.
        #[arg(long, default_value_t = 3.7)]
        e0: f64,
        #[arg(long, value_enum)]
        sweep: Option<SweepArg>,
    },
    /// Interpret one prompt without touching any session.
    Classify {
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value = "navigation")]
        corpus: CorpusArg,
        /// NDJSON training corpus replacing the built-in one.
        #[arg(long)]
        corpus_file: Option<PathBuf>,
    },
    /// Start the HTTP gateway; `--out` receives the bound address.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Write CSV plot data for logs, or convergence curves when no log is given.
    Plot {
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        eta0: f64,
        #[arg(long, default_value_t = 3.7)]
        e0: f64,
    },
}

enum Failure {
    Usage(String),
    Scenario(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(m)) => {
            eprintln!("{m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Run { scenario, no_prompts, max_steps } => run(cli, *scenario, *no_prompts, *max_steps),
        Command::Trials { scenario, count } => trials(cli, *scenario, *count),
        Command::Theory { gamma, eta0, eps, e0, sweep } => theory(cli, *gamma, *eta0, *eps, *e0, *sweep),
        Command::Classify { text, corpus, corpus_file } => classify(cli, text, *corpus, corpus_file.as_deref()),
        Command::Serve { bind, port } => serve(cli, bind, *port),
        Command::Plot { logs, gamma, eta0, e0 } => plot(cli, logs, *gamma, *eta0, *e0),
    }
}

fn scenario_config(arg: ScenarioArg) -> SessionConfig {
    match arg {
        ScenarioArg::NavA => SessionConfig::navigation(NavEnvId::A),
        ScenarioArg::NavB => SessionConfig::navigation(NavEnvId::B),
        ScenarioArg::Drive1 => SessionConfig::driving(DrivingCaseId::One),
        ScenarioArg::Drive2 => SessionConfig::driving(DrivingCaseId::Two),
    }
}

fn session_config(cli: &Cli, scenario: Option<ScenarioArg>) -> Result<SessionConfig, Failure> {
    let mut cfg = match (&cli.config, scenario) {
        (Some(_), Some(_)) => return Err(Failure::Usage("give either --config or --scenario".into())),
        (Some(path), None) => SessionConfig::load(path)?,
        (None, Some(s)) => scenario_config(s),
        (None, None) => SessionConfig::navigation(NavEnvId::A),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn summarize(log: &TrajectoryLog) -> String {
    let Some(o) = log.outcome() else { return "no outcome".into() };
    let mut s = format!("outcome {:?} after {} steps", o.reason, o.steps);
    for (name, d) in &o.min_distance {
        s.push_str(&format!("; min distance {name} {d:.3}"));
    }
    if let Some(t) = log.diagnostics() {
        s.push_str(&format!("; step {:.2} ± {:.2} ms", t.mean_step_ms, t.std_step_ms));
    }
    for p in log.prompts() {
        s.push_str(&format!("\n  k={} \"{}\" -> {} (conf {:.2}, applied {})", p.k, p.text, p.marker, p.confidence, p.applied));
    }
    s
}

fn run(cli: &Cli, scenario: Option<ScenarioArg>, no_prompts: bool, max_steps: Option<u64>) -> CmdResult {
    let mut cfg = session_config(cli, scenario)?;
    if no_prompts {
        cfg.user = UserConfig::None;
    }
    if let Some(m) = max_steps {
        cfg.max_steps = m;
    }
    if let Some(out) = &cli.out {
        cfg.log = Some(out.clone());
    }
    let log = run_session(&cfg)?;
    println!("{}", summarize(&log));
    match log.outcome() {
        Some(o) if o.is_collision() => Err(Failure::Scenario(format!("collision: {:?}", o.reason))),
        _ => Ok(()),
    }
}

fn trials(cli: &Cli, scenario: ScenarioArg, count: u32) -> CmdResult {
    let cfg = session_config(cli, if cli.config.is_some() { None } else { Some(scenario) })?;
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
    }
    let out = cli.out.clone();
    let logs = run_trials(&cfg, count, |t| out.as_ref().map(|d| d.join(format!("trial-{t}.ndjson"))))?;
    let mut collided = false;
    for (i, log) in logs.iter().enumerate() {
        println!("trial {}: {}", i + 1, summarize(log));
        collided |= log.outcome().is_some_and(|o| o.is_collision());
    }
    if collided {
        return Err(Failure::Scenario("a trial ended in collision".into()));
    }
    Ok(())
}

fn check_line(name: &str, count: usize) -> String {
    format!("{} {name}: {count} violations", if count == 0 { "PASS" } else { "FAIL" })
}

fn write_out(path: &Path, text: &str) -> CmdResult {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn theory(cli: &Cli, gamma: f64, eta0: f64, eps: f64, e0: f64, sweep: Option<SweepArg>) -> CmdResult {
    if !(gamma > 0.0 && gamma < 1.0) || !(eta0 > 0.0) || !(eps > 0.0) {
        return Err(Failure::Usage("need 0 < gamma < 1, eta0 > 0, eps > 0".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let mut failed = 0;
    let mut reports: Vec<ConvergenceReport> = Vec::new();
    match sweep {
        None => {
            let c = exp_bound_constants(gamma, eta0, e0);
            let ft = finite_time_bound(gamma, &[eta0], &[eps]);
            let prompts = interaction_complexity(gamma, &[eta0], &[eps]);
            println!(
                "C={} D={} alpha={} alpha*={} flips={} tau*<={} prompts<={}",
                c.c, c.d, c.alpha, c.alpha_corrected, ft.flips_per_component[0], ft.tau_star_bound, prompts
            );
            let base = |user| ConvergenceConfig {
                gamma,
                eta0: vec![eta0],
                theta0: vec![0.0],
                user,
                max_tau: 300,
                absorb_polls: 50,
                channel: FeedbackChannel::Oracle,
            };
            let grad = run_convergence_experiment(&base(UserSpec::GradientOracle { theta_star: vec![e0] }))?;
            let mut acc_cfg = base(UserSpec::AcceptanceRegion { theta_star: vec![e0], eps: vec![eps] });
            acc_cfg.max_tau = 10_000;
            let acc = run_convergence_experiment(&acc_cfg)?;
            let flips = &grad.flip_times[0];
            println!("gradient oracle from e0={e0}: {} flips, first at tau={:?}", flips.len(), flips.first());
            println!("acceptance region eps={eps}: {} prompts, converged at {:?}", acc.prompts_used, acc.converged_at);
            reports.push(grad);
            reports.push(acc);
        }
        Some(kind) => {
            if kind != SweepArg::Acceptance {
                let cfg = GradientSweepConfig { seed, ..Default::default() };
                let t = std::time::Instant::now();
                let r = gradient_sweep(&cfg)?;
                println!("gradient sweep: {} runs in {:.2?}", r.len(), t.elapsed());
                reports.extend(r);
            }
            if kind != SweepArg::Gradient {
                for q in [1, 3] {
                    let cfg = AcceptanceSweepConfig { seed, q, ..Default::default() };
                    let t = std::time::Instant::now();
                    let r = acceptance_sweep(&cfg)?;
                    println!("acceptance sweep q={q}: {} runs in {:.2?}", r.len(), t.elapsed());
                    reports.extend(r);
                }
            }
        }
    }
    use ViolationKind::*;
    let stated = [Envelope, FlipInterval, FirstFlip, FlipCount, PromptBound, TauStarMax, NotConverged, SilenceBroken];
    for kind in stated {
        let n = total_violations(&reports, kind);
        failed += n;
        println!("{}", check_line(&format!("{kind:?}"), n));
    }
    for kind in [EnvelopeCorrected, FlipErrorBound, InterFlipMonotone, TauStarSum] {
        println!("  supplementary {}", check_line(&format!("{kind:?}"), total_violations(&reports, kind)));
    }
    if let Some(out) = &cli.out {
        let summary: Vec<_> = reports
            .iter()
            .map(|r| {
                serde_json::json!({
                    "config": r.config,
                    "prompts_used": r.prompts_used,
                    "converged_at": r.converged_at,
                    "flip_times": r.flip_times,
                    "components": r.components,
                    "prompt_bound": r.prompt_bound,
                    "violations": r.violations,
                })
            })
            .collect();
        write_out(out, &serde_json::to_string_pretty(&summary)?)?;
    }
    if failed > 0 {
        return Err(Failure::Scenario(format!("{failed} bound violations")));
    }
    Ok(())
}

fn classify(cli: &Cli, text: &str, corpus: CorpusArg, corpus_file: Option<&Path>) -> CmdResult {
    use chatmpc_core::interpreter::update::{EtaState, Theta, UpdateMode};
    use chatmpc_core::interpreter::{Interpreter, InterpreterConfig};
    let (settings, builtin) = match &cli.config {
        Some(p) => {
            let cfg = SessionConfig::load(p)?;
            let b = match cfg.scenario {
                chatmpc_core::session::ScenarioConfig::Navigation(_) => BuiltinCorpus::Navigation,
                chatmpc_core::session::ScenarioConfig::Driving(_) => BuiltinCorpus::Driving,
            };
            (cfg.interpreter, b)
        }
        None => {
            let b = match corpus {
                CorpusArg::Navigation => BuiltinCorpus::Navigation,
                CorpusArg::Driving => BuiltinCorpus::Driving,
            };
            (Default::default(), b)
        }
    };
    let examples = match corpus_file.or(settings.corpus.as_deref()) {
        Some(p) => load_corpus(p)?,
        None => builtin.training(),
    };
    let q = examples.first().map(|e| e.marker.len()).unwrap_or(1);
    let icfg = InterpreterConfig {
        k: settings.k,
        confidence_threshold: settings.confidence_threshold,
        min_similarity: settings.min_similarity,
        mode: settings.mode.unwrap_or(UpdateMode::Additive),
    };
    let embedder: &EmbedderConfig = &settings.embedder;
    let interp = Interpreter::from_config(
        embedder,
        &examples,
        Theta::unbounded(vec![0.0; q]),
        EtaState::new(vec![1.0; q], vec![0.5; q])?,
        icfg.clone(),
    )?;
    let c = interp.classify_text(text)?;
    let applied = c.confidence >= icfg.confidence_threshold && !c.marker.is_zero();
    let out = serde_json::json!({
        "text": text,
        "marker": c.marker,
        "confidence": c.confidence,
        "top_similarity": c.top_similarity,
        "applied": applied,
        "embedder": interp.provider_name(),
    });
    println!("{}", c.marker);
    println!("confidence {:.3}, applied {applied}", c.confidence);
    if let Some(path) = &cli.out {
        write_out(path, &serde_json::to_string_pretty(&out)?)?;
    }
    Ok(())
}

fn serve(cli: &Cli, bind: &str, port: u16) -> CmdResult {
    let addr: std::net::SocketAddr = format!("{bind}:{port}").parse()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        let local = listener.local_addr()?;
        eprintln!("listening on http://{local}");
        if let Some(out) = &cli.out {
            write_out(out, &format!("{local}\n"))?;
        }
        chatmpc_gateway::serve_listener(listener).await?;
        Ok(())
    })
}

fn plot(cli: &Cli, logs: &[PathBuf], gamma: f64, eta0: f64, e0: f64) -> CmdResult {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir)?;
    if logs.is_empty() {
        let cfg = ConvergenceConfig {
            gamma,
            eta0: vec![eta0],
            theta0: vec![0.0],
            user: UserSpec::GradientOracle { theta_star: vec![e0] },
            max_tau: 60,
            absorb_polls: 0,
            channel: FeedbackChannel::Oracle,
        };
        let r = run_convergence_experiment(&cfg)?;
        let b = &r.components[0];
        let mut csv = String::from("tau,abs_error,envelope,envelope_corrected\n");
        for (tau, e) in r.error_history.iter().enumerate() {
            let g = gamma.powf(tau as f64 / b.c as f64);
            csv.push_str(&format!("{tau},{},{},{}\n", e[0], b.alpha * g, b.alpha_corrected * g));
        }
        let path = dir.join("convergence.csv");
        write_out(&path, &csv)?;
        println!("{}", path.display());
        return Ok(());
    }
    for path in logs {
        let log = read_log(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
        let target = dir.join(format!("{stem}.csv"));
        write_out(&target, &trajectory_csv(&log))?;
        println!("{}", target.display());
    }
    Ok(())
}
