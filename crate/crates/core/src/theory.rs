//! Convergence bounds of the personalization loop and a harness that runs
//! simulated users against the updater and checks every bound.
//!
//! Loops run in error coordinates `e = theta - theta*`. The updater is
//! translation invariant, so this is the same recursion, but it keeps
//! `|e|` representable far below the spacing of f64 values near `theta*`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::TheoryError;
use crate::interpreter::corpus::BuiltinCorpus;
use crate::interpreter::embed::ClassWeightedEmbedder;
use crate::interpreter::update::{update_additive, EtaState, Theta, UpdateMarker, UpdateMode};
use crate::interpreter::{Interpreter, InterpreterConfig, Prompt};
use crate::users::{render_prompt, split_marker, AcceptanceRegionUser, GradientOracleUser, TemplateBank};

/// Relative slack for comparisons against real-valued bounds.
const REL_TOL: f64 = 1e-12;

/// Indices at which a nonzero marker differs in sign from the previous
/// nonzero marker. Zeros are skipped.
pub fn flip_times(markers: &[i8]) -> Vec<usize> {
    let mut last = 0i8;
    let mut out = Vec::new();
    for (t, &s) in markers.iter().enumerate() {
        if s != 0 {
            if last != 0 && s != last {
                out.push(t);
            }
            last = s;
        }
    }
    out
}

/// `ceil(x)` that treats values within rounding noise of an integer as that integer.
fn robust_ceil(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

fn log_base(x: f64, base: f64) -> f64 {
    x.ln() / base.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpBoundConstants {
    pub c: u64,
    pub d: u64,
    /// `gamma^(D - D/C - 2) * eta0` as stated with the exponential bound.
    pub alpha: f64,
    /// `eta0 * gamma^(-D/C) * max(D, 1/gamma)`, valid for every `D`.
    pub alpha_corrected: f64,
}

pub fn exp_bound_constants(gamma: f64, eta0: f64, e0: f64) -> ExpBoundConstants {
    let c = robust_ceil(1.0 / gamma);
    let d = robust_ceil(e0.abs() / eta0);
    let alpha = gamma.powf(d - d / c - 2.0) * eta0;
    let alpha_corrected = eta0 * gamma.powf(-d / c) * d.max(1.0 / gamma);
    ExpBoundConstants { c: c as u64, d: d as u64, alpha, alpha_corrected }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTimeBound {
    /// `ceil(log_{1/gamma}(eta0_i / (2 eps_i)))`, zero when `eta0_i <= 2 eps_i`.
    pub flips_per_component: Vec<u64>,
    /// `max_i flips_i * ceil(1/gamma)`.
    pub tau_star_bound: u64,
    /// `sum_i flips_i * ceil(1/gamma)`.
    pub tau_star_bound_sum: u64,
    /// The same expression with the logarithm taken to base `gamma`.
    pub tau_star_bound_printed: i64,
}

pub fn finite_time_bound(gamma: f64, eta0: &[f64], eps: &[f64]) -> FiniteTimeBound {
    let c = robust_ceil(1.0 / gamma) as u64;
    let flips: Vec<u64> = eta0
        .iter()
        .zip(eps)
        .map(|(e0, ep)| {
            let ratio = e0 / (2.0 * ep);
            if ratio <= 1.0 {
                0
            } else {
                robust_ceil(log_base(ratio, 1.0 / gamma)) as u64
            }
        })
        .collect();
    let printed = eta0
        .iter()
        .zip(eps)
        .map(|(e0, ep)| robust_ceil(log_base(e0 / (2.0 * ep), gamma)) as i64)
        .max()
        .unwrap_or(0);
    FiniteTimeBound {
        tau_star_bound: flips.iter().copied().max().unwrap_or(0) * c,
        tau_star_bound_sum: flips.iter().sum::<u64>() * c,
        tau_star_bound_printed: printed * c as i64,
        flips_per_component: flips,
    }
}

/// `max_i ceil(log_{1/gamma}(eta0_i / eps_i)) * ceil(1/gamma)`.
pub fn interaction_complexity(gamma: f64, eta0: &[f64], eps: &[f64]) -> u64 {
    let c = robust_ceil(1.0 / gamma) as u64;
    eta0.iter()
        .zip(eps)
        .map(|(e0, ep)| {
            let ratio = e0 / ep;
            if ratio <= 1.0 {
                0
            } else {
                robust_ceil(log_base(ratio, 1.0 / gamma)) as u64
            }
        })
        .max()
        .unwrap_or(0)
        * c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UserSpec {
    GradientOracle { theta_star: Vec<f64> },
    AcceptanceRegion { theta_star: Vec<f64>, eps: Vec<f64> },
}

impl UserSpec {
    pub fn theta_star(&self) -> &[f64] {
        match self {
            Self::GradientOracle { theta_star } | Self::AcceptanceRegion { theta_star, .. } => theta_star,
        }
    }
}

/// How markers reach the updater.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackChannel {
    /// The marker is applied directly.
    #[default]
    Oracle,
    /// Each nonzero component is rendered as a sentence from the navigation
    /// corpus and passed through the interpreter. Needs two components.
    EndToEnd { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub gamma: f64,
    pub eta0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub user: UserSpec,
    pub max_tau: usize,
    /// Extra polls after silence to confirm that silence is absorbing.
    pub absorb_polls: usize,
    pub channel: FeedbackChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// `|e| > alpha gamma^(tau/C)` with the stated `alpha`.
    Envelope,
    /// `|e| > alpha_corrected gamma^(tau/C)`.
    EnvelopeCorrected,
    FlipErrorBound,
    FlipInterval,
    FirstFlip,
    InterFlipMonotone,
    FlipCount,
    PromptBound,
    TauStarMax,
    TauStarSum,
    NotConverged,
    SilenceBroken,
    Misinterpreted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub component: usize,
    pub tau: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentBounds {
    pub c: u64,
    pub d: u64,
    pub alpha: f64,
    pub alpha_corrected: f64,
    /// Smallest `alpha` for which the envelope holds on this run.
    pub alpha_empirical: f64,
    pub flips_bound: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config: ConvergenceConfig,
    /// `|theta_i(tau) - theta*_i|` for every polled `tau`.
    pub error_history: Vec<Vec<f64>>,
    pub flip_times: Vec<Vec<usize>>,
    /// Nonzero feedback events; in end-to-end mode, sentences sent.
    pub prompts_used: usize,
    /// First `tau` at which the user was silent.
    pub converged_at: Option<usize>,
    pub components: Vec<ComponentBounds>,
    pub finite_time: Option<FiniteTimeBound>,
    pub prompt_bound: Option<u64>,
    pub violations: Vec<Violation>,
}

impl ConvergenceReport {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

enum Channel {
    Oracle,
    EndToEnd { interpreter: Box<Interpreter>, bank: TemplateBank, rng: ChaCha8Rng },
}

enum Poll {
    Gradient(GradientOracleUser),
    Acceptance(AcceptanceRegionUser),
}

impl Poll {
    fn feedback(&self, e: &[f64]) -> Result<Option<UpdateMarker>, TheoryError> {
        Ok(match self {
            Self::Gradient(u) => Some(u.marker(e)?),
            Self::Acceptance(u) => u.feedback(e)?,
        })
    }
}

pub fn run_convergence_experiment(config: &ConvergenceConfig) -> Result<ConvergenceReport, TheoryError> {
    let q = config.theta0.len();
    let bad = |m: &str| Err(TheoryError::InvalidConfig(m.to_string()));
    if !(config.gamma > 0.0 && config.gamma < 1.0) {
        return bad("gamma must lie in (0, 1)");
    }
    if config.eta0.len() != q || config.user.theta_star().len() != q || q == 0 {
        return bad("eta0, theta0 and theta* must share one non-zero length");
    }
    let gamma = config.gamma;
    let e0: Vec<f64> = config.theta0.iter().zip(config.user.theta_star()).map(|(t, s)| t - s).collect();
    let zeros = vec![0.0; q];
    let user = match &config.user {
        UserSpec::GradientOracle { .. } => Poll::Gradient(GradientOracleUser::new(zeros, vec![1.0; q])?),
        UserSpec::AcceptanceRegion { eps, .. } => Poll::Acceptance(AcceptanceRegionUser::new(zeros, eps.clone())?),
    };
    let acceptance = matches!(user, Poll::Acceptance(_));

    let mut theta = Theta::unbounded(e0.clone());
    let mut eta = EtaState::new(config.eta0.clone(), vec![gamma; q])?;
    let mut channel = match config.channel {
        FeedbackChannel::Oracle => Channel::Oracle,
        FeedbackChannel::EndToEnd { seed } => {
            if q != 2 {
                return bad("end-to-end feedback uses the two-component navigation corpus");
            }
            let corpus = BuiltinCorpus::Navigation.training();
            let interpreter = Interpreter::new(
                Box::new(ClassWeightedEmbedder::fit(&corpus)),
                &corpus,
                theta.clone(),
                eta.clone(),
                InterpreterConfig { mode: UpdateMode::Additive, ..Default::default() },
            )?;
            Channel::EndToEnd {
                interpreter: Box::new(interpreter),
                bank: TemplateBank::from_examples(&corpus),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }
        }
    };

    let mut violations = Vec::new();
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut markers: Vec<Vec<i8>> = vec![Vec::new(); q];
    let mut prompts_used = 0usize;
    let mut converged_at = None;
    let mut extra_polls = 0usize;
    let mut tau = 0usize;
    loop {
        let abs: Vec<f64> = theta.values.iter().map(|v| v.abs()).collect();
        history.push(abs);
        let fb = user.feedback(&theta.values)?;
        if let Some(c) = converged_at {
            if fb.is_some() {
                violations.push(Violation {
                    kind: ViolationKind::SilenceBroken,
                    component: 0,
                    tau,
                    detail: format!("user spoke again after silence at {c}"),
                });
            }
            if extra_polls == config.absorb_polls {
                break;
            }
            extra_polls += 1;
        }
        match fb {
            None => {
                for m in markers.iter_mut() {
                    m.push(0);
                }
                if converged_at.is_none() {
                    converged_at = Some(tau);
                    if config.absorb_polls == 0 {
                        break;
                    }
                    extra_polls = 1;
                }
            }
            Some(s) => {
                for (i, m) in markers.iter_mut().enumerate() {
                    m.push(s.as_slice()[i]);
                }
                match &mut channel {
                    Channel::Oracle => {
                        if !s.is_zero() {
                            prompts_used += 1;
                        }
                        (theta, eta) = update_additive(&theta, &eta, &s)?;
                    }
                    Channel::EndToEnd { interpreter, bank, rng } => {
                        for unit in split_marker(&s) {
                            let text = render_prompt(&unit, bank, rng)?;
                            let out = interpreter.interpret(&Prompt::new(text.clone(), tau as u64))?;
                            prompts_used += 1;
                            if out.marker != unit || !out.applied {
                                violations.push(Violation {
                                    kind: ViolationKind::Misinterpreted,
                                    component: unit.active().next().map_or(0, |(i, _)| i),
                                    tau,
                                    detail: format!("{text:?} read as {} (wanted {unit})", out.marker),
                                });
                            }
                        }
                        theta = interpreter.theta().clone();
                        eta = interpreter.eta().clone();
                    }
                }
            }
        }
        if converged_at.is_none() && tau >= config.max_tau {
            if acceptance {
                violations.push(Violation {
                    kind: ViolationKind::NotConverged,
                    component: 0,
                    tau,
                    detail: format!("user still not satisfied after {} polls", config.max_tau),
                });
            }
            break;
        }
        tau += 1;
    }

    let flips: Vec<Vec<usize>> = markers.iter().map(|m| flip_times(m)).collect();
    let ftb = match &config.user {
        UserSpec::AcceptanceRegion { eps, .. } => Some(finite_time_bound(gamma, &config.eta0, eps)),
        UserSpec::GradientOracle { .. } => None,
    };
    let prompt_bound = match &config.user {
        UserSpec::AcceptanceRegion { eps, .. } => Some(interaction_complexity(gamma, &config.eta0, eps)),
        UserSpec::GradientOracle { .. } => None,
    };

    let mut components = Vec::with_capacity(q);
    for i in 0..q {
        let k = exp_bound_constants(gamma, config.eta0[i], e0[i]);
        let series: Vec<f64> = history.iter().map(|h| h[i]).collect();
        let ft = &flips[i];
        let c = k.c as f64;
        let mut alpha_empirical = 0.0f64;
        for (t, &err) in series.iter().enumerate().take(config.max_tau + 1) {
            let decay = gamma.powf(t as f64 / c);
            alpha_empirical = alpha_empirical.max(err / decay);
            if !acceptance {
                if err > k.alpha * decay * (1.0 + REL_TOL) {
                    violations.push(Violation {
                        kind: ViolationKind::Envelope,
                        component: i,
                        tau: t,
                        detail: format!("|e|={err:.6e} > alpha*gamma^(tau/C)={:.6e}", k.alpha * decay),
                    });
                }
                if err > k.alpha_corrected * decay * (1.0 + REL_TOL) {
                    violations.push(Violation {
                        kind: ViolationKind::EnvelopeCorrected,
                        component: i,
                        tau: t,
                        detail: format!("|e|={err:.6e} > {:.6e}", k.alpha_corrected * decay),
                    });
                }
            }
        }
        if !acceptance {
            check_flip_structure(i, &series, ft, gamma, config.eta0[i], &k, config.max_tau, &mut violations);
        }
        let flips_bound = ftb.as_ref().map(|b| b.flips_per_component[i]);
        if let Some(fb) = flips_bound {
            if ft.len() as u64 > fb {
                violations.push(Violation {
                    kind: ViolationKind::FlipCount,
                    component: i,
                    tau: ft[fb as usize],
                    detail: format!("{} flips > bound {fb}", ft.len()),
                });
            }
        }
        components.push(ComponentBounds {
            c: k.c,
            d: k.d,
            alpha: k.alpha,
            alpha_corrected: k.alpha_corrected,
            alpha_empirical,
            flips_bound,
        });
    }

    if let (Some(ftb), Some(pb)) = (&ftb, prompt_bound) {
        if prompts_used as u64 > pb {
            violations.push(Violation {
                kind: ViolationKind::PromptBound,
                component: 0,
                tau: converged_at.unwrap_or(tau),
                detail: format!("{prompts_used} prompts > bound {pb}"),
            });
        }
        if let Some(t) = converged_at {
            if t as u64 > ftb.tau_star_bound {
                violations.push(Violation {
                    kind: ViolationKind::TauStarMax,
                    component: 0,
                    tau: t,
                    detail: format!("silent at {t} > max-form bound {}", ftb.tau_star_bound),
                });
            }
            if t as u64 > ftb.tau_star_bound_sum {
                violations.push(Violation {
                    kind: ViolationKind::TauStarSum,
                    component: 0,
                    tau: t,
                    detail: format!("silent at {t} > sum-form bound {}", ftb.tau_star_bound_sum),
                });
            }
        }
    }

    Ok(ConvergenceReport {
        config: config.clone(),
        error_history: history,
        flip_times: flips,
        prompts_used,
        converged_at,
        components,
        finite_time: ftb,
        prompt_bound,
        violations,
    })
}

#[allow(clippy::too_many_arguments)]
fn check_flip_structure(
    i: usize,
    series: &[f64],
    flips: &[usize],
    gamma: f64,
    eta0: f64,
    k: &ExpBoundConstants,
    max_tau: usize,
    out: &mut Vec<Violation>,
) {
    let push = |out: &mut Vec<Violation>, kind, tau, detail: String| {
        out.push(Violation { kind, component: i, tau, detail })
    };
    let e0 = series[0];
    match flips.first() {
        Some(&t1) if t1 as u64 != k.d => {
            push(out, ViolationKind::FirstFlip, t1, format!("first flip at {t1}, expected D={}", k.d))
        }
        None if e0 > 0.0 && (k.d as usize) <= max_tau && series.get(k.d as usize).is_some_and(|e| *e != 0.0) => {
            push(out, ViolationKind::FirstFlip, k.d as usize, "no flip observed".into())
        }
        _ => {}
    }
    for (mu, &t) in flips.iter().enumerate() {
        let bound = gamma.powi(mu as i32) * eta0;
        if series[t] >= bound * (1.0 + REL_TOL) {
            push(out, ViolationKind::FlipErrorBound, t, format!("|e|={:.6e} at flip {} >= {bound:.6e}", series[t], mu + 1));
        }
    }
    for w in flips.windows(2) {
        if (w[1] - w[0]) as u64 > k.c {
            push(out, ViolationKind::FlipInterval, w[1], format!("interval {} > C={}", w[1] - w[0], k.c));
        }
    }
    let mut start = 0usize;
    let bounds: Vec<usize> = flips.iter().copied().chain(std::iter::once(series.len())).collect();
    for &end in &bounds {
        for t in start + 1..end.min(series.len()) {
            if series[t] > series[t - 1] * (1.0 + REL_TOL) {
                push(out, ViolationKind::InterFlipMonotone, t, format!("|e| rose from {:.6e} to {:.6e}", series[t - 1], series[t]));
            }
        }
        start = end;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSweepConfig {
    pub gammas: Vec<f64>,
    pub eta0s: Vec<f64>,
    pub draws: usize,
    pub q: usize,
    /// `theta0` and `theta*` are drawn uniformly from `[-range, range]`.
    pub range: f64,
    pub max_tau: usize,
    pub seed: u64,
}

impl Default for GradientSweepConfig {
    fn default() -> Self {
        Self { gammas: vec![0.3, 0.5, 0.8], eta0s: vec![0.5, 1.0, 2.0], draws: 20, q: 1, range: 5.0, max_tau: 300, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceSweepConfig {
    pub gammas: Vec<f64>,
    pub draws: usize,
    pub q: usize,
    pub eta0: f64,
    pub theta0: f64,
    /// `theta*` is drawn uniformly from `[-range, range]`.
    pub range: f64,
    /// `eps` is drawn log-uniformly from this interval.
    pub eps_range: (f64, f64),
    pub max_tau: usize,
    pub absorb_polls: usize,
    pub seed: u64,
    pub channel: FeedbackChannel,
}

impl Default for AcceptanceSweepConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.3, 0.5, 0.8],
            draws: 100,
            q: 1,
            eta0: 1.0,
            theta0: 0.0,
            range: 5.0,
            eps_range: (1e-3, 0.5),
            max_tau: 10_000,
            absorb_polls: 50,
            seed: 0,
            channel: FeedbackChannel::Oracle,
        }
    }
}

/// Configurations are drawn sequentially from one seeded stream, then run in parallel.
pub fn gradient_sweep(cfg: &GradientSweepConfig) -> Result<Vec<ConvergenceReport>, TheoryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut configs = Vec::new();
    for &gamma in &cfg.gammas {
        for &eta0 in &cfg.eta0s {
            for _ in 0..cfg.draws {
                let theta0: Vec<f64> = (0..cfg.q).map(|_| rng.gen_range(-cfg.range..=cfg.range)).collect();
                let theta_star: Vec<f64> = (0..cfg.q).map(|_| rng.gen_range(-cfg.range..=cfg.range)).collect();
                configs.push(ConvergenceConfig {
                    gamma,
                    eta0: vec![eta0; cfg.q],
                    theta0,
                    user: UserSpec::GradientOracle { theta_star },
                    max_tau: cfg.max_tau,
                    absorb_polls: 0,
                    channel: FeedbackChannel::Oracle,
                });
            }
        }
    }
    configs.par_iter().map(run_convergence_experiment).collect()
}

pub fn acceptance_sweep(cfg: &AcceptanceSweepConfig) -> Result<Vec<ConvergenceReport>, TheoryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = (cfg.eps_range.0.ln(), cfg.eps_range.1.ln());
    let mut configs = Vec::new();
    for (g, &gamma) in cfg.gammas.iter().enumerate() {
        for d in 0..cfg.draws {
            let theta_star: Vec<f64> = (0..cfg.q).map(|_| rng.gen_range(-cfg.range..=cfg.range)).collect();
            let eps: Vec<f64> = (0..cfg.q).map(|_| rng.gen_range(lo..=hi).exp()).collect();
            let channel = match cfg.channel {
                FeedbackChannel::Oracle => FeedbackChannel::Oracle,
                FeedbackChannel::EndToEnd { seed } => {
                    FeedbackChannel::EndToEnd { seed: seed ^ ((g as u64) << 32 | d as u64) }
                }
            };
            configs.push(ConvergenceConfig {
                gamma,
                eta0: vec![cfg.eta0; cfg.q],
                theta0: vec![cfg.theta0; cfg.q],
                user: UserSpec::AcceptanceRegion { theta_star, eps },
                max_tau: cfg.max_tau,
                absorb_polls: cfg.absorb_polls,
                channel,
            });
        }
    }
    configs.par_iter().map(run_convergence_experiment).collect()
}

/// Violations of `kind` summed over reports.
pub fn total_violations(reports: &[ConvergenceReport], kind: ViolationKind) -> usize {
    reports.iter().map(|r| r.count(kind)).sum()
}
