//! Prompt interpreter: embed, classify into an update marker, then update
//! the controller parameters.

pub mod corpus;
pub mod embed;
pub mod knn;
pub mod update;

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{EmbeddingError, InterpretError};
use corpus::TrainingExample;
use embed::{ClassWeightedEmbedder, EmbedderConfig, EmbeddingProvider, EmbeddingVector, HttpEmbeddingProvider};
use knn::{classify_with_floor, Classification};
use update::{apply_update, EtaState, Theta, UpdateMarker, UpdateMode};

/// A user utterance and when it arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    /// Control step at which the prompt was received.
    pub step: u64,
}

impl Prompt {
    pub fn new(text: impl Into<String>, step: u64) -> Self {
        Self { text: text.into(), step }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpreterConfig {
    pub k: usize,
    /// Minimum vote share for an update to be applied.
    pub confidence_threshold: f64,
    /// Neighbors less similar than this do not vote.
    pub min_similarity: f64,
    pub mode: UpdateMode,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self { k: 3, confidence_threshold: 0.5, min_similarity: 0.2, mode: UpdateMode::Additive }
    }
}

/// One processed prompt, as kept in the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    /// Interaction index of this prompt, counted from zero.
    pub tau: u64,
    pub step: u64,
    pub text: String,
    pub marker: UpdateMarker,
    pub confidence: f64,
    pub top_similarity: f64,
    pub applied: bool,
    pub theta_before: Vec<f64>,
    pub theta_after: Vec<f64>,
    pub eta_after: Vec<f64>,
}

pub struct Interpreter {
    provider: Box<dyn EmbeddingProvider>,
    corpus: Vec<(EmbeddingVector, UpdateMarker)>,
    config: InterpreterConfig,
    theta: Theta,
    eta: EtaState,
    tau: u64,
    audit: Vec<Interpretation>,
}

impl std::fmt::Debug for Interpreter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Interpreter")
            .field("provider", &self.provider.name())
            .field("corpus_len", &self.corpus.len())
            .field("config", &self.config)
            .field("theta", &self.theta)
            .field("eta", &self.eta)
            .field("tau", &self.tau)
            .finish()
    }
}

fn embed_corpus(
    provider: &dyn EmbeddingProvider,
    corpus: &[TrainingExample],
) -> Result<Vec<(EmbeddingVector, UpdateMarker)>, EmbeddingError> {
    corpus.iter().map(|ex| Ok((provider.embed(&ex.text)?, ex.marker.clone()))).collect()
}

impl Interpreter {
    pub fn new(
        provider: Box<dyn EmbeddingProvider>,
        corpus: &[TrainingExample],
        theta: Theta,
        eta: EtaState,
        config: InterpreterConfig,
    ) -> Result<Self, InterpretError> {
        if corpus.is_empty() {
            return Err(InterpretError::EmptyCorpus);
        }
        let q = theta.len();
        if eta.eta.len() != q || corpus[0].marker.len() != q {
            return Err(crate::error::UpdateError::Dimension {
                theta: q,
                eta: eta.eta.len(),
                marker: corpus[0].marker.len(),
            }
            .into());
        }
        let embedded = embed_corpus(provider.as_ref(), corpus)?;
        Ok(Self { provider, corpus: embedded, config, theta, eta, tau: 0, audit: Vec::new() })
    }

    /// Build from an embedder configuration. A service that cannot embed the
    /// corpus is replaced by the lexical embedder when `fallback` is set.
    pub fn from_config(
        embedder: &EmbedderConfig,
        corpus: &[TrainingExample],
        theta: Theta,
        eta: EtaState,
        config: InterpreterConfig,
    ) -> Result<Self, InterpretError> {
        match embedder {
            EmbedderConfig::Lexical => Self::new(Box::new(ClassWeightedEmbedder::fit(corpus)), corpus, theta, eta, config),
            EmbedderConfig::Service { url, timeout_ms, fallback } => {
                let service = HttpEmbeddingProvider::new(url, Duration::from_millis(*timeout_ms))?;
                match Self::new(Box::new(service), corpus, theta.clone(), eta.clone(), config.clone()) {
                    Err(InterpretError::Embedding(_)) if *fallback => {
                        Self::new(Box::new(ClassWeightedEmbedder::fit(corpus)), corpus, theta, eta, config)
                    }
                    other => other,
                }
            }
        }
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn theta(&self) -> &Theta {
        &self.theta
    }

    pub fn eta(&self) -> &EtaState {
        &self.eta
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn config(&self) -> &InterpreterConfig {
        &self.config
    }

    pub fn audit(&self) -> &[Interpretation] {
        &self.audit
    }

    /// Classification only; state is untouched.
    pub fn classify_text(&self, text: &str) -> Result<Classification, InterpretError> {
        if text.trim().is_empty() {
            return Err(InterpretError::EmptyPrompt);
        }
        let e = self.provider.embed(text)?;
        if e.dim() != self.corpus[0].0.dim() {
            return Err(EmbeddingError::BadResponse(format!(
                "dimension {} differs from corpus dimension {}",
                e.dim(),
                self.corpus[0].0.dim()
            ))
            .into());
        }
        Ok(classify_with_floor(&e, &self.corpus, self.config.k, self.config.min_similarity))
    }

    /// Process one prompt. Errors leave the state untouched; a low-confidence
    /// classification is recorded but does not change `theta` or `eta`.
    pub fn interpret(&mut self, prompt: &Prompt) -> Result<Interpretation, InterpretError> {
        let c = self.classify_text(&prompt.text)?;
        let applied = c.confidence >= self.config.confidence_threshold && !c.marker.is_zero();
        let (theta, eta) = if applied {
            apply_update(self.config.mode, &self.theta, &self.eta, &c.marker)?
        } else {
            (self.theta.clone(), self.eta.clone())
        };
        let record = Interpretation {
            tau: self.tau,
            step: prompt.step,
            text: prompt.text.clone(),
            marker: c.marker,
            confidence: c.confidence,
            top_similarity: c.top_similarity,
            applied,
            theta_before: self.theta.values.clone(),
            theta_after: theta.values.clone(),
            eta_after: eta.eta.clone(),
        };
        self.theta = theta;
        self.eta = eta;
        self.tau += 1;
        self.audit.push(record.clone());
        Ok(record)
    }

    /// Apply a marker directly, bypassing the language stage.
    pub fn apply_marker(&mut self, marker: &UpdateMarker) -> Result<(), InterpretError> {
        let (theta, eta) = apply_update(self.config.mode, &self.theta, &self.eta, marker)?;
        self.theta = theta;
        self.eta = eta;
        self.tau += 1;
        Ok(())
    }
}
