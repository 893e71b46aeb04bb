//! Text embedding providers: a deterministic hashed character n-gram
//! embedder, its class-weighted variant, and a client for an external
//! embedding service.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::corpus::TrainingExample;
use super::update::UpdateMarker;
use crate::error::EmbeddingError;

/// Dense, finite, unit-norm vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `raw`; rejects zero, empty and non-finite vectors.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self, EmbeddingError> {
        if raw.is_empty() {
            return Err(EmbeddingError::BadResponse("empty vector".into()));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::BadResponse("non-finite component".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbeddingError::BadResponse("zero vector".into()));
        }
        Ok(Self(raw.into_iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Cosine similarity; both operands are unit norm so this is the dot product.
    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn name(&self) -> &str;
}

pub const LEXICAL_DIM: usize = 2048;

/// Hashed character 3- to 5-gram and word-pair term frequencies over
/// case-folded text.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalEmbedder;

/// Lower-case, replace anything that is not alphanumeric by
/// a space, collapse runs of whitespace and pad with one space on each side.
pub fn normalize_text(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let words: Vec<&str> = mapped.split_whitespace().collect();
    if words.is_empty() {
        return String::new();
    }
    format!(" {} ", words.join(" "))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl LexicalEmbedder {
    pub fn term_frequencies(&self, text: &str) -> Vec<f64> {
        let norm = normalize_text(text);
        let chars: Vec<char> = norm.chars().collect();
        let mut tf = vec![0.0; LEXICAL_DIM];
        let mut add = |feature: &str| tf[(fnv1a(feature.as_bytes()) % LEXICAL_DIM as u64) as usize] += 1.0;
        let mut buf = String::new();
        for n in 3..=5 {
            for window in chars.windows(n) {
                buf.clear();
                buf.extend(window);
                add(&buf);
            }
        }
        // word pairs with sentence boundaries carry the order that character
        // n-grams miss: "<s> front" versus "left front"
        let words: Vec<&str> = std::iter::once("<s>").chain(norm.split_whitespace()).chain(["</s>"]).collect();
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        tf
    }
}

impl EmbeddingProvider for LexicalEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if normalize_text(text).is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        EmbeddingVector::from_raw(self.term_frequencies(text))
    }

    fn name(&self) -> &str {
        "lexical"
    }
}

/// Lexical features scaled by a smoothed inverse class frequency fitted on a
/// labeled corpus, `ln((C + 1) / c_j)` for a feature seen in `c_j` of `C`
/// classes. Wording shared by every class then barely counts, so sentences
/// built from one template with different keywords stop looking alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeightedEmbedder {
    weights: Vec<f64>,
}

impl ClassWeightedEmbedder {
    pub fn fit(corpus: &[TrainingExample]) -> Self {
        let mut labels: Vec<&UpdateMarker> = Vec::new();
        let mut seen: Vec<Vec<bool>> = Vec::new();
        for ex in corpus {
            let c = match labels.iter().position(|m| **m == ex.marker) {
                Some(c) => c,
                None => {
                    labels.push(&ex.marker);
                    seen.push(vec![false; LEXICAL_DIM]);
                    labels.len() - 1
                }
            };
            for (j, tf) in LexicalEmbedder.term_frequencies(&ex.text).iter().enumerate() {
                seen[c][j] |= *tf > 0.0;
            }
        }
        let classes = labels.len() as f64;
        let weights = (0..LEXICAL_DIM)
            .map(|j| {
                // unseen features weigh like single-class ones
                let cf = seen.iter().filter(|s| s[j]).count().max(1) as f64;
                ((classes + 1.0) / cf).ln()
            })
            .collect();
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl EmbeddingProvider for ClassWeightedEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if normalize_text(text).is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let tf = LexicalEmbedder.term_frequencies(text);
        EmbeddingVector::from_raw(tf.iter().zip(&self.weights).map(|(t, w)| t * w).collect())
    }

    fn name(&self) -> &str {
        "lexical-icf"
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

/// Client for a service answering `POST {"text"}` with `{"embedding": [...]}`.
pub struct HttpEmbeddingProvider {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingProvider {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        Ok(Self { url: url.to_string(), client })
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest { text })
            .send()
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(EmbeddingError::Transport(format!("status {}", resp.status())));
        }
        let body: EmbedResponse = resp.json().map_err(|e| EmbeddingError::BadResponse(e.to_string()))?;
        EmbeddingVector::from_raw(body.embedding)
    }

    fn name(&self) -> &str {
        "http"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    #[default]
    Lexical,
    Service {
        url: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        /// Use the lexical embedder if the service cannot embed the corpus.
        #[serde(default)]
        fallback: bool,
    },
}

fn default_timeout_ms() -> u64 {
    2000
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn e(t: &str) -> EmbeddingVector {
        LexicalEmbedder.embed(t).unwrap()
    }

    #[test]
    fn deterministic_and_unit_norm() {
        let a = e("Too close to the vase.");
        assert_eq!(a, e("Too close to the vase."));
        assert_eq!(a.dim(), LEXICAL_DIM);
        assert!((a.dot(&a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case_folding() {
        assert!(e("Too close to the vase.").dot(&e("too close to the vase")) >= 0.99);
    }

    #[test]
    fn similarity_ordering() {
        let q = e("Too close to the vase.");
        assert!(q.dot(&e("obstacle ahead!")) < q.dot(&e("You are too close to the vase")));
    }

    #[test]
    fn empty_text_is_rejected() {
        assert!(matches!(LexicalEmbedder.embed("   "), Err(EmbeddingError::EmptyText)));
        assert!(matches!(LexicalEmbedder.embed("?!"), Err(EmbeddingError::EmptyText)));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Hello,   World! "), " hello world ");
        assert_eq!(normalize_text("!!"), "");
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64-bit test vectors
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn from_raw_rejects_bad_vectors() {
        assert!(EmbeddingVector::from_raw(vec![]).is_err());
        assert!(EmbeddingVector::from_raw(vec![0.0, 0.0]).is_err());
        assert!(EmbeddingVector::from_raw(vec![f64::NAN]).is_err());
        let v = EmbeddingVector::from_raw(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.6, 0.8]);
    }

    /// One-shot HTTP server answering every request with `body`.
    fn serve_once(status: &'static str, body: String) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            let resp = format!(
                "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(resp.as_bytes()).unwrap();
        });
        format!("http://{addr}/embed")
    }

    #[test]
    fn http_provider_normalizes_service_vector() {
        let url = serve_once("200 OK", r#"{"embedding":[3.0,0.0,4.0]}"#.into());
        let p = HttpEmbeddingProvider::new(&url, Duration::from_secs(5)).unwrap();
        assert_eq!(p.embed("hello").unwrap().as_slice(), &[0.6, 0.0, 0.8]);
    }

    #[test]
    fn http_provider_surfaces_errors() {
        let url = serve_once("500 Internal Server Error", "{}".into());
        let p = HttpEmbeddingProvider::new(&url, Duration::from_secs(5)).unwrap();
        assert!(matches!(p.embed("hello"), Err(EmbeddingError::Transport(_))));

        let url = serve_once("200 OK", r#"{"vector":[1.0]}"#.into());
        let p = HttpEmbeddingProvider::new(&url, Duration::from_secs(5)).unwrap();
        assert!(matches!(p.embed("hello"), Err(EmbeddingError::BadResponse(_))));

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let p = HttpEmbeddingProvider::new(&format!("http://{addr}/"), Duration::from_millis(500)).unwrap();
        assert!(matches!(p.embed("hello"), Err(EmbeddingError::Transport(_))));
    }

    #[test]
    fn shared_wording_weighs_less_than_class_keywords() {
        let corpus = crate::interpreter::corpus::BuiltinCorpus::Driving.training();
        let icf = ClassWeightedEmbedder::fit(&corpus);
        let w = |gram: &str| icf.weights()[(fnv1a(gram.as_bytes()) % LEXICAL_DIM as u64) as usize];
        // "left" occurs in one class only, "obsta" in all three
        let (left, shared) = (w("left"), w("obsta"));
        assert!(left > 3.0 * shared, "{left} vs {shared}");
        assert!(icf.weights().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn class_weighting_separates_parallel_templates() {
        let corpus = crate::interpreter::corpus::BuiltinCorpus::Driving.training();
        let icf = ClassWeightedEmbedder::fit(&corpus);
        let sim = |p: &dyn EmbeddingProvider| p.embed("Front is not clear.").unwrap().dot(&p.embed("Left front is not clear.").unwrap());
        assert!(sim(&icf) < 0.5 * sim(&LexicalEmbedder));
    }

    #[test]
    fn word_order_is_visible() {
        assert!(e("front left").dot(&e("left front")) < 1.0 - 1e-6);
    }
}
