//! k-nearest-neighbor intent classification by cosine similarity.

use serde::{Deserialize, Serialize};

use super::embed::EmbeddingVector;
use super::update::UpdateMarker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub marker: UpdateMarker,
    /// Votes for the winning label divided by `k`.
    pub confidence: f64,
    /// Similarity of the closest corpus item.
    pub top_similarity: f64,
}

/// Majority label among the `k` nearest items; ties go to the larger summed
/// similarity, then to the label whose first voter has the lowest corpus index.
pub fn classify(e: &EmbeddingVector, corpus: &[(EmbeddingVector, UpdateMarker)], k: usize) -> Classification {
    classify_with_floor(e, corpus, k, f64::NEG_INFINITY)
}

/// As [`classify`], but neighbors with similarity below `min_similarity` abstain.
/// With no votes the result is the zero marker at confidence 0.
pub fn classify_with_floor(
    e: &EmbeddingVector,
    corpus: &[(EmbeddingVector, UpdateMarker)],
    k: usize,
    min_similarity: f64,
) -> Classification {
    assert!(!corpus.is_empty(), "classify needs a non-empty corpus");
    assert!(k >= 1, "classify needs k >= 1");
    let mut ranked: Vec<(usize, f64)> = corpus.iter().enumerate().map(|(i, (v, _))| (i, e.dot(v))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let top_similarity = ranked[0].1;

    // (label, votes, summed similarity, first corpus index)
    let mut tally: Vec<(&UpdateMarker, usize, f64, usize)> = Vec::new();
    for &(idx, sim) in ranked.iter().take(k) {
        if sim < min_similarity {
            continue;
        }
        let label = &corpus[idx].1;
        match tally.iter_mut().find(|t| t.0 == label) {
            Some(t) => {
                t.1 += 1;
                t.2 += sim;
                t.3 = t.3.min(idx);
            }
            None => tally.push((label, 1, sim, idx)),
        }
    }
    let best = tally.iter().max_by(|a, b| {
        a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(b.3.cmp(&a.3))
    });
    match best {
        Some(&(label, votes, _, _)) => Classification {
            marker: label.clone(),
            confidence: votes as f64 / k as f64,
            top_similarity,
        },
        None => Classification {
            marker: UpdateMarker::zeros(corpus[0].1.len()),
            confidence: 0.0,
            top_similarity,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interpreter::corpus::BuiltinCorpus;
    use crate::interpreter::embed::{EmbeddingProvider, LexicalEmbedder};

    fn embedded(c: BuiltinCorpus) -> Vec<(EmbeddingVector, UpdateMarker)> {
        c.training().into_iter().map(|ex| (LexicalEmbedder.embed(&ex.text).unwrap(), ex.marker)).collect()
    }

    fn v(raw: &[f64]) -> EmbeddingVector {
        EmbeddingVector::from_raw(raw.to_vec()).unwrap()
    }

    fn m(raw: &[i8]) -> UpdateMarker {
        UpdateMarker::new(raw.to_vec()).unwrap()
    }

    #[test]
    fn self_retrieval_k1() {
        for c in [BuiltinCorpus::Navigation, BuiltinCorpus::Driving] {
            let corpus = embedded(c);
            for (e, marker) in &corpus {
                let out = classify(e, &corpus, 1);
                assert_eq!(&out.marker, marker);
                assert_eq!(out.confidence, 1.0);
            }
        }
    }

    #[test]
    fn corpus_sentences_classify() {
        let nav = embedded(BuiltinCorpus::Navigation);
        let out = classify(&LexicalEmbedder.embed("Too close to the vase.").unwrap(), &nav, 3);
        assert_eq!(out.marker, m(&[-1, 0]));
        let drv = embedded(BuiltinCorpus::Driving);
        let out = classify(&LexicalEmbedder.embed("There is an obstacle right in front!").unwrap(), &drv, 3);
        assert_eq!(out.marker, m(&[0, 1, 0]));
    }

    #[test]
    fn tie_broken_by_summed_similarity() {
        // k=2: one vote each; label B has the closer neighbor
        let corpus = vec![(v(&[0.6, 0.8]), m(&[1])), (v(&[1.0, 0.1]), m(&[-1]))];
        let out = classify(&v(&[1.0, 0.0]), &corpus, 2);
        assert_eq!(out.marker, m(&[-1]));
        assert_eq!(out.confidence, 0.5);
    }

    #[test]
    fn exact_tie_goes_to_lowest_index() {
        let corpus = vec![(v(&[0.0, 1.0]), m(&[1])), (v(&[0.0, -1.0]), m(&[-1]))];
        let out = classify(&v(&[1.0, 0.0]), &corpus, 2);
        assert_eq!(out.marker, m(&[1]));
        let swapped = vec![corpus[1].clone(), corpus[0].clone()];
        assert_eq!(classify(&v(&[1.0, 0.0]), &swapped, 2).marker, m(&[-1]));
    }

    #[test]
    fn k_larger_than_corpus_counts_against_k() {
        let corpus = vec![(v(&[1.0, 0.0]), m(&[1]))];
        let out = classify(&v(&[1.0, 0.0]), &corpus, 3);
        assert_eq!(out.marker, m(&[1]));
        assert!((out.confidence - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn floor_abstention() {
        let corpus = vec![(v(&[1.0, 0.0]), m(&[1, 0])), (v(&[0.0, 1.0]), m(&[0, 1]))];
        let out = classify_with_floor(&v(&[1.0, 1.0]), &corpus, 1, 0.9);
        assert_eq!(out.marker, m(&[0, 0]));
        assert_eq!(out.confidence, 0.0);
    }
}
