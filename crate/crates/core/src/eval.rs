//! Objective evaluation: cosine similarity, emotion clustering, character
//! error rate and the pitch proxy read from synthetic mel frames.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::synthetic::bin_to_pitch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `a·b / (‖a‖‖b‖)`.
pub fn speaker_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub n_classes: usize,
    pub n_items: usize,
    /// Mean cosine over distinct same-class pairs.
    pub intra_mean_cosine: f64,
    /// Mean cosine over different-class pairs.
    pub inter_mean_cosine: f64,
    /// Cosine between class centroids, `[class][class]`.
    pub centroid_cosine: Vec<Vec<f64>>,
    /// Nearest-centroid assignments, `[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub nearest_centroid_accuracy: f64,
}

impl ClusterReport {
    pub fn margin(&self) -> f64 {
        self.intra_mean_cosine - self.inter_mean_cosine
    }
}

/// Clustering statistics of labeled embeddings.
pub fn cluster_report(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<ClusterReport> {
    if embeddings.len() != labels.len() {
        return Err(Error::Shape("one label per embedding required".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let present: Vec<usize> = (0..n_classes).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::Report(format!(
            "need at least 2 emotion classes, found {}",
            present.len()
        )));
    }
    let dim = embeddings[0].len();
    let mut intra = (0.0, 0usize);
    let mut inter = (0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let c = speaker_cosine(&embeddings[i], &embeddings[j])?;
            if labels[i] == labels[j] {
                intra = (intra.0 + c, intra.1 + 1);
            } else {
                inter = (inter.0 + c, inter.1 + 1);
            }
        }
    }
    let mut centroids = vec![Array1::<f64>::zeros(dim); n_classes];
    let mut counts = vec![0usize; n_classes];
    for (e, &l) in embeddings.iter().zip(labels) {
        centroids[l] += &Array1::from(e.clone());
        counts[l] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            *c /= n as f64;
        }
    }
    let cos_or_zero =
        |a: &Array1<f64>, b: &Array1<f64>| speaker_cosine(a.as_slice().unwrap(), b.as_slice().unwrap()).unwrap_or(0.0);
    let centroid_cosine = (0..n_classes)
        .map(|a| {
            (0..n_classes)
                .map(|b| cos_or_zero(&centroids[a], &centroids[b]))
                .collect()
        })
        .collect();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    let mut hits = 0;
    for (e, &l) in embeddings.iter().zip(labels) {
        let e = Array1::from(e.clone());
        let pred = present
            .iter()
            .copied()
            .map(|c| (c, cos_or_zero(&e, &centroids[c])))
            .fold((present[0], f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b })
            .0;
        confusion[l][pred] += 1;
        hits += usize::from(pred == l);
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(ClusterReport {
        n_classes: present.len(),
        n_items: embeddings.len(),
        intra_mean_cosine: mean(intra),
        inter_mean_cosine: mean(inter),
        centroid_cosine,
        confusion,
        nearest_centroid_accuracy: hits as f64 / embeddings.len() as f64,
    })
}

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over the reference length.
pub fn character_error_rate(hypothesis: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::InvalidInput("empty reference transcript".into()));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / n as f64)
}

/// Per-frame log-F0 estimate from the first `pitch_bins` mel channels: the
/// centroid of the squared positive parts, mapped back through the bin scale.
/// Frames with no positive energy in those bins are skipped.
pub fn pitch_proxy<F: Scalar>(mel: &Array2<F>, pitch_bins: usize) -> Vec<f64> {
    mel.rows()
        .into_iter()
        .filter_map(|row| {
            let (mut num, mut den) = (0.0, 0.0);
            for (b, v) in row.iter().take(pitch_bins).enumerate() {
                let p = v.as_f64().max(0.0);
                num += b as f64 * p * p;
                den += p * p;
            }
            (den > 0.0).then(|| bin_to_pitch(num / den, pitch_bins))
        })
        .collect()
}

pub fn mean_pitch_proxy<F: Scalar>(mel: &Array2<F>, pitch_bins: usize) -> Option<f64> {
    let p = pitch_proxy(mel, pitch_bins);
    (!p.is_empty()).then(|| p.iter().sum::<f64>() / p.len() as f64)
}

/// Indices sorting `values` ascending.
pub fn rank_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{render_utterance, EmotionModulation, SyntheticCorpusSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        assert!((speaker_cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(speaker_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((speaker_cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(matches!(
            speaker_cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn identical_within_class_clusters_perfectly() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let r = cluster_report(&e, &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.intra_mean_cosine, 1.0);
        assert_eq!(r.inter_mean_cosine, 0.0);
        assert_eq!(r.nearest_centroid_accuracy, 1.0);
        assert!(matches!(cluster_report(&e, &[1, 1, 1, 1]), Err(Error::Report(_))));
    }

    #[test]
    fn random_embeddings_sit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 400;
        let e: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let acc = cluster_report(&e, &labels).unwrap().nearest_centroid_accuracy;
        // Centroids are fit on the same points, which biases accuracy upward a little.
        assert!((0.4..0.65).contains(&acc), "accuracy {acc}");
    }

    #[test]
    fn cer_examples() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(character_error_rate("abc", "abc").unwrap(), 0.0);
        assert_eq!(character_error_rate("", "abcd").unwrap(), 1.0);
        assert!(character_error_rate("a", "").is_err());
    }

    #[test]
    fn proxy_recovers_rendered_pitch_ordering() {
        let spec = SyntheticCorpusSpec::default();
        let phones: Vec<String> = ["a", "p", "o"].iter().map(|s| s.to_string()).collect();
        let mut means = Vec::new();
        for emo in &spec.emotion_set {
            let r = render_utterance(&spec, 0, 0, &phones, emo);
            means.push(mean_pitch_proxy(&r.mel, spec.pitch_bins).unwrap());
        }
        let offsets: Vec<f64> = spec.emotion_set.iter().map(|e| e.pitch_offset).collect();
        assert_eq!(rank_order(&means), rank_order(&offsets));
        let flat = render_utterance(&spec, 0, 0, &phones, &EmotionModulation::neutral());
        let truth = crate::data::broadcast_by_duration(&flat.pitch, &flat.durations);
        let est = pitch_proxy(&flat.mel, spec.pitch_bins);
        for (a, b) in est.iter().zip(&truth) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
            if let Ok(c) = speaker_cosine(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }

        #[test]
        fn edit_distance_is_a_metric(a in "[abc]{0,6}", b in "[abc]{0,6}", c in "[abc]{0,6}") {
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
            prop_assert_eq!(edit_distance(&a, &a), 0);
        }
    }
}
