//! Automatic evaluation: style classification of generated lines, novelty
//! metrics, embedding similarity, multi-run aggregation and annotation tooling.

mod annotation;
mod textcnn;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_line, tokenize_line, ArtistId};
use crate::error::{Error, Result};
use crate::ngram::NllMatrix;
use crate::spectro::ArtistEmbeddingMatrix;
use crate::vae::ConditioningMode;

pub use annotation::{cohens_kappa, export_annotation_sheet, AnnotationSheet};
pub use textcnn::{train_style_classifier, StyleTrainReport, TextCnn, TextCnnConfig};

/// Anything that assigns an artist to a line of text.
pub trait StyleClassifier {
    fn classes(&self) -> usize;
    fn predict(&self, text: &str) -> Result<ArtistId>;
}

/// Fraction of `(line, intended artist)` pairs the classifier attributes to the intended artist.
pub fn style_accuracy<C: StyleClassifier + ?Sized>(classifier: &C, generated: &[(String, ArtistId)]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::InvalidInput("no generated lines to classify".into()));
    }
    let mut hits = 0;
    for (text, artist) in generated {
        if artist.0 >= classifier.classes() {
            return Err(Error::InvalidArtist(format!("artist {} of {}", artist.0, classifier.classes())));
        }
        if classifier.predict(text)? == *artist {
            hits += 1;
        }
    }
    Ok(hits as f64 / generated.len() as f64)
}

/// Distinct normalized lines over all lines.
pub fn uniqueness<S: AsRef<str>>(lines: &[S]) -> Result<f64> {
    if lines.is_empty() {
        return Err(Error::InvalidInput("uniqueness of an empty line list".into()));
    }
    let distinct: HashSet<String> = lines.iter().map(|l| normalize_line(l.as_ref())).collect();
    Ok(distinct.len() as f64 / lines.len() as f64)
}

/// Generated lines whose normalized form occurs in the normalized training corpus.
pub fn verbatim_copy_rate<S: AsRef<str>, T: AsRef<str>>(generated: &[S], training: &[T]) -> Result<f64> {
    if generated.is_empty() || training.is_empty() {
        return Err(Error::InvalidInput("verbatim copy rate needs generated and training lines".into()));
    }
    let seen: HashSet<String> = training.iter().map(|l| normalize_line(l.as_ref())).collect();
    let copies = generated.iter().filter(|l| seen.contains(&normalize_line(l.as_ref()))).count();
    Ok(copies as f64 / generated.len() as f64)
}

/// Fraction of generated tokens that belong to `vocabulary`.
pub fn token_purity<S: AsRef<str>>(lines: &[S], vocabulary: &HashSet<String>) -> Result<f64> {
    let mut total = 0;
    let mut inside = 0;
    for line in lines {
        for t in tokenize_line(line.as_ref()) {
            total += 1;
            if vocabulary.contains(&t) {
                inside += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::InvalidInput("no generated tokens".into()));
    }
    Ok(inside as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineTable {
    pub values: Vec<Vec<f64>>,
    /// Most similar pair `(i, j, cosine)` with `i < j`.
    pub top_pair: Option<(usize, usize, f64)>,
}

pub fn embedding_cosine_table(matrix: &ArtistEmbeddingMatrix) -> Result<CosineTable> {
    let k = matrix.artists();
    let rows: Vec<&[f64]> = (0..k).map(|i| matrix.row(ArtistId(i))).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidInput(format!("embedding row {i} has zero norm")));
    }
    let mut values = vec![vec![0.0; k]; k];
    let mut top_pair: Option<(usize, usize, f64)> = None;
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            let c = dot / (norms[i] * norms[j]);
            values[i][j] = c;
            values[j][i] = c;
            if top_pair.is_none_or(|(_, _, best)| c > best) {
                top_pair = Some((i, j, c));
            }
        }
    }
    Ok(CosineTable { values, top_pair })
}

/// Metrics for one conditioning mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub mode: ConditioningMode,
    pub style_accuracy: f64,
    pub nll: NllMatrix,
    /// Mean over runs once aggregated, hence fractional.
    pub diag_argmin_count: f64,
    pub uniqueness: f64,
    pub verbatim_copy_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub artists: Vec<String>,
    pub models: Vec<ModelMetrics>,
    pub classifier_test_accuracy: f64,
    pub classifier_majority_baseline: f64,
    pub cosine: Option<CosineTable>,
    pub seeds: Vec<u64>,
    /// `"single"` for one run, `"mean"` after aggregation.
    pub aggregation: String,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let fractions = self
            .models
            .iter()
            .flat_map(|m| [m.style_accuracy, m.uniqueness, m.verbatim_copy_rate])
            .chain([self.classifier_test_accuracy, self.classifier_majority_baseline]);
        for f in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidInput(format!("fraction {f} outside [0, 1]")));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("report without seeds".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn model(&self, mode: ConditioningMode) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.mode == mode)
    }
}

/// Mean that is exact on constant inputs and stays inside the input range.
fn mean_of(values: &[f64]) -> f64 {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (values.iter().sum::<f64>() / values.len() as f64).clamp(lo, hi)
}

fn mean_matrix(ms: &[&Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let k = ms[0].len();
    (0..k)
        .map(|i| {
            (0..ms[0][i].len())
                .map(|j| mean_of(&ms.iter().map(|m| m[i][j]).collect::<Vec<_>>()))
                .collect()
        })
        .collect()
}

/// Averages scalar metrics and matrices across runs; seeds are concatenated.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidInput("no reports to aggregate".into()))?;
    let modes: Vec<ConditioningMode> = first.models.iter().map(|m| m.mode).collect();
    for r in reports {
        if r.artists != first.artists {
            return Err(Error::SchemaMismatch("reports cover different artists".into()));
        }
        if r.models.iter().map(|m| m.mode).collect::<Vec<_>>() != modes {
            return Err(Error::SchemaMismatch("reports cover different models".into()));
        }
        if r.cosine.is_some() != first.cosine.is_some() {
            return Err(Error::SchemaMismatch("cosine table present in only some reports".into()));
        }
        for (a, b) in r.models.iter().zip(&first.models) {
            if a.nll.names != b.nll.names {
                return Err(Error::SchemaMismatch("NLL matrices disagree on artists".into()));
            }
        }
    }
    if reports.len() == 1 {
        return Ok(first.clone());
    }
    let scalar = |f: &dyn Fn(&EvalReport) -> f64| mean_of(&reports.iter().map(f).collect::<Vec<_>>());
    let mut models = Vec::with_capacity(modes.len());
    for (idx, &mode) in modes.iter().enumerate() {
        let per = |f: &dyn Fn(&ModelMetrics) -> f64| scalar(&|r: &EvalReport| f(&r.models[idx]));
        let mats: Vec<&Vec<Vec<f64>>> = reports.iter().map(|r| &r.models[idx].nll.values).collect();
        models.push(ModelMetrics {
            mode,
            style_accuracy: per(&|m| m.style_accuracy),
            nll: NllMatrix::new(first.models[idx].nll.names.clone(), mean_matrix(&mats))?,
            diag_argmin_count: per(&|m| m.diag_argmin_count),
            uniqueness: per(&|m| m.uniqueness),
            verbatim_copy_rate: per(&|m| m.verbatim_copy_rate),
        });
    }
    let cosine = match &first.cosine {
        Some(_) => {
            let mats: Vec<&Vec<Vec<f64>>> = reports.iter().filter_map(|r| r.cosine.as_ref().map(|c| &c.values)).collect();
            let values = mean_matrix(&mats);
            let mut top_pair: Option<(usize, usize, f64)> = None;
            for i in 0..values.len() {
                for j in i + 1..values.len() {
                    if top_pair.is_none_or(|(_, _, b)| values[i][j] > b) {
                        top_pair = Some((i, j, values[i][j]));
                    }
                }
            }
            Some(CosineTable { values, top_pair })
        }
        None => None,
    };
    Ok(EvalReport {
        artists: first.artists.clone(),
        models,
        classifier_test_accuracy: scalar(&|r| r.classifier_test_accuracy),
        classifier_majority_baseline: scalar(&|r| r.classifier_majority_baseline),
        cosine,
        seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        aggregation: "mean".into(),
    })
}

/// Count of generated lines per intended artist, for reporting.
pub fn lines_per_artist(generated: &[(String, ArtistId)]) -> BTreeMap<ArtistId, usize> {
    let mut out = BTreeMap::new();
    for (_, a) in generated {
        *out.entry(*a).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::nn::seeded;
    use crate::spectro::EmbeddingProvenance;
    use proptest::prelude::*;
    use rand::Rng;

    struct Oracle;
    impl StyleClassifier for Oracle {
        fn classes(&self) -> usize {
            2
        }
        fn predict(&self, text: &str) -> Result<ArtistId> {
            Ok(ArtistId(usize::from(text.starts_with('b'))))
        }
    }

    struct Coin(std::cell::RefCell<crate::nn::SeededRng>, usize);
    impl StyleClassifier for Coin {
        fn classes(&self) -> usize {
            self.1
        }
        fn predict(&self, _: &str) -> Result<ArtistId> {
            Ok(ArtistId(self.0.borrow_mut().random_range(0..self.1)))
        }
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let g = vec![("a x".to_string(), ArtistId(0)), ("b y".to_string(), ArtistId(1))];
        assert_eq!(style_accuracy(&Oracle, &g).unwrap(), 1.0);
        let bad = vec![("a".to_string(), ArtistId(5))];
        assert!(matches!(style_accuracy(&Oracle, &bad), Err(Error::InvalidArtist(_))));
        assert!(style_accuracy(&Oracle, &[]).is_err());
    }

    #[test]
    fn random_classifier_converges_to_chance() {
        for k in [2, 4] {
            let c = Coin(std::cell::RefCell::new(seeded(k as u64)), k);
            let g: Vec<(String, ArtistId)> = (0..10_000).map(|i| (String::new(), ArtistId(i % k))).collect();
            let acc = style_accuracy(&c, &g).unwrap();
            assert!((acc - 1.0 / k as f64).abs() < 0.05, "{k}: {acc}");
        }
    }

    #[test]
    fn uniqueness_examples() {
        assert_eq!(uniqueness(&["a", "b", "c"]).unwrap(), 1.0);
        assert_eq!(uniqueness(&["x y"; 4]).unwrap(), 0.25);
        assert_eq!(uniqueness(&["a b", "a  b", "c"]).unwrap(), 2.0 / 3.0);
        assert!(uniqueness::<&str>(&[]).is_err());
    }

    #[test]
    fn copy_rate_examples() {
        let training: Vec<String> = (0..50).map(|i| format!("train line {i}")).collect();
        let disjoint: Vec<String> = (0..10).map(|i| format!("new line {i}")).collect();
        assert_eq!(verbatim_copy_rate(&disjoint, &training).unwrap(), 0.0);
        assert_eq!(verbatim_copy_rate(&training[..10], &training).unwrap(), 1.0);
        let mut planted: Vec<String> = (0..98).map(|i| format!("fresh words {i}")).collect();
        planted.push("Train LINE 3!".into());
        planted.push(training[7].clone());
        assert_eq!(verbatim_copy_rate(&planted, &training).unwrap(), 0.02);
        assert!(verbatim_copy_rate::<&str, &str>(&[], &["a"]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let m = ArtistEmbeddingMatrix::new(
            Tensor::new(&[3, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap(),
            EmbeddingProvenance::Audio,
        )
        .unwrap();
        let t = embedding_cosine_table(&m).unwrap();
        assert!((t.values[0][1] - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.values[0][2], 0.0);
        assert!(t.values.iter().enumerate().all(|(i, r)| r[i] == 1.0));
        assert_eq!(t.top_pair.map(|p| (p.0, p.1)), Some((0, 1)));
        let zero = ArtistEmbeddingMatrix::new(Tensor::zeros(&[2, 2]), EmbeddingProvenance::Audio).unwrap();
        assert!(embedding_cosine_table(&zero).is_err());
    }

    #[test]
    fn cosine_table_is_symmetric() {
        let m = ArtistEmbeddingMatrix::random(6, 10, &mut seeded(2));
        let t = embedding_cosine_table(&m).unwrap();
        for i in 0..6 {
            assert!((t.values[i][i] - 1.0).abs() < 1e-12);
            for j in 0..6 {
                assert_eq!(t.values[i][j], t.values[j][i]);
            }
        }
    }

    fn report(acc: f64, seed: u64) -> EvalReport {
        let names = vec!["a".to_string(), "b".to_string()];
        EvalReport {
            artists: names.clone(),
            models: vec![ModelMetrics {
                mode: ConditioningMode::AudioFrozen,
                style_accuracy: acc,
                nll: NllMatrix::new(names, vec![vec![10.0 + acc, 12.0], vec![13.0, 11.0]]).unwrap(),
                diag_argmin_count: 2.0,
                uniqueness: 0.99,
                verbatim_copy_rate: 0.01 + acc / 10.0,
            }],
            classifier_test_accuracy: 0.9,
            classifier_majority_baseline: 0.5,
            cosine: None,
            seeds: vec![seed],
            aggregation: "single".into(),
        }
    }

    #[test]
    fn aggregation_examples() {
        let one = report(0.3, 1);
        assert_eq!(aggregate_runs(std::slice::from_ref(&one)).unwrap(), one);
        let agg = aggregate_runs(&[report(0.3, 1), report(0.5, 2)]).unwrap();
        assert!((agg.models[0].style_accuracy - 0.4).abs() < 1e-15);
        assert_eq!(agg.seeds, vec![1, 2]);
        assert!((agg.models[0].nll.values[0][0] - 10.4).abs() < 1e-12);
        let same = aggregate_runs(&vec![report(0.37, 4); 5]).unwrap();
        assert_eq!(same.models, report(0.37, 4).models);
        let mut other = report(0.3, 3);
        other.artists = vec!["x".into(), "y".into()];
        assert!(matches!(aggregate_runs(&[one, other]), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn report_json_round_trip() {
        let r = report(0.25, 9);
        r.validate().unwrap();
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn metrics_ignore_order(lines in prop::collection::vec("[a-c ]{0,6}[a-c]", 1..30), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            let mut shuffled = lines.clone();
            shuffled.shuffle(&mut seeded(seed));
            let u = uniqueness(&lines).unwrap();
            prop_assert!(u > 0.0 && u <= 1.0);
            prop_assert_eq!(u, uniqueness(&shuffled).unwrap());
            let half = &lines[..lines.len().div_ceil(2)];
            let c = verbatim_copy_rate(&lines, half).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(c, verbatim_copy_rate(&shuffled, half).unwrap());
        }

        #[test]
        fn aggregate_stays_in_envelope(accs in prop::collection::vec(0.0f64..1.0, 1..8)) {
            let reports: Vec<EvalReport> = accs.iter().enumerate().map(|(i, &a)| report(a, i as u64)).collect();
            let agg = aggregate_runs(&reports).unwrap();
            let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg.models[0].style_accuracy >= lo && agg.models[0].style_accuracy <= hi);
            prop_assert_eq!(agg.seeds.len(), accs.len());
        }
    }
}
