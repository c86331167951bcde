//! Tag vocabulary and thresholded tag sets.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TagVocabulary {
    classes: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagVocabulary {
    pub fn new(classes: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            bail!(Vocabulary, "a vocabulary needs at least 2 classes, got {}", classes.len());
        }
        let mut index = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if c.trim().is_empty() || c.contains(',') {
                bail!(Vocabulary, "tag {c:?} is empty or contains a comma");
            }
            if index.insert(c.clone(), i).is_some() {
                bail!(Vocabulary, "duplicate tag {c:?}");
            }
        }
        Ok(Self { classes, index })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.classes[i]
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn index_of(&self, tag: &str) -> Result<usize> {
        self.index
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown tag {tag:?}")))
    }
}

impl TryFrom<Vec<String>> for TagVocabulary {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<TagVocabulary> for Vec<String> {
    fn from(v: TagVocabulary) -> Self {
        v.classes
    }
}

/// A set of vocabulary indices with per-tag confidence, kept in index order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TagSet {
    indices: Vec<usize>,
    scores: Vec<f32>,
}

impl TagSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Ground-truth style set: every score is 1.
    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = indices.into_iter().collect();
        let n = set.len();
        Self {
            indices: set.into_iter().collect(),
            scores: vec![1.0; n],
        }
    }

    pub fn from_names<S: AsRef<str>>(names: &[S], vocab: &TagVocabulary) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| vocab.index_of(n.as_ref().trim()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_indices(idx))
    }

    /// Parses comma-separated tag text such as `"red, circle"`.
    pub fn parse(text: &str, vocab: &TagVocabulary) -> Result<Self> {
        let names: Vec<&str> = text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        Self::from_names(&names, vocab)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn names<'a>(&self, vocab: &'a TagVocabulary) -> Vec<&'a str> {
        self.indices.iter().map(|&i| vocab.name(i)).collect()
    }

    /// Comma-joined tag text in vocabulary order.
    pub fn to_text(&self, vocab: &TagVocabulary) -> String {
        self.names(vocab).join(", ")
    }

    pub fn check_vocabulary(&self, vocab: &TagVocabulary) -> Result<()> {
        if let Some(&i) = self.indices.iter().find(|&&i| i >= vocab.len()) {
            bail!(Vocabulary, "tag index {i} outside a vocabulary of {}", vocab.len());
        }
        Ok(())
    }

    /// `|A ∩ B| / |A ∪ B|`, defined as 1 for two empty sets.
    pub fn jaccard(&self, other: &TagSet) -> f64 {
        let a: BTreeSet<_> = self.indices.iter().collect();
        let b: BTreeSet<_> = other.indices.iter().collect();
        let union = a.union(&b).count();
        if union == 0 {
            return 1.0;
        }
        a.intersection(&b).count() as f64 / union as f64
    }

    /// Multi-hot vector of length `n`.
    pub fn multi_hot(&self, n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n];
        for &i in &self.indices {
            v[i] = 1.0;
        }
        v
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Keeps every class whose sigmoid probability reaches `threshold`.
pub fn decode_tags(logits: &[f32], vocab: &TagVocabulary, threshold: f64) -> Result<TagSet> {
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!(Argument, "threshold {threshold} outside (0, 1)");
    }
    if logits.len() != vocab.len() {
        bail!(
            Argument,
            "{} logits for a vocabulary of {}",
            logits.len(),
            vocab.len()
        );
    }
    let mut indices = Vec::new();
    let mut scores = Vec::new();
    for (i, &l) in logits.iter().enumerate() {
        if !l.is_finite() {
            bail!(Numeric, "non-finite logit at class {i}");
        }
        let p = sigmoid(l as f64);
        if p >= threshold {
            indices.push(i);
            scores.push(p as f32);
        }
    }
    Ok(TagSet { indices, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(n: usize) -> TagVocabulary {
        TagVocabulary::new((0..n).map(|i| format!("class{i}")).collect()).unwrap()
    }

    #[test]
    fn vocabulary_invariants() {
        assert!(TagVocabulary::new(vec!["a".into()]).is_err());
        assert!(TagVocabulary::new(vec!["a".into(), "a".into()]).is_err());
        let v = vocab(3);
        for i in 0..3 {
            assert_eq!(v.index_of(v.name(i)).unwrap(), i);
        }
        assert!(matches!(v.index_of("nope"), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn saturated_logits() {
        let t = decode_tags(&[10.0, -10.0], &vocab(2), 0.5).unwrap();
        assert_eq!(t.indices(), &[0]);
    }

    #[test]
    fn near_one_threshold_empties_the_set() {
        let t = decode_tags(&[2.0, -1.0, 3.5, 0.0], &vocab(4), 0.999999).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn direct_sigmoid_case() {
        // sigmoid(0.5) = 0.6225 >= 0.6, sigmoid(0) = 0.5 < 0.6
        assert!((sigmoid(0.5) - 0.622459).abs() < 1e-6);
        let t = decode_tags(&[0.0, 0.5], &vocab(2), 0.6).unwrap();
        assert_eq!(t.indices(), &[1]);
        assert!(t.scores().iter().all(|&s| s as f64 >= 0.6));
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(decode_tags(&[0.0, 0.0], &vocab(2), 0.0).is_err());
        assert!(decode_tags(&[0.0, 0.0], &vocab(2), 1.0).is_err());
        assert!(decode_tags(&[0.0], &vocab(2), 0.5).is_err());
    }

    #[test]
    fn text_is_canonical() {
        let v = vocab(3);
        let a = TagSet::parse("class2, class0", &v).unwrap();
        let b = TagSet::parse("class0,class2", &v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(&v), "class0, class2");
        assert!(TagSet::parse("class9", &v).is_err());
    }

    #[test]
    fn jaccard_cases() {
        let a = TagSet::from_indices([0, 1]);
        let b = TagSet::from_indices([1, 2]);
        assert!((a.jaccard(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(TagSet::empty().jaccard(&TagSet::empty()), 1.0);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_tags(
            logits in prop::collection::vec(-8.0f32..8.0, 6),
            t1 in 0.01f64..0.99,
            t2 in 0.01f64..0.99,
        ) {
            let v = vocab(6);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = decode_tags(&logits, &v, lo).unwrap();
            let b = decode_tags(&logits, &v, hi).unwrap();
            prop_assert!(b.indices().iter().all(|i| a.contains(*i)));
        }

        #[test]
        fn sigmoid_is_strictly_inside_unit_interval(x in -30.0f64..30.0) {
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
        }
    }
}
