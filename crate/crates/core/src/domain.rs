//! Label spaces, instances and embeddings shared by every other module.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered set of class names. `index` and `name` are inverse bijections over
/// `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let labels: Vec<String> = labels.into_iter().map(|l| l.as_ref().trim().to_string()).collect();
        if labels.len() < 2 {
            return Err(Error::InvalidLabelSpace(format!(
                "need at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, label) in labels.iter().enumerate() {
            if label.is_empty() {
                return Err(Error::InvalidLabelSpace("empty label name".into()));
            }
            if index.insert(label.clone(), i).is_some() {
                return Err(Error::InvalidLabelSpace(format!("duplicate label `{label}`")));
            }
        }
        Ok(Self { labels, index })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Index of `name` after trimming surrounding whitespace.
    pub fn index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name.trim())
            .copied()
            .ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name.trim())
    }

    /// Panics if `idx` is out of range.
    pub fn name(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Largest attainable entropy (natural log) of a distribution over this space.
    pub fn max_entropy(&self) -> f64 {
        (self.labels.len() as f64).ln()
    }
}

impl TryFrom<Vec<String>> for LabelSpace {
    type Error = Error;

    fn try_from(labels: Vec<String>) -> Result<Self> {
        LabelSpace::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(space: LabelSpace) -> Self {
        space.labels
    }
}

/// One incoming text item. `gold_label` is only known in simulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

impl Instance {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_label: None,
        }
    }

    pub fn with_gold(mut self, label: impl Into<String>) -> Self {
        self.gold_label = Some(label.into());
        self
    }
}

/// A finite, nonzero real vector with its L2 norm cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    norm: f64,
}

impl Embedding {
    /// Validates `values` as given, without rescaling.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DegenerateVector("empty vector".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateVector(format!(
                "non-finite component at position {pos}"
            )));
        }
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateVector("zero norm".into()));
        }
        Ok(Self { values, norm })
    }

    /// Validates `values` and rescales them to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let raw = Self::new(values)?;
        let norm = raw.norm;
        let values: Vec<f64> = raw.values.into_iter().map(|v| v / norm).collect();
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }
}

impl Serialize for Embedding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.values.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Embedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        Embedding::new(values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInstance {
    pub instance: Instance,
    pub embedding: Embedding,
}

impl EmbeddedInstance {
    pub fn id(&self) -> &str {
        &self.instance.id
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - a·b / (|a| |b|)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(cosine_distance_unchecked(a, b))
}

pub(crate) fn cosine_distance_unchecked(a: &Embedding, b: &Embedding) -> f64 {
    let sim = a.dot(b) / (a.norm * b.norm);
    (1.0 - sim).clamp(0.0, 2.0)
}

pub fn label_index(space: &LabelSpace, name: &str) -> Result<usize> {
    space.index(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_distance_reference_points() {
        assert_eq!(cosine_distance(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(cosine_distance(&emb(&[1.0, 0.0]), &emb(&[-1.0, 0.0])).unwrap(), 2.0);
    }

    #[test]
    fn cosine_distance_rejects_bad_inputs() {
        assert!(matches!(
            cosine_distance(&emb(&[1.0, 0.0]), &emb(&[1.0, 0.0, 0.0])),
            Err(Error::Dimension { expected: 2, actual: 3 })
        ));
        assert!(matches!(
            Embedding::new(vec![0.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(
            Embedding::new(vec![1.0, f64::NAN]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn label_lookup() {
        let space = LabelSpace::new(["neg", "pos"]).unwrap();
        assert_eq!(label_index(&space, "pos").unwrap(), 1);
        assert_eq!(label_index(&space, "neg").unwrap(), 0);
        assert_eq!(label_index(&space, " pos ").unwrap(), 1);
        assert!(matches!(label_index(&space, "meh"), Err(Error::UnknownLabel(_))));
    }

    #[test]
    fn label_space_validation() {
        assert!(LabelSpace::new(["only"]).is_err());
        assert!(LabelSpace::new(Vec::<String>::new()).is_err());
        assert!(LabelSpace::new(["a", "a"]).is_err());
        assert!(LabelSpace::new(["a", " "]).is_err());
        let space = LabelSpace::new(["neg", "pos"]).unwrap();
        let json = serde_json::to_string(&space).unwrap();
        assert_eq!(json, r#"["neg","pos"]"#);
        assert_eq!(serde_json::from_str::<LabelSpace>(&json).unwrap(), space);
    }

    #[test]
    fn normalized_has_unit_norm() {
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-15);
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
    }

    fn nonzero_vec(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, dim).prop_filter("nonzero", |v| l2_norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_distance_is_symmetric(pair in (1usize..32).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d)))) {
            let (a, b) = (emb(&pair.0), emb(&pair.1));
            let ab = cosine_distance(&a, &b).unwrap();
            let ba = cosine_distance(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=2.0).contains(&ab));
            prop_assert!(cosine_distance(&a, &a).unwrap() < 1e-12);
        }

        #[test]
        fn index_name_round_trip(n in 2usize..100) {
            let space = LabelSpace::new((0..n).map(|i| format!("class_{i}"))).unwrap();
            for i in 0..n {
                prop_assert_eq!(space.index(space.name(i)).unwrap(), i);
            }
        }
    }
}
