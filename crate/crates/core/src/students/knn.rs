//! Distance-weighted k-NN student.

use crate::cache::{Cache, Neighbor};
use crate::domain::{cosine_distance_unchecked, Embedding, LabelSpace};
use crate::error::{Error, Result};

use super::{EntropyDomain, StudentPrediction};

/// Sum of normalized neighbor weights times neighbor vectors.
pub fn weighted_centroid(neighbors: &[Neighbor<'_>]) -> Result<Vec<f64>> {
    let first = neighbors.first().ok_or(Error::EmptyNeighborhood)?;
    let total: f64 = neighbors.iter().map(|n| n.weight).sum();
    let mut centroid = vec![0.0; first.vector().dim()];
    for n in neighbors {
        let share = n.weight / total;
        for (c, v) in centroid.iter_mut().zip(n.vector().as_slice()) {
            *c += share * v;
        }
    }
    Ok(centroid)
}

/// Softmax of per-class summed neighbor weights. With
/// [`EntropyDomain::Present`] only classes seen among the neighbors take part
/// and every other class gets probability 0.
pub fn knn_class_probs(neighbors: &[Neighbor<'_>], space: &LabelSpace, domain: EntropyDomain) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::EmptyNeighborhood);
    }
    let mut class_weight = vec![0.0; space.len()];
    let mut present = vec![domain == EntropyDomain::All; space.len()];
    for n in neighbors {
        class_weight[n.label()] += n.weight;
        present[n.label()] = true;
    }
    let max = class_weight
        .iter()
        .zip(&present)
        .filter(|(_, &p)| p)
        .map(|(w, _)| *w)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = class_weight
        .iter()
        .zip(&present)
        .map(|(w, &p)| if p { (w - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(probs)
}

/// Cosine distance from `query` to the weighted centroid of `neighbors`.
/// A centroid that cancels to the zero vector is reported at the maximum
/// distance of 2.
pub(crate) fn centroid_distance(query: &Embedding, neighbors: &[Neighbor<'_>]) -> Result<f64> {
    let centroid = weighted_centroid(neighbors)?;
    match Embedding::new(centroid) {
        Ok(c) => Ok(cosine_distance_unchecked(query, &c)),
        Err(Error::DegenerateVector(_)) => Ok(2.0),
        Err(e) => Err(e),
    }
}

pub fn knn_predict(cache: &Cache, query: &Embedding, k: usize, domain: EntropyDomain) -> Result<StudentPrediction> {
    let neighbors = cache.k_nearest(query, k)?;
    let probs = knn_class_probs(&neighbors, cache.labels(), domain)?;
    let centroid_distance = centroid_distance(query, &neighbors)?;
    Ok(StudentPrediction::from_probs(probs, centroid_distance, neighbors.len()))
}
