//! Teacher-labeled instance store with exact cosine k-nearest-neighbor search.
//!
//! The cache doubles as the student's training set, so nothing is ever
//! evicted. Entries whose teacher reply could not be parsed are kept (they
//! were paid for and count toward the call total) but are invisible to
//! queries and training.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{cosine_distance_unchecked, EmbeddedInstance, Embedding, Instance, LabelSpace};
use crate::error::{Error, Result};

/// Smallest distance used when weighting neighbors.
pub const DISTANCE_EPSILON: f64 = 1e-6;

const FORMAT_VERSION: u32 = 1;

/// Neighbor weight `1 / max(d, ε)²`.
pub fn distance_weight(distance: f64) -> f64 {
    let d = distance.max(DISTANCE_EPSILON);
    1.0 / (d * d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub embedded: EmbeddedInstance,
    /// `None` marks an entry whose teacher reply was not a valid label.
    pub teacher_label: Option<usize>,
    pub inserted_at: u64,
}

impl CacheEntry {
    pub fn is_valid(&self) -> bool {
        self.teacher_label.is_some()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Neighbor<'a> {
    pub entry: &'a CacheEntry,
    pub distance: f64,
    pub weight: f64,
}

impl Neighbor<'_> {
    pub fn label(&self) -> usize {
        self.entry.teacher_label.expect("queries only return valid entries")
    }

    pub fn vector(&self) -> &Embedding {
        &self.entry.embedded.embedding
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    labels: LabelSpace,
    dim: Option<usize>,
    entries: Vec<CacheEntry>,
    next_seq: u64,
}

impl Cache {
    pub fn new(labels: LabelSpace) -> Self {
        Self {
            labels,
            dim: None,
            entries: Vec::new(),
            next_seq: 0,
        }
    }

    /// Builds a cache holding `entries` with sequence numbers `0..n`.
    pub fn seed<'a, I>(labels: LabelSpace, entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (EmbeddedInstance, &'a str)>,
    {
        let mut cache = Self::new(labels);
        for (embedded, label) in entries {
            cache.insert(embedded, label)?;
        }
        Ok(cache)
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Total entries, including ones flagged invalid.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn valid_len(&self) -> usize {
        self.entries.iter().filter(|e| e.is_valid()).count()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn valid_entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter().filter(|e| e.is_valid())
    }

    pub fn insert(&mut self, embedded: EmbeddedInstance, teacher_label: &str) -> Result<u64> {
        let label = self.labels.index(teacher_label)?;
        self.insert_indexed(embedded, Some(label))
    }

    /// Stores an entry whose teacher reply could not be mapped to a label.
    pub fn insert_invalid(&mut self, embedded: EmbeddedInstance) -> Result<u64> {
        self.insert_indexed(embedded, None)
    }

    pub(crate) fn insert_indexed(&mut self, embedded: EmbeddedInstance, label: Option<usize>) -> Result<u64> {
        if let Some(l) = label {
            if l >= self.labels.len() {
                return Err(Error::UnknownLabel(format!("#{l}")));
            }
        }
        self.check_dim(embedded.embedding.dim())?;
        self.dim = Some(embedded.embedding.dim());
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push(CacheEntry {
            embedded,
            teacher_label: label,
            inserted_at: seq,
        });
        Ok(seq)
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self.dim {
            Some(expected) if expected != dim => Err(Error::Dimension { expected, actual: dim }),
            _ => Ok(()),
        }
    }

    /// Exact k nearest valid entries by cosine distance, ascending, ties
    /// broken by insertion order.
    pub fn k_nearest(&self, query: &Embedding, k: usize) -> Result<Vec<Neighbor<'_>>> {
        assert!(k >= 1, "k must be positive");
        self.check_dim(query.dim())?;
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_valid())
            .map(|(i, e)| (cosine_distance_unchecked(query, &e.embedded.embedding), i))
            .collect();
        if scored.is_empty() {
            return Err(Error::EmptyCache);
        }
        // Entry position equals insertion order, so comparing positions breaks
        // ties by sequence number.
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        let k = k.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_distance);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_distance);
        Ok(scored
            .into_iter()
            .map(|(distance, i)| Neighbor {
                entry: &self.entries[i],
                distance,
                weight: distance_weight(distance),
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header = Header {
            version: FORMAT_VERSION,
            dim: self.dim,
            labels: self.labels.clone(),
        };
        let write_line = |out: &mut BufWriter<File>, line: String| -> Result<()> {
            out.write_all(line.as_bytes())
                .and_then(|_| out.write_all(b"\n"))
                .map_err(|e| Error::io(path, e))
        };
        write_line(&mut out, serde_json::to_string(&header)?)?;
        for entry in &self.entries {
            let record = Record {
                id: entry.embedded.instance.id.clone(),
                text: entry.embedded.instance.text.clone(),
                label: entry.teacher_label.map(|l| self.labels.name(l).to_string()),
                vector: entry.embedded.embedding.as_slice().to_vec(),
                gold: entry.embedded.instance.gold_label.clone(),
                seq: entry.inserted_at,
                invalid: !entry.is_valid(),
            };
            write_line(&mut out, serde_json::to_string(&record)?)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut lines = reader.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&line).map_err(|e| Error::format(path, 1, e))?
            }
            None => return Err(Error::format(path, 0, "missing header")),
        };
        if header.version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                1,
                format!("unsupported version {}", header.version),
            ));
        }
        let mut cache = Cache::new(header.labels);
        cache.dim = header.dim;
        for (i, line) in lines {
            let line_no = i as u64 + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            let record: Record = serde_json::from_str(&line).map_err(|e| Error::format(path, line_no, e))?;
            let embedding = Embedding::new(record.vector).map_err(|e| Error::format(path, line_no, e))?;
            if header.dim != Some(embedding.dim()) {
                return Err(Error::format(path, line_no, "vector length disagrees with header"));
            }
            if record.seq < cache.next_seq {
                return Err(Error::format(path, line_no, "sequence numbers not increasing"));
            }
            let label = match (&record.label, record.invalid) {
                (_, true) => None,
                (Some(name), false) => Some(cache.labels.index(name).map_err(|e| Error::format(path, line_no, e))?),
                (None, false) => return Err(Error::format(path, line_no, "missing label")),
            };
            cache.entries.push(CacheEntry {
                embedded: EmbeddedInstance {
                    instance: Instance {
                        id: record.id,
                        text: record.text,
                        gold_label: record.gold,
                    },
                    embedding,
                },
                teacher_label: label,
                inserted_at: record.seq,
            });
            cache.next_seq = record.seq + 1;
        }
        Ok(cache)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dim: Option<usize>,
    labels: LabelSpace,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
    label: Option<String>,
    vector: Vec<f64>,
    /// Scoring-only label carried by simulated instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<String>,
    seq: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    invalid: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space() -> LabelSpace {
        LabelSpace::new(["a", "b", "c"]).unwrap()
    }

    fn item(id: &str, v: Vec<f64>) -> EmbeddedInstance {
        EmbeddedInstance {
            instance: Instance::new(id, format!("text {id}")),
            embedding: Embedding::new(v).unwrap(),
        }
    }

    fn random_cache(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Cache {
        let mut cache = Cache::new(space());
        for i in 0..n {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let label = ["a", "b", "c"][rng.random_range(0..3)];
            cache.insert(item(&i.to_string(), v), label).unwrap();
        }
        cache
    }

    #[test]
    fn insert_assigns_sequence_numbers() {
        let mut cache = Cache::new(space());
        assert_eq!(cache.insert(item("x", vec![1.0, 0.0]), "a").unwrap(), 0);
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.insert(item("y", vec![0.0, 1.0]), "b").unwrap(), 1);
        assert!(matches!(
            cache.insert(item("z", vec![1.0, 1.0]), "zz"),
            Err(Error::UnknownLabel(_))
        ));
        assert!(matches!(
            cache.insert(item("w", vec![1.0, 1.0, 1.0]), "a"),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn seed_accepts_duplicates_and_empty() {
        let empty = Cache::seed(space(), Vec::<(EmbeddedInstance, &str)>::new()).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(
            empty.k_nearest(&Embedding::new(vec![1.0]).unwrap(), 1),
            Err(Error::EmptyCache)
        ));
        let dup = Cache::seed(
            space(),
            vec![(item("x", vec![1.0, 0.0]), "a"), (item("x", vec![1.0, 0.0]), "b")],
        )
        .unwrap();
        assert_eq!(dup.len(), 2);
    }

    #[test]
    fn self_retrieval_and_clamped_weight() {
        let mut cache = Cache::new(space());
        cache.insert(item("x", vec![0.3, 0.4]), "a").unwrap();
        cache.insert(item("y", vec![1.0, 0.0]), "b").unwrap();
        let q = Embedding::new(vec![1.0, 0.0]).unwrap();
        let nn = cache.k_nearest(&q, 1).unwrap();
        assert_eq!(nn[0].entry.embedded.instance.id, "y");
        assert_eq!(nn[0].distance, 0.0);
        assert_eq!(nn[0].weight, 1e12);
        assert_eq!(cache.k_nearest(&q, 10).unwrap().len(), 2);
    }

    #[test]
    fn ties_go_to_earlier_entries() {
        let mut cache = Cache::new(space());
        cache.insert(item("first", vec![0.0, 1.0]), "a").unwrap();
        cache.insert(item("second", vec![0.0, 2.0]), "b").unwrap();
        let nn = cache.k_nearest(&Embedding::new(vec![1.0, 1.0]).unwrap(), 1).unwrap();
        assert_eq!(nn[0].entry.embedded.instance.id, "first");
    }

    #[test]
    fn invalid_entries_are_not_neighbors() {
        let mut cache = Cache::new(space());
        cache.insert_invalid(item("bad", vec![1.0, 0.0])).unwrap();
        let q = Embedding::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(cache.k_nearest(&q, 1), Err(Error::EmptyCache)));
        cache.insert(item("ok", vec![0.0, 1.0]), "c").unwrap();
        assert_eq!(cache.k_nearest(&q, 5).unwrap().len(), 1);
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn matches_full_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for round in 0..40 {
            let n = rng.random_range(1..=1000);
            let dim = rng.random_range(2..40);
            let cache = random_cache(&mut rng, n, dim);
            let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = Embedding::new(q).unwrap();
            let k = rng.random_range(1..12);

            // Independent full scan: sort every entry by (distance, seq).
            let mut oracle: Vec<(f64, u64)> = cache
                .entries()
                .iter()
                .map(|e| {
                    let v = e.embedded.embedding.as_slice();
                    let dot: f64 = v.iter().zip(q.as_slice()).map(|(a, b)| a * b).sum();
                    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nq: f64 = q.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
                    ((1.0 - dot / (nv * nq)).clamp(0.0, 2.0), e.inserted_at)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            oracle.truncate(k);

            let got = cache.k_nearest(&q, k).unwrap();
            assert_eq!(got.len(), oracle.len(), "round {round}");
            for (g, o) in got.iter().zip(&oracle) {
                assert_eq!(g.entry.inserted_at, o.1, "round {round}");
                assert!((g.distance - o.0).abs() < 1e-12);
            }
            for w in got.windows(2) {
                assert!(w[0].distance <= w[1].distance);
                assert!(w[0].weight >= w[1].weight);
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cache = random_cache(&mut rng, 231, 16);
        cache.insert_invalid(item("junk", vec![1.0; 16])).unwrap();
        let path = dir.path().join("cache.jsonl");
        cache.save(&path).unwrap();
        let loaded = Cache::load(&path).unwrap();
        assert_eq!(loaded, cache);

        let empty = Cache::new(space());
        let path = dir.path().join("empty.jsonl");
        empty.save(&path).unwrap();
        assert_eq!(Cache::load(&path).unwrap(), empty);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cache = random_cache(&mut rng, 10, 8);
        let path = dir.path().join("cache.jsonl");
        cache.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(Cache::load(&path), Err(Error::Format { .. })));
    }
}
