//! Embedding index, exact cosine search and mAP evaluation.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DualEncoder;
use crate::perturb::{PairSample, RelationshipLabel};
use crate::query::QueryText;
use crate::storage::{atomic_write, fingerprint, read_bytes};

const INDEX_MAGIC: &[u8; 8] = b"TSDINDX1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub pair_id: String,
    pub label: RelationshipLabel,
    pub vector: Vec<f32>,
}

/// Immutable set of unit-norm pair embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub fingerprint: String,
    pub dim: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub pair_id: String,
    pub label: RelationshipLabel,
    pub score: f64,
}

/// Top-k hits, descending score, ties by ascending pair id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub hits: Vec<Hit>,
    pub k: usize,
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

impl Index {
    /// Assemble from precomputed embeddings (which must be unit norm).
    pub fn from_embeddings(fingerprint: String, entries: Vec<IndexEntry>) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.vector.len());
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "entry {} has width {}, expected {dim}",
                    e.pair_id,
                    e.vector.len()
                )));
            }
            let n = dot(&e.vector, &e.vector).sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::Numeric(format!("entry {} has norm {n}", e.pair_id)));
            }
            if !seen.insert(e.pair_id.as_str()) {
                return Err(Error::Data(format!("duplicate pair id {}", e.pair_id)));
            }
        }
        Ok(Self {
            fingerprint,
            dim,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every entry scored and sorted; the basis of [`search`].
    pub fn rank_all(&self, q: &[f32]) -> Result<Vec<Hit>> {
        if q.len() != self.dim {
            return Err(Error::Shape(format!(
                "query width {} vs index width {}",
                q.len(),
                self.dim
            )));
        }
        let mut hits: Vec<Hit> = self
            .entries
            .iter()
            .map(|e| Hit {
                pair_id: e.pair_id.clone(),
                label: e.label,
                score: dot(&e.vector, q),
            })
            .collect();
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.pair_id.cmp(&b.pair_id))
        });
        Ok(hits)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Header<'a> {
            fingerprint: &'a str,
            dim: usize,
            entries: Vec<(&'a str, RelationshipLabel)>,
        }
        let header = Header {
            fingerprint: &self.fingerprint,
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|e| (e.pair_id.as_str(), e.label))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.entries {
            for v in &e.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            fingerprint: String,
            dim: usize,
            entries: Vec<(String, RelationshipLabel)>,
        }
        if bytes.len() < 12 || &bytes[..8] != INDEX_MAGIC {
            return Err(Error::Format("not an index file".into()));
        }
        let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let h: Header = serde_json::from_slice(
            bytes
                .get(12..12 + hlen)
                .ok_or_else(|| Error::Format("truncated index header".into()))?,
        )?;
        let data = &bytes[12 + hlen..];
        if data.len() != 4 * h.dim * h.entries.len() {
            return Err(Error::Format(
                "index vector block has the wrong size".into(),
            ));
        }
        let entries = h
            .entries
            .into_iter()
            .zip(data.chunks_exact(4 * h.dim.max(1)))
            .map(|((pair_id, label), raw)| IndexEntry {
                pair_id,
                label,
                vector: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            })
            .collect();
        Self::from_embeddings(h.fingerprint, entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?)
    }
}

/// Embed every pair with the full signal tower.
pub fn build_index(model: &DualEncoder<f32>, pairs: &[PairSample]) -> Result<Index> {
    let refs: Vec<&[f64]> = pairs.iter().map(|p| p.reference.values()).collect();
    let tgts: Vec<&[f64]> = pairs.iter().map(|p| p.target.values()).collect();
    let vecs = model.embed_pairs(&refs, &tgts)?;
    let entries = pairs
        .iter()
        .zip(vecs)
        .map(|(p, vector)| IndexEntry {
            pair_id: p.pair_id.clone(),
            label: p.label,
            vector,
        })
        .collect();
    Index::from_embeddings(fingerprint(model), entries)
}

pub fn search(index: &Index, q: &[f32], k: usize) -> Result<RankedResult> {
    if k == 0 || k > index.len() {
        return Err(Error::InvalidInput(format!(
            "k must be in 1..={}, got {k}",
            index.len()
        )));
    }
    let mut hits = index.rank_all(q)?;
    hits.truncate(k);
    Ok(RankedResult { hits, k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Mean precision at each relevant hit.
    #[default]
    Standard,
    /// 11-point interpolated precision.
    Interpolated11,
}

/// Average precision of a ranked relevance list.
pub fn average_precision(relevant: &[bool]) -> Result<f64> {
    average_precision_with(relevant, ApMode::Standard)
}

pub fn average_precision_with(relevant: &[bool], mode: ApMode) -> Result<f64> {
    let r = relevant.iter().filter(|&&x| x).count();
    if r == 0 {
        return Err(Error::InvalidInput(
            "average precision needs at least one relevant item".into(),
        ));
    }
    match mode {
        ApMode::Standard => {
            let mut hits = 0usize;
            let mut sum = 0.0;
            for (i, _) in relevant.iter().enumerate().filter(|(_, &x)| x) {
                hits += 1;
                sum += hits as f64 / (i + 1) as f64;
            }
            Ok(sum / r as f64)
        }
        ApMode::Interpolated11 => {
            let mut points = Vec::with_capacity(relevant.len());
            let mut hits = 0usize;
            for (i, &x) in relevant.iter().enumerate() {
                hits += usize::from(x);
                points.push((hits as f64 / r as f64, hits as f64 / (i + 1) as f64));
            }
            let total: f64 = (0..=10)
                .map(|t| {
                    let level = t as f64 / 10.0;
                    points
                        .iter()
                        .filter(|(rec, _)| *rec >= level - 1e-12)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum();
            Ok(total / 11.0)
        }
    }
}

/// Per-relationship and overall mAP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapScores {
    /// Indexed by `label - 1`.
    pub per_label: Vec<f64>,
    pub overall: f64,
    pub queries: usize,
}

/// mAP from precomputed unit-norm embeddings.
pub fn map_from_embeddings(
    index: &Index,
    queries: &[(RelationshipLabel, Vec<f32>)],
    mode: ApMode,
) -> Result<MapScores> {
    let mut missing = Vec::new();
    for l in RelationshipLabel::all() {
        if !queries.iter().any(|(q, _)| *q == l) || !index.entries.iter().any(|e| e.label == l) {
            missing.push(l.value());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "relationships {missing:?} lack a query or a positive pair"
        )));
    }
    let aps = crate::par::map_slice(queries, |(label, v)| {
        let ranked = index.rank_all(v)?;
        let rel: Vec<bool> = ranked.iter().map(|h| h.label == *label).collect();
        average_precision_with(&rel, mode).map(|ap| (*label, ap))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut sums = [(0.0, 0usize); 12];
    for (l, ap) in &aps {
        sums[l.index()].0 += ap;
        sums[l.index()].1 += 1;
    }
    Ok(MapScores {
        per_label: sums.iter().map(|(s, n)| s / *n as f64).collect(),
        overall: aps.iter().map(|(_, ap)| ap).sum::<f64>() / aps.len() as f64,
        queries: aps.len(),
    })
}

/// Rank all test pairs for every test query and average the APs.
pub fn evaluate_map(
    model: &DualEncoder<f32>,
    queries: &[QueryText],
    pairs: &[PairSample],
    mode: ApMode,
) -> Result<MapScores> {
    let index = build_index(model, pairs)?;
    let texts: Vec<&str> = queries.iter().map(|q| q.text.as_str()).collect();
    let vecs = model.embed_texts(&texts)?;
    let qs: Vec<(RelationshipLabel, Vec<f32>)> =
        queries.iter().map(|q| q.label).zip(vecs).collect();
    map_from_embeddings(&index, &qs, mode)
}

/// Column headings: the twelve relationships, then `Total`.
pub fn report_columns() -> Vec<String> {
    RelationshipLabel::all()
        .map(|l| format!("{:?}/{:?}", l.characteristic(), l.target_level()))
        .chain(std::iter::once("Total".to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub fingerprint: String,
    pub values: Vec<f64>,
}

/// mAP table: one row per evaluated model, 13 columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub columns: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl Default for EvalReport {
    fn default() -> Self {
        Self {
            columns: report_columns(),
            rows: Vec::new(),
        }
    }
}

impl EvalReport {
    pub fn push(
        &mut self,
        method: impl Into<String>,
        fingerprint: impl Into<String>,
        scores: &MapScores,
    ) {
        let mut values = scores.per_label.clone();
        values.push(scores.overall);
        self.rows.push(ReportRow {
            method: method.into(),
            fingerprint: fingerprint.into(),
            values,
        });
    }

    /// Fixed-width text rendering.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = String::new();
        let _ = write!(out, "{:width$}", "method");
        for (i, _) in self.columns.iter().enumerate().take(12) {
            let _ = write!(out, " {:>6}", format!("y{}", i + 1));
        }
        let _ = writeln!(out, " {:>6}", "Total");
        for r in &self.rows {
            let _ = write!(out, "{:width$}", r.method);
            for v in &r.values {
                let _ = write!(out, " {v:>6.3}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn label(v: u8) -> RelationshipLabel {
        RelationshipLabel::new(v).unwrap()
    }

    fn toy_index() -> Index {
        let e = |id: &str, l, v: &[f32]| IndexEntry {
            pair_id: id.into(),
            label: label(l),
            vector: unit(v),
        };
        Index::from_embeddings(
            "fp".into(),
            vec![
                e("b", 1, &[1.0, 0.0]),
                e("a", 2, &[0.0, 1.0]),
                e("c", 3, &[1.0, 1.0]),
                e("d", 4, &[1.0, 0.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn ap_examples() {
        assert!(
            (average_precision(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs()
                < 1e-15
        );
        assert_eq!(average_precision(&[true, true, true]).unwrap(), 1.0);
        assert!(average_precision(&[false, false]).is_err());
        let interp = average_precision_with(&[true, false, true], ApMode::Interpolated11).unwrap();
        assert!((interp - (6.0 * 1.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn search_examples() {
        let idx = toy_index();
        let r = search(&idx, &unit(&[1.0, 0.0]), 2).unwrap();
        assert_eq!(r.hits[0].pair_id, "b");
        assert_eq!(r.hits[1].pair_id, "d");
        assert!((r.hits[0].score - 1.0).abs() < 1e-7);
        let all = search(&idx, &unit(&[1.0, 0.0]), 4).unwrap();
        assert_eq!(all.hits.last().unwrap().pair_id, "a");
        assert_eq!(all.hits.last().unwrap().score, 0.0);
        assert!(search(&idx, &unit(&[1.0, 0.0]), 0).is_err());
        assert!(search(&idx, &unit(&[1.0, 0.0]), 5).is_err());
    }

    #[test]
    fn index_round_trip_and_validation() {
        let idx = toy_index();
        let back = Index::decode(&idx.encode().unwrap()).unwrap();
        assert_eq!(back, idx);
        let dup = vec![idx.entries[0].clone(), idx.entries[0].clone()];
        assert!(Index::from_embeddings("fp".into(), dup).is_err());
        let mut bad = idx.entries[0].clone();
        bad.vector = vec![2.0, 0.0];
        assert!(Index::from_embeddings("fp".into(), vec![bad]).is_err());
    }

    #[test]
    fn oracle_embeddings_score_one_everywhere() {
        let onehot = |l: RelationshipLabel| {
            let mut v = vec![0.0f32; 12];
            v[l.index()] = 1.0;
            v
        };
        let entries = (0..48)
            .map(|i| {
                let l = label((i % 12) as u8 + 1);
                IndexEntry {
                    pair_id: format!("p{i:03}"),
                    label: l,
                    vector: onehot(l),
                }
            })
            .collect();
        let idx = Index::from_embeddings("oracle".into(), entries).unwrap();
        let qs: Vec<_> = RelationshipLabel::all().map(|l| (l, onehot(l))).collect();
        let s = map_from_embeddings(&idx, &qs, ApMode::Standard).unwrap();
        assert!(s.per_label.iter().all(|&v| v == 1.0));
        assert_eq!(s.overall, 1.0);
        assert!(map_from_embeddings(&idx, &qs[..11], ApMode::Standard).is_err());
        let mut report = EvalReport::default();
        report.push("oracle", "x", &s);
        assert_eq!(report.columns.len(), 13);
        assert_eq!(report.rows[0].values.len(), 13);
        assert!(report.render().contains("Total"));
    }
}
