//! Natural-language queries describing pair differences.
//!
//! Besides the canonical template, queries come from a small production
//! grammar: sentence frames × target phrasings × reference phrasings ×
//! comparatives × characteristic synonyms. Every synonym table is disjoint
//! across labels, so any generated sentence parses back to exactly one label
//! ([`parse_query`]).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::perturb::{
    label_of, Characteristic, PairSample, PerturbLevel, RelationshipLabel, Split,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryText {
    pub query_id: String,
    pub label: RelationshipLabel,
    pub text: String,
}

/// `"The target data has {direction} {characteristic} than the reference data."`
pub fn instantiate_template(characteristic: Characteristic, direction: PerturbLevel) -> String {
    format!(
        "The target data has {} {} than the reference data.",
        direction.word(),
        characteristic.phrase()
    )
}

const TARGET_REFERENTS: [&str; 6] = [
    "target data",
    "target dataset",
    "target series",
    "target signal",
    "target time series",
    "target sequence",
];

const REFERENCE_REFERENTS: [&str; 6] = [
    "reference data",
    "reference dataset",
    "reference series",
    "reference signal",
    "reference time series",
    "reference sequence",
];

fn nouns(c: Characteristic) -> &'static [&'static str; 6] {
    match c {
        Characteristic::UpwardTrend => &[
            "upward trend",
            "trend of increase",
            "rising trend",
            "increasing trend",
            "upward slope",
            "upward drift",
        ],
        Characteristic::DownwardTrend => &[
            "downward trend",
            "trend of decrease",
            "falling trend",
            "decreasing trend",
            "downward slope",
            "downward drift",
        ],
        Characteristic::Spike => &[
            "spike",
            "surge",
            "peak",
            "sudden jump",
            "sharp rise",
            "burst",
        ],
        Characteristic::Dropout => &[
            "dropout",
            "sudden drop",
            "dip",
            "sharp fall",
            "plunge",
            "sudden dip",
        ],
        Characteristic::Noise => &[
            "noise",
            "distortion",
            "random fluctuation",
            "jitter",
            "noise level",
            "random variation",
        ],
        Characteristic::Baseline => &[
            "baseline",
            "baseline level",
            "offset",
            "mean level",
            "base level",
            "overall level",
        ],
    }
}

fn is_trend(c: Characteristic) -> bool {
    matches!(
        c,
        Characteristic::UpwardTrend | Characteristic::DownwardTrend
    )
}

fn comparatives(c: Characteristic, direction: PerturbLevel) -> &'static [&'static str; 6] {
    match (is_trend(c), direction) {
        (true, PerturbLevel::Larger) => &[
            "stronger",
            "steeper",
            "more pronounced",
            "greater",
            "significantly stronger",
            "noticeably steeper",
        ],
        (true, PerturbLevel::Smaller) => &[
            "weaker",
            "gentler",
            "less pronounced",
            "milder",
            "significantly weaker",
            "noticeably gentler",
        ],
        (false, PerturbLevel::Larger) => &[
            "larger",
            "greater",
            "higher",
            "bigger",
            "significantly higher",
            "noticeably larger",
        ],
        (false, PerturbLevel::Smaller) => &[
            "smaller",
            "lesser",
            "lower",
            "milder",
            "significantly lower",
            "noticeably smaller",
        ],
    }
}

const FRAMES: usize = 6;

fn render(frame: usize, tgt: &str, reference: &str, cmp: &str, noun: &str) -> String {
    match frame {
        0 => format!("The {tgt} has {cmp} {noun} than the {reference}."),
        1 => format!("The {tgt} exhibits a {cmp} {noun} than the {reference}."),
        2 => format!("The {tgt} contains a {cmp} {noun} compared to the {reference}."),
        3 => format!("The {tgt} shows a {cmp} {noun} relative to the {reference}."),
        4 => format!("The {noun} present in the {tgt} is {cmp} than that of the {reference}."),
        5 => format!("Compared to the {reference}, the {tgt} displays a {cmp} {noun}."),
        _ => unreachable!("frame index out of range"),
    }
}

/// Number of distinct sentences the grammar produces for each label.
pub const GRAMMAR_CAPACITY: usize = FRAMES * 6 * 6 * 6 * 6;

/// Sentence number `index` (mixed-radix decoded) for a label.
fn grammar_sentence(label: RelationshipLabel, index: usize) -> String {
    let c = label.characteristic();
    let dir = label.target_level();
    let mut i = index;
    let mut digit = |radix: usize| {
        let d = i % radix;
        i /= radix;
        d
    };
    let noun = nouns(c)[digit(6)];
    let cmp = comparatives(c, dir)[digit(6)];
    let reference = REFERENCE_REFERENTS[digit(6)];
    let tgt = TARGET_REFERENTS[digit(6)];
    let frame = digit(FRAMES);
    render(frame, tgt, reference, cmp, noun)
}

/// Every sentence for a label, in grammar order.
pub fn enumerate_grammar(label: RelationshipLabel) -> impl Iterator<Item = String> {
    (0..GRAMMAR_CAPACITY).map(move |i| grammar_sentence(label, i))
}

/// `count` distinct paraphrases for one label, deterministic in `seed`.
pub fn paraphrase_pool(
    label: RelationshipLabel,
    count: usize,
    seed: u64,
) -> Result<Vec<QueryText>> {
    if count > GRAMMAR_CAPACITY {
        return Err(Error::InvalidInput(format!(
            "requested {count} queries per label, grammar capacity is {GRAMMAR_CAPACITY}"
        )));
    }
    let mut order: Vec<usize> = (0..GRAMMAR_CAPACITY).collect();
    order.shuffle(&mut rng::substream(
        seed,
        "queries",
        u64::from(label.value()),
    ));
    Ok(order[..count]
        .iter()
        .enumerate()
        .map(|(i, &g)| QueryText {
            query_id: format!("q{:02}-{i:04}", label.value()),
            label,
            text: grammar_sentence(label, g),
        })
        .collect())
}

/// Pools for all twelve labels, concatenated in label order.
pub fn generate_query_pool(per_label: usize, seed: u64) -> Result<Vec<QueryText>> {
    let labels: Vec<RelationshipLabel> = RelationshipLabel::all().collect();
    let pools = par::map_slice(&labels, |&l| paraphrase_pool(l, per_label, seed));
    let mut out = Vec::with_capacity(per_label * 12);
    for p in pools {
        out.extend(p?);
    }
    Ok(out)
}

fn normalize_for_match(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    format!(
        " {} ",
        cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
    )
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    haystack.contains(&format!(" {phrase} "))
}

/// Recover the label of a grammar-generated (or template) sentence.
/// Returns `None` unless exactly one characteristic and one direction match.
pub fn parse_query(text: &str) -> Option<RelationshipLabel> {
    let norm = normalize_for_match(text);
    let chars: Vec<Characteristic> = Characteristic::ALL
        .into_iter()
        .filter(|&c| {
            contains_phrase(&norm, c.phrase()) || nouns(c).iter().any(|n| contains_phrase(&norm, n))
        })
        .collect();
    let [c] = chars[..] else { return None };
    let dirs: Vec<PerturbLevel> = [PerturbLevel::Larger, PerturbLevel::Smaller]
        .into_iter()
        .filter(|&d| {
            contains_phrase(&norm, d.word())
                || comparatives(c, d).iter().any(|w| contains_phrase(&norm, w))
        })
        .collect();
    let [d] = dirs[..] else { return None };
    Some(label_of(c, d))
}

/// Per-label 90/10 split into (train, test).
pub fn split_queries(pool: &[QueryText], seed: u64) -> (Vec<QueryText>, Vec<QueryText>) {
    let mut by_label: BTreeMap<RelationshipLabel, Vec<&QueryText>> = BTreeMap::new();
    for q in pool {
        by_label.entry(q.label).or_default().push(q);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (label, mut qs) in by_label {
        qs.shuffle(&mut rng::substream(
            seed,
            "query-split",
            u64::from(label.value()),
        ));
        let n_train = (qs.len() * 9).div_ceil(10);
        let (a, b) = qs.split_at(n_train);
        train.extend(a.iter().map(|q| (*q).clone()));
        test.extend(b.iter().map(|q| (*q).clone()));
    }
    (train, test)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundItem {
    pub pair: PairSample,
    pub query: QueryText,
}

/// Pairs each bound to one query of the same label.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundDataset {
    pub split: Split,
    pub items: Vec<BoundItem>,
}

impl BoundDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `(pair_id, query_id)` rows.
    pub fn binding_rows(&self) -> Vec<(String, String)> {
        self.items
            .iter()
            .map(|it| (it.pair.pair_id.clone(), it.query.query_id.clone()))
            .collect()
    }
}

/// Draw, for every pair, one same-label query uniformly (with replacement).
pub fn bind_queries(
    split: Split,
    pairs: &[PairSample],
    queries: &[QueryText],
    seed: u64,
) -> Result<BoundDataset> {
    let mut by_label: BTreeMap<RelationshipLabel, Vec<&QueryText>> = BTreeMap::new();
    for q in queries {
        by_label.entry(q.label).or_default().push(q);
    }
    let indexed: Vec<(usize, &PairSample)> = pairs.iter().enumerate().collect();
    let items = par::map_slice(&indexed, |&(i, pair)| {
        let pool = by_label.get(&pair.label).ok_or_else(|| {
            Error::Data(format!(
                "no queries with label {} for pair {}",
                pair.label, pair.pair_id
            ))
        })?;
        let mut r = rng::substream(seed, &format!("bind-{}", split.name()), i as u64);
        let q = pool[r.random_range(0..pool.len())];
        Ok(BoundItem {
            pair: pair.clone(),
            query: q.clone(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(BoundDataset { split, items })
}

/// Rebuild a bound dataset from stored `(pair_id, query_id)` rows.
pub fn rebind(
    split: Split,
    rows: &[(String, String)],
    pairs: &[PairSample],
    queries: &[QueryText],
) -> Result<BoundDataset> {
    let pmap: BTreeMap<&str, &PairSample> = pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let qmap: BTreeMap<&str, &QueryText> =
        queries.iter().map(|q| (q.query_id.as_str(), q)).collect();
    let items = rows
        .iter()
        .map(|(pid, qid)| {
            let pair = pmap
                .get(pid.as_str())
                .ok_or_else(|| Error::Data(format!("binding references unknown pair {pid}")))?;
            let query = qmap
                .get(qid.as_str())
                .ok_or_else(|| Error::Data(format!("binding references unknown query {qid}")))?;
            if pair.label != query.label {
                return Err(Error::Data(format!(
                    "binding {pid}/{qid} has mismatched labels"
                )));
            }
            Ok(BoundItem {
                pair: (*pair).clone(),
                query: (*query).clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundDataset { split, items })
}
