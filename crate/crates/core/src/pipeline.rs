//! End-to-end steps shared by the command line and the acceptance suite.

use std::path::Path;

use crate::bases::generate_base_signals;
use crate::config::Profile;
use crate::error::{Error, Result};
use crate::nn::{DualEncoder, Vocab};
use crate::perturb::{generate_dataset, DatasetSplits, PairSample, Split};
use crate::query::{bind_queries, generate_query_pool, split_queries, BoundDataset, QueryText};
use crate::retrieval::{evaluate_map, ApMode, MapScores};
use crate::rng::derive_seed;
use crate::series::{load_csv_series, minmax_scale, resample_linear, Series};
use crate::storage::{self, CheckpointMeta, DatasetHeader, DATASET_FORMAT};
use crate::train::{train, EpochMetrics, TrainReport};

/// Query pool split into training and test queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySets {
    pub all: Vec<QueryText>,
    pub train: Vec<QueryText>,
    pub test: Vec<QueryText>,
}

/// Preprocessed base series: synthetic, or CSV rows resampled and scaled.
pub fn load_bases(profile: &Profile) -> Result<Vec<Series>> {
    let d = &profile.data;
    if d.bases == "synthetic" {
        let n = if d.n_bases == 0 {
            d.counts().total()
        } else {
            d.n_bases
        };
        return generate_base_signals(n, d.length, derive_seed(profile.seed, "bases", 0));
    }
    let raw = load_csv_series(Path::new(&d.bases))?;
    if raw.is_empty() {
        return Err(Error::Data(format!("{} holds no series", d.bases)));
    }
    raw.iter()
        .map(|s| resample_linear(s, d.length).map(|r| minmax_scale(&r)))
        .collect()
}

pub fn generate_data(profile: &Profile) -> Result<(DatasetHeader, DatasetSplits)> {
    let counts = profile.data.counts();
    if counts.train < 2 || counts.val == 0 || counts.test == 0 {
        return Err(Error::InvalidInput(format!(
            "need train >= 2, val >= 1 and test >= 1 pairs, got {}/{}/{}",
            counts.train, counts.val, counts.test
        )));
    }
    let bases = load_bases(profile)?;
    let splits = generate_dataset(&bases, counts, derive_seed(profile.seed, "data", 0))?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        length: profile.data.length,
        counts,
        seed: profile.seed,
        bases: profile.data.bases.clone(),
        n_bases: bases.len(),
    };
    Ok((header, splits))
}

pub fn generate_queries(per_label: usize, seed: u64) -> Result<QuerySets> {
    if per_label < 2 {
        return Err(Error::InvalidInput(
            "per_label must be at least 2 to split queries".into(),
        ));
    }
    let all = generate_query_pool(per_label, derive_seed(seed, "queries", 0))?;
    let (train, test) = split_queries(&all, derive_seed(seed, "query-split", 0));
    Ok(QuerySets { all, train, test })
}

/// Train and validation pairs bound to training queries.
pub fn bind_splits(
    splits: &DatasetSplits,
    queries: &QuerySets,
    seed: u64,
) -> Result<(BoundDataset, BoundDataset)> {
    let s = derive_seed(seed, "bind", 0);
    Ok((
        bind_queries(Split::Train, &splits.train, &queries.train, s)?,
        bind_queries(Split::Val, &splits.val, &queries.train, s)?,
    ))
}

/// Fresh model for a profile with the vocabulary of the training queries.
pub fn init_model(profile: &Profile, train_queries: &[QueryText]) -> Result<DualEncoder<f32>> {
    let vocab = Vocab::build(train_queries.iter().map(|q| q.text.as_str()));
    DualEncoder::new(
        profile.encoder.clone(),
        vocab,
        derive_seed(profile.seed, "model", 0),
    )
}

pub fn train_model(
    profile: &Profile,
    train_set: &BoundDataset,
    val_set: &BoundDataset,
    train_queries: &[QueryText],
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(DualEncoder<f32>, TrainReport)> {
    let mut model = init_model(profile, train_queries)?;
    let report = train(&mut model, train_set, val_set, &profile.train, on_epoch)?;
    Ok((model, report))
}

pub fn checkpoint_meta(profile: &Profile, report: &TrainReport) -> CheckpointMeta {
    CheckpointMeta {
        seed: profile.seed,
        epoch: report.best_epoch,
        val_loss: report.best_val_loss,
        train: profile.train.clone(),
    }
}

pub fn evaluate(
    model: &DualEncoder<f32>,
    test_queries: &[QueryText],
    test_pairs: &[PairSample],
) -> Result<MapScores> {
    evaluate_map(model, test_queries, test_pairs, ApMode::Standard)
}

/// File names inside a query directory.
pub const QUERY_FILES: [&str; 3] = ["queries.jsonl", "train.jsonl", "test.jsonl"];

pub fn write_query_sets(dir: &Path, q: &QuerySets) -> Result<()> {
    for (name, rows) in QUERY_FILES.iter().zip([&q.all, &q.train, &q.test]) {
        storage::write_queries(&dir.join(name), rows)?;
    }
    Ok(())
}

pub fn read_query_sets(dir: &Path) -> Result<QuerySets> {
    Ok(QuerySets {
        all: storage::read_queries(&dir.join(QUERY_FILES[0]))?,
        train: storage::read_queries(&dir.join(QUERY_FILES[1]))?,
        test: storage::read_queries(&dir.join(QUERY_FILES[2]))?,
    })
}

/// Record which query each train and validation pair was bound to.
pub fn write_bindings(dir: &Path, train: &BoundDataset, val: &BoundDataset) -> Result<()> {
    storage::write_bindings(&dir.join("bindings-train.jsonl"), &train.binding_rows())?;
    storage::write_bindings(&dir.join("bindings-val.jsonl"), &val.binding_rows())
}
