//! On-disk formats: datasets, query files, bindings and checkpoints.
//!
//! Every writer goes through [`atomic_write`], so readers never observe a
//! partially written file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{DualEncoder, EncoderConfig, Vocab};
use crate::perturb::{
    Characteristic, DatasetSplits, PairSample, PerturbLevel, PerturbParams, RelationshipLabel,
    Split, SplitCounts,
};
use crate::query::QueryText;
use crate::series::Series;
use crate::tensor::{ParamGroup, Tensor};
use crate::train::TrainConfig;

pub const DATASET_FORMAT: &str = "tsdiff-dataset/1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"TSDCKPT1";

/// Write `bytes` to a sibling temp file, then rename it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn from_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = String::from_utf8(read_bytes(path)?)
        .map_err(|_| Error::Format(format!("{} is not UTF-8", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Dataset-level description stored as `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub length: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    /// `synthetic` or the CSV path the bases came from.
    pub bases: String,
    pub n_bases: usize,
}

/// One manifest line; `offset` counts `f32` values into `samples.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub pair_id: String,
    pub base_id: String,
    pub label: RelationshipLabel,
    pub characteristic: Characteristic,
    pub target_level: PerturbLevel,
    pub params_ref: PerturbParams,
    pub params_tgt: PerturbParams,
    pub offset: u64,
    pub length: usize,
}

pub fn split_dir(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.name())
}

fn encode_split(pairs: &[PairSample]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut samples = Vec::new();
    let mut rows = Vec::with_capacity(pairs.len());
    let mut offset = 0u64;
    for p in pairs {
        let len = p.reference.len();
        if p.target.len() != len {
            return Err(Error::Data(format!(
                "pair {} has unequal series lengths",
                p.pair_id
            )));
        }
        for v in p.reference.values().iter().chain(p.target.values()) {
            samples.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        rows.push(ManifestRow {
            pair_id: p.pair_id.clone(),
            base_id: p.base_id.clone(),
            label: p.label,
            characteristic: p.characteristic,
            target_level: p.target_level,
            params_ref: p.params_ref.clone(),
            params_tgt: p.params_tgt.clone(),
            offset,
            length: len,
        });
        offset += 2 * len as u64;
    }
    Ok((to_jsonl(rows)?, samples))
}

pub fn write_dataset(dir: &Path, header: &DatasetHeader, splits: &DatasetSplits) -> Result<()> {
    for split in [Split::Train, Split::Val, Split::Test] {
        let (manifest, samples) = encode_split(splits.get(split))?;
        let sd = split_dir(dir, split);
        atomic_write(&sd.join("samples.bin"), &samples)?;
        atomic_write(&sd.join("manifest.jsonl"), &manifest)?;
    }
    write_json(&dir.join("dataset.json"), header)
}

pub fn read_dataset_header(dir: &Path) -> Result<DatasetHeader> {
    let h: DatasetHeader = read_json(&dir.join("dataset.json"))?;
    if h.format != DATASET_FORMAT {
        return Err(Error::Format(format!(
            "unsupported dataset format {}",
            h.format
        )));
    }
    Ok(h)
}

pub fn read_split(dir: &Path, split: Split) -> Result<Vec<PairSample>> {
    let sd = split_dir(dir, split);
    let rows: Vec<ManifestRow> = from_jsonl(&sd.join("manifest.jsonl"))?;
    let bin_path = sd.join("samples.bin");
    let bin = read_bytes(&bin_path)?;
    let floats: Vec<f32> = bin
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    rows.into_iter()
        .map(|r| {
            let start = r.offset as usize;
            let end = start + 2 * r.length;
            if end > floats.len() {
                return Err(Error::Data(format!(
                    "pair {} points past the end of {}",
                    r.pair_id,
                    bin_path.display()
                )));
            }
            let widen = |s: &[f32]| s.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>();
            let bad = |e: Error| Error::Data(format!("pair {}: {e}", r.pair_id));
            let reference = Series::new(
                format!("{}/ref", r.pair_id),
                widen(&floats[start..start + r.length]),
            )
            .map_err(bad)?;
            let target = Series::new(
                format!("{}/tgt", r.pair_id),
                widen(&floats[start + r.length..end]),
            )
            .map_err(bad)?;
            Ok(PairSample {
                pair_id: r.pair_id,
                base_id: r.base_id,
                reference,
                target,
                label: r.label,
                characteristic: r.characteristic,
                target_level: r.target_level,
                params_ref: r.params_ref,
                params_tgt: r.params_tgt,
            })
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetHeader, DatasetSplits)> {
    let header = read_dataset_header(dir)?;
    Ok((
        header,
        DatasetSplits {
            train: read_split(dir, Split::Train)?,
            val: read_split(dir, Split::Val)?,
            test: read_split(dir, Split::Test)?,
        },
    ))
}

pub fn write_queries(path: &Path, queries: &[QueryText]) -> Result<()> {
    atomic_write(path, &to_jsonl(queries)?)
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryText>> {
    from_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BindingRow {
    pair_id: String,
    query_id: String,
}

pub fn write_bindings(path: &Path, rows: &[(String, String)]) -> Result<()> {
    atomic_write(
        path,
        &to_jsonl(rows.iter().map(|(p, q)| BindingRow {
            pair_id: p.clone(),
            query_id: q.clone(),
        }))?,
    )
}

pub fn read_bindings(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(from_jsonl::<BindingRow>(path)?
        .into_iter()
        .map(|r| (r.pair_id, r.query_id))
        .collect())
}

/// Training-run facts stored with a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    fingerprint: String,
    config: EncoderConfig,
    vocab: Vocab,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 over the encoder config, vocabulary and every parameter, hex-truncated.
pub fn fingerprint(model: &DualEncoder<f32>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).unwrap_or_default());
    h.update(serde_json::to_vec(model.vocab()).unwrap_or_default());
    for (_, p) in model.params().iter() {
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode_checkpoint(model: &DualEncoder<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0u64;
    for (_, p) in model.params().iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
            offset,
        });
        for v in p.value.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.value.numel() as u64;
    }
    let header = CheckpointHeader {
        fingerprint: fingerprint(model),
        config: model.config().clone(),
        vocab: model.vocab().clone(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DualEncoder<f32>, CheckpointMeta)> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let data = &bytes[12 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let start = t.offset as usize * 4;
        let raw = data
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Format(format!("tensor {} is truncated", t.name)))?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((t.name.clone(), Tensor::new(t.shape.clone(), vals)));
    }
    let model = DualEncoder::from_tensors(header.config, header.vocab, tensors)?;
    let fp = fingerprint(&model);
    if fp != header.fingerprint {
        return Err(Error::Format(format!(
            "checkpoint fingerprint {} does not match its contents ({fp})",
            header.fingerprint
        )));
    }
    Ok((model, header.meta))
}

pub fn write_checkpoint(
    path: &Path,
    model: &DualEncoder<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    atomic_write(path, &encode_checkpoint(model, meta)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(DualEncoder<f32>, CheckpointMeta)> {
    decode_checkpoint(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::generate_base_signals;
    use crate::perturb::generate_dataset;

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let bases = generate_base_signals(10, 32, 4).unwrap();
        let counts = SplitCounts {
            train: 12,
            val: 3,
            test: 5,
        };
        let splits = generate_dataset(&bases, counts, 4).unwrap();
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            length: 32,
            counts,
            seed: 4,
            bases: "synthetic".into(),
            n_bases: 10,
        };
        write_dataset(dir.path(), &header, &splits).unwrap();
        let (h2, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(h2, header);
        for split in [Split::Train, Split::Val, Split::Test] {
            for (a, b) in splits.get(split).iter().zip(back.get(split)) {
                assert_eq!(a.pair_id, b.pair_id);
                assert_eq!(a.params_tgt, b.params_tgt);
                let narrowed: Vec<f64> = a
                    .target
                    .values()
                    .iter()
                    .map(|&v| f64::from(v as f32))
                    .collect();
                assert_eq!(narrowed, b.target.values());
            }
        }
        // rewriting what was read gives the same bytes
        let first = read_bytes(&dir.path().join("test/samples.bin")).unwrap();
        let other = tempfile::tempdir().unwrap();
        write_dataset(other.path(), &header, &back).unwrap();
        assert_eq!(
            first,
            read_bytes(&other.path().join("test/samples.bin")).unwrap()
        );
        assert_eq!(
            read_bytes(&dir.path().join("train/manifest.jsonl")).unwrap(),
            read_bytes(&other.path().join("train/manifest.jsonl")).unwrap()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let vocab = Vocab::build(["noise"]);
        let cfg = EncoderConfig {
            embed_dim: 8,
            series_length: 32,
            patch_size: 8,
            transformer_layers: 1,
            transformer_heads: 2,
            transformer_ff: 8,
            text_layers: 1,
            text_heads: 2,
            text_ff: 8,
            ..Default::default()
        };
        let m = DualEncoder::<f32>::new(cfg, vocab, 3).unwrap();
        let meta = CheckpointMeta {
            seed: 3,
            epoch: 2,
            val_loss: 1.5,
            train: TrainConfig::default(),
        };
        let bytes = encode_checkpoint(&m, &meta).unwrap();
        let (back, meta2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(meta2, meta);
        assert_eq!(encode_checkpoint(&back, &meta2).unwrap(), bytes);
        let mut bad = bytes.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x55;
        assert!(decode_checkpoint(&bad).is_err());
        assert!(decode_checkpoint(b"nonsense").is_err());
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(read_bytes(&p).unwrap(), b"two");
        let leftovers = fs::read_dir(dir.path().join("a")).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
