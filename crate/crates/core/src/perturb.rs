//! Labeled reference/target pair generation.
//!
//! A base series receives the same kind of perturbation twice, once at the
//! smaller and once at the larger level; one result becomes the reference,
//! the other the target. The pair's label encodes the perturbed
//! characteristic and which level the target received.

use std::fmt;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, Rng};
use crate::series::{minmax_values, slope_sign, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Characteristic {
    UpwardTrend,
    DownwardTrend,
    Spike,
    Dropout,
    Noise,
    Baseline,
}

impl Characteristic {
    pub const ALL: [Characteristic; 6] = [
        Characteristic::UpwardTrend,
        Characteristic::DownwardTrend,
        Characteristic::Spike,
        Characteristic::Dropout,
        Characteristic::Noise,
        Characteristic::Baseline,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lowercase noun phrase used by the canonical query template.
    pub fn phrase(self) -> &'static str {
        match self {
            Characteristic::UpwardTrend => "upward trend",
            Characteristic::DownwardTrend => "downward trend",
            Characteristic::Spike => "spike",
            Characteristic::Dropout => "dropout",
            Characteristic::Noise => "noise",
            Characteristic::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Characteristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbLevel {
    Smaller,
    Larger,
}

impl PerturbLevel {
    pub fn word(self) -> &'static str {
        match self {
            PerturbLevel::Smaller => "smaller",
            PerturbLevel::Larger => "larger",
        }
    }
}

/// Relationship label in `1..=12`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct RelationshipLabel(u8);

impl RelationshipLabel {
    pub const COUNT: usize = 12;

    pub fn new(value: u8) -> Result<Self> {
        if (1..=12).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::InvalidInput(format!("label {value} outside 1..=12")))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based position, handy for per-label tables.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn all() -> impl Iterator<Item = RelationshipLabel> {
        (1..=12).map(RelationshipLabel)
    }

    pub fn characteristic(self) -> Characteristic {
        Characteristic::ALL[self.index() / 2]
    }

    pub fn target_level(self) -> PerturbLevel {
        if self.index().is_multiple_of(2) {
            PerturbLevel::Larger
        } else {
            PerturbLevel::Smaller
        }
    }
}

impl TryFrom<u8> for RelationshipLabel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RelationshipLabel> for u8 {
    fn from(l: RelationshipLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for RelationshipLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// `(UpwardTrend, Larger) -> 1`, `(UpwardTrend, Smaller) -> 2`, ...,
/// `(Baseline, Smaller) -> 12`.
pub fn label_of(characteristic: Characteristic, target_level: PerturbLevel) -> RelationshipLabel {
    let offset = match target_level {
        PerturbLevel::Larger => 1,
        PerturbLevel::Smaller => 2,
    };
    RelationshipLabel(2 * characteristic.index() as u8 + offset)
}

/// Half-open sampling range `[lo, hi)` for a characteristic's magnitude.
pub fn param_range(characteristic: Characteristic, level: PerturbLevel) -> (f64, f64) {
    use Characteristic::*;
    use PerturbLevel::*;
    match (characteristic, level) {
        (UpwardTrend | DownwardTrend, Smaller) => (0.0, 0.5),
        (UpwardTrend | DownwardTrend, Larger) => (0.5, 1.0),
        (Spike | Dropout, Smaller) => (0.0, 0.1),
        (Spike | Dropout, Larger) => (0.1, 0.5),
        (Noise, Smaller) => (0.0, 0.05),
        (Noise, Larger) => (0.05, 0.1),
        (Baseline, Smaller) => (0.0, 0.1),
        (Baseline, Larger) => (0.1, 0.5),
    }
}

/// Uniform draw from the level's magnitude range.
pub fn sample_param(characteristic: Characteristic, level: PerturbLevel, rng: &mut Rng) -> f64 {
    let (lo, hi) = param_range(characteristic, level);
    rng.random_range(lo..hi)
}

/// Parameters of one perturbation. Only the field belonging to the
/// pair's characteristic is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbParams {
    pub level: PerturbLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_s: Option<usize>,
    /// Seed of the noise stream (noise pairs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PerturbParams {
    fn empty(level: PerturbLevel) -> Self {
        Self {
            level,
            alpha: None,
            beta: None,
            gamma: None,
            theta: None,
            t_s: None,
            seed: None,
        }
    }

    /// The magnitude driving this perturbation (alpha, beta, gamma or theta).
    pub fn magnitude(&self) -> Option<f64> {
        self.alpha.or(self.beta).or(self.gamma).or(self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrendDirection {
    Up,
    Down,
}

/// Add `±alpha * t/(len-1)` then min-max rescale.
pub fn apply_trend(x: &Series, alpha: f64, direction: TrendDirection) -> Series {
    let sign = match direction {
        TrendDirection::Up => 1.0,
        TrendDirection::Down => -1.0,
    };
    let last = (x.len() - 1) as f64;
    let raw: Vec<f64> = x
        .values()
        .iter()
        .enumerate()
        .map(|(t, &v)| v + sign * alpha * (t as f64 / last))
        .collect();
    Series::from_parts_unchecked(x.id().to_string(), minmax_values(&raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpikeSign {
    Spike,
    Dropout,
}

/// Single-sample impulse of height `±beta` at `t_s`.
pub fn apply_spike(x: &Series, beta: f64, t_s: usize, sign: SpikeSign) -> Result<Series> {
    if t_s >= x.len() {
        return Err(Error::InvalidInput(format!(
            "spike index {t_s} outside series of length {}",
            x.len()
        )));
    }
    let mut values = x.values().to_vec();
    match sign {
        SpikeSign::Spike => values[t_s] += beta,
        SpikeSign::Dropout => values[t_s] -= beta,
    }
    Ok(Series::from_parts_unchecked(x.id().to_string(), values))
}

/// Additive white Gaussian noise with standard deviation `gamma`.
pub fn apply_noise(x: &Series, gamma: f64, rng: &mut Rng) -> Series {
    let values = x
        .values()
        .iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + gamma * z
        })
        .collect();
    Series::from_parts_unchecked(x.id().to_string(), values)
}

/// Constant shift by `theta`.
pub fn apply_baseline(x: &Series, theta: f64) -> Series {
    let values = x.values().iter().map(|&v| v + theta).collect();
    Series::from_parts_unchecked(x.id().to_string(), values)
}

/// Apply one recorded perturbation to `base`. Generation goes through this
/// same function, so stored parameters regenerate samples bit-exactly.
pub fn apply_perturbation(
    base: &Series,
    characteristic: Characteristic,
    params: &PerturbParams,
) -> Result<Series> {
    let missing = |what: &str| Error::Data(format!("{characteristic} perturbation without {what}"));
    Ok(match characteristic {
        Characteristic::UpwardTrend => apply_trend(
            base,
            params.alpha.ok_or_else(|| missing("alpha"))?,
            TrendDirection::Up,
        ),
        Characteristic::DownwardTrend => apply_trend(
            base,
            params.alpha.ok_or_else(|| missing("alpha"))?,
            TrendDirection::Down,
        ),
        Characteristic::Spike | Characteristic::Dropout => {
            let sign = if characteristic == Characteristic::Spike {
                SpikeSign::Spike
            } else {
                SpikeSign::Dropout
            };
            apply_spike(
                base,
                params.beta.ok_or_else(|| missing("beta"))?,
                params.t_s.ok_or_else(|| missing("t_s"))?,
                sign,
            )?
        }
        Characteristic::Noise => {
            let mut noise_rng =
                rng::substream(params.seed.ok_or_else(|| missing("seed"))?, "noise", 0);
            apply_noise(
                base,
                params.gamma.ok_or_else(|| missing("gamma"))?,
                &mut noise_rng,
            )
        }
        Characteristic::Baseline => {
            apply_baseline(base, params.theta.ok_or_else(|| missing("theta"))?)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub pair_id: String,
    pub base_id: String,
    pub reference: Series,
    pub target: Series,
    pub label: RelationshipLabel,
    pub characteristic: Characteristic,
    pub target_level: PerturbLevel,
    pub params_ref: PerturbParams,
    pub params_tgt: PerturbParams,
}

fn draw_params(
    characteristic: Characteristic,
    level: PerturbLevel,
    t_s: Option<usize>,
    rng: &mut Rng,
) -> PerturbParams {
    let mut p = PerturbParams::empty(level);
    let value = sample_param(characteristic, level, rng);
    match characteristic {
        Characteristic::UpwardTrend | Characteristic::DownwardTrend => p.alpha = Some(value),
        Characteristic::Spike | Characteristic::Dropout => {
            p.beta = Some(value);
            p.t_s = t_s;
        }
        Characteristic::Noise => {
            p.gamma = Some(value);
            p.seed = Some(rng.random());
        }
        Characteristic::Baseline => p.theta = Some(value),
    }
    p
}

/// Build one labeled pair from a preprocessed (resampled, min-max scaled) base.
pub fn generate_pair(
    pair_id: impl Into<String>,
    base: &Series,
    rng: &mut Rng,
) -> Result<PairSample> {
    let mut characteristic = Characteristic::ALL[rng.random_range(0..6)];
    match (characteristic, slope_sign(base)) {
        (Characteristic::UpwardTrend, -1) => characteristic = Characteristic::DownwardTrend,
        (Characteristic::DownwardTrend, 1) => characteristic = Characteristic::UpwardTrend,
        _ => {}
    }
    let t_s = matches!(
        characteristic,
        Characteristic::Spike | Characteristic::Dropout
    )
    .then(|| rng.random_range(0..base.len()));
    let smaller = draw_params(characteristic, PerturbLevel::Smaller, t_s, rng);
    let larger = draw_params(characteristic, PerturbLevel::Larger, t_s, rng);
    let (params_ref, params_tgt) = if rng.random_bool(0.5) {
        (smaller, larger)
    } else {
        (larger, smaller)
    };
    let reference = apply_perturbation(base, characteristic, &params_ref)?;
    let target = apply_perturbation(base, characteristic, &params_tgt)?;
    let target_level = params_tgt.level;
    Ok(PairSample {
        pair_id: pair_id.into(),
        base_id: base.id().to_string(),
        reference,
        target,
        label: label_of(characteristic, target_level),
        characteristic,
        target_level,
        params_ref,
        params_tgt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplits {
    pub train: Vec<PairSample>,
    pub val: Vec<PairSample>,
    pub test: Vec<PairSample>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &[PairSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Base index for each of `total` pairs: cycle through the bases, reshuffling
/// before every pass.
fn base_schedule(n_bases: usize, total: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_bases).collect();
    let mut out = Vec::with_capacity(total);
    while out.len() < total {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        out.extend(order.iter().take(total - out.len()));
    }
    out
}

/// Generate all three splits. Pair `i` (numbered across splits) draws from its
/// own sub-stream, so the result does not depend on the execution order.
pub fn generate_dataset(bases: &[Series], counts: SplitCounts, seed: u64) -> Result<DatasetSplits> {
    if bases.is_empty() {
        return Err(Error::InvalidInput("empty base series list".into()));
    }
    let total = counts.total();
    let schedule = base_schedule(
        bases.len(),
        total,
        &mut rng::substream(seed, "base-order", 0),
    );
    let mut pairs = par::map_range(total, |i| {
        let (split, local) = if i < counts.train {
            (Split::Train, i)
        } else if i < counts.train + counts.val {
            (Split::Val, i - counts.train)
        } else {
            (Split::Test, i - counts.train - counts.val)
        };
        let id = format!("{}-{local:06}", split.name());
        let mut r = rng::substream(seed, "pair", i as u64);
        generate_pair(id, &bases[schedule[i]], &mut r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let test = pairs.split_off(counts.train + counts.val);
    let val = pairs.split_off(counts.train);
    Ok(DatasetSplits {
        train: pairs,
        val,
        test,
    })
}
