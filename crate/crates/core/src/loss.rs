//! Supervised and self-supervised contrastive objectives.
//!
//! The plain `f64` functions mirror the graph version in [`contrastive_loss`]
//! and serve as its reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturb::RelationshipLabel;
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Targets from label agreement.
    Supervised,
    /// Targets on the diagonal only.
    Selfsup,
}

/// How signal-side targets are read off the target matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalTargets {
    /// Column-argmax of G: each signal points at a text with its label.
    #[default]
    ColumnArgmax,
    /// Reuse the text-side row-argmax of G for the transposed loss.
    Literal,
}

/// Binary and row-normalized label agreement between texts and signals.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub binary: Vec<Vec<u8>>,
    pub normalized: Vec<Vec<f64>>,
}

impl TargetMatrix {
    /// Per-text target index: first maximum of each row.
    pub fn text_targets(&self) -> Vec<usize> {
        self.normalized.iter().map(|r| first_argmax(r)).collect()
    }

    /// Per-signal target distribution: each column of the binary matrix
    /// normalized over the texts sharing the signal's label.
    pub fn signal_distributions(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.binary.first().map_or(0, Vec::len);
        (0..n)
            .map(|j| {
                let sum: u32 = self.binary.iter().map(|r| u32::from(r[j])).sum();
                if sum == 0 {
                    return Err(Error::InvalidInput(format!(
                        "signal {j} has no positive text in the batch"
                    )));
                }
                Ok(self
                    .binary
                    .iter()
                    .map(|r| f64::from(r[j]) / f64::from(sum))
                    .collect())
            })
            .collect()
    }

    /// Per-signal target index: first maximum of each column.
    pub fn signal_targets(&self, how: SignalTargets) -> Vec<usize> {
        match how {
            SignalTargets::Literal => self.text_targets(),
            SignalTargets::ColumnArgmax => {
                let n = self.binary.first().map_or(0, Vec::len);
                (0..n)
                    .map(|j| {
                        let col: Vec<f64> = self.normalized.iter().map(|r| r[j]).collect();
                        first_argmax(&col)
                    })
                    .collect()
            }
        }
    }
}

/// Index of the first maximum; ties go to the lowest index.
pub fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn l2_normalize(z: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    z.iter()
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric(format!("embedding row {i} has norm {norm}")));
            }
            Ok(row.iter().map(|v| v / norm).collect())
        })
        .collect()
}

/// `m[i][j] = z_text[i] · z_signal[j] / tau`.
pub fn logit_matrix(z_text: &[Vec<f64>], z_signal: &[Vec<f64>], tau: f64) -> Result<Vec<Vec<f64>>> {
    if z_text.len() != z_signal.len() {
        return Err(Error::Shape(format!(
            "{} text rows vs {} signal rows",
            z_text.len(),
            z_signal.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let d = z_text.first().map_or(0, Vec::len);
    if z_text.iter().chain(z_signal).any(|r| r.len() != d) {
        return Err(Error::Shape("embedding widths differ".into()));
    }
    Ok(z_text
        .iter()
        .map(|t| {
            z_signal
                .iter()
                .map(|s| t.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect()
        })
        .collect())
}

pub fn target_matrix(
    y_text: &[RelationshipLabel],
    y_signal: &[RelationshipLabel],
) -> Result<TargetMatrix> {
    let binary: Vec<Vec<u8>> = y_text
        .iter()
        .map(|t| y_signal.iter().map(|s| u8::from(t == s)).collect())
        .collect();
    let normalized = binary
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let sum: u32 = row.iter().map(|&v| u32::from(v)).sum();
            if sum == 0 {
                return Err(Error::InvalidInput(format!(
                    "text {i} has no positive signal in the batch"
                )));
            }
            Ok(row.iter().map(|&v| f64::from(v) / f64::from(sum)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(TargetMatrix { binary, normalized })
}

/// Mean cross-entropy of row-wise softmax against hard targets.
fn cross_entropy_rows(m: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (row, &t) in m.iter().zip(targets) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(total / m.len() as f64)
}

fn transpose(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.first().map_or(0, Vec::len);
    (0..n).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

fn check_square(m: &[Vec<f64>], n: usize) -> Result<()> {
    if m.is_empty() || m.len() != n || m.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!(
            "expected a nonempty {n}x{n} logit matrix"
        )));
    }
    Ok(())
}

pub fn supervised_loss(m: &[Vec<f64>], g: &TargetMatrix, how: SignalTargets) -> Result<f64> {
    check_square(m, g.binary.len())?;
    let lt = cross_entropy_rows(m, &g.text_targets())?;
    let ls = cross_entropy_rows(&transpose(m), &g.signal_targets(how))?;
    Ok((lt + ls) / 2.0)
}

/// Mean cross-entropy of row-wise softmax against target distributions.
fn soft_cross_entropy_rows(m: &[Vec<f64>], q: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for (row, qi) in m.iter().zip(q) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += row.iter().zip(qi).map(|(v, w)| w * (lse - v)).sum::<f64>();
    }
    Ok(total / m.len() as f64)
}

/// Supervised loss against the full normalized target rows and columns
/// instead of their argmax.
pub fn soft_supervised_loss(m: &[Vec<f64>], g: &TargetMatrix) -> Result<f64> {
    check_square(m, g.binary.len())?;
    let lt = soft_cross_entropy_rows(m, &g.normalized)?;
    let ls = soft_cross_entropy_rows(&transpose(m), &g.signal_distributions()?)?;
    Ok((lt + ls) / 2.0)
}

pub fn selfsup_loss(m: &[Vec<f64>]) -> Result<f64> {
    check_square(m, m.len())?;
    let diag: Vec<usize> = (0..m.len()).collect();
    let lt = cross_entropy_rows(m, &diag)?;
    let ls = cross_entropy_rows(&transpose(m), &diag)?;
    Ok((lt + ls) / 2.0)
}

/// Loss settings shared by training and validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub mode: LossMode,
    pub tau: f64,
    pub signal_targets: SignalTargets,
    /// Experimental: supervised targets are the normalized label-agreement
    /// distributions rather than their argmax.
    pub soft_targets: bool,
}

/// Targets for one batch: `(text_targets, signal_targets)`.
pub fn batch_targets(
    spec: &LossSpec,
    y_text: &[RelationshipLabel],
    y_signal: &[RelationshipLabel],
) -> Result<(Vec<usize>, Vec<usize>)> {
    match spec.mode {
        LossMode::Selfsup => {
            let diag: Vec<usize> = (0..y_text.len()).collect();
            Ok((diag.clone(), diag))
        }
        LossMode::Supervised => {
            let g = target_matrix(y_text, y_signal)?;
            Ok((g.text_targets(), g.signal_targets(spec.signal_targets)))
        }
    }
}

/// Contrastive loss on the tape from unnormalized `[N, d]` embeddings.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    z_text: Var,
    z_signal: Var,
    y_text: &[RelationshipLabel],
    y_signal: &[RelationshipLabel],
    spec: &LossSpec,
) -> Result<Var> {
    let n = y_text.len();
    if g.shape(z_text) != g.shape(z_signal) || g.shape(z_text)[0] != n || y_signal.len() != n {
        return Err(Error::Shape(format!(
            "text {:?} / signal {:?} embeddings vs {n} labels",
            g.shape(z_text),
            g.shape(z_signal)
        )));
    }
    let (tt, st) = batch_targets(spec, y_text, y_signal)?;
    let zt = g.l2_normalize_rows(z_text)?;
    let zs = g.l2_normalize_rows(z_signal)?;
    let m = g.matmul_t(zt, zs, false, true);
    let m = g.scale(m, T::lit(1.0 / spec.tau));
    let mt = g.transpose(m);
    let (lt, ls) = if spec.soft_targets && spec.mode == LossMode::Supervised {
        let tm = target_matrix(y_text, y_signal)?;
        let flat = |q: Vec<Vec<f64>>| q.into_iter().flatten().map(T::lit).collect::<Vec<T>>();
        let qs = flat(tm.signal_distributions()?);
        (
            g.soft_cross_entropy(m, flat(tm.normalized))?,
            g.soft_cross_entropy(mt, qs)?,
        )
    } else {
        (g.cross_entropy(m, tt)?, g.cross_entropy(mt, st)?)
    };
    let sum = g.add(lt, ls);
    Ok(g.scale(sum, T::lit(0.5)))
}
