//! Independent reference implementations used by the integration tests and
//! the acceptance harness.

#![allow(dead_code)]

pub mod grad;

use rand::Rng as _;
use tsdiff_core::perturb::RelationshipLabel;
use tsdiff_core::rng::Rng;
use tsdiff_core::tensor::{Grads, Graph, Mode, ParamStore, Scalar, Tensor, Var};

pub fn labels(v: &[u8]) -> Vec<RelationshipLabel> {
    v.iter()
        .map(|&l| RelationshipLabel::new(l).unwrap())
        .collect()
}

pub fn random_labels(n: usize, distinct_max: u8, rng: &mut Rng) -> Vec<RelationshipLabel> {
    (0..n)
        .map(|_| RelationshipLabel::new(rng.random_range(1..=distinct_max)).unwrap())
        .collect()
}

/// Nested-loop target matrix: `(binary, normalized)`.
pub fn oracle_targets(
    yt: &[RelationshipLabel],
    ys: &[RelationshipLabel],
) -> (Vec<Vec<u8>>, Vec<Vec<f64>>) {
    let n = yt.len();
    let mut bin = vec![vec![0u8; ys.len()]; n];
    for i in 0..n {
        for j in 0..ys.len() {
            if yt[i] == ys[j] {
                bin[i][j] = 1;
            }
        }
    }
    let mut norm = vec![vec![0.0; ys.len()]; n];
    for i in 0..n {
        let mut count = 0u32;
        for j in 0..ys.len() {
            count += u32::from(bin[i][j]);
        }
        for j in 0..ys.len() {
            if bin[i][j] == 1 {
                norm[i][j] = 1.0 / f64::from(count);
            }
        }
    }
    (bin, norm)
}

/// `-ln(exp(row[t]) / sum exp(row))` by explicit summation, no shift.
fn oracle_ce(row: &[f64], t: usize) -> f64 {
    let mut z = 0.0;
    for &v in row {
        z += v.exp();
    }
    -(row[t].exp() / z).ln()
}

/// Brute-force supervised loss: text `i` targets the first signal with its
/// label, signal `j` the first text with its label (index 0 if none).
pub fn oracle_supervised(
    m: &[Vec<f64>],
    yt: &[RelationshipLabel],
    ys: &[RelationshipLabel],
) -> f64 {
    let n = m.len();
    let mut lt = 0.0;
    for i in 0..n {
        let mut t = 0;
        for j in 0..n {
            if ys[j] == yt[i] {
                t = j;
                break;
            }
        }
        lt += oracle_ce(&m[i], t);
    }
    let mut ls = 0.0;
    for j in 0..n {
        let mut t = 0;
        for i in 0..n {
            if yt[i] == ys[j] {
                t = i;
                break;
            }
        }
        let col: Vec<f64> = (0..n).map(|i| m[i][j]).collect();
        ls += oracle_ce(&col, t);
    }
    (lt / n as f64 + ls / n as f64) / 2.0
}

/// Brute-force soft-target loss: text `i` spreads its target evenly over the
/// signals with its label, signal `j` over the texts with its label.
pub fn oracle_soft(m: &[Vec<f64>], yt: &[RelationshipLabel], ys: &[RelationshipLabel]) -> f64 {
    let n = m.len();
    let mut lt = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| ys[j] == yt[i]).collect();
        for &j in &pos {
            lt += oracle_ce(&m[i], j) / pos.len() as f64;
        }
    }
    let mut ls = 0.0;
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| m[i][j]).collect();
        let pos: Vec<usize> = (0..n).filter(|&i| yt[i] == ys[j]).collect();
        for &i in &pos {
            ls += oracle_ce(&col, i) / pos.len() as f64;
        }
    }
    (lt / n as f64 + ls / n as f64) / 2.0
}

pub fn oracle_selfsup(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut lt = 0.0;
    let mut ls = 0.0;
    for i in 0..n {
        lt += oracle_ce(&m[i], i);
        let col: Vec<f64> = (0..n).map(|k| m[k][i]).collect();
        ls += oracle_ce(&col, i);
    }
    (lt / n as f64 + ls / n as f64) / 2.0
}

/// Precision walk: at every relevant rank, count relevant items in the prefix.
pub fn oracle_ap(rel: &[bool]) -> f64 {
    let r = rel.iter().filter(|&&x| x).count();
    let mut sum = 0.0;
    for k in 0..rel.len() {
        if rel[k] {
            let hits = rel[..=k].iter().filter(|&&x| x).count();
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / r as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub worst_at: String,
}

impl GradCheck {
    pub fn ok(&self, tol: f64) -> bool {
        self.checked > 0 && self.worst <= tol
    }
}

/// Relative error with an absolute floor so entries that are zero up to
/// rounding do not dominate.
fn fd_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central differences for up to `per_param` entries of every trainable
/// parameter. `f` builds the scalar loss on a fresh graph.
pub fn check_params(
    params: &mut ParamStore<f64>,
    per_param: usize,
    h: f64,
    f: &dyn Fn(&mut Graph<'_, f64>) -> Var,
) -> GradCheck {
    let grads: Vec<Option<Tensor<f64>>> = {
        let mut g = Graph::new(params, Mode::Eval);
        let loss = f(&mut g);
        g.backward(loss).into_param_grads()
    };
    let eval = |p: &ParamStore<f64>| {
        let mut g = Graph::new(p, Mode::Eval);
        let loss = f(&mut g);
        g.value(loss).data()[0]
    };
    let ids: Vec<_> = params
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.frozen))
        .collect();
    let mut out = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for (id, name, frozen) in ids {
        if frozen {
            continue;
        }
        let n = params.value(id).numel();
        let step = (n / per_param).max(1);
        for k in (0..n).step_by(step).take(per_param) {
            let orig = params.value(id).data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + h;
            let up = eval(params);
            params.get_mut(id).value.data_mut()[k] = orig - h;
            let down = eval(params);
            params.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[k]);
            let e = fd_err(analytic, numeric);
            out.checked += 1;
            if e > out.worst {
                out.worst = e;
                out.worst_at = format!("{name}[{k}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    out
}

/// Central differences with respect to a graph input built from `x`.
pub fn check_input(
    x: &Tensor<f64>,
    h: f64,
    f: &dyn Fn(&mut Graph<'_, f64>, Var) -> Var,
) -> GradCheck {
    check_input_on(&ParamStore::new(), x, h, f)
}

/// As [`check_input`], with `f` free to read parameters from `store`.
pub fn check_input_on(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    h: f64,
    f: &dyn Fn(&mut Graph<'_, f64>, Var) -> Var,
) -> GradCheck {
    let analytic = {
        let mut g = Graph::new(store, Mode::Eval);
        let v = g.input(x.clone());
        let loss = f(&mut g, v);
        let grads: Grads<f64> = g.backward(loss);
        grads.wrt(v).cloned().unwrap()
    };
    let eval = |t: Tensor<f64>| {
        let mut g = Graph::new(store, Mode::Eval);
        let v = g.input(t);
        let loss = f(&mut g, v);
        g.value(loss).data()[0]
    };
    let mut out = GradCheck {
        checked: 0,
        worst: 0.0,
        worst_at: String::new(),
    };
    for k in 0..x.numel() {
        let mut up = x.clone();
        up.data_mut()[k] += h;
        let mut down = x.clone();
        down.data_mut()[k] -= h;
        let numeric = (eval(up) - eval(down)) / (2.0 * h);
        let e = fd_err(analytic.data()[k], numeric);
        out.checked += 1;
        if e > out.worst {
            out.worst = e;
            out.worst_at = format!(
                "input[{k}] analytic {:e} numeric {numeric:e}",
                analytic.data()[k]
            );
        }
    }
    out
}

/// Deterministic pseudo-random tensor in `[-1, 1)`.
pub fn rand_tensor<T: Scalar>(shape: Vec<usize>, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data)
}

/// Mean AP of `trials` uniformly shuffled rankings with `r` positives in `n`.
pub fn random_ranking_map(n: usize, r: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = tsdiff_core::rng::substream(seed, "random-ranking", 0);
    let mut rel: Vec<bool> = (0..n).map(|i| i < r).collect();
    let mut sum = 0.0;
    for _ in 0..trials {
        rand::seq::SliceRandom::shuffle(rel.as_mut_slice(), &mut rng);
        sum += tsdiff_core::retrieval::average_precision(&rel).unwrap();
    }
    sum / trials as f64
}

/// Closed-form expected AP of a uniformly random ranking:
/// `((r-1)/(n-1) * (n - H_n) + H_n) / n` with `H_n` the harmonic number.
pub fn expected_random_ap(n: usize, r: usize) -> f64 {
    let (nf, rf) = (n as f64, r as f64);
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    ((rf - 1.0) / (nf - 1.0) * (nf - h) + h) / nf
}
