use std::sync::Arc;

use rand::Rng as _;

use super::{gemm, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from the given seed.
    Train {
        seed: u64,
    },
    Eval,
}

/// Valid-key flags for attention over padded sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMask {
    /// `batch × keys` flags, row-major.
    pub valid: Vec<bool>,
    pub keys: usize,
}

impl KeyMask {
    pub fn new(valid: Vec<bool>, keys: usize) -> Self {
        assert_eq!(valid.len() % keys, 0);
        Self { valid, keys }
    }

    pub fn batch(&self) -> usize {
        self.valid.len() / self.keys
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddTrailing(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Reshape(Var),
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    MeanTokens {
        x: Var,
        valid: Option<Arc<KeyMask>>,
    },
    TakeToken {
        x: Var,
        index: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
    },
    AvgPool2(Var),
    MulConst {
        x: Var,
        mask: Vec<T>,
    },
    L2Rows {
        x: Var,
        inv_norms: Vec<T>,
    },
    Transpose(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        q: Vec<T>,
        probs: Vec<T>,
    },
    WeightedSum {
        x: Var,
        w: Vec<T>,
    },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    dropout_rng: Option<Rng>,
}

/// Gradients indexed by tape node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.param_vars
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.grads[v.0].as_ref())
    }

    /// Move out the gradient of every parameter, indexed by `ParamId`.
    pub fn into_param_grads(mut self) -> Vec<Option<Tensor<T>>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| self.grads[v.0].take()))
            .collect()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let one = T::one();
    let x2 = x * x;
    let u = c * (x + a * x2 * x);
    let t = u.tanh();
    let value = half * x * (one + t);
    let du = c * (one + T::lit(3.0) * a * x2);
    let deriv = half * (one + t) + half * x * (one - t * t) * du;
    (value, deriv)
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        let dropout_rng = match mode {
            Mode::Train { seed } => Some(rng::substream(seed, "dropout", 0)),
            Mode::Eval => None,
        };
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            mode,
            dropout_rng,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let needs_grad = !self.params.get(id).frozen;
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    /// Batched product. `a` is `[.., m, k]` (or `[.., k, m]` with `ta`); `b`
    /// is either a shared 2-D matrix or has the same leading axes as `a`.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(
            k, kb,
            "matmul inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})"
        );
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_shared = lead_b.is_empty();
        let batch: usize = lead_a.iter().product();
        if !b_shared {
            assert_eq!(lead_a, lead_b, "matmul batch axes differ");
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if batch == 1 || (b_shared && !ta) {
                // flatten leading axes into rows
                if b_shared && !ta {
                    gemm(batch * m, k, n, av, false, bv, tb, &mut out, T::zero());
                } else {
                    gemm(m, k, n, av, ta, bv, tb, &mut out, T::zero());
                }
            } else {
                crate::par::for_each_chunk_mut(&mut out, m * n, |i, c| {
                    let a_i = &av[i * m * k..(i + 1) * m * k];
                    let b_i = if b_shared {
                        bv
                    } else {
                        &bv[i * k * n..(i + 1) * k * n]
                    };
                    gemm(m, k, n, a_i, ta, b_i, tb, c, T::zero());
                });
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(out_shape, out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            needs,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{what}: shape mismatch");
        ta.data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let data = self.zip_same(a, b, "add", |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let data = self.zip_same(a, b, "sub", |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let data = self.zip_same(a, b, "mul", |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Mul(a, b), needs)
    }

    /// `a + b` where `b` matches the trailing axes of `a` (bias, positions).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..],
            "add_trailing: {sb:?} is not a suffix of {sa:?}"
        );
        let bv = self.value(b).data();
        let step = bv.len();
        let data = self
            .value(a)
            .data()
            .chunks(step)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(sa, data), Op::AddTrailing(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * s).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Scale(a, s), needs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| gelu_parts(x).0).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Gelu(a), needs)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        assert_eq!(self.value(gamma).numel(), d);
        assert_eq!(self.value(beta).numel(), d);
        let rows = t.numel() / d;
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); t.numel()];
        let mut rstd = vec![T::zero(); rows];
        for (r, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<T> = xhat
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(g.iter().zip(b))
                    .map(|(&h, (&gg, &bb))| h * gg + bb)
            })
            .collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Softmax over the last axis. With a key mask, the leading rows are
    /// grouped per batch element (`rows / mask.batch()` rows each) and masked
    /// keys receive zero probability.
    pub fn softmax(&mut self, x: Var, mask: Option<&KeyMask>) -> Var {
        let t = self.value(x);
        let n = t.last_dim();
        let rows = t.numel() / n;
        let rows_per_batch = mask.map(|m| {
            assert_eq!(m.keys, n, "mask width");
            assert_eq!(rows % m.batch(), 0, "mask batch");
            rows / m.batch()
        });
        let mut out = vec![T::zero(); t.numel()];
        for (r, (row, o)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let valid = mask.map(|m| {
                let b = r / rows_per_batch.unwrap();
                &m.valid[b * n..(b + 1) * n]
            });
            let ok = |j: usize| valid.is_none_or(|v| v[j]);
            let mx = row
                .iter()
                .enumerate()
                .filter(|(j, _)| ok(*j))
                .map(|(_, &v)| v)
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, (&v, oj)) in row.iter().zip(o.iter_mut()).enumerate() {
                if ok(j) {
                    *oj = (v - mx).exp();
                    sum += *oj;
                }
            }
            for oj in o.iter_mut() {
                *oj /= sum;
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out), Op::Softmax(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let needs = self.needs(x);
        self.push(t, Op::Reshape(x), needs)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "swap_axes12 needs rank 4");
        let dims = [s[0], s[1], s[2], s[3]];
        let out = swap12(self.value(x).data(), dims);
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![s[0], s[2], s[1], s[3]], out),
            Op::SwapAxes12 { x, dims },
            needs,
        )
    }

    /// Mean over the token axis of `[B, T, D]`, optionally over valid tokens only.
    pub fn mean_tokens(&mut self, x: Var, valid: Option<Arc<KeyMask>>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (b, t, d) = (s[0], s[1], s[2]);
        if let Some(m) = &valid {
            assert_eq!((m.batch(), m.keys), (b, t));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let mut count = 0usize;
            for ti in 0..t {
                if valid.as_ref().is_some_and(|m| !m.valid[bi * t + ti]) {
                    continue;
                }
                count += 1;
                let row = &xv[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
            let c = T::from_usize(count.max(1)).unwrap();
            for o in out[bi * d..(bi + 1) * d].iter_mut() {
                *o /= c;
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b, d], out),
            Op::MeanTokens { x, valid },
            needs,
        )
    }

    /// Token `index` of every sequence in `[B, T, D]`.
    pub fn take_token(&mut self, x: Var, index: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        assert!(index < t);
        let xv = self.value(x).data();
        let out = (0..b)
            .flat_map(|bi| {
                xv[(bi * t + index) * d..(bi * t + index + 1) * d]
                    .iter()
                    .copied()
            })
            .collect();
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b, d], out),
            Op::TakeToken { x, index },
            needs,
        )
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[0]);
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::SliceRows { x, start }, needs)
    }

    /// Concatenate two `[.., n]` tensors along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(
            sa[..sa.len() - 1],
            sb[..sb.len() - 1],
            "concat leading axes"
        );
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = av
            .chunks(da)
            .zip(bv.chunks(db))
            .flat_map(|(x, y)| x.iter().chain(y).copied())
            .collect();
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Concat { a, b }, needs)
    }

    /// Rows of `table` (`[V, D]`) selected by `ids`; output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let s = self.shape(table).to_vec();
        let (v, d) = (s[0], s[1]);
        let tv = self.value(table).data();
        let data = ids
            .iter()
            .flat_map(|&i| {
                assert!(i < v, "token id {i} outside vocabulary of {v}");
                tv[i * d..(i + 1) * d].iter().copied()
            })
            .collect();
        let n = ids.len();
        let needs = self.needs(table);
        self.push(
            Tensor::new(vec![n, d], data),
            Op::Embedding { table, ids },
            needs,
        )
    }

    /// Sliding windows for a same-padded, stride-1 convolution over
    /// channels-last `[B, L, C]`: output `[B, L, kernel*C]`, zero padding.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let pad = kernel / 2;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * l * kernel * c];
        for bi in 0..b {
            for li in 0..l {
                let row = &mut out[(bi * l + li) * kernel * c..(bi * l + li + 1) * kernel * c];
                for ki in 0..kernel {
                    let src = li as isize + ki as isize - pad as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let src = src as usize;
                    row[ki * c..(ki + 1) * c]
                        .copy_from_slice(&xv[(bi * l + src) * c..(bi * l + src + 1) * c]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Tensor::new(vec![b, l, kernel * c], out),
            Op::Im2Col { x, kernel },
            needs,
        )
    }

    /// Average of adjacent pairs along axis 1 of `[B, L, C]` (odd tail dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (b, l, c) = (s[0], s[1], s[2]);
        let lo = l / 2;
        let xv = self.value(x).data();
        let half = T::lit(0.5);
        let mut out = vec![T::zero(); b * lo * c];
        for bi in 0..b {
            for j in 0..lo {
                let r0 = &xv[(bi * l + 2 * j) * c..(bi * l + 2 * j + 1) * c];
                let r1 = &xv[(bi * l + 2 * j + 1) * c..(bi * l + 2 * j + 2) * c];
                for ((o, &p), &q) in out[(bi * lo + j) * c..(bi * lo + j + 1) * c]
                    .iter_mut()
                    .zip(r0)
                    .zip(r1)
                {
                    *o = (p + q) * half;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![b, lo, c], out), Op::AvgPool2(x), needs)
    }

    /// Inverted dropout; identity in eval mode or for `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let n = self.value(x).numel();
        let Some(r) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..n)
            .map(|_| if r.random_bool(rate) { T::zero() } else { keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::MulConst { x, mask }, needs)
    }

    /// Divide each row of `[N, D]` by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let mut inv_norms = Vec::with_capacity(t.numel() / d);
        let mut out = Vec::with_capacity(t.numel());
        for (r, row) in t.data().chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "embedding row {r} has norm {norm:?}; encoder output collapsed"
                )));
            }
            let inv = T::one() / norm;
            inv_norms.push(inv);
            out.extend(row.iter().map(|&v| v * inv));
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out), Op::L2Rows { x, inv_norms }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (r, c) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![c, r], out), Op::Transpose(x), needs)
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        assert_eq!(targets.len(), rows);
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for (i, row) in t.data().chunks(cols).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[targets[i]];
            for (p, &v) in probs[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / T::from_usize(rows).unwrap();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            needs,
        ))
    }

    /// Mean over rows of `-sum_j q[i][j] log softmax(logits[i])[j]`, with each
    /// row of `q` a distribution.
    pub fn soft_cross_entropy(&mut self, logits: Var, q: Vec<T>) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        assert_eq!(s.len(), 2);
        let (rows, cols) = (s[0], s[1]);
        assert_eq!(q.len(), rows * cols);
        if !t.is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        let mut probs = vec![T::zero(); rows * cols];
        let mut total = T::zero();
        for (i, row) in t.data().chunks(cols).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            let qi = &q[i * cols..(i + 1) * cols];
            for ((p, &v), &w) in probs[i * cols..(i + 1) * cols].iter_mut().zip(row).zip(qi) {
                *p = (v - lse).exp();
                total += w * (lse - v);
            }
        }
        let loss = total / T::from_usize(rows).unwrap();
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, q, probs },
            needs,
        ))
    }

    /// `sum(x * w)` for a constant `w`; turns any output into a scalar.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Var {
        let t = self.value(x);
        assert_eq!(t.numel(), w.len());
        let s: T = t.data().iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, needs)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gi) = grads[i].take() else { continue };
            self.backprop_node(i, &gi, &mut grads);
            grads[i] = Some(gi);
        }
        Grads {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn backprop_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        let gyd = gy.data();
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(self.value(v).shape().to_vec(), g)),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let flat = batch == 1 || (b_shared && !ta);
                if self.needs(a) {
                    let mut ga = vec![T::zero(); av.len()];
                    if flat {
                        let rows = if batch > 1 { batch * m } else { m };
                        if ta {
                            gemm(k, n, m, bv, tb, gyd, true, &mut ga, T::zero());
                        } else {
                            gemm(rows, n, k, gyd, false, bv, !tb, &mut ga, T::zero());
                        }
                    } else {
                        crate::par::for_each_chunk_mut(&mut ga, m * k, |bi, gai| {
                            let gyi = &gyd[bi * m * n..(bi + 1) * m * n];
                            let bi_v = if b_shared {
                                bv
                            } else {
                                &bv[bi * k * n..(bi + 1) * k * n]
                            };
                            if ta {
                                gemm(k, n, m, bi_v, tb, gyi, true, gai, T::zero());
                            } else {
                                gemm(m, n, k, gyi, false, bi_v, !tb, gai, T::zero());
                            }
                        });
                    }
                    acc(a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![T::zero(); bv.len()];
                    if flat {
                        let rows = if batch > 1 { batch * m } else { m };
                        if tb {
                            gemm(n, rows, k, gyd, true, av, ta, &mut gb, T::zero());
                        } else {
                            gemm(k, rows, n, av, !ta, gyd, false, &mut gb, T::zero());
                        }
                    } else if b_shared {
                        for bi in 0..batch {
                            let gyi = &gyd[bi * m * n..(bi + 1) * m * n];
                            let ai = &av[bi * m * k..(bi + 1) * m * k];
                            if tb {
                                gemm(n, m, k, gyi, true, ai, ta, &mut gb, T::one());
                            } else {
                                gemm(k, m, n, ai, !ta, gyi, false, &mut gb, T::one());
                            }
                        }
                    } else {
                        crate::par::for_each_chunk_mut(&mut gb, k * n, |bi, gbi| {
                            let gyi = &gyd[bi * m * n..(bi + 1) * m * n];
                            let ai = &av[bi * m * k..(bi + 1) * m * k];
                            if tb {
                                gemm(n, m, k, gyi, true, ai, ta, gbi, T::zero());
                            } else {
                                gemm(k, m, n, ai, !ta, gyi, false, gbi, T::zero());
                            }
                        });
                    }
                    acc(b, gb);
                }
            }
            &Op::Add(a, b) => {
                acc(a, gyd.to_vec());
                acc(b, gyd.to_vec());
            }
            &Op::Sub(a, b) => {
                acc(a, gyd.to_vec());
                acc(b, gyd.iter().map(|&g| -g).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.needs(a) {
                    acc(a, gyd.iter().zip(bv).map(|(&g, &x)| g * x).collect());
                }
                if self.needs(b) {
                    acc(b, gyd.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            &Op::AddTrailing(a, b) => {
                acc(a, gyd.to_vec());
                if self.needs(b) {
                    let step = self.value(b).numel();
                    let mut gb = vec![T::zero(); step];
                    for row in gyd.chunks(step) {
                        for (o, &g) in gb.iter_mut().zip(row) {
                            *o += g;
                        }
                    }
                    acc(b, gb);
                }
            }
            &Op::Scale(a, s) => acc(a, gyd.iter().map(|&g| g * s).collect()),
            &Op::Gelu(a) => {
                let av = self.value(a).data();
                acc(
                    a,
                    gyd.iter()
                        .zip(av)
                        .map(|(&g, &x)| g * gelu_parts(x).1)
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.last_dim();
                let gv = self.value(*gamma).data();
                let dn = T::from_usize(d).unwrap();
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); xhat.len()];
                    for (r, ((gyr, xh), gxr)) in gyd
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = gyr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= dn;
                        mean_dxh_xh /= dn;
                        for j in 0..d {
                            let dxh = gyr[j] * gv[j];
                            gxr[j] = rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    acc(*x, gx);
                }
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![T::zero(); d];
                    let mut gb = vec![T::zero(); d];
                    for (gyr, xh) in gyd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gyr[j] * xh[j];
                            gb[j] += gyr[j];
                        }
                    }
                    acc(*gamma, gg);
                    acc(*beta, gb);
                }
            }
            &Op::Softmax(x) => {
                let n = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for ((yr, gr), gxr) in y.data().chunks(n).zip(gyd.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(x, gx);
            }
            &Op::Reshape(x) => acc(x, gyd.to_vec()),
            &Op::SwapAxes12 { x, dims } => {
                let [a, b, c, d] = dims;
                acc(x, swap12(gyd, [a, c, b, d]));
            }
            Op::MeanTokens { x, valid } => {
                let s = self.shape(*x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    let ok = |ti: usize| valid.as_ref().is_none_or(|m| m.valid[bi * t + ti]);
                    let count = (0..t).filter(|&ti| ok(ti)).count().max(1);
                    let inv = T::one() / T::from_usize(count).unwrap();
                    for ti in (0..t).filter(|&ti| ok(ti)) {
                        let dst = &mut gx[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                        for (o, &g) in dst.iter_mut().zip(&gyd[bi * d..(bi + 1) * d]) {
                            *o = g * inv;
                        }
                    }
                }
                acc(*x, gx);
            }
            &Op::TakeToken { x, index } => {
                let s = self.shape(x);
                let (b, t, d) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); b * t * d];
                for bi in 0..b {
                    gx[(bi * t + index) * d..(bi * t + index + 1) * d]
                        .copy_from_slice(&gyd[bi * d..(bi + 1) * d]);
                }
                acc(x, gx);
            }
            &Op::SliceRows { x, start } => {
                let xs = self.value(x);
                let inner: usize = xs.shape()[1..].iter().product();
                let mut gx = vec![T::zero(); xs.numel()];
                gx[start * inner..start * inner + gyd.len()].copy_from_slice(gyd);
                acc(x, gx);
            }
            &Op::Concat { a, b } => {
                let da = self.value(a).last_dim();
                let db = self.value(b).last_dim();
                let mut ga = Vec::with_capacity(self.value(a).numel());
                let mut gb = Vec::with_capacity(self.value(b).numel());
                for row in gyd.chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                acc(a, ga);
                acc(b, gb);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut gt = vec![T::zero(); tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &g) in gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&gyd[r * d..(r + 1) * d])
                    {
                        *o += g;
                    }
                }
                acc(*table, gt);
            }
            &Op::Im2Col { x, kernel } => {
                let s = self.shape(x);
                let (b, l, c) = (s[0], s[1], s[2]);
                let pad = kernel / 2;
                let mut gx = vec![T::zero(); b * l * c];
                for bi in 0..b {
                    for li in 0..l {
                        let row = &gyd[(bi * l + li) * kernel * c..(bi * l + li + 1) * kernel * c];
                        for ki in 0..kernel {
                            let src = li as isize + ki as isize - pad as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let src = src as usize;
                            for (o, &g) in gx[(bi * l + src) * c..(bi * l + src + 1) * c]
                                .iter_mut()
                                .zip(&row[ki * c..(ki + 1) * c])
                            {
                                *o += g;
                            }
                        }
                    }
                }
                acc(x, gx);
            }
            &Op::AvgPool2(x) => {
                let s = self.shape(x);
                let (b, l, c) = (s[0], s[1], s[2]);
                let lo = l / 2;
                let half = T::lit(0.5);
                let mut gx = vec![T::zero(); b * l * c];
                for bi in 0..b {
                    for j in 0..lo {
                        let g = &gyd[(bi * lo + j) * c..(bi * lo + j + 1) * c];
                        for r in [2 * j, 2 * j + 1] {
                            for (o, &gv) in
                                gx[(bi * l + r) * c..(bi * l + r + 1) * c].iter_mut().zip(g)
                            {
                                *o = gv * half;
                            }
                        }
                    }
                }
                acc(x, gx);
            }
            Op::MulConst { x, mask } => {
                acc(*x, gyd.iter().zip(mask).map(|(&g, &m)| g * m).collect())
            }
            Op::L2Rows { x, inv_norms } => {
                let d = y.last_dim();
                let mut gx = vec![T::zero(); y.numel()];
                for (r, ((yr, gr), gxr)) in y
                    .data()
                    .chunks(d)
                    .zip(gyd.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gxr[j] = (gr[j] - yr[j] * dot) * inv_norms[r];
                    }
                }
                acc(*x, gx);
            }
            &Op::Transpose(x) => {
                let s = y.shape();
                let (r, c) = (s[0], s[1]);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = gyd[i * c + j];
                    }
                }
                acc(x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = gyd[0] / T::from_usize(rows).unwrap();
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * cols + t] -= scale;
                }
                acc(*logits, gx);
            }
            Op::SoftCrossEntropy { logits, q, probs } => {
                let rows = self.shape(*logits)[0];
                let scale = gyd[0] / T::from_usize(rows).unwrap();
                acc(
                    *logits,
                    probs
                        .iter()
                        .zip(q)
                        .map(|(&p, &w)| (p - w) * scale)
                        .collect(),
                );
            }
            Op::WeightedSum { x, w } => acc(*x, w.iter().map(|&v| v * gyd[0]).collect()),
        }
    }
}

fn swap12<T: Copy + Default>(src: &[T], [a, b, c, d]: [usize; 4]) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let s0 = ((ai * b + bi) * c + ci) * d;
                let d0 = ((ai * c + ci) * b + bi) * d;
                out[d0..d0 + d].copy_from_slice(&src[s0..s0 + d]);
            }
        }
    }
    out
}
