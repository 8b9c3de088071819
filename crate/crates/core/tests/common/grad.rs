//! Finite-difference scenarios shared by the gradient tests and the
//! acceptance harness.

use rand::Rng as _;
use tsdiff_core::loss::{contrastive_loss, LossMode, LossSpec, SignalTargets};
use tsdiff_core::nn::layers::{MultiHeadAttention, ProjectionHead};
use tsdiff_core::nn::{
    DualEncoder, EncoderConfig, MergeMethod, Pooling, SignalArch, TextBatch, Vocab,
};
use tsdiff_core::rng::substream;
use tsdiff_core::tensor::{Graph, ParamGroup, ParamStore, Tensor, Var};

use super::*;

pub const TOL: f64 = 1e-3;
const H: f64 = 1e-5;

fn weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = substream(seed, "w", 0);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn scalarize(g: &mut Graph<'_, f64>, v: Var, seed: u64) -> Var {
    let n = g.value(v).numel();
    g.weighted_sum(v, weights(n, seed))
}

pub fn projection_head() -> Vec<(String, GradCheck)> {
    let mut rng = substream(4, "head", 0);
    let mut store = ParamStore::<f64>::new();
    let head = ProjectionHead::new(&mut store, "head", 6, 5, &mut rng);
    let x: Tensor<f64> = rand_tensor(vec![4, 6], &mut rng);
    let xc = x.clone();
    let p = check_params(&mut store, 12, H, &|g| {
        let v = g.constant(xc.clone());
        let y = head.forward(g, v, 0.1).unwrap();
        scalarize(g, y, 1)
    });
    let i = check_input_on(&store, &x, H, &|g, v| {
        let y = head.forward(g, v, 0.1).unwrap();
        scalarize(g, y, 2)
    });
    vec![("head params".into(), p), ("head input".into(), i)]
}

pub fn cross_attention() -> Vec<(String, GradCheck)> {
    let mut rng = substream(5, "xattn", 0);
    let mut store = ParamStore::<f64>::new();
    let to_ref =
        MultiHeadAttention::new(&mut store, "cross.ref", ParamGroup::Signal, 8, 2, &mut rng);
    let to_tgt =
        MultiHeadAttention::new(&mut store, "cross.tgt", ParamGroup::Signal, 8, 2, &mut rng);
    // refs then tgts stacked on the batch axis
    let x: Tensor<f64> = rand_tensor(vec![6, 4, 8], &mut rng);
    let run = |g: &mut Graph<'_, f64>, x: Var| {
        let r = g.slice_rows(x, 0, 3);
        let t = g.slice_rows(x, 3, 3);
        let a = to_ref.forward(g, r, t, None).unwrap();
        let b = to_tgt.forward(g, t, r, None).unwrap();
        let r2 = g.add(r, a);
        let t2 = g.add(t, b);
        let pr = g.mean_tokens(r2, None);
        let pt = g.mean_tokens(t2, None);
        let d = g.sub(pt, pr);
        scalarize(g, d, 3)
    };
    let xc = x.clone();
    let p = check_params(&mut store, 16, H, &|g| {
        let v = g.constant(xc.clone());
        run(g, v)
    });
    let i = check_input_on(&store, &x, H, &|g, v| run(g, v));
    vec![
        ("cross-attention params".into(), p),
        ("cross-attention input".into(), i),
    ]
}

pub fn loss_modes() -> Vec<(String, GradCheck)> {
    let mut out = Vec::new();
    let mut rng = substream(6, "lossgrad", 0);
    let n = 6;
    let yt = labels(&[1, 3, 1, 7, 3, 1]);
    let ys = labels(&[3, 1, 1, 7, 1, 3]);
    let z: Tensor<f64> = rand_tensor(vec![2 * n, 5], &mut rng);
    let variants = [
        (LossMode::Supervised, false),
        (LossMode::Supervised, true),
        (LossMode::Selfsup, false),
    ];
    for (mode, soft) in variants {
        for tau in [1.0, 0.3] {
            let spec = LossSpec {
                mode,
                tau,
                signal_targets: SignalTargets::ColumnArgmax,
                soft_targets: soft,
            };
            let c = check_input(&z, H, &|g, v| {
                let zt = g.slice_rows(v, 0, n);
                let zs = g.slice_rows(v, n, n);
                contrastive_loss(g, zt, zs, &yt, &ys, &spec).unwrap()
            });
            let kind = if soft { " soft" } else { "" };
            out.push((format!("{mode:?}{kind} loss tau {tau}"), c));
        }
    }
    out
}

fn tiny(arch: SignalArch, cross: bool, merge: MergeMethod, pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        signal_arch: arch,
        embed_dim: 8,
        series_length: 32,
        use_cross_attention: cross,
        merge_method: merge,
        attention_heads: 2,
        conv_channels: vec![4, 8],
        conv_kernels: vec![3, 5],
        patch_size: 8,
        transformer_layers: 2,
        transformer_heads: 2,
        transformer_ff: 16,
        text_layers: 1,
        text_heads: 2,
        text_ff: 16,
        text_max_len: 10,
        text_pooling: pooling,
        dropout_rate: 0.1,
        freeze_text_encoder: false,
    }
}

fn end_to_end(config: EncoderConfig, seed: u64) -> GradCheck {
    const N: usize = 4;
    let texts = [
        "the target has larger noise",
        "a smaller spike in the target",
        "stronger upward trend than the reference",
        "the target has larger noise than before",
    ];
    let vocab = Vocab::build(texts.iter().copied());
    let model = DualEncoder::<f64>::new(config, vocab, seed).unwrap();
    let mut rng = substream(seed, "e2e", 0);
    let series: Vec<Vec<f64>> = (0..2 * N)
        .map(|_| (0..32).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = series[..N].iter().map(Vec::as_slice).collect();
    let tgts: Vec<&[f64]> = series[N..].iter().map(Vec::as_slice).collect();
    let seqs: Vec<Vec<usize>> = texts.iter().map(|t| model.tokenize(t)).collect();
    let batch = TextBatch::new(&seqs).unwrap();
    let y = labels(&[9, 5, 1, 9]);
    let spec = LossSpec {
        mode: LossMode::Supervised,
        tau: 1.0,
        signal_targets: SignalTargets::ColumnArgmax,
        soft_targets: false,
    };
    let mut store = model.params().clone();
    check_params(&mut store, 6, H, &|g| {
        let zs = model.signal_tower(g, &refs, &tgts).unwrap();
        let zt = model.text_tower(g, &batch).unwrap();
        contrastive_loss(g, zt, zs, &y, &y, &spec).unwrap()
    })
}

pub fn end_to_end_models() -> Vec<(String, GradCheck)> {
    let cases = [
        (
            SignalArch::Transformer,
            false,
            MergeMethod::Diff,
            Pooling::Mean,
        ),
        (
            SignalArch::Transformer,
            true,
            MergeMethod::Concat,
            Pooling::Summary,
        ),
        (SignalArch::Conv, true, MergeMethod::Diff, Pooling::Mean),
        (SignalArch::Conv, false, MergeMethod::Concat, Pooling::Mean),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (arch, cross, merge, pool))| {
            let c = end_to_end(tiny(arch, cross, merge, pool), 10 + i as u64);
            (format!("{arch:?} cross={cross} {merge:?} {pool:?}"), c)
        })
        .collect()
}

pub fn all() -> Vec<(String, GradCheck)> {
    let mut out = projection_head();
    out.extend(cross_attention());
    out.extend(loss_modes());
    out.extend(end_to_end_models());
    out
}
