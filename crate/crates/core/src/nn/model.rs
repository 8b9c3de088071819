use std::sync::Arc;

use super::config::{EncoderConfig, MergeMethod, Pooling, SignalArch};
use super::layers::{
    ConvBlock, EncoderLayer, LayerNorm, Linear, MultiHeadAttention, ProjectionHead,
};
use super::tokenizer::{Vocab, PAD};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, KeyMask, Mode, ParamGroup, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
enum SignalBody {
    Transformer {
        patch: Linear,
        pos: crate::tensor::ParamId,
        layers: Vec<EncoderLayer>,
        ln: LayerNorm,
    },
    Conv {
        blocks: Vec<ConvBlock>,
        token: Linear,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    signal: SignalBody,
    cross: Option<(MultiHeadAttention, MultiHeadAttention)>,
    signal_head: ProjectionHead,
    tok_embed: crate::tensor::ParamId,
    tok_pos: crate::tensor::ParamId,
    text_layers: Vec<EncoderLayer>,
    text_ln: LayerNorm,
    text_head: ProjectionHead,
}

impl Layout {
    fn build<T: Scalar>(
        c: &EncoderConfig,
        vocab_len: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Self {
        let d = c.embed_dim;
        let sg = ParamGroup::Signal;
        let signal = match c.signal_arch {
            SignalArch::Transformer => SignalBody::Transformer {
                patch: Linear::new(store, "signal.patch", sg, c.patch_size, d, rng),
                pos: store.add_fan_in("signal.pos", sg, vec![c.signal_tokens(), d], d, rng),
                layers: (0..c.transformer_layers)
                    .map(|i| {
                        EncoderLayer::new(
                            store,
                            &format!("signal.layer{i}"),
                            sg,
                            d,
                            c.transformer_heads,
                            c.transformer_ff,
                            rng,
                        )
                    })
                    .collect(),
                ln: LayerNorm::new(store, "signal.ln", sg, d),
            },
            SignalArch::Conv => {
                let mut inp = 1;
                let blocks = c
                    .conv_channels
                    .iter()
                    .zip(&c.conv_kernels)
                    .enumerate()
                    .map(|(i, (&ch, &k))| {
                        let b = ConvBlock::new(store, &format!("signal.conv{i}"), inp, ch, k, rng);
                        inp = ch;
                        b
                    })
                    .collect();
                SignalBody::Conv {
                    blocks,
                    token: Linear::new(store, "signal.token", sg, inp, d, rng),
                }
            }
        };
        let cross = c.use_cross_attention.then(|| {
            (
                MultiHeadAttention::new(store, "cross.ref", sg, d, c.attention_heads, rng),
                MultiHeadAttention::new(store, "cross.tgt", sg, d, c.attention_heads, rng),
            )
        });
        let signal_head = ProjectionHead::new(store, "head.signal", c.merged_dim(), d, rng);
        let tg = ParamGroup::Text;
        let tok_embed = store.add_fan_in("text.embed", tg, vec![vocab_len, d], d, rng);
        let tok_pos = store.add_fan_in("text.pos", tg, vec![c.text_max_len, d], d, rng);
        let text_layers = (0..c.text_layers)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &format!("text.layer{i}"),
                    tg,
                    d,
                    c.text_heads,
                    c.text_ff,
                    rng,
                )
            })
            .collect();
        let text_ln = LayerNorm::new(store, "text.ln", tg, d);
        let text_head = ProjectionHead::new(store, "head.text", d, d, rng);
        Self {
            signal,
            cross,
            signal_head,
            tok_embed,
            tok_pos,
            text_layers,
            text_ln,
            text_head,
        }
    }
}

/// Shared signal tower and text tower mapping into one embedding space.
#[derive(Debug, Clone)]
pub struct DualEncoder<T: Scalar> {
    config: EncoderConfig,
    vocab: Vocab,
    params: ParamStore<T>,
    layout: Layout,
}

/// Token ids padded into a batch with a validity mask.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub len: usize,
    pub mask: Arc<KeyMask>,
}

impl TextBatch {
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput(
                "text batch contains an empty token sequence".into(),
            ));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend(s.iter().copied().chain(std::iter::repeat(PAD)).take(len));
            valid.extend((0..len).map(|i| i < s.len()));
        }
        Ok(Self {
            ids,
            len,
            mask: Arc::new(KeyMask::new(valid, len)),
        })
    }

    pub fn batch(&self) -> usize {
        self.ids.len() / self.len
    }
}

/// Inference batch size for embedding many items.
const EMBED_CHUNK: usize = 64;

impl<T: Scalar> DualEncoder<T> {
    /// Freshly initialized model; all weights drawn from the `init` stream of `seed`.
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng::substream(seed, "init", 0);
        let layout = Layout::build(&config, vocab.len(), &mut params, &mut r);
        let mut m = Self {
            config,
            vocab,
            params,
            layout,
        };
        m.apply_freeze();
        Ok(m)
    }

    /// Rebuild from stored tensors; names and shapes must match the config.
    pub fn from_tensors(
        config: EncoderConfig,
        vocab: Vocab,
        tensors: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let mut m = Self::new(config, vocab, 0)?;
        if tensors.len() != m.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {}",
                tensors.len(),
                m.params.len()
            )));
        }
        for (name, t) in tensors {
            let id = m
                .params
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            let p = m.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(m)
    }

    fn apply_freeze(&mut self) {
        self.params
            .set_group_frozen(ParamGroup::Text, self.config.freeze_text_encoder);
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> DualEncoder<U> {
        DualEncoder {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn graph(&self, mode: Mode) -> Graph<'_, T> {
        Graph::new(&self.params, mode)
    }

    fn series_input(&self, g: &mut Graph<'_, T>, series: &[&[f64]]) -> Result<Var> {
        let l = self.config.series_length;
        let mut data = Vec::with_capacity(series.len() * l);
        for s in series {
            if s.len() != l {
                return Err(Error::InvalidInput(format!(
                    "series has length {}, model expects {l}",
                    s.len()
                )));
            }
            data.extend(s.iter().map(|&v| T::lit(v)));
        }
        Ok(g.constant(Tensor::new(vec![series.len(), l], data)))
    }

    /// Token sequences `[B, tokens, d]` for a batch of series.
    pub fn encode_signal(&self, g: &mut Graph<'_, T>, series: &[&[f64]]) -> Result<Var> {
        let b = series.len();
        let x = self.series_input(g, series)?;
        let c = &self.config;
        let rate = c.dropout_rate;
        match &self.layout.signal {
            SignalBody::Transformer {
                patch,
                pos,
                layers,
                ln,
            } => {
                let t = c.signal_tokens();
                let x = g.reshape(x, vec![b, t, c.patch_size]);
                let x = patch.forward(g, x);
                let p = g.param(*pos);
                let mut x = g.add_trailing(x, p);
                for layer in layers {
                    x = layer.forward(g, x, None, rate)?;
                }
                Ok(ln.forward(g, x))
            }
            SignalBody::Conv { blocks, token } => {
                let mut x = g.reshape(x, vec![b, c.series_length, 1]);
                for block in blocks {
                    x = block.forward(g, x);
                }
                Ok(token.forward(g, x))
            }
        }
    }

    /// Residual cross-attention in both directions.
    pub fn cross_attend(&self, g: &mut Graph<'_, T>, z_ref: Var, z_tgt: Var) -> Result<(Var, Var)> {
        let Some((to_ref, to_tgt)) = &self.layout.cross else {
            return Ok((z_ref, z_tgt));
        };
        if g.shape(z_ref) != g.shape(z_tgt) {
            return Err(Error::Shape(format!(
                "cross-attention inputs {:?} and {:?} differ",
                g.shape(z_ref),
                g.shape(z_tgt)
            )));
        }
        let a = to_ref.forward(g, z_ref, z_tgt, None)?;
        let b = to_tgt.forward(g, z_tgt, z_ref, None)?;
        Ok((g.add(z_ref, a), g.add(z_tgt, b)))
    }

    pub fn merge(&self, g: &mut Graph<'_, T>, z_ref: Var, z_tgt: Var) -> Var {
        match self.config.merge_method {
            MergeMethod::Diff => g.sub(z_tgt, z_ref),
            MergeMethod::Concat => g.concat_last(z_ref, z_tgt),
        }
    }

    /// Projected (not yet normalized) pair embeddings `[B, d]`.
    pub fn signal_tower(
        &self,
        g: &mut Graph<'_, T>,
        refs: &[&[f64]],
        tgts: &[&[f64]],
    ) -> Result<Var> {
        if refs.len() != tgts.len() || refs.is_empty() {
            return Err(Error::InvalidInput(
                "reference and target batches must be nonempty and equal".into(),
            ));
        }
        // one encoder pass over refs then tgts keeps the weights shared
        let all: Vec<&[f64]> = refs.iter().chain(tgts).copied().collect();
        let z = self.encode_signal(g, &all)?;
        let b = refs.len();
        let z_ref = g.slice_rows(z, 0, b);
        let z_tgt = g.slice_rows(z, b, b);
        let (z_ref, z_tgt) = self.cross_attend(g, z_ref, z_tgt)?;
        let p_ref = g.mean_tokens(z_ref, None);
        let p_tgt = g.mean_tokens(z_tgt, None);
        let v = self.merge(g, p_ref, p_tgt);
        self.layout
            .signal_head
            .forward(g, v, self.config.dropout_rate)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        self.vocab.tokenize(text, self.config.text_max_len)
    }

    /// Projected (not yet normalized) text embeddings `[B, d]`.
    pub fn text_tower(&self, g: &mut Graph<'_, T>, batch: &TextBatch) -> Result<Var> {
        let c = &self.config;
        if batch.len > c.text_max_len {
            return Err(Error::InvalidInput(format!(
                "token sequence of {} exceeds text_max_len {}",
                batch.len, c.text_max_len
            )));
        }
        let (b, t, d) = (batch.batch(), batch.len, c.embed_dim);
        let table = g.param(self.layout.tok_embed);
        let x = g.embedding(table, batch.ids.clone());
        let x = g.reshape(x, vec![b, t, d]);
        let pos_all = g.param(self.layout.tok_pos);
        let pos = g.slice_rows(pos_all, 0, t);
        let mut x = g.add_trailing(x, pos);
        for layer in &self.layout.text_layers {
            x = layer.forward(g, x, Some(&batch.mask), c.dropout_rate)?;
        }
        let x = self.layout.text_ln.forward(g, x);
        let pooled = match c.text_pooling {
            Pooling::Mean => g.mean_tokens(x, Some(batch.mask.clone())),
            Pooling::Summary => g.take_token(x, 0),
        };
        self.layout.text_head.forward(g, pooled, c.dropout_rate)
    }

    /// Unit-norm pair embeddings in inference mode.
    pub fn embed_pairs(&self, refs: &[&[f64]], tgts: &[&[f64]]) -> Result<Vec<Vec<f32>>> {
        if refs.len() != tgts.len() {
            return Err(Error::InvalidInput(
                "reference and target counts differ".into(),
            ));
        }
        let chunks: Vec<usize> = (0..refs.len()).step_by(EMBED_CHUNK).collect();
        let parts = crate::par::map_slice(&chunks, |&s| {
            let e = (s + EMBED_CHUNK).min(refs.len());
            let mut g = self.graph(Mode::Eval);
            let z = self.signal_tower(&mut g, &refs[s..e], &tgts[s..e])?;
            let z = g.l2_normalize_rows(z)?;
            Ok(rows_f32(g.value(z)))
        });
        collect_rows(parts)
    }

    /// Unit-norm text embeddings in inference mode.
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f32>>> {
        let chunks: Vec<usize> = (0..texts.len()).step_by(EMBED_CHUNK).collect();
        let parts = crate::par::map_slice(&chunks, |&s| {
            let e = (s + EMBED_CHUNK).min(texts.len());
            let seqs: Vec<Vec<usize>> = texts[s..e].iter().map(|t| self.tokenize(t)).collect();
            let batch = TextBatch::new(&seqs)?;
            let mut g = self.graph(Mode::Eval);
            let z = self.text_tower(&mut g, &batch)?;
            let z = g.l2_normalize_rows(z)?;
            Ok(rows_f32(g.value(z)))
        });
        collect_rows(parts)
    }
}

fn rows_f32<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f32>> {
    t.data()
        .chunks(t.last_dim())
        .map(|r| r.iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
        .collect()
}

fn collect_rows(parts: Vec<Result<Vec<Vec<f32>>>>) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::new();
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
