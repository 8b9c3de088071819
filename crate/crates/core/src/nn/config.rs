use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalArch {
    Conv,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    /// `z_tgt - z_ref`
    Diff,
    /// `[z_ref || z_tgt]`
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    /// Output at the leading summary token.
    Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub signal_arch: SignalArch,
    pub embed_dim: usize,
    pub series_length: usize,
    pub use_cross_attention: bool,
    pub merge_method: MergeMethod,
    /// Heads of the cross-attention blocks.
    pub attention_heads: usize,
    pub conv_channels: Vec<usize>,
    pub conv_kernels: Vec<usize>,
    pub patch_size: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub transformer_ff: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_ff: usize,
    pub text_max_len: usize,
    pub text_pooling: Pooling,
    pub dropout_rate: f64,
    pub freeze_text_encoder: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            signal_arch: SignalArch::Transformer,
            embed_dim: 128,
            series_length: 256,
            use_cross_attention: false,
            merge_method: MergeMethod::Diff,
            attention_heads: 8,
            conv_channels: vec![32, 64, 128, 128],
            conv_kernels: vec![7, 7, 7, 7],
            patch_size: 16,
            transformer_layers: 4,
            transformer_heads: 4,
            transformer_ff: 256,
            text_layers: 2,
            text_heads: 4,
            text_ff: 256,
            text_max_len: 32,
            text_pooling: Pooling::Mean,
            dropout_rate: 0.1,
            freeze_text_encoder: false,
        }
    }
}

impl EncoderConfig {
    /// Width of the merged pair vector fed to the signal projection head.
    pub fn merged_dim(&self) -> usize {
        match self.merge_method {
            MergeMethod::Diff => self.embed_dim,
            MergeMethod::Concat => 2 * self.embed_dim,
        }
    }

    /// Number of tokens the signal encoder emits per series.
    pub fn signal_tokens(&self) -> usize {
        match self.signal_arch {
            SignalArch::Transformer => self.series_length / self.patch_size,
            SignalArch::Conv => self.series_length >> self.conv_channels.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        let d = self.embed_dim;
        if d == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.series_length < 2 {
            return bad("series_length must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.use_cross_attention && (self.attention_heads == 0 || !d.is_multiple_of(self.attention_heads))
        {
            return bad(format!(
                "embed_dim {d} not divisible by attention_heads {}",
                self.attention_heads
            ));
        }
        match self.signal_arch {
            SignalArch::Transformer => {
                if self.patch_size == 0 || !self.series_length.is_multiple_of(self.patch_size) {
                    return bad(format!(
                        "series_length {} not divisible by patch_size {}",
                        self.series_length, self.patch_size
                    ));
                }
                if self.transformer_heads == 0 || !d.is_multiple_of(self.transformer_heads) {
                    return bad(format!(
                        "embed_dim {d} not divisible by transformer_heads {}",
                        self.transformer_heads
                    ));
                }
                if self.transformer_ff == 0 {
                    return bad("transformer_ff must be positive".into());
                }
            }
            SignalArch::Conv => {
                if self.conv_channels.is_empty()
                    || self.conv_channels.len() != self.conv_kernels.len()
                {
                    return bad(
                        "conv_channels and conv_kernels must be nonempty and equally long".into(),
                    );
                }
                if self.conv_channels.contains(&0) || self.conv_kernels.iter().any(|&k| k % 2 == 0)
                {
                    return bad("conv channels must be positive and kernels odd".into());
                }
                if self.signal_tokens() == 0 {
                    return bad(format!(
                        "series_length {} too short for {} pooling stages",
                        self.series_length,
                        self.conv_channels.len()
                    ));
                }
            }
        }
        if self.text_heads == 0 || !d.is_multiple_of(self.text_heads) {
            return bad(format!(
                "embed_dim {d} not divisible by text_heads {}",
                self.text_heads
            ));
        }
        if self.text_max_len < 2 || self.text_ff == 0 {
            return bad("text_max_len must be at least 2 and text_ff positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_widths_follow_merge() {
        let mut c = EncoderConfig::default();
        c.validate().unwrap();
        assert_eq!(c.merged_dim(), 128);
        assert_eq!(c.signal_tokens(), 16);
        c.merge_method = MergeMethod::Concat;
        assert_eq!(c.merged_dim(), 256);
        c.signal_arch = SignalArch::Conv;
        c.validate().unwrap();
        assert_eq!(c.signal_tokens(), 16);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = EncoderConfig {
            use_cross_attention: true,
            attention_heads: 7,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = EncoderConfig {
            patch_size: 15,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
