//! Per-language components: phoneme tables and speaker-fitting encoders.

use rand::Rng;

use crate::error::{PolyglotError, Result};
use crate::numerics::{Tensor, Var};
use crate::params::{Mlp, ParamId, ParamStore, Session};

/// Short language tag such as `en`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct LanguageId(String);

impl LanguageId {
    pub fn new(tag: impl Into<String>) -> Self {
        LanguageId(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for LanguageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LanguageId {
    fn from(s: &str) -> Self {
        LanguageId(s.to_string())
    }
}

/// `V × d_enc` trainable phoneme embedding of one language.
#[derive(Clone, Debug)]
pub struct PhonemeTable {
    table: ParamId,
    vocab: usize,
}

impl PhonemeTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        lang: &LanguageId,
        vocab: usize,
        d_enc: usize,
        init_sd: f64,
        rng: &mut R,
    ) -> Self {
        let table = store.add(format!("lutp.{lang}"), Tensor::randn(vec![vocab, d_enc], init_sd, rng));
        PhonemeTable { table, vocab }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn param_id(&self) -> ParamId {
        self.table
    }

    /// Looks up one row per phoneme id, preserving order.
    pub fn encode(&self, s: &mut Session<'_>, ids: &[usize]) -> Result<Var> {
        if let Some(&id) = ids.iter().find(|&&id| id >= self.vocab) {
            return Err(PolyglotError::OutOfVocabulary { id, vocab: self.vocab });
        }
        let table = s.param(self.table);
        Ok(s.graph.gather_rows(table, ids)?)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub conv_layers: usize,
    pub channels: usize,
    pub fc_width: usize,
    pub d_z: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { conv_layers: 5, channels: 32, fc_width: 256, d_z: 256 }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

/// Speaker-fitting network: 3×3 conv stack with ReLU over the `T × d_o`
/// frames as a one-channel image, mean over time, then two ReLU dense layers
/// and a linear head to `d_z`.
#[derive(Clone, Debug)]
pub struct SpeakerEncoder {
    convs: Vec<ConvLayer>,
    fc: Mlp,
    d_o: usize,
    prefix: String,
}

impl SpeakerEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        lang: &LanguageId,
        cfg: &EncoderConfig,
        d_o: usize,
        init_sd: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.conv_layers == 0 || cfg.channels == 0 || cfg.fc_width == 0 || cfg.d_z == 0 || d_o == 0 {
            return Err(PolyglotError::Config(format!("speaker encoder sizes must be positive: {cfg:?}")));
        }
        let prefix = format!("ns.{lang}");
        let mut convs = Vec::with_capacity(cfg.conv_layers);
        let mut c_in = 1;
        for i in 0..cfg.conv_layers {
            let kernel = store.add(
                format!("{prefix}.conv{i}.k"),
                Tensor::randn(vec![cfg.channels, c_in, 3, 3], init_sd, rng),
            );
            let bias = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(vec![cfg.channels]));
            convs.push(ConvLayer { kernel, bias });
            c_in = cfg.channels;
        }
        let fc = Mlp::new(
            store,
            &prefix,
            &[cfg.channels * d_o, cfg.fc_width, cfg.fc_width, cfg.d_z],
            init_sd,
            rng,
        );
        Ok(SpeakerEncoder { convs, fc, d_o, prefix })
    }

    /// Name prefix of this encoder's parameter group, `ns.<lang>`.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Embeds `T × d_o` frames.
    pub fn embed(&self, s: &mut Session<'_>, frames: Var) -> Result<Var> {
        let shape = s.value(frames).shape().to_vec();
        let (t, d_o) = match shape[..] {
            [t, d] => (t, d),
            _ => return Err(PolyglotError::Contract(format!("frames must be T x d_o, got {shape:?}"))),
        };
        if t == 0 {
            return Err(PolyglotError::Contract("cannot embed an empty frame sequence".into()));
        }
        if d_o != self.d_o {
            return Err(PolyglotError::Contract(format!("frames have {d_o} features, encoder expects {}", self.d_o)));
        }
        let mut h = s.graph.reshape(frames, vec![1, t, d_o])?;
        for layer in &self.convs {
            let (k, b) = (s.param(layer.kernel), s.param(layer.bias));
            let c = s.graph.conv2d_3x3(h, k, b)?;
            h = s.graph.relu(c);
        }
        let pooled = s.graph.mean_over_time(h)?;
        let flat = s.graph.flatten(pooled);
        Ok(self.fc.forward(s, flat)?)
    }

    /// Arithmetic mean of the embeddings of several samples.
    pub fn average_embedding(&self, s: &mut Session<'_>, samples: &[Var]) -> Result<Var> {
        let (first, rest) = samples
            .split_first()
            .ok_or_else(|| PolyglotError::Contract("embedding average needs at least one sample".into()))?;
        let mut acc = self.embed(s, *first)?;
        for &sample in rest {
            let z = self.embed(s, sample)?;
            acc = s.graph.add(acc, z)?;
        }
        if samples.len() == 1 {
            return Ok(acc);
        }
        Ok(s.graph.scale(acc, 1.0 / samples.len() as f64))
    }
}

#[cfg(test)]
mod tests;
