//! The polyglot model: one shared core plus per-language phoneme tables and
//! speaker encoders, and the cross-language conversion entry point.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{EncoderConfig, LanguageId, PhonemeTable, SpeakerEncoder};
use crate::error::{PolyglotError, Result};
use crate::numerics::Tensor;
use crate::params::{ParamId, ParamStore, Session};
use crate::voiceloop::{CoreConfig, CoreParams, SynthesisMode};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LanguageSpec {
    pub id: LanguageId,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub core: CoreConfig,
    pub encoder: EncoderConfig,
    pub languages: Vec<LanguageSpec>,
    pub init_sd: f64,
}

impl ModelConfig {
    /// Default architecture for the given languages, all with vocabulary `vocab`.
    pub fn for_languages(tags: &[&str], vocab: usize) -> Self {
        ModelConfig {
            core: CoreConfig::default(),
            encoder: EncoderConfig::default(),
            languages: tags.iter().map(|t| LanguageSpec { id: LanguageId::new(*t), vocab }).collect(),
            init_sd: 0.05,
        }
    }

    /// Smallest configuration used for exhaustive gradient checks.
    pub fn tiny(tags: &[&str]) -> Self {
        ModelConfig {
            core: CoreConfig {
                buffer_slots: 4,
                d_buf: 8,
                d_enc: 6,
                components: 3,
                hidden: 8,
                d_o: 4,
                d_z: 5,
                delta_stop: 0.5,
                feed_prev_output: true,
            },
            encoder: EncoderConfig { conv_layers: 2, channels: 3, fc_width: 6, d_z: 5 },
            languages: tags.iter().map(|t| LanguageSpec { id: LanguageId::new(*t), vocab: 7 }).collect(),
            init_sd: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.core.validate()?;
        if self.core.d_z != self.encoder.d_z {
            return Err(PolyglotError::Config(format!(
                "core d_z {} differs from encoder d_z {}",
                self.core.d_z, self.encoder.d_z
            )));
        }
        if self.languages.is_empty() {
            return Err(PolyglotError::Config("at least one language is required".into()));
        }
        for (i, l) in self.languages.iter().enumerate() {
            if l.vocab == 0 {
                return Err(PolyglotError::Config(format!("language {} has an empty vocabulary", l.id)));
            }
            if self.languages[..i].iter().any(|o| o.id == l.id) {
                return Err(PolyglotError::Config(format!("language {} registered twice", l.id)));
            }
        }
        if !(self.init_sd > 0.0) {
            return Err(PolyglotError::Config("init_sd must be positive".into()));
        }
        Ok(())
    }
}

/// Components owned by a single language.
#[derive(Clone, Debug)]
pub struct LanguageBranch {
    pub id: LanguageId,
    pub phonemes: PhonemeTable,
    pub encoder: SpeakerEncoder,
}

/// All parameters of the polyglot network.
#[derive(Clone, Debug)]
pub struct PolyglotModel {
    config: ModelConfig,
    store: ParamStore,
    core: CoreParams,
    languages: Vec<LanguageBranch>,
}

/// Output of [`PolyglotModel::convert`].
#[derive(Clone, Debug)]
pub struct Conversion {
    pub frames: Tensor,
    pub attention: Tensor,
    pub embedding: Tensor,
}

impl PolyglotModel {
    /// Fresh model with Gaussian weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let core = CoreParams::new(&mut store, config.core.clone(), config.init_sd, &mut rng)?;
        let mut languages = Vec::with_capacity(config.languages.len());
        for spec in &config.languages {
            let phonemes =
                PhonemeTable::new(&mut store, &spec.id, spec.vocab, config.core.d_enc, config.init_sd, &mut rng);
            let encoder =
                SpeakerEncoder::new(&mut store, &spec.id, &config.encoder, config.core.d_o, config.init_sd, &mut rng)?;
            languages.push(LanguageBranch { id: spec.id.clone(), phonemes, encoder });
        }
        Ok(PolyglotModel { config, store, core, languages })
    }

    /// Model with the layout of `config` and parameter values taken from `values`.
    ///
    /// Every parameter must be present in `values` with a matching shape.
    pub fn from_values(config: ModelConfig, values: &ParamStore) -> Result<Self> {
        let mut model = PolyglotModel::new(config, 0)?;
        if values.len() != model.store.len() {
            return Err(PolyglotError::Config(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                values.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = values
                .id(&name)
                .ok_or_else(|| PolyglotError::Config(format!("missing parameter {name}")))?;
            let v = values.get(src);
            if v.shape() != model.store.get(id).shape() {
                return Err(PolyglotError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    model.store.get(id).shape()
                )));
            }
            *model.store.get_mut(id) = v.clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// The single shared core, whichever language is being synthesized.
    pub fn core(&self) -> &CoreParams {
        &self.core
    }

    /// Core used when synthesizing `lang`; always the same instance.
    pub fn core_for(&self, lang: &LanguageId) -> Result<&CoreParams> {
        self.language(lang)?;
        Ok(&self.core)
    }

    pub fn languages(&self) -> &[LanguageBranch] {
        &self.languages
    }

    pub fn language_ids(&self) -> Vec<LanguageId> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }

    pub fn language(&self, lang: &LanguageId) -> Result<&LanguageBranch> {
        self.languages.iter().find(|l| &l.id == lang).ok_or_else(|| PolyglotError::UnknownLanguage {
            lang: lang.to_string(),
            registered: self.languages.iter().map(|l| l.id.to_string()).collect(),
        })
    }

    /// All `ns.<lang>` parameters.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.languages.iter().flat_map(|l| self.store.group(l.encoder.prefix())).collect()
    }

    /// Parameter groups as `(name, ids)`: `core`, then `lutp.<lang>` and `ns.<lang>` per language.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![("core".to_string(), self.core.param_ids())];
        for l in &self.languages {
            groups.push((format!("lutp.{}", l.id), vec![l.phonemes.param_id()]));
            groups.push((l.encoder.prefix().to_string(), self.store.group(l.encoder.prefix())));
        }
        groups
    }

    /// Speaks phonemes `ids` of language `tgt` in the voice heard in
    /// `voice_samples`, which are in language `src`.
    ///
    /// The speaker embedding is the mean of the `src` encoder over all samples.
    pub fn convert(
        &self,
        src: &LanguageId,
        voice_samples: &[Tensor],
        tgt: &LanguageId,
        ids: &[usize],
        max_steps: usize,
    ) -> Result<Conversion> {
        let source = self.language(src)?;
        let target = self.language(tgt)?;
        if voice_samples.is_empty() {
            return Err(PolyglotError::Contract("conversion needs at least one voice sample".into()));
        }
        if ids.is_empty() {
            return Err(PolyglotError::Contract("conversion needs a nonempty phoneme sequence".into()));
        }
        let mut s = Session::frozen(&self.store);
        let samples: Vec<_> = voice_samples.iter().map(|t| s.graph.constant(t)).collect();
        let z = source.encoder.average_embedding(&mut s, &samples)?;
        let enc = target.phonemes.encode(&mut s, ids)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.core.synthesize(&mut s, enc, z, SynthesisMode::FreeRunning { max_steps }, 0.0, &mut unused)?;
        Ok(Conversion {
            frames: s.value(out.frames).clone(),
            attention: out.attention,
            embedding: s.value(z).clone(),
        })
    }

    /// Speaker embedding of `frames` by the encoder of `lang`.
    pub fn embed(&self, lang: &LanguageId, frames: &Tensor) -> Result<Tensor> {
        let branch = self.language(lang)?;
        let mut s = Session::frozen(&self.store);
        let x = s.graph.constant(frames);
        let z = branch.encoder.embed(&mut s, x)?;
        Ok(s.value(z).clone())
    }

    /// Mean embedding of several samples of `lang`.
    pub fn average_embedding(&self, lang: &LanguageId, samples: &[Tensor]) -> Result<Tensor> {
        let branch = self.language(lang)?;
        let mut s = Session::frozen(&self.store);
        let xs: Vec<_> = samples.iter().map(|t| s.graph.constant(t)).collect();
        let z = branch.encoder.average_embedding(&mut s, &xs)?;
        Ok(s.value(z).clone())
    }
}
