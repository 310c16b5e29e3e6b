//! `key=value` run configuration covering every tunable default.

use std::fmt::Write as _;
use std::path::Path;

use polyglot_core::checks::SuiteConfig;
use polyglot_core::corpus::SynthConfig;
use polyglot_core::evalkit::{EvalOptions, IdentifierConfig, VoiceSource};
use polyglot_core::losses::{LossWeights, PolyEncoder};
use polyglot_core::model::ModelConfig;
use polyglot_core::training::PhaseConfig;
use polyglot_core::voiceloop::CoreConfig;
use polyglot_core::encoders::EncoderConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{file}:{line}: expected key=value, found {text:?}")]
    Syntax { file: String, line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Model architecture that does not depend on the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub core: CoreConfig,
    pub encoder: EncoderConfig,
    pub init_sd: f64,
    pub seed: u64,
}

impl ModelSettings {
    /// Full model config for the given languages and vocabularies.
    pub fn build(&self, languages: &[(String, usize)], d_o: usize) -> ModelConfig {
        let tags: Vec<&str> = languages.iter().map(|(t, _)| t.as_str()).collect();
        let mut cfg = ModelConfig::for_languages(&tags, 1);
        for (spec, (_, v)) in cfg.languages.iter_mut().zip(languages) {
            spec.vocab = *v;
        }
        cfg.core = CoreConfig { d_o, ..self.core.clone() };
        cfg.encoder = self.encoder.clone();
        cfg.init_sd = self.init_sd;
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: SynthConfig,
    pub model: ModelSettings,
    pub train_seed: u64,
    pub checkpoint_every: usize,
    pub phases: [PhaseConfig; 3],
    pub identifier: IdentifierConfig,
    pub eval: EvalOptions,
    pub grad_check: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let defaults = ModelConfig::for_languages(&[], 1);
        RunConfig {
            corpus: SynthConfig::default(),
            model: ModelSettings { core: defaults.core, encoder: defaults.encoder, init_sd: defaults.init_sd, seed: 1 },
            train_seed: 1,
            checkpoint_every: 25,
            phases: [1, 2, 3].map(|p| PhaseConfig::desk(p).expect("valid phase")),
            identifier: IdentifierConfig::default(),
            eval: EvalOptions::default(),
            grad_check: SuiteConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value { key: key.into(), value: value.into(), reason: e.to_string() })
}

fn list(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults overridden by `path`, if given.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, file: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { file: file.into(), line: n + 1, text: raw.into() })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        if let Some(rest) = key.strip_prefix("train.phase") {
            let (p, field) = rest.split_once('.').ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
            let idx = match p {
                "1" => 0,
                "2" => 1,
                "3" => 2,
                _ => return Err(ConfigError::UnknownKey(key.into())),
            };
            let ph = &mut self.phases[idx];
            match field {
                "noise_sd" => ph.noise_sd = parse(key, v)?,
                "seq_len" => ph.seq_len = parse(key, v)?,
                "steps" => ph.steps = parse(key, v)?,
                "lr" => ph.lr = parse(key, v)?,
                "batch_size" => ph.batch_size = parse(key, v)?,
                "plateau_patience" => ph.plateau_patience = parse(key, v)?,
                "clip_norm" => ph.clip_norm = parse(key, v)?,
                "poly_steps_per_phoneme" => ph.poly_steps_per_phoneme = parse(key, v)?,
                _ => return Err(ConfigError::UnknownKey(key.into())),
            }
            return Ok(());
        }
        let c = &mut self.corpus;
        let m = &mut self.model;
        match key {
            "corpus.languages" => c.languages = parse(key, v)?,
            "corpus.speakers_per_lang" => c.speakers_per_lang = parse(key, v)?,
            "corpus.utterances_per_speaker" => c.utterances_per_speaker = parse(key, v)?,
            "corpus.d_o" => c.d_o = parse(key, v)?,
            "corpus.frames_per_phoneme" => c.frames_per_phoneme = parse(key, v)?,
            "corpus.min_phonemes" => c.min_phonemes = parse(key, v)?,
            "corpus.max_phonemes" => c.max_phonemes = parse(key, v)?,
            "corpus.latent_dim" => c.latent_dim = parse(key, v)?,
            "corpus.vocab_size" => c.vocab_size = parse(key, v)?,
            "corpus.noise_sd_gen" => c.noise_sd_gen = parse(key, v)?,
            "corpus.shared_speakers" => c.shared_speakers = parse(key, v)?,
            "corpus.seed" => c.seed = parse(key, v)?,
            "model.buffer_slots" => m.core.buffer_slots = parse(key, v)?,
            "model.d_buf" => m.core.d_buf = parse(key, v)?,
            "model.d_enc" => m.core.d_enc = parse(key, v)?,
            "model.components" => m.core.components = parse(key, v)?,
            "model.hidden" => m.core.hidden = parse(key, v)?,
            "model.d_z" => {
                m.core.d_z = parse(key, v)?;
                m.encoder.d_z = m.core.d_z;
            }
            "model.delta_stop" => m.core.delta_stop = parse(key, v)?,
            "model.feed_prev_output" => m.core.feed_prev_output = parse(key, v)?,
            "model.conv_layers" => m.encoder.conv_layers = parse(key, v)?,
            "model.channels" => m.encoder.channels = parse(key, v)?,
            "model.fc_width" => m.encoder.fc_width = parse(key, v)?,
            "model.init_sd" => m.init_sd = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,
            "train.seed" => self.train_seed = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "loss.alpha" | "loss.beta" | "loss.gamma" | "loss.margin" => {
                let x: f64 = parse(key, v)?;
                for ph in &mut self.phases {
                    let w = &mut ph.weights;
                    match key {
                        "loss.alpha" => w.alpha = x,
                        "loss.beta" => w.beta = x,
                        "loss.gamma" => w.gamma = x,
                        _ => w.margin = x,
                    }
                }
            }
            "loss.poly_encoder" => {
                let e = match v {
                    "source" => PolyEncoder::Source,
                    "target" => PolyEncoder::Target,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected source or target".into(),
                        })
                    }
                };
                self.phases.iter_mut().for_each(|p| p.poly_encoder = e);
            }
            "eval.identifier_hidden" => self.identifier.hidden = parse(key, v)?,
            "eval.identifier_epochs" => self.identifier.epochs = parse(key, v)?,
            "eval.identifier_batch_size" => self.identifier.batch_size = parse(key, v)?,
            "eval.identifier_lr" => self.identifier.lr = parse(key, v)?,
            "eval.identifier_init_sd" => self.identifier.init_sd = parse(key, v)?,
            "eval.identifier_seed" => self.identifier.seed = parse(key, v)?,
            "eval.steps_per_phoneme" => self.eval.steps_per_phoneme = parse(key, v)?,
            "eval.voice" => {
                self.eval.voice = match v.split_once(':') {
                    None if v == "heldout" => VoiceSource::HeldOut,
                    Some(("mean", n)) => VoiceSource::TrainingMean(parse(key, n)?),
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected heldout or mean:N".into(),
                        })
                    }
                }
            }
            "gradcheck.steps" => {
                self.grad_check.steps = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_, _>>()?
            }
            "gradcheck.tolerance" => self.grad_check.tolerance = parse(key, v)?,
            "gradcheck.jitter_sd" => self.grad_check.jitter_sd = parse(key, v)?,
            "gradcheck.seed" => self.grad_check.seed = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Every key with its effective value, in a form [`RunConfig::apply_text`] accepts.
    pub fn to_text(&self) -> String {
        let c = &self.corpus;
        let m = &self.model;
        let w: &LossWeights = &self.phases[0].weights;
        let mut out = String::from("# effective configuration\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("corpus.languages", c.languages.to_string());
        kv("corpus.speakers_per_lang", c.speakers_per_lang.to_string());
        kv("corpus.utterances_per_speaker", c.utterances_per_speaker.to_string());
        kv("corpus.d_o", c.d_o.to_string());
        kv("corpus.frames_per_phoneme", c.frames_per_phoneme.to_string());
        kv("corpus.min_phonemes", c.min_phonemes.to_string());
        kv("corpus.max_phonemes", c.max_phonemes.to_string());
        kv("corpus.latent_dim", c.latent_dim.to_string());
        kv("corpus.vocab_size", c.vocab_size.to_string());
        kv("corpus.noise_sd_gen", c.noise_sd_gen.to_string());
        kv("corpus.shared_speakers", c.shared_speakers.to_string());
        kv("corpus.seed", c.seed.to_string());
        kv("model.buffer_slots", m.core.buffer_slots.to_string());
        kv("model.d_buf", m.core.d_buf.to_string());
        kv("model.d_enc", m.core.d_enc.to_string());
        kv("model.components", m.core.components.to_string());
        kv("model.hidden", m.core.hidden.to_string());
        kv("model.d_z", m.core.d_z.to_string());
        kv("model.delta_stop", m.core.delta_stop.to_string());
        kv("model.feed_prev_output", m.core.feed_prev_output.to_string());
        kv("model.conv_layers", m.encoder.conv_layers.to_string());
        kv("model.channels", m.encoder.channels.to_string());
        kv("model.fc_width", m.encoder.fc_width.to_string());
        kv("model.init_sd", m.init_sd.to_string());
        kv("model.seed", m.seed.to_string());
        kv("train.seed", self.train_seed.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        for ph in &self.phases {
            let p = ph.phase;
            kv(&format!("train.phase{p}.noise_sd"), ph.noise_sd.to_string());
            kv(&format!("train.phase{p}.seq_len"), ph.seq_len.to_string());
            kv(&format!("train.phase{p}.steps"), ph.steps.to_string());
            kv(&format!("train.phase{p}.lr"), ph.lr.to_string());
            kv(&format!("train.phase{p}.batch_size"), ph.batch_size.to_string());
            kv(&format!("train.phase{p}.plateau_patience"), ph.plateau_patience.to_string());
            kv(&format!("train.phase{p}.clip_norm"), ph.clip_norm.to_string());
            kv(&format!("train.phase{p}.poly_steps_per_phoneme"), ph.poly_steps_per_phoneme.to_string());
        }
        kv("loss.alpha", w.alpha.to_string());
        kv("loss.beta", w.beta.to_string());
        kv("loss.gamma", w.gamma.to_string());
        kv("loss.margin", w.margin.to_string());
        let enc = match self.phases[0].poly_encoder {
            PolyEncoder::Source => "source",
            PolyEncoder::Target => "target",
        };
        kv("loss.poly_encoder", enc.into());
        let id = &self.identifier;
        kv("eval.identifier_hidden", id.hidden.to_string());
        kv("eval.identifier_epochs", id.epochs.to_string());
        kv("eval.identifier_batch_size", id.batch_size.to_string());
        kv("eval.identifier_lr", id.lr.to_string());
        kv("eval.identifier_init_sd", id.init_sd.to_string());
        kv("eval.identifier_seed", id.seed.to_string());
        kv("eval.steps_per_phoneme", self.eval.steps_per_phoneme.to_string());
        let voice = match self.eval.voice {
            VoiceSource::HeldOut => "heldout".to_string(),
            VoiceSource::TrainingMean(n) => format!("mean:{n}"),
        };
        kv("eval.voice", voice);
        let g = &self.grad_check;
        kv("gradcheck.steps", list(&g.steps));
        kv("gradcheck.tolerance", g.tolerance.to_string());
        kv("gradcheck.jitter_sd", g.jitter_sd.to_string());
        kv("gradcheck.seed", g.seed.to_string());
        out
    }

    /// Checks every section that has its own validation.
    pub fn validate(&self) -> polyglot_core::Result<()> {
        self.corpus.validate()?;
        for p in &self.phases {
            p.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("corpus.seed=9\ntrain.phase3.lr = 0.002 # faster\nloss.gamma=0\neval.voice=mean:20\n", "t").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.phases[2].weights.gamma, 0.0);
        assert_eq!(back.eval.voice, VoiceSource::TrainingMean(20));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("# comment\n\ncorpus.sped=3\n", "f").unwrap_err();
        assert!(err.to_string().contains("corpus.sped"));
        assert!(cfg.set("train.phase4.lr", "1").unwrap_err().to_string().contains("train.phase4.lr"));
        let err = cfg.set("corpus.languages", "three").unwrap_err().to_string();
        assert!(err.contains("corpus.languages") && err.contains("three"));
        assert!(cfg.apply_text("no equals sign", "f").unwrap_err().to_string().contains("f:1"));
    }
}
