//! The three-phase training schedule.
//!
//! Phases 1 and 2 fit the whole model under teacher forcing with
//! `L_MSE + α·L_contrast + β·L_cycle`; they differ in input-noise level and
//! crop length. Phase 3 adds `γ·L_poly`, computed on free-running
//! cross-language conversions, and updates only the speaker encoders.

mod checkpoint;
mod optim;

use std::ops::ControlFlow;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::AdamState;

use crate::corpus::Corpus;
use crate::encoders::LanguageId;
use crate::error::{PolyglotError, Result};
use crate::losses::{
    cycle_distance, loss_contrast, loss_mse, loss_poly, total_loss, LossTerms, LossWeights, PolyEncoder,
};
use crate::model::PolyglotModel;
use crate::numerics::Tensor;
use crate::params::{ParamGrads, ParamId, Session};
use crate::voiceloop::SynthesisMode;

/// Settings of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseConfig {
    pub phase: u8,
    /// SD of the noise added to teacher-forced previous frames.
    pub noise_sd: f64,
    /// Utterances longer than this are cropped to a random window.
    pub seq_len: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Stop when the total loss has not improved for this many steps; 0 disables.
    pub plateau_patience: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    /// Free-running cap for `L_poly` is `poly_steps_per_phoneme × J`.
    pub poly_steps_per_phoneme: usize,
    pub poly_encoder: PolyEncoder,
}

impl PhaseConfig {
    /// Settings as published: noise SD 4.0 and length 100 in phase 1, 2.0 and
    /// 1000 afterwards; budgets and learning rates are ours.
    pub fn published(phase: u8) -> Result<Self> {
        let (noise_sd, seq_len, steps, lr) = match phase {
            1 => (4.0, 100, 2000, 1e-3),
            2 => (2.0, 1000, 2000, 1e-3),
            3 => (2.0, 1000, 1000, 1e-4),
            _ => return Err(PolyglotError::Config(format!("phase must be 1, 2 or 3, got {phase}"))),
        };
        Ok(PhaseConfig {
            phase,
            noise_sd,
            seq_len,
            steps,
            lr,
            batch_size: 8,
            plateau_patience: 200,
            clip_norm: 1.0,
            weights: LossWeights::default(),
            poly_steps_per_phoneme: 16,
            poly_encoder: PolyEncoder::Source,
        })
    }

    /// Desk-scale defaults for the synthetic corpus.
    pub fn desk(phase: u8) -> Result<Self> {
        let published = PhaseConfig::published(phase)?;
        let (seq_len, steps, lr) = match phase {
            1 => (50, DESK_STEPS[0], published.lr),
            2 => (200, DESK_STEPS[1], published.lr),
            _ => (200, DESK_STEPS[2], 2.5e-4),
        };
        Ok(PhaseConfig { seq_len, steps, lr, ..published })
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.phase) {
            return Err(PolyglotError::Config(format!("phase must be 1, 2 or 3, got {}", self.phase)));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.poly_steps_per_phoneme == 0 {
            return Err(PolyglotError::Config("batch_size, seq_len and poly_steps_per_phoneme must be positive".into()));
        }
        if !(self.noise_sd >= 0.0) || !(self.lr > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(PolyglotError::Config("noise_sd and clip_norm must be nonnegative and lr positive".into()));
        }
        self.weights.validate()
    }
}

/// Desk-scale step budgets for phases 1, 2 and 3.
pub const DESK_STEPS: [usize; 3] = [300, 150, 200];

/// `frames + N(0, sd²)` elementwise.
pub fn add_noise<R: Rng + ?Sized>(frames: &Tensor, sd: f64, rng: &mut R) -> Result<Tensor> {
    if !(sd >= 0.0) || !sd.is_finite() {
        return Err(PolyglotError::Config(format!("noise SD must be nonnegative, got {sd}")));
    }
    let mut out = frames.clone();
    if sd > 0.0 {
        let normal = Normal::new(0.0, sd).expect("validated sd");
        out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(out)
}

/// One training example: corpus indices plus the crop window of the anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub lang: LanguageId,
    pub anchor: usize,
    /// Another utterance of the anchor's speaker.
    pub positive: usize,
    /// An utterance of a different speaker of the same language.
    pub negative: usize,
    /// First frame and length of the anchor window.
    pub crop: (usize, usize),
    /// Phase 3 only: target language and the corpus sample supplying its phonemes.
    pub target: Option<(LanguageId, usize)>,
}

/// Draws a batch from the training split. Languages are visited round-robin
/// starting at a random offset, so every language appears once the batch is
/// at least as large as the number of languages.
pub fn make_batch<R: Rng + ?Sized>(corpus: &Corpus, cfg: &PhaseConfig, rng: &mut R) -> Result<Vec<BatchItem>> {
    let langs = corpus.languages();
    if langs.is_empty() {
        return Err(PolyglotError::Config("training corpus is empty".into()));
    }
    for l in langs {
        let n = corpus.speakers(&l.id)?.iter().filter(|s| corpus.train_indices(s).len() >= 2).count();
        if n < 2 {
            return Err(PolyglotError::Config(format!(
                "language {} needs at least two speakers with two training utterances for the contrastive term",
                l.id
            )));
        }
    }
    if cfg.phase == 3 && langs.len() < 2 {
        return Err(PolyglotError::Config("phase 3 needs at least two languages".into()));
    }
    let offset = rng.random_range(0..langs.len());
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for i in 0..cfg.batch_size {
        let lang = &langs[(offset + i) % langs.len()].id;
        let speakers: Vec<&String> =
            corpus.speakers(lang)?.iter().filter(|s| corpus.train_indices(s).len() >= 2).collect();
        let si = rng.random_range(0..speakers.len());
        let own = corpus.train_indices(speakers[si]);
        let a = rng.random_range(0..own.len());
        let mut p = rng.random_range(0..own.len() - 1);
        if p >= a {
            p += 1;
        }
        let mut ni = rng.random_range(0..speakers.len() - 1);
        if ni >= si {
            ni += 1;
        }
        let negative = *corpus.train_indices(speakers[ni]).choose(rng).expect("two or more utterances");
        let anchor = own[a];
        let t = corpus.sample(anchor).frames.rows();
        let len = t.min(cfg.seq_len);
        let start = if t > len { rng.random_range(0..=t - len) } else { 0 };
        let target = if cfg.phase == 3 {
            let li = corpus.language_index(lang)?;
            let mut bi = rng.random_range(0..langs.len() - 1);
            if bi >= li {
                bi += 1;
            }
            let tgt = &langs[bi].id;
            let pool = corpus.train_of_language(tgt)?;
            Some((tgt.clone(), *pool.choose(rng).expect("nonempty language")))
        } else {
            None
        };
        batch.push(BatchItem { lang: lang.clone(), anchor, positive: own[p], negative, crop: (start, len), target });
    }
    Ok(batch)
}

/// Parameters updated in `phase`: everything in phases 1 and 2, only the
/// speaker encoders in phase 3.
pub fn trainable_params(model: &PolyglotModel, phase: u8) -> Result<Vec<ParamId>> {
    match phase {
        1 | 2 => Ok(model.store().ids().collect()),
        3 => Ok(model.encoder_params()),
        _ => Err(PolyglotError::Config(format!("phase must be 1, 2 or 3, got {phase}"))),
    }
}

/// Anchor frames and the phonemes they cover after cropping.
fn cropped(corpus: &Corpus, item: &BatchItem) -> (Tensor, Vec<usize>) {
    let sample = corpus.sample(item.anchor);
    let (start, len) = item.crop;
    let t = sample.frames.rows();
    if start == 0 && len == t {
        return (sample.frames.clone(), sample.phonemes.clone());
    }
    let d = sample.frames.cols();
    let frames = Tensor::new(vec![len, d], sample.frames.data()[start * d..(start + len) * d].to_vec())
        .expect("window inside utterance");
    // Phonemes overlapping the window, assuming uniform durations.
    let j = sample.phonemes.len();
    let first = start * j / t;
    let last = ((start + len) * j).div_ceil(t).clamp(first + 1, j);
    (frames, sample.phonemes[first..last].to_vec())
}

/// Loss values and gradient of one item.
pub struct ItemResult {
    pub terms: LossTerms,
    pub grads: ParamGrads,
}

/// Builds the objective of one item, back-propagates `scale × total`, and
/// returns the unscaled term values.
pub fn item_step(
    model: &PolyglotModel,
    corpus: &Corpus,
    item: &BatchItem,
    cfg: &PhaseConfig,
    trainable: &[ParamId],
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ItemResult> {
    let branch = model.language(&item.lang)?;
    let (y, ids) = cropped(corpus, item);
    let mut s = Session::with_trainable(model.store(), trainable);
    let yv = s.constant(y.clone());
    let pos = s.constant(corpus.sample(item.positive).frames.clone());
    let neg = s.constant(corpus.sample(item.negative).frames.clone());
    let z1 = branch.encoder.embed(&mut s, yv)?;
    let z2 = branch.encoder.embed(&mut s, pos)?;
    let z3 = branch.encoder.embed(&mut s, neg)?;
    let enc = branch.phonemes.encode(&mut s, &ids)?;
    let out = model.core().synthesize(&mut s, enc, z1, SynthesisMode::TeacherForced(&y), cfg.noise_sd, rng)?;
    assert!(out.teacher_forced, "reconstruction path must be teacher-forced");
    let mse = loss_mse(&mut s.graph, out.frames, yv)?;
    let contrast = loss_contrast(&mut s.graph, z1, z2, z3, cfg.weights.margin)?;
    let z_o = branch.encoder.embed(&mut s, out.frames)?;
    let cycle = cycle_distance(&mut s.graph, z1, z_o)?;
    let w = &cfg.weights;
    let g = &mut s.graph;
    let c = g.scale(contrast, w.alpha);
    let y_ = g.scale(cycle, w.beta);
    let mut total = g.add(mse, c)?;
    total = g.add(total, y_)?;
    let mut terms = LossTerms {
        mse: g.value(mse).item(),
        contrast: g.value(contrast).item(),
        cycle: g.value(cycle).item(),
        poly: 0.0,
    };
    if let Some((tgt, src_of_ids)) = &item.target {
        let tgt_ids = &corpus.sample(*src_of_ids).phonemes;
        let max_steps = cfg.poly_steps_per_phoneme * tgt_ids.len();
        if w.gamma > 0.0 {
            let term = loss_poly(&mut s, model, &item.lang, yv, tgt, tgt_ids, max_steps, cfg.poly_encoder, rng)?;
            terms.poly = s.value(term.loss).item();
            let p = s.graph.scale(term.loss, w.gamma);
            total = s.graph.add(total, p)?;
        } else {
            // Logged only; no gradient is needed.
            let mut f = Session::frozen(model.store());
            let yf = f.constant(y);
            let term = loss_poly(&mut f, model, &item.lang, yf, tgt, tgt_ids, max_steps, cfg.poly_encoder, rng)?;
            terms.poly = f.value(term.loss).item();
        }
    }
    let scaled = s.graph.scale(total, scale);
    let grads = s.gradients(scaled)?;
    Ok(ItemResult { terms, grads })
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub phase: u8,
    pub terms: LossTerms,
    pub total: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step\tphase\tL_MSE\tL_contrast\tL_cycle\tL_poly\ttotal";

    /// Tab-separated line; values use the shortest round-tripping form.
    pub fn to_tsv(&self) -> String {
        let t = &self.terms;
        format!("{}\t{}\t{}\t{}\t{}\t{}\t{}", self.step, self.phase, t.mse, t.contrast, t.cycle, t.poly, self.total)
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: PolyglotModel,
    pub adam: AdamState,
    pub seed: u64,
    /// Phase in progress, or the last one finished.
    pub phase: u8,
    /// Last fully completed phase, 0 for none.
    pub completed: u8,
    /// Steps taken in `phase`.
    pub step: usize,
    /// Lowest total loss seen in `phase` and steps since it was reached.
    pub best: f64,
    pub since_best: usize,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn new(model: PolyglotModel, seed: u64) -> Self {
        let adam = AdamState::new(model.store());
        TrainState { model, adam, seed, phase: 0, completed: 0, step: 0, best: f64::INFINITY, since_best: 0, log: Vec::new() }
    }

    fn begin(&mut self, phase: u8) -> Result<()> {
        let resuming = self.phase == phase && self.completed + 1 == phase;
        if resuming {
            return Ok(());
        }
        if self.completed + 1 != phase {
            let need = match phase {
                1 => "a fresh model".to_string(),
                p => format!("a completed phase {} checkpoint", p - 1),
            };
            let have = match self.completed {
                0 => "a fresh model".to_string(),
                p => format!("a completed phase {p} checkpoint"),
            };
            return Err(PolyglotError::Contract(format!("phase {phase} requires {need}, found {have}")));
        }
        self.phase = phase;
        self.step = 0;
        self.best = f64::INFINITY;
        self.since_best = 0;
        self.adam = AdamState::new(self.model.store());
        Ok(())
    }
}

/// Deterministic per-step RNG seed, so interrupted runs resume identically.
pub fn step_seed(seed: u64, phase: u8, step: usize) -> u64 {
    let mut x = seed ^ ((phase as u64) << 56) ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// One optimizer step; returns the logged row. The state is unchanged on error.
pub fn train_step(state: &mut TrainState, corpus: &Corpus, cfg: &PhaseConfig) -> Result<LogRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(state.seed, cfg.phase, state.step));
    let batch = make_batch(corpus, cfg, &mut rng)?;
    let trainable = trainable_params(&state.model, cfg.phase)?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamGrads::zeros_like(state.model.store());
    let mut terms = LossTerms::default();
    for item in &batch {
        let r = item_step(&state.model, corpus, item, cfg, &trainable, scale, &mut rng)?;
        terms.add(&r.terms);
        grads.accumulate(&r.grads);
    }
    let terms = terms.scaled(scale);
    let step = state.step + 1;
    let total = total_loss(&terms, &cfg.weights).map_err(|e| match e {
        PolyglotError::NonFinite { term, .. } => PolyglotError::NonFinite { term, step },
        other => other,
    })?;
    if !grads.is_finite() {
        return Err(PolyglotError::NonFinite { term: "gradient".into(), step });
    }
    AdamState::clip(&mut grads, cfg.clip_norm);
    let mut next = state.model.store().clone();
    let mut adam = state.adam.clone();
    adam.step(&mut next, &grads, &trainable, cfg.lr);
    if let Some((_, name, _)) = next.iter().find(|(_, _, v)| !v.is_finite()) {
        return Err(PolyglotError::NonFinite { term: format!("parameter {name}"), step });
    }
    *state.model.store_mut() = next;
    state.adam = adam;
    state.step = step;
    if total < state.best {
        state.best = total;
        state.since_best = 0;
    } else {
        state.since_best += 1;
    }
    let row = LogRow { step, phase: cfg.phase, terms, total };
    state.log.push(row);
    Ok(row)
}

/// How a call to [`train_phase`] ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseEnd {
    /// Step budget used up.
    Budget,
    /// Total loss stopped improving.
    Plateau,
    /// The callback asked to stop; the phase is not complete.
    Interrupted,
}

/// Runs `cfg.phase` until its budget or a plateau, calling `on_step` after
/// every step. Returning `Break` from `on_step` leaves the phase resumable.
pub fn train_phase(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &PhaseConfig,
    mut on_step: impl FnMut(&TrainState, &LogRow) -> Result<ControlFlow<()>>,
) -> Result<PhaseEnd> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(PolyglotError::Config("training corpus is empty".into()));
    }
    state.begin(cfg.phase)?;
    while state.step < cfg.steps {
        if cfg.plateau_patience > 0 && state.since_best >= cfg.plateau_patience {
            state.completed = cfg.phase;
            return Ok(PhaseEnd::Plateau);
        }
        let row = train_step(state, corpus, cfg)?;
        if on_step(state, &row)?.is_break() {
            return Ok(PhaseEnd::Interrupted);
        }
    }
    state.completed = cfg.phase;
    Ok(PhaseEnd::Budget)
}

/// Mean per-frame teacher-forced squared error (`L_MSE / T`, no input noise)
/// over the given samples.
pub fn teacher_forced_mse(model: &PolyglotModel, corpus: &Corpus, samples: &[usize]) -> Result<f64> {
    if samples.is_empty() {
        return Err(PolyglotError::Contract("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &i in samples {
        let sample = corpus.sample(i);
        let branch = model.language(&sample.lang)?;
        let mut s = Session::frozen(model.store());
        let y = s.constant(sample.frames.clone());
        let z = branch.encoder.embed(&mut s, y)?;
        let enc = branch.phonemes.encode(&mut s, &sample.phonemes)?;
        let out = model.core().synthesize(&mut s, enc, z, SynthesisMode::TeacherForced(&sample.frames), 0.0, &mut rng)?;
        let l = loss_mse(&mut s.graph, out.frames, y)?;
        total += s.value(l).item() / sample.frames.rows() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// A fixed evaluation subset: the first `per_speaker` training utterances of every speaker.
pub fn probe_samples(corpus: &Corpus, per_speaker: usize) -> Vec<usize> {
    corpus
        .all_speakers()
        .iter()
        .flat_map(|(_, s)| corpus.train_indices(s).iter().take(per_speaker).copied())
        .collect()
}
