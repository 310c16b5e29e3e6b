//! Reconstruction, contrastive, cycle and cross-language speaker-preservation
//! losses, and their weighted sum.

use rand::Rng;

use crate::encoders::{LanguageId, SpeakerEncoder};
use crate::error::{PolyglotError, Result};
use crate::model::PolyglotModel;
use crate::numerics::{Graph, Var};
use crate::params::Session;
use crate::voiceloop::SynthesisMode;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Contrastive weight.
    pub alpha: f64,
    /// Cycle weight.
    pub beta: f64,
    /// Speaker-preservation weight.
    pub gamma: f64,
    /// Contrastive margin `Δ`.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 10.0, beta: 10.0, gamma: 1000.0, margin: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(PolyglotError::Config(format!("contrastive margin must be positive, got {}", self.margin)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PolyglotError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which encoder re-embeds the converted speech in the speaker-preservation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PolyEncoder {
    /// `N_s` of the source language, applied to target-language speech.
    #[default]
    Source,
    /// `N_s` of the target language.
    Target,
}

/// `(1/d_o) Σ_t ‖y_t − o_t‖²` over `T × d_o` frames.
pub fn loss_mse(g: &mut Graph<'_>, pred: Var, target: Var) -> Result<Var> {
    let d_o = g.value(target).cols();
    let diff = g.sub(target, pred)?;
    let sq = g.sum_squares(diff);
    Ok(g.scale(sq, 1.0 / d_o as f64))
}

/// `½(‖z1 − z2‖² + max(0, Δ − ‖z2 − z3‖)²)`; `z1, z2` share a speaker.
pub fn loss_contrast(g: &mut Graph<'_>, z1: Var, z2: Var, z3: Var, margin: f64) -> Result<Var> {
    let pos = g.sub(z1, z2)?;
    let pos = g.sum_squares(pos);
    let neg = g.sub(z2, z3)?;
    let dist = g.l2_norm(neg);
    let slack = g.scale(dist, -1.0);
    let slack = g.add_scalar(slack, margin);
    let hinge = g.relu(slack);
    let hinge = g.square(hinge);
    let both = g.add(pos, hinge)?;
    Ok(g.scale(both, 0.5))
}

/// `‖z_y − z_o‖²` between the embedding of an input and of its resynthesis.
pub fn cycle_distance(g: &mut Graph<'_>, z_y: Var, z_o: Var) -> Result<Var> {
    let d = g.sub(z_y, z_o)?;
    Ok(g.sum_squares(d))
}

/// Cycle loss with the encoder applied to both the input `y` and the output `o`.
pub fn loss_cycle(s: &mut Session<'_>, encoder: &SpeakerEncoder, y: Var, o: Var) -> Result<Var> {
    let z_y = encoder.embed(s, y)?;
    let z_o = encoder.embed(s, o)?;
    cycle_distance(&mut s.graph, z_y, z_o)
}

/// L1 distance used by the speaker-preservation loss.
pub fn poly_distance(g: &mut Graph<'_>, z_src: Var, z_converted: Var) -> Result<Var> {
    let d = g.sub(z_src, z_converted)?;
    Ok(g.l1_norm(d))
}

/// Pieces of one speaker-preservation term, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct PolyTerm {
    pub loss: Var,
    pub z_src: Var,
    pub z_converted: Var,
    pub frames: Var,
}

/// `‖N_s^src(y) − N_s(G(LUT^tgt(ids), N_s^src(y)))‖₁` with free-running `G`.
///
/// The re-embedding encoder is `N_s^src` unless `which` selects the target
/// language's encoder. `src == tgt` is rejected.
#[allow(clippy::too_many_arguments)]
pub fn loss_poly<R: Rng + ?Sized>(
    s: &mut Session<'_>,
    model: &PolyglotModel,
    src: &LanguageId,
    y_src: Var,
    tgt: &LanguageId,
    ids_tgt: &[usize],
    max_steps: usize,
    which: PolyEncoder,
    rng: &mut R,
) -> Result<PolyTerm> {
    if src == tgt {
        return Err(PolyglotError::Contract(format!(
            "speaker-preservation loss needs distinct languages, got {src} twice"
        )));
    }
    let source = model.language(src)?;
    let target = model.language(tgt)?;
    let z_src = source.encoder.embed(s, y_src)?;
    let enc = target.phonemes.encode(s, ids_tgt)?;
    let out = model.core().synthesize(s, enc, z_src, SynthesisMode::FreeRunning { max_steps }, 0.0, rng)?;
    debug_assert!(!out.teacher_forced);
    let reembed = match which {
        PolyEncoder::Source => &source.encoder,
        PolyEncoder::Target => &target.encoder,
    };
    let z_converted = reembed.embed(s, out.frames)?;
    let loss = poly_distance(&mut s.graph, z_src, z_converted)?;
    Ok(PolyTerm { loss, z_src, z_converted, frames: out.frames })
}

/// Values of the four loss terms for one item or a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub mse: f64,
    pub contrast: f64,
    pub cycle: f64,
    pub poly: f64,
}

impl LossTerms {
    pub fn add(&mut self, other: &LossTerms) {
        self.mse += other.mse;
        self.contrast += other.contrast;
        self.cycle += other.cycle;
        self.poly += other.poly;
    }

    pub fn scaled(self, f: f64) -> LossTerms {
        LossTerms { mse: self.mse * f, contrast: self.contrast * f, cycle: self.cycle * f, poly: self.poly * f }
    }

    /// First non-finite term, by name.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("L_MSE", self.mse), ("L_contrast", self.contrast), ("L_cycle", self.cycle), ("L_poly", self.poly)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// `mse + α·contrast + β·cycle + γ·poly`; any non-finite input is an error.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    if let Some(term) = terms.non_finite() {
        return Err(PolyglotError::NonFinite { term: term.to_string(), step: 0 });
    }
    Ok(terms.mse + w.alpha * terms.contrast + w.beta * terms.cycle + w.gamma * terms.poly)
}
