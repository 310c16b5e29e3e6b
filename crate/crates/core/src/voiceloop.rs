//! Shared synthesis core: FIFO context buffer, monotone mixture attention over
//! phoneme encodings, and the buffer-update and output networks.
//!
//! One [`CoreParams`] instance serves every language. Per step:
//!
//! ```text
//! (Δκ, β̂, ρ̂) = N_a(flatten S)
//! κ' = κ + softplus(Δκ),  β = softplus(β̂) + 1e-4,  ρ = softmax(ρ̂)
//! w_j ∝ Σ_c ρ_c exp(−β_c (κ'_c − j)²),  context = wᵀ E
//! u   = N_u([flatten S, context + P_z z, o_prev])
//! S'  = [u; S[0..k−1]]
//! o   = N_o([flatten S', P_z z])
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PolyglotError, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Mlp, ParamId, ParamStore, Session};

/// Precision floor added after the softplus so no component is flat.
pub const MIN_PRECISION: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoreConfig {
    /// Number of buffer slots `k`.
    pub buffer_slots: usize,
    pub d_buf: usize,
    pub d_enc: usize,
    /// Attention mixture components `C`.
    pub components: usize,
    pub hidden: usize,
    pub d_o: usize,
    pub d_z: usize,
    /// Free-running stops once the expected position passes `J − 1 + delta_stop`.
    pub delta_stop: f64,
    /// Feed the previous output frame into `N_u`.
    pub feed_prev_output: bool,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig {
            buffer_slots: 20,
            d_buf: 64,
            d_enc: 64,
            components: 3,
            hidden: 128,
            d_o: 8,
            d_z: 256,
            delta_stop: 0.5,
            feed_prev_output: true,
        }
    }
}

impl CoreConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("buffer_slots", self.buffer_slots),
            ("d_buf", self.d_buf),
            ("d_enc", self.d_enc),
            ("components", self.components),
            ("hidden", self.hidden),
            ("d_o", self.d_o),
            ("d_z", self.d_z),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(PolyglotError::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.delta_stop.is_finite() {
            return Err(PolyglotError::Config("delta_stop must be finite".into()));
        }
        Ok(())
    }
}

/// Parameters of `N_a`, `N_u`, `N_o` and the speaker projection `P_z`.
#[derive(Clone, Debug)]
pub struct CoreParams {
    cfg: CoreConfig,
    na: Mlp,
    nu: Mlp,
    no: Mlp,
    pz: ParamId,
}

/// FIFO buffer `S`, newest slot first.
#[derive(Clone, Copy, Debug)]
pub struct BufferState {
    pub slots: Var,
}

/// Per-component attention positions `κ`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub kappa: Var,
}

#[derive(Clone, Debug)]
pub struct AttentionStep {
    pub weights: Var,
    pub context: Var,
    pub state: AttentionState,
    /// Mixture proportions `ρ`, for the stop rule.
    pub mixture: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub frame: Var,
    pub buffer: BufferState,
    pub attention: AttentionState,
    pub weights: Var,
    /// Expected attended position `Σ_c ρ_c κ'_c`.
    pub position: f64,
}

pub enum SynthesisMode<'t> {
    /// Ground-truth `T × d_o` frames; the previous target (plus noise) is fed back.
    TeacherForced(&'t Tensor),
    /// Own outputs are fed back; stops on the attention stop rule or `max_steps`.
    FreeRunning { max_steps: usize },
}

impl SynthesisMode<'_> {
    pub fn is_teacher_forced(&self) -> bool {
        matches!(self, SynthesisMode::TeacherForced(_))
    }
}

/// Result of [`CoreParams::synthesize`].
#[derive(Clone, Debug)]
pub struct Synthesis {
    /// `T × d_o` generated frames.
    pub frames: Var,
    /// `T × J` attention weights.
    pub attention: Tensor,
    pub teacher_forced: bool,
}

/// Zero buffer of `k × d_buf` and zero positions for `components`.
pub fn init_state(
    graph: &mut Graph<'_>,
    k: usize,
    d_buf: usize,
    components: usize,
) -> Result<(BufferState, AttentionState)> {
    if k == 0 || d_buf == 0 || components == 0 {
        return Err(PolyglotError::Config(format!(
            "buffer and attention sizes must be positive, got k={k}, d_buf={d_buf}, C={components}"
        )));
    }
    let slots = graph.constant(Tensor::zeros(vec![k, d_buf]));
    let kappa = graph.constant(Tensor::zeros(vec![components]));
    Ok((BufferState { slots }, AttentionState { kappa }))
}

/// Pushes `u` into slot 0 and drops the oldest slot.
pub fn buffer_update(graph: &mut Graph<'_>, state: BufferState, u: Var) -> Result<BufferState> {
    let shape = graph.value(state.slots).shape().to_vec();
    let (k, d_buf) = (shape[0], shape[1]);
    if graph.value(u).len() != d_buf {
        return Err(PolyglotError::Contract(format!(
            "buffer update of width {} into buffer of width {d_buf}",
            graph.value(u).len()
        )));
    }
    let row = graph.reshape(u, vec![1, d_buf])?;
    let slots = if k == 1 {
        row
    } else {
        let kept = graph.slice_rows(state.slots, 0, k - 1)?;
        graph.concat(&[row, kept])?
    };
    Ok(BufferState { slots })
}

fn check_len(graph: &Graph<'_>, v: Var, want: usize, what: &str) -> Result<()> {
    let got = graph.value(v).len();
    if got != want {
        return Err(PolyglotError::Contract(format!("{what} has {got} values, expected {want}")));
    }
    Ok(())
}

impl CoreParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: CoreConfig, init_sd: f64, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let flat = cfg.buffer_slots * cfg.d_buf;
        let h = cfg.hidden;
        let na = Mlp::new(store, "core.na", &[flat, h, h, 3 * cfg.components], init_sd, rng);
        let nu_in = flat + cfg.d_enc + if cfg.feed_prev_output { cfg.d_o } else { 0 };
        let nu = Mlp::new(store, "core.nu", &[nu_in, h, h, cfg.d_buf], init_sd, rng);
        let no = Mlp::new(store, "core.no", &[flat + cfg.d_enc, h, h, cfg.d_o], init_sd, rng);
        let pz = store.add("core.pz", Tensor::randn(vec![cfg.d_z, cfg.d_enc], init_sd, rng));
        Ok(CoreParams { cfg, na, nu, no, pz })
    }

    pub fn config(&self) -> &CoreConfig {
        &self.cfg
    }

    pub fn init_state(&self, graph: &mut Graph<'_>) -> Result<(BufferState, AttentionState)> {
        init_state(graph, self.cfg.buffer_slots, self.cfg.d_buf, self.cfg.components)
    }

    /// One attention update from the current buffer.
    pub fn attention_step(
        &self,
        s: &mut Session<'_>,
        buffer: &BufferState,
        encodings: Var,
        attention: &AttentionState,
    ) -> Result<AttentionStep> {
        let positions = s.value(encodings).rows();
        if s.value(encodings).rank() != 2 || positions == 0 {
            return Err(PolyglotError::Contract("attention needs at least one phoneme encoding".into()));
        }
        let c = self.cfg.components;
        let flat = s.graph.flatten(buffer.slots);
        let raw = self.na.forward(s, flat)?;
        let g = &mut s.graph;
        let dk = g.slice_rows(raw, 0, c)?;
        let dk = g.softplus(dk);
        let kappa = g.add(attention.kappa, dk)?;
        let bh = g.slice_rows(raw, c, c)?;
        let bh = g.softplus(bh);
        let beta = g.add_scalar(bh, MIN_PRECISION);
        let logits = g.slice_rows(raw, 2 * c, c)?;
        let weights = g.mixture_weights(kappa, beta, logits, positions)?;
        let context = g.matmul(weights, encodings)?;
        let lv = g.value(logits).data();
        let m = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lv.iter().map(|l| (l - m).exp()).collect();
        let total: f64 = e.iter().sum();
        let mixture = e.iter().map(|v| v / total).collect();
        Ok(AttentionStep { weights, context, state: AttentionState { kappa }, mixture })
    }

    /// One synthesis step; `o_prev` is the previous frame fed to `N_u`.
    pub fn step(
        &self,
        s: &mut Session<'_>,
        buffer: &BufferState,
        attention: &AttentionState,
        encodings: Var,
        speaker: Var,
        o_prev: Var,
    ) -> Result<StepOutput> {
        check_len(&s.graph, speaker, self.cfg.d_z, "speaker embedding")?;
        check_len(&s.graph, o_prev, self.cfg.d_o, "previous frame")?;
        let enc_cols = s.value(encodings).cols();
        if enc_cols != self.cfg.d_enc {
            return Err(PolyglotError::Contract(format!(
                "phoneme encodings have width {enc_cols}, expected {}",
                self.cfg.d_enc
            )));
        }
        let att = self.attention_step(s, buffer, encodings, attention)?;
        let pz = s.param(self.pz);
        let g = &mut s.graph;
        let spk = g.matmul(speaker, pz)?;
        let conditioned = g.add(att.context, spk)?;
        let flat = g.flatten(buffer.slots);
        let nu_in = if self.cfg.feed_prev_output {
            g.concat(&[flat, conditioned, o_prev])?
        } else {
            g.concat(&[flat, conditioned])?
        };
        let u = self.nu.forward(s, nu_in)?;
        let next = buffer_update(&mut s.graph, *buffer, u)?;
        let flat_next = s.graph.flatten(next.slots);
        let no_in = s.graph.concat(&[flat_next, spk])?;
        let frame = self.no.forward(s, no_in)?;
        let kv = s.value(att.state.kappa).data();
        let position = kv.iter().zip(&att.mixture).map(|(k, r)| k * r).sum();
        Ok(StepOutput { frame, buffer: next, attention: att.state, weights: att.weights, position })
    }

    /// Runs the core over `encodings` (`J × d_enc`) for speaker `speaker` (`d_z`).
    ///
    /// In teacher-forced mode the previous ground-truth frame plus
    /// `N(0, noise_sd²)` noise is fed back; the first step sees a zero frame.
    /// `noise_sd` is ignored when free-running.
    pub fn synthesize<R: Rng + ?Sized>(
        &self,
        s: &mut Session<'_>,
        encodings: Var,
        speaker: Var,
        mode: SynthesisMode<'_>,
        noise_sd: f64,
        rng: &mut R,
    ) -> Result<Synthesis> {
        let positions = s.value(encodings).rows();
        if s.value(encodings).rank() != 2 || positions == 0 {
            return Err(PolyglotError::Contract("synthesis needs a nonempty phoneme sequence".into()));
        }
        let d_o = self.cfg.d_o;
        let (mut buffer, mut attention) = self.init_state(&mut s.graph)?;
        let mut prev = s.constant(Tensor::zeros(vec![d_o]));
        let mut frames = Vec::new();
        let mut weights = Vec::new();
        let teacher_forced = mode.is_teacher_forced();
        match mode {
            SynthesisMode::TeacherForced(targets) => {
                if targets.rank() != 2 || targets.cols() != d_o {
                    return Err(PolyglotError::Contract(format!(
                        "targets of shape {:?} do not have {d_o} columns",
                        targets.shape()
                    )));
                }
                let steps = targets.rows();
                if steps == 0 {
                    return Err(PolyglotError::Contract("teacher forcing needs at least one target frame".into()));
                }
                if noise_sd < 0.0 || !noise_sd.is_finite() {
                    return Err(PolyglotError::Config(format!("noise_sd must be nonnegative, got {noise_sd}")));
                }
                let normal = Normal::new(0.0, noise_sd).expect("valid sd");
                for t in 0..steps {
                    let out = self.step(s, &buffer, &attention, encodings, speaker, prev)?;
                    frames.push(out.frame);
                    weights.push(s.value(out.weights).data().to_vec());
                    buffer = out.buffer;
                    attention = out.attention;
                    let mut next = targets.row(t).to_vec();
                    if noise_sd > 0.0 {
                        for v in &mut next {
                            *v += normal.sample(rng);
                        }
                    }
                    prev = s.constant(Tensor::vector(next));
                }
            }
            SynthesisMode::FreeRunning { max_steps } => {
                if max_steps == 0 {
                    return Err(PolyglotError::Contract("free-running synthesis needs max_steps >= 1".into()));
                }
                let stop_at = positions as f64 - 1.0 + self.cfg.delta_stop;
                for _ in 0..max_steps {
                    let out = self.step(s, &buffer, &attention, encodings, speaker, prev)?;
                    frames.push(out.frame);
                    weights.push(s.value(out.weights).data().to_vec());
                    buffer = out.buffer;
                    attention = out.attention;
                    prev = out.frame;
                    if out.position >= stop_at {
                        break;
                    }
                }
            }
        }
        let rows: Vec<Var> =
            frames.iter().map(|&f| s.graph.reshape(f, vec![1, d_o])).collect::<Result<_, _>>()?;
        let stacked = s.graph.concat(&rows)?;
        let t = weights.len();
        let attention = Tensor::new(vec![t, positions], weights.concat())?;
        Ok(Synthesis { frames: stacked, attention, teacher_forced })
    }

    /// Every parameter id owned by the core.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for mlp in [&self.na, &self.nu, &self.no] {
            for l in &mlp.layers {
                ids.push(l.w);
                ids.push(l.b);
            }
        }
        ids.push(self.pz);
        ids
    }
}
