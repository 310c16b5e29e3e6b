//! Finite-difference verification of model objectives, per parameter group.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{compare_coordinates_with_steps, GradCheckReport, Tensor, Var};
use crate::params::{ParamId, ParamStore, Session};

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the reverse-mode gradient of `objective` with respect to `ids`
/// against central differences.
///
/// `objective` must be a deterministic function of the parameter values; it
/// is rebuilt from scratch for every perturbed evaluation.
pub fn check_params<F>(store: &ParamStore, ids: &[ParamId], eps: f64, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    check_params_with_steps(store, ids, &[eps], 0.0, objective)
}

/// [`check_params`] over a ladder of steps; see [`compare_coordinates_with_steps`].
pub fn check_params_with_steps<F>(
    store: &ParamStore,
    ids: &[ParamId],
    steps: &[f64],
    accept: f64,
    objective: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::with_trainable(store, ids);
        let loss = objective(&mut s)?;
        let grads = s.gradients(loss)?;
        ids.iter()
            .map(|&id| grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape().to_vec())))
            .collect::<Vec<_>>()
    };
    let mut params: Vec<_> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let mut scratch = store.clone();
    compare_coordinates_with_steps(&mut params, &analytic, steps, accept, |values| {
        for (&id, v) in ids.iter().zip(values) {
            scratch.get_mut(id).data_mut().copy_from_slice(v.data());
        }
        let mut s = Session::frozen(&scratch);
        let loss = objective(&mut s)?;
        Ok(s.value(loss).item())
    })
}

/// Result of checking one named parameter group.
#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub group: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Name of the parameter holding the worst coordinate.
    pub worst_param: Option<String>,
}

/// Runs [`check_params_with_steps`] once per group.
pub fn check_groups<F>(
    store: &ParamStore,
    groups: &[(String, Vec<ParamId>)],
    steps: &[f64],
    accept: f64,
    objective: F,
) -> Result<Vec<GroupCheck>>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    groups
        .iter()
        .map(|(name, ids)| {
            let report = check_params_with_steps(store, ids, steps, accept, &objective)?;
            Ok(GroupCheck {
                group: name.clone(),
                max_relative_error: report.max_relative_error,
                coordinates: ids.iter().map(|&id| store.get(id).len()).sum(),
                worst_param: report.worst.map(|(p, _)| store.name(ids[p]).to_string()),
            })
        })
        .collect()
}

/// Adds `N(0, sd²)` noise to every parameter.
///
/// Zero-initialized biases put ReLU units of a zero-input first step exactly
/// on their kink, where central differences average the two one-sided slopes.
/// Jittering moves the check point to a generic location.
pub fn jitter(store: &mut ParamStore, sd: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        let noise = Tensor::randn(p.shape().to_vec(), sd, &mut rng);
        p.add_assign(&noise);
    }
}

/// Settings of the standard gradient-check suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    /// Steps tried in order for each coordinate until one agrees.
    pub steps: Vec<f64>,
    pub tolerance: f64,
    pub jitter_sd: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { steps: vec![DEFAULT_EPS, 1e-4, 1e-3, 1e-2], tolerance: 1e-4, jitter_sd: 0.1, seed: 1 }
    }
}

/// One line of a suite report.
#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub objective: String,
    pub check: GroupCheck,
    pub passed: bool,
}

/// Objective evaluated on a session.
pub type Objective<'a> = Box<dyn Fn(&mut Session<'_>) -> Result<Var> + 'a>;

/// Named objective together with the parameter groups it is checked against.
pub struct SuiteCase<'a> {
    pub name: String,
    pub groups: Vec<(String, Vec<ParamId>)>,
    pub objective: Objective<'a>,
}

/// Checks every case against `store` and marks groups above the tolerance.
pub fn run_suite(store: &ParamStore, cases: &[SuiteCase<'_>], cfg: &SuiteConfig) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for case in cases {
        // Searching past the first passing step makes the reported error the best agreement found.
        for check in check_groups(store, &case.groups, &cfg.steps, cfg.tolerance / 100.0, &case.objective)? {
            let passed = check.max_relative_error <= cfg.tolerance;
            rows.push(SuiteRow { objective: case.name.clone(), check, passed });
        }
    }
    Ok(rows)
}

/// Cases covering the core, the encoders, the reconstruction objective of
/// phases 1 and 2 and the speaker-preservation objective of phase 3, on the
/// tiny configuration (k=4, d_buf=8, J=5, T=6, d_o=4).
pub fn standard_cases(model: &crate::model::PolyglotModel, seed: u64) -> Vec<SuiteCase<'_>> {
    use crate::losses::{cycle_distance, loss_contrast, loss_mse, loss_poly, LossWeights, PolyEncoder};
    use crate::voiceloop::SynthesisMode;

    let cfg = model.config();
    let (t, j, d_o) = (6, 5, cfg.core.d_o);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = Tensor::randn(vec![t, d_o], 1.0, &mut rng);
    let pos = Tensor::randn(vec![t + 1, d_o], 1.0, &mut rng);
    let neg = Tensor::randn(vec![t, d_o], 1.0, &mut rng);
    let z = Tensor::randn(vec![cfg.core.d_z], 1.0, &mut rng);
    let langs = model.language_ids();
    let ids: Vec<usize> = (0..j).map(|i| (i * 3 + 1) % cfg.languages[0].vocab).collect();
    let groups = model.param_groups();
    let group = |name: &str| groups.iter().find(|(n, _)| n == name).cloned().expect("known group");
    let w = LossWeights::default();
    let mut cases: Vec<SuiteCase<'_>> = Vec::new();

    let (yc, zc) = (y.clone(), z.clone());
    let enc0 = model.languages()[0].phonemes.clone();
    let ids0 = ids.clone();
    cases.push(SuiteCase {
        name: "voiceloop".into(),
        groups: vec![group("core")],
        objective: Box::new(move |s| {
            let enc = enc0.encode(s, &ids0)?;
            let zv = s.constant(zc.clone());
            let mut r = ChaCha8Rng::seed_from_u64(3);
            let out = model.core().synthesize(s, enc, zv, SynthesisMode::TeacherForced(&yc), 0.5, &mut r)?;
            let target = s.constant(yc.clone());
            loss_mse(&mut s.graph, out.frames, target)
        }),
    });

    for lang in &langs {
        let branch = model.language(lang).expect("registered");
        let (yc, zc) = (y.clone(), z.clone());
        cases.push(SuiteCase {
            name: format!("encoder {lang}"),
            groups: vec![group(&format!("ns.{lang}"))],
            objective: Box::new(move |s| {
                let x = s.constant(yc.clone());
                let e = branch.encoder.embed(s, x)?;
                let target = s.constant(zc.clone());
                let d = s.graph.sub(e, target)?;
                Ok(s.graph.sum_squares(d))
            }),
        });
    }

    for lang in &langs {
        let branch = model.language(lang).expect("registered");
        let (yc, pc, nc, idc) = (y.clone(), pos.clone(), neg.clone(), ids.clone());
        cases.push(SuiteCase {
            name: format!("phases 1-2 objective {lang}"),
            groups: vec![group("core"), group(&format!("lutp.{lang}")), group(&format!("ns.{lang}"))],
            objective: Box::new(move |s| {
                let yv = s.constant(yc.clone());
                let (p, n) = (s.constant(pc.clone()), s.constant(nc.clone()));
                let z1 = branch.encoder.embed(s, yv)?;
                let z2 = branch.encoder.embed(s, p)?;
                let z3 = branch.encoder.embed(s, n)?;
                let enc = branch.phonemes.encode(s, &idc)?;
                let mut r = ChaCha8Rng::seed_from_u64(4);
                let out = model.core().synthesize(s, enc, z1, SynthesisMode::TeacherForced(&yc), 0.0, &mut r)?;
                let mse = loss_mse(&mut s.graph, out.frames, yv)?;
                let c = loss_contrast(&mut s.graph, z1, z2, z3, w.margin)?;
                let zo = branch.encoder.embed(s, out.frames)?;
                let cy = cycle_distance(&mut s.graph, z1, zo)?;
                let c = s.graph.scale(c, w.alpha);
                let cy = s.graph.scale(cy, w.beta);
                let total = s.graph.add(mse, c)?;
                Ok(s.graph.add(total, cy)?)
            }),
        });
    }

    for (src, tgt) in langs.iter().zip(langs.iter().cycle().skip(1)).filter(|(a, b)| a != b) {
        let (yc, idc) = (y.clone(), ids.clone());
        let (src, tgt) = (src.clone(), tgt.clone());
        cases.push(SuiteCase {
            name: format!("phase 3 objective {src}->{tgt}"),
            groups: vec![group("core"), group(&format!("lutp.{tgt}")), group(&format!("ns.{src}"))],
            objective: Box::new(move |s| {
                let yv = s.constant(yc.clone());
                let mut r = ChaCha8Rng::seed_from_u64(5);
                let term = loss_poly(s, model, &src, yv, &tgt, &idc, 3 * idc.len(), PolyEncoder::Source, &mut r)?;
                Ok(s.graph.scale(term.loss, w.gamma))
            }),
        });
    }
    cases
}

/// Runs [`standard_cases`] on a jittered tiny model.
pub fn standard_suite(tags: &[&str], cfg: &SuiteConfig) -> Result<Vec<SuiteRow>> {
    use crate::model::{ModelConfig, PolyglotModel};
    let mut model = PolyglotModel::new(ModelConfig::tiny(tags), cfg.seed)?;
    jitter(model.store_mut(), cfg.jitter_sd, cfg.seed.wrapping_add(1));
    let cases = standard_cases(&model, cfg.seed);
    run_suite(model.store(), &cases, cfg)
}
