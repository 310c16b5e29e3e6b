//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails. Criteria 4 to 6 train on the default corpus and take
//! tens of minutes on one core.

use std::collections::VecDeque;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polyglot_cli::commands;
use polyglot_cli::config::RunConfig;
use polyglot_core::corpus::{gen_synthetic, nearest_centroid_accuracy, synthetic_corpus, Corpus, SynthConfig};
use polyglot_core::evalkit::{accuracy_matrix, project2d, Point2};
use polyglot_core::losses::{cycle_distance, loss_contrast, loss_mse, poly_distance, total_loss, LossTerms, LossWeights};
use polyglot_core::model::{ModelConfig, PolyglotModel};
use polyglot_core::numerics::{Graph, Tensor};
use polyglot_core::params::Session;
use polyglot_core::training::{
    load_checkpoint, save_checkpoint, train_phase, PhaseConfig, PhaseEnd, TrainState,
};
use polyglot_core::voiceloop::{buffer_update, init_state};

type Outcome = Result<(bool, String), String>;

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_SECONDS: f64 = 60.0;
const MSE_RATIO: f64 = 0.30;
const PIPELINE_SECONDS: f64 = 15.0 * 60.0;
const DIAGONAL_TOP1: f64 = 0.80;
const L1_RATIO: f64 = 0.7;
const POLY_SEEDS: u64 = 5;
const POLY_SEEDS_REQUIRED: usize = 4;
const SEPARABILITY: f64 = 0.95;
const PROJECTION_TOLERANCE: f64 = 1e-9;

fn continue_all(_: &TrainState, _: &polyglot_core::training::LogRow) -> polyglot_core::Result<ControlFlow<()>> {
    Ok(ControlFlow::Continue(()))
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let (rows, _) = commands::grad_check(&cfg).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.check.max_relative_error).fold(0.0, f64::max);
    let ok = rows.iter().all(|r| r.passed && r.check.max_relative_error <= GRAD_TOLERANCE) && secs < GRAD_SECONDS;
    Ok((ok, format!("{} groups, worst rel err {worst:.2e}, {secs:.1}s", rows.len())))
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fifo_ok = true;
    for k in [1, 3, 6] {
        let mut g = Graph::new();
        let (mut b, _) = init_state(&mut g, k, 4, 1).map_err(|e| e.to_string())?;
        let mut queue: VecDeque<Vec<f64>> = (0..k).map(|_| vec![0.0; 4]).collect();
        for _ in 0..1000 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let u = g.constant(Tensor::vector(v.clone()));
            b = buffer_update(&mut g, b, u).map_err(|e| e.to_string())?;
            queue.push_front(v);
            queue.truncate(k);
            let flat: Vec<f64> = queue.iter().flatten().copied().collect();
            fifo_ok &= g.value(b.slots).data() == flat.as_slice();
        }
    }

    let model = PolyglotModel::new(ModelConfig::tiny(&["en"]), 3).map_err(|e| e.to_string())?;
    let core = model.core();
    let mut s = Session::frozen(model.store());
    let enc = s.constant(Tensor::randn(vec![5, core.config().d_enc], 1.0, &mut rng));
    let (mut buffer, mut att) = core.init_state(&mut s.graph).map_err(|e| e.to_string())?;
    let mut kappa = vec![0.0; core.config().components];
    let (mut attention_ok, mut worst_sum) = (true, 0.0f64);
    for _ in 0..1000 {
        let u = s.constant(Tensor::randn(vec![core.config().d_buf], 3.0, &mut rng));
        buffer = buffer_update(&mut s.graph, buffer, u).map_err(|e| e.to_string())?;
        let out = core.attention_step(&mut s, &buffer, enc, &att).map_err(|e| e.to_string())?;
        let w = s.value(out.weights).data();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        attention_ok &= w.iter().all(|&x| x >= 0.0);
        let next = s.value(out.state.kappa).data().to_vec();
        attention_ok &= next.iter().zip(&kappa).all(|(n, o)| n >= o);
        kappa = next;
        att = out.state;
    }
    attention_ok &= worst_sum <= 1e-6;

    let corpus = small_corpus()?;
    let mut state = TrainState::new(tiny_model(4)?, 5);
    for p in [1, 2] {
        train_phase(&mut state, &corpus, &small_phase(p, 4), continue_all).map_err(|e| e.to_string())?;
    }
    let before = state.model.store().clone();
    let cfg = PhaseConfig { plateau_patience: 0, ..small_phase(3, 50) };
    let end = train_phase(&mut state, &corpus, &cfg, continue_all).map_err(|e| e.to_string())?;
    let (mut frozen_ok, mut moved) = (end == PhaseEnd::Budget, 0);
    for (id, name, value) in state.model.store().iter() {
        let same = value.data().iter().zip(before.get(id).data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("ns.") {
            moved += usize::from(!same);
        } else {
            frozen_ok &= same;
        }
    }
    frozen_ok &= moved > 0;
    Ok((
        fifo_ok && attention_ok && frozen_ok,
        format!(
            "fifo {}, attention {} (max |row sum - 1| {worst_sum:.1e}), phase-3 freeze {} ({moved} ns tensors moved)",
            word(fifo_ok),
            word(attention_ok),
            word(frozen_ok)
        ),
    ))
}

fn loss_units() -> Outcome {
    let scalar = |f: &dyn Fn(&mut Graph<'_>) -> polyglot_core::Result<polyglot_core::numerics::Var>| {
        let mut g = Graph::new();
        let v = f(&mut g).map_err(|e| e.to_string())?;
        Ok::<f64, String>(g.value(v).item())
    };
    let vec = |d: &[f64]| Tensor::vector(d.to_vec());
    let mse = scalar(&|g| {
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        loss_mse(g, a, b)
    })?;
    let contrast = scalar(&|g| {
        let (a, b, c) = (g.constant(vec(&[0.5, 0.0])), g.constant(vec(&[0.0, 0.0])), g.constant(vec(&[0.0, 0.4])));
        loss_contrast(g, a, b, c, 1.0)
    })?;
    let contrast_zero = scalar(&|g| {
        let (a, b, c) = (g.constant(vec(&[1.0, 2.0])), g.constant(vec(&[1.0, 2.0])), g.constant(vec(&[5.0, 2.0])));
        loss_contrast(g, a, b, c, 1.0)
    })?;
    let poly = scalar(&|g| {
        let (a, b) = (g.constant(vec(&[1.0, 0.0])), g.constant(vec(&[0.0, 1.0])));
        poly_distance(g, a, b)
    })?;
    let cycle = scalar(&|g| {
        let (a, b) = (g.constant(vec(&[1.0, 0.0, 2.0])), g.constant(vec(&[1.0, 1.0, 2.0])));
        cycle_distance(g, a, b)
    })?;
    let w = LossWeights::default();
    let total = total_loss(&LossTerms { mse: 1.0, contrast: 1.0, cycle: 1.0, poly: 1.0 }, &w).map_err(|e| e.to_string())?;
    let weights_ok = (w.alpha, w.beta, w.gamma) == (10.0, 10.0, 1000.0);
    let ok = mse == 1.0
        && (contrast - 0.305).abs() <= 1e-15
        && contrast_zero == 0.0
        && poly == 2.0
        && cycle == 1.0
        && total == 1021.0
        && weights_ok;
    Ok((
        ok,
        format!(
            "mse {mse}, contrast {contrast}, poly {poly}, cycle {cycle}, total {total}, weights alpha={} beta={} gamma={}",
            w.alpha, w.beta, w.gamma
        ),
    ))
}

struct Pipeline {
    manifest: PathBuf,
    run: PathBuf,
    eval: PathBuf,
}

fn polyglot(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_polyglot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("polyglot {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn desk_training(root: &Path) -> Result<(Outcome, Pipeline), String> {
    let corpus_dir = root.join("corpus");
    polyglot(&["gen-corpus", "--out", p(&corpus_dir)])?;
    let manifest = corpus_dir.join("manifest.jsonl");
    let run = root.join("run");
    let start = Instant::now();
    polyglot(&["train", "--corpus", p(&manifest), "--phase", "all", "--out", p(&run)])?;
    let secs = start.elapsed().as_secs_f64();
    let probe = fs::read_to_string(run.join(commands::PROBE_LOG)).map_err(|e| e.to_string())?;
    let value = |label: &str| -> Result<f64, String> {
        probe
            .lines()
            .find_map(|l| l.strip_prefix(label).and_then(|r| r.strip_prefix('\t')))
            .ok_or_else(|| format!("probe log has no {label} row"))?
            .parse()
            .map_err(|e| format!("{e}"))
    };
    let (initial, after) = (value("initial")?, value("phase2")?);
    let ratio = after / initial;
    let ok = ratio <= MSE_RATIO && secs <= PIPELINE_SECONDS;
    let outcome = Ok((
        ok,
        format!("probe MSE {initial:.3} -> {after:.3} (ratio {ratio:.3}), --phase all took {:.1} min", secs / 60.0),
    ));
    Ok((outcome, Pipeline { manifest, run, eval: root.join("eval") }))
}

fn diagonal_identification(pl: &Pipeline) -> Outcome {
    let cfg = RunConfig::default();
    let (full, _) = commands::eval(&cfg, &pl.run.join(commands::CHECKPOINT), &pl.manifest, None, &pl.eval)
        .map_err(|e| e.to_string())?;
    let r = &full.report;
    let diag: Vec<f64> =
        r.languages.iter().map(|l| r.cell(l, l).and_then(|c| c.top(1)).unwrap_or(f64::NAN)).collect();
    let cells: Vec<String> = r.languages.iter().zip(&diag).map(|(l, a)| format!("{l} {a:.3}")).collect();
    let worst = diag.iter().copied().fold(1.0, f64::min);
    Ok((worst >= DIAGONAL_TOP1, format!("diagonal top-1 {} (identifier held-out {:.3})", cells.join(", "), r.identifier_heldout_accuracy)))
}

fn poly_direction(pl: &Pipeline) -> Outcome {
    let cfg = RunConfig::default();
    let corpus = Corpus::load(&pl.manifest).map_err(|e| e.to_string())?;
    let (id, _) = commands::identifier(&cfg, &corpus, &pl.manifest, &pl.eval).map_err(|e| e.to_string())?;
    let base = load_checkpoint(&pl.run.join("phase2.bin")).map_err(|e| e.to_string())?;
    let mut held = 0;
    let mut lines = Vec::new();
    for i in 0..POLY_SEEDS {
        let mut metrics = Vec::new();
        for gamma in [LossWeights::default().gamma, 0.0] {
            let mut state = base.clone();
            state.seed = 101 + i;
            let mut pc = cfg.phases[2].clone();
            pc.weights.gamma = gamma;
            train_phase(&mut state, &corpus, &pc, continue_all).map_err(|e| e.to_string())?;
            let r = accuracy_matrix(&state.model, &id, &corpus, &cfg.eval).map_err(|e| e.to_string())?;
            metrics.push((r.mean_off_diagonal_top1(), r.mean_off_diagonal_l1()));
        }
        let ((acc_p, l1_p), (acc_0, l1_0)) = (metrics[0], metrics[1]);
        let a = acc_p > acc_0;
        let b = l1_p <= L1_RATIO * l1_0;
        held += usize::from(a && b);
        lines.push(format!(
            "seed {}: off-diag top-1 {acc_p:.3} vs {acc_0:.3} (a {}), L1 {l1_p:.3} vs {l1_0:.3} ratio {:.2} (b {})",
            101 + i,
            word(a),
            l1_p / l1_0,
            word(b)
        ));
    }
    Ok((held >= POLY_SEEDS_REQUIRED, format!("{held}/{POLY_SEEDS} seeds hold\n    {}", lines.join("\n    "))))
}

fn small_corpus() -> Result<Corpus, String> {
    synthetic_corpus(&small_synth()).map_err(|e| e.to_string())
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        speakers_per_lang: 2,
        utterances_per_speaker: 6,
        d_o: 4,
        min_phonemes: 3,
        max_phonemes: 5,
        vocab_size: 7,
        ..SynthConfig::default()
    }
}

fn tiny_model(seed: u64) -> Result<PolyglotModel, String> {
    PolyglotModel::new(ModelConfig::tiny(&["en", "es", "de"]), seed).map_err(|e| e.to_string())
}

fn small_phase(phase: u8, steps: usize) -> PhaseConfig {
    PhaseConfig {
        seq_len: 12,
        steps,
        batch_size: 3,
        poly_steps_per_phoneme: 3,
        ..PhaseConfig::desk(phase).expect("valid phase")
    }
}

fn tree(root: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = e.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn determinism(root: &Path) -> Outcome {
    let synth = small_synth();
    gen_synthetic(&synth, &root.join("a")).map_err(|e| e.to_string())?;
    gen_synthetic(&synth, &root.join("b")).map_err(|e| e.to_string())?;
    let corpus_ok = tree(&root.join("a"))? == tree(&root.join("b"))?;

    let corpus = small_corpus()?;
    let run = |seed: u64| -> Result<TrainState, String> {
        let mut s = TrainState::new(tiny_model(6)?, seed);
        for p in [1, 2] {
            train_phase(&mut s, &corpus, &small_phase(p, 4), continue_all).map_err(|e| e.to_string())?;
        }
        Ok(s)
    };
    let (x, y) = (run(9)?, run(9)?);
    let log_ok = x.log == y.log && !x.log.is_empty();

    let (c1, c2) = (root.join("c1.bin"), root.join("c2.bin"));
    save_checkpoint(&x, &c1).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&c1).map_err(|e| e.to_string())?;
    save_checkpoint(&back, &c2).map_err(|e| e.to_string())?;
    let ckpt_ok = fs::read(&c1).map_err(|e| e.to_string())? == fs::read(&c2).map_err(|e| e.to_string())?;

    let cut = root.join("cut.bin");
    let mut part = TrainState::new(tiny_model(6)?, 9);
    train_phase(&mut part, &corpus, &small_phase(1, 4), continue_all).map_err(|e| e.to_string())?;
    train_phase(&mut part, &corpus, &small_phase(2, 4), |s, _| {
        save_checkpoint(s, &cut)?;
        Ok(if s.step == 2 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    })
    .map_err(|e| e.to_string())?;
    let mut resumed = load_checkpoint(&cut).map_err(|e| e.to_string())?;
    train_phase(&mut resumed, &corpus, &small_phase(2, 4), continue_all).map_err(|e| e.to_string())?;
    let resume_ok = resumed.log == x.log;

    Ok((
        corpus_ok && log_ok && ckpt_ok && resume_ok,
        format!(
            "corpus bytes {}, training log {}, checkpoint save-load-save {}, resume {}",
            word(corpus_ok),
            word(log_ok),
            word(ckpt_ok),
            word(resume_ok)
        ),
    ))
}

fn brute_force_projection(points: &[Vec<f64>]) -> Vec<Point2> {
    let n = points.len();
    let d = points[0].len();
    let x = nalgebra::DMatrix::from_fn(n, d, |i, j| points[i][j]);
    let mean = x.row_mean();
    let xc = nalgebra::DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let eig = nalgebra::SymmetricEigen::new(xc.transpose() * &xc);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut cols: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&k| (0..n).map(|i| (0..d).map(|j| xc[(i, j)] * eig.eigenvectors[(j, k)]).sum()).collect())
        .collect();
    cols.resize(2, vec![0.0; n]);
    for c in &mut cols {
        let pivot = c.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    (0..n).map(|i| Point2 { x: cols[0][i], y: cols[1][i] }).collect()
}

fn oracles() -> Outcome {
    let corpus = synthetic_corpus(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let acc = nearest_centroid_accuracy(&corpus);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let d = 1 + trial % 10;
        let n = 3 + (trial * 7) % 20;
        let scales: Vec<f64> = (0..d).map(|j| 4.0 / (1.0 + j as f64)).collect();
        let pts: Vec<Vec<f64>> =
            (0..n).map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0) - 2.0).collect()).collect();
        let got = project2d(&pts).map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(brute_force_projection(&pts)) {
            worst = worst.max((g.x - w.x).abs()).max((g.y - w.y).abs());
        }
    }
    let ok = acc >= SEPARABILITY && worst <= PROJECTION_TOLERANCE;
    Ok((ok, format!("nearest-centroid accuracy {acc:.4}, project2d max deviation {worst:.1e} over 100 inputs")))
}

fn word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "violated"
    }
}

fn report(n: u8, name: &str, outcome: Outcome) -> bool {
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {n} {}: {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results = Vec::new();
    results.push(report(1, "gradient integrity", gradient_integrity()));
    results.push(report(2, "structural invariants", structural_invariants()));
    results.push(report(3, "loss unit values and weights", loss_units()));
    let pipeline = desk_training(dir.path());
    match pipeline {
        Ok((outcome, pl)) => {
            results.push(report(4, "desk-scale training", outcome));
            results.push(report(5, "same-language identification", diagonal_identification(&pl)));
            results.push(report(6, "speaker-preservation loss direction of effect", poly_direction(&pl)));
        }
        Err(e) => {
            results.push(report(4, "desk-scale training", Err(e.clone())));
            results.push(report(5, "same-language identification", Err(format!("no trained model: {e}"))));
            results.push(report(6, "speaker-preservation loss direction of effect", Err(format!("no trained model: {e}"))));
        }
    }
    results.push(report(7, "determinism and persistence", determinism(&dir.path().join("det"))));
    results.push(report(8, "oracle checks", oracles()));
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
