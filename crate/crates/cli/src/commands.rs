//! The operator commands. Each writes only under its `--out` directory.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use polyglot_core::checks::{standard_suite, SuiteRow};
use polyglot_core::corpus::{gen_synthetic, read_frames, write_frames, Corpus};
use polyglot_core::encoders::LanguageId;
use polyglot_core::evalkit::{
    accuracy_matrix, cross_language_pair_distance, embed_samples, embedding_dump, project2d, EvalReport, Identifier,
};
use polyglot_core::model::PolyglotModel;
use polyglot_core::training::{
    load_checkpoint, probe_samples, save_checkpoint, teacher_forced_mse, train_phase, LogRow, PhaseEnd, TrainState,
};
use polyglot_core::PolyglotError;

use crate::config::{ConfigError, RunConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CONFIG_ECHO: &str = "run_config.txt";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const PROBE_LOG: &str = "probe_mse.tsv";
pub const IDENTIFIER_CACHE: &str = "identifier.json";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<PolyglotError> for CliError {
    fn from(e: PolyglotError) -> Self {
        let code = match e {
            PolyglotError::Config(_) | PolyglotError::UnknownLanguage { .. } => EXIT_USAGE,
            PolyglotError::Numerics(_) | PolyglotError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> polyglot_core::Result<()> {
    fs::write(path, contents).map_err(|e| PolyglotError::io(path, e))
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| PolyglotError::io(out, e))?;
    Ok(write(&out.join(CONFIG_ECHO), cfg.to_text())?)
}

/// Generates the synthetic corpus and returns the manifest path.
pub fn gen_corpus(cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    cfg.corpus.validate()?;
    prepare_out(out, cfg)?;
    let manifest = gen_synthetic(&cfg.corpus, out)?;
    Ok(manifest)
}

/// Which phases a `train` invocation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseSelection {
    One(u8),
    All,
}

fn language_table(corpus: &Corpus) -> Vec<(String, usize)> {
    corpus.languages().iter().map(|l| (l.id.to_string(), l.vocab)).collect()
}

/// Fails unless `model` was built for exactly the corpus' languages and frame width.
fn check_compatible(model: &PolyglotModel, corpus: &Corpus) -> CliResult<()> {
    let have: Vec<(String, usize)> =
        model.config().languages.iter().map(|l| (l.id.to_string(), l.vocab)).collect();
    let want = language_table(corpus);
    if have != want || model.config().core.d_o != corpus.d_o() {
        return Err(CliError::data(format!(
            "checkpoint was trained on languages {have:?} with d_o={}, corpus has {want:?} with d_o={}",
            model.config().core.d_o,
            corpus.d_o()
        )));
    }
    Ok(())
}

fn write_log(out: &Path, state: &TrainState) -> polyglot_core::Result<()> {
    let mut text = String::from(LogRow::HEADER);
    text.push('\n');
    for row in &state.log {
        text.push_str(&row.to_tsv());
        text.push('\n');
    }
    write(&out.join(TRAIN_LOG), text)
}

fn save(out: &Path, state: &TrainState) -> polyglot_core::Result<()> {
    save_checkpoint(state, &out.join(CHECKPOINT))?;
    write_log(out, state)
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    /// `(label, teacher-forced probe MSE)` before training and after each phase run here.
    pub probe: Vec<(String, f64)>,
    pub seconds: f64,
}

/// Runs the selected phases, checkpointing into `out`.
pub fn train(
    cfg: &RunConfig,
    corpus_path: &Path,
    phases: PhaseSelection,
    resume: Option<&Path>,
    out: &Path,
) -> CliResult<TrainSummary> {
    let start = Instant::now();
    cfg.validate()?;
    let corpus = Corpus::load(corpus_path)?;
    if corpus.is_empty() {
        return Err(CliError::data(format!("{}: corpus is empty", corpus_path.display())));
    }
    let mut state = match resume {
        Some(p) => {
            let s = load_checkpoint(p)?;
            check_compatible(&s.model, &corpus)?;
            s
        }
        None => {
            let mcfg = cfg.model.build(&language_table(&corpus), corpus.d_o());
            TrainState::new(PolyglotModel::new(mcfg, cfg.model.seed)?, cfg.train_seed)
        }
    };
    prepare_out(out, cfg)?;
    let todo: Vec<u8> = match phases {
        PhaseSelection::One(p) => vec![p],
        PhaseSelection::All => {
            let first = if state.phase > state.completed { state.phase } else { state.completed + 1 };
            (first..=3).collect()
        }
    };
    let probe_ids = probe_samples(&corpus, 1);
    let mut probe = Vec::new();
    let mut probe_text = String::new();
    let mut record = |label: String, model: &PolyglotModel| -> CliResult<()> {
        let m = teacher_forced_mse(model, &corpus, &probe_ids)?;
        let _ = writeln!(probe_text, "{label}\t{m}");
        write(&out.join(PROBE_LOG), &probe_text)?;
        probe.push((label, m));
        Ok(())
    };
    if state.completed == 0 && state.step == 0 {
        record("initial".into(), &state.model)?;
    }
    for p in todo {
        let pc = &cfg.phases[usize::from(p) - 1];
        let every = cfg.checkpoint_every;
        let phase_start = Instant::now();
        let end = train_phase(&mut state, &corpus, pc, |s, row| {
            if every > 0 && row.step % every == 0 {
                save(out, s)?;
                log::info!(
                    "phase {p} step {}/{} total {:.4} ({:.1}s)",
                    row.step,
                    pc.steps,
                    row.total,
                    phase_start.elapsed().as_secs_f64()
                );
            }
            Ok(ControlFlow::Continue(()))
        })?;
        save(out, &state)?;
        save_checkpoint(&state, &out.join(format!("phase{p}.bin")))?;
        log::info!("phase {p} finished ({end:?}) after {} steps", state.step);
        debug_assert_ne!(end, PhaseEnd::Interrupted);
        record(format!("phase{p}"), &state.model)?;
    }
    Ok(TrainSummary { checkpoint: out.join(CHECKPOINT), probe, seconds: start.elapsed().as_secs_f64() })
}

/// Parses `1,2,3` or `1 2 3`.
pub fn parse_ids(text: &str) -> CliResult<Vec<usize>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| CliError::usage(format!("invalid phoneme id {t:?}"))))
        .collect()
}

fn load_trained(path: &Path, min_phase: u8) -> CliResult<TrainState> {
    let state = load_checkpoint(path)?;
    if state.completed < min_phase {
        return Err(CliError::data(format!(
            "{}: checkpoint has completed phase {}, at least phase {min_phase} is required",
            path.display(),
            state.completed
        )));
    }
    Ok(state)
}

/// Converts voice samples of `src` into phonemes of `tgt`; writes the frames,
/// the attention matrix and the speaker embedding.
pub fn convert(
    ckpt: &Path,
    src: &str,
    voices: &[PathBuf],
    tgt: &str,
    ids: &[usize],
    max_steps: Option<usize>,
    out: &Path,
) -> CliResult<PathBuf> {
    let state = load_trained(ckpt, 1)?;
    let model = &state.model;
    let (src, tgt) = (LanguageId::new(src), LanguageId::new(tgt));
    model.language(&src)?;
    model.language(&tgt)?;
    if voices.is_empty() {
        return Err(CliError::usage("at least one --voice file is required"));
    }
    let d_o = model.config().core.d_o;
    let mut samples = Vec::with_capacity(voices.len());
    for v in voices {
        let bytes = fs::metadata(v).map_err(|e| PolyglotError::io(v, e))?.len() as usize;
        if bytes == 0 || !bytes.is_multiple_of(4 * d_o) {
            return Err(CliError::data(format!("{}: {bytes} bytes is not a whole number of {d_o}-wide frames", v.display())));
        }
        samples.push(read_frames(v, bytes / (4 * d_o), d_o)?);
    }
    let max_steps = max_steps.unwrap_or(16 * ids.len());
    let conv = model.convert(&src, &samples, &tgt, ids, max_steps)?;
    fs::create_dir_all(out).map_err(|e| PolyglotError::io(out, e))?;
    let frames = out.join("converted.f32");
    write_frames(&frames, &conv.frames)?;
    let mut att = String::new();
    for r in 0..conv.attention.rows() {
        let row: Vec<String> = conv.attention.row(r).iter().map(f64::to_string).collect();
        let _ = writeln!(att, "{}", row.join("\t"));
    }
    write(&out.join("attention.tsv"), att)?;
    let z: Vec<String> = conv.embedding.data().iter().map(f64::to_string).collect();
    write(&out.join("embedding.tsv"), z.join("\t") + "\n")?;
    Ok(frames)
}

fn fingerprint(cfg: &RunConfig, corpus_path: &Path) -> CliResult<String> {
    let mut h = DefaultHasher::new();
    format!("{:?}", cfg.identifier).hash(&mut h);
    fs::read(corpus_path).map_err(|e| PolyglotError::io(corpus_path, e))?.hash(&mut h);
    Ok(format!("{:016x}", h.finish()))
}

/// Trains the identifier, or loads it from `out` when the cache matches the
/// corpus and identifier settings.
pub fn identifier(cfg: &RunConfig, corpus: &Corpus, corpus_path: &Path, out: &Path) -> CliResult<(Identifier, bool)> {
    let key = fingerprint(cfg, corpus_path)?;
    let cache = out.join(IDENTIFIER_CACHE);
    if let Ok(text) = fs::read_to_string(&cache) {
        if let Some((k, body)) = text.split_once('\n') {
            if k == key {
                if let Ok(id) = Identifier::from_json(body) {
                    return Ok((id, true));
                }
            }
        }
        log::warn!("{}: stale or unreadable identifier cache, retraining", cache.display());
    }
    let id = Identifier::train_on_corpus(corpus, &cfg.identifier)?;
    write(&cache, format!("{key}\n{}", id.to_json()))?;
    Ok((id, false))
}

/// Files produced for one evaluated checkpoint.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Mean 2-D distance between same-index speakers across languages; only
    /// defined for corpora with shared speakers.
    pub pair_distance: Option<f64>,
}

fn summary(report: &EvalReport, pair: Option<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "identifier held-out top-1: {:.4}", report.identifier_heldout_accuracy);
    let _ = writeln!(s, "mean diagonal top-1: {:.4}", report.mean_diagonal_top1());
    let _ = writeln!(s, "mean off-diagonal top-1: {:.4}", report.mean_off_diagonal_top1());
    let _ = writeln!(s, "mean off-diagonal embedding L1: {:.4}", report.mean_off_diagonal_l1());
    if let Some(d) = pair {
        let _ = writeln!(s, "mean cross-language speaker distance (2-D): {d:.4}");
    }
    s
}

fn evaluate_one(
    cfg: &RunConfig,
    model: &PolyglotModel,
    id: &Identifier,
    corpus: &Corpus,
    out: &Path,
) -> CliResult<EvalOutcome> {
    fs::create_dir_all(out).map_err(|e| PolyglotError::io(out, e))?;
    let report = accuracy_matrix(model, id, corpus, &cfg.eval)?;
    let all: Vec<usize> = (0..corpus.len()).collect();
    let rows = embed_samples(model, corpus, &all)?;
    write(&out.join("embeddings.tsv"), embedding_dump(&rows))?;
    let zs: Vec<Vec<f64>> = rows.iter().map(|r| r.z.clone()).collect();
    let points = match project2d(&zs) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("projection: {e}");
            e.points
        }
    };
    let mut proj = String::new();
    for (r, p) in rows.iter().zip(&points) {
        let _ = writeln!(proj, "{}\t{}\t{}\t{}\t{}", r.lang, r.speaker, r.sample, p.x, p.y);
    }
    write(&out.join("projection.tsv"), proj)?;
    let pair = if cfg.corpus.shared_speakers { cross_language_pair_distance(&points, &rows, corpus).ok() } else { None };
    write(&out.join("report.txt"), format!("{}\n{}", report.to_table(), summary(&report, pair)))?;
    write(&out.join("report.json"), report.to_json())?;
    Ok(EvalOutcome { report, pair_distance: pair })
}

/// Evaluates `ckpt` and, if given, an ablation checkpoint side by side.
pub fn eval(
    cfg: &RunConfig,
    ckpt: &Path,
    corpus_path: &Path,
    ablation: Option<&Path>,
    out: &Path,
) -> CliResult<(EvalOutcome, Option<EvalOutcome>)> {
    let main = load_trained(ckpt, 2)?;
    let other = ablation.map(|p| load_trained(p, 2)).transpose()?;
    let corpus = Corpus::load(corpus_path)?;
    check_compatible(&main.model, &corpus)?;
    if let Some(o) = &other {
        check_compatible(&o.model, &corpus)?;
    }
    prepare_out(out, cfg)?;
    let (id, cached) = identifier(cfg, &corpus, corpus_path, out)?;
    log::info!("identifier {} (held-out top-1 {:.4})", if cached { "loaded" } else { "trained" }, id.heldout_accuracy);
    let full = evaluate_one(cfg, &main.model, &id, &corpus, out)?;
    let abl = match &other {
        Some(o) => {
            let a = evaluate_one(cfg, &o.model, &id, &corpus, &out.join("ablation"))?;
            let mut cmp = String::from("metric\twith_poly\tablation\n");
            let (f, b) = (&full.report, &a.report);
            let _ = writeln!(cmp, "diagonal_top1\t{}\t{}", f.mean_diagonal_top1(), b.mean_diagonal_top1());
            let _ = writeln!(cmp, "off_diagonal_top1\t{}\t{}", f.mean_off_diagonal_top1(), b.mean_off_diagonal_top1());
            let _ = writeln!(cmp, "off_diagonal_l1\t{}\t{}", f.mean_off_diagonal_l1(), b.mean_off_diagonal_l1());
            if let (Some(x), Some(y)) = (full.pair_distance, a.pair_distance) {
                let _ = writeln!(cmp, "cross_language_pair_distance\t{x}\t{y}");
            }
            write(&out.join("comparison.tsv"), cmp)?;
            Some(a)
        }
        None => None,
    };
    Ok((full, abl))
}

/// Runs the gradient-check suite; the text lists one line per group.
pub fn grad_check(cfg: &RunConfig) -> CliResult<(Vec<SuiteRow>, String)> {
    let tags: Vec<String> = cfg.corpus.language_tags().iter().map(|l| l.to_string()).collect();
    let tags: Vec<&str> = tags.iter().map(String::as_str).collect();
    let start = Instant::now();
    let rows = standard_suite(&tags, &cfg.grad_check)?;
    let mut text = String::new();
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<32} {:<10} {:>6} coords  max rel err {:.3e}  {}",
            r.objective,
            r.check.group,
            r.check.coordinates,
            r.check.max_relative_error,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let _ = writeln!(text, "{} groups checked in {:.1}s", rows.len(), start.elapsed().as_secs_f64());
    Ok((rows, text))
}
