use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const TINY: &str = "\
corpus.languages=3
corpus.speakers_per_lang=3
corpus.utterances_per_speaker=6
corpus.d_o=4
corpus.min_phonemes=3
corpus.max_phonemes=5
corpus.vocab_size=6
corpus.seed=11
model.buffer_slots=4
model.d_buf=8
model.d_enc=6
model.components=3
model.hidden=12
model.d_z=6
model.channels=4
model.fc_width=8
train.checkpoint_every=2
train.phase1.steps=4
train.phase1.seq_len=10
train.phase1.batch_size=2
train.phase2.steps=4
train.phase2.seq_len=12
train.phase2.batch_size=2
train.phase3.steps=3
train.phase3.seq_len=12
train.phase3.batch_size=2
train.phase3.poly_steps_per_phoneme=3
eval.identifier_hidden=16
eval.identifier_epochs=4
eval.steps_per_phoneme=3
";

fn polyglot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polyglot"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn polyglot")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.cfg")
    }

    fn corpus(&self) -> PathBuf {
        let out = self.path("corpus");
        if !out.join("manifest.jsonl").exists() {
            let o = polyglot(&["gen-corpus", "--config", s(&self.config()), "--out", s(&out)]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        out.join("manifest.jsonl")
    }

    fn train(&self, phase: &str, resume: Option<&Path>, out: &str) -> Output {
        let corpus = self.corpus();
        let out = self.path(out);
        let cfg = self.config();
        let mut args = vec!["train", "--config", s(&cfg), "--corpus", s(&corpus), "--phase", phase];
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        args.extend(["--out", s(&out)]);
        polyglot(&args)
    }

    fn trained(&self) -> PathBuf {
        let ckpt = self.path("run/checkpoint.bin");
        if !ckpt.exists() {
            let o = self.train("all", None, "run");
            assert!(o.status.success(), "{}", stderr(&o));
        }
        ckpt
    }
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_corpus_is_byte_identical_for_a_seed() {
    let f = Fixture::new();
    for out in ["a", "b"] {
        let o = polyglot(&["gen-corpus", "--config", s(&f.config()), "--out", s(&f.path(out))]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = tree_bytes(&f.path("a"));
    let b = tree_bytes(&f.path("b"));
    assert_eq!(a, b);
    let manifest = fs::read_to_string(f.path("a/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3 * 3 * 6);
    let echo = fs::read_to_string(f.path("a/run_config.txt")).unwrap();
    assert!(echo.contains("corpus.seed=11"));

    let o = polyglot(&["gen-corpus", "--config", s(&f.config()), "--seed", "12", "--out", s(&f.path("c"))]);
    assert!(o.status.success());
    assert_ne!(fs::read(f.path("c/manifest.jsonl")).unwrap(), manifest.as_bytes());
}

#[test]
fn gen_corpus_into_unwritable_location_fails_without_manifest() {
    let f = Fixture::new();
    let blocker = f.path("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("corpus");
    let o = polyglot(&["gen-corpus", "--config", s(&f.config()), "--out", s(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"));
    assert!(!out.join("manifest.jsonl").exists());
}

#[test]
fn unknown_config_key_is_a_usage_error_naming_the_key() {
    let f = Fixture::new();
    let cfg = f.path("bad.cfg");
    fs::write(&cfg, "corpus.seed=3\ntrain.phase2.stepz=5\n").unwrap();
    let o = polyglot(&["gen-corpus", "--config", s(&cfg), "--out", s(&f.path("x"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.phase2.stepz"), "{}", stderr(&o));

    let o = polyglot(&["gen-corpus", "--set", "corpus.colour=red", "--out", s(&f.path("y"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("corpus.colour"));
}

#[test]
fn command_line_overrides_beat_the_config_file() {
    let f = Fixture::new();
    let out = f.path("c");
    let o = polyglot(&[
        "gen-corpus",
        "--config",
        s(&f.config()),
        "--set",
        "corpus.utterances_per_speaker=4",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3 * 3 * 4);
    assert!(fs::read_to_string(out.join("run_config.txt")).unwrap().contains("corpus.utterances_per_speaker=4"));
}

#[test]
fn phase_out_of_order_names_the_predecessor() {
    let f = Fixture::new();
    let o = f.train("3", None, "p3");
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("phase 2"), "{}", stderr(&o));

    let o = f.train("2", None, "p2");
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("phase 1"), "{}", stderr(&o));

    let o = f.train("4", None, "p4");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn resume_reproduces_the_uninterrupted_log() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let full_log = fs::read_to_string(f.path("run/train_log.tsv")).unwrap();
    assert_eq!(full_log.lines().count(), 1 + 4 + 4 + 3);
    for p in 1..=3 {
        assert!(f.path(&format!("run/phase{p}.bin")).exists());
    }
    assert!(ckpt.exists());

    let o = f.train("1", None, "part");
    assert!(o.status.success(), "{}", stderr(&o));
    let o = f.train("all", Some(&f.path("part/checkpoint.bin")), "rest");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(f.path("rest/train_log.tsv")).unwrap(), full_log);
    assert_eq!(fs::read(f.path("rest/checkpoint.bin")).unwrap(), fs::read(ckpt).unwrap());
}

#[test]
fn convert_outputs_and_errors() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let corpus_dir = f.path("corpus");
    let voices: Vec<PathBuf> = (0..6).map(|u| corpus_dir.join(format!("en/en_s00/u{u:03}.f32"))).collect();
    assert!(voices[0].exists(), "{}", voices[0].display());

    let out = f.path("conv");
    let o = polyglot(&[
        "convert", "--ckpt", s(&ckpt), "--src-lang", "en", "--voice", s(&voices[0]), "--tgt-lang", "es",
        "--phonemes", "1,2,3", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let frames = fs::metadata(out.join("converted.f32")).unwrap().len();
    assert!(frames > 0 && frames.is_multiple_of(16));
    let att = fs::read_to_string(out.join("attention.tsv")).unwrap();
    assert_eq!(att.lines().count() as u64, frames / 16);
    for line in att.lines() {
        let row: Vec<f64> = line.split('\t').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row.len(), 3);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let twenty: Vec<&str> = (0..20).map(|i| s(&voices[i % voices.len()])).collect();
    let mut args = vec!["convert", "--ckpt", s(&ckpt), "--src-lang", "en", "--voice"];
    args.extend(&twenty);
    let out20 = f.path("conv20");
    args.extend(["--tgt-lang", "en", "--phonemes", "0 4", "--max-steps", "12", "--out", s(&out20)]);
    let o = polyglot(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::metadata(out20.join("converted.f32")).unwrap().len() <= 12 * 16);
    let z = fs::read_to_string(out20.join("embedding.tsv")).unwrap();
    assert_eq!(z.trim().split('\t').count(), 6);

    let o = polyglot(&[
        "convert", "--ckpt", s(&ckpt), "--src-lang", "fr", "--voice", s(&voices[0]), "--tgt-lang", "es",
        "--phonemes", "1", "--out", s(&f.path("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("fr") && err.contains("en") && err.contains("es") && err.contains("de"), "{err}");

    let missing = corpus_dir.join("en/en_s00/nope.f32");
    let o = polyglot(&[
        "convert", "--ckpt", s(&ckpt), "--src-lang", "en", "--voice", s(&missing), "--tgt-lang", "es",
        "--phonemes", "1", "--out", s(&f.path("y")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.f32"));
}

#[test]
fn eval_writes_nine_cells_and_reuses_the_identifier() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let corpus = f.corpus();
    let out = f.path("eval");
    let run = || {
        polyglot(&["eval", "--config", s(&f.config()), "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--out", s(&out)])
    };
    let o = run();
    assert!(o.status.success(), "{}", stderr(&o));
    let json: String = fs::read_to_string(out.join("report.json")).unwrap();
    assert_eq!(json.matches("\"src\"").count(), 9);
    let first = fs::read(out.join("report.txt")).unwrap();
    let cache = fs::read(out.join("identifier.json")).unwrap();
    let projection = fs::read_to_string(out.join("projection.tsv")).unwrap();
    assert_eq!(projection.lines().count(), 3 * 3 * 6);
    let dump = fs::read_to_string(out.join("embeddings.tsv")).unwrap();
    assert_eq!(dump.lines().count(), 3 * 3 * 6);

    let o = run();
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("report.txt")).unwrap(), first);
    assert_eq!(fs::read(out.join("identifier.json")).unwrap(), cache);

    let o = polyglot(&[
        "eval", "--config", s(&f.config()), "--ckpt", s(&ckpt), "--corpus", s(&corpus), "--ablation",
        s(&f.path("run/phase2.bin")), "--out", s(&f.path("abl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cmp = fs::read_to_string(f.path("abl/comparison.tsv")).unwrap();
    assert!(cmp.starts_with("metric\twith_poly\tablation\n"));
    assert!(f.path("abl/ablation/report.json").exists());
}

#[test]
fn eval_rejects_corrupt_and_untrained_checkpoints() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let corpus = f.corpus();
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    let bad = f.path("bad.bin");
    fs::write(&bad, bytes).unwrap();
    let o = polyglot(&["eval", "--ckpt", s(&bad), "--corpus", s(&corpus), "--out", s(&f.path("e1"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = polyglot(&[
        "eval", "--config", s(&f.config()), "--ckpt", s(&f.path("run/phase1.bin")), "--corpus", s(&corpus),
        "--out", s(&f.path("e2")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("phase"));
}

#[test]
fn grad_check_passes_within_a_minute() {
    let start = Instant::now();
    let o = polyglot(&["grad-check"]);
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}\n{}", stderr(&o));
    assert!(text.contains("PASS") && !text.contains("FAIL"));
    assert!(secs < 60.0, "{secs:.1}s");
}

#[test]
fn missing_subcommand_arguments_are_usage_errors() {
    assert_eq!(polyglot(&["train"]).status.code(), Some(1));
    assert_eq!(polyglot(&["frobnicate"]).status.code(), Some(1));
}
