use std::collections::BTreeMap;

use super::*;

fn small() -> SynthConfig {
    SynthConfig { speakers_per_lang: 3, utterances_per_speaker: 10, ..SynthConfig::default() }
}

fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_for_the_same_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_synthetic(&small(), a.path()).unwrap();
    gen_synthetic(&small(), b.path()).unwrap();
    let ta = read_tree(a.path());
    assert_eq!(ta, read_tree(b.path()));
    assert_eq!(ta.len(), 3 * 3 * 10 + 2);
    gen_synthetic(&SynthConfig { seed: 2, ..small() }, c.path()).unwrap();
    assert_ne!(ta, read_tree(c.path()));
}

#[test]
fn round_trip_preserves_counts_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let manifest = gen_synthetic(&cfg, dir.path()).unwrap();
    let index = load_manifest(&manifest).unwrap();
    assert_eq!(index.records.len(), 3 * 3 * 10);
    assert!(index.warnings.is_empty());
    for r in &index.records {
        let len = fs::metadata(index.frame_path(r)).unwrap().len() as usize;
        assert_eq!(len, 4 * r.n_frames * r.d_o);
        assert_eq!(r.n_frames, r.phonemes.len() * cfg.frames_per_phoneme);
        assert!(r.phonemes.iter().all(|&p| p < cfg.vocab_size));
        assert!((cfg.min_phonemes..=cfg.max_phonemes).contains(&r.phonemes.len()));
    }
    let corpus = Corpus::load(&manifest).unwrap();
    let memory = synthetic_corpus(&cfg).unwrap();
    assert_eq!(corpus.samples(), memory.samples());
    assert_eq!(corpus.languages().len(), 3);
    assert_eq!(corpus.languages()[0].vocab, 20);
    let meta = load_meta(&manifest).unwrap();
    assert_eq!(meta.config, cfg);
}

#[test]
fn noiseless_utterances_with_equal_phonemes_match() {
    let cfg = SynthConfig { noise_sd_gen: 0.0, min_phonemes: 1, max_phonemes: 1, vocab_size: 2, ..small() };
    let corpus = synthetic_corpus(&cfg).unwrap();
    let speaker = &corpus.speakers(&LanguageId::new("en")).unwrap()[0];
    let idx: Vec<usize> = corpus.train_indices(speaker).to_vec();
    let (a, b) = idx
        .iter()
        .flat_map(|&i| idx.iter().map(move |&j| (i, j)))
        .find(|&(i, j)| i < j && corpus.sample(i).phonemes == corpus.sample(j).phonemes)
        .expect("two utterances with the same phoneme");
    assert_eq!(corpus.sample(a).frames, corpus.sample(b).frames);
}

#[test]
fn default_corpus_is_separable_and_calibrated() {
    let cfg = SynthConfig::default();
    let corpus = synthetic_corpus(&cfg).unwrap();
    assert_eq!(corpus.len(), 3 * 8 * 30);
    let acc = nearest_centroid_accuracy(&corpus);
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
    let var = feature_variance(&corpus);
    assert!((3.0..5.0).contains(&var), "feature variance {var}");
}

#[test]
fn shared_speakers_reuse_latents_across_languages() {
    let cfg = SynthConfig { shared_speakers: true, noise_sd_gen: 0.0, ..small() };
    let corpus = synthetic_corpus(&cfg).unwrap();
    // With centered accent rows, the frame mean over a balanced phoneme set
    // is the speaker offset, so per-speaker means line up across languages.
    let mean = |lang: &str| {
        let spk = &corpus.speakers(&LanguageId::new(lang)).unwrap()[0];
        let mut m = vec![0.0; cfg.d_o];
        let mut n = 0.0;
        for &i in corpus.train_indices(spk) {
            let f = &corpus.sample(i).frames;
            for r in 0..f.rows() {
                m.iter_mut().zip(f.row(r)).for_each(|(a, b)| *a += b);
                n += 1.0;
            }
        }
        m.into_iter().map(|v| v / n).collect::<Vec<_>>()
    };
    let (en, es) = (mean("en"), mean("es"));
    let dist: f64 = en.iter().zip(&es).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    assert!(dist < 1.5, "shared speaker means differ by {dist}");
}

#[test]
fn split_reserves_the_last_tenth() {
    let corpus = synthetic_corpus(&small()).unwrap();
    let spk = &corpus.speakers(&LanguageId::new("es")).unwrap()[1];
    let train = corpus.train_indices(spk);
    let held = corpus.heldout_indices(spk);
    assert_eq!((train.len(), held.len()), (9, 1));
    assert!(train.iter().all(|t| held.iter().all(|h| t < h)));
    assert_eq!(corpus.heldout_of_language(&LanguageId::new("es")).unwrap().len(), 3);
    assert!(corpus.train_indices("nobody").is_empty());
}

#[test]
fn frame_files_round_trip_and_reject_wrong_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.f32");
    fs::write(&p, [1.0f32.to_le_bytes(), 2.0f32.to_le_bytes()].concat()).unwrap();
    let t = read_frames(&p, 1, 2).unwrap();
    assert_eq!(t.shape(), &[1, 2]);
    assert_eq!(t.data(), &[1.0, 2.0]);

    let frames = Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.3, 1e-3, 7.0, -0.2]).unwrap();
    write_frames(&p, &frames).unwrap();
    let back = read_frames(&p, 2, 3).unwrap();
    for (a, b) in back.data().iter().zip(frames.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let err = read_frames(&p, 3, 3).unwrap_err().to_string();
    assert!(err.contains("36") && err.contains("24"), "{err}");
    fs::write(&p, &fs::read(&p).unwrap()[..10]).unwrap();
    assert!(read_frames(&p, 2, 3).is_err());
}

#[test]
fn manifest_errors_carry_line_numbers_and_unknown_fields_warn() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(MANIFEST_FILE);
    fs::write(&p, "").unwrap();
    assert!(load_manifest(&p).unwrap().records.is_empty());

    let good = r#"{"lang":"en","speaker":"a","phonemes":[1,2],"frames":"a.f32","n_frames":8,"d_o":8}"#;
    let extra = r#"{"lang":"en","speaker":"a","phonemes":[1],"frames":"b.f32","n_frames":4,"d_o":8,"gender":"f"}"#;
    fs::write(&p, format!("{good}\n{extra}\n")).unwrap();
    let index = load_manifest(&p).unwrap();
    assert_eq!(index.records.len(), 2);
    assert_eq!(index.warnings.len(), 1);
    assert!(index.warnings[0].contains("line 2") && index.warnings[0].contains("gender"));

    fs::write(&p, format!("{good}\n{good}\n{{\"lang\": 3}}\n")).unwrap();
    let err = load_manifest(&p).unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    fs::write(&p, format!("{good}\nnot json\n")).unwrap();
    assert!(load_manifest(&p).unwrap_err().to_string().contains("line 2"));
}

#[test]
fn unwritable_output_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // A regular file where the language directory should go blocks frame writes.
    fs::write(dir.path().join("en"), b"").unwrap();
    assert!(gen_synthetic(&small(), dir.path()).is_err());
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(SynthConfig { speakers_per_lang: 0, ..small() }.validate().is_err());
    assert!(SynthConfig { min_phonemes: 4, max_phonemes: 3, ..small() }.validate().is_err());
    assert!(SynthConfig { noise_sd_gen: -1.0, ..small() }.validate().is_err());
    let tags = SynthConfig { languages: 10, ..small() }.language_tags();
    assert_eq!(tags[0].as_str(), "en");
    assert_eq!(tags[9].as_str(), "l9");
}
