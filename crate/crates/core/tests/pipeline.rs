use std::ops::ControlFlow;

use polyglot_core::corpus::{gen_synthetic, load_meta, Corpus, SynthConfig};
use polyglot_core::encoders::LanguageId;
use polyglot_core::evalkit::{accuracy_matrix, embed_samples, project2d, EvalOptions, Identifier, IdentifierConfig};
use polyglot_core::model::{ModelConfig, PolyglotModel};
use polyglot_core::training::{
    load_checkpoint, probe_samples, save_checkpoint, teacher_forced_mse, train_phase, PhaseConfig, TrainState,
};
use polyglot_core::PolyglotError;

fn synth() -> SynthConfig {
    SynthConfig {
        speakers_per_lang: 3,
        utterances_per_speaker: 6,
        d_o: 4,
        min_phonemes: 3,
        max_phonemes: 5,
        vocab_size: 6,
        seed: 21,
        ..SynthConfig::default()
    }
}

fn phase(p: u8) -> PhaseConfig {
    PhaseConfig { seq_len: 12, steps: 6, batch_size: 3, poly_steps_per_phoneme: 3, ..PhaseConfig::desk(p).unwrap() }
}

#[test]
fn corpus_to_evaluation_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_synthetic(&synth(), &dir.path().join("corpus")).unwrap();
    let meta = load_meta(&manifest).unwrap();
    assert!(meta.nearest_centroid_accuracy > 0.5);
    let corpus = Corpus::load(&manifest).unwrap();
    assert_eq!(corpus.len(), 3 * 3 * 6);

    let tags: Vec<String> = corpus.languages().iter().map(|l| l.id.to_string()).collect();
    let tags: Vec<&str> = tags.iter().map(String::as_str).collect();
    let mut cfg = ModelConfig::tiny(&tags);
    cfg.core.d_o = corpus.d_o();
    for l in &mut cfg.languages {
        l.vocab = 6;
    }
    let model = PolyglotModel::new(cfg, 2).unwrap();
    let probe = probe_samples(&corpus, 1);
    let before = teacher_forced_mse(&model, &corpus, &probe).unwrap();

    let mut state = TrainState::new(model, 3);
    let ckpt = dir.path().join("ckpt.bin");
    for p in 1..=3 {
        train_phase(&mut state, &corpus, &phase(p), |_, _| Ok(ControlFlow::Continue(()))).unwrap();
        save_checkpoint(&state, &ckpt).unwrap();
        state = load_checkpoint(&ckpt).unwrap();
    }
    assert_eq!(state.completed, 3);
    assert_eq!(state.log.len(), 18);
    let after = teacher_forced_mse(&state.model, &corpus, &probe).unwrap();
    assert!(after.is_finite() && before.is_finite());

    let (en, es) = (LanguageId::new("en"), LanguageId::new("es"));
    let voice = corpus.sample(corpus.heldout_of_language(&en).unwrap()[0]).frames.clone();
    let conv = state.model.convert(&en, &[voice], &es, &[1, 2, 3], 9).unwrap();
    assert!(conv.frames.rows() >= 1 && conv.frames.rows() <= 9);
    assert_eq!(conv.attention.shape(), &[conv.frames.rows(), 3]);
    assert!(matches!(
        state.model.convert(&en, &[], &es, &[1], 4),
        Err(PolyglotError::Contract(_))
    ));

    let id_cfg = IdentifierConfig { hidden: 16, epochs: 5, ..IdentifierConfig::default() };
    let id = Identifier::train_on_corpus(&corpus, &id_cfg).unwrap();
    let opts = EvalOptions { steps_per_phoneme: 3, ..EvalOptions::default() };
    let report = accuracy_matrix(&state.model, &id, &corpus, &opts).unwrap();
    assert_eq!(report.cells.len(), 9);
    for c in &report.cells {
        let (t1, t5) = (c.top(1).unwrap(), c.top(5).unwrap());
        assert!((0.0..=1.0).contains(&t1) && t1 <= t5);
        assert!(c.embedding_l1 >= 0.0);
    }

    let rows = embed_samples(&state.model, &corpus, &(0..corpus.len()).collect::<Vec<_>>()).unwrap();
    let zs: Vec<Vec<f64>> = rows.iter().map(|r| r.z.clone()).collect();
    let points = project2d(&zs).unwrap();
    assert_eq!(points.len(), corpus.len());
    assert!(points.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
}
