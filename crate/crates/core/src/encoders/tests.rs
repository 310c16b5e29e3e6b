use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::checks::{check_params, DEFAULT_EPS};
use crate::model::{ModelConfig, PolyglotModel};

fn tiny_model() -> PolyglotModel {
    PolyglotModel::new(ModelConfig::tiny(&["en", "es", "de"]), 17).unwrap()
}

fn en() -> LanguageId {
    LanguageId::new("en")
}

#[test]
fn repeated_ids_give_identical_rows() {
    let model = tiny_model();
    let table = &model.language(&en()).unwrap().phonemes;
    let mut s = Session::frozen(model.store());
    let e = table.encode(&mut s, &[0, 0]).unwrap();
    let v = s.value(e);
    assert_eq!(v.shape(), &[2, 6]);
    assert_eq!(v.row(0), v.row(1));
    let e = table.encode(&mut s, &[3, 1]).unwrap();
    let lut = model.store().get(table.param_id());
    assert_eq!(s.value(e).row(0), lut.row(3));
    assert_eq!(s.value(e).row(1), lut.row(1));
    let empty = table.encode(&mut s, &[]).unwrap();
    assert_eq!(s.value(empty).shape(), &[0, 6]);
}

#[test]
fn out_of_vocabulary_names_the_id() {
    let model = tiny_model();
    let table = &model.language(&en()).unwrap().phonemes;
    let mut s = Session::frozen(model.store());
    let err = table.encode(&mut s, &[1, 7]).unwrap_err();
    assert!(matches!(err, PolyglotError::OutOfVocabulary { id: 7, vocab: 7 }));
    assert!(err.to_string().contains('7'));
}

#[test]
fn only_used_rows_receive_gradient() {
    let model = tiny_model();
    let table = &model.language(&en()).unwrap().phonemes;
    let ids = [4, 1, 4];
    let objective = |s: &mut Session<'_>| -> Result<Var> {
        let e = table.encode(s, &ids)?;
        let w = s.constant(Tensor::randn(vec![3, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let m = s.graph.mul(e, w)?;
        let sq = s.graph.square(m);
        Ok(s.graph.sum(sq))
    };
    let mut s = Session::new(model.store());
    let loss = objective(&mut s).unwrap();
    let grads = s.gradients(loss).unwrap();
    let g = grads.get(table.param_id()).unwrap();
    for row in 0..7 {
        let nonzero = g.row(row).iter().any(|&v| v != 0.0);
        assert_eq!(nonzero, ids.contains(&row), "row {row}");
    }
    let report = check_params(model.store(), &[table.param_id()], DEFAULT_EPS, objective).unwrap();
    assert!(report.max_relative_error <= 1e-6, "{report:?}");
}

#[test]
fn embedding_is_deterministic_and_checks_input() {
    let model = tiny_model();
    let frames = Tensor::randn(vec![9, 4], 2.0, &mut ChaCha8Rng::seed_from_u64(1));
    let z = model.embed(&en(), &frames).unwrap();
    assert_eq!(z.shape(), &[5]);
    assert!(z.is_finite());
    assert_eq!(z, model.embed(&en(), &frames).unwrap());
    assert!(matches!(model.embed(&en(), &Tensor::zeros(vec![0, 4])), Err(PolyglotError::Contract(_))));
    assert!(matches!(model.embed(&en(), &Tensor::zeros(vec![3, 5])), Err(PolyglotError::Contract(_))));
}

#[test]
fn time_constant_inputs_converge_as_length_grows() {
    // Zero padding makes the first and last frame rows differ from the
    // interior, so T and 2T agree only up to a border term of order 1/T.
    let model = tiny_model();
    let frame = [0.7, -1.3, 2.1, 0.4];
    let constant = |t: usize| Tensor::new(vec![t, 4], frame.iter().cycle().take(4 * t).copied().collect()).unwrap();
    let gap = |t: usize| {
        let a = model.embed(&en(), &constant(t)).unwrap();
        let b = model.embed(&en(), &constant(2 * t)).unwrap();
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let (g4, g16, g64) = (gap(4), gap(16), gap(64));
    assert!(g16 < g4 && g64 < g16, "gaps {g4} {g16} {g64}");
    assert!(g64 * 8.0 <= g4 * 1.5, "border effect should shrink like 1/T: {g4} {g64}");
    // Interior rows are exactly invariant: the two-step difference cancels.
    let d1 = gap(32);
    let d2 = gap(64);
    assert!((d1 / d2 - 2.0).abs() < 0.05, "{d1} {d2}");
}

#[test]
fn average_embedding_examples() {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let samples: Vec<Tensor> = (0..20).map(|i| Tensor::randn(vec![5 + i % 4, 4], 1.5, &mut rng)).collect();
    let one = model.average_embedding(&en(), &samples[..1]).unwrap();
    assert_eq!(one, model.embed(&en(), &samples[0]).unwrap());

    let mut sum = vec![0.0; 5];
    for x in &samples {
        for (a, b) in sum.iter_mut().zip(model.embed(&en(), x).unwrap().data()) {
            *a += b;
        }
    }
    let mean = model.average_embedding(&en(), &samples).unwrap();
    for (m, s) in mean.data().iter().zip(&sum) {
        assert!((m - s / 20.0).abs() <= 1e-12);
    }
    assert!(matches!(model.average_embedding(&en(), &[]), Err(PolyglotError::Contract(_))));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let model = tiny_model();
    let branch = model.language(&en()).unwrap();
    let ids = model.store().group(branch.encoder.prefix());
    assert!(!ids.is_empty());
    let frames = Tensor::randn(vec![6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let target = Tensor::randn(vec![5], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let report = check_params(model.store(), &ids, DEFAULT_EPS, |s| {
        let x = s.constant(frames.clone());
        let z = branch.encoder.embed(s, x)?;
        let t = s.constant(target.clone());
        let d = s.graph.sub(z, t)?;
        Ok(s.graph.sum_squares(d))
    })
    .unwrap();
    assert!(report.max_relative_error <= 1e-4, "{report:?}");
}

#[test]
fn updating_one_language_leaves_others_bit_identical() {
    let mut model = tiny_model();
    let before = model.store().clone();
    let ids = model.store().group("ns.en");
    let lut = model.language(&en()).unwrap().phonemes.param_id();
    for id in ids.iter().chain([&lut]) {
        model.store_mut().get_mut(*id).data_mut().iter_mut().for_each(|v| *v += 0.25);
    }
    for (id, name, value) in model.store().iter() {
        let touched = name.starts_with("ns.en.") || name == "lutp.en";
        assert_eq!(value != before.get(id), touched, "{name}");
    }
}

#[test]
fn all_languages_share_one_core() {
    let model = tiny_model();
    let a = model.core_for(&en()).unwrap() as *const _;
    let b = model.core_for(&LanguageId::new("es")).unwrap() as *const _;
    let c = model.core_for(&LanguageId::new("de")).unwrap() as *const _;
    assert!(std::ptr::eq(a, b) && std::ptr::eq(b, c));
    let core_params = model.store().iter().filter(|(_, n, _)| n.starts_with("core.")).count();
    assert_eq!(core_params, model.core().param_ids().len());
    assert!(matches!(model.core_for(&LanguageId::new("fr")), Err(PolyglotError::UnknownLanguage { .. })));
}

#[test]
fn conversion_is_deterministic_and_well_formed() {
    let model = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let voice: Vec<Tensor> = (0..3).map(|_| Tensor::randn(vec![8, 4], 1.0, &mut rng)).collect();
    let es = LanguageId::new("es");
    let a = model.convert(&en(), &voice, &es, &[1, 2, 3], 12).unwrap();
    assert!(a.frames.rows() >= 1 && a.frames.rows() <= 12);
    assert_eq!(a.attention.shape(), &[a.frames.rows(), 3]);
    for r in 0..a.attention.rows() {
        assert!((a.attention.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }
    let b = model.convert(&en(), &voice, &es, &[1, 2, 3], 12).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.embedding, model.average_embedding(&en(), &voice).unwrap());
    // Same-language resynthesis is the degenerate case.
    assert!(model.convert(&en(), &voice, &en(), &[0, 1], 4).is_ok());
    let err = model.convert(&en(), &voice, &LanguageId::new("xx"), &[0], 4).unwrap_err();
    assert!(err.to_string().contains("en") && err.to_string().contains("xx"));
    assert!(matches!(model.convert(&en(), &voice, &es, &[], 4), Err(PolyglotError::Contract(_))));
    assert!(matches!(model.convert(&en(), &[], &es, &[1], 4), Err(PolyglotError::Contract(_))));
}
