//! Automatic evaluation: speaker identification of converted speech, embedding
//! distances and a deterministic 2-D projection of embeddings.

mod project;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use project::{project2d, Point2, ProjectionError};

use crate::corpus::Corpus;
use crate::encoders::LanguageId;
use crate::error::{PolyglotError, Result};
use crate::model::PolyglotModel;
use crate::numerics::Tensor;
use crate::params::{Mlp, ParamGrads, ParamStore, Session};
use crate::training::AdamState;

/// Where a feature vector came from. Identifiers only train on ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    GroundTruth,
    Synthesized,
}

/// Per-dimension mean of `T × d_o` frames.
pub fn mean_pool(frames: &Tensor) -> Result<Vec<f64>> {
    if frames.rank() != 2 || frames.rows() == 0 {
        return Err(PolyglotError::Contract(format!("cannot pool frames of shape {:?}", frames.shape())));
    }
    let mut m = vec![0.0; frames.cols()];
    for r in 0..frames.rows() {
        m.iter_mut().zip(frames.row(r)).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|v| *v /= frames.rows() as f64);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_sd: f64,
    pub seed: u64,
}

impl Default for IdentifierConfig {
    fn default() -> Self {
        IdentifierConfig { hidden: 256, epochs: 60, batch_size: 32, lr: 1e-3, init_sd: 0.1, seed: 1 }
    }
}

/// A labeled feature vector.
#[derive(Clone, Debug)]
pub struct Example {
    pub frames: Tensor,
    pub speaker: usize,
    pub provenance: Provenance,
}

/// Speaker classifier over mean-pooled, standardized frames:
/// two ReLU layers and a softmax head.
#[derive(Clone, Debug)]
pub struct Identifier {
    speakers: Vec<String>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    store: ParamStore,
    mlp: Mlp,
    /// Held-out ground-truth top-1 accuracy measured after training.
    pub heldout_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct IdentifierFile {
    speakers: Vec<String>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    sizes: Vec<usize>,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
    heldout_accuracy: f64,
}

/// One entry of a ranking.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub speaker: usize,
    pub score: f64,
}

impl Identifier {
    fn build(speakers: Vec<String>, d_in: usize, cfg: &IdentifierConfig) -> (ParamStore, Mlp) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mlp = Mlp::new(&mut store, "id", &[d_in, cfg.hidden, cfg.hidden, speakers.len()], cfg.init_sd, &mut rng);
        (store, mlp)
    }

    /// Trains on `examples`, which must all be ground truth, labeled by index into `speakers`.
    pub fn train(speakers: Vec<String>, examples: &[Example], cfg: &IdentifierConfig) -> Result<Self> {
        if speakers.len() < 2 {
            return Err(PolyglotError::Config("speaker identification needs at least two speakers".into()));
        }
        if examples.iter().any(|e| e.provenance != Provenance::GroundTruth) {
            return Err(PolyglotError::Contract("identifier training data must be ground truth".into()));
        }
        let first = examples.first().ok_or_else(|| PolyglotError::Config("no identifier training data".into()))?;
        let d = first.frames.cols();
        let pooled: Vec<Vec<f64>> = examples.iter().map(|e| mean_pool(&e.frames)).collect::<Result<_>>()?;
        if pooled.iter().any(|p| p.len() != d) || examples.iter().any(|e| e.speaker >= speakers.len()) {
            return Err(PolyglotError::Contract("inconsistent identifier examples".into()));
        }
        let n = pooled.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| pooled.iter().map(|p| p[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = pooled.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 }
            })
            .collect();
        let (mut store, mlp) = Self::build(speakers.clone(), d, cfg);
        let mut id = Identifier { speakers, mean, scale, store: store.clone(), mlp, heldout_accuracy: 0.0 };
        let inputs: Vec<Tensor> = pooled.iter().map(|p| Tensor::vector(id.standardize(p))).collect();
        let mut adam = AdamState::new(&store);
        let trainable: Vec<_> = store.ids().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut grads = ParamGrads::zeros_like(&store);
                for &i in chunk {
                    let mut s = Session::new(&store);
                    let x = s.constant(inputs[i].clone());
                    let logits = id.mlp.forward(&mut s, x)?;
                    let logp = s.graph.log_softmax(logits);
                    let mut onehot = Tensor::zeros(vec![id.speakers.len()]);
                    onehot.data_mut()[examples[i].speaker] = -1.0 / chunk.len() as f64;
                    let pick = s.constant(onehot);
                    let nll = s.graph.mul(logp, pick)?;
                    let loss = s.graph.sum(nll);
                    grads.accumulate(&s.gradients(loss)?);
                }
                adam.step(&mut store, &grads, &trainable, cfg.lr);
            }
        }
        id.store = store;
        Ok(id)
    }

    /// Trains on the training split of `corpus` and records held-out top-1 accuracy.
    pub fn train_on_corpus(corpus: &Corpus, cfg: &IdentifierConfig) -> Result<Self> {
        let speakers = sorted_speakers(corpus);
        let label: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &speakers {
            for (set, idx) in [(&mut train, corpus.train_indices(s)), (&mut test, corpus.heldout_indices(s))] {
                for &i in idx {
                    set.push(Example {
                        frames: corpus.sample(i).frames.clone(),
                        speaker: label[s.as_str()],
                        provenance: Provenance::GroundTruth,
                    });
                }
            }
        }
        let mut id = Identifier::train(speakers, &train, cfg)?;
        let hits = test
            .iter()
            .map(|e| id.identify(&e.frames).map(|r| r[0].speaker == e.speaker))
            .collect::<Result<Vec<_>>>()?;
        id.heldout_accuracy = hits.iter().filter(|&&h| h).count() as f64 / hits.len().max(1) as f64;
        Ok(id)
    }

    fn standardize(&self, pooled: &[f64]) -> Vec<f64> {
        pooled.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) * s).collect()
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    pub fn speaker_index(&self, name: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == name)
    }

    /// Softmax scores for every speaker, in descending order; ties go to the
    /// lower speaker index.
    pub fn identify(&self, frames: &Tensor) -> Result<Vec<Ranked>> {
        let pooled = mean_pool(frames)?;
        if pooled.len() != self.mean.len() {
            return Err(PolyglotError::Contract(format!(
                "frames have {} features, identifier expects {}",
                pooled.len(),
                self.mean.len()
            )));
        }
        let mut s = Session::frozen(&self.store);
        let x = s.constant(Tensor::vector(self.standardize(&pooled)));
        let logits = self.mlp.forward(&mut s, x)?;
        let probs = s.graph.softmax(logits);
        let mut ranked: Vec<Ranked> =
            s.value(probs).data().iter().enumerate().map(|(speaker, &score)| Ranked { speaker, score }).collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.speaker.cmp(&b.speaker)));
        Ok(ranked)
    }

    pub fn to_json(&self) -> String {
        let sizes = self.mlp.layers.iter().map(|l| self.store.get(l.w).shape()[0]).chain([self.speakers.len()]).collect();
        let file = IdentifierFile {
            speakers: self.speakers.clone(),
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            sizes,
            params: self.store.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec(), t.data().to_vec())).collect(),
            heldout_accuracy: self.heldout_accuracy,
        };
        serde_json::to_string(&file).expect("serializable identifier")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let f: IdentifierFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if f.sizes.len() < 2 || f.sizes[0] != f.mean.len() || f.mean.len() != f.scale.len() {
            return Err("inconsistent identifier layout".into());
        }
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut it = f.params.into_iter();
        for i in 0..f.sizes.len() - 1 {
            let mut next = |suffix: &str, shape: Vec<usize>| -> std::result::Result<_, String> {
                let (name, s, data) = it.next().ok_or("missing identifier parameter")?;
                if name != format!("id.fc{i}.{suffix}") || s != shape {
                    return Err(format!("unexpected identifier parameter {name}"));
                }
                Ok(store.add(name, Tensor::new(s, data).map_err(|e| e.to_string())?))
            };
            let w = next("w", vec![f.sizes[i], f.sizes[i + 1]])?;
            let b = next("b", vec![f.sizes[i + 1]])?;
            layers.push(crate::params::Dense { w, b });
        }
        if f.sizes[f.sizes.len() - 1] != f.speakers.len() {
            return Err("identifier head does not match speaker list".into());
        }
        Ok(Identifier {
            speakers: f.speakers,
            mean: f.mean,
            scale: f.scale,
            store,
            mlp: Mlp { layers },
            heldout_accuracy: f.heldout_accuracy,
        })
    }
}

/// All speaker ids of the corpus in ascending order.
pub fn sorted_speakers(corpus: &Corpus) -> Vec<String> {
    let mut s: Vec<String> = corpus.all_speakers().into_iter().map(|(_, s)| s).collect();
    s.sort();
    s
}

/// How the conversion embedding is formed for each evaluated sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoiceSource {
    /// The held-out sample being converted.
    HeldOut,
    /// Mean over the speaker's first `n` training utterances.
    TrainingMean(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k_list: Vec<usize>,
    pub voice: VoiceSource,
    /// Free-running cap per target phoneme.
    pub steps_per_phoneme: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { k_list: vec![1, 5], voice: VoiceSource::HeldOut, steps_per_phoneme: 16 }
    }
}

/// One (source, target) language cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub src: LanguageId,
    pub tgt: LanguageId,
    pub samples: usize,
    /// `(k, accuracy)` for every requested `k`.
    pub topk: Vec<(usize, f64)>,
    /// Mean `‖z_src − N_s^src(converted)‖₁`.
    pub embedding_l1: f64,
}

impl EvalCell {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.iter().find(|(kk, _)| *kk == k).map(|(_, a)| *a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub languages: Vec<LanguageId>,
    /// Row-major by source, then target.
    pub cells: Vec<EvalCell>,
    pub identifier_heldout_accuracy: f64,
}

impl EvalReport {
    pub fn cell(&self, src: &LanguageId, tgt: &LanguageId) -> Option<&EvalCell> {
        self.cells.iter().find(|c| &c.src == src && &c.tgt == tgt)
    }

    fn mean_over(&self, diagonal: bool, f: impl Fn(&EvalCell) -> f64) -> f64 {
        let v: Vec<f64> = self.cells.iter().filter(|c| (c.src == c.tgt) == diagonal).map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn mean_diagonal_top1(&self) -> f64 {
        self.mean_over(true, |c| c.top(1).unwrap_or(0.0))
    }

    pub fn mean_off_diagonal_top1(&self) -> f64 {
        self.mean_over(false, |c| c.top(1).unwrap_or(0.0))
    }

    pub fn mean_off_diagonal_l1(&self) -> f64 {
        self.mean_over(false, |c| c.embedding_l1)
    }

    /// Rows are source languages, columns target languages, cells `top1 (top5)` in percent.
    pub fn to_table(&self) -> String {
        let width = 16;
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "src\\tgt");
        for l in &self.languages {
            let _ = write!(out, "{:>width$}", l.as_str());
        }
        out.push('\n');
        for a in &self.languages {
            let _ = write!(out, "{:<8}", a.as_str());
            for b in &self.languages {
                let cell = self.cell(a, b).map_or("-".to_string(), |c| {
                    let pct = |k| c.top(k).map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
                    format!("{} ({})", pct(1), pct(5))
                });
                let _ = write!(out, "{cell:>width$}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable report")
    }
}

/// Converts a held-out sample of `src` into `tgt` and returns the converted
/// frames and the embedding used for conversion.
fn convert_sample(
    model: &PolyglotModel,
    corpus: &Corpus,
    sample: usize,
    tgt: &LanguageId,
    tgt_ids: &[usize],
    opts: &EvalOptions,
) -> Result<(Tensor, Tensor)> {
    let s = corpus.sample(sample);
    let voice: Vec<Tensor> = match opts.voice {
        VoiceSource::HeldOut => vec![s.frames.clone()],
        VoiceSource::TrainingMean(n) => {
            corpus.train_indices(&s.speaker).iter().take(n.max(1)).map(|&i| corpus.sample(i).frames.clone()).collect()
        }
    };
    let max_steps = opts.steps_per_phoneme * tgt_ids.len();
    let conv = model.convert(&s.lang, &voice, tgt, tgt_ids, max_steps)?;
    Ok((conv.frames, conv.embedding))
}

/// Identification accuracy of converted held-out speech for every ordered
/// language pair, plus the embedding L1 drift of each conversion.
pub fn accuracy_matrix(model: &PolyglotModel, id: &Identifier, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    let langs: Vec<LanguageId> = corpus.languages().iter().map(|l| l.id.clone()).collect();
    let mut cells = Vec::with_capacity(langs.len() * langs.len());
    for a in &langs {
        let samples = corpus.heldout_of_language(a)?;
        for b in &langs {
            let pool = corpus.heldout_of_language(b)?;
            let mut hits = vec![0usize; opts.k_list.len()];
            let mut l1 = 0.0;
            for (n, &i) in samples.iter().enumerate() {
                let src = corpus.sample(i);
                let ids = if a == b { src.phonemes.clone() } else { corpus.sample(pool[n % pool.len()]).phonemes.clone() };
                let (frames, z) = convert_sample(model, corpus, i, b, &ids, opts)?;
                let z_back = model.embed(a, &frames)?;
                l1 += z.data().iter().zip(z_back.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
                let truth = id.speaker_index(&src.speaker).ok_or_else(|| {
                    PolyglotError::Contract(format!("speaker {} unknown to the identifier", src.speaker))
                })?;
                let ranked = id.identify(&frames)?;
                let rank = ranked.iter().position(|r| r.speaker == truth).expect("every speaker is ranked");
                for (h, &k) in hits.iter_mut().zip(&opts.k_list) {
                    *h += usize::from(rank < k);
                }
            }
            let n = samples.len().max(1) as f64;
            cells.push(EvalCell {
                src: a.clone(),
                tgt: b.clone(),
                samples: samples.len(),
                topk: opts.k_list.iter().zip(&hits).map(|(&k, &h)| (k, h as f64 / n)).collect(),
                embedding_l1: l1 / n,
            });
        }
    }
    Ok(EvalReport { languages: langs, cells, identifier_heldout_accuracy: id.heldout_accuracy })
}

/// L2 distance, L1 distance and cosine similarity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub l2: f64,
    pub l1: f64,
    pub cosine: f64,
}

pub fn embedding_similarity(z1: &[f64], z2: &[f64]) -> Result<Similarity> {
    if z1.len() != z2.len() {
        return Err(PolyglotError::Contract(format!("embedding widths differ: {} vs {}", z1.len(), z2.len())));
    }
    let l2 = z1.iter().zip(z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let l1 = z1.iter().zip(z2).map(|(a, b)| (a - b).abs()).sum();
    let (n1, n2) = (z1.iter().map(|v| v * v).sum::<f64>().sqrt(), z2.iter().map(|v| v * v).sum::<f64>().sqrt());
    if n1 == 0.0 || n2 == 0.0 {
        return Err(PolyglotError::Contract("cosine similarity is undefined for a zero vector".into()));
    }
    let cosine = z1.iter().zip(z2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2);
    Ok(Similarity { l2, l1, cosine })
}

/// One embedding per corpus sample, from the sample's own language encoder.
#[derive(Clone, Debug)]
pub struct EmbeddingRow {
    pub lang: LanguageId,
    pub speaker: String,
    pub sample: usize,
    pub z: Vec<f64>,
}

pub fn embed_samples(model: &PolyglotModel, corpus: &Corpus, samples: &[usize]) -> Result<Vec<EmbeddingRow>> {
    samples
        .iter()
        .map(|&i| {
            let s = corpus.sample(i);
            let z = model.embed(&s.lang, &s.frames)?;
            Ok(EmbeddingRow { lang: s.lang.clone(), speaker: s.speaker.clone(), sample: i, z: z.into_data() })
        })
        .collect()
}

/// Tab-separated dump: lang, speaker, sample id, then the embedding values.
pub fn embedding_dump(rows: &[EmbeddingRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.lang, r.speaker, r.sample);
        for v in &r.z {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    out
}

/// Mean 2-D distance between the projections of the same speaker's samples
/// in two different languages, for corpora with shared speakers.
///
/// Speakers are matched by their index within each language.
pub fn cross_language_pair_distance(points: &[Point2], rows: &[EmbeddingRow], corpus: &Corpus) -> Result<f64> {
    let mut centroid: BTreeMap<(LanguageId, usize), (f64, f64, usize)> = BTreeMap::new();
    for (p, r) in points.iter().zip(rows) {
        let idx = corpus.speakers(&r.lang)?.iter().position(|s| s == &r.speaker).expect("speaker of its language");
        let e = centroid.entry((r.lang.clone(), idx)).or_insert((0.0, 0.0, 0));
        e.0 += p.x;
        e.1 += p.y;
        e.2 += 1;
    }
    let cents: Vec<((LanguageId, usize), (f64, f64))> =
        centroid.into_iter().map(|(k, (x, y, n))| (k, (x / n as f64, y / n as f64))).collect();
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, ((la, sa), (xa, ya))) in cents.iter().enumerate() {
        for ((lb, sb), (xb, yb)) in &cents[i + 1..] {
            if la != lb && sa == sb {
                sum += ((xa - xb).powi(2) + (ya - yb).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(PolyglotError::Contract("no cross-language speaker pairs to compare".into()));
    }
    Ok(sum / count as f64)
}
