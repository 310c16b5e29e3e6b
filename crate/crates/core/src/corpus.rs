//! Multilingual multi-speaker feature corpora: manifest and frame file
//! formats, in-memory loading, and a deterministic synthetic generator.
//!
//! Layout of a corpus directory:
//!
//! ```text
//! manifest.jsonl           one JSON object per sample
//! corpus_meta.json         generator config, vocabularies and statistics
//! <lang>/<speaker>/uNNN.f32  raw little-endian f32 frames, row-major T × d_o
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::LanguageId;
use crate::error::{PolyglotError, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "corpus_meta.json";

const DEFAULT_TAGS: [&str; 8] = ["en", "es", "de", "fr", "it", "pt", "nl", "pl"];

/// Variance of each accent-matrix entry before row centering.
const ACCENT_VARIANCE: f64 = 1.2;
/// Per-dimension variance contributed by the speaker component `B·v`.
const SPEAKER_VARIANCE: f64 = 2.0;
/// Minimum Euclidean distance between two speakers' latent vectors.
const MIN_LATENT_SPACING: f64 = 1.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub languages: usize,
    pub speakers_per_lang: usize,
    pub utterances_per_speaker: usize,
    pub d_o: usize,
    pub frames_per_phoneme: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub noise_sd_gen: f64,
    /// Reuse the same latent for speaker `i` of every language.
    pub shared_speakers: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            languages: 3,
            speakers_per_lang: 8,
            utterances_per_speaker: 30,
            d_o: 8,
            frames_per_phoneme: 4,
            min_phonemes: 5,
            max_phonemes: 12,
            latent_dim: 4,
            vocab_size: 20,
            noise_sd_gen: 0.1,
            shared_speakers: false,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("languages", self.languages),
            ("speakers_per_lang", self.speakers_per_lang),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("d_o", self.d_o),
            ("frames_per_phoneme", self.frames_per_phoneme),
            ("min_phonemes", self.min_phonemes),
            ("latent_dim", self.latent_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(PolyglotError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_phonemes < self.min_phonemes {
            return Err(PolyglotError::Config("max_phonemes is below min_phonemes".into()));
        }
        if !(self.noise_sd_gen >= 0.0) || !self.noise_sd_gen.is_finite() {
            return Err(PolyglotError::Config("noise_sd_gen must be a nonnegative number".into()));
        }
        Ok(())
    }

    pub fn language_tags(&self) -> Vec<LanguageId> {
        (0..self.languages)
            .map(|i| match DEFAULT_TAGS.get(i) {
                Some(t) => LanguageId::new(*t),
                None => LanguageId::new(format!("l{i}")),
            })
            .collect()
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub lang: LanguageId,
    pub speaker: String,
    pub phonemes: Vec<usize>,
    /// Frame file path relative to the manifest directory.
    pub frames: PathBuf,
    pub n_frames: usize,
    pub d_o: usize,
}

const RECORD_FIELDS: [&str; 6] = ["lang", "speaker", "phonemes", "frames", "n_frames", "d_o"];

/// Manifest contents with frames left on disk.
#[derive(Clone, Debug, Default)]
pub struct CorpusIndex {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    /// Notes about ignored unknown fields, one per occurrence.
    pub warnings: Vec<String>,
}

impl CorpusIndex {
    pub fn frame_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.frames)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub id: LanguageId,
    pub vocab: usize,
}

/// Written next to the manifest by [`gen_synthetic`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: SynthConfig,
    pub languages: Vec<LanguageInfo>,
    /// Held-out accuracy of a nearest-centroid classifier on mean frames.
    pub nearest_centroid_accuracy: f64,
    /// Mean over feature dimensions of the per-dimension variance.
    pub feature_variance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub lang: LanguageId,
    pub speaker: String,
    pub phonemes: Vec<usize>,
    pub frames: Tensor,
}

/// A corpus held in memory, with a deterministic per-speaker split.
#[derive(Clone, Debug)]
pub struct Corpus {
    samples: Vec<CorpusSample>,
    languages: Vec<LanguageInfo>,
    d_o: usize,
    /// Sample indices per speaker, in manifest order.
    by_speaker: BTreeMap<String, Vec<usize>>,
    /// Speakers per language in first-appearance order.
    speakers: Vec<Vec<String>>,
}

/// Fraction of each speaker's utterances reserved for evaluation.
pub const HELDOUT_FRACTION: f64 = 0.1;

impl Corpus {
    /// Builds a corpus from samples. Vocabulary sizes come from `languages`
    /// when given, otherwise from the largest phoneme id seen.
    pub fn from_samples(samples: Vec<CorpusSample>, languages: Option<Vec<LanguageInfo>>) -> Result<Self> {
        let d_o = samples.first().map(|s| s.frames.cols()).unwrap_or(0);
        let mut langs: Vec<LanguageInfo> = languages.unwrap_or_default();
        let known = !langs.is_empty();
        let mut speakers: Vec<Vec<String>> = vec![Vec::new(); langs.len()];
        let mut by_speaker: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.frames.rank() != 2 || s.frames.rows() == 0 || s.frames.cols() != d_o {
                return Err(PolyglotError::Contract(format!(
                    "sample {i} of {} has frames of shape {:?}",
                    s.speaker,
                    s.frames.shape()
                )));
            }
            let li = match langs.iter().position(|l| l.id == s.lang) {
                Some(li) => li,
                None if known => {
                    return Err(PolyglotError::UnknownLanguage {
                        lang: s.lang.to_string(),
                        registered: langs.iter().map(|l| l.id.to_string()).collect(),
                    })
                }
                None => {
                    langs.push(LanguageInfo { id: s.lang.clone(), vocab: 0 });
                    speakers.push(Vec::new());
                    langs.len() - 1
                }
            };
            let max_id = s.phonemes.iter().max().map(|m| m + 1).unwrap_or(0);
            if known {
                if max_id > langs[li].vocab {
                    return Err(PolyglotError::OutOfVocabulary { id: max_id - 1, vocab: langs[li].vocab });
                }
            } else {
                langs[li].vocab = langs[li].vocab.max(max_id);
            }
            if !speakers[li].contains(&s.speaker) {
                if by_speaker.contains_key(&s.speaker) {
                    return Err(PolyglotError::Contract(format!("speaker {} appears in two languages", s.speaker)));
                }
                speakers[li].push(s.speaker.clone());
            }
            by_speaker.entry(s.speaker.clone()).or_default().push(i);
        }
        Ok(Corpus { samples, languages: langs, d_o, by_speaker, speakers })
    }

    /// Loads the manifest and every frame file.
    pub fn load(manifest: &Path) -> Result<Self> {
        let index = load_manifest(manifest)?;
        let meta_path = index.root.join(META_FILE);
        let languages = if meta_path.exists() {
            let text = fs::read_to_string(&meta_path).map_err(|e| PolyglotError::io(&meta_path, e))?;
            let meta: CorpusMeta =
                serde_json::from_str(&text).map_err(|e| PolyglotError::format(&meta_path, e.to_string()))?;
            Some(meta.languages)
        } else {
            None
        };
        let mut samples = Vec::with_capacity(index.records.len());
        for r in &index.records {
            let frames = read_frames(&index.frame_path(r), r.n_frames, r.d_o)?;
            samples.push(CorpusSample { lang: r.lang.clone(), speaker: r.speaker.clone(), phonemes: r.phonemes.clone(), frames });
        }
        Corpus::from_samples(samples, languages)
    }

    pub fn samples(&self) -> &[CorpusSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &CorpusSample {
        &self.samples[i]
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn d_o(&self) -> usize {
        self.d_o
    }

    pub fn languages(&self) -> &[LanguageInfo] {
        &self.languages
    }

    pub fn language_index(&self, lang: &LanguageId) -> Result<usize> {
        self.languages.iter().position(|l| &l.id == lang).ok_or_else(|| PolyglotError::UnknownLanguage {
            lang: lang.to_string(),
            registered: self.languages.iter().map(|l| l.id.to_string()).collect(),
        })
    }

    /// Speakers of `lang`, in manifest order.
    pub fn speakers(&self, lang: &LanguageId) -> Result<&[String]> {
        Ok(&self.speakers[self.language_index(lang)?])
    }

    /// All speakers, language by language.
    pub fn all_speakers(&self) -> Vec<(LanguageId, String)> {
        self.languages
            .iter()
            .zip(&self.speakers)
            .flat_map(|(l, ss)| ss.iter().map(move |s| (l.id.clone(), s.clone())))
            .collect()
    }

    fn split_point(n: usize) -> usize {
        if n < 2 {
            return n;
        }
        let held = ((n as f64) * HELDOUT_FRACTION).ceil() as usize;
        n - held.clamp(1, n - 1)
    }

    /// Training sample indices of `speaker` (all but the last 10%).
    pub fn train_indices(&self, speaker: &str) -> &[usize] {
        let all = self.by_speaker.get(speaker).map(Vec::as_slice).unwrap_or(&[]);
        &all[..Self::split_point(all.len())]
    }

    /// Held-out sample indices of `speaker` (the last 10%, at least one).
    pub fn heldout_indices(&self, speaker: &str) -> &[usize] {
        let all = self.by_speaker.get(speaker).map(Vec::as_slice).unwrap_or(&[]);
        &all[Self::split_point(all.len())..]
    }

    /// Held-out indices of every speaker of `lang`, speaker by speaker.
    pub fn heldout_of_language(&self, lang: &LanguageId) -> Result<Vec<usize>> {
        Ok(self.speakers(lang)?.iter().flat_map(|s| self.heldout_indices(s).iter().copied()).collect())
    }

    /// Training indices of every speaker of `lang`.
    pub fn train_of_language(&self, lang: &LanguageId) -> Result<Vec<usize>> {
        Ok(self.speakers(lang)?.iter().flat_map(|s| self.train_indices(s).iter().copied()).collect())
    }
}

/// Reads `T × d_o` little-endian `f32` frames.
pub fn read_frames(path: &Path, t: usize, d_o: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| PolyglotError::io(path, e))?;
    let expected = 4 * t * d_o;
    if bytes.len() != expected {
        return Err(PolyglotError::format(
            path,
            format!("expected {expected} bytes for {t} x {d_o} frames, found {}", bytes.len()),
        ));
    }
    if t == 0 || d_o == 0 {
        return Err(PolyglotError::format(path, "frame files must hold at least one frame"));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(Tensor::new(vec![t, d_o], data)?)
}

/// Little-endian `f32` encoding of a `T × d_o` tensor.
pub fn encode_frames(frames: &Tensor) -> Vec<u8> {
    frames.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn write_frames(path: &Path, frames: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PolyglotError::io(dir, e))?;
    }
    fs::write(path, encode_frames(frames)).map_err(|e| PolyglotError::io(path, e))
}

/// Parses a manifest; unknown fields are ignored and reported as warnings.
pub fn load_manifest(path: &Path) -> Result<CorpusIndex> {
    let text = fs::read_to_string(path).map_err(|e| PolyglotError::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = |msg: String| PolyglotError::format(path, format!("line {}: {msg}", lineno + 1));
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| at("record is not an object".into()))?;
        for key in obj.keys() {
            if !RECORD_FIELDS.contains(&key.as_str()) {
                let w = format!("line {}: ignoring unknown field {key:?}", lineno + 1);
                log::warn!("{}: {w}", path.display());
                warnings.push(w);
            }
        }
        let record: ManifestRecord = serde_json::from_value(value).map_err(|e| at(e.to_string()))?;
        if record.n_frames == 0 {
            return Err(at("n_frames must be at least 1".into()));
        }
        records.push(record);
    }
    Ok(CorpusIndex { root, records, warnings })
}

/// Held-out accuracy of nearest-centroid classification of mean frames
/// over all speakers, centroids from training splits.
pub fn nearest_centroid_accuracy(corpus: &Corpus) -> f64 {
    let mean_frame = |i: usize| -> Vec<f64> {
        let f = &corpus.sample(i).frames;
        let mut m = vec![0.0; f.cols()];
        for r in 0..f.rows() {
            for (a, b) in m.iter_mut().zip(f.row(r)) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|v| *v /= f.rows() as f64);
        m
    };
    let speakers = corpus.all_speakers();
    let centroids: Vec<Vec<f64>> = speakers
        .iter()
        .map(|(_, s)| {
            let idx = corpus.train_indices(s);
            let mut c = vec![0.0; corpus.d_o()];
            for &i in idx {
                for (a, b) in c.iter_mut().zip(mean_frame(i)) {
                    *a += b;
                }
            }
            c.iter_mut().for_each(|v| *v /= idx.len().max(1) as f64);
            c
        })
        .collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for (k, (_, s)) in speakers.iter().enumerate() {
        for &i in corpus.heldout_indices(s) {
            let m = mean_frame(i);
            let best = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, c.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j);
            hits += usize::from(best == Some(k));
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn feature_variance(corpus: &Corpus) -> f64 {
    let d = corpus.d_o();
    let (mut n, mut sum, mut sq) = (0usize, vec![0.0; d], vec![0.0; d]);
    for s in corpus.samples() {
        for r in 0..s.frames.rows() {
            for (j, v) in s.frames.row(r).iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (0..d).map(|j| sq[j] / n - (sum[j] / n).powi(2)).sum::<f64>() / d as f64
}

fn draw_latents(cfg: &SynthConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut latents: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut spacing = MIN_LATENT_SPACING;
    let mut rejected = 0;
    while latents.len() < count {
        let v: Vec<f64> = (0..cfg.latent_dim).map(|_| normal.sample(rng)).collect();
        let far = latents.iter().all(|w| w.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= spacing);
        if far {
            latents.push(v);
        } else {
            rejected += 1;
            // Crowded latent spaces (many speakers, small p) relax the spacing.
            if rejected % 1000 == 0 {
                spacing *= 0.9;
            }
        }
    }
    latents
}

/// Frames are `A_ℓ·onehot(phoneme) + B·v_s + N(0, noise_sd_gen²)`, each
/// phoneme held for `frames_per_phoneme` frames. `A_ℓ` rows are centered so
/// languages differ in phonetic detail rather than by a constant offset.
fn generate(cfg: &SynthConfig) -> Result<Vec<CorpusSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d_o, p, v) = (cfg.d_o, cfg.latent_dim, cfg.vocab_size);
    let b_sd = (SPEAKER_VARIANCE / p as f64).sqrt();
    let speaker_map = Tensor::randn(vec![d_o, p], b_sd, &mut rng);
    let n_latents = if cfg.shared_speakers { cfg.speakers_per_lang } else { cfg.languages * cfg.speakers_per_lang };
    let latents = draw_latents(cfg, n_latents, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sd_gen).expect("validated sd");
    let mut samples = Vec::new();
    for (li, lang) in cfg.language_tags().into_iter().enumerate() {
        let mut accent = Tensor::randn(vec![d_o, v], ACCENT_VARIANCE.sqrt(), &mut rng);
        for r in 0..d_o {
            let row = &mut accent.data_mut()[r * v..(r + 1) * v];
            let mean = row.iter().sum::<f64>() / v as f64;
            row.iter_mut().for_each(|x| *x -= mean);
        }
        for si in 0..cfg.speakers_per_lang {
            let latent = &latents[if cfg.shared_speakers { si } else { li * cfg.speakers_per_lang + si }];
            let offset: Vec<f64> =
                (0..d_o).map(|r| (0..p).map(|c| speaker_map.data()[r * p + c] * latent[c]).sum()).collect();
            let speaker = format!("{lang}_s{si:02}");
            for _ in 0..cfg.utterances_per_speaker {
                let j = rng.random_range(cfg.min_phonemes..=cfg.max_phonemes);
                let phonemes: Vec<usize> = (0..j).map(|_| rng.random_range(0..v)).collect();
                let t = j * cfg.frames_per_phoneme;
                let mut data = Vec::with_capacity(t * d_o);
                for &ph in &phonemes {
                    for _ in 0..cfg.frames_per_phoneme {
                        for r in 0..d_o {
                            let eps = if cfg.noise_sd_gen > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                            data.push(accent.data()[r * v + ph] + offset[r] + eps);
                        }
                    }
                }
                let frames = Tensor::new(vec![t, d_o], data)?;
                samples.push(CorpusSample { lang: lang.clone(), speaker: speaker.clone(), phonemes, frames });
            }
        }
    }
    Ok(samples)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| PolyglotError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| PolyglotError::io(&tmp, e))?;
    f.sync_all().map_err(|e| PolyglotError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PolyglotError::io(path, e))
}

/// Generates a synthetic corpus into `out_dir` and returns the manifest path.
///
/// The manifest is written last, atomically, so a failure leaves no manifest.
pub fn gen_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    let samples = generate(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| PolyglotError::io(out_dir, e))?;
    let mut manifest = String::new();
    let mut counters: BTreeMap<String, usize> = BTreeMap::new();
    for s in &samples {
        let n = counters.entry(s.speaker.clone()).or_default();
        let rel = PathBuf::from(s.lang.as_str()).join(&s.speaker).join(format!("u{:03}.f32", *n));
        *n += 1;
        write_frames(&out_dir.join(&rel), &s.frames)?;
        let record = ManifestRecord {
            lang: s.lang.clone(),
            speaker: s.speaker.clone(),
            phonemes: s.phonemes.clone(),
            frames: rel,
            n_frames: s.frames.rows(),
            d_o: s.frames.cols(),
        };
        manifest.push_str(&serde_json::to_string(&record).expect("serializable record"));
        manifest.push('\n');
    }
    let languages: Vec<LanguageInfo> =
        cfg.language_tags().into_iter().map(|id| LanguageInfo { id, vocab: cfg.vocab_size }).collect();
    // Statistics describe the stored (f32-rounded) data.
    let stored: Vec<CorpusSample> = samples
        .into_iter()
        .map(|mut s| {
            s.frames.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            s
        })
        .collect();
    let corpus = Corpus::from_samples(stored, Some(languages.clone()))?;
    let meta = CorpusMeta {
        config: cfg.clone(),
        languages,
        nearest_centroid_accuracy: nearest_centroid_accuracy(&corpus),
        feature_variance: feature_variance(&corpus),
    };
    let meta_path = out_dir.join(META_FILE);
    write_atomic(&meta_path, serde_json::to_string_pretty(&meta).expect("serializable meta").as_bytes())?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, manifest.as_bytes())?;
    Ok(manifest_path)
}

/// Reads the metadata written by [`gen_synthetic`].
pub fn load_meta(manifest: &Path) -> Result<CorpusMeta> {
    let path = manifest.parent().unwrap_or(Path::new(".")).join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| PolyglotError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| PolyglotError::format(&path, e.to_string()))
}

/// In-memory synthetic corpus, identical to loading what [`gen_synthetic`] writes.
pub fn synthetic_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let samples = generate(cfg)?
        .into_iter()
        .map(|mut s| {
            s.frames.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            s
        })
        .collect();
    let languages = cfg.language_tags().into_iter().map(|id| LanguageInfo { id, vocab: cfg.vocab_size }).collect();
    Corpus::from_samples(samples, Some(languages))
}

#[cfg(test)]
mod tests;
