//! Deterministic synthetic dataset generator.
//!
//! Every utterance is a random word sequence rendered as per-word feature
//! templates (a seeded Gaussian block per vocabulary word) plus Gaussian
//! noise. Each characteristic value contributes a fixed rank-one signature
//! `strength * u (x) w`: a unit bin-direction `u` times a frame profile
//! `w_t = 1 + z_t`. The constant part of `w` separates class means (what
//! the classifier reads); the frame-varying part perturbs attention score
//! patterns, which is the distortion a query/key adapter can learn to
//! undo. The generic split used for pre-training carries no signatures at
//! all.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::FIRST_WORD_TOKEN;
use crate::error::{PiwError, Result};
use crate::features::{read_features, write_features, FeatureMatrix};
use crate::rng::stream_rng;
use crate::taxonomy::CharacteristicTaxonomy;

/// Word list shared by the generator, the tokenizer, and decoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(PiwError::config("vocab", "must not be empty"));
        }
        let unique: std::collections::BTreeSet<&String> = words.iter().collect();
        if unique.len() != words.len() {
            return Err(PiwError::config("vocab", "duplicate words"));
        }
        Ok(Self { words })
    }

    pub fn default_words() -> Vec<String> {
        [
            "ash", "bay", "cod", "dew", "elm", "fig", "gale", "hush", "iris", "jade", "kite",
            "lark", "moss", "night", "oak", "pine", "quay", "reed", "sage", "tide",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Smallest model vocab that can express every word plus specials.
    pub fn required_model_vocab(&self) -> usize {
        FIRST_WORD_TOKEN + self.words.len()
    }

    pub fn token_for(&self, word: &str) -> Option<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .map(|i| FIRST_WORD_TOKEN + i)
    }

    pub fn word_for(&self, token: usize) -> Option<&str> {
        token
            .checked_sub(FIRST_WORD_TOKEN)
            .and_then(|i| self.words.get(i))
            .map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.token_for(w)
                    .ok_or_else(|| PiwError::lookup(format!("unknown word `{w}`")))
            })
            .collect()
    }

    /// Token ids back to text; ids outside the word range are dropped.
    pub fn detokenize(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.word_for(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let v: Vocabulary = serde_json::from_str(&text)?;
        Vocabulary::new(v.words)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub taxonomy: CharacteristicTaxonomy,
    pub vocab: Vec<String>,
    /// Inclusive range of words per utterance.
    pub words_per_utt: (usize, usize),
    pub frames_per_word: usize,
    pub feature_bins: usize,
    pub noise_sigma: f64,
    pub signature_strength: f64,
    /// Labeled samples per characteristic combination (before skew).
    pub samples_per_combo: usize,
    /// Generic (signature-free) pre-training pool size as a fraction of the
    /// labeled pool.
    pub generic_fraction: f64,
    /// Depth of the frame-to-frame modulation in the signature profile
    /// (0 makes signatures constant across frames).
    pub signature_modulation: f64,
    /// Per-value difficulty ramp: value j of a group gets its signature
    /// scaled by `1 + ramp * j`, so later values are harder for an
    /// unadapted model. Used together with `skew` in fairness experiments.
    pub signature_ramp: f64,
    /// When set, the first value of every group receives `skew` times the
    /// samples of the others, making the marginals imbalanced for fairness
    /// experiments (with `signature_ramp` the under-represented later
    /// values are also the harder ones).
    pub skew: Option<f64>,
    /// Train/val/test fractions of the labeled pool.
    pub splits: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            taxonomy: CharacteristicTaxonomy::new(vec![
                ("Gender", vec!["m", "f"]),
                ("Accent", vec!["a", "b", "c"]),
            ])
            .expect("default taxonomy is valid"),
            vocab: Vocabulary::default_words(),
            words_per_utt: (3, 6),
            frames_per_word: 4,
            feature_bins: 16,
            noise_sigma: 0.1,
            signature_strength: 0.5,
            signature_modulation: 2.5,
            signature_ramp: 0.0,
            samples_per_combo: 20,
            generic_fraction: 0.5,
            skew: None,
            splits: (0.5, 0.2, 0.3),
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.taxonomy.validate()?;
        Vocabulary::new(self.vocab.clone())?;
        if self.words_per_utt.0 == 0 || self.words_per_utt.0 > self.words_per_utt.1 {
            return Err(PiwError::config("words_per_utt", "need 1 <= min <= max"));
        }
        if self.frames_per_word == 0 || self.feature_bins == 0 {
            return Err(PiwError::config(
                "frames_per_word/feature_bins",
                "must be positive",
            ));
        }
        if self.noise_sigma < 0.0
            || self.signature_strength < 0.0
            || self.signature_modulation < 0.0
            || self.signature_ramp < 0.0
        {
            return Err(PiwError::config(
                "noise_sigma/signature_strength",
                "must be non-negative",
            ));
        }
        if self.taxonomy.groups.is_empty() && self.samples_per_combo > 0 {
            return Err(PiwError::config(
                "taxonomy",
                "empty taxonomy cannot generate labeled samples",
            ));
        }
        let sum = self.splits.0 + self.splits.1 + self.splits.2;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PiwError::config("splits", format!("must sum to 1, got {sum}")));
        }
        if let Some(f) = self.skew {
            if f < 1.0 {
                return Err(PiwError::config("skew", "factor must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The rank-one signature of a characteristic value over `frames`
    /// frames: `strength * u_b * w_t` with `u` a seeded unit bin-direction
    /// per value and `w_t = 1 + modulation * z_t` a seeded frame profile.
    /// Prefixes are consistent: the first T columns do not depend on
    /// `frames`.
    pub fn signature(&self, group: &str, value: &str, frames: usize) -> crate::numerics::Matrix {
        let ramp = match self.taxonomy.group(group) {
            Some(g) => match g.values.iter().position(|v| v == value) {
                Some(j) => 1.0 + self.signature_ramp * j as f64,
                None => 1.0,
            },
            None => 1.0,
        };
        let strength = self.signature_strength * ramp;
        let mut dir_rng = stream_rng(self.seed, &format!("signature/{group}/{value}"));
        let mut u: Vec<f64> = (0..self.feature_bins)
            .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut dir_rng))
            .collect();
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in u.iter_mut() {
            *x /= norm;
        }
        let mut profile_rng = stream_rng(self.seed, &format!("signature-profile/{group}/{value}"));
        let w: Vec<f64> = (0..frames)
            .map(|_| {
                let z: f64 =
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut profile_rng);
                1.0 + self.signature_modulation * z
            })
            .collect();
        crate::numerics::Matrix::from_fn(self.feature_bins, frames, |b, t| strength * u[b] * w[t])
    }

    /// The noise-free feature template for one word.
    pub fn word_template(&self, word: &str) -> crate::numerics::Matrix {
        let mut rng = stream_rng(self.seed, &format!("template/{word}"));
        crate::numerics::Matrix::gaussian(self.feature_bins, self.frames_per_word, 1.0, &mut rng)
    }
}

/// One dataset entry: a feature-file reference (relative to the manifest
/// directory), its transcript, and its characteristic labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub features: String,
    pub transcript: String,
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub split: String,
    pub taxonomy: CharacteristicTaxonomy,
    pub config_digest: String,
    pub vocab: Vec<String>,
    pub samples: Vec<Sample>,
}

/// A manifest sample with its features loaded into memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub features: FeatureMatrix,
    pub transcript: String,
    pub labels: BTreeMap<String, String>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Parse and validate a manifest: labels must exist in the taxonomy
    /// snapshot, feature references must be unique and present on disk.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
            PiwError::format(format!("{}: {e}", path.display()))
        })?;
        manifest.taxonomy.validate()?;
        let dir = manifest_dir(path);
        let mut seen = std::collections::BTreeSet::new();
        for (i, sample) in manifest.samples.iter().enumerate() {
            if !seen.insert(&sample.features) {
                return Err(PiwError::format(format!(
                    "{}: samples[{i}].features duplicates `{}`",
                    path.display(),
                    sample.features
                )));
            }
            for (group, value) in &sample.labels {
                if !manifest.taxonomy.has_value(group, value) {
                    return Err(PiwError::format(format!(
                        "{}: samples[{i}].labels names unknown value `{group}={value}`",
                        path.display()
                    )));
                }
            }
            let feature_path = dir.join(&sample.features);
            if !feature_path.exists() {
                return Err(PiwError::MissingFile {
                    path: feature_path.display().to_string(),
                });
            }
        }
        Ok(manifest)
    }

    /// Load every referenced feature file.
    pub fn load_samples(&self, manifest_path: &Path) -> Result<Vec<LoadedSample>> {
        let dir = manifest_dir(manifest_path);
        self.samples
            .iter()
            .map(|s| {
                Ok(LoadedSample {
                    features: read_features(&dir.join(&s.features))?,
                    transcript: s.transcript.clone(),
                    labels: s.labels.clone(),
                })
            })
            .collect()
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.vocab.clone())
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Paths produced by [`generate_dataset`].
#[derive(Debug, Clone, Serialize)]
pub struct GeneratedDataset {
    pub out_dir: PathBuf,
    pub generic: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub vocab: PathBuf,
    pub taxonomy: PathBuf,
    pub counts: BTreeMap<String, usize>,
}

struct PendingSample {
    features: FeatureMatrix,
    transcript: String,
    labels: BTreeMap<String, String>,
}

/// Generate the four splits plus vocab/taxonomy files under `out_dir`.
/// Everything derives from `cfg.seed`, so identical configs produce
/// bit-identical files.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let vocab = Vocabulary::new(cfg.vocab.clone())?;
    fs::create_dir_all(out_dir.join("features"))?;

    // Pre-compute templates and signatures.
    let templates: Vec<crate::numerics::Matrix> =
        vocab.words().iter().map(|w| cfg.word_template(w)).collect();
    let max_frames = cfg.words_per_utt.1 * cfg.frames_per_word;
    let signatures: BTreeMap<(String, String), crate::numerics::Matrix> = cfg
        .taxonomy
        .pairs()
        .map(|(g, v)| ((g.to_string(), v.to_string()), cfg.signature(g, v, max_frames)))
        .collect();

    let mut sample_rng = stream_rng(cfg.seed, "samples");
    let mut render = |labels: &BTreeMap<String, String>,
                      rng: &mut rand_chacha::ChaCha8Rng|
     -> PendingSample {
        let n_words = rng.gen_range(cfg.words_per_utt.0..=cfg.words_per_utt.1);
        let word_ids: Vec<usize> = (0..n_words).map(|_| rng.gen_range(0..vocab.len())).collect();
        let frames = n_words * cfg.frames_per_word;
        let mut f = FeatureMatrix::filled(cfg.feature_bins, frames, 0.0);
        for (w_idx, &word) in word_ids.iter().enumerate() {
            let template = &templates[word];
            for b in 0..cfg.feature_bins {
                for t in 0..cfg.frames_per_word {
                    f.set(b, w_idx * cfg.frames_per_word + t, template.get(b, t));
                }
            }
        }
        for (group, value) in labels {
            let sig = &signatures[&(group.clone(), value.clone())];
            for b in 0..cfg.feature_bins {
                for t in 0..frames {
                    f.set(b, t, f.get(b, t) + sig.get(b, t));
                }
            }
        }
        if cfg.noise_sigma > 0.0 {
            for b in 0..cfg.feature_bins {
                for t in 0..frames {
                    let n: f64 =
                        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                    f.set(b, t, f.get(b, t) + cfg.noise_sigma * n);
                }
            }
        }
        // Features are log-scale by convention; clamp at the format floor.
        for b in 0..cfg.feature_bins {
            for t in 0..frames {
                f.set(b, t, f.get(b, t).max(crate::features::FEATURE_FLOOR));
            }
        }
        let transcript = word_ids
            .iter()
            .map(|&w| vocab.words()[w].clone())
            .collect::<Vec<_>>()
            .join(" ");
        PendingSample {
            features: f,
            transcript,
            labels: labels.clone(),
        }
    };

    // Cartesian product of group values, in taxonomy order.
    let mut combos: Vec<BTreeMap<String, String>> = vec![BTreeMap::new()];
    for group in &cfg.taxonomy.groups {
        let mut next = Vec::with_capacity(combos.len() * group.values.len());
        for combo in &combos {
            for value in &group.values {
                let mut c = combo.clone();
                c.insert(group.group.clone(), value.clone());
                next.push(c);
            }
        }
        combos = next;
    }
    if cfg.taxonomy.groups.is_empty() {
        combos.clear();
    }

    let mut labeled: Vec<PendingSample> = Vec::new();
    for combo in &combos {
        let mut weight = 1.0;
        if let Some(factor) = cfg.skew {
            for group in &cfg.taxonomy.groups {
                if combo.get(&group.group) == group.values.first() {
                    weight *= factor;
                }
            }
        }
        let count = (cfg.samples_per_combo as f64 * weight).round() as usize;
        for _ in 0..count {
            labeled.push(render(combo, &mut sample_rng));
        }
    }

    // Deterministic shuffle, then 50:20:30 (by default) partitioning.
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    crate::rng::shuffle_indices(&mut order, &mut stream_rng(cfg.seed, "split-shuffle"));
    let n = labeled.len();
    let n_train = (n as f64 * cfg.splits.0).round() as usize;
    let n_val = (n as f64 * cfg.splits.1).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let mut generic_rng = stream_rng(cfg.seed, "generic");
    let n_generic = (cfg.generic_fraction * n as f64).round() as usize;
    let empty = BTreeMap::new();
    let generic: Vec<PendingSample> =
        (0..n_generic).map(|_| render(&empty, &mut generic_rng)).collect();

    let digest = cfg.digest();
    let mut counts = BTreeMap::new();
    let mut write_split = |name: &str, samples: Vec<&PendingSample>| -> Result<PathBuf> {
        let mut manifest = Manifest {
            split: name.to_string(),
            taxonomy: cfg.taxonomy.clone(),
            config_digest: digest.clone(),
            vocab: cfg.vocab.clone(),
            samples: Vec::with_capacity(samples.len()),
        };
        for (i, s) in samples.iter().enumerate() {
            let rel = format!("features/{name}-{i:04}.piwfeat");
            write_features(&out_dir.join(&rel), &s.features)?;
            manifest.samples.push(Sample {
                features: rel,
                transcript: s.transcript.clone(),
                labels: s.labels.clone(),
            });
        }
        let path = out_dir.join(format!("{name}.json"));
        manifest.save(&path)?;
        counts.insert(name.to_string(), samples.len());
        Ok(path)
    };

    let train_refs: Vec<&PendingSample> =
        order[..n_train].iter().map(|&i| &labeled[i]).collect();
    let val_refs: Vec<&PendingSample> =
        order[n_train..n_train + n_val].iter().map(|&i| &labeled[i]).collect();
    let test_refs: Vec<&PendingSample> =
        order[n_train + n_val..].iter().map(|&i| &labeled[i]).collect();
    let generic_refs: Vec<&PendingSample> = generic.iter().collect();

    let generic_path = write_split("generic", generic_refs)?;
    let train_path = write_split("train", train_refs)?;
    let val_path = write_split("val", val_refs)?;
    let test_path = write_split("test", test_refs)?;

    let vocab_path = out_dir.join("vocab.json");
    vocab.save(&vocab_path)?;
    let taxonomy_path = out_dir.join("taxonomy.json");
    fs::write(&taxonomy_path, serde_json::to_string_pretty(&cfg.taxonomy)?)?;

    Ok(GeneratedDataset {
        out_dir: out_dir.to_path_buf(),
        generic: generic_path,
        train: train_path,
        val: val_path,
        test: test_path,
        vocab: vocab_path,
        taxonomy: taxonomy_path,
        counts,
    })
}
