//! Training orchestration and the dual-mode inference workflow.
//!
//! Training routes every labeled sample to the profile of each of its
//! characteristic values, runs a learning-rate grid per profile, and keeps
//! the candidate with the lowest validation WER. Inference resolves an
//! assignment (given, or predicted by the classifier), selects the matching
//! profiles, merges them with weights 1/K, and greedy-decodes.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::Serialize;

use crate::asr::{BoundAdapter, ToyAsrModel};
use crate::classifier::CharacteristicClassifier;
use crate::error::{PiwError, Result};
use crate::features::{slice_for_classifier, FeatureMatrix};
use crate::library::ProfileLibrary;
use crate::lora::{
    init_profile, merge_profiles_with_mode, LoraProfile, MergedAdapter, WeightMode,
};
use crate::numerics::{gradients, Adam, ParamSet, ParamVars, Tape, Var};
use crate::rng::{shuffle_indices, stream_rng};
use crate::synth::{LoadedSample, Vocabulary};
use crate::taxonomy::BASELINE_GROUP;

/// Profile fine-tuning settings. The default grid is the full five-point
/// learning-rate sweep; [`TrainSpec::desk`] narrows it to a single rate for
/// fast runs.
#[derive(Debug, Clone)]
pub struct TrainSpec {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch: usize,
    pub rank: usize,
    pub merge_mode: WeightMode,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr_grid: vec![1e-3, 1e-4, 5e-4, 1e-5, 5e-5],
            epochs: 3,
            batch: 4,
            rank: 4,
            merge_mode: WeightMode::Both,
        }
    }
}

impl TrainSpec {
    /// Single-rate configuration used by default at desk scale; the full
    /// grid stays available behind a flag.
    pub fn desk() -> Self {
        Self {
            lr_grid: vec![1e-3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_grid.is_empty() {
            return Err(PiwError::config("lr_grid", "must not be empty"));
        }
        if self.epochs == 0 {
            return Err(PiwError::config("epochs", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(PiwError::config("batch", "must be at least 1"));
        }
        if self.rank == 0 {
            return Err(PiwError::config("rank", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Known,
    Inferred,
}

#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub features: FeatureMatrix,
    pub mode: InferenceMode,
    /// Required iff mode is Known.
    pub assignment: Option<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferOutcome {
    pub text: String,
    pub assignment: BTreeMap<String, String>,
    pub mode: InferenceMode,
    pub adapter: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileTrainReport {
    pub group: String,
    pub value: String,
    pub lr_selected: Option<f64>,
    pub val_wer: Option<f64>,
    /// Optimizer steps consumed across all grid candidates for this profile.
    pub steps: u64,
    pub train_samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    pub profiles: Vec<ProfileTrainReport>,
    pub total_steps: u64,
}

/// Tokenized training pair.
struct Prepared {
    features: FeatureMatrix,
    target: Vec<usize>,
}

fn prepare(samples: &[&LoadedSample], vocab: &Vocabulary) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                features: s.features.clone(),
                target: vocab.tokenize(&s.transcript)?,
            })
        })
        .collect()
}

/// Fine-tune one profile's factors on the given samples with the base model
/// frozen. Returns the trained profile and the optimizer step count.
pub fn train_candidate(
    model: &ToyAsrModel,
    mut profile: LoraProfile,
    samples: &[&LoadedSample],
    vocab: &Vocabulary,
    lr: f64,
    epochs: usize,
    batch: usize,
    seed: u64,
) -> Result<(LoraProfile, u64)> {
    if samples.is_empty() {
        return Err(PiwError::input("train_candidate: no samples"));
    }
    let prepared = prepare(samples, vocab)?;

    // Base weights enter as frozen entries; only the factor pairs train.
    let mut params = ParamSet::new();
    for (path, m) in model.params().iter() {
        params.insert(path.to_string(), m.clone())?;
    }
    let layer_ids: Vec<String> = profile.layers.keys().cloned().collect();
    for id in &layer_ids {
        let layer = &profile.layers[id];
        params.insert(format!("lora.{id}.a"), layer.a.clone())?;
        params.insert(format!("lora.{id}.b"), layer.b.clone())?;
        params.mark_trainable(&format!("lora.{id}.a"))?;
        params.mark_trainable(&format!("lora.{id}.b"))?;
    }
    let scale = profile.delta_scale();

    let mut rng = stream_rng(
        seed,
        &format!("profile-train/{}/{}/{lr}", profile.group, profile.value),
    );
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut optimizer = Adam::new(lr);
    let mut steps = 0u64;
    for _epoch in 0..epochs {
        shuffle_indices(&mut order, &mut rng);
        for chunk in order.chunks(batch) {
            let batch_samples: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let loss_fn = |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
                let mut bound = BoundAdapter::new();
                for id in &layer_ids {
                    bound.insert(
                        id.clone(),
                        (
                            vars[&format!("lora.{id}.a")],
                            vars[&format!("lora.{id}.b")],
                            scale,
                        ),
                    );
                }
                let mut losses = Vec::with_capacity(batch_samples.len());
                for p in &batch_samples {
                    let (loss, _) =
                        model.build_teacher_forced(tape, vars, &bound, &p.features, &p.target)?;
                    losses.push(loss);
                }
                tape.mean_scalars(&losses)
            };
            let grads = gradients(&loss_fn, &params)?;
            optimizer.step(&mut params, &grads)?;
            steps += 1;
        }
    }
    for id in &layer_ids {
        let layer = profile.layers.get_mut(id).expect("layer exists");
        layer.a = params.get(&format!("lora.{id}.a")).unwrap().clone();
        layer.b = params.get(&format!("lora.{id}.b")).unwrap().clone();
    }
    profile.trained_steps += steps;
    Ok((profile, steps))
}

/// Micro-averaged WER of decoding `samples` with a single-profile adapter
/// (weight 1), used for grid selection.
fn validation_wer(
    model: &ToyAsrModel,
    profile: &LoraProfile,
    samples: &[&LoadedSample],
    vocab: &Vocabulary,
) -> Result<f64> {
    let adapter = merge_profiles_with_mode(
        std::slice::from_ref(profile),
        Some(&[1.0]),
        WeightMode::Both,
    )?;
    let mut errors = 0usize;
    let mut words = 0usize;
    for s in samples {
        let decoded = model.greedy_decode(Some(&adapter), &s.features)?;
        let text = vocab.detokenize(&decoded.tokens);
        let b = crate::metrics::wer(&s.transcript, &text)?;
        errors += b.substitutions + b.deletions + b.insertions;
        words += b.ref_words;
    }
    Ok(errors as f64 / words.max(1) as f64)
}

/// Train every (group, value) profile on exactly the training samples whose
/// labels match that value. Per profile, one candidate per grid learning
/// rate is trained from the library's current state and the one with the
/// lowest validation WER is persisted. Values with no matching samples stay
/// untrained and are reported with a warning.
pub fn train_profiles(
    library: &mut ProfileLibrary,
    model: &ToyAsrModel,
    train: &[LoadedSample],
    val: &[LoadedSample],
    vocab: &Vocabulary,
    spec: &TrainSpec,
    seed: u64,
) -> Result<TrainingReport> {
    spec.validate()?;
    library.check_model(&model.config_hash())?;
    let pairs: Vec<(String, String)> = library
        .taxonomy()
        .pairs()
        .map(|(g, v)| (g.to_string(), v.to_string()))
        .collect();

    let mut reports = Vec::new();
    let mut total_steps = 0u64;
    for (group, value) in pairs {
        let subset: Vec<&LoadedSample> = train
            .iter()
            .filter(|s| s.labels.get(&group) == Some(&value))
            .collect();
        if subset.is_empty() {
            log::warn!("no training samples for {group}={value}; profile left untrained");
            reports.push(ProfileTrainReport {
                group,
                value,
                lr_selected: None,
                val_wer: None,
                steps: 0,
                train_samples: 0,
            });
            continue;
        }
        let val_subset: Vec<&LoadedSample> = {
            let matching: Vec<&LoadedSample> = val
                .iter()
                .filter(|s| s.labels.get(&group) == Some(&value))
                .collect();
            if matching.is_empty() {
                val.iter().collect()
            } else {
                matching
            }
        };

        let base_profile = library.load(&group, &value)?;
        let mut best: Option<(f64, f64, LoraProfile)> = None; // (wer, lr, profile)
        let mut steps_for_profile = 0u64;
        for &lr in &spec.lr_grid {
            let (candidate, steps) = train_candidate(
                model,
                base_profile.clone(),
                &subset,
                vocab,
                lr,
                spec.epochs,
                spec.batch,
                seed,
            )?;
            steps_for_profile += steps;
            let wer = validation_wer(model, &candidate, &val_subset, vocab)?;
            let better = match &best {
                None => true,
                Some((best_wer, _, _)) => wer < *best_wer,
            };
            if better {
                best = Some((wer, lr, candidate));
            }
        }
        let (val_wer, lr_selected, chosen) = best.expect("at least one grid point");
        library.update_profile(&chosen)?;
        total_steps += steps_for_profile;
        reports.push(ProfileTrainReport {
            group,
            value,
            lr_selected: Some(lr_selected),
            val_wer: Some(val_wer),
            steps: steps_for_profile,
            train_samples: subset.len(),
        });
    }
    Ok(TrainingReport {
        profiles: reports,
        total_steps,
    })
}

/// Train the whole-dataset baseline: a single profile over every training
/// sample regardless of labels, stored under the reserved group.
pub fn train_one_for_all(
    library: &mut ProfileLibrary,
    model: &ToyAsrModel,
    train: &[LoadedSample],
    val: &[LoadedSample],
    vocab: &Vocabulary,
    spec: &TrainSpec,
    seed: u64,
) -> Result<ProfileTrainReport> {
    spec.validate()?;
    library.check_model(&model.config_hash())?;
    if train.is_empty() {
        return Err(PiwError::input("train_one_for_all: empty dataset"));
    }
    let subset: Vec<&LoadedSample> = train.iter().collect();
    let val_subset: Vec<&LoadedSample> = val.iter().collect();
    let blank = init_profile(
        BASELINE_GROUP,
        "all",
        spec.rank,
        model.injection_points(),
        seed,
    )?;
    let mut best: Option<(f64, f64, LoraProfile)> = None;
    let mut steps_total = 0u64;
    for &lr in &spec.lr_grid {
        let (candidate, steps) = train_candidate(
            model,
            blank.clone(),
            &subset,
            vocab,
            lr,
            spec.epochs,
            spec.batch,
            seed,
        )?;
        steps_total += steps;
        let wer = validation_wer(model, &candidate, &val_subset, vocab)?;
        let better = match &best {
            None => true,
            Some((best_wer, _, _)) => wer < *best_wer,
        };
        if better {
            best = Some((wer, lr, candidate));
        }
    }
    let (val_wer, lr_selected, chosen) = best.expect("at least one grid point");
    if library.has_baseline() {
        library.update_profile(&chosen)?;
    } else {
        library.insert_profile(&chosen)?;
    }
    Ok(ProfileTrainReport {
        group: BASELINE_GROUP.to_string(),
        value: "all".to_string(),
        lr_selected: Some(lr_selected),
        val_wer: Some(val_wer),
        steps: steps_total,
        train_samples: subset.len(),
    })
}

/// Add a new characteristic value (creating its group when absent), train
/// its profile on the provided samples, and persist the result as a single
/// library mutation. Existing profile files are untouched and the library
/// version advances by exactly one.
#[allow(clippy::too_many_arguments)]
pub fn add_value(
    library: &mut ProfileLibrary,
    model: &ToyAsrModel,
    group: &str,
    value: &str,
    train: Option<&[LoadedSample]>,
    vocab: &Vocabulary,
    spec: &TrainSpec,
    seed: u64,
) -> Result<ProfileTrainReport> {
    spec.validate()?;
    library.check_model(&model.config_hash())?;
    if group == BASELINE_GROUP {
        return Err(PiwError::Taxonomy {
            message: format!("group id `{BASELINE_GROUP}` is reserved"),
        });
    }
    if library.taxonomy().has_value(group, value) {
        return Err(PiwError::conflict(format!(
            "value `{value}` already exists in group `{group}`"
        )));
    }
    let blank = init_profile(group, value, spec.rank, model.injection_points(), seed)?;
    let mut report = ProfileTrainReport {
        group: group.to_string(),
        value: value.to_string(),
        lr_selected: None,
        val_wer: None,
        steps: 0,
        train_samples: 0,
    };
    let profile = match train {
        None => blank,
        Some(samples) => {
            let subset: Vec<&LoadedSample> = samples
                .iter()
                .filter(|s| s.labels.get(group).map(String::as_str) == Some(value))
                .collect();
            if subset.is_empty() {
                log::warn!("no training samples for {group}={value}; profile left untrained");
                blank
            } else {
                let mut best: Option<(f64, f64, LoraProfile)> = None;
                for &lr in &spec.lr_grid {
                    let (candidate, steps) = train_candidate(
                        model,
                        blank.clone(),
                        &subset,
                        vocab,
                        lr,
                        spec.epochs,
                        spec.batch,
                        seed,
                    )?;
                    report.steps += steps;
                    let wer = validation_wer(model, &candidate, &subset, vocab)?;
                    let better = match &best {
                        None => true,
                        Some((bw, _, _)) => wer < *bw,
                    };
                    if better {
                        best = Some((wer, lr, candidate));
                    }
                }
                let (wer, lr, chosen) = best.expect("at least one grid point");
                report.val_wer = Some(wer);
                report.lr_selected = Some(lr);
                report.train_samples = subset.len();
                chosen
            }
        }
    };
    library.insert_profile(&profile)?;
    Ok(report)
}

/// Preloaded profiles plus a memoized merge per distinct assignment, so
/// evaluation loops do not reload or re-merge for every sample.
pub struct AdapterBuilder {
    profiles: BTreeMap<(String, String), LoraProfile>,
    baseline: Option<LoraProfile>,
    group_order: Vec<String>,
    merge_mode: WeightMode,
    cache: RefCell<BTreeMap<String, Rc<MergedAdapter>>>,
}

impl AdapterBuilder {
    pub fn from_library(library: &ProfileLibrary, merge_mode: WeightMode) -> Result<Self> {
        let mut profiles = BTreeMap::new();
        for (group, value) in library.taxonomy().pairs() {
            profiles.insert(
                (group.to_string(), value.to_string()),
                library.load(group, value)?,
            );
        }
        let baseline = if library.has_baseline() {
            Some(library.baseline()?)
        } else {
            None
        };
        Ok(Self {
            profiles,
            baseline,
            group_order: library
                .taxonomy()
                .groups
                .iter()
                .map(|g| g.group.clone())
                .collect(),
            merge_mode,
            cache: RefCell::new(BTreeMap::new()),
        })
    }

    /// Merged adapter for an assignment (weights 1/K), or None when the
    /// assignment is empty (base-model inference).
    pub fn adapter_for(
        &self,
        assignment: &BTreeMap<String, String>,
    ) -> Result<Option<Rc<MergedAdapter>>> {
        if assignment.is_empty() {
            return Ok(None);
        }
        let mut selected = Vec::new();
        let mut key = String::new();
        for group in &self.group_order {
            if let Some(value) = assignment.get(group) {
                let profile = self
                    .profiles
                    .get(&(group.clone(), value.clone()))
                    .ok_or_else(|| {
                        PiwError::lookup(format!("unknown value `{value}` in group `{group}`"))
                    })?;
                selected.push(profile.clone());
                key.push_str(group);
                key.push('=');
                key.push_str(value);
                key.push(';');
            }
        }
        for group in assignment.keys() {
            if !self.group_order.contains(group) {
                return Err(PiwError::lookup(format!(
                    "unknown characteristic group `{group}`"
                )));
            }
        }
        if selected.is_empty() {
            return Ok(None);
        }
        if let Some(cached) = self.cache.borrow().get(&key) {
            return Ok(Some(cached.clone()));
        }
        let merged = Rc::new(merge_profiles_with_mode(&selected, None, self.merge_mode)?);
        self.cache.borrow_mut().insert(key, merged.clone());
        Ok(Some(merged))
    }

    pub fn baseline(&self) -> Result<Rc<MergedAdapter>> {
        let profile = self.baseline.as_ref().ok_or_else(|| {
            PiwError::lookup("no one-for-all baseline profile in library".to_string())
        })?;
        let key = "_baseline".to_string();
        if let Some(cached) = self.cache.borrow().get(&key) {
            return Ok(cached.clone());
        }
        let merged = Rc::new(merge_profiles_with_mode(
            std::slice::from_ref(profile),
            None,
            self.merge_mode,
        )?);
        self.cache.borrow_mut().insert(key, merged.clone());
        Ok(merged)
    }
}

/// Dual-mode inference: resolve the assignment, merge the matching
/// profiles with weights 1/K, and greedy-decode. An empty assignment
/// degrades to base-model decoding.
pub fn infer(
    model: &ToyAsrModel,
    library: &ProfileLibrary,
    classifier: Option<&CharacteristicClassifier>,
    request: &InferenceRequest,
    vocab: &Vocabulary,
    merge_mode: WeightMode,
) -> Result<InferOutcome> {
    library.check_model(&model.config_hash())?;
    let assignment = match request.mode {
        InferenceMode::Known => request
            .assignment
            .clone()
            .ok_or_else(|| PiwError::input("known mode requires an assignment"))?,
        InferenceMode::Inferred => {
            let clf = classifier.ok_or_else(|| {
                PiwError::input("inferred mode requires a classifier")
            })?;
            let slice = slice_for_classifier(&request.features, clf.config().input_frames)?;
            clf.classify(&slice)?.assignment()
        }
    };
    let profiles = library.select_profiles(&assignment)?;
    let (adapter, description) = if profiles.is_empty() {
        (None, "base".to_string())
    } else {
        let merged = merge_profiles_with_mode(&profiles, None, merge_mode)?;
        let description = merged.describe();
        (Some(merged), description)
    };
    let decoded = model.greedy_decode(adapter.as_ref(), &request.features)?;
    Ok(InferOutcome {
        text: vocab.detokenize(&decoded.tokens),
        assignment,
        mode: request.mode,
        adapter: description,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asr::{ModelConfig, PretrainHyper};
    use crate::synth::{generate_dataset, Manifest, SynthConfig};
    use crate::taxonomy::CharacteristicTaxonomy;
    use tempfile::tempdir;

    struct World {
        model: ToyAsrModel,
        library: ProfileLibrary,
        vocab: Vocabulary,
        train: Vec<LoadedSample>,
        val: Vec<LoadedSample>,
        _dirs: (tempfile::TempDir, tempfile::TempDir),
    }

    /// Small but trainable end-to-end fixture.
    fn build_world() -> World {
        let data_dir = tempdir().unwrap();
        let lib_dir = tempdir().unwrap();
        let cfg = SynthConfig {
            taxonomy: CharacteristicTaxonomy::new(vec![("Accent", vec!["a", "b"])]).unwrap(),
            samples_per_combo: 8,
            words_per_utt: (2, 3),
            feature_bins: 8,
            ..SynthConfig::default()
        };
        let out = generate_dataset(&cfg, data_dir.path()).unwrap();
        let generic = Manifest::load(&out.generic).unwrap();
        let train_m = Manifest::load(&out.train).unwrap();
        let val_m = Manifest::load(&out.val).unwrap();
        let vocab = train_m.vocabulary().unwrap();

        let model_cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            feature_bins: 8,
            vocab: vocab.required_model_vocab(),
            max_tgt_tokens: 6,
            ..ModelConfig::default()
        };
        let generic_samples = generic.load_samples(&out.generic).unwrap();
        let pairs: Vec<(FeatureMatrix, Vec<usize>)> = generic_samples
            .iter()
            .map(|s| (s.features.clone(), vocab.tokenize(&s.transcript).unwrap()))
            .collect();
        let (model, _) = ToyAsrModel::init(model_cfg.clone())
            .unwrap()
            .pretrain(
                &pairs,
                &PretrainHyper {
                    lr: 0.1,
                    epochs: 10,
                    batch: 4,
                },
            )
            .unwrap();
        let library =
            ProfileLibrary::init(cfg.taxonomy.clone(), &model_cfg, 2, 42, lib_dir.path()).unwrap();
        World {
            model,
            library,
            vocab,
            train: train_m.load_samples(&out.train).unwrap(),
            val: val_m.load_samples(&out.val).unwrap(),
            _dirs: (data_dir, lib_dir),
        }
    }

    fn spec() -> TrainSpec {
        TrainSpec {
            lr_grid: vec![1e-2],
            epochs: 2,
            batch: 4,
            rank: 2,
            merge_mode: WeightMode::Both,
        }
    }

    #[test]
    fn routing_partitions_samples_within_each_group() {
        let mut w = build_world();
        let report =
            train_profiles(&mut w.library, &w.model, &w.train, &w.val, &w.vocab, &spec(), 42)
                .unwrap();
        let by_group: BTreeMap<String, usize> = report
            .profiles
            .iter()
            .fold(BTreeMap::new(), |mut acc, r| {
                *acc.entry(r.group.clone()).or_default() += r.train_samples;
                acc
            });
        // Every accent-labeled training sample lands in exactly one accent
        // profile.
        assert_eq!(by_group["Accent"], w.train.len());
        for r in &report.profiles {
            assert!(r.lr_selected.is_some());
            assert!(r.steps > 0);
        }
    }

    #[test]
    fn grid_consumes_steps_per_candidate_and_persists_one() {
        let mut w = build_world();
        let two_lr = TrainSpec {
            lr_grid: vec![1e-2, 1e-3],
            ..spec()
        };
        let report =
            train_profiles(&mut w.library, &w.model, &w.train, &w.val, &w.vocab, &two_lr, 42)
                .unwrap();
        for r in &report.profiles {
            let n = r.train_samples;
            let steps_per_candidate = two_lr.epochs as u64 * n.div_ceil(two_lr.batch) as u64;
            assert_eq!(r.steps, 2 * steps_per_candidate, "profile {}", r.value);
            // The persisted profile carries only the chosen candidate's steps.
            let persisted = w.library.load(&r.group, &r.value).unwrap();
            assert_eq!(persisted.trained_steps, steps_per_candidate);
            assert!([1e-2, 1e-3].contains(&r.lr_selected.unwrap()));
        }
    }

    #[test]
    fn value_with_no_samples_stays_untrained() {
        let mut w = build_world();
        let model_cfg = w.model.config().clone();
        w.library.add_value("Accent", "ghost", &model_cfg, 2, 42).unwrap();
        let report =
            train_profiles(&mut w.library, &w.model, &w.train, &w.val, &w.vocab, &spec(), 42)
                .unwrap();
        let ghost = report
            .profiles
            .iter()
            .find(|r| r.value == "ghost")
            .unwrap();
        assert_eq!(ghost.steps, 0);
        assert!(ghost.lr_selected.is_none());
        let profile = w.library.load("Accent", "ghost").unwrap();
        assert_eq!(profile.trained_steps, 0);
        // B still zero: merged delta vanishes.
        for layer in profile.layers.values() {
            assert!(layer.b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_for_all_counts_steps_over_the_whole_set() {
        let mut w = build_world();
        let s = spec();
        let report =
            train_one_for_all(&mut w.library, &w.model, &w.train, &w.val, &w.vocab, &s, 42)
                .unwrap();
        let expected = s.epochs as u64 * w.train.len().div_ceil(s.batch) as u64;
        assert_eq!(report.steps, expected);
        assert!(w.library.has_baseline());
        // Reserved group is invisible to characteristic selection.
        let assignment: BTreeMap<String, String> =
            [("Accent".to_string(), "a".to_string())].into_iter().collect();
        let selected = w.library.select_profiles(&assignment).unwrap();
        assert!(selected.iter().all(|p| p.group != BASELINE_GROUP));
    }

    #[test]
    fn training_is_deterministic() {
        let mut w1 = build_world();
        let mut w2 = build_world();
        train_profiles(&mut w1.library, &w1.model, &w1.train, &w1.val, &w1.vocab, &spec(), 42)
            .unwrap();
        train_profiles(&mut w2.library, &w2.model, &w2.train, &w2.val, &w2.vocab, &spec(), 42)
            .unwrap();
        for (group, value) in [("Accent", "a"), ("Accent", "b")] {
            let a = std::fs::read(
                w1.library.root().join(&w1.library.entry(group, value).unwrap().path),
            )
            .unwrap();
            let b = std::fs::read(
                w2.library.root().join(&w2.library.entry(group, value).unwrap().path),
            )
            .unwrap();
            assert_eq!(a, b, "profile {group}/{value} differs between runs");
        }
    }

    #[test]
    fn known_mode_requires_assignment() {
        let w = build_world();
        let req = InferenceRequest {
            features: w.train[0].features.clone(),
            mode: InferenceMode::Known,
            assignment: None,
        };
        assert!(matches!(
            infer(&w.model, &w.library, None, &req, &w.vocab, WeightMode::Both),
            Err(PiwError::Input { .. })
        ));
    }

    #[test]
    fn empty_assignment_matches_base_decode() {
        let w = build_world();
        let req = InferenceRequest {
            features: w.train[0].features.clone(),
            mode: InferenceMode::Known,
            assignment: Some(BTreeMap::new()),
        };
        let out = infer(&w.model, &w.library, None, &req, &w.vocab, WeightMode::Both).unwrap();
        assert_eq!(out.adapter, "base");
        let base = w
            .model
            .greedy_decode(None, &w.train[0].features)
            .unwrap();
        assert_eq!(out.text, w.vocab.detokenize(&base.tokens));
    }

    #[test]
    fn lora_training_overfits_one_batch() {
        // Repeated steps on one fixed batch must cut the loss by at least
        // 20%; uses the real candidate trainer with epochs as steps.
        let w = build_world();
        let subset: Vec<&LoadedSample> = w.train.iter().take(2).collect();
        let profile = w.library.load("Accent", "a").unwrap();
        let target: Vec<Vec<usize>> = subset
            .iter()
            .map(|s| w.vocab.tokenize(&s.transcript).unwrap())
            .collect();
        let before: f64 = subset
            .iter()
            .zip(&target)
            .map(|(s, t)| w.model.forward_loss(None, &s.features, t).unwrap().0)
            .sum::<f64>()
            / subset.len() as f64;
        let (trained, steps) = train_candidate(
            &w.model, profile, &subset, &w.vocab, 5e-2, 100, 2, 42,
        )
        .unwrap();
        assert_eq!(steps, 100);
        let adapter =
            merge_profiles_with_mode(&[trained], Some(&[1.0]), WeightMode::Both).unwrap();
        let after: f64 = subset
            .iter()
            .zip(&target)
            .map(|(s, t)| {
                w.model
                    .forward_loss(Some(&adapter), &s.features, t)
                    .unwrap()
                    .0
            })
            .sum::<f64>()
            / subset.len() as f64;
        assert!(
            after <= before * 0.8,
            "loss went {before} -> {after}; expected at least a 20% drop"
        );
    }

    #[test]
    fn add_value_trains_only_new_data_in_one_version_bump() {
        let mut w = build_world();
        train_profiles(&mut w.library, &w.model, &w.train, &w.val, &w.vocab, &spec(), 42)
            .unwrap();
        let version_before = w.library.version();
        let files_before: BTreeMap<String, Vec<u8>> = w
            .library
            .manifest()
            .profiles
            .iter()
            .map(|e| {
                (
                    e.path.clone(),
                    std::fs::read(w.library.root().join(&e.path)).unwrap(),
                )
            })
            .collect();

        // New-value data: relabel a few training samples as accent "c".
        let new_data: Vec<LoadedSample> = w
            .train
            .iter()
            .take(4)
            .map(|s| {
                let mut labels = s.labels.clone();
                labels.insert("Accent".to_string(), "c".to_string());
                LoadedSample {
                    features: s.features.clone(),
                    transcript: s.transcript.clone(),
                    labels,
                }
            })
            .collect();
        let s = spec();
        let report = add_value(
            &mut w.library,
            &w.model,
            "Accent",
            "c",
            Some(&new_data),
            &w.vocab,
            &s,
            42,
        )
        .unwrap();
        assert_eq!(w.library.version(), version_before + 1);
        let expected_steps =
            s.lr_grid.len() as u64 * s.epochs as u64 * new_data.len().div_ceil(s.batch) as u64;
        assert_eq!(report.steps, expected_steps);
        for (rel, bytes) in &files_before {
            assert_eq!(
                &std::fs::read(w.library.root().join(rel)).unwrap(),
                bytes,
                "{rel} changed"
            );
        }
        assert!(w.library.taxonomy().has_value("Accent", "c"));
    }
}
