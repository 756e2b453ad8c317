//! Evaluation: word error rate, group fairness, and latency benchmarks.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::asr::ToyAsrModel;
use crate::classifier::CharacteristicClassifier;
use crate::error::{PiwError, Result};
use crate::features::FeatureMatrix;
use crate::library::ProfileLibrary;
use crate::lora::{merge_profiles_with_mode, LoraProfile, WeightMode};
use crate::pipeline::AdapterBuilder;
use crate::synth::Manifest;

/// Word-level edit distance decomposition. `wer` can exceed 1 when the
/// hypothesis is much longer than the reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Word error rate via dynamic-programming edit distance with unit costs.
/// Ties in the traceback prefer substitution, then deletion, then insertion.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let ref_words = tokenize(reference);
    let hyp_words = tokenize(hypothesis);
    if ref_words.is_empty() {
        return Err(PiwError::input("wer: empty reference"));
    }
    let (n, m) = (ref_words.len(), hyp_words.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(ref_words[i - 1] != hyp_words[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + cost)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }

    let (mut i, mut j) = (n, m);
    let (mut subs, mut dels, mut ins) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = usize::from(ref_words[i - 1] != hyp_words[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + cost {
                if cost == 1 {
                    subs += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            dels += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(WerBreakdown {
        substitutions: subs,
        deletions: dels,
        insertions: ins,
        ref_words: n,
        wer: (subs + dels + ins) as f64 / n as f64,
    })
}

/// Statistical parity difference and disparate impact ratio over per-value
/// WERs: max pairwise gap and worst/best ratio. A zero best WER with a
/// nonzero worst yields an infinite DIR; all-zero WERs yield DIR 1.
pub fn fairness_metrics(wers: &BTreeMap<String, f64>) -> Result<(f64, f64)> {
    if wers.len() < 2 {
        return Err(PiwError::input(format!(
            "fairness_metrics: need at least 2 values, got {}",
            wers.len()
        )));
    }
    let max = wers.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = wers.values().cloned().fold(f64::INFINITY, f64::min);
    let spd = max - min;
    let dir = if min > 0.0 {
        max / min
    } else if max > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    Ok((spd, dir))
}

/// Which adapter the evaluation applies at inference time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AdapterSelection {
    /// No adapter: the frozen base model.
    Base,
    /// The single whole-dataset baseline profile.
    OneForAll,
    /// Only the named characteristic groups.
    Groups(Vec<String>),
    /// Every taxonomy group.
    AllGroups,
}

impl AdapterSelection {
    pub fn describe(&self) -> String {
        match self {
            AdapterSelection::Base => "base".to_string(),
            AdapterSelection::OneForAll => "one-for-all".to_string(),
            AdapterSelection::Groups(gs) => gs.join("+"),
            AdapterSelection::AllGroups => "all".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Known,
    Inferred,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueWer {
    pub value: String,
    pub wer: f64,
    pub n_words: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupFairness {
    pub group: String,
    pub values: Vec<ValueWer>,
    pub spd: f64,
    /// Serialized as null when infinite.
    pub dir: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub overall_wer: f64,
    pub groups: Vec<GroupFairness>,
    pub mode: EvalMode,
    pub adapter: String,
    pub n_samples: usize,
}

/// Transcribe every manifest sample and aggregate micro-averaged WER
/// overall and per ground-truth characteristic value, with SPD/DIR per
/// group.
///
/// In `Inferred` mode assignments come from the classifier; grouping for
/// the fairness report always follows the samples' true labels.
pub fn evaluate(
    model: &ToyAsrModel,
    library: &ProfileLibrary,
    classifier: Option<&CharacteristicClassifier>,
    manifest: &Manifest,
    manifest_path: &Path,
    mode: EvalMode,
    selection: &AdapterSelection,
    merge_mode: WeightMode,
) -> Result<EvalReport> {
    if mode == EvalMode::Inferred && classifier.is_none() {
        return Err(PiwError::input(
            "evaluate: inferred mode requires a classifier",
        ));
    }
    let samples = manifest.load_samples(manifest_path)?;
    if samples.is_empty() {
        return Err(PiwError::input("evaluate: empty manifest"));
    }
    let vocab = manifest.vocabulary()?;
    let builder = AdapterBuilder::from_library(library, merge_mode)?;

    let mut total_errors = 0usize;
    let mut total_words = 0usize;
    // group -> value -> (errors, words)
    let mut per_value: BTreeMap<String, BTreeMap<String, (usize, usize)>> = BTreeMap::new();

    for sample in &samples {
        let assignment = match mode {
            EvalMode::Known => sample.labels.clone(),
            EvalMode::Inferred => {
                let clf = classifier.expect("checked above");
                let slice = crate::features::slice_for_classifier(
                    &sample.features,
                    clf.config().input_frames,
                )?;
                clf.classify(&slice)?.assignment()
            }
        };
        let filtered: BTreeMap<String, String> = match selection {
            AdapterSelection::Base | AdapterSelection::OneForAll => BTreeMap::new(),
            AdapterSelection::Groups(gs) => assignment
                .iter()
                .filter(|(g, _)| gs.contains(g))
                .map(|(g, v)| (g.clone(), v.clone()))
                .collect(),
            AdapterSelection::AllGroups => assignment,
        };
        let adapter = match selection {
            AdapterSelection::Base => None,
            AdapterSelection::OneForAll => Some(builder.baseline()?),
            _ => builder.adapter_for(&filtered)?,
        };
        let decoded = model.greedy_decode(adapter.as_deref(), &sample.features)?;
        let text = vocab.detokenize(&decoded.tokens);
        let breakdown = wer(&sample.transcript, &text)?;
        let errors = breakdown.substitutions + breakdown.deletions + breakdown.insertions;
        total_errors += errors;
        total_words += breakdown.ref_words;
        for (group, value) in &sample.labels {
            let slot = per_value
                .entry(group.clone())
                .or_default()
                .entry(value.clone())
                .or_insert((0, 0));
            slot.0 += errors;
            slot.1 += breakdown.ref_words;
        }
    }

    let mut groups = Vec::new();
    for (group, values) in &per_value {
        if values.len() < 2 {
            continue;
        }
        let wers: BTreeMap<String, f64> = values
            .iter()
            .map(|(v, (e, w))| (v.clone(), *e as f64 / (*w).max(1) as f64))
            .collect();
        let (spd, dir) = fairness_metrics(&wers)?;
        groups.push(GroupFairness {
            group: group.clone(),
            values: values
                .iter()
                .map(|(v, (e, w))| ValueWer {
                    value: v.clone(),
                    wer: *e as f64 / (*w).max(1) as f64,
                    n_words: *w,
                })
                .collect(),
            spd,
            dir,
        });
    }

    Ok(EvalReport {
        overall_wer: total_errors as f64 / total_words.max(1) as f64,
        groups,
        mode,
        adapter: selection.describe(),
        n_samples: samples.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyEntry {
    pub k: usize,
    pub mean_secs: f64,
    pub std_secs: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub entries: Vec<LatencyEntry>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Time merge-plus-decode for growing profile counts on a fixed input and
/// fit a least-squares line over the K >= 1 means. K = 0 measures the bare
/// base model.
pub fn bench_latency(
    model: &ToyAsrModel,
    profiles: &[LoraProfile],
    k_values: &[usize],
    iterations: usize,
    feats: &FeatureMatrix,
    merge_mode: WeightMode,
) -> Result<LatencyReport> {
    if iterations < 5 {
        return Err(PiwError::input("bench_latency: need at least 5 iterations"));
    }
    if k_values.iter().any(|&k| k > profiles.len()) {
        return Err(PiwError::input(format!(
            "bench_latency: requested K exceeds the {} available profiles",
            profiles.len()
        )));
    }
    let mut entries = Vec::new();
    for &k in k_values {
        let run = || -> Result<()> {
            // The measured unit of work: merge the K profiles, then decode.
            let adapter = if k == 0 {
                None
            } else {
                Some(merge_profiles_with_mode(&profiles[..k], None, merge_mode)?)
            };
            model.greedy_decode(adapter.as_ref(), feats)?;
            Ok(())
        };
        run()?; // warmup
        let mut times = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let start = Instant::now();
            run()?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / times.len() as f64;
        entries.push(LatencyEntry {
            k,
            mean_secs: mean,
            std_secs: var.sqrt(),
            iterations,
        });
    }

    let fit_points: Vec<(f64, f64)> = entries
        .iter()
        .filter(|e| e.k >= 1)
        .map(|e| (e.k as f64, e.mean_secs))
        .collect();
    if fit_points.len() < 2 {
        return Err(PiwError::input(
            "bench_latency: need at least two K >= 1 points for the fit",
        ));
    }
    let n = fit_points.len() as f64;
    let sx: f64 = fit_points.iter().map(|(x, _)| x).sum();
    let sy: f64 = fit_points.iter().map(|(_, y)| y).sum();
    let sxx: f64 = fit_points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = fit_points.iter().map(|(x, y)| x * y).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = fit_points.iter().map(|(_, y)| (y - mean_y) * (y - mean_y)).sum();
    let ss_res: f64 = fit_points
        .iter()
        .map(|(x, y)| {
            let pred = slope * x + intercept;
            (y - pred) * (y - pred)
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

    Ok(LatencyReport {
        entries,
        slope,
        intercept,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_strings_have_zero_wer() {
        let b = wer("the cat sat", "the cat sat").unwrap();
        assert_eq!(b.wer, 0.0);
        assert_eq!((b.substitutions, b.deletions, b.insertions), (0, 0, 0));
    }

    #[test]
    fn dropped_word_is_one_deletion() {
        let b = wer("the cat sat", "the cat").unwrap();
        assert_eq!(b.deletions, 1);
        assert_eq!((b.substitutions, b.insertions), (0, 0));
        assert!((b.wer - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let b = wer("a b c d", "").unwrap();
        assert_eq!(b.deletions, 4);
        assert_eq!(b.wer, 1.0);
    }

    #[test]
    fn empty_reference_is_an_error() {
        assert!(wer("", "something").is_err());
        assert!(wer("   ", "x").is_err());
    }

    #[test]
    fn case_is_normalized() {
        assert_eq!(wer("The CAT", "the cat").unwrap().wer, 0.0);
    }

    #[test]
    fn wer_can_exceed_one() {
        let b = wer("hi", "a b c d e").unwrap();
        assert!(b.wer > 1.0);
    }

    /// Exhaustive recursion over edit scripts; deliberately not the DP.
    fn brute_force_distance(r: &[&str], h: &[&str]) -> usize {
        if r.is_empty() {
            return h.len();
        }
        if h.is_empty() {
            return r.len();
        }
        let sub = brute_force_distance(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
        let del = brute_force_distance(&r[1..], h) + 1;
        let ins = brute_force_distance(r, &h[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn dp_matches_brute_force_on_short_pairs() {
        let vocab = ["ash", "oak", "elm"];
        let mut sequences: Vec<Vec<&str>> = vec![vec![]];
        for len in 1..=3usize {
            let mut level = Vec::new();
            for seq in sequences.iter().filter(|s| s.len() == len - 1) {
                for w in &vocab {
                    let mut s = seq.clone();
                    s.push(w);
                    level.push(s);
                }
            }
            sequences.extend(level);
        }
        for r in sequences.iter().filter(|s| !s.is_empty()) {
            for h in &sequences {
                let expected = brute_force_distance(r, h);
                let b = wer(&r.join(" "), &h.join(" ")).unwrap();
                assert_eq!(
                    b.substitutions + b.deletions + b.insertions,
                    expected,
                    "ref={r:?} hyp={h:?}"
                );
            }
        }
    }

    #[test]
    fn distance_is_symmetric_wer_is_not() {
        let ab = wer("a b c", "a b").unwrap();
        let ba = wer("a b", "a b c").unwrap();
        let d_ab = ab.substitutions + ab.deletions + ab.insertions;
        let d_ba = ba.substitutions + ba.deletions + ba.insertions;
        assert_eq!(d_ab, d_ba);
        assert!((ab.wer - 1.0 / 3.0).abs() < 1e-12);
        assert!((ba.wer - 1.0 / 2.0).abs() < 1e-12);
    }

    fn wers(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn fairness_arithmetic() {
        let (spd, dir) =
            fairness_metrics(&wers(&[("a", 0.10), ("b", 0.25), ("c", 0.15)])).unwrap();
        assert!((spd - 0.15).abs() < 1e-12);
        assert!((dir - 2.5).abs() < 1e-12);
    }

    #[test]
    fn equal_wers_are_perfectly_fair() {
        let (spd, dir) = fairness_metrics(&wers(&[("a", 0.2), ("b", 0.2)])).unwrap();
        assert_eq!(spd, 0.0);
        assert_eq!(dir, 1.0);
    }

    #[test]
    fn zero_best_wer_gives_infinite_dir() {
        let (spd, dir) = fairness_metrics(&wers(&[("a", 0.0), ("b", 0.2)])).unwrap();
        assert!((spd - 0.2).abs() < 1e-12);
        assert!(dir.is_infinite());
    }

    #[test]
    fn all_zero_wers_give_unit_dir() {
        let (spd, dir) = fairness_metrics(&wers(&[("a", 0.0), ("b", 0.0)])).unwrap();
        assert_eq!(spd, 0.0);
        assert_eq!(dir, 1.0);
    }

    #[test]
    fn single_value_rejected() {
        assert!(fairness_metrics(&wers(&[("a", 0.1)])).is_err());
    }

    #[test]
    fn spd_shift_and_scale_behavior() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(3, "fairness-props");
        for _ in 0..20 {
            let base: BTreeMap<String, f64> = (0..rng.gen_range(2..6))
                .map(|i| (format!("v{i}"), rng.gen_range(0.01..1.0)))
                .collect();
            let (spd0, dir0) = fairness_metrics(&base).unwrap();
            let c = rng.gen_range(0.1..2.0);
            let shifted: BTreeMap<String, f64> =
                base.iter().map(|(k, v)| (k.clone(), v + c)).collect();
            let (spd_s, _) = fairness_metrics(&shifted).unwrap();
            assert!((spd_s - spd0).abs() < 1e-12);
            let scaled: BTreeMap<String, f64> =
                base.iter().map(|(k, v)| (k.clone(), v * c)).collect();
            let (spd_m, dir_m) = fairness_metrics(&scaled).unwrap();
            assert!((spd_m - spd0 * c).abs() < 1e-12);
            assert!((dir_m - dir0).abs() < 1e-9);
        }
    }
}
