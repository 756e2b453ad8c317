//! Versioned on-disk libraries of LoRA profiles.
//!
//! A library is a directory: one profile file per (group, value) plus a
//! JSON manifest carrying the taxonomy, a monotone version counter, and a
//! CRC per profile file. Growth is strictly incremental: adding a value
//! writes exactly one new profile file and leaves every existing file
//! byte-identical. Manifest updates go through a temp-file-plus-rename so
//! readers always see a consistent snapshot.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::asr::ModelConfig;
use crate::error::{PiwError, Result};
use crate::lora::{init_profile, load_profile, save_profile, LoraProfile};
use crate::taxonomy::{CharacteristicTaxonomy, BASELINE_GROUP};

const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub group: String,
    pub value: String,
    pub path: String,
    pub crc32: u32,
    pub trained_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub version: u64,
    pub model_config_hash: String,
    pub taxonomy: CharacteristicTaxonomy,
    pub profiles: Vec<ProfileEntry>,
}

#[derive(Debug, Clone)]
pub struct ProfileLibrary {
    root: PathBuf,
    manifest: LibraryManifest,
}

/// Whether inference knows the speaker's characteristics up front or must
/// infer them with the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverheadMode {
    Known,
    Inferred,
}

impl OverheadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "known" => Ok(OverheadMode::Known),
            "inferred" => Ok(OverheadMode::Inferred),
            other => Err(PiwError::config(
                "mode",
                format!("expected `known` or `inferred`, got `{other}`"),
            )),
        }
    }
}

/// Worst-case parameter overhead of the runtime next to its base model:
/// classifier encoder + one head per group (Inferred only) + one profile
/// per characteristic value.
#[derive(Debug, Clone, Serialize)]
pub struct OverheadReport {
    pub p_enc: u64,
    pub p_h: u64,
    pub p_pro: u64,
    pub k: usize,
    pub total_profiles: usize,
    pub p_total: u64,
    pub base_params: u64,
    pub overhead_ratio: f64,
    pub mode: OverheadMode,
}

pub fn compute_overhead(
    p_enc: u64,
    p_h: u64,
    p_pro: u64,
    taxonomy: &CharacteristicTaxonomy,
    base_params: u64,
    mode: OverheadMode,
) -> Result<OverheadReport> {
    if base_params == 0 {
        return Err(PiwError::config("base_params", "must be positive"));
    }
    let k = taxonomy.group_count();
    let total_profiles = taxonomy.total_values();
    let classifier_part = match mode {
        OverheadMode::Inferred => p_enc + p_h * k as u64,
        OverheadMode::Known => 0,
    };
    let p_total = classifier_part + p_pro * total_profiles as u64;
    Ok(OverheadReport {
        p_enc,
        p_h,
        p_pro,
        k,
        total_profiles,
        p_total,
        base_params,
        overhead_ratio: p_total as f64 / base_params as f64,
        mode,
    })
}

fn profile_file_name(group: &str, value: &str) -> String {
    format!("profiles/{group}__{value}.lora")
}

fn crc_of_file(path: &Path) -> Result<u32> {
    Ok(crc32fast::hash(&fs::read(path)?))
}

impl ProfileLibrary {
    /// Create a library at `root` with an untrained profile per (group,
    /// value). The library starts at version 1.
    pub fn init(
        taxonomy: CharacteristicTaxonomy,
        model_config: &ModelConfig,
        rank: usize,
        seed: u64,
        root: &Path,
    ) -> Result<Self> {
        taxonomy.validate()?;
        model_config.validate()?;
        if root.join(MANIFEST_NAME).exists() {
            return Err(PiwError::conflict(format!(
                "library already exists at {}",
                root.display()
            )));
        }
        fs::create_dir_all(root.join("profiles"))?;
        let points = model_config.injection_points();
        let mut profiles = Vec::new();
        for (group, value) in taxonomy.pairs() {
            let profile = init_profile(group, value, rank, &points, seed)?;
            let rel = profile_file_name(group, value);
            let path = root.join(&rel);
            save_profile(&profile, &path)?;
            profiles.push(ProfileEntry {
                group: group.to_string(),
                value: value.to_string(),
                path: rel,
                crc32: crc_of_file(&path)?,
                trained_steps: 0,
            });
        }
        let manifest = LibraryManifest {
            version: 1,
            model_config_hash: crate::asr::config_hash(model_config),
            taxonomy,
            profiles,
        };
        let lib = Self {
            root: root.to_path_buf(),
            manifest,
        };
        lib.write_manifest()?;
        Ok(lib)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_NAME))?;
        let manifest: LibraryManifest = serde_json::from_str(&text)
            .map_err(|e| PiwError::format(format!("{}: {e}", root.display())))?;
        manifest.taxonomy.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn write_manifest(&self) -> Result<()> {
        let tmp = self.root.join(format!("{MANIFEST_NAME}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)?;
        fs::rename(&tmp, self.root.join(MANIFEST_NAME))?;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn version(&self) -> u64 {
        self.manifest.version
    }

    pub fn taxonomy(&self) -> &CharacteristicTaxonomy {
        &self.manifest.taxonomy
    }

    pub fn model_config_hash(&self) -> &str {
        &self.manifest.model_config_hash
    }

    pub fn manifest(&self) -> &LibraryManifest {
        &self.manifest
    }

    pub fn entry(&self, group: &str, value: &str) -> Option<&ProfileEntry> {
        self.manifest
            .profiles
            .iter()
            .find(|e| e.group == group && e.value == value)
    }

    /// Verify the model hash before applying profiles from this library.
    pub fn check_model(&self, model_hash: &str) -> Result<()> {
        if self.manifest.model_config_hash != model_hash {
            return Err(PiwError::Conflict {
                message: format!(
                    "library is bound to model {} but got {}",
                    &self.manifest.model_config_hash[..12.min(self.manifest.model_config_hash.len())],
                    &model_hash[..12.min(model_hash.len())]
                ),
            });
        }
        Ok(())
    }

    /// Load one profile, verifying its checksum against the manifest.
    pub fn load(&self, group: &str, value: &str) -> Result<LoraProfile> {
        let entry = self.entry(group, value).ok_or_else(|| {
            PiwError::lookup(format!("no profile for `{group}={value}` in library"))
        })?;
        let path = self.root.join(&entry.path);
        let actual = crc_of_file(&path)?;
        if actual != entry.crc32 {
            return Err(PiwError::corrupt(format!(
                "{}: checksum {actual:08x} does not match manifest {:08x}",
                path.display(),
                entry.crc32
            )));
        }
        let mut profile = load_profile(&path)?;
        profile.trained_steps = entry.trained_steps;
        Ok(profile)
    }

    /// Profiles for an assignment, ordered by taxonomy group order.
    /// Unassigned groups are skipped; unknown values are an error naming
    /// both group and value.
    pub fn select_profiles(
        &self,
        assignment: &BTreeMap<String, String>,
    ) -> Result<Vec<LoraProfile>> {
        for (group, value) in assignment {
            if self.manifest.taxonomy.group(group).is_none() {
                return Err(PiwError::lookup(format!(
                    "unknown characteristic group `{group}`"
                )));
            }
            if !self.manifest.taxonomy.has_value(group, value) {
                return Err(PiwError::lookup(format!(
                    "unknown value `{value}` in group `{group}`"
                )));
            }
        }
        let mut out = Vec::new();
        for g in &self.manifest.taxonomy.groups {
            if let Some(value) = assignment.get(&g.group) {
                out.push(self.load(&g.group, value)?);
            }
        }
        Ok(out)
    }

    /// Insert a finished profile (blank or trained elsewhere). Exactly one
    /// new file appears, existing files are untouched, and the version
    /// advances by one. Absent groups are created, mirroring taxonomy
    /// growth.
    pub fn insert_profile(&mut self, profile: &LoraProfile) -> Result<()> {
        if profile.group != BASELINE_GROUP {
            if let Some(g) = self.manifest.taxonomy.group(&profile.group) {
                if g.values.iter().any(|v| v == &profile.value) {
                    return Err(PiwError::conflict(format!(
                        "value `{}` already exists in group `{}`",
                        profile.value, profile.group
                    )));
                }
            }
        } else if self.entry(BASELINE_GROUP, &profile.value).is_some() {
            return Err(PiwError::conflict(format!(
                "baseline profile `{}` already exists",
                profile.value
            )));
        }

        let rel = profile_file_name(&profile.group, &profile.value);
        let path = self.root.join(&rel);
        save_profile(profile, &path)?;
        let crc = crc_of_file(&path)?;

        let mut manifest = self.manifest.clone();
        if profile.group != BASELINE_GROUP {
            match manifest.taxonomy.groups.iter_mut().find(|g| g.group == profile.group) {
                Some(g) => g.values.push(profile.value.clone()),
                None => manifest.taxonomy.groups.push(crate::taxonomy::TaxonomyGroup {
                    group: profile.group.clone(),
                    values: vec![profile.value.clone()],
                }),
            }
            manifest.taxonomy.validate()?;
        }
        manifest.profiles.push(ProfileEntry {
            group: profile.group.clone(),
            value: profile.value.clone(),
            path: rel,
            crc32: crc,
            trained_steps: profile.trained_steps,
        });
        manifest.version += 1;
        self.manifest = manifest;
        self.write_manifest()
    }

    /// Add an untrained profile for a new value (creating the group when
    /// absent). Training on new data is layered on top by the pipeline.
    pub fn add_value(
        &mut self,
        group: &str,
        value: &str,
        model_config: &ModelConfig,
        rank: usize,
        seed: u64,
    ) -> Result<()> {
        if group == BASELINE_GROUP {
            return Err(PiwError::Taxonomy {
                message: format!("group id `{BASELINE_GROUP}` is reserved"),
            });
        }
        self.check_model(&crate::asr::config_hash(model_config))?;
        let profile = init_profile(group, value, rank, &model_config.injection_points(), seed)?;
        self.insert_profile(&profile)
    }

    /// Overwrite an existing profile's file with a newly trained version.
    /// Bumps the library version.
    pub fn update_profile(&mut self, profile: &LoraProfile) -> Result<()> {
        let rel = {
            let entry = self.entry(&profile.group, &profile.value).ok_or_else(|| {
                PiwError::lookup(format!(
                    "no profile for `{}={}` in library",
                    profile.group, profile.value
                ))
            })?;
            entry.path.clone()
        };
        let path = self.root.join(&rel);
        save_profile(profile, &path)?;
        let crc = crc_of_file(&path)?;
        let mut manifest = self.manifest.clone();
        let entry = manifest
            .profiles
            .iter_mut()
            .find(|e| e.group == profile.group && e.value == profile.value)
            .expect("entry exists");
        entry.crc32 = crc;
        entry.trained_steps = profile.trained_steps;
        manifest.version += 1;
        self.manifest = manifest;
        self.write_manifest()
    }

    /// The whole-dataset baseline profile, when one has been trained.
    pub fn baseline(&self) -> Result<LoraProfile> {
        self.load(BASELINE_GROUP, "all")
    }

    pub fn has_baseline(&self) -> bool {
        self.entry(BASELINE_GROUP, "all").is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn model_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            feature_bins: 4,
            vocab: 8,
            ..ModelConfig::default()
        }
    }

    fn taxonomy() -> CharacteristicTaxonomy {
        CharacteristicTaxonomy::new(vec![
            ("Gender", vec!["m", "f"]),
            ("Accent", vec!["a", "b", "c"]),
        ])
        .unwrap()
    }

    #[test]
    fn init_creates_one_file_per_value_at_version_one() {
        let dir = tempdir().unwrap();
        let lib = ProfileLibrary::init(taxonomy(), &model_config(), 2, 42, dir.path()).unwrap();
        assert_eq!(lib.version(), 1);
        let files: Vec<_> = fs::read_dir(dir.path().join("profiles")).unwrap().collect();
        assert_eq!(files.len(), 5);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn empty_taxonomy_library_is_valid() {
        let dir = tempdir().unwrap();
        let lib = ProfileLibrary::init(
            CharacteristicTaxonomy::default(),
            &model_config(),
            2,
            42,
            dir.path(),
        )
        .unwrap();
        assert_eq!(lib.version(), 1);
        assert_eq!(lib.manifest().profiles.len(), 0);
    }

    #[test]
    fn select_orders_by_taxonomy_and_skips_unassigned() {
        let dir = tempdir().unwrap();
        let lib = ProfileLibrary::init(taxonomy(), &model_config(), 2, 42, dir.path()).unwrap();
        // Assignment order (BTreeMap: Accent first) must not matter.
        let mut assignment = BTreeMap::new();
        assignment.insert("Accent".to_string(), "b".to_string());
        assignment.insert("Gender".to_string(), "f".to_string());
        let selected = lib.select_profiles(&assignment).unwrap();
        let labels: Vec<String> = selected.iter().map(|p| p.label()).collect();
        assert_eq!(labels, vec!["Gender/f", "Accent/b"]);

        let partial: BTreeMap<String, String> =
            [("Accent".to_string(), "c".to_string())].into_iter().collect();
        assert_eq!(lib.select_profiles(&partial).unwrap().len(), 1);
        assert!(lib.select_profiles(&BTreeMap::new()).unwrap().is_empty());
    }

    #[test]
    fn unknown_value_names_group_and_value() {
        let dir = tempdir().unwrap();
        let lib = ProfileLibrary::init(taxonomy(), &model_config(), 2, 42, dir.path()).unwrap();
        let assignment: BTreeMap<String, String> =
            [("Accent".to_string(), "klingon".to_string())].into_iter().collect();
        match lib.select_profiles(&assignment) {
            Err(PiwError::Lookup { message }) => {
                assert!(message.contains("Accent") && message.contains("klingon"), "{message}");
            }
            other => panic!("expected lookup error, got {other:?}"),
        }
    }

    #[test]
    fn add_value_is_incremental() {
        let dir = tempdir().unwrap();
        let cfg = model_config();
        let mut lib = ProfileLibrary::init(taxonomy(), &cfg, 2, 42, dir.path()).unwrap();
        let before: BTreeMap<String, Vec<u8>> = lib
            .manifest()
            .profiles
            .iter()
            .map(|e| (e.path.clone(), fs::read(dir.path().join(&e.path)).unwrap()))
            .collect();
        let v0 = lib.version();

        lib.add_value("Accent", "d", &cfg, 2, 42).unwrap();
        assert_eq!(lib.version(), v0 + 1);
        for (rel, bytes) in &before {
            assert_eq!(&fs::read(dir.path().join(rel)).unwrap(), bytes, "{rel} changed");
        }
        assert!(lib.taxonomy().has_value("Accent", "d"));

        // New group.
        lib.add_value("Age", "teens", &cfg, 2, 42).unwrap();
        assert_eq!(lib.taxonomy().group_count(), 3);
        assert_eq!(lib.version(), v0 + 2);
    }

    #[test]
    fn re_adding_value_conflicts_without_version_bump() {
        let dir = tempdir().unwrap();
        let cfg = model_config();
        let mut lib = ProfileLibrary::init(taxonomy(), &cfg, 2, 42, dir.path()).unwrap();
        let v0 = lib.version();
        assert!(matches!(
            lib.add_value("Accent", "a", &cfg, 2, 42),
            Err(PiwError::Conflict { .. })
        ));
        assert_eq!(lib.version(), v0);
        // On-disk manifest agrees.
        assert_eq!(ProfileLibrary::open(dir.path()).unwrap().version(), v0);
    }

    #[test]
    fn version_strictly_increases_across_random_mutations() {
        use rand::Rng;
        let dir = tempdir().unwrap();
        let cfg = model_config();
        let mut lib = ProfileLibrary::init(taxonomy(), &cfg, 2, 42, dir.path()).unwrap();
        let mut rng = crate::rng::stream_rng(5, "lib-ops");
        let mut last = lib.version();
        let mut next_value = 0;
        for _ in 0..20 {
            if rng.gen_bool(0.5) {
                let value = format!("v{next_value}");
                next_value += 1;
                lib.add_value("Accent", &value, &cfg, 2, 42).unwrap();
            } else {
                let mut p = lib.load("Gender", "m").unwrap();
                p.trained_steps += 1;
                lib.update_profile(&p).unwrap();
            }
            assert!(lib.version() > last);
            last = lib.version();
        }
    }

    #[test]
    fn checksum_mismatch_detected() {
        let dir = tempdir().unwrap();
        let lib = ProfileLibrary::init(taxonomy(), &model_config(), 2, 42, dir.path()).unwrap();
        let rel = lib.entry("Gender", "m").unwrap().path.clone();
        let path = dir.path().join(&rel);
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x01;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            lib.load("Gender", "m"),
            Err(PiwError::Corrupt { .. })
        ));
    }

    #[test]
    fn model_binding_is_enforced() {
        let dir = tempdir().unwrap();
        let cfg = model_config();
        let mut lib = ProfileLibrary::init(taxonomy(), &cfg, 2, 42, dir.path()).unwrap();
        let other = ModelConfig {
            d_model: 16,
            ..model_config()
        };
        assert!(matches!(
            lib.add_value("Accent", "x", &other, 2, 42),
            Err(PiwError::Conflict { .. })
        ));
    }

    #[test]
    fn baseline_group_is_separate_from_taxonomy() {
        let dir = tempdir().unwrap();
        let cfg = model_config();
        let mut lib = ProfileLibrary::init(taxonomy(), &cfg, 2, 42, dir.path()).unwrap();
        let baseline =
            init_profile(BASELINE_GROUP, "all", 2, &cfg.injection_points(), 42).unwrap();
        lib.insert_profile(&baseline).unwrap();
        assert!(lib.has_baseline());
        assert_eq!(lib.taxonomy().group_count(), 2); // taxonomy untouched
        let assignment: BTreeMap<String, String> =
            [(BASELINE_GROUP.to_string(), "all".to_string())].into_iter().collect();
        assert!(lib.select_profiles(&assignment).is_err());
    }

    // Overhead model: reference arithmetic from the published parameter
    // sizes (in raw parameter counts).
    const P_ENC: u64 = 1_180_000;
    const P_H: u64 = 1_160_000;
    const P_PRO: u64 = 590_000;
    const BASE: u64 = 37_700_000;

    fn l2_arctic() -> CharacteristicTaxonomy {
        CharacteristicTaxonomy::new(vec![
            ("Gender", vec!["male", "female"]),
            (
                "Accent",
                vec!["arabic", "chinese", "hindi", "korean", "spanish", "vietnamese"],
            ),
        ])
        .unwrap()
    }

    fn commonvoice() -> CharacteristicTaxonomy {
        CharacteristicTaxonomy::new(vec![
            ("Gender", vec!["male", "female"]),
            (
                "Accent",
                vec!["australian", "england", "canadian", "scottish", "us"],
            ),
            (
                "Age",
                vec![
                    "teens", "twenties", "thirties", "fourties", "fifties", "sixties",
                    "seventies", "eighties", "nineties",
                ],
            ),
        ])
        .unwrap()
    }

    #[test]
    fn overhead_inferred_matches_reference_ratios() {
        let cv = compute_overhead(P_ENC, P_H, P_PRO, &commonvoice(), BASE, OverheadMode::Inferred)
            .unwrap();
        assert_eq!(cv.k, 3);
        assert_eq!(cv.total_profiles, 16);
        assert_eq!(cv.p_total, 14_100_000);
        assert!((cv.overhead_ratio - 0.374).abs() < 0.001);

        let l2 = compute_overhead(P_ENC, P_H, P_PRO, &l2_arctic(), BASE, OverheadMode::Inferred)
            .unwrap();
        assert_eq!(l2.p_total, 8_220_000);
        assert!((l2.overhead_ratio - 0.218).abs() < 0.001);
    }

    #[test]
    fn overhead_known_mode_zeroes_the_classifier() {
        let cv = compute_overhead(P_ENC, P_H, P_PRO, &commonvoice(), BASE, OverheadMode::Known)
            .unwrap();
        assert_eq!(cv.p_total, 9_440_000);
        assert!((cv.overhead_ratio - 0.250).abs() < 0.001);

        let l2 =
            compute_overhead(P_ENC, P_H, P_PRO, &l2_arctic(), BASE, OverheadMode::Known).unwrap();
        assert_eq!(l2.p_total, 4_720_000);
        assert!((l2.overhead_ratio - 0.125).abs() < 0.001);
    }

    #[test]
    fn overhead_is_affine_in_total_profiles() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(6, "overhead");
        for _ in 0..10 {
            let n_groups = rng.gen_range(1..4);
            let groups: Vec<(String, Vec<String>)> = (0..n_groups)
                .map(|g| {
                    let values: Vec<String> =
                        (0..rng.gen_range(1..6)).map(|v| format!("v{v}")).collect();
                    (format!("g{g}"), values)
                })
                .collect();
            let tax = CharacteristicTaxonomy::new(
                groups
                    .iter()
                    .map(|(g, vs)| (g.as_str(), vs.iter().map(String::as_str).collect()))
                    .collect(),
            )
            .unwrap();
            let r = compute_overhead(P_ENC, P_H, P_PRO, &tax, BASE, OverheadMode::Inferred)
                .unwrap();
            let expected = P_ENC + P_H * tax.group_count() as u64
                + P_PRO * tax.total_values() as u64;
            assert_eq!(r.p_total, expected);
        }
    }
}
