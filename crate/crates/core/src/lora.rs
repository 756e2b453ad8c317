//! Low-rank adapter profiles and concatenation merging.
//!
//! A [`LoraProfile`] holds one factor pair (A, B) per injection point of the
//! base model; `B` starts at zero so an untrained profile is a no-op. K
//! profiles combine into a [`MergedAdapter`] by concatenating weighted `B`
//! factors column-wise and weighted `A` factors row-wise, which makes the
//! merged delta the sum of the individually weighted per-profile deltas.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;


use crate::error::{PiwError, Result};
use crate::numerics::Matrix;
use crate::rng::stream_rng;

const PROFILE_MAGIC: &[u8; 8] = b"PIWLORA1";
const PROFILE_VERSION: u16 = 1;

/// A named linear projection inside the model where adapter deltas apply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InjectionPoint {
    pub id: String,
    pub out_dim: usize,
    pub in_dim: usize,
}

/// One low-rank factor pair: `a` is rank x in_dim, `b` is out_dim x rank.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    pub a: Matrix,
    pub b: Matrix,
}

/// A trained (or blank) adapter for one characteristic value.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraProfile {
    pub group: String,
    pub value: String,
    pub rank: usize,
    pub alpha: f64,
    pub layers: BTreeMap<String, LoraLayer>,
    pub trained_steps: u64,
}

impl LoraProfile {
    /// Effective output scale folded into `B` when building deltas. With the
    /// default `alpha == rank` this is exactly 1.
    pub fn delta_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.group, self.value)
    }

    /// Trainable scalar count across all layers.
    pub fn param_count(&self) -> usize {
        self.layers.values().map(|l| l.a.len() + l.b.len()).sum()
    }
}

/// How merge weights are applied to the factors.
///
/// `Both` scales A and B by `w_k` (so each profile's delta carries an
/// effective factor of `w_k^2`); `Single` scales only B (effective `w_k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightMode {
    #[default]
    Both,
    Single,
}

impl WeightMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(WeightMode::Both),
            "single" => Ok(WeightMode::Single),
            other => Err(PiwError::config(
                "weight-mode",
                format!("expected `both` or `single`, got `{other}`"),
            )),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            WeightMode::Both => "both",
            WeightMode::Single => "single",
        }
    }
}

/// Concatenated factors for one layer: `a_hat` is (sum of ranks) x in_dim,
/// `b_hat` is out_dim x (sum of ranks).
#[derive(Debug, Clone, PartialEq)]
pub struct MergedLayer {
    pub a_hat: Matrix,
    pub b_hat: Matrix,
}

/// K profiles fused into a single adapter.
#[derive(Debug, Clone)]
pub struct MergedAdapter {
    pub profiles: Vec<LoraProfile>,
    pub weights: Vec<f64>,
    pub mode: WeightMode,
    pub layers: BTreeMap<String, MergedLayer>,
}

impl MergedAdapter {
    pub fn layer(&self, layer_id: &str) -> Option<&MergedLayer> {
        self.layers.get(layer_id)
    }

    pub fn describe(&self) -> String {
        self.profiles
            .iter()
            .map(LoraProfile::label)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Fresh profile over the given injection points: A entries Gaussian with
/// std 0.01, B exactly zero, alpha defaulting to the rank.
pub fn init_profile(
    group: &str,
    value: &str,
    rank: usize,
    injection_points: &[InjectionPoint],
    seed: u64,
) -> Result<LoraProfile> {
    if rank < 1 {
        return Err(PiwError::config("rank", "must be at least 1"));
    }
    if injection_points.is_empty() {
        return Err(PiwError::input("init_profile: no injection points"));
    }
    let mut rng = stream_rng(seed, &format!("lora-init/{group}/{value}"));
    let mut layers = BTreeMap::new();
    for point in injection_points {
        let a = Matrix::gaussian(rank, point.in_dim, 0.01, &mut rng);
        let b = Matrix::zeros(point.out_dim, rank);
        layers.insert(point.id.clone(), LoraLayer { a, b });
    }
    Ok(LoraProfile {
        group: group.to_string(),
        value: value.to_string(),
        rank,
        alpha: rank as f64,
        layers,
        trained_steps: 0,
    })
}

/// Merge with the default weight handling (weights applied to both factors,
/// as the concatenation construction defines).
pub fn merge_profiles(profiles: &[LoraProfile], weights: Option<&[f64]>) -> Result<MergedAdapter> {
    merge_profiles_with_mode(profiles, weights, WeightMode::Both)
}

/// Merge K profiles. `weights` defaults to 1/K for every profile.
pub fn merge_profiles_with_mode(
    profiles: &[LoraProfile],
    weights: Option<&[f64]>,
    mode: WeightMode,
) -> Result<MergedAdapter> {
    if profiles.is_empty() {
        return Err(PiwError::input("merge_profiles: no profiles"));
    }
    let k = profiles.len();
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != k {
                return Err(PiwError::config(
                    "weights",
                    format!("expected {k} weights, got {}", w.len()),
                ));
            }
            w.to_vec()
        }
        None => vec![1.0 / k as f64; k],
    };

    // All profiles must cover the same layer set.
    let reference: Vec<&String> = profiles[0].layers.keys().collect();
    for p in &profiles[1..] {
        if p.layers.len() != reference.len()
            || !reference.iter().all(|id| p.layers.contains_key(*id))
        {
            let lhs: std::collections::BTreeSet<_> = profiles[0].layers.keys().collect();
            let rhs: std::collections::BTreeSet<_> = p.layers.keys().collect();
            let diff: Vec<String> = lhs
                .symmetric_difference(&rhs)
                .map(|s| s.to_string())
                .collect();
            return Err(PiwError::Merge {
                message: format!(
                    "profiles {} and {} cover different layers: {}",
                    profiles[0].label(),
                    p.label(),
                    diff.join(", ")
                ),
            });
        }
    }

    let mut layers = BTreeMap::new();
    for layer_id in reference {
        let out_dim = profiles[0].layers[layer_id].b.rows();
        let in_dim = profiles[0].layers[layer_id].a.cols();
        let total_rank: usize = profiles.iter().map(|p| p.rank).sum();

        let mut a_hat = Matrix::zeros(total_rank, in_dim);
        let mut b_hat = Matrix::zeros(out_dim, total_rank);
        let mut rank_offset = 0;
        for (p, &w) in profiles.iter().zip(&weights) {
            let layer = &p.layers[layer_id];
            if layer.b.rows() != out_dim || layer.a.cols() != in_dim {
                return Err(PiwError::shape(
                    format!("merge_profiles layer `{layer_id}`"),
                    (out_dim, in_dim),
                    (layer.b.rows(), layer.a.cols()),
                ));
            }
            let a_factor = match mode {
                WeightMode::Both => w,
                WeightMode::Single => 1.0,
            };
            let b_factor = w * p.delta_scale();
            for r in 0..p.rank {
                for c in 0..in_dim {
                    a_hat.set(rank_offset + r, c, a_factor * layer.a.get(r, c));
                }
            }
            for r in 0..out_dim {
                for c in 0..p.rank {
                    b_hat.set(r, rank_offset + c, b_factor * layer.b.get(r, c));
                }
            }
            rank_offset += p.rank;
        }
        layers.insert(layer_id.clone(), MergedLayer { a_hat, b_hat });
    }

    Ok(MergedAdapter {
        profiles: profiles.to_vec(),
        weights,
        mode,
        layers,
    })
}

/// The additive delta `B_hat * (A_hat * x)` at one injection point.
pub fn merged_delta(adapter: &MergedAdapter, layer_id: &str, x: &[f64]) -> Result<Vec<f64>> {
    let layer = adapter.layer(layer_id).ok_or_else(|| {
        PiwError::lookup(format!("merged_delta: unknown layer `{layer_id}`"))
    })?;
    let hidden = layer.a_hat.matvec(x)?;
    layer.b_hat.matvec(&hidden)
}

fn write_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(PiwError::input(format!("string too long: {} bytes", bytes.len())));
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct PayloadReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(PiwError::corrupt("profile payload truncated"));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_str(&mut self) -> Result<String> {
        let len = self.read_u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| PiwError::corrupt("profile string is not UTF-8"))
    }

    fn read_f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let bytes = self.take(rows * cols * 4)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Matrix::new(rows, cols, data)
    }
}

/// Serialize a profile. Factors are stored as f32; the payload after the
/// magic and version is protected by a trailing CRC32.
pub fn save_profile(profile: &LoraProfile, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    write_str(&mut payload, &profile.group)?;
    write_str(&mut payload, &profile.value)?;
    payload.extend_from_slice(&(profile.rank as u32).to_le_bytes());
    payload.extend_from_slice(&(profile.alpha as f32).to_le_bytes());
    payload.extend_from_slice(&(profile.layers.len() as u32).to_le_bytes());
    for (layer_id, layer) in &profile.layers {
        write_str(&mut payload, layer_id)?;
        payload.extend_from_slice(&(layer.b.rows() as u32).to_le_bytes());
        payload.extend_from_slice(&(layer.a.cols() as u32).to_le_bytes());
        for &v in layer.a.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in layer.b.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(PROFILE_MAGIC)?;
    out.write_all(&PROFILE_VERSION.to_le_bytes())?;
    out.write_all(&payload)?;
    out.write_all(&crc.to_le_bytes())?;
    Ok(())
}

/// Load and validate a profile file. Note `trained_steps` is library
/// metadata, not part of the file; it loads as zero.
pub fn load_profile(path: &Path) -> Result<LoraProfile> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < PROFILE_MAGIC.len() + 2 + 4 {
        return Err(PiwError::corrupt(format!(
            "{}: file too short",
            path.display()
        )));
    }
    if &bytes[..8] != PROFILE_MAGIC {
        return Err(PiwError::format(format!(
            "{}: bad magic (expected PIWLORA1)",
            path.display()
        )));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != PROFILE_VERSION {
        return Err(PiwError::format(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let payload = &bytes[10..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored_crc {
        return Err(PiwError::corrupt(format!(
            "{}: CRC mismatch",
            path.display()
        )));
    }

    let mut r = PayloadReader { data: payload, pos: 0 };
    let group = r.read_str()?;
    let value = r.read_str()?;
    let rank = r.read_u32()? as usize;
    if rank < 1 {
        return Err(PiwError::format(format!(
            "{}: rank field is zero",
            path.display()
        )));
    }
    let alpha = r.read_f32()? as f64;
    let layer_count = r.read_u32()? as usize;
    let mut layers = BTreeMap::new();
    for _ in 0..layer_count {
        let layer_id = r.read_str()?;
        let out_dim = r.read_u32()? as usize;
        let in_dim = r.read_u32()? as usize;
        if out_dim == 0 || in_dim == 0 {
            return Err(PiwError::corrupt(format!(
                "{}: layer `{layer_id}` has a zero dimension",
                path.display()
            )));
        }
        let a = r.read_f32_matrix(rank, in_dim)?;
        let b = r.read_f32_matrix(out_dim, rank)?;
        if layers.insert(layer_id.clone(), LoraLayer { a, b }).is_some() {
            return Err(PiwError::corrupt(format!(
                "{}: duplicate layer `{layer_id}`",
                path.display()
            )));
        }
    }
    if r.pos != payload.len() {
        return Err(PiwError::corrupt(format!(
            "{}: {} trailing bytes",
            path.display(),
            payload.len() - r.pos
        )));
    }
    Ok(LoraProfile {
        group,
        value,
        rank,
        alpha,
        layers,
        trained_steps: 0,
    })
}
