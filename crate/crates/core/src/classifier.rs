//! Speaker-characteristic classifier.
//!
//! A shared convolutional encoder (3x3 convolutions, ReLU, 2x2 average
//! pooling per block) feeds one three-layer dense head per characteristic
//! group. The input slice is standardized to zero mean and unit variance
//! before the stack. Heads are independent: adding a group later leaves the
//! encoder and every existing head untouched.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{PiwError, Result};
use crate::features::FeatureMatrix;
use crate::numerics::{gradients, sgd_step, Matrix, ParamSet, ParamVars, Tape, Var};
use crate::rng::stream_rng;

const CLASSIFIER_MAGIC: &[u8; 8] = b"PIWCLSF1";
const CLASSIFIER_VERSION: u16 = 1;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Blocks of [conv3x3, conv3x3, pool2x2].
    pub conv_blocks: usize,
    /// Output channels per block; length must equal `conv_blocks`.
    pub channels: Vec<usize>,
    /// Widths of the two hidden dense layers in each head.
    pub head_hidden: (usize, usize),
    pub input_bins: usize,
    pub input_frames: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            conv_blocks: 2,
            channels: vec![4, 8],
            head_hidden: (32, 16),
            input_bins: 16,
            input_frames: 16,
        }
    }
}

impl ClassifierConfig {
    /// The five-block shape described for the full-scale classifier.
    pub fn paper_reference() -> Self {
        Self {
            conv_blocks: 5,
            channels: vec![16, 32, 64, 64, 64],
            head_hidden: (256, 128),
            input_bins: 80,
            input_frames: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_blocks == 0 {
            return Err(PiwError::config("conv_blocks", "must be at least 1"));
        }
        if self.channels.len() != self.conv_blocks {
            return Err(PiwError::config(
                "channels",
                format!(
                    "expected {} entries, got {}",
                    self.conv_blocks,
                    self.channels.len()
                ),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(PiwError::config("channels", "must be positive"));
        }
        if self.head_hidden.0 == 0 || self.head_hidden.1 == 0 {
            return Err(PiwError::config("head_hidden", "must be positive"));
        }
        let (mut h, mut w) = (self.input_bins, self.input_frames);
        for _ in 0..self.conv_blocks {
            h /= 2;
            w /= 2;
            if h == 0 || w == 0 {
                return Err(PiwError::config(
                    "conv_blocks",
                    "pooled spatial size underflows to zero",
                ));
            }
        }
        Ok(())
    }

    /// (height, width) after each pooling stage, ending at the encoder
    /// output resolution.
    fn pooled_sizes(&self) -> Vec<(usize, usize)> {
        let (mut h, mut w) = (self.input_bins, self.input_frames);
        let mut sizes = Vec::with_capacity(self.conv_blocks);
        for _ in 0..self.conv_blocks {
            h /= 2;
            w /= 2;
            sizes.push((h, w));
        }
        sizes
    }

    /// Flattened encoder output width.
    pub fn encoder_output_dim(&self) -> usize {
        let (h, w) = *self.pooled_sizes().last().expect("at least one block");
        h * w * self.channels[self.conv_blocks - 1]
    }
}

/// Per-group prediction: winning value plus the full probability vector in
/// taxonomy value order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPrediction {
    pub value: String,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Prediction {
    pub groups: BTreeMap<String, GroupPrediction>,
}

impl Prediction {
    /// The predicted assignment, ready for profile selection.
    pub fn assignment(&self) -> BTreeMap<String, String> {
        self.groups
            .iter()
            .map(|(g, p)| (g.clone(), p.value.clone()))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch: 32,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifierTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub steps: u64,
}

/// One labeled training sample: a feature slice (any frame count; it is
/// padded/truncated to the configured slice) plus labels for any subset of
/// groups.
#[derive(Debug, Clone)]
pub struct LabeledSlice {
    pub features: FeatureMatrix,
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct CharacteristicClassifier {
    config: ClassifierConfig,
    taxonomy: crate::taxonomy::CharacteristicTaxonomy,
    seed: u64,
    params: ParamSet,
    /// im2col index maps per conv layer, keyed by (block, conv-in-block).
    gather_maps: Vec<Rc<Vec<i64>>>,
}

/// Row-major im2col map for a 3x3 same-padding convolution over an input
/// stored as (h*w) rows x `channels` cols. Output row = spatial position,
/// output col = (ky, kx, channel).
fn im2col_map(h: usize, w: usize, channels: usize) -> Vec<i64> {
    let mut map = Vec::with_capacity(h * w * KERNEL * KERNEL * channels);
    for y in 0..h {
        for x in 0..w {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let sy = y as i64 + ky as i64 - 1;
                    let sx = x as i64 + kx as i64 - 1;
                    let valid = sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64;
                    for c in 0..channels {
                        if valid {
                            map.push(((sy * w as i64 + sx) * channels as i64) + c as i64);
                        } else {
                            map.push(-1);
                        }
                    }
                }
            }
        }
    }
    map
}

fn head_layer_dims(
    config: &ClassifierConfig,
    n_values: usize,
) -> [(usize, usize); 3] {
    let f = config.encoder_output_dim();
    [
        (config.head_hidden.0, f),
        (config.head_hidden.1, config.head_hidden.0),
        (n_values, config.head_hidden.1),
    ]
}

impl CharacteristicClassifier {
    /// Seeded init: He-scaled Gaussian weights, zero biases, one head per
    /// taxonomy group.
    pub fn init(
        config: ClassifierConfig,
        taxonomy: crate::taxonomy::CharacteristicTaxonomy,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        taxonomy.validate()?;
        let mut params = ParamSet::new();
        let mut rng = stream_rng(seed, "classifier-encoder");
        let mut in_ch = 1usize;
        for (b, &out_ch) in config.channels.iter().enumerate() {
            for conv in 0..2 {
                let fan_in = in_ch * KERNEL * KERNEL;
                let std = (2.0 / fan_in as f64).sqrt();
                params.insert(
                    format!("enc.b{b}.c{conv}.w"),
                    Matrix::gaussian(out_ch, fan_in, std, &mut rng),
                )?;
                params.insert(format!("enc.b{b}.c{conv}.b"), Matrix::zeros(1, out_ch))?;
                in_ch = out_ch;
            }
        }
        let mut classifier = Self {
            config,
            taxonomy: crate::taxonomy::CharacteristicTaxonomy::default(),
            seed,
            params,
            gather_maps: Vec::new(),
        };
        classifier.rebuild_gather_maps();
        let groups: Vec<(String, Vec<String>)> = taxonomy
            .groups
            .iter()
            .map(|g| (g.group.clone(), g.values.clone()))
            .collect();
        for (group, values) in groups {
            classifier.add_head(&group, &values)?;
        }
        Ok(classifier)
    }

    fn rebuild_gather_maps(&mut self) {
        let mut maps = Vec::new();
        let (mut h, mut w) = (self.config.input_bins, self.config.input_frames);
        let mut in_ch = 1usize;
        for &out_ch in &self.config.channels {
            maps.push(Rc::new(im2col_map(h, w, in_ch)));
            maps.push(Rc::new(im2col_map(h, w, out_ch)));
            in_ch = out_ch;
            h /= 2;
            w /= 2;
        }
        self.gather_maps = maps;
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn taxonomy(&self) -> &crate::taxonomy::CharacteristicTaxonomy {
        &self.taxonomy
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(p, _)| p.starts_with("enc."))
            .map(|(_, m)| m.len())
            .sum()
    }

    pub fn head_param_count(&self, group: &str) -> usize {
        let prefix = format!("head.{group}.");
        self.params
            .iter()
            .filter(|(p, _)| p.starts_with(&prefix))
            .map(|(_, m)| m.len())
            .sum()
    }

    /// Attach a new head for `group`. The encoder and existing heads are
    /// untouched; the head init stream depends only on (seed, group), so
    /// the same head added at any time has identical weights.
    pub fn add_head(&mut self, group: &str, values: &[String]) -> Result<()> {
        if self.taxonomy.group(group).is_some() {
            return Err(PiwError::conflict(format!("head `{group}` already exists")));
        }
        if values.is_empty() {
            return Err(PiwError::input(format!("head `{group}` needs values")));
        }
        let mut grown = self.taxonomy.clone();
        grown.groups.push(crate::taxonomy::TaxonomyGroup {
            group: group.to_string(),
            values: values.to_vec(),
        });
        grown.validate()?;

        let mut rng = stream_rng(self.seed, &format!("classifier-head/{group}"));
        for (l, (rows, cols)) in head_layer_dims(&self.config, values.len()).iter().enumerate() {
            let std = (2.0 / *cols as f64).sqrt();
            self.params.insert(
                format!("head.{group}.l{l}.w"),
                Matrix::gaussian(*rows, *cols, std, &mut rng),
            )?;
            self.params
                .insert(format!("head.{group}.l{l}.b"), Matrix::zeros(1, *rows))?;
        }
        self.taxonomy = grown;
        Ok(())
    }

    fn standardize(slice: &FeatureMatrix) -> Matrix {
        let values = slice.values();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt().max(1e-6);
        // (h*w) rows x 1 channel column.
        Matrix::from_fn(slice.bins() * slice.frames(), 1, |i, _| {
            let bin = i / slice.frames();
            let frame = i % slice.frames();
            (slice.get(bin, frame) - mean) / std
        })
    }

    /// Shared encoder: conv blocks then flatten to a 1 x F row.
    fn encode(&self, tape: &mut Tape, vars: &ParamVars, slice: &FeatureMatrix) -> Result<Var> {
        let mut x = tape.constant(Self::standardize(slice));
        let (mut h, mut w) = (self.config.input_bins, self.config.input_frames);
        let mut in_ch = 1usize;
        let mut map_idx = 0;
        for (b, &out_ch) in self.config.channels.iter().enumerate() {
            for conv in 0..2 {
                let map = self.gather_maps[map_idx].clone();
                map_idx += 1;
                let patches = tape.gather(x, h * w, KERNEL * KERNEL * in_ch, map)?;
                let w_t = tape.transpose(vars[&format!("enc.b{b}.c{conv}.w")]);
                let conv_out = tape.matmul(patches, w_t)?;
                let conv_out = tape.add_row(conv_out, vars[&format!("enc.b{b}.c{conv}.b")])?;
                x = tape.relu(conv_out);
                in_ch = out_ch;
            }
            x = tape.avg_pool2(x, h, w)?;
            h /= 2;
            w /= 2;
        }
        tape.reshape(x, 1, h * w * in_ch)
    }

    fn head_logits(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        group: &str,
        features: Var,
    ) -> Result<Var> {
        let mut x = features;
        for l in 0..3 {
            let w_t = tape.transpose(vars[&format!("head.{group}.l{l}.w")]);
            let h = tape.matmul(x, w_t)?;
            let h = tape.add_row(h, vars[&format!("head.{group}.l{l}.b")])?;
            x = if l < 2 { tape.relu(h) } else { h };
        }
        Ok(x)
    }

    fn check_slice(&self, slice: &FeatureMatrix) -> Result<()> {
        if slice.bins() != self.config.input_bins || slice.frames() != self.config.input_frames {
            return Err(PiwError::shape(
                "classify input",
                (self.config.input_bins, self.config.input_frames),
                (slice.bins(), slice.frames()),
            ));
        }
        Ok(())
    }

    /// Classify one feature slice; returns per-group probability vectors
    /// and argmax values.
    pub fn classify(&self, slice: &FeatureMatrix) -> Result<Prediction> {
        self.check_slice(slice)?;
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let features = self.encode(&mut tape, &vars, slice)?;
        let mut prediction = Prediction::default();
        for g in &self.taxonomy.groups {
            let logits = self.head_logits(&mut tape, &vars, &g.group, features)?;
            let probs_var = tape.softmax_rows(logits);
            let probs = tape.value(probs_var).row(0).to_vec();
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            prediction.groups.insert(
                g.group.clone(),
                GroupPrediction {
                    value: g.values[argmax].clone(),
                    probs,
                },
            );
        }
        Ok(prediction)
    }

    /// Joint SGD training: the loss is the sum over groups of the mean
    /// cross-entropy across that group's labeled samples, so the shared
    /// encoder receives gradient from every head while samples missing a
    /// label simply drop out of that head's term.
    pub fn train(
        &mut self,
        samples: &[LabeledSlice],
        hyper: &ClassifierHyper,
    ) -> Result<ClassifierTrainReport> {
        if samples.is_empty() {
            return Err(PiwError::input("train: empty dataset"));
        }
        // Normalize every sample to the configured slice and resolve labels.
        let mut prepared: Vec<(FeatureMatrix, BTreeMap<String, usize>)> = Vec::new();
        for s in samples {
            if s.features.bins() != self.config.input_bins {
                return Err(PiwError::shape(
                    "train input bins",
                    (self.config.input_bins, 0),
                    (s.features.bins(), s.features.frames()),
                ));
            }
            let slice = crate::features::slice_for_classifier(&s.features, self.config.input_frames)?;
            let mut indices = BTreeMap::new();
            for (group, value) in &s.labels {
                let Some(g) = self.taxonomy.group(group) else {
                    continue; // labels for unknown groups are ignored
                };
                let idx = g.values.iter().position(|v| v == value).ok_or_else(|| {
                    PiwError::lookup(format!("train: unknown value `{value}` in group `{group}`"))
                })?;
                indices.insert(group.clone(), idx);
            }
            prepared.push((slice, indices));
        }

        self.params.mark_all_trainable();
        let initial_loss = self.batch_loss(&prepared)?;
        let mut rng = stream_rng(self.seed, "classifier-shuffle");
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        let mut steps = 0u64;
        let group_ids: Vec<String> =
            self.taxonomy.groups.iter().map(|g| g.group.clone()).collect();

        for _epoch in 0..hyper.epochs {
            crate::rng::shuffle_indices(&mut order, &mut rng);
            for chunk in order.chunks(hyper.batch.max(1)) {
                let batch: Vec<&(FeatureMatrix, BTreeMap<String, usize>)> =
                    chunk.iter().map(|&i| &prepared[i]).collect();
                let loss_fn = |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
                    self.joint_loss(tape, vars, &batch, &group_ids)
                };
                let grads = gradients(&loss_fn, &self.params)?;
                sgd_step(&mut self.params, &grads, hyper.lr)?;
                steps += 1;
            }
        }
        let final_loss = self.batch_loss(&prepared)?;
        self.params.freeze_all();
        Ok(ClassifierTrainReport {
            initial_loss,
            final_loss,
            epochs: hyper.epochs,
            steps,
        })
    }

    fn joint_loss(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        batch: &[&(FeatureMatrix, BTreeMap<String, usize>)],
        group_ids: &[String],
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(batch.len());
        for (slice, _) in batch {
            rows.push(self.encode(tape, vars, slice)?);
        }
        let stacked = tape.concat_rows(&rows)?;
        let mut group_losses = Vec::new();
        for group in group_ids {
            let mut picked = Vec::new();
            let mut targets = Vec::new();
            for (i, (_, labels)) in batch.iter().enumerate() {
                if let Some(&idx) = labels.get(group) {
                    picked.push(i);
                    targets.push(idx);
                }
            }
            if picked.is_empty() {
                continue;
            }
            let subset = tape.gather_rows(stacked, Rc::new(picked))?;
            let logits = self.head_logits(tape, vars, group, subset)?;
            group_losses.push(tape.cross_entropy(logits, Rc::new(targets))?);
        }
        if group_losses.is_empty() {
            return Err(PiwError::input("joint_loss: no labeled samples in batch"));
        }
        tape.sum_scalars(&group_losses)
    }

    /// Current joint loss over a prepared set (used for train reports).
    fn batch_loss(&self, prepared: &[(FeatureMatrix, BTreeMap<String, usize>)]) -> Result<f64> {
        let group_ids: Vec<String> =
            self.taxonomy.groups.iter().map(|g| g.group.clone()).collect();
        let refs: Vec<&(FeatureMatrix, BTreeMap<String, usize>)> = prepared.iter().collect();
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let loss = self.joint_loss(&mut tape, &vars, &refs, &group_ids)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Loss builder over raw labeled slices, exposed so gradient checks can
    /// drive the exact training objective.
    pub fn loss_for_check(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        samples: &[LabeledSlice],
    ) -> Result<Var> {
        let mut prepared = Vec::new();
        for s in samples {
            let slice = crate::features::slice_for_classifier(&s.features, self.config.input_frames)?;
            let mut indices = BTreeMap::new();
            for (group, value) in &s.labels {
                if let Some(g) = self.taxonomy.group(group) {
                    if let Some(idx) = g.values.iter().position(|v| v == value) {
                        indices.insert(group.clone(), idx);
                    }
                }
            }
            prepared.push((slice, indices));
        }
        let refs: Vec<&(FeatureMatrix, BTreeMap<String, usize>)> = prepared.iter().collect();
        let group_ids: Vec<String> =
            self.taxonomy.groups.iter().map(|g| g.group.clone()).collect();
        self.joint_loss(tape, vars, &refs, &group_ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CLASSIFIER_MAGIC)?;
        out.write_all(&CLASSIFIER_VERSION.to_le_bytes())?;
        let cfg_json = serde_json::to_vec(&self.config)?;
        out.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
        out.write_all(&cfg_json)?;
        let tax_json = serde_json::to_vec(&self.taxonomy)?;
        out.write_all(&(tax_json.len() as u32).to_le_bytes())?;
        out.write_all(&tax_json)?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (path, m) in self.params.iter() {
            let bytes = path.as_bytes();
            out.write_all(&(bytes.len() as u16).to_le_bytes())?;
            out.write_all(bytes)?;
            out.write_all(&(m.rows() as u32).to_le_bytes())?;
            out.write_all(&(m.cols() as u32).to_le_bytes())?;
            for &v in m.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        reader
            .read_exact(&mut magic)
            .map_err(|_| PiwError::corrupt(format!("{}: truncated header", path.display())))?;
        if &magic != CLASSIFIER_MAGIC {
            return Err(PiwError::format(format!(
                "{}: bad magic (expected PIWCLSF1)",
                path.display()
            )));
        }
        let mut u16buf = [0u8; 2];
        reader.read_exact(&mut u16buf)?;
        if u16::from_le_bytes(u16buf) != CLASSIFIER_VERSION {
            return Err(PiwError::format(format!(
                "{}: unsupported version",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        reader.read_exact(&mut u32buf)?;
        let mut cfg_json = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        reader.read_exact(&mut cfg_json)?;
        let config: ClassifierConfig = serde_json::from_slice(&cfg_json)?;
        config.validate()?;
        reader.read_exact(&mut u32buf)?;
        let mut tax_json = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        reader.read_exact(&mut tax_json)?;
        let taxonomy: crate::taxonomy::CharacteristicTaxonomy = serde_json::from_slice(&tax_json)?;
        taxonomy.validate()?;
        let mut u64buf = [0u8; 8];
        reader.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);

        reader.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            reader.read_exact(&mut u16buf)?;
            let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
            reader.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| PiwError::corrupt("parameter path is not UTF-8"))?;
            reader.read_exact(&mut u32buf)?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            reader.read_exact(&mut u32buf)?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            let mut data = vec![0u8; rows * cols * 4];
            reader.read_exact(&mut data).map_err(|_| {
                PiwError::corrupt(format!("{}: truncated parameter `{name}`", path.display()))
            })?;
            let values: Vec<f64> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            params.insert(name, Matrix::new(rows, cols, values)?)?;
        }
        for g in &taxonomy.groups {
            if !params.contains(&format!("head.{}.l0.w", g.group)) {
                return Err(PiwError::corrupt(format!(
                    "{}: missing head for group `{}`",
                    path.display(),
                    g.group
                )));
            }
        }
        let mut classifier = Self {
            config,
            taxonomy,
            seed,
            params,
            gather_maps: Vec::new(),
        };
        classifier.rebuild_gather_maps();
        Ok(classifier)
    }
}
