//! Toy encoder-decoder transformer for transcription.
//!
//! The model is a deliberately small stand-in for an edge-scale ASR
//! backbone: linear feature embedding, sinusoidal positions, pre-norm
//! attention blocks with RMS normalization, and a ReLU feed-forward. Query
//! and key projections of encoder self-attention and decoder self- and
//! cross-attention carry labeled injection points where low-rank adapter
//! deltas are added. After pre-training the whole parameter set is frozen;
//! only adapter factors ever train afterwards.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PiwError, Result};
use crate::features::FeatureMatrix;
use crate::lora::{InjectionPoint, MergedAdapter};
use crate::numerics::{gradients, Adam, Matrix, ParamSet, ParamVars, Tape, Var};
use crate::rng::stream_rng;

pub const PAD_TOKEN: usize = 0;
pub const BOS_TOKEN: usize = 1;
pub const EOS_TOKEN: usize = 2;
/// First token id available for content (words).
pub const FIRST_WORD_TOKEN: usize = 4;

const MODEL_MAGIC: &[u8; 8] = b"PIWMODEL";
const MODEL_VERSION: u16 = 1;

/// Positional encodings are attenuated so they do not drown the feature
/// embedding at init scale.
const POS_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab: usize,
    pub feature_bins: usize,
    pub max_src_frames: usize,
    pub max_tgt_tokens: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            vocab: 32,
            feature_bins: 16,
            max_src_frames: 128,
            max_tgt_tokens: 12,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 {
            return Err(PiwError::config("d_model/n_heads", "must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(PiwError::config(
                "d_model",
                format!("{} not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.enc_layers == 0 {
            return Err(PiwError::config("enc_layers", "must be at least 1"));
        }
        if self.dec_layers == 0 {
            return Err(PiwError::config("dec_layers", "must be at least 1"));
        }
        if self.vocab < 4 {
            return Err(PiwError::config("vocab", "must be at least 4 (PAD/BOS/EOS/UNK)"));
        }
        if self.feature_bins == 0 {
            return Err(PiwError::config("feature_bins", "must be positive"));
        }
        if self.max_src_frames == 0 || self.max_tgt_tokens == 0 {
            return Err(PiwError::config(
                "max_src_frames/max_tgt_tokens",
                "must be positive",
            ));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        2 * self.d_model
    }

    /// Injection points in a fixed order: encoder self-attention q/k, then
    /// decoder self-attention q/k and cross-attention q/k per layer.
    pub fn injection_points(&self) -> Vec<InjectionPoint> {
        let d = self.d_model;
        let mut points = Vec::new();
        for i in 0..self.enc_layers {
            for proj in ["q", "k"] {
                points.push(InjectionPoint {
                    id: format!("enc.{i}.attn.{proj}"),
                    out_dim: d,
                    in_dim: d,
                });
            }
        }
        for i in 0..self.dec_layers {
            for site in ["attn", "cross"] {
                for proj in ["q", "k"] {
                    points.push(InjectionPoint {
                        id: format!("dec.{i}.{site}.{proj}"),
                        out_dim: d,
                        in_dim: d,
                    });
                }
            }
        }
        points
    }
}

/// Hex SHA-256 of the canonical config JSON; binds profile libraries and
/// checkpoints to one backbone.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Greedy decode output: content token ids (no BOS/EOS/PAD).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// True when EOS was emitted before the length limit.
    pub terminated: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainHyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 40,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub steps: u64,
}

/// Adapter factors bound onto a tape: layer id -> (A, B, output scale).
pub type BoundAdapter = BTreeMap<String, (Var, Var, f64)>;

/// Bind a merged adapter as constants. Scale is 1.0 because merge weights
/// and the alpha/rank factor are already folded into the concatenated
/// factors.
pub fn bind_merged(tape: &mut Tape, adapter: &MergedAdapter) -> BoundAdapter {
    let mut bound = BoundAdapter::new();
    for (layer_id, layer) in &adapter.layers {
        let a = tape.constant(layer.a_hat.clone());
        let b = tape.constant(layer.b_hat.clone());
        bound.insert(layer_id.clone(), (a, b, 1.0));
    }
    bound
}

#[derive(Debug, Clone)]
pub struct ToyAsrModel {
    config: ModelConfig,
    params: ParamSet,
    injection_points: Vec<InjectionPoint>,
}

impl ToyAsrModel {
    /// Deterministically initialized model. All projection and embedding
    /// weights draw from a seeded Gaussian with std 0.02; norm gains start
    /// at one and biases at zero. Everything starts trainable; freezing
    /// happens after pre-training.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, "model-init");
        let d = config.d_model;
        let ff = config.ff_dim();
        let mut params = ParamSet::new();
        let mut gauss = |params: &mut ParamSet, path: String, rows, cols| -> Result<()> {
            params.insert(path, Matrix::gaussian(rows, cols, 0.02, &mut rng))
        };

        gauss(&mut params, "enc.in.w".into(), d, config.feature_bins)?;
        params.insert("enc.in.b", Matrix::zeros(1, d))?;
        for i in 0..config.enc_layers {
            for proj in ["q", "k", "v", "o"] {
                gauss(&mut params, format!("enc.{i}.attn.{proj}.w"), d, d)?;
            }
            params.insert(format!("enc.{i}.norm1.g"), Matrix::ones(1, d))?;
            params.insert(format!("enc.{i}.norm2.g"), Matrix::ones(1, d))?;
            gauss(&mut params, format!("enc.{i}.ffn.w1"), ff, d)?;
            params.insert(format!("enc.{i}.ffn.b1"), Matrix::zeros(1, ff))?;
            gauss(&mut params, format!("enc.{i}.ffn.w2"), d, ff)?;
            params.insert(format!("enc.{i}.ffn.b2"), Matrix::zeros(1, d))?;
        }
        params.insert("enc.norm.g", Matrix::ones(1, d))?;

        gauss(&mut params, "dec.embed".into(), config.vocab, d)?;
        for i in 0..config.dec_layers {
            for site in ["attn", "cross"] {
                for proj in ["q", "k", "v", "o"] {
                    gauss(&mut params, format!("dec.{i}.{site}.{proj}.w"), d, d)?;
                }
            }
            params.insert(format!("dec.{i}.norm1.g"), Matrix::ones(1, d))?;
            params.insert(format!("dec.{i}.norm2.g"), Matrix::ones(1, d))?;
            params.insert(format!("dec.{i}.norm3.g"), Matrix::ones(1, d))?;
            gauss(&mut params, format!("dec.{i}.ffn.w1"), ff, d)?;
            params.insert(format!("dec.{i}.ffn.b1"), Matrix::zeros(1, ff))?;
            gauss(&mut params, format!("dec.{i}.ffn.w2"), d, ff)?;
            params.insert(format!("dec.{i}.ffn.b2"), Matrix::zeros(1, d))?;
        }
        params.insert("dec.norm.g", Matrix::ones(1, d))?;
        gauss(&mut params, "dec.out.w".into(), config.vocab, d)?;
        params.insert("dec.out.b", Matrix::zeros(1, config.vocab))?;

        params.mark_all_trainable();
        let injection_points = config.injection_points();
        for point in &injection_points {
            let w = params
                .get(&format!("{}.w", point.id))
                .expect("injection point weight exists");
            debug_assert_eq!(w.shape(), (point.out_dim, point.in_dim));
        }
        Ok(Self {
            config,
            params,
            injection_points,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn injection_points(&self) -> &[InjectionPoint] {
        &self.injection_points
    }

    pub fn is_frozen(&self) -> bool {
        self.params.trainable_count() == 0
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    fn sinusoidal_positions(&self, len: usize) -> Matrix {
        let d = self.config.d_model;
        Matrix::from_fn(len, d, |p, i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            POS_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() }
        })
    }

    /// `x (n x in_dim) * W^T` plus the adapter delta when one is bound at
    /// `layer_id`.
    fn project(
        &self,
        tape: &mut Tape,
        x: Var,
        w: Var,
        adapter: &BoundAdapter,
        layer_id: &str,
    ) -> Result<Var> {
        let wt = tape.transpose(w);
        let base = tape.matmul(x, wt)?;
        match adapter.get(layer_id) {
            None => Ok(base),
            Some(&(a, b, scale)) => {
                let at = tape.transpose(a);
                let bt = tape.transpose(b);
                let xa = tape.matmul(x, at)?;
                let xab = tape.matmul(xa, bt)?;
                let delta = tape.scale(xab, scale);
                tape.add(base, delta)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        adapter: &BoundAdapter,
        q_input: Var,
        kv_input: Var,
        prefix: &str, // e.g. "enc.0.attn"
        causal: bool,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let q = self.project(tape, q_input, vars[&format!("{prefix}.q.w")], adapter, &format!("{prefix}.q"))?;
        let k = self.project(tape, kv_input, vars[&format!("{prefix}.k.w")], adapter, &format!("{prefix}.k"))?;
        let vw_t = tape.transpose(vars[&format!("{prefix}.v.w")]);
        let v = tape.matmul(kv_input, vw_t)?;

        let n = tape.value(q).rows();
        let m = tape.value(k).rows();
        let mask = if causal {
            let mask = Matrix::from_fn(n, m, |i, j| if j > i { -1e9 } else { 0.0 });
            Some(tape.constant(mask))
        } else {
            None
        };

        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kh_t = tape.transpose(kh);
            let scores = tape.matmul(qh, kh_t)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = match mask {
                Some(m) => tape.add(scaled, m)?,
                None => scaled,
            };
            let attn = tape.softmax_rows(masked);
            head_outputs.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        let ow_t = tape.transpose(vars[&format!("{prefix}.o.w")]);
        tape.matmul(concat, ow_t)
    }

    fn ffn(&self, tape: &mut Tape, vars: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
        let w1_t = tape.transpose(vars[&format!("{prefix}.w1")]);
        let h = tape.matmul(x, w1_t)?;
        let h = tape.add_row(h, vars[&format!("{prefix}.b1")])?;
        let h = tape.relu(h);
        let w2_t = tape.transpose(vars[&format!("{prefix}.w2")]);
        let h = tape.matmul(h, w2_t)?;
        tape.add_row(h, vars[&format!("{prefix}.b2")])
    }

    /// Encoder stack over a feature matrix; returns frames x d_model.
    pub(crate) fn encode(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        adapter: &BoundAdapter,
        feats: &FeatureMatrix,
    ) -> Result<Var> {
        if feats.bins() != self.config.feature_bins {
            return Err(PiwError::shape(
                "encode feature bins",
                (self.config.feature_bins, 0),
                (feats.bins(), feats.frames()),
            ));
        }
        if feats.frames() == 0 {
            return Err(PiwError::input("encode: no frames"));
        }
        if feats.frames() > self.config.max_src_frames {
            return Err(PiwError::input(format!(
                "encode: {} frames exceeds max_src_frames {}",
                feats.frames(),
                self.config.max_src_frames
            )));
        }
        let frames = feats.frames();
        let bins = feats.bins();
        let x_data = Matrix::from_fn(frames, bins, |t, b| feats.get(b, t));
        let x0 = tape.constant(x_data);
        let in_w_t = tape.transpose(vars["enc.in.w"]);
        let projected = tape.matmul(x0, in_w_t)?;
        let projected = tape.add_row(projected, vars["enc.in.b"])?;
        let pos = tape.constant(self.sinusoidal_positions(frames));
        let mut x = tape.add(projected, pos)?;

        for i in 0..self.config.enc_layers {
            let normed = tape.rms_norm(x, vars[&format!("enc.{i}.norm1.g")])?;
            let attn = self.attention(
                tape,
                vars,
                adapter,
                normed,
                normed,
                &format!("enc.{i}.attn"),
                false,
            )?;
            x = tape.add(x, attn)?;
            let normed = tape.rms_norm(x, vars[&format!("enc.{i}.norm2.g")])?;
            let ffn = self.ffn(tape, vars, normed, &format!("enc.{i}.ffn"))?;
            x = tape.add(x, ffn)?;
        }
        tape.rms_norm(x, vars["enc.norm.g"])
    }

    /// Decoder stack over a token prefix; returns len x vocab logits.
    pub(crate) fn decode_logits(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        adapter: &BoundAdapter,
        enc_out: Var,
        tokens: &[usize],
    ) -> Result<Var> {
        for (i, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab {
                return Err(PiwError::Index {
                    context: format!("decode token position {i}"),
                    index: t,
                    bound: self.config.vocab,
                });
            }
        }
        let embedded = tape.gather_rows(vars["dec.embed"], Rc::new(tokens.to_vec()))?;
        let pos = tape.constant(self.sinusoidal_positions(tokens.len()));
        let mut x = tape.add(embedded, pos)?;

        for i in 0..self.config.dec_layers {
            let normed = tape.rms_norm(x, vars[&format!("dec.{i}.norm1.g")])?;
            let attn = self.attention(
                tape,
                vars,
                adapter,
                normed,
                normed,
                &format!("dec.{i}.attn"),
                true,
            )?;
            x = tape.add(x, attn)?;
            let normed = tape.rms_norm(x, vars[&format!("dec.{i}.norm2.g")])?;
            let cross = self.attention(
                tape,
                vars,
                adapter,
                normed,
                enc_out,
                &format!("dec.{i}.cross"),
                false,
            )?;
            x = tape.add(x, cross)?;
            let normed = tape.rms_norm(x, vars[&format!("dec.{i}.norm3.g")])?;
            let ffn = self.ffn(tape, vars, normed, &format!("dec.{i}.ffn"))?;
            x = tape.add(x, ffn)?;
        }
        let x = tape.rms_norm(x, vars["dec.norm.g"])?;
        let out_t = tape.transpose(vars["dec.out.w"]);
        let logits = tape.matmul(x, out_t)?;
        tape.add_row(logits, vars["dec.out.b"])
    }

    /// Teacher-forced loss graph: predicts `target + [EOS]` from
    /// `[BOS] + target`. Returns (loss scalar, logits node).
    pub(crate) fn build_teacher_forced(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        adapter: &BoundAdapter,
        feats: &FeatureMatrix,
        target: &[usize],
    ) -> Result<(Var, Var)> {
        if target.len() > self.config.max_tgt_tokens {
            return Err(PiwError::input(format!(
                "target length {} exceeds max_tgt_tokens {}",
                target.len(),
                self.config.max_tgt_tokens
            )));
        }
        let enc_out = self.encode(tape, vars, adapter, feats)?;
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS_TOKEN);
        input.extend_from_slice(target);
        let logits = self.decode_logits(tape, vars, adapter, enc_out, &input)?;
        let mut expected = target.to_vec();
        expected.push(EOS_TOKEN);
        let loss = tape.cross_entropy(logits, Rc::new(expected))?;
        Ok((loss, logits))
    }

    /// Teacher-forced cross-entropy and per-position logits for one sample.
    /// With no adapter (or one whose B factors are all zero) every injection
    /// point contributes the base projection only.
    pub fn forward_loss(
        &self,
        adapter: Option<&MergedAdapter>,
        feats: &FeatureMatrix,
        target: &[usize],
    ) -> Result<(f64, Matrix)> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let bound = match adapter {
            Some(a) => bind_merged(&mut tape, a),
            None => BoundAdapter::new(),
        };
        let (loss, logits) = self.build_teacher_forced(&mut tape, &vars, &bound, feats, target)?;
        Ok((tape.value(loss).get(0, 0), tape.value(logits).clone()))
    }

    /// Autoregressive argmax decoding from BOS until EOS or the length cap.
    pub fn greedy_decode(
        &self,
        adapter: Option<&MergedAdapter>,
        feats: &FeatureMatrix,
    ) -> Result<DecodeResult> {
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let bound = match adapter {
            Some(a) => bind_merged(&mut tape, a),
            None => BoundAdapter::new(),
        };
        let enc_out = self.encode(&mut tape, &vars, &bound, feats)?;

        let mut prefix = vec![BOS_TOKEN];
        let mut tokens = Vec::new();
        let mut terminated = false;
        while tokens.len() < self.config.max_tgt_tokens {
            let logits = self.decode_logits(&mut tape, &vars, &bound, enc_out, &prefix)?;
            let m = tape.value(logits);
            let last = m.row(m.rows() - 1);
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if next == EOS_TOKEN {
                terminated = true;
                break;
            }
            tokens.push(next);
            prefix.push(next);
        }
        Ok(DecodeResult { tokens, terminated })
    }

    /// Mean teacher-forced loss over a set of samples.
    pub fn mean_loss(
        &self,
        adapter: Option<&MergedAdapter>,
        samples: &[(FeatureMatrix, Vec<usize>)],
    ) -> Result<f64> {
        if samples.is_empty() {
            return Err(PiwError::input("mean_loss: no samples"));
        }
        let mut total = 0.0;
        for (feats, target) in samples {
            total += self.forward_loss(adapter, feats, target)?.0;
        }
        Ok(total / samples.len() as f64)
    }

    /// Output of one injection-point projection over row vectors `x`,
    /// with or without an adapter. Exposes the additive structure of the
    /// delta for direct verification.
    pub fn project_at(
        &self,
        layer_id: &str,
        x: &Matrix,
        adapter: Option<&MergedAdapter>,
    ) -> Result<Matrix> {
        if !self
            .injection_points
            .iter()
            .any(|p| p.id == layer_id)
        {
            return Err(PiwError::lookup(format!(
                "project_at: unknown injection point `{layer_id}`"
            )));
        }
        let mut tape = Tape::new();
        let vars = self.params.bind_frozen(&mut tape);
        let bound = match adapter {
            Some(a) => bind_merged(&mut tape, a),
            None => BoundAdapter::new(),
        };
        let xv = tape.constant(x.clone());
        let out = self.project(&mut tape, xv, vars[&format!("{layer_id}.w")], &bound, layer_id)?;
        Ok(tape.value(out).clone())
    }

    /// Pre-train every parameter with Adam on (features, target-tokens)
    /// pairs, then freeze the parameter set.
    pub fn pretrain(
        mut self,
        samples: &[(FeatureMatrix, Vec<usize>)],
        hyper: &PretrainHyper,
    ) -> Result<(Self, PretrainReport)> {
        if samples.is_empty() {
            return Err(PiwError::input("pretrain: empty dataset"));
        }
        self.params.mark_all_trainable();
        let initial_loss = self.mean_loss(None, samples)?;
        let mut rng = stream_rng(self.config.seed, "pretrain-shuffle");
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut optimizer = Adam::new(hyper.lr);
        let mut steps = 0u64;

        for _epoch in 0..hyper.epochs {
            crate::rng::shuffle_indices(&mut order, &mut rng);
            for chunk in order.chunks(hyper.batch.max(1)) {
                let batch: Vec<&(FeatureMatrix, Vec<usize>)> =
                    chunk.iter().map(|&i| &samples[i]).collect();
                let loss_fn = |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
                    let bound = BoundAdapter::new();
                    let mut losses = Vec::with_capacity(batch.len());
                    for (feats, target) in &batch {
                        let (loss, _) =
                            self.build_teacher_forced(tape, vars, &bound, feats, target)?;
                        losses.push(loss);
                    }
                    tape.mean_scalars(&losses)
                };
                let grads = gradients(&loss_fn, &self.params)?;
                optimizer.step(&mut self.params, &grads)?;
                steps += 1;
            }
        }
        let final_loss = self.mean_loss(None, samples)?;
        self.params.freeze_all();
        Ok((
            self,
            PretrainReport {
                initial_loss,
                final_loss,
                epochs: hyper.epochs,
                steps,
            },
        ))
    }

    /// Serialize config and parameters (f32) to the checkpoint format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&MODEL_VERSION.to_le_bytes())?;
        let cfg_json = serde_json::to_vec(&self.config)?;
        out.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
        out.write_all(&cfg_json)?;
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

    /// Load a checkpoint. Loaded models are frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        reader
            .read_exact(&mut magic)
            .map_err(|_| PiwError::corrupt(format!("{}: truncated header", path.display())))?;
        if &magic != MODEL_MAGIC {
            return Err(PiwError::format(format!(
                "{}: bad magic (expected PIWMODEL)",
                path.display()
            )));
        }
        let mut u16buf = [0u8; 2];
        reader.read_exact(&mut u16buf)?;
        let version = u16::from_le_bytes(u16buf);
        if version != MODEL_VERSION {
            return Err(PiwError::format(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        reader.read_exact(&mut u32buf)?;
        let cfg_len = u32::from_le_bytes(u32buf) as usize;
        let mut cfg_json = vec![0u8; cfg_len];
        reader.read_exact(&mut cfg_json)?;
        let config: ModelConfig = serde_json::from_slice(&cfg_json)?;
        config.validate()?;

        reader.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            reader.read_exact(&mut u16buf)?;
            let name_len = u16::from_le_bytes(u16buf) as usize;
            let mut name = vec![0u8; name_len];
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
        let injection_points = config.injection_points();
        for point in &injection_points {
            let w_path = format!("{}.w", point.id);
            let w = params.get(&w_path).ok_or_else(|| {
                PiwError::corrupt(format!("{}: missing projection `{w_path}`", path.display()))
            })?;
            if w.shape() != (point.out_dim, point.in_dim) {
                return Err(PiwError::corrupt(format!(
                    "{}: projection `{w_path}` has shape {}x{}",
                    path.display(),
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            injection_points,
        })
    }
}

impl ParamSet {
    /// Bind every entry as a constant regardless of trainable flags; used
    /// for pure inference passes.
    pub(crate) fn bind_frozen(&self, tape: &mut Tape) -> ParamVars {
        let mut vars = ParamVars::new();
        for (path, value) in self.iter() {
            vars.insert(path.to_string(), tape.constant(value.clone()));
        }
        vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{init_profile, merge_profiles};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            vocab: 8,
            feature_bins: 4,
            max_src_frames: 16,
            max_tgt_tokens: 5,
            seed: 42,
        }
    }

    fn tiny_feats(frames: usize, seed: u64) -> FeatureMatrix {
        let m = Matrix::gaussian(4, frames, 1.0, &mut stream_rng(seed, "feats"));
        FeatureMatrix::new(4, frames, m.data().to_vec()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ToyAsrModel::init(tiny_config()).unwrap();
        let b = ToyAsrModel::init(tiny_config()).unwrap();
        for (path, m) in a.params.iter() {
            assert_eq!(m, b.params.get(path).unwrap(), "param {path}");
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            d_model: 33,
            n_heads: 2,
            ..tiny_config()
        };
        match ToyAsrModel::init(cfg) {
            Err(PiwError::Config { field, .. }) => assert_eq!(field, "d_model"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn injection_point_count() {
        for (enc, dec) in [(1usize, 1usize), (2, 1), (2, 3)] {
            let cfg = ModelConfig {
                enc_layers: enc,
                dec_layers: dec,
                ..tiny_config()
            };
            assert_eq!(cfg.injection_points().len(), 2 * enc + 4 * dec);
        }
    }

    #[test]
    fn zero_b_adapter_matches_no_adapter() {
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        let profile = init_profile("g", "v", 2, model.injection_points(), 7).unwrap();
        let adapter = merge_profiles(&[profile], None).unwrap();
        let feats = tiny_feats(6, 1);
        let target = vec![4usize, 5, 6];
        let (l0, logits0) = model.forward_loss(None, &feats, &target).unwrap();
        let (l1, logits1) = model.forward_loss(Some(&adapter), &feats, &target).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(logits0, logits1);
        let d0 = model.greedy_decode(None, &feats).unwrap();
        let d1 = model.greedy_decode(Some(&adapter), &feats).unwrap();
        assert_eq!(d0, d1);
    }

    #[test]
    fn decode_is_deterministic_and_bounded() {
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        let feats = tiny_feats(8, 2);
        let a = model.greedy_decode(None, &feats).unwrap();
        let b = model.greedy_decode(None, &feats).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= model.config().max_tgt_tokens);
    }

    #[test]
    fn out_of_vocab_target_rejected() {
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        let feats = tiny_feats(6, 3);
        assert!(matches!(
            model.forward_loss(None, &feats, &[99]),
            Err(PiwError::Index { .. })
        ));
    }

    #[test]
    fn bin_mismatch_rejected() {
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        let feats = FeatureMatrix::filled(5, 6, 0.0);
        assert!(matches!(
            model.forward_loss(None, &feats, &[4]),
            Err(PiwError::Shape { .. })
        ));
    }

    #[test]
    fn injection_linearity() {
        // Output with adapter minus output without equals the merged delta.
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        let mut profile = init_profile("g", "v", 3, model.injection_points(), 9).unwrap();
        let mut rng = stream_rng(10, "fill");
        for layer in profile.layers.values_mut() {
            layer.b = Matrix::gaussian(layer.b.rows(), layer.b.cols(), 0.3, &mut rng);
        }
        let adapter = merge_profiles(&[profile], None).unwrap();
        let x = Matrix::gaussian(5, 8, 1.0, &mut rng);
        for point in model.injection_points() {
            let with = model.project_at(&point.id, &x, Some(&adapter)).unwrap();
            let without = model.project_at(&point.id, &x, None).unwrap();
            for r in 0..x.rows() {
                let delta =
                    crate::lora::merged_delta(&adapter, &point.id, x.row(r)).unwrap();
                for c in 0..point.out_dim {
                    let observed = with.get(r, c) - without.get(r, c);
                    let rel = (observed - delta[c]).abs() / delta[c].abs().max(1e-9);
                    assert!(rel < 1e-9, "{}: {} vs {}", point.id, observed, delta[c]);
                }
            }
        }
    }

    #[test]
    fn pretrain_freezes_and_reduces_loss() {
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        let samples: Vec<(FeatureMatrix, Vec<usize>)> = (0..8)
            .map(|i| (tiny_feats(6, 100 + i), vec![4 + (i as usize % 4)]))
            .collect();
        let hyper = PretrainHyper {
            lr: 0.1,
            epochs: 15,
            batch: 4,
        };
        let (model, report) = model.pretrain(&samples, &hyper).unwrap();
        assert!(model.is_frozen());
        assert!(
            report.final_loss < report.initial_loss * 0.7,
            "loss {} -> {}",
            report.initial_loss,
            report.final_loss
        );
    }

    #[test]
    fn pretrain_is_deterministic() {
        let samples: Vec<(FeatureMatrix, Vec<usize>)> =
            (0..6).map(|i| (tiny_feats(5, 200 + i), vec![4, 5])).collect();
        let hyper = PretrainHyper {
            lr: 0.05,
            epochs: 3,
            batch: 2,
        };
        let (a, _) = ToyAsrModel::init(tiny_config()).unwrap().pretrain(&samples, &hyper).unwrap();
        let (b, _) = ToyAsrModel::init(tiny_config()).unwrap().pretrain(&samples, &hyper).unwrap();
        for (path, m) in a.params.iter() {
            assert_eq!(m, b.params.get(path).unwrap(), "param {path}");
        }
    }

    #[test]
    fn pretrain_rejects_empty_dataset() {
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        assert!(model.pretrain(&[], &PretrainHyper::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        use tempfile::tempdir;
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let samples: Vec<(FeatureMatrix, Vec<usize>)> =
            (0..4).map(|i| (tiny_feats(5, 300 + i), vec![4])).collect();
        let hyper = PretrainHyper {
            lr: 0.05,
            epochs: 2,
            batch: 2,
        };
        let (model, _) = ToyAsrModel::init(tiny_config()).unwrap().pretrain(&samples, &hyper).unwrap();
        model.save(&path).unwrap();
        let loaded = ToyAsrModel::load(&path).unwrap();
        assert!(loaded.is_frozen());
        assert_eq!(loaded.config(), model.config());
        // f32 round trip: decode agreement on a fixed input.
        let feats = tiny_feats(6, 4);
        assert_eq!(
            model.greedy_decode(None, &feats).unwrap().tokens.len(),
            loaded.greedy_decode(None, &feats).unwrap().tokens.len()
        );
    }

    #[test]
    fn frozen_base_receives_no_gradients_during_profile_training() {
        let model = ToyAsrModel::init(tiny_config()).unwrap();
        let samples: Vec<(FeatureMatrix, Vec<usize>)> =
            (0..4).map(|i| (tiny_feats(5, 400 + i), vec![4])).collect();
        let hyper = PretrainHyper {
            lr: 0.05,
            epochs: 1,
            batch: 2,
        };
        let (model, _) = model.pretrain(&samples, &hyper).unwrap();

        // Build a LoRA training step: only lora.* paths may appear.
        let profile = init_profile("g", "v", 2, model.injection_points(), 11).unwrap();
        let mut params = ParamSet::new();
        for (path, m) in model.params().iter() {
            params.insert(path.to_string(), m.clone()).unwrap();
        }
        for (layer_id, layer) in &profile.layers {
            params.insert(format!("lora.{layer_id}.a"), layer.a.clone()).unwrap();
            params.insert(format!("lora.{layer_id}.b"), layer.b.clone()).unwrap();
            params.mark_trainable(&format!("lora.{layer_id}.a")).unwrap();
            params.mark_trainable(&format!("lora.{layer_id}.b")).unwrap();
        }
        let feats = tiny_feats(5, 401);
        let scale = profile.delta_scale();
        let layer_ids: Vec<String> = profile.layers.keys().cloned().collect();
        let loss_fn = |tape: &mut Tape, vars: &ParamVars| -> Result<Var> {
            let mut bound = BoundAdapter::new();
            for id in &layer_ids {
                bound.insert(
                    id.clone(),
                    (vars[&format!("lora.{id}.a")], vars[&format!("lora.{id}.b")], scale),
                );
            }
            let (loss, _) = model.build_teacher_forced(tape, vars, &bound, &feats, &[4])?;
            Ok(loss)
        };
        let grads = gradients(&loss_fn, &params).unwrap();
        assert!(!grads.is_empty());
        for path in grads.keys() {
            assert!(path.starts_with("lora."), "unexpected gradient for {path}");
        }
    }
}
