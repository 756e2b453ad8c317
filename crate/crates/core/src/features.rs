//! Audio ingestion and log-spectrogram features.
//!
//! Raw 16-bit PCM mono WAV files are decoded to [`Waveform`]s, transformed
//! into log-mel [`FeatureMatrix`] grids (Hann-windowed STFT, triangular mel
//! filterbank, log10 with a fixed floor), and sliced to the leading frames
//! the characteristic classifier consumes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{PiwError, Result};

/// Floor applied before log10, and therefore the minimum feature value is
/// `log10(LOG_MEL_FLOOR) = -10`.
pub const LOG_MEL_FLOOR: f64 = 1e-10;

/// Minimum value a feature cell can take (`log10` of the power floor).
pub const FEATURE_FLOOR: f64 = -10.0;

const FEATURE_MAGIC: &[u8; 8] = b"PIWFEAT1";

/// Mono audio in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(PiwError::config("sample_rate", "must be positive"));
        }
        if samples.is_empty() {
            return Err(PiwError::input("waveform has no samples"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Log-scale spectrogram: `bins` rows by `frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    bins: usize,
    frames: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(bins: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != bins * frames {
            return Err(PiwError::shape(
                "FeatureMatrix::new",
                (bins, frames),
                (values.len(), 1),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < FEATURE_FLOOR - 1e-9) {
            return Err(PiwError::Numeric {
                context: "FeatureMatrix::new (non-finite or below floor)".to_string(),
            });
        }
        Ok(Self {
            bins,
            frames,
            values,
        })
    }

    pub fn filled(bins: usize, frames: usize, value: f64) -> Self {
        Self {
            bins,
            frames,
            values: vec![value; bins * frames],
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    #[inline]
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    #[inline]
    pub fn set(&mut self, bin: usize, frame: usize, v: f64) {
        self.values[bin * self.frames + frame] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// One column (all bins at a frame).
    pub fn frame_column(&self, frame: usize) -> Vec<f64> {
        (0..self.bins).map(|b| self.get(b, frame)).collect()
    }
}

/// STFT/mel configuration. Defaults mirror the conventional 16 kHz speech
/// front-end: 25 ms windows, 10 ms hop, 80 mel bins.
#[derive(Debug, Clone)]
pub struct MelConfig {
    pub n_fft: usize,
    pub hop: usize,
    pub bins: usize,
    pub fmin: f64,
    /// None means Nyquist (sample_rate / 2).
    pub fmax: Option<f64>,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_fft: 400,
            hop: 160,
            bins: 80,
            fmin: 0.0,
            fmax: None,
        }
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency (Hz) of mel filter `bin` under `cfg` for the given
/// sample rate. Exposed so tests can locate a filter peak independently.
pub fn mel_bin_center_hz(cfg: &MelConfig, sample_rate: u32, bin: usize) -> f64 {
    let fmax = cfg.fmax.unwrap_or(sample_rate as f64 / 2.0);
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(fmax);
    let step = (hi - lo) / (cfg.bins + 1) as f64;
    mel_to_hz(lo + step * (bin + 1) as f64)
}

/// Read a RIFF/WAVE file containing 16-bit little-endian PCM mono audio.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = [0u8; 12];
    reader.read_exact(&mut header).map_err(|_| {
        PiwError::format(format!("{}: too short for a RIFF header", path.display()))
    })?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(PiwError::format(format!(
            "{}: not a RIFF/WAVE file",
            path.display()
        )));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (codec, channels, rate, bits)
    loop {
        let mut chunk = [0u8; 8];
        if reader.read_exact(&mut chunk).is_err() {
            return Err(PiwError::format(format!(
                "{}: no data chunk found",
                path.display()
            )));
        }
        let id = &chunk[0..4];
        let size = u32::from_le_bytes([chunk[4], chunk[5], chunk[6], chunk[7]]) as usize;
        if id == b"fmt " {
            let mut body = vec![0u8; size];
            reader.read_exact(&mut body)?;
            if size < 16 {
                return Err(PiwError::format(format!(
                    "{}: fmt chunk too small",
                    path.display()
                )));
            }
            let codec = u16::from_le_bytes([body[0], body[1]]);
            let channels = u16::from_le_bytes([body[2], body[3]]);
            let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
            let bits = u16::from_le_bytes([body[14], body[15]]);
            fmt = Some((codec, channels, rate, bits));
        } else if id == b"data" {
            let (codec, channels, rate, bits) = fmt.ok_or_else(|| {
                PiwError::format(format!("{}: data chunk before fmt", path.display()))
            })?;
            if codec != 1 {
                return Err(PiwError::UnsupportedFormat {
                    field: "codec".to_string(),
                    message: format!("PCM (1) required, found format code {codec}"),
                });
            }
            if channels != 1 {
                return Err(PiwError::UnsupportedFormat {
                    field: "channels".to_string(),
                    message: format!("mono required, found {channels} channels"),
                });
            }
            if bits != 16 {
                return Err(PiwError::UnsupportedFormat {
                    field: "bits_per_sample".to_string(),
                    message: format!("16-bit required, found {bits}"),
                });
            }
            let mut body = vec![0u8; size];
            reader.read_exact(&mut body).map_err(|_| {
                PiwError::corrupt(format!("{}: truncated data chunk", path.display()))
            })?;
            let samples: Vec<f64> = body
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                .collect();
            return Waveform::new(samples, rate);
        } else {
            // Skip unknown chunks (LIST, fact, ...). Chunk sizes are padded
            // to even lengths in RIFF.
            let skip = size + (size & 1);
            std::io::copy(&mut reader.by_ref().take(skip as u64), &mut std::io::sink())?;
        }
    }
}

/// Write a mono 16-bit PCM WAV (used by tests and tooling).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let data_len = (w.samples.len() * 2) as u32;
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&w.sample_rate.to_le_bytes())?;
    out.write_all(&(w.sample_rate * 2).to_le_bytes())?; // byte rate
    out.write_all(&2u16.to_le_bytes())?; // block align
    out.write_all(&16u16.to_le_bytes())?; // bits
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Hann-windowed STFT magnitudes, mel filterbank, log10 with floor.
///
/// Frame count is `1 + (len - n_fft) / hop`; the waveform must cover at
/// least one full window.
pub fn log_mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<FeatureMatrix> {
    if cfg.n_fft == 0 || cfg.hop == 0 || cfg.bins == 0 {
        return Err(PiwError::config("mel", "n_fft, hop, and bins must be positive"));
    }
    if w.samples.len() < cfg.n_fft {
        return Err(PiwError::input(format!(
            "waveform too short: {} samples < n_fft {}",
            w.samples.len(),
            cfg.n_fft
        )));
    }
    let n_fft = cfg.n_fft;
    let frames = 1 + (w.samples.len() - n_fft) / cfg.hop;
    let n_freqs = n_fft / 2 + 1;

    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);

    // Power spectrogram: frames x n_freqs.
    let mut power = vec![0.0f64; frames * n_freqs];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for f in 0..frames {
        let start = f * cfg.hop;
        for i in 0..n_fft {
            buf[i] = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_freqs {
            power[f * n_freqs + k] = buf[k].norm_sqr();
        }
    }

    // Triangular mel filterbank over FFT bin frequencies.
    let fmax = cfg.fmax.unwrap_or(w.sample_rate as f64 / 2.0);
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(fmax);
    let step = (hi - lo) / (cfg.bins + 1) as f64;
    let edges: Vec<f64> = (0..cfg.bins + 2).map(|i| mel_to_hz(lo + step * i as f64)).collect();
    let freq_of = |k: usize| k as f64 * w.sample_rate as f64 / n_fft as f64;

    let mut values = vec![0.0f64; cfg.bins * frames];
    for b in 0..cfg.bins {
        let (left, center, right) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..n_freqs {
            let f_hz = freq_of(k);
            let weight = if f_hz <= left || f_hz >= right {
                0.0
            } else if f_hz <= center {
                (f_hz - left) / (center - left)
            } else {
                (right - f_hz) / (right - center)
            };
            if weight == 0.0 {
                continue;
            }
            for f in 0..frames {
                values[b * frames + f] += weight * power[f * n_freqs + k];
            }
        }
    }
    for v in values.iter_mut() {
        *v = v.max(LOG_MEL_FLOOR).log10();
    }
    FeatureMatrix::new(cfg.bins, frames, values)
}

/// First `n_frames` frames of `f`; short inputs are right-padded with the
/// log floor so the classifier always sees a fixed-size slice.
pub fn slice_for_classifier(f: &FeatureMatrix, n_frames: usize) -> Result<FeatureMatrix> {
    if n_frames == 0 {
        return Err(PiwError::config("n_frames", "must be positive"));
    }
    let mut out = FeatureMatrix::filled(f.bins(), n_frames, FEATURE_FLOOR);
    let copy = f.frames().min(n_frames);
    for b in 0..f.bins() {
        for t in 0..copy {
            out.set(b, t, f.get(b, t));
        }
    }
    Ok(out)
}

/// Write the binary feature-file format: magic, bins (u32 LE), frames
/// (u32 LE), then `bins * frames` f32 LE values row-major.
pub fn write_features(path: &Path, f: &FeatureMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&(f.bins() as u32).to_le_bytes())?;
    out.write_all(&(f.frames() as u32).to_le_bytes())?;
    for &v in f.values() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| PiwError::corrupt(format!("{}: truncated header", path.display())))?;
    if &magic != FEATURE_MAGIC {
        return Err(PiwError::format(format!(
            "{}: bad magic (expected PIWFEAT1)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    reader.read_exact(&mut u32buf)?;
    let bins = u32::from_le_bytes(u32buf) as usize;
    reader.read_exact(&mut u32buf)?;
    let frames = u32::from_le_bytes(u32buf) as usize;
    let mut data = vec![0u8; bins * frames * 4];
    reader
        .read_exact(&mut data)
        .map_err(|_| PiwError::corrupt(format!("{}: truncated payload", path.display())))?;
    let values: Vec<f64> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    FeatureMatrix::new(bins, frames, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn sine(freq: f64, secs: f64, rate: u32, amp: f64) -> Waveform {
        let n = (secs * rate as f64) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn wav_round_trip_and_scale_endpoint() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.wav");
        // Include the scale endpoint -32768 -> -1.0 by writing raw bytes.
        {
            let w = Waveform::new(vec![0.0; 4], 16000).unwrap();
            write_wav(&path, &w).unwrap();
        }
        let mut bytes = std::fs::read(&path).unwrap();
        let data_start = bytes.len() - 8;
        bytes[data_start..data_start + 2].copy_from_slice(&(-32768i16).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.sample_rate, 16000);
        assert_eq!(w.samples.len(), 4);
        assert_eq!(w.samples[0], -1.0);
    }

    #[test]
    fn zero_signal_decodes_to_zeros() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("z.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_rejected_with_channels_field() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s.wav");
        write_wav(&path, &Waveform::new(vec![0.0; 8], 8000).unwrap()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[22..24].copy_from_slice(&2u16.to_le_bytes()); // channel count
        std::fs::write(&path, &bytes).unwrap();
        match read_wav(&path) {
            Err(PiwError::UnsupportedFormat { field, .. }) => assert_eq!(field, "channels"),
            other => panic!("expected unsupported-format error, got {other:?}"),
        }
    }

    #[test]
    fn frame_count_formula() {
        let w = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        let f = log_mel_spectrogram(&w, &MelConfig::default()).unwrap();
        assert_eq!(f.frames(), 1 + (16000 - 400) / 160); // 98
        assert_eq!(f.bins(), 80);
    }

    #[test]
    fn zero_waveform_hits_log_floor() {
        let w = Waveform::new(vec![0.0; 1000], 16000).unwrap();
        let cfg = MelConfig {
            bins: 16,
            ..MelConfig::default()
        };
        let f = log_mel_spectrogram(&w, &cfg).unwrap();
        assert!(f.values().iter().all(|&v| v == FEATURE_FLOOR));
    }

    #[test]
    fn sine_peaks_at_matching_mel_bin() {
        let cfg = MelConfig {
            bins: 20,
            ..MelConfig::default()
        };
        let rate = 16000;
        for bin in [3usize, 8, 14] {
            let freq = mel_bin_center_hz(&cfg, rate, bin);
            let w = sine(freq, 0.5, rate, 0.5);
            let f = log_mel_spectrogram(&w, &cfg).unwrap();
            let mean_energy: Vec<f64> = (0..f.bins())
                .map(|b| (0..f.frames()).map(|t| f.get(b, t)).sum::<f64>() / f.frames() as f64)
                .collect();
            let argmax = mean_energy
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, bin, "freq {freq} Hz should peak at bin {bin}");
        }
    }

    #[test]
    fn amplitude_scaling_shifts_log_by_two() {
        let cfg = MelConfig {
            bins: 16,
            ..MelConfig::default()
        };
        let quiet = sine(800.0, 0.2, 16000, 0.02);
        let loud = Waveform::new(quiet.samples.iter().map(|s| s * 10.0).collect(), 16000).unwrap();
        let fq = log_mel_spectrogram(&quiet, &cfg).unwrap();
        let fl = log_mel_spectrogram(&loud, &cfg).unwrap();
        for (a, b) in fq.values().iter().zip(fl.values()) {
            if *a > FEATURE_FLOOR + 1e-6 {
                assert!((b - a - 2.0).abs() < 1e-9, "a={a} b={b}");
            }
        }
    }

    #[test]
    fn deterministic_extraction() {
        let w = sine(440.0, 0.3, 16000, 0.4);
        let cfg = MelConfig::default();
        let a = log_mel_spectrogram(&w, &cfg).unwrap();
        let b = log_mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_short_waveform_rejected() {
        let w = Waveform::new(vec![0.1; 100], 16000).unwrap();
        assert!(matches!(
            log_mel_spectrogram(&w, &MelConfig::default()),
            Err(PiwError::Input { .. })
        ));
    }

    #[test]
    fn classifier_slice_pads_and_truncates() {
        let long = FeatureMatrix::filled(4, 10, -1.0);
        let s = slice_for_classifier(&long, 6).unwrap();
        assert_eq!((s.bins(), s.frames()), (4, 6));
        assert!(s.values().iter().all(|&v| v == -1.0));

        let short = FeatureMatrix::filled(4, 3, -2.0);
        let s = slice_for_classifier(&short, 6).unwrap();
        assert_eq!(s.frames(), 6);
        for b in 0..4 {
            for t in 0..3 {
                assert_eq!(s.get(b, t), -2.0);
            }
            for t in 3..6 {
                assert_eq!(s.get(b, t), FEATURE_FLOOR);
            }
        }

        let exact = FeatureMatrix::filled(4, 6, -3.0);
        assert_eq!(slice_for_classifier(&exact, 6).unwrap(), exact);
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f.piwfeat");
        let f = FeatureMatrix::new(
            2,
            3,
            vec![-1.0, -2.5, 0.25, 1.5, -9.0, 3.0],
        )
        .unwrap();
        write_features(&path, &f).unwrap();
        let g = read_features(&path).unwrap();
        assert_eq!(f, g); // exact: inputs representable in f32
    }

    #[test]
    fn feature_file_bad_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.piwfeat");
        std::fs::write(&path, b"NOTMAGIC\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_features(&path), Err(PiwError::Format { .. })));
    }
}
