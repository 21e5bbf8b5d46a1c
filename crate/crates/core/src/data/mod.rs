//! WAV I/O, SNR-controlled mixing, segmentation and the synthetic toy corpus.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mixture SNRs in dB: -5 to 20 in steps of 5.
pub const SNR_GRID: [f64; 6] = [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0];

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav(format!("{}: {e}", path.display()))
}

/// Reads PCM16 or float32 WAV, keeping the first channel, scaled to [-1, 1].
pub fn load_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        (fmt, bits) => {
            return Err(wav_err(
                path,
                format!("unsupported sample format {fmt:?} with {bits} bits (need PCM16 or float32)"),
            ))
        }
    };
    Ok((samples, spec.sample_rate))
}

/// PCM16 quantization: round half away from zero, clip to the representable range.
pub fn quantize_pcm16(v: f64) -> i16 {
    (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes mono PCM16.
pub fn save_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        w.write_sample(quantize_pcm16(s)).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Scales `noise` so that `10 log10(P_clean / P_noise) = snr_db`; returns `(noisy, scaled_noise)`.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if clean.len() != noise.len() {
        return Err(Error::InvalidArgument(format!(
            "mix_at_snr: clean has {} samples, noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let (pc, pn) = (power(clean), power(noise));
    if pc == 0.0 {
        return Err(Error::InvalidArgument("mix_at_snr: clean segment is silent".into()));
    }
    if pn == 0.0 {
        return Err(Error::InvalidArgument("mix_at_snr: noise segment is silent".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("mix_at_snr: snr_db = {snr_db}")));
    }
    let g = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.iter().map(|v| g * v).collect();
    let noisy = clean.iter().zip(&scaled).map(|(c, n)| c + n).collect();
    Ok((noisy, scaled))
}

/// Repeats `noise` from `offset` until it covers `len` samples, then trims.
pub fn loop_to_length(noise: &[f64], len: usize, offset: usize) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::InvalidArgument("cannot loop an empty noise signal".into()));
    }
    Ok((0..len).map(|i| noise[(offset + i) % noise.len()]).collect())
}

/// One training example before mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub clean: Vec<f64>,
    pub noise: Vec<f64>,
    pub snr_db: f64,
    pub segment_seconds: f64,
    pub sample_rate: u32,
}

/// A mixed pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
    pub snr_db: f64,
}

impl MixtureSpec {
    pub fn mix(&self) -> Result<Example> {
        let (noisy, _) = mix_at_snr(&self.clean, &self.noise, self.snr_db)?;
        Ok(Example {
            noisy,
            clean: self.clean.clone(),
            snr_db: self.snr_db,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            _ => Err(Error::Config(format!("unknown noise kind '{s}' (white or pink)"))),
        }
    }
}

/// Synthetic corpus: harmonic tones with slow amplitude envelopes in white or pink noise.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusConfig {
    pub num_examples: usize,
    pub seed: u64,
    /// Inclusive range of harmonics per clean signal.
    pub tone_count: (usize, usize),
    /// Fundamental frequency range in Hz.
    pub fundamental_hz: (f64, f64),
    pub noise: NoiseKind,
    pub clip_seconds: f64,
    pub sample_rate: u32,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            num_examples: 16,
            seed: 0,
            tone_count: (1, 3),
            fundamental_hz: (150.0, 500.0),
            noise: NoiseKind::White,
            clip_seconds: 0.25,
            sample_rate: 16_000,
        }
    }
}

impl ToyCorpusConfig {
    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tone_count;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("tone_count range {lo}..={hi} is invalid")));
        }
        let (f0, f1) = self.fundamental_hz;
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(f0 > 0.0 && f0 <= f1 && f1 * hi as f64 <= 0.9 * nyquist) {
            return Err(Error::Config(format!(
                "fundamental range {f0}..{f1} Hz with {hi} harmonics must stay below 0.9 x Nyquist"
            )));
        }
        if self.num_examples == 0 || self.clip_len() == 0 {
            return Err(Error::Config("toy corpus needs examples of nonzero length".into()));
        }
        Ok(())
    }
}

fn tone(rng: &mut ChaCha8Rng, cfg: &ToyCorpusConfig, len: usize) -> Vec<f64> {
    let sr = cfg.sample_rate as f64;
    let n = rng.gen_range(cfg.tone_count.0..=cfg.tone_count.1);
    let f0 = rng.gen_range(cfg.fundamental_hz.0..=cfg.fundamental_hz.1);
    let partials: Vec<(f64, f64, f64)> = (1..=n)
        .map(|k| (k as f64 * f0, rng.gen_range(0.3..1.0) / k as f64, rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let env_rate = rng.gen_range(1.0..4.0);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    (0..len)
        .map(|i| {
            let t = i as f64 / sr;
            let env = 0.55 + 0.45 * (2.0 * PI * env_rate * t + env_phase).sin();
            env * partials.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum::<f64>() * 0.5
        })
        .collect()
}

fn noise(rng: &mut ChaCha8Rng, kind: NoiseKind, len: usize) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    match kind {
        NoiseKind::White => white,
        NoiseKind::Pink => {
            // Kellet's economy 1/f filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .into_iter()
                .map(|w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    (b0 + b1 + b2 + w * 0.1848) * 0.25
                })
                .collect()
        }
    }
}

/// Generator for example `index`; independent of how many other examples are drawn.
fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Deterministic synthetic corpus; SNRs drawn uniformly from [`SNR_GRID`].
pub fn make_toy_corpus(cfg: &ToyCorpusConfig) -> Result<Vec<MixtureSpec>> {
    cfg.validate()?;
    let len = cfg.clip_len();
    Ok((0..cfg.num_examples)
        .map(|i| {
            let mut rng = example_rng(cfg.seed, i);
            let clean = tone(&mut rng, cfg, len);
            let noise = noise(&mut rng, cfg.noise, len);
            let snr_db = *SNR_GRID.choose(&mut rng).expect("grid is non-empty");
            MixtureSpec {
                clean,
                noise,
                snr_db,
                segment_seconds: cfg.clip_seconds,
                sample_rate: cfg.sample_rate,
            }
        })
        .collect())
}

/// Fixed-length windows of a signal plus what is needed to undo the split.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    pub segments: Vec<Vec<f64>>,
    pub original_len: usize,
    pub hop: usize,
}

/// Splits into `seconds`-long windows every `hop_seconds`, zero-padding the tail.
pub fn segment(waveform: &[f64], sample_rate: u32, seconds: f64, hop_seconds: f64) -> Result<Segments> {
    if !(seconds > 0.0 && hop_seconds > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "segment length ({seconds} s) and hop ({hop_seconds} s) must be positive"
        )));
    }
    let len = (seconds * sample_rate as f64).round() as usize;
    let hop = (hop_seconds * sample_rate as f64).round() as usize;
    if len == 0 || hop == 0 {
        return Err(Error::InvalidArgument("segment or hop shorter than one sample".into()));
    }
    let count = if waveform.len() <= len {
        1
    } else {
        (waveform.len() - len).div_ceil(hop) + 1
    };
    let segments = (0..count)
        .map(|k| {
            let start = k * hop;
            (start..start + len).map(|i| waveform.get(i).copied().unwrap_or(0.0)).collect()
        })
        .collect();
    Ok(Segments {
        segments,
        original_len: waveform.len(),
        hop,
    })
}

/// Overlap-averages segments back to the original length.
pub fn reassemble(segs: &Segments) -> Vec<f64> {
    let mut sum = vec![0.0; segs.original_len];
    let mut weight = vec![0usize; segs.original_len];
    for (k, s) in segs.segments.iter().enumerate() {
        for (j, v) in s.iter().enumerate() {
            let i = k * segs.hop + j;
            if i < segs.original_len {
                sum[i] += v;
                weight[i] += 1;
            }
        }
    }
    sum.iter().zip(&weight).map(|(s, &w)| if w > 0 { s / w as f64 } else { 0.0 }).collect()
}

/// One line of a real-data manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub snr_db: f64,
}

/// Reads one JSON object per line; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), n + 1)))?;
        for p in [&mut rec.clean, &mut rec.noise] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{}: manifest has no records", path.display())));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Config(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads every record, cuts clean speech into `seconds`-long segments and pairs each with
/// noise looped from a seeded offset. Silent clean segments are skipped.
pub fn manifest_corpus(records: &[ManifestRecord], seconds: f64, seed: u64) -> Result<Vec<MixtureSpec>> {
    let mut out = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let (clean, sr) = load_wav(&rec.clean)?;
        let (noise, nsr) = load_wav(&rec.noise)?;
        if sr != nsr {
            return Err(Error::Wav(format!(
                "{} is {sr} Hz but {} is {nsr} Hz",
                rec.clean.display(),
                rec.noise.display()
            )));
        }
        let mut rng = example_rng(seed, i);
        for seg in segment(&clean, sr, seconds, seconds)?.segments {
            if power(&seg) == 0.0 {
                continue;
            }
            let offset = rng.gen_range(0..noise.len().max(1));
            out.push(MixtureSpec {
                noise: loop_to_length(&noise, seg.len(), offset)?,
                clean: seg,
                snr_db: rec.snr_db,
                segment_seconds: seconds,
                sample_rate: sr,
            });
        }
    }
    Ok(out)
}
