//! STFT analysis/synthesis, power-law compression and network input packing.

use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

/// Magnitudes below this are treated as zero when rescaling real/imag parts.
const MAG_FLOOR: f64 = 1e-12;
const WSUM_FLOOR: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    HannSqrt,
    Hann,
    Hamming,
}

impl WindowKind {
    pub fn name(self) -> &'static str {
        match self {
            WindowKind::HannSqrt => "hann_sqrt",
            WindowKind::Hann => "hann",
            WindowKind::Hamming => "hamming",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann_sqrt" => Ok(WindowKind::HannSqrt),
            "hann" => Ok(WindowKind::Hann),
            "hamming" => Ok(WindowKind::Hamming),
            other => Err(Error::Config(format!("unknown window '{other}' (hann_sqrt|hann|hamming)"))),
        }
    }

    /// Periodic window of length `n`.
    fn coefficients(self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let phase = 2.0 * PI * i as f64 / n as f64;
                match self {
                    WindowKind::HannSqrt => (0.5 - 0.5 * phase.cos()).sqrt(),
                    WindowKind::Hann => 0.5 - 0.5 * phase.cos(),
                    WindowKind::Hamming => 0.54 - 0.46 * phase.cos(),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            sample_rate: 16_000,
            n_fft: 400,
            win_length: 400,
            hop_length: 100,
            window: WindowKind::HannSqrt,
        }
    }
}

impl StftConfig {
    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.n_fft / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_fft < 2 || self.n_fft % 2 != 0 {
            return Err(Error::Config(format!("n_fft must be even and >= 2, got {}", self.n_fft)));
        }
        if !(self.hop_length >= 1 && self.hop_length <= self.win_length && self.win_length <= self.n_fft) {
            return Err(Error::Config(format!(
                "need 1 <= hop_length ({}) <= win_length ({}) <= n_fft ({})",
                self.hop_length, self.win_length, self.n_fft
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    /// Window of length `n_fft`, zero-padded symmetrically around a `win_length` core.
    pub fn window(&self) -> Vec<f64> {
        let core = self.window.coefficients(self.win_length);
        let mut w = vec![0.0; self.n_fft];
        let off = (self.n_fft - self.win_length) / 2;
        w[off..off + self.win_length].copy_from_slice(&core);
        w
    }

    /// Spread of `sum_k w^2(n - k*hop)` over one steady-state period.
    pub fn cola_deviation(&self) -> f64 {
        let w = self.window();
        let sums: Vec<f64> = (0..self.hop_length)
            .map(|n| w.iter().skip(n).step_by(self.hop_length).map(|v| v * v).sum())
            .collect();
        let max = sums.iter().cloned().fold(f64::MIN, f64::max);
        let min = sums.iter().cloned().fold(f64::MAX, f64::min);
        max - min
    }

    /// Errors unless the squared window overlap-adds to a constant within 1e-6.
    pub fn check_cola(&self) -> Result<()> {
        self.validate()?;
        let dev = self.cola_deviation();
        if dev > 1e-6 {
            return Err(Error::Signal(format!(
                "{} window (win {}, hop {}) violates COLA: overlap-add spread {dev:.3e}",
                self.window.name(),
                self.win_length,
                self.hop_length
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self, len: usize) -> usize {
        1 + (len + 2 * self.pad() - self.n_fft) / self.hop_length
    }
}

/// One-sided complex spectrogram, `[T, F]` planes.
#[derive(Clone, Debug)]
pub struct ComplexSpectrogram {
    pub real: Tensor,
    pub imag: Tensor,
    pub config: StftConfig,
    pub original_length: usize,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.real.shape()[1]
    }

    pub fn magnitude(&self) -> Tensor {
        let data = self
            .real
            .data()
            .iter()
            .zip(self.imag.data())
            .map(|(r, i)| r.hypot(*i))
            .collect();
        Tensor::from_raw(self.real.shape().to_vec(), data, self.real.precision())
    }

    pub fn phase(&self) -> Tensor {
        let data = self
            .real
            .data()
            .iter()
            .zip(self.imag.data())
            .map(|(r, i)| i.atan2(*r))
            .collect();
        Tensor::from_raw(self.real.shape().to_vec(), data, self.real.precision())
    }

    fn map_bins(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let (re, im): (Vec<f64>, Vec<f64>) = self
            .real
            .data()
            .iter()
            .zip(self.imag.data())
            .map(|(&r, &i)| f(r, i))
            .unzip();
        let shape = self.real.shape().to_vec();
        let p = self.real.precision();
        ComplexSpectrogram {
            real: Tensor::from_raw(shape.clone(), re, p),
            imag: Tensor::from_raw(shape, im, p),
            config: self.config,
            original_length: self.original_length,
        }
    }
}

struct FftPair {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        FftPair {
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }
}

fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    out.extend((0..pad).map(|i| x[pad - i]));
    out.extend_from_slice(x);
    out.extend((0..pad).map(|i| x[n - 2 - i]));
    out
}

pub fn stft(waveform: &[f64], config: &StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    let len = waveform.len();
    let min_len = config.win_length.max(config.pad() + 1);
    if len < min_len {
        return Err(Error::Signal(format!(
            "waveform of {len} samples is too short; need at least {min_len}"
        )));
    }
    let n = config.n_fft;
    let bins = config.n_bins();
    let window = config.window();
    let padded = reflect_pad(waveform, config.pad());
    let frames = config.num_frames(len);
    let fft = FftPair::new(n);
    let mut re = Vec::with_capacity(frames * bins);
    let mut im = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        let start = t * config.hop_length;
        for (j, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + j] * window[j], 0.0);
        }
        fft.forward.process(&mut buf);
        for c in &buf[..bins] {
            re.push(c.re);
            im.push(c.im);
        }
    }
    Ok(ComplexSpectrogram {
        real: Tensor::new(&[frames, bins], re)?,
        imag: Tensor::new(&[frames, bins], im)?,
        config: *config,
        original_length: len,
    })
}

/// Overlap-add synthesis plan shared by [`istft`] and the differentiable op.
struct Synthesis {
    config: StftConfig,
    frames: usize,
    original_length: usize,
    window: Vec<f64>,
    /// `1 / sum_t w^2` over padded positions, zero where uncovered.
    inv_wsum: Vec<f64>,
    fft: FftPair,
}

impl Synthesis {
    fn new(config: &StftConfig, frames: usize, original_length: usize) -> Result<Self> {
        config.check_cola()?;
        let n = config.n_fft;
        let padded_len = n + (frames - 1) * config.hop_length;
        if padded_len < config.pad() + original_length {
            return Err(Error::Signal(format!(
                "{frames} frames cannot cover {original_length} samples"
            )));
        }
        let window = config.window();
        let mut wsum = vec![0.0; padded_len];
        for t in 0..frames {
            for (j, w) in window.iter().enumerate() {
                wsum[t * config.hop_length + j] += w * w;
            }
        }
        let inv_wsum = wsum.iter().map(|&s| if s > WSUM_FLOOR { 1.0 / s } else { 0.0 }).collect();
        Ok(Synthesis {
            config: *config,
            frames,
            original_length,
            window,
            inv_wsum,
            fft: FftPair::new(n),
        })
    }

    /// `re`/`im` are `[frames, bins]` row-major.
    fn run(&self, re: &[f64], im: &[f64]) -> Vec<f64> {
        let n = self.config.n_fft;
        let bins = self.config.n_bins();
        let hop = self.config.hop_length;
        let mut acc = vec![0.0; self.inv_wsum.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..self.frames {
            let row = t * bins;
            buf[0] = Complex64::new(re[row], 0.0);
            buf[n / 2] = Complex64::new(re[row + n / 2], 0.0);
            for k in 1..n / 2 {
                let c = Complex64::new(re[row + k], im[row + k]);
                buf[k] = c;
                buf[n - k] = c.conj();
            }
            self.fft.inverse.process(&mut buf);
            for j in 0..n {
                acc[t * hop + j] += buf[j].re / n as f64 * self.window[j];
            }
        }
        let pad = self.config.pad();
        (0..self.original_length)
            .map(|i| acc[pad + i] * self.inv_wsum[pad + i])
            .collect()
    }

    /// Adjoint of [`Synthesis::run`]: waveform gradient to (re, im) gradients.
    fn adjoint(&self, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.config.n_fft;
        let bins = self.config.n_bins();
        let hop = self.config.hop_length;
        let pad = self.config.pad();
        let mut scaled = vec![0.0; self.inv_wsum.len()];
        for (i, g) in grad.iter().enumerate() {
            scaled[pad + i] = g * self.inv_wsum[pad + i];
        }
        let mut gre = vec![0.0; self.frames * bins];
        let mut gim = vec![0.0; self.frames * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..self.frames {
            for j in 0..n {
                buf[j] = Complex64::new(scaled[t * hop + j] * self.window[j] / n as f64, 0.0);
            }
            self.fft.forward.process(&mut buf);
            let row = t * bins;
            gre[row] = buf[0].re;
            gre[row + n / 2] = buf[n / 2].re;
            for k in 1..n / 2 {
                gre[row + k] = 2.0 * buf[k].re;
                gim[row + k] = 2.0 * buf[k].im;
            }
        }
        (gre, gim)
    }
}

/// Inverse STFT with windowed overlap-add, trimmed to `original_length`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    let frames = spec.frames();
    if spec.bins() != spec.config.n_bins() || spec.imag.shape() != spec.real.shape() || frames == 0 {
        return Err(Error::Signal(format!(
            "spectrogram {:?}/{:?} does not match n_fft {}",
            spec.real.shape(),
            spec.imag.shape(),
            spec.config.n_fft
        )));
    }
    let synth = Synthesis::new(&spec.config, frames, spec.original_length)?;
    Ok(synth.run(spec.real.data(), spec.imag.data()))
}

struct IstftOp {
    synth: Synthesis,
    batch: usize,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let len = self.synth.original_length;
        let mut gre = Vec::new();
        let mut gim = Vec::new();
        for b in 0..self.batch {
            let (r, i) = self.synth.adjoint(&grad_out[b * len..(b + 1) * len]);
            gre.extend(r);
            gim.extend(i);
        }
        Ok(vec![Some(gre), Some(gim)])
    }
}

/// Differentiable inverse STFT of `[B, T, F]` real/imag planes into `[B, L]`.
pub fn istft_var<'g>(
    graph: &'g Graph,
    real: Var<'g>,
    imag: Var<'g>,
    config: &StftConfig,
    original_length: usize,
) -> Result<Var<'g>> {
    let shape = real.shape();
    if shape.len() != 3 || imag.shape() != shape || shape[2] != config.n_bins() {
        return Err(Error::shape(
            "istft",
            format!("real {:?}, imag {:?}, expected [B, T, {}]", shape, imag.shape(), config.n_bins()),
        ));
    }
    let (batch, frames, bins) = (shape[0], shape[1], shape[2]);
    let synth = Synthesis::new(config, frames, original_length)?;
    let (mut out, precision) = {
        let (re, im) = (real.value(), imag.value());
        let mut out = Vec::with_capacity(batch * original_length);
        for b in 0..batch {
            let span = b * frames * bins..(b + 1) * frames * bins;
            out.extend(synth.run(&re.data()[span.clone()], &im.data()[span]));
        }
        (out, re.precision().join(im.precision()))
    };
    precision.round_all(&mut out);
    let output = Tensor::with_precision(&[batch, original_length], out, precision)?;
    Ok(graph.custom(&[real, imag], output, Rc::new(IstftOp { synth, batch })))
}

fn check_exponent(c: f64) -> Result<()> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::InvalidArgument(format!("compression exponent must be in (0, 1], got {c}")));
    }
    Ok(())
}

fn rescale_magnitude(spec: &ComplexSpectrogram, exponent: f64) -> ComplexSpectrogram {
    spec.map_bins(|r, i| {
        let m = r.hypot(i);
        if m < MAG_FLOOR {
            (0.0, 0.0)
        } else {
            let s = m.powf(exponent - 1.0);
            (r * s, i * s)
        }
    })
}

/// Maps magnitude `m -> m^c`, keeping phase.
pub fn power_compress(spec: &ComplexSpectrogram, c: f64) -> Result<ComplexSpectrogram> {
    check_exponent(c)?;
    Ok(rescale_magnitude(spec, c))
}

/// Inverse of [`power_compress`]: magnitude `m -> m^(1/c)`.
pub fn power_decompress(spec: &ComplexSpectrogram, c: f64) -> Result<ComplexSpectrogram> {
    check_exponent(c)?;
    Ok(rescale_magnitude(spec, 1.0 / c))
}

/// Network input: compressed (magnitude, real, imag) on a trailing axis plus the raw phase.
#[derive(Clone, Debug)]
pub struct NetworkInput {
    /// `[B, T, F, 3]`
    pub packed: Tensor,
    /// `[B, T, F]`, uncompressed phase.
    pub phase: Tensor,
}

impl NetworkInput {
    pub fn batch(&self) -> usize {
        self.packed.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.packed.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.packed.shape()[2]
    }

    /// Compressed magnitude plane `[B, T, F]`.
    pub fn magnitude(&self) -> Tensor {
        let data = self.packed.data().iter().step_by(3).copied().collect();
        Tensor::from_raw(self.phase.shape().to_vec(), data, self.packed.precision())
    }

    /// Concatenates single-item inputs along the batch axis.
    pub fn stack(items: &[NetworkInput]) -> Result<NetworkInput> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let per = first.packed.shape()[1..].to_vec();
        let mut packed = Vec::new();
        let mut phase = Vec::new();
        let mut batch = 0;
        for it in items {
            if it.packed.shape()[1..] != per[..] {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", it.packed.shape(), first.packed.shape()),
                ));
            }
            packed.extend_from_slice(it.packed.data());
            phase.extend_from_slice(it.phase.data());
            batch += it.batch();
        }
        let mut pshape = vec![batch];
        pshape.extend(&per);
        Ok(NetworkInput {
            packed: Tensor::new(&pshape, packed)?,
            phase: Tensor::new(&pshape[..3], phase)?,
        })
    }
}

/// Compresses `spec` and stacks (magnitude, real, imag) into a batch-of-one input.
pub fn pack_input(spec: &ComplexSpectrogram, c: f64) -> Result<NetworkInput> {
    let compressed = power_compress(spec, c)?;
    let (t, f) = (spec.frames(), spec.bins());
    let mut packed = Vec::with_capacity(t * f * 3);
    for (r, i) in compressed.real.data().iter().zip(compressed.imag.data()) {
        packed.push(r.hypot(*i));
        packed.push(*r);
        packed.push(*i);
    }
    Ok(NetworkInput {
        packed: Tensor::new(&[1, t, f, 3], packed)?,
        phase: spec.phase().reshape(&[1, t, f])?,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{finite_difference_gradients, max_relative_error};

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct O(N^2) DFT of one windowed frame.
    fn dft_frame(frame: &[f64]) -> Vec<(f64, f64)> {
        let n = frame.len();
        (0..=n / 2)
            .map(|k| {
                frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (j, x)| {
                    let a = -2.0 * PI * (k * j) as f64 / n as f64;
                    (re + x * a.cos(), im + x * a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn defaults_are_cola_and_201_bins() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.n_bins(), 201);
        assert!(cfg.cola_deviation() < 1e-6);
        cfg.check_cola().unwrap();
        for kind in [WindowKind::Hann, WindowKind::Hamming] {
            let c = StftConfig { window: kind, ..cfg };
            c.check_cola().unwrap();
        }
        let bad = StftConfig { hop_length: 300, ..cfg };
        assert!(bad.check_cola().is_err());
    }

    #[test]
    fn zero_waveform_gives_zero_planes() {
        let spec = stft(&vec![0.0; 1600], &StftConfig::default()).unwrap();
        assert!(spec.real.data().iter().chain(spec.imag.data()).all(|v| *v == 0.0));
        assert_eq!(spec.frames(), 17);
    }

    #[test]
    fn constant_signal_energy_in_dc() {
        let cfg = StftConfig::default();
        let spec = stft(&vec![1.0; 1600], &cfg).unwrap();
        let f = spec.bins();
        let mag = spec.magnitude();
        // oracle: a constant frame's spectrum is the DFT of the window itself
        let oracle: Vec<f64> = dft_frame(&cfg.window()).into_iter().map(|(r, i)| r.hypot(i)).collect();
        let energy = |row: &[f64], upto: usize| row[..upto].iter().map(|m| m * m).sum::<f64>();
        let oracle_total = energy(&oracle, f);
        for t in 2..spec.frames() - 2 {
            let row = &mag.data()[t * f..(t + 1) * f];
            for (a, b) in row.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9);
            }
            let total = energy(row, f);
            assert!((energy(row, 1) / total - energy(&oracle, 1) / oracle_total).abs() < 1e-12);
            assert!(energy(row, 1) / total > 0.89);
            // sqrt-Hann main lobe spans bins 0 and 1
            assert!(energy(row, 2) / total > 0.99);
        }
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let cfg = StftConfig::default();
        let x: Vec<f64> = (0..6400).map(|i| (2.0 * PI * 400.0 * i as f64 / 16000.0).sin()).collect();
        let spec = stft(&x, &cfg).unwrap();
        let mag = spec.magnitude();
        let f = spec.bins();
        // frames lying entirely inside the signal (no reflected samples)
        let first = cfg.pad().div_ceil(cfg.hop_length);
        let last = (x.len() + cfg.pad() - cfg.n_fft) / cfg.hop_length;
        for t in first..=last {
            let row = &mag.data()[t * f..(t + 1) * f];
            let arg = (0..f).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, 10, "frame {t}");
        }
    }

    #[test]
    fn stft_matches_direct_dft() {
        let cfg = StftConfig { n_fft: 16, win_length: 16, hop_length: 4, ..Default::default() };
        let x = noise(40, 3);
        let spec = stft(&x, &cfg).unwrap();
        let padded = reflect_pad(&x, 8);
        let w = cfg.window();
        for t in 0..spec.frames() {
            let frame: Vec<f64> = (0..16).map(|j| padded[t * 4 + j] * w[j]).collect();
            for (k, (re, im)) in dft_frame(&frame).into_iter().enumerate() {
                assert!((spec.real.get(&[t, k]) - re).abs() < 1e-10);
                assert!((spec.imag.get(&[t, k]) - im).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn too_short_input_names_minimum() {
        let err = stft(&[0.0; 100], &StftConfig::default()).unwrap_err().to_string();
        assert!(err.contains("400"), "{err}");
    }

    #[test]
    fn roundtrip_lengths() {
        let cfg = StftConfig::default();
        for len in [400, 6400, 64000] {
            let x = noise(len, len as u64);
            let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
            assert_eq!(y.len(), len);
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "len {len}: {err}");
        }
    }

    #[test]
    fn istft_of_zero_is_zero() {
        let cfg = StftConfig::default();
        let mut spec = stft(&vec![0.0; 800], &cfg).unwrap();
        spec.real = Tensor::zeros(spec.real.shape());
        assert!(istft(&spec).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn istft_rejects_cola_violation() {
        let cfg = StftConfig::default();
        let mut spec = stft(&noise(800, 1), &cfg).unwrap();
        spec.config.window = WindowKind::Hamming;
        spec.config.hop_length = 150;
        assert!(istft(&spec).is_err());
    }

    #[test]
    fn amplitude_scaling_is_linear() {
        let cfg = StftConfig::default();
        let x = noise(2000, 5);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (m1, m2) = (stft(&x, &cfg).unwrap().magnitude(), stft(&x2, &cfg).unwrap().magnitude());
        for (a, b) in m1.data().iter().zip(m2.data()) {
            assert!((2.0 * a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn compression_examples() {
        let cfg = StftConfig::default();
        let one = |r: f64, i: f64| ComplexSpectrogram {
            real: Tensor::new(&[1, 1], vec![r]).unwrap(),
            imag: Tensor::new(&[1, 1], vec![i]).unwrap(),
            config: cfg,
            original_length: 0,
        };
        let s = power_compress(&one(0.6, 0.8), 0.3).unwrap();
        assert!((s.magnitude().data()[0] - 1.0).abs() < 1e-12);
        let s = power_compress(&one(0.3, -2.0), 1.0).unwrap();
        assert_eq!((s.real.data()[0], s.imag.data()[0]), (0.3, -2.0));
        let s = power_compress(&one(100.0, 0.0), 0.3).unwrap();
        assert!((s.real.data()[0] - 3.98107).abs() < 1e-5);
        assert!(power_compress(&one(1.0, 0.0), 0.0).is_err());
        assert!(power_compress(&one(1.0, 0.0), -0.5).is_err());
        let z = power_compress(&one(1e-13, 0.0), 0.3).unwrap();
        assert_eq!(z.real.data()[0], 0.0);
    }

    #[test]
    fn compress_decompress_inverse() {
        let cfg = StftConfig::default();
        let spec = stft(&noise(1200, 9), &cfg).unwrap();
        for c in [0.3, 0.5, 1.0] {
            let back = power_decompress(&power_compress(&spec, c).unwrap(), c).unwrap();
            for (a, b) in spec.real.data().iter().zip(back.real.data()) {
                assert!((a - b).abs() <= 1e-5 * a.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn pack_input_examples() {
        let cfg = StftConfig::default();
        let zero = stft(&vec![0.0; 800], &cfg).unwrap();
        let p = pack_input(&zero, 0.3).unwrap();
        assert_eq!(p.packed.shape(), &[1, zero.frames(), 201, 3]);
        assert!(p.packed.data().iter().chain(p.phase.data()).all(|v| *v == 0.0));

        let spec = ComplexSpectrogram {
            real: Tensor::new(&[1, 1], vec![3.0]).unwrap(),
            imag: Tensor::new(&[1, 1], vec![4.0]).unwrap(),
            config: cfg,
            original_length: 0,
        };
        assert_eq!(pack_input(&spec, 1.0).unwrap().packed.data(), &[5.0, 3.0, 4.0]);
        let p = pack_input(&spec, 0.3).unwrap();
        let want = [1.6207, 0.9724, 1.2966];
        for (a, b) in p.packed.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!((p.phase.data()[0] - 4f64.atan2(3.0)).abs() < 1e-12);
    }

    #[test]
    fn packed_magnitude_consistent() {
        let spec = stft(&noise(3000, 11), &StftConfig::default()).unwrap();
        let p = pack_input(&spec, 0.3).unwrap();
        for c in p.packed.data().chunks(3) {
            assert!((c[0] - c[1].hypot(c[2])).abs() < 1e-5);
        }
    }

    #[test]
    fn istft_op_gradient_matches_finite_differences() {
        let cfg = StftConfig { n_fft: 16, win_length: 16, hop_length: 4, ..Default::default() };
        let len = 30;
        let spec = stft(&noise(len, 4), &cfg).unwrap();
        let (t, f) = (spec.frames(), spec.bins());
        let probe = noise(len, 5);
        let loss = |re: &Tensor, im: &Tensor, g: &Graph| -> Result<f64> {
            let y = istft_var(
                g,
                g.constant(re.clone().reshape(&[1, t, f])?),
                g.constant(im.clone().reshape(&[1, t, f])?),
                &cfg,
                len,
            )?;
            let v = y.value();
            Ok(v.data().iter().zip(&probe).map(|(a, b)| a * b).sum())
        };
        let g = Graph::new();
        let re = g.parameter(spec.real.clone().reshape(&[1, t, f]).unwrap());
        let im = g.parameter(spec.imag.clone().reshape(&[1, t, f]).unwrap());
        let y = istft_var(&g, re, im, &cfg, len).unwrap();
        let obj = y.mul(g.constant(Tensor::new(&[1, len], probe.clone()).unwrap())).unwrap().sum();
        let grads = g.backward(obj).unwrap();
        let fd_re = finite_difference_gradients(|x| loss(x, &spec.imag, &Graph::untracked()), &spec.real, 1e-5).unwrap();
        let fd_im = finite_difference_gradients(|x| loss(&spec.real, x, &Graph::untracked()), &spec.imag, 1e-5).unwrap();
        assert!(max_relative_error(grads.get(re).unwrap().data(), fd_re.data()) < 1e-4);
        // imag of DC/Nyquist is discarded: both routes give exactly zero there
        assert!(max_relative_error(grads.get(im).unwrap().data(), fd_im.data()) < 1e-4);
    }
}
