use crate::config::{parse_bool, parse_num, KeyValues};
use crate::signal::{StftConfig, WindowKind};
use crate::{Error, Result};

/// Architectural hyperparameters and ablation switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_blocks: usize,
    pub dense_depth: usize,
    pub dilations: Vec<usize>,
    pub attention_heads: usize,
    pub conformer_kernel: usize,
    /// Hidden width of the conformer feed-forwards as a multiple of `channels`.
    pub ffn_mult: usize,
    /// Width of the conformer convolution module as a multiple of `channels`.
    pub conv_expansion: usize,
    pub alpha: f64,
    pub beta: f64,
    pub enable_cfb: bool,
    pub enable_t_conformer: bool,
    pub enable_f_conformer: bool,
    /// Power-law compression exponent applied to the input magnitude.
    pub compress: f64,
    pub stft: StftConfig,
}

/// Rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoCfb,
    NoTConformer,
    NoFConformer,
    NoBfb,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoCfb,
        Ablation::NoTConformer,
        Ablation::NoFConformer,
        Ablation::NoBfb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoCfb => "no_cfb",
            Ablation::NoTConformer => "no_t_conformer",
            Ablation::NoFConformer => "no_f_conformer",
            Ablation::NoBfb => "no_bfb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation '{s}', expected one of {}", names.join(", ")))
        })
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full_size()
    }
}

impl ModelConfig {
    /// Full-size configuration: 400-point window, four blocks, about 2.0M parameters.
    pub fn full_size() -> Self {
        ModelConfig {
            channels: 64,
            num_blocks: 4,
            dense_depth: 4,
            dilations: vec![1, 2, 4, 8],
            attention_heads: 4,
            conformer_kernel: 15,
            ffn_mult: 4,
            conv_expansion: 2,
            alpha: 0.5,
            beta: 0.5,
            enable_cfb: true,
            enable_t_conformer: true,
            enable_f_conformer: true,
            compress: 0.3,
            stft: StftConfig::default(),
        }
    }

    /// Small configuration for CPU training runs: C=8, one block, 64-point FFT.
    pub fn toy() -> Self {
        ModelConfig {
            channels: 8,
            num_blocks: 1,
            conformer_kernel: 7,
            stft: StftConfig {
                sample_rate: 16_000,
                n_fft: 64,
                win_length: 64,
                hop_length: 32,
                window: WindowKind::HannSqrt,
            },
            ..ModelConfig::full_size()
        }
    }

    /// Smallest configuration used for finite-difference checks: C=4, one block, 64-point FFT.
    pub fn gradcheck() -> Self {
        ModelConfig {
            channels: 4,
            attention_heads: 2,
            conformer_kernel: 3,
            ffn_mult: 2,
            ..ModelConfig::toy()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.enable_cfb = true;
        self.enable_t_conformer = true;
        self.enable_f_conformer = true;
        match ablation {
            Ablation::Full => {}
            Ablation::NoCfb => self.enable_cfb = false,
            Ablation::NoTConformer => self.enable_t_conformer = false,
            Ablation::NoFConformer => self.enable_f_conformer = false,
            Ablation::NoBfb => {
                self.enable_t_conformer = false;
                self.enable_f_conformer = false;
            }
        }
        self
    }

    /// Frequency bins `F` of the one-sided spectrum.
    pub fn f_bins(&self) -> usize {
        self.stft.n_bins()
    }

    /// Encoder frequency size `ceil(F / 2)`.
    pub fn f_half(&self) -> usize {
        self.f_bins().div_ceil(2)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.attention_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.stft.validate()?;
        if self.channels == 0 || self.num_blocks == 0 || self.dense_depth == 0 {
            return bad("channels, num_blocks and dense_depth must be positive".into());
        }
        if self.dilations.len() != self.dense_depth {
            return bad(format!(
                "dilations {:?} must have dense_depth = {} entries",
                self.dilations, self.dense_depth
            ));
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive".into());
        }
        if self.attention_heads == 0 || self.channels % self.attention_heads != 0 {
            return bad(format!(
                "attention_heads ({}) must divide channels ({})",
                self.attention_heads, self.channels
            ));
        }
        if self.conformer_kernel % 2 == 0 {
            return bad(format!("conformer_kernel must be odd, got {}", self.conformer_kernel));
        }
        if self.ffn_mult == 0 || self.conv_expansion == 0 {
            return bad("ffn_mult and conv_expansion must be positive".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.compress > 0.0 && self.compress <= 1.0) {
            return bad(format!("compress must be in (0, 1], got {}", self.compress));
        }
        if self.f_bins() % 2 == 0 {
            return bad(format!(
                "F = n_fft/2 + 1 = {} must be odd so that 2*ceil(F/2) - 1 == F (use n_fft divisible by 4)",
                self.f_bins()
            ));
        }
        if !self.enable_cfb && !self.enable_t_conformer && !self.enable_f_conformer {
            return bad("every branch is disabled: enable the CFB or at least one conformer".into());
        }
        Ok(())
    }

    /// Serializes to `model.*` / `stft.*` key-value pairs.
    pub fn to_key_values(&self) -> KeyValues {
        let dil: Vec<String> = self.dilations.iter().map(|d| d.to_string()).collect();
        let mut kv = KeyValues::new();
        kv.push("model.channels", self.channels);
        kv.push("model.num_blocks", self.num_blocks);
        kv.push("model.dense_depth", self.dense_depth);
        kv.push("model.dilations", dil.join(","));
        kv.push("model.attention_heads", self.attention_heads);
        kv.push("model.conformer_kernel", self.conformer_kernel);
        kv.push("model.ffn_mult", self.ffn_mult);
        kv.push("model.conv_expansion", self.conv_expansion);
        kv.push("model.alpha", self.alpha);
        kv.push("model.beta", self.beta);
        kv.push("model.enable_cfb", self.enable_cfb);
        kv.push("model.enable_t_conformer", self.enable_t_conformer);
        kv.push("model.enable_f_conformer", self.enable_f_conformer);
        kv.push("model.compress", self.compress);
        kv.push("stft.sample_rate", self.stft.sample_rate);
        kv.push("stft.n_fft", self.stft.n_fft);
        kv.push("stft.win_length", self.stft.win_length);
        kv.push("stft.hop_length", self.stft.hop_length);
        kv.push("stft.window", self.stft.window.name());
        kv
    }

    /// Applies one key. Returns `Ok(false)` when the key is not a model or STFT key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.channels" => self.channels = parse_num(key, value)?,
            "model.num_blocks" => self.num_blocks = parse_num(key, value)?,
            "model.dense_depth" => self.dense_depth = parse_num(key, value)?,
            "model.dilations" => {
                self.dilations = value
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "model.attention_heads" => self.attention_heads = parse_num(key, value)?,
            "model.conformer_kernel" => self.conformer_kernel = parse_num(key, value)?,
            "model.ffn_mult" => self.ffn_mult = parse_num(key, value)?,
            "model.conv_expansion" => self.conv_expansion = parse_num(key, value)?,
            "model.alpha" => self.alpha = parse_num(key, value)?,
            "model.beta" => self.beta = parse_num(key, value)?,
            "model.enable_cfb" => self.enable_cfb = parse_bool(key, value)?,
            "model.enable_t_conformer" => self.enable_t_conformer = parse_bool(key, value)?,
            "model.enable_f_conformer" => self.enable_f_conformer = parse_bool(key, value)?,
            "model.compress" => self.compress = parse_num(key, value)?,
            "stft.sample_rate" => self.stft.sample_rate = parse_num(key, value)?,
            "stft.n_fft" => self.stft.n_fft = parse_num(key, value)?,
            "stft.win_length" => self.stft.win_length = parse_num(key, value)?,
            "stft.hop_length" => self.stft.hop_length = parse_num(key, value)?,
            "stft.window" => self.stft.window = WindowKind::parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
