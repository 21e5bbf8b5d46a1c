use std::collections::HashMap;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::numerics::{Precision, Tensor};
use crate::{Error, Result};

const PRELU_INIT: f64 = 0.25;
/// Output heads start at a tenth of the Kaiming range so the untrained model is close to
/// a unit mask with no complex correction.
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    Kaiming { fan_in: usize },
    Uniform { bound: f64 },
    Zeros,
    Ones,
    Constant(f64),
}

/// Name, shape and initializer of one learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Top-level module the tensor belongs to: `encoder`, `block0.cfb`, `mask_decoder`, ...
    pub fn module(&self) -> &str {
        module_of(&self.name)
    }
}

pub(crate) fn module_of(name: &str) -> &str {
    let mut dots = name.match_indices('.').map(|(i, _)| i);
    let end = if name.starts_with("block") {
        dots.nth(1)
    } else {
        dots.next()
    };
    &name[..end.unwrap_or(name.len())]
}

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) {
        self.add(name, shape, Init::Kaiming { fan_in });
    }

    fn zeros(&mut self, name: String, n: usize) {
        self.add(name, &[n], Init::Zeros);
    }

    /// Normalization gain/bias plus PReLU slopes.
    fn norm_act(&mut self, p: &str, c: usize) {
        self.norm(&format!("{p}.norm"), c);
        self.add(format!("{p}.prelu"), &[c], Init::Constant(PRELU_INIT));
    }

    fn norm(&mut self, p: &str, c: usize) {
        self.add(format!("{p}.gain"), &[c], Init::Ones);
        self.zeros(format!("{p}.bias"), c);
    }

    fn linear(&mut self, p: &str, out: usize, inp: usize) {
        self.weight(format!("{p}.weight"), &[out, inp], inp);
        self.zeros(format!("{p}.bias"), out);
    }

    fn dense(&mut self, p: &str, cfg: &ModelConfig) {
        let c = cfg.channels;
        for i in 0..cfg.dense_depth {
            let cin = c * (i + 1);
            self.weight(format!("{p}.dense.{i}.weight"), &[c, cin, 2, 3], cin * 6);
            self.norm_act(&format!("{p}.dense.{i}"), c);
        }
    }

    fn conv_forward(&mut self, p: &str, c: usize) {
        self.linear(&format!("{p}.pw1"), 2 * c, c);
        self.weight(format!("{p}.dw.weight"), &[2 * c, 3], 3);
        self.zeros(format!("{p}.dw.bias"), 2 * c);
        self.linear(&format!("{p}.pw2"), c, 2 * c);
    }

    fn feed_forward(&mut self, p: &str, cfg: &ModelConfig) {
        let (c, h) = (cfg.channels, cfg.channels * cfg.ffn_mult);
        self.norm(&format!("{p}.norm"), c);
        self.linear(&format!("{p}.fc1"), h, c);
        self.linear(&format!("{p}.fc2"), c, h);
    }

    fn conformer(&mut self, p: &str, cfg: &ModelConfig) {
        let c = cfg.channels;
        self.feed_forward(&format!("{p}.ffn1"), cfg);
        self.norm(&format!("{p}.attn.norm"), c);
        self.linear(&format!("{p}.attn.query"), c, c);
        // a key bias only shifts each score row by a constant, which softmax discards
        self.weight(format!("{p}.attn.key.weight"), &[c, c], c);
        self.linear(&format!("{p}.attn.value"), c, c);
        self.linear(&format!("{p}.attn.out"), c, c);
        let (e, k) = (c * cfg.conv_expansion, cfg.conformer_kernel);
        self.norm(&format!("{p}.conv.norm"), c);
        self.linear(&format!("{p}.conv.pw1"), 2 * e, c);
        self.weight(format!("{p}.conv.dw.weight"), &[e, k], k);
        self.zeros(format!("{p}.conv.dw.bias"), e);
        self.norm(&format!("{p}.conv.dw_norm"), e);
        self.linear(&format!("{p}.conv.pw2"), c, e);
        self.feed_forward(&format!("{p}.ffn2"), cfg);
        self.norm(&format!("{p}.final_norm"), c);
    }

    fn decoder(&mut self, p: &str, cfg: &ModelConfig, outputs: usize, prelu_head: bool) {
        let c = cfg.channels;
        self.dense(p, cfg);
        self.weight(format!("{p}.up.weight"), &[c, c, 1, 3], c * 3);
        self.norm_act(&format!("{p}.up"), c);
        let bound = HEAD_INIT_SCALE * (6.0 / c as f64).sqrt();
        self.add(format!("{p}.head.weight"), &[outputs, c, 1, 1], Init::Uniform { bound });
        if prelu_head {
            self.add(format!("{p}.head.bias"), &[outputs], Init::Ones);
        } else {
            self.zeros(format!("{p}.head.bias"), outputs);
        }
        if prelu_head {
            self.add(format!("{p}.head.prelu"), &[outputs], Init::Constant(PRELU_INIT));
        }
    }
}

/// Every learnable tensor of `config`, in canonical order.
pub fn parameter_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let c = config.channels;
    let mut s = Specs(Vec::new());
    s.weight("encoder.in.weight".into(), &[c, 3, 1, 1], 3);
    s.zeros("encoder.in.bias".into(), c);
    s.norm_act("encoder.in", c);
    s.dense("encoder", config);
    s.weight("encoder.down.weight".into(), &[c, c, 1, 3], c * 3);
    s.norm_act("encoder.down", c);
    for b in 0..config.num_blocks {
        if config.enable_cfb {
            s.conv_forward(&format!("block{b}.cfb.ff_in"), c);
            s.weight(format!("block{b}.cfb.sca.query_gate"), &[c, 3], 3);
            s.weight(format!("block{b}.cfb.sca.key_gate"), &[c, 3], 3);
            s.conv_forward(&format!("block{b}.cfb.ff_out"), c);
        }
        if config.enable_t_conformer {
            s.conformer(&format!("block{b}.t_conformer"), config);
        }
        if config.enable_f_conformer {
            s.conformer(&format!("block{b}.f_conformer"), config);
        }
    }
    s.decoder("mask_decoder", config, 1, true);
    s.decoder("complex_decoder", config, 2, false);
    s.0
}

/// Parameter totals: overall and per top-level module.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterCount {
    pub total: usize,
    pub modules: Vec<(String, usize)>,
}

impl ParameterCount {
    pub fn module(&self, name: &str) -> usize {
        self.modules.iter().find(|(m, _)| m == name).map_or(0, |(_, n)| *n)
    }
}

pub fn count_parameters(config: &ModelConfig) -> ParameterCount {
    let mut modules: Vec<(String, usize)> = Vec::new();
    let mut total = 0;
    for spec in parameter_specs(config) {
        let n = spec.numel();
        total += n;
        match modules.iter_mut().find(|(m, _)| m == spec.module()) {
            Some(entry) => entry.1 += n,
            None => modules.push((spec.module().to_string(), n)),
        }
    }
    ParameterCount { total, modules }
}

/// Named learnable tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParameters {
    pub fn new() -> Self {
        ModelParameters::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter '{name}'")));
        }
        value.check_finite(name)?;
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Replaces a tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
        let old = &self.entries[i].1;
        if old.shape() != value.shape() {
            return Err(Error::shape(
                "set_parameter",
                format!("{name}: {:?} -> {:?}", old.shape(), value.shape()),
            ));
        }
        self.entries[i].1 = value;
        Ok(())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_precision(&self, precision: Precision) -> Self {
        let mut out = self.clone();
        for (_, t) in &mut out.entries {
            *t = t.clone().to_precision(precision);
        }
        out
    }

    /// Errors unless names, order and shapes match `config` exactly.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let specs = parameter_specs(config);
        if specs.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "config expects {} tensors, found {}",
                specs.len(),
                self.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.iter()) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {:?}, found {name} {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fresh single-precision parameters; deterministic in `seed`.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ModelParameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParameters::new();
    for spec in parameter_specs(config) {
        let n = spec.numel();
        let data = match spec.init {
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform { bound } => {
                let dist = Uniform::new_inclusive(-bound, bound);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(v) => vec![v; n],
        };
        params.insert(&spec.name, Tensor::with_precision(&spec.shape, data, Precision::Single)?)?;
    }
    Ok(params)
}
