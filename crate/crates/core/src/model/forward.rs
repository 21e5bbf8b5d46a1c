use std::cell::Cell;
use std::collections::HashMap;

use super::{ModelConfig, ModelParameters};
use crate::numerics::{Conv2dOptions, Graph, Tensor, Var};
use crate::signal::{istft_var, pack_input, stft, NetworkInput};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Model parameters bound into one graph, plus the forward operations.
pub struct Network<'g> {
    graph: &'g Graph,
    config: ModelConfig,
    vars: Vec<(String, Var<'g>)>,
    index: HashMap<String, usize>,
    cfb_calls: Cell<usize>,
}

impl<'g> Network<'g> {
    /// Registers every tensor of `params` as a graph parameter.
    pub fn bind(graph: &'g Graph, config: &ModelConfig, params: &ModelParameters) -> Result<Self> {
        config.validate()?;
        params.check_against(config)?;
        let mut vars = Vec::with_capacity(params.len());
        let mut index = HashMap::with_capacity(params.len());
        for (i, (name, t)) in params.iter().enumerate() {
            vars.push((name.to_string(), graph.parameter(t.clone())));
            index.insert(name.to_string(), i);
        }
        Ok(Network {
            graph,
            config: config.clone(),
            vars,
            index,
            cfb_calls: Cell::new(0),
        })
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i].1)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named '{name}'")))
    }

    /// Bound parameters in canonical order.
    pub fn parameters(&self) -> &[(String, Var<'g>)] {
        &self.vars
    }

    /// How many times the channel branch has run since binding.
    pub fn cfb_evaluations(&self) -> usize {
        self.cfb_calls.get()
    }

    fn norm_act(&self, x: Var<'g>, p: &str) -> Result<Var<'g>> {
        let y = x.instance_norm(self.param(&format!("{p}.norm.gain"))?, self.param(&format!("{p}.norm.bias"))?, NORM_EPS)?;
        y.prelu(self.param(&format!("{p}.prelu"))?, 1)
    }

    fn layer_norm(&self, x: Var<'g>, p: &str) -> Result<Var<'g>> {
        x.layer_norm(self.param(&format!("{p}.gain"))?, self.param(&format!("{p}.bias"))?, NORM_EPS)
    }

    fn linear(&self, x: Var<'g>, p: &str) -> Result<Var<'g>> {
        x.linear(self.param(&format!("{p}.weight"))?, Some(self.param(&format!("{p}.bias"))?))
    }

    /// Densely connected stack of `[B, C, T, F']` convolutions with time dilations.
    pub fn dilated_dense(&self, x: Var<'g>, prefix: &str) -> Result<Var<'g>> {
        let c = self.config.channels;
        if x.shape().len() != 4 || x.shape()[1] != c {
            return Err(Error::shape(
                "dilated_dense",
                format!("input {:?} must be [B, {c}, T, F]", x.shape()),
            ));
        }
        let mut feats = vec![x];
        let mut out = x;
        for (i, &d) in self.config.dilations.iter().enumerate() {
            let input = if i == 0 { x } else { Var::concat(&feats, 1)? };
            let opts = Conv2dOptions {
                stride: (1, 1),
                dilation: (d, 1),
                padding: [d, 0, 1, 1],
            };
            let p = format!("{prefix}.dense.{i}");
            out = input.conv2d(self.param(&format!("{p}.weight"))?, None, opts)?;
            out = self.norm_act(out, &p)?;
            feats.push(out);
        }
        Ok(out)
    }

    /// `[B, T, F, 3]` packed input to `[B, C, T, ceil(F/2)]` features.
    pub fn encoder(&self, input: &NetworkInput) -> Result<Var<'g>> {
        let f = self.config.f_bins();
        if input.packed.rank() != 4 || input.bins() != f || input.packed.shape()[3] != 3 {
            return Err(Error::Config(format!(
                "encoder expects [B, T, {f}, 3] input, got {:?}",
                input.packed.shape()
            )));
        }
        let x = self.graph.constant(input.packed.clone()).permute(&[0, 3, 1, 2])?;
        let x = x.conv2d(
            self.param("encoder.in.weight")?,
            Some(self.param("encoder.in.bias")?),
            Conv2dOptions::default(),
        )?;
        let x = self.norm_act(x, "encoder.in")?;
        let x = self.dilated_dense(x, "encoder")?;
        let down = Conv2dOptions {
            stride: (1, 2),
            dilation: (1, 1),
            padding: [0, 0, 1, 1],
        };
        let x = x.conv2d(self.param("encoder.down.weight")?, None, down)?;
        self.norm_act(x, "encoder.down")
    }

    /// Returns `(F_out, W)` for `F_in: [B, C, N]`; `W: [B, C, C]` has unit row sums.
    pub fn self_channel_attention(&self, x: Var<'g>, prefix: &str) -> Result<(Var<'g>, Var<'g>)> {
        if x.shape().len() != 3 {
            return Err(Error::shape("self_channel_attention", format!("input {:?} must be [B, C, N]", x.shape())));
        }
        let gated = |gate: &str| -> Result<Var<'g>> {
            let g = x.depthwise_conv1d(self.param(&format!("{prefix}.{gate}"))?, None)?.softmax(2)?;
            x.mul(g)
        };
        let q = gated("query_gate")?;
        let k = gated("key_gate")?;
        let w = q.matmul(k.transpose()?)?.softmax(2)?;
        let out = w.matmul(x)?.add(x)?;
        Ok((out, w))
    }

    /// Pointwise expand, depthwise conv, swish, pointwise project, residual.
    pub fn conv_forward_block(&self, x: Var<'g>, prefix: &str) -> Result<Var<'g>> {
        let h = self.linear(x.transpose()?, &format!("{prefix}.pw1"))?.transpose()?;
        let h = h
            .depthwise_conv1d(
                self.param(&format!("{prefix}.dw.weight"))?,
                Some(self.param(&format!("{prefix}.dw.bias"))?),
            )?
            .swish();
        let h = self.linear(h.transpose()?, &format!("{prefix}.pw2"))?.transpose()?;
        x.add(h)
    }

    /// Channel branch of block `block`: `[B, C, T, F']` to `F_out: [B, C, T*F']`.
    pub fn cfb(&self, x: Var<'g>, block: usize) -> Result<Var<'g>> {
        self.cfb_calls.set(self.cfb_calls.get() + 1);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("cfb", format!("input {s:?} must be [B, C, T, F]")));
        }
        let p = format!("block{block}.cfb");
        let h = x.reshape(&[s[0], s[1], s[2] * s[3]])?;
        let h = self.conv_forward_block(h, &format!("{p}.ff_in"))?;
        let (h, _) = self.self_channel_attention(h, &format!("{p}.sca"))?;
        self.conv_forward_block(h, &format!("{p}.ff_out"))
    }

    fn feed_forward(&self, x: Var<'g>, p: &str) -> Result<Var<'g>> {
        let h = self.layer_norm(x, &format!("{p}.norm"))?;
        let h = self.linear(h, &format!("{p}.fc1"))?.swish();
        self.linear(h, &format!("{p}.fc2"))
    }

    fn attention(&self, query: Var<'g>, memory: Var<'g>, p: &str) -> Result<Var<'g>> {
        let q = self.linear(query, &format!("{p}.query"))?;
        let k = memory.linear(self.param(&format!("{p}.key.weight"))?, None)?;
        let v = self.linear(memory, &format!("{p}.value"))?;
        let ctx = q.multi_head_attention(k, v, self.config.attention_heads)?;
        self.linear(ctx, &format!("{p}.out"))
    }

    fn conv_module(&self, x: Var<'g>, p: &str) -> Result<Var<'g>> {
        let h = self.layer_norm(x, &format!("{p}.norm"))?;
        let h = self.linear(h, &format!("{p}.pw1"))?.glu()?.transpose()?;
        let h = h
            .depthwise_conv1d(
                self.param(&format!("{p}.dw.weight"))?,
                Some(self.param(&format!("{p}.dw.bias"))?),
            )?
            .transpose()?;
        let h = self.layer_norm(h, &format!("{p}.dw_norm"))?.swish();
        self.linear(h, &format!("{p}.pw2"))
    }

    /// One conformer over `[S, L, C]` sequences with the fused query.
    ///
    /// `memory` is the channel-branch output in the same layout; `None` means self-attention on `X_f`.
    pub fn conformer(&self, x: Var<'g>, memory: Option<Var<'g>>, prefix: &str) -> Result<Var<'g>> {
        let (alpha, beta) = (self.config.alpha, self.config.beta);
        let h = x.add(self.feed_forward(x, &format!("{prefix}.ffn1"))?.scale(0.5))?;
        let xf = self.layer_norm(h, &format!("{prefix}.attn.norm"))?;
        let mem = memory.unwrap_or(xf);
        if mem.shape() != xf.shape() {
            return Err(Error::shape(
                "band_branch",
                format!("sequence layout {:?} vs channel-branch layout {:?}", xf.shape(), mem.shape()),
            ));
        }
        let query = xf.scale(alpha).add(mem.scale(beta))?;
        let h = h.add(self.attention(query, mem, &format!("{prefix}.attn"))?)?;
        let h = h.add(self.conv_module(h, &format!("{prefix}.conv"))?)?;
        let h = h.add(self.feed_forward(h, &format!("{prefix}.ffn2"))?.scale(0.5))?;
        self.layer_norm(h, &format!("{prefix}.final_norm"))
    }

    /// Time conformer then frequency conformer, both attending to the same `F_out`.
    pub fn band_branch(&self, x: Var<'g>, f_out: Option<Var<'g>>, block: usize) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("band_branch", format!("input {s:?} must be [B, C, T, F]")));
        }
        let (b, c, t, f) = (s[0], s[1], s[2], s[3]);
        let f4 = match f_out {
            Some(v) => {
                if v.shape() != [b, c, t * f] {
                    return Err(Error::shape(
                        "band_branch",
                        format!("F_out {:?} does not unfold {s:?}", v.shape()),
                    ));
                }
                Some(v.reshape(&[b, c, t, f])?)
            }
            None => None,
        };
        let mut cur = x;
        if self.config.enable_t_conformer {
            let to_seq = |v: Var<'g>| v.permute(&[0, 3, 2, 1])?.reshape(&[b * f, t, c]);
            let mem = f4.map(to_seq).transpose()?;
            let y = self.conformer(to_seq(cur)?, mem, &format!("block{block}.t_conformer"))?;
            cur = y.reshape(&[b, f, t, c])?.permute(&[0, 3, 2, 1])?;
        }
        if self.config.enable_f_conformer {
            let to_seq = |v: Var<'g>| v.permute(&[0, 2, 3, 1])?.reshape(&[b * t, f, c]);
            let mem = f4.map(to_seq).transpose()?;
            let y = self.conformer(to_seq(cur)?, mem, &format!("block{block}.f_conformer"))?;
            cur = y.reshape(&[b, t, f, c])?.permute(&[0, 3, 1, 2])?;
        }
        Ok(cur)
    }

    /// One channel-aware dual-branch block; shape preserving.
    pub fn cadb_block(&self, x: Var<'g>, block: usize) -> Result<Var<'g>> {
        let cfg = &self.config;
        let f_out = if cfg.enable_cfb { Some(self.cfb(x, block)?) } else { None };
        if cfg.enable_t_conformer || cfg.enable_f_conformer {
            return self.band_branch(x, f_out, block);
        }
        match f_out {
            Some(f) => x.add(f.reshape(&x.shape())?),
            None => Err(Error::Config("block has neither a channel nor a band branch".into())),
        }
    }

    fn decoder(&self, x: Var<'g>, prefix: &str, outputs: usize) -> Result<Var<'g>> {
        let f = self.config.f_bins();
        let y = self.dilated_dense(x, prefix)?;
        let y = y.conv_transpose2d(self.param(&format!("{prefix}.up.weight"))?, None, (1, 2), (0, 1), (0, 0))?;
        if y.shape()[3] != f {
            return Err(Error::shape(
                "decoder",
                format!("up-sampled {} bins to {}, expected F = {f}", x.shape()[3], y.shape()[3]),
            ));
        }
        let y = self.norm_act(y, &format!("{prefix}.up"))?;
        let y = y.conv2d(
            self.param(&format!("{prefix}.head.weight"))?,
            Some(self.param(&format!("{prefix}.head.bias"))?),
            Conv2dOptions::default(),
        )?;
        debug_assert_eq!(y.shape()[1], outputs);
        Ok(y)
    }

    /// Magnitude mask `[B, T, F]` and complex spectrum `[B, T, F, 2]`.
    pub fn decoders(&self, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let s = x.shape();
        let (b, t) = (s[0], s[2]);
        let f = self.config.f_bins();
        let mask = self
            .decoder(x, "mask_decoder", 1)?
            .prelu(self.param("mask_decoder.head.prelu")?, 1)?
            .reshape(&[b, t, f])?;
        let complex = self.decoder(x, "complex_decoder", 2)?.permute(&[0, 2, 3, 1])?;
        Ok((mask, complex))
    }

    /// Encoder, blocks and decoders on a prepared input.
    pub fn forward_spectral(&self, input: &NetworkInput) -> Result<(Var<'g>, Var<'g>)> {
        let mut x = self.encoder(input)?;
        for b in 0..self.config.num_blocks {
            x = self.cadb_block(x, b)?;
        }
        self.decoders(x)
    }

    /// Enhanced waveform `[B, L]` for a noisy `[B, L]` batch.
    pub fn forward(&self, waveform: &Tensor) -> Result<Var<'g>> {
        let input = prepare_input(&self.config, waveform)?;
        let (mask, complex) = self.forward_spectral(&input)?;
        reconstruct(self.graph, mask, complex, &input, &self.config, waveform.shape()[1])
    }
}

/// STFT and compression of each row of a `[B, L]` batch.
pub fn prepare_input(config: &ModelConfig, waveform: &Tensor) -> Result<NetworkInput> {
    let s = waveform.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::shape("model_forward", format!("waveform {s:?} must be [B, L]")));
    }
    if s[1] < config.stft.win_length {
        return Err(Error::InvalidArgument(format!(
            "waveform length {} is shorter than the window ({})",
            s[1], config.stft.win_length
        )));
    }
    let items = waveform
        .data()
        .chunks(s[1])
        .map(|row| pack_input(&stft(row, &config.stft)?, config.compress))
        .collect::<Result<Vec<_>>>()?;
    NetworkInput::stack(&items)
}

/// Combines mask and complex outputs with the input phase, decompresses and inverts the STFT.
pub fn reconstruct<'g>(
    graph: &'g Graph,
    mask: Var<'g>,
    complex: Var<'g>,
    input: &NetworkInput,
    config: &ModelConfig,
    original_length: usize,
) -> Result<Var<'g>> {
    let plane = input.phase.shape().to_vec();
    let mut cplx = plane.clone();
    cplx.push(2);
    if mask.shape() != plane || complex.shape() != cplx {
        return Err(Error::shape(
            "reconstruct",
            format!("mask {:?}, complex {:?}, input plane {plane:?}", mask.shape(), complex.shape()),
        ));
    }
    let phase = input.phase.data();
    let cos = graph.constant(Tensor::new(&plane, phase.iter().map(|p| p.cos()).collect())?);
    let sin = graph.constant(Tensor::new(&plane, phase.iter().map(|p| p.sin()).collect())?);
    let masked = mask.mul(graph.constant(input.magnitude()))?;
    let real = complex.slice(3, 0, 1)?.reshape(&plane)?.add(masked.mul(cos)?)?;
    let imag = complex.slice(3, 1, 1)?.reshape(&plane)?.add(masked.mul(sin)?)?;
    let exponent = (1.0 / config.compress - 1.0) / 2.0;
    let (real, imag) = if exponent == 0.0 {
        (real, imag)
    } else {
        let gain = real.mul(real)?.add(imag.mul(imag)?)?.pow_safe(exponent);
        (real.mul(gain)?, imag.mul(gain)?)
    };
    istft_var(graph, real, imag, &config.stft, original_length)
}

/// Unit mask, zero complex correction: reproduces the input through the synthesis path.
pub fn passthrough<'g>(graph: &'g Graph, config: &ModelConfig, waveform: &Tensor) -> Result<Var<'g>> {
    let input = prepare_input(config, waveform)?;
    let plane = input.phase.shape().to_vec();
    let mut cplx = plane.clone();
    cplx.push(2);
    let mask = graph.constant(Tensor::full(&plane, 1.0));
    let complex = graph.constant(Tensor::zeros(&cplx));
    reconstruct(graph, mask, complex, &input, config, waveform.shape()[1])
}
