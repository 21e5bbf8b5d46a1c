use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::KeyValues;
use crate::numerics::{Graph, Precision, Tensor};
use crate::signal::{NetworkInput, StftConfig};

const EPS: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn double_params(cfg: &ModelConfig, seed: u64) -> ModelParameters {
    init_parameters(cfg, seed).unwrap().to_precision(Precision::Double)
}

fn zero_matching(params: &mut ModelParameters, pattern: &str) {
    let names: Vec<String> = params.names().filter(|n| n.contains(pattern)).map(String::from).collect();
    for n in names {
        let shape = params.get(&n).unwrap().shape().to_vec();
        params.set(&n, Tensor::zeros(&shape)).unwrap();
    }
}

fn small(channels: usize) -> ModelConfig {
    ModelConfig {
        channels,
        attention_heads: 1,
        ..ModelConfig::gradcheck()
    }
}

fn with_full_bins(mut cfg: ModelConfig) -> ModelConfig {
    cfg.stft = StftConfig::default();
    cfg
}

fn instance_norm_prelu(x: &Tensor, gain: f64, bias: f64, slope: f64) -> Vec<f64> {
    let s = x.shape();
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks(plane) {
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        for v in chunk {
            let y = (v - mean) / (var + EPS).sqrt() * gain + bias;
            out.push(if y >= 0.0 { y } else { slope * y });
        }
    }
    out
}

#[test]
fn dense_zero_input_gives_zero_and_keeps_shape() {
    let cfg = with_full_bins(small(8));
    let p = double_params(&cfg, 1);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let y = net.dilated_dense(g.constant(Tensor::zeros(&[2, 8, 10, 101])), "encoder").unwrap();
    assert_eq!(y.shape(), vec![2, 8, 10, 101]);
    assert!(y.value().data().iter().all(|&v| v == 0.0));
    let y = net.dilated_dense(g.constant(random(&[2, 8, 10, 101], 2)), "encoder").unwrap();
    assert_eq!(y.shape(), vec![2, 8, 10, 101]);
}

#[test]
fn dense_single_identity_block_matches_naive_oracle() {
    let cfg = ModelConfig {
        dense_depth: 1,
        dilations: vec![1],
        ..small(3)
    };
    let mut p = double_params(&cfg, 1);
    let mut k = Tensor::zeros(&[3, 3, 2, 3]);
    for c in 0..3 {
        // time tap 1 is the current frame, frequency tap 1 the centre bin
        k.data_mut()[((c * 3 + c) * 2 + 1) * 3 + 1] = 1.0;
    }
    p.set("encoder.dense.0.weight", k).unwrap();
    p.set("encoder.dense.0.norm.gain", Tensor::full(&[3], 1.3)).unwrap();
    p.set("encoder.dense.0.norm.bias", Tensor::full(&[3], 0.2)).unwrap();
    p.set("encoder.dense.0.prelu", Tensor::full(&[3], 0.1)).unwrap();
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[2, 3, 5, 7], 9);
    let y = net.dilated_dense(g.constant(x.clone()), "encoder").unwrap();
    let want = instance_norm_prelu(&x, 1.3, 0.2, 0.1);
    for (a, b) in y.value().data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn dense_rejects_channel_mismatch() {
    let cfg = small(4);
    let p = double_params(&cfg, 1);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    assert!(net.dilated_dense(g.constant(Tensor::zeros(&[1, 5, 4, 9])), "encoder").is_err());
}

#[test]
fn encoder_halves_frequency_to_101_bands() {
    let cfg = with_full_bins(small(8));
    let p = double_params(&cfg, 3);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let input = NetworkInput {
        packed: random(&[1, 10, 201, 3], 4),
        phase: Tensor::zeros(&[1, 10, 201]),
    };
    assert_eq!(net.encoder(&input).unwrap().shape(), vec![1, 8, 10, 101]);

    let zero = NetworkInput {
        packed: Tensor::zeros(&[1, 10, 201, 3]),
        phase: Tensor::zeros(&[1, 10, 201]),
    };
    assert!(net.encoder(&zero).unwrap().value().data().iter().all(|&v| v == 0.0));

    let wrong = NetworkInput {
        packed: Tensor::zeros(&[1, 10, 200, 3]),
        phase: Tensor::zeros(&[1, 10, 200]),
    };
    assert!(matches!(net.encoder(&wrong), Err(crate::Error::Config(_))));
}

#[test]
fn first_conv_parameter_count_scales_with_channels() {
    let first = |c: usize| -> usize {
        parameter_specs(&ModelConfig { channels: c, ..ModelConfig::toy() })
            .iter()
            .filter(|s| s.name == "encoder.in.weight" || s.name == "encoder.in.bias")
            .map(|s| s.numel())
            .sum()
    };
    assert_eq!(first(8), 3 * 8 + 8);
    assert_eq!(first(8), 32);
    assert_eq!(first(16), 2 * first(8));
}

#[test]
fn self_attention_single_channel_doubles_input() {
    let cfg = small(1);
    let p = double_params(&cfg, 5);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[2, 1, 35], 6);
    let (out, w) = net.self_channel_attention(g.constant(x.clone()), "block0.cfb.sca").unwrap();
    assert_eq!(w.shape(), vec![2, 1, 1]);
    assert!(w.value().data().iter().all(|&v| v == 1.0));
    for (o, i) in out.value().data().iter().zip(x.data()) {
        assert_eq!(*o, 2.0 * i);
    }
}

#[test]
fn self_attention_weights_are_channel_by_channel_and_stochastic() {
    let cfg = small(8);
    let p = double_params(&cfg, 7);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    for (t, f) in [(5, 7), (10, 101)] {
        let x = random(&[2, 8, t * f], 8);
        let (out, w) = net.self_channel_attention(g.constant(x), "block0.cfb.sca").unwrap();
        assert_eq!(out.shape(), vec![2, 8, t * f]);
        assert_eq!(w.shape(), vec![2, 8, 8]);
        for row in w.value().data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn self_attention_with_zero_gates_matches_three_loop_oracle() {
    let cfg = small(3);
    let mut p = double_params(&cfg, 9);
    zero_matching(&mut p, "sca.");
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[2, 3, 4], 10);
    let (out, _) = net.self_channel_attention(g.constant(x.clone()), "block0.cfb.sca").unwrap();
    let (c, n) = (3, 4);
    let out = out.value();
    for b in 0..2 {
        let f = |i: usize, j: usize| x.data()[(b * c + i) * n + j];
        let q = |i: usize, j: usize| f(i, j) / n as f64;
        let mut w = [[0.0; 3]; 3];
        for i in 0..c {
            for j in 0..c {
                w[i][j] = (0..n).map(|k| q(i, k) * q(j, k)).sum::<f64>().exp();
            }
            let z: f64 = w[i].iter().sum();
            w[i].iter_mut().for_each(|v| *v /= z);
        }
        for i in 0..c {
            for k in 0..n {
                let want = (0..c).map(|j| w[i][j] * f(j, k)).sum::<f64>() + f(i, k);
                assert!((out.data()[(b * c + i) * n + k] - want).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn conv_forward_with_zero_weights_is_identity() {
    let cfg = small(8);
    let mut p = double_params(&cfg, 11);
    zero_matching(&mut p, "cfb.ff_in");
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[1, 8, 50], 12);
    let y = net.conv_forward_block(g.constant(x.clone()), "block0.cfb.ff_in").unwrap();
    assert_eq!(y.shape(), vec![1, 8, 50]);
    assert_eq!(y.value().data(), x.data());
}

#[test]
fn conv_forward_single_channel_closed_form() {
    let cfg = small(1);
    let mut p = double_params(&cfg, 13);
    let pre = "block0.cfb.ff_in";
    p.set(&format!("{pre}.pw1.weight"), Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
    p.set(&format!("{pre}.pw1.bias"), Tensor::zeros(&[2])).unwrap();
    p.set(&format!("{pre}.dw.weight"), Tensor::zeros(&[2, 3])).unwrap();
    p.set(&format!("{pre}.dw.bias"), Tensor::new(&[2], vec![0.5, -0.3]).unwrap()).unwrap();
    p.set(&format!("{pre}.pw2.weight"), Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    p.set(&format!("{pre}.pw2.bias"), Tensor::zeros(&[1])).unwrap();
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = Tensor::new(&[1, 1, 3], vec![0.2, -1.0, 3.0]).unwrap();
    let y = net.conv_forward_block(g.constant(x.clone()), pre).unwrap();
    let swish = |v: f64| v / (1.0 + (-v).exp());
    let path = swish(0.5) + swish(-0.3);
    for (a, b) in y.value().data().iter().zip(x.data()) {
        assert!((a - (b + path)).abs() < 1e-12);
    }
}

#[test]
fn cfb_unfolds_and_composes_its_three_stages() {
    let cfg = small(8);
    let p = double_params(&cfg, 14);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[1, 8, 10, 101], 15);
    let out = net.cfb(g.constant(x.clone()), 0).unwrap();
    assert_eq!(out.shape(), vec![1, 8, 1010]);
    let h = g.constant(x.reshape(&[1, 8, 1010]).unwrap());
    let h = net.conv_forward_block(h, "block0.cfb.ff_in").unwrap();
    let (h, _) = net.self_channel_attention(h, "block0.cfb.sca").unwrap();
    let h = net.conv_forward_block(h, "block0.cfb.ff_out").unwrap();
    assert_eq!(out.value().data(), h.value().data());
}

#[test]
fn cfb_with_zero_weights_reduces_to_channel_attention() {
    // Self-CA mixes channels with a row-stochastic W, so the chain cannot collapse to the input.
    let cfg = small(4);
    let mut p = double_params(&cfg, 16);
    zero_matching(&mut p, ".cfb.");
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[1, 4, 3, 5], 17);
    let out = net.cfb(g.constant(x.clone()), 0).unwrap();
    let (sca, _) = net
        .self_channel_attention(g.constant(x.reshape(&[1, 4, 15]).unwrap()), "block0.cfb.sca")
        .unwrap();
    assert_eq!(out.value().data(), sca.value().data());
}

fn ln(v: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    v.iter().enumerate().map(|(i, x)| (x - m) / (var + EPS).sqrt() * g[i] + b[i]).collect()
}

fn affine(p: &ModelParameters, name: &str, v: &[f64], bias: bool) -> Vec<f64> {
    let w = p.get(&format!("{name}.weight")).unwrap();
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| {
            let b = if bias { p.get(&format!("{name}.bias")).unwrap().data()[r] } else { 0.0 };
            b + (0..i).map(|c| w.data()[r * i + c] * v[c]).sum::<f64>()
        })
        .collect()
}

fn swish(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn norm_of(p: &ModelParameters, name: &str, v: &[f64]) -> Vec<f64> {
    ln(v, p.get(&format!("{name}.gain")).unwrap().data(), p.get(&format!("{name}.bias")).unwrap().data())
}

fn add(a: &[f64], b: &[f64], s: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

/// Conformer on a length-one sequence: attention weights are forced to 1 and the
/// depthwise convolution sees only its centre tap.
fn singleton_conformer(p: &ModelParameters, pre: &str, x: &[f64], mem: &[f64]) -> Vec<f64> {
    let ffn = |name: &str, v: &[f64]| {
        let h = norm_of(p, &format!("{name}.norm"), v);
        let h: Vec<f64> = affine(p, &format!("{name}.fc1"), &h, true).into_iter().map(swish).collect();
        affine(p, &format!("{name}.fc2"), &h, true)
    };
    let h = add(x, &ffn(&format!("{pre}.ffn1"), x), 0.5);
    let v = affine(p, &format!("{pre}.attn.value"), mem, true);
    let h = add(&h, &affine(p, &format!("{pre}.attn.out"), &v, true), 1.0);
    let y = norm_of(p, &format!("{pre}.conv.norm"), &h);
    let z = affine(p, &format!("{pre}.conv.pw1"), &y, true);
    let e = z.len() / 2;
    let glu: Vec<f64> = (0..e).map(|i| z[i] / (1.0 + (-z[e + i]).exp())).collect();
    let dw = p.get(&format!("{pre}.conv.dw.weight")).unwrap();
    let k = dw.shape()[1];
    let db = p.get(&format!("{pre}.conv.dw.bias")).unwrap();
    let d: Vec<f64> = (0..e).map(|i| glu[i] * dw.data()[i * k + k / 2] + db.data()[i]).collect();
    let d: Vec<f64> = norm_of(p, &format!("{pre}.conv.dw_norm"), &d).into_iter().map(swish).collect();
    let h = add(&h, &affine(p, &format!("{pre}.conv.pw2"), &d, true), 1.0);
    let h = add(&h, &ffn(&format!("{pre}.ffn2"), &h), 0.5);
    norm_of(p, &format!("{pre}.final_norm"), &h)
}

#[test]
fn band_branch_singleton_matches_closed_form() {
    let cfg = small(4);
    let p = double_params(&cfg, 18);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[1, 4, 1, 1], 19);
    let f = random(&[1, 4, 1], 20);
    let out = net.band_branch(g.constant(x.clone()), Some(g.constant(f.clone())), 0).unwrap();
    let t = singleton_conformer(&p, "block0.t_conformer", x.data(), f.data());
    let want = singleton_conformer(&p, "block0.f_conformer", &t, f.data());
    for (a, b) in out.value().data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn band_branch_degenerate_fusion_is_self_attention() {
    let base = ModelConfig {
        alpha: 1.0,
        beta: 0.0,
        ..small(8)
    };
    let cfg = base.clone().with_ablation(Ablation::NoCfb);
    let p = double_params(&cfg, 21);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[1, 8, 10, 101], 22);
    let out = net.band_branch(g.constant(x), None, 0).unwrap();
    assert_eq!(out.shape(), vec![1, 8, 10, 101]);
    let d = ModelConfig::full_size();
    assert_eq!((d.alpha, d.beta), (0.5, 0.5));
}

#[test]
fn band_branch_rejects_mismatched_layout() {
    let cfg = small(4);
    let p = double_params(&cfg, 23);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = g.constant(random(&[1, 4, 3, 5], 24));
    let f = g.constant(random(&[1, 4, 14], 25));
    assert!(net.band_branch(x, Some(f), 0).is_err());
}

#[test]
fn cadb_block_runs_channel_branch_once() {
    let cfg = with_full_bins(small(8));
    let p = double_params(&cfg, 26);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = g.constant(random(&[1, 8, 10, 101], 27));
    assert_eq!(net.cfb_evaluations(), 0);
    let y = net.cadb_block(x, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 8, 10, 101]);
    assert_eq!(net.cfb_evaluations(), 1);

    let cfg = ModelConfig {
        num_blocks: 3,
        ..ModelConfig::gradcheck()
    };
    let p = init_parameters(&cfg, 1).unwrap();
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    net.forward(&random(&[1, 512], 28)).unwrap();
    assert_eq!(net.cfb_evaluations(), 3);
}

#[test]
fn disabling_the_channel_branch_changes_the_output() {
    let full_cfg = small(4);
    let full = double_params(&full_cfg, 29);
    let ab_cfg = full_cfg.clone().with_ablation(Ablation::NoCfb);
    let mut ablated = double_params(&ab_cfg, 0);
    for name in parameter_specs(&ab_cfg).iter().map(|s| s.name.clone()) {
        ablated.set(&name, full.get(&name).unwrap().clone()).unwrap();
    }
    let x = random(&[1, 4, 6, 9], 30);
    let run = |cfg: &ModelConfig, p: &ModelParameters| {
        let g = Graph::untracked();
        let net = Network::bind(&g, cfg, p).unwrap();
        let y = net.cadb_block(g.constant(x.clone()), 0).unwrap();
        y.tensor()
    };
    let (a, b) = (run(&full_cfg, &full), run(&ab_cfg, &ablated));
    assert_eq!(a.shape(), b.shape());
    assert!(a.max_abs_diff(&b) > 1e-3);
}

#[test]
fn no_bfb_block_adds_refolded_channel_features() {
    let cfg = small(4).with_ablation(Ablation::NoBfb);
    let p = double_params(&cfg, 31);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let x = random(&[1, 4, 3, 5], 32);
    let y = net.cadb_block(g.constant(x.clone()), 0).unwrap();
    let f = net.cfb(g.constant(x.clone()), 0).unwrap();
    let want: Vec<f64> = x.data().iter().zip(f.value().data()).map(|(a, b)| a + b).collect();
    assert_eq!(y.value().data(), &want[..]);
}

#[test]
fn config_rejects_empty_block_and_bad_fields() {
    let mut cfg = ModelConfig::toy();
    cfg.enable_cfb = false;
    cfg.enable_t_conformer = false;
    cfg.enable_f_conformer = false;
    assert!(cfg.validate().is_err());
    let cfg = ModelConfig {
        dilations: vec![1, 2],
        ..ModelConfig::toy()
    };
    assert!(cfg.validate().is_err());
    let cfg = ModelConfig {
        alpha: 1.5,
        ..ModelConfig::toy()
    };
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::toy();
    cfg.stft.n_fft = 66;
    cfg.stft.win_length = 66;
    assert!(cfg.validate().is_err());
    let cfg = ModelConfig::full_size();
    assert_eq!((cfg.f_bins(), cfg.f_half()), (201, 101));
}

#[test]
fn decoders_restore_full_frequency_resolution() {
    let cfg = with_full_bins(small(8));
    let p = double_params(&cfg, 33);
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let (mask, complex) = net.decoders(g.constant(random(&[1, 8, 10, 101], 34))).unwrap();
    assert_eq!(mask.shape(), vec![1, 10, 201]);
    assert_eq!(complex.shape(), vec![1, 10, 201, 2]);

    // the mask head bias starts at 1; zero it so zero features give zero outputs
    let mut p = p;
    zero_matching(&mut p, "head.bias");
    let net = Network::bind(&g, &cfg, &p).unwrap();
    let (mask, complex) = net.decoders(g.constant(Tensor::zeros(&[1, 8, 10, 101]))).unwrap();
    assert!(mask.value().data().iter().all(|&v| v == 0.0));
    assert!(complex.value().data().iter().all(|&v| v == 0.0));

    assert!(net.decoders(g.constant(Tensor::zeros(&[1, 8, 10, 100]))).is_err());
}

fn reconstruct_with(mask_value: f64, compress: f64, len: usize) -> (Vec<f64>, Vec<f64>) {
    let cfg = ModelConfig {
        compress,
        ..ModelConfig::full_size()
    };
    let x = random(&[1, len], 35);
    let input = prepare_input(&cfg, &x).unwrap();
    let g = Graph::untracked();
    let plane = input.phase.shape().to_vec();
    let mut cplx = plane.clone();
    cplx.push(2);
    let y = reconstruct(
        &g,
        g.constant(Tensor::full(&plane, mask_value)),
        g.constant(Tensor::zeros(&cplx)),
        &input,
        &cfg,
        len,
    )
    .unwrap();
    let out = y.value().data().to_vec();
    (x.into_data(), out)
}

#[test]
fn unit_mask_reconstructs_the_input() {
    for len in [400, 6400] {
        let (x, y) = reconstruct_with(1.0, 0.3, len);
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "len {len}: {err}");
    }
}

#[test]
fn zero_mask_gives_silence_and_half_mask_halves() {
    let (_, y) = reconstruct_with(0.0, 0.3, 1600);
    assert!(y.iter().all(|&v| v == 0.0));
    let (x, y) = reconstruct_with(0.5, 1.0, 1600);
    let err = x.iter().zip(&y).map(|(a, b)| (0.5 * a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn passthrough_matches_unit_mask() {
    let cfg = ModelConfig::toy();
    let x = random(&[2, 700], 36);
    let g = Graph::untracked();
    let y = passthrough(&g, &cfg, &x).unwrap();
    assert!(y.tensor().max_abs_diff(&x) < 1e-5);
}

#[test]
fn forward_preserves_length() {
    let cfg = ModelConfig {
        stft: StftConfig::default(),
        ..ModelConfig::gradcheck()
    };
    let p = init_parameters(&cfg, 37).unwrap();
    for len in [400, 6400, 64_000] {
        let g = Graph::untracked();
        let net = Network::bind(&g, &cfg, &p).unwrap();
        let y = net.forward(&random(&[1, len], 38)).unwrap();
        assert_eq!(y.shape(), vec![1, len]);
        assert!(y.value().is_finite());
    }
    let g = Graph::untracked();
    let net = Network::bind(&g, &cfg, &p).unwrap();
    assert!(net.forward(&random(&[1, 399], 39)).is_err());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = ModelConfig::toy();
    let p = init_parameters(&cfg, 40).unwrap();
    let x = random(&[2, 900], 41);
    let run = || {
        let g = Graph::untracked();
        let net = Network::bind(&g, &cfg, &p).unwrap();
        let y = net.forward(&x).unwrap();
        y.tensor()
    };
    assert_eq!(run().data(), run().data());
}

#[test]
fn end_to_end_gradients_match_finite_differences_for_every_ablation() {
    for ab in Ablation::ALL {
        let cfg = ModelConfig::gradcheck().with_ablation(ab);
        let p = init_parameters(&cfg, 42).unwrap();
        let (noisy, clean) = gradcheck_signals(512, 43);
        let r = model_gradcheck(&cfg, &p, &noisy, &clean, 32, 44).unwrap();
        assert_eq!(r.entries.len(), 32);
        assert!(r.passed(1e-4), "{}: {:?}", ab.name(), r.worst());
    }
}

/// Closed-form parameter arithmetic, written independently of the name table.
fn hand_count(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let d = cfg.dense_depth;
    let dense: usize = (0..d).map(|i| c * c * (i + 1) * 6 + 3 * c).sum();
    let encoder = (3 * c + c + 3 * c) + dense + (3 * c * c + 3 * c);
    let conv_fwd = (2 * c * c + 2 * c) + (2 * c * 3 + 2 * c) + (2 * c * c + c);
    let cfb = 2 * conv_fwd + 2 * 3 * c;
    let h = cfg.ffn_mult * c;
    let ffn = 2 * c + (h * c + h) + (c * h + c);
    let e = cfg.conv_expansion * c;
    let attn = 2 * c + 3 * (c * c + c) + c * c;
    let conv = 2 * c + (2 * e * c + 2 * e) + (e * cfg.conformer_kernel + e) + 2 * e + (c * e + c);
    let conformer = 2 * ffn + attn + conv + 2 * c;
    let mut block = 0;
    if cfg.enable_cfb {
        block += cfb;
    }
    if cfg.enable_t_conformer {
        block += conformer;
    }
    if cfg.enable_f_conformer {
        block += conformer;
    }
    let decoder = |outs: usize, prelu: usize| dense + (3 * c * c + 3 * c) + (outs * c + outs) + prelu;
    encoder + cfg.num_blocks * block + decoder(1, 1) + decoder(2, 0)
}

#[test]
fn parameter_count_matches_hand_arithmetic() {
    for cfg in [ModelConfig::toy(), ModelConfig::gradcheck(), ModelConfig::full_size()] {
        for ab in Ablation::ALL {
            let cfg = cfg.clone().with_ablation(ab);
            let count = count_parameters(&cfg);
            assert_eq!(count.total, hand_count(&cfg));
            assert_eq!(count.modules.iter().map(|(_, n)| n).sum::<usize>(), count.total);
            assert_eq!(init_parameters(&cfg, 0).unwrap().numel(), count.total);
        }
    }
}

#[test]
fn full_size_config_lands_near_two_million_with_ordered_ablations() {
    let cfg = ModelConfig::full_size();
    let n = |a: Ablation| count_parameters(&cfg.clone().with_ablation(a)).total;
    let full = n(Ablation::Full);
    assert!((1_700_000..=2_300_000).contains(&full), "{full}");
    assert!(full > n(Ablation::NoCfb));
    assert!(n(Ablation::NoCfb) > n(Ablation::NoTConformer));
    assert_eq!(n(Ablation::NoTConformer), n(Ablation::NoFConformer));
    assert!(n(Ablation::NoFConformer) > n(Ablation::NoBfb));
    let modules = count_parameters(&cfg).modules;
    assert_eq!(modules.first().unwrap().0, "encoder");
    assert!(modules.iter().any(|(m, _)| m == "block3.f_conformer"));
}

#[test]
fn init_is_seeded_and_kaiming_scaled() {
    let cfg = ModelConfig::toy();
    let a = init_parameters(&cfg, 5).unwrap();
    assert_eq!(a, init_parameters(&cfg, 5).unwrap());
    assert_ne!(a, init_parameters(&cfg, 6).unwrap());
    assert!(a.iter().all(|(_, t)| t.precision() == Precision::Single));

    let p = init_parameters(&ModelConfig::full_size(), 7).unwrap();
    let w = p.get("block0.t_conformer.attn.query.weight").unwrap();
    assert_eq!(w.shape(), &[64, 64]);
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let want = (6.0f64 / 64.0).sqrt() / 3f64.sqrt();
    assert!((std / want - 1.0).abs() < 0.2, "{std} vs {want}");
    assert!(p.get("block0.t_conformer.attn.query.bias").unwrap().data().iter().all(|&v| v == 0.0));
    assert!(p.get("block0.t_conformer.final_norm.gain").unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn checkpoint_roundtrip_gives_bitwise_identical_forward() {
    let cfg = ModelConfig::toy();
    let p = init_parameters(&cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut meta = KeyValues::new();
    meta.push("meta.epoch", 3);
    save_checkpoint(&path, &cfg, &p, &meta).unwrap();
    let ck = load_checkpoint_for(&path, &cfg).unwrap();
    assert_eq!(ck.params, p);
    assert_eq!(ck.meta.get("meta.epoch"), Some("3"));
    let x = random(&[1, 800], 9);
    let run = |p: &ModelParameters| {
        let g = Graph::untracked();
        let net = Network::bind(&g, &cfg, p).unwrap();
        let y = net.forward(&x).unwrap();
        y.tensor()
    };
    assert_eq!(run(&p).data(), run(&ck.params).data());
}

#[test]
fn checkpoint_rejects_mismatch_and_corruption() {
    let cfg = ModelConfig::toy();
    let p = init_parameters(&cfg, 8).unwrap();
    let bytes = encode_checkpoint(&cfg, &p, &KeyValues::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    let other = ModelConfig {
        channels: 4,
        ..cfg.clone()
    };
    let err = load_checkpoint_for(&path, &other).unwrap_err().to_string();
    assert!(err.contains("model.channels"), "{err}");

    assert!(decode_checkpoint(&bytes[..bytes.len() - 4]).is_err());
    assert!(decode_checkpoint(b"garbage\n").is_err());
    let text = String::from_utf8_lossy(&bytes).replace("model.alpha", "model.gamma");
    assert!(decode_checkpoint(text.as_bytes()).is_err());
    assert!(encode_checkpoint(&other, &p, &KeyValues::new()).is_err());
    assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(crate::Error::Checkpoint(_))));
}

#[test]
fn config_key_values_roundtrip() {
    let cfg = ModelConfig::toy().with_ablation(Ablation::NoFConformer);
    let mut back = ModelConfig::full_size();
    for (k, v) in cfg.to_key_values().iter() {
        assert!(back.set(k, v).unwrap());
    }
    assert_eq!(back, cfg);
    assert!(!back.set("train.lr", "1").unwrap());
    assert!(back.set("model.channels", "x").is_err());
}

#[test]
fn ablation_names_parse() {
    for a in Ablation::ALL {
        assert_eq!(Ablation::parse(a.name()).unwrap(), a);
    }
    assert!(Ablation::parse("w/o cfb").is_err());
}


proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn blocks_preserve_shape(t in 1usize..6, f in 1usize..8, seed in 0u64..1000) {
        let cfg = small(4);
        let p = double_params(&cfg, seed);
        let g = Graph::untracked();
        let net = Network::bind(&g, &cfg, &p).unwrap();
        let y = net.cadb_block(g.constant(random(&[2, 4, t, f], seed)), 0).unwrap();
        prop_assert_eq!(y.shape(), vec![2, 4, t, f]);
    }

    #[test]
    fn unit_mask_identity_any_signal(len in 64usize..1500, seed in 0u64..1000) {
        let cfg = ModelConfig::toy();
        let x = random(&[1, len], seed);
        let g = Graph::untracked();
        let y = passthrough(&g, &cfg, &x).unwrap();
        prop_assert!(y.tensor().max_abs_diff(&x) < 1e-5);
    }
}
