use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Network, ModelConfig, ModelParameters};
use crate::numerics::{relative_error, Graph, Precision, Tensor};
use crate::objectives::si_snr_loss;
use crate::Result;

/// Tensors whose gradient is identically zero because a per-channel instance norm follows them.
pub const NORM_CANCELLED: &[&str] = &["encoder.in.bias"];

/// Central-difference steps tried in order until the stencil looks smooth.
pub const MODEL_FD_STEPS: [f64; 7] = [1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 3e-7, 1e-7];

/// Step acceptance. With `D(h) = f(x+h) - 2f(x) + f(x-h)`, a step is smooth when `|D| / 2h` at both
/// `h` and `h/2` is below `FD_AGREEMENT` of the slope, or when `D` scales as `h^2` between `h` and `h/2` and the two
/// central estimates agree to `FD_AGREEMENT`. A PReLU input crossing zero inside the stencil makes
/// `D` scale linearly instead.
pub const FD_AGREEMENT: f64 = 1e-5;

/// One sampled coordinate.
#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    /// Largest `|gradient|` (analytic or numeric) over the norm-cancelled tensors.
    pub cancelled_max_abs: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Maximum relative error per top-level module, in first-seen order.
    pub fn per_module(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for e in &self.entries {
            let m = super::params::module_of(&e.name);
            match out.iter_mut().find(|(n, _)| n == m) {
                Some(slot) => slot.1 = slot.1.max(e.rel_error),
                None => out.push((m.to_string(), e.rel_error)),
            }
        }
        out
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance && self.cancelled_max_abs < 1e-6
    }
}

/// Deterministic `(noisy, clean)` pair of `[1, len]` signals.
pub fn gradcheck_signals(len: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = rng.gen_range(150.0..400.0);
    let clean: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / 16_000.0;
            let env = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * 3.0 * t).sin();
            env * (0.5 * (2.0 * std::f64::consts::PI * f0 * t).sin() + 0.25 * (4.0 * std::f64::consts::PI * f0 * t).sin())
        })
        .collect();
    let noisy: Vec<f64> = clean.iter().map(|c| c + rng.gen_range(-0.3..0.3)).collect();
    (
        Tensor::new(&[1, len], noisy).expect("shape"),
        Tensor::new(&[1, len], clean).expect("shape"),
    )
}

fn loss_value(config: &ModelConfig, params: &ModelParameters, noisy: &Tensor, clean: &Tensor) -> Result<f64> {
    let g = Graph::untracked();
    let net = Network::bind(&g, config, params)?;
    let out = net.forward(noisy)?;
    let loss = si_snr_loss(out, clean)?;
    let v = loss.value().data()[0];
    Ok(v)
}

/// Compares backward gradients of the SI-SNR loss with central differences on `samples`
/// randomly chosen scalars, in double precision.
pub fn model_gradcheck(
    config: &ModelConfig,
    params: &ModelParameters,
    noisy: &Tensor,
    clean: &Tensor,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let params = params.to_precision(Precision::Double);
    let noisy = noisy.clone().to_precision(Precision::Double);
    let clean = clean.clone().to_precision(Precision::Double);
    let grads: Vec<(String, Tensor)> = {
        let g = Graph::new();
        let net = Network::bind(&g, config, &params)?;
        let loss = si_snr_loss(net.forward(&noisy)?, &clean)?;
        let mut grads = g.backward(loss)?;
        net.parameters()
            .iter()
            .map(|(n, v)| {
                let t = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (n.clone(), t)
            })
            .collect()
    };
    let base = loss_value(config, &params, &noisy, &clean)?;
    let probe = |name: &str, index: usize, h: f64| -> Result<(f64, f64)> {
        let mut p = params.clone();
        let orig = p.get(name).expect("bound parameter").data()[index];
        p.get_mut(name).expect("bound parameter").data_mut()[index] = orig + h;
        let plus = loss_value(config, &p, &noisy, &clean)?;
        p.get_mut(name).expect("bound parameter").data_mut()[index] = orig - h;
        let minus = loss_value(config, &p, &noisy, &clean)?;
        Ok(((plus - minus) / (2.0 * h), plus - 2.0 * base + minus))
    };
    let numeric = |name: &str, index: usize| -> Result<f64> {
        let mut last = 0.0;
        for h in MODEL_FD_STEPS {
            let (c1, d1) = probe(name, index, h)?;
            let (c2, d2) = probe(name, index, h / 2.0)?;
            last = c2;
            let scale = c2.abs().max(1e-8);
            let flat = d1.abs() / (2.0 * h) <= FD_AGREEMENT * scale && d2.abs() / h <= FD_AGREEMENT * scale;
            let quadratic = (d1 - 4.0 * d2).abs() <= 0.05 * d1.abs() && relative_error(c1, c2) <= FD_AGREEMENT;
            if flat || quadratic {
                break;
            }
        }
        Ok(last)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<&(String, Tensor)> =
        grads.iter().filter(|(n, _)| !NORM_CANCELLED.contains(&n.as_str())).collect();
    let mut entries = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (name, grad) = candidates.choose(&mut rng).expect("model has parameters");
        let index = rng.gen_range(0..grad.numel());
        let analytic = grad.data()[index];
        let num = numeric(name, index)?;
        entries.push(GradcheckEntry {
            name: name.clone(),
            index,
            analytic,
            numeric: num,
            rel_error: relative_error(analytic, num),
        });
    }
    let mut cancelled_max_abs: f64 = 0.0;
    for (name, grad) in grads.iter().filter(|(n, _)| NORM_CANCELLED.contains(&n.as_str())) {
        let index = rng.gen_range(0..grad.numel());
        // the true derivative is zero, so the widest (least noisy) step is exact up to rounding
        let (num, _) = probe(name, index, MODEL_FD_STEPS[0])?;
        let a = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        cancelled_max_abs = cancelled_max_abs.max(a).max(num.abs());
    }
    Ok(GradcheckReport {
        entries,
        cancelled_max_abs,
    })
}
