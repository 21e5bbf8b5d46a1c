//! SI-SNR training objective and SDR / SDRi evaluation metrics.

use std::f64::consts::LN_10;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Tensor, Var};

/// Additive guard on error energies.
pub const EPS: f64 = 1e-8;
/// Reported metrics are clamped to +/- this many dB.
pub const CLAMP_DB: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    /// Decibels.
    pub value: f64,
    pub clamp_applied: bool,
}

impl MetricResult {
    fn clamped(raw: f64) -> Self {
        let value = if raw.is_nan() { -CLAMP_DB } else { raw.clamp(-CLAMP_DB, CLAMP_DB) };
        MetricResult {
            value,
            clamp_applied: value != raw,
        }
    }
}

/// Options for [`si_snr_with`]; the default zero-means both signals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiSnrOptions {
    pub zero_mean: bool,
}

impl Default for SiSnrOptions {
    fn default() -> Self {
        SiSnrOptions { zero_mean: true }
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: estimate has {} samples, reference {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn centered(x: &[f64], zero_mean: bool) -> Vec<f64> {
    if !zero_mean || x.is_empty() {
        return x.to_vec();
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// Target / residual energies of the scale-invariant decomposition.
fn si_energies(est: &[f64], reference: &[f64], zero_mean: bool) -> Result<(f64, f64)> {
    check_lengths(est, reference)?;
    let s = centered(reference, zero_mean);
    let e_hat = centered(est, zero_mean);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::InvalidArgument("reference signal is identically zero".into()));
    }
    let alpha = dot(&e_hat, &s) / ss;
    let mut target = 0.0;
    let mut resid = 0.0;
    for (x, r) in e_hat.iter().zip(&s) {
        let t = alpha * r;
        target += t * t;
        resid += (x - t) * (x - t);
    }
    Ok((target, resid))
}

pub fn si_snr(estimate: &[f64], reference: &[f64]) -> Result<MetricResult> {
    si_snr_with(estimate, reference, SiSnrOptions::default())
}

pub fn si_snr_with(estimate: &[f64], reference: &[f64], opts: SiSnrOptions) -> Result<MetricResult> {
    let (target, resid) = si_energies(estimate, reference, opts.zero_mean)?;
    Ok(MetricResult::clamped(10.0 * (target / (resid + EPS)).log10()))
}

/// SI-SNR of the estimate minus SI-SNR of the unprocessed mixture.
pub fn si_snri(estimate: &[f64], noisy: &[f64], reference: &[f64]) -> Result<MetricResult> {
    let a = si_snr(estimate, reference)?;
    let b = si_snr(noisy, reference)?;
    Ok(MetricResult {
        value: a.value - b.value,
        clamp_applied: a.clamp_applied || b.clamp_applied,
    })
}

pub fn sdr(estimate: &[f64], reference: &[f64]) -> Result<MetricResult> {
    check_lengths(estimate, reference)?;
    let signal = dot(reference, reference);
    let err: f64 = estimate.iter().zip(reference).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(MetricResult::clamped(10.0 * (signal / (err + EPS)).log10()))
}

pub fn sdri(estimate: &[f64], noisy: &[f64], reference: &[f64]) -> Result<MetricResult> {
    check_lengths(noisy, reference)?;
    let a = sdr(estimate, reference)?;
    let b = sdr(noisy, reference)?;
    Ok(MetricResult {
        value: a.value - b.value,
        clamp_applied: a.clamp_applied || b.clamp_applied,
    })
}

struct SiSnrLoss {
    reference: Tensor,
}

/// Per-row negative SI-SNR (unclamped) and its gradient w.r.t. the estimate.
fn row_loss(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    let s = centered(reference, true);
    let x = centered(est, true);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::InvalidArgument("reference signal is identically zero".into()));
    }
    let alpha = dot(&x, &s) / ss;
    let t: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let e: Vec<f64> = x.iter().zip(&t).map(|(a, b)| a - b).collect();
    let tt = dot(&t, &t);
    let ee = dot(&e, &e) + EPS;
    let loss = -10.0 * (tt / ee).log10();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("SI-SNR loss is {loss} (target energy {tt})")));
    }
    // dL/dx_hat = -(10/ln10) * (2t/|t|^2 - 2e/(|e|^2+eps)), then project out the mean
    let k = -10.0 / LN_10;
    let g: Vec<f64> = t.iter().zip(&e).map(|(tv, ev)| k * (2.0 * tv / tt - 2.0 * ev / ee)).collect();
    Ok((loss, centered(&g, true)))
}

impl CustomOp for SiSnrLoss {
    fn name(&self) -> &'static str {
        "si_snr_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let est = inputs[0];
        let (rows, len) = rows_of(est.shape());
        let mut grad = Vec::with_capacity(est.numel());
        for r in 0..rows {
            let span = r * len..(r + 1) * len;
            let (_, g) = row_loss(&est.data()[span.clone()], &self.reference.data()[span])?;
            grad.extend(g.into_iter().map(|v| v * grad_out[0] / rows as f64));
        }
        Ok(vec![Some(grad)])
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    match shape {
        [l] => (1, *l),
        [b, l] => (*b, *l),
        _ => (0, 0),
    }
}

/// Mean over the batch of `-SI-SNR(estimate_b, reference_b)`; `estimate` is `[L]` or `[B, L]`.
pub fn si_snr_loss<'g>(estimate: Var<'g>, reference: &Tensor) -> Result<Var<'g>> {
    let shape = estimate.shape();
    if shape != reference.shape() || !(1..=2).contains(&shape.len()) {
        return Err(Error::InvalidArgument(format!(
            "si_snr_loss: estimate {:?} vs reference {:?} (need matching [L] or [B, L])",
            shape,
            reference.shape()
        )));
    }
    let (rows, len) = rows_of(&shape);
    let (value, precision) = {
        let est = estimate.value();
        let mut total = 0.0;
        for r in 0..rows {
            let span = r * len..(r + 1) * len;
            total += row_loss(&est.data()[span.clone()], &reference.data()[span])?.0;
        }
        (total / rows as f64, est.precision())
    };
    let out = Tensor::with_precision(&[], vec![value], precision)?;
    let rule = Rc::new(SiSnrLoss { reference: reference.clone() });
    Ok(estimate.graph().custom(&[estimate], out, rule))
}
