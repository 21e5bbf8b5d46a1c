use std::rc::Rc;

use super::graph::{CustomOp, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Multi-head scaled dot-product attention over `[S, L, C]` sequences, heads taking
/// consecutive channel groups. Scores are rebuilt one query row at a time in both passes,
/// so memory stays linear in `L`.
struct Attention {
    seqs: usize,
    len: usize,
    heads: usize,
    dh: usize,
}

impl Attention {
    fn width(&self) -> usize {
        self.heads * self.dh
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dh as f64).sqrt()
    }

    /// Softmax row of query `i` for sequence `s`, head `h`, written into `p`.
    fn row(&self, q: &[f64], k: &[f64], s: usize, h: usize, i: usize, p: &mut [f64]) {
        let c = self.width();
        let base = s * self.len * c + h * self.dh;
        let qi = &q[base + i * c..base + i * c + self.dh];
        let mut max = f64::NEG_INFINITY;
        for (j, pj) in p.iter_mut().enumerate() {
            let kj = &k[base + j * c..base + j * c + self.dh];
            *pj = self.scale() * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            max = max.max(*pj);
        }
        let mut sum = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= sum;
        }
    }

    fn forward(&self, q: &[f64], k: &[f64], v: &[f64]) -> Vec<f64> {
        let c = self.width();
        let mut out = vec![0.0; q.len()];
        let mut p = vec![0.0; self.len];
        for s in 0..self.seqs {
            for h in 0..self.heads {
                let base = s * self.len * c + h * self.dh;
                for i in 0..self.len {
                    self.row(q, k, s, h, i, &mut p);
                    let oi = &mut out[base + i * c..base + i * c + self.dh];
                    for (j, pj) in p.iter().enumerate() {
                        let vj = &v[base + j * c..base + j * c + self.dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        out
    }
}

impl CustomOp for Attention {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let (q, k, v) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let c = self.width();
        let scale = self.scale();
        let (mut dq, mut dk, mut dv) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
        let mut p = vec![0.0; self.len];
        let mut dp = vec![0.0; self.len];
        for s in 0..self.seqs {
            for h in 0..self.heads {
                let base = s * self.len * c + h * self.dh;
                let at = |i: usize| base + i * c..base + i * c + self.dh;
                for i in 0..self.len {
                    self.row(q, k, s, h, i, &mut p);
                    let go = &grad_out[at(i)];
                    let mut dot = 0.0;
                    for j in 0..self.len {
                        let vj = &v[at(j)];
                        dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        dot += p[j] * dp[j];
                        for (d, g) in dv[at(j)].iter_mut().zip(go) {
                            *d += p[j] * g;
                        }
                    }
                    let qi = &q[at(i)];
                    for j in 0..self.len {
                        let ds = scale * p[j] * (dp[j] - dot);
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &k[at(j)];
                        for (d, x) in dq[at(i)].iter_mut().zip(kj) {
                            *d += ds * x;
                        }
                        for (d, x) in dk[at(j)].iter_mut().zip(qi) {
                            *d += ds * x;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

impl<'g> Var<'g> {
    /// `softmax(Q_h K_hᵀ / sqrt(C / heads)) V_h` per head on `[S, L, C]` inputs.
    pub fn multi_head_attention(self, key: Var<'g>, value: Var<'g>, heads: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s.len() != 3 || key.shape() != s || value.shape() != s {
            return Err(Error::shape(
                "attention",
                format!("query {s:?}, key {:?}, value {:?} must share one [S, L, C] shape", key.shape(), value.shape()),
            ));
        }
        if heads == 0 || s[2] % heads != 0 {
            return Err(Error::InvalidArgument(format!("{heads} heads do not divide {} channels", s[2])));
        }
        let op = Attention {
            seqs: s[0],
            len: s[1],
            heads,
            dh: s[2] / heads,
        };
        let (mut out, precision) = {
            let (q, k, v) = (self.value(), key.value(), value.value());
            let precision = q.precision().join(k.precision()).join(v.precision());
            (op.forward(q.data(), k.data(), v.data()), precision)
        };
        precision.round_all(&mut out);
        let output = Tensor::with_precision(&s, out, precision)?;
        Ok(self.graph().custom(&[self, key, value], output, Rc::new(op)))
    }
}
