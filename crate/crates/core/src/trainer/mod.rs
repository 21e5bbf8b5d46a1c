//! Adam, the epoch loop, validation and evaluation tables.

mod optim;
mod run;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{parse_num, KeyValues};
use crate::data::Example;
use crate::model::{init_parameters, load_checkpoint_for, passthrough, save_checkpoint, ModelConfig, ModelParameters, Network};
use crate::numerics::{Graph, Tensor};
use crate::objectives::{sdri, si_snr_loss, si_snri};
use crate::{Error, Result};

pub use optim::{adam_step, global_norm, OptimizerState, StepStats};
pub use run::RunConfig;

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global-norm clip; `0` disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Also write `last.ckpt` every this many steps; `0` means end of epoch only.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.001,
            lr_decay: 0.98,
            epochs: 30,
            batch_size: 4,
            grad_clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("train.initial_lr must be > 0, got {}", self.initial_lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("train.lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::Config(format!("train.grad_clip_norm must be >= 0, got {}", self.grad_clip_norm)));
        }
        Ok(())
    }

    /// Learning rate once `epochs_done` epochs have finished.
    pub fn lr_after(&self, epochs_done: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(epochs_done as i32)
    }

    pub fn clip(&self) -> Option<f64> {
        (self.grad_clip_norm > 0.0).then_some(self.grad_clip_norm)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.push("train.initial_lr", self.initial_lr);
        kv.push("train.lr_decay", self.lr_decay);
        kv.push("train.epochs", self.epochs);
        kv.push("train.batch_size", self.batch_size);
        kv.push("train.grad_clip_norm", self.grad_clip_norm);
        kv.push("train.seed", self.seed);
        kv.push("train.checkpoint_every", self.checkpoint_every);
        kv
    }

    /// Applies one `train.*` key; `Ok(false)` for other keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.initial_lr" => self.initial_lr = parse_num(key, value)?,
            "train.lr_decay" => self.lr_decay = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.grad_clip_norm" => self.grad_clip_norm = parse_num(key, value)?,
            "train.seed" => self.seed = parse_num(key, value)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One metrics-log record. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_sisnri: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ModelParameters,
    pub best_params: ModelParameters,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn best_val_sisnri(&self) -> f64 {
        self.metrics[self.best_epoch].val_sisnri
    }
}

/// Stacks equal-length signals into `[B, L]`.
pub fn batch_tensor(rows: &[&[f64]]) -> Result<Tensor> {
    let len = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != len) {
        return Err(Error::InvalidArgument("batch rows differ in length".into()));
    }
    Tensor::new(&[rows.len(), len], rows.concat())
}

/// SI-SNR loss and parameter gradients for one batch.
pub fn loss_and_gradients(
    config: &ModelConfig,
    params: &ModelParameters,
    noisy: &Tensor,
    clean: &Tensor,
) -> Result<(f64, HashMap<String, Tensor>)> {
    let g = Graph::new();
    let net = Network::bind(&g, config, params)?;
    let loss = si_snr_loss(net.forward(noisy)?, clean)?;
    let value = loss.value().data()[0];
    if !value.is_finite() {
        return Ok((value, HashMap::new()));
    }
    let mut grads = g.backward(loss)?;
    let out = net
        .parameters()
        .iter()
        .filter_map(|(n, v)| grads.take(*v).map(|t| (n.clone(), t)))
        .collect();
    Ok((value, out))
}

fn batch_loss(config: &ModelConfig, params: &ModelParameters, noisy: &Tensor, clean: &Tensor) -> Result<f64> {
    let g = Graph::untracked();
    let net = Network::bind(&g, config, params)?;
    let loss = si_snr_loss(net.forward(noisy)?, clean)?;
    let v = loss.value().data()[0];
    Ok(v)
}

fn check_corpus(name: &str, set: &[Example]) -> Result<usize> {
    let len = set
        .first()
        .map(|e| e.clean.len())
        .ok_or_else(|| Error::Training(format!("{name} set is empty")))?;
    for (i, e) in set.iter().enumerate() {
        if e.clean.len() != len || e.noisy.len() != len {
            return Err(Error::Training(format!(
                "{name} example {i} has length {} (expected {len}); segment the corpus first",
                e.noisy.len()
            )));
        }
    }
    Ok(len)
}

struct Artifacts {
    dir: PathBuf,
    log: File,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(dir.join("metrics.jsonl"))?;
        Ok(Artifacts { dir: dir.to_path_buf(), log })
    }

    fn record(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| Error::Training(e.to_string()))?;
        writeln!(self.log, "{line}")?;
        self.log.flush()?;
        Ok(())
    }

    fn save(&self, file: &str, config: &ModelConfig, params: &ModelParameters, meta: &KeyValues) -> Result<()> {
        save_checkpoint(&self.dir.join(file), config, params, meta)
    }
}

fn meta(epoch: usize, step: usize, val: f64) -> KeyValues {
    let mut kv = KeyValues::new();
    kv.push("meta.epoch", epoch);
    kv.push("meta.step", step);
    kv.push("meta.val_sisnri", val);
    kv
}

/// Runs the epoch loop from freshly initialized parameters. With `out`, writes `metrics.jsonl`,
/// `best.ckpt` and `last.ckpt` there; on divergence the files from the last good step are kept.
pub fn train(
    config: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    train_cfg.validate()?;
    check_corpus("training", train_set)?;
    check_corpus("validation", val_set)?;
    let mut artifacts = out.map(Artifacts::create).transpose()?;

    let mut params = init_parameters(config, train_cfg.seed)?;
    let mut state = OptimizerState::new(&params, train_cfg.initial_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut initial_loss = Vec::with_capacity(train_set.len());
    for chunk in order.chunks(train_cfg.batch_size) {
        let (noisy, clean) = gather(train_set, chunk)?;
        let loss = match batch_loss(config, &params, &noisy, &clean) {
            Err(Error::NonFinite(_)) => f64::NAN,
            other => other?,
        };
        initial_loss.push(loss * chunk.len() as f64);
    }
    let first = EpochMetrics {
        epoch: 0,
        step: 0,
        lr: train_cfg.initial_lr,
        loss: initial_loss.iter().sum::<f64>() / train_set.len() as f64,
        val_sisnri: evaluate(&Enhancer::Model { config, params: &params }, val_set)?.mean_si_snri,
    };
    log::info!("epoch 0: loss {:.4}, val SI-SNRi {:.3} dB", first.loss, first.val_sisnri);
    if let Some(a) = artifacts.as_mut() {
        a.record(&first)?;
        a.save("best.ckpt", config, &params, &meta(0, 0, first.val_sisnri))?;
        a.save("last.ckpt", config, &params, &meta(0, 0, first.val_sisnri))?;
    }
    let mut metrics = vec![first];
    let mut best = (0usize, params.clone());
    let mut step = 0usize;

    for epoch in 1..=train_cfg.epochs {
        state.lr = train_cfg.lr_after(epoch - 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let (noisy, clean) = gather(train_set, chunk)?;
            let diverged = |detail: String| Error::Diverged { epoch, step: step + 1, detail };
            let (loss, grads) = match loss_and_gradients(config, &params, &noisy, &clean) {
                Ok((loss, _)) if !loss.is_finite() => return Err(diverged(format!("loss is {loss}"))),
                Err(Error::NonFinite(m)) => return Err(diverged(m)),
                other => other?,
            };
            match adam_step(&mut params, &grads, &mut state, train_cfg.clip()) {
                Err(Error::NonFinite(m)) => return Err(diverged(m)),
                other => other?,
            };
            step += 1;
            total += loss * chunk.len() as f64;
            if let Some(a) = artifacts.as_ref() {
                if train_cfg.checkpoint_every > 0 && step % train_cfg.checkpoint_every == 0 {
                    a.save("last.ckpt", config, &params, &meta(epoch, step, f64::NAN))?;
                }
            }
        }
        let val_sisnri = match evaluate(&Enhancer::Model { config, params: &params }, val_set) {
            Err(Error::NonFinite(detail)) => return Err(Error::Diverged { epoch, step, detail }),
            other => other?.mean_si_snri,
        };
        let m = EpochMetrics {
            epoch,
            step,
            lr: state.lr,
            loss: total / train_set.len() as f64,
            val_sisnri,
        };
        log::info!("epoch {epoch}: loss {:.4}, val SI-SNRi {:.3} dB", m.loss, m.val_sisnri);
        let improved = m.val_sisnri > metrics[best.0].val_sisnri;
        if improved {
            best = (epoch, params.clone());
        }
        if let Some(a) = artifacts.as_mut() {
            a.record(&m)?;
            a.save("last.ckpt", config, &params, &meta(epoch, step, m.val_sisnri))?;
            if improved {
                a.save("best.ckpt", config, &params, &meta(epoch, step, m.val_sisnri))?;
            }
        }
        metrics.push(m);
    }
    Ok(TrainOutcome {
        final_params: params,
        best_params: best.1,
        best_epoch: best.0,
        metrics,
    })
}

fn gather(set: &[Example], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let noisy: Vec<&[f64]> = idx.iter().map(|&i| set[i].noisy.as_slice()).collect();
    let clean: Vec<&[f64]> = idx.iter().map(|&i| set[i].clean.as_slice()).collect();
    Ok((batch_tensor(&noisy)?, batch_tensor(&clean)?))
}

/// What to run on each noisy input.
pub enum Enhancer<'a> {
    Model { config: &'a ModelConfig, params: &'a ModelParameters },
    /// Unit mask and zero complex correction through the same analysis/synthesis path.
    Identity { config: &'a ModelConfig },
}

impl Enhancer<'_> {
    pub fn enhance(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::new(&[1, noisy.len()], noisy.to_vec())?;
        let g = Graph::untracked();
        let y = match self {
            Enhancer::Model { config, params } => Network::bind(&g, config, params)?.forward(&x)?,
            Enhancer::Identity { config } => passthrough(&g, config, &x)?,
        };
        let out = y.tensor().into_data();
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub index: usize,
    pub snr_db: f64,
    pub si_snri: f64,
    pub sdri: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalBucket {
    pub snr_db: f64,
    pub count: usize,
    pub si_snri: f64,
    pub sdri: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub buckets: Vec<EvalBucket>,
    pub mean_si_snri: f64,
    pub mean_sdri: f64,
}

/// Mean of a multiset, summed in sorted order so it does not depend on input order.
fn sorted_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

impl EvalReport {
    /// Tab-separated: per-example rows, then one `bucket` row per SNR and a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("kind\tindex\tsnr_db\tcount\tsi_snri\tsdri\n");
        for r in &self.rows {
            s.push_str(&format!("example\t{}\t{}\t1\t{:.6}\t{:.6}\n", r.index, r.snr_db, r.si_snri, r.sdri));
        }
        for b in &self.buckets {
            s.push_str(&format!("bucket\t-\t{}\t{}\t{:.6}\t{:.6}\n", b.snr_db, b.count, b.si_snri, b.sdri));
        }
        s.push_str(&format!(
            "mean\t-\t-\t{}\t{:.6}\t{:.6}\n",
            self.rows.len(),
            self.mean_si_snri,
            self.mean_sdri
        ));
        s
    }
}

/// SI-SNRi and SDRi per example, per SNR bucket and overall.
pub fn evaluate(enhancer: &Enhancer<'_>, examples: &[Example]) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty corpus".into()));
    }
    let mut rows = Vec::with_capacity(examples.len());
    for (index, ex) in examples.iter().enumerate() {
        let est = enhancer.enhance(&ex.noisy)?;
        rows.push(EvalRow {
            index,
            snr_db: ex.snr_db,
            si_snri: si_snri(&est, &ex.noisy, &ex.clean)?.value,
            sdri: sdri(&est, &ex.noisy, &ex.clean)?.value,
        });
    }
    let mut groups: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &rows {
        // order buckets by SNR; the key maps f64 ordering onto u64
        let bits = r.snr_db.to_bits();
        let key = if r.snr_db.is_sign_negative() { !bits } else { bits | 1 << 63 };
        let g = groups.entry(key).or_insert((r.snr_db, Vec::new(), Vec::new()));
        g.1.push(r.si_snri);
        g.2.push(r.sdri);
    }
    let buckets = groups
        .into_values()
        .map(|(snr_db, a, b)| EvalBucket {
            snr_db,
            count: a.len(),
            si_snri: sorted_mean(a),
            sdri: sorted_mean(b),
        })
        .collect();
    Ok(EvalReport {
        mean_si_snri: sorted_mean(rows.iter().map(|r| r.si_snri).collect()),
        mean_sdri: sorted_mean(rows.iter().map(|r| r.sdri).collect()),
        rows,
        buckets,
    })
}

/// Loads a checkpoint (which must match `config`) and evaluates it.
pub fn evaluate_checkpoint(path: &Path, config: &ModelConfig, examples: &[Example]) -> Result<EvalReport> {
    let ckpt = load_checkpoint_for(path, config)?;
    evaluate(&Enhancer::Model { config: &ckpt.config, params: &ckpt.params }, examples)
}
