//! Multi-class treatment uplift network.
//!
//! A shared feature net maps the (treatment-free) feature vector to a
//! representation that feeds three heads:
//!
//! * a propensity head (softmax over J levels) modelling the logging policy,
//! * a base head producing the control-level conversion logit,
//! * a monotone head producing J-1 softplus increments.
//!
//! The conversion probability at level j is
//! `sigmoid(base + increments[0] + ... + increments[j-1])`, so every emitted
//! curve is increasing by construction. Training minimizes
//! `bce + alpha * propensity_ce + beta * ortho`, where `ortho` is the squared
//! norm of the batch moment `mean((y - p_t) * (onehot(t) - pi))`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::{sigmoid, Dataset, ElasticityCurve, OutcomeRecord, Query};
use crate::error::{Error, Result};
use crate::neuralnet::{adam_step, bce_with_logit, log_sum_exp, Activation, AdamState, Mlp, MlpGrads, Parameters, Tape};
use crate::par::{self, Exec};
use crate::rng::{self, tag};

/// Samples per parallel work unit; fixed so reductions are order-stable.
const CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub feature_hidden: Vec<usize>,
    pub head_hidden: usize,
    /// Initial bias of the monotone head's output units.
    pub monotone_bias_init: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            feature_hidden: vec![64, 64],
            head_hidden: 32,
            monotone_bias_init: -3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Propensity cross-entropy weight.
    pub alpha: f64,
    /// Orthogonal regularization weight.
    pub beta: f64,
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
    #[serde(default)]
    pub architecture: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 30,
            lr: 1e-3,
            alpha: 1.0,
            beta: 1.0,
            validation_fraction: 0.2,
            patience: 5,
            seed: 7,
            architecture: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0,1)".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        if self.architecture.feature_hidden.is_empty() || self.architecture.head_hidden == 0 {
            return Err(Error::Config("architecture needs at least one feature layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MulTeNetParams {
    pub feature_net: Mlp,
    pub gps_head: Mlp,
    pub y0_head: Mlp,
    pub monotone_head: Mlp,
}

/// Raw three-head output for one feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub pi: Vec<f64>,
    pub y0_logit: f64,
    pub increments: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub outcome_bce: f64,
    pub propensity_ce: f64,
    pub ortho_penalty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MulTeNetGrads {
    pub feature_net: MlpGrads,
    pub gps_head: MlpGrads,
    pub y0_head: MlpGrads,
    pub monotone_head: MlpGrads,
}

impl MulTeNetGrads {
    fn add_assign(&mut self, o: &MulTeNetGrads) {
        self.feature_net.add_assign(&o.feature_net);
        self.gps_head.add_assign(&o.gps_head);
        self.y0_head.add_assign(&o.y0_head);
        self.monotone_head.add_assign(&o.monotone_head);
    }
}

impl Parameters for MulTeNetParams {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.feature_net.slices();
        v.extend(self.gps_head.slices());
        v.extend(self.y0_head.slices());
        v.extend(self.monotone_head.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.feature_net.slices_mut();
        v.extend(self.gps_head.slices_mut());
        v.extend(self.y0_head.slices_mut());
        v.extend(self.monotone_head.slices_mut());
        v
    }
}

impl Parameters for MulTeNetGrads {
    fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.feature_net.slices();
        v.extend(self.gps_head.slices());
        v.extend(self.y0_head.slices());
        v.extend(self.monotone_head.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.feature_net.slices_mut();
        v.extend(self.gps_head.slices_mut());
        v.extend(self.y0_head.slices_mut());
        v.extend(self.monotone_head.slices_mut());
        v
    }
}

struct SampleForward {
    feat: Tape,
    gps: Tape,
    y0: Tape,
    mono: Tape,
    pi: Vec<f64>,
    p_t: f64,
    t: usize,
    y: f64,
    bce: f64,
    ce: f64,
}

impl MulTeNetParams {
    /// Seeded initialization for `feature_dim` inputs and `n_levels` treatments.
    pub fn init(feature_dim: usize, n_levels: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        if n_levels < 2 || feature_dim == 0 {
            return Err(Error::Config("need feature_dim >= 1 and at least 2 levels".into()));
        }
        let mut g = rng::stream(seed, &[tag::INIT]);
        let mut dims = vec![feature_dim];
        dims.extend(&arch.feature_hidden);
        let acts = vec![Activation::Relu; arch.feature_hidden.len()];
        let feature_net = Mlp::init(&dims, &acts, &mut g);
        let d_r = *dims.last().unwrap();
        let h = arch.head_hidden;
        let gps_head = Mlp::init(&[d_r, h, n_levels], &[Activation::Relu, Activation::Softmax], &mut g);
        let y0_head = Mlp::init(&[d_r, h, 1], &[Activation::Relu, Activation::Identity], &mut g);
        let mut monotone_head = Mlp::init(&[d_r, h, n_levels - 1], &[Activation::Relu, Activation::Softplus], &mut g);
        monotone_head.layers.last_mut().unwrap().b.fill(arch.monotone_bias_init);
        Ok(Self {
            feature_net,
            gps_head,
            y0_head,
            monotone_head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_net.input_dim()
    }

    pub fn n_levels(&self) -> usize {
        self.gps_head.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.feature_net.n_params() + self.gps_head.n_params() + self.y0_head.n_params() + self.monotone_head.n_params()
    }

    pub fn check(&self) -> Result<()> {
        for m in [&self.feature_net, &self.gps_head, &self.y0_head, &self.monotone_head] {
            m.check()?;
        }
        let d_r = self.feature_net.output_dim();
        for m in [&self.gps_head, &self.y0_head, &self.monotone_head] {
            if m.input_dim() != d_r {
                return Err(Error::Shape {
                    what: "head input",
                    expected: d_r,
                    got: m.input_dim(),
                });
            }
        }
        if self.y0_head.output_dim() != 1 || self.monotone_head.output_dim() + 1 != self.n_levels() {
            return Err(Error::Config("head output widths inconsistent with J".into()));
        }
        let last = |m: &Mlp| m.layers.last().unwrap().activation;
        if last(&self.gps_head) != Activation::Softmax || last(&self.monotone_head) != Activation::Softplus {
            return Err(Error::Config("propensity head must end in softmax and monotone head in softplus".into()));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> MulTeNetGrads {
        MulTeNetGrads {
            feature_net: self.feature_net.zero_grads(),
            gps_head: self.gps_head.zero_grads(),
            y0_head: self.y0_head.zero_grads(),
            monotone_head: self.monotone_head.zero_grads(),
        }
    }

    /// Propensity vector, base logit and uplift increments.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let h = self.feature_net.predict(x)?;
        Ok(Prediction {
            pi: self.gps_head.predict(&h)?,
            y0_logit: self.y0_head.predict(&h)?[0],
            increments: self.monotone_head.predict(&h)?,
        })
    }

    /// Elasticity curve; uses only the feature net, base head and monotone head.
    pub fn elasticity(&self, x: &[f64]) -> Result<ElasticityCurve> {
        let h = self.feature_net.predict(x)?;
        let y0 = self.y0_head.predict(&h)?[0];
        let inc = self.monotone_head.predict(&h)?;
        Ok(ElasticityCurve::from_logits(y0, &inc))
    }

    pub fn infer_batch(&self, queries: &[Query]) -> Result<Vec<ElasticityCurve>> {
        self.infer_batch_with(Exec::default(), queries)
    }

    /// Per-query curves, order preserved.
    pub fn infer_batch_with(&self, exec: Exec, queries: &[Query]) -> Result<Vec<ElasticityCurve>> {
        par::map(exec, queries, |q| self.elasticity(&q.features))
            .into_iter()
            .collect()
    }

    fn forward_sample(&self, r: &OutcomeRecord) -> Result<SampleForward> {
        let t = r.treatment_idx;
        if t >= self.n_levels() {
            return Err(Error::Data(format!("treatment index {t} out of range")));
        }
        let (h, feat) = self.feature_net.forward(&r.query.features)?;
        let (pi, gps) = self.gps_head.forward(&h)?;
        let (y0o, y0) = self.y0_head.forward(&h)?;
        let (inc, mono) = self.monotone_head.forward(&h)?;
        let z_t = y0o[0] + inc[..t].iter().sum::<f64>();
        let y = if r.converted { 1.0 } else { 0.0 };
        let ce = log_sum_exp(gps.last_pre()) - gps.last_pre()[t];
        Ok(SampleForward {
            feat,
            gps,
            y0,
            mono,
            pi,
            p_t: sigmoid(z_t),
            t,
            y,
            bce: bce_with_logit(z_t, y),
            ce,
        })
    }

    fn backward_sample(
        &self,
        s: &SampleForward,
        n: f64,
        alpha: f64,
        beta: f64,
        v: &[f64],
        grads: &mut MulTeNetGrads,
    ) -> Result<()> {
        let j = self.n_levels();
        let r = s.y - s.p_t;
        // d ortho / d r_i and d ortho / d pi_i
        let s_i = 2.0 / n * (v[s.t] - v.iter().zip(&s.pi).map(|(a, b)| a * b).sum::<f64>());
        let dz = (s.p_t - s.y) / n - beta * s_i * s.p_t * (1.0 - s.p_t);

        // propensity head: CE gradient straight to logits, ortho through softmax
        let g_pi: Vec<f64> = v.iter().map(|vk| -beta * 2.0 / n * r * vk).collect();
        let dot: f64 = s.pi.iter().zip(&g_pi).map(|(a, b)| a * b).sum();
        let d_pre: Vec<f64> = (0..j)
            .map(|k| {
                let onehot = if k == s.t { 1.0 } else { 0.0 };
                alpha / n * (s.pi[k] - onehot) + s.pi[k] * (g_pi[k] - dot)
            })
            .collect();
        let dh_gps = self.gps_head.backward_pre_into(&s.gps, d_pre, &mut grads.gps_head)?;
        let dh_y0 = self.y0_head.backward_into(&s.y0, &[dz], &mut grads.y0_head)?;
        let d_inc: Vec<f64> = (0..j - 1).map(|m| if m < s.t { dz } else { 0.0 }).collect();
        let dh_mono = self.monotone_head.backward_into(&s.mono, &d_inc, &mut grads.monotone_head)?;
        let dh: Vec<f64> = dh_gps
            .iter()
            .zip(&dh_y0)
            .zip(&dh_mono)
            .map(|((a, b), c)| a + b + c)
            .collect();
        self.feature_net.backward_into(&s.feat, &dh, &mut grads.feature_net)?;
        Ok(())
    }

    fn forward_batch(&self, exec: Exec, batch: &[OutcomeRecord]) -> Result<Vec<SampleForward>> {
        let chunks = par::map_chunks(exec, batch, CHUNK, |c| {
            c.iter().map(|r| self.forward_sample(r)).collect::<Result<Vec<_>>>()
        });
        let mut out = Vec::with_capacity(batch.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    fn breakdown(&self, fw: &[SampleForward], alpha: f64, beta: f64) -> (LossBreakdown, Vec<f64>) {
        let n = fw.len() as f64;
        let j = self.n_levels();
        let mut v = vec![0.0; j];
        let (mut bce, mut ce) = (0.0, 0.0);
        for s in fw {
            let r = s.y - s.p_t;
            for (k, vk) in v.iter_mut().enumerate() {
                let onehot = if k == s.t { 1.0 } else { 0.0 };
                *vk += r * (onehot - s.pi[k]);
            }
            bce += s.bce;
            ce += s.ce;
        }
        v.iter_mut().for_each(|x| *x /= n);
        let outcome_bce = bce / n;
        let propensity_ce = ce / n;
        let ortho_penalty: f64 = v.iter().map(|x| x * x).sum();
        (
            LossBreakdown {
                total: outcome_bce + alpha * propensity_ce + beta * ortho_penalty,
                outcome_bce,
                propensity_ce,
                ortho_penalty,
            },
            v,
        )
    }

    /// Loss terms for `batch` without gradients.
    pub fn loss_value(&self, batch: &[OutcomeRecord], alpha: f64, beta: f64) -> Result<LossBreakdown> {
        self.loss_value_with(Exec::default(), batch, alpha, beta)
    }

    pub fn loss_value_with(&self, exec: Exec, batch: &[OutcomeRecord], alpha: f64, beta: f64) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let fw = self.forward_batch(exec, batch)?;
        Ok(self.breakdown(&fw, alpha, beta).0)
    }

    /// Loss terms and the gradient of the total w.r.t. every parameter.
    pub fn loss(&self, batch: &[OutcomeRecord], alpha: f64, beta: f64) -> Result<(LossBreakdown, MulTeNetGrads)> {
        self.loss_with(Exec::default(), batch, alpha, beta)
    }

    pub fn loss_with(
        &self,
        exec: Exec,
        batch: &[OutcomeRecord],
        alpha: f64,
        beta: f64,
    ) -> Result<(LossBreakdown, MulTeNetGrads)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let fw = self.forward_batch(exec, batch)?;
        let (lb, v) = self.breakdown(&fw, alpha, beta);
        let n = fw.len() as f64;
        let partials = par::map_chunks(exec, &fw, CHUNK, |c| {
            let mut g = self.zero_grads();
            for s in c {
                self.backward_sample(s, n, alpha, beta, &v, &mut g)?;
            }
            Ok::<_, Error>(g)
        });
        let mut total = self.zero_grads();
        for g in partials {
            total.add_assign(&g?);
        }
        Ok((lb, total))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub outcome_bce: f64,
    pub propensity_ce: f64,
    pub ortho_penalty: f64,
    pub val_bce: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub initial_val_bce: f64,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,outcome_bce,propensity_ce,ortho_penalty,val_bce")?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{}",
                e.epoch, e.outcome_bce, e.propensity_ce, e.ortho_penalty, e.val_bce
            )?;
        }
        Ok(())
    }
}

fn shuffle(idx: &mut [usize], seed: u64, tags: &[u64]) {
    use rand::seq::SliceRandom;
    idx.shuffle(&mut rng::stream(seed, tags));
}

/// Train on `dataset`; returns the parameters with the best validation BCE.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(MulTeNetParams, TrainLog)> {
    train_with(Exec::default(), dataset, cfg)
}

pub fn train_with(exec: Exec, dataset: &Dataset, cfg: &TrainConfig) -> Result<(MulTeNetParams, TrainLog)> {
    cfg.validate()?;
    let n = dataset.records.len();
    if n < 2 {
        return Err(Error::Data("need at least two records to split".into()));
    }
    let j = dataset.grid.len();
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, cfg.seed, &[tag::TRAIN, 0]);
    let n_val = ((n as f64 * cfg.validation_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = idx.split_at(n_val);
    let pick = |ids: &[usize]| -> Vec<OutcomeRecord> { ids.iter().map(|&i| dataset.records[i].clone()).collect() };
    let val = pick(val_idx);
    let mut train_set = pick(train_idx);
    for (name, set) in [("validation", &val), ("training", &train_set)] {
        let mut counts = vec![0usize; j];
        for r in set.iter() {
            if r.treatment_idx >= j {
                return Err(Error::Data(format!("treatment index {} out of range", r.treatment_idx)));
            }
            counts[r.treatment_idx] += 1;
        }
        if let Some(arm) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("{name} split has no records in arm {arm}")));
        }
    }

    let mut params = MulTeNetParams::init(dataset.feature_dim, j, &cfg.architecture, cfg.seed)?;
    let mut log = TrainLog {
        initial_val_bce: params.loss_value_with(exec, &val, cfg.alpha, cfg.beta)?.outcome_bce,
        ..TrainLog::default()
    };
    let mut best = params.clone();
    let mut best_val = log.initial_val_bce;
    let mut adam = AdamState::new(params.n_params(), cfg.lr);
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle(&mut order, cfg.seed, &[tag::TRAIN, epoch as u64 + 1]);
        let shuffled: Vec<OutcomeRecord> = order.iter().map(|&i| train_set[i].clone()).collect();
        train_set = shuffled;
        let mut acc = LossBreakdown::default();
        for batch in train_set.chunks(cfg.batch_size) {
            let (lb, g) = params.loss_with(exec, batch, cfg.alpha, cfg.beta)?;
            adam_step(&mut params, &g, &mut adam)?;
            let w = batch.len() as f64;
            acc.outcome_bce += lb.outcome_bce * w;
            acc.propensity_ce += lb.propensity_ce * w;
            acc.ortho_penalty += lb.ortho_penalty * w;
        }
        let m = train_set.len() as f64;
        let val_bce = params.loss_value_with(exec, &val, cfg.alpha, cfg.beta)?.outcome_bce;
        log.epochs.push(EpochLog {
            epoch,
            outcome_bce: acc.outcome_bce / m,
            propensity_ce: acc.propensity_ce / m,
            ortho_penalty: acc.ortho_penalty / m,
            val_bce,
        });
        log::debug!("epoch {epoch}: train bce {:.5} val bce {val_bce:.5}", acc.outcome_bce / m);
        if val_bce < best_val {
            best_val = val_bce;
            best = params.clone();
            log.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

pub const MODEL_FORMAT: &str = "ridesub-multenet";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub n_levels: usize,
    pub feature_dim: usize,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: MulTeNetParams,
}

impl Checkpoint {
    pub fn new(params: MulTeNetParams, cfg: &TrainConfig) -> Self {
        Self {
            header: CheckpointHeader {
                format: MODEL_FORMAT.into(),
                version: MODEL_VERSION,
                n_levels: params.n_levels(),
                feature_dim: params.feature_dim(),
                alpha: cfg.alpha,
                beta: cfg.beta,
                seed: cfg.seed,
            },
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.header.format != MODEL_FORMAT || c.header.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model checkpoint {} v{}",
                c.header.format, c.header.version
            )));
        }
        c.params.check()?;
        if c.params.n_levels() != c.header.n_levels || c.params.feature_dim() != c.header.feature_dim {
            return Err(Error::Format("checkpoint header disagrees with network shapes".into()));
        }
        Ok(c)
    }
}
