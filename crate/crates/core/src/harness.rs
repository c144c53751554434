//! Training, evaluation, percentile ablation and adjacency inspection over a
//! synthetic [`Dataset`].

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::io::{tensor_to_csv, Container};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{RetrievalReport, RetrievalRun};
use crate::model::{Model, ModelConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::sasamg::{Percentile, SimilarityAdjacency};
use crate::schedule::{LrSchedule, ScheduleKind};
use crate::tensor::Tensor;

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn default_base_lr() -> f64 {
    3e-3
}
fn default_warmup() -> usize {
    50
}
fn default_schedule() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn default_gamma() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    60
}
fn default_pk() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Learning rate at iteration 0; defaults to `base_lr / 100`.
    #[serde(default)]
    pub lr_start: Option<f64>,
    #[serde(default)]
    pub lr_min: f64,
    #[serde(default = "default_warmup")]
    pub warmup_iters: usize,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub step_milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub step_gamma: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Identities per batch.
    #[serde(default = "default_pk")]
    pub pk_p: usize,
    /// Instances per identity per batch.
    #[serde(default = "default_pk")]
    pub pk_k: usize,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables periodic evaluation.
    #[serde(default)]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: default_optimizer(),
            base_lr: default_base_lr(),
            lr_start: None,
            lr_min: 0.0,
            warmup_iters: default_warmup(),
            schedule: default_schedule(),
            step_milestones: Vec::new(),
            step_gamma: default_gamma(),
            epochs: default_epochs(),
            pk_p: default_pk(),
            pk_k: default_pk(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if let Some(s) = self.lr_start {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("lr_start must be >= 0, got {s}")));
            }
        }
        if self.pk_p < 2 || self.pk_k < 2 {
            return Err(Error::Config("PK batches need P >= 2 and K >= 2".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, iters_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            base_lr: self.base_lr,
            lr_start: self.lr_start.unwrap_or(self.base_lr / 100.0),
            lr_min: self.lr_min,
            warmup_iters: self.warmup_iters,
            total_iters: self.epochs * iters_per_epoch,
            iters_per_epoch,
            milestones: self.step_milestones.clone(),
            gamma: self.step_gamma,
        }
    }
}

/// Draws `P` identities × `K` instances per batch; each epoch visits every
/// identity once in a shuffled order (a trailing partial group is dropped).
pub struct PkSampler {
    by_id: Vec<Vec<usize>>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(ids: &[usize], p: usize, k: usize, seed: u64) -> Result<Self> {
        let n_ids = ids.iter().max().map_or(0, |m| m + 1);
        let mut by_id = vec![Vec::new(); n_ids];
        for (i, &id) in ids.iter().enumerate() {
            by_id[id].push(i);
        }
        let present = by_id.iter().filter(|v| !v.is_empty()).count();
        if present < p {
            return Err(Error::Config(format!(
                "PK sampling needs {p} identities, training split has {present}"
            )));
        }
        Ok(Self {
            by_id,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_id.iter().filter(|v| !v.is_empty()).count() / self.p
    }

    /// Sample indices of one epoch's batches.
    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut ids: Vec<usize> = (0..self.by_id.len()).filter(|&i| !self.by_id[i].is_empty()).collect();
        ids.shuffle(&mut self.rng);
        ids.chunks_exact(self.p)
            .map(|group| {
                let mut batch = Vec::with_capacity(self.p * self.k);
                for &id in group {
                    let pool = &self.by_id[id];
                    if pool.len() >= self.k {
                        batch.extend(pool.choose_multiple(&mut self.rng, self.k).copied());
                    } else {
                        for _ in 0..self.k {
                            batch.push(*pool.choose(&mut self.rng).expect("non-empty"));
                        }
                    }
                }
                batch
            })
            .collect()
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub res: f64,
    pub triplet: f64,
    pub id: f64,
}

impl StepRecord {
    /// One line of the training log: tab-separated `key=value` pairs.
    pub fn log_line(&self) -> String {
        format!(
            "step={}\tepoch={}\tlr={:e}\ttotal={}\tres={}\ttriplet={}\tid={}",
            self.step, self.epoch, self.lr, self.total, self.res, self.triplet, self.id
        )
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub steps: Vec<StepRecord>,
    /// Training log, one line per step or periodic evaluation.
    pub log: Vec<String>,
}

/// A batch whose loss was not finite.
#[derive(Debug)]
pub struct NonFiniteBatch {
    pub step: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub batch: Tensor,
}

impl NonFiniteBatch {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(serde_json::json!({
            "kind": "nonfinite_batch",
            "step": self.step,
            "indices": self.indices,
        }));
        c.push("x", self.batch.clone());
        c.push(
            "ids",
            Tensor::new(vec![self.labels.len()], self.labels.iter().map(|&l| l as f64).collect())
                .expect("1-D"),
        );
        c
    }
}

fn check_compatible(model_cfg: &ModelConfig, data: &Dataset) -> Result<()> {
    let want = model_cfg.sample_shape();
    let got = data.train.x.shape().get(1..).unwrap_or(&[]);
    if got != want.as_slice() {
        return Err(Error::shape(format!(
            "dataset samples are {got:?} but the model expects {want:?}"
        )));
    }
    let max_id = data.train.ids.iter().chain(&data.gallery.ids).max().copied().unwrap_or(0);
    if max_id >= model_cfg.n_identities {
        return Err(Error::Config(format!(
            "dataset has identity {max_id} but the classifier covers {}",
            model_cfg.n_identities
        )));
    }
    Ok(())
}

/// Trains a fresh model.
///
/// A non-finite loss aborts with [`Error::NonFinite`]; when `dump_dir` is given
/// the offending batch is written there as `nonfinite_batch.dsc` first.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    data: &Dataset,
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    check_compatible(model_cfg, data)?;
    let mut model = Model::new(model_cfg.clone())?;
    let mut sampler = PkSampler::new(&data.train.ids, train_cfg.pk_p, train_cfg.pk_k, train_cfg.seed)?;
    let schedule = train_cfg.schedule(sampler.batches_per_epoch());
    let sizes: Vec<usize> = model.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut optimizer = Optimizer::new(train_cfg.optimizer, &sizes);
    let mut steps = Vec::new();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..train_cfg.epochs {
        for indices in sampler.epoch() {
            let batch = data.train.batch(&indices)?;
            let labels: Vec<usize> = indices.iter().map(|&i| data.train.ids[i]).collect();
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape);
            let out = model.forward(&mut tape, &vars, &batch, true)?;
            let terms = total_loss(&mut tape, &out, &labels, loss_cfg)?;
            let total = tape.value(terms.total).item();
            if !total.is_finite() {
                let mut msg = format!(
                    "loss {total} at step {step} (res={}, triplet={}, id={}) on labels {labels:?}",
                    terms.res, terms.triplet, terms.id
                );
                if let Some(dir) = dump_dir {
                    let path = dir.join("nonfinite_batch.dsc");
                    let dump = NonFiniteBatch {
                        step,
                        indices,
                        labels,
                        batch,
                    };
                    dump.to_container().save(&path)?;
                    msg.push_str(&format!("; batch written to {}", path.display()));
                }
                return Err(Error::NonFinite(msg));
            }
            tape.backward(terms.total)?;
            if let Some(stats) = &out.batch_stats {
                model.bn.update(stats, labels.len());
            }
            let grads: Vec<Tensor> = vars.vars().into_iter().map(|v| tape.grad_tensor(v)).collect();
            let lr = schedule.lr(step);
            let mut params: Vec<&mut Tensor> = model.params.named_mut().into_iter().map(|(_, t)| t).collect();
            optimizer.step(&mut params, &grads, lr);
            let rec = StepRecord {
                step,
                epoch,
                lr,
                total,
                res: terms.res,
                triplet: terms.triplet,
                id: terms.id,
            };
            log.push(rec.log_line());
            steps.push(rec);
            step += 1;
        }
        if train_cfg.eval_every > 0 && (epoch + 1) % train_cfg.eval_every == 0 {
            let r = evaluate(&model, data)?.report();
            log.push(format!(
                "eval\tepoch={}\tmAP={}\trank1={}\trank5={}",
                epoch, r.map, r.rank1, r.rank5
            ));
        }
    }
    Ok(TrainOutcome { model, steps, log })
}

/// Eval-mode embeddings of every sample in a split.
pub fn embed_split(model: &Model, split: &Split) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let mut rows = Vec::with_capacity(split.len());
    let indices: Vec<usize> = (0..split.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let emb = model.embed(&split.batch(chunk)?)?;
        for i in 0..chunk.len() {
            rows.push(emb.index_outer(i)?);
        }
    }
    Tensor::stack(&rows)
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<RetrievalRun> {
    let q = embed_split(model, &data.query)?;
    let g = embed_split(model, &data.gallery)?;
    RetrievalRun::evaluate(q, data.query.ids.clone(), g, data.gallery.ids.clone(), None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub beta: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
}

/// Trains one model per percentile with identical data, seeds and batch order.
pub fn ablate_beta(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    data: &Dataset,
    betas: &[Percentile],
    dump_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(betas.len());
    for &beta in betas {
        let cfg = ModelConfig {
            beta,
            ..model_cfg.clone()
        };
        let outcome = train(&cfg, train_cfg, loss_cfg, data, dump_dir)?;
        let r: RetrievalReport = evaluate(&outcome.model, data)?.report();
        rows.push(AblationRow {
            beta: beta.value(),
            map: r.map,
            rank1: r.rank1,
            rank5: r.rank5,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:>8}  {:>8}  {:>8}  {:>8}\n", "beta", "mAP", "Rank-1", "Rank-5");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>8}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.beta, r.map, r.rank1, r.rank5
        );
    }
    s
}

/// Adjacency diagnostics of one branch of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchDump {
    pub block: usize,
    pub branch: &'static str,
    pub s: Tensor,
    pub adjacency: SimilarityAdjacency,
    pub output: Tensor,
}

impl BranchDump {
    pub fn nonzeros(&self) -> usize {
        self.adjacency.nonzeros()
    }

    pub fn column_mass(&self) -> Vec<f64> {
        self.adjacency.column_mass()
    }
}

/// Eval-mode forward of one sample (`C×H×W`, or the model's raw input shape),
/// keeping every block's per-branch similarity and adjacency.
pub fn inspect(model: &Model, sample: &Tensor) -> Result<Vec<BranchDump>> {
    let batch = Tensor::stack(std::slice::from_ref(sample))?;
    let mut tape = Tape::new();
    let vars = model.params.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, &batch, false)?;
    let mut dumps = Vec::new();
    for (b, trace) in out.traces[0].iter().enumerate() {
        for (label, br) in [("a", trace.branch_a), ("b", trace.branch_b)] {
            dumps.push(BranchDump {
                block: b,
                branch: label,
                s: tape.value(br.s).clone(),
                adjacency: SimilarityAdjacency {
                    a: tape.value(br.a).clone(),
                    threshold: br.threshold,
                    beta: model.config.beta,
                },
                output: tape.value(br.output).clone(),
            });
        }
    }
    Ok(dumps)
}

/// CSV files of an inspection, as `(file name, contents)`.
pub fn inspect_files(dumps: &[BranchDump]) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let mut summary = String::from("block,branch,beta,threshold,nonzeros,entries\n");
    for d in dumps {
        let stem = format!("block{}_{}", d.block, d.branch);
        files.push((format!("{stem}_S.csv"), tensor_to_csv(&d.s)?));
        files.push((format!("{stem}_A.csv"), tensor_to_csv(&d.adjacency.a)?));
        files.push((format!("{stem}_out.csv"), tensor_to_csv(&d.output)?));
        let mass = Tensor::new(vec![d.column_mass().len()], d.column_mass())?;
        files.push((format!("{stem}_mass.csv"), tensor_to_csv(&mass)?));
        let _ = writeln!(
            summary,
            "{},{},{},{:?},{},{}",
            d.block,
            d.branch,
            d.adjacency.beta,
            d.adjacency.threshold,
            d.nonzeros(),
            d.s.numel()
        );
    }
    files.push(("summary.csv".into(), summary));
    Ok(files)
}

/// Mean attention mass (column sums of `A`, averaged over blocks and branches)
/// received by noise patches and by signal patches across a split.
pub fn attention_mass_by_kind(model: &Model, split: &Split, signal_positions: &[usize]) -> Result<(f64, f64)> {
    let (mut noise_sum, mut noise_n, mut signal_sum, mut signal_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..split.len() {
        let dumps = inspect(model, &split.x.index_outer(i)?)?;
        let mask = split.noise_mask.index_outer(i)?;
        for d in &dumps {
            for (p, m) in d.column_mass().into_iter().enumerate() {
                if mask.data()[p] != 0.0 {
                    noise_sum += m;
                    noise_n += 1;
                } else if signal_positions.contains(&p) {
                    signal_sum += m;
                    signal_n += 1;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(noise_sum, noise_n), mean(signal_sum, signal_n)))
}
