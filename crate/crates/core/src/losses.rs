//! Metric-learning and classification losses, and their weighted sum.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ForwardOutputs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// Hardest positive and hardest negative per anchor.
    BatchHard,
    /// Every valid (anchor, positive, negative) triple.
    AllPairs,
}

fn one() -> f64 {
    1.0
}

fn default_margin() -> f64 {
    0.3
}

fn default_mining() -> Mining {
    Mining::BatchHard
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the triplet loss on pooled backbone features.
    #[serde(default = "one")]
    pub loss_weight_res: f64,
    /// Weight of the triplet loss on the pooled block output.
    #[serde(default = "one")]
    pub loss_weight_triplet: f64,
    /// Weight of the identity cross-entropy.
    #[serde(default = "one")]
    pub loss_weight_id: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_mining")]
    pub mining: Mining,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            loss_weight_res: 1.0,
            loss_weight_triplet: 1.0,
            loss_weight_id: 1.0,
            margin: default_margin(),
            mining: default_mining(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.loss_weight_res, self.loss_weight_triplet, self.loss_weight_id];
        if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w:?}")));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

fn composition(labels: &[usize]) -> String {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let parts: Vec<String> = counts.iter().map(|(l, c)| format!("id {l}×{c}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Triplet loss over Euclidean distances between rows of `emb`.
pub fn triplet_loss(
    tape: &mut Tape,
    emb: Var,
    labels: &[usize],
    margin: f64,
    mining: Mining,
) -> Result<Var> {
    let (b, _) = tape.value(emb).dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} embeddings", labels.len())));
    }
    let dist = tape.pairwise_distance(emb)?;
    let d = tape.value(dist).data();
    let mut pos_idx = Vec::new();
    let mut neg_idx = Vec::new();
    for a in 0..b {
        let positives = (0..b).filter(|&p| p != a && labels[p] == labels[a]);
        let negatives = (0..b).filter(|&n| labels[n] != labels[a]);
        match mining {
            Mining::BatchHard => {
                let hardest_pos = positives.fold(None, |best: Option<usize>, p| match best {
                    Some(q) if d[a * b + q] >= d[a * b + p] => Some(q),
                    _ => Some(p),
                });
                let hardest_neg = negatives.fold(None, |best: Option<usize>, n| match best {
                    Some(q) if d[a * b + q] <= d[a * b + n] => Some(q),
                    _ => Some(n),
                });
                if let (Some(p), Some(n)) = (hardest_pos, hardest_neg) {
                    pos_idx.push(a * b + p);
                    neg_idx.push(a * b + n);
                }
            }
            Mining::AllPairs => {
                let negatives: Vec<usize> = negatives.collect();
                for p in positives {
                    for &n in &negatives {
                        pos_idx.push(a * b + p);
                        neg_idx.push(a * b + n);
                    }
                }
            }
        }
    }
    if pos_idx.is_empty() {
        return Err(Error::Batch(format!(
            "no valid triplet in batch {}; need >= 2 identities and >= 2 samples of one",
            composition(labels)
        )));
    }
    let dp = tape.gather(dist, pos_idx)?;
    let dn = tape.gather(dist, neg_idx)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// Mean cross-entropy of `logits: B×K` against integer labels.
pub fn id_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Weighted total and the unweighted component values.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub res: f64,
    pub triplet: f64,
    pub id: f64,
}

pub fn total_loss(
    tape: &mut Tape,
    outputs: &ForwardOutputs,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let res = triplet_loss(tape, outputs.backbone_vec, labels, cfg.margin, cfg.mining)?;
    let tri = triplet_loss(tape, outputs.gap_vec, labels, cfg.margin, cfg.mining)?;
    let id = id_loss(tape, outputs.logits, labels)?;
    let wr = tape.scale(res, cfg.loss_weight_res);
    let wt = tape.scale(tri, cfg.loss_weight_triplet);
    let wi = tape.scale(id, cfg.loss_weight_id);
    let partial = tape.add(wr, wt)?;
    let total = tape.add(partial, wi)?;
    Ok(LossTerms {
        total,
        res: tape.value(res).item(),
        triplet: tape.value(tri).item(),
        id: tape.value(id).item(),
    })
}
