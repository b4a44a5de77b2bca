use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::autograd::{Graph, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricLossKind {
    Contrastive,
    Triplet,
    Quadruplet,
}

impl MetricLossKind {
    pub fn for_arch(arch: Architecture) -> Self {
        match arch {
            Architecture::Siamese => MetricLossKind::Contrastive,
            Architecture::Triplet => MetricLossKind::Triplet,
            Architecture::Quadruplet => MetricLossKind::Quadruplet,
        }
    }

    pub fn arity(self) -> usize {
        match self {
            MetricLossKind::Contrastive => 2,
            MetricLossKind::Triplet => 3,
            MetricLossKind::Quadruplet => 4,
        }
    }
}

/// Baseline metric-learning objective.
///
/// * contrastive: `d²` for same-class pairs, `max(0, m_c − d)²` otherwise
/// * triplet: `max(0, d(a,p) − d(a,n) + m)`
/// * quadruplet: the triplet term on `(a, p, n1)` plus `max(0, d(a,p) − d(n1,n2) + m₂)`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLossConfig {
    pub kind: MetricLossKind,
    pub margin: f64,
    pub margin2: f64,
    pub contrastive_margin: f64,
}

impl MetricLossConfig {
    pub fn new(kind: MetricLossKind) -> Self {
        MetricLossConfig {
            kind,
            margin: 0.5,
            margin2: 0.25,
            contrastive_margin: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("margin", self.margin),
            ("margin2", self.margin2),
            ("contrastive_margin", self.contrastive_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid("metric_loss", format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

fn hinge(g: &Graph, closer: &Tensor, farther: &Tensor, margin: f64) -> Result<Tensor> {
    let gap = g.add_scalar(&g.sub(closer, farther)?, margin)?;
    g.relu(&gap)
}

/// Metric loss for one tuple of embeddings. `same_class` is only consulted for
/// the contrastive loss and must be given there.
pub fn metric_loss(
    g: &Graph,
    cfg: &MetricLossConfig,
    embeddings: &[Tensor],
    same_class: Option<bool>,
) -> Result<Tensor> {
    cfg.validate()?;
    if embeddings.len() != cfg.kind.arity() {
        return Err(Error::invalid(
            "metric_loss",
            format!("{:?} loss takes {} embeddings, got {}", cfg.kind, cfg.kind.arity(), embeddings.len()),
        ));
    }
    match cfg.kind {
        MetricLossKind::Contrastive => {
            let same = same_class
                .ok_or_else(|| Error::invalid("metric_loss", "contrastive loss needs the same-class flag"))?;
            let d = g.l2_distance(&embeddings[0], &embeddings[1])?;
            if same {
                g.mul(&d, &d)
            } else {
                let slack = g.relu(&g.add_scalar(&g.scale(&d, -1.0)?, cfg.contrastive_margin)?)?;
                g.mul(&slack, &slack)
            }
        }
        MetricLossKind::Triplet => {
            let dap = g.l2_distance(&embeddings[0], &embeddings[1])?;
            let dan = g.l2_distance(&embeddings[0], &embeddings[2])?;
            hinge(g, &dap, &dan, cfg.margin)
        }
        MetricLossKind::Quadruplet => {
            let dap = g.l2_distance(&embeddings[0], &embeddings[1])?;
            let dan = g.l2_distance(&embeddings[0], &embeddings[2])?;
            let dnn = g.l2_distance(&embeddings[2], &embeddings[3])?;
            g.add(&hinge(g, &dap, &dan, cfg.margin)?, &hinge(g, &dap, &dnn, cfg.margin2)?)
        }
    }
}
