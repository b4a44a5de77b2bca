//! Similarity attention and similarity mining.
//!
//! For a tuple of embeddings, a weight vector `w` picks out the feature
//! dimensions that make the tuple satisfy its similarity criterion. Each
//! member's sample score `s = wᵀf` is differentiated with respect to that
//! member's convolutional feature map `A`, and the channel-averaged gradients
//! weight the channels of `A`:
//!
//! ```text
//! α_k = GAP(∂s/∂A_k),   M = ReLU(Σ_k α_k A_k)
//! ```
//!
//! The maps are upsampled, turned into soft masks that erase the attended
//! pixels, and the masked images are encoded again. The mining loss then asks
//! that nothing discriminative survives the erasure. Everything is recorded on
//! the graph, so the mining loss trains the encoder through the attention maps.

use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::autograd::{linear_interp_matrix, Graph, PoolKind, Tensor};
use crate::error::{Error, Result};
use crate::model::{BoundEncoder, Encoding};

/// How the weight vector is formed from a tuple of embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightArch {
    /// Pair of the same class: `w = 1 − |f¹ − f²|`.
    SiameseSame,
    /// Pair of different classes: `w = |f¹ − f²|`.
    SiameseDiff,
    /// `w = (1 − |fᵃ − fᵖ|) ⊙ |fᵃ − fⁿ|`
    Triplet,
    /// `w = (1 − |fᵃ − fᵖ|) ⊙ |fᵃ − fⁿ¹| ⊙ |fᵃ − fⁿ²|`
    Quadruplet,
}

impl WeightArch {
    pub fn arity(self) -> usize {
        match self {
            WeightArch::SiameseSame | WeightArch::SiameseDiff => 2,
            WeightArch::Triplet => 3,
            WeightArch::Quadruplet => 4,
        }
    }

    pub fn for_tuple(arch: Architecture, same_class: bool) -> Self {
        match (arch, same_class) {
            (Architecture::Siamese, true) => WeightArch::SiameseSame,
            (Architecture::Siamese, false) => WeightArch::SiameseDiff,
            (Architecture::Triplet, _) => WeightArch::Triplet,
            (Architecture::Quadruplet, _) => WeightArch::Quadruplet,
        }
    }
}

/// The combined weight vector and the per-pair factors it was built from
/// (`[wᵖ, wⁿ]` for triplets, `[w¹, w², w³]` for quadruplets, `[w]` for pairs).
#[derive(Clone, Debug)]
pub struct WeightVector {
    pub w: Tensor,
    pub parts: Vec<Tensor>,
}

fn check_embeddings(op: &'static str, fs: &[Tensor], arity: usize) -> Result<usize> {
    if fs.len() != arity {
        return Err(Error::invalid(op, format!("expected {arity} embeddings, got {}", fs.len())));
    }
    let d = fs[0].len();
    for f in fs {
        if f.rank() != 1 || f.len() != d {
            return Err(Error::shape(op, &[d], f.shape()));
        }
    }
    Ok(d)
}

pub fn weights(g: &Graph, arch: WeightArch, fs: &[Tensor]) -> Result<WeightVector> {
    check_embeddings("weights", fs, arch.arity())?;
    let absdiff = |a: &Tensor, b: &Tensor| g.abs(&g.sub(a, b)?);
    match arch {
        WeightArch::SiameseSame => {
            let w = g.one_minus(&absdiff(&fs[0], &fs[1])?)?;
            Ok(WeightVector {
                parts: vec![w.clone()],
                w,
            })
        }
        WeightArch::SiameseDiff => {
            let w = absdiff(&fs[0], &fs[1])?;
            Ok(WeightVector {
                parts: vec![w.clone()],
                w,
            })
        }
        WeightArch::Triplet => {
            let wp = g.one_minus(&absdiff(&fs[0], &fs[1])?)?;
            let wn = absdiff(&fs[0], &fs[2])?;
            let w = g.mul(&wp, &wn)?;
            Ok(WeightVector { w, parts: vec![wp, wn] })
        }
        WeightArch::Quadruplet => {
            let w1 = g.one_minus(&absdiff(&fs[0], &fs[1])?)?;
            let w2 = absdiff(&fs[0], &fs[2])?;
            let w3 = absdiff(&fs[0], &fs[3])?;
            let w = g.mul(&g.mul(&w1, &w2)?, &w3)?;
            Ok(WeightVector {
                w,
                parts: vec![w1, w2, w3],
            })
        }
    }
}

/// `s^i = wᵀ f^i` for every member of the tuple.
pub fn sample_scores(g: &Graph, w: &Tensor, fs: &[Tensor]) -> Result<Vec<Tensor>> {
    if fs.is_empty() {
        return Err(Error::invalid("sample_scores", "empty tuple"));
    }
    for f in fs {
        if f.shape() != w.shape() {
            return Err(Error::shape("sample_scores", w.shape(), f.shape()));
        }
    }
    fs.iter().map(|f| g.dot(w, f)).collect()
}

/// Non-negative `m×n` saliency map of one tuple member.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub map: Tensor,
    /// Position of the member within its tuple.
    pub source: usize,
    pub arch: WeightArch,
}

/// `M = ReLU(Σ_k α_k A_k)` with `α_k` the spatial mean of `∂s/∂A_k`.
///
/// With `create_graph`, `M` stays differentiable with respect to everything
/// `s` and `A` depend on, including through the gradient itself.
pub fn attention_map(g: &Graph, s: &Tensor, feature_map: &Tensor, create_graph: bool) -> Result<Tensor> {
    attention_map_holding(g, s, feature_map, &[], create_graph)
}

/// [`attention_map`] where `∂s/∂A` treats the nodes in `held` as constants.
/// With `create_graph` the map still depends on their values, so gradients
/// of later losses reach them through the map.
pub fn attention_map_holding(
    g: &Graph,
    s: &Tensor,
    feature_map: &Tensor,
    held: &[&Tensor],
    create_graph: bool,
) -> Result<Tensor> {
    if feature_map.rank() != 3 {
        return Err(Error::invalid(
            "attention_map",
            format!("feature map must be c×m×n, got {:?}", feature_map.shape()),
        ));
    }
    let (m, n) = (feature_map.shape()[1], feature_map.shape()[2]);
    let held: Vec<&Tensor> = held.iter().copied().filter(|t| t.node().is_some()).collect();
    let grad = g.grad_holding(s, &[feature_map], &held, create_graph)?.remove(0);
    let alpha = g.pool(PoolKind::GlobalAvg, &grad)?;
    let weighted = g.mul(&g.channel_expand(&alpha, m, n)?, feature_map)?;
    g.relu(&g.channel_sum(&weighted)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    /// Slope of the soft threshold; must be positive.
    pub alpha: f64,
    /// Threshold, in (0, 1) for normalized maps.
    pub beta: f64,
    /// Divide the map by its maximum (when positive) before masking.
    pub normalize: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            alpha: 10.0,
            beta: 0.5,
            normalize: true,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("soft_mask", format!("alpha must be positive, got {}", self.alpha)));
        }
        if !self.beta.is_finite() {
            return Err(Error::invalid("soft_mask", "beta must be finite"));
        }
        Ok(())
    }
}

/// Divides `map` by its maximum when that maximum is positive.
pub fn normalize_map(g: &Graph, map: &Tensor) -> Result<Tensor> {
    let peak = g.max_all(map)?;
    if peak.item()? <= 0.0 {
        return Ok(map.clone());
    }
    g.div(map, &g.expand(&peak, map.shape())?)
}

/// Corner-aligned bilinear resize of an `m×n` map to `h×w`.
pub fn upsample_bilinear(g: &Graph, map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::invalid("upsample", format!("expected m×n, got {:?}", map.shape())));
    }
    let (m, n) = (map.shape()[0], map.shape()[1]);
    if (m, n) == (h, w) {
        return Ok(map.clone());
    }
    let rows = Tensor::new(&[h, m], linear_interp_matrix(m, h))?;
    let cols_t = Tensor::new(&[n, w], {
        let c = linear_interp_matrix(n, w);
        let mut t = vec![0.0; n * w];
        for i in 0..w {
            for j in 0..n {
                t[j * w + i] = c[i * n + j];
            }
        }
        t
    })?;
    g.matmul(&g.matmul(&rows, map)?, &cols_t)
}

/// The map as it is applied to the image: optionally normalized, then
/// upsampled to `h×w`.
pub fn mask_source(g: &Graph, map: &Tensor, h: usize, w: usize, normalize: bool) -> Result<Tensor> {
    let m = if normalize { normalize_map(g, map)? } else { map.clone() };
    upsample_bilinear(g, &m, h, w)
}

/// `x̂ = x ⊙ (1 − sigmoid(α(M↑ − β)))`, the same attenuation for every channel.
pub fn soft_mask(g: &Graph, x: &Tensor, map: &Tensor, cfg: &MaskConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.rank() != 3 {
        return Err(Error::invalid("soft_mask", format!("image must be c×h×w, got {:?}", x.shape())));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let up = mask_source(g, map, h, w, cfg.normalize)?;
    let z = g.scale(&g.add_scalar(&up, -cfg.beta)?, cfg.alpha)?;
    let keep = g.one_minus(&g.sigmoid(&z)?)?;
    g.mul(x, &g.tile(&keep, c)?)
}

fn triplet_mining(g: &Graph, a: &Tensor, p: &Tensor, n: &Tensor) -> Result<Tensor> {
    let dap = g.l2_distance(a, p)?;
    let dan = g.l2_distance(a, n)?;
    g.abs(&g.sub(&dap, &dan)?)
}

/// Similarity mining loss over embeddings of soft-masked images.
///
/// * triplet: `| ‖f*ᵃ − f*ᵖ‖ − ‖f*ᵃ − f*ⁿ‖ |`
/// * Siamese (positive pairs): `−‖f*¹ − f*²‖`
/// * quadruplet: the triplet form on `(a, p, n1)` plus on `(a, p, n2)`
pub fn mining_loss(g: &Graph, arch: Architecture, masked: &[Tensor]) -> Result<Tensor> {
    check_embeddings("mining_loss", masked, arch.arity())?;
    match arch {
        Architecture::Siamese => g.scale(&g.l2_distance(&masked[0], &masked[1])?, -1.0),
        Architecture::Triplet => triplet_mining(g, &masked[0], &masked[1], &masked[2]),
        Architecture::Quadruplet => g.add(
            &triplet_mining(g, &masked[0], &masked[1], &masked[2])?,
            &triplet_mining(g, &masked[0], &masked[1], &masked[3])?,
        ),
    }
}

/// `L = L_ml + γ L_sm`
pub fn total_loss(g: &Graph, l_ml: &Tensor, l_sm: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::invalid("total_loss", format!("gamma must be non-negative, got {gamma}")));
    }
    g.add(l_ml, &g.scale(l_sm, gamma)?)
}

/// Everything computed for one tuple up to its attention maps.
#[derive(Clone, Debug)]
pub struct TupleAttention {
    pub encodings: Vec<Encoding>,
    pub weights: WeightVector,
    pub scores: Vec<Tensor>,
    pub maps: Vec<AttentionMap>,
}

impl TupleAttention {
    pub fn embeddings(&self) -> Vec<Tensor> {
        self.encodings.iter().map(|e| e.embedding.clone()).collect()
    }
}

/// Encodes a tuple and computes one attention map per member.
///
/// The maps always differentiate the scores with `w` held constant, so their
/// values do not depend on `detach_w`. With `detach_w` the weight vector is
/// cut from the graph entirely; without it, gradients of later losses also
/// flow into `w` through the maps.
pub fn attend(
    enc: &BoundEncoder<'_>,
    images: &[Tensor],
    arch: WeightArch,
    detach_w: bool,
    create_graph: bool,
) -> Result<TupleAttention> {
    let g = enc.graph();
    let encodings = images.iter().map(|x| enc.encode(x)).collect::<Result<Vec<_>>>()?;
    let fs: Vec<Tensor> = encodings.iter().map(|e| e.embedding.clone()).collect();
    let wv = weights(g, arch, &fs)?;
    let w = if detach_w { wv.w.detach() } else { wv.w.clone() };
    let scores = sample_scores(g, &w, &fs)?;
    let held = [&w];
    let maps = scores
        .iter()
        .zip(&encodings)
        .enumerate()
        .map(|(i, (s, e))| {
            Ok(AttentionMap {
                map: attention_map_holding(g, s, &e.feature_map, &held, create_graph)?,
                source: i,
                arch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TupleAttention {
        encodings,
        weights: wv,
        scores,
        maps,
    })
}
