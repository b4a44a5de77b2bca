//! Retrieval metrics, attention localization against part masks, and one-shot
//! segmentation from attention maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::Architecture;
use crate::attention::{attend, upsample_bilinear, WeightArch};
use crate::autograd::{Graph, Tensor};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Encoder;

/// Default quantile at which attention maps are binarized.
pub const DEFAULT_QUANTILE: f64 = 0.8;

/// Gallery of embeddings with their class labels.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

/// A retrieval query. `gallery_index` names the query's own gallery entry,
/// which is then left out of the ranking.
#[derive(Clone, Debug)]
pub struct Query<'a> {
    pub embedding: &'a [f64],
    pub label: u32,
    pub gallery_index: Option<usize>,
}

impl RetrievalIndex {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<u32>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::invalid(
                "retrieval_index",
                format!("{} embeddings but {} labels", embeddings.len(), labels.len()),
            ));
        }
        if let Some(d) = embeddings.first().map(Vec::len) {
            if embeddings.iter().any(|e| e.len() != d) {
                return Err(Error::invalid("retrieval_index", "embeddings differ in length"));
            }
        }
        Ok(RetrievalIndex { embeddings, labels })
    }

    /// Embeds every sample of `dataset` with `enc`.
    pub fn from_dataset(enc: &Encoder, dataset: &Dataset) -> Result<Self> {
        let embeddings = dataset
            .samples
            .iter()
            .map(|s| Ok(enc.embed(&s.image)?.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(embeddings, dataset.labels())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Every gallery entry as a query against the rest of the gallery.
    pub fn self_queries(&self) -> Vec<Query<'_>> {
        self.embeddings
            .iter()
            .zip(&self.labels)
            .enumerate()
            .map(|(i, (e, &label))| Query {
                embedding: e,
                label,
                gallery_index: Some(i),
            })
            .collect()
    }

    /// Gallery indices ordered by euclidean distance to `q`, ties by index.
    fn ranking(&self, q: &Query<'_>) -> Result<Vec<usize>> {
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(self.len());
        for (i, e) in self.embeddings.iter().enumerate() {
            if Some(i) == q.gallery_index {
                continue;
            }
            if e.len() != q.embedding.len() {
                return Err(Error::shape("recall_at_k", &[e.len()], &[q.embedding.len()]));
            }
            let d: f64 = e.iter().zip(q.embedding).map(|(a, b)| (a - b) * (a - b)).sum();
            order.push((d, i));
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(order.into_iter().map(|(_, i)| i).collect())
    }
}

/// Recall@K for each `K` in `ks`: the fraction of queries with at least one
/// same-class item among their `K` nearest gallery entries.
pub fn recall_at_ks(index: &RetrievalIndex, queries: &[Query<'_>], ks: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::invalid("recall_at_k", "no queries"));
    }
    for &k in ks {
        if k == 0 {
            return Err(Error::invalid("recall_at_k", "K must be at least 1"));
        }
    }
    let mut hits = vec![0usize; ks.len()];
    for q in queries {
        let ranking = index.ranking(q)?;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if k > ranking.len() {
                return Err(Error::invalid(
                    "recall_at_k",
                    format!("K={k} exceeds the {} gallery candidates", ranking.len()),
                ));
            }
            if ranking[..k].iter().any(|&i| index.labels[i] == q.label) {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / queries.len() as f64).collect())
}

pub fn recall_at_k(index: &RetrievalIndex, queries: &[Query<'_>], k: usize) -> Result<f64> {
    Ok(recall_at_ks(index, queries, &[k])?[0])
}

/// Value at quantile `q` of `values`: the element of rank `⌊q·(n−1)⌋`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid("quantile", format!("quantile must lie in (0,1), got {q}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("quantile", "empty input"));
    }
    let mut v = values.to_vec();
    let r = (q * (v.len() - 1) as f64).floor() as usize;
    let (_, t, _) = v.select_nth_unstable_by(r, f64::total_cmp);
    Ok(*t)
}

/// Pixels strictly above the `q` quantile of `map`.
pub fn binarize(map: &[f64], q: f64) -> Result<Vec<u8>> {
    let t = quantile(map, q)?;
    Ok(map.iter().map(|&v| u8::from(v > t)).collect())
}

pub fn iou(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("iou", &[truth.len()], &[pred.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p != 0, t != 0);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// IoU between `map` binarized at its own quantile and `part_mask`. A map that
/// is zero everywhere scores 0.
pub fn attention_iou(map: &[f64], part_mask: &[u8], q: f64) -> Result<f64> {
    if map.len() != part_mask.len() {
        return Err(Error::shape("attention_iou", &[part_mask.len()], &[map.len()]));
    }
    let pred = binarize(map, q)?;
    if map.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    iou(&pred, part_mask)
}

/// Mean and standard deviation of a statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Sample mean and (n−1)-normalized standard deviation.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Summary { mean, std: var.sqrt() }
    }

    pub fn std_error(values: &[f64]) -> f64 {
        Summary::of(values).std / (values.len() as f64).sqrt()
    }
}

/// Monte-Carlo distribution of the mean IoU that uniformly random maps of
/// size `map_dims`, upsampled like attention maps, score against `masks`.
/// Returns the mean and standard deviation over `trials` draws of that mean.
pub fn random_map_baseline(
    masks: &[&[u8]],
    image_dims: (usize, usize),
    map_dims: (usize, usize),
    q: f64,
    trials: usize,
    seed: u64,
) -> Result<Summary> {
    if masks.is_empty() || trials == 0 {
        return Err(Error::invalid("random_map_baseline", "need masks and at least one trial"));
    }
    let g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = map_dims;
    let mut means = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut total = 0.0;
        for mask in masks {
            let map = Tensor::new(&[m, n], (0..m * n).map(|_| rng.gen::<f64>()).collect())?;
            let up = upsample_bilinear(&g, &map, image_dims.0, image_dims.1)?;
            total += attention_iou(up.data(), mask, q)?;
        }
        means.push(total / masks.len() as f64);
    }
    Ok(Summary::of(&means))
}

/// Attention maps for a tuple drawn from `dataset`, upsampled to image size.
pub fn tuple_maps(enc: &Encoder, dataset: &Dataset, members: &[usize], arch: WeightArch) -> Result<Vec<Tensor>> {
    let g = Graph::new();
    let bound = enc.bind(&g, false);
    let images: Vec<Tensor> = members.iter().map(|&i| dataset.samples[i].image.clone()).collect();
    let att = attend(&bound, &images, arch, true, false)?;
    att.maps
        .iter()
        .map(|m| upsample_bilinear(&g, &m.map.detach(), dataset.height, dataset.width).map(|t| t.detach()))
        .collect()
}

/// A tuple around `anchor` for attention scoring: a different sample of the
/// same class, then negatives from distinct other classes.
fn tuple_around(by_class: &[Vec<usize>], label: u32, anchor: usize, arity: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let ca = label as usize - 1;
    let same = &by_class[ca];
    if same.len() < 2 || by_class.len() < arity - 1 {
        return Err(Error::invalid("attention_iou", "not enough samples or classes for tuples"));
    }
    let mut members = vec![anchor];
    loop {
        let p = same[rng.gen_range(0..same.len())];
        if p != anchor {
            members.push(p);
            break;
        }
    }
    let mut used = vec![ca];
    while members.len() < arity {
        let c = rng.gen_range(0..by_class.len());
        if used.contains(&c) || by_class[c].is_empty() {
            continue;
        }
        used.push(c);
        members.push(by_class[c][rng.gen_range(0..by_class[c].len())]);
    }
    Ok(members)
}

/// Attention IoU of every sample of `dataset`, each scored as the anchor of a
/// seeded tuple of `arch` (a same-class pair for Siamese models).
pub fn dataset_attention_iou(enc: &Encoder, dataset: &Dataset, arch: Architecture, q: f64, seed: u64) -> Result<Vec<f64>> {
    let by_class = dataset.indices_by_class();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warch = WeightArch::for_tuple(arch, true);
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let members = tuple_around(&by_class, s.label, i, arch.arity(), &mut rng)?;
            let maps = tuple_maps(enc, dataset, &members, warch)?;
            attention_iou(maps[0].data(), &s.part_mask, q)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// `H×W` binary mask.
    pub mask: Vec<u8>,
    pub iou: f64,
    pub label: u32,
}

/// Segments `test` from its attention map in the same-class pair
/// `(test, support)`, binarized at quantile `q`.
pub fn one_shot_segment(enc: &Encoder, test: &Sample, support: &Sample, q: f64) -> Result<SegmentationResult> {
    let g = Graph::new();
    let bound = enc.bind(&g, false);
    let att = attend(
        &bound,
        &[test.image.clone(), support.image.clone()],
        WeightArch::SiameseSame,
        true,
        false,
    )?;
    let (h, w) = (test.image.shape()[1], test.image.shape()[2]);
    let up = upsample_bilinear(&g, &att.maps[0].map.detach(), h, w)?;
    let mask = binarize(up.data(), q)?;
    let iou = if up.data().iter().all(|&v| v == 0.0) {
        0.0
    } else {
        iou(&mask, &test.part_mask)?
    };
    Ok(SegmentationResult {
        mask,
        iou,
        label: test.label,
    })
}

/// `n` seeded `(test, support)` index pairs: a uniform test sample and a
/// different sample of its class.
pub fn segmentation_pairs(dataset: &Dataset, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let by_class = dataset.indices_by_class();
    if dataset.is_empty() || by_class.iter().any(|c| c.len() < 2) {
        return Err(Error::invalid("segmentation_pairs", "every class needs at least 2 samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let t = rng.gen_range(0..dataset.len());
            let pool = &by_class[dataset.samples[t].label as usize - 1];
            loop {
                let s = pool[rng.gen_range(0..pool.len())];
                if s != t {
                    return (t, s);
                }
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    /// `(label, mean IoU, pair count)` for every class that occurred.
    pub per_class: Vec<(u32, f64, usize)>,
    pub mean_iou: f64,
    pub std_error: f64,
    pub ious: Vec<f64>,
}

pub fn segmentation_report(enc: &Encoder, dataset: &Dataset, pairs: &[(usize, usize)], q: f64) -> Result<SegmentationReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("segment", "no pairs"));
    }
    let mut ious = Vec::with_capacity(pairs.len());
    let mut per = vec![(0.0, 0usize); dataset.classes];
    for &(t, s) in pairs {
        let (test, support) = (&dataset.samples[t], &dataset.samples[s]);
        let r = one_shot_segment(enc, test, support, q)?;
        let slot = &mut per[r.label as usize - 1];
        slot.0 += r.iou;
        slot.1 += 1;
        ious.push(r.iou);
    }
    Ok(SegmentationReport {
        per_class: per
            .iter()
            .enumerate()
            .filter(|(_, p)| p.1 > 0)
            .map(|(c, p)| (c as u32 + 1, p.0 / p.1 as f64, p.1))
            .collect(),
        mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
        std_error: Summary::std_error(&ious),
        ious,
    })
}
