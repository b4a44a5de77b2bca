use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::arch::Architecture;
use crate::error::{Error, Result};

/// Dataset indices of one training tuple: `(x¹, x²)`, `(a, p, n)` or `(a, p, n1, n2)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tuple {
    pub members: Vec<usize>,
    /// Whether the first two members share a class. Always true for triplets
    /// and quadruplets.
    pub same_class: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleBatch {
    pub arch: Architecture,
    pub tuples: Vec<Tuple>,
}

fn pick_other(rng: &mut ChaCha8Rng, pool: &[usize], not: usize) -> usize {
    // pool has at least two entries
    loop {
        let c = pool[rng.gen_range(0..pool.len())];
        if c != not {
            return c;
        }
    }
}

fn pick_class(rng: &mut ChaCha8Rng, k: usize, exclude: &[usize]) -> usize {
    loop {
        let c = rng.gen_range(0..k);
        if !exclude.contains(&c) {
            return c;
        }
    }
}

/// Uniformly samples `batch` tuples. Anchor and positive are distinct samples
/// of one class; negatives come from other classes, and the two quadruplet
/// negatives from two distinct non-anchor classes. Siamese batches alternate
/// same-class and different-class pairs, starting with a same-class pair.
pub fn sample_tuples(dataset: &Dataset, arch: Architecture, batch: usize, seed: u64) -> Result<TupleBatch> {
    let by_class = dataset.indices_by_class();
    let k = by_class.len();
    let min_classes = if arch == Architecture::Quadruplet { 3 } else { 2 };
    if k < min_classes {
        return Err(Error::invalid(
            "sample_tuples",
            format!("{arch} tuples need at least {min_classes} classes, dataset has {k}"),
        ));
    }
    if let Some(c) = by_class.iter().position(|v| v.len() < 2) {
        return Err(Error::invalid(
            "sample_tuples",
            format!("class {} has fewer than 2 samples", c + 1),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tuples = Vec::with_capacity(batch);
    for t in 0..batch {
        let ca = rng.gen_range(0..k);
        let a = by_class[ca][rng.gen_range(0..by_class[ca].len())];
        let tuple = match arch {
            Architecture::Siamese if t % 2 == 1 => {
                let cn = pick_class(&mut rng, k, &[ca]);
                let n = by_class[cn][rng.gen_range(0..by_class[cn].len())];
                Tuple {
                    members: vec![a, n],
                    same_class: false,
                }
            }
            _ => {
                let p = pick_other(&mut rng, &by_class[ca], a);
                let mut members = vec![a, p];
                let mut used = vec![ca];
                for _ in 2..arch.arity() {
                    let cn = pick_class(&mut rng, k, &used);
                    used.push(cn);
                    members.push(by_class[cn][rng.gen_range(0..by_class[cn].len())]);
                }
                Tuple {
                    members,
                    same_class: true,
                }
            }
        };
        tuples.push(tuple);
    }
    Ok(TupleBatch { arch, tuples })
}
