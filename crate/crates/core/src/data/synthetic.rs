use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Binary pattern that identifies a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlyphKind {
    Cross,
    Ring,
    ElShape,
    TeeShape,
    Diamond,
    Bars,
    Checker,
    DotGrid,
    /// Seeded random binary pattern, used once the named shapes run out.
    Random(u64),
}

impl GlyphKind {
    const NAMED: [GlyphKind; 8] = [
        GlyphKind::Cross,
        GlyphKind::Ring,
        GlyphKind::ElShape,
        GlyphKind::TeeShape,
        GlyphKind::Diamond,
        GlyphKind::Bars,
        GlyphKind::Checker,
        GlyphKind::DotGrid,
    ];

    /// Pattern of `size×size` cells, row-major, `true` where the glyph is lit.
    pub fn pattern(self, size: usize) -> Vec<bool> {
        let s = size as f64;
        let c = (s - 1.0) / 2.0;
        let band = (s / 6.0).max(1.0);
        let mut out = Vec::with_capacity(size * size);
        let mut rng = match self {
            GlyphKind::Random(seed) => Some(ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)),
            _ => None,
        };
        for i in 0..size {
            for j in 0..size {
                let (fi, fj) = (i as f64, j as f64);
                let on = match self {
                    GlyphKind::Cross => (fi - c).abs() < band || (fj - c).abs() < band,
                    GlyphKind::Ring => {
                        let r = ((fi - c).powi(2) + (fj - c).powi(2)).sqrt();
                        r <= s / 2.0 - 0.5 && r >= s / 2.0 - 0.5 - band * 1.5
                    }
                    GlyphKind::ElShape => fj < band * 1.5 || fi >= s - band * 1.5,
                    GlyphKind::TeeShape => fi < band * 1.5 || (fj - c).abs() < band,
                    GlyphKind::Diamond => (fi - c).abs() + (fj - c).abs() <= s / 2.0 - 0.5,
                    GlyphKind::Bars => j % 4 < 2,
                    GlyphKind::Checker => ((i / 3) + (j / 3)) % 2 == 0,
                    GlyphKind::DotGrid => matches!(i % 4, 1 | 2) && matches!(j % 4, 1 | 2),
                    GlyphKind::Random(_) => rng.as_mut().map(|r| r.gen_bool(0.5)).unwrap_or(false),
                };
                out.push(on);
            }
        }
        out
    }
}

/// Parameters of the procedural dataset. The seed fully determines the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub glyph_size: usize,
    /// Distractor blobs per image, drawn from one distribution for every class.
    pub clutter_blobs: usize,
    pub blob_size: usize,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            glyph_size: 12,
            clutter_blobs: 6,
            blob_size: 6,
            noise: 0.05,
            height: 64,
            width: 64,
            channels: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Glyph of each class, in label order.
    pub fn glyphs(&self) -> Vec<GlyphKind> {
        (0..self.classes)
            .map(|i| {
                GlyphKind::NAMED
                    .get(i)
                    .copied()
                    .unwrap_or(GlyphKind::Random(self.seed.wrapping_add(i as u64)))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synthetic", format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("synthetic", "image dimensions must be positive"));
        }
        if self.glyph_size == 0 || self.glyph_size > self.height || self.glyph_size > self.width {
            return Err(Error::invalid(
                "synthetic",
                format!("glyph {} does not fit a {}×{} image", self.glyph_size, self.height, self.width),
            ));
        }
        if self.clutter_blobs > 0 && (self.blob_size == 0 || self.blob_size > self.height || self.blob_size > self.width) {
            return Err(Error::invalid("synthetic", "clutter blob does not fit the image"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("synthetic", "noise must be non-negative"));
        }
        let patterns: Vec<Vec<bool>> = self.glyphs().iter().map(|g| g.pattern(self.glyph_size)).collect();
        for i in 0..patterns.len() {
            for j in 0..i {
                if patterns[i] == patterns[j] {
                    return Err(Error::invalid(
                        "synthetic",
                        format!("classes {} and {} would share a glyph", j + 1, i + 1),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One labelled image with the ground-truth region of its class glyph.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `c×H×W`, values in `[0, 1]`
    pub image: Tensor,
    /// Class id in `1..=k`.
    pub label: u32,
    /// `H×W`, 1 inside the glyph's bounding square.
    pub part_mask: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    /// Sample indices of each class; entry `i` holds label `i + 1`.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label as usize - 1].push(i);
        }
        out
    }

    pub fn labels(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Class-stratified split: `val_per_class` samples of every class, picked by
    /// a seeded shuffle, go to the second dataset.
    pub fn split(&self, val_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut is_val = vec![false; self.len()];
        for (c, mut idx) in self.indices_by_class().into_iter().enumerate() {
            if idx.len() <= val_per_class {
                return Err(Error::invalid(
                    "split",
                    format!("class {} has {} samples, cannot hold out {val_per_class}", c + 1, idx.len()),
                ));
            }
            shuffle(&mut idx, &mut rng);
            for &i in &idx[..val_per_class] {
                is_val[i] = true;
            }
        }
        let pick = |want: bool| Dataset {
            samples: self
                .samples
                .iter()
                .zip(&is_val)
                .filter(|(_, &v)| v == want)
                .map(|(s, _)| s.clone())
                .collect(),
            ..self.empty_like()
        };
        Ok((pick(false), pick(true)))
    }

    pub(crate) fn empty_like(&self) -> Dataset {
        Dataset {
            classes: self.classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            samples: Vec::new(),
        }
    }
}

/// Fisher–Yates with the crate's seeded generator.
fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Draws `n_per_class` images of each class: clutter blobs, then the class
/// glyph at a uniformly random position, then uniform noise, clamped to [0, 1].
pub fn generate(spec: &SyntheticSpec, n_per_class: usize) -> Result<Dataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::invalid("generate", "n_per_class must be at least 1"));
    }
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let gs = spec.glyph_size;
    let patterns: Vec<Vec<bool>> = spec.glyphs().iter().map(|g| g.pattern(gs)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.classes * n_per_class);
    for (class, pattern) in patterns.iter().enumerate() {
        for _ in 0..n_per_class {
            let mut plane = vec![0.0f64; h * w];
            for _ in 0..spec.clutter_blobs {
                let bs = spec.blob_size;
                let (bi, bj) = (rng.gen_range(0..=h - bs), rng.gen_range(0..=w - bs));
                for i in 0..bs {
                    for j in 0..bs {
                        if rng.gen_bool(0.5) {
                            plane[(bi + i) * w + bj + j] = 1.0;
                        }
                    }
                }
            }
            let (gi, gj) = (rng.gen_range(0..=h - gs), rng.gen_range(0..=w - gs));
            let mut part_mask = vec![0u8; h * w];
            for i in 0..gs {
                for j in 0..gs {
                    let p = (gi + i) * w + gj + j;
                    part_mask[p] = 1;
                    if pattern[i * gs + j] {
                        plane[p] = 1.0;
                    }
                }
            }
            let mut data = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                for &v in &plane {
                    let n = if spec.noise > 0.0 {
                        rng.gen_range(-spec.noise..=spec.noise)
                    } else {
                        0.0
                    };
                    data.push((v + n).clamp(0.0, 1.0));
                }
            }
            samples.push(Sample {
                image: Tensor::from_parts(vec![c, h, w], data),
                label: class as u32 + 1,
                part_mask,
            });
        }
    }
    Ok(Dataset {
        classes: spec.classes,
        channels: c,
        height: h,
        width: w,
        samples,
    })
}
