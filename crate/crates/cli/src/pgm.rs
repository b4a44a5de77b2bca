//! Binary greyscale PGM (`P5`) export of attention maps.

use simattn_core::attention::{normalize_map, upsample_bilinear};
use simattn_core::{Graph, Result, Tensor};

/// `P5\n<W> <H>\n255\n` followed by the row-major pixels.
pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height, "pixel count does not match {width}×{height}");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Max-normalizes an `m×n` map, upsamples it bilinearly to `height×width` and
/// quantizes each value to `round(255·v)`.
pub fn attention_pixels(map: &Tensor, height: usize, width: usize) -> Result<Vec<u8>> {
    let g = Graph::new();
    let norm = normalize_map(&g, &map.detach())?;
    let up = upsample_bilinear(&g, &norm, height, width)?;
    Ok(up.data().iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect())
}
