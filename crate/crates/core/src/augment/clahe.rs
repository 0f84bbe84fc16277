//! Contrast-limited adaptive histogram equalization on a single channel.

use alloc::vec;
use alloc::vec::Vec;

use crate::volume::Image;

const BINS: usize = 256;

#[inline]
fn bin(x: f64) -> usize {
    (libm::round(x.clamp(0.0, 1.0) * (BINS - 1) as f64) as usize).min(BINS - 1)
}

/// CLAHE with a `tiles x tiles` grid and a clip limit expressed as a
/// multiple of the uniform bin height. Tile mappings are blended bilinearly
/// between tile centers.
pub fn clahe(image: &Image, clip_limit: f64, tiles: usize) -> Image {
    let (h, w) = (image.height, image.width);
    let tiles_y = tiles.clamp(1, h);
    let tiles_x = tiles.clamp(1, w);
    let row_edges: Vec<usize> = (0..=tiles_y).map(|k| k * h / tiles_y).collect();
    let col_edges: Vec<usize> = (0..=tiles_x).map(|k| k * w / tiles_x).collect();

    let mut luts = vec![[0.0f64; BINS]; tiles_y * tiles_x];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut hist = [0.0f64; BINS];
            let (r0, r1) = (row_edges[ty], row_edges[ty + 1]);
            let (c0, c1) = (col_edges[tx], col_edges[tx + 1]);
            for r in r0..r1 {
                for &x in &image.data[r * w + c0..r * w + c1] {
                    hist[bin(x)] += 1.0;
                }
            }
            let area = ((r1 - r0) * (c1 - c0)) as f64;
            let clip = (clip_limit * area / BINS as f64).max(1.0);
            let mut excess = 0.0;
            for count in hist.iter_mut() {
                if *count > clip {
                    excess += *count - clip;
                    *count = clip;
                }
            }
            let bonus = excess / BINS as f64;
            let lut = &mut luts[ty * tiles_x + tx];
            let mut cdf = 0.0;
            for (b, count) in hist.iter().enumerate() {
                cdf += count + bonus;
                lut[b] = (cdf / area).clamp(0.0, 1.0);
            }
        }
    }

    let tile_h = h as f64 / tiles_y as f64;
    let tile_w = w as f64 / tiles_x as f64;
    let neighbours = |pos: usize, size: f64, count: usize| -> (usize, usize, f64) {
        let t = (pos as f64 + 0.5) / size - 0.5;
        let lo = libm::floor(t);
        let frac = t - lo;
        let lo = lo as isize;
        let a = lo.clamp(0, count as isize - 1) as usize;
        let b = (lo + 1).clamp(0, count as isize - 1) as usize;
        (a, b, frac)
    };

    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let (y0, y1, fy) = neighbours(r, tile_h, tiles_y);
        for c in 0..w {
            let (x0, x1, fx) = neighbours(c, tile_w, tiles_x);
            let b = bin(image.at(r, c));
            let top = luts[y0 * tiles_x + x0][b] * (1.0 - fx) + luts[y0 * tiles_x + x1][b] * fx;
            let bottom = luts[y1 * tiles_x + x0][b] * (1.0 - fx) + luts[y1 * tiles_x + x1][b] * fx;
            data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    Image {
        height: h,
        width: w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_in_unit_range_and_monotone_per_tile() {
        // A single tile is a plain (clipped) equalization: monotone in input.
        let data: Vec<f64> = (0..64).map(|i| (i as f64 / 63.0).powi(3)).collect();
        let img = Image::new(8, 8, data).unwrap();
        let out = clahe(&img, 2.0, 1);
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for pair in img.data.iter().zip(&out.data).collect::<Vec<_>>().windows(2) {
            if pair[0].0 < pair[1].0 {
                assert!(pair[0].1 <= pair[1].1);
            }
        }
    }

    #[test]
    fn stretches_low_contrast_image() {
        let data: Vec<f64> = (0..256).map(|i| 0.4 + 0.1 * (i % 16) as f64 / 15.0).collect();
        let img = Image::new(16, 16, data).unwrap();
        let out = clahe(&img, 2.0, 8);
        let spread = |d: &[f64]| {
            let (lo, hi) = d
                .iter()
                .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        };
        assert!(spread(&out.data) > spread(&img.data));
    }

    #[test]
    fn clip_limit_bounds_gain() {
        // With heavy clipping the map approaches the identity-like uniform
        // ramp, so a constant image cannot jump to an extreme.
        let img = Image::filled(16, 16, 0.5);
        let strong = clahe(&img, 1000.0, 2);
        let weak = clahe(&img, 1.0, 2);
        assert!(strong.data.iter().all(|&v| v > 0.99));
        assert!(weak.data.iter().all(|&v| v < strong.data[0]));
    }
}
