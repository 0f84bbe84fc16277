use alloc::vec::Vec;

use super::{clahe, Transform};
use crate::error::{Error, Result};
use crate::resample::resize_bilinear;
use crate::volume::Image;

const EMBOSS: [[f64; 3]; 3] = [[-1.0, -1.0, 0.0], [-1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];

/// Applies one concrete transform to a slice. Output stays in `[0, 1]`.
pub fn apply_transform(image: &Image, transform: &Transform) -> Result<Image> {
    let out = match *transform {
        Transform::HorizontalFlip => flip(image),
        Transform::Contrast { alpha } => {
            let mu = image.mean();
            map(image, |x| mu + (1.0 + alpha) * (x - mu))
        }
        Transform::Gamma { gamma } => map(image, |x| libm::pow(x, gamma)),
        Transform::Brightness { beta } => map(image, |x| x * (1.0 + beta)),
        Transform::Clahe { clip_limit, tiles } => clahe(image, clip_limit, tiles),
        Transform::Sharpen { amount } => {
            let blurred = convolve3(image, &[[1.0 / 9.0; 3]; 3]);
            let data = image
                .data
                .iter()
                .zip(&blurred)
                .map(|(&x, &b)| (x + amount * (x - b)).clamp(0.0, 1.0))
                .collect();
            Image {
                height: image.height,
                width: image.width,
                data,
            }
        }
        Transform::EmbossOverlay { strength, alpha } => {
            let mut kernel = EMBOSS;
            kernel.iter_mut().flatten().for_each(|k| *k *= strength);
            let embossed = convolve3(image, &kernel);
            let data = image
                .data
                .iter()
                .zip(&embossed)
                .map(|(&x, &e)| {
                    let e = (e + 0.5).clamp(0.0, 1.0);
                    ((1.0 - alpha) * x + alpha * e).clamp(0.0, 1.0)
                })
                .collect();
            Image {
                height: image.height,
                width: image.width,
                data,
            }
        }
        Transform::BrightnessContrast { alpha, beta } => {
            map(image, |x| (1.0 + alpha) * (x - 0.5) + 0.5 + beta)
        }
        Transform::CenterCrop { size } => {
            check_crop(image, size)?;
            let top = (image.height - size) / 2;
            let left = (image.width - size) / 2;
            crop_resize(image, size, top, left)?
        }
        Transform::RandomCrop { size, row, col } => {
            check_crop(image, size)?;
            let top = offset(image.height - size, row);
            let left = offset(image.width - size, col);
            crop_resize(image, size, top, left)?
        }
        Transform::Rotate { degrees } => rotate(image, degrees),
        Transform::Shift { rows, cols } => shift(image, rows, cols),
    };
    Ok(out)
}

fn map(image: &Image, f: impl Fn(f64) -> f64) -> Image {
    Image {
        height: image.height,
        width: image.width,
        data: image.data.iter().map(|&x| f(x).clamp(0.0, 1.0)).collect(),
    }
}

fn flip(image: &Image) -> Image {
    let mut data = Vec::with_capacity(image.data.len());
    for row in image.data.chunks_exact(image.width) {
        data.extend(row.iter().rev());
    }
    Image {
        height: image.height,
        width: image.width,
        data,
    }
}

fn check_crop(image: &Image, size: usize) -> Result<()> {
    if size == 0 || size > image.height || size > image.width {
        return Err(Error::Geometry {
            crop: size,
            height: image.height,
            width: image.width,
        });
    }
    Ok(())
}

// Uniform position in `0..=range` from a fraction in `[0, 1)`.
fn offset(range: usize, frac: f64) -> usize {
    let pos = libm::floor(frac * (range + 1) as f64) as usize;
    pos.min(range)
}

fn crop_resize(image: &Image, size: usize, top: usize, left: usize) -> Result<Image> {
    let mut data = Vec::with_capacity(size * size);
    for r in top..top + size {
        let start = r * image.width + left;
        data.extend_from_slice(&image.data[start..start + size]);
    }
    let cropped = Image {
        height: size,
        width: size,
        data,
    };
    resize_bilinear(&cropped, image.height, image.width)
}

/// 3x3 correlation with replicate-edge padding.
pub(crate) fn convolve3(image: &Image, kernel: &[[f64; 3]; 3]) -> Vec<f64> {
    let (h, w) = (image.height as isize, image.width as isize);
    let mut out = Vec::with_capacity(image.data.len());
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (kr, krow) in kernel.iter().enumerate() {
                let rr = (r + kr as isize - 1).clamp(0, h - 1) as usize;
                for (kc, &k) in krow.iter().enumerate() {
                    let cc = (c + kc as isize - 1).clamp(0, w - 1) as usize;
                    acc += k * image.at(rr, cc);
                }
            }
            out.push(acc);
        }
    }
    out
}

fn rotate(image: &Image, degrees: f64) -> Image {
    let theta = degrees.to_radians();
    let (sin, cos) = (libm::sin(theta), libm::cos(theta));
    let cy = (image.height as f64 - 1.0) / 2.0;
    let cx = (image.width as f64 - 1.0) / 2.0;
    let sample = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= image.height as isize || c >= image.width as isize {
            0.0
        } else {
            image.at(r as usize, c as usize)
        }
    };
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..image.height {
        for c in 0..image.width {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            // Inverse rotation maps the output pixel back into the source.
            let sy = cos * dy + sin * dx + cy;
            let sx = -sin * dy + cos * dx + cx;
            let y0 = libm::floor(sy);
            let x0 = libm::floor(sx);
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let v = sample(y0, x0) * (1.0 - fy) * (1.0 - fx)
                + sample(y0, x0 + 1) * (1.0 - fy) * fx
                + sample(y0 + 1, x0) * fy * (1.0 - fx)
                + sample(y0 + 1, x0 + 1) * fy * fx;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image {
        height: image.height,
        width: image.width,
        data,
    }
}

fn shift(image: &Image, rows: i64, cols: i64) -> Image {
    let (h, w) = (image.height as i64, image.width as i64);
    let mut data = Vec::with_capacity(image.data.len());
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = (r - rows, c - cols);
            let v = if sr >= 0 && sr < h && sc >= 0 && sc < w {
                image.at(sr as usize, sc as usize)
            } else {
                0.0
            };
            data.push(v);
        }
    }
    Image {
        height: image.height,
        width: image.width,
        data,
    }
}
