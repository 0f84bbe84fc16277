//! Slice-count normalization.
//!
//! Volumes arrive with anywhere from 17 to 61 slices per plane. Models that
//! batch or stack slices need a fixed count, obtained either by box-overlap
//! interpolation along the slice axis or by keeping a centered window.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Image, MriVolume};

/// Row-stochastic weights mapping `n_source` slices onto `n_target` slices.
///
/// Output slice `j` covers `[j*n/m, (j+1)*n/m)` on the source axis; its weight
/// on source slice `i` is the overlap with `[i, i+1)` scaled by `m/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationMatrix {
    n_source: usize,
    n_target: usize,
    weights: Vec<f64>,
    // Per row, the half-open range of source columns with nonzero weight.
    support: Vec<(usize, usize)>,
}

impl InterpolationMatrix {
    pub fn new(n_source: usize, n_target: usize) -> Result<Self> {
        if n_source == 0 || n_target == 0 {
            return Err(Error::Domain(format!(
                "interpolation needs positive counts, got {n_source} -> {n_target}"
            )));
        }
        let (n, m) = (n_source, n_target);
        let mut weights = vec![0.0; m * n];
        let mut support = Vec::with_capacity(m);
        // Work in units of 1/m of a source slice so overlaps are integers.
        for j in 0..m {
            let lo = j * n;
            let hi = (j + 1) * n;
            let first = lo / m;
            let last = (hi - 1) / m;
            for i in first..=last {
                let overlap = hi.min((i + 1) * m) - lo.max(i * m);
                weights[j * n + i] = overlap as f64 / n as f64;
            }
            support.push((first, last + 1));
        }
        Ok(InterpolationMatrix {
            n_source,
            n_target,
            weights,
            support,
        })
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn weight(&self, target: usize, source: usize) -> f64 {
        self.weights[target * self.n_source + source]
    }

    pub fn row(&self, target: usize) -> &[f64] {
        &self.weights[target * self.n_source..(target + 1) * self.n_source]
    }

    /// Half-open range of source slices contributing to `target`.
    pub fn support(&self, target: usize) -> (usize, usize) {
        self.support[target]
    }
}

/// Shorthand for [`InterpolationMatrix::new`].
pub fn interpolation_matrix(n_source: usize, n_target: usize) -> Result<InterpolationMatrix> {
    InterpolationMatrix::new(n_source, n_target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Interpolate,
    MiddleWindow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResliceAxis {
    #[default]
    None,
    Horizontal,
}

/// How a variable-length stack is brought to a fixed slice count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleSpec {
    pub mode: ResampleMode,
    pub target_count: usize,
    #[serde(default)]
    pub reslice_axis: ResliceAxis,
}

impl ResampleSpec {
    pub const DEFAULT_INTERPOLATED: usize = 15;
    pub const DEFAULT_WINDOW: usize = 17;

    pub fn interpolate(target_count: usize) -> Self {
        ResampleSpec {
            mode: ResampleMode::Interpolate,
            target_count,
            reslice_axis: ResliceAxis::None,
        }
    }

    pub fn middle_window(target_count: usize) -> Self {
        ResampleSpec {
            mode: ResampleMode::MiddleWindow,
            target_count,
            reslice_axis: ResliceAxis::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_count == 0 {
            return Err(Error::Domain("target_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Re-slices (if requested) and then normalizes the slice count.
    pub fn apply(&self, vol: &MriVolume) -> Result<MriVolume> {
        self.validate()?;
        let resliced;
        let vol = match self.reslice_axis {
            ResliceAxis::None => vol,
            ResliceAxis::Horizontal => {
                resliced = reslice_horizontal(vol);
                &resliced
            }
        };
        match self.mode {
            ResampleMode::Interpolate => resample_volume(vol, self.target_count),
            ResampleMode::MiddleWindow => middle_slices(vol, self.target_count),
        }
    }
}

impl Default for ResampleSpec {
    fn default() -> Self {
        ResampleSpec::interpolate(Self::DEFAULT_INTERPOLATED)
    }
}

/// Interpolates the slice axis to `target` slices.
pub fn resample_volume(vol: &MriVolume, target: usize) -> Result<MriVolume> {
    let s = vol.slices();
    if target == s {
        return Ok(vol.clone());
    }
    let matrix = InterpolationMatrix::new(s, target)?;
    let len = vol.slice_len();
    let mut out = vec![0.0; target * len];
    for j in 0..target {
        let dst = &mut out[j * len..(j + 1) * len];
        let (first, last) = matrix.support(j);
        for i in first..last {
            let w = matrix.weight(j, i);
            for (d, &v) in dst.iter_mut().zip(vol.slice(i)) {
                *d += w * v;
            }
        }
        // Convex weights can only overshoot by rounding.
        for d in dst.iter_mut() {
            *d = d.clamp(0.0, 1.0);
        }
    }
    Ok(MriVolume::from_parts(
        vol,
        target,
        vol.height(),
        vol.width(),
        out,
    ))
}

/// Keeps `k` consecutive slices starting at `floor((s - k) / 2)`.
pub fn middle_slices(vol: &MriVolume, k: usize) -> Result<MriVolume> {
    let s = vol.slices();
    if k == 0 || k > s {
        return Err(Error::Window {
            window: k,
            slices: s,
        });
    }
    let start = (s - k) / 2;
    let len = vol.slice_len();
    let data = vol.data()[start * len..(start + k) * len].to_vec();
    Ok(MriVolume::from_parts(vol, k, vol.height(), vol.width(), data))
}

/// Swaps the slice and row axes: `out[h][i][w] = in[i][h][w]`.
pub fn reslice_horizontal(vol: &MriVolume) -> MriVolume {
    let (s, h, w) = (vol.slices(), vol.height(), vol.width());
    let src = vol.data();
    let mut data = Vec::with_capacity(src.len());
    for row in 0..h {
        for slice in 0..s {
            let start = (slice * h + row) * w;
            data.extend_from_slice(&src[start..start + w]);
        }
    }
    let mut out = MriVolume::from_parts(vol, h, s, w, data);
    out.set_resliced(!vol.is_resliced());
    out
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("cannot resize to {out_h}x{out_w}")));
    }
    if out_h == image.height && out_w == image.width {
        return Ok(image.clone());
    }
    let rows = axis_taps(image.height, out_h);
    let cols = axis_taps(image.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = image.at(r0, c0) * (1.0 - fc) + image.at(r0, c1) * fc;
            let bottom = image.at(r1, c0) * (1.0 - fc) + image.at(r1, c1) * fc;
            let v = top * (1.0 - fr) + bottom * fr;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        data,
    })
}

/// Resizes every slice of a volume.
pub fn resize_volume(vol: &MriVolume, out_h: usize, out_w: usize) -> Result<MriVolume> {
    if out_h == vol.height() && out_w == vol.width() {
        return Ok(vol.clone());
    }
    let mut data = Vec::with_capacity(vol.slices() * out_h * out_w);
    for img in vol.images() {
        data.extend(resize_bilinear(&img, out_h, out_w)?.data);
    }
    Ok(MriVolume::from_parts(vol, vol.slices(), out_h, out_w, data))
}

// (lower index, upper index, upper weight) for each output coordinate.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = libm::floor(src) as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Plane;

    fn ramp_volume(s: usize, h: usize, w: usize) -> MriVolume {
        let n = s * h * w;
        let data = (0..n).map(|i| i as f64 / n as f64).collect();
        MriVolume::new("r", Plane::Axial, s, h, w, data).unwrap()
    }

    #[test]
    fn identity_matrix_when_counts_match() {
        let m = interpolation_matrix(4, 4).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                assert_eq!(m.weight(j, i), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn five_to_four_rows() {
        let m = interpolation_matrix(5, 4).unwrap();
        let expected = [
            [0.8, 0.2, 0.0, 0.0, 0.0],
            [0.0, 0.6, 0.4, 0.0, 0.0],
            [0.0, 0.0, 0.4, 0.6, 0.0],
            [0.0, 0.0, 0.0, 0.2, 0.8],
        ];
        for (j, row) in expected.iter().enumerate() {
            for (i, &e) in row.iter().enumerate() {
                assert!((m.weight(j, i) - e).abs() < 1e-12, "({j},{i})");
            }
        }
    }

    #[test]
    fn two_to_one_averages() {
        let m = interpolation_matrix(2, 1).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn zero_counts_are_domain_errors() {
        assert!(matches!(interpolation_matrix(0, 3), Err(Error::Domain(_))));
        assert!(matches!(interpolation_matrix(3, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn upsampling_duplicates_sources() {
        let m = interpolation_matrix(2, 4).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0]);
        assert_eq!(m.row(1), &[1.0, 0.0]);
        assert_eq!(m.row(3), &[0.0, 1.0]);
        let m = interpolation_matrix(2, 3).unwrap();
        assert_eq!(m.support(1), (0, 2));
        assert!((m.weight(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_volume_stays_constant() {
        for s in [17, 23, 61] {
            let vol = MriVolume::new("c", Plane::Axial, s, 3, 3, vec![0.3; s * 9]).unwrap();
            let out = resample_volume(&vol, 15).unwrap();
            assert_eq!(out.slices(), 15);
            assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn same_count_is_bitwise_identity() {
        let vol = ramp_volume(6, 4, 5);
        assert_eq!(resample_volume(&vol, 6).unwrap(), vol);
    }

    #[test]
    fn two_slices_to_one_is_half() {
        let mut data = vec![0.0; 4];
        data.extend([1.0; 4]);
        let vol = MriVolume::new("h", Plane::Axial, 2, 2, 2, data).unwrap();
        let out = resample_volume(&vol, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn middle_window_positions() {
        let vol = ramp_volume(20, 2, 2);
        let out = middle_slices(&vol, 17).unwrap();
        assert_eq!(out.slice(0), vol.slice(1));
        assert_eq!(out.slice(16), vol.slice(17));

        let vol = ramp_volume(61, 1, 1);
        let out = middle_slices(&vol, 17).unwrap();
        assert_eq!(out.slice(0), vol.slice(22));
        assert_eq!(out.slice(16), vol.slice(38));

        let vol = ramp_volume(17, 2, 2);
        assert_eq!(middle_slices(&vol, 17).unwrap(), vol);
    }

    #[test]
    fn oversized_window_errors() {
        let vol = ramp_volume(10, 2, 2);
        assert_eq!(
            middle_slices(&vol, 17).unwrap_err(),
            Error::Window {
                window: 17,
                slices: 10
            }
        );
    }

    #[test]
    fn reslice_permutes_axes() {
        let (s, h, w) = (17, 12, 9);
        let mut data = vec![0.0; s * h * w];
        data[(3 * h + 10) * w + 7] = 1.0;
        let vol = MriVolume::new("p", Plane::Sagittal, s, h, w, data).unwrap();
        let out = reslice_horizontal(&vol);
        assert_eq!((out.slices(), out.height(), out.width()), (h, s, w));
        assert_eq!(out.plane(), Plane::Sagittal);
        assert!(out.is_resliced());
        assert_eq!(out.voxel(10, 3, 7), 1.0);
        assert_eq!(out.data().iter().filter(|&&v| v != 0.0).count(), 1);
        let back = reslice_horizontal(&out);
        assert_eq!(back, vol);
    }

    #[test]
    fn bilinear_half_pixel_row() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 2, 4).unwrap();
        for r in 0..2 {
            let row = &out.data[r * 4..(r + 1) * 4];
            for (a, b) in row.iter().zip([0.0, 0.25, 0.75, 1.0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let img = Image::filled(7, 5, 0.7);
        let out = resize_bilinear(&img, 13, 3).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let ramp = Image::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&ramp, 2, 3).unwrap(), ramp);
    }

    #[test]
    fn spec_apply_reslices_then_windows() {
        let vol = ramp_volume(20, 18, 4);
        let spec = ResampleSpec {
            mode: ResampleMode::MiddleWindow,
            target_count: 17,
            reslice_axis: ResliceAxis::Horizontal,
        };
        let out = spec.apply(&vol).unwrap();
        assert_eq!((out.slices(), out.height(), out.width()), (17, 20, 4));
        assert_eq!(out.voxel(0, 5, 2), vol.voxel(5, 0, 2));
    }
}
