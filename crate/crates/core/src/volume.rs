use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Imaging orientation of a slice stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::Domain(format!("unknown plane `{other}`"))),
        }
    }
}

/// Binary prediction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Acl,
    Meniscus,
    Abnormal,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Acl, Task::Meniscus, Task::Abnormal];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Acl => "acl",
            Task::Meniscus => "meniscus",
            Task::Abnormal => "abnormal",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acl" => Ok(Task::Acl),
            "meniscus" => Ok(Task::Meniscus),
            "abnormal" => Ok(Task::Abnormal),
            other => Err(Error::Domain(format!("unknown task `{other}`"))),
        }
    }
}

/// A single 2D slice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: alloc::vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// One exam's slice stack for one plane, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MriVolume {
    case_id: String,
    plane: Plane,
    slices: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    resliced: bool,
}

impl MriVolume {
    /// Validates the shape and that every intensity lies in `[0, 1]`.
    pub fn new(
        case_id: impl Into<String>,
        plane: Plane,
        slices: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if slices == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidVolume(format!(
                "dimensions must be positive, got {slices}x{height}x{width}"
            )));
        }
        if data.len() != slices * height * width {
            return Err(Error::InvalidVolume(format!(
                "{slices}x{height}x{width} volume needs {} values, got {}",
                slices * height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidVolume(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(MriVolume {
            case_id: case_id.into(),
            plane,
            slices,
            height,
            width,
            data,
            resliced: false,
        })
    }

    /// Builds a volume from slices that share one shape.
    pub fn from_images(case_id: impl Into<String>, plane: Plane, images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyVolume)?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::Shape(format!(
                    "slice {}x{} differs from {h}x{w}",
                    img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        MriVolume::new(case_id, plane, images.len(), h, w, data)
    }

    // Internal constructor for outputs whose range is already guaranteed.
    pub(crate) fn from_parts(
        template: &MriVolume,
        slices: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), slices * height * width);
        MriVolume {
            case_id: template.case_id.clone(),
            plane: template.plane,
            slices,
            height,
            width,
            data,
            resliced: template.resliced,
        }
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn slices(&self) -> usize {
        self.slices
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Whether the stack was re-sliced along the row axis.
    pub fn is_resliced(&self) -> bool {
        self.resliced
    }

    pub(crate) fn set_resliced(&mut self, flag: bool) {
        self.resliced = flag;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, index: usize) -> &[f64] {
        let n = self.slice_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn image(&self, index: usize) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.slice(index).to_vec(),
        }
    }

    pub fn images(&self) -> impl Iterator<Item = Image> + '_ {
        (0..self.slices).map(|i| self.image(i))
    }

    #[inline]
    pub fn voxel(&self, slice: usize, row: usize, col: usize) -> f64 {
        self.data[(slice * self.height + row) * self.width + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_out_of_range_intensity() {
        let err = MriVolume::new("0001", Plane::Axial, 1, 1, 2, vec![0.5, 1.5]).unwrap_err();
        assert!(matches!(err, Error::InvalidVolume(_)));
    }

    #[test]
    fn rejects_length_mismatch_and_empty_dims() {
        assert!(MriVolume::new("a", Plane::Axial, 2, 2, 2, vec![0.0; 7]).is_err());
        assert!(MriVolume::new("a", Plane::Axial, 0, 2, 2, vec![]).is_err());
    }

    #[test]
    fn names_round_trip() {
        for p in Plane::ALL {
            assert_eq!(p.as_str().parse::<Plane>().unwrap(), p);
        }
        for t in Task::ALL {
            assert_eq!(t.as_str().parse::<Task>().unwrap(), t);
        }
        assert!("femoral".parse::<Plane>().is_err());
    }

    #[test]
    fn voxel_indexing_is_slice_row_col() {
        let data: Vec<f64> = (0..24).map(|v| v as f64 / 24.0).collect();
        let vol = MriVolume::new("x", Plane::Coronal, 2, 3, 4, data).unwrap();
        assert_eq!(vol.voxel(1, 2, 3), 23.0 / 24.0);
        assert_eq!(vol.slice(1)[0], 12.0 / 24.0);
    }
}
