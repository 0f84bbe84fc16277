//! Staged stochastic augmentation.
//!
//! A policy has four ordered stages: horizontal flip; one of
//! contrast/gamma/brightness; one of CLAHE/sharpen/emboss-overlay/
//! brightness-contrast; one of center/random crop. Each stage fires with the
//! same probability `p`. A policy draw is reified as a [`TransformPlan`] and
//! applied with identical parameters to every slice of a volume.

mod clahe;
mod transforms;

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::MriVolume;

pub use clahe::clahe;
pub use transforms::apply_transform;

/// Default crop edge for 256-pixel slices.
pub const DEFAULT_CROP: usize = 150;
pub const CLAHE_CLIP_LIMIT: f64 = 2.0;
pub const CLAHE_TILES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    #[default]
    ThreeChannel,
    SingleChannel,
}

/// Per-stage probability plus the options that shape the stage members.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub p: f64,
    #[serde(default)]
    pub channel_mode: ChannelMode,
    #[serde(default)]
    pub baseline_extras: bool,
    #[serde(default = "default_crop")]
    pub crop_size: usize,
}

fn default_crop() -> usize {
    DEFAULT_CROP
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            p: 0.0,
            channel_mode: ChannelMode::ThreeChannel,
            baseline_extras: false,
            crop_size: DEFAULT_CROP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Flip,
    Intensity,
    Local,
    Crop,
    Rotate,
    Shift,
}

impl Stage {
    /// Stage position in sampling order.
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Members a stage can pick from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Member {
    HorizontalFlip,
    Contrast,
    Gamma,
    Brightness,
    Clahe,
    Sharpen,
    EmbossOverlay,
    BrightnessContrast,
    CenterCrop,
    RandomCrop,
    Rotate,
    Shift,
}

impl AugmentationPolicy {
    pub fn with_p(p: f64) -> Self {
        AugmentationPolicy {
            p,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Policy(format!("p = {} outside [0, 1]", self.p)));
        }
        if self.crop_size == 0 {
            return Err(Error::Policy("crop_size must be positive".into()));
        }
        Ok(())
    }

    /// Ordered stages with their members after channel-mode filtering.
    pub fn stages(&self) -> Vec<(Stage, Vec<Member>)> {
        use Member::*;
        let single = self.channel_mode == ChannelMode::SingleChannel;
        let intensity = if single {
            alloc::vec![Contrast, Gamma]
        } else {
            alloc::vec![Contrast, Gamma, Brightness]
        };
        let local = if single {
            alloc::vec![Sharpen, EmbossOverlay]
        } else {
            alloc::vec![Clahe, Sharpen, EmbossOverlay, BrightnessContrast]
        };
        let mut stages = alloc::vec![
            (Stage::Flip, alloc::vec![HorizontalFlip]),
            (Stage::Intensity, intensity),
            (Stage::Local, local),
            (Stage::Crop, alloc::vec![CenterCrop, RandomCrop]),
        ];
        if self.baseline_extras {
            stages.push((Stage::Rotate, alloc::vec![Rotate]));
            stages.push((Stage::Shift, alloc::vec![Shift]));
        }
        stages
    }
}

/// A transform with every random parameter fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    HorizontalFlip,
    /// `mu + (1 + alpha)(x - mu)` with `mu` the image mean.
    Contrast { alpha: f64 },
    Gamma { gamma: f64 },
    /// `x (1 + beta)`.
    Brightness { beta: f64 },
    Clahe { clip_limit: f64, tiles: usize },
    /// Unsharp mask with a 3x3 box blur.
    Sharpen { amount: f64 },
    EmbossOverlay { strength: f64, alpha: f64 },
    BrightnessContrast { alpha: f64, beta: f64 },
    CenterCrop { size: usize },
    /// Offsets are fractions in `[0, 1)` of the valid offset range.
    RandomCrop { size: usize, row: f64, col: f64 },
    Rotate { degrees: f64 },
    Shift { rows: i64, cols: i64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTransform {
    pub stage: Stage,
    pub transform: Transform,
}

/// One concrete draw of a policy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransformPlan {
    pub steps: Vec<PlannedTransform>,
}

impl TransformPlan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_active(&self, stage: Stage) -> bool {
        self.steps.iter().any(|s| s.stage == stage)
    }

    pub fn from_transforms(transforms: impl IntoIterator<Item = (Stage, Transform)>) -> Self {
        TransformPlan {
            steps: transforms
                .into_iter()
                .map(|(stage, transform)| PlannedTransform { stage, transform })
                .collect(),
        }
    }
}

/// Draws a plan: each stage fires with probability `p`, then one member is
/// picked uniformly and its parameters sampled.
pub fn sample_plan<R: Rng + ?Sized>(policy: &AugmentationPolicy, rng: &mut R) -> Result<TransformPlan> {
    policy.validate()?;
    let mut steps = Vec::new();
    for (stage, members) in policy.stages() {
        if rng.random::<f64>() >= policy.p {
            continue;
        }
        let member = members[rng.random_range(0..members.len())];
        let transform = sample_member(member, policy, rng);
        steps.push(PlannedTransform { stage, transform });
    }
    Ok(TransformPlan { steps })
}

fn sample_member<R: Rng + ?Sized>(member: Member, policy: &AugmentationPolicy, rng: &mut R) -> Transform {
    let size = policy.crop_size;
    match member {
        Member::HorizontalFlip => Transform::HorizontalFlip,
        Member::Contrast => Transform::Contrast {
            alpha: rng.random_range(-0.2..=0.2),
        },
        Member::Gamma => Transform::Gamma {
            gamma: rng.random_range(0.8..=1.2),
        },
        Member::Brightness => Transform::Brightness {
            beta: rng.random_range(-0.2..=0.2),
        },
        Member::Clahe => Transform::Clahe {
            clip_limit: CLAHE_CLIP_LIMIT,
            tiles: CLAHE_TILES,
        },
        Member::Sharpen => Transform::Sharpen {
            amount: rng.random_range(0.2..=0.5),
        },
        Member::EmbossOverlay => Transform::EmbossOverlay {
            strength: rng.random_range(0.2..=0.7),
            alpha: rng.random_range(0.2..=0.5),
        },
        Member::BrightnessContrast => Transform::BrightnessContrast {
            alpha: rng.random_range(-0.2..=0.2),
            beta: rng.random_range(-0.2..=0.2),
        },
        Member::CenterCrop => Transform::CenterCrop { size },
        Member::RandomCrop => Transform::RandomCrop {
            size,
            row: rng.random::<f64>(),
            col: rng.random::<f64>(),
        },
        Member::Rotate => Transform::Rotate {
            degrees: rng.random_range(-25.0..=25.0),
        },
        Member::Shift => Transform::Shift {
            rows: rng.random_range(-25..=25),
            cols: rng.random_range(-25..=25),
        },
    }
}

/// Applies every step of `plan` to every slice, in plan order.
pub fn apply_plan(vol: &MriVolume, plan: &TransformPlan) -> Result<MriVolume> {
    if plan.is_empty() {
        return Ok(vol.clone());
    }
    let mut out = Vec::with_capacity(vol.data().len());
    for mut img in vol.images() {
        for step in &plan.steps {
            img = apply_transform(&img, &step.transform)?;
        }
        out.extend(img.data);
    }
    Ok(MriVolume::from_parts(
        vol,
        vol.slices(),
        vol.height(),
        vol.width(),
        out,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Plane;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise_volume(seed: u64, s: usize, h: usize, w: usize) -> MriVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..s * h * w).map(|_| rng.random::<f64>()).collect();
        MriVolume::new("n", Plane::Axial, s, h, w, data).unwrap()
    }

    #[test]
    fn p_zero_gives_empty_plan() {
        let policy = AugmentationPolicy::with_p(0.0);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert!(sample_plan(&policy, &mut rng).unwrap().is_empty());
        }
    }

    #[test]
    fn p_one_activates_all_four_stages() {
        let policy = AugmentationPolicy::with_p(1.0);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_plan(&policy, &mut rng).unwrap();
            let stages: Vec<_> = plan.steps.iter().map(|s| s.stage).collect();
            assert_eq!(
                stages,
                [Stage::Flip, Stage::Intensity, Stage::Local, Stage::Crop]
            );
        }
    }

    #[test]
    fn baseline_extras_append_two_stages() {
        let policy = AugmentationPolicy {
            baseline_extras: true,
            ..AugmentationPolicy::with_p(1.0)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sample_plan(&policy, &mut rng).unwrap();
        assert_eq!(plan.len(), 6);
        assert!(plan.is_active(Stage::Rotate) && plan.is_active(Stage::Shift));
    }

    #[test]
    fn single_channel_drops_three_channel_members() {
        let policy = AugmentationPolicy {
            channel_mode: ChannelMode::SingleChannel,
            ..AugmentationPolicy::with_p(1.0)
        };
        let stages = policy.stages();
        assert_eq!(stages[1].1, [Member::Contrast, Member::Gamma]);
        assert_eq!(stages[2].1, [Member::Sharpen, Member::EmbossOverlay]);
        for seed in 0..200 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for step in sample_plan(&policy, &mut rng).unwrap().steps {
                assert!(!matches!(
                    step.transform,
                    Transform::Brightness { .. }
                        | Transform::Clahe { .. }
                        | Transform::BrightnessContrast { .. }
                ));
            }
        }
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_plan(&AugmentationPolicy::with_p(1.5), &mut rng).is_err());
        assert!(sample_plan(&AugmentationPolicy::with_p(-0.1), &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_plan() {
        let policy = AugmentationPolicy::with_p(0.6);
        let a = sample_plan(&policy, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_plan(&policy, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_plan_is_identity() {
        let vol = noise_volume(1, 3, 8, 8);
        assert_eq!(apply_plan(&vol, &TransformPlan::default()).unwrap(), vol);
    }

    #[test]
    fn double_flip_is_identity() {
        let vol = noise_volume(2, 3, 6, 7);
        let plan = TransformPlan::from_transforms([(Stage::Flip, Transform::HorizontalFlip)]);
        let once = apply_plan(&vol, &plan).unwrap();
        assert_ne!(once, vol);
        assert_eq!(apply_plan(&once, &plan).unwrap(), vol);
    }

    #[test]
    fn crop_larger_than_slice_is_geometry_error() {
        let vol = noise_volume(3, 2, 20, 20);
        let plan = TransformPlan::from_transforms([(Stage::Crop, Transform::CenterCrop { size: 150 })]);
        assert!(matches!(
            apply_plan(&vol, &plan),
            Err(Error::Geometry { crop: 150, .. })
        ));
    }

    #[test]
    fn geometry_is_shared_across_slices() {
        // Two identical slices must stay identical under any plan.
        let base = noise_volume(4, 1, 24, 24);
        let mut data = base.data().to_vec();
        data.extend_from_slice(base.data());
        let vol = MriVolume::new("d", Plane::Axial, 2, 24, 24, data).unwrap();
        let policy = AugmentationPolicy {
            baseline_extras: true,
            crop_size: 14,
            ..AugmentationPolicy::with_p(1.0)
        };
        for seed in 0..30 {
            let plan = sample_plan(&policy, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let out = apply_plan(&vol, &plan).unwrap();
            assert_eq!(out.slice(0), out.slice(1));
        }
    }
}
