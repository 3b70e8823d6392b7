//! Seeded spatial augmentation families, random temporal cropping, and
//! construction of the (query, spatial variant, temporal variant) triplet.
//!
//! A descriptor is sampled once per clip and applied identically to every
//! frame, so augmentations never introduce motion of their own.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Clip, Video};
use crate::error::{HdcError, Result};
use crate::seeding::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationFamily {
    /// Output `(height, width)` of the spatial crop.
    pub crop_output: [usize; 2],
    /// Resize factor applied to both sides before cropping.
    pub scale_range: [f32; 2],
    pub flip_prob: f32,
    pub brightness_range: [f32; 2],
    pub contrast_range: [f32; 2],
    pub saturation_range: [f32; 2],
    pub channel_replication_prob: f32,
}

impl Default for AugmentationFamily {
    fn default() -> Self {
        AugmentationFamily {
            crop_output: [32, 32],
            scale_range: [1.0, 1.15],
            flip_prob: 0.5,
            brightness_range: [0.6, 1.4],
            contrast_range: [0.6, 1.4],
            saturation_range: [0.6, 1.4],
            channel_replication_prob: 0.25,
        }
    }
}

impl AugmentationFamily {
    /// A family whose every sample is the identity on `(h, w)` frames.
    pub fn identity(h: usize, w: usize) -> Self {
        AugmentationFamily {
            crop_output: [h, w],
            scale_range: [1.0, 1.0],
            flip_prob: 0.0,
            brightness_range: [1.0, 1.0],
            contrast_range: [1.0, 1.0],
            saturation_range: [1.0, 1.0],
            channel_replication_prob: 0.0,
        }
    }

    /// Same family with color jitter and channel replication switched off.
    pub fn without_color(mut self) -> Self {
        self.brightness_range = [1.0, 1.0];
        self.contrast_range = [1.0, 1.0];
        self.saturation_range = [1.0, 1.0];
        self.channel_replication_prob = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HdcError::Config(format!("augmentation: {m}")));
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("channel_replication_prob", self.channel_replication_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, [lo, hi]) in [
            ("scale_range", self.scale_range),
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return fail(format!("{name} = [{lo}, {hi}] needs 0 < lo <= hi"));
            }
        }
        if self.crop_output.contains(&0) {
            return fail("crop_output must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialTransform {
    /// Crop in the coordinates of the scaled frame.
    pub crop: CropRect,
    pub scale: f32,
    pub flip: bool,
    /// Brightness, contrast and saturation factors.
    pub color: [f32; 3],
    /// Source channel copied to every channel, if any.
    pub channel_replication: Option<usize>,
}

impl SpatialTransform {
    pub fn identity(h: usize, w: usize) -> Self {
        SpatialTransform {
            crop: CropRect {
                top: 0,
                left: 0,
                height: h,
                width: w,
            },
            scale: 1.0,
            flip: false,
            color: [1.0; 3],
            channel_replication: None,
        }
    }

    pub fn scaled_size(&self, h: usize, w: usize) -> (usize, usize) {
        scaled_size(h, w, self.scale)
    }
}

fn scaled_size(h: usize, w: usize, scale: f32) -> (usize, usize) {
    if scale == 1.0 {
        return (h, w);
    }
    let s = |n: usize| ((n as f32 * scale).round() as usize).max(1);
    (s(h), s(w))
}

fn uniform(rng: &mut Rng, [lo, hi]: [f32; 2]) -> f32 {
    if lo == hi { lo } else { rng.gen_range(lo..=hi) }
}

/// Draws one descriptor for frames of size `frame = (h, w)` with `channels` channels.
pub fn sample_spatial_transform(
    family: &AugmentationFamily,
    frame: (usize, usize),
    channels: usize,
    rng: &mut Rng,
) -> Result<SpatialTransform> {
    family.validate()?;
    let scale = uniform(rng, family.scale_range);
    let (sh, sw) = scaled_size(frame.0, frame.1, scale);
    let [ch, cw] = family.crop_output;
    if ch > sh || cw > sw {
        return Err(HdcError::InvalidArgument(format!(
            "crop {ch}x{cw} larger than scaled frame {sh}x{sw}"
        )));
    }
    let top = rng.gen_range(0..=sh - ch);
    let left = rng.gen_range(0..=sw - cw);
    let flip = rng.gen_bool(family.flip_prob as f64);
    let color = [
        uniform(rng, family.brightness_range),
        uniform(rng, family.contrast_range),
        uniform(rng, family.saturation_range),
    ];
    let channel_replication = rng
        .gen_bool(family.channel_replication_prob as f64)
        .then(|| rng.gen_range(0..channels));
    Ok(SpatialTransform {
        crop: CropRect {
            top,
            left,
            height: ch,
            width: cw,
        },
        scale,
        flip,
        color,
        channel_replication,
    })
}

/// Bilinear sample positions along one axis of the scaled frame.
fn resample_axis(
    src: usize,
    scaled: usize,
    offset: usize,
    count: usize,
) -> Vec<(usize, usize, f32)> {
    let ratio = src as f32 / scaled as f32;
    (offset..offset + count)
        .map(|i| {
            let pos = ((i as f32 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f32);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f32)
        })
        .collect()
}

/// Applies scale, crop, flip, color jitter and channel replication, in that
/// order, identically to every frame.
pub fn apply_spatial(clip: &Clip, d: &SpatialTransform) -> Result<Clip> {
    let (h, w, c) = (clip.height, clip.width, clip.channels);
    let (sh, sw) = d.scaled_size(h, w);
    let r = d.crop;
    if r.top + r.height > sh || r.left + r.width > sw || r.height == 0 || r.width == 0 {
        return Err(HdcError::InvalidArgument(format!(
            "crop {r:?} outside scaled frame {sh}x{sw}"
        )));
    }
    if let Some(src) = d.channel_replication
        && src >= c
    {
        return Err(HdcError::InvalidArgument(format!(
            "replication source channel {src} out of range for {c} channels"
        )));
    }

    let (oh, ow) = (r.height, r.width);
    let mut out = vec![0.0f32; clip.len * oh * ow * c];
    let rows = resample_axis(h, sh, r.top, oh);
    let cols = resample_axis(w, sw, r.left, ow);
    for t in 0..clip.len {
        let src = clip.frame(t);
        let dst = &mut out[t * oh * ow * c..(t + 1) * oh * ow * c];
        for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
            for x in 0..ow {
                let sx = if d.flip { ow - 1 - x } else { x };
                let o = (y * ow + x) * c;
                if d.scale == 1.0 {
                    let s = ((r.top + y) * w + r.left + sx) * c;
                    dst[o..o + c].copy_from_slice(&src[s..s + c]);
                    continue;
                }
                let (x0, x1, fx) = cols[sx];
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    dst[o + ch] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
    }

    if d.color != [1.0; 3] {
        color_jitter(&mut out, c, d.color);
    }
    if let Some(src) = d.channel_replication {
        for px in out.chunks_mut(c) {
            let v = px[src];
            px.fill(v);
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Clip::new(out, clip.len, oh, ow, c)
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Brightness, contrast and saturation in `[0, 1]` intensity space with
/// one set of factors for the whole clip.
fn color_jitter(values: &mut [f32], channels: usize, [brightness, contrast, saturation]: [f32; 3]) {
    for v in values.iter_mut() {
        *v = ((*v + 1.0) * 0.5 * brightness).clamp(0.0, 1.0);
    }
    if contrast != 1.0 {
        let mean = if channels == 3 {
            values.chunks(3).map(luma).sum::<f32>() / (values.len() / 3) as f32
        } else {
            values.iter().sum::<f32>() / values.len() as f32
        };
        for v in values.iter_mut() {
            *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
        }
    }
    if saturation != 1.0 && channels == 3 {
        for px in values.chunks_mut(3) {
            let g = luma(px);
            for v in px.iter_mut() {
                *v = ((*v - g) * saturation + g).clamp(0.0, 1.0);
            }
        }
    }
    for v in values.iter_mut() {
        *v = *v * 2.0 - 1.0;
    }
}

/// Uniform random window of `clip_len` frames. Returns the clip and its start.
pub fn temporal_crop(video: &Clip, clip_len: usize, rng: &mut Rng) -> Result<(Clip, usize)> {
    if clip_len == 0 || video.len < clip_len {
        return Err(HdcError::InvalidArgument(format!(
            "cannot take {clip_len} frames from a {}-frame video",
            video.len
        )));
    }
    let start = rng.gen_range(0..=video.len - clip_len);
    Ok((video.window(start, clip_len)?, start))
}

/// Central `clip_len` frames, center-cropped to `crop = [h, w]` without
/// resizing. Used for evaluation.
pub fn center_clip(video: &Clip, clip_len: usize, crop: [usize; 2]) -> Result<Clip> {
    if clip_len > video.len || crop[0] > video.height || crop[1] > video.width {
        return Err(HdcError::InvalidArgument(format!(
            "center crop {clip_len}x{crop:?} larger than clip {:?}",
            video.shape()
        )));
    }
    let window = video.window((video.len - clip_len) / 2, clip_len)?;
    let mut d = SpatialTransform::identity(crop[0], crop[1]);
    d.crop.top = (video.height - crop[0]) / 2;
    d.crop.left = (video.width - crop[1]) / 2;
    apply_spatial(&window, &d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Families {
    pub original: AugmentationFamily,
    pub spatial: AugmentationFamily,
    pub temporal: AugmentationFamily,
}

impl Families {
    pub fn validate(&self) -> Result<()> {
        self.original.validate()?;
        self.spatial.validate()?;
        self.temporal.validate()?;
        if self.original.crop_output != self.spatial.crop_output
            || self.original.crop_output != self.temporal.crop_output
        {
            return Err(HdcError::Config(
                "augmentation: all three families must share crop_output".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTriplet {
    pub original: Clip,
    pub spatial: Clip,
    pub temporal: Clip,
    pub o_start: usize,
    pub t_start: usize,
}

/// Query clip and spatial variant share one window; the temporal variant is
/// re-cropped independently and always spatially augmented.
pub fn make_triplet(
    video: &Video,
    clip_len: usize,
    families: &Families,
    rng: &mut Rng,
) -> Result<AugmentedTriplet> {
    let src = &video.clip;
    let frame = (src.height, src.width);
    let (x, o_start) = temporal_crop(src, clip_len, rng)?;
    let phi_o = sample_spatial_transform(&families.original, frame, src.channels, rng)?;
    let phi_s = sample_spatial_transform(&families.spatial, frame, src.channels, rng)?;
    let (x_prime, t_start) = temporal_crop(src, clip_len, rng)?;
    let phi_t = sample_spatial_transform(&families.temporal, frame, src.channels, rng)?;
    Ok(AugmentedTriplet {
        original: apply_spatial(&x, &phi_o)?,
        spatial: apply_spatial(&x, &phi_s)?,
        temporal: apply_spatial(&x_prime, &phi_t)?,
        o_start,
        t_start,
    })
}

/// Stacks equally shaped clips into a `[B, T, H, W, C]` tensor.
pub fn stack_clips<'a>(clips: impl IntoIterator<Item = &'a Clip>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut shape: Option<[usize; 4]> = None;
    let mut count = 0;
    for clip in clips {
        match shape {
            None => shape = Some(clip.shape()),
            Some(s) if s != clip.shape() => {
                return Err(HdcError::shape(
                    "stack_clips",
                    format!("{s:?} vs {:?}", clip.shape()),
                ));
            }
            _ => {}
        }
        data.extend_from_slice(&clip.frames);
        count += 1;
    }
    let [t, h, w, c] =
        shape.ok_or_else(|| HdcError::InvalidArgument("no clips to stack".into()))?;
    Tensor::new([count, t, h, w, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn ramp_clip(len: usize, h: usize, w: usize) -> Clip {
        let n = len * h * w * 3;
        let frames = (0..n)
            .map(|i| ((i * 37 % 200) as f32 / 100.0) - 1.0)
            .collect();
        Clip::new(frames, len, h, w, 3).unwrap()
    }

    #[test]
    fn center_clip_picks_the_middle() {
        let clip = ramp_clip(10, 6, 8);
        let c = center_clip(&clip, 4, [2, 4]).unwrap();
        assert_eq!(c.shape(), [4, 2, 4, 3]);
        for t in 0..4 {
            for y in 0..2 {
                let src = &clip.frame(t + 3)[((y + 2) * 8 + 2) * 3..((y + 2) * 8 + 6) * 3];
                assert_eq!(&c.frame(t)[y * 12..(y + 1) * 12], src);
            }
        }
        assert!(center_clip(&clip, 11, [2, 2]).is_err());
    }

    #[test]
    fn identity_family_gives_identity_descriptor() {
        let fam = AugmentationFamily::identity(8, 8);
        let d = sample_spatial_transform(&fam, (8, 8), 3, &mut rng_from(&[1])).unwrap();
        assert_eq!(d, SpatialTransform::identity(8, 8));
    }

    #[test]
    fn crop_larger_than_frame_rejected() {
        let fam = AugmentationFamily {
            crop_output: [40, 40],
            ..Default::default()
        };
        assert!(sample_spatial_transform(&fam, (32, 32), 3, &mut rng_from(&[1])).is_err());
    }

    #[test]
    fn invalid_family_rejected() {
        let fam = AugmentationFamily {
            flip_prob: 1.5,
            ..Default::default()
        };
        assert!(fam.validate().is_err());
        let fam = AugmentationFamily {
            contrast_range: [1.2, 0.8],
            ..Default::default()
        };
        assert!(fam.validate().is_err());
    }

    #[test]
    fn out_of_bounds_descriptor_rejected() {
        let clip = ramp_clip(2, 4, 4);
        let mut d = SpatialTransform::identity(4, 4);
        d.crop.left = 1;
        assert!(apply_spatial(&clip, &d).is_err());
        let mut d = SpatialTransform::identity(4, 4);
        d.channel_replication = Some(3);
        assert!(apply_spatial(&clip, &d).is_err());
    }

    #[test]
    fn scaled_crop_keeps_output_size() {
        let clip = ramp_clip(2, 16, 16);
        let fam = AugmentationFamily {
            crop_output: [16, 16],
            scale_range: [1.1, 1.15],
            ..Default::default()
        };
        let d = sample_spatial_transform(&fam, (16, 16), 3, &mut rng_from(&[4])).unwrap();
        let out = apply_spatial(&clip, &d).unwrap();
        assert_eq!(out.shape(), [2, 16, 16, 3]);
        assert!(out.frames.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn color_jitter_is_shared_across_frames() {
        let frame: Vec<f32> = (0..4 * 4 * 3).map(|i| (i as f32 / 24.0) - 1.0).collect();
        let clip = Clip::new([frame.clone(), frame].concat(), 2, 4, 4, 3).unwrap();
        let mut d = SpatialTransform::identity(4, 4);
        d.color = [1.3, 0.7, 1.2];
        let out = apply_spatial(&clip, &d).unwrap();
        assert_eq!(out.frame(0), out.frame(1));
        assert_ne!(out.frame(0), clip.frame(0));
    }

    #[test]
    fn short_video_rejected() {
        let clip = ramp_clip(4, 2, 2);
        assert!(temporal_crop(&clip, 5, &mut rng_from(&[0])).is_err());
    }
}
