//! Construction of the try-on conditioning bundle: clothing-agnostic image,
//! garment slot assignment, pose keypoints with the layflat sentinel, and the
//! batched tensors fed to the model encoders.

use ndarray::{Array2, Array3, Array4, Axis};

use crate::attrs::{AttributeVector, FIELD_SIZES, NUM_ATTRIBUTES};
use crate::error::{Result, VtoError};
use crate::scalar::Scalar;

/// Per-sample image, [height, width, channels], values in [-1, 1].
pub type Image<F> = Array3<F>;

/// Number of joints of the articulated figure: head, shoulders, elbows,
/// wrists, hips, knees, ankles.
pub const NUM_JOINTS: usize = 13;

/// Segmentation label ids used across the dataset.
pub mod seg {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const UPPER: u8 = 3;
    pub const LOWER: u8 = 4;
    pub const FULL: u8 = 5;
    pub const MAX: u8 = 5;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Slot {
    Upper,
    Lower,
    Full,
}

impl Slot {
    pub const ALL: [Slot; 3] = [Slot::Upper, Slot::Lower, Slot::Full];

    pub fn index(self) -> usize {
        match self {
            Slot::Upper => 0,
            Slot::Lower => 1,
            Slot::Full => 2,
        }
    }

    pub fn seg_label(self) -> u8 {
        match self {
            Slot::Upper => seg::UPPER,
            Slot::Lower => seg::LOWER,
            Slot::Full => seg::FULL,
        }
    }
}

/// The full c_tryon bundle for one sample.
#[derive(Debug, Clone)]
pub struct TryOnConditioning<F: Scalar> {
    pub agnostic: Image<F>,
    /// Slot order: upper, lower, full. Empty slots are all-zero images.
    pub garments: [Image<F>; 3],
    /// 2K person joint coordinates, normalized (x, y) pairs in [0, 1].
    pub person_keypoints: Vec<f64>,
    /// Per-slot garment keypoints: [0,1] coords for on-model garments, all -1
    /// for layflat, all 0 for empty slots.
    pub garment_keypoints: [Vec<f64>; 3],
    /// None means dropped conditioning (classifier-free guidance null).
    pub attributes: Option<AttributeVector>,
}

impl<F: Scalar> TryOnConditioning<F> {
    pub fn height(&self) -> usize {
        self.agnostic.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.agnostic.shape()[1]
    }

    /// Attribute embedding indices; dropped conditioning maps every field to
    /// its reserved null index (one past the answer list).
    pub fn attr_indices(&self) -> [usize; NUM_ATTRIBUTES] {
        match &self.attributes {
            Some(a) => a.to_indices(),
            None => FIELD_SIZES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonzero = |img: &Image<F>| img.iter().any(|v| *v != F::zero());
        let full = nonzero(&self.garments[2]);
        let upper_or_lower = nonzero(&self.garments[0]) || nonzero(&self.garments[1]);
        if full && upper_or_lower {
            return Err(VtoError::RejectedInput(
                "full-body slot may not be combined with upper/lower slots".into(),
            ));
        }
        for kp in &self.garment_keypoints {
            if !keypoints_valid_or_sentinel(kp) {
                return Err(VtoError::RejectedInput(
                    "garment keypoints must be all in [0,1], all -1, or all 0".into(),
                ));
            }
        }
        if let Some(a) = &self.attributes {
            a.validate()?;
        }
        Ok(())
    }
}

fn keypoints_valid_or_sentinel(kp: &[f64]) -> bool {
    kp.iter().all(|&v| (0.0..=1.0).contains(&v))
        || kp.iter().all(|&v| v == -1.0)
}

pub fn is_layflat_sentinel(kp: &[f64]) -> bool {
    !kp.is_empty() && kp.iter().all(|&v| v == -1.0)
}

/// All-(-1) keypoint vector signalling a layflat garment image.
pub fn layflat_sentinel(num_joints: usize) -> Vec<f64> {
    vec![-1.0; 2 * num_joints]
}

/// Replaces garment-labeled pixels with the constant fill 0 (mid-gray in
/// [-1,1]); everything else is preserved bit-exactly.
pub fn make_agnostic<F: Scalar>(person: &Image<F>, segmentation: &Array2<u8>) -> Result<Image<F>> {
    let (h, w, _c) = person.dim();
    if segmentation.dim() != (h, w) {
        return Err(VtoError::RejectedInput(format!(
            "segmentation {:?} does not match image {:?}",
            segmentation.dim(),
            (h, w)
        )));
    }
    if let Some(bad) = segmentation.iter().find(|&&l| l > seg::MAX) {
        return Err(VtoError::RejectedInput(format!(
            "unknown segmentation label {bad}"
        )));
    }
    let mut out = person.clone();
    for y in 0..h {
        for x in 0..w {
            let label = segmentation[[y, x]];
            if label == seg::UPPER || label == seg::LOWER || label == seg::FULL {
                for ci in 0..out.shape()[2] {
                    out[[y, x, ci]] = F::zero();
                }
            }
        }
    }
    Ok(out)
}

/// Keeps only pixels carrying the slot's segmentation label; the rest is 0.
pub fn garment_crop<F: Scalar>(
    person: &Image<F>,
    segmentation: &Array2<u8>,
    slot: Slot,
) -> Image<F> {
    let (h, w, c) = person.dim();
    let mut out = Image::<F>::zeros((h, w, c));
    let label = slot.seg_label();
    for y in 0..h {
        for x in 0..w {
            if segmentation[[y, x]] == label {
                for ci in 0..c {
                    out[[y, x, ci]] = person[[y, x, ci]];
                }
            }
        }
    }
    out
}

/// Puts the garment image into its slot and zeroes the other two.
pub fn assign_garment_slots<F: Scalar>(
    garment_image: &Image<F>,
    garment_type: Slot,
) -> [Image<F>; 3] {
    let zero = Image::<F>::zeros(garment_image.dim());
    let mut slots = [zero.clone(), zero.clone(), zero];
    slots[garment_type.index()] = garment_image.clone();
    slots
}

/// Drops all conditioning: zero images, zero keypoints, null attributes.
pub fn null_conditioning<F: Scalar>(template: &TryOnConditioning<F>) -> TryOnConditioning<F> {
    let zero_img = Image::<F>::zeros(template.agnostic.dim());
    TryOnConditioning {
        agnostic: zero_img.clone(),
        garments: [zero_img.clone(), zero_img.clone(), zero_img],
        person_keypoints: vec![0.0; template.person_keypoints.len()],
        garment_keypoints: [
            vec![0.0; template.garment_keypoints[0].len()],
            vec![0.0; template.garment_keypoints[1].len()],
            vec![0.0; template.garment_keypoints[2].len()],
        ],
        attributes: None,
    }
}

/// One Gaussian heatmap channel per joint, peak 1 at the joint, std `sigma`
/// pixels. The layflat sentinel (and the all-zero empty-slot vector) maps to
/// all-zero channels.
pub fn rasterize_keypoints<F: Scalar>(
    keypoints: &[f64],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Array3<F>> {
    assert!(keypoints.len() % 2 == 0, "keypoints must be (x,y) pairs");
    let k = keypoints.len() / 2;
    let mut out = Array3::<F>::zeros((height, width, k));
    if is_layflat_sentinel(keypoints) || keypoints.iter().all(|&v| v == 0.0) {
        return Ok(out);
    }
    if !keypoints.iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(VtoError::RejectedInput(
            "non-sentinel keypoint coordinate outside [0,1]".into(),
        ));
    }
    let denom = 2.0 * sigma * sigma;
    for j in 0..k {
        let cx = keypoints[2 * j] * (width.saturating_sub(1)) as f64;
        let cy = keypoints[2 * j + 1] * (height.saturating_sub(1)) as f64;
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                out[[y, x, j]] = F::cast((-(dx * dx + dy * dy) / denom).exp());
            }
        }
    }
    Ok(out)
}

/// Batched conditioning tensors at one resolution, ready for the encoders.
#[derive(Debug, Clone)]
pub struct CondBatch<F: Scalar> {
    /// [b, h, w, 3 + K]: agnostic image with person keypoint heatmaps.
    pub person_in: Array4<F>,
    /// Per slot [b, h, w, 3 + K]: garment image with its keypoint heatmaps.
    pub garment_in: [Array4<F>; 3],
    /// [b, 5] attribute indices as reals (null index for dropped samples).
    pub attr_idx: Array2<f64>,
    /// [b, 2K] raw person keypoints.
    pub person_kp: Array2<f64>,
    /// Per slot [b, 2K] raw garment keypoints (sentinel kept as -1).
    pub garment_kp: [Array2<f64>; 3],
}

/// Heatmap std used everywhere keypoints are rasterized.
pub const HEATMAP_SIGMA: f64 = 1.5;

impl<F: Scalar> CondBatch<F> {
    pub fn from_samples(samples: &[TryOnConditioning<F>]) -> Result<CondBatch<F>> {
        assert!(!samples.is_empty());
        let b = samples.len();
        let (h, w) = (samples[0].height(), samples[0].width());
        let k = samples[0].person_keypoints.len() / 2;
        let cin = 3 + k;
        let mut person_in = Array4::<F>::zeros((b, h, w, cin));
        let mut garment_in = [
            Array4::<F>::zeros((b, h, w, cin)),
            Array4::<F>::zeros((b, h, w, cin)),
            Array4::<F>::zeros((b, h, w, cin)),
        ];
        let mut attr_idx = Array2::<f64>::zeros((b, NUM_ATTRIBUTES));
        let mut person_kp = Array2::<f64>::zeros((b, 2 * k));
        let mut garment_kp = [
            Array2::<f64>::zeros((b, 2 * k)),
            Array2::<f64>::zeros((b, 2 * k)),
            Array2::<f64>::zeros((b, 2 * k)),
        ];
        for (bi, s) in samples.iter().enumerate() {
            if s.height() != h || s.width() != w {
                return Err(VtoError::RejectedInput(
                    "mixed resolutions within one batch".into(),
                ));
            }
            let heat = rasterize_keypoints::<F>(&s.person_keypoints, h, w, HEATMAP_SIGMA)?;
            let mut view = person_in.index_axis_mut(Axis(0), bi);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        view[[y, x, c]] = s.agnostic[[y, x, c]];
                    }
                    for j in 0..k {
                        view[[y, x, 3 + j]] = heat[[y, x, j]];
                    }
                }
            }
            for slot in 0..3 {
                let heat = rasterize_keypoints::<F>(&s.garment_keypoints[slot], h, w, HEATMAP_SIGMA)?;
                let mut view = garment_in[slot].index_axis_mut(Axis(0), bi);
                for y in 0..h {
                    for x in 0..w {
                        for c in 0..3 {
                            view[[y, x, c]] = s.garments[slot][[y, x, c]];
                        }
                        for j in 0..k {
                            view[[y, x, 3 + j]] = heat[[y, x, j]];
                        }
                    }
                }
                for (i, &v) in s.garment_keypoints[slot].iter().enumerate() {
                    garment_kp[slot][[bi, i]] = v;
                }
            }
            for (f, &i) in s.attr_indices().iter().enumerate() {
                attr_idx[[bi, f]] = i as f64;
            }
            for (i, &v) in s.person_keypoints.iter().enumerate() {
                person_kp[[bi, i]] = v;
            }
        }
        Ok(CondBatch {
            person_in,
            garment_in,
            attr_idx,
            person_kp,
            garment_kp,
        })
    }
}
