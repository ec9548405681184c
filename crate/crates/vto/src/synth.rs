//! Procedural generation of paired try-on data. An articulated 2D figure is
//! rendered with analytic rasterization (capsules and even-odd polygons, no
//! anti-aliasing) so segmentation maps and joint coordinates are exact by
//! construction. Garment layout attributes are realized geometrically: rolled
//! sleeves shorten the sleeve polyline, tucked tops clip at the waistline,
//! open outer tops render as two panels. Pairs come in two modes: the same
//! garment worn by two different figures, or a worn render paired with a
//! canonical layflat render.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attrs::{
    encode_attribute_text, parse_attribute_text, AttributeVector, HasOuter, OuterClosed,
    SleeveRolled, SleeveType, TopTucked,
};
use crate::cond::{
    garment_crop, layflat_sentinel, make_agnostic, seg, Image, Slot, TryOnConditioning,
    NUM_JOINTS,
};
use crate::error::{Result, VtoError};
use crate::imgio;
use crate::scalar::Scalar;

/// Neutral background value in [-1, 1].
pub const BACKGROUND: f64 = -0.8;

// Joint indices in the keypoint vector (x, y interleaved, 13 joints).
pub const HEAD: usize = 0;
pub const SHOULDER_L: usize = 1;
pub const SHOULDER_R: usize = 2;
pub const ELBOW_L: usize = 3;
pub const ELBOW_R: usize = 4;
pub const WRIST_L: usize = 5;
pub const WRIST_R: usize = 6;
pub const HIP_L: usize = 7;
pub const HIP_R: usize = 8;
pub const KNEE_L: usize = 9;
pub const KNEE_R: usize = 10;
pub const ANKLE_L: usize = 11;
pub const ANKLE_R: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodySpec {
    /// Overall width scale (2XS→2XL analog), in [0.7, 1.3]. Drives widths
    /// only; limb lengths have their own scales.
    pub shape_scale: f64,
    pub arm_len_scale: f64,
    pub leg_len_scale: f64,
    pub skin: [f64; 3],
    pub hair: [f64; 3],
}

impl BodySpec {
    pub fn default_body() -> BodySpec {
        BodySpec {
            shape_scale: 1.0,
            arm_len_scale: 1.0,
            leg_len_scale: 1.0,
            skin: [0.45, 0.15, -0.15],
            hair: [-0.6, -0.65, -0.7],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        if !in_range(self.shape_scale, 0.7, 1.3) {
            return Err(VtoError::RejectedInput(format!(
                "shape_scale {} outside [0.7, 1.3]",
                self.shape_scale
            )));
        }
        for (name, v) in [
            ("arm_len_scale", self.arm_len_scale),
            ("leg_len_scale", self.leg_len_scale),
        ] {
            if !in_range(v, 0.85, 1.15) {
                return Err(VtoError::RejectedInput(format!(
                    "{name} {v} outside [0.85, 1.15]"
                )));
            }
        }
        for c in self.skin.iter().chain(self.hair.iter()) {
            if !in_range(*c, -1.0, 1.0) {
                return Err(VtoError::RejectedInput(format!("color value {c} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

/// Joint angles in radians plus global placement. Angles are measured from
/// straight-down, positive outward from the body midline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    /// Torso lean about the hip midpoint, radians.
    pub lean: f64,
    /// Horizontal displacement of the hips, as a fraction of image height.
    pub dx: f64,
    pub arm_l: f64,
    pub arm_r: f64,
    pub bend_l: f64,
    pub bend_r: f64,
    pub splay_l: f64,
    pub splay_r: f64,
    pub knee_l: f64,
    pub knee_r: f64,
}

impl PoseSpec {
    pub fn canonical() -> PoseSpec {
        PoseSpec {
            lean: 0.0,
            dx: 0.0,
            arm_l: 0.25,
            arm_r: 0.25,
            bend_l: 0.1,
            bend_r: 0.1,
            splay_l: 0.1,
            splay_r: 0.1,
            knee_l: 0.03,
            knee_r: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64| -> Result<()> {
            if !(v.is_finite() && v >= lo && v <= hi) {
                return Err(VtoError::RejectedInput(format!(
                    "pose {name} = {v} outside articulation limits [{lo}, {hi}]"
                )));
            }
            Ok(())
        };
        check("lean", self.lean, -0.12, 0.12)?;
        check("dx", self.dx, -0.02, 0.02)?;
        check("arm_l", self.arm_l, 0.08, 0.45)?;
        check("arm_r", self.arm_r, 0.08, 0.45)?;
        check("bend_l", self.bend_l, 0.0, 0.35)?;
        check("bend_r", self.bend_r, 0.0, 0.35)?;
        check("splay_l", self.splay_l, 0.04, 0.18)?;
        check("splay_r", self.splay_r, 0.04, 0.18)?;
        check("knee_l", self.knee_l, 0.0, 0.10)?;
        check("knee_r", self.knee_r, 0.0, 0.10)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
    GlyphLogo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub slot: Slot,
    pub base_color: [f64; 3],
    pub accent_color: [f64; 3],
    pub outer_color: [f64; 3],
    pub pattern: Pattern,
    /// Pattern period as a fraction of image height.
    pub period: f64,
    /// Glyph index into the pseudo-letter font (GlyphLogo pattern).
    pub glyph: usize,
    /// Layout attributes; fields irrelevant to the slot are NotApplicable.
    pub layout: AttributeVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairMode {
    GarmentPaired,
    LayflatPaired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

/// One training-usable sample: a person render with its exact ground truth
/// and per-slot garment conditioning (worn crops or layflat renders).
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub pair_id: u64,
    pub mode: PairMode,
    pub split: Split,
    pub body: BodySpec,
    pub pose: PoseSpec,
    pub outfit: Vec<GarmentSpec>,
    pub person: Array3<f64>,
    pub agnostic: Array3<f64>,
    pub segmentation: Array2<u8>,
    /// Normalized (x, y) pairs, 13 joints; the layflat sentinel on the
    /// garment side of a layflat pair.
    pub keypoints: Vec<f64>,
    pub garments: [Array3<f64>; 3],
    pub garment_keypoints: [Vec<f64>; 3],
    pub attribute_text: String,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.person.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.person.shape()[1]
    }

    /// Target image plus the conditioning inputs derived from this record.
    pub fn conditioning<F: Scalar>(&self) -> Result<(Image<F>, TryOnConditioning<F>)> {
        let cast3 = |a: &Array3<f64>| a.mapv(F::cast);
        let x0 = cast3(&self.person);
        let cond = TryOnConditioning {
            agnostic: cast3(&self.agnostic),
            garments: [
                cast3(&self.garments[0]),
                cast3(&self.garments[1]),
                cast3(&self.garments[2]),
            ],
            person_keypoints: self.keypoints.clone(),
            garment_keypoints: self.garment_keypoints.clone(),
            attributes: Some(parse_attribute_text(&self.attribute_text)?),
        };
        Ok((x0, cond))
    }

    /// Box-downsampled copy at `target_height` (labels by block majority;
    /// normalized keypoints are resolution-free).
    pub fn at_resolution(&self, target_height: usize) -> Result<SampleRecord> {
        let h = self.height();
        if target_height == 0 || h % target_height != 0 {
            return Err(VtoError::RejectedInput(format!(
                "target height {target_height} does not divide native height {h}"
            )));
        }
        let f = h / target_height;
        let mut out = self.clone();
        out.person = imgio::box_downsample(&self.person, f)?;
        out.agnostic = imgio::box_downsample(&self.agnostic, f)?;
        out.segmentation = imgio::label_downsample(&self.segmentation, f)?;
        for i in 0..3 {
            out.garments[i] = imgio::box_downsample(&self.garments[i], f)?;
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Figure geometry
// ---------------------------------------------------------------------------

/// Joint positions (pixel coords) and derived landmarks for one figure.
#[derive(Debug, Clone)]
pub struct Figure {
    pub joints: [[f64; 2]; NUM_JOINTS],
    pub unit: f64,
    pub s: f64,
    pub cx: f64,
    pub hip_y: f64,
    pub waist_y: f64,
    pub shoulder_mid: [f64; 2],
    pub head_r: f64,
    pub arm_r: f64,
    pub leg_r: f64,
    pub shoulder_half: f64,
    pub hip_half: f64,
}

fn dir(theta: f64) -> [f64; 2] {
    // theta = 0 points straight down; positive rotates toward +x.
    [theta.sin(), theta.cos()]
}

fn add(a: [f64; 2], d: [f64; 2], len: f64) -> [f64; 2] {
    [a[0] + d[0] * len, a[1] + d[1] * len]
}

pub fn figure(body: &BodySpec, pose: &PoseSpec, height: usize, width: usize) -> Result<Figure> {
    body.validate()?;
    pose.validate()?;
    let u = height as f64;
    let s = body.shape_scale;
    let cx = 0.5 * width as f64 + pose.dx * u;
    let hip_y = 0.56 * u;
    let torso = 0.20 * u;
    let shoulder_half = 0.075 * u * s;
    let hip_half = 0.055 * u * s;
    let shoulder_mid = [cx + pose.lean.sin() * torso, hip_y - pose.lean.cos() * torso];
    let axis = [pose.lean.cos(), pose.lean.sin()];
    let mut j = [[0.0; 2]; NUM_JOINTS];
    j[SHOULDER_L] = [
        shoulder_mid[0] - axis[0] * shoulder_half,
        shoulder_mid[1] - axis[1] * shoulder_half,
    ];
    j[SHOULDER_R] = [
        shoulder_mid[0] + axis[0] * shoulder_half,
        shoulder_mid[1] + axis[1] * shoulder_half,
    ];
    let head_r = 0.05 * u;
    let neck = 0.045 * u;
    j[HEAD] = [
        shoulder_mid[0] + pose.lean.sin() * (neck + head_r),
        shoulder_mid[1] - pose.lean.cos() * (neck + head_r),
    ];
    j[HIP_L] = [cx - hip_half, hip_y];
    j[HIP_R] = [cx + hip_half, hip_y];
    let upper_arm = 0.105 * u * body.arm_len_scale;
    let fore_arm = 0.095 * u * body.arm_len_scale;
    // Left limbs swing toward -x, right toward +x; lean carries the torso
    // frame into the arm angles.
    j[ELBOW_L] = add(j[SHOULDER_L], dir(pose.lean - pose.arm_l), upper_arm);
    j[ELBOW_R] = add(j[SHOULDER_R], dir(pose.lean + pose.arm_r), upper_arm);
    j[WRIST_L] = add(j[ELBOW_L], dir(pose.lean - (pose.arm_l - pose.bend_l)), fore_arm);
    j[WRIST_R] = add(j[ELBOW_R], dir(pose.lean + (pose.arm_r - pose.bend_r)), fore_arm);
    let thigh = 0.16 * u * body.leg_len_scale;
    let shin = 0.15 * u * body.leg_len_scale;
    j[KNEE_L] = add(j[HIP_L], dir(-pose.splay_l), thigh);
    j[KNEE_R] = add(j[HIP_R], dir(pose.splay_r), thigh);
    j[ANKLE_L] = add(j[KNEE_L], dir(-(pose.splay_l - pose.knee_l)), shin);
    j[ANKLE_R] = add(j[KNEE_R], dir(pose.splay_r - pose.knee_r), shin);
    Ok(Figure {
        joints: j,
        unit: u,
        s,
        cx,
        hip_y,
        waist_y: hip_y - 0.035 * u,
        shoulder_mid,
        head_r,
        arm_r: 0.018 * u * s,
        leg_r: 0.026 * u * s,
        shoulder_half,
        hip_half,
    })
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

struct Canvas {
    h: usize,
    w: usize,
    img: Array3<f64>,
    seg: Array2<u8>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Canvas {
        Canvas {
            h,
            w,
            img: Array3::from_elem((h, w, 3), BACKGROUND),
            seg: Array2::zeros((h, w)),
        }
    }

    fn put(&mut self, x: usize, y: usize, label: u8, c: [f64; 3]) {
        for ci in 0..3 {
            self.img[[y, x, ci]] = c[ci].clamp(-1.0, 1.0);
        }
        self.seg[[y, x]] = label;
    }

    fn capsule(&mut self, a: [f64; 2], b: [f64; 2], r: f64, label: u8, color: &dyn Fn(f64, f64) -> [f64; 3]) {
        let x0 = ((a[0].min(b[0]) - r).floor().max(0.0)) as usize;
        let x1 = ((a[0].max(b[0]) + r).ceil().min((self.w - 1) as f64)) as usize;
        let y0 = ((a[1].min(b[1]) - r).floor().max(0.0)) as usize;
        let y1 = ((a[1].max(b[1]) + r).ceil().min((self.h - 1) as f64)) as usize;
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64, y as f64);
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
                };
                let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
                if (px - qx).powi(2) + (py - qy).powi(2) <= r * r {
                    self.put(x, y, label, color(px, py));
                }
            }
        }
    }

    fn disc(&mut self, c: [f64; 2], r: f64, label: u8, color: &dyn Fn(f64, f64) -> [f64; 3]) {
        self.capsule(c, c, r, label, color);
    }

    fn polygon(&mut self, pts: &[[f64; 2]], label: u8, color: &dyn Fn(f64, f64) -> [f64; 3]) {
        let xs: Vec<f64> = pts.iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p[1]).collect();
        let x0 = xs.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = (xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil())
            .min((self.w - 1) as f64) as usize;
        let y0 = ys.iter().cloned().fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = (ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil())
            .min((self.h - 1) as f64) as usize;
        let n = pts.len();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (px, py) = (x as f64, y as f64);
                let mut inside = false;
                let mut j = n - 1;
                for i in 0..n {
                    let (xi, yi) = (pts[i][0], pts[i][1]);
                    let (xj, yj) = (pts[j][0], pts[j][1]);
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                if inside {
                    self.put(x, y, label, color(px, py));
                }
            }
        }
    }
}

/// 3x5-block pseudo-letter bitmaps (A, E, H, L, O, T, U, Z), the desk-scale
/// analog of tiny printed logos.
const GLYPHS: [[u8; 5]; 8] = [
    [0b010, 0b101, 0b111, 0b101, 0b101],
    [0b111, 0b100, 0b110, 0b100, 0b111],
    [0b101, 0b101, 0b111, 0b101, 0b101],
    [0b100, 0b100, 0b100, 0b100, 0b111],
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b111, 0b010, 0b010, 0b010, 0b010],
    [0b101, 0b101, 0b101, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b100, 0b111],
];

/// Panel-anchored pattern evaluator. The anchor is snapped to integer pixel
/// coordinates so the worn and layflat renders of the same spec produce
/// identical pattern phase relative to the panel top.
struct Painter<'a> {
    spec: &'a GarmentSpec,
    ax: f64,
    ay: f64,
    unit: f64,
    panel_len: f64,
    override_color: Option<[f64; 3]>,
}

impl<'a> Painter<'a> {
    fn new(spec: &'a GarmentSpec, ax: f64, ay: f64, unit: f64, panel_len: f64) -> Painter<'a> {
        Painter {
            spec,
            ax: ax.round(),
            ay: ay.round(),
            unit,
            panel_len,
            override_color: None,
        }
    }

    fn color(&self, x: f64, y: f64) -> [f64; 3] {
        if let Some(c) = self.override_color {
            return c;
        }
        let p = (self.spec.period * self.unit).round().max(2.0);
        match self.spec.pattern {
            Pattern::Solid => self.spec.base_color,
            Pattern::Stripes => {
                let band = ((y - self.ay) / p).floor() as i64;
                if band.rem_euclid(2) == 0 {
                    self.spec.base_color
                } else {
                    self.spec.accent_color
                }
            }
            Pattern::Checker => {
                let bx = ((x - self.ax) / p).floor() as i64;
                let by = ((y - self.ay) / p).floor() as i64;
                if (bx + by).rem_euclid(2) == 0 {
                    self.spec.base_color
                } else {
                    self.spec.accent_color
                }
            }
            Pattern::GlyphLogo => {
                let b = (0.022 * self.unit).round().max(1.0);
                let gx0 = (self.ax - 1.5 * b).round();
                let gy0 = (self.ay + 0.45 * self.panel_len - 2.5 * b).round();
                let col = ((x - gx0) / b).floor();
                let row = ((y - gy0) / b).floor();
                if (0.0..3.0).contains(&col) && (0.0..5.0).contains(&row) {
                    let bits = GLYPHS[self.spec.glyph % GLYPHS.len()][row as usize];
                    if (bits >> (2 - col as u32)) & 1 == 1 {
                        return self.spec.accent_color;
                    }
                }
                self.spec.base_color
            }
        }
    }
}

/// Sleeve length as a fraction of the full arm polyline, plus whether a
/// rolled cuff is drawn.
fn sleeve_frac(layout: &AttributeVector) -> (f64, bool) {
    match layout.sleeve_type {
        SleeveType::NotApplicable | SleeveType::Sleeveless => (0.0, false),
        SleeveType::Short => (0.35, false),
        SleeveType::Middle => (0.65, false),
        SleeveType::Long => {
            if layout.sleeve_rolled == SleeveRolled::Yes {
                (0.55, true)
            } else {
                (1.0, false)
            }
        }
    }
}

/// Upper-garment panel length as a fraction of image height.
fn upper_panel_len_frac(layout: &AttributeVector) -> f64 {
    if layout.top_tucked == TopTucked::Yes {
        0.215
    } else {
        0.26
    }
}

const DRESS_PANEL_LEN_FRAC: f64 = 0.395;

fn truncate_polyline(pts: &[[f64; 2]], frac: f64) -> Vec<[f64; 2]> {
    if frac <= 0.0 {
        return Vec::new();
    }
    let total: f64 = pts
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .sum();
    let mut remaining = frac.min(1.0) * total;
    let mut out = vec![pts[0]];
    for w in pts.windows(2) {
        let seg_len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        if seg_len <= remaining {
            out.push(w[1]);
            remaining -= seg_len;
        } else {
            let t = remaining / seg_len;
            out.push([w[0][0] + t * (w[1][0] - w[0][0]), w[0][1] + t * (w[1][1] - w[0][1])]);
            break;
        }
    }
    out
}

fn paint_sleeves(
    canvas: &mut Canvas,
    fig: &Figure,
    frac: f64,
    rolled: bool,
    r: f64,
    label: u8,
    painter: &Painter,
) {
    let color = |x: f64, y: f64| painter.color(x, y);
    for (sh, el, wr) in [
        (SHOULDER_L, ELBOW_L, WRIST_L),
        (SHOULDER_R, ELBOW_R, WRIST_R),
    ] {
        let pts = [fig.joints[sh], fig.joints[el], fig.joints[wr]];
        let tp = truncate_polyline(&pts, frac);
        for wseg in tp.windows(2) {
            canvas.capsule(wseg[0], wseg[1], r, label, &color);
        }
        if rolled {
            if let Some(end) = tp.last() {
                canvas.disc(*end, r + 0.008 * fig.unit, label, &color);
            }
        }
    }
}

/// Trapezoid torso panel with an axis-aligned top/bottom, snapped to integer
/// rows so pattern phase is pixel-exact across renders.
#[allow(clippy::too_many_arguments)]
fn paint_panel(
    canvas: &mut Canvas,
    xl_top: f64,
    xr_top: f64,
    xl_bot: f64,
    xr_bot: f64,
    top_px: f64,
    len_px: f64,
    label: u8,
    painter: &Painter,
) {
    let top_f = top_px - 0.5 + 1e-7;
    let bot_f = top_f + len_px;
    let color = |x: f64, y: f64| painter.color(x, y);
    canvas.polygon(
        &[[xl_top, top_f], [xr_top, top_f], [xr_bot, bot_f], [xl_bot, bot_f]],
        label,
        &color,
    );
}

fn paint_upper(canvas: &mut Canvas, fig: &Figure, spec: &GarmentSpec) {
    let u = fig.unit;
    let pad = 0.015 * u * fig.s;
    let top_px = (fig.shoulder_mid[1] - 0.015 * u).round();
    let len_px = (upper_panel_len_frac(&spec.layout) * u).round();
    let painter = Painter::new(spec, fig.shoulder_mid[0], top_px, u, len_px);
    let bot_halfw = fig.hip_half + 0.025 * u * fig.s;
    paint_panel(
        canvas,
        fig.joints[SHOULDER_L][0] - pad,
        fig.joints[SHOULDER_R][0] + pad,
        fig.cx - bot_halfw,
        fig.cx + bot_halfw,
        top_px,
        len_px,
        seg::UPPER,
        &painter,
    );
    let (frac, rolled) = sleeve_frac(&spec.layout);
    paint_sleeves(canvas, fig, frac, rolled, fig.arm_r + 0.008 * u, seg::UPPER, &painter);
}

fn paint_outer(canvas: &mut Canvas, fig: &Figure, spec: &GarmentSpec) {
    let u = fig.unit;
    let pad = 0.03 * u * fig.s;
    let top_px = (fig.shoulder_mid[1] - 0.02 * u).round();
    let hem_px = (fig.hip_y + 0.06 * u).round();
    let len_px = hem_px - top_px;
    let mut painter = Painter::new(spec, fig.shoulder_mid[0], top_px, u, len_px);
    painter.override_color = Some(spec.outer_color);
    let bot_halfw = fig.hip_half + 0.045 * u * fig.s;
    let (xl_top, xr_top) = (fig.joints[SHOULDER_L][0] - pad, fig.joints[SHOULDER_R][0] + pad);
    if spec.layout.outer_closed == OuterClosed::Yes {
        paint_panel(
            canvas,
            xl_top,
            xr_top,
            fig.cx - bot_halfw,
            fig.cx + bot_halfw,
            top_px,
            len_px,
            seg::UPPER,
            &painter,
        );
    } else {
        // Open jacket: two side panels with a gap showing the shirt.
        let gap = 0.022 * u * fig.s;
        let top_f = top_px - 0.5 + 1e-7;
        let bot_f = top_f + len_px;
        let color = |x: f64, y: f64| painter.color(x, y);
        canvas.polygon(
            &[
                [xl_top, top_f],
                [fig.cx - gap, top_f],
                [fig.cx - gap, bot_f],
                [fig.cx - bot_halfw, bot_f],
            ],
            seg::UPPER,
            &color,
        );
        canvas.polygon(
            &[
                [fig.cx + gap, top_f],
                [xr_top, top_f],
                [fig.cx + bot_halfw, bot_f],
                [fig.cx + gap, bot_f],
            ],
            seg::UPPER,
            &color,
        );
    }
    paint_sleeves(canvas, fig, 1.0, false, fig.arm_r + 0.010 * u, seg::UPPER, &painter);
}

fn paint_lower(canvas: &mut Canvas, fig: &Figure, spec: &GarmentSpec) {
    let u = fig.unit;
    let top_px = fig.waist_y.round();
    let bot_px = (fig.hip_y + 0.03 * u).round();
    let halfw = fig.hip_half + 0.03 * u * fig.s;
    let painter = Painter::new(spec, fig.cx, top_px, u, 0.3 * u);
    paint_panel(
        canvas,
        fig.cx - halfw,
        fig.cx + halfw,
        fig.cx - halfw,
        fig.cx + halfw,
        top_px,
        bot_px - top_px,
        seg::LOWER,
        &painter,
    );
    let color = |x: f64, y: f64| painter.color(x, y);
    let r = fig.leg_r + 0.012 * u;
    for (hip, knee, ankle) in [(HIP_L, KNEE_L, ANKLE_L), (HIP_R, KNEE_R, ANKLE_R)] {
        canvas.capsule(fig.joints[hip], fig.joints[knee], r, seg::LOWER, &color);
        canvas.capsule(fig.joints[knee], fig.joints[ankle], r, seg::LOWER, &color);
    }
}

fn paint_dress(canvas: &mut Canvas, fig: &Figure, spec: &GarmentSpec) {
    let u = fig.unit;
    let pad = 0.015 * u * fig.s;
    let top_px = (fig.shoulder_mid[1] - 0.015 * u).round();
    let len_px = (DRESS_PANEL_LEN_FRAC * u).round();
    let painter = Painter::new(spec, fig.shoulder_mid[0], top_px, u, len_px);
    let bot_halfw = fig.hip_half + 0.06 * u * fig.s;
    paint_panel(
        canvas,
        fig.joints[SHOULDER_L][0] - pad,
        fig.joints[SHOULDER_R][0] + pad,
        fig.cx - bot_halfw,
        fig.cx + bot_halfw,
        top_px,
        len_px,
        seg::FULL,
        &painter,
    );
    let (frac, rolled) = sleeve_frac(&spec.layout);
    paint_sleeves(canvas, fig, frac, rolled, fig.arm_r + 0.008 * u, seg::FULL, &painter);
}

fn check_slots(garments: &[GarmentSpec]) -> Result<()> {
    let mut seen = [false; 3];
    for g in garments {
        let i = g.slot.index();
        if seen[i] {
            return Err(VtoError::RejectedInput(format!(
                "duplicate garment slot {:?}",
                g.slot
            )));
        }
        seen[i] = true;
    }
    if seen[Slot::Full.index()] && (seen[Slot::Upper.index()] || seen[Slot::Lower.index()]) {
        return Err(VtoError::RejectedInput(
            "full-body garment excludes upper/lower garments".into(),
        ));
    }
    Ok(())
}

/// Renders the figure wearing `garments`; returns the image, exact
/// segmentation, and normalized (x, y) keypoints for the 13 joints.
pub fn render_person(
    body: &BodySpec,
    pose: &PoseSpec,
    garments: &[GarmentSpec],
    height: usize,
    width: usize,
) -> Result<(Array3<f64>, Array2<u8>, Vec<f64>)> {
    check_slots(garments)?;
    if height < 32 || width * 2 != height {
        return Err(VtoError::RejectedInput(format!(
            "frame must be 2:1 portrait and at least 32 tall, got {height}x{width}"
        )));
    }
    let fig = figure(body, pose, height, width)?;
    let mut canvas = Canvas::new(height, width);
    let u = fig.unit;
    let skin = |_x: f64, _y: f64| body.skin;
    let hair = |_x: f64, _y: f64| body.hair;

    // Hair cap first; the face disc overwrites its lower part.
    canvas.disc(
        [fig.joints[HEAD][0], fig.joints[HEAD][1] - 0.012 * u],
        fig.head_r * 1.18,
        seg::HAIR,
        &hair,
    );
    canvas.disc(
        [fig.joints[HEAD][0], fig.joints[HEAD][1] + 0.012 * u],
        fig.head_r * 0.95,
        seg::SKIN,
        &skin,
    );
    canvas.capsule(fig.shoulder_mid, fig.joints[HEAD], 0.02 * u * fig.s, seg::SKIN, &skin);
    canvas.polygon(
        &[
            fig.joints[SHOULDER_L],
            fig.joints[SHOULDER_R],
            fig.joints[HIP_R],
            fig.joints[HIP_L],
        ],
        seg::SKIN,
        &skin,
    );
    for (a, b) in [
        (SHOULDER_L, ELBOW_L),
        (ELBOW_L, WRIST_L),
        (SHOULDER_R, ELBOW_R),
        (ELBOW_R, WRIST_R),
    ] {
        canvas.capsule(fig.joints[a], fig.joints[b], fig.arm_r, seg::SKIN, &skin);
    }
    for (a, b) in [
        (HIP_L, KNEE_L),
        (KNEE_L, ANKLE_L),
        (HIP_R, KNEE_R),
        (KNEE_R, ANKLE_R),
    ] {
        canvas.capsule(fig.joints[a], fig.joints[b], fig.leg_r, seg::SKIN, &skin);
    }

    let upper = garments.iter().find(|g| g.slot == Slot::Upper);
    let lower = garments.iter().find(|g| g.slot == Slot::Lower);
    let full = garments.iter().find(|g| g.slot == Slot::Full);
    if let Some(f) = full {
        paint_dress(&mut canvas, &fig, f);
    } else {
        let tucked = upper.map_or(false, |g| g.layout.top_tucked == TopTucked::Yes);
        if tucked {
            if let Some(g) = upper {
                paint_upper(&mut canvas, &fig, g);
            }
            if let Some(g) = lower {
                paint_lower(&mut canvas, &fig, g);
            }
        } else {
            if let Some(g) = lower {
                paint_lower(&mut canvas, &fig, g);
            }
            if let Some(g) = upper {
                paint_upper(&mut canvas, &fig, g);
            }
        }
        if let Some(g) = upper {
            if g.layout.has_outer == HasOuter::Yes {
                paint_outer(&mut canvas, &fig, g);
            }
        }
    }

    // The figure must fit with a clear 2-pixel border.
    for y in 0..height {
        for x in 0..width {
            let on_border = y < 2 || y >= height - 2 || x < 2 || x >= width - 2;
            if on_border && canvas.seg[[y, x]] != seg::BACKGROUND {
                return Err(VtoError::RejectedInput(format!(
                    "figure does not fit the frame with a 2-pixel margin (painted at {x},{y})"
                )));
            }
        }
    }

    let mut kps = Vec::with_capacity(2 * NUM_JOINTS);
    for j in fig.joints.iter() {
        kps.push(j[0] / (width - 1) as f64);
        kps.push(j[1] / (height - 1) as f64);
    }
    if !kps.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(VtoError::RejectedInput("joint outside the frame".into()));
    }
    Ok((canvas.img, canvas.seg, kps))
}

/// Layflat render at a caller-chosen vertical offset (pixel row of the panel
/// top), used both for canonical single-garment renders and composites.
fn paint_layflat(canvas: &mut Canvas, spec: &GarmentSpec, top_px: f64) {
    let h = canvas.h as f64;
    let cx = canvas.w as f64 / 2.0;
    match spec.slot {
        Slot::Upper | Slot::Full => {
            let (len_frac, top_hw, bot_hw) = if spec.slot == Slot::Full {
                (DRESS_PANEL_LEN_FRAC, 0.09 * h, 0.14 * h)
            } else {
                (upper_panel_len_frac(&spec.layout), 0.105 * h, 0.105 * h)
            };
            let len_px = (len_frac * h).round();
            let painter = Painter::new(spec, cx, top_px, h, len_px);
            paint_panel(
                canvas,
                cx - top_hw,
                cx + top_hw,
                cx - bot_hw,
                cx + bot_hw,
                top_px,
                len_px,
                spec.slot.seg_label(),
                &painter,
            );
            let (frac, rolled) = sleeve_frac(&spec.layout);
            if frac > 0.0 {
                let color = |x: f64, y: f64| painter.color(x, y);
                let angle = 0.4_f64; // from vertical, folded mostly downward
                for side in [-1.0, 1.0] {
                    let start = [cx + side * (top_hw - 0.01 * h), top_px + 0.015 * h];
                    let end = [
                        start[0] + side * angle.sin() * 0.2 * h * frac,
                        start[1] + angle.cos() * 0.2 * h * frac,
                    ];
                    canvas.capsule(start, end, 0.028 * h, spec.slot.seg_label(), &color);
                    if rolled {
                        canvas.disc(end, 0.036 * h, spec.slot.seg_label(), &color);
                    }
                }
            }
        }
        Slot::Lower => {
            let painter = Painter::new(spec, cx, top_px, h, 0.3 * h);
            let hw = 0.09 * h;
            paint_panel(
                canvas,
                cx - hw,
                cx + hw,
                cx - hw,
                cx + hw,
                top_px,
                (0.05 * h).round(),
                seg::LOWER,
                &painter,
            );
            let color = |x: f64, y: f64| painter.color(x, y);
            for side in [-1.0, 1.0] {
                let x = cx + side * 0.045 * h;
                canvas.capsule(
                    [x, top_px + 0.035 * h],
                    [x, top_px + 0.035 * h + 0.31 * h],
                    0.038 * h,
                    seg::LOWER,
                    &color,
                );
            }
        }
    }
}

fn layflat_top_px(slot: Slot, h: f64) -> f64 {
    match slot {
        Slot::Upper => (0.2 * h).round(),
        Slot::Lower => (0.15 * h).round(),
        Slot::Full => (0.1 * h).round(),
    }
}

/// Canonical flat-pose render of one garment, with its exact labels.
pub fn render_layflat_labeled(
    spec: &GarmentSpec,
    height: usize,
    width: usize,
) -> (Array3<f64>, Array2<u8>) {
    let mut canvas = Canvas::new(height, width);
    paint_layflat(&mut canvas, spec, layflat_top_px(spec.slot, height as f64));
    (canvas.img, canvas.seg)
}

pub fn render_layflat(spec: &GarmentSpec, height: usize, width: usize) -> Array3<f64> {
    render_layflat_labeled(spec, height, width).0
}

// ---------------------------------------------------------------------------
// Sampling and pairing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenOptions {
    /// Generation resolution (width = height / 2); downsampled copies are
    /// derived from this native render.
    pub native_height: usize,
    /// Fraction of pairs drawn in layflat mode (vs garment-paired).
    pub layflat_fraction: f64,
    /// Fraction of outfits that are a full-body dress (vs upper + lower).
    pub full_fraction: f64,
    /// Among upper garments, fraction tucked in.
    pub tucked_fraction: f64,
    /// Among upper garments, fraction with an outer top.
    pub outer_fraction: f64,
    /// Fraction of pairing ids assigned to the validation split.
    pub val_fraction: f64,
}

impl Default for GenOptions {
    fn default() -> GenOptions {
        GenOptions {
            native_height: 128,
            layflat_fraction: 0.5,
            full_fraction: 0.25,
            tucked_fraction: 0.5,
            outer_fraction: 0.3,
            val_fraction: 0.1,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn split_of(pair_id: u64, val_fraction: f64) -> Split {
    let h = splitmix64(pair_id) >> 11; // 53 uniform bits
    if (h as f64 / (1u64 << 53) as f64) < val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

fn sample_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(-0.7..0.9),
        rng.gen_range(-0.7..0.9),
        rng.gen_range(-0.7..0.9),
    ]
}

fn contrast_color(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut out = [0.0; 3];
    for i in 0..3 {
        let flipped = if base[i] > 0.1 { base[i] - 1.2 } else { base[i] + 1.2 };
        out[i] = (flipped + rng.gen_range(-0.1..0.1)).clamp(-0.95, 0.95);
    }
    out
}

fn sample_pattern(rng: &mut ChaCha8Rng) -> (Pattern, f64, usize) {
    let pattern = match rng.gen_range(0..4u32) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes,
        2 => Pattern::Checker,
        _ => Pattern::GlyphLogo,
    };
    let period = rng.gen_range(0.03..0.06);
    let glyph = rng.gen_range(0..GLYPHS.len());
    (pattern, period, glyph)
}

fn sample_garment(rng: &mut ChaCha8Rng, slot: Slot, layout: AttributeVector) -> GarmentSpec {
    let base_color = sample_color(rng);
    let accent_color = contrast_color(base_color, rng);
    let outer_color = sample_color(rng);
    let (pattern, period, glyph) = sample_pattern(rng);
    GarmentSpec {
        slot,
        base_color,
        accent_color,
        outer_color,
        pattern,
        period,
        glyph,
        layout,
    }
}

fn sample_sleeves(rng: &mut ChaCha8Rng) -> (SleeveType, SleeveRolled) {
    let st = [
        SleeveType::Sleeveless,
        SleeveType::Short,
        SleeveType::Middle,
        SleeveType::Long,
    ][rng.gen_range(0..4usize)];
    let rolled = if st == SleeveType::Long {
        if rng.gen_bool(0.5) {
            SleeveRolled::Yes
        } else {
            SleeveRolled::No
        }
    } else {
        SleeveRolled::NotLong
    };
    (st, rolled)
}

fn sample_outfit(rng: &mut ChaCha8Rng, opts: &GenOptions) -> Vec<GarmentSpec> {
    if rng.gen_bool(opts.full_fraction.clamp(0.0, 1.0)) {
        let (st, rolled) = sample_sleeves(rng);
        let layout = AttributeVector {
            sleeve_type: st,
            sleeve_rolled: rolled,
            top_tucked: TopTucked::NotApplicable,
            has_outer: HasOuter::NotApplicable,
            outer_closed: OuterClosed::NotApplicable,
        };
        vec![sample_garment(rng, Slot::Full, layout)]
    } else {
        let (st, rolled) = sample_sleeves(rng);
        let tucked = if rng.gen_bool(opts.tucked_fraction.clamp(0.0, 1.0)) {
            TopTucked::Yes
        } else {
            TopTucked::No
        };
        let (outer, closed) = if rng.gen_bool(opts.outer_fraction.clamp(0.0, 1.0)) {
            (
                HasOuter::Yes,
                if rng.gen_bool(0.5) {
                    OuterClosed::Yes
                } else {
                    OuterClosed::No
                },
            )
        } else {
            (HasOuter::No, OuterClosed::NoOuter)
        };
        let layout = AttributeVector {
            sleeve_type: st,
            sleeve_rolled: rolled,
            top_tucked: tucked,
            has_outer: outer,
            outer_closed: closed,
        };
        let upper = sample_garment(rng, Slot::Upper, layout);
        let lower = sample_garment(rng, Slot::Lower, AttributeVector::ALL_NA);
        vec![upper, lower]
    }
}

fn sample_body(rng: &mut ChaCha8Rng) -> BodySpec {
    let shape_scale = rng.gen_range(0.75..1.2);
    let arm_len_scale = rng.gen_range(0.92..1.08);
    let leg_len_scale = rng.gen_range(0.92..1.08);
    let r = rng.gen_range(0.1..0.7);
    let g = r - rng.gen_range(0.1..0.35);
    let b = g - rng.gen_range(0.1..0.35);
    let skin = [r, g, b];
    let hair = [
        rng.gen_range(-0.9..0.2),
        rng.gen_range(-0.9..0.2),
        rng.gen_range(-0.9..0.2),
    ];
    BodySpec {
        shape_scale,
        arm_len_scale,
        leg_len_scale,
        skin,
        hair,
    }
}

fn sample_pose(rng: &mut ChaCha8Rng) -> PoseSpec {
    PoseSpec {
        lean: rng.gen_range(-0.1..0.1),
        dx: rng.gen_range(-0.01..0.01),
        arm_l: rng.gen_range(0.1..0.38),
        arm_r: rng.gen_range(0.1..0.38),
        bend_l: rng.gen_range(0.0..0.3),
        bend_r: rng.gen_range(0.0..0.3),
        splay_l: rng.gen_range(0.05..0.15),
        splay_r: rng.gen_range(0.05..0.15),
        knee_l: rng.gen_range(0.0..0.08),
        knee_r: rng.gen_range(0.0..0.08),
    }
}

/// The layout that the record's attribute text describes: the upper garment's
/// for an upper+lower outfit, the dress's for a full-body outfit.
pub fn primary_layout(outfit: &[GarmentSpec]) -> AttributeVector {
    outfit
        .iter()
        .find(|g| g.slot == Slot::Full)
        .or_else(|| outfit.iter().find(|g| g.slot == Slot::Upper))
        .map(|g| g.layout)
        .unwrap_or(AttributeVector::ALL_NA)
}

struct Render {
    img: Array3<f64>,
    seg: Array2<u8>,
    kps: Vec<f64>,
}

fn zero_kp() -> Vec<f64> {
    vec![0.0; 2 * NUM_JOINTS]
}

#[allow(clippy::too_many_arguments)]
fn worn_record(
    pair_id: u64,
    mode: PairMode,
    split: Split,
    body: BodySpec,
    pose: PoseSpec,
    outfit: &[GarmentSpec],
    own: &Render,
    other: Option<&Render>,
    attribute_text: &str,
) -> Result<SampleRecord> {
    let (h, w) = own.seg.dim();
    let zero = Array3::<f64>::zeros((h, w, 3));
    let mut garments = [zero.clone(), zero.clone(), zero];
    let mut garment_keypoints = [zero_kp(), zero_kp(), zero_kp()];
    for spec in outfit {
        let i = spec.slot.index();
        match (mode, other) {
            (PairMode::GarmentPaired, Some(o)) => {
                garments[i] = garment_crop(&o.img, &o.seg, spec.slot);
                garment_keypoints[i] = o.kps.clone();
            }
            _ => {
                garments[i] = render_layflat(spec, h, w);
                garment_keypoints[i] = layflat_sentinel(NUM_JOINTS);
            }
        }
    }
    Ok(SampleRecord {
        pair_id,
        mode,
        split,
        body,
        pose,
        outfit: outfit.to_vec(),
        agnostic: make_agnostic(&own.img, &own.seg)?,
        person: own.img.clone(),
        segmentation: own.seg.clone(),
        keypoints: own.kps.clone(),
        garments,
        garment_keypoints,
        attribute_text: attribute_text.to_string(),
    })
}

/// Builds one pair: person-side record first, garment-side record second.
/// In garment-paired mode both sides are worn renders of the shared outfit
/// (each conditioned on the other's crops); in layflat mode the garment side
/// holds the canonical layflat renders with the keypoint sentinel.
pub fn make_training_pair(
    seed: u64,
    mode: PairMode,
    opts: &GenOptions,
) -> Result<(SampleRecord, SampleRecord)> {
    let h = opts.native_height;
    if h < 32 || h % 2 != 0 {
        return Err(VtoError::RejectedInput(format!(
            "native height {h} must be even and at least 32"
        )));
    }
    let w = h / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outfit = sample_outfit(&mut rng, opts);
    let body_a = sample_body(&mut rng);
    let pose_a = sample_pose(&mut rng);
    let body_b = sample_body(&mut rng);
    let pose_b = sample_pose(&mut rng);
    let attribute_text = encode_attribute_text(&primary_layout(&outfit))?;
    let split = split_of(seed, opts.val_fraction);

    let (img_a, seg_a, kps_a) = render_person(&body_a, &pose_a, &outfit, h, w)?;
    let a = Render {
        img: img_a,
        seg: seg_a,
        kps: kps_a,
    };
    match mode {
        PairMode::GarmentPaired => {
            let (img_b, seg_b, kps_b) = render_person(&body_b, &pose_b, &outfit, h, w)?;
            let b = Render {
                img: img_b,
                seg: seg_b,
                kps: kps_b,
            };
            let rec_a = worn_record(
                seed,
                mode,
                split,
                body_a,
                pose_a,
                &outfit,
                &a,
                Some(&b),
                &attribute_text,
            )?;
            let rec_b = worn_record(
                seed,
                mode,
                split,
                body_b,
                pose_b,
                &outfit,
                &b,
                Some(&a),
                &attribute_text,
            )?;
            Ok((rec_a, rec_b))
        }
        PairMode::LayflatPaired => {
            let rec_a = worn_record(
                seed, mode, split, body_a, pose_a, &outfit, &a, None, &attribute_text,
            )?;
            // Garment-side record: a composite of the layflat renders with
            // the keypoint sentinel standing in for joints.
            let mut canvas = Canvas::new(h, w);
            for spec in &outfit {
                let top = if outfit.len() == 2 {
                    match spec.slot {
                        Slot::Upper => (0.08 * h as f64).round(),
                        _ => (0.55 * h as f64).round(),
                    }
                } else {
                    layflat_top_px(spec.slot, h as f64)
                };
                paint_layflat(&mut canvas, spec, top);
            }
            let zero = Array3::<f64>::zeros((h, w, 3));
            let mut garments = [zero.clone(), zero.clone(), zero];
            let mut garment_keypoints = [zero_kp(), zero_kp(), zero_kp()];
            for spec in &outfit {
                let i = spec.slot.index();
                garments[i] = render_layflat(spec, h, w);
                garment_keypoints[i] = layflat_sentinel(NUM_JOINTS);
            }
            let rec_b = SampleRecord {
                pair_id: seed,
                mode,
                split,
                body: BodySpec::default_body(),
                pose: PoseSpec::canonical(),
                outfit: outfit.clone(),
                agnostic: make_agnostic(&canvas.img, &canvas.seg)?,
                person: canvas.img,
                segmentation: canvas.seg,
                keypoints: layflat_sentinel(NUM_JOINTS),
                garments,
                garment_keypoints,
                attribute_text,
            };
            Ok((rec_a, rec_b))
        }
    }
}

/// In-memory dataset generation: derives a stream per pair from (seed, pair
/// index) and collects training-usable records until `count` are produced.
pub fn generate_records(opts: &GenOptions, seed: u64, count: usize) -> Result<Vec<SampleRecord>> {
    if count == 0 {
        return Err(VtoError::RejectedInput("count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(count);
    let mut pair_index = 0u64;
    let mut consecutive_failures = 0usize;
    while out.len() < count {
        let pair_seed = splitmix64(seed ^ pair_index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut mode_rng = ChaCha8Rng::seed_from_u64(pair_seed ^ 0xA5A5_5A5A);
        let mode = if mode_rng.gen_bool(opts.layflat_fraction.clamp(0.0, 1.0)) {
            PairMode::LayflatPaired
        } else {
            PairMode::GarmentPaired
        };
        match make_training_pair(pair_seed, mode, opts) {
            Ok((a, b)) => {
                consecutive_failures = 0;
                out.push(a);
                if mode == PairMode::GarmentPaired && out.len() < count {
                    out.push(b);
                }
            }
            Err(VtoError::RejectedInput(msg)) => {
                consecutive_failures += 1;
                if consecutive_failures > 20 {
                    return Err(VtoError::RejectedInput(format!(
                        "dataset generation stuck: {msg}"
                    )));
                }
            }
            Err(e) => return Err(e),
        }
        pair_index += 1;
    }
    Ok(out)
}

/// On-disk record metadata; one JSON object per line in manifest.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordMeta {
    index: usize,
    pair_id: u64,
    mode: PairMode,
    split: Split,
    body: BodySpec,
    pose: PoseSpec,
    outfit: Vec<GarmentSpec>,
    keypoints: Vec<f64>,
    garment_keypoints: [Vec<f64>; 3],
    attribute_text: String,
}

fn record_paths(dir: &Path, index: usize) -> [std::path::PathBuf; 3] {
    [
        dir.join(format!("{index:05}_person.png")),
        dir.join(format!("{index:05}_agnostic.png")),
        dir.join(format!("{index:05}_seg.png")),
    ]
}

/// Writes `count` records (PNG images plus a JSON-lines manifest) and returns
/// them in memory too. Train/val split is by pairing-id hash.
pub fn generate_dataset(
    out_dir: &Path,
    opts: &GenOptions,
    seed: u64,
    count: usize,
) -> Result<Vec<SampleRecord>> {
    let records = generate_records(opts, seed, count)?;
    std::fs::create_dir_all(out_dir).map_err(|e| VtoError::io(out_dir, e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest =
        std::fs::File::create(&manifest_path).map_err(|e| VtoError::io(&manifest_path, e))?;
    for (index, rec) in records.iter().enumerate() {
        let [pp, ap, sp] = record_paths(out_dir, index);
        imgio::save_png_rgb(&pp, &rec.person)?;
        imgio::save_png_rgb(&ap, &rec.agnostic)?;
        imgio::save_png_labels(&sp, &rec.segmentation)?;
        for spec in &rec.outfit {
            let i = spec.slot.index();
            let gp = out_dir.join(format!("{index:05}_g{i}.png"));
            imgio::save_png_rgb(&gp, &rec.garments[i])?;
        }
        let meta = RecordMeta {
            index,
            pair_id: rec.pair_id,
            mode: rec.mode,
            split: rec.split,
            body: rec.body,
            pose: rec.pose,
            outfit: rec.outfit.clone(),
            keypoints: rec.keypoints.clone(),
            garment_keypoints: rec.garment_keypoints.clone(),
            attribute_text: rec.attribute_text.clone(),
        };
        let line = serde_json::to_string(&meta)
            .map_err(|e| VtoError::Parse {
                position: 0,
                message: e.to_string(),
            })?;
        writeln!(manifest, "{line}").map_err(|e| VtoError::io(&manifest_path, e))?;
    }
    Ok(records)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest_path = dir.join("manifest.jsonl");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| VtoError::io(&manifest_path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let meta: RecordMeta = serde_json::from_str(line).map_err(|e| VtoError::Parse {
            position: lineno,
            message: e.to_string(),
        })?;
        let [pp, ap, sp] = record_paths(dir, meta.index);
        let person: Array3<f64> = imgio::load_png_rgb(&pp)?;
        let (h, w, _) = person.dim();
        let zero = Array3::<f64>::zeros((h, w, 3));
        let mut garments = [zero.clone(), zero.clone(), zero];
        for spec in &meta.outfit {
            let i = spec.slot.index();
            let gp = dir.join(format!("{:05}_g{i}.png", meta.index));
            garments[i] = imgio::load_png_rgb(&gp)?;
        }
        out.push(SampleRecord {
            pair_id: meta.pair_id,
            mode: meta.mode,
            split: meta.split,
            body: meta.body,
            pose: meta.pose,
            outfit: meta.outfit,
            person,
            agnostic: imgio::load_png_rgb(&ap)?,
            segmentation: imgio::load_png_labels(&sp)?,
            keypoints: meta.keypoints,
            garments,
            garment_keypoints: meta.garment_keypoints,
            attribute_text: meta.attribute_text,
        });
    }
    Ok(out)
}

/// Deterministic low-discrepancy pose variations within articulation limits,
/// for building finetuning grids.
pub fn pose_grid(n: usize) -> Vec<PoseSpec> {
    let frac = |x: f64| x - x.floor();
    (0..n)
        .map(|i| {
            let t = i as f64;
            PoseSpec {
                lean: -0.08 + 0.16 * frac(0.618_033_9 * t + 0.13),
                dx: 0.0,
                arm_l: 0.12 + 0.24 * frac(0.414_213_6 * t + 0.41),
                arm_r: 0.12 + 0.24 * frac(0.317_837_2 * t + 0.77),
                bend_l: 0.25 * frac(0.550_510_3 * t + 0.23),
                bend_r: 0.25 * frac(0.692_068_6 * t + 0.59),
                splay_l: 0.06 + 0.08 * frac(0.433_158_8 * t + 0.05),
                splay_r: 0.06 + 0.08 * frac(0.275_664_4 * t + 0.89),
                knee_l: 0.0,
                knee_r: 0.0,
            }
        })
        .collect()
}
