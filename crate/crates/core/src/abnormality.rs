//! Artificial abnormalities: sagittal mirroring, in-plane rotation and lung
//! lobe occlusion, plus their fixed 11-slot binary label layout
//! `[mirrored | rot -90, -45, 0, 45, 90 | LUL, LLL, RUL, RML, RLL]`.

use serde::{Deserialize, Serialize};

use crate::phantom::{Lobe, LobeMaskSet, Phantom};
use crate::volume::Volume;
use crate::{Error, Result};

pub const LABEL_WIDTH: usize = 11;
pub const ROTATION_OFFSET: usize = 1;
pub const OCCLUSION_OFFSET: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i32", into = "i32")]
pub enum Rotation {
    Neg90,
    Neg45,
    Zero,
    Pos45,
    Pos90,
}

impl Rotation {
    pub const ALL: [Rotation; 5] =
        [Rotation::Neg90, Rotation::Neg45, Rotation::Zero, Rotation::Pos45, Rotation::Pos90];

    pub fn degrees(self) -> i32 {
        [-90, -45, 0, 45, 90][self.index()]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Rotation> {
        Self::ALL.get(i).copied()
    }

    pub fn from_degrees(deg: i32) -> Result<Rotation> {
        Self::ALL
            .into_iter()
            .find(|r| r.degrees() == deg)
            .ok_or_else(|| Error::invalid(format!("unsupported rotation angle {deg}")))
    }

    pub fn inverse(self) -> Rotation {
        Self::ALL[4 - self.index()]
    }
}

impl TryFrom<i32> for Rotation {
    type Error = Error;
    fn try_from(deg: i32) -> Result<Self> {
        Rotation::from_degrees(deg)
    }
}

impl From<Rotation> for i32 {
    fn from(r: Rotation) -> i32 {
        r.degrees()
    }
}

/// Full description of the abnormalities injected into one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AbnormalitySpec {
    pub mirrored: bool,
    #[serde(rename = "rotation_deg")]
    pub rotation: Rotation,
    pub occluded_lobe: Lobe,
}

impl AbnormalitySpec {
    /// All 2·5·5 = 50 combinations, in label order.
    pub fn all() -> Vec<AbnormalitySpec> {
        let mut out = Vec::with_capacity(50);
        for mirrored in [false, true] {
            for rotation in Rotation::ALL {
                for occluded_lobe in Lobe::ALL {
                    out.push(AbnormalitySpec { mirrored, rotation, occluded_lobe });
                }
            }
        }
        out
    }

    pub fn findings(&self) -> Findings {
        Findings {
            mirrored: Some(self.mirrored),
            rotation: Some(self.rotation),
            occluded_lobe: Some(self.occluded_lobe),
        }
    }
}

/// Abnormalities present in (or claimed about) an image. Single surrogate
/// tasks carry only their own component; the combined task carries all three.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Findings {
    pub mirrored: Option<bool>,
    #[serde(rename = "rotation_deg")]
    pub rotation: Option<Rotation>,
    pub occluded_lobe: Option<Lobe>,
}

impl Findings {
    pub fn complete(&self) -> Option<AbnormalitySpec> {
        Some(AbnormalitySpec {
            mirrored: self.mirrored?,
            rotation: self.rotation?,
            occluded_lobe: self.occluded_lobe?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector([u8; LABEL_WIDTH]);

impl LabelVector {
    pub fn new(bits: [u8; LABEL_WIDTH]) -> Result<Self> {
        let one_hot = |r: std::ops::Range<usize>| bits[r].iter().filter(|&&b| b == 1).count() == 1;
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("label bits must be 0 or 1"));
        }
        if !one_hot(ROTATION_OFFSET..OCCLUSION_OFFSET) || !one_hot(OCCLUSION_OFFSET..LABEL_WIDTH) {
            return Err(Error::invalid(format!("label {bits:?} is not one-hot per group")));
        }
        Ok(LabelVector(bits))
    }

    pub fn bits(&self) -> &[u8; LABEL_WIDTH] {
        &self.0
    }

    pub fn to_spec(&self) -> AbnormalitySpec {
        let hot = |r: std::ops::Range<usize>| r.clone().position(|i| self.0[i] == 1).expect("validated");
        AbnormalitySpec {
            mirrored: self.0[0] == 1,
            rotation: Rotation::ALL[hot(ROTATION_OFFSET..OCCLUSION_OFFSET)],
            occluded_lobe: Lobe::ALL[hot(OCCLUSION_OFFSET..LABEL_WIDTH)],
        }
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        let bits: [u8; LABEL_WIDTH] =
            v.try_into().map_err(|_| Error::invalid("label vector must have 11 bits"))?;
        LabelVector::new(bits)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(l: LabelVector) -> Vec<u8> {
        l.0.to_vec()
    }
}

pub fn spec_to_label(spec: &AbnormalitySpec) -> LabelVector {
    let mut bits = [0u8; LABEL_WIDTH];
    bits[0] = spec.mirrored as u8;
    bits[ROTATION_OFFSET + spec.rotation.index()] = 1;
    bits[OCCLUSION_OFFSET + spec.occluded_lobe.index()] = 1;
    LabelVector(bits)
}

pub fn label_to_spec(label: &LabelVector) -> AbnormalitySpec {
    label.to_spec()
}

/// Reverses the column axis (patient left/right) of every slice.
pub fn apply_mirror(v: &Volume) -> Volume {
    v.map_data(mirror_grid(v.data(), v.dims()))
}

fn mirror_grid<T: Copy>(data: &[T], [_, _, w]: [usize; 3]) -> Vec<T> {
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

pub fn mirror_lobes(m: &LobeMaskSet) -> LobeMaskSet {
    LobeMaskSet::new(m.dims(), mirror_grid(m.labels(), m.dims())).expect("shape preserved")
}

/// Source position `(row, col)` sampled by output pixel `(r, c)` when a slice
/// of `h × w` is rotated counterclockwise (as displayed) by `deg` degrees.
fn source_position(r: usize, c: usize, h: usize, w: usize, deg: f64) -> (f64, f64) {
    let (sin, cos) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let x = c as f64 - cx;
    let y = cy - r as f64;
    let xs = x * cos + y * sin;
    let ys = -x * sin + y * cos;
    (cy - ys, cx + xs)
}

/// Index of the source pixel for an exact quarter turn on a square slice.
fn quarter_turn_source(r: usize, c: usize, n: usize, rotation: Rotation) -> usize {
    match rotation {
        Rotation::Pos90 => c * n + (n - 1 - r),
        Rotation::Neg90 => (n - 1 - c) * n + r,
        _ => unreachable!("quarter turns only"),
    }
}

fn is_quarter_turn(rotation: Rotation, h: usize, w: usize) -> bool {
    matches!(rotation, Rotation::Pos90 | Rotation::Neg90) && h == w
}

/// Rotates every transverse slice about its centre, counterclockwise for
/// positive angles. Quarter turns on square slices are exact permutations;
/// other angles use bilinear interpolation with 0.0 outside the frame.
pub fn apply_rotation(v: &Volume, rotation: Rotation) -> Volume {
    if rotation == Rotation::Zero {
        return v.clone();
    }
    let [d, h, w] = v.dims();
    let plane = h * w;
    let src = v.data();
    let mut out = vec![0.0; src.len()];
    if is_quarter_turn(rotation, h, w) {
        for s in 0..d {
            for r in 0..h {
                for c in 0..w {
                    out[s * plane + r * w + c] = src[s * plane + quarter_turn_source(r, c, h, rotation)];
                }
            }
        }
        return v.map_data(out);
    }
    let deg = rotation.degrees() as f64;
    for r in 0..h {
        for c in 0..w {
            let (ry, cx) = source_position(r, c, h, w, deg);
            let (r0, c0) = (ry.floor(), cx.floor());
            let (fr, fc) = (ry - r0, cx - c0);
            let taps = [
                (r0, c0, (1.0 - fr) * (1.0 - fc)),
                (r0, c0 + 1.0, (1.0 - fr) * fc),
                (r0 + 1.0, c0, fr * (1.0 - fc)),
                (r0 + 1.0, c0 + 1.0, fr * fc),
            ];
            let taps: Vec<(usize, f64)> = taps
                .iter()
                .filter(|(tr, tc, wt)| {
                    *wt > 0.0 && *tr >= 0.0 && *tc >= 0.0 && *tr < h as f64 && *tc < w as f64
                })
                .map(|&(tr, tc, wt)| (tr as usize * w + tc as usize, wt))
                .collect();
            for s in 0..d {
                let base = s * plane;
                let value: f64 = taps.iter().map(|&(i, wt)| src[base + i] * wt).sum();
                out[base + r * w + c] = value.clamp(0.0, 1.0);
            }
        }
    }
    v.map_data(out)
}

/// Nearest-neighbour rotation of a lobe label volume.
pub fn rotate_lobes(m: &LobeMaskSet, rotation: Rotation) -> LobeMaskSet {
    if rotation == Rotation::Zero {
        return m.clone();
    }
    let [d, h, w] = m.dims();
    let plane = h * w;
    let src = m.labels();
    let mut out = vec![0u8; src.len()];
    for r in 0..h {
        for c in 0..w {
            let source = if is_quarter_turn(rotation, h, w) {
                Some(quarter_turn_source(r, c, h, rotation))
            } else {
                let (ry, cx) = source_position(r, c, h, w, rotation.degrees() as f64);
                let (ry, cx) = (ry.round(), cx.round());
                (ry >= 0.0 && cx >= 0.0 && ry < h as f64 && cx < w as f64)
                    .then(|| ry as usize * w + cx as usize)
            };
            if let Some(i) = source {
                for s in 0..d {
                    out[s * plane + r * w + c] = src[s * plane + i];
                }
            }
        }
    }
    LobeMaskSet::new(m.dims(), out).expect("shape preserved")
}

/// Sets every voxel of `lobe` to 0.0, leaving all others untouched.
pub fn apply_occlusion(v: &Volume, masks: &LobeMaskSet, lobe: Lobe) -> Result<Volume> {
    if masks.dims() != v.dims() {
        return Err(Error::invalid(format!(
            "mask shape {:?} does not match volume shape {:?}",
            masks.dims(),
            v.dims()
        )));
    }
    let label = lobe.label();
    let data = v
        .data()
        .iter()
        .zip(masks.labels())
        .map(|(&x, &l)| if l == label { 0.0 } else { x })
        .collect();
    Ok(v.map_data(data))
}

/// Applies the present findings in the order occlusion, mirror, rotation, so
/// that the lobe masks are used in their native orientation.
pub fn inject_findings(p: &Phantom, findings: &Findings) -> Result<Volume> {
    let mut v = match findings.occluded_lobe {
        Some(lobe) => apply_occlusion(&p.volume, &p.lobes, lobe)?,
        None => p.volume.clone(),
    };
    if findings.mirrored == Some(true) {
        v = apply_mirror(&v);
    }
    if let Some(rotation) = findings.rotation {
        v = apply_rotation(&v, rotation);
    }
    Ok(v)
}

pub fn inject(p: &Phantom, spec: &AbnormalitySpec) -> Result<(Volume, LabelVector)> {
    Ok((inject_findings(p, &spec.findings())?, spec_to_label(spec)))
}

/// The lobe masks after the geometric part of `findings`.
pub fn transform_lobes(m: &LobeMaskSet, findings: &Findings) -> LobeMaskSet {
    let mut m = if findings.mirrored == Some(true) { mirror_lobes(m) } else { m.clone() };
    if let Some(rotation) = findings.rotation {
        m = rotate_lobes(&m, rotation);
    }
    m
}
