//! Procedural thorax phantoms with exact lung-lobe masks.
//!
//! A phantom is rasterised in raw HU on a scan taller than the target, then
//! run through the same pre-processing chain a real CT would see: clipping
//! and normalization, thorax slab selection around the lung mask, and
//! resize+pad to the requested shape. Geometry is expressed in slice-relative
//! coordinates, columns increasing towards the patient's left (radiological
//! display), rows increasing posteriorly.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{self, SlabRange, ValueDomain, Volume};
use crate::{seed, Error, Result};

pub const MIN_DIM: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Lobe {
    #[serde(rename = "LUL")]
    LeftUpper,
    #[serde(rename = "LLL")]
    LeftLower,
    #[serde(rename = "RUL")]
    RightUpper,
    #[serde(rename = "RML")]
    RightMiddle,
    #[serde(rename = "RLL")]
    RightLower,
}

impl Lobe {
    pub const ALL: [Lobe; 5] =
        [Lobe::LeftUpper, Lobe::LeftLower, Lobe::RightUpper, Lobe::RightMiddle, Lobe::RightLower];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Lobe> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        ["LUL", "LLL", "RUL", "RML", "RLL"][self.index()]
    }

    pub fn name(self) -> &'static str {
        [
            "left upper lobe",
            "left lower lobe",
            "right upper lobe",
            "right middle lobe",
            "right lower lobe",
        ][self.index()]
    }

    pub fn is_left(self) -> bool {
        matches!(self, Lobe::LeftUpper | Lobe::LeftLower)
    }

    /// Value stored in a lobe label volume (0 is background).
    pub fn label(self) -> u8 {
        self.index() as u8 + 1
    }
}

/// The five lobe masks, stored as one label volume so they are disjoint by
/// construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LobeMaskSet {
    dims: [usize; 3],
    labels: Vec<u8>,
}

impl LobeMaskSet {
    pub fn new(dims: [usize; 3], labels: Vec<u8>) -> Result<Self> {
        volume::check_dims(dims)?;
        if labels.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid("lobe label volume does not match its shape"));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 5) {
            return Err(Error::invalid(format!("unknown lobe label {l}")));
        }
        Ok(LobeMaskSet { dims, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn lobe_at(&self, i: usize) -> Option<Lobe> {
        match self.labels[i] {
            0 => None,
            l => Lobe::from_index(l as usize - 1),
        }
    }

    pub fn mask(&self, lobe: Lobe) -> Vec<bool> {
        let l = lobe.label();
        self.labels.iter().map(|&x| x == l).collect()
    }

    pub fn count(&self, lobe: Lobe) -> usize {
        let l = lobe.label();
        self.labels.iter().filter(|&&x| x == l).count()
    }

    /// Mean voxel position `(slice, row, col)` of a lobe.
    pub fn centroid(&self, lobe: Lobe) -> Option<[f64; 3]> {
        let l = lobe.label();
        let [_, h, w] = self.dims;
        let (mut acc, mut n) = ([0.0; 3], 0usize);
        for (i, _) in self.labels.iter().enumerate().filter(|(_, &x)| x == l) {
            acc[0] += (i / (h * w)) as f64;
            acc[1] += ((i / w) % h) as f64;
            acc[2] += (i % w) as f64;
            n += 1;
        }
        (n > 0).then(|| acc.map(|a| a / n as f64))
    }

    /// Inclusive slice range containing any lung voxel.
    pub fn lung_extent(&self) -> Option<SlabRange> {
        let plane = self.dims[1] * self.dims[2];
        let has = |s: usize| self.labels[s * plane..(s + 1) * plane].iter().any(|&l| l != 0);
        let first = (0..self.dims[0]).find(|&s| has(s))?;
        let last = (0..self.dims[0]).rev().find(|&s| has(s))?;
        Some(SlabRange::new(first, last))
    }

    pub fn validate(&self) -> Result<()> {
        for lobe in Lobe::ALL {
            if self.count(lobe) == 0 {
                return Err(Error::invalid(format!("{} mask is empty", lobe.code())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub lobes: LobeMaskSet,
    pub seed: u64,
}

/// Per-phantom anatomical variation.
struct Anatomy {
    body_center: [f64; 2],
    body_radii: [f64; 2],
    spine_center: [f64; 2],
    lung_center_v: f64,
    lung_u: [f64; 2],
    lung_radii: [[f64; 2]; 2],
    heart_center: [f64; 2],
    heart_radii: [f64; 2],
    tissue_hu: f64,
    lobe_hu: [f64; 5],
    texture_phase: [f64; 5],
}

/// Spatial frequencies (u, v, z) and amplitude of each lobe's texture, in
/// [`Lobe::ALL`] order.
const LOBE_TEXTURE: [([f64; 3], f64); 5] = [
    ([6.0, 0.0, 1.0], 70.0),
    ([0.0, 7.0, 1.5], 70.0),
    ([4.0, 4.0, 0.0], 60.0),
    ([9.0, 9.0, 2.0], 80.0),
    ([2.0, 0.0, 3.0], 60.0),
];
const LOBE_BASE_HU: [f64; 5] = [-610.0, -550.0, -640.0, -520.0, -580.0];
const SPINE_HU: f64 = 650.0;
const NOISE_HU: f64 = 15.0;

impl Anatomy {
    fn sample(rng: &mut impl Rng) -> Self {
        let mut j = |scale: f64| (rng.random::<f64>() * 2.0 - 1.0) * scale;
        let body_center = [0.5 + j(0.015), 0.5 + j(0.015)];
        let body_radii = [0.44 * (1.0 + j(0.04)), 0.31 * (1.0 + j(0.05))];
        let lung_center_v = body_center[1] - 0.02 + j(0.01);
        let lung_u = [0.30 + j(0.015), 0.70 + j(0.015)];
        let lung_radii = [
            [0.135 * (1.0 + j(0.06)), 0.20 * (1.0 + j(0.06))],
            [0.125 * (1.0 + j(0.06)), 0.20 * (1.0 + j(0.06))],
        ];
        let heart_center = [0.57 + j(0.01), lung_center_v - 0.09 + j(0.01)];
        let heart_radii = [0.11 * (1.0 + j(0.05)), 0.09 * (1.0 + j(0.05))];
        let spine_center = [body_center[0], body_center[1] + 0.7 * body_radii[1]];
        let tissue_hu = 40.0 + j(20.0);
        let mut lobe_hu = LOBE_BASE_HU;
        for hu in &mut lobe_hu {
            *hu += j(20.0);
        }
        let mut texture_phase = [0.0; 5];
        for p in &mut texture_phase {
            *p = j(0.5) * TAU;
        }
        Anatomy {
            body_center,
            body_radii,
            spine_center,
            lung_center_v,
            lung_u,
            lung_radii,
            heart_center,
            heart_radii,
            tissue_hu,
            lobe_hu,
            texture_phase,
        }
    }

    /// Lobe at slice-relative position `(u, v)` and lung height `zeta`
    /// (-1 apex, +1 base), if any.
    fn lobe(&self, u: f64, v: f64, zeta: f64) -> Option<Lobe> {
        if zeta.abs() >= 1.0 {
            return None;
        }
        // Apex narrower than base.
        let taper = (1.0 - zeta * zeta).sqrt() * (0.8 + 0.2 * zeta);
        let heart = ellipse(u, v, self.heart_center, self.heart_radii) < 1.0 && zeta > -0.2;
        for side in 0..2 {
            let [ru, rv] = self.lung_radii[side];
            let (ru, rv) = (ru * taper.max(0.0), rv * taper.max(0.0));
            if ru <= 0.0 || ellipse(u, v, [self.lung_u[side], self.lung_center_v], [ru, rv]) >= 1.0 {
                continue;
            }
            if heart {
                return None;
            }
            let posterior = (v - self.lung_center_v) / self.lung_radii[side][1];
            let fissure = zeta + 0.7 * posterior;
            return Some(if side == 0 {
                if fissure > 0.25 {
                    Lobe::RightLower
                } else if zeta < -0.15 {
                    Lobe::RightUpper
                } else {
                    Lobe::RightMiddle
                }
            } else if fissure > 0.1 {
                Lobe::LeftLower
            } else {
                Lobe::LeftUpper
            });
        }
        None
    }

    fn lobe_hu(&self, lobe: Lobe, u: f64, v: f64, zeta: f64) -> f64 {
        let k = lobe.index();
        let ([fu, fv, fz], amp) = LOBE_TEXTURE[k];
        self.lobe_hu[k] + amp * (TAU * (fu * u + fv * v + fz * zeta) + self.texture_phase[k]).sin()
    }
}

fn ellipse(u: f64, v: f64, c: [f64; 2], r: [f64; 2]) -> f64 {
    let du = (u - c[0]) / r[0];
    let dv = (v - c[1]) / r[1];
    du * du + dv * dv
}

/// Generates the phantom for `seed` at `shape` (each dimension ≥ 16).
pub fn generate_phantom(seed: u64, shape: [usize; 3]) -> Result<Phantom> {
    if shape.iter().any(|&d| d < MIN_DIM) {
        return Err(Error::invalid(format!(
            "phantom shape {shape:?} too small, every dimension must be >= {MIN_DIM}"
        )));
    }
    let [d, h, w] = shape;
    let mut rng = seed::rng(seed, &[0x7068_616e]);
    let anatomy = Anatomy::sample(&mut rng);

    // Lungs take 1/1.8 of the thorax slab; the scan extends beyond the slab.
    let lung_slices = ((d as f64 / 1.8).round() as usize).max(3);
    let raw_depth = d + d / 2;
    let lung_first = (raw_depth - lung_slices) / 2 + rng.random_range(0..=d / 16);
    let lung_mid = lung_first as f64 + lung_slices as f64 / 2.0;
    let lung_half = lung_slices as f64 / 2.0;

    let noise = Normal::new(0.0, NOISE_HU).expect("valid noise sigma");
    let plane = h * w;
    let mut hu = vec![volume::HU_MIN; raw_depth * plane];
    let mut labels = vec![0u8; raw_depth * plane];
    for s in 0..raw_depth {
        let zeta = (s as f64 + 0.5 - lung_mid) / lung_half;
        for r in 0..h {
            let v = (r as f64 + 0.5) / h as f64;
            for c in 0..w {
                let u = (c as f64 + 0.5) / w as f64;
                let i = s * plane + r * w + c;
                if ellipse(u, v, anatomy.body_center, anatomy.body_radii) >= 1.0 {
                    continue;
                }
                let value = if let Some(lobe) = anatomy.lobe(u, v, zeta) {
                    labels[i] = lobe.label();
                    anatomy.lobe_hu(lobe, u, v, zeta)
                } else if ellipse(u, v, anatomy.spine_center, [0.055, 0.055 * w as f64 / h as f64]) < 1.0 {
                    SPINE_HU
                } else {
                    anatomy.tissue_hu
                };
                hu[i] = value + noise.sample(&mut rng);
            }
        }
    }

    let raw = Volume::new([raw_depth, h, w], hu, ValueDomain::RawHu)?;
    let raw_lobes = LobeMaskSet::new([raw_depth, h, w], labels)?;
    let lungs = raw_lobes
        .lung_extent()
        .ok_or_else(|| Error::invalid(format!("no lung voxels at shape {shape:?}")))?;

    let normalized = volume::clip_and_normalize(&raw)?;
    let slab = volume::select_thorax_slab(&normalized, lungs)?;
    let range = volume::thorax_slab(raw_depth, lungs)?;
    let slab_labels = &raw_lobes.labels[range.first_slice * plane..(range.last_slice + 1) * plane];

    let volume = volume::resize_pad(&slab, shape)?;
    let lobes = LobeMaskSet::new(shape, volume::resize_pad_labels(slab_labels, slab.dims(), shape)?)?;
    lobes
        .validate()
        .map_err(|e| Error::invalid(format!("phantom shape {shape:?} too small: {e}")))?;
    Ok(Phantom { volume, lobes, seed })
}
