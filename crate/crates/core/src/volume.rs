//! Volumetric image type and deterministic pre-processing.
//!
//! Volumes are indexed `[slice, row, col]`, the slice axis running
//! cranio-caudally through transverse slices.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const HU_MIN: f64 = -1000.0;
pub const HU_MAX: f64 = 1300.0;
/// Share of the lung slice count added above and below the lungs.
pub const SLAB_MARGIN: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    RawHu,
    Normalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f64>,
    spacing: Option<[f64; 3]>,
    domain: ValueDomain,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>, domain: ValueDomain) -> Result<Self> {
        check_dims(dims)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                dims
            )));
        }
        if domain == ValueDomain::Normalized {
            if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::invalid(format!("normalized volume holds value {v}")));
            }
        }
        Ok(Volume { dims, data, spacing: None, domain })
    }

    pub fn filled(dims: [usize; 3], value: f64, domain: ValueDomain) -> Result<Self> {
        Self::new(dims, vec![value; dims.iter().product()], domain)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = Some(spacing);
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn depth(&self) -> usize {
        self.dims[0]
    }
    pub fn rows(&self) -> usize {
        self.dims[1]
    }
    pub fn cols(&self) -> usize {
        self.dims[2]
    }
    pub fn spacing(&self) -> Option<[f64; 3]> {
        self.spacing
    }
    pub fn domain(&self) -> ValueDomain {
        self.domain
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, s: usize, r: usize, c: usize) -> usize {
        (s * self.dims[1] + r) * self.dims[2] + c
    }

    #[inline]
    pub fn get(&self, s: usize, r: usize, c: usize) -> f64 {
        self.data[self.index(s, r, c)]
    }

    /// One transverse slice, row-major.
    pub fn slice(&self, s: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[s * n..(s + 1) * n]
    }

    /// Replaces the voxel buffer, keeping shape and metadata.
    pub(crate) fn map_data(&self, data: Vec<f64>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume { dims: self.dims, data, spacing: self.spacing, domain: self.domain }
    }
}

pub(crate) fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(format!("empty volume shape {dims:?}")));
    }
    Ok(())
}

/// Inclusive range of transverse slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabRange {
    pub first_slice: usize,
    pub last_slice: usize,
}

impl SlabRange {
    pub fn new(first_slice: usize, last_slice: usize) -> Self {
        SlabRange { first_slice, last_slice }
    }

    pub fn len(&self) -> usize {
        self.last_slice + 1 - self.first_slice
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.first_slice > self.last_slice || self.last_slice >= depth {
            return Err(Error::invalid(format!(
                "slab [{}, {}] outside volume depth {depth}",
                self.first_slice, self.last_slice
            )));
        }
        Ok(())
    }
}

/// Clamps raw HU values to `[-1000, 1300]` and maps them affinely onto `[0, 1]`.
pub fn clip_and_normalize(v: &Volume) -> Result<Volume> {
    if v.domain != ValueDomain::RawHu {
        return Err(Error::invalid("clip_and_normalize expects a raw HU volume"));
    }
    let data = v.data.iter().map(|&x| normalize_hu(x)).collect();
    Ok(Volume { dims: v.dims, data, spacing: v.spacing, domain: ValueDomain::Normalized })
}

#[inline]
pub fn normalize_hu(x: f64) -> f64 {
    (x.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN)
}

#[inline]
pub fn denormalize(x: f64) -> f64 {
    x * (HU_MAX - HU_MIN) + HU_MIN
}

/// Thorax slab around the lungs: the lung slices plus 40% of their count on
/// either side, clamped to the scan.
pub fn thorax_slab(depth: usize, lungs: SlabRange) -> Result<SlabRange> {
    lungs.validate(depth)?;
    let margin = (SLAB_MARGIN * lungs.len() as f64).floor() as usize;
    Ok(SlabRange {
        first_slice: lungs.first_slice.saturating_sub(margin),
        last_slice: (lungs.last_slice + margin).min(depth - 1),
    })
}

pub fn select_thorax_slab(v: &Volume, lungs: SlabRange) -> Result<Volume> {
    let slab = thorax_slab(v.depth(), lungs)?;
    let plane = v.rows() * v.cols();
    let data = v.data[slab.first_slice * plane..(slab.last_slice + 1) * plane].to_vec();
    Ok(Volume {
        dims: [slab.len(), v.rows(), v.cols()],
        data,
        spacing: v.spacing,
        domain: v.domain,
    })
}

/// Placement of a uniformly rescaled volume inside a target box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fit {
    pub scaled: [usize; 3],
    pub offset: [usize; 3],
}

pub fn fit_into(dims: [usize; 3], target: [usize; 3]) -> Result<Fit> {
    check_dims(dims)?;
    if target.contains(&0) {
        return Err(Error::invalid(format!("invalid target shape {target:?}")));
    }
    let scale = (0..3)
        .map(|a| target[a] as f64 / dims[a] as f64)
        .fold(f64::INFINITY, f64::min);
    let mut scaled = [0; 3];
    let mut offset = [0; 3];
    for a in 0..3 {
        scaled[a] = ((dims[a] as f64 * scale).round() as usize).clamp(1, target[a]);
        offset[a] = (target[a] - scaled[a]) / 2;
    }
    Ok(Fit { scaled, offset })
}

/// Per-axis linear interpolation taps for resampling `n_in` samples onto `n_out`.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    if n_in == n_out {
        return (0..n_out).map(|i| (i, i, 0.0)).collect();
    }
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let x = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect()
}

/// Uniformly rescales `v` (trilinear) to fit inside `target`, then pads
/// symmetrically with 0.0 to exactly `target`.
pub fn resize_pad(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let fit = fit_into(v.dims, target)?;
    if fit.scaled == v.dims && target == v.dims {
        return Ok(v.clone());
    }
    let [ts, tr, tc] = fit.scaled;
    let (zs, ys, xs) = (taps(v.dims[0], ts), taps(v.dims[1], tr), taps(v.dims[2], tc));
    let mut out = vec![0.0; target.iter().product()];
    for (s, &(s0, s1, fs)) in zs.iter().enumerate() {
        for (r, &(r0, r1, fr)) in ys.iter().enumerate() {
            let o = ((s + fit.offset[0]) * target[1] + r + fit.offset[1]) * target[2] + fit.offset[2];
            for (c, &(c0, c1, fc)) in xs.iter().enumerate() {
                let lerp = |ss: usize, rr: usize| {
                    let a = v.get(ss, rr, c0);
                    let b = v.get(ss, rr, c1);
                    a + (b - a) * fc
                };
                let plane = |ss: usize| {
                    let a = lerp(ss, r0);
                    let b = lerp(ss, r1);
                    a + (b - a) * fr
                };
                let a = plane(s0);
                let b = plane(s1);
                out[o + c] = a + (b - a) * fs;
            }
        }
    }
    Ok(Volume { dims: target, data: out, spacing: None, domain: v.domain })
}

/// Nearest-neighbour counterpart of [`resize_pad`] for label volumes.
pub fn resize_pad_labels(labels: &[u8], dims: [usize; 3], target: [usize; 3]) -> Result<Vec<u8>> {
    let fit = fit_into(dims, target)?;
    let nearest = |n_in: usize, n_out: usize| -> Vec<usize> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| (((i as f64 + 0.5) * ratio).floor() as usize).min(n_in - 1))
            .collect()
    };
    let (zs, ys, xs) = (
        nearest(dims[0], fit.scaled[0]),
        nearest(dims[1], fit.scaled[1]),
        nearest(dims[2], fit.scaled[2]),
    );
    let mut out = vec![0u8; target.iter().product()];
    for (s, &si) in zs.iter().enumerate() {
        for (r, &ri) in ys.iter().enumerate() {
            let o = ((s + fit.offset[0]) * target[1] + r + fit.offset[1]) * target[2] + fit.offset[2];
            let i = (si * dims[1] + ri) * dims[2];
            for (c, &ci) in xs.iter().enumerate() {
                out[o + c] = labels[i + ci];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(dims: [usize; 3], vals: Vec<f64>) -> Volume {
        Volume::new(dims, vals, ValueDomain::RawHu).unwrap()
    }

    #[test]
    fn normalization_examples() {
        let v = raw([1, 1, 5], vec![-2000.0, -1000.0, 1300.0, 150.0, 5000.0]);
        let n = clip_and_normalize(&v).unwrap();
        assert_eq!(n.domain(), ValueDomain::Normalized);
        assert_eq!(n.data()[0], 0.0);
        assert_eq!(n.data()[1], 0.0);
        assert_eq!(n.data()[2], 1.0);
        assert!((n.data()[3] - 0.5).abs() < 1e-15);
        assert_eq!(n.data()[4], 1.0);
    }

    #[test]
    fn empty_or_wrong_domain_rejected() {
        assert!(Volume::new([0, 4, 4], vec![], ValueDomain::RawHu).is_err());
        let n = Volume::filled([1, 1, 1], 0.5, ValueDomain::Normalized).unwrap();
        assert!(clip_and_normalize(&n).is_err());
        assert!(Volume::new([1, 1, 1], vec![1.5], ValueDomain::Normalized).is_err());
    }

    #[test]
    fn slab_examples() {
        let s = thorax_slab(200, SlabRange::new(40, 139)).unwrap();
        assert_eq!((s.first_slice, s.last_slice, s.len()), (0, 179, 180));
        let s = thorax_slab(100, SlabRange::new(0, 99)).unwrap();
        assert_eq!((s.first_slice, s.last_slice), (0, 99));
        let s = thorax_slab(30, SlabRange::new(10, 19)).unwrap();
        assert_eq!((s.first_slice, s.last_slice, s.len()), (6, 23, 18));
        assert!(thorax_slab(30, SlabRange::new(10, 30)).is_err());
        assert!(thorax_slab(30, SlabRange::new(12, 10)).is_err());
    }

    #[test]
    fn select_slab_copies_slices() {
        let data: Vec<f64> = (0..30 * 4).map(|i| (i / 4) as f64).collect();
        let v = raw([30, 2, 2], data);
        let slab = select_thorax_slab(&v, SlabRange::new(10, 19)).unwrap();
        assert_eq!(slab.dims(), [18, 2, 2]);
        assert_eq!(slab.get(0, 0, 0), 6.0);
        assert_eq!(slab.get(17, 1, 1), 23.0);
    }

    #[test]
    fn resize_identity_and_padding() {
        let data: Vec<f64> = (0..64 * 64 * 64).map(|i| (i % 97) as f64 / 96.0).collect();
        let v = Volume::new([64, 64, 64], data, ValueDomain::Normalized).unwrap();
        assert_eq!(resize_pad(&v, [64, 64, 64]).unwrap(), v);

        let v = Volume::filled([32, 64, 64], 0.7, ValueDomain::Normalized).unwrap();
        let out = resize_pad(&v, [64, 64, 64]).unwrap();
        assert_eq!(out.dims(), [64, 64, 64]);
        assert_eq!(out.get(15, 10, 10), 0.0);
        assert_eq!(out.get(16, 10, 10), 0.7);
        assert_eq!(out.get(47, 10, 10), 0.7);
        assert_eq!(out.get(48, 10, 10), 0.0);

        let v = Volume::filled([128, 64, 64], 0.3, ValueDomain::Normalized).unwrap();
        assert_eq!(fit_into(v.dims(), [64, 64, 64]).unwrap().scaled, [64, 32, 32]);
        let out = resize_pad(&v, [64, 64, 64]).unwrap();
        assert_eq!(out.get(0, 15, 20), 0.0);
        assert!((out.get(0, 16, 16) - 0.3).abs() < 1e-15);
        assert!((out.get(63, 47, 47) - 0.3).abs() < 1e-15);
        assert_eq!(out.get(63, 48, 47), 0.0);
    }

    #[test]
    fn downsampling_averages_pairs() {
        let data: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        let v = Volume::new([1, 1, 4], data, ValueDomain::Normalized).unwrap();
        let out = resize_pad(&v, [1, 1, 2]).unwrap();
        assert_eq!(out.dims(), [1, 1, 2]);
        assert!((out.data()[0] - 0.5 / 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 2.5 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn label_resize_keeps_label_set() {
        let labels: Vec<u8> = (0..8 * 8 * 8).map(|i| (i % 6) as u8).collect();
        let out = resize_pad_labels(&labels, [8, 8, 8], [4, 8, 8]).unwrap();
        assert_eq!(out.len(), 4 * 8 * 8);
        assert!(out.iter().all(|&l| l < 6));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normalize_inverts_denormalize(x in 0.0f64..=1.0) {
            prop_assert!((normalize_hu(denormalize(x)) - x).abs() <= 1e-12);
        }

        #[test]
        fn slab_depth_bounds(depth in 1usize..400, a in 0usize..400, b in 0usize..400) {
            let (first, last) = (a.min(b) % depth, a.max(b) % depth);
            let (first, last) = (first.min(last), first.max(last));
            let lungs = SlabRange::new(first, last);
            let n = lungs.len();
            let slab = thorax_slab(depth, lungs).unwrap();
            prop_assert!(slab.len() >= n);
            prop_assert!(slab.len() as f64 <= (1.8 * n as f64).ceil() + 1.0);
            prop_assert!(slab.first_slice <= first && slab.last_slice >= last);
        }

        #[test]
        fn resize_hits_target_and_stays_normalized(
            d in 1usize..24, h in 1usize..24, w in 1usize..24,
            td in 1usize..24, th in 1usize..24, tw in 1usize..24,
            seed in any::<u64>(),
        ) {
            let n = d * h * w;
            let data: Vec<f64> = (0..n).map(|i| crate::seed::unit(seed, &[i as u64])).collect();
            let v = Volume::new([d, h, w], data, ValueDomain::Normalized).unwrap();
            let out = resize_pad(&v, [td, th, tw]).unwrap();
            prop_assert_eq!(out.dims(), [td, th, tw]);
            prop_assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
