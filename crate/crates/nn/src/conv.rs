//! Convolution as im2col followed by a matrix product. 2D convolutions are
//! 3D convolutions over a depth of one.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input.
    pub fn out_dims(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.in_dims[a] + 2 * self.pad[a];
            if self.stride[a] == 0 || span < self.kernel[a] {
                return None;
            }
            out[a] = (span - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_dims.iter().product::<usize>()
    }
}

/// Visits every (column entry, input offset) pair whose
/// input coordinate falls inside the unpadded volume.
fn for_each_tap(g: &ConvGeom, out: [usize; 3], mut f: impl FnMut(usize, usize)) {
    let [d, h, w] = g.in_dims;
    let [kd, kh, kw] = g.kernel;
    let n_out = out.iter().product::<usize>();
    for c in 0..g.in_channels {
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = ((c * kd + kz) * kh + ky) * kw + kx;
                    let base = row * n_out;
                    for oz in 0..out[0] {
                        let iz = (oz * g.stride[0] + kz) as isize - g.pad[0] as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..out[1] {
                            let iy = (oy * g.stride[1] + ky) as isize - g.pad[1] as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = ((c * d + iz as usize) * h + iy as usize) * w;
                            let out_row = (oz * out[1] + oy) * out[2];
                            for ox in 0..out[2] {
                                let ix = (ox * g.stride[2] + kx) as isize - g.pad[2] as isize;
                                if ix >= 0 && ix < w as isize {
                                    f(base + out_row + ox, in_row + ix as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[patch_len, out positions]` matrix of input taps; padding reads zero.
pub fn im2col(x: &[f64], g: &ConvGeom, out: [usize; 3]) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch_len() * out.iter().product::<usize>()];
    for_each_tap(g, out, |ci, xi| cols[ci] = x[xi]);
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeom, out: [usize; 3], dx: &mut [f64]) {
    for_each_tap(g, out, |ci, xi| dx[xi] += cols[ci]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        let g = ConvGeom { in_channels: 1, in_dims: [1, 64, 64], kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] };
        assert_eq!(g.out_dims(), Some([1, 32, 32]));
        let g = ConvGeom { in_channels: 1, in_dims: [2, 4, 4], kernel: [3, 3, 3], stride: [1, 1, 1], pad: [0, 1, 1] };
        assert_eq!(g.out_dims(), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { in_channels: 2, in_dims: [3, 4, 5], kernel: [2, 3, 3], stride: [1, 2, 1], pad: [1, 1, 0] };
        let out = g.out_dims().unwrap();
        let x: Vec<f64> = (0..g.in_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, &g, out);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 3) % 13) as f64 * 0.25).collect();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, out, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
