//! Convolution as a matrix product over unfolded patches.
//!
//! Activations are `(batch·h·w) × channels` matrices. A patch row holds the
//! receptive field of one output position ordered channel-major
//! (`c·kh·kw + ky·kw + kx`), so a filter bank is a `(c·kh·kw) × n` matrix and
//! the whole layer is `Z = X_patches · W`, optionally followed by the hinge
//! `Z = X_patches · W · A`.

use serde::{Deserialize, Serialize};

use crate::error::{HingeError, Result};
use crate::tensor::matrix::{matmul_into, matmul_nt, matmul_tn};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvMeta {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_size: (usize, usize),
    pub out_size: (usize, usize),
}

impl ConvMeta {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        in_size: (usize, usize),
    ) -> Result<Self> {
        if stride == 0 || groups == 0 || kernel == 0 {
            return Err(HingeError::dim("kernel, stride and groups must be positive"));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(HingeError::dim(format!(
                "{in_channels} -> {out_channels} channels not divisible into {groups} groups"
            )));
        }
        let out = |n: usize| -> Result<usize> {
            (n + 2 * padding)
                .checked_sub(kernel)
                .map(|v| v / stride + 1)
                .ok_or_else(|| HingeError::dim(format!("kernel {kernel} larger than padded input {n}")))
        };
        Ok(ConvMeta {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            padding,
            groups,
            in_size,
            out_size: (out(in_size.0)?, out(in_size.1)?),
        })
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the reshaped filter matrix, `c·w·h` per group.
    pub fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel_area()
    }

    pub fn out_positions(&self) -> usize {
        self.out_size.0 * self.out_size.1
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.padding == 0
    }
}

/// A batch of feature maps stored position-major: row `(b·h + y)·w + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: DenseMatrix,
}

impl FeatureMap {
    pub fn new(batch: usize, height: usize, width: usize, data: DenseMatrix) -> Result<Self> {
        if data.rows() != batch * height * width {
            return Err(HingeError::dim(format!(
                "{} rows for a batch of {batch} {height}x{width} maps",
                data.rows()
            )));
        }
        Ok(FeatureMap { batch, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds `channels` input channels starting at `first_channel`.
pub fn im2col(x: &FeatureMap, meta: &ConvMeta, first_channel: usize, channels: usize) -> DenseMatrix {
    let (kh, kw) = meta.kernel;
    let (oh, ow) = meta.out_size;
    let (ih, iw) = (x.height, x.width);
    let cols = channels * kh * kw;
    let in_c = x.channels();
    let src = x.data.data();
    let mut out = DenseMatrix::zeros(x.batch * oh * ow, cols);
    let dst = out.data_mut();
    let pad = meta.padding as isize;
    for b in 0..x.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let base = row * cols;
                for ky in 0..kh {
                    let iy = (oy * meta.stride + ky) as isize - pad;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * meta.stride + kx) as isize - pad;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let in_row = (b * ih + iy as usize) * iw + ix as usize;
                        let src_row = &src[in_row * in_c + first_channel..in_row * in_c + first_channel + channels];
                        let k = ky * kw + kx;
                        for (c, &v) in src_row.iter().enumerate() {
                            dst[base + c * kh * kw + k] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates patch gradients into `dx`.
pub fn col2im_add(
    patches: &DenseMatrix,
    meta: &ConvMeta,
    first_channel: usize,
    channels: usize,
    dx: &mut FeatureMap,
) {
    let (kh, kw) = meta.kernel;
    let (oh, ow) = meta.out_size;
    let (ih, iw) = (dx.height, dx.width);
    let cols = channels * kh * kw;
    let in_c = dx.channels();
    let pad = meta.padding as isize;
    let src = patches.data();
    let batch = dx.batch;
    let dst = dx.data.data_mut();
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                let base = row * cols;
                for ky in 0..kh {
                    let iy = (oy * meta.stride + ky) as isize - pad;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * meta.stride + kx) as isize - pad;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let in_row = (b * ih + iy as usize) * iw + ix as usize;
                        let k = ky * kw + kx;
                        let d = &mut dst[in_row * in_c + first_channel..in_row * in_c + first_channel + channels];
                        for (c, v) in d.iter_mut().enumerate() {
                            *v += src[base + c * kh * kw + k];
                        }
                    }
                }
            }
        }
    }
}

/// A convolution with reshaped filter `weight` and an optional trailing
/// `1×1` factor `hinge` (the sparsity-inducing matrix, or the second factor of
/// a decomposed layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub meta: ConvMeta,
    pub weight: DenseMatrix,
    pub hinge: Option<DenseMatrix>,
}

pub struct ConvCache {
    patches: Vec<DenseMatrix>,
    pre_hinge: Option<DenseMatrix>,
    in_batch: usize,
}

pub struct ConvGrads {
    pub weight: DenseMatrix,
    pub hinge: Option<DenseMatrix>,
}

impl Conv {
    pub fn new(meta: ConvMeta, weight: DenseMatrix, hinge: Option<DenseMatrix>) -> Result<Self> {
        let conv = Conv { meta, weight, hinge };
        conv.check()?;
        Ok(conv)
    }

    pub fn check(&self) -> Result<()> {
        let m = &self.meta;
        if self.weight.rows() != m.patch_len() {
            return Err(HingeError::dim(format!(
                "filter has {} rows, conv needs c·w·h = {}",
                self.weight.rows(),
                m.patch_len()
            )));
        }
        match &self.hinge {
            None => {
                if self.weight.cols() != m.out_channels {
                    return Err(HingeError::dim(format!(
                        "filter has {} columns for {} outputs",
                        self.weight.cols(),
                        m.out_channels
                    )));
                }
            }
            Some(a) => {
                if m.groups != 1 {
                    return Err(HingeError::dim("grouped convolutions cannot carry a hinge"));
                }
                if a.rows() != self.weight.cols() || a.cols() != m.out_channels {
                    return Err(HingeError::dim(format!(
                        "hinge {}x{} after filter with {} columns and {} outputs",
                        a.rows(),
                        a.cols(),
                        self.weight.cols(),
                        m.out_channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// `W · A` (or `W` when there is no hinge).
    pub fn effective_weight(&self) -> DenseMatrix {
        match &self.hinge {
            Some(a) => {
                let mut out = DenseMatrix::zeros(self.weight.rows(), a.cols());
                matmul_into(&self.weight, a, &mut out);
                out
            }
            None => self.weight.clone(),
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvCache)> {
        let m = &self.meta;
        if x.channels() != m.in_channels || (x.height, x.width) != m.in_size {
            return Err(HingeError::dim(format!(
                "conv expects {}x{}x{}, got {}x{}x{}",
                m.in_channels,
                m.in_size.0,
                m.in_size.1,
                x.channels(),
                x.height,
                x.width
            )));
        }
        let n_rows = x.batch * m.out_positions();
        let (out, cache) = if m.groups == 1 {
            let patches = im2col(x, m, 0, m.in_channels);
            let mut y = DenseMatrix::zeros(n_rows, self.weight.cols());
            matmul_into(&patches, &self.weight, &mut y);
            match &self.hinge {
                Some(a) => {
                    let mut z = DenseMatrix::zeros(n_rows, a.cols());
                    matmul_into(&y, a, &mut z);
                    (z, ConvCache { patches: vec![patches], pre_hinge: Some(y), in_batch: x.batch })
                }
                None => (y, ConvCache { patches: vec![patches], pre_hinge: None, in_batch: x.batch }),
            }
        } else {
            let (ipg, opg) = (m.in_per_group(), m.out_per_group());
            let mut z = DenseMatrix::zeros(n_rows, m.out_channels);
            let mut all = Vec::with_capacity(m.groups);
            for g in 0..m.groups {
                let patches = im2col(x, m, g * ipg, ipg);
                let cols: Vec<usize> = (g * opg..(g + 1) * opg).collect();
                let wg = self.weight.select_columns(&cols);
                let mut zg = DenseMatrix::zeros(n_rows, opg);
                matmul_into(&patches, &wg, &mut zg);
                for r in 0..n_rows {
                    z.row_mut(r)[g * opg..(g + 1) * opg].copy_from_slice(zg.row(r));
                }
                all.push(patches);
            }
            (z, ConvCache { patches: all, pre_hinge: None, in_batch: x.batch })
        };
        Ok((FeatureMap::new(x.batch, m.out_size.0, m.out_size.1, out)?, cache))
    }

    pub fn backward(&self, cache: &ConvCache, dz: &DenseMatrix) -> Result<(FeatureMap, ConvGrads)> {
        let m = &self.meta;
        let mut dx = FeatureMap::new(
            cache.in_batch,
            m.in_size.0,
            m.in_size.1,
            DenseMatrix::zeros(cache.in_batch * m.in_size.0 * m.in_size.1, m.in_channels),
        )?;
        if m.groups == 1 {
            let patches = &cache.patches[0];
            let (dy, d_hinge) = match (&self.hinge, &cache.pre_hinge) {
                (Some(a), Some(y)) => (matmul_nt(dz, a), Some(matmul_tn(y, dz))),
                (None, None) => (dz.clone(), None),
                _ => return Err(HingeError::Structural("conv cache does not match layer".into())),
            };
            let dw = matmul_tn(patches, &dy);
            let dp = matmul_nt(&dy, &self.weight);
            col2im_add(&dp, m, 0, m.in_channels, &mut dx);
            Ok((dx, ConvGrads { weight: dw, hinge: d_hinge }))
        } else {
            let (ipg, opg) = (m.in_per_group(), m.out_per_group());
            let mut dw = DenseMatrix::zeros(self.weight.rows(), self.weight.cols());
            for g in 0..m.groups {
                let cols: Vec<usize> = (g * opg..(g + 1) * opg).collect();
                let dzg = dz.select_columns(&cols);
                let wg = self.weight.select_columns(&cols);
                let dwg = matmul_tn(&cache.patches[g], &dzg);
                for r in 0..dw.rows() {
                    dw.row_mut(r)[g * opg..(g + 1) * opg].copy_from_slice(dwg.row(r));
                }
                let dp = matmul_nt(&dzg, &wg);
                col2im_add(&dp, m, g * ipg, ipg, &mut dx);
            }
            Ok((dx, ConvGrads { weight: dw, hinge: None }))
        }
    }

    /// Parameters of the stored tensors.
    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.hinge.as_ref().map_or(0, |a| a.rows() * a.cols())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct sliding-window convolution, channel-major filter rows.
    fn naive_conv(x: &FeatureMap, meta: &ConvMeta, w: &DenseMatrix) -> DenseMatrix {
        let (kh, kw) = meta.kernel;
        let (oh, ow) = meta.out_size;
        let (ipg, opg) = (meta.in_per_group(), meta.out_per_group());
        let mut out = DenseMatrix::zeros(x.batch * oh * ow, meta.out_channels);
        for b in 0..x.batch {
            for o in 0..meta.out_channels {
                let g = o / opg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ipg {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * meta.stride + ky) as isize - meta.padding as isize;
                                    let ix = (ox * meta.stride + kx) as isize - meta.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                        continue;
                                    }
                                    let r = (b * x.height + iy as usize) * x.width + ix as usize;
                                    acc += x.data[(r, g * ipg + c)] * w[(c * kh * kw + ky * kw + kx, o)];
                                }
                            }
                        }
                        out[((b * oh + oy) * ow + ox, o)] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, batch: usize, h: usize, w: usize, c: usize) -> FeatureMap {
        FeatureMap::new(batch, h, w, DenseMatrix::random_normal(batch * h * w, c, 1.0, rng)).unwrap()
    }

    #[test]
    fn matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(stride, padding, groups) in &[(1, 1, 1), (2, 1, 1), (1, 0, 1), (1, 1, 2), (2, 1, 4)] {
            let meta = ConvMeta::new(4, 8, 3, stride, padding, groups, (7, 6)).unwrap();
            let x = random_map(&mut rng, 2, 7, 6, 4);
            let w = DenseMatrix::random_normal(meta.patch_len(), 8, 1.0, &mut rng);
            let conv = Conv::new(meta, w.clone(), None).unwrap();
            let (z, _) = conv.forward(&x).unwrap();
            let oracle = naive_conv(&x, &meta, &w);
            assert!(z.data.sub(&oracle).unwrap().max_abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_hinge_preserves_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let meta = ConvMeta::new(3, 5, 3, 1, 1, 1, (5, 5)).unwrap();
        let x = random_map(&mut rng, 2, 5, 5, 3);
        let w = DenseMatrix::random_normal(meta.patch_len(), 5, 1.0, &mut rng);
        let plain = Conv::new(meta, w.clone(), None).unwrap();
        let hinged = Conv::new(meta, w, Some(DenseMatrix::identity(5))).unwrap();
        assert_eq!(plain.forward(&x).unwrap().0, hinged.forward(&x).unwrap().0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let meta = ConvMeta::new(3, 5, 3, 1, 1, 1, (5, 5)).unwrap();
        assert!(Conv::new(meta, DenseMatrix::zeros(26, 5), None).is_err());
        assert!(Conv::new(meta, DenseMatrix::zeros(27, 5), Some(DenseMatrix::zeros(4, 5))).is_err());
        assert!(ConvMeta::new(3, 4, 3, 1, 1, 2, (5, 5)).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), p> == <x, col2im(p)>
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let meta = ConvMeta::new(2, 2, 3, 2, 1, 1, (5, 4)).unwrap();
        let x = random_map(&mut rng, 2, 5, 4, 2);
        let cols = im2col(&x, &meta, 0, 2);
        let p = DenseMatrix::random_normal(cols.rows(), cols.cols(), 1.0, &mut rng);
        let mut back = FeatureMap::new(2, 5, 4, DenseMatrix::zeros(40, 2)).unwrap();
        col2im_add(&p, &meta, 0, 2, &mut back);
        let lhs: f64 = cols.data().iter().zip(p.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.data().iter().zip(back.data.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }
}
