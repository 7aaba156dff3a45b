//! Valid (no-padding) 2-D cross-correlation over channel stacks.

use crate::error::{Error, Result};
use crate::numkit::DenseMatrix;

/// Channel-major 3-D tensor: index (c, y, x) at c·H·W + y·W + x.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.values[(c * self.height + y) * self.width + x] = v;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Shape of one convolution layer. Kernels for the layer are kept in a
/// `DenseMatrix` with one row per output channel and `in_channels·kh·kw`
/// columns (channel-major, matching `Tensor3`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn weight_cols(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn output_size(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        if self.kernel_h > in_h || self.kernel_w > in_w {
            return Err(Error::dimension(format!(
                "kernel {}x{} larger than input {}x{}",
                self.kernel_h, self.kernel_w, in_h, in_w
            )));
        }
        Ok((
            (in_h - self.kernel_h) / self.stride + 1,
            (in_w - self.kernel_w) / self.stride + 1,
        ))
    }
}

/// Valid cross-correlation; `bias` (when given) is added per output channel.
pub fn conv2d(
    input: &Tensor3,
    weights: &DenseMatrix,
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<Tensor3> {
    if input.channels != spec.in_channels {
        return Err(Error::dimension(format!(
            "conv2d: input has {} channels, spec expects {}",
            input.channels, spec.in_channels
        )));
    }
    if weights.rows() != spec.out_channels || weights.cols() != spec.weight_cols() {
        return Err(Error::dimension("conv2d: weight shape mismatch"));
    }
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::dimension("conv2d: bias length mismatch"));
        }
    }
    let (out_h, out_w) = spec.output_size(input.height, input.width)?;
    let mut out = Tensor3::zeros(spec.out_channels, out_h, out_w);
    for oc in 0..spec.out_channels {
        let kernel = weights.row(oc);
        let b = bias.map_or(0.0, |b| b[oc]);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let iy0 = oy * spec.stride;
                let ix0 = ox * spec.stride;
                let mut acc = b;
                let mut k = 0;
                for ic in 0..spec.in_channels {
                    for ky in 0..spec.kernel_h {
                        let row_base = (ic * input.height + iy0 + ky) * input.width + ix0;
                        let in_row = &input.values[row_base..row_base + spec.kernel_w];
                        let k_row = &kernel[k..k + spec.kernel_w];
                        for (w, v) in k_row.iter().zip(in_row) {
                            acc += w * v;
                        }
                        k += spec.kernel_w;
                    }
                }
                out.set(oc, oy, ox, acc);
            }
        }
    }
    debug_assert!(out.values.iter().all(|v| v.is_finite()));
    Ok(out)
}

/// Backward pass. Accumulates `scale`-weighted kernel and bias gradients and,
/// when `d_input` is given, the gradient w.r.t. the input (unscaled, since it
/// propagates an already-scaled upstream).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor3,
    weights: &DenseMatrix,
    spec: &ConvSpec,
    d_out: &Tensor3,
    d_weights: &mut DenseMatrix,
    d_bias: &mut [f64],
    mut d_input: Option<&mut Tensor3>,
    scale: f64,
) {
    let (out_h, out_w) = (d_out.height, d_out.width);
    for oc in 0..spec.out_channels {
        let kernel = weights.row(oc);
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = d_out.get(oc, oy, ox);
                if g == 0.0 {
                    continue;
                }
                d_bias[oc] += scale * g;
                let iy0 = oy * spec.stride;
                let ix0 = ox * spec.stride;
                let mut k = 0;
                for ic in 0..spec.in_channels {
                    for ky in 0..spec.kernel_h {
                        let row_base = (ic * input.height + iy0 + ky) * input.width + ix0;
                        {
                            let dk =
                                &mut d_weights.values_mut()[oc * spec.weight_cols() + k
                                    ..oc * spec.weight_cols() + k + spec.kernel_w];
                            let in_row = &input.values[row_base..row_base + spec.kernel_w];
                            for (dw, v) in dk.iter_mut().zip(in_row) {
                                *dw += scale * g * v;
                            }
                        }
                        if let Some(di) = d_input.as_deref_mut() {
                            let d_row = &mut di.values[row_base..row_base + spec.kernel_w];
                            let k_row = &kernel[k..k + spec.kernel_w];
                            for (dv, w) in d_row.iter_mut().zip(k_row) {
                                *dv += g * w;
                            }
                        }
                        k += spec.kernel_w;
                    }
                }
            }
        }
    }
}
