//! 2-D cross-correlation (no kernel flip) with zero padding, lowered to a
//! matrix product over an unfolded patch matrix.

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Resolved extents of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernels: [usize; 4],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [in_channels, in_h, in_w] = input;
        let [out_channels, k_in, kernel_h, kernel_w] = kernels;
        if k_in != in_channels {
            return Err(Error::shape(format!(
                "conv: input has {in_channels} channels but kernels expect {k_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv: stride must be positive"));
        }
        let out_h = out_extent(in_h, kernel_h, stride, pad)?;
        let out_w = out_extent(in_w, kernel_w, stride, pad)?;
        Ok(ConvGeometry {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_h, self.out_w]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.out_channels * self.patch_len() * self.positions()) as u64
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "conv: kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::shape(format!(
            "conv: stride {stride} does not divide the sliding range {}",
            padded - kernel
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Reusable buffer for the unfolded patch matrix.
#[derive(Default)]
pub(crate) struct ConvScratch {
    cols: Vec<f64>,
}

/// Patch matrix `[C_in*kH*kW, H'*W']`; out-of-bounds taps are zero.
fn im2col(g: &ConvGeometry, input: &[f64], cols: &mut Vec<f64>) {
    let positions = g.positions();
    cols.clear();
    cols.resize(g.patch_len() * positions, 0.0);
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input layout.
fn col2im_add(g: &ConvGeometry, cols: &[f64], grad_input: &mut [f64]) {
    let positions = g.positions();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut grad_input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward_into(
    g: &ConvGeometry,
    input: &[f64],
    kernels: &[f64],
    bias: &[f64],
    out: &mut [f64],
    scratch: &mut ConvScratch,
) {
    im2col(g, input, &mut scratch.cols);
    let positions = g.positions();
    gemm(
        g.out_channels,
        g.patch_len(),
        positions,
        kernels,
        false,
        &scratch.cols,
        false,
        out,
        0.0,
    );
    for (plane, &b) in out.chunks_exact_mut(positions).zip(bias) {
        for v in plane {
            *v += b;
        }
    }
}

/// Accumulates (`+=`) into whichever gradient buffers are supplied.
pub(crate) fn conv2d_backward_into(
    g: &ConvGeometry,
    upstream: &[f64],
    input: &[f64],
    kernels: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_params: Option<(&mut [f64], &mut [f64])>,
    scratch: &mut ConvScratch,
) {
    let positions = g.positions();
    let patch = g.patch_len();
    if let Some((grad_kernels, grad_bias)) = grad_params {
        im2col(g, input, &mut scratch.cols);
        gemm(
            g.out_channels,
            positions,
            patch,
            upstream,
            false,
            &scratch.cols,
            true,
            grad_kernels,
            1.0,
        );
        for (gb, plane) in grad_bias.iter_mut().zip(upstream.chunks_exact(positions)) {
            *gb += plane.iter().sum::<f64>();
        }
    }
    if let Some(grad_input) = grad_input {
        scratch.cols.clear();
        scratch.cols.resize(patch * positions, 0.0);
        gemm(
            patch,
            g.out_channels,
            positions,
            kernels,
            true,
            upstream,
            false,
            &mut scratch.cols,
            0.0,
        );
        col2im_add(g, &scratch.cols, grad_input);
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(t.shape())
        .map_err(|_| Error::shape(format!("{what}: expected [C,H,W], got {:?}", t.shape())))
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(t.shape()).map_err(|_| {
        Error::shape(format!(
            "{what}: expected [C_out,C_in,kH,kW], got {:?}",
            t.shape()
        ))
    })
}

/// Cross-correlate `input` `[C_in,H,W]` with `kernels` `[C_out,C_in,kH,kW]`,
/// adding `bias[c]` to output channel `c`.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(
        dims3(input, "conv input")?,
        dims4(kernels, "conv kernels")?,
        stride,
        pad,
    )?;
    if bias.len() != g.out_channels {
        return Err(Error::shape(format!(
            "conv: bias has {} entries for {} output channels",
            bias.len(),
            g.out_channels
        )));
    }
    let mut out = Tensor::zeros(g.output_shape());
    conv2d_forward_into(
        &g,
        input.data(),
        kernels.data(),
        bias.data(),
        out.data_mut(),
        &mut ConvScratch::default(),
    );
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    upstream: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads> {
    let g = ConvGeometry::new(
        dims3(input, "conv input")?,
        dims4(kernels, "conv kernels")?,
        stride,
        pad,
    )?;
    if upstream.shape() != g.output_shape() {
        return Err(Error::shape(format!(
            "conv backward: upstream {:?} does not match forward output {:?}",
            upstream.shape(),
            g.output_shape()
        )));
    }
    let mut grads = Conv2dGrads {
        input: Tensor::zeros(g.input_shape()),
        kernels: Tensor::zeros(g.kernel_shape()),
        bias: Tensor::zeros([g.out_channels]),
    };
    conv2d_backward_into(
        &g,
        upstream.data(),
        input.data(),
        kernels.data(),
        Some(grads.input.data_mut()),
        Some((grads.kernels.data_mut(), grads.bias.data_mut())),
        &mut ConvScratch::default(),
    );
    Ok(grads)
}
