//! Max pooling with recorded winners, and the matching argmax unpooling.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: [usize; 3], window: usize, stride: usize) -> Result<Self> {
        let [channels, in_h, in_w] = input;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("maxpool: window and stride must be positive"));
        }
        let extent = |size: usize| -> Result<usize> {
            if window > size {
                return Err(Error::shape(format!(
                    "maxpool: window {window} larger than input extent {size}"
                )));
            }
            if (size - window) % stride != 0 {
                return Err(Error::shape(format!(
                    "maxpool: window {window}/stride {stride} does not tile extent {size}"
                )));
            }
            Ok((size - window) / stride + 1)
        };
        Ok(PoolGeometry {
            channels,
            in_h,
            in_w,
            window,
            stride,
            out_h: extent(in_h)?,
            out_w: extent(in_w)?,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.in_h, self.in_w]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.channels, self.out_h, self.out_w]
    }
}

/// Flat input index of the winning element for each pooled output, tied to
/// the forward pass that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxMap {
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    indices: Vec<usize>,
}

impl ArgmaxMap {
    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Fills `out` and `indices`. Ties go to the first maximal element in
/// row-major scan order of the window.
pub(crate) fn maxpool_forward_into(
    g: &PoolGeometry,
    input: &[f64],
    out: &mut [f64],
    indices: &mut [usize],
) {
    let mut o = 0;
    for c in 0..g.channels {
        let base = c * g.in_h * g.in_w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let y0 = oy * g.stride;
                let x0 = ox * g.stride;
                let mut best_idx = base + y0 * g.in_w + x0;
                let mut best = input[best_idx];
                for dy in 0..g.window {
                    let row = base + (y0 + dy) * g.in_w + x0;
                    for dx in 0..g.window {
                        let v = input[row + dx];
                        if v > best {
                            best = v;
                            best_idx = row + dx;
                        }
                    }
                }
                out[o] = best;
                indices[o] = best_idx;
                o += 1;
            }
        }
    }
}

pub(crate) fn maxpool_backward_into(upstream: &[f64], indices: &[usize], grad_input: &mut [f64]) {
    for (&g, &idx) in upstream.iter().zip(indices) {
        grad_input[idx] += g;
    }
}

/// Square `window`x`window` max pooling over each channel of `[C,H,W]`.
pub fn maxpool_forward(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, ArgmaxMap)> {
    let dims = <[usize; 3]>::try_from(input.shape()).map_err(|_| {
        Error::shape(format!("maxpool: expected [C,H,W], got {:?}", input.shape()))
    })?;
    let g = PoolGeometry::new(dims, window, stride)?;
    let mut out = Tensor::zeros(g.output_shape());
    let mut indices = vec![0; out.len()];
    maxpool_forward_into(&g, input.data(), out.data_mut(), &mut indices);
    Ok((
        out,
        ArgmaxMap {
            input_shape: g.input_shape(),
            output_shape: g.output_shape(),
            indices,
        },
    ))
}

/// Route each upstream value to the input element that won its window;
/// overlapping windows accumulate.
pub fn maxpool_backward(upstream: &Tensor, argmax: &ArgmaxMap, input_shape: &[usize]) -> Result<Tensor> {
    if upstream.shape() != argmax.output_shape {
        return Err(Error::shape(format!(
            "unpool: upstream {:?} does not match pooled shape {:?}",
            upstream.shape(),
            argmax.output_shape
        )));
    }
    if input_shape != argmax.input_shape {
        return Err(Error::shape(format!(
            "unpool: input shape {input_shape:?} does not match the map's {:?}",
            argmax.input_shape
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    maxpool_backward_into(upstream.data(), &argmax.indices, grad.data_mut());
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two() {
        let x = Tensor::new([1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, map) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(map.indices(), &[3]);

        let up = Tensor::new([1, 1, 1], vec![4.0]).unwrap();
        let g = maxpool_backward(&up, &map, &[1, 2, 2]).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 4.0]);

        let g = maxpool_backward(&Tensor::zeros([1, 1, 1]), &map, &[1, 2, 2]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_pick_first_in_scan_order() {
        let x = Tensor::full([2, 4, 4], 7.0);
        let (out, map) = maxpool_forward(&x, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 7.0));
        assert_eq!(map.indices(), &[0, 2, 8, 10, 16, 18, 24, 26]);
    }

    #[test]
    fn lenet_shape() {
        let (out, map) = maxpool_forward(&Tensor::zeros([20, 24, 24]), 2, 2).unwrap();
        assert_eq!(out.shape(), &[20, 12, 12]);
        assert!(map.indices().iter().all(|&i| i < 20 * 24 * 24));
    }

    #[test]
    fn overlapping_windows_accumulate() {
        // 3x3 window, stride 1 on 1x4x4: the global max wins all four windows.
        let mut x = Tensor::zeros([1, 4, 4]);
        x.data_mut()[5] = 9.0;
        let (_, map) = maxpool_forward(&x, 3, 1).unwrap();
        let g = maxpool_backward(&Tensor::full([1, 2, 2], 1.5), &map, &[1, 4, 4]).unwrap();
        assert_eq!(g.data()[5], 6.0);
        assert!((g.sum() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(maxpool_forward(&Tensor::zeros([1, 2, 2]), 3, 1).is_err());
        assert!(maxpool_forward(&Tensor::zeros([1, 5, 5]), 2, 2).is_err());
        let (_, map) = maxpool_forward(&Tensor::zeros([1, 4, 4]), 2, 2).unwrap();
        assert!(maxpool_backward(&Tensor::zeros([1, 3, 3]), &map, &[1, 4, 4]).is_err());
        assert!(maxpool_backward(&Tensor::zeros([1, 2, 2]), &map, &[1, 6, 6]).is_err());
    }
}
