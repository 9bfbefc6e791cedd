use super::{gemm, Tensor};
use crate::error::{Error, Result};

fn check_dense(input_len: usize, weight: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    let [k, d] = <[usize; 2]>::try_from(weight.shape())
        .map_err(|_| Error::shape(format!("dense: weight must be [K,D], got {:?}", weight.shape())))?;
    if d != input_len {
        return Err(Error::shape(format!(
            "dense: input has {input_len} elements, weight expects {d}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != k {
            return Err(Error::shape(format!("dense: bias has {} entries, expected {k}", b.len())));
        }
    }
    Ok((k, d))
}

/// `W·x + b` on the flattened input.
pub fn dense_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (k, d) = check_dense(input.len(), weight, Some(bias))?;
    let mut out = Tensor::zeros([k]);
    dense_forward_batch(1, d, k, input.data(), weight.data(), bias.data(), out.data_mut());
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(upstream: &Tensor, input: &Tensor, weight: &Tensor) -> Result<DenseGrads> {
    let (k, d) = check_dense(input.len(), weight, None)?;
    if upstream.len() != k {
        return Err(Error::shape(format!(
            "dense backward: upstream has {} entries, expected {k}",
            upstream.len()
        )));
    }
    let mut grads = DenseGrads {
        input: Tensor::zeros(input.shape()),
        weight: Tensor::zeros([k, d]),
        bias: Tensor::zeros([k]),
    };
    dense_backward_batch(
        1,
        d,
        k,
        upstream.data(),
        input.data(),
        weight.data(),
        Some(grads.input.data_mut()),
        Some((grads.weight.data_mut(), grads.bias.data_mut())),
    );
    Ok(grads)
}

/// Rows of `input` (`n x d`) mapped to rows of `out` (`n x k`).
pub(crate) fn dense_forward_batch(
    n: usize,
    d: usize,
    k: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    gemm(n, d, k, input, false, weight, true, out, 0.0);
    for row in out.chunks_exact_mut(k) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Parameter gradients accumulate; the input gradient is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward_batch(
    n: usize,
    d: usize,
    k: usize,
    upstream: &[f64],
    input: &[f64],
    weight: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_params: Option<(&mut [f64], &mut [f64])>,
) {
    if let Some((gw, gb)) = grad_params {
        gemm(k, n, d, upstream, true, input, false, gw, 1.0);
        for row in upstream.chunks_exact(k) {
            for (b, u) in gb.iter_mut().zip(row) {
                *b += u;
            }
        }
    }
    if let Some(gi) = grad_input {
        gemm(n, k, d, upstream, false, weight, false, gi, 0.0);
    }
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `upstream` where the cached input is strictly positive.
pub fn relu_backward(upstream: &Tensor, cached_input: &Tensor) -> Result<Tensor> {
    if upstream.shape() != cached_input.shape() {
        return Err(Error::shape(format!(
            "relu backward: {:?} vs {:?}",
            upstream.shape(),
            cached_input.shape()
        )));
    }
    let data = upstream
        .data()
        .iter()
        .zip(cached_input.data())
        .map(|(&u, &x)| if x > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(upstream.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_bias_only() {
        let x = Tensor::new([3], vec![1.5, -2.0, 0.25]).unwrap();
        let eye = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros([3])).unwrap(), x);

        let b = Tensor::new([2], vec![0.5, -1.0]).unwrap();
        let out = dense_forward(&x, &Tensor::zeros([2, 3]), &b).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn flattens_input_and_checks_width() {
        let x = Tensor::full([2, 2, 2], 1.0);
        let w = Tensor::full([1, 8], 1.0);
        assert_eq!(dense_forward(&x, &w, &Tensor::zeros([1])).unwrap().data(), &[8.0]);
        let w = Tensor::full([1, 7], 1.0);
        assert!(matches!(
            dense_forward(&x, &w, &Tensor::zeros([1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_shapes() {
        let x = Tensor::full([2, 2], 1.0);
        let w = Tensor::full([3, 4], 0.5);
        let g = dense_backward(&Tensor::full([3], 1.0), &x, &w).unwrap();
        assert_eq!(g.input.shape(), &[2, 2]);
        assert_eq!(g.input.data(), &[1.5; 4]);
        assert_eq!(g.weight.data(), &[1.0; 12]);
        assert_eq!(g.bias.data(), &[1.0; 3]);
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new([3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let up = Tensor::full([3], 5.0);
        assert_eq!(relu_backward(&up, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
        assert!(relu_backward(&Tensor::zeros([2]), &x).is_err());
    }
}
