//! Gated dilated causal temporal convolution and attention-weighted
//! multi-hop graph convolution.
//!
//! Sequences are laid out as `[steps·N, channels]` with row `t·N + n`, so a
//! time shift of `s` steps is a row shift of `s·N`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tab::Attention;
use crate::tensor::{Tensor, Var};

/// One gated TCN layer: `h = tanh(W₁ ∗ x) ⊙ σ(W₂ ∗ x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TcnLayerParams<T> {
    /// `[taps, C_in, C_out]`.
    pub w1: T,
    /// `[taps, C_in, C_out]`.
    pub w2: T,
    pub dilation: usize,
}

impl<T> TcnLayerParams<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<TcnLayerParams<U>> {
        Ok(TcnLayerParams {
            w1: f(&format!("{prefix}.w1"), &self.w1)?,
            w2: f(&format!("{prefix}.w2"), &self.w2)?,
            dilation: self.dilation,
        })
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.w2"), &mut self.w2);
    }
}

/// `H = act(Σ_γ Ã_γ · X · W_γ)`, one weight matrix per hop ring.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnLayerParams<T> {
    /// `Γ + 1` matrices `[C_in, C_out]`.
    pub w: Vec<T>,
}

impl<T> GcnLayerParams<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<GcnLayerParams<U>> {
        Ok(GcnLayerParams {
            w: self
                .w
                .iter()
                .enumerate()
                .map(|(g, w)| f(&format!("{prefix}.w{g}"), w))
                .collect::<Result<_>>()?,
        })
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (g, w) in self.w.iter_mut().enumerate() {
            f(&format!("{prefix}.w{g}"), w);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// `y(t) = Σ_i f(i)·x(t − d·i)` with zeros before the first step.
///
/// `x` is `[Q·N, C_in]`, `kernel` is `[taps, C_in, C_out]`; the output keeps
/// all `Q` steps and never reads the future.
pub fn causal_dilated_conv<'t, S: Scalar>(x: Var<'t, S>, kernel: Var<'t, S>, dilation: usize, n_nodes: usize) -> Result<Var<'t, S>> {
    let ks = kernel.shape();
    let xs = x.shape();
    if ks.len() != 3 || xs.len() != 2 || xs[1] != ks[1] || dilation == 0 || xs[0] % n_nodes != 0 {
        return Err(Error::dim("causal_dilated_conv", &xs, &ks));
    }
    let (taps, c_in, c_out) = (ks[0], ks[1], ks[2]);
    let steps = xs[0] / n_nodes;
    let flat = kernel.reshape(&[taps * c_in, c_out])?;
    let mut acc: Option<Var<'t, S>> = None;
    for i in 0..taps {
        let lag = dilation * i;
        if lag >= steps {
            break;
        }
        let tap = flat.slice_rows(i * c_in, c_in)?;
        let shifted = if lag == 0 { x } else { x.shift_rows(lag * n_nodes)? };
        let term = shifted.matmul(tap)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(acc.expect("tap 0 always contributes"))
}

pub fn gated_tcn<'t, S: Scalar>(x: Var<'t, S>, p: &TcnLayerParams<Var<'t, S>>, n_nodes: usize) -> Result<Var<'t, S>> {
    let (s1, s2) = (p.w1.shape(), p.w2.shape());
    if s1 != s2 {
        return Err(Error::dim("gated_tcn", &s1, &s2));
    }
    let filt = causal_dilated_conv(x, p.w1, p.dilation, n_nodes)?.tanh()?;
    let gate = causal_dilated_conv(x, p.w2, p.dilation, n_nodes)?.sigmoid()?;
    filt.mul(gate)
}

/// Graph convolution over every `N`-row block of `x` (`[B·N, C_in]`).
pub fn graph_conv<'t, S: Scalar>(
    x: Var<'t, S>,
    att: &[Attention<'t, S>],
    p: &GcnLayerParams<Var<'t, S>>,
    act: Activation,
) -> Result<Var<'t, S>> {
    if att.len() != p.w.len() || att.is_empty() {
        return Err(Error::dim("graph_conv", &[att.len()], &[p.w.len()]));
    }
    let mut acc: Option<Var<'t, S>> = None;
    for (a, w) in att.iter().zip(&p.w) {
        let term = x.matmul(*w)?.mix_blocks(a.matrix, Some(&a.support))?;
        acc = Some(match acc {
            Some(s) => s.add(term)?,
            None => term,
        });
    }
    let pre = acc.expect("at least one hop");
    match act {
        Activation::Relu => pre.relu(),
        Activation::Identity => Ok(pre),
    }
}

/// Direct evaluation of the convolution for one channel sequence, used as
/// a reference in tests and docs.
pub fn conv1d_reference<S: Scalar>(x: &[S], f: &[S], dilation: usize) -> Vec<S> {
    (0..x.len())
        .map(|t| {
            f.iter()
                .enumerate()
                .filter(|(i, _)| dilation * i <= t)
                .map(|(i, &fi)| fi * x[t - dilation * i])
                .sum()
        })
        .collect()
}

/// Kernel tensor `[taps, 1, 1]` from scalar taps.
pub fn scalar_kernel<S: Scalar>(taps: &[f64]) -> Tensor<S> {
    Tensor::from_f64(&[taps.len(), 1, 1], taps).expect("non-empty kernel")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{RowSupport, Tape};
    use std::sync::Arc;

    fn conv(x: &[f64], f: &[f64], d: usize) -> Vec<f64> {
        let tape = Tape::new();
        let xv = tape.constant(Tensor::from_f64(&[x.len(), 1], x).unwrap()).unwrap();
        let k = tape.constant(scalar_kernel(f)).unwrap();
        let y = causal_dilated_conv(xv, k, d, 1).unwrap();
        let out = y.value().data().to_vec();
        out
    }

    #[test]
    fn hand_checked_convolutions() {
        assert_eq!(conv(&[1., 2., 3., 4.], &[1., 1.], 1), vec![1., 3., 5., 7.]);
        assert_eq!(conv(&[1., 2., 3., 4.], &[1., 1.], 2), vec![1., 2., 4., 6.]);
        for d in 1..4 {
            assert_eq!(conv(&[3., -1., 2., 5.], &[1., 0.], d), vec![3., -1., 2., 5.]);
        }
        assert_eq!(conv1d_reference(&[1., 2., 3., 4.], &[1., 1.], 2), vec![1., 2., 4., 6.]);
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[6, 2])).unwrap();
        let p = TcnLayerParams {
            w1: tape.param(&Tensor::zeros(&[2, 2, 3])).unwrap(),
            w2: tape.param(&Tensor::zeros(&[2, 2, 3])).unwrap(),
            dilation: 1,
        };
        let h = gated_tcn(x, &p, 2).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_graph_conv() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn2(3, 2, |i, j| (i * 2 + j) as f64 - 1.5)).unwrap();
        let sup = Arc::new(RowSupport::from_mask(3, 3, &Tensor::<f64>::eye(3).data().iter().map(|&v| v == 1.0).collect::<Vec<_>>()).unwrap());
        let att = [Attention {
            matrix: tape.constant(Tensor::eye(3)).unwrap(),
            support: sup,
        }];
        let p = GcnLayerParams {
            w: vec![tape.param(&Tensor::eye(2)).unwrap()],
        };
        let h = graph_conv(x, &att, &p, Activation::Identity).unwrap();
        assert_eq!(*h.value(), *x.value());
    }

    #[test]
    fn averaging_equal_neighbours_returns_node_value() {
        let tape = Tape::<f64>::new();
        // node 0 attends uniformly to nodes 1 and 2, which carry equal values
        let x = tape.constant(Tensor::from_f64(&[3, 1], &[9.0, 4.0, 4.0]).unwrap()).unwrap();
        let sup = Arc::new(RowSupport::from_mask(3, 3, &[false, true, true, false, false, false, false, false, false]).unwrap());
        let m = Tensor::from_f64(&[3, 3], &[0., 0.5, 0.5, 0., 0., 0., 0., 0., 0.]).unwrap();
        let att = [Attention {
            matrix: tape.constant(m).unwrap(),
            support: sup,
        }];
        let p = GcnLayerParams {
            w: vec![tape.param(&Tensor::eye(1)).unwrap()],
        };
        let h = graph_conv(x, &att, &p, Activation::Identity).unwrap();
        assert_eq!(h.value().data()[0], 4.0);
    }
}
