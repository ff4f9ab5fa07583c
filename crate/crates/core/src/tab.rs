//! Traffic attention block.
//!
//! Each node gets a linear utility from its traffic state and capacity
//! features, once as a source and once as a destination:
//!
//! ```text
//! e[i][j] = u_src(i) + u_dst(j),   u(k) = f_k · W (· a when d_e > 1)
//! ```
//!
//! and every row of `e` is softmax-normalized over the node's neighbourhood
//! mask, as a multinomial-logit choice over downstream links. Because the
//! score is additive, `u_src(i)` is constant along row `i` and cancels in
//! the softmax; only destination utilities shape the attention.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{RowSupport, Tensor, Var};

/// Attention-block weights. Rows of `w_src`/`w_dst` follow the feature
/// vector `[x (P channels), z (L' expanded channels)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TabParams<T> {
    /// `[P + L', d_e]`.
    pub w_src: T,
    /// `[P + L', d_e]`.
    pub w_dst: T,
    /// Shared scalar projection `[d_e]`; absent when `d_e == 1`.
    pub proj: Option<T>,
}

impl<T> TabParams<T> {
    pub fn try_map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U>) -> Result<TabParams<U>> {
        Ok(TabParams {
            w_src: f(&format!("{prefix}.w_src"), &self.w_src)?,
            w_dst: f(&format!("{prefix}.w_dst"), &self.w_dst)?,
            proj: match &self.proj {
                Some(p) => Some(f(&format!("{prefix}.proj"), p)?),
                None => None,
            },
        })
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        f(&format!("{prefix}.w_src"), &mut self.w_src);
        f(&format!("{prefix}.w_dst"), &mut self.w_dst);
        if let Some(p) = &mut self.proj {
            f(&format!("{prefix}.proj"), p);
        }
    }
}

impl<S: Scalar> TabParams<Tensor<S>> {
    pub fn zeros(features: usize, d_e: usize) -> Self {
        Self {
            w_src: Tensor::zeros(&[features, d_e]),
            w_dst: Tensor::zeros(&[features, d_e]),
            proj: (d_e > 1).then(|| Tensor::filled(&[d_e], S::one())),
        }
    }

    pub fn features(&self) -> usize {
        self.w_src.shape()[0]
    }

    pub fn embed_width(&self) -> usize {
        self.w_src.shape()[1]
    }

    /// `2·(P + L')·d_e`, plus `d_e` for the projection when `d_e > 1`.
    pub fn param_count(features: usize, d_e: usize) -> usize {
        2 * features * d_e + if d_e > 1 { d_e } else { 0 }
    }
}

/// Row-normalized propagation matrix and the mask it lives on.
#[derive(Clone)]
pub struct Attention<'t, S> {
    /// `[N, N]`, or `[B, N, N]` for one matrix per input step.
    pub matrix: Var<'t, S>,
    /// Entries outside the support are zero / ignored.
    pub support: Arc<RowSupport>,
}

/// How hop rings share normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Separate softmax inside each ring; every `Ã_γ` is row-stochastic.
    PerRing,
    /// One softmax over all rings `0..=Γ`; `Ã_γ` is its restriction to ring γ.
    Shared,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::PerRing => "per_ring",
            AttentionMode::Shared => "shared",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_ring" => Some(AttentionMode::PerRing),
            "shared" => Some(AttentionMode::Shared),
            _ => None,
        }
    }
}

fn node_utility<'t, S: Scalar>(feats: Var<'t, S>, w: Var<'t, S>, proj: Option<Var<'t, S>>) -> Result<Var<'t, S>> {
    let emb = feats.matmul(w)?;
    match proj {
        Some(a) => {
            let d = a.value().len();
            emb.matmul(a.reshape(&[d, 1])?)
        }
        None => Ok(emb),
    }
}

/// Pairwise utility scores `e[i][j] = u_src(i) + u_dst(j)` for one step.
///
/// `feats` is `[N, P + L']`. Scores are returned for every pair; masking
/// happens in [`attention_matrix`], which excludes off-mask entries from the
/// normalization instead of writing a large negative sentinel.
pub fn utility_scores<'t, S: Scalar>(feats: Var<'t, S>, params: &TabParams<Var<'t, S>>) -> Result<Var<'t, S>> {
    let fs = feats.shape();
    let ws = params.w_src.shape();
    if fs.len() != 2 || fs[1] != ws[0] || params.w_dst.shape() != ws {
        return Err(Error::dim("utility_scores", &fs, &ws));
    }
    let u_src = node_utility(feats, params.w_src, params.proj)?;
    let u_dst = node_utility(feats, params.w_dst, params.proj)?;
    u_src.outer_sum(u_dst)
}

/// Masked row softmax of `e`.
pub fn attention_matrix<'t, S: Scalar>(e: Var<'t, S>, support: &Arc<RowSupport>) -> Result<Attention<'t, S>> {
    Ok(Attention {
        matrix: e.softmax_rows(support)?,
        support: Arc::clone(support),
    })
}

/// One attention matrix per hop ring, all from the same utilities.
///
/// `feats` is `[B·N, P + L']` for `B` steps; with `B > 1` each step gets its
/// own matrices (stacked `[B, N, N]`). `rings[γ]` is the ring-γ support and
/// `union` the support of all rings together.
pub fn tab_forward<'t, S: Scalar>(
    feats: Var<'t, S>,
    params: &TabParams<Var<'t, S>>,
    rings: &[Arc<RowSupport>],
    union: &Arc<RowSupport>,
    mode: AttentionMode,
) -> Result<Vec<Attention<'t, S>>> {
    let n = union.n_rows();
    let rows = feats.shape()[0];
    if rows % n != 0 {
        return Err(Error::dim("tab_forward", &feats.shape(), &[n]));
    }
    let steps = rows / n;
    let scores: Vec<Var<'t, S>> = if steps == 1 {
        vec![utility_scores(feats, params)?]
    } else {
        (0..steps)
            .map(|b| utility_scores(feats.slice_rows(b * n, n)?, params))
            .collect::<Result<_>>()?
    };
    let stack = |mats: Vec<Var<'t, S>>| -> Result<Var<'t, S>> {
        if mats.len() == 1 {
            Ok(mats[0])
        } else {
            let b = mats.len();
            Var::concat_rows(&mats)?.reshape(&[b, n, n])
        }
    };
    match mode {
        AttentionMode::PerRing => rings
            .iter()
            .map(|ring| {
                let mats = scores
                    .iter()
                    .map(|&e| e.softmax_rows(ring))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Attention {
                    matrix: stack(mats)?,
                    support: Arc::clone(ring),
                })
            })
            .collect(),
        AttentionMode::Shared => {
            let mats = scores
                .iter()
                .map(|&e| e.softmax_rows(union))
                .collect::<Result<Vec<_>>>()?;
            let shared = stack(mats)?;
            Ok(rings
                .iter()
                .map(|ring| Attention {
                    matrix: shared,
                    support: Arc::clone(ring),
                })
                .collect())
        }
    }
}

/// Row-normalized ring masks: the fixed, input-independent propagation used
/// when the attention block is ablated.
pub fn uniform_attention<S: Scalar>(support: &RowSupport) -> Tensor<S> {
    let n = support.n_rows();
    let mut t = Tensor::zeros(&[n, support.n_cols()]);
    for i in 0..n {
        let row = support.row(i);
        if row.is_empty() {
            continue;
        }
        let w = S::one() / S::lit(row.len() as f64);
        for &j in row {
            t.data_mut()[i * support.n_cols() + j] = w;
        }
    }
    t
}

/// Dense copy of an attention matrix with off-support entries zeroed.
pub fn restrict<S: Scalar>(matrix: &Tensor<S>, support: &RowSupport) -> Tensor<S> {
    let n = support.n_rows();
    let m = support.n_cols();
    let blocks = matrix.len() / (n * m);
    let mut out = Tensor::zeros(matrix.shape());
    for b in 0..blocks {
        for i in 0..n {
            for &j in support.row(i) {
                let k = b * n * m + i * m + j;
                out.data_mut()[k] = matrix.data()[k];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{RoadGraph, StaticAttrs};
    use crate::tensor::Tape;

    fn chain(n: usize) -> RoadGraph {
        let attrs = vec![
            StaticAttrs {
                road_type: 1,
                length_m: 1.0,
                lanes: 1,
                aadt: 0.0
            };
            n
        ];
        RoadGraph::new(
            (0..n).map(|i| i.to_string()).collect(),
            attrs,
            (0..n - 1).map(|i| (i, i + 1)).collect(),
        )
        .unwrap()
    }

    fn bind<'t>(tape: &'t Tape<f64>, p: &TabParams<Tensor<f64>>) -> TabParams<Var<'t, f64>> {
        p.try_map("tab", &mut |_, t| tape.param(t)).unwrap()
    }

    #[test]
    fn zero_inputs_give_zero_scores() {
        let tape = Tape::new();
        let mut p = TabParams::<Tensor<f64>>::zeros(3, 1);
        p.w_src.data_mut().copy_from_slice(&[0.3, -1.0, 2.0]);
        p.w_dst.data_mut().copy_from_slice(&[0.7, 0.1, -0.4]);
        let feats = tape.constant(Tensor::zeros(&[4, 3])).unwrap();
        let e = utility_scores(feats, &bind(&tape, &p)).unwrap();
        assert!(e.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_row_and_singleton_row() {
        let tape = Tape::new();
        let e = tape.constant(Tensor::<f64>::filled(&[2, 4], 1.7)).unwrap();
        let sup = Arc::new(RowSupport::from_mask(2, 4, &[true, true, true, true, true, false, false, false]).unwrap());
        let a = attention_matrix(e, &sup).unwrap();
        let v = a.matrix.value();
        assert!(v.data()[..4].iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(&v.data()[4..], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_hop_attention_is_identity() {
        let g = chain(4);
        let rings: Vec<_> = g.hop_masks(0).iter().map(|m| m.support()).collect();
        let tape = Tape::new();
        let p = TabParams::<Tensor<f64>>::zeros(2, 1);
        let feats = tape.constant(Tensor::from_fn2(4, 2, |i, j| (i + j) as f64)).unwrap();
        let att = tab_forward(feats, &bind(&tape, &p), &rings, &rings[0], AttentionMode::PerRing).unwrap();
        assert_eq!(att.len(), 1);
        assert_eq!(*att[0].matrix.value(), Tensor::eye(4));
    }

    #[test]
    fn uniform_attention_normalizes_rows() {
        let g = chain(3);
        let ring1 = g.hop_masks(1)[1].support();
        let u: Tensor<f64> = uniform_attention(&ring1);
        assert_eq!(u.data(), &[0., 1., 0., 0., 0., 1., 0., 0., 0.]);
    }

    #[test]
    fn param_count_formula() {
        let p = TabParams::<Tensor<f64>>::zeros(3, 1);
        assert_eq!(p.w_src.len() + p.w_dst.len(), TabParams::<Tensor<f64>>::param_count(3, 1));
        let p = TabParams::<Tensor<f64>>::zeros(3, 8);
        let extra = p.proj.as_ref().map_or(0, |t| t.len());
        assert_eq!(p.w_src.len() + p.w_dst.len() + extra, TabParams::<Tensor<f64>>::param_count(3, 8));
    }
}
