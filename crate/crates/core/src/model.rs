//! Forecasting networks behind one interface: the attention-driven
//! spatio-temporal model, its ablation without the attention block, and a
//! two-layer fully connected baseline.
//!
//! Spatio-temporal layout: `blocks × (TCN layers → graph conv)` followed by
//! a linear head on the final step's channels, emitting `T·P` values per
//! node.
//!
//! Parameter count for the graph variants, with `k` taps, width `C`, `D`
//! dilations per block, `B` blocks and `Γ` hops:
//!
//! ```text
//! TCN   2·k·P·C + (B·D − 1)·2·k·C²
//! GCN   B·(Γ+1)·C²
//! head  C·T·P + T·P
//! TAB   2·(P+L')·d_e (+ d_e when d_e > 1)      rcdgcn only
//! ```
//!
//! and for the dense baseline `QNP·H + H + H·TNP + TNP`.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;

use crate::dataset::{to_node_major, StateWindow};
use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::layers::{gated_tcn, graph_conv, Activation, GcnLayerParams, TcnLayerParams};
use crate::rng;
use crate::scalar::Scalar;
use crate::tab::{self, Attention, AttentionMode, TabParams};
use crate::tensor::{RowSupport, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Learned traffic attention.
    Rcdgcn,
    /// Same stack with fixed uniform ring propagation.
    RcdgcnR,
    /// Two-layer fully connected network.
    Fcn,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rcdgcn => "rcdgcn",
            Variant::RcdgcnR => "rcdgcn_r",
            Variant::Fcn => "fcn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rcdgcn" => Some(Variant::Rcdgcn),
            "rcdgcn_r" => Some(Variant::RcdgcnR),
            "fcn" => Some(Variant::Fcn),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture and shape hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyper {
    pub n_nodes: usize,
    /// History length Q.
    pub q: usize,
    /// Forecast horizon T.
    pub horizon: usize,
    /// State channels P.
    pub state_channels: usize,
    /// Expanded capacity-feature width L'.
    pub feature_width: usize,
    /// Highest hop ring Γ.
    pub hops: usize,
    /// Attention embedding width d_e.
    pub embed_width: usize,
    /// Hidden channels C.
    pub width: usize,
    /// Dilation of each TCN layer inside a block.
    pub dilations: Vec<usize>,
    /// Kernel taps K+1.
    pub taps: usize,
    pub blocks: usize,
    pub fcn_hidden: usize,
    pub attention: AttentionMode,
    /// One attention set per input step instead of the last step only.
    pub per_step_attention: bool,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            n_nodes: 1,
            q: 12,
            horizon: 3,
            state_channels: 1,
            feature_width: 0,
            hops: 3,
            embed_width: 8,
            width: 32,
            dilations: vec![1, 2],
            taps: 2,
            blocks: 2,
            fcn_hidden: 256,
            attention: AttentionMode::PerRing,
            per_step_attention: false,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("n_nodes".into(), self.n_nodes.to_string()),
            ("q".into(), self.q.to_string()),
            ("horizon".into(), self.horizon.to_string()),
            ("state_channels".into(), self.state_channels.to_string()),
            ("feature_width".into(), self.feature_width.to_string()),
            ("hops".into(), self.hops.to_string()),
            ("embed_width".into(), self.embed_width.to_string()),
            ("width".into(), self.width.to_string()),
            ("dilations".into(), list(&self.dilations)),
            ("taps".into(), self.taps.to_string()),
            ("blocks".into(), self.blocks.to_string()),
            ("fcn_hidden".into(), self.fcn_hidden.to_string()),
            ("attention".into(), self.attention.as_str().into()),
            ("per_step_attention".into(), self.per_step_attention.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("hyper key {k} missing")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Checkpoint(format!("hyper {k} = {v:?} unparsable")))
        }
        let dilations = get("dilations")?
            .split(',')
            .map(|d| num("dilations", d))
            .collect::<Result<_>>()?;
        Ok(Self {
            n_nodes: num("n_nodes", get("n_nodes")?)?,
            q: num("q", get("q")?)?,
            horizon: num("horizon", get("horizon")?)?,
            state_channels: num("state_channels", get("state_channels")?)?,
            feature_width: num("feature_width", get("feature_width")?)?,
            hops: num("hops", get("hops")?)?,
            embed_width: num("embed_width", get("embed_width")?)?,
            width: num("width", get("width")?)?,
            dilations,
            taps: num("taps", get("taps")?)?,
            blocks: num("blocks", get("blocks")?)?,
            fcn_hidden: num("fcn_hidden", get("fcn_hidden")?)?,
            attention: AttentionMode::parse(get("attention")?)
                .ok_or_else(|| Error::Checkpoint("unknown attention mode".into()))?,
            per_step_attention: num("per_step_attention", get("per_step_attention")?)?,
            seed: num("seed", get("seed")?)?,
        })
    }

    /// History steps the last output depends on:
    /// `1 + blocks·Σ d·(taps−1)`.
    pub fn receptive_field(&self) -> usize {
        1 + self.blocks * self.dilations.iter().map(|d| d * (self.taps - 1)).sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_nodes == 0 || self.q == 0 || self.horizon == 0 || self.state_channels == 0 {
            return bad("n_nodes, q, horizon and state_channels must be positive");
        }
        if self.width == 0 || self.taps == 0 || self.blocks == 0 || self.fcn_hidden == 0 || self.embed_width == 0 {
            return bad("width, taps, blocks, fcn_hidden and embed_width must be positive");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad("dilations must be a non-empty list of positive integers");
        }
        Ok(())
    }
}

/// One temporal-then-spatial block.
#[derive(Clone, Debug, PartialEq)]
pub struct StBlock<T> {
    pub tcn: Vec<TcnLayerParams<T>>,
    pub gcn: GcnLayerParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Net<T> {
    Graph {
        tab: Option<TabParams<T>>,
        blocks: Vec<StBlock<T>>,
        /// `[C, T·P]`.
        head_w: T,
        /// `[T·P]`.
        head_b: T,
    },
    Dense {
        w1: T,
        b1: T,
        w2: T,
        b2: T,
    },
}

/// A network with its tensors stored as `T`, either concrete weights
/// ([`ModelParams`]) or tape variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub variant: Variant,
    pub hyper: Hyper,
    pub net: Net<T>,
}

pub type ModelParams<S> = Model<Tensor<S>>;

impl<T> Model<T> {
    /// Maps every tensor, visiting in a fixed, named order.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<Model<U>> {
        let net = match &self.net {
            Net::Graph {
                tab,
                blocks,
                head_w,
                head_b,
            } => Net::Graph {
                tab: match tab {
                    Some(t) => Some(t.try_map("tab", &mut f)?),
                    None => None,
                },
                blocks: blocks
                    .iter()
                    .enumerate()
                    .map(|(b, blk)| {
                        Ok(StBlock {
                            tcn: blk
                                .tcn
                                .iter()
                                .enumerate()
                                .map(|(l, p)| p.try_map(&format!("block{b}.tcn{l}"), &mut f))
                                .collect::<Result<_>>()?,
                            gcn: blk.gcn.try_map(&format!("block{b}.gcn"), &mut f)?,
                        })
                    })
                    .collect::<Result<_>>()?,
                head_w: f("head.w", head_w)?,
                head_b: f("head.b", head_b)?,
            },
            Net::Dense { w1, b1, w2, b2 } => Net::Dense {
                w1: f("fc1.w", w1)?,
                b1: f("fc1.b", b1)?,
                w2: f("fc2.w", w2)?,
                b2: f("fc2.b", b2)?,
            },
        };
        Ok(Model {
            variant: self.variant,
            hyper: self.hyper.clone(),
            net,
        })
    }

    /// Same order as [`Model::try_map`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        match &mut self.net {
            Net::Graph {
                tab,
                blocks,
                head_w,
                head_b,
            } => {
                if let Some(t) = tab {
                    t.for_each_mut("tab", &mut f);
                }
                for (b, blk) in blocks.iter_mut().enumerate() {
                    for (l, p) in blk.tcn.iter_mut().enumerate() {
                        p.for_each_mut(&format!("block{b}.tcn{l}"), &mut f);
                    }
                    blk.gcn.for_each_mut(&format!("block{b}.gcn"), &mut f);
                }
                f("head.w", head_w);
                f("head.b", head_b);
            }
            Net::Dense { w1, b1, w2, b2 } => {
                f("fc1.w", w1);
                f("fc1.b", b1);
                f("fc2.w", w2);
                f("fc2.b", b2);
            }
        }
    }

    pub fn tab(&self) -> Option<&TabParams<T>> {
        match &self.net {
            Net::Graph { tab, .. } => tab.as_ref(),
            Net::Dense { .. } => None,
        }
    }

    pub fn tab_mut(&mut self) -> Option<&mut TabParams<T>> {
        match &mut self.net {
            Net::Graph { tab, .. } => tab.as_mut(),
            Net::Dense { .. } => None,
        }
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Fan-in uniform initialization `U(−1/√fan_in, 1/√fan_in)` from the
    /// seeded `init` stream.
    pub fn init(variant: Variant, hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let h = &hyper;
        let mut r = rng::named(seed, "init");
        let mut uniform = |shape: &[usize], fan_in: usize| -> Tensor<S> {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| S::lit(r.random_range(-bound..=bound))).collect();
            Tensor::new(shape.to_vec(), data).expect("shape product")
        };
        let out = h.horizon * h.state_channels;
        let net = match variant {
            Variant::Fcn => {
                let inp = h.q * h.n_nodes * h.state_channels;
                let outp = h.n_nodes * out;
                Net::Dense {
                    w1: uniform(&[inp, h.fcn_hidden], inp),
                    b1: uniform(&[h.fcn_hidden], inp),
                    w2: uniform(&[h.fcn_hidden, outp], h.fcn_hidden),
                    b2: uniform(&[outp], h.fcn_hidden),
                }
            }
            Variant::Rcdgcn | Variant::RcdgcnR => {
                let tab = (variant == Variant::Rcdgcn).then(|| {
                    let f = h.state_channels + h.feature_width;
                    TabParams {
                        w_src: uniform(&[f, h.embed_width], f),
                        w_dst: uniform(&[f, h.embed_width], f),
                        proj: (h.embed_width > 1).then(|| uniform(&[h.embed_width], h.embed_width)),
                    }
                });
                let mut c_in = h.state_channels;
                let mut blocks = Vec::with_capacity(h.blocks);
                for _ in 0..h.blocks {
                    let tcn = h
                        .dilations
                        .iter()
                        .map(|&d| {
                            let fan = h.taps * c_in;
                            let p = TcnLayerParams {
                                w1: uniform(&[h.taps, c_in, h.width], fan),
                                w2: uniform(&[h.taps, c_in, h.width], fan),
                                dilation: d,
                            };
                            c_in = h.width;
                            p
                        })
                        .collect();
                    let gcn = GcnLayerParams {
                        w: (0..=h.hops).map(|_| uniform(&[h.width, h.width], h.width)).collect(),
                    };
                    blocks.push(StBlock { tcn, gcn });
                }
                Net::Graph {
                    tab,
                    blocks,
                    head_w: uniform(&[h.width, out], h.width),
                    head_b: uniform(&[out], h.width),
                }
            }
        };
        Ok(Model { variant, hyper, net })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.clone().for_each_mut(|_, t| n += t.len());
        n
    }

    /// Closed-form parameter count (see module docs).
    pub fn expected_param_count(variant: Variant, h: &Hyper) -> usize {
        let tp = h.horizon * h.state_channels;
        match variant {
            Variant::Fcn => {
                let inp = h.q * h.n_nodes * h.state_channels;
                let outp = h.n_nodes * tp;
                inp * h.fcn_hidden + h.fcn_hidden + h.fcn_hidden * outp + outp
            }
            Variant::Rcdgcn | Variant::RcdgcnR => {
                let (k, c, p) = (h.taps, h.width, h.state_channels);
                let layers = h.blocks * h.dilations.len();
                let tcn = 2 * k * p * c + (layers - 1) * 2 * k * c * c;
                let gcn = h.blocks * (h.hops + 1) * c * c;
                let head = c * tp + tp;
                let tab = if variant == Variant::Rcdgcn {
                    TabParams::<Tensor<S>>::param_count(h.state_channels + h.feature_width, h.embed_width)
                } else {
                    0
                };
                tcn + gcn + head + tab
            }
        }
    }

    /// Puts every tensor on `tape`, tracked for gradients when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> Result<Model<Var<'t, S>>> {
        self.try_map(|_, t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
    }

    /// Flat copies of every tensor, in visiting order.
    pub fn flat(&self) -> Vec<(String, Tensor<S>)> {
        let mut v = Vec::new();
        self.clone().for_each_mut(|name, t| v.push((name.to_string(), t.clone())));
        v
    }

    /// Normalized prediction `[T, N, P]` for one window.
    pub fn predict(&self, ctx: &GraphContext, w: &StateWindow) -> Result<ndarray::Array3<f64>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false)?;
        let out = forward(&vars, ctx, w)?;
        let m = out.value();
        let (n, tp) = m.dims2();
        let arr = ndarray::Array2::from_shape_vec((n, tp), m.to_f64()).expect("dims2");
        Ok(crate::dataset::from_node_major(&arr, self.hyper.horizon, self.hyper.state_channels))
    }

    /// Effective per-ring propagation matrices `[N, N]` (restricted to each
    /// ring) for one window; the last input step when attention is per step.
    pub fn attention(&self, ctx: &GraphContext, w: &StateWindow) -> Result<Vec<Tensor<f64>>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false)?;
        let att = attention_for(&vars, ctx, w, w.q() - 1)?;
        let n = ctx.n;
        att.iter()
            .map(|a| {
                let m = a.matrix.value();
                let last = m.len() / (n * n) - 1;
                let block = Tensor::new(vec![n, n], m.data()[last * n * n..].to_vec())?;
                Ok(tab::restrict(&block, &a.support).cast())
            })
            .collect()
    }
}

/// Graph-derived masks shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub n: usize,
    /// Ring supports for orders `0..=Γ`.
    pub rings: Vec<Arc<RowSupport>>,
    /// Union of all rings.
    pub union: Arc<RowSupport>,
    /// Row-normalized ring masks for the ablation.
    pub uniform: Vec<Tensor<f64>>,
}

impl GraphContext {
    pub fn new(graph: &RoadGraph, hops: usize) -> Self {
        let n = graph.n();
        let masks = graph.hop_masks(hops);
        let rings: Vec<Arc<RowSupport>> = masks.iter().map(|m| m.support()).collect();
        let mut union = vec![false; n * n];
        for m in &masks {
            for (u, &b) in union.iter_mut().zip(m.mask()) {
                *u |= b;
            }
        }
        let uniform = rings.iter().map(|r| tab::uniform_attention(r)).collect();
        Self {
            n,
            rings,
            union: Arc::new(RowSupport::from_mask(n, n, &union).expect("square")),
            uniform,
        }
    }
}

fn check_window<T>(m: &Model<T>, ctx: &GraphContext, w: &StateWindow) -> Result<()> {
    let h = &m.hyper;
    let (q, n, p) = w.x.dim();
    let zf = w.z.dim().2;
    if q != h.q || n != h.n_nodes || p != h.state_channels || ctx.n != n {
        return Err(Error::dim("forward window", &[q, n, p], &[h.q, h.n_nodes, h.state_channels]));
    }
    if m.variant == Variant::Rcdgcn && zf != h.feature_width {
        return Err(Error::dim("forward features", &[zf], &[h.feature_width]));
    }
    if m.variant != Variant::Fcn && ctx.rings.len() != h.hops + 1 {
        return Err(Error::dim("forward hops", &[ctx.rings.len()], &[h.hops + 1]));
    }
    Ok(())
}

/// Attention sets for steps `first..Q` (per-step mode) or the last step.
fn attention_for<'t, S: Scalar>(
    m: &Model<Var<'t, S>>,
    ctx: &GraphContext,
    w: &StateWindow,
    first: usize,
) -> Result<Vec<Attention<'t, S>>> {
    check_window(m, ctx, w)?;
    let tape = match &m.net {
        Net::Graph { head_w, .. } => head_w.tape(),
        Net::Dense { .. } => return Err(Error::Config("dense model has no attention".into())),
    };
    match m.tab() {
        None => ctx
            .rings
            .iter()
            .zip(&ctx.uniform)
            .map(|(r, u)| {
                Ok(Attention {
                    matrix: tape.constant(u.cast())?,
                    support: Arc::clone(r),
                })
            })
            .collect(),
        Some(tab_params) => {
            let (q, n, p) = w.x.dim();
            let l = w.z.dim().2;
            let steps: Vec<usize> = if m.hyper.per_step_attention { (first..q).collect() } else { vec![q - 1] };
            let mut data = Vec::with_capacity(steps.len() * n * (p + l));
            for &t in &steps {
                for k in 0..n {
                    data.extend((0..p).map(|c| S::lit(w.x[[t, k, c]])));
                    data.extend((0..l).map(|c| S::lit(w.z[[t, k, c]])));
                }
            }
            let feats = tape.constant(Tensor::new(vec![steps.len() * n, p + l], data)?)?;
            tab::tab_forward(feats, tab_params, &ctx.rings, &ctx.union, m.hyper.attention)
        }
    }
}

/// Forward pass returning the normalized prediction as `[N, T·P]`
/// (node-major, see [`crate::dataset::to_node_major`]).
pub fn forward<'t, S: Scalar>(m: &Model<Var<'t, S>>, ctx: &GraphContext, w: &StateWindow) -> Result<Var<'t, S>> {
    check_window(m, ctx, w)?;
    let h = &m.hyper;
    let (q, n, p) = w.x.dim();
    let x_data: Vec<S> = w.x.iter().map(|&v| S::lit(v)).collect();
    match &m.net {
        Net::Dense { w1, b1, w2, b2 } => {
            let tape = w1.tape();
            let x = tape.constant(Tensor::new(vec![1, q * n * p], x_data)?)?;
            let hidden = x.matmul(*w1)?.add_row(*b1)?.relu()?;
            hidden.matmul(*w2)?.add_row(*b2)?.reshape(&[n, h.horizon * p])
        }
        Net::Graph {
            blocks,
            head_w,
            head_b,
            ..
        } => {
            let tape = head_w.tape();
            // Only the last step reaches the head, and it only sees the
            // final `receptive_field` steps of history.
            let r = h.receptive_field().min(q);
            let first = q - r;
            let att = attention_for(m, ctx, w, first)?;
            let data = x_data[first * n * p..].to_vec();
            let mut x = tape.constant(Tensor::new(vec![r * n, p], data)?)?;
            for (b, blk) in blocks.iter().enumerate() {
                for layer in &blk.tcn {
                    x = gated_tcn(x, layer, n)?;
                }
                if b + 1 == blocks.len() {
                    x = x.slice_rows((r - 1) * n, n)?;
                    x = graph_conv(x, &last_step(&att, n)?, &blk.gcn, Activation::Relu)?;
                } else {
                    x = graph_conv(x, &att, &blk.gcn, Activation::Relu)?;
                }
            }
            x.matmul(*head_w)?.add_row(*head_b)
        }
    }
}

fn last_step<'t, S: Scalar>(att: &[Attention<'t, S>], n: usize) -> Result<Vec<Attention<'t, S>>> {
    att.iter()
        .map(|a| {
            let shape = a.matrix.shape();
            let matrix = if shape.len() == 3 {
                a.matrix.reshape(&[shape[0] * n, n])?.slice_rows((shape[0] - 1) * n, n)?
            } else {
                a.matrix
            };
            Ok(Attention {
                matrix,
                support: Arc::clone(&a.support),
            })
        })
        .collect()
}

/// Mean squared error between the forward output and the window target.
pub fn window_loss<'t, S: Scalar>(m: &Model<Var<'t, S>>, ctx: &GraphContext, w: &StateWindow) -> Result<Var<'t, S>> {
    let pred = forward(m, ctx, w)?;
    let target = to_node_major(w.y.view());
    let (rows, cols) = target.dim();
    let t = Tensor::new(vec![rows, cols], target.iter().map(|&v| S::lit(v)).collect())?;
    let tape = pred.tape();
    crate::train::mse_loss(pred, tape.constant(t)?)
}
