//! Structural properties of the assembled networks and their checkpoints.

use std::sync::Arc;

use ndarray::Array3;
use rand::Rng as _;
use rcdgcn::checkpoint::Checkpoint;
use rcdgcn::dataset::StateWindow;
use rcdgcn::graph::{RoadGraph, StaticAttrs};
use rcdgcn::layers::{gated_tcn, graph_conv, Activation};
use rcdgcn::model::{forward, GraphContext, Hyper, ModelParams, Net, Variant};
use rcdgcn::rng::{self, Rng};
use rcdgcn::synth::random_network;
use rcdgcn::tab::{Attention, AttentionMode};
use rcdgcn::tensor::{Tape, Tensor};

fn window(r: &mut Rng, q: usize, n: usize, t: usize, l: usize) -> StateWindow {
    StateWindow {
        x: Array3::from_shape_fn((q, n, 1), |_| r.random_range(0.0..1.0)),
        z: Array3::from_shape_fn((q, n, l), |_| r.random_range(0.0..1.0)),
        y: Array3::from_shape_fn((t, n, 1), |_| r.random_range(0.0..1.0)),
        t0: 0,
    }
}

fn hyper(n: usize, l: usize) -> Hyper {
    Hyper {
        n_nodes: n,
        q: 12,
        horizon: 3,
        feature_width: l,
        hops: 2,
        embed_width: 1,
        width: 6,
        fcn_hidden: 16,
        ..Hyper::default()
    }
}

#[test]
fn output_shapes_across_hyper_parameters() {
    let mut r = rng::rng(20);
    for case in 0..20 {
        let n = r.random_range(1..8);
        let l = r.random_range(1..5);
        let h = Hyper {
            n_nodes: n,
            q: r.random_range(1..14),
            horizon: r.random_range(1..5),
            feature_width: l,
            hops: r.random_range(0..4),
            embed_width: r.random_range(1..4),
            width: r.random_range(1..8),
            dilations: (0..r.random_range(1..4)).map(|_| r.random_range(1..4)).collect(),
            taps: r.random_range(1..4),
            blocks: r.random_range(1..3),
            fcn_hidden: r.random_range(1..10),
            attention: if case % 2 == 0 { AttentionMode::PerRing } else { AttentionMode::Shared },
            per_step_attention: case % 3 == 0,
            ..Hyper::default()
        };
        let g = random_network(n, 0.3, 3, case).unwrap();
        let ctx = GraphContext::new(&g, h.hops);
        let w = window(&mut r, h.q, n, h.horizon, l);
        for v in [Variant::Rcdgcn, Variant::RcdgcnR, Variant::Fcn] {
            let m = ModelParams::<f64>::init(v, h.clone(), case).unwrap();
            assert_eq!(m.param_count(), ModelParams::<f64>::expected_param_count(v, &h));
            let y = m.predict(&ctx, &w).unwrap();
            assert_eq!(y.dim(), (h.horizon, n, 1), "{v} {h:?}");
            assert!(y.iter().all(|v| v.is_finite()));
        }
    }
}

fn without_tab(m: &ModelParams<f64>) -> ModelParams<f64> {
    let mut out = m.clone();
    out.variant = Variant::RcdgcnR;
    if let Net::Graph { tab, .. } = &mut out.net {
        *tab = None;
    }
    out
}

fn single_node() -> RoadGraph {
    let attrs = StaticAttrs {
        road_type: 1,
        length_m: 500.0,
        lanes: 3,
        aadt: 50_000.0,
    };
    RoadGraph::new(vec!["a".into()], vec![attrs], vec![]).unwrap()
}

#[test]
fn single_node_attention_is_trivial() {
    let mut r = rng::rng(21);
    let h = hyper(1, 3);
    let ctx = GraphContext::new(&single_node(), h.hops);
    let full = ModelParams::<f64>::init(Variant::Rcdgcn, h, 3).unwrap();
    let ablated = without_tab(&full);
    let mut zeroed = full.clone();
    let tab = zeroed.tab_mut().unwrap();
    tab.w_src.data_mut().fill(0.0);
    tab.w_dst.data_mut().fill(0.0);
    for _ in 0..5 {
        let w = window(&mut r, 12, 1, 3, 3);
        let a = full.predict(&ctx, &w).unwrap();
        assert_eq!(a, ablated.predict(&ctx, &w).unwrap());
        assert_eq!(a, zeroed.predict(&ctx, &w).unwrap());
    }
}

#[test]
fn zero_attention_weights_give_uniform_masks() {
    let mut r = rng::rng(22);
    let g = random_network(9, 0.5, 3, 4).unwrap();
    for mode in [AttentionMode::PerRing, AttentionMode::Shared] {
        let h = Hyper {
            embed_width: 3,
            attention: mode,
            ..hyper(9, 4)
        };
        let ctx = GraphContext::new(&g, h.hops);
        let mut m = ModelParams::<f64>::init(Variant::Rcdgcn, h, 5).unwrap();
        let tab = m.tab_mut().unwrap();
        tab.w_src.data_mut().fill(0.0);
        tab.w_dst.data_mut().fill(0.0);
        let w = window(&mut r, 12, 9, 3, 4);
        let att = m.attention(&ctx, &w).unwrap();
        match mode {
            AttentionMode::PerRing => {
                for (a, u) in att.iter().zip(&ctx.uniform) {
                    for (x, y) in a.data().iter().zip(u.data()) {
                        assert!((x - y).abs() < 1e-15);
                    }
                }
            }
            AttentionMode::Shared => {
                // Uniform over the union of all rings.
                for i in 0..9 {
                    let deg = ctx.union.row(i).len() as f64;
                    for a in &att {
                        for &j in ctx.union.row(i) {
                            let v = a.at2(i, j);
                            assert!(v == 0.0 || (v - 1.0 / deg).abs() < 1e-15);
                        }
                    }
                }
            }
        }
        // The ablation with the same weights predicts identically in per-ring mode.
        if mode == AttentionMode::PerRing {
            assert_eq!(m.predict(&ctx, &w).unwrap(), without_tab(&m).predict(&ctx, &w).unwrap());
        }
    }
}

/// Runs every block over all `Q` steps and reads the last one.
fn full_stack_reference(m: &ModelParams<f64>, ctx: &GraphContext, w: &StateWindow) -> Vec<f64> {
    let tape = Tape::new();
    let vars = m.bind(&tape, false).unwrap();
    let (q, n, _) = w.x.dim();
    let dense = m.attention(ctx, w).unwrap();
    let att: Vec<Attention<f64>> = dense
        .iter()
        .zip(&ctx.rings)
        .map(|(a, s)| Attention {
            matrix: tape.constant(a.clone()).unwrap(),
            support: Arc::clone(s),
        })
        .collect();
    let Net::Graph { blocks, head_w, head_b, .. } = &vars.net else {
        panic!("graph model expected")
    };
    let mut x = tape.constant(Tensor::new(vec![q * n, 1], w.x.iter().copied().collect()).unwrap()).unwrap();
    for blk in blocks {
        for layer in &blk.tcn {
            x = gated_tcn(x, layer, n).unwrap();
        }
        x = graph_conv(x, &att, &blk.gcn, Activation::Relu).unwrap();
    }
    let last = x.slice_rows((q - 1) * n, n).unwrap();
    let out = last.matmul(*head_w).unwrap().add_row(*head_b).unwrap();
    let v = out.value().data().to_vec();
    v
}

#[test]
fn truncated_history_matches_full_stack() {
    let mut r = rng::rng(23);
    let g = random_network(7, 0.4, 3, 6).unwrap();
    for variant in [Variant::Rcdgcn, Variant::RcdgcnR] {
        let h = hyper(7, 2);
        assert!(h.receptive_field() < h.q);
        let ctx = GraphContext::new(&g, h.hops);
        let m = ModelParams::<f64>::init(variant, h, 7).unwrap();
        let w = window(&mut r, 12, 7, 3, 2);
        let tape = Tape::new();
        let got = forward(&m.bind(&tape, false).unwrap(), &ctx, &w).unwrap();
        let want = full_stack_reference(&m, &ctx, &w);
        for (a, b) in got.value().data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{variant}: {a} vs {b}");
        }
    }
}

#[test]
fn history_outside_receptive_field_is_ignored() {
    let mut r = rng::rng(24);
    let g = random_network(5, 0.4, 3, 8).unwrap();
    let h = hyper(5, 2);
    let ctx = GraphContext::new(&g, h.hops);
    let m = ModelParams::<f64>::init(Variant::Rcdgcn, h.clone(), 9).unwrap();
    let w = window(&mut r, 12, 5, 3, 2);
    let mut early = w.clone();
    let cut = h.q - h.receptive_field();
    early.x.slice_mut(ndarray::s![..cut, .., ..]).fill(9.0);
    assert_eq!(m.predict(&ctx, &w).unwrap(), m.predict(&ctx, &early).unwrap());
    let mut late = w.clone();
    late.x[[cut, 0, 0]] += 1.0;
    assert_ne!(m.predict(&ctx, &w).unwrap(), m.predict(&ctx, &late).unwrap());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut r = rng::rng(25);
    let dir = tempfile::tempdir().unwrap();
    let g = random_network(6, 0.4, 3, 10).unwrap();
    for (k, variant) in [Variant::Rcdgcn, Variant::RcdgcnR, Variant::Fcn].into_iter().enumerate() {
        let h = Hyper {
            embed_width: 1 + 2 * k,
            ..hyper(6, 3)
        };
        let ctx = GraphContext::new(&g, h.hops);
        let ck = Checkpoint {
            params: ModelParams::<f64>::init(variant, h, 11 + k as u64).unwrap(),
            meta: vec![("best_epoch".into(), "4".into())],
        };
        let (p1, p2) = (dir.path().join(format!("{variant}-a.ckpt")), dir.path().join(format!("{variant}-b.ckpt")));
        ck.save(&p1).unwrap();
        let back = Checkpoint::<f64>::load(&p1).unwrap();
        back.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back.meta("best_epoch"), Some("4"));
        let w = window(&mut r, 12, 6, 3, 3);
        let (a, b) = (ck.params.predict(&ctx, &w).unwrap(), back.params.predict(&ctx, &w).unwrap());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
