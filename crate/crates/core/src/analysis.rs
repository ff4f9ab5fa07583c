//! Post-hoc interpretability: squared-norm analysis of attention weights per
//! capacity factor, top-percentile significant links, and incident case
//! series.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::dataset::{NormalizationSpec, WindowSource};
use crate::error::{Error, Result};
use crate::model::{GraphContext, ModelParams};
use crate::scalar::Scalar;
use crate::synth::IncidentEvent;
use crate::tab::{AttentionMode, TabParams};
use crate::tensor::Tensor;
use crate::train::Forecasts;

/// Named column ranges of the attention feature vector: the state channels
/// first (`speed`), then each capacity factor.
pub fn factor_layout(norm: &NormalizationSpec) -> Vec<(String, Range<usize>)> {
    let p = norm.state.len();
    let mut out = vec![("speed".to_string(), 0..p)];
    out.extend(
        norm.feature_layout()
            .into_iter()
            .map(|(name, r)| (name, r.start + p..r.end + p)),
    );
    out
}

/// Sum of squared entries.
pub fn squared_norm<S: Scalar>(data: &[S]) -> f64 {
    data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormReport {
    /// Factor → Σ M_ij² over its source and destination weight rows.
    pub matrix: Vec<(String, f64)>,
    /// (node, factor, norm); empty when no inputs were supplied.
    pub link: Vec<(usize, String, f64)>,
}

fn rows_norm<S: Scalar>(w: &Tensor<S>, rows: Range<usize>) -> f64 {
    let d = w.shape()[1];
    squared_norm(&w.data()[rows.start * d..rows.end * d])
}

/// Squared contribution norm of one factor at one node:
/// `‖f_k[r]·W_src[r]‖² + ‖f_k[r]·W_dst[r]‖²`.
fn contribution<S: Scalar>(tab: &TabParams<Tensor<S>>, feats: &[f64], rows: &Range<usize>) -> f64 {
    let d = tab.embed_width();
    let mut total = 0.0;
    for w in [&tab.w_src, &tab.w_dst] {
        for e in 0..d {
            let u: f64 = rows.clone().map(|c| feats[c] * w.data()[c * d + e].as_f64()).sum();
            total += u * u;
        }
    }
    total
}

/// Matrix-level norms per factor and, when `inputs` holds attention inputs
/// `[N, F]` (one per analysed window), link-level norms: the squared norm of
/// each factor's utility contribution at each node, averaged over inputs.
pub fn factor_norms<S: Scalar>(
    tab: &TabParams<Tensor<S>>,
    layout: &[(String, Range<usize>)],
    inputs: &[Array2<f64>],
) -> Result<NormReport> {
    let f = tab.features();
    if let Some((name, r)) = layout.iter().find(|(_, r)| r.end > f || r.start > r.end) {
        return Err(Error::Config(format!("factor {name} spans columns {r:?} of a {f}-row weight block")));
    }
    if let Some(x) = inputs.iter().find(|x| x.ncols() != f) {
        return Err(Error::Config(format!("attention inputs have {} columns, weights {f} rows", x.ncols())));
    }
    let matrix = layout
        .iter()
        .map(|(name, r)| (name.clone(), rows_norm(&tab.w_src, r.clone()) + rows_norm(&tab.w_dst, r.clone())))
        .collect();
    let mut link = Vec::new();
    if let Some(first) = inputs.first() {
        for k in 0..first.nrows() {
            for (name, r) in layout {
                let sum: f64 = inputs
                    .iter()
                    .map(|x| contribution(tab, x.row(k).as_slice().expect("standard layout"), r))
                    .sum();
                link.push((k, name.clone(), sum / inputs.len() as f64));
            }
        }
    }
    Ok(NormReport { matrix, link })
}

/// Last-step attention inputs `[N, P + L']` for every window of a source.
pub fn attention_inputs(src: &WindowSource, q: usize, t: usize, stride: usize) -> Vec<Array2<f64>> {
    src.windows(q, t, stride)
        .map(|w| {
            let (_, n, p) = w.x.dim();
            let l = w.z.dim().2;
            Array2::from_shape_fn((n, p + l), |(k, c)| {
                if c < p {
                    w.x[[q - 1, k, c]]
                } else {
                    w.z[[q - 1, k, c - p]]
                }
            })
        })
        .collect()
}

/// Propagation matrix averaged over every window of a source. `ring`
/// selects one hop ring; in shared mode (or with `None`) the rings `1..=Γ`
/// are summed, which is row-stochastic over all neighbours but the node
/// itself.
pub fn mean_attention<S: Scalar>(
    params: &ModelParams<S>,
    ctx: &GraphContext,
    src: &WindowSource,
    stride: usize,
    ring: Option<usize>,
) -> Result<Array2<f64>> {
    let (q, t) = (params.hyper.q, params.hyper.horizon);
    let n = ctx.n;
    let shared = params.hyper.attention == AttentionMode::Shared;
    if let Some(g) = ring.filter(|&g| g >= ctx.rings.len()) {
        return Err(Error::Config(format!("ring {g} beyond the {} built hop rings", ctx.rings.len() - 1)));
    }
    let mut acc = Array2::<f64>::zeros((n, n));
    let mut count = 0usize;
    for w in src.windows(q, t, stride) {
        let att = params.attention(ctx, &w)?;
        let picked: Vec<&Tensor<f64>> = match ring {
            Some(g) if !shared => vec![&att[g]],
            _ => att.iter().skip(1).collect(),
        };
        for a in picked {
            for (dst, &v) in acc.iter_mut().zip(a.data()) {
                *dst += v;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::InsufficientData("no windows for attention averaging".into()));
    }
    acc.mapv_inplace(|v| v / count as f64);
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificantLinks {
    /// Σ_j Ã_kj² per node.
    pub scores: Vec<f64>,
    pub threshold: f64,
    /// Nodes with score ≥ threshold, by descending score then index.
    pub flagged: Vec<usize>,
}

/// Number of nodes in the top `100 − percentile` percent, at least one.
pub fn top_count(n: usize, percentile: f64) -> usize {
    let k = ((100.0 - percentile) / 100.0 * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Row-wise squared norms and the nodes ranked in the top percentile.
///
/// The threshold is the `k`-th largest score with `k = ⌈(1 − p/100)·N⌉`
/// (nearest rank, no interpolation, floor of one node). Every node tied
/// with the threshold is flagged, so ties can enlarge the set.
pub fn significant_links(att: ArrayView2<'_, f64>, percentile: f64) -> Result<SignificantLinks> {
    let (n, m) = att.dim();
    if n == 0 || n != m {
        return Err(Error::dim("significant_links", &[n, m], &[n, n]));
    }
    if !(0.0..100.0).contains(&percentile) {
        return Err(Error::Config(format!("percentile {percentile} outside [0, 100)")));
    }
    // Squares are summed in sorted order so the score of a row does not
    // depend on how its columns happen to be ordered.
    let scores: Vec<f64> = att
        .rows()
        .into_iter()
        .map(|r| {
            let mut sq: Vec<f64> = r.iter().map(|v| v * v).collect();
            sq.sort_by(f64::total_cmp);
            sq.iter().sum()
        })
        .collect();
    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[top_count(n, percentile) - 1];
    let mut flagged: Vec<usize> = (0..n).filter(|&k| scores[k] >= threshold).collect();
    flagged.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(SignificantLinks {
        scores,
        threshold,
        flagged,
    })
}

/// Per-node series of one-horizon-step predictions with the matching truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub times: Vec<usize>,
    pub pred_mph: Vec<f64>,
    pub truth_mph: Vec<f64>,
}

/// Prediction made `h + 1` steps ahead for `node` at every forecast time,
/// denormalized; truth comes from the raw `[steps, N]` speed table.
pub fn horizon_series(f: &Forecasts, node: usize, h: usize, norm: &NormalizationSpec, raw_speeds: ArrayView2<'_, f64>) -> Result<Series> {
    let speed = &norm.state[0];
    let mut s = Series {
        times: Vec::with_capacity(f.len()),
        pred_mph: Vec::with_capacity(f.len()),
        truth_mph: Vec::with_capacity(f.len()),
    };
    for (w, p) in f.pred.iter().enumerate() {
        let (t_len, n, _) = p.dim();
        if node >= n || h >= t_len {
            return Err(Error::Index(format!("node {node} / horizon {h} outside forecast shape {:?}", p.dim())));
        }
        let time = f.time_of(w, h);
        let truth = *raw_speeds
            .get((time, node))
            .ok_or_else(|| Error::Index(format!("time {time} outside the speed table")))?;
        s.times.push(time);
        s.pred_mph.push(speed.denormalize(p[[h, node, 0]]));
        s.truth_mph.push(truth);
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaseRow {
    pub time: usize,
    pub truth_mph: f64,
    pub pred_mph: f64,
    pub incident_flag: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub incident: IncidentEvent,
    pub rows: Vec<CaseRow>,
    pub pre_mae: Option<f64>,
    pub during_mae: Option<f64>,
    pub recovery_mae: Option<f64>,
}

impl CaseRecord {
    /// Mean predicted speed over the incident span.
    pub fn during_mean_pred(&self) -> Option<f64> {
        mean(self.rows.iter().filter(|r| r.incident_flag).map(|r| r.pred_mph))
    }

    pub fn during_mean_truth(&self) -> Option<f64> {
        mean(self.rows.iter().filter(|r| r.incident_flag).map(|r| r.truth_mph))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Aligned truth/prediction rows over `[start − margin, end + margin)`
/// (clipped to the series) with MAE before, during and after the incident.
pub fn extract_case(series: &Series, incident: &IncidentEvent, margin: usize) -> Result<CaseRecord> {
    let (first, last) = match (series.times.first(), series.times.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Index("empty series".into())),
    };
    if incident.start < first || incident.end == 0 || incident.end - 1 > last || incident.end <= incident.start {
        return Err(Error::Index(format!(
            "incident [{}, {}) outside series [{first}, {last}]",
            incident.start, incident.end
        )));
    }
    let lo = incident.start.saturating_sub(margin);
    let hi = incident.end + margin;
    let rows: Vec<CaseRow> = series
        .times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= lo && t < hi)
        .map(|(i, &t)| CaseRow {
            time: t,
            truth_mph: series.truth_mph[i],
            pred_mph: series.pred_mph[i],
            incident_flag: incident.is_active(t),
        })
        .collect();
    let mae = |keep: &dyn Fn(usize) -> bool| {
        mean(rows.iter().filter(|r| keep(r.time)).map(|r| (r.pred_mph - r.truth_mph).abs()))
    };
    Ok(CaseRecord {
        incident: incident.clone(),
        pre_mae: mae(&|t| t < incident.start),
        during_mae: mae(&|t| incident.is_active(t)),
        recovery_mae: mae(&|t| t >= incident.end),
        rows,
    })
}

pub fn write_norms_matrix(path: &Path, r: &NormReport) -> Result<()> {
    crate::csvio::write(
        path,
        "factor,norm",
        r.matrix.iter().map(|(f, v)| format!("{f},{v:?}")),
    )
}

pub fn write_norms_link(path: &Path, r: &NormReport, node_ids: &[String]) -> Result<()> {
    crate::csvio::write(
        path,
        "node_id,factor,norm",
        r.link.iter().map(|(k, f, v)| format!("{},{f},{v:?}", node_ids[*k])),
    )
}

/// One row per node in node order.
pub fn write_significant_links(path: &Path, s: &SignificantLinks, node_ids: &[String]) -> Result<()> {
    crate::csvio::write(
        path,
        "node_id,score,flagged",
        s.scores.iter().enumerate().map(|(k, v)| {
            let flag = u8::from(s.flagged.contains(&k));
            format!("{},{v:?},{flag}", node_ids[k])
        }),
    )
}

pub fn write_case(path: &Path, c: &CaseRecord) -> Result<()> {
    crate::csvio::write(
        path,
        "time,truth_mph,pred_mph,incident_flag",
        c.rows
            .iter()
            .map(|r| format!("{},{:?},{:?},{}", r.time, r.truth_mph, r.pred_mph, u8::from(r.incident_flag))),
    )
}

pub fn write_case_summary(path: &Path, cases: &[CaseRecord], node_ids: &[String]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
    crate::csvio::write(
        path,
        "node_id,start,end,kind,open_lane_ratio,pre_mae,during_mae,recovery_mae",
        cases.iter().map(|c| {
            let i = &c.incident;
            format!(
                "{},{},{},{},{:?},{},{},{}",
                node_ids[i.node],
                i.start,
                i.end,
                i.kind.as_str(),
                i.open_lane_ratio,
                opt(c.pre_mae),
                opt(c.during_mae),
                opt(c.recovery_mae)
            )
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::IncidentKind;
    use ndarray::array;

    #[test]
    fn hand_sum_and_zero_block() {
        let mut tab = TabParams::<Tensor<f64>>::zeros(3, 2);
        tab.w_src.data_mut()[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let layout = vec![("a".to_string(), 0..2), ("b".to_string(), 2..3)];
        let r = factor_norms(&tab, &layout, &[]).unwrap();
        assert_eq!(r.matrix, vec![("a".to_string(), 30.0), ("b".to_string(), 0.0)]);
        assert!(factor_norms(&tab, &[("c".to_string(), 2..4)], &[]).is_err());
    }

    #[test]
    fn identity_attention_flags_everything() {
        let eye = Array2::<f64>::eye(7);
        let s = significant_links(eye.view(), 95.0).unwrap();
        assert_eq!(s.flagged.len(), 7);
        assert_eq!(s.threshold, 1.0);
    }

    #[test]
    fn concentrated_row_is_flagged_first() {
        let att = array![
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.25, 0.0, 0.25, 0.25, 0.25],
            [0.25, 0.25, 0.0, 0.25, 0.25],
            [0.25, 0.25, 0.25, 0.0, 0.25],
            [0.25, 0.25, 0.25, 0.25, 0.0],
        ];
        let s = significant_links(att.view(), 95.0).unwrap();
        assert_eq!(s.flagged, vec![0]);
        assert_eq!(s.scores[1], 0.25);
    }

    #[test]
    fn top_count_examples() {
        assert_eq!(top_count(100, 95.0), 5);
        assert_eq!(top_count(40, 95.0), 2);
        assert_eq!(top_count(10, 95.0), 1);
        assert_eq!(top_count(1, 95.0), 1);
    }

    #[test]
    fn margin_zero_covers_incident_only() {
        let series = Series {
            times: (10..30).collect(),
            pred_mph: vec![1.0; 20],
            truth_mph: vec![0.0; 20],
        };
        let inc = IncidentEvent {
            node: 0,
            start: 15,
            end: 18,
            open_lane_ratio: 0.0,
            kind: IncidentKind::Accident,
        };
        let c = extract_case(&series, &inc, 0).unwrap();
        assert_eq!(c.rows.iter().map(|r| r.time).collect::<Vec<_>>(), vec![15, 16, 17]);
        assert_eq!(c.during_mae, Some(1.0));
        assert_eq!(c.pre_mae, None);
        let late = IncidentEvent { start: 40, end: 45, ..inc };
        assert!(matches!(extract_case(&series, &late, 2), Err(Error::Index(_))));
    }
}
