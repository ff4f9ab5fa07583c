//! CSV ingestion, chronological splitting, `[0,1]` normalization and
//! sliding-window extraction.

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3};

use crate::csvio::Table;
use crate::error::{Error, Result};
use crate::graph::RoadGraph;

/// Raw per-step series aligned to a graph's node order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficData {
    pub node_ids: Vec<String>,
    /// `[steps, nodes]`, mph.
    pub speeds: Array2<f64>,
    pub feature_names: Vec<String>,
    /// `[steps, nodes, channels]` in `feature_names` order.
    pub features: Array3<f64>,
}

impl TrafficData {
    pub fn steps(&self) -> usize {
        self.speeds.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.speeds.ncols()
    }

    pub fn feature(&self, name: &str) -> Option<ndarray::ArrayView2<'_, f64>> {
        let c = self.feature_names.iter().position(|n| n == name)?;
        Some(self.features.slice(s![.., .., c]))
    }
}

/// Reads `speeds.csv` and every `features_<name>.csv` in `dir` (channels in
/// file-name order), aligning columns to `graph` by header.
///
/// Empty cells are forward-filled, then zero-filled at the head.
pub fn ingest(dir: &Path, graph: &RoadGraph) -> Result<TrafficData> {
    let speeds = read_matrix(&dir.join("speeds.csv"), graph)?;
    let mut feature_files: Vec<(String, std::path::PathBuf)> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let channel = name.strip_prefix("features_")?.strip_suffix(".csv")?.to_string();
            Some((channel, e.path()))
        })
        .collect();
    feature_files.sort();
    let (steps, n) = speeds.dim();
    let mut features = Array3::zeros((steps, n, feature_files.len()));
    for (c, (_, path)) in feature_files.iter().enumerate() {
        let m = read_matrix(path, graph)?;
        if m.nrows() != steps {
            return Err(Error::Schema {
                file: path.file_name().unwrap().to_string_lossy().into_owned(),
                row: m.nrows() + 1,
                msg: format!("{} data rows, speeds.csv has {steps}", m.nrows()),
            });
        }
        features.slice_mut(s![.., .., c]).assign(&m);
    }
    Ok(TrafficData {
        node_ids: graph.node_ids().to_vec(),
        speeds,
        feature_names: feature_files.into_iter().map(|(c, _)| c).collect(),
        features,
    })
}

fn read_matrix(path: &Path, graph: &RoadGraph) -> Result<Array2<f64>> {
    let t = Table::read(path)?;
    let n = graph.n();
    let mut col_of = vec![usize::MAX; n];
    for (c, h) in t.header.iter().enumerate() {
        match graph.index_of(h) {
            Some(k) if col_of[k] == usize::MAX => col_of[k] = c,
            Some(_) => return Err(t.err(1, format!("duplicate column {h}"))),
            None => return Err(t.err(1, format!("column {h} is not a graph node"))),
        }
    }
    if let Some(k) = col_of.iter().position(|&c| c == usize::MAX) {
        return Err(t.err(1, format!("missing column for node {}", graph.node_ids()[k])));
    }
    let mut out = Array2::zeros((t.rows.len(), n));
    let mut last: Vec<Option<f64>> = vec![None; n];
    for (r, (line, cells)) in t.rows.iter().enumerate() {
        if cells.len() != t.header.len() {
            return Err(t.err(*line, format!("expected {} cells, found {}", t.header.len(), cells.len())));
        }
        for k in 0..n {
            let cell = &cells[col_of[k]];
            let v = if cell.is_empty() {
                last[k].unwrap_or(0.0)
            } else {
                let v: f64 = t.parse(*line, &t.header[col_of[k]], cell)?;
                if !v.is_finite() {
                    return Err(t.err(*line, format!("non-finite value {cell}")));
                }
                last[k] = Some(v);
                v
            };
            out[[r, k]] = v;
        }
    }
    Ok(out)
}

/// How a feature channel is scaled into `[0,1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    /// 0/1 indicator, passed through.
    Binary,
    /// Already a fraction, clipped to `[0,1]`.
    Ratio,
    /// Integer category in `1..=levels`, one-hot expanded.
    OneHot { levels: usize },
    /// Min-max scaled with train-split statistics.
    MinMax,
}

impl ChannelKind {
    pub fn for_name(name: &str) -> Self {
        match name {
            "I" => ChannelKind::Binary,
            "O" => ChannelKind::Ratio,
            "L" => ChannelKind::OneHot { levels: 5 },
            _ => ChannelKind::MinMax,
        }
    }

    pub fn width(self) -> usize {
        match self {
            ChannelKind::OneHot { levels } => levels,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNorm {
    pub name: String,
    pub kind: ChannelKind,
    pub min: f64,
    pub max: f64,
}

impl ChannelNorm {
    pub fn normalize(&self, v: f64) -> f64 {
        if self.max == self.min {
            0.0
        } else {
            ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
        }
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Per-channel min/max measured on the training split only.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationSpec {
    pub state: Vec<ChannelNorm>,
    pub features: Vec<ChannelNorm>,
}

impl NormalizationSpec {
    /// Width of the expanded feature vector fed to the attention block.
    pub fn feature_width(&self) -> usize {
        self.features.iter().map(|f| f.kind.width()).sum()
    }

    /// Column range of each named factor inside the expanded feature vector.
    pub fn feature_layout(&self) -> Vec<(String, Range<usize>)> {
        let mut at = 0;
        self.features
            .iter()
            .map(|f| {
                let r = at..at + f.kind.width();
                at = r.end;
                (f.name.clone(), r)
            })
            .collect()
    }
}

/// Contiguous normalized slice of the series belonging to one split.
#[derive(Clone, Debug)]
pub struct WindowSource {
    /// Absolute index of the first step.
    pub start: usize,
    /// `[len, nodes, P]`.
    pub x: Array3<f64>,
    /// `[len, nodes, L']`.
    pub z: Array3<f64>,
}

impl WindowSource {
    pub fn len(&self) -> usize {
        self.x.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of windows `⌊(len−Q−T)/stride⌋+1`, or 0 when too short.
    pub fn count(&self, q: usize, t: usize, stride: usize) -> usize {
        window_count(self.len(), q, t, stride)
    }

    /// Window whose history starts at local offset `i`.
    pub fn window(&self, i: usize, q: usize, t: usize) -> StateWindow {
        StateWindow {
            x: self.x.slice(s![i..i + q, .., ..]).to_owned(),
            z: self.z.slice(s![i..i + q, .., ..]).to_owned(),
            y: self.x.slice(s![i + q..i + q + t, .., ..]).to_owned(),
            t0: self.start + i,
        }
    }

    /// Local offsets of every window.
    pub fn offsets(&self, q: usize, t: usize, stride: usize) -> Vec<usize> {
        (0..self.count(q, t, stride)).map(|k| k * stride).collect()
    }

    pub fn windows(&self, q: usize, t: usize, stride: usize) -> impl Iterator<Item = StateWindow> + '_ {
        self.offsets(q, t, stride.max(1))
            .into_iter()
            .map(move |i| self.window(i, q, t))
    }
}

pub fn window_count(len: usize, q: usize, t: usize, stride: usize) -> usize {
    let stride = stride.max(1);
    if q == 0 || t == 0 || len < q + t {
        0
    } else {
        (len - q - t) / stride + 1
    }
}

/// One training example: `q` historical steps and `t` future steps.
#[derive(Clone, Debug, PartialEq)]
pub struct StateWindow {
    /// `[Q, N, P]`.
    pub x: Array3<f64>,
    /// `[Q, N, L']`.
    pub z: Array3<f64>,
    /// `[T, N, P]`.
    pub y: Array3<f64>,
    /// Absolute index of the first historical step.
    pub t0: usize,
}

impl StateWindow {
    pub fn q(&self) -> usize {
        self.x.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.y.dim().0
    }

    pub fn n_nodes(&self) -> usize {
        self.x.dim().1
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowSource,
    pub val: WindowSource,
    pub test: WindowSource,
    pub norm: NormalizationSpec,
}

/// Chronological train/val/test split with statistics from the train part.
pub fn split_and_normalize(raw: &TrafficData, ratios: (f64, f64, f64), q: usize, t: usize) -> Result<Splits> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {a},{b},{c} must be positive and sum to 1")));
    }
    let steps = raw.steps();
    let n_train = (steps as f64 * a).floor() as usize;
    let n_val = (steps as f64 * b).floor() as usize;
    let n_test = steps - n_train - n_val;
    for (name, len) in [("train", n_train), ("val", n_val), ("test", n_test)] {
        if len < q + t {
            return Err(Error::InsufficientData(format!(
                "{name} split has {len} steps, need at least Q+T = {}",
                q + t
            )));
        }
    }
    let norm = fit_normalization(raw, n_train);
    let build = |range: Range<usize>| normalize_range(raw, &norm, range);
    Ok(Splits {
        train: build(0..n_train),
        val: build(n_train..n_train + n_val),
        test: build(n_train + n_val..steps),
        norm,
    })
}

fn min_max(v: impl Iterator<Item = f64>) -> (f64, f64) {
    v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

/// Channel statistics over the first `n_train` steps.
pub fn fit_normalization(raw: &TrafficData, n_train: usize) -> NormalizationSpec {
    let (smin, smax) = min_max(raw.speeds.slice(s![..n_train, ..]).iter().copied());
    let state = vec![ChannelNorm {
        name: "speed".into(),
        kind: ChannelKind::MinMax,
        min: smin,
        max: smax,
    }];
    let features = raw
        .feature_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let kind = ChannelKind::for_name(name);
            let (min, max) = match kind {
                ChannelKind::MinMax => min_max(raw.features.slice(s![..n_train, .., c]).iter().copied()),
                _ => (0.0, 1.0),
            };
            ChannelNorm {
                name: name.clone(),
                kind,
                min,
                max,
            }
        })
        .collect();
    NormalizationSpec { state, features }
}

fn normalize_range(raw: &TrafficData, norm: &NormalizationSpec, range: Range<usize>) -> WindowSource {
    let len = range.len();
    let n = raw.n_nodes();
    let speed = &norm.state[0];
    let mut x = Array3::zeros((len, n, 1));
    let mut z = Array3::zeros((len, n, norm.feature_width()));
    for (r, step) in range.clone().enumerate() {
        for k in 0..n {
            x[[r, k, 0]] = speed.normalize(raw.speeds[[step, k]]);
            let mut col = 0;
            for (c, f) in norm.features.iter().enumerate() {
                let v = raw.features[[step, k, c]];
                match f.kind {
                    ChannelKind::Binary => z[[r, k, col]] = if v != 0.0 { 1.0 } else { 0.0 },
                    ChannelKind::Ratio => z[[r, k, col]] = v.clamp(0.0, 1.0),
                    ChannelKind::OneHot { levels } => {
                        let level = v.round() as i64;
                        if (1..=levels as i64).contains(&level) {
                            z[[r, k, col + level as usize - 1]] = 1.0;
                        }
                    }
                    ChannelKind::MinMax => z[[r, k, col]] = f.normalize(v),
                }
                col += f.kind.width();
            }
        }
    }
    WindowSource {
        start: range.start,
        x,
        z,
    }
}

/// Reorders a `[T, N, P]` block into `[N, T·P]` rows, the layout the
/// forecasting head emits.
pub fn to_node_major(y: ArrayView3<'_, f64>) -> Array2<f64> {
    let (t, n, p) = y.dim();
    Array2::from_shape_fn((n, t * p), |(k, c)| y[[c / p, k, c % p]])
}

/// Inverse of [`to_node_major`].
pub fn from_node_major(m: &Array2<f64>, t: usize, p: usize) -> Array3<f64> {
    let n = m.nrows();
    Array3::from_shape_fn((t, n, p), |(h, k, c)| m[[k, h * p + c]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn data(steps: usize, speeds: impl Fn(usize, usize) -> f64) -> TrafficData {
        TrafficData {
            node_ids: vec!["a".into(), "b".into()],
            speeds: Array2::from_shape_fn((steps, 2), |(t, k)| speeds(t, k)),
            feature_names: vec!["MT".into()],
            features: Array3::from_elem((steps, 2, 1), 7.0),
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let d = data(100, |_, _| 30.0);
        let s = split_and_normalize(&d, (0.7, 0.1, 0.2), 4, 2).unwrap();
        assert!(s.train.z.iter().all(|&v| v == 0.0));
        assert!(s.train.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn midpoint_maps_to_half() {
        let d = data(100, |t, _| if t == 0 { 0.0 } else if t == 1 { 60.0 } else { 30.0 });
        let s = split_and_normalize(&d, (0.7, 0.1, 0.2), 4, 2).unwrap();
        assert_eq!(s.norm.state[0].normalize(30.0), 0.5);
        assert_eq!(s.train.x[[5, 0, 0]], 0.5);
    }

    #[test]
    fn short_split_is_insufficient() {
        let d = data(20, |_, _| 1.0);
        let err = split_and_normalize(&d, (0.7, 0.1, 0.2), 4, 2).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    #[test]
    fn window_counting_and_tiling() {
        assert_eq!(window_count(10, 4, 2, 1), 5);
        assert_eq!(window_count(5, 4, 2, 1), 0);
        let src = WindowSource {
            start: 3,
            x: Array::from_shape_fn((18, 1, 1), |(t, _, _)| t as f64),
            z: Array3::zeros((18, 1, 0)),
        };
        let ws: Vec<_> = src.windows(4, 2, 6).collect();
        assert_eq!(ws.len(), 3);
        for pair in ws.windows(2) {
            assert!(pair[1].t0 >= pair[0].t0 + 6);
        }
        let w = &ws[1];
        assert_eq!(w.t0, 9);
        assert_eq!(w.y[[0, 0, 0]], w.x[[0, 0, 0]] + 4.0);
    }

    #[test]
    fn one_hot_expansion() {
        let mut d = data(100, |_, _| 1.0);
        d.feature_names = vec!["L".into()];
        d.features = Array3::from_shape_fn((100, 2, 1), |(_, k, _)| if k == 0 { 2.0 } else { 5.0 });
        let s = split_and_normalize(&d, (0.7, 0.1, 0.2), 4, 2).unwrap();
        assert_eq!(s.norm.feature_width(), 5);
        assert_eq!(s.train.z.slice(s![0, 0, ..]).to_vec(), vec![0., 1., 0., 0., 0.]);
        assert_eq!(s.train.z.slice(s![0, 1, ..]).to_vec(), vec![0., 0., 0., 0., 1.]);
    }

    #[test]
    fn node_major_round_trip() {
        let y = Array::from_shape_fn((3, 2, 2), |(a, b, c)| (a * 100 + b * 10 + c) as f64);
        let m = to_node_major(y.view());
        assert_eq!(m[[1, 2 * 2 + 1]], y[[2, 1, 1]]);
        assert_eq!(from_node_major(&m, 3, 2), y);
    }
}
