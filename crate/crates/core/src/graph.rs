//! Directed road network, adjacency and hop-ring masks.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use crate::csvio::{self, Table};
use crate::error::{Error, Result};
use crate::tensor::RowSupport;

/// Static capacity attributes of one road link.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticAttrs {
    /// Functional class, 1 (freeway) through 5 (local street).
    pub road_type: u8,
    pub length_m: f64,
    pub lanes: u32,
    /// Annual average daily traffic, vehicles/day.
    pub aadt: f64,
}

impl StaticAttrs {
    fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=5).contains(&self.road_type) {
            return Err(format!("road_type {} outside 1..5", self.road_type));
        }
        if !(self.length_m > 0.0) {
            return Err(format!("length_m {} must be positive", self.length_m));
        }
        if self.lanes < 1 {
            return Err("lanes must be at least 1".into());
        }
        if !(self.aadt >= 0.0) {
            return Err(format!("aadt {} must be non-negative", self.aadt));
        }
        Ok(())
    }
}

/// Directed sensor graph. Edge `i → j` means traffic flows from link `i`
/// into link `j`; the adjacency matrix carries self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    node_ids: Vec<String>,
    attrs: Vec<StaticAttrs>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<bool>,
    downstream: Vec<Vec<usize>>,
}

impl RoadGraph {
    pub fn new(node_ids: Vec<String>, attrs: Vec<StaticAttrs>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 {
            return Err(Error::Config("graph has no nodes".into()));
        }
        if attrs.len() != n {
            return Err(Error::Config(format!("{} attribute records for {n} nodes", attrs.len())));
        }
        let mut seen = HashSet::new();
        for id in &node_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("duplicate node id {id}")));
            }
        }
        for (k, a) in attrs.iter().enumerate() {
            a.validate().map_err(|m| Error::Config(format!("node {}: {m}", node_ids[k])))?;
        }
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            adjacency[i * n + i] = true;
        }
        let mut downstream = vec![Vec::new(); n];
        for &(i, j) in &edges {
            if i >= n || j >= n {
                return Err(Error::Index(format!("edge ({i},{j}) with {n} nodes")));
            }
            adjacency[i * n + j] = true;
            if i != j && !downstream[i].contains(&j) {
                downstream[i].push(j);
            }
        }
        downstream.iter_mut().for_each(|d| d.sort_unstable());
        Ok(Self {
            node_ids,
            attrs,
            edges,
            adjacency,
            downstream,
        })
    }

    /// Reads `nodes.csv` and `edges.csv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_files(&dir.join("nodes.csv"), &dir.join("edges.csv"))
    }

    pub fn load_files(nodes_path: &Path, edges_path: &Path) -> Result<Self> {
        let nodes = Table::read(nodes_path)?;
        nodes.expect_header(&["node_id", "road_type", "length_m", "lanes", "aadt"])?;
        let mut ids = Vec::new();
        let mut attrs = Vec::new();
        let mut index = HashMap::new();
        for (row, cells) in &nodes.rows {
            if cells.len() != 5 {
                return Err(nodes.err(*row, format!("expected 5 cells, found {}", cells.len())));
            }
            let id = cells[0].clone();
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(nodes.err(*row, format!("duplicate node id {id}")));
            }
            let lanes: i64 = nodes.parse(*row, "lanes", &cells[3])?;
            if lanes < 1 {
                return Err(nodes.err(*row, format!("non-positive lanes {lanes}")));
            }
            let a = StaticAttrs {
                road_type: nodes.parse(*row, "road_type", &cells[1])?,
                length_m: nodes.parse(*row, "length_m", &cells[2])?,
                lanes: lanes as u32,
                aadt: nodes.parse(*row, "aadt", &cells[4])?,
            };
            a.validate().map_err(|m| nodes.err(*row, m))?;
            ids.push(id);
            attrs.push(a);
        }
        let edges_t = Table::read(edges_path)?;
        edges_t.expect_header(&["from_id", "to_id"])?;
        let mut edges = Vec::new();
        for (row, cells) in &edges_t.rows {
            if cells.len() != 2 {
                return Err(edges_t.err(*row, format!("expected 2 cells, found {}", cells.len())));
            }
            let lookup = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| edges_t.err(*row, format!("edge endpoint {id:?} is not a known node")))
            };
            edges.push((lookup(&cells[0])?, lookup(&cells[1])?));
        }
        Self::new(ids, attrs, edges)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        csvio::write(
            &dir.join("nodes.csv"),
            "node_id,road_type,length_m,lanes,aadt",
            self.node_ids.iter().zip(&self.attrs).map(|(id, a)| {
                format!("{id},{},{},{},{}", a.road_type, a.length_m, a.lanes, a.aadt)
            }),
        )?;
        csvio::write(
            &dir.join("edges.csv"),
            "from_id,to_id",
            self.edges
                .iter()
                .map(|&(i, j)| format!("{},{}", self.node_ids[i], self.node_ids[j])),
        )
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn attrs(&self) -> &[StaticAttrs] {
        &self.attrs
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    /// Row-major `N×N` adjacency including self-loops.
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n() + j]
    }

    /// Nodes directly downstream of `i` (self excluded).
    pub fn downstream(&self, i: usize) -> &[usize] {
        &self.downstream[i]
    }

    /// Nodes with an edge into `j` (self excluded).
    pub fn upstream(&self, j: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| i != j && self.downstream[i].contains(&j)).collect()
    }

    pub fn reversed(&self) -> Self {
        let edges = self.edges.iter().map(|&(i, j)| (j, i)).collect();
        Self::new(self.node_ids.clone(), self.attrs.clone(), edges).expect("reversal preserves validity")
    }

    /// Hop-ring masks of orders `0..=max_order`.
    pub fn hop_masks(&self, max_order: usize) -> Vec<HopMask> {
        hop_masks(self, max_order)
    }
}

/// Pairs `(i, j)` whose shortest directed path from `i` to `j` has exactly
/// `order` hops. Order 0 is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct HopMask {
    pub order: usize,
    n: usize,
    mask: Vec<bool>,
}

impl HopMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.n + j]
    }

    pub fn support(&self) -> Arc<RowSupport> {
        Arc::new(RowSupport::from_mask(self.n, self.n, &self.mask).expect("square mask"))
    }

    /// Number of ring members in row `i`.
    pub fn degree(&self, i: usize) -> usize {
        self.mask[i * self.n..(i + 1) * self.n].iter().filter(|&&b| b).count()
    }
}

/// Ring masks by boolean powering of `A + I`: `reach_k = reach_{k-1}·(A+I)`
/// and ring `k` is `reach_k ∧ ¬reach_{k-1}`.
pub fn hop_masks(g: &RoadGraph, max_order: usize) -> Vec<HopMask> {
    let n = g.n();
    let a = g.adjacency();
    let mut reach: Vec<bool> = (0..n * n).map(|k| k / n == k % n).collect();
    let mut out = vec![HopMask {
        order: 0,
        n,
        mask: reach.clone(),
    }];
    for order in 1..=max_order {
        let mut next = vec![false; n * n];
        for i in 0..n {
            for k in 0..n {
                if reach[i * n + k] {
                    for j in 0..n {
                        next[i * n + j] |= a[k * n + j];
                    }
                }
            }
        }
        let ring = next.iter().zip(&reach).map(|(&nx, &r)| nx && !r).collect();
        out.push(HopMask { order, n, mask: ring });
        reach = next;
    }
    out
}

/// Shortest-path hop counts from `src` by breadth-first search.
pub fn bfs_distances(g: &RoadGraph, src: usize) -> Vec<Option<usize>> {
    let mut dist = vec![None; g.n()];
    dist[src] = Some(0);
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap();
        for &v in g.downstream(u) {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}
