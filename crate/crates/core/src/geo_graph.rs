//! Grid placement of real and virtual nodes and the k-nearest-neighbour
//! base graph.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !(lat.is_finite() && lon.is_finite()) || lat.abs() > 90.0 || lon.abs() > 180.0 {
            return Err(Error::Domain(format!("invalid coordinates ({lat}, {lon})")));
        }
        Ok(Self { lat, lon })
    }

    /// Great-circle distance in kilometres (haversine formula).
    pub fn haversine_km(&self, other: &GeoPoint) -> f64 {
        let (p1, p2) = (self.lat.to_radians(), other.lat.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon - self.lon).to_radians();
        let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BBox {
    pub fn contains(&self, p: &GeoPoint) -> bool {
        p.lat >= self.lat_min && p.lat <= self.lat_max && p.lon >= self.lon_min && p.lon <= self.lon_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bbox: BBox,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(bbox: BBox, rows: usize, cols: usize) -> Result<Self> {
        let g = Self { bbox, rows, cols };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        if !(b.lat_min < b.lat_max && b.lon_min < b.lon_max) {
            return Err(Error::Config("grid bbox must have min < max on both axes".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid needs at least one row and column".into()));
        }
        GeoPoint::new(b.lat_min, b.lon_min)?;
        GeoPoint::new(b.lat_max, b.lon_max)?;
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    fn lat_step(&self) -> f64 {
        (self.bbox.lat_max - self.bbox.lat_min) / self.rows as f64
    }

    fn lon_step(&self) -> f64 {
        (self.bbox.lon_max - self.bbox.lon_min) / self.cols as f64
    }

    /// Cell of a point. Intervals are half-open `[edge, next_edge)`; points on
    /// the top or right boundary fall in the last cell.
    pub fn cell_of(&self, p: &GeoPoint) -> Result<Cell> {
        if !self.bbox.contains(p) {
            return Err(Error::Placement(format!(
                "point ({}, {}) lies outside the grid bbox",
                p.lat, p.lon
            )));
        }
        let idx = |v: f64, lo: f64, step: f64, n: usize| -> usize {
            let raw = ((v - lo) / step).floor();
            (raw.max(0.0) as usize).min(n - 1)
        };
        Ok(Cell {
            row: idx(p.lat, self.bbox.lat_min, self.lat_step(), self.rows),
            col: idx(p.lon, self.bbox.lon_min, self.lon_step(), self.cols),
        })
    }

    pub fn cell_center(&self, cell: Cell) -> GeoPoint {
        GeoPoint {
            lat: self.bbox.lat_min + (cell.row as f64 + 0.5) * self.lat_step(),
            lon: self.bbox.lon_min + (cell.col as f64 + 0.5) * self.lon_step(),
        }
    }

    /// Cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.rows).flat_map(move |row| (0..self.cols).map(move |col| Cell { row, col }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

/// Assigns every point to its grid cell.
pub fn assign_cells(points: &[GeoPoint], grid: &GridSpec) -> Result<Vec<Cell>> {
    points.iter().map(|p| grid.cell_of(p)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Real,
    Virtual,
}

impl NodeKind {
    pub fn is_real(self) -> bool {
        self == NodeKind::Real
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeKind::Real => "real",
            NodeKind::Virtual => "virtual",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeOrigin {
    Station(String),
    TestReplacement(String),
    CellCenter,
}

impl NodeOrigin {
    pub fn station_id(&self) -> Option<&str> {
        match self {
            NodeOrigin::Station(id) | NodeOrigin::TestReplacement(id) => Some(id),
            NodeOrigin::CellCenter => None,
        }
    }
}

impl fmt::Display for NodeOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeOrigin::Station(id) => write!(f, "station:{id}"),
            NodeOrigin::TestReplacement(id) => write!(f, "test:{id}"),
            NodeOrigin::CellCenter => f.write_str("cell_center"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    pub location: GeoPoint,
    pub cell: Cell,
    pub origin: NodeOrigin,
}

/// A station as seen by graph construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationSite {
    pub id: String,
    pub location: GeoPoint,
}

/// All graph nodes, one per grid cell, in row-major cell order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    nodes: Vec<Node>,
    real: Vec<usize>,
    virt: Vec<usize>,
}

impl NodeSet {
    pub fn from_nodes(nodes: Vec<Node>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Contract("node ids must equal their position".into()));
            }
        }
        let real = nodes.iter().filter(|n| n.kind.is_real()).map(|n| n.id).collect();
        let virt = nodes.iter().filter(|n| !n.kind.is_real()).map(|n| n.id).collect();
        Ok(Self { nodes, real, virt })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    /// Ids of real nodes, ascending.
    pub fn real_ids(&self) -> &[usize] {
        &self.real
    }

    /// Ids of virtual nodes, ascending.
    pub fn virtual_ids(&self) -> &[usize] {
        &self.virt
    }

    pub fn kinds(&self) -> Vec<NodeKind> {
        self.nodes.iter().map(|n| n.kind).collect()
    }

    pub fn locations(&self) -> Vec<GeoPoint> {
        self.nodes.iter().map(|n| n.location).collect()
    }

    /// Virtual nodes standing in for withheld stations, with the station id.
    pub fn test_nodes(&self) -> Vec<(usize, &str)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.origin {
                NodeOrigin::TestReplacement(s) => Some((n.id, s.as_str())),
                _ => None,
            })
            .collect()
    }

    /// Ids of the `k` nearest real nodes to `p` with their distances (km),
    /// nearest first, ties by lower id.
    pub fn nearest_real(&self, p: &GeoPoint, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        let mut d: Vec<(usize, f64)> = self
            .real
            .iter()
            .filter(|&&i| Some(i) != exclude)
            .map(|&i| (i, p.haversine_km(&self.nodes[i].location)))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        d.truncate(k);
        d
    }

    /// CSV export: `id,kind,lat,lon,cell_row,cell_col,origin`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["id", "kind", "lat", "lon", "cell_row", "cell_col", "origin"])?;
        for n in &self.nodes {
            out.write_record([
                n.id.to_string(),
                n.kind.to_string(),
                n.location.lat.to_string(),
                n.location.lon.to_string(),
                n.cell.row.to_string(),
                n.cell.col.to_string(),
                n.origin.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Places training stations as real nodes, withheld stations as virtual
/// nodes at their exact coordinates, and fills every remaining cell with a
/// virtual node at the cell centre.
pub fn build_node_set(stations: &[StationSite], grid: &GridSpec, withheld_ids: &[String]) -> Result<NodeSet> {
    grid.validate()?;
    for w in withheld_ids {
        if !stations.iter().any(|s| &s.id == w) {
            return Err(Error::Config(format!("withheld station {w} is not in the station list")));
        }
    }
    let mut by_cell: Vec<Option<&StationSite>> = vec![None; grid.n_cells()];
    for s in stations {
        let cell = grid.cell_of(&s.location)?;
        let slot = &mut by_cell[cell.row * grid.cols + cell.col];
        if let Some(prev) = slot {
            return Err(Error::Config(format!(
                "stations {} and {} share grid cell ({}, {})",
                prev.id, s.id, cell.row, cell.col
            )));
        }
        *slot = Some(s);
    }
    let nodes = grid
        .cells()
        .enumerate()
        .map(|(id, cell)| match by_cell[id] {
            Some(s) if withheld_ids.contains(&s.id) => Node {
                id,
                kind: NodeKind::Virtual,
                location: s.location,
                cell,
                origin: NodeOrigin::TestReplacement(s.id.clone()),
            },
            Some(s) => Node {
                id,
                kind: NodeKind::Real,
                location: s.location,
                cell,
                origin: NodeOrigin::Station(s.id.clone()),
            },
            None => Node {
                id,
                kind: NodeKind::Virtual,
                location: grid.cell_center(cell),
                cell,
                origin: NodeOrigin::CellCenter,
            },
        })
        .collect();
    NodeSet::from_nodes(nodes)
}

/// Symmetric non-negative base adjacency with zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Adjacency {
    pub weights: Matrix<f64>,
}

impl Adjacency {
    pub fn n(&self) -> usize {
        self.weights.rows()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.weights.row(i).iter().filter(|&&w| w > 0.0).count()
    }

    pub fn is_symmetric(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| (0..n).all(|j| self.weights.get(i, j) == self.weights.get(j, i)))
    }
}

/// Binary kNN graph by haversine distance, symmetrized by max.
pub fn knn_adjacency(nodes: &NodeSet, k: usize) -> Result<Adjacency> {
    knn_adjacency_points(&nodes.locations(), k)
}

pub fn knn_adjacency_points(points: &[GeoPoint], k: usize) -> Result<Adjacency> {
    let n = points.len();
    if n == 1 && k >= 1 {
        // A single node has no neighbours; only the self-loop is added later.
        return Ok(Adjacency { weights: Matrix::zeros(1, 1) });
    }
    if k == 0 || k >= n {
        return Err(Error::Config(format!("knn needs 1 <= k < N, got k={k}, N={n}")));
    }
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        let mut d: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, points[i].haversine_km(&points[j])))
            .collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for &(j, _) in d.iter().take(k) {
            w.set(i, j, 1.0);
            w.set(j, i, 1.0);
        }
    }
    Ok(Adjacency { weights: w })
}
