//! Symmetric radius graph over POIs with distance-decayed weights.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
const GRAPH_MAGIC: &[u8; 4] = b"MGF1";

/// Great-circle distance in kilometres.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    let a = a.clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * a.sqrt().atan2((1.0 - a).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub radius_km: f64,
    pub sigma_geo_km: f64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            radius_km: 1.5,
            sigma_geo_km: 1.0,
        }
    }
}

/// Undirected edge stored once with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct GeoGraph {
    n_pois: usize,
    edges: Vec<Edge>,
    edge_index: HashMap<(u32, u32), usize>,
    degrees: Vec<f64>,
    // CSR adjacency: (neighbour, edge id), sorted by neighbour
    offsets: Vec<usize>,
    adjacency: Vec<(u32, usize)>,
}

impl GeoGraph {
    /// Builds a graph from canonical edges. Edges must have `i < j`, be
    /// sorted lexicographically, be unique, and carry positive weights.
    pub fn from_edges(n_pois: usize, edges: Vec<Edge>) -> Result<Self> {
        for (e, w) in edges.iter().enumerate() {
            if w.i >= w.j || w.j as usize >= n_pois {
                return Err(Error::invalid(format!(
                    "edge {e} = ({}, {}) is not canonical for {n_pois} nodes",
                    w.i, w.j
                )));
            }
            if !(w.weight > 0.0 && w.weight.is_finite()) {
                return Err(Error::invalid(format!("edge {e} has weight {}", w.weight)));
            }
            if e > 0 && (edges[e - 1].i, edges[e - 1].j) >= (w.i, w.j) {
                return Err(Error::invalid(format!("edge {e} out of canonical order")));
            }
        }

        let mut degrees = vec![0.0; n_pois];
        let mut counts = vec![0usize; n_pois + 1];
        let mut edge_index = HashMap::with_capacity(edges.len());
        for (e, w) in edges.iter().enumerate() {
            degrees[w.i as usize] += w.weight;
            degrees[w.j as usize] += w.weight;
            counts[w.i as usize + 1] += 1;
            counts[w.j as usize + 1] += 1;
            edge_index.insert((w.i, w.j), e);
        }
        for i in 0..n_pois {
            counts[i + 1] += counts[i];
        }
        let offsets = counts.clone();
        let mut fill = counts;
        let mut adjacency = vec![(0u32, 0usize); 2 * edges.len()];
        for (e, w) in edges.iter().enumerate() {
            adjacency[fill[w.i as usize]] = (w.j, e);
            fill[w.i as usize] += 1;
            adjacency[fill[w.j as usize]] = (w.i, e);
            fill[w.j as usize] += 1;
        }
        for i in 0..n_pois {
            adjacency[offsets[i]..offsets[i + 1]].sort_unstable_by_key(|&(j, _)| j);
        }
        Ok(GeoGraph {
            n_pois,
            edges,
            edge_index,
            degrees,
            offsets,
            adjacency,
        })
    }

    pub fn n_pois(&self) -> usize {
        self.n_pois
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Weighted degree `d_i = sum_j W_ij`.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// Canonical edge id for the unordered pair, if it is an edge.
    pub fn edge_id(&self, a: usize, b: usize) -> Option<usize> {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        self.edge_index.get(&(i as u32, j as u32)).copied()
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.edge_id(a, b).map_or(0.0, |e| self.edges[e].weight)
    }

    /// `(neighbour, edge id)` pairs of node `i`, ascending by neighbour.
    pub fn neighbors(&self, i: usize) -> &[(u32, usize)] {
        &self.adjacency[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn isolated(&self) -> Vec<usize> {
        (0..self.n_pois)
            .filter(|&i| self.offsets[i] == self.offsets[i + 1])
            .collect()
    }

    /// Row-major dense weight matrix; meant for small graphs in tests.
    pub fn dense_weights(&self) -> Vec<f64> {
        let n = self.n_pois;
        let mut w = vec![0.0; n * n];
        for e in &self.edges {
            let (i, j) = (e.i as usize, e.j as usize);
            w[i * n + j] = e.weight;
            w[j * n + i] = e.weight;
        }
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(GRAPH_MAGIC);
        w.u64(self.n_pois as u64).u64(self.edges.len() as u64);
        for e in &self.edges {
            w.u32(e.i).u32(e.j).f64(e.weight);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, GRAPH_MAGIC, path)?;
        let n = r.usize()?;
        let m = r.usize()?;
        let mut edges = Vec::with_capacity(m.min(r.remaining() / 16));
        for _ in 0..m {
            let i = r.u32()?;
            let j = r.u32()?;
            let weight = r.f64()?;
            edges.push(Edge { i, j, weight });
        }
        r.finish()?;
        GeoGraph::from_edges(n, edges).map_err(|e| r.malformed(e.to_string()))
    }

    /// Hash of the serialized graph.
    pub fn content_hash(&self) -> u64 {
        binio::content_hash(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        GeoGraph::from_bytes(&binio::read_file(path)?, path)
    }
}

fn unit_xyz(lat: f64, lon: f64) -> [f64; 3] {
    let (p, l) = (lat.to_radians(), lon.to_radians());
    [
        EARTH_RADIUS_KM * p.cos() * l.cos(),
        EARTH_RADIUS_KM * p.cos() * l.sin(),
        EARTH_RADIUS_KM * p.sin(),
    ]
}

/// Radius graph with `W_ij = exp(-d(i,j) / sigma_geo)` for every distinct
/// pair with `d(i,j) <= radius`. Coincident POIs get weight 1.
///
/// Candidate pairs come from a 3D grid over Earth-centred coordinates with
/// cell size equal to the chord of the radius, so no pair within the radius
/// is ever more than one cell apart.
pub fn build_radius_graph(coords: &[(f64, f64)], params: GraphParams) -> Result<GeoGraph> {
    if coords.len() < 2 {
        return Err(Error::invalid(format!(
            "radius graph needs at least 2 POIs, got {}",
            coords.len()
        )));
    }
    if !(params.radius_km > 0.0 && params.sigma_geo_km > 0.0) {
        return Err(Error::invalid("radius and sigma_geo must be positive"));
    }
    for (p, &(lat, lon)) in coords.iter().enumerate() {
        if !((-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon)) {
            return Err(Error::invalid(format!("POI {p} has invalid coordinates ({lat}, {lon})")));
        }
    }

    let half_angle = (params.radius_km / (2.0 * EARTH_RADIUS_KM)).min(std::f64::consts::FRAC_PI_2);
    let chord = 2.0 * EARTH_RADIUS_KM * half_angle.sin();
    let cell = chord * (1.0 + 1e-6) + 1e-9;

    let xyz: Vec<[f64; 3]> = coords.iter().map(|&(la, lo)| unit_xyz(la, lo)).collect();
    let key = |p: &[f64; 3]| -> [i64; 3] { p.map(|v| (v / cell).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    for (i, p) in xyz.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i as u32);
    }

    let per_node: Vec<Vec<Edge>> = (0..coords.len())
        .into_par_iter()
        .map(|i| {
            let k = key(&xyz[i]);
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(bucket) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                            continue;
                        };
                        for &j in bucket {
                            if (j as usize) <= i {
                                continue;
                            }
                            let (la1, lo1) = coords[i];
                            let (la2, lo2) = coords[j as usize];
                            let d = haversine_km(la1, lo1, la2, lo2);
                            if d <= params.radius_km {
                                out.push(Edge {
                                    i: i as u32,
                                    j,
                                    weight: (-d / params.sigma_geo_km).exp(),
                                });
                            }
                        }
                    }
                }
            }
            out.sort_unstable_by_key(|e| e.j);
            out
        })
        .collect();

    let edges: Vec<Edge> = per_node.into_iter().flatten().collect();
    let graph = GeoGraph::from_edges(coords.len(), edges)?;
    let isolated = graph.isolated();
    if !isolated.is_empty() {
        log::warn!(
            "radius graph has {} isolated POIs (first: {})",
            isolated.len(),
            isolated[0]
        );
    }
    Ok(graph)
}
