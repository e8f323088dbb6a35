//! Static road-network graph.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One record of an edge list. `cost` is carried along but not used by the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub cost: Option<f64>,
}

/// Undirected graph with binary adjacency `A` and its row-normalized form `D⁻¹A`.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticGraph {
    n_nodes: usize,
    adjacency: Tensor,
    normalized: Tensor,
    edges: Vec<Edge>,
}

impl StaticGraph {
    /// Builds the graph from a validated binary symmetric adjacency.
    pub fn from_adjacency(adjacency: Tensor) -> Result<Self> {
        let normalized = normalize_adjacency(&adjacency)?;
        let n_nodes = adjacency.shape()[0];
        let mut edges = Vec::new();
        for i in 0..n_nodes {
            for j in i + 1..n_nodes {
                if adjacency.data()[i * n_nodes + j] == 1.0 {
                    edges.push(Edge {
                        from: i,
                        to: j,
                        cost: None,
                    });
                }
            }
        }
        Ok(StaticGraph {
            n_nodes,
            adjacency,
            normalized,
            edges,
        })
    }

    /// Builds the symmetric adjacency from an edge list. Duplicate and
    /// reversed edges collapse; self loops are rejected.
    pub fn from_edges(n_nodes: usize, edges: &[Edge]) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Validation("graph must have at least one node".into()));
        }
        let mut a = Tensor::zeros(&[n_nodes, n_nodes]);
        for (k, e) in edges.iter().enumerate() {
            if e.from >= n_nodes || e.to >= n_nodes {
                return Err(Error::Validation(format!(
                    "edge {k} ({}, {}) references a node outside [0, {n_nodes})",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::Validation(format!("edge {k} is a self loop on node {}", e.from)));
            }
            a.data_mut()[e.from * n_nodes + e.to] = 1.0;
            a.data_mut()[e.to * n_nodes + e.from] = 1.0;
        }
        let normalized = normalize_adjacency(&a)?;
        Ok(StaticGraph {
            n_nodes,
            adjacency: a,
            normalized,
            edges: edges.to_vec(),
        })
    }

    /// Path `0 - 1 - ... - (n-1)`.
    pub fn path(n_nodes: usize) -> Result<Self> {
        let edges: Vec<Edge> = (1..n_nodes)
            .map(|i| Edge {
                from: i - 1,
                to: i,
                cost: Some(1.0),
            })
            .collect();
        Self::from_edges(n_nodes, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    /// Row-normalized adjacency `Â`.
    pub fn normalized(&self) -> &Tensor {
        &self.normalized
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn degree(&self, node: usize) -> usize {
        let n = self.n_nodes;
        self.adjacency.data()[node * n..(node + 1) * n]
            .iter()
            .filter(|&&v| v == 1.0)
            .count()
    }
}

/// Computes `D⁻¹A` for a binary, symmetric, zero-diagonal `A`.
///
/// Rows of isolated nodes stay all zero.
pub fn normalize_adjacency(a: &Tensor) -> Result<Tensor> {
    let n = match a.shape() {
        &[n, m] if n == m => n,
        s => return Err(Error::Validation(format!("adjacency must be square, got shape {s:?}"))),
    };
    let d = a.data();
    let mut bad: Vec<String> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let v = d[i * n + j];
            if v != 0.0 && v != 1.0 {
                bad.push(format!("({i},{j})={v} not binary"));
            } else if i == j && v != 0.0 {
                bad.push(format!("({i},{i}) diagonal set"));
            } else if j > i && v != d[j * n + i] {
                bad.push(format!("({i},{j})/({j},{i}) asymmetric"));
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(format!("invalid adjacency: {}", bad.join(", "))));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let degree: f64 = row.iter().sum();
        if degree > 0.0 {
            row.iter_mut().for_each(|v| *v /= degree);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let a = t(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(normalize_adjacency(&a).unwrap(), a);

        let a = t(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let expected = t(&[&[0.0, 0.5, 0.5], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_eq!(normalize_adjacency(&a).unwrap(), expected);
    }

    #[test]
    fn isolated_node_keeps_zero_row() {
        let a = t(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]);
        let n = normalize_adjacency(&a).unwrap();
        assert_eq!(n.data(), a.data());
    }

    #[test]
    fn rejects_asymmetric_and_non_binary() {
        let err = normalize_adjacency(&t(&[&[0.0, 1.0], &[0.0, 0.0]])).unwrap_err();
        assert!(format!("{err}").contains("(0,1)"));
        let err = normalize_adjacency(&t(&[&[0.0, 0.5], &[0.5, 0.0]])).unwrap_err();
        assert!(format!("{err}").contains("not binary"));
        assert!(normalize_adjacency(&t(&[&[1.0, 0.0], &[0.0, 0.0]])).is_err());
    }

    #[test]
    fn edges_are_idempotent() {
        let one = StaticGraph::from_edges(
            2,
            &[Edge {
                from: 0,
                to: 1,
                cost: None,
            }],
        )
        .unwrap();
        assert_eq!(one.adjacency(), &t(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let dup = StaticGraph::from_edges(
            2,
            &[
                Edge {
                    from: 0,
                    to: 1,
                    cost: Some(3.0),
                },
                Edge {
                    from: 1,
                    to: 0,
                    cost: Some(3.0),
                },
            ],
        )
        .unwrap();
        assert_eq!(dup.adjacency(), one.adjacency());
        assert!(StaticGraph::from_edges(
            2,
            &[Edge {
                from: 0,
                to: 2,
                cost: None
            }]
        )
        .is_err());
    }

    #[test]
    fn path_graph_degrees() {
        let g = StaticGraph::path(4).unwrap();
        assert_eq!((0..4).map(|i| g.degree(i)).collect::<Vec<_>>(), [1, 2, 2, 1]);
        assert_eq!(g.normalized().at(&[1, 0]), 0.5);
    }
}
