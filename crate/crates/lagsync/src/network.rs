//! Directed communication topology: follower-subnetwork Laplacian, root
//! reachability, and the positive diagonal scaling D with
//! H^T D + D H >= 2 I that the observer analysis requires.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid digraph: {0}")]
    InvalidGraph(String),
    #[error("graph has no spanning tree rooted at the leader (node 0)")]
    NotRootReachable,
    #[error("diagonal-scaling search stalled with min-eig {0:.3e} <= 0")]
    NoCandidateFound(f64),
}

/// One weighted communication link `from -> to`. Node 0 is the leader;
/// followers are 1..=N. Edges into node 0 are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Leader-plus-followers digraph. Adjacency convention: `a[i][j]` is the
/// weight of the edge j -> i, so row i lists the in-neighbors of agent i.
#[derive(Debug, Clone, PartialEq)]
pub struct Digraph {
    n_followers: usize,
    edges: Vec<Edge>,
    in_neighbors: Vec<Vec<(usize, f64)>>,
}

impl Digraph {
    pub fn new(n_followers: usize, edges: Vec<Edge>) -> Result<Self, NetworkError> {
        if n_followers == 0 {
            return Err(NetworkError::InvalidGraph(
                "need at least one follower".into(),
            ));
        }
        let n = n_followers;
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if e.from > n || e.to > n {
                return Err(NetworkError::InvalidGraph(format!(
                    "edge {} -> {} references a node beyond N = {n}",
                    e.from, e.to
                )));
            }
            if e.to == 0 {
                return Err(NetworkError::InvalidGraph(format!(
                    "edge {} -> 0 feeds back into the leader",
                    e.from
                )));
            }
            if e.from == e.to {
                return Err(NetworkError::InvalidGraph(format!("self-loop at {}", e.to)));
            }
            if !(e.weight > 0.0) || !e.weight.is_finite() {
                return Err(NetworkError::InvalidGraph(format!(
                    "edge {} -> {} has non-positive weight {}",
                    e.from, e.to, e.weight
                )));
            }
            if !seen.insert((e.from, e.to)) {
                return Err(NetworkError::InvalidGraph(format!(
                    "duplicate edge {} -> {}",
                    e.from, e.to
                )));
            }
        }
        let mut in_neighbors = vec![Vec::new(); n + 1];
        for e in &edges {
            in_neighbors[e.to].push((e.from, e.weight));
        }
        for nbrs in &mut in_neighbors {
            nbrs.sort_by_key(|&(j, _)| j);
        }
        Ok(Self {
            n_followers,
            edges,
            in_neighbors,
        })
    }

    pub fn n_followers(&self) -> usize {
        self.n_followers
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// In-neighbors of agent i as (source node, weight a_ij) pairs.
    pub fn in_neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.in_neighbors[i]
    }
}

/// Follower-subnetwork Laplacian: h_ii = sum_j a_ij (leader included),
/// h_ij = -a_ij for i != j >= 1. Row i therefore sums to a_i0.
pub fn laplacian(g: &Digraph) -> DMatrix<f64> {
    let n = g.n_followers();
    let mut h = DMatrix::zeros(n, n);
    for i in 1..=n {
        for &(j, w) in g.in_neighbors(i) {
            h[(i - 1, i - 1)] += w;
            if j >= 1 {
                h[(i - 1, j - 1)] -= w;
            }
        }
    }
    h
}

/// True iff every follower is reachable from the leader along directed
/// edges, i.e. the graph contains a spanning tree rooted at node 0.
pub fn has_root_spanning_tree(g: &Digraph) -> bool {
    let n = g.n_followers();
    let mut out = vec![Vec::new(); n + 1];
    for e in g.edges() {
        out[e.from].push(e.to);
    }
    let mut seen = vec![false; n + 1];
    seen[0] = true;
    let mut queue = VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &v in &out[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Smallest eigenvalue of H^T D + D H for diagonal D (symmetric by
/// construction, so a dense symmetric eigensolver applies).
pub fn verify_scaling(h: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    let n = h.nrows();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // (H^T D)_{ij} + (D H)_{ij} = d_j h_{ji} + d_i h_{ij}
            m[(i, j)] = d[j] * h[(j, i)] + d[i] * h[(i, j)];
        }
    }
    m.symmetric_eigen().eigenvalues.min()
}

/// Positive diagonal D with min-eig(H^T D + D H) in [2 - tol, ~2].
///
/// Candidate search: solve H^T w = 1; if w is elementwise positive and
/// already yields a positive-definite symmetrization, rescale it by
/// 2/lambda_min. Otherwise fall back to projected coordinate ascent on the
/// minimum eigenvalue starting from the identity. D is not unique; only the
/// postcondition matters.
pub fn compute_scaling_d(g: &Digraph, tol: f64) -> Result<DVector<f64>, NetworkError> {
    if !has_root_spanning_tree(g) {
        return Err(NetworkError::NotRootReachable);
    }
    let h = laplacian(g);
    let n = h.nrows();

    let mut candidate: Option<DVector<f64>> = h
        .transpose()
        .lu()
        .solve(&DVector::from_element(n, 1.0))
        .filter(|w| w.iter().all(|&x| x > 1e-12));
    if let Some(w) = &candidate {
        if verify_scaling(&h, w) <= 0.0 {
            candidate = None;
        }
    }
    let dbar = match candidate {
        Some(w) => w,
        None => ascend_min_eig(&h)?,
    };
    let lam_m = verify_scaling(&h, &dbar);
    if lam_m <= 0.0 {
        return Err(NetworkError::NoCandidateFound(lam_m));
    }
    let d = dbar.map(|x| 2.0 * x / lam_m);
    let check = verify_scaling(&h, &d);
    if check < 2.0 - tol {
        return Err(NetworkError::NoCandidateFound(check));
    }
    Ok(d)
}

/// Coordinate ascent on min-eig(H^T D + D H) over positive diagonals.
fn ascend_min_eig(h: &DMatrix<f64>) -> Result<DVector<f64>, NetworkError> {
    let n = h.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut best = verify_scaling(h, &d);
    for _ in 0..200 {
        let mut improved = false;
        for i in 0..n {
            for factor in [2.0, 0.5, 1.25, 0.8] {
                let mut trial = d.clone();
                trial[i] = (trial[i] * factor).max(1e-9);
                let val = verify_scaling(h, &trial);
                if val > best + 1e-12 {
                    best = val;
                    d = trial;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
    if best <= 0.0 {
        return Err(NetworkError::NoCandidateFound(best));
    }
    Ok(d)
}

/// Topology summary consumed by the observer and the reports.
#[derive(Debug, Clone)]
pub struct LaplacianBundle {
    pub h: DMatrix<f64>,
    pub d: DVector<f64>,
    pub min_eig: f64,
    pub root_reachable: bool,
    /// False when a user-supplied D override failed the >= 2 - tol check;
    /// the override is kept so the run reproduces what was asked for, and
    /// reports flag the discrepancy.
    pub d_verified: bool,
}

impl LaplacianBundle {
    pub fn build(
        g: &Digraph,
        tol: f64,
        d_override: Option<&[f64]>,
    ) -> Result<Self, NetworkError> {
        let root_reachable = has_root_spanning_tree(g);
        let h = laplacian(g);
        match d_override {
            Some(diag) => {
                if diag.len() != g.n_followers() {
                    return Err(NetworkError::InvalidGraph(format!(
                        "D override has {} entries for {} followers",
                        diag.len(),
                        g.n_followers()
                    )));
                }
                if diag.iter().any(|&x| !(x > 0.0)) {
                    return Err(NetworkError::InvalidGraph(
                        "D override must be strictly positive".into(),
                    ));
                }
                let d = DVector::from_column_slice(diag);
                let min_eig = verify_scaling(&h, &d);
                Ok(Self {
                    h,
                    d,
                    min_eig,
                    root_reachable,
                    d_verified: min_eig >= 2.0 - tol,
                })
            }
            None => {
                let d = compute_scaling_d(g, tol)?;
                let min_eig = verify_scaling(&h, &d);
                Ok(Self {
                    h,
                    d,
                    min_eig,
                    root_reachable,
                    d_verified: true,
                })
            }
        }
    }

    pub fn d_max(&self) -> f64 {
        self.d.max()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize, f64)]) -> Digraph {
        Digraph::new(
            n,
            edges
                .iter()
                .map(|&(from, to, weight)| Edge { from, to, weight })
                .collect(),
        )
        .unwrap()
    }

    /// The scenario topology used throughout: a chain from the leader plus
    /// one shortcut edge 0 -> 4.
    pub(crate) fn six_agent_chain() -> Digraph {
        graph(
            6,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (2, 3, 1.0),
                (3, 4, 1.0),
                (4, 5, 1.0),
                (5, 6, 1.0),
                (0, 4, 1.0),
            ],
        )
    }

    #[test]
    fn laplacian_chain() {
        let g = graph(2, &[(0, 1, 1.0), (1, 2, 1.0)]);
        let h = laplacian(&g);
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 1.0]));
    }

    #[test]
    fn laplacian_star_is_identity() {
        let g = graph(3, &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)]);
        assert_eq!(laplacian(&g), DMatrix::identity(3, 3));
    }

    #[test]
    fn digraph_rejects_malformed() {
        assert!(Digraph::new(2, vec![Edge { from: 1, to: 1, weight: 1.0 }]).is_err());
        assert!(Digraph::new(2, vec![Edge { from: 1, to: 0, weight: 1.0 }]).is_err());
        assert!(Digraph::new(2, vec![Edge { from: 0, to: 1, weight: 0.0 }]).is_err());
        assert!(Digraph::new(2, vec![Edge { from: 0, to: 3, weight: 1.0 }]).is_err());
        assert!(Digraph::new(
            2,
            vec![
                Edge { from: 0, to: 1, weight: 1.0 },
                Edge { from: 0, to: 1, weight: 2.0 }
            ]
        )
        .is_err());
    }

    #[test]
    fn spanning_tree_detection() {
        assert!(has_root_spanning_tree(&graph(2, &[(0, 1, 1.0), (1, 2, 1.0)])));
        // node 0 isolated
        assert!(!has_root_spanning_tree(&graph(
            2,
            &[(1, 2, 1.0), (2, 1, 1.0)]
        )));
    }

    #[test]
    fn six_agent_chain_spectrum_positive() {
        let g = six_agent_chain();
        assert!(has_root_spanning_tree(&g));
        let h = laplacian(&g);
        for ev in h.complex_eigenvalues().iter() {
            assert!(ev.re > 1e-9, "eigenvalue {ev} not in the open right half-plane");
        }
    }

    #[test]
    fn identity_laplacian_takes_identity_scaling() {
        let g = graph(2, &[(0, 1, 1.0), (0, 2, 1.0)]);
        assert_eq!(laplacian(&g), DMatrix::identity(2, 2));
        let d = compute_scaling_d(&g, 1e-9).unwrap();
        let h = laplacian(&g);
        // any positive multiple of the identity works; check the postcondition
        assert!((verify_scaling(&h, &d) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn two_agent_chain_matches_hand_computation() {
        let g = graph(2, &[(0, 1, 1.0), (1, 2, 1.0)]);
        let h = laplacian(&g);
        // H^T w = 1 gives the candidate diag(2, 1)
        let dbar = DVector::from_vec(vec![2.0, 1.0]);
        let lam = verify_scaling(&h, &dbar);
        assert!((lam - (3.0 - 2f64.sqrt())).abs() < 1e-12);
        let d = compute_scaling_d(&g, 1e-9).unwrap();
        assert!((d[0] - 2.5224).abs() < 1e-4, "d0 = {}", d[0]);
        assert!((d[1] - 1.2612).abs() < 1e-4, "d1 = {}", d[1]);
        assert!((verify_scaling(&h, &d) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn paper_scaling_override_verifies_on_six_agent_chain() {
        let g = six_agent_chain();
        let bundle = LaplacianBundle::build(&g, 1e-9, Some(&[8.0; 6])).unwrap();
        assert!(bundle.d_verified);
        assert!(bundle.min_eig >= 2.0, "min_eig = {}", bundle.min_eig);
    }

    #[test]
    fn unreachable_graph_is_rejected() {
        let g = graph(2, &[(1, 2, 1.0), (2, 1, 1.0)]);
        assert_eq!(
            compute_scaling_d(&g, 1e-9),
            Err(NetworkError::NotRootReachable)
        );
    }

    /// Random digraph on n followers whose first edges form a tree rooted
    /// at the leader; extra edges are sprinkled on top.
    pub(crate) fn random_rooted_digraph<R: Rng>(rng: &mut R, n: usize) -> Digraph {
        let mut edges = Vec::new();
        for i in 1..=n {
            let parent = rng.gen_range(0..i);
            edges.push(Edge {
                from: parent,
                to: i,
                weight: rng.gen_range(0.2..3.0),
            });
        }
        for _ in 0..rng.gen_range(0..2 * n) {
            let from = rng.gen_range(0..=n);
            let to = rng.gen_range(1..=n);
            if from != to && !edges.iter().any(|e| e.from == from && e.to == to) {
                edges.push(Edge {
                    from,
                    to,
                    weight: rng.gen_range(0.2..3.0),
                });
            }
        }
        Digraph::new(n, edges).unwrap()
    }

    #[test]
    fn random_rooted_digraphs_scale_to_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let n = rng.gen_range(1..=10);
            let g = random_rooted_digraph(&mut rng, n);
            let h = laplacian(&g);
            let d = compute_scaling_d(&g, 1e-9)
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            let me = verify_scaling(&h, &d);
            assert!(
                (2.0 - 1e-9..=2.0 + 1e-6).contains(&me),
                "trial {trial}: min-eig {me}"
            );
        }
    }

    #[test]
    fn row_sums_equal_leader_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..=10);
            let g = random_rooted_digraph(&mut rng, n);
            let h = laplacian(&g);
            for i in 1..=n {
                let a_i0: f64 = g
                    .in_neighbors(i)
                    .iter()
                    .filter(|&&(j, _)| j == 0)
                    .map(|&(_, w)| w)
                    .sum();
                let row_sum: f64 = (0..n).map(|j| h[(i - 1, j)]).sum();
                assert!((row_sum - a_i0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reachability_matches_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut reachable_seen = 0;
        let mut unreachable_seen = 0;
        for _ in 0..200 {
            let n = rng.gen_range(2..=8);
            // random edge soup, not necessarily rooted
            let mut edges = Vec::new();
            for _ in 0..rng.gen_range(1..3 * n) {
                let from = rng.gen_range(0..=n);
                let to = rng.gen_range(1..=n);
                if from != to && !edges.iter().any(|e: &Edge| e.from == from && e.to == to) {
                    edges.push(Edge {
                        from,
                        to,
                        weight: rng.gen_range(0.2..3.0),
                    });
                }
            }
            let Ok(g) = Digraph::new(n, edges) else { continue };
            let reach = has_root_spanning_tree(&g);
            let all_positive = laplacian(&g)
                .complex_eigenvalues()
                .iter()
                .all(|ev| ev.re > 1e-9);
            assert_eq!(reach, all_positive, "n = {n}, edges = {:?}", g.edges());
            if reach {
                reachable_seen += 1;
            } else {
                unreachable_seen += 1;
            }
        }
        assert!(reachable_seen > 10 && unreachable_seen > 10);
    }
}
