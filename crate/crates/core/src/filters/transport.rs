//! Discrete optimal transport on the dense transportation polytope.
//!
//! The exact solver is a network simplex specialised to the bipartite
//! transportation problem: northwest-corner start, spanning-tree basis,
//! most-negative-reduced-cost pivoting with lowest-index tie breaking for
//! determinism. The entropic (Sinkhorn) solver is the optional regularised
//! alternative.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Nonnegative transport plan with prescribed row and column marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    t: DMatrix<f64>,
}

impl CouplingMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.t
    }

    /// Largest violation of the prescribed marginals.
    pub fn marginal_defect(&self, row_marginals: &DVector<f64>, col_marginals: &DVector<f64>) -> f64 {
        let mut defect = 0.0f64;
        for i in 0..self.t.nrows() {
            defect = defect.max((self.t.row(i).sum() - row_marginals[i]).abs());
        }
        for j in 0..self.t.ncols() {
            defect = defect.max((self.t.column(j).sum() - col_marginals[j]).abs());
        }
        defect
    }
}

/// Transport cost of a plan.
pub fn transport_objective(cost: &DMatrix<f64>, plan: &CouplingMatrix) -> f64 {
    cost.zip_fold(plan.matrix(), 0.0, |acc, c, t| acc + c * t)
}

fn validate_marginals(cost: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> Result<(f64, f64)> {
    if cost.nrows() != a.len() || cost.ncols() != b.len() {
        return Err(Error::DimensionMismatch("cost matrix does not match marginals".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Transport("cost entries must be finite".into()));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Transport("marginals must be nonnegative".into()));
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    if (sa - sb).abs() > 1e-9 || sa <= 0.0 {
        return Err(Error::Transport(format!(
            "marginals are infeasible: row sum {sa}, column sum {sb}"
        )));
    }
    Ok((sa, sb))
}

/// Exact minimiser of `sum t_ij c_ij` over couplings with the given
/// marginals. Returns an optimal vertex of the transportation polytope.
pub fn solve_ot(cost: &DMatrix<f64>, row_marginals: &DVector<f64>, col_marginals: &DVector<f64>) -> Result<CouplingMatrix> {
    let (sa, sb) = validate_marginals(cost, row_marginals, col_marginals)?;
    let m = row_marginals.len();
    let n = col_marginals.len();
    let a = row_marginals.clone();
    // Rescale the column side so supply and demand balance exactly.
    let b = col_marginals * (sa / sb);

    let mut simplex = TransportSimplex::new(cost, &a, &b);
    simplex.solve()?;
    Ok(CouplingMatrix { t: simplex.plan(m, n) })
}

/// Spanning-tree network simplex state.
struct TransportSimplex<'c> {
    cost: &'c DMatrix<f64>,
    m: usize,
    n: usize,
    /// Basic arcs (row, col, flow); always m + n - 1 of them, forming a
    /// spanning tree over the m + n nodes.
    basis: Vec<(usize, usize, f64)>,
    tol: f64,
}

impl<'c> TransportSimplex<'c> {
    fn new(cost: &'c DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> Self {
        let m = a.len();
        let n = b.len();
        // Northwest-corner start: a staircase of m + n - 1 basic arcs.
        let mut basis = Vec::with_capacity(m + n - 1);
        let (mut i, mut j) = (0usize, 0usize);
        let mut remaining_a = a[0];
        let mut remaining_b = b[0];
        loop {
            let f = remaining_a.min(remaining_b).max(0.0);
            basis.push((i, j, f));
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (remaining_a <= remaining_b && i < m - 1) || j == n - 1 {
                remaining_b -= f;
                i += 1;
                remaining_a = a[i];
            } else {
                remaining_a -= f;
                j += 1;
                remaining_b = b[j];
            }
        }
        let tol = 1e-12 * (1.0 + cost.amax());
        Self { cost, m, n, basis, tol }
    }

    /// Node ids: rows are 0..m, columns are m..m+n.
    fn adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j, _)) in self.basis.iter().enumerate() {
            adj[i].push((self.m + j, k));
            adj[self.m + j].push((i, k));
        }
        adj
    }

    /// Dual potentials from the tree: u_i + v_j = c_ij on basic arcs.
    fn potentials(&self, adj: &[Vec<(usize, usize)>]) -> (Vec<f64>, Vec<f64>) {
        let mut u = vec![0.0; self.m];
        let mut v = vec![0.0; self.n];
        let mut seen = vec![false; self.m + self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(node) = stack.pop() {
            for &(other, k) in &adj[node] {
                if seen[other] {
                    continue;
                }
                seen[other] = true;
                let (i, j, _) = self.basis[k];
                if other >= self.m {
                    v[other - self.m] = self.cost[(i, j)] - u[i];
                } else {
                    u[other] = self.cost[(i, j)] - v[j];
                }
                stack.push(other);
            }
        }
        (u, v)
    }

    fn entering_arc(&self, u: &[f64], v: &[f64]) -> Option<(usize, usize)> {
        let mut best = -self.tol;
        let mut arc = None;
        for i in 0..self.m {
            for j in 0..self.n {
                let rc = self.cost[(i, j)] - u[i] - v[j];
                if rc < best {
                    best = rc;
                    arc = Some((i, j));
                }
            }
        }
        arc
    }

    /// Unique tree path between two nodes as a list of basis-arc indices.
    fn tree_path(&self, adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.m + self.n];
        let mut seen = vec![false; self.m + self.n];
        let mut queue = std::collections::VecDeque::from([from]);
        seen[from] = true;
        while let Some(node) = queue.pop_front() {
            if node == to {
                break;
            }
            for &(other, k) in &adj[node] {
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((node, k));
                    queue.push_back(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = to;
        while node != from {
            let (prev, k) = parent[node].expect("basis must span all nodes");
            path.push(k);
            node = prev;
        }
        path.reverse();
        path
    }

    fn solve(&mut self) -> Result<()> {
        let max_pivots = 200 * (self.m + self.n) * (self.m + self.n) + 1000;
        for _ in 0..max_pivots {
            let adj = self.adjacency();
            let (u, v) = self.potentials(&adj);
            let Some((ei, ej)) = self.entering_arc(&u, &v) else {
                return Ok(());
            };
            // Close the cycle: entering arc plus the tree path from its row
            // node to its column node. Walking from the row end, arcs at even
            // positions oppose the entering direction.
            let path = self.tree_path(&adj, ei, self.m + ej);
            let mut theta = f64::INFINITY;
            let mut leaving: Option<usize> = None;
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    let (bi, bj, flow) = self.basis[k];
                    let better = flow < theta - 1e-15
                        || ((flow - theta).abs() <= 1e-15
                            && leaving.map_or(true, |cur| {
                                let (ci, cj, _) = self.basis[cur];
                                (bi, bj) < (ci, cj)
                            }));
                    if better {
                        theta = flow;
                        leaving = Some(k);
                    }
                }
            }
            let leaving = leaving.ok_or_else(|| Error::Transport("degenerate pivot cycle".into()))?;
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    self.basis[k].2 = (self.basis[k].2 - theta).max(0.0);
                } else {
                    self.basis[k].2 += theta;
                }
            }
            self.basis[leaving] = (ei, ej, theta);
        }
        Err(Error::Transport("network simplex exceeded its pivot budget".into()))
    }

    fn plan(&self, m: usize, n: usize) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(m, n);
        for &(i, j, f) in &self.basis {
            t[(i, j)] += f.max(0.0);
        }
        t
    }
}

/// Entropic-regularised coupling via Sinkhorn iterations. `lambda` falls back
/// to 0.05 times the median cost; iteration stops once the marginal defect is
/// at most 1e-8 and fails after 10^4 sweeps.
pub fn solve_ot_sinkhorn(
    cost: &DMatrix<f64>,
    row_marginals: &DVector<f64>,
    col_marginals: &DVector<f64>,
    lambda: Option<f64>,
) -> Result<CouplingMatrix> {
    let (sa, sb) = validate_marginals(cost, row_marginals, col_marginals)?;
    let a = row_marginals.clone();
    let b = col_marginals * (sa / sb);

    let lambda = match lambda {
        Some(l) if l > 0.0 => l,
        Some(l) => return Err(Error::Transport(format!("regularisation must be positive, got {l}"))),
        None => {
            let mut entries: Vec<f64> = cost.iter().cloned().collect();
            entries.sort_by(f64::total_cmp);
            let median = entries[entries.len() / 2];
            let fallback = cost.amax().max(1e-12);
            0.05 * if median > 0.0 { median } else { fallback }
        }
    };

    let kernel = cost.map(|c| (-c / lambda).exp());
    let (m, n) = (a.len(), b.len());
    let mut u = DVector::from_element(m, 1.0);
    let mut v = DVector::from_element(n, 1.0);
    let safe_div = |num: f64, den: f64| if num == 0.0 { 0.0 } else { num / den };
    for sweep in 0..10_000 {
        let kv = &kernel * &v;
        for i in 0..m {
            u[i] = safe_div(a[i], kv[i]);
        }
        let ktu = kernel.transpose() * &u;
        for j in 0..n {
            v[j] = safe_div(b[j], ktu[j]);
        }
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Transport("sinkhorn scaling diverged; decrease the cost/lambda ratio".into()));
        }
        if sweep % 10 == 9 || sweep == 0 {
            let plan = assemble(&kernel, &u, &v);
            if plan.marginal_defect(&a, &b) <= 1e-8 {
                return Ok(plan);
            }
        }
    }
    let plan = assemble(&kernel, &u, &v);
    if plan.marginal_defect(&a, &b) <= 1e-8 {
        Ok(plan)
    } else {
        Err(Error::Transport("sinkhorn did not reach the marginal tolerance".into()))
    }
}

fn assemble(kernel: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>) -> CouplingMatrix {
    let mut t = kernel.clone();
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            t[(i, j)] *= u[i] * v[j];
        }
    }
    CouplingMatrix { t }
}
