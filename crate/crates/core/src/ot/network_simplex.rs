//! Primal network simplex for the transportation problem.
//!
//! Nodes `0..n` are sources with supply `a_i`, nodes `n..n+m` are sinks with
//! demand `b_j`, and node `n+m` is an artificial root. Real arcs `i -> n+j`
//! (index `i*m + j`) are uncapacitated; each node starts attached to the root
//! by an artificial arc, which yields a strongly feasible initial tree. The
//! leaving-arc rule keeps the tree strongly feasible, so degenerate pivots
//! cannot cycle.
//!
//! Entering arcs are priced by block search: blocks of `max(sqrt(n m), 10)`
//! arcs are scanned cyclically and the most negative reduced cost in the first
//! block that has one wins, ties going to the lowest arc index.
//!
//! The tree is stored as parent pointers plus per-node incidence lists; after a
//! pivot the re-hung subtree is walked once to refresh parents, depths and
//! potentials.

use ndarray::{Array1, Array2, ArrayView1};

use super::{check_balanced, check_dims, CostMatrix, Potentials, SolverTag, TransportPlan};
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

struct NetworkSimplex<'a> {
    n: usize,
    m: usize,
    cost: &'a [f64],
    root: usize,
    real_arcs: usize,
    art_cost: f64,
    // artificial arc of node u points u -> root when true
    art_up: Vec<bool>,
    flow: Vec<f64>,
    in_tree: Vec<bool>,
    parent: Vec<usize>,
    pred: Vec<usize>,
    pred_up: Vec<bool>,
    depth: Vec<usize>,
    pi: Vec<f64>,
    adj: Vec<Vec<usize>>,
    next_arc: usize,
    block: usize,
    eps: f64,
    stack: Vec<usize>,
}

impl<'a> NetworkSimplex<'a> {
    fn new(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &'a [f64]) -> Self {
        let (n, m) = (a.len(), b.len());
        let nodes = n + m;
        let root = nodes;
        let real_arcs = n * m;
        let max_cost = cost.iter().copied().fold(0.0, f64::max);
        let art_cost = (max_cost + 1.0) * (nodes as f64 + 1.0);

        let mut s = Self {
            n,
            m,
            cost,
            root,
            real_arcs,
            art_cost,
            art_up: vec![true; nodes],
            flow: vec![0.0; real_arcs + nodes],
            in_tree: vec![false; real_arcs + nodes],
            parent: vec![NONE; nodes + 1],
            pred: vec![NONE; nodes + 1],
            pred_up: vec![false; nodes + 1],
            depth: vec![0; nodes + 1],
            pi: vec![0.0; nodes + 1],
            adj: vec![Vec::new(); nodes + 1],
            next_arc: 0,
            block: ((real_arcs as f64).sqrt().ceil() as usize).max(10),
            eps: 1e-12 * max_cost.max(1.0),
            stack: Vec::new(),
        };
        for u in 0..nodes {
            let supply = if u < n { a[u] } else { -b[u - n] };
            let e = real_arcs + u;
            s.parent[u] = root;
            s.pred[u] = e;
            s.depth[u] = 1;
            s.in_tree[e] = true;
            s.adj[u].push(e);
            s.adj[root].push(e);
            if supply >= 0.0 {
                s.art_up[u] = true;
                s.pred_up[u] = true;
                s.flow[e] = supply;
                s.pi[u] = 0.0;
            } else {
                s.art_up[u] = false;
                s.pred_up[u] = false;
                s.flow[e] = -supply;
                s.pi[u] = art_cost;
            }
        }
        s
    }

    #[inline]
    fn source(&self, e: usize) -> usize {
        if e < self.real_arcs {
            e / self.m
        } else if self.art_up[e - self.real_arcs] {
            e - self.real_arcs
        } else {
            self.root
        }
    }

    #[inline]
    fn target(&self, e: usize) -> usize {
        if e < self.real_arcs {
            self.n + e % self.m
        } else if self.art_up[e - self.real_arcs] {
            self.root
        } else {
            e - self.real_arcs
        }
    }

    #[inline]
    fn arc_cost(&self, e: usize) -> f64 {
        if e < self.real_arcs {
            self.cost[e]
        } else if self.art_up[e - self.real_arcs] {
            0.0
        } else {
            self.art_cost
        }
    }

    fn find_entering(&mut self) -> Option<usize> {
        let total = self.real_arcs;
        let mut best: Option<(f64, usize)> = None;
        let mut remaining = self.block;
        let mut e = self.next_arc;
        let (mut i, mut j) = (e / self.m, e % self.m);
        for _ in 0..total {
            if !self.in_tree[e] {
                let c = self.cost[e] + self.pi[i] - self.pi[self.n + j];
                if c < -self.eps {
                    let better = match best {
                        None => true,
                        Some((bc, be)) => c < bc || (c == bc && e < be),
                    };
                    if better {
                        best = Some((c, e));
                    }
                }
            }
            e += 1;
            j += 1;
            if j == self.m {
                j = 0;
                i += 1;
            }
            if e == total {
                e = 0;
                i = 0;
                j = 0;
            }
            remaining -= 1;
            if remaining == 0 {
                if best.is_some() {
                    break;
                }
                remaining = self.block;
            }
        }
        self.next_arc = e;
        best.map(|(_, e)| e)
    }

    fn find_join(&self, mut u: usize, mut v: usize) -> usize {
        while u != v {
            if self.depth[u] > self.depth[v] {
                u = self.parent[u];
            } else if self.depth[v] > self.depth[u] {
                v = self.parent[v];
            } else {
                u = self.parent[u];
                v = self.parent[v];
            }
        }
        u
    }

    /// Returns `(delta, u_out, leaving arc found on the source side)`.
    fn find_leaving(&self, first: usize, second: usize, join: usize) -> Option<(f64, usize, bool)> {
        let mut delta = f64::INFINITY;
        let mut u_out = NONE;
        let mut on_first = false;
        let mut u = first;
        while u != join {
            if self.pred_up[u] {
                let d = self.flow[self.pred[u]].max(0.0);
                if d < delta {
                    delta = d;
                    u_out = u;
                    on_first = true;
                }
            }
            u = self.parent[u];
        }
        let mut u = second;
        while u != join {
            if !self.pred_up[u] {
                let d = self.flow[self.pred[u]].max(0.0);
                if d <= delta {
                    delta = d;
                    u_out = u;
                    on_first = false;
                }
            }
            u = self.parent[u];
        }
        (u_out != NONE).then_some((delta, u_out, on_first))
    }

    fn change_flow(&mut self, in_arc: usize, first: usize, second: usize, join: usize, delta: f64) {
        if delta > 0.0 {
            self.flow[in_arc] += delta;
            let mut u = first;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] -= delta;
                } else {
                    self.flow[e] += delta;
                }
                u = self.parent[u];
            }
            let mut u = second;
            while u != join {
                let e = self.pred[u];
                if self.pred_up[u] {
                    self.flow[e] += delta;
                } else {
                    self.flow[e] -= delta;
                }
                u = self.parent[u];
            }
        }
    }

    fn update_tree(&mut self, in_arc: usize, u_in: usize, v_in: usize, u_out: usize) {
        let out_arc = self.pred[u_out];
        let out_parent = self.parent[u_out];
        self.flow[out_arc] = 0.0;
        self.in_tree[out_arc] = false;
        for node in [u_out, out_parent] {
            let list = &mut self.adj[node];
            let pos = list.iter().position(|&x| x == out_arc).expect("tree arc is incident");
            list.swap_remove(pos);
        }
        self.in_tree[in_arc] = true;
        self.adj[u_in].push(in_arc);
        self.adj[v_in].push(in_arc);

        self.attach(u_in, v_in, in_arc);
        let mut stack = std::mem::take(&mut self.stack);
        stack.clear();
        stack.push(u_in);
        while let Some(w) = stack.pop() {
            for k in 0..self.adj[w].len() {
                let e = self.adj[w][k];
                if e == self.pred[w] {
                    continue;
                }
                let child = if self.source(e) == w { self.target(e) } else { self.source(e) };
                self.attach(child, w, e);
                stack.push(child);
            }
        }
        self.stack = stack;
    }

    #[inline]
    fn attach(&mut self, child: usize, parent: usize, e: usize) {
        let up = self.source(e) == child;
        self.parent[child] = parent;
        self.pred[child] = e;
        self.pred_up[child] = up;
        self.depth[child] = self.depth[parent] + 1;
        self.pi[child] = if up { self.pi[parent] - self.arc_cost(e) } else { self.pi[parent] + self.arc_cost(e) };
    }

    fn run(&mut self) -> Result<usize> {
        let max_pivots = 200 * (self.real_arcs + self.n + self.m) + 100_000;
        let mut pivots = 0;
        while let Some(in_arc) = self.find_entering() {
            let first = self.source(in_arc);
            let second = self.target(in_arc);
            let join = self.find_join(first, second);
            let (delta, u_out, on_first) =
                self.find_leaving(first, second, join).ok_or_else(|| Error::SolverFailure("unbounded pivot cycle".into()))?;
            self.change_flow(in_arc, first, second, join, delta);
            let (u_in, v_in) = if on_first { (first, second) } else { (second, first) };
            self.update_tree(in_arc, u_in, v_in, u_out);
            pivots += 1;
            if pivots > max_pivots {
                return Err(Error::SolverFailure(format!("no convergence after {pivots} pivots")));
            }
        }
        Ok(pivots)
    }
}

/// Solves `min <pi, C>` over couplings with marginals `a` and `b`.
pub fn solve_exact(a: ArrayView1<f64>, b: ArrayView1<f64>, cost: &CostMatrix) -> Result<TransportPlan> {
    check_dims(a, b, cost)?;
    let (mass, _) = check_balanced(a, b)?;
    let values = cost.values();
    let owned;
    let flat: &[f64] = match values.as_slice() {
        Some(s) => s,
        None => {
            owned = values.iter().copied().collect::<Vec<_>>();
            &owned
        }
    };
    let (n, m) = (a.len(), b.len());
    let mut ns = NetworkSimplex::new(a, b, flat);
    let pivots = ns.run()?;

    let artificial: f64 = (0..n + m).filter(|&u| !ns.art_up[u]).map(|u| ns.flow[ns.real_arcs + u].max(0.0)).sum();
    if artificial > 1e-9 * mass.max(1.0) {
        return Err(Error::SolverFailure(format!("infeasible transport: {artificial} mass left on artificial arcs")));
    }

    let coupling = Array2::from_shape_vec((n, m), ns.flow[..n * m].iter().map(|f| f.max(0.0)).collect()).expect("shape matches buffer");
    let objective = coupling.iter().zip(flat).map(|(p, c)| p * c).sum();
    let mut plan = TransportPlan::from_coupling(coupling, objective, SolverTag::Exact);
    plan.iterations = pivots;
    plan.potentials =
        Some(Potentials { source: Array1::from_iter((0..n).map(|i| -ns.pi[i])), target: Array1::from_iter((0..m).map(|j| ns.pi[n + j])) });
    Ok(plan)
}
