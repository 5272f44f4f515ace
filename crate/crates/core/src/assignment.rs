//! Exact linear sum assignment.
//!
//! Jonker-Volgenant: column reduction with reduction transfer, two rounds of
//! augmenting row reduction, then Dijkstra-style shortest augmenting paths for
//! the rows still free. A final pass moves to the lexicographically smallest
//! permutation among the optimal ones. Costs can be a dense matrix or computed
//! row by row from two point sets, which keeps the 10,000-point evaluation free
//! of an `n^2` buffer.

use crate::error::{check_dim, Result, VdtError};
use crate::points::{sq_dist, Points};
use crate::scalar::Scalar;

/// Square cost table queried by the solver.
pub trait CostSource<T> {
    fn size(&self) -> usize;
    fn cost(&self, i: usize, j: usize) -> T;

    /// Writes row `i` into `out` (length `size()`).
    fn row(&self, i: usize, out: &mut [T]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.cost(i, j);
        }
    }
}

/// Dense row-major `n x n` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix<T> {
    n: usize,
    entries: Vec<T>,
}

impl<T: Scalar> CostMatrix<T> {
    pub fn new(n: usize, entries: Vec<T>) -> Result<Self> {
        if n == 0 {
            return Err(VdtError::Input("cost matrix must be at least 1x1".into()));
        }
        check_dim("cost matrix entries", n * n, entries.len())?;
        if let Some(k) = entries.iter().position(|v| !v.is_finite()) {
            return Err(VdtError::Input(format!("non-finite cost at ({}, {})", k / n, k % n)));
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for r in rows {
            check_dim("cost matrix row", n, r.len())?;
            entries.extend(r.iter().map(|&v| T::of(v)));
        }
        Self::new(n, entries)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.n + j]
    }
}

impl<T: Scalar> CostSource<T> for CostMatrix<T> {
    fn size(&self) -> usize {
        self.n
    }

    #[inline]
    fn cost(&self, i: usize, j: usize) -> T {
        self.entries[i * self.n + j]
    }

    fn row(&self, i: usize, out: &mut [T]) {
        out.copy_from_slice(&self.entries[i * self.n..(i + 1) * self.n]);
    }
}

/// Squared Euclidean distances `|a_i - b_j|^2`, computed on demand.
pub struct SquaredDistances<'a, T> {
    a: &'a Points<T>,
    b: &'a Points<T>,
    /// Coordinates of `b`, one vector per axis.
    b_axes: Vec<Vec<T>>,
}

impl<'a, T: Scalar> SquaredDistances<'a, T> {
    pub fn new(a: &'a Points<T>, b: &'a Points<T>) -> Result<Self> {
        check_dim("point count", a.len(), b.len())?;
        check_dim("point dimension", a.dim(), b.dim())?;
        if a.is_empty() {
            return Err(VdtError::Input("cannot match empty point sets".into()));
        }
        if !a.all_finite() || !b.all_finite() {
            return Err(VdtError::Input("non-finite coordinates in point set".into()));
        }
        let b_axes = (0..b.dim()).map(|k| b.rows().map(|r| r[k]).collect()).collect();
        Ok(Self { a, b, b_axes })
    }
}

impl<T: Scalar> CostSource<T> for SquaredDistances<'_, T> {
    fn size(&self) -> usize {
        self.a.len()
    }

    #[inline]
    fn cost(&self, i: usize, j: usize) -> T {
        sq_dist(self.a.row(i), self.b.row(j))
    }

    fn row(&self, i: usize, out: &mut [T]) {
        let a = self.a.row(i);
        out.iter_mut().for_each(|o| *o = T::zero());
        for (&ak, axis) in a.iter().zip(&self.b_axes) {
            for (o, &bk) in out.iter_mut().zip(axis) {
                let d = ak - bk;
                *o += d * d;
            }
        }
    }
}

/// A bijection `row i -> permutation[i]` with its summed cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment<T> {
    pub permutation: Vec<usize>,
    pub total_cost: T,
}

impl<T: Scalar> Assignment<T> {
    fn from_permutation<C: CostSource<T>>(costs: &C, permutation: Vec<usize>) -> Self {
        let total_cost = permutation.iter().enumerate().fold(T::zero(), |acc, (i, &j)| acc + costs.cost(i, j));
        Self { permutation, total_cost }
    }
}

/// Minimum-cost assignment; among optimal permutations the lexicographically
/// smallest is returned.
pub fn hungarian_assign<T: Scalar>(c: &CostMatrix<T>) -> Result<Assignment<T>> {
    Ok(assign(c))
}

/// Minimum-cost assignment for any cost source with finite entries.
pub fn assign<T: Scalar, C: CostSource<T>>(costs: &C) -> Assignment<T> {
    let n = costs.size();
    let (mut col4row, v) = jonker_volgenant(costs);
    let (u, scale) = row_duals(costs, &v);
    lexicographic_refinement(costs, &mut col4row, &u, &v, scale);
    debug_assert_eq!(col4row.len(), n);
    Assignment::from_permutation(costs, col4row)
}

/// Exhaustive search over all `n!` permutations, `n <= 9`.
pub fn brute_force_assign<T: Scalar>(c: &CostMatrix<T>) -> Result<Assignment<T>> {
    let n = c.n();
    if n > 9 {
        return Err(VdtError::Input(format!("brute force assignment limited to n <= 9, got {n}")));
    }
    let mut costs = Vec::new();
    let mut perms = Vec::new();
    let mut perm: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    enumerate(c, &mut perm, &mut used, T::zero(), &mut perms, &mut costs);
    let best = costs.iter().copied().fold(T::infinity(), T::min);
    let scale = c.entries.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let tol = tie_tolerance::<T>(scale);
    let k = costs.iter().position(|&x| x <= best + tol).expect("at least one permutation");
    Ok(Assignment::from_permutation(c, perms.swap_remove(k)))
}

fn enumerate<T: Scalar>(
    c: &CostMatrix<T>,
    perm: &mut Vec<usize>,
    used: &mut [bool],
    partial: T,
    perms: &mut Vec<Vec<usize>>,
    costs: &mut Vec<T>,
) {
    let i = perm.len();
    if i == c.n() {
        perms.push(perm.clone());
        costs.push(partial);
        return;
    }
    for j in 0..c.n() {
        if !used[j] {
            used[j] = true;
            perm.push(j);
            enumerate(c, perm, used, partial + c.get(i, j), perms, costs);
            perm.pop();
            used[j] = false;
        }
    }
}

/// Absolute slack under which two costs count as tied.
fn tie_tolerance<T: Scalar>(scale: T) -> T {
    T::epsilon().sqrt() * T::of(0.1) * scale.max(T::one())
}

const NONE: usize = usize::MAX;

/// Problems at least this large get an auction warm start.
const AUCTION_MIN_SIZE: usize = 128;

/// Optimal `col4row` and column potentials `v` such that every row's assigned
/// column minimizes `c[i][j] - v[j]`.
fn jonker_volgenant<T: Scalar, C: CostSource<T>>(costs: &C) -> (Vec<usize>, Vec<T>) {
    let n = costs.size();
    if n == 1 {
        return (vec![0], vec![costs.cost(0, 0)]);
    }
    let mut s = Solver {
        costs,
        n,
        x: vec![NONE; n],
        y: vec![NONE; n],
        v: vec![T::infinity(); n],
        row: vec![T::zero(); n],
        d: vec![T::zero(); n],
        pred: vec![0; n],
        cols: (0..n).collect(),
    };
    let free = if n >= AUCTION_MIN_SIZE { s.auction() } else { s.column_reduction() };
    for &i in &free {
        let j = s.shortest_path(i);
        s.augment(i, j);
    }
    (s.x, s.v)
}

struct Solver<'c, T, C> {
    costs: &'c C,
    n: usize,
    /// Column of every row.
    x: Vec<usize>,
    /// Row of every column.
    y: Vec<usize>,
    v: Vec<T>,
    row: Vec<T>,
    d: Vec<T>,
    pred: Vec<usize>,
    cols: Vec<usize>,
}

impl<T: Scalar, C: CostSource<T>> Solver<'_, T, C> {
    /// Column minima as initial potentials; returns the rows left free.
    fn column_reduction(&mut self) -> Vec<usize> {
        let n = self.n;
        for i in 0..n {
            self.costs.row(i, &mut self.row);
            for j in 0..n {
                if self.row[j] < self.v[j] {
                    self.v[j] = self.row[j];
                    self.y[j] = i;
                }
            }
        }
        let mut unique = vec![true; n];
        for j in (0..n).rev() {
            let i = self.y[j];
            if self.x[i] == NONE {
                self.x[i] = j;
            } else {
                unique[i] = false;
                self.y[j] = NONE;
            }
        }
        let mut free = Vec::new();
        for i in 0..n {
            if self.x[i] == NONE {
                free.push(i);
            } else if unique[i] {
                // reduction transfer
                let j = self.x[i];
                self.costs.row(i, &mut self.row);
                let mut min = T::infinity();
                for j2 in 0..n {
                    if j2 != j {
                        min = min.min(self.row[j2] - self.v[j2]);
                    }
                }
                self.v[j] -= min;
            }
        }
        free
    }

    /// Epsilon-scaling auction. Leaves a full assignment with near-optimal
    /// potentials, then frees every row whose column is not an exact minimizer
    /// of its reduced costs; those rows are returned.
    fn auction(&mut self) -> Vec<usize> {
        let n = self.n;
        let mut cmax = T::zero();
        for i in 0..n {
            self.costs.row(i, &mut self.row);
            cmax = self.row.iter().fold(cmax, |m, c| m.max(c.abs()));
        }
        self.v.iter_mut().for_each(|v| *v = T::zero());
        if cmax == T::zero() {
            for (i, (x, y)) in self.x.iter_mut().zip(&mut self.y).enumerate() {
                (*x, *y) = (i, i);
            }
            return Vec::new();
        }
        // Below this the bid increments would vanish against the prices.
        let eps_min = cmax * T::of(1e-10).max(T::of(1e3) * T::epsilon());
        let mut eps = cmax / T::of(4.0);
        let mut free = Vec::new();
        loop {
            free.clear();
            self.release_rows(eps, &mut free);
            while let Some(i) = free.pop() {
                self.costs.row(i, &mut self.row);
                let (j1, w1, w2) = self.best_two();
                self.v[j1] -= (w2 - w1) + eps;
                let prev = self.y[j1];
                if prev != NONE {
                    self.x[prev] = NONE;
                    free.push(prev);
                }
                self.x[i] = j1;
                self.y[j1] = i;
            }
            if eps <= eps_min {
                break;
            }
            eps = (eps / T::of(8.0)).max(eps_min);
        }
        free.clear();
        self.release_rows(T::zero(), &mut free);
        free
    }

    /// Unassigns rows whose reduced cost exceeds their row minimum by more than `slack`.
    fn release_rows(&mut self, slack: T, free: &mut Vec<usize>) {
        for i in 0..self.n {
            let j = self.x[i];
            if j != NONE {
                self.costs.row(i, &mut self.row);
                let (_, best, _) = self.best_two();
                if self.row[j] - self.v[j] <= best + slack {
                    continue;
                }
                self.y[j] = NONE;
                self.x[i] = NONE;
            }
            free.push(i);
        }
    }

    /// Smallest reduced cost in the current row, its column, and the runner-up value.
    fn best_two(&self) -> (usize, T, T) {
        let (mut j1, mut w1, mut w2) = (0, self.row[0] - self.v[0], T::infinity());
        for j in 1..self.n {
            let c = self.row[j] - self.v[j];
            if c < w2 {
                if c < w1 {
                    w2 = w1;
                    w1 = c;
                    j1 = j;
                } else {
                    w2 = c;
                }
            }
        }
        (j1, w1, w2)
    }

    /// Dijkstra over reduced costs from row `start`; returns the free column
    /// reached and updates the potentials of the settled columns.
    fn shortest_path(&mut self, start: usize) -> usize {
        let n = self.n;
        for (k, c) in self.cols.iter_mut().enumerate() {
            *c = k;
        }
        self.costs.row(start, &mut self.row);
        for j in 0..n {
            self.d[j] = self.row[j] - self.v[j];
            self.pred[j] = start;
        }
        let (mut lo, mut hi, mut n_ready) = (0usize, 0usize, 0usize);
        let mut final_j = NONE;
        while final_j == NONE {
            if lo == hi {
                n_ready = lo;
                hi = self.collect_minima(lo);
                for k in lo..hi {
                    let j = self.cols[k];
                    if self.y[j] == NONE {
                        final_j = j;
                    }
                }
            }
            if final_j == NONE {
                final_j = self.scan(&mut lo, &mut hi);
            }
        }
        let mind = self.d[final_j];
        for k in 0..n_ready {
            let j = self.cols[k];
            self.v[j] += self.d[j] - mind;
        }
        final_j
    }

    /// Moves the columns of minimal distance among `cols[lo..]` to the front.
    fn collect_minima(&mut self, lo: usize) -> usize {
        let mut hi = lo + 1;
        let mut mind = self.d[self.cols[lo]];
        let start = hi;
        for k in start..self.n {
            let j = self.cols[k];
            let dj = self.d[j];
            if dj <= mind {
                if dj < mind {
                    hi = lo;
                    mind = dj;
                }
                self.cols[k] = self.cols[hi];
                self.cols[hi] = j;
                hi += 1;
            }
        }
        hi
    }

    fn scan(&mut self, lo: &mut usize, hi: &mut usize) -> usize {
        while *lo != *hi {
            let j = self.cols[*lo];
            *lo += 1;
            let i = self.y[j];
            let mind = self.d[j];
            self.costs.row(i, &mut self.row);
            let h = self.row[j] - self.v[j] - mind;
            for k in *hi..self.n {
                let j = self.cols[k];
                let cred = self.row[j] - self.v[j] - h;
                if cred < self.d[j] {
                    self.d[j] = cred;
                    self.pred[j] = i;
                    if cred == mind {
                        if self.y[j] == NONE {
                            return j;
                        }
                        self.cols[k] = self.cols[*hi];
                        self.cols[*hi] = j;
                        *hi += 1;
                    }
                }
            }
        }
        NONE
    }

    fn augment(&mut self, start: usize, mut j: usize) {
        loop {
            let i = self.pred[j];
            self.y[j] = i;
            std::mem::swap(&mut self.x[i], &mut j);
            if i == start {
                break;
            }
        }
    }
}

/// Row potentials `u[i] = min_j (c[i][j] - v[j])` and the largest absolute cost.
fn row_duals<T: Scalar, C: CostSource<T>>(costs: &C, v: &[T]) -> (Vec<T>, T) {
    let n = costs.size();
    let mut row = vec![T::zero(); n];
    let mut u = vec![T::zero(); n];
    let mut scale = T::zero();
    for i in 0..n {
        costs.row(i, &mut row);
        let mut m = T::infinity();
        for j in 0..n {
            m = m.min(row[j] - v[j]);
            scale = scale.max(row[j].abs());
        }
        u[i] = m;
    }
    (u, scale)
}

/// Moves an optimal assignment to the lexicographically smallest optimal one
/// by re-routing along alternating paths of zero reduced cost.
fn lexicographic_refinement<T: Scalar, C: CostSource<T>>(
    costs: &C,
    col4row: &mut [usize],
    u: &[T],
    v: &[T],
    scale: T,
) {
    let n = costs.size();
    if n < 2 {
        return;
    }
    let umax = u.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let vmax = v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let tol = tie_tolerance(scale + umax + vmax);

    // equality graph
    let mut tight: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut row = vec![T::zero(); n];
    for (i, edges) in tight.iter_mut().enumerate() {
        costs.row(i, &mut row);
        for j in 0..n {
            if row[j] - u[i] - v[j] <= tol {
                edges.push(j);
            }
        }
    }
    if tight.iter().all(|r| r.len() <= 1) {
        return;
    }

    let mut row4col = vec![0; n];
    for (i, &j) in col4row.iter().enumerate() {
        row4col[j] = i;
    }
    let mut fixed = vec![false; n];
    let mut stamp = vec![0usize; n];
    let mut epoch = 0;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    let mut cols: Vec<usize> = Vec::new();

    for i in 0..n {
        let cur = col4row[i];
        for &j in &tight[i] {
            if j >= cur {
                break;
            }
            if fixed[j] {
                continue;
            }
            // Row k currently holding j must reach column `cur` through tight edges.
            let k = row4col[j];
            epoch += 1;
            stack.clear();
            cols.clear();
            stack.push((k, 0));
            stamp[j] = epoch;
            let mut found = false;
            while let Some(top) = stack.last_mut() {
                let (r, pos) = *top;
                if pos >= tight[r].len() {
                    stack.pop();
                    cols.pop();
                    continue;
                }
                top.1 += 1;
                let c = tight[r][pos];
                if fixed[c] || stamp[c] == epoch {
                    continue;
                }
                stamp[c] = epoch;
                if c == cur {
                    found = true;
                    break;
                }
                cols.push(c);
                stack.push((row4col[c], 0));
            }
            if found {
                // stack rows r_0..r_m; r_t moves to cols[t], r_m moves to cur
                for (t, &(r, _)) in stack.iter().enumerate() {
                    let c = if t < cols.len() { cols[t] } else { cur };
                    col4row[r] = c;
                    row4col[c] = r;
                }
                col4row[i] = j;
                row4col[j] = i;
                break;
            }
        }
        fixed[col4row[i]] = true;
    }
}

/// Empirical Wasserstein-2 distance `sqrt(mean_i |a_i - b_sigma(i)|^2)` under
/// the optimal matching, with the matching itself.
///
/// The matching is always solved in double precision. Among several optimal
/// matchings an arbitrary one is returned: resolving ties lexicographically
/// costs `O(n^2)` memory when many points coincide.
pub fn empirical_w2<T: Scalar>(a: &Points<T>, b: &Points<T>) -> Result<(T, Assignment<T>)> {
    let (a64, b64) = (a.cast::<f64>(), b.cast::<f64>());
    let costs = SquaredDistances::new(&a64, &b64)?;
    let coupling = Assignment::from_permutation(&costs, jonker_volgenant(&costs).0);
    let mean = coupling.total_cost / a.len() as f64;
    let permutation = coupling.permutation;
    let total_cost = T::of(coupling.total_cost);
    Ok((T::of(mean.max(0.0).sqrt()), Assignment { permutation, total_cost }))
}
