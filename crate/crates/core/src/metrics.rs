//! Sample-quality metrics and dual diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::empirical_w2;
use crate::datasets::DatasetSpec;
use crate::error::{check_dim, Result, VdtError};
use crate::points::{sq_dist, Points};
use crate::sampler::{generate_from, GenerationConfig};
use crate::scalar::Scalar;
use crate::trainer::mix_seed;
use crate::valuenet::ValueNetwork;

/// Trajectories used for the Bellman and feasibility diagnostics.
pub const DIAGNOSTIC_PROBES: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub w2_to_target: f64,
    pub path_energy_mean: f64,
    pub oracle_path_energy: f64,
    pub bellman_residual: f64,
    pub dual_feasibility_gap: f64,
    pub n: usize,
    #[serde(rename = "H_test")]
    pub h_test: usize,
    pub seed: u64,
}

/// Matched root-mean-square distance between generated and fresh target points.
pub fn eval_w2<T: Scalar>(generated: &Points<T>, target: &Points<T>) -> Result<f64> {
    Ok(empirical_w2(generated, target)?.0.as_f64())
}

/// Mean over trajectories of `sum_h ((H_test + 1) / 2) |X_{h+1} - X_h|^2`.
///
/// `traj` is row-major `[sample][state][coord]` with `H_test + 2` states.
pub fn path_energy<T: Scalar>(traj: &[T], n: usize, dim: usize, h_test: usize) -> Result<f64> {
    let states = h_test + 2;
    check_dim("trajectory buffer", n * states * dim, traj.len())?;
    if n == 0 {
        return Err(VdtError::Input("no trajectories".into()));
    }
    let mut total = 0.0;
    for path in traj.chunks_exact(states * dim) {
        for k in 0..states - 1 {
            let a = &path[k * dim..(k + 1) * dim];
            let b = &path[(k + 1) * dim..(k + 2) * dim];
            total += sq_dist(a, b).as_f64();
        }
    }
    Ok((h_test as f64 + 1.0) / 2.0 * total / n as f64)
}

/// `1/2` of the mean squared distance under the optimal matching: the energy of
/// straight-line transport.
pub fn oracle_path_energy<T: Scalar>(source: &Points<T>, target: &Points<T>) -> Result<f64> {
    let w = eval_w2(source, target)?;
    Ok(0.5 * w * w)
}

fn level_time<T: Scalar>(h: usize, horizon: usize) -> T {
    T::of(h as f64 / (horizon as f64 + 1.0))
}

/// A time-dependent scalar field `V(x, t)` with its input gradient, evaluated
/// on row-major batches of states sharing one time.
pub trait ValueField<T: Scalar> {
    fn dim(&self) -> usize;
    fn values(&self, xs: &[T], t: T) -> Result<Vec<T>>;
    fn gradients(&self, xs: &[T], t: T) -> Result<Vec<T>>;
}

/// A network queried with a fixed label (`None` = unconditional token).
pub struct Conditioned<'a, T> {
    pub net: &'a ValueNetwork<T>,
    pub label: Option<usize>,
}

impl<T: Scalar> Conditioned<'_, T> {
    fn labels(&self, xs: &[T]) -> Option<Vec<Option<usize>>> {
        let n = xs.len() / self.net.config().input_dim;
        self.net.config().is_conditional().then(|| vec![self.label; n])
    }

    fn times(&self, xs: &[T], t: T) -> Vec<T> {
        vec![t; xs.len() / self.net.config().input_dim]
    }
}

impl<T: Scalar> ValueField<T> for Conditioned<'_, T> {
    fn dim(&self) -> usize {
        self.net.config().input_dim
    }

    fn values(&self, xs: &[T], t: T) -> Result<Vec<T>> {
        self.net.forward_batch(xs, &self.times(xs, t), self.labels(xs).as_deref())
    }

    fn gradients(&self, xs: &[T], t: T) -> Result<Vec<T>> {
        self.net.grad_input_batch(xs, &self.times(xs, t), self.labels(xs).as_deref())
    }
}

impl<T: Scalar> ValueField<T> for ValueNetwork<T> {
    fn dim(&self) -> usize {
        self.config().input_dim
    }

    fn values(&self, xs: &[T], t: T) -> Result<Vec<T>> {
        Conditioned { net: self, label: None }.values(xs, t)
    }

    fn gradients(&self, xs: &[T], t: T) -> Result<Vec<T>> {
        Conditioned { net: self, label: None }.gradients(xs, t)
    }
}

/// Mean absolute Bellman residual `|V(x, t_h) - min_y {c(x, y) + V(y, t_{h+1})}|`
/// over probe states `x` at levels `0..=H`, with the minimum taken over the
/// probes at level `h + 1` plus the policy image of `x`.
///
/// `probes[h]` holds the states of level `h`, for `h = 0..=H + 1`. At most
/// `candidates` probes per level enter the minimum.
pub fn bellman_residual<T: Scalar, V: ValueField<T> + ?Sized>(
    value: &V,
    probes: &[Points<T>],
    horizon: usize,
    candidates: usize,
) -> Result<f64> {
    let gaps = bellman_gaps(value, probes, horizon, candidates)?;
    Ok(mean_abs(gaps.iter().flatten().copied()))
}

/// [`bellman_residual`] after removing the median signed residual of each
/// level.
///
/// The training objective only ever compares values at equal times, so
/// adding a constant `k_h` to `V(., t_h)` changes neither the policy nor the
/// Lagrangian, but it shifts the plain residual. This variant is invariant
/// under such shifts and measures only the shape error.
pub fn centered_bellman_residual<T: Scalar, V: ValueField<T> + ?Sized>(
    value: &V,
    probes: &[Points<T>],
    horizon: usize,
    candidates: usize,
) -> Result<f64> {
    let gaps = bellman_gaps(value, probes, horizon, candidates)?;
    let centered = gaps.iter().flat_map(|level| {
        let mut sorted = level.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        level.iter().map(move |g| g - median)
    });
    Ok(mean_abs(centered))
}

fn mean_abs(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.abs(), n + 1));
    sum / n as f64
}

/// Signed residuals `V(x, t_h) - min_y {...}`, one vector per level `0..=H`.
fn bellman_gaps<T: Scalar, V: ValueField<T> + ?Sized>(
    value: &V,
    probes: &[Points<T>],
    horizon: usize,
    candidates: usize,
) -> Result<Vec<Vec<f64>>> {
    check_dim("probe levels", horizon + 2, probes.len())?;
    if candidates == 0 || probes.iter().any(|p| p.is_empty()) {
        return Err(VdtError::Input("bellman residual needs non-empty probes and candidates".into()));
    }
    let d = value.dim();
    let half_curv = T::of((horizon as f64 + 1.0) / 2.0);
    let inv = T::one() / T::of(horizon as f64 + 1.0);
    (0..=horizon)
        .map(|h| {
            let xs = &probes[h];
            check_dim("probe dimension", d, xs.dim())?;
            let t = level_time::<T>(h, horizon);
            let t_next = level_time::<T>(h + 1, horizon);
            let v_x = value.values(xs.as_slice(), t)?;
            let g_x = value.gradients(xs.as_slice(), t)?;
            let images: Vec<T> = xs.as_slice().iter().zip(&g_x).map(|(&x, &g)| x - inv * g).collect();
            let v_img = value.values(&images, t_next)?;
            let m = probes[h + 1].len().min(candidates);
            let ys = &probes[h + 1].as_slice()[..m * d];
            let v_y = value.values(ys, t_next)?;
            Ok((0..xs.len())
                .map(|i| {
                    let x = xs.row(i);
                    let img = &images[i * d..(i + 1) * d];
                    let mut best = half_curv * sq_dist(x, img) + v_img[i];
                    for j in 0..m {
                        best = best.min(half_curv * sq_dist(x, &ys[j * d..(j + 1) * d]) + v_y[j]);
                    }
                    (v_x[i] - best).as_f64()
                })
                .collect())
        })
        .collect()
}

/// One probe of the dual constraint `V(x, t_h) <= c(x, y) + V(y, t_{h+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbePair<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub h: usize,
}

/// Largest violation of the dual constraint over the probe pairs, clipped at 0.
pub fn dual_feasibility_gap<T: Scalar, V: ValueField<T> + ?Sized>(
    value: &V,
    pairs: &[ProbePair<T>],
    horizon: usize,
) -> Result<f64> {
    let d = value.dim();
    let half_curv = T::of((horizon as f64 + 1.0) / 2.0);
    let mut gap = 0.0f64;
    for h in 0..=horizon {
        let level: Vec<&ProbePair<T>> = pairs.iter().filter(|p| p.h == h).collect();
        if level.is_empty() {
            continue;
        }
        let mut xs = Vec::with_capacity(level.len() * d);
        let mut ys = Vec::with_capacity(level.len() * d);
        for p in &level {
            check_dim("probe state", d, p.x.len())?;
            check_dim("probe state", d, p.y.len())?;
            xs.extend_from_slice(&p.x);
            ys.extend_from_slice(&p.y);
        }
        let vx = value.values(&xs, level_time(h, horizon))?;
        let vy = value.values(&ys, level_time(h + 1, horizon))?;
        for (i, p) in level.iter().enumerate() {
            gap = gap.max((vx[i] - half_curv * sq_dist(&p.x, &p.y) - vy[i]).as_f64());
        }
    }
    if let Some(p) = pairs.iter().find(|p| p.h > horizon) {
        return Err(VdtError::Input(format!("probe level {} exceeds H = {horizon}", p.h)));
    }
    Ok(gap)
}

/// Probe levels from retained trajectories (`[sample][state][coord]`).
pub fn trajectory_levels<T: Scalar>(traj: &[T], n: usize, dim: usize, h_test: usize) -> Result<Vec<Points<T>>> {
    let states = h_test + 2;
    check_dim("trajectory buffer", n * states * dim, traj.len())?;
    (0..states)
        .map(|k| {
            let mut data = Vec::with_capacity(n * dim);
            for i in 0..n {
                let at = (i * states + k) * dim;
                data.extend_from_slice(&traj[at..at + dim]);
            }
            Points::new(dim, data)
        })
        .collect()
}

/// Consecutive policy states of every trajectory plus, per level, as many
/// random cross pairs between different trajectories.
pub fn probe_pairs<T: Scalar>(levels: &[Points<T>], seed: u64) -> Vec<ProbePair<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for h in 0..levels.len().saturating_sub(1) {
        let (a, b) = (&levels[h], &levels[h + 1]);
        for i in 0..a.len() {
            pairs.push(ProbePair { x: a.row(i).to_vec(), y: b.row(i).to_vec(), h });
        }
        for i in 0..a.len() {
            let j = rng.random_range(0..b.len());
            pairs.push(ProbePair { x: a.row(i).to_vec(), y: b.row(j).to_vec(), h });
        }
    }
    pairs
}

/// Bellman residual and feasibility gap on the first `probes` trajectories of
/// a forward run.
pub fn diagnostics<T: Scalar, V: ValueField<T> + ?Sized>(
    value: &V,
    traj: &[T],
    n: usize,
    h_test: usize,
    probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = value.dim();
    let m = probes.min(n);
    let states = h_test + 2;
    let levels = trajectory_levels(&traj[..m * states * d], m, d, h_test)?;
    let bellman = bellman_residual(value, &levels, h_test, m)?;
    let gap = dual_feasibility_gap(value, &probe_pairs(&levels, seed), h_test)?;
    Ok((bellman, gap))
}

/// Full evaluation: transports `n` fresh source points in `h_test + 1` steps
/// and compares them with `n` fresh target points.
pub fn evaluate<T: Scalar>(
    net: &ValueNetwork<T>,
    source: &DatasetSpec,
    target: &DatasetSpec,
    h_test: usize,
    n: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let start = source.sample::<T>(n, mix_seed(seed, 11))?.points;
    let fresh = target.sample::<T>(n, mix_seed(seed, 12))?.points;
    let cfg = GenerationConfig { keep_trajectories: true, ..GenerationConfig::new(h_test, n, seed) };
    let out = generate_from(net, &start, &cfg)?;
    let traj = out.trajectories.as_deref().expect("trajectories requested");
    let d = net.config().input_dim;
    let (bellman, gap) = diagnostics(net, traj, n, h_test, DIAGNOSTIC_PROBES, mix_seed(seed, 13))?;
    Ok(MetricsReport {
        w2_to_target: eval_w2(&out.points, &fresh)?,
        path_energy_mean: path_energy(traj, n, d, h_test)?,
        oracle_path_energy: oracle_path_energy(&start, &fresh)?,
        bellman_residual: bellman,
        dual_feasibility_gap: gap,
        n,
        h_test,
        seed,
    })
}
