//! Particle representation of the primal occupancy measures.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datasets::Batch;
use crate::error::{check_dim, Result, VdtError};
use crate::io::fmt_real;
use crate::points::{sq_dist, Points};
use crate::scalar::Scalar;
use crate::valuenet::ValueNetwork;

/// `((H + 1) / 2) |x - y|^2`.
pub fn transport_cost<T: Scalar>(x: &[T], y: &[T], horizon: usize) -> Result<T> {
    check_dim("cost argument", x.len(), y.len())?;
    Ok(T::of((horizon as f64 + 1.0) / 2.0) * sq_dist(x, y))
}

/// Partial gradients `(grad_x c, grad_y c)` of [`transport_cost`].
pub fn transport_cost_grads<T: Scalar>(x: &[T], y: &[T], horizon: usize) -> Result<(Vec<T>, Vec<T>)> {
    check_dim("cost argument", x.len(), y.len())?;
    let s = T::of(horizon as f64 + 1.0);
    let gx: Vec<T> = x.iter().zip(y).map(|(&a, &b)| s * (a - b)).collect();
    let gy = gx.iter().map(|&g| -g).collect();
    Ok((gx, gy))
}

/// Grid time `h / (H + 1)`.
pub fn grid_time<T: Scalar>(h: usize, horizon: usize) -> T {
    T::of(h as f64 / (horizon as f64 + 1.0))
}

/// Pairs `(X_h^-(i), X_h^+(i))` for `h = 0..=H` and `b` trajectories, stored
/// `[h][i][coord]`, plus the minibatch anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud<T> {
    horizon: usize,
    b: usize,
    dim: usize,
    minus: Vec<T>,
    plus: Vec<T>,
    src_anchor: Points<T>,
    tgt_anchor: Points<T>,
    labels: Option<Vec<Option<usize>>>,
}

impl<T: Scalar> ParticleCloud<T> {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_trajectories(&self) -> usize {
        self.b
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn at(&self, h: usize, i: usize) -> std::ops::Range<usize> {
        let s = (h * self.b + i) * self.dim;
        s..s + self.dim
    }

    pub fn minus(&self, h: usize, i: usize) -> &[T] {
        &self.minus[self.at(h, i)]
    }

    pub fn plus(&self, h: usize, i: usize) -> &[T] {
        &self.plus[self.at(h, i)]
    }

    pub fn minus_mut(&mut self, h: usize, i: usize) -> &mut [T] {
        let r = self.at(h, i);
        &mut self.minus[r]
    }

    pub fn plus_mut(&mut self, h: usize, i: usize) -> &mut [T] {
        let r = self.at(h, i);
        &mut self.plus[r]
    }

    /// All `X^-` states, row-major over `(h, i)`.
    pub fn minus_states(&self) -> &[T] {
        &self.minus
    }

    pub fn plus_states(&self) -> &[T] {
        &self.plus
    }

    pub fn src_anchor(&self) -> &Points<T> {
        &self.src_anchor
    }

    pub fn tgt_anchor(&self) -> &Points<T> {
        &self.tgt_anchor
    }

    pub fn labels(&self) -> Option<&[Option<usize>]> {
        self.labels.as_deref()
    }

    /// Times `t_h` (for `X^-`, `shift = 0`) or `t_{h+1}` (`shift = 1`) per stored state.
    fn state_times(&self, shift: usize) -> Vec<T> {
        (0..=self.horizon)
            .flat_map(|h| std::iter::repeat_n(grid_time(h + shift, self.horizon), self.b))
            .collect()
    }

    fn state_labels(&self) -> Option<Vec<Option<usize>>> {
        self.labels.as_ref().map(|l| l.iter().copied().cycle().take(l.len() * (self.horizon + 1)).collect())
    }

    /// Mean over trajectories of the summed transport cost of all pairs.
    pub fn mean_transport_cost(&self) -> T {
        let s = T::of((self.horizon as f64 + 1.0) / 2.0);
        let total: T = self
            .minus
            .chunks_exact(self.dim)
            .zip(self.plus.chunks_exact(self.dim))
            .map(|(a, b)| sq_dist(a, b))
            .sum();
        s * total / T::of(self.b as f64)
    }

    /// Largest violation of the chain constraints: `X_h^+ = X_{h+1}^-`,
    /// `X_0^- = X_src`, `X_H^+ = X_tgt`.
    pub fn constraint_residual(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.b {
            worst = worst.max(sq_dist(self.minus(0, i), self.src_anchor.row(i)));
            worst = worst.max(sq_dist(self.plus(self.horizon, i), self.tgt_anchor.row(i)));
            for h in 0..self.horizon {
                worst = worst.max(sq_dist(self.plus(h, i), self.minus(h + 1, i)));
            }
        }
        worst.sqrt()
    }

    /// Debug dump with header `h,i,side,x0,x1`.
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        let mut out = format!("h,i,side,{}\n", header.join(","));
        for h in 0..=self.horizon {
            for i in 0..self.b {
                for (side, row) in [("minus", self.minus(h, i)), ("plus", self.plus(h, i))] {
                    let coords: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
                    let _ = writeln!(out, "{h},{i},{side},{}", coords.join(","));
                }
            }
        }
        out
    }
}

/// Straight-line initialization: knot `h` of trajectory `i` sits at
/// `src + h / (H + 1) * (tgt - src)`, with both copies of each interior knot
/// at the same place.
pub fn init_particles<T: Scalar>(batch: &Batch<T>, horizon: usize) -> Result<ParticleCloud<T>> {
    let src = &batch.source_points;
    let tgt = &batch.target_points;
    check_dim("target count", src.len(), tgt.len())?;
    check_dim("target dimension", src.dim(), tgt.dim())?;
    if src.is_empty() {
        return Err(VdtError::Input("empty batch".into()));
    }
    if let Some(l) = &batch.labels {
        check_dim("label count", src.len(), l.len())?;
    }
    let (b, d) = (src.len(), src.dim());
    let mut minus = vec![T::zero(); (horizon + 1) * b * d];
    let mut plus = minus.clone();
    let knot = |k: usize, i: usize, out: &mut [T]| {
        let w = grid_time::<T>(k, horizon);
        for ((o, &s), &t) in out.iter_mut().zip(src.row(i)).zip(tgt.row(i)) {
            *o = s + w * (t - s);
        }
    };
    for h in 0..=horizon {
        for i in 0..b {
            let s = (h * b + i) * d;
            if h == 0 {
                minus[s..s + d].copy_from_slice(src.row(i));
            } else {
                knot(h, i, &mut minus[s..s + d]);
            }
            if h == horizon {
                plus[s..s + d].copy_from_slice(tgt.row(i));
            } else {
                knot(h + 1, i, &mut plus[s..s + d]);
            }
        }
    }
    Ok(ParticleCloud {
        horizon,
        b,
        dim: d,
        minus,
        plus,
        src_anchor: src.clone(),
        tgt_anchor: tgt.clone(),
        labels: batch.labels.clone(),
    })
}

/// One simultaneous noisy gradient step on all non-anchor particles.
///
/// The stepsize is measured in units of the cost curvature `H + 1`:
/// `X^- <- X^- - (eta / (H + 1)) (grad_x c - grad V(X^-, t_h)) + xi`, and
/// likewise for `X^+`. At `eta = 0.5` each pair jumps to the exact minimizer of
/// its local cost-plus-value model.
pub fn primal_step<T: Scalar>(
    cloud: &mut ParticleCloud<T>,
    net: &ValueNetwork<T>,
    eta: f64,
    noise_std: f64,
    seed: u64,
) -> Result<()> {
    check_dim("network input dimension", cloud.dim, net.config().input_dim)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(VdtError::Config(format!("primal stepsize must be positive, got {eta}")));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(VdtError::Config(format!("noise_std must be non-negative, got {noise_std}")));
    }
    let labels = cloud.state_labels();
    let g_minus = net.grad_input_batch(&cloud.minus, &cloud.state_times(0), labels.as_deref())?;
    let g_plus = net.grad_input_batch(&cloud.plus, &cloud.state_times(1), labels.as_deref())?;

    let (hz, b, d) = (cloud.horizon, cloud.b, cloud.dim);
    let curv = T::of(hz as f64 + 1.0);
    let step = T::of(eta) / curv;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = |rng: &mut ChaCha8Rng| -> T {
        if noise_std == 0.0 {
            T::zero()
        } else {
            T::of(noise_std * rng.sample::<f64, _>(StandardNormal))
        }
    };
    let mut new_minus = cloud.minus.clone();
    let mut new_plus = cloud.plus.clone();
    for h in 0..=hz {
        for i in 0..b {
            let s = (h * b + i) * d;
            for k in s..s + d {
                let gap = curv * (cloud.minus[k] - cloud.plus[k]);
                if h > 0 {
                    new_minus[k] = cloud.minus[k] - step * (gap - g_minus[k]) + noise(&mut rng);
                }
                if h < hz {
                    new_plus[k] = cloud.plus[k] - step * (-gap + g_plus[k]) + noise(&mut rng);
                }
            }
            let bad = new_minus[s..s + d].iter().chain(&new_plus[s..s + d]).any(|v| !v.is_finite());
            if bad {
                return Err(VdtError::Diverged {
                    iteration: 0,
                    detail: format!("non-finite particle at h = {h}, trajectory {i}"),
                    last_good: None,
                });
            }
        }
    }
    cloud.minus = new_minus;
    cloud.plus = new_plus;
    Ok(())
}

/// Minibatch Lagrangian: transport cost plus the value-function multipliers of
/// the chain constraints.
pub fn empirical_lagrangian<T: Scalar>(cloud: &ParticleCloud<T>, net: &ValueNetwork<T>) -> Result<T> {
    let labels = cloud.state_labels();
    let v_minus = net.forward_batch(&cloud.minus, &cloud.state_times(0), labels.as_deref())?;
    let v_plus = net.forward_batch(&cloud.plus, &cloud.state_times(1), labels.as_deref())?;
    let b = cloud.b;
    let v_src = net.forward_batch(cloud.src_anchor.as_slice(), &vec![T::zero(); b], cloud.labels())?;
    let v_tgt = net.forward_batch(cloud.tgt_anchor.as_slice(), &vec![T::one(); b], cloud.labels())?;
    let values: T = v_plus.iter().zip(&v_minus).map(|(&p, &m)| p - m).sum::<T>()
        + v_src.iter().zip(&v_tgt).map(|(&s, &t)| s - t).sum::<T>();
    Ok(cloud.mean_transport_cost() + values / T::of(b as f64))
}
