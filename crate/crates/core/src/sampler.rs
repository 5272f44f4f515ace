//! Few-step generation with a trained value network.

use serde::{Deserialize, Serialize};

use crate::datasets::DatasetSpec;
use crate::error::{check_dim, Result, VdtError};
use crate::points::Points;
use crate::scalar::Scalar;
use crate::valuenet::ValueNetwork;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Source to target.
    #[default]
    Forward,
    /// Target to source: sign and time order flipped.
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    /// Number of policy steps minus one (`H_test`); a run makes `H_test + 1` steps.
    pub steps: usize,
    pub direction: Direction,
    pub label: Option<usize>,
    /// Classifier-free guidance scale; requires `label`.
    pub guidance: Option<f64>,
    pub n: usize,
    pub seed: u64,
    /// Keep all `H_test + 2` states of every trajectory.
    pub keep_trajectories: bool,
}

impl GenerationConfig {
    pub fn new(steps: usize, n: usize, seed: u64) -> Self {
        Self { steps, direction: Direction::Forward, label: None, guidance: None, n, seed, keep_trajectories: false }
    }

    pub fn validate<T: Scalar>(&self, net: &ValueNetwork<T>) -> Result<()> {
        if let Some(a) = self.guidance {
            if !(a > 0.0 && a.is_finite()) {
                return Err(VdtError::Config(format!("guidance scale must be positive, got {a}")));
            }
            if self.label.is_none() {
                return Err(VdtError::Config("guidance needs a label".into()));
            }
            if !net.config().is_conditional() {
                return Err(VdtError::Config("guidance needs a conditional network".into()));
            }
        }
        if let Some(l) = self.label {
            let k = net.config().num_labels;
            if l >= k {
                return Err(VdtError::Label { label: l, num_labels: k });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated<T> {
    pub points: Points<T>,
    /// Row-major `[sample][state][coord]` with `H_test + 2` states per sample.
    pub trajectories: Option<Vec<T>>,
}

/// Value gradient used by the policy, with optional guidance
/// `alpha * g_cond + (1 - alpha) * g_uncond`.
fn policy_gradient<T: Scalar>(
    net: &ValueNetwork<T>,
    xs: &[T],
    t: T,
    label: Option<usize>,
    guidance: Option<f64>,
) -> Result<Vec<T>> {
    let n = xs.len() / net.config().input_dim;
    let times = vec![t; n];
    let cond = net.config().is_conditional();
    let labels = |l: Option<usize>| cond.then(|| vec![l; n]);
    let g = net.grad_input_batch(xs, &times, labels(label).as_deref())?;
    match guidance {
        None => Ok(g),
        Some(a) => {
            let u = net.grad_input_batch(xs, &times, labels(None).as_deref())?;
            let (a, b) = (T::of(a), T::of(1.0 - a));
            Ok(g.iter().zip(&u).map(|(&c, &u)| a * c + b * u).collect())
        }
    }
}

/// One policy step from state `x` at grid index `h` of a `steps`-step run.
pub fn vdt_step<T: Scalar>(
    net: &ValueNetwork<T>,
    x: &[T],
    h: usize,
    steps: usize,
    label: Option<usize>,
    guidance: Option<f64>,
) -> Result<Vec<T>> {
    check_dim("state dimension", net.config().input_dim, x.len())?;
    if h > steps {
        return Err(VdtError::Input(format!("step index {h} exceeds H_test = {steps}")));
    }
    if guidance.is_some() && label.is_none() {
        return Err(VdtError::Config("guidance needs a label".into()));
    }
    let scale = T::one() / T::of(steps as f64 + 1.0);
    let t = T::of(h as f64 / (steps as f64 + 1.0));
    let g = policy_gradient(net, x, t, label, guidance)?;
    Ok(x.iter().zip(&g).map(|(&x, &g)| x - scale * g).collect())
}

/// Runs the policy from the given start states.
pub fn generate_from<T: Scalar>(net: &ValueNetwork<T>, start: &Points<T>, gcfg: &GenerationConfig) -> Result<Generated<T>> {
    gcfg.validate(net)?;
    let d = net.config().input_dim;
    check_dim("state dimension", d, start.dim())?;
    let n = start.len();
    let steps = gcfg.steps;
    let states = steps + 2;
    let mut x = start.as_slice().to_vec();
    let mut traj = gcfg.keep_trajectories.then(|| vec![T::zero(); n * states * d]);
    let record = |traj: &mut Option<Vec<T>>, k: usize, x: &[T]| {
        if let Some(tr) = traj.as_mut() {
            for i in 0..n {
                let at = (i * states + k) * d;
                tr[at..at + d].copy_from_slice(&x[i * d..(i + 1) * d]);
            }
        }
    };
    record(&mut traj, 0, &x);
    let inv = T::one() / T::of(steps as f64 + 1.0);
    for k in 0..=steps {
        let (h, sign) = match gcfg.direction {
            Direction::Forward => (k, -T::one()),
            Direction::Reverse => (steps - k, T::one()),
        };
        let t = T::of(h as f64 / (steps as f64 + 1.0));
        let g = policy_gradient(net, &x, t, gcfg.label, gcfg.guidance)?;
        for (v, &g) in x.iter_mut().zip(&g) {
            *v += sign * inv * g;
        }
        if let Some(p) = x.iter().position(|v| !v.is_finite()) {
            return Err(VdtError::Generation { step: k, sample: p / d });
        }
        record(&mut traj, k + 1, &x);
    }
    Ok(Generated { points: Points::new(d, x)?, trajectories: traj })
}

/// Draws `n` source points (seeded) and transports them forward.
pub fn generate<T: Scalar>(net: &ValueNetwork<T>, source: &DatasetSpec, gcfg: &GenerationConfig) -> Result<Generated<T>> {
    let start = source.sample::<T>(gcfg.n, gcfg.seed)?.points;
    let cfg = GenerationConfig { direction: Direction::Forward, ..gcfg.clone() };
    generate_from(net, &start, &cfg)
}

/// Draws `n` target points (seeded) and transports them back toward the source.
pub fn generate_reverse<T: Scalar>(
    net: &ValueNetwork<T>,
    target: &DatasetSpec,
    gcfg: &GenerationConfig,
) -> Result<Generated<T>> {
    let start = target.sample::<T>(gcfg.n, gcfg.seed)?.points;
    let cfg = GenerationConfig { direction: Direction::Reverse, ..gcfg.clone() };
    generate_from(net, &start, &cfg)
}
