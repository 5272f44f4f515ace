//! Primal-dual training loop, training log and checkpoints.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, OptimizerState};
use crate::datasets::{make_batch_with, Batch, CouplingMode, DatasetSpec};
use crate::error::{Result, VdtError};
use crate::io::atomic_write;
use crate::particles::{grid_time, init_particles, primal_step, ParticleCloud};
use crate::points::{norm, Sample};
use crate::scalar::Scalar;
use crate::valuenet::{NetworkConfig, ValueNetwork};

pub const CHECKPOINT_VERSION: u32 = 1;

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SALT_NET: u64 = 1;
const SALT_SOURCE_POOL: u64 = 2;
const SALT_TARGET_POOL: u64 = 3;
const SALT_ITERATION: u64 = 4;

mod defaults {
    use crate::datasets::DatasetSpec;

    pub fn horizon() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        100
    }
    pub fn iterations() -> usize {
        20_000
    }
    pub fn primal_steps() -> usize {
        5
    }
    pub fn primal_stepsize() -> f64 {
        0.5
    }
    pub fn noise_std() -> f64 {
        1e-3
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn epsilon() -> f64 {
        1e-8
    }
    pub fn source() -> DatasetSpec {
        DatasetSpec::Gaussian
    }
    pub fn target() -> DatasetSpec {
        DatasetSpec::Moons
    }
    pub fn checkpoint_every() -> usize {
        1000
    }
}

/// Every hyperparameter of a training run. Absent JSON keys take the defaults
/// shown on each field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Training horizon `H` (100); states live at times `h / (H + 1)`.
    #[serde(rename = "H", default = "defaults::horizon")]
    pub horizon: usize,
    /// Minibatch size `b` (100).
    #[serde(rename = "b", default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Dual iterations `T` (20000).
    #[serde(rename = "T", default = "defaults::iterations")]
    pub iterations: usize,
    /// Primal steps per iteration `K` (5).
    #[serde(rename = "K", default = "defaults::primal_steps")]
    pub primal_steps: usize,
    /// Particle stepsize `eta` (0.5), in units of the cost curvature `H + 1`.
    #[serde(default = "defaults::primal_stepsize")]
    pub primal_stepsize: f64,
    /// Gaussian noise added to every free particle per primal step (1e-3).
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f64,
    /// Adam learning rate of the dual ascent (1e-4).
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    /// `naive`, `ot` (default) or `paired`.
    #[serde(default)]
    pub coupling_mode: CouplingMode,
    /// Probability of replacing a label by the unconditional token (0).
    #[serde(default)]
    pub cfg_uncond_prob: f64,
    #[serde(default)]
    pub seed: u64,
    /// Source distribution (`gaussian`).
    #[serde(default = "defaults::source")]
    pub source: DatasetSpec,
    /// Target distribution (`moons`).
    #[serde(default = "defaults::target")]
    pub target: DatasetSpec,
    #[serde(default)]
    pub network: NetworkConfig,
    /// Size of fixed source and target pools that minibatches are drawn from.
    /// Absent or `null` draws fresh points every iteration (the default).
    #[serde(default)]
    pub pool_size: Option<usize>,
    /// Iterations between periodic checkpoints (1000).
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(VdtError::Config(format!("{field}: {why}")));
        if self.batch_size == 0 {
            return bad("b", "must be positive");
        }
        if self.pool_size.is_some_and(|p| p < self.batch_size) {
            return bad("pool_size", "must be at least b");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive");
        }
        if !(self.primal_stepsize > 0.0 && self.primal_stepsize.is_finite()) {
            return bad("primal_stepsize", "must be positive");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(name, "must lie in [0, 1)");
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.cfg_uncond_prob) {
            return bad("cfg_uncond_prob", "must lie in [0, 1]");
        }
        self.network.validate()?;
        let d = self.network.input_dim;
        if self.source.dim() != d || self.target.dim() != d {
            return bad("network.input_dim", "must equal the dimension of the source and target datasets");
        }
        if self.network.is_conditional() {
            if !self.target.has_labels() {
                return bad("network.num_labels", "conditional network needs a labeled target dataset");
            }
            if self.network.num_labels < self.target.num_labels() {
                return bad("network.num_labels", "smaller than the number of target classes");
            }
        } else if self.cfg_uncond_prob > 0.0 {
            return bad("cfg_uncond_prob", "needs a conditional network");
        }
        Ok(())
    }

    /// The fixed training pools, or `None` when every iteration draws fresh points.
    pub fn pools<T: Scalar>(&self) -> Result<Option<(Sample<T>, Sample<T>)>> {
        self.pool_size.map(|n| self.draw(n, self.seed)).transpose()
    }

    /// `n` seeded source and target points; labels only for conditional networks.
    fn draw<T: Scalar>(&self, n: usize, seed: u64) -> Result<(Sample<T>, Sample<T>)> {
        let source = self.source.sample(n, mix_seed(seed, SALT_SOURCE_POOL))?;
        let mut target = self.target.sample(n, mix_seed(seed, SALT_TARGET_POOL))?;
        if !self.network.is_conditional() {
            target.labels = None;
        }
        Ok((source, target))
    }

    pub fn initial_network<T: Scalar>(&self) -> Result<ValueNetwork<T>> {
        ValueNetwork::new(self.network.clone(), mix_seed(self.seed, SALT_NET))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    /// Minibatch Lagrangian after the primal steps.
    pub lagrangian: f64,
    /// Mean transport cost of the particle cloud.
    pub cost: f64,
    pub residual: f64,
    /// Norm of the dual gradient.
    pub grad_norm: f64,
    /// Wall-clock seconds since the start of training; 0 unless timing is enabled.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iter,lagrangian,cost,residual,grad_norm,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.6}",
                r.iter, r.lagrangian, r.cost, r.residual, r.grad_norm, r.seconds
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub layers: Vec<LayerParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_table: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

/// Serialized network plus the metadata needed to resume or generate. All
/// random streams are derived from `(seed, iteration)`, which is therefore
/// the complete RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Scalar type the network was trained in (`f32` or `f64`).
    pub precision: String,
    pub network: NetworkParams,
    pub train_config: TrainConfig,
    pub iteration: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerParams>,
}

impl Checkpoint {
    pub fn new<T: Scalar>(
        net: &ValueNetwork<T>,
        config: &TrainConfig,
        iteration: usize,
        opt: Option<&OptimizerState<T>>,
    ) -> Self {
        let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        let layers = (0..net.num_layers())
            .map(|l| {
                let (w, b) = net.layer(l);
                LayerParams { weights: f(w), bias: f(b) }
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            precision: T::NAME.to_string(),
            network: NetworkParams { config: net.config().clone(), layers, label_table: net.label_table().map(f) },
            train_config: config.clone(),
            iteration,
            seed: config.seed,
            optimizer: opt.map(|o| OptimizerParams {
                first_moment: f(&o.first_moment),
                second_moment: f(&o.second_moment),
                step_count: o.step_count,
            }),
        }
    }

    /// Rebuilds the network; fails if the stored arrays do not match the config.
    pub fn network<T: Scalar>(&self) -> Result<ValueNetwork<T>> {
        let cfg = self.network.config.clone();
        let mut net = ValueNetwork::<T>::zeros(cfg)?;
        let mismatch = || VdtError::Input("checkpoint parameter arrays do not match the network config".into());
        if self.network.layers.len() != net.num_layers() {
            return Err(mismatch());
        }
        for (l, lp) in self.network.layers.iter().enumerate() {
            let (w, b) = net.layer_mut(l);
            if w.len() != lp.weights.len() || b.len() != lp.bias.len() {
                return Err(mismatch());
            }
            w.iter_mut().zip(&lp.weights).for_each(|(d, &s)| *d = T::of(s));
            b.iter_mut().zip(&lp.bias).for_each(|(d, &s)| *d = T::of(s));
        }
        match (net.label_table_mut(), &self.network.label_table) {
            (None, None) => {}
            (Some(t), Some(s)) if t.len() == s.len() => t.iter_mut().zip(s).for_each(|(d, &v)| *d = T::of(v)),
            _ => return Err(mismatch()),
        }
        Ok(net)
    }

    pub fn optimizer_state<T: Scalar>(&self, num_params: usize) -> Result<OptimizerState<T>> {
        let c = &self.train_config;
        let mut opt = OptimizerState::new(num_params, c.learning_rate, c.beta1, c.beta2, c.epsilon);
        if let Some(o) = &self.optimizer {
            if o.first_moment.len() != num_params || o.second_moment.len() != num_params {
                return Err(VdtError::Input("checkpoint optimizer state does not match the network".into()));
            }
            opt.first_moment = o.first_moment.iter().map(|&v| T::of(v)).collect();
            opt.second_moment = o.second_moment.iter().map(|&v| T::of(v)).collect();
            opt.step_count = o.step_count;
        }
        Ok(opt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |e: serde_json::Error| VdtError::Parse { path: path.into(), detail: e.to_string() };
        let value: serde_json::Value = serde_json::from_str(text).map_err(parse_err)?;
        let version = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| VdtError::Parse {
            path: path.into(),
            detail: "missing version field".into(),
        })?;
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(VdtError::Version { found: version.min(u64::from(u32::MAX)) as u32, supported: CHECKPOINT_VERSION });
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(parse_err)?;
        if ckpt.precision != "f32" && ckpt.precision != "f64" {
            return Err(VdtError::Parse { path: path.into(), detail: format!("unknown precision '{}'", ckpt.precision) });
        }
        ckpt.network::<f64>().map_err(|e| VdtError::Parse { path: path.into(), detail: e.to_string() })?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    atomic_write(path, ckpt.to_json().as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| VdtError::io(path, e))?;
    Checkpoint::from_json(&text, path)
}

/// Dual ascent direction of the minibatch Lagrangian together with the
/// Lagrangian itself.
///
/// The direction is the average over trajectories of the value-gradient
/// mismatches along each particle chain: source anchor against `X_0^-`,
/// `X_{h-1}^+` against `X_h^-` at `t_h`, and `X_H^+` against the target anchor.
pub fn dual_gradient<T: Scalar>(cloud: &ParticleCloud<T>, net: &ValueNetwork<T>) -> Result<(Vec<T>, T)> {
    let (hz, b, d) = (cloud.horizon(), cloud.num_trajectories(), cloud.dim());
    let states = (hz + 1) * b;
    let total = 2 * states + 2 * b;
    let mut xs = Vec::with_capacity(total * d);
    xs.extend_from_slice(cloud.minus_states());
    xs.extend_from_slice(cloud.plus_states());
    xs.extend_from_slice(cloud.src_anchor().as_slice());
    xs.extend_from_slice(cloud.tgt_anchor().as_slice());
    let mut times = Vec::with_capacity(total);
    for shift in [0, 1] {
        for h in 0..=hz {
            times.extend(std::iter::repeat_n(grid_time::<T>(h + shift, hz), b));
        }
    }
    times.extend(std::iter::repeat_n(T::zero(), b));
    times.extend(std::iter::repeat_n(T::one(), b));
    let w = T::one() / T::of(b as f64);
    let mut scales = vec![-w; states];
    scales.extend(std::iter::repeat_n(w, states));
    scales.extend(std::iter::repeat_n(w, b));
    scales.extend(std::iter::repeat_n(-w, b));
    let labels: Option<Vec<Option<usize>>> =
        cloud.labels().map(|l| l.iter().copied().cycle().take(l.len() * (2 * hz + 4)).collect());

    let mut grad = vec![T::zero(); net.num_params()];
    let values = net.grad_params_batch(&xs, &times, labels.as_deref(), &scales, &mut grad)?;
    let dual: T = values.iter().zip(&scales).map(|(&v, &s)| v * s).sum();
    Ok((grad, cloud.mean_transport_cost() + dual))
}

/// Training state handed to the observer after every iteration.
pub struct Progress<'a, T> {
    pub iteration: usize,
    pub record: &'a TrainRecord,
    pub net: &'a ValueNetwork<T>,
    pub optimizer: &'a OptimizerState<T>,
    pub config: &'a TrainConfig,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Record wall-clock seconds in the log (breaks byte-identical logs).
    pub record_time: bool,
    /// Continue from this checkpoint instead of the seeded initial network.
    pub resume: Option<Checkpoint>,
}

pub fn train<T: Scalar>(config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    train_with::<T, _>(config, &TrainOptions::default(), |_| Ok(()))
}

/// Builds the minibatch of iteration `it`; labels are dropped to the
/// unconditional token after coupling.
fn iteration_batch<T: Scalar>(
    config: &TrainConfig,
    source: &Sample<T>,
    target: &Sample<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<T>> {
    let mut batch = make_batch_with(source, target, config.batch_size, config.coupling_mode, rng)?;
    if config.cfg_uncond_prob > 0.0 {
        if let Some(labels) = batch.labels.as_mut() {
            for l in labels.iter_mut() {
                if rng.random::<f64>() < config.cfg_uncond_prob {
                    *l = None;
                }
            }
        }
    }
    Ok(batch)
}

/// Runs the primal-dual loop, calling `observer` after every iteration.
pub fn train_with<T: Scalar, F>(config: &TrainConfig, options: &TrainOptions, mut observer: F) -> Result<(Checkpoint, TrainLog)>
where
    F: FnMut(&Progress<'_, T>) -> Result<()>,
{
    config.validate()?;
    let pools = config.pools::<T>()?;
    let (mut net, mut opt, start) = match &options.resume {
        Some(ckpt) => {
            let net = ckpt.network::<T>()?;
            let opt = ckpt.optimizer_state(net.num_params())?;
            (net, opt, ckpt.iteration)
        }
        None => {
            let net = config.initial_network::<T>()?;
            let opt = OptimizerState::new(net.num_params(), config.learning_rate, config.beta1, config.beta2, config.epsilon);
            (net, opt, 0)
        }
    };
    let clock = Instant::now();
    let mut log = TrainLog::default();
    for it in start + 1..=config.iterations {
        let diverged = |detail: String, net: &ValueNetwork<T>, opt: &OptimizerState<T>| VdtError::Diverged {
            iteration: it,
            detail,
            last_good: Some(Box::new(Checkpoint::new(net, config, it - 1, Some(opt)))),
        };
        let it_seed = mix_seed(config.seed, mix_seed(SALT_ITERATION, it as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(it_seed);
        let fresh;
        let (source, target) = match &pools {
            Some((s, t)) => (s, t),
            None => {
                fresh = config.draw::<T>(config.batch_size, it_seed)?;
                (&fresh.0, &fresh.1)
            }
        };
        let batch = iteration_batch(config, source, target, &mut rng)?;
        let mut cloud = init_particles(&batch, config.horizon)?;
        for k in 0..config.primal_steps {
            let step_seed = mix_seed(it_seed, k as u64 + 1);
            match primal_step(&mut cloud, &net, config.primal_stepsize, config.noise_std, step_seed) {
                Err(VdtError::Diverged { detail, .. }) => return Err(diverged(detail, &net, &opt)),
                other => other?,
            }
        }
        let (grad, lagrangian) = dual_gradient(&cloud, &net)?;
        let grad_norm = norm(&grad);
        if !(grad_norm.is_finite() && lagrangian.is_finite()) {
            return Err(diverged("non-finite dual gradient or Lagrangian".into(), &net, &opt));
        }
        let before = (net.clone(), opt.clone());
        adam_step(&mut net, &mut opt, &grad)?;
        if net.params().iter().any(|v| !v.is_finite()) {
            return Err(diverged("non-finite network parameters after the dual step".into(), &before.0, &before.1));
        }
        let record = TrainRecord {
            iter: it,
            lagrangian: lagrangian.as_f64(),
            cost: cloud.mean_transport_cost().as_f64(),
            residual: cloud.constraint_residual().as_f64(),
            grad_norm: grad_norm.as_f64(),
            seconds: if options.record_time { clock.elapsed().as_secs_f64() } else { 0.0 },
        };
        observer(&Progress { iteration: it, record: &record, net: &net, optimizer: &opt, config })?;
        log.records.push(record);
    }
    let last = config.iterations.max(start);
    Ok((Checkpoint::new(&net, config, last, Some(&opt)), log))
}
