//! Seeded 2D benchmark distributions and minibatch construction.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, SquaredDistances};
use crate::error::{Result, VdtError};
use crate::points::{Points, Sample};
use crate::scalar::Scalar;

const ARC_NOISE: f64 = 0.05;
const MIXTURE_RADIUS: f64 = 5.0;
const MIXTURE_STD: f64 = 0.1;

/// A named source or target distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DatasetSpec {
    /// Standard normal.
    Gaussian,
    /// Two interleaved half circles, mapped by `x -> 3x - 1`.
    Moons,
    /// The 2D projection `(x, z)` of the S-curve, scaled by 1.5.
    Scurve,
    /// Eight Gaussians on a radius-5 circle; labeled by component.
    EightGauss,
    /// `Moons` scaled by 2.
    MoonsSrc,
    /// `EightGauss` scaled by 2.
    EightGaussTgtScaled,
    /// Dirac mass at a fixed point.
    Point(Vec<f64>),
}

impl DatasetSpec {
    pub const NAMES: [&'static str; 6] = ["gaussian", "moons", "scurve", "8gauss", "moons_src", "8gauss_tgt_scaled"];

    pub fn dim(&self) -> usize {
        match self {
            DatasetSpec::Point(p) => p.len(),
            _ => 2,
        }
    }

    pub fn has_labels(&self) -> bool {
        matches!(self, DatasetSpec::EightGauss | DatasetSpec::EightGaussTgtScaled)
    }

    pub fn num_labels(&self) -> usize {
        if self.has_labels() {
            8
        } else {
            0
        }
    }

    /// `n` seeded draws; the mixture datasets also return component labels.
    pub fn sample<T: Scalar>(&self, n: usize, seed: u64) -> Result<Sample<T>> {
        if n == 0 {
            return Err(VdtError::Input("sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * n);
        let mut labels = None;
        match self {
            DatasetSpec::Gaussian => {
                for _ in 0..2 * n {
                    data.push(rng.sample::<f64, _>(StandardNormal));
                }
            }
            DatasetSpec::Moons | DatasetSpec::MoonsSrc => {
                let scale = if *self == DatasetSpec::MoonsSrc { 2.0 } else { 1.0 };
                for i in 0..n {
                    let t = rng.random_range(0.0..PI);
                    let [x, y] = moons_arc(i % 2 == 1, t);
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    let [x, y] = moons_transform([x + ARC_NOISE * nx, y + ARC_NOISE * ny]);
                    data.extend([scale * x, scale * y]);
                }
            }
            DatasetSpec::Scurve => {
                for _ in 0..n {
                    let u: f64 = rng.random();
                    let [x, z] = scurve_point(u);
                    // the 3D generator also draws a height coordinate; it is discarded
                    let _height: f64 = rng.random::<f64>() * 2.0;
                    let nx: f64 = rng.sample(StandardNormal);
                    let _ny: f64 = rng.sample(StandardNormal);
                    let nz: f64 = rng.sample(StandardNormal);
                    data.extend([1.5 * (x + ARC_NOISE * nx), 1.5 * (z + ARC_NOISE * nz)]);
                }
            }
            DatasetSpec::EightGauss | DatasetSpec::EightGaussTgtScaled => {
                let scale = if *self == DatasetSpec::EightGaussTgtScaled { 2.0 } else { 1.0 };
                let mut ls = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = rng.random_range(0..8usize);
                    let [mx, my] = mixture_mean(k);
                    let nx: f64 = rng.sample(StandardNormal);
                    let ny: f64 = rng.sample(StandardNormal);
                    data.extend([scale * (mx + MIXTURE_STD * nx), scale * (my + MIXTURE_STD * ny)]);
                    ls.push(k);
                }
                labels = Some(ls);
            }
            DatasetSpec::Point(p) => {
                if p.is_empty() || p.iter().any(|v| !v.is_finite()) {
                    return Err(VdtError::Input("point dataset needs finite coordinates".into()));
                }
                data.clear();
                for _ in 0..n {
                    data.extend_from_slice(p);
                }
            }
        }
        let dim = self.dim();
        let points = Points::new(dim, data.into_iter().map(T::of).collect())?;
        Ok(Sample { points, labels })
    }
}

/// Noise-free point on the outer (`inner == false`) or inner arc.
pub fn moons_arc(inner: bool, t: f64) -> [f64; 2] {
    if inner {
        [1.0 - t.cos(), 0.5 - t.sin()]
    } else {
        [t.cos(), t.sin()]
    }
}

pub fn moons_transform(p: [f64; 2]) -> [f64; 2] {
    [3.0 * p[0] - 1.0, 3.0 * p[1] - 1.0]
}

/// Noise-free S-curve point `(x, z)` for the uniform parameter `u`.
pub fn scurve_point(u: f64) -> [f64; 2] {
    let t = 3.0 * PI * (u - 0.5);
    let sign = if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    };
    [t.sin(), sign * (t.cos() - 1.0)]
}

/// Mean of mixture component `k`, at angle `k * pi / 4`.
pub fn mixture_mean(k: usize) -> [f64; 2] {
    let a = k as f64 * PI / 4.0;
    [MIXTURE_RADIUS * a.cos(), MIXTURE_RADIUS * a.sin()]
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Gaussian => f.write_str("gaussian"),
            DatasetSpec::Moons => f.write_str("moons"),
            DatasetSpec::Scurve => f.write_str("scurve"),
            DatasetSpec::EightGauss => f.write_str("8gauss"),
            DatasetSpec::MoonsSrc => f.write_str("moons_src"),
            DatasetSpec::EightGaussTgtScaled => f.write_str("8gauss_tgt_scaled"),
            DatasetSpec::Point(p) => {
                let coords: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                write!(f, "point:{}", coords.join(","))
            }
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = VdtError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gaussian" => DatasetSpec::Gaussian,
            "moons" => DatasetSpec::Moons,
            "scurve" => DatasetSpec::Scurve,
            "8gauss" => DatasetSpec::EightGauss,
            "moons_src" => DatasetSpec::MoonsSrc,
            "8gauss_tgt_scaled" => DatasetSpec::EightGaussTgtScaled,
            other => {
                let coords = other
                    .strip_prefix("point:")
                    .ok_or_else(|| VdtError::Config(format!("unknown dataset '{other}'")))?;
                let p = coords
                    .split(',')
                    .map(|c| c.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| VdtError::Config(format!("bad point dataset '{other}'")))?;
                if p.is_empty() || p.iter().any(|v| !v.is_finite()) {
                    return Err(VdtError::Config(format!("bad point dataset '{other}'")));
                }
                DatasetSpec::Point(p)
            }
        })
    }
}

impl TryFrom<String> for DatasetSpec {
    type Error = VdtError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DatasetSpec> for String {
    fn from(d: DatasetSpec) -> String {
        d.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    /// Independent pairing in draw order.
    Naive,
    /// Exact minibatch optimal transport matching.
    #[default]
    Ot,
    /// Index-aligned pairs from equally long pools.
    Paired,
}

/// Source/target minibatch; row `i` of both sets forms one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub source_points: Points<T>,
    pub target_points: Points<T>,
    /// Per-trajectory labels (`None` = unconditional) when the target carries labels.
    pub labels: Option<Vec<Option<usize>>>,
    pub coupling_mode: CouplingMode,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.source_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_points.is_empty()
    }

    /// Sum over trajectories of `|source_i - target_i|^2`.
    pub fn pairing_cost(&self) -> T {
        self.source_points
            .rows()
            .zip(self.target_points.rows())
            .map(|(a, b)| crate::points::sq_dist(a, b))
            .sum()
    }
}

/// Draws `b` points from each pool without replacement (kept in pool order)
/// and pairs them according to `mode`. With labeled targets the OT matching
/// is computed separately within each label class.
pub fn make_batch<T: Scalar>(
    source: &Sample<T>,
    target: &Sample<T>,
    b: usize,
    mode: CouplingMode,
    seed: u64,
) -> Result<Batch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    make_batch_with(source, target, b, mode, &mut rng)
}

pub(crate) fn make_batch_with<T: Scalar, R: Rng>(
    source: &Sample<T>,
    target: &Sample<T>,
    b: usize,
    mode: CouplingMode,
    rng: &mut R,
) -> Result<Batch<T>> {
    if b == 0 {
        return Err(VdtError::Input("batch size must be positive".into()));
    }
    if source.points.dim() != target.points.dim() {
        return Err(VdtError::Dimension {
            what: "source/target dimension",
            expected: source.points.dim(),
            got: target.points.dim(),
        });
    }
    for (name, pool) in [("source", source), ("target", target)] {
        if pool.len() < b {
            return Err(VdtError::Input(format!("{name} pool holds {} points, batch needs {b}", pool.len())));
        }
    }
    let draw = |rng: &mut R, len: usize| {
        let mut idx = index::sample(rng, len, b).into_vec();
        idx.sort_unstable();
        idx
    };
    let (src_idx, mut tgt_idx) = match mode {
        CouplingMode::Paired => {
            if source.len() != target.len() {
                return Err(VdtError::Input(format!(
                    "paired coupling needs index-aligned pools of equal length, got {} and {}",
                    source.len(),
                    target.len()
                )));
            }
            let idx = draw(rng, source.len());
            (idx.clone(), idx)
        }
        _ => {
            let s = draw(rng, source.len());
            let t = draw(rng, target.len());
            (s, t)
        }
    };
    if mode == CouplingMode::Ot {
        tgt_idx = ot_reorder(&source.points, &target.points, &src_idx, &tgt_idx, target.labels.as_deref())?;
    }
    let labels = target.labels.as_ref().map(|ls| tgt_idx.iter().map(|&j| Some(ls[j])).collect());
    Ok(Batch {
        source_points: source.points.select(&src_idx),
        target_points: target.points.select(&tgt_idx),
        labels,
        coupling_mode: mode,
    })
}

/// Target indices re-ordered so that position `i` is matched to `src_idx[i]`.
fn ot_reorder<T: Scalar>(
    source: &Points<T>,
    target: &Points<T>,
    src_idx: &[usize],
    tgt_idx: &[usize],
    labels: Option<&[usize]>,
) -> Result<Vec<usize>> {
    // classes in ascending label order; sources are dealt out to classes in draw order
    let mut classes: Vec<(usize, Vec<usize>)> = Vec::new();
    for &j in tgt_idx {
        let l = labels.map_or(0, |ls| ls[j]);
        match classes.iter_mut().find(|(k, _)| *k == l) {
            Some((_, v)) => v.push(j),
            None => classes.push((l, vec![j])),
        }
    }
    classes.sort_by_key(|(k, _)| *k);
    let mut out = vec![0; src_idx.len()];
    let mut start = 0;
    for (_, members) in classes {
        let m = members.len();
        let s = source.select(&src_idx[start..start + m]);
        let t = target.select(&members);
        let matching = assign(&SquaredDistances::new(&s, &t)?);
        for (i, &j) in matching.permutation.iter().enumerate() {
            out[start + i] = members[j];
        }
        start += m;
    }
    Ok(out)
}
