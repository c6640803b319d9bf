//! Discrete stationary environments.
//!
//! A probability space with a measure-preserving shift group is realized in
//! one of three ways:
//!
//! * [`Medium::ShiftTorus`]: all `L^d` lattice translates of one periodic
//!   configuration, uniform measure, shifts act on the offset. Finite and
//!   exactly enumerable, so every operator identity can be checked by finite
//!   sums.
//! * [`Medium::IidLattice`]: independent phases per lattice cell, drawn by a
//!   counter-based hash of `(master seed, stream, cell)`. Used for Monte
//!   Carlo and quenched studies.
//! * [`Medium::Deterministic`]: a single phase, i.e. a point mass.
//!
//! The lattice has unit spacing. At scale `eps` the coefficient seen at a
//! continuum point `x` is the one of lattice cell `floor(x / eps)`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::NeumaierSum;
use crate::rng;

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;

/// A lattice point in `Z^d`, padded with zeros beyond `d`.
pub type Cell = [i64; MAX_DIM];

/// Quartic reaction potential `f(y) = c0 + c1 y + c2 y^2 + c3 y^3 + c4 y^4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartic(pub [f64; 5]);

impl Quartic {
    /// `1/4 (y^2 - 1)^2`.
    pub fn double_well() -> Self {
        Quartic([0.25, 0.0, -0.5, 0.0, 0.25])
    }

    pub fn zero() -> Self {
        Quartic([0.0; 5])
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut c = self.0;
        c.iter_mut().for_each(|v| *v *= s);
        Quartic(c)
    }

    pub fn value(&self, y: f64) -> f64 {
        let c = &self.0;
        c[0] + y * (c[1] + y * (c[2] + y * (c[3] + y * c[4])))
    }

    pub fn derivative(&self, y: f64) -> f64 {
        let c = &self.0;
        c[1] + y * (2.0 * c[2] + y * (3.0 * c[3] + y * 4.0 * c[4]))
    }

    pub fn second_derivative(&self, y: f64) -> f64 {
        let c = &self.0;
        2.0 * c[2] + y * (6.0 * c[3] + y * 12.0 * c[4])
    }

    /// Largest `lambda` such that `f - lambda/2 y^2` is convex.
    pub fn lambda(&self) -> f64 {
        let c = &self.0;
        if c[4] > 0.0 {
            2.0 * c[2] - 0.75 * c[3] * c[3] / c[4]
        } else if c[4] == 0.0 && c[3] == 0.0 {
            2.0 * c[2]
        } else {
            f64::NEG_INFINITY
        }
    }

    /// Weighted average of polynomials (exact, coefficient-wise).
    pub fn average<'a>(terms: impl IntoIterator<Item = (f64, &'a Quartic)>) -> Quartic {
        let mut c = [0.0; 5];
        for (w, q) in terms {
            for (ci, qi) in c.iter_mut().zip(q.0.iter()) {
                *ci += w * qi;
            }
        }
        Quartic(c)
    }
}

/// Coefficient table of a single phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Phase {
    /// Scalar conductivity (also the modulus of power-law and elastic integrands).
    pub a: f64,
    /// Symmetric matrix coefficient, only the leading `d x d` block is used.
    pub matrix: [[f64; MAX_DIM]; MAX_DIM],
    /// Dissipation weight.
    pub r: f64,
    /// Reaction potential.
    pub reaction: Quartic,
}

impl Phase {
    /// Isotropic phase `A = a Id`, `r = 1`, double-well reaction.
    pub fn scalar(a: f64) -> Self {
        let mut matrix = [[0.0; MAX_DIM]; MAX_DIM];
        for (i, row) in matrix.iter_mut().enumerate() {
            row[i] = a;
        }
        Phase { a, matrix, r: 1.0, reaction: Quartic::double_well() }
    }

    pub fn with_dissipation(mut self, r: f64) -> Self {
        self.r = r;
        self
    }

    pub fn with_reaction(mut self, reaction: Quartic) -> Self {
        self.reaction = reaction;
        self
    }

    /// Replaces the leading `d x d` block of `A`.
    pub fn with_matrix(mut self, d: usize, m: &[Vec<f64>]) -> Self {
        for i in 0..d {
            for j in 0..d {
                self.matrix[i][j] = m[i][j];
            }
        }
        self
    }

    fn eigen_bounds(&self, d: usize) -> (f64, f64) {
        let m = DMatrix::from_fn(d, d, |i, j| self.matrix[i][j]);
        let eig = SymmetricEigen::new(m);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (min, max)
    }
}

/// How the probability space is realized.
#[derive(Clone, Debug, PartialEq)]
pub enum Medium {
    ShiftTorus { period: [usize; MAX_DIM], config: Vec<usize> },
    IidLattice { probabilities: Vec<f64>, cumulative: Vec<f64>, seed: u64 },
    Deterministic,
}

/// A validated environment: medium plus per-phase coefficient tables.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    d: usize,
    medium: Medium,
    phases: Vec<Phase>,
    bound: f64,
}

/// One element `omega` of the probability space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Realization {
    /// Lattice translation; reduced modulo the period on a shift torus.
    pub offset: Cell,
    /// Seed-derivation path for i.i.d. lattices (zero otherwise).
    pub stream: u64,
}

impl Realization {
    pub fn origin() -> Self {
        Realization { offset: [0; MAX_DIM], stream: 0 }
    }

    pub fn with_stream(stream: u64) -> Self {
        Realization { offset: [0; MAX_DIM], stream }
    }
}

/// How to discretize the probability measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingPlan {
    /// Full enumeration; `count` must equal the number of offsets.
    Exact { count: usize },
    /// `count` samples of weight `1/count`, deterministic given `seed`.
    MonteCarlo { count: usize, seed: u64 },
}

/// Realizations with weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Realization>,
    pub weights: Vec<f64>,
    /// True when `members` is the full shift-torus enumeration in canonical order.
    pub exact: bool,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Realization, f64)> {
        self.members.iter().zip(self.weights.iter().copied())
    }

    /// A single realization with unit weight.
    pub fn single(r: Realization) -> Self {
        Ensemble { members: vec![r], weights: vec![1.0], exact: false }
    }
}

/// Mean with standard error (zero for exact enumeration).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

impl Environment {
    pub fn shift_torus(d: usize, period: &[usize], config: Vec<usize>, phases: Vec<Phase>) -> Result<Self> {
        check_dim(d)?;
        if period.len() != d {
            return Err(Error::InvalidEnvironment(format!("period has {} entries, expected d = {d}", period.len())));
        }
        let mut p = [1usize; MAX_DIM];
        p[..d].copy_from_slice(period);
        Self::build(d, Medium::ShiftTorus { period: p, config }, phases, None)
    }

    pub fn iid(d: usize, probabilities: Vec<f64>, seed: u64, phases: Vec<Phase>) -> Result<Self> {
        check_dim(d)?;
        let mut acc = 0.0;
        let cumulative = probabilities
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self::build(d, Medium::IidLattice { probabilities, cumulative, seed }, phases, None)
    }

    pub fn deterministic(d: usize, phase: Phase) -> Result<Self> {
        check_dim(d)?;
        Self::build(d, Medium::Deterministic, vec![phase], None)
    }

    /// Overrides the ellipticity/growth constant `C` (validated against the tables).
    pub fn with_bound(self, c: f64) -> Result<Self> {
        Self::build(self.d, self.medium, self.phases, Some(c))
    }

    fn build(d: usize, medium: Medium, phases: Vec<Phase>, declared: Option<f64>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::InvalidEnvironment("no phases".into()));
        }
        match &medium {
            Medium::ShiftTorus { period, config } => {
                if period[..d].iter().any(|&l| l == 0) {
                    return Err(Error::InvalidEnvironment("period entries must be positive".into()));
                }
                let sites: usize = period[..d].iter().product();
                if config.len() != sites {
                    return Err(Error::InvalidEnvironment(format!(
                        "configuration has {} entries, expected L^d = {sites}",
                        config.len()
                    )));
                }
                if let Some(bad) = config.iter().find(|&&c| c >= phases.len()) {
                    return Err(Error::InvalidEnvironment(format!("phase index {bad} out of range")));
                }
            }
            Medium::IidLattice { probabilities, .. } => {
                if probabilities.len() != phases.len() {
                    return Err(Error::InvalidEnvironment(format!(
                        "{} probabilities for {} phases",
                        probabilities.len(),
                        phases.len()
                    )));
                }
                if probabilities.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::InvalidEnvironment("probabilities must be nonnegative".into()));
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidEnvironment(format!("probabilities sum to {total}, expected 1")));
                }
            }
            Medium::Deterministic => {
                if phases.len() != 1 {
                    return Err(Error::InvalidEnvironment("deterministic environment takes exactly one phase".into()));
                }
            }
        }
        let mut needed: f64 = 1.0;
        for (k, ph) in phases.iter().enumerate() {
            for i in 0..d {
                for j in 0..i {
                    if (ph.matrix[i][j] - ph.matrix[j][i]).abs() > 1e-14 {
                        return Err(Error::InvalidEnvironment(format!("phase {k}: matrix A is not symmetric")));
                    }
                }
            }
            if !(ph.a > 0.0) || !(ph.r > 0.0) {
                return Err(Error::InvalidEnvironment(format!("phase {k}: a and r must be positive")));
            }
            let (lo, hi) = ph.eigen_bounds(d);
            if !(lo > 0.0) {
                return Err(Error::InvalidEnvironment(format!("phase {k}: matrix A is not positive definite")));
            }
            needed = needed.max(hi).max(1.0 / lo).max(ph.r).max(1.0 / ph.r);
        }
        let bound = match declared {
            Some(c) if c * (1.0 + 1e-12) < needed => {
                return Err(Error::InvalidEnvironment(format!(
                    "declared constant C = {c} is smaller than the table bound {needed}"
                )))
            }
            Some(c) => c,
            None => needed,
        };
        Ok(Environment { d, medium, phases, bound })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn phase(&self, k: usize) -> &Phase {
        &self.phases[k]
    }

    /// Constant `C` bounding `r`, `1/r` and the spectrum of `A` (and its inverse).
    pub fn bound_constant(&self) -> f64 {
        self.bound
    }

    /// Period per axis for a shift torus; a deterministic medium is a torus of period one.
    pub fn period(&self) -> Option<[usize; MAX_DIM]> {
        match &self.medium {
            Medium::ShiftTorus { period, .. } => Some(*period),
            Medium::Deterministic => Some([1; MAX_DIM]),
            Medium::IidLattice { .. } => None,
        }
    }

    /// Number of torus offsets (`L^d`), or `None` for i.i.d. media.
    pub fn site_count(&self) -> Option<usize> {
        self.period().map(|p| p[..self.d].iter().product())
    }

    /// Row-major (axis 1 fastest) index of a torus site.
    pub fn site_index(&self, cell: &Cell) -> usize {
        let p = self.period().expect("site_index on an i.i.d. medium");
        let mut idx = 0usize;
        for axis in (0..self.d).rev() {
            idx = idx * p[axis] + cell[axis].rem_euclid(p[axis] as i64) as usize;
        }
        idx
    }

    pub fn site_cell(&self, mut idx: usize) -> Cell {
        let p = self.period().expect("site_cell on an i.i.d. medium");
        let mut c = [0i64; MAX_DIM];
        for axis in 0..self.d {
            c[axis] = (idx % p[axis]) as i64;
            idx /= p[axis];
        }
        c
    }

    /// Group action `tau_z`. Offsets are reduced modulo the period on a torus.
    pub fn shift(&self, r: &Realization, z: &Cell) -> Realization {
        let mut offset = r.offset;
        for axis in 0..self.d {
            offset[axis] += z[axis];
        }
        if let Some(p) = self.period() {
            for axis in 0..self.d {
                offset[axis] = offset[axis].rem_euclid(p[axis] as i64);
            }
        }
        Realization { offset, stream: r.stream }
    }

    /// Phase index of `tau_cell omega` at the origin, i.e. of `omega` at `cell`.
    pub fn phase_at(&self, r: &Realization, cell: &Cell) -> usize {
        let mut abs = [0i64; MAX_DIM];
        for axis in 0..self.d {
            abs[axis] = cell[axis] + r.offset[axis];
        }
        match &self.medium {
            Medium::ShiftTorus { config, .. } => config[self.site_index(&abs)],
            Medium::Deterministic => 0,
            Medium::IidLattice { cumulative, seed, .. } => {
                let u = rng::unit_interval(rng::hash_cell(rng::derive(*seed, r.stream), &abs));
                cumulative.iter().position(|&c| u < c).unwrap_or(cumulative.len() - 1)
            }
        }
    }

    /// Coefficient table at `cell` for realization `r`.
    pub fn eval_env(&self, r: &Realization, cell: &Cell) -> &Phase {
        &self.phases[self.phase_at(r, cell)]
    }

    /// Probability of each phase under `P` (exact for tori and i.i.d. media).
    pub fn phase_probabilities(&self) -> Vec<f64> {
        match &self.medium {
            Medium::ShiftTorus { config, .. } => {
                let mut p = vec![0.0; self.phases.len()];
                for &c in config {
                    p[c] += 1.0;
                }
                let n = config.len() as f64;
                p.iter_mut().for_each(|v| *v /= n);
                p
            }
            Medium::IidLattice { probabilities, .. } => probabilities.clone(),
            Medium::Deterministic => vec![1.0],
        }
    }

    /// Discretizes `P` into weighted realizations.
    pub fn enumerate_or_sample(&self, plan: &SamplingPlan) -> Result<Ensemble> {
        match *plan {
            SamplingPlan::Exact { count } => {
                let sites = self.site_count().ok_or_else(|| {
                    Error::InvalidSampling("an i.i.d. lattice has no finite enumeration".into())
                })?;
                if count == 0 {
                    return Err(Error::InvalidSampling("M = 0".into()));
                }
                if count != sites {
                    return Err(Error::InvalidSampling(format!(
                        "exact enumeration needs M = L^d = {sites}, got {count}"
                    )));
                }
                let members = (0..sites)
                    .map(|i| Realization { offset: self.site_cell(i), stream: 0 })
                    .collect();
                Ok(Ensemble { members, weights: vec![1.0 / sites as f64; sites], exact: true })
            }
            SamplingPlan::MonteCarlo { count, seed } => {
                if count == 0 {
                    return Err(Error::InvalidSampling("M = 0".into()));
                }
                let members = (0..count as u64)
                    .map(|m| match &self.medium {
                        Medium::ShiftTorus { .. } => {
                            let sites = self.site_count().unwrap_or(1) as u64;
                            let idx = rng::derive(seed, m) % sites;
                            Realization { offset: self.site_cell(idx as usize), stream: 0 }
                        }
                        Medium::Deterministic => Realization::origin(),
                        Medium::IidLattice { .. } => Realization::with_stream(rng::derive(seed, m)),
                    })
                    .collect();
                Ok(Ensemble { members, weights: vec![1.0 / count as f64; count], exact: false })
            }
        }
    }

    /// `<observable>` under the sampling plan; Monte Carlo plans report the sample standard error.
    pub fn expectation<F>(&self, observable: F, plan: &SamplingPlan) -> Result<Estimate>
    where
        F: Fn(&Realization) -> f64,
    {
        let ens = self.enumerate_or_sample(plan)?;
        Ok(ensemble_expectation(&ens, observable, matches!(plan, SamplingPlan::MonteCarlo { .. })))
    }

    /// Spatial average of the stationary extension of a phase observable over `[-R, R]^d`
    /// at scale `eps`, by exact cell counting (partial cells weighted by overlap).
    pub fn birkhoff_average<F>(&self, r: &Realization, observable: F, half_width: f64, eps: f64) -> f64
    where
        F: Fn(usize) -> f64,
    {
        let lo = -half_width / eps;
        let hi = half_width / eps;
        let first = lo.floor() as i64;
        let last = hi.ceil() as i64 - 1;
        let overlaps: Vec<(i64, f64)> = (first..=last)
            .map(|k| {
                let a = (k as f64).max(lo);
                let b = ((k + 1) as f64).min(hi);
                (k, (b - a).max(0.0))
            })
            .collect();
        let mut sum = NeumaierSum::default();
        let mut cell = [0i64; MAX_DIM];
        let mut idx = vec![0usize; self.d];
        let n = overlaps.len();
        'outer: loop {
            let mut w = 1.0;
            for axis in 0..self.d {
                let (k, ov) = overlaps[idx[axis]];
                cell[axis] = k;
                w *= ov;
            }
            if w > 0.0 {
                sum.add(w * observable(self.phase_at(r, &cell)));
            }
            for axis in 0..self.d {
                idx[axis] += 1;
                if idx[axis] < n {
                    continue 'outer;
                }
                idx[axis] = 0;
            }
            break;
        }
        sum.value() / (hi - lo).powi(self.d as i32)
    }

    /// Shift torus with each lattice cell subdivided `k` times per axis.
    pub fn refine(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidEnvironment("refinement factor must be positive".into()));
        }
        match &self.medium {
            Medium::Deterministic => Ok(self.clone()),
            Medium::IidLattice { .. } => Err(Error::Unsupported("refining an i.i.d. lattice".into())),
            Medium::ShiftTorus { period, .. } => {
                let d = self.d;
                let fine: Vec<usize> = period[..d].iter().map(|&l| l * k).collect();
                let sites: usize = fine.iter().product();
                let config = (0..sites)
                    .map(|mut i| {
                        let mut coarse = [0i64; MAX_DIM];
                        for axis in 0..d {
                            coarse[axis] = ((i % fine[axis]) / k) as i64;
                            i /= fine[axis];
                        }
                        self.phase_at(&Realization::origin(), &coarse)
                    })
                    .collect();
                Environment::shift_torus(d, &fine, config, self.phases.clone())?.with_bound(self.bound)
            }
        }
    }

    /// Periodized window `[0, L)^d` of one realization, as a shift torus.
    pub fn window(&self, r: &Realization, side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidEnvironment("window side must be positive".into()));
        }
        let d = self.d;
        let period = vec![side; d];
        let sites = side.pow(d as u32);
        let config = (0..sites)
            .map(|mut i| {
                let mut c = [0i64; MAX_DIM];
                for axis in 0..d {
                    c[axis] = (i % side) as i64;
                    i /= side;
                }
                self.phase_at(r, &c)
            })
            .collect();
        Environment::shift_torus(d, &period, config, self.phases.clone())
    }

    pub fn to_spec(&self) -> EnvironmentSpec {
        let d = self.d;
        let phases = self
            .phases
            .iter()
            .map(|p| PhaseSpec {
                a: p.a,
                matrix: Some((0..d).map(|i| p.matrix[i][..d].to_vec()).collect()),
                r: Some(p.r),
                f: Some(p.reaction.0.to_vec()),
            })
            .collect();
        let (kind, period, config, probabilities, seed) = match &self.medium {
            Medium::ShiftTorus { period, config } => {
                (EnvKind::ShiftTorus, Some(period[..d].to_vec()), Some(config.clone()), None, None)
            }
            Medium::IidLattice { probabilities, seed, .. } => {
                (EnvKind::IidLattice, None, None, Some(probabilities.clone()), Some(*seed))
            }
            Medium::Deterministic => (EnvKind::Deterministic, None, None, None, None),
        };
        EnvironmentSpec { kind, d, period, config, probabilities, seed, bound: Some(self.bound), phases }
    }

    pub fn from_spec(spec: &EnvironmentSpec) -> Result<Self> {
        let d = spec.d;
        check_dim(d)?;
        let phases = spec
            .phases
            .iter()
            .map(|p| p.to_phase(d))
            .collect::<Result<Vec<_>>>()?;
        let env = match spec.kind {
            EnvKind::ShiftTorus => {
                let period = spec
                    .period
                    .clone()
                    .ok_or_else(|| Error::InvalidEnvironment("shift-torus needs key L".into()))?;
                let config = spec
                    .config
                    .clone()
                    .ok_or_else(|| Error::InvalidEnvironment("shift-torus needs key config".into()))?;
                Environment::shift_torus(d, &period, config, phases)?
            }
            EnvKind::IidLattice => {
                let probabilities = spec
                    .probabilities
                    .clone()
                    .ok_or_else(|| Error::InvalidEnvironment("iid-lattice needs key p".into()))?;
                let seed = spec
                    .seed
                    .ok_or_else(|| Error::InvalidEnvironment("iid-lattice needs key seed".into()))?;
                Environment::iid(d, probabilities, seed, phases)?
            }
            EnvKind::Deterministic => {
                let phase = phases
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::InvalidEnvironment("no phases".into()))?;
                Environment::deterministic(d, phase)?
            }
        };
        match spec.bound {
            Some(c) => env.with_bound(c),
            None => Ok(env),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: EnvironmentSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_spec()).expect("environment spec serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// Weighted mean over an ensemble; `monte_carlo` adds the sample standard error.
pub fn ensemble_expectation<F>(ens: &Ensemble, observable: F, monte_carlo: bool) -> Estimate
where
    F: Fn(&Realization) -> f64,
{
    let values: Vec<f64> = ens.members.iter().map(&observable).collect();
    let mut sum = NeumaierSum::default();
    for (v, w) in values.iter().zip(&ens.weights) {
        sum.add(v * w);
    }
    let mean = sum.value();
    let count = values.len();
    let std_error = if monte_carlo && count > 1 {
        let mut sq = NeumaierSum::default();
        for v in &values {
            sq.add((v - mean) * (v - mean));
        }
        (sq.value() / (count - 1) as f64).sqrt() / (count as f64).sqrt()
    } else {
        0.0
    };
    Estimate { mean, std_error, count }
}

fn check_dim(d: usize) -> Result<()> {
    if (1..=MAX_DIM).contains(&d) {
        Ok(())
    } else {
        Err(Error::InvalidEnvironment(format!("dimension {d} not in 1..=3")))
    }
}

/// Kind tag of the environment file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    ShiftTorus,
    IidLattice,
    Deterministic,
}

/// On-disk environment description (TOML).
///
/// ```toml
/// kind = "shift-torus"        # or "iid-lattice", "deterministic"
/// d = 2
/// L = [2, 2]                  # shift-torus only
/// config = [0, 1, 1, 0]       # row-major, axis 1 fastest
/// # p = [0.5, 0.5]            # iid-lattice only
/// # seed = 7                  # iid-lattice only
/// C = 10.0                    # optional ellipticity/growth constant
///
/// [[phases]]
/// a = 1.0
/// A = [[1.0, 0.0], [0.0, 1.0]]  # optional, defaults to a * Id
/// r = 1.0                       # optional, defaults to 1
/// f = [0.25, 0.0, -0.5, 0.0, 0.25]  # optional quartic coefficients, default double well
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub kind: EnvKind,
    pub d: usize,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub period: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<Vec<usize>>,
    #[serde(rename = "p", default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    pub phases: Vec<PhaseSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSpec {
    pub a: f64,
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f: Option<Vec<f64>>,
}

impl PhaseSpec {
    fn to_phase(&self, d: usize) -> Result<Phase> {
        let mut phase = Phase::scalar(self.a);
        if let Some(m) = &self.matrix {
            if m.len() != d || m.iter().any(|row| row.len() != d) {
                return Err(Error::InvalidEnvironment(format!("A must be {d}x{d}")));
            }
            phase = phase.with_matrix(d, m);
        }
        if let Some(r) = self.r {
            phase.r = r;
        }
        if let Some(f) = &self.f {
            let c: [f64; 5] = f
                .as_slice()
                .try_into()
                .map_err(|_| Error::InvalidEnvironment("f needs 5 quartic coefficients".into()))?;
            phase.reaction = Quartic(c);
        }
        Ok(phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn checkerboard() -> Environment {
        Environment::shift_torus(2, &[2, 2], vec![0, 1, 1, 0], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap()
    }

    fn iid2() -> Environment {
        Environment::iid(2, vec![0.5, 0.5], 11, vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap()
    }

    #[test]
    fn exact_enumeration_l2_d1() {
        let env = Environment::shift_torus(1, &[2], vec![0, 1], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap();
        let ens = env.enumerate_or_sample(&SamplingPlan::Exact { count: 2 }).unwrap();
        assert_eq!(ens.members[0].offset[0], 0);
        assert_eq!(ens.members[1].offset[0], 1);
        assert_eq!(ens.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn deterministic_point_mass() {
        let env = Environment::deterministic(2, Phase::scalar(3.0)).unwrap();
        let ens = env.enumerate_or_sample(&SamplingPlan::Exact { count: 1 }).unwrap();
        assert_eq!(ens.len(), 1);
        assert_eq!(ens.weights, vec![1.0]);
    }

    #[test]
    fn sampling_errors() {
        let env = checkerboard();
        assert!(env.enumerate_or_sample(&SamplingPlan::Exact { count: 0 }).is_err());
        assert!(env.enumerate_or_sample(&SamplingPlan::Exact { count: 3 }).is_err());
        assert!(env.enumerate_or_sample(&SamplingPlan::MonteCarlo { count: 0, seed: 1 }).is_err());
        assert!(iid2().enumerate_or_sample(&SamplingPlan::Exact { count: 4 }).is_err());
    }

    #[test]
    fn iid_sampling_is_seeded() {
        let env = iid2();
        let plan = SamplingPlan::MonteCarlo { count: 64, seed: 7 };
        let a = env.enumerate_or_sample(&plan).unwrap();
        let b = env.enumerate_or_sample(&plan).unwrap();
        assert_eq!(a, b);
        let total: f64 = a.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn shift_group_laws() {
        let env = checkerboard();
        let r = Realization { offset: [1, 0, 0], stream: 0 };
        assert_eq!(env.shift(&r, &[0, 0, 0]), r);
        assert_eq!(env.shift(&env.shift(&r, &[1, 0, 0]), &[0, 1, 0]), env.shift(&r, &[1, 1, 0]));
        assert_eq!(env.shift(&r, &[2, 0, 0]), r);
        assert_eq!(env.shift(&r, &[-3, 5, 0]), env.shift(&r, &[1, 1, 0]));
    }

    #[test]
    fn shift_is_bijection_on_offsets() {
        let env = Environment::shift_torus(2, &[3, 2], (0..6).map(|i| i % 2).collect(), vec![Phase::scalar(1.0), Phase::scalar(2.0)]).unwrap();
        let ens = env.enumerate_or_sample(&SamplingPlan::Exact { count: 6 }).unwrap();
        for z in [[1, 0, 0], [2, 1, 0], [-1, 3, 0]] {
            let mut hit = vec![false; 6];
            for r in &ens.members {
                hit[env.site_index(&env.shift(r, &z).offset)] = true;
            }
            assert!(hit.iter().all(|&h| h));
        }
    }

    #[test]
    fn checkerboard_lookup_and_parity_flip() {
        let env = checkerboard();
        assert_eq!(env.phase_at(&Realization::origin(), &[0, 0, 0]), 0);
        let shifted = Realization { offset: [1, 0, 0], stream: 0 };
        assert_eq!(env.phase_at(&shifted, &[0, 0, 0]), 1);
    }

    #[test]
    fn iid_stationarity_identity() {
        let env = iid2();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Realization::with_stream(99);
        let mut mismatches = 0;
        for _ in 0..10_000 {
            let z = [rng.gen_range(-50..50), rng.gen_range(-50..50), 0];
            let c = [rng.gen_range(-50..50), rng.gen_range(-50..50), 0];
            let lhs = env.phase_at(&env.shift(&r, &z), &c);
            let rhs = env.phase_at(&r, &[c[0] + z[0], c[1] + z[1], 0]);
            mismatches += usize::from(lhs != rhs);
        }
        assert_eq!(mismatches, 0);
    }

    #[test]
    fn expectation_examples() {
        let env = checkerboard();
        let plan = SamplingPlan::Exact { count: 4 };
        let ind = env.expectation(|r| f64::from(env.phase_at(r, &[0; 3]) == 0), &plan).unwrap();
        assert_eq!(ind.mean, 0.5);
        let c = env.expectation(|_| 3.7, &plan).unwrap();
        assert!((c.mean - 3.7).abs() < 1e-15);
    }

    #[test]
    fn iid_indicator_mean_within_binomial_error() {
        let env = iid2();
        let est = env
            .expectation(|r| f64::from(env.phase_at(r, &[0; 3]) == 0), &SamplingPlan::MonteCarlo { count: 10_000, seed: 3 })
            .unwrap();
        assert!((est.mean - 0.5).abs() < 3.0 * 0.5 / 100.0, "{est:?}");
        assert!((est.std_error - 0.005).abs() < 5e-4);
    }

    #[test]
    fn measure_preservation_on_torus() {
        let env = Environment::shift_torus(2, &[3, 3], vec![0, 1, 2, 1, 0, 2, 2, 1, 0], vec![Phase::scalar(1.0), Phase::scalar(2.0), Phase::scalar(5.0)]).unwrap();
        let plan = SamplingPlan::Exact { count: 9 };
        let obs = |r: &Realization| env.eval_env(r, &[0; 3]).a + 0.1 * env.eval_env(r, &[1, 2, 0]).a.powi(2);
        let base = env.expectation(obs, &plan).unwrap().mean;
        for z in [[1, 0, 0], [0, 2, 0], [5, -7, 0]] {
            let shifted = env.expectation(|r| obs(&env.shift(r, &z)), &plan).unwrap().mean;
            assert_eq!(shifted, base);
        }
    }

    #[test]
    fn birkhoff_exact_on_commensurate_window() {
        let env = checkerboard();
        let ind = |k: usize| f64::from(k == 0);
        for off in 0..2 {
            let r = Realization { offset: [off, 0, 0], stream: 0 };
            assert_eq!(env.birkhoff_average(&r, ind, 1.0, 0.25), 0.5);
        }
        let det = Environment::deterministic(2, Phase::scalar(2.0)).unwrap();
        assert_eq!(det.birkhoff_average(&Realization::origin(), |_| 0.7, 1.3, 0.1), 0.7);
    }

    #[test]
    fn refine_upsamples_configuration() {
        let env = Environment::shift_torus(1, &[2], vec![0, 1], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap();
        let fine = env.refine(3).unwrap();
        match fine.medium() {
            Medium::ShiftTorus { config, period } => {
                assert_eq!(period[0], 6);
                assert_eq!(config, &vec![0, 0, 0, 1, 1, 1]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn validation_rejects_bad_tables() {
        let bad_len = Environment::shift_torus(2, &[2, 2], vec![0, 1, 1], vec![Phase::scalar(1.0), Phase::scalar(4.0)]);
        assert!(bad_len.is_err());
        let bad_idx = Environment::shift_torus(1, &[2], vec![0, 2], vec![Phase::scalar(1.0), Phase::scalar(4.0)]);
        assert!(bad_idx.is_err());
        let bad_p = Environment::iid(1, vec![0.5, 0.6], 1, vec![Phase::scalar(1.0), Phase::scalar(4.0)]);
        assert!(bad_p.is_err());
        let asym = Phase::scalar(1.0).with_matrix(2, &[vec![1.0, 0.1], vec![0.0, 1.0]]);
        assert!(Environment::deterministic(2, asym).is_err());
        assert!(Environment::deterministic(1, Phase::scalar(4.0)).unwrap().with_bound(2.0).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let env = checkerboard();
        let text = env.to_toml_string();
        let back = Environment::from_toml_str(&text).unwrap();
        assert_eq!(back, env);
        let unknown = text.replace("kind", "kind_typo");
        assert!(Environment::from_toml_str(&unknown).is_err());
    }

    #[test]
    fn quartic_lambda() {
        assert!((Quartic::double_well().lambda() + 1.0).abs() < 1e-15);
        let q = Quartic([0.0, 0.0, 1.0, 2.0, 3.0]);
        let grid_min = (-400..=400).map(|i| q.second_derivative(i as f64 * 0.01)).fold(f64::INFINITY, f64::min);
        assert!((grid_min - q.lambda()).abs() < 1e-3);
    }
}
