//! Observation rows and the pure dataset transforms: cleaning, splitting,
//! noise injection and standardization. Every randomized step is a function of
//! its input and an explicit seed.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{rng_for, stream};

/// Five-minute bins per hour; converts veh/5min to veh/hour.
pub const BINS_PER_HOUR: f64 = 12.0;

/// `ρ = q·12 / v`: veh/5min and mph to veh/mile.
#[inline]
pub fn density_from(flow_per_5min: f64, speed_mph: f64) -> f64 {
    flow_per_5min * BINS_PER_HOUR / speed_mph
}

/// One raw sensor reading as it appears in the input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub station_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    /// Mile marker.
    pub milepost: f64,
    /// Vehicles per 5-minute bin.
    pub flow: f64,
    /// Harmonic-mean speed, mph.
    pub speed: f64,
}

/// A cleaned observation with derived time and density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSample {
    pub station_id: String,
    pub timestamp: i64,
    /// Position, miles.
    pub x: f64,
    /// Hours since the earliest timestamp in the dataset.
    pub t: f64,
    /// veh/5min
    pub flow: f64,
    /// mph
    pub speed: f64,
    /// veh/mile
    pub density: f64,
}

impl TrafficSample {
    pub fn observation(&self) -> Observation {
        Observation {
            station_id: self.station_id.clone(),
            timestamp: self.timestamp,
            milepost: self.x,
            flow: self.flow,
            speed: self.speed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub train_fraction: f64,
    /// Shuffled row order; the first `n_train` entries form the training split.
    pub permutation: Vec<usize>,
    pub n_train: usize,
    pub roles: Vec<SplitRole>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    /// `U(-A, A)`
    Uniform,
    /// `N(0, A²)`
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub seed: u64,
    pub fraction: f64,
    /// veh/5min
    pub amplitude: f64,
    pub distribution: NoiseDistribution,
    /// Perturbed row indices, ascending.
    pub rows: Vec<usize>,
    /// Applied flow change per perturbed row, after clamping at zero.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    pub std: f64,
}

impl ColumnScale {
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, v: f64) -> f64 {
        self.mean + self.std * v
    }
}

/// Per-column z-score constants from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x: ColumnScale,
    pub t: ColumnScale,
    pub flow: ColumnScale,
    pub speed: ColumnScale,
    pub density: ColumnScale,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<TrafficSample>,
    /// Rows rejected while cleaning.
    pub dropped_rows: usize,
    pub split: Option<SplitRecord>,
    pub noise: Option<NoiseRecord>,
    pub standardization: Option<Standardization>,
    pub source_hash: Option<String>,
}

fn valid(o: &Observation) -> bool {
    o.milepost.is_finite() && o.flow.is_finite() && o.speed.is_finite() && o.flow >= 0.0 && o.speed > 0.0
}

impl Dataset {
    /// Cleans raw readings: rows with non-positive speed, negative flow or
    /// non-finite fields are dropped and counted. Time is measured in hours
    /// from the earliest retained timestamp.
    pub fn from_observations(rows: Vec<Observation>) -> Result<Self> {
        Self::from_observations_with_drops(rows, 0)
    }

    pub fn from_observations_with_drops(rows: Vec<Observation>, already_dropped: usize) -> Result<Self> {
        let total = rows.len();
        let kept: Vec<Observation> = rows.into_iter().filter(valid).collect();
        if kept.is_empty() {
            return Err(Error::Empty("no valid observation rows"));
        }
        let origin = kept.iter().map(|o| o.timestamp).min().unwrap_or(0);
        let dropped = already_dropped + total - kept.len();
        let samples = kept
            .into_iter()
            .map(|o| TrafficSample {
                t: (o.timestamp - origin) as f64 / 3600.0,
                density: density_from(o.flow, o.speed),
                station_id: o.station_id,
                timestamp: o.timestamp,
                x: o.milepost,
                flow: o.flow,
                speed: o.speed,
            })
            .collect();
        Ok(Self { samples, dropped_rows: dropped, ..Self::default() })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn role(&self, i: usize) -> Option<SplitRole> {
        self.split.as_ref().map(|s| s.roles[i])
    }

    /// Indices of training rows in ascending order (all rows when unsplit).
    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_with(SplitRole::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        match &self.split {
            Some(_) => self.indices_with(SplitRole::Test),
            None => Vec::new(),
        }
    }

    fn indices_with(&self, role: SplitRole) -> Vec<usize> {
        match &self.split {
            None => (0..self.len()).collect(),
            Some(s) => (0..self.len()).filter(|&i| s.roles[i] == role).collect(),
        }
    }

    /// Seeded shuffle-and-cut into train/test. `round(fraction·n)` rows train,
    /// kept within `[1, n-1]`.
    pub fn split(mut self, train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::InvalidConfig("train fraction must lie in (0, 1)".into()));
        }
        let n = self.len();
        if n < 2 {
            return Err(Error::InvalidConfig("need at least two rows to split".into()));
        }
        let mut permutation: Vec<usize> = (0..n).collect();
        permutation.shuffle(&mut rng_for(seed, stream::SPLIT, 0));
        let n_train = (math::round(train_fraction * n as f64) as usize).clamp(1, n - 1);
        let mut roles = alloc::vec![SplitRole::Test; n];
        for &i in &permutation[..n_train] {
            roles[i] = SplitRole::Train;
        }
        self.split = Some(SplitRecord { seed, train_fraction, permutation, n_train, roles });
        self.standardization = None;
        Ok(self)
    }

    /// Corrupts a seeded `fraction` of the training rows:
    /// `q ← max(0, q + δ)` with `δ ~ U(-A, A)` (or `N(0, A²)`), then re-derives
    /// density. Test rows are never touched.
    pub fn inject_noise(
        mut self,
        fraction: f64,
        amplitude: f64,
        distribution: NoiseDistribution,
        seed: u64,
    ) -> Result<Self> {
        if self.split.is_none() {
            return Err(Error::InvalidConfig("noise injection requires a train/test split".into()));
        }
        if !(0.0..=1.0).contains(&fraction) || !(amplitude >= 0.0) {
            return Err(Error::InvalidConfig("noise fraction must be in [0, 1] and amplitude >= 0".into()));
        }
        let train = self.train_indices();
        let k = math::round(fraction * train.len() as f64) as usize;
        let mut rng = rng_for(seed, stream::NOISE, 0);
        let mut rows: Vec<usize> = index::sample(&mut rng, train.len(), k).into_iter().map(|i| train[i]).collect();
        rows.sort_unstable();
        let gaussian = Normal::new(0.0, amplitude).map_err(|_| Error::InvalidConfig("bad noise amplitude".into()))?;
        let mut deltas = Vec::with_capacity(rows.len());
        for &i in &rows {
            let raw = match distribution {
                NoiseDistribution::Uniform if amplitude > 0.0 => rng.random_range(-amplitude..amplitude),
                NoiseDistribution::Uniform => 0.0,
                NoiseDistribution::Gaussian => gaussian.sample(&mut rng),
            };
            let s = &mut self.samples[i];
            let q = (s.flow + raw).max(0.0);
            deltas.push(q - s.flow);
            s.flow = q;
            s.density = density_from(q, s.speed);
        }
        self.noise = Some(NoiseRecord { seed, fraction, amplitude, distribution, rows, deltas });
        self.standardization = None;
        Ok(self)
    }

    /// Computes z-score constants from the training rows.
    pub fn standardize(mut self) -> Result<Self> {
        let train = self.train_indices();
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let col = |name: &'static str, f: &dyn Fn(&TrafficSample) -> f64| -> Result<ColumnScale> {
            let n = train.len() as f64;
            let mean = train.iter().map(|&i| f(&self.samples[i])).sum::<f64>() / n;
            let var = train.iter().map(|&i| { let d = f(&self.samples[i]) - mean; d * d }).sum::<f64>() / n;
            let std = math::sqrt(var);
            if !(std > 1e-12 * (1.0 + math::abs(mean))) {
                return Err(Error::ZeroVariance(name));
            }
            Ok(ColumnScale { mean, std })
        };
        let st = Standardization {
            x: col("milepost", &|s| s.x)?,
            t: col("time", &|s| s.t)?,
            flow: col("flow", &|s| s.flow)?,
            speed: col("speed", &|s| s.speed)?,
            density: col("density", &|s| s.density)?,
        };
        self.standardization = Some(st);
        Ok(self)
    }

    /// Bounding box `(x_min, x_max, t_min, t_max)` of the given rows.
    pub fn hull(&self, rows: &[usize]) -> Option<(f64, f64, f64, f64)> {
        let mut it = rows.iter().map(|&i| &self.samples[i]);
        let first = it.next()?;
        let init = (first.x, first.x, first.t, first.t);
        Some(it.fold(init, |(a, b, c, d), s| (a.min(s.x), b.max(s.x), c.min(s.t), d.max(s.t))))
    }
}
