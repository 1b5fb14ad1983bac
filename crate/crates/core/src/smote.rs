//! Class balancing: SMOTE oversampling for classes below the target count,
//! seeded uniform removal for classes above it.
//!
//! Images are flattened to their row-major intensities for the neighbour
//! search and interpolation, then reshaped to the parent's dimensions.

use std::collections::BTreeMap;
use std::fmt;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{LabeledSet, Sample};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Target {
    /// Raise every class to the size of the largest one.
    #[default]
    MaxClass,
    Count(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::MaxClass => f.write_str("max-class"),
            Target::Count(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "max-class" {
            return Ok(Target::MaxClass);
        }
        s.parse()
            .map(Target::Count)
            .map_err(|_| Error::invalid(format!("target must be a count or \"max-class\", got {s:?}")))
    }
}

impl Serialize for Target {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Target::MaxClass => s.serialize_str("max-class"),
            Target::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Target::Count(n)),
            Repr::Word(w) => w.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoteParams {
    pub k_neighbors: usize,
    #[serde(rename = "target_per_class")]
    pub target: Target,
    pub seed: u64,
}

impl Default for SmoteParams {
    fn default() -> Self {
        SmoteParams {
            k_neighbors: 5,
            target: Target::MaxClass,
            seed: 0,
        }
    }
}

/// How the interpolation gap `u` is chosen for each synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gap {
    /// `u ~ U[0, 1)` from the balancing stream.
    Uniform,
    /// Every draw replaced by a constant; the stream is still advanced.
    Fixed(f64),
}

/// Indices of the `k` nearest points to `points[query]` by Euclidean
/// distance, the query itself excluded. Ties go to the lower index.
pub fn knn_indices<P: AsRef<[f64]>>(points: &[P], query: usize, k: usize) -> Result<Vec<usize>> {
    if query >= points.len() {
        return Err(Error::invalid(format!(
            "query {query} out of range for {} points",
            points.len()
        )));
    }
    if k >= points.len() {
        return Err(Error::invalid(format!(
            "k = {k} needs more than {} points",
            points.len()
        )));
    }
    let q = points[query].as_ref();
    if let Some(bad) = points.iter().position(|p| p.as_ref().len() != q.len()) {
        return Err(Error::invalid(format!(
            "point {bad} has dimension {}, expected {}",
            points[bad].as_ref().len(),
            q.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, p)| (squared_distance(q, p.as_ref()), i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, i)| i).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `x + u * (neighbor - x)`, exact at both endpoints and never outside the
/// elementwise hull of the two inputs.
pub fn synthesize(x: &[f64], neighbor: &[f64], u: f64) -> Result<Vec<f64>> {
    if x.len() != neighbor.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            neighbor.len()
        )));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("gap must lie in [0, 1], got {u}")));
    }
    Ok(x.iter()
        .zip(neighbor)
        .map(|(&a, &b)| {
            if u == 0.0 {
                a
            } else if u == 1.0 {
                b
            } else {
                (a + u * (b - a)).clamp(a.min(b), a.max(b))
            }
        })
        .collect())
}

/// Result of [`balance_detailed`].
#[derive(Debug, Clone, PartialEq)]
pub struct Balanced {
    pub set: LabeledSet,
    pub target: usize,
    pub synthesized: Vec<usize>,
    pub removed: Vec<usize>,
}

pub fn balance(train: &LabeledSet, params: &SmoteParams) -> Result<LabeledSet> {
    Ok(balance_detailed(train, params, Gap::Uniform)?.set)
}

/// Brings every class to exactly the target count.
///
/// Survivors keep their input order; synthetic samples are appended after
/// them, grouped by class. Each class draws from its own split of the seed
/// stream, and all draws are made before any neighbour search.
pub fn balance_detailed(train: &LabeledSet, params: &SmoteParams, gap: Gap) -> Result<Balanced> {
    if params.k_neighbors == 0 {
        return Err(Error::invalid("k_neighbors must be at least 1"));
    }
    let counts = train.counts();
    let target = match params.target {
        Target::MaxClass => counts.iter().copied().max().unwrap_or(0),
        Target::Count(n) => n,
    };
    if target < 1 {
        return Err(Error::invalid("balancing target must be at least 1"));
    }

    let root = Stream::new(params.seed);
    let samples = train.samples();
    let mut dropped = vec![false; samples.len()];
    let mut synthetics = Vec::new();
    let mut synthesized = vec![0; counts.len()];
    let mut removed = vec![0; counts.len()];

    for (class, &n) in counts.iter().enumerate() {
        let members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == class)
            .collect();
        let mut stream = root.split(class as u64);
        if n > target {
            let mut order = members.clone();
            stream.shuffle(&mut order);
            for &i in &order[..n - target] {
                dropped[i] = true;
            }
            removed[class] = n - target;
        } else if n < target {
            if n < 2 {
                return Err(Error::InsufficientNeighbors {
                    class: train.class_names()[class].clone(),
                    available: n,
                });
            }
            let k = params.k_neighbors.min(n - 1);
            if k < params.k_neighbors {
                warn!(
                    "class '{}' has {n} samples; using k = {k} instead of {}",
                    train.class_names()[class],
                    params.k_neighbors
                );
            }
            let draws: Vec<(usize, usize, f64)> = (0..target - n)
                .map(|_| {
                    let parent = stream.below(n as u64) as usize;
                    let rank = stream.below(k as u64) as usize;
                    let u = stream.next_f64();
                    let u = match gap {
                        Gap::Uniform => u,
                        Gap::Fixed(v) => v,
                    };
                    (parent, rank, u)
                })
                .collect();
            let points: Vec<&[f64]> = members.iter().map(|&i| samples[i].image.data()).collect();
            let mut parents: Vec<usize> = draws.iter().map(|d| d.0).collect();
            parents.sort_unstable();
            parents.dedup();
            let neighbours: BTreeMap<usize, Vec<usize>> = parents
                .par_iter()
                .map(|&p| Ok((p, knn_indices(&points, p, k)?)))
                .collect::<Result<_>>()?;
            for (parent, rank, u) in draws {
                let base = &samples[members[parent]].image;
                let other = points[neighbours[&parent][rank]];
                let data = synthesize(base.data(), other, u)?;
                synthetics.push(Sample {
                    image: Image::new(base.height(), base.width(), base.channels(), data)?,
                    label: class,
                    synthetic: true,
                });
            }
            synthesized[class] = target - n;
        }
    }

    let mut out: Vec<Sample> = samples
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(s, _)| s.clone())
        .collect();
    out.extend(synthetics);
    Ok(Balanced {
        set: train.with_samples(out)?,
        target,
        synthesized,
        removed,
    })
}
