//! Planted-direction activation generator.
//!
//! Unit directions with a prescribed Gram matrix are laid on a seeded
//! orthonormal frame. Each contrastive pair shares a Gaussian base vector;
//! the positive side adds `intensity·u`, the negative side subtracts it, and
//! both get independent Gaussian noise. At zero noise the mean difference is
//! exactly `2·intensity·u`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::actio::{ActivationRecord, ActivationSet};
use crate::algebra::cosine;
use crate::caa::compute_vector;
use crate::corpus::{canonical_order, Polarity, TraitId};
use crate::linalg;
use crate::{Error, Result};

/// Standard deviation of the per-pair base vector.
pub const BASE_SIGMA: f64 = 1.0;

const GRAM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub d: usize,
    pub traits: Vec<TraitId>,
    /// Target Gram matrix of the planted directions; `None` is the identity.
    pub gram: Option<Vec<Vec<f64>>>,
    pub intensity_scale: f64,
    pub noise_sigma: f64,
    pub n_pairs: usize,
    pub seed: u64,
}

impl PlantSpec {
    pub fn new(d: usize, traits: Vec<TraitId>) -> Self {
        PlantSpec {
            d,
            traits,
            gram: None,
            intensity_scale: 1.0,
            noise_sigma: 0.0,
            n_pairs: 64,
            seed: 0,
        }
    }

    pub fn snr(&self) -> f64 {
        self.intensity_scale / self.noise_sigma
    }

    fn gram_matrix(&self) -> DMatrix<f64> {
        let k = self.traits.len();
        match &self.gram {
            None => DMatrix::identity(k, k),
            Some(rows) => DMatrix::from_fn(k, k, |i, j| rows[i][j]),
        }
    }

    fn validate(&self) -> Result<()> {
        let k = self.traits.len();
        if k == 0 {
            return Err(Error::Empty("plant spec has no traits"));
        }
        if k > self.d {
            return Err(Error::InfeasibleGram(format!("{k} traits exceed d = {}", self.d)));
        }
        if self.n_pairs == 0 {
            return Err(Error::Empty("plant spec needs n_pairs >= 1"));
        }
        if !(self.intensity_scale > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("intensity must be > 0 and noise >= 0".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.traits.iter().all(|t| seen.insert(t)) {
            return Err(Error::Config("duplicate trait in plant spec".into()));
        }
        if let Some(rows) = &self.gram {
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(Error::InfeasibleGram(format!("gram must be {k}x{k}")));
            }
            for i in 0..k {
                if (rows[i][i] - 1.0).abs() > GRAM_TOLERANCE {
                    return Err(Error::InfeasibleGram(format!("diagonal entry {i} is not 1")));
                }
                for j in 0..k {
                    if (rows[i][j] - rows[j][i]).abs() > GRAM_TOLERANCE {
                        return Err(Error::InfeasibleGram("not symmetric".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Equicorrelated Gram matrix: unit diagonal, `rho` everywhere else.
pub fn equicorrelated_gram(k: usize, rho: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { rho }).collect())
        .collect()
}

/// The first `n` traits in reporting order (H, E, X, A, C, O, sycophancy),
/// followed by facets when `n > 7`.
pub fn default_traits(n: usize) -> Vec<TraitId> {
    let tax = crate::corpus::builtin_taxonomy();
    canonical_order()
        .into_iter()
        .chain(tax.facets().cloned())
        .take(n)
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a parent seed and an index.
pub fn hash64(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn label_stream(label: &str) -> u64 {
    // FNV-1a
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

const FRAME_STREAM: u64 = 0x0066_7261_6d65;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * sigma
        })
        .collect()
}

/// `k` orthonormal vectors in `R^d` from a seeded Gaussian draw.
fn orthonormal_frame(d: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash64(seed, FRAME_STREAM));
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v = gaussian(&mut rng, d, 1.0);
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for q in &frame {
                let c = linalg::dot64(&v, q);
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = linalg::norm64(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            frame.push(v);
        }
    }
    frame
}

/// Row factor `L` with `L Lᵀ = G`: Cholesky when positive definite, a
/// clipped eigendecomposition when only semidefinite.
fn factor_gram(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = g.clone().cholesky() {
        return Ok(ch.l());
    }
    let eig = SymmetricEigen::new(g.clone());
    let min = eig.eigenvalues.min();
    if min < -GRAM_TOLERANCE {
        return Err(Error::InfeasibleGram(format!(
            "not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    let sqrt = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// Planted directions plus one contrastive set per trait.
#[derive(Debug, Clone)]
pub struct Planted {
    pub directions: BTreeMap<TraitId, Vec<f32>>,
    pub sets: BTreeMap<TraitId, ActivationSet>,
}

pub fn plant_directions(spec: &PlantSpec) -> Result<BTreeMap<TraitId, Vec<f32>>> {
    spec.validate()?;
    let k = spec.traits.len();
    let l = factor_gram(&spec.gram_matrix())?;
    let frame = orthonormal_frame(spec.d, k, spec.seed);
    let mut out = BTreeMap::new();
    for (i, t) in spec.traits.iter().enumerate() {
        let mut u = vec![0.0f64; spec.d];
        for (j, q) in frame.iter().enumerate() {
            let c = l[(i, j)];
            u.iter_mut().zip(q).for_each(|(x, y)| *x += c * y);
        }
        let n = linalg::norm64(&u);
        u.iter_mut().for_each(|x| *x /= n);
        out.insert(t.clone(), linalg::to_f32(&u));
    }
    Ok(out)
}

/// Contrastive set around a unit direction, using the spec's intensity,
/// noise and pair count.
pub fn contrastive_set(
    trait_id: &TraitId,
    direction: &[f32],
    spec: &PlantSpec,
    stream_seed: u64,
) -> Result<ActivationSet> {
    let d = direction.len();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let s = spec.intensity_scale;
    let mut records = Vec::with_capacity(2 * spec.n_pairs);
    for p in 0..spec.n_pairs {
        let base = gaussian(&mut rng, d, BASE_SIGMA);
        for pol in [Polarity::Positive, Polarity::Negative] {
            let sign = pol.as_i8() as f64;
            let noise = gaussian(&mut rng, d, spec.noise_sigma);
            let vector = (0..d)
                .map(|k| (base[k] + sign * s * direction[k] as f64 + noise[k]) as f32)
                .collect();
            records.push(ActivationRecord {
                pair_id: p as u64,
                polarity: pol,
                layer: 0,
                vector,
            });
        }
    }
    ActivationSet::new(
        trait_id.clone(),
        d,
        1,
        records,
        format!(
            "synth:d={d},intensity={s},noise={},pairs={},seed={stream_seed:#x}",
            spec.noise_sigma, spec.n_pairs
        ),
    )
}

pub fn plant(spec: &PlantSpec) -> Result<Planted> {
    let directions = plant_directions(spec)?;
    let mut sets = BTreeMap::new();
    for t in &spec.traits {
        let stream = hash64(spec.seed, label_stream(t.label()));
        sets.insert(t.clone(), contrastive_set(t, &directions[t], spec, stream)?);
    }
    Ok(Planted { directions, sets })
}

/// Behaviour direction `normalize(Σ α_τ u_τ)` and its contrastive set.
pub fn plant_behavior(
    behavior: &TraitId,
    directions: &BTreeMap<TraitId, Vec<f32>>,
    alphas: &BTreeMap<TraitId, f64>,
    spec: &PlantSpec,
) -> Result<(Vec<f32>, ActivationSet)> {
    let d = directions
        .values()
        .next()
        .map(Vec::len)
        .ok_or(Error::Empty("no planted directions"))?;
    let mut acc = vec![0.0f64; d];
    for (t, &a) in alphas {
        let u = directions
            .get(t)
            .ok_or_else(|| Error::MissingTraitVector(t.to_string()))?;
        acc.iter_mut().zip(u).for_each(|(x, &y)| *x += a * y as f64);
    }
    let n = linalg::norm64(&acc);
    if !(n > linalg::DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm: n });
    }
    let u: Vec<f32> = acc.iter().map(|x| (x / n) as f32).collect();
    let stream = hash64(spec.seed, label_stream(behavior.label()) ^ 0xbe4a_010f);
    let set = contrastive_set(behavior, &u, spec, stream)?;
    Ok((u, set))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCell {
    pub noise_sigma: f64,
    pub n_pairs: usize,
    pub mean_cosine: f64,
    pub min_cosine: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryGrid {
    pub d: usize,
    pub intensity_scale: f64,
    pub noise_sigmas: Vec<f64>,
    pub n_pairs: Vec<usize>,
    pub seeds: usize,
    pub seed: u64,
}

impl RecoveryGrid {
    fn cells(&self) -> Vec<(f64, usize)> {
        self.n_pairs
            .iter()
            .flat_map(|&n| self.noise_sigmas.iter().map(move |&s| (s, n)))
            .collect()
    }
}

/// Cosine between the extracted and planted direction for one replicate.
pub fn recovery_cosine(d: usize, intensity: f64, noise: f64, n_pairs: usize, seed: u64) -> Result<f64> {
    let t = TraitId::sycophancy();
    let mut spec = PlantSpec::new(d, vec![t.clone()]);
    spec.intensity_scale = intensity;
    spec.noise_sigma = noise;
    spec.n_pairs = n_pairs;
    spec.seed = seed;
    let planted = plant(&spec)?;
    let v = compute_vector(&planted.sets[&t], 0)?;
    cosine(&v.v, &planted.directions[&t])
}

/// Monte-Carlo table of mean recovery cosine per (noise, n_pairs) cell. Cell
/// `i` draws its replicates from `hash64(grid.seed, i)`.
pub fn recovery_sweep(grid: &RecoveryGrid) -> Result<Vec<RecoveryCell>> {
    if grid.noise_sigmas.is_empty() || grid.n_pairs.is_empty() || grid.seeds == 0 {
        return Err(Error::Empty("recovery grid"));
    }
    let run = |(i, (noise, n)): (usize, (f64, usize))| -> Result<RecoveryCell> {
        let cell_seed = hash64(grid.seed, i as u64);
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        for r in 0..grid.seeds {
            let c = recovery_cosine(grid.d, grid.intensity_scale, noise, n, hash64(cell_seed, r as u64))?;
            sum += c;
            min = min.min(c);
        }
        Ok(RecoveryCell {
            noise_sigma: noise,
            n_pairs: n,
            mean_cosine: sum / grid.seeds as f64,
            min_cosine: min,
            seeds: grid.seeds,
        })
    };
    let cells: Vec<(usize, (f64, usize))> = grid.cells().into_iter().enumerate().collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        cells.into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        cells.into_iter().map(run).collect()
    }
}
