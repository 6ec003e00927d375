//! Affine maps between the residual streams of two layers, fit by ridge
//! regression, and how strongly they pass a direction through.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actio::{read_tensors, write_tensors, ActivationSet, Polarity, Tensor, TensorFile};
use crate::caa::meta_path;
use crate::linalg;
use crate::steer::{InterventionPlan, ToyTransformer};
use crate::{Error, Result};

/// Allowed deviation from unit norm for sensitivity directions.
pub const DIRECTION_TOLERANCE: f64 = 1e-5;

/// `h_dst ≈ W h_src + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTranscoder {
    pub src_layer: usize,
    pub dst_layer: usize,
    d: usize,
    /// Row-major, `w[i * d + j]` maps input `j` to output `i`.
    w: Vec<f64>,
    b: Vec<f64>,
    pub ridge: f64,
    pub fit_rmse: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub gain: f64,
    /// `(index, (W u)_i)`, largest magnitude first.
    pub top_coords: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionRow {
    pub src_layer: usize,
    pub dst_layer: usize,
    pub gain: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranscoderMeta {
    src_layer: usize,
    dst_layer: usize,
    d: usize,
    ridge: f64,
    fit_rmse: f64,
    n_samples: usize,
}

fn check_layers(src_layer: usize, dst_layer: usize) -> Result<()> {
    if src_layer >= dst_layer {
        return Err(Error::Config(format!(
            "transcoder source layer {src_layer} must precede destination {dst_layer}"
        )));
    }
    Ok(())
}

/// Ridge-regularized least squares with an unpenalized bias.
///
/// Centering both sides removes the bias from the normal equations, which
/// become `(XᵀX + ridge·I) Wᵀ = XᵀY` on the centered data.
pub fn fit<S: AsRef<[f32]>, T: AsRef<[f32]>>(
    src_layer: usize,
    dst_layer: usize,
    pairs: &[(S, T)],
    ridge: f64,
) -> Result<LinearTranscoder> {
    check_layers(src_layer, dst_layer)?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    if pairs.len() < 2 {
        return Err(Error::Empty("transcoder training pairs (need at least 2)"));
    }
    let d = pairs[0].0.as_ref().len();
    if d == 0 {
        return Err(Error::Empty("transcoder input dimension"));
    }
    for (s, t) in pairs {
        for len in [s.as_ref().len(), t.as_ref().len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, found: len });
            }
        }
    }
    let n = pairs.len();
    let mut mx = vec![0.0f64; d];
    let mut my = vec![0.0f64; d];
    for (s, t) in pairs {
        for j in 0..d {
            mx[j] += s.as_ref()[j] as f64;
            my[j] += t.as_ref()[j] as f64;
        }
    }
    mx.iter_mut().chain(my.iter_mut()).for_each(|v| *v /= n as f64);

    let x = DMatrix::from_fn(n, d, |r, c| pairs[r].0.as_ref()[c] as f64 - mx[c]);
    let y = DMatrix::from_fn(n, d, |r, c| pairs[r].1.as_ref()[c] as f64 - my[c]);
    let xt = x.transpose();
    let mut gram = &xt * &x;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = &xt * &y;
    let wt = linalg::solve_spd(gram, &rhs)?;

    let mut w = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            w[i * d + j] = wt[(j, i)];
        }
    }
    let b: Vec<f64> = (0..d)
        .map(|i| my[i] - (0..d).map(|j| w[i * d + j] * mx[j]).sum::<f64>())
        .collect();
    let mut t = LinearTranscoder {
        src_layer,
        dst_layer,
        d,
        w,
        b,
        ridge,
        fit_rmse: 0.0,
        n_samples: n,
    };
    t.fit_rmse = t.rmse(pairs)?;
    Ok(t)
}

/// Pairs each record at `src_layer` with the record of the same pair and
/// polarity at `dst_layer`. Records missing either layer are skipped.
pub fn pairs_from_set(set: &ActivationSet, src_layer: usize, dst_layer: usize) -> Vec<(Vec<f32>, Vec<f32>)> {
    let mut dst: BTreeMap<(u64, i8), &[f32]> = BTreeMap::new();
    for r in set.at_layer(dst_layer) {
        dst.insert((r.pair_id, r.polarity.as_i8()), &r.vector);
    }
    let mut src: Vec<_> = set.at_layer(src_layer).collect();
    src.sort_by_key(|r| (r.pair_id, r.polarity == Polarity::Negative));
    src.into_iter()
        .filter_map(|r| {
            dst.get(&(r.pair_id, r.polarity.as_i8()))
                .map(|t| (r.vector.clone(), t.to_vec()))
        })
        .collect()
}

pub fn fit_from_set(set: &ActivationSet, src_layer: usize, dst_layer: usize, ridge: f64) -> Result<LinearTranscoder> {
    for layer in [src_layer, dst_layer] {
        if layer >= set.n_layers() {
            return Err(Error::InvalidLayer {
                layer,
                n_layers: set.n_layers(),
            });
        }
    }
    fit(src_layer, dst_layer, &pairs_from_set(set, src_layer, dst_layer), ridge)
}

/// Fits each `(src, dst)` hop independently.
pub fn fit_hops(set: &ActivationSet, hops: &[(usize, usize)], ridge: f64) -> Result<Vec<LinearTranscoder>> {
    #[cfg(feature = "parallel")]
    let it = hops.par_iter();
    #[cfg(not(feature = "parallel"))]
    let it = hops.iter();
    it.map(|&(s, t)| fit_from_set(set, s, t, ridge)).collect()
}

/// Training pairs from every position of every prompt in unsteered runs.
pub fn pairs_from_model(
    model: &ToyTransformer,
    prompts: &[Vec<u32>],
    src_layer: usize,
    dst_layer: usize,
) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    let n_layers = model.config().n_layers;
    for layer in [src_layer, dst_layer] {
        if layer >= n_layers {
            return Err(Error::InvalidLayer { layer, n_layers });
        }
    }
    let plan = InterventionPlan::empty();
    let mut pairs = Vec::new();
    for p in prompts {
        let out = model.forward(p, &plan, p.len())?;
        for (s, t) in out.snapshots[src_layer].iter().zip(&out.snapshots[dst_layer]) {
            pairs.push((s.clone(), t.clone()));
        }
    }
    Ok(pairs)
}

pub fn fit_from_model(
    model: &ToyTransformer,
    prompts: &[Vec<u32>],
    src_layer: usize,
    dst_layer: usize,
    ridge: f64,
) -> Result<LinearTranscoder> {
    check_layers(src_layer, dst_layer)?;
    fit(src_layer, dst_layer, &pairs_from_model(model, prompts, src_layer, dst_layer)?, ridge)
}

impl LinearTranscoder {
    /// Builds a transcoder from explicit weights (`w` row-major `d × d`).
    pub fn from_parts(src_layer: usize, dst_layer: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        check_layers(src_layer, dst_layer)?;
        let d = b.len();
        if w.len() != d * d {
            return Err(Error::DimensionMismatch {
                expected: d * d,
                found: w.len(),
            });
        }
        Ok(LinearTranscoder {
            src_layer,
            dst_layer,
            d,
            w,
            b,
            ridge: 0.0,
            fit_rmse: 0.0,
            n_samples: 0,
        })
    }

    pub fn identity(src_layer: usize, dst_layer: usize, d: usize) -> Result<Self> {
        let mut w = vec![0.0; d * d];
        (0..d).for_each(|i| w[i * d + i] = 1.0);
        Self::from_parts(src_layer, dst_layer, w, vec![0.0; d])
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.d + j]
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn frobenius_norm(&self) -> f64 {
        linalg::norm64(&self.w)
    }

    /// `W x`, without the bias.
    pub fn apply_linear(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: x.len(),
            });
        }
        Ok(self.w.chunks_exact(self.d).map(|row| linalg::dot64(row, x)).collect())
    }

    pub fn predict64(&self, h: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.apply_linear(h)?;
        y.iter_mut().zip(&self.b).for_each(|(y, b)| *y += b);
        Ok(y)
    }

    pub fn predict(&self, h: &[f32]) -> Result<Vec<f64>> {
        self.predict64(&linalg::to_f64(h))
    }

    /// Root mean squared residual over all coordinates of `pairs`.
    pub fn rmse<S: AsRef<[f32]>, T: AsRef<[f32]>>(&self, pairs: &[(S, T)]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Empty("evaluation pairs"));
        }
        let mut sse = 0.0;
        for (s, t) in pairs {
            let p = self.predict(s.as_ref())?;
            let t = t.as_ref();
            if t.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    found: t.len(),
                });
            }
            sse += p.iter().zip(t).map(|(p, &t)| (p - t as f64).powi(2)).sum::<f64>();
        }
        Ok((sse / (pairs.len() * self.d) as f64).sqrt())
    }

    /// `‖W u‖` and the `top_k` largest-magnitude coordinates of `W u`.
    pub fn sensitivity(&self, direction: &[f32], top_k: usize) -> Result<Sensitivity> {
        let n = linalg::norm(direction);
        if (n - 1.0).abs() > DIRECTION_TOLERANCE {
            return Err(Error::NotNormalized(format!("sensitivity direction (norm {n})")));
        }
        let wu = self.apply_linear(&linalg::to_f64(direction))?;
        let mut idx: Vec<usize> = (0..wu.len()).collect();
        idx.sort_by(|&a, &b| wu[b].abs().total_cmp(&wu[a].abs()).then(a.cmp(&b)));
        Ok(Sensitivity {
            gain: linalg::norm64(&wu),
            top_coords: idx.into_iter().take(top_k).map(|i| (i, wu[i])).collect(),
        })
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut tf = TensorFile::new();
        tf.insert(
            "W",
            Tensor {
                shape: vec![self.d, self.d],
                data: linalg::to_f32(&self.w),
            },
        );
        tf.insert(
            "b",
            Tensor {
                shape: vec![self.d],
                data: linalg::to_f32(&self.b),
            },
        );
        tf
    }

    /// Writes the tensors plus a `<path>.json` sidecar. Weights are stored
    /// as `f32`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_tensors(&self.to_tensors(), path)?;
        let meta = TranscoderMeta {
            src_layer: self.src_layer,
            dst_layer: self.dst_layer,
            d: self.d,
            ridge: self.ridge,
            fit_rmse: self.fit_rmse,
            n_samples: self.n_samples,
        };
        let mut json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("transcoder metadata", e))?;
        json.push('\n');
        let mp = meta_path(path);
        fs::write(&mp, json).map_err(|e| Error::io(mp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let tf = read_tensors(path)?;
        let mp = meta_path(path);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: TranscoderMeta =
            serde_json::from_str(&text).map_err(|e| Error::json(mp.display().to_string(), e))?;
        let d = meta.d;
        let w = linalg::to_f64(&tf.require("W", &[d, d])?.data);
        let b = linalg::to_f64(&tf.require("b", &[d])?.data);
        let mut t = Self::from_parts(meta.src_layer, meta.dst_layer, w, b)?;
        t.ridge = meta.ridge;
        t.fit_rmse = meta.fit_rmse;
        t.n_samples = meta.n_samples;
        Ok(t)
    }
}

/// Gain of each hop along the direction registered for its source layer.
pub fn transmission_report(
    transcoders: &[LinearTranscoder],
    directions: &BTreeMap<usize, Vec<f32>>,
) -> Result<Vec<TransmissionRow>> {
    transcoders
        .iter()
        .map(|t| {
            let u = directions.get(&t.src_layer).ok_or(Error::MissingTraitVector(format!(
                "direction for source layer {}",
                t.src_layer
            )))?;
            Ok(TransmissionRow {
                src_layer: t.src_layer,
                dst_layer: t.dst_layer,
                gain: t.sensitivity(u, 0)?.gain,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_gain_and_top_coordinate() {
        let d = 4;
        let mut w = vec![0.0; d * d];
        w[0] = 3.0;
        let t = LinearTranscoder::from_parts(0, 1, w, vec![0.5; d]).unwrap();
        let s = t.sensitivity(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(s.gain, 3.0);
        assert_eq!(s.top_coords, vec![(0, 3.0), (1, 0.0)]);
    }

    #[test]
    fn zero_map_predicts_bias() {
        let t = LinearTranscoder::from_parts(1, 2, vec![0.0; 9], vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(t.predict(&[4.0, 5.0, 6.0]).unwrap(), vec![1.0, -2.0, 0.5]);
        assert!(matches!(t.predict(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn layer_order_and_pair_count_enforced() {
        let pairs = vec![(vec![1.0f32], vec![1.0f32]); 3];
        assert!(fit(2, 2, &pairs, 0.0).is_err());
        assert!(matches!(fit(0, 1, &pairs[..1], 0.0), Err(Error::Empty(_))));
    }

    #[test]
    fn annihilated_direction_has_zero_gain() {
        let t = LinearTranscoder::from_parts(0, 1, vec![0.0, 0.0, 0.0, 1.0], vec![0.0; 2]).unwrap();
        let dirs = BTreeMap::from([(0, vec![1.0f32, 0.0])]);
        assert_eq!(transmission_report(&[t], &dirs).unwrap()[0].gain, 0.0);
    }
}
