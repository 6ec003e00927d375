//! Steering-vector geometry: cosines, similarity matrices, signed
//! compositions, ridge decomposition onto a trait basis, projection ablation
//! and pathway separability.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::caa::{SteeringVector, UNIT_TOLERANCE};
use crate::corpus::{CompositionSpec, TraitId};
use crate::linalg::{self, DEGENERATE_NORM};
use crate::{Error, Result};

/// Default ridge weight for [`decompose`].
pub const DEFAULT_RIDGE: f64 = 1e-6;

pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (na, nb) = (linalg::norm(a), linalg::norm(b));
    for n in [na, nb] {
        if !(n > DEGENERATE_NORM) {
            return Err(Error::DegenerateDirection { norm: n });
        }
    }
    Ok((linalg::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub labels: Vec<TraitId>,
    pub values: Vec<Vec<f64>>,
    pub layer: usize,
    pub model: String,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    pub fn index_of(&self, id: &TraitId) -> Option<usize> {
        self.labels.iter().position(|l| l == id)
    }
}

/// Pairwise cosines in input order. The diagonal is exactly 1 and the lower
/// triangle mirrors the upper one.
pub fn similarity_matrix(vectors: &[SteeringVector]) -> Result<SimilarityMatrix> {
    let first = vectors.first().ok_or(Error::Empty("similarity matrix needs vectors"))?;
    for v in vectors {
        if v.layer != first.layer {
            return Err(Error::LayerMismatch(first.layer, v.layer));
        }
        if v.d() != first.d() {
            return Err(Error::DimensionMismatch {
                expected: first.d(),
                found: v.d(),
            });
        }
    }
    let n = vectors.len();
    let mut values = vec![vec![0.0; n]; n];
    for i in 0..n {
        cosine(&vectors[i].v, &vectors[i].v)?;
        values[i][i] = 1.0;
        for j in i + 1..n {
            let c = cosine(&vectors[i].v, &vectors[j].v)?;
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    Ok(SimilarityMatrix {
        labels: vectors.iter().map(|v| v.trait_id.clone()).collect(),
        values,
        layer: first.layer,
        model: String::new(),
    })
}

fn require_normalized(v: &SteeringVector) -> Result<()> {
    if !v.normalized || (v.norm() - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NotNormalized(v.trait_id.to_string()));
    }
    Ok(())
}

/// `Σ coefficient_k · v̂_k` over the spec's terms.
pub fn compose(
    spec: &CompositionSpec,
    vectors: &BTreeMap<TraitId, SteeringVector>,
    renormalize: bool,
) -> Result<SteeringVector> {
    spec.validate()?;
    let mut layer = None;
    let mut acc: Vec<f64> = Vec::new();
    let (mut n_pos, mut n_neg) = (usize::MAX, usize::MAX);
    for term in &spec.terms {
        let v = vectors
            .get(&term.trait_id)
            .ok_or_else(|| Error::MissingTraitVector(term.trait_id.to_string()))?;
        require_normalized(v)?;
        match layer {
            None => {
                layer = Some(v.layer);
                acc = vec![0.0; v.d()];
            }
            Some(l) if l != v.layer => return Err(Error::LayerMismatch(l, v.layer)),
            Some(_) if acc.len() != v.d() => {
                return Err(Error::DimensionMismatch {
                    expected: acc.len(),
                    found: v.d(),
                })
            }
            Some(_) => {}
        }
        for (a, &x) in acc.iter_mut().zip(&v.v) {
            *a += term.coefficient * x as f64;
        }
        n_pos = n_pos.min(v.n_pos);
        n_neg = n_neg.min(v.n_neg);
    }
    let mut v = linalg::to_f32(&acc);
    if renormalize {
        let n = linalg::norm64(&acc);
        if !(n > DEGENERATE_NORM) {
            return Err(Error::DegenerateDirection { norm: n });
        }
        v = acc.iter().map(|x| (x / n) as f32).collect();
    }
    Ok(SteeringVector {
        trait_id: spec.behavior.clone(),
        layer: layer.expect("validated spec has terms"),
        v,
        n_pos,
        n_neg,
        normalized: renormalize,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub behavior: TraitId,
    pub basis: Vec<TraitId>,
    pub alphas: Vec<f64>,
    pub residual_norm: f64,
    pub cosine_fit: f64,
    pub ridge: f64,
}

impl Decomposition {
    pub fn alpha(&self, id: &TraitId) -> Option<f64> {
        self.basis.iter().position(|b| b == id).map(|i| self.alphas[i])
    }
}

/// `Σ α_k v̂_k` in f64.
pub fn reconstruct(basis: &[SteeringVector], alphas: &[f64]) -> Vec<f64> {
    let d = basis.first().map_or(0, SteeringVector::d);
    let mut out = vec![0.0; d];
    for (b, &a) in basis.iter().zip(alphas) {
        for (o, &x) in out.iter_mut().zip(&b.v) {
            *o += a * x as f64;
        }
    }
    out
}

/// Ridge least squares `argmin ‖v_β − Bα‖² + ridge‖α‖²` via the normal
/// equations `(BᵀB + ridge·I) α = Bᵀ v_β`.
///
/// Basis vectors must be normalized and share the behaviour's layer. The
/// solve is refused when the regularized Gram matrix has condition number
/// above [`linalg::CONDITION_LIMIT`].
pub fn decompose(
    behavior: &SteeringVector,
    basis: &[SteeringVector],
    ridge: f64,
) -> Result<Decomposition> {
    if basis.is_empty() {
        return Err(Error::Empty("decomposition basis"));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::Config(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    for b in basis {
        require_normalized(b)?;
        if b.layer != behavior.layer {
            return Err(Error::LayerMismatch(behavior.layer, b.layer));
        }
        if b.d() != behavior.d() {
            return Err(Error::DimensionMismatch {
                expected: behavior.d(),
                found: b.d(),
            });
        }
    }
    let k = basis.len();
    let gram = DMatrix::from_fn(k, k, |i, j| {
        linalg::dot(&basis[i].v, &basis[j].v) + if i == j { ridge } else { 0.0 }
    });
    let rhs = DMatrix::from_fn(k, 1, |i, _| linalg::dot(&basis[i].v, &behavior.v));
    let alphas: Vec<f64> = linalg::solve_spd(gram, &rhs)?.iter().copied().collect();

    let fit = reconstruct(basis, &alphas);
    let target = linalg::to_f64(&behavior.v);
    let residual: Vec<f64> = target.iter().zip(&fit).map(|(t, f)| t - f).collect();
    let (nt, nf) = (linalg::norm64(&target), linalg::norm64(&fit));
    let cosine_fit = if nt > DEGENERATE_NORM && nf > DEGENERATE_NORM {
        (linalg::dot64(&target, &fit) / (nt * nf)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(Decomposition {
        behavior: behavior.trait_id.clone(),
        basis: basis.iter().map(|b| b.trait_id.clone()).collect(),
        alphas,
        residual_norm: linalg::norm64(&residual),
        cosine_fit,
        ridge,
    })
}

/// `v − (v·û)û`.
pub fn project_out(v: &[f32], u: &[f32]) -> Result<Vec<f32>> {
    let u64 = linalg::to_f64(u);
    let mut p = linalg::to_f32(&project_out64(&linalg::to_f64(v), &u64)?);
    restore_orthogonality(&mut p, &u64);
    Ok(p)
}

/// Rounding to f32 leaves a component along `u` proportional to `‖p‖`.
/// Push it back into one coordinate at a time, largest `|û_j|` first.
fn restore_orthogonality(p: &mut [f32], u: &[f64]) {
    let n = linalg::norm64(u);
    let uh: Vec<f64> = u.iter().map(|x| x / n).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| uh[b].abs().total_cmp(&uh[a].abs()));
    let residual = |p: &[f32]| p.iter().zip(&uh).map(|(&x, y)| x as f64 * y).sum::<f64>();
    let mut r = residual(p);
    for &j in order.iter().take(8) {
        if r.abs() <= 1e-9 || uh[j] == 0.0 {
            break;
        }
        let old = p[j];
        p[j] = (old as f64 - r / uh[j]) as f32;
        let next = residual(p);
        if next.abs() < r.abs() {
            r = next;
        } else {
            p[j] = old;
        }
    }
}

pub fn project_out64(v: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if v.len() != u.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let n = linalg::norm64(u);
    if !(n > DEGENERATE_NORM) {
        return Err(Error::DegenerateDirection { norm: n });
    }
    let c = linalg::dot64(v, u) / (n * n);
    Ok(v.iter().zip(u).map(|(x, y)| x - c * y).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub cos_ab: f64,
    pub cos_a_ref: f64,
    pub cos_b_ref: f64,
    pub angle_ab_degrees: f64,
}

pub fn separability(
    a: &SteeringVector,
    b: &SteeringVector,
    reference: &SteeringVector,
) -> Result<Separability> {
    for v in [a, b, reference] {
        require_normalized(v)?;
        if v.layer != a.layer {
            return Err(Error::LayerMismatch(a.layer, v.layer));
        }
    }
    let cos_ab = cosine(&a.v, &b.v)?;
    Ok(Separability {
        cos_ab,
        cos_a_ref: cosine(&a.v, &reference.v)?,
        cos_b_ref: cosine(&b.v, &reference.v)?,
        angle_ab_degrees: cos_ab.acos().to_degrees(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(label: &str, v: &[f32]) -> SteeringVector {
        SteeringVector::from_direction(label.parse().unwrap(), 2, v.to_vec())
    }

    fn e(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateDirection { .. })));
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn similarity_cases() {
        let basis = [sv("H", &e(0, 3)), sv("E", &e(1, 3)), sv("X", &e(2, 3))];
        let m = similarity_matrix(&basis).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let v = [1.0, -2.0, 0.5];
        let m = similarity_matrix(&[sv("H", &v), sv("E", &v.map(|x| 2.0 * x))]).unwrap();
        assert!(m.values.iter().flatten().all(|&x| (x - 1.0).abs() < 1e-12));
        let mut other = sv("C", &v);
        other.layer = 7;
        assert!(matches!(similarity_matrix(&[sv("H", &v), other]), Err(Error::LayerMismatch(2, 7))));
    }

    #[test]
    fn compose_singleton_and_cancellation() {
        let a = sv("agreeableness", &[0.6, 0.8]);
        let spec = CompositionSpec::new("one", TraitId::sycophancy(), vec![(a.trait_id.clone(), 1.0)], "").unwrap();
        let map = BTreeMap::from([(a.trait_id.clone(), a.clone())]);
        assert_eq!(compose(&spec, &map, false).unwrap().v, a.v);

        let c = sv("conscientiousness", &[0.6, 0.8]);
        let spec = CompositionSpec::new(
            "cancel",
            TraitId::sycophancy(),
            vec![(a.trait_id.clone(), 1.0), (c.trait_id.clone(), -1.0)],
            "",
        )
        .unwrap();
        let map = BTreeMap::from([(a.trait_id.clone(), a), (c.trait_id.clone(), c)]);
        assert!(matches!(compose(&spec, &map, true), Err(Error::DegenerateDirection { .. })));
    }

    #[test]
    fn compose_agreeableness_minus_conscientiousness() {
        let a = sv("agreeableness", &e(0, 4));
        let c = sv("conscientiousness", &e(1, 4));
        let spec = CompositionSpec::new(
            "a-c",
            TraitId::sycophancy(),
            vec![(a.trait_id.clone(), 1.0), (c.trait_id.clone(), -1.0)],
            "",
        )
        .unwrap();
        let map = BTreeMap::from([(a.trait_id.clone(), a.clone()), (c.trait_id.clone(), c.clone())]);
        let out = compose(&spec, &map, true).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((cosine(&out.v, &a.v).unwrap() - r).abs() < 1e-7);
        let neg_c: Vec<f32> = c.v.iter().map(|x| -x).collect();
        assert!((cosine(&out.v, &neg_c).unwrap() - r).abs() < 1e-7);
        assert_eq!(out.trait_id, TraitId::sycophancy());
    }

    #[test]
    fn compose_errors() {
        let a = sv("agreeableness", &[1.0, 0.0]);
        let spec = CompositionSpec::new("m", TraitId::sycophancy(), vec![("openness".parse().unwrap(), 1.0)], "").unwrap();
        let map = BTreeMap::from([(a.trait_id.clone(), a)]);
        assert!(matches!(compose(&spec, &map, false), Err(Error::MissingTraitVector(_))));
        let raw = sv("openness", &[2.0, 0.0]);
        let map = BTreeMap::from([(raw.trait_id.clone(), raw)]);
        assert!(matches!(compose(&spec, &map, false), Err(Error::NotNormalized(_))));
    }

    #[test]
    fn decompose_exact_and_orthogonal() {
        let basis = [sv("H", &e(0, 3)), sv("E", &e(1, 3))];
        let d = decompose(&sv("sycophancy", &[2.0, -1.0, 0.0]), &basis, 0.0).unwrap();
        assert!((d.alphas[0] - 2.0).abs() < 1e-12 && (d.alphas[1] + 1.0).abs() < 1e-12);
        assert!(d.residual_norm < 1e-12);
        assert!((d.cosine_fit - 1.0).abs() < 1e-12);

        let d = decompose(&sv("sycophancy", &e(2, 3)), &basis, 0.0).unwrap();
        assert!(d.alphas.iter().all(|a| a.abs() < 1e-12));
        assert_eq!(d.cosine_fit, 0.0);
        assert!((d.residual_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decompose_ill_conditioned() {
        let v = [0.6f32, 0.8, 0.0];
        let basis = [sv("H", &v), sv("E", &v)];
        assert!(matches!(
            decompose(&sv("sycophancy", &e(0, 3)), &basis, 0.0),
            Err(Error::IllConditioned { .. })
        ));
        // ridge makes the duplicated basis solvable and splits the weight
        let d = decompose(&sv("sycophancy", &v), &basis, 1e-3).unwrap();
        assert!((d.alphas[0] - d.alphas[1]).abs() < 1e-9);
    }

    #[test]
    fn project_out_cases() {
        assert_eq!(project_out(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), [0.0, 1.0]);
        assert_eq!(project_out(&[0.0, 3.0], &[2.0, 0.0]).unwrap(), [0.0, 3.0]);
        let once = project_out(&[0.3, -1.2, 2.0], &[1.0, 2.0, -0.5]).unwrap();
        let twice = project_out(&once, &[1.0, 2.0, -0.5]).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(project_out(&[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn separability_cases() {
        let a = sv("H", &e(0, 3));
        let r = separability(&a, &a, &sv("E", &e(1, 3))).unwrap();
        assert_eq!((r.cos_ab, r.angle_ab_degrees), (1.0, 0.0));
        let r = separability(&a, &sv("X", &e(2, 3)), &a).unwrap();
        assert!((r.angle_ab_degrees - 90.0).abs() < 1e-12);
        assert_eq!(r.cos_a_ref, 1.0);
    }
}
