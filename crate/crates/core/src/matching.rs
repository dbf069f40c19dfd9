//! Semantic matching: query/key similarity, domain matching by Gaussian KL,
//! expert-gateway ranking by subspace reconstruction error, and server
//! polling by softmax confidence.
//!
//! Every score follows "higher is better"; rankings break ties by id.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::embeddings::{check_dim, DomainStats, EmbeddingVector};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MatchScore(pub f64);

impl MatchScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Which similarity a source uses to compare its key against the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreMode {
    #[default]
    Cosine,
    Dot,
}

impl ScoreMode {
    pub fn score(self, query: &EmbeddingVector, key: &EmbeddingVector) -> Result<MatchScore> {
        match self {
            ScoreMode::Cosine => cosine_score(query, key),
            ScoreMode::Dot => dot_score(query, key),
        }
    }
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Cosine => "cosine",
            ScoreMode::Dot => "dot",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cosine" => Ok(ScoreMode::Cosine),
            "dot" => Ok(ScoreMode::Dot),
            other => Err(Error::config(format!("unknown score_mode {other:?}"))),
        }
    }
}

pub fn cosine_score(query: &EmbeddingVector, key: &EmbeddingVector) -> Result<MatchScore> {
    let dot = query.dot(key)?;
    let (nq, nk) = (query.norm(), key.norm());
    if nq == 0.0 || nk == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(MatchScore((dot / (nq * nk)).clamp(-1.0, 1.0)))
}

pub fn dot_score(query: &EmbeddingVector, key: &EmbeddingVector) -> Result<MatchScore> {
    Ok(MatchScore(query.dot(key)?))
}

/// Closed-form KL(p || q) between diagonal Gaussians.
pub fn kl_gaussian(p: &DomainStats, q: &DomainStats) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let kl = p
        .mean
        .as_slice()
        .iter()
        .zip(q.mean.as_slice())
        .zip(p.variance.iter().zip(&q.variance))
        .map(|((mp, mq), (vp, vq))| {
            let diff = mp - mq;
            let term = 0.5 * ((vq / vp).ln() + (vp + diff * diff) / vq - 1.0);
            // Each term is >= 0 analytically; drop rounding noise below zero.
            term.max(0.0)
        })
        .sum();
    Ok(kl)
}

/// Domain match score: negated KL from the requested distribution `query`.
pub fn domain_match_score(data: &DomainStats, query: &DomainStats) -> Result<MatchScore> {
    Ok(MatchScore(-kl_gaussian(data, query)?))
}

/// Rank-r linear autoencoder: an affine subspace through `training_mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel {
    pub expert_id: String,
    basis: Vec<Vec<f64>>,
    training_mean: EmbeddingVector,
}

impl ExpertModel {
    /// Builds an expert from an explicit basis, which must be orthonormal.
    pub fn new(
        expert_id: impl Into<String>,
        basis: Vec<Vec<f64>>,
        training_mean: EmbeddingVector,
    ) -> Result<Self> {
        let dim = training_mean.dim();
        if basis.is_empty() || basis.len() >= dim {
            return Err(Error::invalid(format!(
                "subspace rank {} must satisfy 1 <= r < D = {dim}",
                basis.len()
            )));
        }
        for b in &basis {
            check_dim(dim, b.len())?;
        }
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate().skip(i) {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (d - target).abs() > 1e-8 {
                    return Err(Error::invalid("expert basis is not orthonormal"));
                }
            }
        }
        Ok(Self {
            expert_id: expert_id.into(),
            basis,
            training_mean,
        })
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn training_mean(&self) -> &EmbeddingVector {
        &self.training_mean
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.training_mean.dim()
    }

    /// `‖(x − μ) − B·Bᵀ·(x − μ)‖²`
    pub fn reconstruction_error(&self, x: &EmbeddingVector) -> Result<f64> {
        check_dim(self.dim(), x.dim())?;
        let mut residual: Vec<f64> = x
            .as_slice()
            .iter()
            .zip(self.training_mean.as_slice())
            .map(|(a, m)| a - m)
            .collect();
        let centered = residual.clone();
        for b in &self.basis {
            let coef: f64 = b.iter().zip(&centered).map(|(u, c)| u * c).sum();
            for (r, u) in residual.iter_mut().zip(b) {
                *r -= coef * u;
            }
        }
        Ok(residual.iter().map(|r| r * r).sum())
    }
}

/// PCA fit: mean plus the top-`rank` principal directions of the centered
/// samples. Each basis vector's first nonzero component is made positive.
pub fn fit_expert(
    expert_id: impl Into<String>,
    samples: &[EmbeddingVector],
    rank: usize,
) -> Result<ExpertModel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("fit_expert needs samples"))?;
    let dim = first.dim();
    if rank == 0 || rank >= dim {
        return Err(Error::invalid(format!(
            "rank {rank} must satisfy 1 <= r < D = {dim}"
        )));
    }
    if samples.len() < rank + 1 {
        return Err(Error::invalid(format!(
            "rank {rank} needs at least {} samples, got {}",
            rank + 1,
            samples.len()
        )));
    }
    for s in samples {
        check_dim(dim, s.dim())?;
    }

    let n = samples.len();
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, x) in mean.iter_mut().zip(s.as_slice()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |i, j| samples[i].as_slice()[j] - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::invalid("SVD did not produce right singular vectors"))?;

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    for &idx in order.iter() {
        if basis.len() == rank {
            break;
        }
        let mut v: Vec<f64> = v_t.row(idx).iter().copied().collect();
        // Re-orthogonalize; null-space directions from a rank-deficient
        // batch are not guaranteed to be clean.
        for b in &basis {
            let c: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        if let Some(lead) = v.iter().find(|x| x.abs() > 1e-12) {
            if *lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        basis.push(v);
    }
    if basis.len() < rank {
        return Err(Error::invalid(
            "could not extract an orthonormal basis of the requested rank",
        ));
    }
    ExpertModel::new(expert_id, basis, EmbeddingVector::new(mean)?)
}

fn by_id_then<'a>(ord: Ordering, a: &'a str, b: &'a str) -> Ordering {
    ord.then_with(|| a.cmp(b))
}

/// Experts sorted by ascending mean reconstruction error over `test_samples`;
/// the first entry is the selected expert.
pub fn expert_gateway_rank(
    test_samples: &[EmbeddingVector],
    experts: &[ExpertModel],
) -> Result<Vec<(String, f64)>> {
    if experts.is_empty() {
        return Err(Error::invalid("no experts to rank"));
    }
    if test_samples.is_empty() {
        return Err(Error::invalid("no test samples"));
    }
    let mut ranked = experts
        .iter()
        .map(|e| {
            let total = test_samples
                .iter()
                .map(|x| e.reconstruction_error(x))
                .sum::<Result<f64>>()?;
            Ok((e.expert_id.clone(), total / test_samples.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| by_id_then(a.1.total_cmp(&b.1), &a.0, &b.0));
    Ok(ranked)
}

/// Nearest-centroid classifier exposing a softmax confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct PolledModel {
    pub model_id: String,
    class_centroids: BTreeMap<String, EmbeddingVector>,
    temperature: f64,
}

impl PolledModel {
    pub fn new(
        model_id: impl Into<String>,
        class_centroids: BTreeMap<String, EmbeddingVector>,
        temperature: f64,
    ) -> Result<Self> {
        if class_centroids.len() < 2 {
            return Err(Error::invalid("polled model needs at least 2 class centroids"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be finite and > 0"));
        }
        let mut dims = class_centroids.values().map(EmbeddingVector::dim);
        let d0 = dims.next().unwrap_or(0);
        for d in dims {
            check_dim(d0, d)?;
        }
        Ok(Self {
            model_id: model_id.into(),
            class_centroids,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.class_centroids
            .values()
            .next()
            .map_or(0, EmbeddingVector::dim)
    }

    /// `max_label softmax(−‖x − c_label‖² / T)`
    pub fn confidence(&self, x: &EmbeddingVector) -> Result<f64> {
        check_dim(self.dim(), x.dim())?;
        let logits: Vec<f64> = self
            .class_centroids
            .values()
            .map(|c| {
                let d2: f64 = c
                    .as_slice()
                    .iter()
                    .zip(x.as_slice())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                -d2 / self.temperature
            })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        Ok(1.0 / denom)
    }
}

/// Models sorted by descending mean confidence; the first entry is the
/// semantically matching model.
pub fn server_poll_rank(
    test_samples: &[EmbeddingVector],
    models: &[PolledModel],
) -> Result<Vec<(String, f64)>> {
    if models.is_empty() {
        return Err(Error::invalid("no models to poll"));
    }
    if test_samples.is_empty() {
        return Err(Error::invalid("no test samples"));
    }
    let mut ranked = models
        .iter()
        .map(|m| {
            let total = test_samples
                .iter()
                .map(|x| m.confidence(x))
                .sum::<Result<f64>>()?;
            Ok((m.model_id.clone(), total / test_samples.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| by_id_then(b.1.total_cmp(&a.1), &a.0, &b.0));
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn stats(mean: &[f64], var: &[f64]) -> DomainStats {
        DomainStats::new(ev(mean), var.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let v = ev(&[0.3, -1.2, 7.0]);
        assert!((cosine_score(&v, &v).unwrap().0 - 1.0).abs() < 1e-12);
        assert_eq!(cosine_score(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap().0, 0.0);
        assert!((cosine_score(&ev(&[0.6, 0.8]), &ev(&[1.0, 0.0])).unwrap().0 - 0.6).abs() < 1e-12);
        assert!(matches!(
            cosine_score(&ev(&[1.0]), &ev(&[1.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            cosine_score(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn dot_examples() {
        assert_eq!(dot_score(&ev(&[4.0, 5.0]), &ev(&[0.0, 0.0])).unwrap().0, 0.0);
        assert_eq!(dot_score(&ev(&[1.0, 2.0]), &ev(&[3.0, 4.0])).unwrap().0, 11.0);
        assert!(dot_score(&ev(&[1.0]), &ev(&[1.0, 2.0])).is_err());
        let a = ev(&[0.6, 0.8]);
        let b = ev(&[0.8, -0.6]);
        assert!((dot_score(&a, &b).unwrap().0 - cosine_score(&a, &b).unwrap().0).abs() < 1e-9);
    }

    #[test]
    fn score_mode_parses() {
        assert_eq!("Cosine".parse::<ScoreMode>().unwrap(), ScoreMode::Cosine);
        assert_eq!("dot".parse::<ScoreMode>().unwrap(), ScoreMode::Dot);
        assert!("l2".parse::<ScoreMode>().is_err());
    }

    #[test]
    fn kl_examples() {
        let p = stats(&[1.0], &[1.0]);
        let q = stats(&[0.0], &[1.0]);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        assert!((kl_gaussian(&p, &q).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            domain_match_score(&p, &q).unwrap().0,
            -kl_gaussian(&p, &q).unwrap()
        );
        assert!(kl_gaussian(&p, &stats(&[0.0, 0.0], &[1.0, 1.0])).is_err());
    }

    #[test]
    fn kl_is_asymmetric() {
        // Witness: equal means, variances 1 and 4.
        let p = stats(&[0.0], &[1.0]);
        let q = stats(&[0.0], &[4.0]);
        let pq = kl_gaussian(&p, &q).unwrap();
        let qp = kl_gaussian(&q, &p).unwrap();
        // 0.5*(ln4 + 1/4 - 1) and 0.5*(ln(1/4) + 4 - 1)
        assert!((pq - 0.5 * (4f64.ln() - 0.75)).abs() < 1e-12);
        assert!((qp - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-12);
        assert_ne!(pq, qp);
    }

    fn axis_expert(id: &str, axis: usize) -> ExpertModel {
        let mut b = vec![0.0, 0.0];
        b[axis] = 1.0;
        ExpertModel::new(id, vec![b], ev(&[0.0, 0.0])).unwrap()
    }

    #[test]
    fn gateway_hand_example() {
        let experts = [axis_expert("e2", 1), axis_expert("e1", 0)];
        let ranked = expert_gateway_rank(&[ev(&[1.0, 0.1])], &experts).unwrap();
        assert_eq!(ranked[0].0, "e1");
        assert!((ranked[0].1 - 0.01).abs() < 1e-12);
        assert_eq!(ranked[1].0, "e2");
        assert!((ranked[1].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gateway_singleton_and_errors() {
        let experts = [axis_expert("only", 1)];
        let ranked = expert_gateway_rank(&[ev(&[5.0, 0.0])], &experts).unwrap();
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].0, "only");
        assert!(expert_gateway_rank(&[ev(&[1.0, 0.0])], &[]).is_err());
        assert!(expert_gateway_rank(&[], &experts).is_err());
        assert!(expert_gateway_rank(&[ev(&[1.0, 0.0, 0.0])], &experts).is_err());
    }

    #[test]
    fn gateway_ties_use_id() {
        let experts = [axis_expert("b", 0), axis_expert("a", 1)];
        let ranked = expert_gateway_rank(&[ev(&[1.0, 1.0])], &experts).unwrap();
        assert_eq!(ranked[0].0, "a");
    }

    #[test]
    fn in_subspace_sample_has_zero_error() {
        let s = 0.5f64.sqrt();
        let e = ExpertModel::new("diag", vec![vec![s, s, 0.0]], ev(&[1.0, 1.0, 1.0])).unwrap();
        let err = e.reconstruction_error(&ev(&[3.0, 3.0, 1.0])).unwrap();
        assert!(err < 1e-20);
        let other = ExpertModel::new("z", vec![vec![0.0, 0.0, 1.0]], ev(&[0.0; 3])).unwrap();
        let ranked = expert_gateway_rank(&[ev(&[3.0, 3.0, 1.0])], &[other, e]).unwrap();
        assert_eq!(ranked[0].0, "diag");
    }

    #[test]
    fn expert_rejects_bad_basis() {
        assert!(ExpertModel::new("x", vec![vec![1.0, 1.0]], ev(&[0.0, 0.0])).is_err());
        assert!(ExpertModel::new("x", vec![vec![1.0, 0.0], vec![0.0, 1.0]], ev(&[0.0, 0.0])).is_err());
        assert!(ExpertModel::new("x", vec![], ev(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn fit_expert_on_a_line() {
        let dir = [1.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0];
        let samples: Vec<_> = [-2.0, -0.5, 0.0, 1.0, 3.5]
            .iter()
            .map(|t| ev(&[1.0 + t * dir[0], 2.0 + t * dir[1], -1.0 + t * dir[2]]))
            .collect();
        let e = fit_expert("line", &samples, 1).unwrap();
        let b = &e.basis()[0];
        let along: f64 = b.iter().zip(dir).map(|(x, y)| x * y).sum();
        assert!((along.abs() - 1.0).abs() < 1e-10);
        assert!(b[0] > 0.0, "sign convention");
        for s in &samples {
            assert!(e.reconstruction_error(s).unwrap() < 1e-8);
        }
    }

    #[test]
    fn fit_expert_two_point_cloud_matches_covariance_oracle() {
        let samples = vec![
            ev(&[1.0, 0.01]),
            ev(&[-1.0, -0.01]),
            ev(&[1.0, -0.02]),
            ev(&[-1.0, 0.015]),
        ];
        // Oracle: principal eigenvector of the 2x2 sample covariance in closed form.
        let n = samples.len() as f64;
        let mx = samples.iter().map(|s| s.as_slice()[0]).sum::<f64>() / n;
        let my = samples.iter().map(|s| s.as_slice()[1]).sum::<f64>() / n;
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for s in &samples {
            let (x, y) = (s.as_slice()[0] - mx, s.as_slice()[1] - my);
            a += x * x;
            b += x * y;
            c += y * y;
        }
        let lambda = 0.5 * (a + c + ((a - c).powi(2) + 4.0 * b * b).sqrt());
        let (vx, vy) = (b, lambda - a);
        let vn = (vx * vx + vy * vy).sqrt();
        let oracle = if vn < 1e-15 {
            [1.0, 0.0]
        } else {
            [vx / vn, vy / vn]
        };

        let e = fit_expert("pc", &samples, 1).unwrap();
        let basis = &e.basis()[0];
        let agree = basis[0] * oracle[0] + basis[1] * oracle[1];
        assert!(agree.abs() > 1.0 - 1e-9);
        assert!(basis[0].abs() > 0.99);
    }

    #[test]
    fn fit_expert_errors() {
        let s = vec![ev(&[1.0, 2.0]), ev(&[0.0, 1.0])];
        assert!(fit_expert("x", &s, 2).is_err());
        assert!(fit_expert("x", &s, 0).is_err());
        assert!(fit_expert("x", &s[..1], 1).is_err());
        assert!(fit_expert("x", &[], 1).is_err());
    }

    fn centroids(points: &[(&str, f64)]) -> BTreeMap<String, EmbeddingVector> {
        points.iter().map(|(l, x)| (l.to_string(), ev(&[*x]))).collect()
    }

    #[test]
    fn polling_hand_example() {
        let m1 = PolledModel::new("m1", centroids(&[("a", 0.0), ("b", 10.0)]), 1.0).unwrap();
        let m2 = PolledModel::new("m2", centroids(&[("a", 5.0), ("b", 6.0)]), 1.0).unwrap();
        let x = ev(&[0.1]);
        // m1: logits -0.01, -98.01 -> ~1. m2: -24.01, -34.81 -> 1/(1+e^-10.8).
        let c2 = 1.0 / (1.0 + (-10.8f64).exp());
        assert!((m2.confidence(&x).unwrap() - c2).abs() < 1e-12);
        let ranked = server_poll_rank(&[x], &[m2, m1]).unwrap();
        assert_eq!(ranked[0].0, "m1");
        assert!(ranked[0].1 > ranked[1].1);
    }

    #[test]
    fn polling_symmetry_and_limit() {
        let m = PolledModel::new("m", centroids(&[("a", -1.0), ("b", 1.0)]), 0.7).unwrap();
        assert!((m.confidence(&ev(&[0.0])).unwrap() - 0.5).abs() < 1e-15);
        let sharp = PolledModel::new("s", centroids(&[("a", 0.0), ("b", 1.0)]), 1e-6).unwrap();
        assert!((sharp.confidence(&ev(&[0.0])).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn polling_errors() {
        assert!(PolledModel::new("m", centroids(&[("a", 0.0)]), 1.0).is_err());
        assert!(PolledModel::new("m", centroids(&[("a", 0.0), ("b", 1.0)]), 0.0).is_err());
        let m = PolledModel::new("m", centroids(&[("a", 0.0), ("b", 1.0)]), 1.0).unwrap();
        assert!(server_poll_rank(&[ev(&[0.0])], &[]).is_err());
        assert!(server_poll_rank(&[ev(&[0.0, 1.0])], &[m]).is_err());
    }
}
