//! Source selection policies: joint semantics-and-channel matching (JSCM),
//! best semantic score (BSS), best channel rate (BCS), random (RS), and the
//! two-threshold multi-access rule.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::matching::MatchScore;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub source_id: String,
    pub semantic_score: MatchScore,
    pub rate_mbps: f64,
    pub power_gain: f64,
}

impl Candidate {
    pub fn new(
        source_id: impl Into<String>,
        semantic_score: f64,
        rate_mbps: f64,
        power_gain: f64,
    ) -> Result<Self> {
        if !semantic_score.is_finite() {
            return Err(Error::invalid("semantic score must be finite"));
        }
        if !(rate_mbps >= 0.0 && rate_mbps.is_finite()) {
            return Err(Error::invalid("rate must be finite and >= 0"));
        }
        if !(power_gain >= 0.0 && power_gain.is_finite()) {
            return Err(Error::invalid("power gain must be finite and >= 0"));
        }
        Ok(Self {
            source_id: source_id.into(),
            semantic_score: MatchScore(semantic_score),
            rate_mbps,
            power_gain,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchemeConfig {
    Jscm { w_semantic: f64, w_rate: f64 },
    Bss,
    Bcs,
    Rs,
    Threshold { theta_score: f64, theta_gain: f64 },
}

impl SchemeConfig {
    pub const DEFAULT_JSCM: SchemeConfig = SchemeConfig::Jscm {
        w_semantic: 1.0,
        w_rate: 0.09,
    };

    /// The four schemes compared in the missing-rate experiments.
    pub fn standard_set() -> Vec<SchemeConfig> {
        vec![Self::DEFAULT_JSCM, Self::Bss, Self::Bcs, Self::Rs]
    }

    pub fn is_random(&self) -> bool {
        matches!(self, SchemeConfig::Rs)
    }

    /// Additive per-candidate objective for the ranking schemes.
    pub fn objective(&self, c: &Candidate) -> Option<f64> {
        match *self {
            SchemeConfig::Jscm { w_semantic, w_rate } => {
                Some(w_semantic * c.semantic_score.0 + w_rate * c.rate_mbps)
            }
            SchemeConfig::Bss => Some(c.semantic_score.0),
            SchemeConfig::Bcs => Some(c.rate_mbps),
            SchemeConfig::Rs | SchemeConfig::Threshold { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SchemeConfig::Jscm { w_semantic, w_rate } if !(w_semantic.is_finite() && w_rate.is_finite()) => {
                Err(Error::config("JSCM weights must be finite"))
            }
            SchemeConfig::Threshold {
                theta_score,
                theta_gain,
            } if theta_score.is_nan() || theta_gain.is_nan() => {
                Err(Error::config("thresholds must not be NaN"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for SchemeConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeConfig::Jscm { w_semantic, w_rate } => write!(f, "JSCM({w_semantic}:{w_rate})"),
            SchemeConfig::Bss => f.write_str("BSS"),
            SchemeConfig::Bcs => f.write_str("BCS"),
            SchemeConfig::Rs => f.write_str("RS"),
            SchemeConfig::Threshold {
                theta_score,
                theta_gain,
            } => {
                write!(f, "THRESHOLD({theta_score}:{theta_gain})")
            }
        }
    }
}

impl FromStr for SchemeConfig {
    type Err = Error;

    /// Accepts `BSS`, `BCS`, `RS`, `JSCM`, `JSCM(w_s:w_r)` and
    /// `THRESHOLD(theta_s:theta_g)`; `,` also works as the separator.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let upper = s.to_ascii_uppercase();
        let args = |name: &str| -> Result<Option<(f64, f64)>> {
            let rest = &upper[name.len()..];
            if rest.is_empty() {
                return Ok(None);
            }
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| Error::config(format!("malformed scheme {s:?}")))?;
            let parts: Vec<&str> = inner.split([':', ',']).map(str::trim).collect();
            match parts.as_slice() {
                [a, b] => {
                    let parse = |x: &str| {
                        x.parse::<f64>()
                            .map_err(|_| Error::config(format!("bad number {x:?} in scheme {s:?}")))
                    };
                    Ok(Some((parse(a)?, parse(b)?)))
                }
                _ => Err(Error::config(format!("scheme {s:?} needs two parameters"))),
            }
        };
        let scheme = match upper.as_str() {
            "BSS" => SchemeConfig::Bss,
            "BCS" => SchemeConfig::Bcs,
            "RS" => SchemeConfig::Rs,
            u if u.starts_with("JSCM") => match args("JSCM")? {
                None => Self::DEFAULT_JSCM,
                Some((w_semantic, w_rate)) => SchemeConfig::Jscm { w_semantic, w_rate },
            },
            u if u.starts_with("THRESHOLD") => {
                let (theta_score, theta_gain) = args("THRESHOLD")?
                    .ok_or_else(|| Error::config("THRESHOLD needs (theta_score:theta_gain)"))?;
                SchemeConfig::Threshold {
                    theta_score,
                    theta_gain,
                }
            }
            _ => return Err(Error::config(format!("unknown scheme {s:?}"))),
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

fn rank_desc(cands: &mut [(f64, &Candidate)]) {
    cands.sort_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then_with(|| a.1.source_id.cmp(&b.1.source_id))
    });
}

/// Picks up to `k` sources. Ranking schemes return the top-`k` by their
/// objective (ties by id), so the result for `k` is a prefix of the result
/// for `k + 1`. RS ignores scores and takes a prefix of a uniform shuffle
/// drawn from `rng`, which is nested in the same way for a given RNG state;
/// the other schemes never touch `rng`.
///
/// `Threshold` keeps only sources passing both thresholds, best semantic
/// score first, and may return fewer than `k` (possibly none).
pub fn select<R: Rng + ?Sized>(
    scheme: &SchemeConfig,
    candidates: &[Candidate],
    k: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if k < 1 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to select from"));
    }
    scheme.validate()?;
    let take = k.min(candidates.len());

    match *scheme {
        SchemeConfig::Rs => {
            // Prefix of a full uniform shuffle: uniform over k-subsets, and
            // the same RNG state yields nested picks across k.
            let mut order: Vec<&Candidate> = candidates.iter().collect();
            order.shuffle(rng);
            Ok(order
                .into_iter()
                .take(take)
                .map(|c| c.source_id.clone())
                .collect())
        }
        SchemeConfig::Threshold {
            theta_score,
            theta_gain,
        } => {
            let mut passing: Vec<(f64, &Candidate)> = candidates
                .iter()
                .filter(|c| passes(c, theta_score, theta_gain))
                .map(|c| (c.semantic_score.0, c))
                .collect();
            rank_desc(&mut passing);
            Ok(passing
                .into_iter()
                .take(take)
                .map(|(_, c)| c.source_id.clone())
                .collect())
        }
        _ => {
            let mut scored: Vec<(f64, &Candidate)> = candidates
                .iter()
                .map(|c| (scheme.objective(c).unwrap_or(f64::NEG_INFINITY), c))
                .collect();
            rank_desc(&mut scored);
            Ok(scored
                .into_iter()
                .take(take)
                .map(|(_, c)| c.source_id.clone())
                .collect())
        }
    }
}

fn passes(c: &Candidate, theta_score: f64, theta_gain: f64) -> bool {
    c.semantic_score.0 >= theta_score && c.power_gain >= theta_gain
}

/// All sources with score ≥ `theta_score` and gain ≥ `theta_gain`, sorted by id.
pub fn threshold_select(candidates: &[Candidate], theta_score: f64, theta_gain: f64) -> Vec<String> {
    let mut ids: Vec<String> = candidates
        .iter()
        .filter(|c| passes(c, theta_score, theta_gain))
        .map(|c| c.source_id.clone())
        .collect();
    ids.sort();
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cands(scores: &[f64], rates: &[f64]) -> Vec<Candidate> {
        scores
            .iter()
            .zip(rates)
            .enumerate()
            .map(|(i, (s, r))| Candidate::new(format!("s{}", i + 1), *s, *r, 1.0).unwrap())
            .collect()
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn jscm_worked_example() {
        let c = cands(&[0.9, 0.8, 0.2, 0.1], &[1.0, 5.0, 10.0, 2.0]);
        let sel = select(&SchemeConfig::DEFAULT_JSCM, &c, 2, &mut rng()).unwrap();
        assert_eq!(sel, vec!["s2", "s3"]);
    }

    #[test]
    fn baselines_rank_their_own_axis() {
        let c = cands(&[0.9, 0.8, 0.2, 0.1], &[1.0, 5.0, 10.0, 2.0]);
        assert_eq!(
            select(&SchemeConfig::Bss, &c, 2, &mut rng()).unwrap(),
            vec!["s1", "s2"]
        );
        assert_eq!(
            select(&SchemeConfig::Bcs, &c, 2, &mut rng()).unwrap(),
            vec!["s3", "s2"]
        );
        let jscm_sem = SchemeConfig::Jscm {
            w_semantic: 1.0,
            w_rate: 0.0,
        };
        let jscm_rate = SchemeConfig::Jscm {
            w_semantic: 0.0,
            w_rate: 1.0,
        };
        for k in 1..=4 {
            assert_eq!(
                select(&jscm_sem, &c, k, &mut rng()).unwrap(),
                select(&SchemeConfig::Bss, &c, k, &mut rng()).unwrap()
            );
            assert_eq!(
                select(&jscm_rate, &c, k, &mut rng()).unwrap(),
                select(&SchemeConfig::Bcs, &c, k, &mut rng()).unwrap()
            );
        }
    }

    #[test]
    fn k_at_least_n_selects_everyone() {
        let c = cands(&[0.5, 0.1, 0.7], &[3.0, 2.0, 1.0]);
        for scheme in SchemeConfig::standard_set() {
            for k in [3, 10] {
                let mut sel = select(&scheme, &c, k, &mut rng()).unwrap();
                sel.sort();
                assert_eq!(sel, vec!["s1", "s2", "s3"], "{scheme}");
            }
        }
    }

    #[test]
    fn ties_break_by_id() {
        let c = vec![
            Candidate::new("b", 0.5, 1.0, 1.0).unwrap(),
            Candidate::new("a", 0.5, 1.0, 1.0).unwrap(),
        ];
        assert_eq!(select(&SchemeConfig::Bss, &c, 1, &mut rng()).unwrap(), vec!["a"]);
    }

    #[test]
    fn select_errors() {
        let c = cands(&[0.5], &[1.0]);
        assert!(select(&SchemeConfig::Bss, &c, 0, &mut rng()).is_err());
        assert!(select(&SchemeConfig::Bss, &[], 1, &mut rng()).is_err());
        assert!(Candidate::new("x", f64::NAN, 1.0, 1.0).is_err());
        assert!(Candidate::new("x", 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn rs_is_seeded() {
        let c = cands(&[0.0; 6], &[0.0; 6]);
        let a = select(&SchemeConfig::Rs, &c, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = select(&SchemeConfig::Rs, &c, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
    }

    #[test]
    fn threshold_examples() {
        let c = vec![
            Candidate::new("1", 0.9, 1.0, 0.1).unwrap(),
            Candidate::new("2", 0.3, 1.0, 2.0).unwrap(),
        ];
        assert_eq!(threshold_select(&c, 0.5, 0.05), vec!["1"]);
        assert_eq!(threshold_select(&c, f64::NEG_INFINITY, 0.0), vec!["1", "2"]);
        assert!(threshold_select(&c, 2.0, 10.0).is_empty());
        let scheme = SchemeConfig::Threshold {
            theta_score: 2.0,
            theta_gain: 0.0,
        };
        assert!(select(&scheme, &c, 2, &mut rng()).unwrap().is_empty());
        let loose = SchemeConfig::Threshold {
            theta_score: 0.0,
            theta_gain: 0.0,
        };
        assert_eq!(select(&loose, &c, 1, &mut rng()).unwrap(), vec!["1"]);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in [
            SchemeConfig::DEFAULT_JSCM,
            SchemeConfig::Bss,
            SchemeConfig::Bcs,
            SchemeConfig::Rs,
            SchemeConfig::Threshold {
                theta_score: 0.5,
                theta_gain: 0.25,
            },
        ] {
            assert_eq!(s.to_string().parse::<SchemeConfig>().unwrap(), s);
        }
        assert_eq!(
            "jscm".parse::<SchemeConfig>().unwrap(),
            SchemeConfig::DEFAULT_JSCM
        );
        assert_eq!(
            "JSCM(1,0.2)".parse::<SchemeConfig>().unwrap(),
            SchemeConfig::Jscm {
                w_semantic: 1.0,
                w_rate: 0.2
            }
        );
        assert!("JSCM(1)".parse::<SchemeConfig>().is_err());
        assert!("BEST".parse::<SchemeConfig>().is_err());
        assert!("THRESHOLD".parse::<SchemeConfig>().is_err());
    }
}
