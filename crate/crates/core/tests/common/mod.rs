#![allow(dead_code)]

use semdas::selection::{Candidate, SchemeConfig};

/// Every k-subset of `0..n`, in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive search for the k-subset with the largest summed objective.
/// Returns the best sum and every subset (as sorted ids) attaining it.
pub fn brute_force_best(scheme: &SchemeConfig, cands: &[Candidate], k: usize) -> (f64, Vec<Vec<String>>) {
    let obj: Vec<f64> = cands.iter().map(|c| scheme.objective(c).unwrap()).collect();
    let mut best = f64::NEG_INFINITY;
    let mut winners = Vec::new();
    for s in subsets(cands.len(), k) {
        let total: f64 = s.iter().map(|&i| obj[i]).sum();
        let mut ids: Vec<String> = s.iter().map(|&i| cands[i].source_id.clone()).collect();
        ids.sort();
        if total > best + 1e-12 {
            best = total;
            winners = vec![ids];
        } else if (total - best).abs() <= 1e-12 {
            winners.push(ids);
        }
    }
    (best, winners)
}

/// Checks a selection against [`brute_force_best`]; `Err` describes the mismatch.
pub fn check_against_brute_force(
    scheme: &SchemeConfig,
    cands: &[Candidate],
    k: usize,
    selected: &[String],
) -> Result<(), String> {
    let k = k.min(cands.len());
    if selected.len() != k {
        return Err(format!("selected {} of {} requested", selected.len(), k));
    }
    let (best, winners) = brute_force_best(scheme, cands, k);
    let mut sorted = selected.to_vec();
    sorted.sort();
    if !winners.contains(&sorted) {
        let total: f64 = selected
            .iter()
            .map(|id| {
                scheme
                    .objective(cands.iter().find(|c| &c.source_id == id).unwrap())
                    .unwrap()
            })
            .sum();
        return Err(format!("{scheme} k={k}: sum {total} vs optimum {best}"));
    }
    Ok(())
}
