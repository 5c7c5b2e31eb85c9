//! Straightforward reference implementations to check the optimized code
//! against. None of these share code with the modules they check.

use crate::recommender::{autorec_loss_grad, AutoRecParams, RatingVector, RecError};

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

fn same_char(a: char, b: char, case_sensitive: bool) -> bool {
    a == b || (!case_sensitive && a.to_lowercase().eq(b.to_lowercase()))
}

/// Enumerates every (name, position) match, then keeps leftmost-longest
/// non-overlapping ones. Returns `(start, end, name index)` in chars.
pub fn linker_matches(text: &str, names: &[String], case_sensitive: bool, boundary: bool) -> Vec<(usize, usize, u32)> {
    let chars: Vec<char> = text.chars().collect();
    let mut all = Vec::new();
    for (id, name) in names.iter().enumerate() {
        let pat: Vec<char> = name.chars().collect();
        if pat.is_empty() || pat.len() > chars.len() {
            continue;
        }
        for start in 0..=chars.len() - pat.len() {
            let end = start + pat.len();
            let equal = pat
                .iter()
                .zip(&chars[start..end])
                .all(|(&a, &b)| same_char(a, b, case_sensitive));
            if !equal {
                continue;
            }
            if boundary {
                let glued_left = start > 0 && is_word(chars[start - 1]) && is_word(chars[start]);
                let glued_right = end < chars.len() && is_word(chars[end]) && is_word(chars[end - 1]);
                if glued_left || glued_right {
                    continue;
                }
            }
            all.push((start, end, id as u32));
        }
    }
    all.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut kept: Vec<(usize, usize, u32)> = Vec::new();
    for m in all {
        if kept.last().is_none_or(|last| m.0 >= last.1) {
            kept.push(m);
        }
    }
    kept
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scores by explicit loops over the two matrix products.
pub fn autorec_scores(p: &AutoRecParams, r: &RatingVector) -> Vec<f64> {
    let (n, d) = (p.b2.len(), p.b1.len());
    let x = r.dense();
    let h: Vec<f64> = (0..d)
        .map(|j| sigmoid(p.b1[j] + (0..n).map(|i| p.w1[[j, i]] * x[i]).sum::<f64>()))
        .collect();
    (0..n)
        .map(|i| p.b2[i] + (0..d).map(|j| p.w2[[i, j]] * h[j]).sum::<f64>())
        .collect()
}

/// Masked mean squared error plus L2, by loops.
pub fn autorec_loss(p: &AutoRecParams, batch: &[RatingVector], lambda: f64) -> f64 {
    let mut sq = 0.0;
    let mut count = 0usize;
    for r in batch {
        let s = autorec_scores(p, r);
        for (id, rating) in r.iter() {
            sq += (s[id as usize] - rating as f64).powi(2);
            count += 1;
        }
    }
    let data = if count == 0 { 0.0 } else { sq / count as f64 };
    let l2: f64 = p.w1.iter().chain(p.w2.iter()).map(|w| w * w).sum();
    data + lambda * l2
}

/// Max over all parameters of |analytic − numeric| / max(|analytic|, |numeric|, floor),
/// with central differences of [`autorec_loss`].
pub fn gradient_max_rel_error(
    p: &AutoRecParams,
    batch: &[RatingVector],
    lambda: f64,
    eps: f64,
    floor: f64,
) -> Result<f64, RecError> {
    let (_, g) = autorec_loss_grad(p, batch, lambda)?;
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, perturb: &dyn Fn(&mut AutoRecParams, f64)| {
        let mut plus = p.clone();
        perturb(&mut plus, eps);
        let mut minus = p.clone();
        perturb(&mut minus, -eps);
        let numeric = (autorec_loss(&plus, batch, lambda) - autorec_loss(&minus, batch, lambda)) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    };
    for (idx, &a) in g.w1.indexed_iter() {
        check(a, &|q, e| q.w1[idx] += e);
    }
    for (idx, &a) in g.b1.indexed_iter() {
        check(a, &|q, e| q.b1[idx] += e);
    }
    for (idx, &a) in g.w2.indexed_iter() {
        check(a, &|q, e| q.w2[idx] += e);
    }
    for (idx, &a) in g.b2.indexed_iter() {
        check(a, &|q, e| q.b2[idx] += e);
    }
    Ok(worst)
}

/// Fraction of users whose top-ranked unobserved item is one of their
/// held-out items. Ties go to the lower item id.
pub fn recall_at_1(scores: &[Vec<f64>], observed: &[RatingVector], held_out: &[Vec<u32>]) -> f64 {
    let mut hits = 0usize;
    for ((s, r), held) in scores.iter().zip(observed).zip(held_out) {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in s.iter().enumerate() {
            if r.get(i as u32).is_some() {
                continue;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if best.is_some_and(|(i, _)| held.contains(&(i as u32))) {
            hits += 1;
        }
    }
    hits as f64 / scores.len().max(1) as f64
}
