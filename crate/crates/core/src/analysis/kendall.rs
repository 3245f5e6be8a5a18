use super::AnalysisError;

/// Kendall's tau-b between two score lists, in `O(n log n)`.
///
/// Ties are corrected in the denominator:
/// `tau_b = (concordant - discordant) / sqrt((n0 - tx) (n0 - ty))` with `n0`
/// the number of pairs and `tx`, `ty` the pairs tied in each list. When
/// either list is constant the denominator vanishes and tau is defined as 0.
pub fn kendall_tau(proxy: &[f64], truth: &[f64]) -> Result<f64, AnalysisError> {
    if proxy.len() != truth.len() {
        return Err(AnalysisError::Length { left: proxy.len(), right: truth.len() });
    }
    if proxy.len() < 2 {
        return Err(AnalysisError::TooFew(proxy.len()));
    }
    if proxy.iter().chain(truth).any(|v| v.is_nan()) {
        return Err(AnalysisError::NotANumber);
    }
    let n = proxy.len() as i64;
    let mut pairs: Vec<(f64, f64)> = proxy.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let pairs_total = n * (n - 1) / 2;
    let tied_x = tie_pairs(pairs.iter().map(|p| p.0));
    let tied_xy = tie_pairs_by(&pairs, |a, b| a == b);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let tied_y = tie_pairs(ys.iter().copied());

    let numerator = pairs_total - tied_x - tied_y + tied_xy - 2 * swaps;
    let denom_sq = (pairs_total - tied_x) * (pairs_total - tied_y);
    Ok(tau_from_counts(numerator, denom_sq))
}

pub(crate) fn tau_from_counts(numerator: i64, denom_sq: i64) -> f64 {
    if denom_sq == 0 {
        0.0
    } else {
        (numerator as f64 / (denom_sq as f64).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Pairs tied within runs of equal values of a sorted sequence.
fn tie_pairs(sorted: impl Iterator<Item = f64>) -> i64 {
    let v: Vec<f64> = sorted.collect();
    tie_pairs_by(&v, |a, b| a == b)
}

fn tie_pairs_by<X>(sorted: &[X], eq: impl Fn(&X, &X) -> bool) -> i64 {
    let mut total = 0i64;
    let mut run = 1i64;
    for i in 1..=sorted.len() {
        if i < sorted.len() && eq(&sorted[i], &sorted[i - 1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total
}

/// Stable merge sort counting strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> i64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = {
        let (left, right) = v.split_at_mut(mid);
        let (bl, br) = buf.split_at_mut(mid);
        merge_count(left, bl) + merge_count(right, br)
    };
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as i64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}
