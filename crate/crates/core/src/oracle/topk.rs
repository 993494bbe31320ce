use crate::retrieval::Metric;

/// Distance computed directly from the metric's definition.
pub fn oracle_distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::L2 => {
            let mut s = 0.0;
            for i in 0..a.len() {
                let d = a[i] - b[i];
                s += d * d;
            }
            s
        }
        Metric::Cosine => {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for i in 0..a.len() {
                ab += a[i] * b[i];
                aa += a[i] * a[i];
                bb += b[i] * b[i];
            }
            if aa == 0.0 || bb == 0.0 {
                1.0
            } else {
                1.0 - ab / (aa.sqrt() * bb.sqrt())
            }
        }
    }
}

/// Sorts every row by (distance, index) and keeps the first k.
pub fn brute_topk(states: &[Vec<f64>], query: &[f64], k: usize, metric: Metric) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = states
        .iter()
        .enumerate()
        .map(|(i, s)| (oracle_distance(query, s, metric), i))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Two-stage oracle: the `k_pool` nearest, then the `k` highest rewards
/// among them (ties by distance rank), returned in distance order.
pub fn brute_topk_high_reward(
    states: &[Vec<f64>],
    rewards: &[f64],
    query: &[f64],
    k: usize,
    k_pool: usize,
    metric: Metric,
) -> Vec<usize> {
    let pool = brute_topk(states, query, k_pool, metric);
    let mut ranked: Vec<(usize, usize)> = pool.into_iter().enumerate().collect();
    ranked.sort_by(|x, y| rewards[y.1].total_cmp(&rewards[x.1]).then(x.0.cmp(&y.0)));
    ranked.truncate(k);
    ranked.sort();
    ranked.into_iter().map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_k_returns_every_index() {
        let s = vec![vec![3.0], vec![1.0], vec![2.0]];
        let mut all = brute_topk(&s, &[0.0], 3, Metric::L2);
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn ties_keep_the_lower_index() {
        let s = vec![vec![1.0], vec![5.0], vec![1.0], vec![-1.0]];
        assert_eq!(brute_topk(&s, &[0.0], 2, Metric::L2), vec![0, 2]);
    }
}
