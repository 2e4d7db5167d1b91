//! Rank correlation and the bending-energy versus error analysis.

use super::TrialResult;

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant or there
/// are fewer than two pairs.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BendingAnalysis {
    /// (target E_bend, final e_mean) per trial, in trial order.
    pub pairs: Vec<(f64, f64)>,
    pub dataset_energies: Vec<f64>,
    pub target_energies: Vec<f64>,
    pub spearman: Option<f64>,
}

pub fn bending_energy_analysis(trials: &[TrialResult], dataset_energies: &[f64]) -> BendingAnalysis {
    let pairs: Vec<(f64, f64)> = trials
        .iter()
        .map(|t| (t.target_bend_energy, t.final_e_mean))
        .collect();
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    BendingAnalysis {
        spearman: spearman(&xs, &ys),
        target_energies: xs,
        dataset_energies: dataset_energies.to_vec(),
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rank of each value as 1 + (#smaller) + (#equal - 1) / 2, counted pairwise.
    fn rank_oracle(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|a| {
                let less = x.iter().filter(|b| *b < a).count() as f64;
                let eq = x.iter().filter(|b| *b == a).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
        let (rx, ry) = (rank_oracle(x), rank_oracle(y));
        let n = x.len() as f64;
        let m = (n + 1.0) / 2.0;
        let mut num = 0.0;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for i in 0..x.len() {
            num += (rx[i] - m) * (ry[i] - m);
            dx += (rx[i] - m).powi(2);
            dy += (ry[i] - m).powi(2);
        }
        num / (dx * dy).sqrt()
    }

    #[test]
    fn increasing_pairs_give_one() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert_eq!(spearman(&x, &y), Some(1.0));
    }

    #[test]
    fn constant_side_is_not_applicable() {
        assert_eq!(spearman(&[0.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]), None);
        assert_eq!(spearman(&[1.0], &[1.0]), None);
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            // coarse values force ties
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(0..12) as f64).collect();
            let y: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
            let got = spearman(&x, &y).unwrap();
            assert!((got - spearman_oracle(&x, &y)).abs() < 1e-12);
        }
    }
}
