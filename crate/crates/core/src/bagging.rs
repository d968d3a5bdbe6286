//! Bag construction.
//!
//! [`solve_constrained_kmeans`] finds bags of size at least `k` minimizing the
//! within-bag sum of squared deviations of a score vector. Optimal bags are
//! contiguous runs of the sorted scores and can always be chosen with sizes in
//! `[k, 2k)` (a run of `2k` or more splits into two runs of at least `k`
//! without increasing the objective). Writing `f(i)` for the optimum over the
//! first `i` sorted values:
//!
//! ```text
//! f(0) = 0,   f(i) = +inf for 0 < i < k,
//! f(i) = min_{k <= s < 2k, s <= i}  f(i - s) + d(i, s)
//! ```
//!
//! where `d(i, s)` is the sum of squared deviations of the last `s` values,
//! updated in O(1) as `s` grows:
//!
//! ```text
//! d(i, s)  = d(i, s-1) + (s-1)/s * (y[i-s+1] - mu(i, s-1))^2
//! mu(i, s) = (y[i-s+1] + (s-1) * mu(i, s-1)) / s
//! ```
//!
//! giving O(nk) after an O(n log n) sort. Values are sorted ascending with
//! ties kept in original index order.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::rng::{substream, Purpose};

/// Largest input accepted by [`brute_force_kmeans`].
pub const BRUTE_FORCE_LIMIT: usize = 16;

/// Output of the one-dimensional clustering routines.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringSolution {
    /// Bags over sorted positions `0..n`; every bag is a contiguous run.
    pub partition: Partition,
    /// Sum over bags of squared deviations from the bag mean.
    pub objective: f64,
    /// `sort_permutation[p]` is the original index of the value at sorted position `p`.
    pub sort_permutation: Vec<usize>,
}

impl ClusteringSolution {
    /// The same bags expressed in original sample indices.
    pub fn original_partition(&self) -> Partition {
        let bags = self
            .partition
            .bags()
            .iter()
            .map(|bag| bag.iter().map(|&p| self.sort_permutation[p]).collect())
            .collect();
        Partition::new(bags, self.partition.min_size()).expect("permutation preserves validity")
    }

    /// Bag sizes in sorted order (the partition orders runs by start position).
    pub fn bag_sizes(&self) -> Vec<usize> {
        self.partition.bag_sizes()
    }
}

fn check_inputs(values: &[f64], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("minimum bag size k must be positive".into()));
    }
    if values.len() < k {
        return Err(Error::Infeasible {
            n: values.len(),
            k,
        });
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite value {v}")));
    }
    Ok(())
}

/// Stable ascending order of `values`.
pub fn sort_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order
}

/// Exact size-constrained one-dimensional k-means; the number of bags is free.
///
/// Among equal-objective candidates the smaller last bag wins.
pub fn solve_constrained_kmeans(values: &[f64], k: usize) -> Result<ClusteringSolution> {
    check_inputs(values, k)?;
    let n = values.len();
    let order = sort_order(values);
    let y: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let mut best_cost = vec![f64::INFINITY; n + 1];
    let mut last_size = vec![0usize; n + 1];
    best_cost[0] = 0.0;
    let widest = 2 * k - 1;

    for i in k..=n {
        let max_s = widest.min(i);
        let mut mean = y[i - 1];
        let mut sse = 0.0;
        let mut best = f64::INFINITY;
        let mut best_s = 0;
        for s in 1..=max_s {
            if s > 1 {
                let sf = s as f64;
                let delta = y[i - s] - mean;
                sse += (sf - 1.0) / sf * delta * delta;
                mean += delta / sf;
            }
            if s >= k {
                let candidate = best_cost[i - s] + sse;
                if candidate < best {
                    best = candidate;
                    best_s = s;
                }
            }
        }
        best_cost[i] = best;
        last_size[i] = best_s;
    }

    let mut sizes = Vec::new();
    let mut i = n;
    while i > 0 {
        let s = last_size[i];
        debug_assert!(s >= k);
        sizes.push(s);
        i -= s;
    }
    sizes.reverse();

    let positions: Vec<usize> = (0..n).collect();
    Ok(ClusteringSolution {
        partition: Partition::from_runs(&positions, &sizes, k)?,
        objective: best_cost[n],
        sort_permutation: order,
    })
}

fn run_sse(y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - mean).powi(2)).sum()
}

/// Exhaustive search over all contiguous partitions of the sorted values with
/// bags of at least `k`. Test oracle; refuses `n > 16`.
pub fn brute_force_kmeans(values: &[f64], k: usize) -> Result<ClusteringSolution> {
    if values.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            n: values.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    check_inputs(values, k)?;
    let order = sort_order(values);
    let y: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    fn search(
        y: &[f64],
        start: usize,
        k: usize,
        sizes: &mut Vec<usize>,
        cost: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        let n = y.len();
        if start == n {
            if cost < best.0 {
                *best = (cost, sizes.clone());
            }
            return;
        }
        for end in (start + k)..=n {
            // The remainder must be empty or hold another full bag.
            if end != n && n - end < k {
                continue;
            }
            sizes.push(end - start);
            search(y, end, k, sizes, cost + run_sse(&y[start..end]), best);
            sizes.pop();
        }
    }

    let mut best = (f64::INFINITY, Vec::new());
    search(&y, 0, k, &mut Vec::new(), 0.0, &mut best);
    let positions: Vec<usize> = (0..y.len()).collect();
    Ok(ClusteringSolution {
        partition: Partition::from_runs(&positions, &best.1, k)?,
        objective: best.0,
        sort_permutation: order,
    })
}

/// Uniformly random bags: shuffle `0..n`, cut `floor(n/k)` bags of `k`, and
/// hand the `n mod k` leftovers out one per bag starting from the first.
pub fn random_bagging(n: usize, k: usize, seed: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::InvalidArgument("minimum bag size k must be positive".into()));
    }
    if n < k {
        return Err(Error::Infeasible { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, Purpose::Bagging, 0));
    let mut sizes = vec![k; n / k];
    let bags = sizes.len();
    for extra in 0..n % k {
        sizes[extra % bags] += 1;
    }
    Partition::from_runs(&order, &sizes, k)
}

/// Consecutive bags of `k` over the ascending order of `values`, the last bag
/// absorbing the `n mod k` leftovers.
pub fn sorted_consecutive_bags(values: &[f64], k: usize) -> Result<Partition> {
    check_inputs(values, k)?;
    let order = sort_order(values);
    let mut sizes = vec![k; values.len() / k];
    *sizes.last_mut().expect("n >= k") += values.len() % k;
    Partition::from_runs(&order, &sizes, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn uniform_values(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, Purpose::Probe, 0);
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    }

    #[test]
    fn equal_values_have_zero_objective() {
        let sol = solve_constrained_kmeans(&[3.0; 6], 2).unwrap();
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn two_exact_clusters() {
        let sol = solve_constrained_kmeans(&[0.0, 0.0, 10.0, 10.0], 2).unwrap();
        assert_eq!(sol.original_partition().bags(), &[vec![0, 1], vec![2, 3]]);
        assert_eq!(sol.objective, 0.0);
    }

    #[test]
    fn pairs_beat_triples() {
        // Enumeration of contiguous min-size-2 partitions of 0..6:
        // {2,2,2}: 3 * 0.5 = 1.5, {3,3}: 2 * 2 = 4, {2,4}/{4,2}: 0.5 + 5 = 5.5,
        // {6}: 17.5.
        let sol = solve_constrained_kmeans(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap();
        assert_eq!(sol.bag_sizes(), vec![2, 2, 2]);
        assert!((sol.objective - 1.5).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_twelve_values() {
        let v = uniform_values(12, 4);
        let dp = solve_constrained_kmeans(&v, 3).unwrap();
        let bf = brute_force_kmeans(&v, 3).unwrap();
        assert!((dp.objective - bf.objective).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(solve_constrained_kmeans(&[1.0], 2), Err(Error::Infeasible { .. })));
        assert!(matches!(solve_constrained_kmeans(&[1.0], 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(brute_force_kmeans(&[0.0; 17], 2), Err(Error::TooLarge { .. })));
        assert!(solve_constrained_kmeans(&[1.0, f64::NAN], 1).is_err());
    }

    #[test]
    fn brute_force_small_cases() {
        let sol = brute_force_kmeans(&[5.0], 1).unwrap();
        assert_eq!(sol.objective, 0.0);
        assert_eq!(sol.partition.num_bags(), 1);

        let sol = brute_force_kmeans(&[0.0, 10.0], 2).unwrap();
        assert_eq!(sol.objective, 50.0);
        assert_eq!(sol.partition.num_bags(), 1);

        let v = uniform_values(9, 2);
        assert_eq!(brute_force_kmeans(&v, 1).unwrap().objective, 0.0);
    }

    #[test]
    fn ties_keep_index_order() {
        let sol = solve_constrained_kmeans(&[0.5; 6], 2).unwrap();
        assert_eq!(sol.sort_permutation, vec![0, 1, 2, 3, 4, 5]);
        // Smallest last bag preferred: three pairs.
        assert_eq!(
            sol.original_partition().bags(),
            &[vec![0, 1], vec![2, 3], vec![4, 5]]
        );
    }

    #[test]
    fn random_bagging_sizes() {
        let p = random_bagging(8, 4, 1).unwrap();
        assert_eq!(p.bag_sizes(), vec![4, 4]);
        let mut sizes = random_bagging(10, 4, 1).unwrap().bag_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![5, 5]);
        let p = random_bagging(7, 7, 3).unwrap();
        assert_eq!(p.bags(), &[(0..7).collect::<Vec<_>>()]);
        assert!(matches!(random_bagging(3, 4, 0), Err(Error::Infeasible { .. })));
        assert_eq!(random_bagging(50, 3, 9).unwrap(), random_bagging(50, 3, 9).unwrap());
        assert_ne!(random_bagging(50, 3, 9).unwrap(), random_bagging(50, 3, 10).unwrap());
    }

    #[test]
    fn sorted_consecutive_bags_follow_order() {
        let p = sorted_consecutive_bags(&[5.0, 1.0, 4.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(p.bags(), &[vec![0, 2, 4], vec![1, 3]]);
    }
}
