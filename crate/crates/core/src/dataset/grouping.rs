//! Person-to-group assignment.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RawClip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMethod {
    /// Split by horizontal position, fixed group sizes.
    Heuristic,
    /// Lloyd's k-means on person representations; sizes vary.
    Kmeans,
}

impl std::str::FromStr for GroupingMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heuristic" => Ok(Self::Heuristic),
            "kmeans" => Ok(Self::Kmeans),
            _ => Err("expected `heuristic` or `kmeans`".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    /// Group of each person slot.
    pub mapping: Vec<usize>,
    /// Members of each group. Heuristic groups list members left to right.
    pub members: Vec<Vec<usize>>,
    pub method: GroupingMethod,
}

impl GroupAssignment {
    fn from_mapping(mapping: Vec<usize>, num_groups: usize, method: GroupingMethod) -> Self {
        let mut members = vec![Vec::new(); num_groups];
        for (p, &g) in mapping.iter().enumerate() {
            members[g].push(p);
        }
        GroupAssignment {
            mapping,
            members,
            method,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.members.len()
    }
}

/// Two groups: the ⌈p/2⌉ left-most persons form group 0. Ties in x are broken
/// by person index.
pub fn heuristic_from_mean_x(mean_x: &[f64]) -> GroupAssignment {
    let mut order: Vec<usize> = (0..mean_x.len()).collect();
    order.sort_by(|&a, &b| mean_x[a].total_cmp(&mean_x[b]).then(a.cmp(&b)));
    let left = mean_x.len().div_ceil(2);
    let mut mapping = vec![0; mean_x.len()];
    let mut members = vec![Vec::new(), Vec::new()];
    for (rank, &p) in order.iter().enumerate() {
        let g = usize::from(rank >= left);
        mapping[p] = g;
        members[g].push(p);
    }
    GroupAssignment {
        mapping,
        members,
        method: GroupingMethod::Heuristic,
    }
}

pub fn assign_groups_heuristic(clip: &RawClip) -> GroupAssignment {
    let xs: Vec<f64> = clip
        .persons
        .iter()
        .map(|p| p.mean_x().unwrap_or(f64::INFINITY))
        .collect();
    heuristic_from_mean_x(&xs)
}

const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by Lloyd iterations (at most 100). An empty
/// cluster takes the point farthest from its own centroid among clusters with
/// more than one member. Deterministic for a given `seed`.
pub fn assign_groups_kmeans(reprs: &Array2<f64>, num_groups: usize, seed: u64) -> GroupAssignment {
    let n = reprs.nrows();
    assert!(num_groups >= 1 && n >= num_groups, "k-means needs at least as many points as groups");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    while centers.len() < num_groups {
        let d: Vec<f64> = (0..n)
            .map(|i| {
                centers
                    .iter()
                    .map(|&c| sq_dist(reprs.row(i), reprs.row(c)))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !centers.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        centers.push(next);
    }
    let mut centroids = reprs.select(ndarray::Axis(0), &centers);

    let mut mapping = vec![0usize; n];
    for iter in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for i in 0..n {
            let best = (0..num_groups)
                .map(|g| (g, sq_dist(reprs.row(i), centroids.row(g))))
                .fold((0, f64::INFINITY), |acc, (g, d)| if d < acc.1 { (g, d) } else { acc });
            if mapping[i] != best.0 {
                mapping[i] = best.0;
                changed = true;
            }
        }
        repair_empty(reprs, &centroids, &mut mapping, num_groups);
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; num_groups];
        for (i, &g) in mapping.iter().enumerate() {
            let mut row = sums.row_mut(g);
            row += &reprs.row(i);
            counts[g] += 1;
        }
        for g in 0..num_groups {
            let mut row = sums.row_mut(g);
            row /= counts[g] as f64;
        }
        centroids = sums;
        if !changed && iter > 0 {
            break;
        }
    }
    GroupAssignment::from_mapping(mapping, num_groups, GroupingMethod::Kmeans)
}

fn repair_empty(reprs: &Array2<f64>, centroids: &Array2<f64>, mapping: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &g in mapping.iter() {
            counts[g] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, &g) in mapping.iter().enumerate() {
            if counts[g] < 2 {
                continue;
            }
            let d = sq_dist(reprs.row(i), centroids.row(g));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("some cluster has two or more members");
        mapping[i] = empty;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn twelve_persons_split_six_six() {
        let xs: Vec<f64> = (1..=12).map(|i| 10.0 * i as f64).collect();
        let a = heuristic_from_mean_x(&xs);
        for (p, &x) in xs.iter().enumerate() {
            assert_eq!(a.mapping[p], usize::from(x > 60.0));
        }
        assert_eq!(a.members[0].len(), 6);
    }

    #[test]
    fn equal_x_breaks_ties_by_index() {
        let a = heuristic_from_mean_x(&[5.0, 5.0]);
        assert_eq!(a.mapping, vec![0, 1]);
    }

    #[test]
    fn heuristic_sorts_by_value_not_input_order() {
        let rev: Vec<f64> = (1..=6).rev().map(|i| i as f64).collect();
        let a = heuristic_from_mean_x(&rev);
        assert_eq!(a.mapping, vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(a.members[0], vec![5, 4, 3]);
    }

    /// Within-cluster sum of squares of a labelling.
    fn wcss(x: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
        let mut total = 0.0;
        for g in 0..k {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == g).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = x.select(ndarray::Axis(0), &idx);
            let mean = sub.mean_axis(ndarray::Axis(0)).unwrap();
            for r in sub.rows() {
                total += sq_dist(r, mean.view());
            }
        }
        total
    }

    #[test]
    fn separated_clouds_match_exhaustive_optimum() {
        let x = array![
            [0.0, 0.1],
            [0.2, -0.1],
            [-0.1, 0.0],
            [0.1, 0.2],
            [10.0, 10.1],
            [10.2, 9.9],
            [9.9, 10.0],
            [10.1, 10.2]
        ];
        // brute force over all 2-partitions with both parts non-empty
        let n = x.nrows();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let w = wcss(&x, &labels, 2);
            if w < best.0 {
                best = (w, labels);
            }
        }
        for seed in 0..5 {
            let a = assign_groups_kmeans(&x, 2, seed);
            assert!((wcss(&x, &a.mapping, 2) - best.0).abs() < 1e-12);
            let same = a.mapping == best.1;
            let flipped = a.mapping.iter().zip(&best.1).all(|(a, b)| *a != *b);
            assert!(same || flipped);
        }
    }

    #[test]
    fn one_group_per_person_when_k_equals_n() {
        let x = array![[0.0], [5.0], [9.0], [20.0]];
        let a = assign_groups_kmeans(&x, 4, 3);
        let mut sorted = a.mapping.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn identical_points_are_deterministic_and_nonempty() {
        let x = Array2::<f64>::ones((6, 3));
        let a = assign_groups_kmeans(&x, 2, 11);
        let b = assign_groups_kmeans(&x, 2, 11);
        assert_eq!(a, b);
        assert!(a.members.iter().all(|m| !m.is_empty()));
    }
}
