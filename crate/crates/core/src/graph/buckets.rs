use serde::{Deserialize, Serialize};

use super::Csr;

/// Degree buckets used for pooled calibration statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAssignment {
    /// Effective bucket count (at most the requested count).
    pub num_buckets: usize,
    pub bucket_of: Vec<u32>,
    /// A node with in-degree `d` lands in bucket `#{t in boundaries : t <= d}`.
    pub boundaries: Vec<usize>,
}

impl BucketAssignment {
    pub fn from_boundaries(csr: &Csr, boundaries: Vec<usize>) -> Self {
        let bucket_of = (0..csr.num_nodes())
            .map(|v| boundaries.partition_point(|&t| t <= csr.in_degree(v)) as u32)
            .collect();
        BucketAssignment {
            num_buckets: boundaries.len() + 1,
            bucket_of,
            boundaries,
        }
    }
}

/// Quantile thresholds over in-degrees. Thresholds are degree values, so
/// nodes of equal degree always share a bucket; repeated quantiles collapse.
pub fn degree_buckets(csr: &Csr, num_buckets: usize) -> BucketAssignment {
    let num_buckets = num_buckets.max(1);
    let mut degrees: Vec<usize> = (0..csr.num_nodes()).map(|v| csr.in_degree(v)).collect();
    degrees.sort_unstable();
    let mut boundaries = Vec::new();
    if let Some(&min) = degrees.first() {
        let n = degrees.len();
        for k in 1..num_buckets {
            let t = degrees[(k * n / num_buckets).min(n - 1)];
            if t > min && boundaries.last() != Some(&t) {
                boundaries.push(t);
            }
        }
    }
    BucketAssignment::from_boundaries(csr, boundaries)
}
