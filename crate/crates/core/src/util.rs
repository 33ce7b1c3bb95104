//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation. Order-independent of any worker
/// partitioning as long as the slice order is fixed, and accurate to
/// ~1e-12 relative for the sample sizes used here.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
