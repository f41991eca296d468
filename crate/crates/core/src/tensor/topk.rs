use crate::error::{Error, Result};

/// Indices of the `k` largest values, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices<T: PartialOrd + Copy>(values: &[T], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > values.len() {
        return Err(Error::Argument(format!("top-k with k={k} over {} values", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    // Stable sort on descending value keeps lower indices first among equals.
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}
