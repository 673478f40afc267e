use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// `S` distinct client ids drawn uniformly without replacement, sorted ascending.
///
/// Partial Fisher-Yates over `0..N`: position `j` swaps with a uniform
/// position in `j..N`, for `j < S`.
pub fn sample_clients(clients: usize, sampled: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if sampled == 0 || sampled > clients {
        return Err(Error::invalid(
            "sampled_clients",
            format!("need 1 <= S <= N = {clients}, got {sampled}"),
        ));
    }
    let mut ids: Vec<usize> = (0..clients).collect();
    if sampled < clients {
        for j in 0..sampled {
            let k = rng.random_range(j..clients);
            ids.swap(j, k);
        }
        ids.truncate(sampled);
        ids.sort_unstable();
    }
    Ok(ids)
}
