//! Label-shard partitioning for non-iid clients.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Splits sample indices into `clients · shards_per_client` label shards and
/// deals `shards_per_client` shards to each client.
///
/// Indices are sorted by `(label, index)` and cut into contiguous shards. When
/// there are at least as many shards as labels, shard boundaries are aligned
/// to label boundaries: each label receives a share of shards proportional to
/// its count (at least one, largest remainder for the rest), so every shard
/// holds a single label. Within a label the last shard absorbs the remainder.
/// With fewer shards than labels the sorted sequence is cut into equal
/// contiguous pieces, the last absorbing the remainder. The shard order is
/// then shuffled with `rng`.
pub fn shard_partition(
    labels: &[u8],
    clients: usize,
    shards_per_client: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    let shards = build_shards(labels, clients, shards_per_client)?;
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.shuffle(rng);
    Ok(deal(&shards, &order, shards_per_client))
}

/// Same as [`shard_partition`] with the shards dealt in their sorted order.
pub fn shard_partition_unshuffled(
    labels: &[u8],
    clients: usize,
    shards_per_client: usize,
) -> Result<Vec<Vec<usize>>> {
    let shards = build_shards(labels, clients, shards_per_client)?;
    let order: Vec<usize> = (0..shards.len()).collect();
    Ok(deal(&shards, &order, shards_per_client))
}

fn deal(shards: &[Vec<usize>], order: &[usize], per_client: usize) -> Vec<Vec<usize>> {
    order
        .chunks(per_client)
        .map(|chunk| chunk.iter().flat_map(|&s| shards[s].iter().copied()).collect())
        .collect()
}

fn build_shards(labels: &[u8], clients: usize, per_client: usize) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::invalid("clients", "must be positive"));
    }
    if per_client == 0 {
        return Err(Error::invalid("shards_per_client", "must be positive"));
    }
    let total = clients * per_client;
    if total > labels.len() {
        return Err(Error::invalid(
            "shards_per_client",
            format!(
                "{clients} clients x {per_client} shards exceeds {} samples",
                labels.len()
            ),
        ));
    }
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by_key(|&i| (labels[i], i));

    let mut runs: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    for end in 1..=sorted.len() {
        if end == sorted.len() || labels[sorted[end]] != labels[sorted[start]] {
            runs.push(&sorted[start..end]);
            start = end;
        }
    }

    if total < runs.len() {
        return Ok(cut(&sorted, total));
    }
    let counts = apportion(&runs.iter().map(|r| r.len()).collect::<Vec<_>>(), total);
    Ok(runs
        .iter()
        .zip(counts)
        .flat_map(|(run, k)| cut(run, k))
        .collect())
}

/// `k` contiguous pieces of `floor(len/k)`, the last taking the remainder.
fn cut(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let size = items.len() / k;
    (0..k)
        .map(|j| {
            let end = if j + 1 == k { items.len() } else { (j + 1) * size };
            items[j * size..end].to_vec()
        })
        .collect()
}

/// Distributes `total` shards over classes proportionally to `sizes`, with
/// at least one per class and never more shards than samples in a class.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut counts = vec![1usize; sizes.len()];
    let mut left = total - sizes.len();
    // exact quotas minus the guaranteed shard, floored
    let quota: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    for (c, (&q, &s)) in counts.iter_mut().zip(quota.iter().zip(sizes)) {
        let extra = ((q.floor() as usize).saturating_sub(1)).min(s - 1).min(left);
        *c += extra;
        left -= extra;
    }
    while left > 0 {
        let best = (0..sizes.len())
            .filter(|&c| counts[c] < sizes[c])
            .max_by(|&a, &b| {
                let ra = quota[a] - counts[a] as f64;
                let rb = quota[b] - counts[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            })
            .expect("total shards never exceed sample count");
        counts[best] += 1;
        left -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn single_client_gets_everything() {
        let labels = [3u8, 1, 2, 1, 0];
        let parts = shard_partition(&labels, 1, 1, &mut RngStream::from_seed(0)).unwrap();
        let mut got = parts[0].clone();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn twelve_samples_two_labels() {
        // four shards of 3: {0,1,2} {3,4,5} of label 0, {6,7,8} {9,10,11} of label 1
        let labels = [0u8, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1];
        let parts = shard_partition_unshuffled(&labels, 2, 2).unwrap();
        assert_eq!(parts, vec![vec![0, 1, 2, 3, 4, 5], vec![6, 7, 8, 9, 10, 11]]);
    }

    #[test]
    fn uneven_classes_keep_shards_pure() {
        let mut labels = Vec::new();
        for (c, n) in [(0u8, 13usize), (1, 7), (2, 21), (3, 9)] {
            labels.extend(std::iter::repeat_n(c, n));
        }
        let parts = shard_partition(&labels, 5, 2, &mut RngStream::from_seed(4)).unwrap();
        let mut all = BTreeSet::new();
        for p in &parts {
            let classes: BTreeSet<u8> = p.iter().map(|&i| labels[i]).collect();
            assert!(classes.len() <= 2);
            for &i in p {
                assert!(all.insert(i));
            }
        }
        assert_eq!(all.len(), labels.len());
    }

    #[test]
    fn too_many_shards() {
        let labels = [0u8; 5];
        assert!(shard_partition(&labels, 3, 2, &mut RngStream::from_seed(0)).is_err());
    }

    #[test]
    fn apportion_respects_minimum_and_total() {
        assert_eq!(apportion(&[6, 6], 4), vec![2, 2]);
        let c = apportion(&[1, 100, 3], 10);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert_eq!(c[0], 1);
        assert!(c[2] <= 3);
    }
}
