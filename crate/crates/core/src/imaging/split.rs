use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seeded shuffle, then the first `round(train_fraction · N)` ids go to train.
pub fn split_dataset<T: Clone>(
    items: &[T],
    train_fraction: f32,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::Empty("nothing to split"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction as f64 * items.len() as f64).round() as usize;
    let (train, val) = order.split_at(n_train);
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        val.iter().map(|&i| items[i].clone()).collect(),
    ))
}

pub fn write_id_list(ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = ids.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn seventy_two_twenty_eight() {
        let items: Vec<u32> = (0..100).collect();
        let (t, v) = split_dataset(&items, 0.72, 1).unwrap();
        assert_eq!((t.len(), v.len()), (72, 28));
    }

    #[test]
    fn deterministic_per_seed() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(
            split_dataset(&items, 0.6, 5).unwrap(),
            split_dataset(&items, 0.6, 5).unwrap()
        );
        assert_ne!(
            split_dataset(&items, 0.6, 5).unwrap(),
            split_dataset(&items, 0.6, 6).unwrap()
        );
    }

    #[test]
    fn exhaustive_partition() {
        let items: Vec<u32> = (0..1000).collect();
        let (t, v) = split_dataset(&items, 0.72, 3).unwrap();
        let ts: HashSet<_> = t.iter().collect();
        let vs: HashSet<_> = v.iter().collect();
        assert!(ts.is_disjoint(&vs));
        let all: HashSet<_> = ts.union(&vs).copied().collect();
        assert_eq!(all, items.iter().collect());
    }

    #[test]
    fn errors() {
        assert!(matches!(split_dataset::<u8>(&[], 0.5, 0), Err(Error::Empty(_))));
        assert!(split_dataset(&[1], 1.0, 0).is_err());
        assert!(split_dataset(&[1], 0.0, 0).is_err());
    }

    #[test]
    fn id_list_io() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ids.txt");
        let ids = vec!["a".to_string(), "b".to_string()];
        write_id_list(&ids, &p).unwrap();
        assert_eq!(read_id_list(&p).unwrap(), ids);
    }
}
