//! Image/label sets stored in the tensor container (`images`, optional `labels`).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::blob::{read_blob, write_blob, ArrayData, BlobMap, NamedArray};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]` (or `[N, features]`).
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Result<&[u8]> {
        self.labels
            .as_deref()
            .ok_or_else(|| invalid("dataset carries no labels"))
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather_rows(rows),
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }

    /// Shuffled batches of `batch` rows; a trailing partial batch is dropped.
    pub fn batches(&self, batch: usize, seed: u64) -> Result<Vec<Tensor>> {
        if batch == 0 || self.len() < batch {
            return Err(invalid(format!("{} samples cannot fill a batch of {batch}", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(order
            .chunks_exact(batch)
            .map(|rows| self.images.gather_rows(rows))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut m = BlobMap::new();
        m.insert("images".into(), NamedArray::f32(&self.images));
        if let Some(l) = &self.labels {
            m.insert(
                "labels".into(),
                NamedArray {
                    shape: vec![l.len()],
                    data: ArrayData::U8(l.clone()),
                },
            );
        }
        write_blob(path, &m)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut m = read_blob(path)?;
        let images = m
            .remove("images")
            .ok_or_else(|| Error::DanglingBlob {
                name: "images".into(),
            })?
            .to_tensor("images")?;
        let labels = match m.remove("labels") {
            Some(NamedArray {
                data: ArrayData::U8(v),
                shape,
            }) => {
                if shape != [images.shape()[0]] {
                    return Err(Error::Extent {
                        name: "labels".into(),
                        detail: format!("{shape:?} labels for {} images", images.shape()[0]),
                    });
                }
                Some(v)
            }
            Some(other) => {
                return Err(Error::DType {
                    name: "labels".into(),
                    code: match other.data {
                        ArrayData::F32(_) => 0,
                        ArrayData::I32(_) => 1,
                        ArrayData::I8(_) => 3,
                        _ => 255,
                    },
                })
            }
            None => None,
        };
        Ok(Dataset { images, labels })
    }
}

/// Loads a calibration set and checks its per-sample shape.
pub fn load_calibration(path: &Path, expected_shape: &[usize]) -> Result<Dataset> {
    let d = Dataset::load(path)?;
    if &d.images.shape()[1..] != expected_shape {
        return Err(Error::ShapeMismatch {
            op: "load_calibration",
            lhs: d.images.shape()[1..].to_vec(),
            rhs: expected_shape.to_vec(),
        });
    }
    Ok(d)
}

/// `k` distinct indices drawn uniformly from `0..pool`, in draw order.
pub fn sample_subset(pool: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > pool {
        return Err(invalid(format!("cannot draw {k} samples from {pool}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool, k).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        Dataset {
            images: Tensor::new(vec![n, 1, 2, 2], (0..n * 4).map(|i| i as f32).collect()).unwrap(),
            labels: Some((0..n).map(|i| (i % 10) as u8).collect()),
        }
    }

    #[test]
    fn batches_count_and_determinism() {
        let d = toy(1024);
        let b = d.batches(32, 7).unwrap();
        assert_eq!(b.len(), 32);
        assert_eq!(b, d.batches(32, 7).unwrap());
        assert_ne!(b, d.batches(32, 8).unwrap());
        assert!(toy(10).batches(32, 0).is_err());
    }

    #[test]
    fn round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let d = toy(5);
        d.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), d);
        assert_eq!(load_calibration(&p, &[1, 2, 2]).unwrap(), d);
        assert_eq!(load_calibration(&p, &[1, 3, 3]).unwrap_err().code(), "E_SHAPE");
    }

    #[test]
    fn subset_is_without_replacement() {
        let s = sample_subset(100, 100, 3).unwrap();
        let mut sorted = s.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert!(sample_subset(3, 4, 0).is_err());
    }
}
