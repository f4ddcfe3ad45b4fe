use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Mini-batches over one epoch in an order fixed by `(shuffle_seed, epoch)`.
/// The last batch may be short.
#[derive(Debug)]
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches(data: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Batches<'_> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Batches {
        data,
        order,
        batch_size,
        pos: 0,
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self
            .data
            .images()
            .gather_batch(&indices)
            .expect("indices come from the dataset");
        let labels = indices.iter().map(|&i| self.data.labels()[i]).collect();
        Some(Batch {
            images,
            labels,
            indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}
