//! Mini-batch assembly into tensors, optionally on worker threads feeding a
//! bounded queue.

use std::collections::BTreeMap;
use std::sync::mpsc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::density::{weight_map, PixelValueDensity, WeightMapConfig};
use crate::error::{invalid_input, PeyeError, Result};
use crate::types::SampleRecord;

use super::normalize::BetaNormalizer;

/// One mini-batch. Image tensors are `(B, C, H, W)`, maps `(B, 1, M, N)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub vision: Tensor,
    /// Normalized physique entries, `(B, L)`.
    pub beta: Tensor,
    pub target: Tensor,
    /// Per-pixel weights for the reweighted loss, when a density is set.
    pub weights: Option<Tensor>,
    /// Body weight in kg, `(B,)`.
    pub weight_kg: Tensor,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Everything needed to turn records into a [`Batch`].
#[derive(Debug, Clone)]
pub struct BatchBuilder {
    pub input_height: usize,
    pub input_width: usize,
    pub beta: BetaNormalizer,
    pub density: Option<(PixelValueDensity, WeightMapConfig)>,
    pub dtype: DType,
    pub device: Device,
}

impl BatchBuilder {
    pub fn build(&self, records: &[&SampleRecord]) -> Result<Batch> {
        let first = records.first().ok_or_else(|| invalid_input!("empty batch"))?;
        let (m, n) = (first.pressure.rows(), first.pressure.cols());
        let c = first.vision.channels();
        let (h, w) = (self.input_height, self.input_width);
        let b = records.len();
        let mut vision = Vec::with_capacity(b * c * h * w);
        let mut beta = Vec::with_capacity(b * self.beta.len());
        let mut target = Vec::with_capacity(b * m * n);
        let mut weights = Vec::with_capacity(if self.density.is_some() { b * m * n } else { 0 });
        let mut weight_kg = Vec::with_capacity(b);
        for rec in records {
            if rec.vision.channels() != c || (rec.pressure.rows(), rec.pressure.cols()) != (m, n) {
                return Err(invalid_input!("{} does not match the batch layout", rec.id()));
            }
            if (rec.vision.height(), rec.vision.width()) == (h, w) {
                vision.extend_from_slice(rec.vision.data());
            } else {
                vision.extend_from_slice(rec.vision.resize(h, w)?.data());
            }
            beta.extend(self.beta.normalize(&rec.physique)?);
            target.extend_from_slice(rec.pressure.values());
            if let Some((density, cfg)) = &self.density {
                weights.extend(weight_map(rec.pressure.grid(), density, cfg)?.into_vec());
            }
            weight_kg.push(rec.physique.weight_kg());
        }
        let dev = &self.device;
        let to = |t: Tensor| t.to_dtype(self.dtype).map_err(PeyeError::from);
        Ok(Batch {
            vision: to(Tensor::from_vec(vision, (b, c, h, w), dev)?)?,
            beta: to(Tensor::from_vec(beta, (b, self.beta.len()), dev)?)?,
            target: to(Tensor::from_vec(target, (b, 1, m, n), dev)?)?,
            weights: if self.density.is_some() {
                Some(to(Tensor::from_vec(weights, (b, 1, m, n), dev)?)?)
            } else {
                None
            },
            weight_kg: to(Tensor::from_vec(weight_kg, b, dev)?)?,
            ids: records.iter().map(|r| r.id()).collect(),
        })
    }
}

/// Sample order for one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
    }
    order
}

/// Builds the batches of `order` and hands them to `consume` in order.
///
/// With `workers <= 1` batches are built inline. Otherwise `workers`
/// threads build batches round-robin and send them through a bounded
/// queue; a reorder buffer keeps delivery order identical to the inline
/// path, so results do not depend on the worker count.
pub fn for_each_batch<F>(
    records: &[&SampleRecord],
    order: &[usize],
    batch_size: usize,
    workers: usize,
    builder: &BatchBuilder,
    mut consume: F,
) -> Result<()>
where
    F: FnMut(Batch) -> Result<()>,
{
    if batch_size == 0 {
        return Err(invalid_input!("batch size must be positive"));
    }
    let chunks: Vec<Vec<&SampleRecord>> = order
        .chunks(batch_size)
        .map(|idx| idx.iter().map(|&i| records[i]).collect())
        .collect();
    if workers <= 1 {
        for chunk in &chunks {
            consume(builder.build(chunk)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(usize, Result<Batch>)>(workers * 2);
        for w in 0..workers {
            let tx = tx.clone();
            let chunks = &chunks;
            scope.spawn(move || {
                for (i, chunk) in chunks.iter().enumerate().skip(w).step_by(workers) {
                    if tx.send((i, builder.build(chunk))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut next = 0;
        for (i, batch) in rx.iter() {
            pending.insert(i, batch);
            while let Some(batch) = pending.remove(&next) {
                consume(batch?)?;
                next += 1;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, RenderConfig, SynthDatasetConfig};

    fn dataset() -> crate::data::Dataset {
        generate_dataset(&SynthDatasetConfig {
            subjects: 2,
            poses_per_subject: 5,
            test_subjects: 0,
            seed: 3,
            render: RenderConfig {
                image_height: 32,
                image_width: 32,
                ..RenderConfig::default()
            },
        })
        .unwrap()
    }

    fn builder(ds: &crate::data::Dataset, density: bool) -> BatchBuilder {
        let density = density.then(|| {
            let maps: Vec<_> = ds.records.iter().map(|r| &r.pressure).collect();
            (
                crate::density::fit_density(maps, 10).unwrap(),
                WeightMapConfig::default(),
            )
        });
        BatchBuilder {
            input_height: 16,
            input_width: 16,
            beta: BetaNormalizer::fit(ds.records.iter().map(|r| &r.physique), 10).unwrap(),
            density,
            dtype: DType::F32,
            device: Device::Cpu,
        }
    }

    #[test]
    fn batch_shapes() {
        let ds = dataset();
        let recs: Vec<_> = ds.records.iter().collect();
        let batch = builder(&ds, true).build(&recs[..3]).unwrap();
        assert_eq!(batch.vision.dims(), &[3, 3, 16, 16]);
        assert_eq!(batch.beta.dims(), &[3, 10]);
        assert_eq!(batch.target.dims(), &[3, 1, 64, 32]);
        assert_eq!(batch.weights.as_ref().unwrap().dims(), &[3, 1, 64, 32]);
        assert_eq!(batch.weight_kg.dims(), &[3]);
        assert_eq!(batch.ids[0], recs[0].id());
        assert!(builder(&ds, false).build(&recs[..1]).unwrap().weights.is_none());
    }

    #[test]
    fn workers_preserve_order() {
        let ds = dataset();
        let recs: Vec<_> = ds.records.iter().collect();
        let order = epoch_order(recs.len(), 9, 2, true);
        let b = builder(&ds, false);
        let collect = |workers| {
            let mut ids = Vec::new();
            for_each_batch(&recs, &order, 3, workers, &b, |batch| {
                ids.push(batch.ids);
                Ok(())
            })
            .unwrap();
            ids
        };
        let inline = collect(1);
        assert_eq!(inline.len(), 4);
        assert_eq!(inline, collect(3));
        assert_eq!(order, epoch_order(recs.len(), 9, 2, true));
        assert_ne!(order, epoch_order(recs.len(), 9, 3, true));
    }

    #[test]
    fn consumer_error_stops_workers() {
        let ds = dataset();
        let recs: Vec<_> = ds.records.iter().collect();
        let order: Vec<usize> = (0..recs.len()).collect();
        let err = for_each_batch(&recs, &order, 1, 2, &builder(&ds, false), |_| {
            Err(PeyeError::Precondition("stop".into()))
        });
        assert!(err.is_err());
    }
}
