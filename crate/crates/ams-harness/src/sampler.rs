//! Identity-balanced batch sampling: P identities x K images per batch,
//! which guarantees every anchor a positive for the triplet loss.

use crate::data::{augment_image, AugmentConfig, SyntheticDataset};
use crate::error::{HarnessError, Result};
use crate::rng::Seeded;
use ams_core::real::Real;
use ams_core::tensor::Tensor4;
use rand::Rng;

/// Pooled training images across source domains with globally offset labels.
pub struct TrainPool {
    datasets: Vec<SyntheticDataset>,
    /// Flat entries: `(dataset index, image index, global id)`.
    entries: Vec<(usize, usize, usize)>,
    by_class: Vec<Vec<usize>>,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
}

impl TrainPool {
    /// Pools datasets; each domain's local labels get a global offset so the
    /// class set is the disjoint union over domains.
    pub fn build(datasets: Vec<SyntheticDataset>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(HarnessError::input("no training domains"));
        }
        let (height, width) = {
            let d = datasets[0].images.dims();
            (d[2], d[3])
        };
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for (di, d) in datasets.iter().enumerate() {
            let local_classes = d.ids.iter().copied().max().map_or(0, |m| m + 1);
            for (ii, &id) in d.ids.iter().enumerate() {
                entries.push((di, ii, offset + id));
            }
            offset += local_classes;
        }
        let num_classes = offset;
        let mut by_class = vec![Vec::new(); num_classes];
        for (ei, &(_, _, gid)) in entries.iter().enumerate() {
            by_class[gid].push(ei);
        }
        Ok(TrainPool {
            datasets,
            entries,
            by_class,
            num_classes,
            height,
            width,
        })
    }

    pub fn num_images(&self) -> usize {
        self.entries.len()
    }

    fn image_plane(&self, entry: usize) -> &[f64] {
        let (di, ii, _) = self.entries[entry];
        let img = &self.datasets[di].images;
        let plane = img.channels() * img.height() * img.width();
        &img.data()[ii * plane..(ii + 1) * plane]
    }
}

/// One training batch.
pub struct Batch<T: Real> {
    pub images: Tensor4<T>,
    pub ids: Vec<usize>,
    /// True when some identity had fewer than K images and was sampled with
    /// replacement.
    pub replacement_used: bool,
}

/// Samples P distinct identities without replacement and K images each
/// (with replacement only if an identity has fewer than K images).
pub fn pk_sample<T: Real>(
    pool: &TrainPool,
    p: usize,
    k: usize,
    augment: &AugmentConfig,
    rng: &mut Seeded,
) -> Result<Batch<T>> {
    if p == 0 || k == 0 {
        return Err(HarnessError::input("P and K must be positive"));
    }
    if pool.num_classes < p {
        return Err(HarnessError::input(format!(
            "pool has {} identities, need P={p}",
            pool.num_classes
        )));
    }
    // Partial Fisher-Yates over the class list.
    let mut classes: Vec<usize> = (0..pool.num_classes).collect();
    for i in 0..p {
        let j = rng.gen_range(i..classes.len());
        classes.swap(i, j);
    }

    let plane = 3 * pool.height * pool.width;
    let mut data = vec![0.0f64; p * k * plane];
    let mut ids = Vec::with_capacity(p * k);
    let mut replacement_used = false;
    let mut slot = 0usize;
    for &class in classes.iter().take(p) {
        let members = &pool.by_class[class];
        let mut picks: Vec<usize> = Vec::with_capacity(k);
        if members.len() >= k {
            let mut idx: Vec<usize> = (0..members.len()).collect();
            for i in 0..k {
                let j = rng.gen_range(i..idx.len());
                idx.swap(i, j);
                picks.push(members[idx[i]]);
            }
        } else {
            replacement_used = true;
            for _ in 0..k {
                picks.push(members[rng.gen_range(0..members.len())]);
            }
        }
        for entry in picks {
            let dst = &mut data[slot * plane..(slot + 1) * plane];
            dst.copy_from_slice(pool.image_plane(entry));
            augment_image(dst, pool.height, pool.width, augment, rng);
            ids.push(class);
            slot += 1;
        }
    }

    let images = Tensor4::from_vec(
        [p * k, 3, pool.height, pool.width],
        data.into_iter().map(T::from_f64).collect(),
    )
    .map_err(HarnessError::Core)?;
    Ok(Batch {
        images,
        ids,
        replacement_used,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_domains, DataConfig};
    use crate::rng::seeded;

    fn pool() -> TrainPool {
        let cfg = DataConfig {
            domains: 2,
            ids_per_domain: 5,
            images_per_id: 4,
            height: 8,
            width: 8,
            ..DataConfig::default()
        };
        TrainPool::build(generate_domains(&cfg).unwrap()).unwrap()
    }

    #[test]
    fn batch_counts_and_positives() {
        let pool = pool();
        let aug = AugmentConfig {
            hflip: false,
            crop: false,
            erase: false,
        };
        // P identities x K images; with P=2, K=4 every anchor has 3 positives
        // and 4 negatives.
        let batch = pk_sample::<f64>(&pool, 2, 4, &aug, &mut seeded(1)).unwrap();
        assert_eq!(batch.ids.len(), 8);
        assert_eq!(batch.images.dims()[0], 8);
        for anchor in 0..8 {
            let positives = (0..8)
                .filter(|&o| o != anchor && batch.ids[o] == batch.ids[anchor])
                .count();
            let negatives = (0..8).filter(|&o| batch.ids[o] != batch.ids[anchor]).count();
            assert_eq!(positives, 3);
            assert_eq!(negatives, 4);
        }
        // Distinct identities within the batch.
        let mut unique: Vec<usize> = batch.ids.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), 2);
    }

    #[test]
    fn fixed_seed_reproduces_batches() {
        let pool = pool();
        let aug = AugmentConfig::default();
        let a = pk_sample::<f64>(&pool, 3, 2, &aug, &mut seeded(9)).unwrap();
        let b = pk_sample::<f64>(&pool, 3, 2, &aug, &mut seeded(9)).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.images.data(), b.images.data());
    }

    #[test]
    fn replacement_flagged_when_identity_is_short() {
        let pool = pool();
        let aug = AugmentConfig {
            hflip: false,
            crop: false,
            erase: false,
        };
        // Identities have 4 images; K=6 forces replacement.
        let batch = pk_sample::<f64>(&pool, 2, 6, &aug, &mut seeded(2)).unwrap();
        assert!(batch.replacement_used);
        let clean = pk_sample::<f64>(&pool, 2, 4, &aug, &mut seeded(2)).unwrap();
        assert!(!clean.replacement_used);
    }

    #[test]
    fn insufficient_identities_rejected() {
        let pool = pool();
        assert!(pk_sample::<f64>(&pool, 11, 2, &AugmentConfig::default(), &mut seeded(3)).is_err());
    }

    #[test]
    fn global_labels_are_offset_per_domain() {
        let pool = pool();
        assert_eq!(pool.num_classes, 10);
        assert_eq!(pool.num_images(), 40);
    }
}
