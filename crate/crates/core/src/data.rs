//! Synthetic federated classification data.
//!
//! Each class is an isotropic unit-variance Gaussian. Class means sit on
//! orthogonal axes (or random unit directions when `dim < classes`) scaled so
//! that every mean lies `separation` standard deviations from each pairwise
//! decision boundary, i.e. means are `2 * separation` apart.
//!
//! Binary file layout (little-endian):
//! `b"FAFDDATA"`, version u32 (=1), clients u32, classes u32, dim u32,
//! partition u32 (0 = IID, 1 = non-IID), seed u64, then per client
//! `train u32, test u32`, then per client its train examples followed by its
//! test examples, each as `dim` x f64 followed by the label as u32.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{Batch, ModelError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FAFDDATA";
const VERSION: u32 = 1;

/// Fraction of every client's examples held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{0} must be positive")]
    InvalidCount(&'static str),
    #[error("non-IID partitioning needs at least {needed} classes, got {got}")]
    TooFewClasses { needed: usize, got: usize },
    #[error("separation must be positive and finite, got {0}")]
    InvalidSeparation(f64),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Iid,
    #[default]
    NonIid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_clients: usize,
    pub n_per_client: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub partition: Partition,
    pub separation: f64,
    /// Label-set size of each client under non-IID partitioning.
    pub classes_per_client: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_clients: 100,
            n_per_client: 100,
            n_classes: 10,
            dim: 32,
            partition: Partition::NonIid,
            separation: 3.0,
            classes_per_client: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        for (name, v) in [
            ("n_clients", self.n_clients),
            ("n_per_client", self.n_per_client),
            ("n_classes", self.n_classes),
            ("dim", self.dim),
            ("classes_per_client", self.classes_per_client),
        ] {
            if v == 0 {
                return Err(DataError::InvalidCount(name));
            }
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(DataError::InvalidSeparation(self.separation));
        }
        if self.partition == Partition::NonIid {
            let needed = self.classes_per_client.max(2);
            if self.n_classes < needed {
                return Err(DataError::TooFewClasses {
                    needed,
                    got: self.n_classes,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientData<T: Scalar = f64> {
    pub train: Batch<T>,
    pub test: Batch<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederatedDataset<T: Scalar = f64> {
    pub clients: Vec<ClientData<T>>,
    pub num_classes: usize,
    pub dim: usize,
    pub partition: Partition,
    pub seed: u64,
}

pub fn synthesize<T: Scalar>(cfg: &DataConfig, seed: u64) -> Result<FederatedDataset<T>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = class_means(cfg, &mut rng);
    let label_sets: Vec<Vec<usize>> = match cfg.partition {
        Partition::Iid => vec![(0..cfg.n_classes).collect(); cfg.n_clients],
        Partition::NonIid => skewed_label_sets(cfg.n_clients, cfg.n_classes, cfg.classes_per_client, &mut rng),
    };
    let n_test = (TEST_FRACTION * cfg.n_per_client as f64).round() as usize;
    let n_train = cfg.n_per_client - n_test;
    let mut clients = Vec::with_capacity(cfg.n_clients);
    for labels in &label_sets {
        let mut xs = Vec::with_capacity(cfg.n_per_client * cfg.dim);
        let mut ys = Vec::with_capacity(cfg.n_per_client);
        for _ in 0..cfg.n_per_client {
            let y = labels[rng.random_range(0..labels.len())];
            xs.extend(means[y].iter().map(|&m| T::of(m + rng.sample::<f64, _>(StandardNormal))));
            ys.push(y);
        }
        let split = n_train * cfg.dim;
        let test_x = xs.split_off(split);
        let test_y = ys.split_off(n_train);
        clients.push(ClientData {
            train: batch(xs, ys, cfg.dim),
            test: batch(test_x, test_y, cfg.dim),
        });
    }
    let ds = FederatedDataset {
        clients,
        num_classes: cfg.n_classes,
        dim: cfg.dim,
        partition: cfg.partition,
        seed,
    };
    if cfg.partition == Partition::NonIid {
        let skew = ds.label_skew();
        if skew < 0.5 {
            log::warn!("non-IID label skew is only {skew:.3} (mean pairwise total variation)");
        }
    }
    Ok(ds)
}

fn batch<T: Scalar>(xs: Vec<T>, ys: Vec<usize>, dim: usize) -> Batch<T> {
    Batch {
        inputs: Tensor::new(vec![ys.len(), dim], xs).unwrap_or_else(|_| Tensor::zeros(vec![1, dim])),
        labels: ys,
    }
}

fn class_means(cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    // Distance from each mean to a pairwise boundary equals `separation`.
    let radius = cfg.separation * std::f64::consts::SQRT_2;
    (0..cfg.n_classes)
        .map(|k| {
            if cfg.dim >= cfg.n_classes {
                let mut m = vec![0.0; cfg.dim];
                m[k] = radius;
                m
            } else {
                let v: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm * radius).collect()
            }
        })
        .collect()
}

/// Shard-style assignment: every class fills the same number of slots, slots
/// are shuffled and dealt out `per_client` at a time, then duplicates inside
/// a client are swapped away.
fn skewed_label_sets(n_clients: usize, n_classes: usize, per_client: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut slots: Vec<usize> = (0..n_clients * per_client).map(|i| i % n_classes).collect();
    slots.shuffle(rng);
    let owner = |pos: usize| pos / per_client;
    let holds = |slots: &[usize], c: usize, v: usize, skip: usize| {
        (c * per_client..(c + 1) * per_client).any(|p| p != skip && slots[p] == v)
    };
    for pos in 0..slots.len() {
        let c = owner(pos);
        if !holds(&slots, c, slots[pos], pos) {
            continue;
        }
        let swap = (0..slots.len()).find(|&q| {
            let d = owner(q);
            d != c && !holds(&slots, c, slots[q], pos) && !holds(&slots, d, slots[pos], q)
        });
        match swap {
            Some(q) => slots.swap(pos, q),
            None => {
                // Only reachable with a single client; pick any unused class.
                let free = (0..n_classes).find(|&v| !holds(&slots, c, v, pos)).unwrap_or(slots[pos]);
                slots[pos] = free;
            }
        }
    }
    slots
        .chunks(per_client)
        .map(|ch| {
            let mut v = ch.to_vec();
            v.sort_unstable();
            v
        })
        .collect()
}

impl<T: Scalar> FederatedDataset<T> {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Every client's held-out examples, concatenated in client order.
    pub fn pooled_test(&self) -> Result<Batch<T>, ModelError> {
        let parts: Vec<&Batch<T>> = self.clients.iter().map(|c| &c.test).filter(|b| !b.is_empty()).collect();
        Batch::concat(&parts)
    }

    pub fn pooled_train(&self) -> Result<Batch<T>, ModelError> {
        let parts: Vec<&Batch<T>> = self.clients.iter().map(|c| &c.train).filter(|b| !b.is_empty()).collect();
        Batch::concat(&parts)
    }

    /// Reshapes every example to `shape` (e.g. `[1, 8, 8]` for a CNN).
    pub fn with_example_shape(mut self, shape: &[usize]) -> Result<Self, DataError> {
        let size: usize = shape.iter().product();
        if size != self.dim {
            return Err(DataError::Format(format!("cannot view {}-dim examples as {shape:?}", self.dim)));
        }
        for c in &mut self.clients {
            for b in [&mut c.train, &mut c.test] {
                let mut s = vec![b.labels.len()];
                s.extend_from_slice(shape);
                let t = std::mem::replace(&mut b.inputs, Tensor::zeros(vec![1]));
                b.inputs = t.reshape(s).map_err(ModelError::from)?;
            }
        }
        Ok(self)
    }

    /// Per-client label histogram over train and test examples.
    pub fn label_counts(&self) -> Vec<Vec<usize>> {
        self.clients
            .iter()
            .map(|c| {
                let mut h = vec![0; self.num_classes];
                for &y in c.train.labels.iter().chain(&c.test.labels) {
                    h[y] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean pairwise total-variation distance between client label distributions.
    pub fn label_skew(&self) -> f64 {
        let dists: Vec<Vec<f64>> = self
            .label_counts()
            .into_iter()
            .map(|h| {
                let n = h.iter().sum::<usize>().max(1) as f64;
                h.into_iter().map(|v| v as f64 / n).collect()
            })
            .collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..dists.len() {
            for j in i + 1..dists.len() {
                total += 0.5 * dists[i].iter().zip(&dists[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
                pairs += 1;
            }
        }
        if pairs == 0 {
            0.0
        } else {
            total / pairs as f64
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.clients.len() as u32)?;
        w.write_u32::<LittleEndian>(self.num_classes as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(match self.partition {
            Partition::Iid => 0,
            Partition::NonIid => 1,
        })?;
        w.write_u64::<LittleEndian>(self.seed)?;
        for c in &self.clients {
            w.write_u32::<LittleEndian>(c.train.len() as u32)?;
            w.write_u32::<LittleEndian>(c.test.len() as u32)?;
        }
        for c in &self.clients {
            for b in [&c.train, &c.test] {
                for (x, &y) in b.inputs.values().chunks(self.dim).zip(&b.labels) {
                    for v in x {
                        w.write_f64::<LittleEndian>(v.as_f64())?;
                    }
                    w.write_u32::<LittleEndian>(y as u32)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, DataError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let n_clients = r.read_u32::<LittleEndian>()? as usize;
        let num_classes = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        if dim == 0 || num_classes == 0 {
            return Err(DataError::Format("zero dimension or class count".into()));
        }
        let partition = match r.read_u32::<LittleEndian>()? {
            0 => Partition::Iid,
            1 => Partition::NonIid,
            p => return Err(DataError::Format(format!("unknown partition tag {p}"))),
        };
        let seed = r.read_u64::<LittleEndian>()?;
        let mut sizes = Vec::with_capacity(n_clients);
        for _ in 0..n_clients {
            sizes.push((r.read_u32::<LittleEndian>()? as usize, r.read_u32::<LittleEndian>()? as usize));
        }
        let mut read_batch = |n: usize| -> Result<Batch<T>, DataError> {
            let mut xs = Vec::with_capacity(n * dim);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                for _ in 0..dim {
                    xs.push(T::of(r.read_f64::<LittleEndian>()?));
                }
                let y = r.read_u32::<LittleEndian>()? as usize;
                if y >= num_classes {
                    return Err(DataError::Format(format!("label {y} out of range")));
                }
                ys.push(y);
            }
            Ok(batch(xs, ys, dim))
        };
        let mut clients = Vec::with_capacity(n_clients);
        for (tr, te) in sizes {
            let train = read_batch(tr)?;
            let test = read_batch(te)?;
            clients.push(ClientData { train, test });
        }
        Ok(Self {
            clients,
            num_classes,
            dim,
            partition,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(partition: Partition) -> DataConfig {
        DataConfig {
            n_clients: 4,
            n_per_client: 100,
            n_classes: 10,
            dim: 16,
            partition,
            ..Default::default()
        }
    }

    #[test]
    fn split_is_80_20() {
        let ds = synthesize::<f64>(&cfg(Partition::Iid), 1).unwrap();
        for c in &ds.clients {
            assert_eq!(c.train.len(), 80);
            assert_eq!(c.test.len(), 20);
        }
    }

    #[test]
    fn non_iid_clients_see_two_classes() {
        let c = DataConfig {
            n_clients: 50,
            ..cfg(Partition::NonIid)
        };
        let ds = synthesize::<f64>(&c, 2).unwrap();
        for h in ds.label_counts() {
            assert!(h.iter().filter(|&&v| v > 0).count() <= 2);
        }
        assert!(ds.label_skew() >= 0.5, "{}", ds.label_skew());
        // Balanced slots: each class is assigned to exactly 10 clients.
        let mut owners = vec![0; 10];
        for h in ds.label_counts() {
            for (k, &v) in h.iter().enumerate() {
                owners[k] += usize::from(v > 0);
            }
        }
        assert!(owners.iter().all(|&o| o == 10), "{owners:?}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synthesize::<f64>(&cfg(Partition::NonIid), 7).unwrap();
        let b = synthesize::<f64>(&cfg(Partition::NonIid), 7).unwrap();
        let c = synthesize::<f64>(&cfg(Partition::NonIid), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs() {
        let mut c = cfg(Partition::Iid);
        c.n_clients = 0;
        assert!(matches!(c.validate(), Err(DataError::InvalidCount("n_clients"))));
        let mut c = cfg(Partition::NonIid);
        c.n_classes = 1;
        assert!(matches!(c.validate(), Err(DataError::TooFewClasses { .. })));
    }

    #[test]
    fn binary_round_trip() {
        let ds = synthesize::<f64>(&cfg(Partition::NonIid), 3).unwrap();
        let mut buf = Vec::new();
        ds.write_to(&mut buf).unwrap();
        let per_example = 16 * 8 + 4;
        assert_eq!(buf.len(), 8 + 4 * 5 + 8 + 4 * 8 + 400 * per_example);
        let back = FederatedDataset::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        buf[0] = b'X';
        assert!(FederatedDataset::<f64>::read_from(buf.as_slice()).is_err());
    }

    #[test]
    fn reshape_for_images() {
        let c = DataConfig { dim: 16, ..cfg(Partition::Iid) };
        let ds = synthesize::<f64>(&c, 3).unwrap().with_example_shape(&[1, 4, 4]).unwrap();
        assert_eq!(ds.clients[0].train.inputs.shape(), &[80, 1, 4, 4]);
    }
}
