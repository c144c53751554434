//! Synthetic re-identification data: per-identity patch prototypes corrupted by
//! identity-independent noise patches.
//!
//! Every dataset fixes a random set of `signal_patch_count` patch positions.
//! Each identity draws a prototype at those positions; all other positions
//! hold a background map shared by every identity. A sample is its
//! prototype plus Gaussian jitter on the signal patches, after which
//! `noise_patch_count` randomly chosen background positions are overwritten
//! with fresh noise of scale `noise_scale`.
//!
//! Samples are stored as `B×C×H×W` feature maps. Training and test samples are
//! drawn independently from the same identities; the first test sample of
//! every identity is its query, the rest form the gallery.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Container;
use crate::model::patches_to_map;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub samples_per_identity: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub signal_patch_count: usize,
    pub noise_patch_count: usize,
    pub noise_scale: f64,
    pub intra_class_jitter: f64,
    /// Standard deviation of prototype and background entries.
    pub signal_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_identities: 20,
            samples_per_identity: 8,
            grid_h: 4,
            grid_w: 4,
            channels: 16,
            signal_patch_count: 8,
            noise_patch_count: 6,
            noise_scale: 3.0,
            intra_class_jitter: 0.3,
            signal_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_identities < 2 {
            return bad(format!("need at least 2 identities, got {}", self.n_identities));
        }
        if self.samples_per_identity < 2 {
            return bad("samples_per_identity must be >= 2 (one query plus gallery)".into());
        }
        if self.n_patches() == 0 || self.channels == 0 {
            return bad("grid and channels must be non-empty".into());
        }
        if self.signal_patch_count + self.noise_patch_count > self.n_patches() {
            return bad(format!(
                "signal ({}) + noise ({}) patches exceed the {} available",
                self.signal_patch_count,
                self.noise_patch_count,
                self.n_patches()
            ));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("intra_class_jitter", self.intra_class_jitter),
            ("signal_scale", self.signal_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// One split: feature maps, labels and which patches were overwritten by noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// `B×C×H×W`.
    pub x: Tensor,
    pub ids: Vec<usize>,
    /// `B×N`, 1 where the patch holds noise.
    pub noise_mask: Tensor,
}

impl Split {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Samples at `indices`, stacked into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let parts = indices
            .iter()
            .map(|&i| self.x.index_outer(i))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&parts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    /// Patch indices carrying identity signal.
    pub signal_positions: Vec<usize>,
    pub train: Split,
    pub query: Split,
    pub gallery: Split,
}

struct Sampler<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    is_signal: Vec<bool>,
}

impl Sampler<'_> {
    fn normal(&mut self, std: f64) -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        Normal::new(0.0, std).expect("validated std").sample(&mut self.rng)
    }

    /// One sample as `N×C` patches plus its noise mask.
    fn sample(&mut self, base: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, c) = (self.spec.n_patches(), self.spec.channels);
        let jitter = self.spec.intra_class_jitter;
        let mut x = base.to_vec();
        for p in 0..n {
            if self.is_signal[p] {
                for v in &mut x[p * c..(p + 1) * c] {
                    *v += self.normal(jitter);
                }
            }
        }
        let mut positions: Vec<usize> = (0..n).filter(|&p| !self.is_signal[p]).collect();
        positions.shuffle(&mut self.rng);
        let mut mask = vec![0.0; n];
        for &p in &positions[..self.spec.noise_patch_count] {
            mask[p] = 1.0;
            for v in &mut x[p * c..(p + 1) * c] {
                *v = self.normal(self.spec.noise_scale);
            }
        }
        (x, mask)
    }
}

pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let (n, c) = (spec.n_patches(), spec.channels);
    let mut s = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        is_signal: vec![false; n],
    };
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut s.rng);
    let mut signal_positions = positions[..spec.signal_patch_count].to_vec();
    signal_positions.sort_unstable();
    let is_signal: Vec<bool> = (0..n).map(|p| signal_positions.contains(&p)).collect();
    s.is_signal = is_signal.clone();

    let background: Vec<f64> = (0..n * c).map(|_| s.normal(spec.signal_scale)).collect();
    let mut prototypes = Vec::with_capacity(spec.n_identities);
    for _ in 0..spec.n_identities {
        let mut proto = background.clone();
        for p in (0..n).filter(|&p| is_signal[p]) {
            for v in &mut proto[p * c..(p + 1) * c] {
                *v = s.normal(spec.signal_scale);
            }
        }
        prototypes.push(proto);
    }

    let draw = |s: &mut Sampler<'_>| -> Vec<(usize, Vec<f64>, Vec<f64>)> {
        let mut out = Vec::new();
        for (id, proto) in prototypes.iter().enumerate() {
            for _ in 0..spec.samples_per_identity {
                let (x, m) = s.sample(proto);
                out.push((id, x, m));
            }
        }
        out
    };
    let train = draw(&mut s);
    let test = draw(&mut s);
    let (query, gallery): (Vec<_>, Vec<_>) = test
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % spec.samples_per_identity == 0);

    let build = |rows: Vec<(usize, Vec<f64>, Vec<f64>)>| -> Result<Split> {
        let b = rows.len();
        let mut patches = Vec::with_capacity(b * n * c);
        let mut masks = Vec::with_capacity(b * n);
        let mut ids = Vec::with_capacity(b);
        for (id, x, m) in rows {
            ids.push(id);
            patches.extend(x);
            masks.extend(m);
        }
        let p = Tensor::new(vec![b, n, c], patches)?;
        Ok(Split {
            x: patches_to_map(&p, spec.grid_h, spec.grid_w)?,
            ids,
            noise_mask: Tensor::new(vec![b, n], masks)?,
        })
    };
    Ok(Dataset {
        spec: spec.clone(),
        signal_positions,
        train: build(train)?,
        query: build(query.into_iter().map(|(_, r)| r).collect())?,
        gallery: build(gallery.into_iter().map(|(_, r)| r).collect())?,
    })
}

fn ids_tensor(ids: &[usize]) -> Tensor {
    Tensor::new(vec![ids.len()], ids.iter().map(|&i| i as f64).collect()).expect("1-D")
}

fn ids_from(t: &Tensor) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("identity label {v} is not a non-negative integer")))
            }
        })
        .collect()
}

impl Dataset {
    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "kind": "dataset",
            "spec": serde_json::to_value(&self.spec)?,
            "signal_positions": self.signal_positions,
        });
        let mut c = Container::new(meta);
        for (name, split) in [("train", &self.train), ("query", &self.query), ("gallery", &self.gallery)] {
            c.push(format!("{name}.x"), split.x.clone());
            c.push(format!("{name}.ids"), ids_tensor(&split.ids));
            c.push(format!("{name}.noise_mask"), split.noise_mask.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("dataset") {
            return Err(Error::Format("container is not a dataset".into()));
        }
        let spec: SyntheticSpec = serde_json::from_value(
            c.meta
                .get("spec")
                .cloned()
                .ok_or_else(|| Error::Format("dataset lacks its spec".into()))?,
        )?;
        let signal_positions: Vec<usize> = serde_json::from_value(
            c.meta.get("signal_positions").cloned().unwrap_or_default(),
        )?;
        let split = |name: &str| -> Result<Split> {
            let s = Split {
                x: c.get(&format!("{name}.x"))?.clone(),
                ids: ids_from(c.get(&format!("{name}.ids"))?)?,
                noise_mask: c.get(&format!("{name}.noise_mask"))?.clone(),
            };
            if s.x.shape().first() != Some(&s.ids.len()) {
                return Err(Error::Format(format!("{name} split has mismatched labels")));
            }
            Ok(s)
        };
        Ok(Self {
            spec,
            signal_positions,
            train: split("train")?,
            query: split("query")?,
            gallery: split("gallery")?,
        })
    }
}
