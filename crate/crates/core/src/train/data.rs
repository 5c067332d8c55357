//! Desk-scale datasets: synthetic generators plus a loader for user tensors
//! in the flat binary format.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::pcm::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, C, H, W]` images or `[N, F]` feature vectors.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        self.inputs.shape[1..].to_vec()
    }

    /// Row-slice of samples `[lo, hi)` keeping the batch axis.
    pub fn slice(&self, lo: usize, hi: usize) -> (Tensor, &[usize]) {
        let per: usize = self.sample_shape().iter().product();
        let mut shape = self.inputs.shape.clone();
        shape[0] = hi - lo;
        let t = Tensor::new(shape, self.inputs.data[lo * per..hi * per].to_vec()).expect("slice shape");
        (t, &self.labels[lo..hi])
    }

    pub fn load(inputs_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Self> {
        let inputs = Tensor::load(inputs_path)?;
        let labels_t = Tensor::load(labels_path)?;
        if labels_t.shape.len() != 1 || labels_t.shape[0] != inputs.shape[0] {
            return Err(Error::dimension(
                "dataset labels",
                format!("[{}]", inputs.shape[0]),
                format!("{:?}", labels_t.shape),
            ));
        }
        let labels = labels_t.data.iter().map(|v| v.round() as usize).collect();
        Ok(Dataset { inputs, labels })
    }

    pub fn save(&self, inputs_path: &std::path::Path, labels_path: &std::path::Path) -> Result<()> {
        self.inputs.save(inputs_path)?;
        let labels = Tensor::new(vec![self.labels.len()], self.labels.iter().map(|l| *l as f32).collect())?;
        labels.save(labels_path)
    }
}

/// Gaussian class blobs in feature space; class centers sit on scaled
/// coordinate axes so any pair is linearly separable at small spread.
pub fn gaussian_blobs(classes: usize, features: usize, n_per_class: usize, spread: f64, seed: u64) -> Dataset {
    assert!(features >= classes, "need at least one feature per class");
    let mut rng = seeded_rng(seed, 0x626c6f62); // "blob"
    let n = classes * n_per_class;
    let mut data = vec![0.0f32; n * features];
    let mut labels = vec![0usize; n];
    let mut order: Vec<usize> = (0..n).collect();
    // Interleave classes deterministically.
    for (i, slot) in order.iter_mut().enumerate() {
        *slot = i % classes;
    }
    for (i, &class) in order.iter().enumerate() {
        labels[i] = class;
        for f in 0..features {
            let center = if f == class { 2.0 } else { 0.0 };
            let noise: f64 = StandardNormal.sample(&mut rng);
            data[i * features + f] = (center + spread * noise) as f32;
        }
    }
    Dataset {
        inputs: Tensor::new(vec![n, features], data).unwrap(),
        labels,
    }
}

/// Four-class 16x16 pattern set: horizontal stripes, vertical stripes,
/// diagonal stripes and a checkerboard, with pixel noise and random circular
/// shifts. Class structure survives translation, so convolution helps.
pub fn pattern_set_16x16(n_per_class: usize, noise_std: f64, max_shift: usize, seed: u64) -> Dataset {
    const SIDE: usize = 16;
    let mut rng = seeded_rng(seed, 0x70617434); // "pat4"
    let base = |class: usize, y: usize, x: usize| -> f64 {
        match class {
            0 => if (y / 4) % 2 == 0 { 1.0 } else { 0.0 },
            1 => if (x / 4) % 2 == 0 { 1.0 } else { 0.0 },
            2 => if ((x + y) / 4) % 2 == 0 { 1.0 } else { 0.0 },
            _ => if (x / 8 + y / 8) % 2 == 0 { 1.0 } else { 0.0 },
        }
    };
    let n = 4 * n_per_class;
    let mut data = vec![0.0f32; n * SIDE * SIDE];
    let mut labels = vec![0usize; n];
    for i in 0..n {
        let class = i % 4;
        labels[i] = class;
        let dy = rng.gen_range(0..=2 * max_shift) as isize - max_shift as isize;
        let dx = rng.gen_range(0..=2 * max_shift) as isize - max_shift as isize;
        for y in 0..SIDE {
            for x in 0..SIDE {
                let sy = (y as isize + dy).rem_euclid(SIDE as isize) as usize;
                let sx = (x as isize + dx).rem_euclid(SIDE as isize) as usize;
                let noise: f64 = StandardNormal.sample(&mut rng);
                data[i * SIDE * SIDE + y * SIDE + x] = (base(class, sy, sx) + noise_std * noise) as f32;
            }
        }
    }
    Dataset {
        inputs: Tensor::new(vec![n, 1, SIDE, SIDE], data).unwrap(),
        labels,
    }
}
