//! Deterministic synthetic datasets.

use super::TrainError;
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian clusters; cluster `k` has class `k mod classes`.
    Mixture {
        input_dim: usize,
        classes: usize,
        clusters: usize,
        /// Standard deviation of the cluster centres.
        #[serde(default = "default_spread")]
        spread: f64,
        /// Within-cluster standard deviation.
        #[serde(default = "default_noise")]
        noise: f64,
        /// Probability that a label is replaced by a uniform random class.
        #[serde(default)]
        label_noise: f64,
    },
    /// Next-symbol prediction over text sampled from a random Markov
    /// chain; inputs are one-hot encodings of the previous `order` symbols.
    Markov {
        vocab: usize,
        #[serde(default = "default_order")]
        order: usize,
        /// Successors with non-negligible probability per state.
        #[serde(default = "default_branching")]
        branching: usize,
        #[serde(default = "default_corpus")]
        corpus_len: usize,
    },
}

fn default_spread() -> f64 {
    2.0
}
fn default_noise() -> f64 {
    0.5
}
fn default_order() -> usize {
    1
}
fn default_branching() -> usize {
    3
}
fn default_corpus() -> usize {
    1 << 16
}

impl DataConfig {
    pub fn input_dim(&self) -> usize {
        match *self {
            DataConfig::Mixture { input_dim, .. } => input_dim,
            DataConfig::Markov { vocab, order, .. } => vocab * order,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            DataConfig::Mixture { classes, .. } => classes,
            DataConfig::Markov { vocab, .. } => vocab,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(format!("data: {m}")));
        match *self {
            DataConfig::Mixture { input_dim, classes, clusters, spread, noise, label_noise } => {
                if input_dim == 0 || classes < 2 || clusters == 0 {
                    return bad("need input_dim ≥ 1, classes ≥ 2, clusters ≥ 1");
                }
                if !(spread >= 0.0 && noise >= 0.0 && spread + noise > 0.0) {
                    return bad("spread and noise must be non-negative, not both zero");
                }
                if !(0.0..=1.0).contains(&label_noise) {
                    return bad("label_noise must lie in [0, 1]");
                }
            }
            DataConfig::Markov { vocab, order, branching, corpus_len } => {
                if vocab < 2 || order == 0 || branching == 0 || corpus_len <= order {
                    return bad("need vocab ≥ 2, order ≥ 1, branching ≥ 1, corpus_len > order");
                }
            }
        }
        Ok(())
    }

    /// A batch source; `seed` fixes both the task and the sample order.
    pub fn build(&self, seed: u64) -> Result<Dataset, TrainError> {
        self.validate()?;
        let mut task_rng = Rng::stream(seed, 10);
        let kind = match *self {
            DataConfig::Mixture { input_dim, classes, clusters, spread, noise, label_noise } => {
                let centres = task_rng.normal_vec(clusters * input_dim, spread);
                let norm = 1.0 / (spread * spread + noise * noise).sqrt();
                Kind::Mixture { centres, input_dim, classes, clusters, noise, label_noise, norm }
            }
            DataConfig::Markov { vocab, order, branching, corpus_len } => {
                let text = markov_text(vocab, branching, corpus_len, &mut task_rng);
                Kind::Markov { text, vocab, order }
            }
        };
        Ok(Dataset { kind, rng: Rng::stream(seed, 11) })
    }
}

/// Samples text from a Markov chain whose rows put most mass on a few
/// random successors.
fn markov_text(vocab: usize, branching: usize, len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut cdf = vec![0.0; vocab * vocab];
    for row in cdf.chunks_mut(vocab) {
        let mut w = vec![0.02; vocab];
        for k in 0..branching {
            w[rng.below(vocab)] += 1.0 / (k + 1) as f64;
        }
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        for (c, wi) in row.iter_mut().zip(w) {
            acc += wi / total;
            *c = acc;
        }
    }
    let mut text = Vec::with_capacity(len);
    let mut state = rng.below(vocab);
    for _ in 0..len {
        text.push(state);
        let u = rng.uniform();
        let row = &cdf[state * vocab..(state + 1) * vocab];
        state = row.iter().position(|&c| u < c).unwrap_or(vocab - 1);
    }
    text
}

#[derive(Debug, Clone)]
enum Kind {
    Mixture {
        centres: Vec<f64>,
        input_dim: usize,
        classes: usize,
        clusters: usize,
        noise: f64,
        label_noise: f64,
        norm: f64,
    },
    Markov {
        text: Vec<usize>,
        vocab: usize,
        order: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Dataset {
    kind: Kind,
    rng: Rng,
}

impl Dataset {
    /// Next `(inputs[b×d], labels[b])` batch.
    pub fn batch(&mut self, b: usize) -> (Tensor, Tensor) {
        let rng = &mut self.rng;
        match &self.kind {
            Kind::Mixture { centres, input_dim, classes, clusters, noise, label_noise, norm } => {
                let d = *input_dim;
                let mut x = Vec::with_capacity(b * d);
                let mut y = Vec::with_capacity(b);
                for _ in 0..b {
                    let k = rng.below(*clusters);
                    for j in 0..d {
                        x.push((centres[k * d + j] + noise * rng.normal()) * norm);
                    }
                    let label = if *label_noise > 0.0 && rng.uniform() < *label_noise {
                        rng.below(*classes)
                    } else {
                        k % classes
                    };
                    y.push(label as f64);
                }
                (Tensor::new(vec![b, d], x).expect("sized"), Tensor::from_vec(y))
            }
            Kind::Markov { text, vocab, order } => {
                let d = vocab * order;
                let mut x = vec![0.0; b * d];
                let mut y = Vec::with_capacity(b);
                // One-hot rows have mean 1/v and std ≈ 1/√v; rescale to unit RMS.
                let hot = (*vocab as f64).sqrt();
                for i in 0..b {
                    let start = rng.below(text.len() - order);
                    for (k, &sym) in text[start..start + order].iter().enumerate() {
                        x[i * d + k * vocab + sym] = hot;
                    }
                    y.push(text[start + order] as f64);
                }
                (Tensor::new(vec![b, d], x).expect("sized"), Tensor::from_vec(y))
            }
        }
    }
}
