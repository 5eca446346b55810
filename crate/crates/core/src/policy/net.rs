//! Feed-forward policy network: rectifier hidden layers, masked softmax output,
//! trained by mini-batch gradient descent on masked cross-entropy.

use thiserror::Error;

use crate::model::ProcessModel;
use crate::rng::RngStream;
use crate::sim::{ActionMask, Observation};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input has {got} features, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("mask has {got} entries, network has {expected} outputs")]
    MaskDimension { expected: usize, got: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training diverged: loss is {0}")]
    Diverged(f64),
    #[error("label {0} is masked out")]
    InfeasibleLabel(usize),
}

/// Layer sizes `[input, hidden.., output]` and a flat parameter vector laid
/// out per layer as a row-major `out x in` weight block followed by `out`
/// biases.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub observation: Vec<f64>,
    pub mask: Vec<bool>,
    pub label: usize,
}

pub type TrainingSet = Vec<TrainingSample>;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Plain SGD with heavy-ball momentum.
    Momentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 64,
            momentum: 0.9,
            optimizer: Optimizer::Adam,
        }
    }
}

fn layer_len(n_in: usize, n_out: usize) -> usize {
    n_in * n_out + n_out
}

impl PolicyNet {
    /// Network for `model` with the given hidden widths; weights and biases
    /// uniform in `+-1/sqrt(fan_in)`.
    pub fn new(model: &ProcessModel, hidden: &[usize], rng: &mut RngStream) -> Self {
        let mut sizes = vec![Observation::len_for(model)];
        sizes.extend_from_slice(hidden);
        sizes.push(model.num_actions());
        Self::with_sizes(&sizes, rng)
    }

    pub fn with_sizes(sizes: &[usize], rng: &mut RngStream) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..layer_len(w[0], w[1]) {
                params.push((rng.uniform() * 2.0 - 1.0) * bound);
            }
        }
        PolicyNet {
            sizes: sizes.to_vec(),
            params,
        }
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::param_count_for(&sizes))
            .then_some(PolicyNet { sizes, params })
    }

    fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| layer_len(w[0], w[1])).sum()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }
    pub fn params(&self) -> &[f64] {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
    pub fn num_inputs(&self) -> usize {
        self.sizes[0]
    }
    pub fn num_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Zeroes the output layer, making every feasible action equally likely.
    pub fn zero_output_layer(&mut self) {
        let n = self.sizes.len();
        let last = layer_len(self.sizes[n - 2], self.sizes[n - 1]);
        let len = self.params.len();
        self.params[len - last..].fill(0.0);
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn forward_all(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.sizes.len() - 1);
        let mut offset = 0;
        let mut act: Vec<f64> = input.to_vec();
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let biases = &self.params[offset + n_in * n_out..offset + layer_len(n_in, n_out)];
            let z: Vec<f64> = (0..n_out)
                .map(|j| {
                    let row = &weights[j * n_in..(j + 1) * n_in];
                    biases[j] + row.iter().zip(&act).map(|(w, x)| w * x).sum::<f64>()
                })
                .collect();
            offset += layer_len(n_in, n_out);
            if l + 1 < layers {
                act = z.iter().map(|v| v.max(0.0)).collect();
            }
            zs.push(z);
        }
        zs
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(input)?;
        Ok(self.forward_all(input).pop().unwrap())
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NetError> {
        if input.len() != self.num_inputs() {
            return Err(NetError::Dimension {
                expected: self.num_inputs(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Softmax over the feasible logits; masked entries are exactly zero.
    pub fn forward(&self, input: &[f64], mask: &ActionMask) -> Result<Vec<f64>, NetError> {
        if mask.len() != self.num_outputs() {
            return Err(NetError::MaskDimension {
                expected: self.num_outputs(),
                got: mask.len(),
            });
        }
        let logits = self.logits(input)?;
        Ok(masked_softmax(&logits, mask.as_slice()))
    }

    /// Feasible action with the largest logit; lowest index on ties.
    pub fn best_action(&self, input: &[f64], mask: &ActionMask) -> usize {
        let logits = self.forward_all(input).pop().unwrap();
        argmax_masked(&logits, mask.as_slice())
    }

    /// Mean masked cross-entropy over `batch` and its gradient with respect
    /// to the flat parameter vector.
    pub fn loss_and_grad(&self, batch: &[&TrainingSample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            let zs = self.forward_all(&sample.observation);
            let probs = masked_softmax(zs.last().unwrap(), &sample.mask);
            loss -= probs[sample.label].max(f64::MIN_POSITIVE).ln();
            let mut delta: Vec<f64> = probs;
            delta[sample.label] -= 1.0;
            self.backward(&sample.observation, &zs, delta, scale, &mut grad);
        }
        (loss * scale, grad)
    }

    fn backward(&self, input: &[f64], zs: &[Vec<f64>], mut delta: Vec<f64>, scale: f64, grad: &mut [f64]) {
        let mut offsets: Vec<usize> = Vec::with_capacity(zs.len());
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += layer_len(w[0], w[1]);
        }
        for l in (0..zs.len()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let offset = offsets[l];
            let prev: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                zs[l - 1].iter().map(|v| v.max(0.0)).collect()
            };
            for j in 0..n_out {
                let d = delta[j] * scale;
                if d != 0.0 {
                    let row = &mut grad[offset + j * n_in..offset + (j + 1) * n_in];
                    for (g, x) in row.iter_mut().zip(&prev) {
                        *g += d * x;
                    }
                }
                grad[offset + n_in * n_out + j] += d;
            }
            if l > 0 {
                let weights = &self.params[offset..offset + n_in * n_out];
                let mut back = vec![0.0; n_in];
                for j in 0..n_out {
                    if delta[j] != 0.0 {
                        let row = &weights[j * n_in..(j + 1) * n_in];
                        for (b, w) in back.iter_mut().zip(row) {
                            *b += w * delta[j];
                        }
                    }
                }
                for (b, z) in back.iter_mut().zip(&zs[l - 1]) {
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
    }

    pub fn mean_loss(&self, data: &[TrainingSample]) -> f64 {
        let refs: Vec<&TrainingSample> = data.iter().collect();
        let (loss, _) = self.loss_and_grad(&refs);
        loss
    }

    /// Trains a copy of the network; `self` is left untouched.
    pub fn train(&self, data: &[TrainingSample], config: &TrainConfig, rng: &mut RngStream) -> Result<PolicyNet, NetError> {
        if data.is_empty() {
            return Err(NetError::EmptyDataset);
        }
        for s in data {
            self.check_input(&s.observation)?;
            if s.mask.len() != self.num_outputs() {
                return Err(NetError::MaskDimension {
                    expected: self.num_outputs(),
                    got: s.mask.len(),
                });
            }
            if !s.mask.get(s.label).copied().unwrap_or(false) {
                return Err(NetError::InfeasibleLabel(s.label));
            }
        }
        let mut net = self.clone();
        let n = net.params.len();
        let mut velocity = vec![0.0; n];
        let mut second = vec![0.0; n];
        let mut t = 0i32;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let batch = config.batch_size.max(1);
        for _ in 0..config.epochs {
            // Fisher-Yates with the training stream
            for i in (1..order.len()).rev() {
                order.swap(i, rng.below(i + 1));
            }
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let samples: Vec<&TrainingSample> = chunk.iter().map(|&i| &data[i]).collect();
                let (loss, grad) = net.loss_and_grad(&samples);
                if !loss.is_finite() {
                    return Err(NetError::Diverged(loss));
                }
                epoch_loss += loss * chunk.len() as f64;
                match config.optimizer {
                    Optimizer::Momentum => {
                        for ((p, v), g) in net.params.iter_mut().zip(&mut velocity).zip(&grad) {
                            *v = config.momentum * *v - config.learning_rate * g;
                            *p += *v;
                        }
                    }
                    Optimizer::Adam => {
                        const B1: f64 = 0.9;
                        const B2: f64 = 0.999;
                        t += 1;
                        let c1 = 1.0 - B1.powi(t);
                        let c2 = 1.0 - B2.powi(t);
                        for i in 0..n {
                            let g = grad[i];
                            velocity[i] = B1 * velocity[i] + (1.0 - B1) * g;
                            second[i] = B2 * second[i] + (1.0 - B2) * g * g;
                            let m_hat = velocity[i] / c1;
                            let v_hat = second[i] / c2;
                            net.params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + 1e-8);
                        }
                    }
                }
            }
            let epoch_loss = epoch_loss / data.len() as f64;
            if !epoch_loss.is_finite() || net.params.iter().any(|p| !p.is_finite()) {
                return Err(NetError::Diverged(epoch_loss));
            }
        }
        Ok(net)
    }
}

pub(crate) fn masked_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(z, m)| if *m { (z - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub(crate) fn argmax_masked(values: &[f64], mask: &[bool]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.expect("at least one feasible action").0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(seed: u64) -> PolicyNet {
        PolicyNet::with_sizes(&[6, 5, 4, 3], &mut RngStream::new(seed))
    }

    fn random_input(rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform()).collect()
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut net = toy(1);
        net.zero_output_layer();
        let mask = ActionMask::from_bools(vec![true, false, true]);
        let p = net.forward(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &mask).unwrap();
        assert_eq!(p, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn single_feasible_action_gets_all_mass() {
        let net = toy(2);
        let mask = ActionMask::from_bools(vec![false, false, true]);
        let p = net.forward(&[1.0; 6], &mask).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0]);
        assert_eq!(net.best_action(&[1.0; 6], &mask), 2);
    }

    #[test]
    fn dimension_mismatch() {
        let net = toy(3);
        let mask = ActionMask::from_bools(vec![true; 3]);
        assert_eq!(
            net.forward(&[0.0; 4], &mask),
            Err(NetError::Dimension { expected: 6, got: 4 })
        );
        assert!(matches!(
            net.forward(&[0.0; 6], &ActionMask::from_bools(vec![true; 2])),
            Err(NetError::MaskDimension { .. })
        ));
    }

    #[test]
    fn memorizes_single_sample() {
        let net = toy(4);
        let sample = TrainingSample {
            observation: vec![0.3, 0.0, 1.0, 0.5, 0.2, 0.9],
            mask: vec![true, true, true],
            label: 1,
        };
        let cfg = TrainConfig {
            epochs: 300,
            learning_rate: 0.05,
            batch_size: 1,
            ..Default::default()
        };
        let trained = net.train(std::slice::from_ref(&sample), &cfg, &mut RngStream::new(0)).unwrap();
        let mask = ActionMask::from_bools(sample.mask.clone());
        assert_eq!(trained.best_action(&sample.observation, &mask), 1);
        // the input network is untouched
        assert_eq!(net, toy(4));
    }

    #[test]
    fn training_lowers_loss_and_is_deterministic() {
        let mut rng = RngStream::new(10);
        let data: Vec<TrainingSample> = (0..64)
            .map(|_| {
                let observation = random_input(&mut rng, 6);
                let label = usize::from(observation[0] > 0.5);
                TrainingSample {
                    observation,
                    mask: vec![true, true, true],
                    label,
                }
            })
            .collect();
        let net = toy(5);
        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 8,
            ..Default::default()
        };
        let a = net.train(&data, &cfg, &mut RngStream::new(1)).unwrap();
        let b = net.train(&data, &cfg, &mut RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.mean_loss(&data) <= net.mean_loss(&data));

        let adam = TrainConfig {
            optimizer: Optimizer::Adam,
            ..cfg
        };
        let c = net.train(&data, &adam, &mut RngStream::new(1)).unwrap();
        assert!(c.mean_loss(&data) <= net.mean_loss(&data));
    }

    #[test]
    fn empty_and_bad_labels_rejected() {
        let net = toy(6);
        let cfg = TrainConfig::default();
        assert_eq!(
            net.train(&[], &cfg, &mut RngStream::new(0)),
            Err(NetError::EmptyDataset)
        );
        let bad = TrainingSample {
            observation: vec![0.0; 6],
            mask: vec![true, false, true],
            label: 1,
        };
        assert_eq!(
            net.train(&[bad], &cfg, &mut RngStream::new(0)),
            Err(NetError::InfeasibleLabel(1))
        );
    }

    #[test]
    fn divergence_reported() {
        let net = toy(7);
        let data: Vec<TrainingSample> = (0..3)
            .map(|label| TrainingSample {
                observation: vec![1e150; 6],
                mask: vec![true; 3],
                label,
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            batch_size: 1,
            ..Default::default()
        };
        assert!(matches!(
            net.train(&data, &cfg, &mut RngStream::new(0)),
            Err(NetError::Diverged(_))
        ));
    }

    /// Central finite differences on every parameter.
    #[test]
    fn gradient_matches_finite_differences() {
        let net = toy(8);
        let mut rng = RngStream::new(9);
        let samples: Vec<TrainingSample> = (0..4)
            .map(|i| TrainingSample {
                observation: random_input(&mut rng, 6),
                mask: vec![true, i % 2 == 0, true],
                label: if i % 3 == 0 { 2 } else { 0 },
            })
            .collect();
        let refs: Vec<&TrainingSample> = samples.iter().collect();
        let (_, grad) = net.loss_and_grad(&refs);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.params.len() {
            let mut plus = net.clone();
            plus.params[i] += h;
            let mut minus = net.clone();
            minus.params[i] -= h;
            let numeric = (plus.loss_and_grad(&refs).0 - minus.loss_and_grad(&refs).0) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn probabilities_sum_to_one(seed in any::<u64>(), bits in 1u8..8) {
                let net = toy(seed);
                let mut rng = RngStream::new(seed ^ 1);
                let x = random_input(&mut rng, 6);
                let mask = ActionMask::from_bools((0..3).map(|i| bits & (1 << i) != 0).collect());
                let p = net.forward(&x, &mask).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                for (i, pi) in p.iter().enumerate() {
                    if !mask.is_feasible(i) { prop_assert_eq!(*pi, 0.0); }
                }
                let best = net.best_action(&x, &mask);
                prop_assert!(mask.is_feasible(best));
            }

            #[test]
            fn argmax_invariant_under_positive_scaling(seed in any::<u64>(), scale in 0.01f64..100.0) {
                let net = toy(seed);
                let mut scaled = net.clone();
                // scaling the output layer scales the logits
                let n = scaled.params.len();
                let last = layer_len(4, 3);
                for p in &mut scaled.params[n - last..] { *p *= scale; }
                let mut rng = RngStream::new(seed);
                let x = random_input(&mut rng, 6);
                let mask = ActionMask::from_bools(vec![true, true, true]);
                prop_assert_eq!(net.best_action(&x, &mask), scaled.best_action(&x, &mask));
            }
        }
    }
}
