use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{argmax, Network};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    Sgd {
        momentum: f64,
    },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm clip applied to each batch gradient.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a lower training loss.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Sum per-sample gradients in a fixed order so results do not depend on
    /// the thread count.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 50,
            clip_norm: Some(5.0),
            patience: None,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size >= 1
            && self.clip_norm.is_none_or(|c| c > 0.0)
            && match self.optimizer {
                Optimizer::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0,
                Optimizer::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "bad training configuration {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub features: &'a FeatureMatrix,
    pub label: usize,
}

/// Per-epoch replacement for a sample's features, e.g. a fresh channel permutation.
/// Called with `(sample index, epoch)`; `None` keeps the stored features.
pub type Augment<'a> = dyn Fn(usize, u64) -> Result<Option<FeatureMatrix>> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub steps: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.loss)
            .collect()
    }

    /// Rows `epoch,split,loss,accuracy` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,accuracy\n");
        for s in &self.history {
            out.push_str(&format!(
                "{},{},{:.6},{:.4}\n",
                s.epoch,
                s.split.as_str(),
                s.loss,
                s.accuracy
            ));
        }
        out
    }
}

enum State {
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
    Sgd { velocity: Vec<f64> },
}

impl State {
    fn new(opt: Optimizer, n: usize) -> Self {
        match opt {
            Optimizer::Adam { .. } => State::Adam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
            Optimizer::Sgd { .. } => State::Sgd {
                velocity: vec![0.0; n],
            },
        }
    }

    fn step(&mut self, opt: Optimizer, lr: f64, params: &mut [f64], grad: &[f64]) {
        match (self, opt) {
            (
                State::Adam { m, v, t },
                Optimizer::Adam {
                    beta1,
                    beta2,
                    epsilon,
                },
            ) => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..params.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                }
            }
            (State::Sgd { velocity }, Optimizer::Sgd { momentum }) => {
                for i in 0..params.len() {
                    velocity[i] = momentum * velocity[i] + grad[i];
                    params[i] -= lr * velocity[i];
                }
            }
            _ => unreachable!("state built from the same optimizer"),
        }
    }
}

/// Dropout stream for one sample in one epoch.
fn dropout_rng(seed: u64, epoch: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch + 1).wrapping_mul(GOLDEN));
    rng.set_stream(index as u64);
    rng
}

struct BatchSum {
    loss: f64,
    correct: usize,
    grad: Vec<f64>,
}

impl BatchSum {
    fn zero(n: usize) -> Self {
        Self {
            loss: 0.0,
            correct: 0,
            grad: vec![0.0; n],
        }
    }

    fn add(mut self, other: Self) -> Self {
        self.loss += other.loss;
        self.correct += other.correct;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += b;
        }
        self
    }
}

/// Mini-batch training with per-sample gradients averaged over each batch.
pub fn train(
    net: &mut Network,
    samples: &[Sample<'_>],
    validation: &[Sample<'_>],
    cfg: &TrainConfig,
    augment: Option<&Augment<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let n_params = net.num_params();
    let mut state = State::new(cfg.optimizer, n_params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs as u64 {
        let mut shuffle =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch.wrapping_mul(GOLDEN)));
        shuffle.set_stream(u64::MAX);
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;

        for batch in order.chunks(cfg.batch_size) {
            let model = &*net;
            let per_sample = |&i: &usize| -> Result<BatchSum> {
                let s = samples[i];
                let feats: Cow<FeatureMatrix> = match augment {
                    Some(f) => match f(i, epoch)? {
                        Some(m) => Cow::Owned(m),
                        None => Cow::Borrowed(s.features),
                    },
                    None => Cow::Borrowed(s.features),
                };
                let mut rng = dropout_rng(cfg.seed, epoch, i);
                let (loss, grad, probs) =
                    model.loss_and_gradient(&feats, s.label, Some(&mut rng))?;
                Ok(BatchSum {
                    loss,
                    correct: usize::from(argmax(&probs) == s.label),
                    grad,
                })
            };
            let sum = if cfg.deterministic {
                let parts: Vec<BatchSum> =
                    batch.par_iter().map(per_sample).collect::<Result<_>>()?;
                parts
                    .into_iter()
                    .fold(BatchSum::zero(n_params), BatchSum::add)
            } else {
                batch
                    .par_iter()
                    .map(per_sample)
                    .try_reduce(|| BatchSum::zero(n_params), |a, b| Ok(a.add(b)))?
            };
            report.steps += 1;
            if !sum.loss.is_finite() || sum.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss: sum.loss / batch.len() as f64,
                });
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grad = sum.grad;
            let mut norm = 0.0;
            for g in &mut grad {
                *g *= scale;
                norm += *g * *g;
            }
            if let Some(clip) = cfg.clip_norm {
                let norm = norm.sqrt();
                if norm > clip {
                    let k = clip / norm;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
            }
            state.step(cfg.optimizer, cfg.learning_rate, net.params_mut(), &grad);
            epoch_loss += sum.loss;
            epoch_correct += sum.correct;
        }

        let loss = epoch_loss / samples.len() as f64;
        report.history.push(EpochStats {
            epoch: epoch as usize + 1,
            split: Split::Train,
            loss,
            accuracy: epoch_correct as f64 / samples.len() as f64,
        });
        if !validation.is_empty() {
            let (loss, accuracy) = evaluate_loss(net, validation)?;
            report.history.push(EpochStats {
                epoch: epoch as usize + 1,
                split: Split::Validation,
                loss,
                accuracy,
            });
        }
        if loss < best {
            best = loss;
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

/// Inference-mode probabilities for every sample.
pub fn predict_all(net: &Network, inputs: &[&FeatureMatrix]) -> Result<Vec<Vec<f64>>> {
    inputs.par_iter().map(|x| net.predict(x)).collect()
}

/// Mean inference-mode cross-entropy and accuracy.
pub fn evaluate_loss(net: &Network, samples: &[Sample<'_>]) -> Result<(f64, f64)> {
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let logits = net.logits(s.features)?;
            Ok((
                super::layers::cross_entropy(&logits, s.label),
                argmax(&logits) == s.label,
            ))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok((
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().filter(|p| p.1).count() as f64 / n,
    ))
}

/// Arithmetic mean of member probability vectors.
pub fn ensemble_average(outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = outputs.first().ok_or(Error::Empty("ensemble members"))?;
    if outputs.iter().any(|o| o.len() != first.len()) {
        return Err(Error::Shape(
            "ensemble members disagree on class count".into(),
        ));
    }
    let mut mean = vec![0.0; first.len()];
    for o in outputs {
        for (m, v) in mean.iter_mut().zip(o) {
            *m += v;
        }
    }
    let n = outputs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Averages the softmax outputs of several networks over the same classes.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<Network>,
}

impl Ensemble {
    pub fn new(members: Vec<Network>) -> Result<Self> {
        let first = members.first().ok_or(Error::Empty("ensemble members"))?;
        if members.iter().any(|m| m.classes() != first.classes()) {
            return Err(Error::Shape(
                "ensemble members disagree on class count".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        let outs = self
            .members
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<Vec<_>>>()?;
        ensemble_average(&outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::NetworkSpec;

    #[test]
    fn ensemble_example() {
        let p = ensemble_average(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(ensemble_average(&[vec![1.0, 0.0], vec![1.0]]).is_err());
        assert!(ensemble_average(&[]).is_err());
    }

    #[test]
    fn csv_history() {
        let r = TrainReport {
            history: vec![EpochStats {
                epoch: 1,
                split: Split::Train,
                loss: 0.5,
                accuracy: 0.75,
            }],
            steps: 1,
            stopped_early: false,
        };
        assert_eq!(
            r.to_csv(),
            "epoch,split,loss,accuracy\n1,train,0.500000,0.7500\n"
        );
    }

    #[test]
    fn rejects_bad_config() {
        let spec = NetworkSpec::parse("GRU(2,0) -> Dense(2)", 1, 2).unwrap();
        let mut net = Network::new(spec, 0).unwrap();
        let x = FeatureMatrix::zeros(1, 3);
        let s = [Sample {
            features: &x,
            label: 0,
        }];
        let cfg = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(train(&mut net, &s, &[], &cfg, None).is_err());
        assert!(train(&mut net, &[], &[], &TrainConfig::default(), None).is_err());
    }
}
