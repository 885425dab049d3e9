use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv1d_backward, conv1d_forward, cross_entropy, dense_backward, dense_forward, gru_backward,
    gru_forward, softmax, ConvShape, GruShape, GruTrace,
};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

#[derive(Debug, Clone, Copy)]
enum Block {
    Conv {
        shape: ConvShape,
        dropout: f64,
        w: usize,
    },
    Gru {
        shape: GruShape,
        dropout: f64,
        w: usize,
    },
    Dense {
        input: usize,
        classes: usize,
        w: usize,
    },
}

impl Block {
    fn len(&self) -> usize {
        match *self {
            Block::Conv { shape, .. } => shape.weight_len() + shape.filters,
            Block::Gru { shape, .. } => {
                let (a, b, c) = shape.block_lens();
                a + b + c
            }
            Block::Dense { input, classes, .. } => input * classes + classes,
        }
    }
}

fn layout(spec: &NetworkSpec) -> (Vec<Block>, usize) {
    let mut blocks = Vec::with_capacity(spec.layers.len());
    let mut width = spec.input_dim;
    let mut offset = 0;
    for layer in &spec.layers {
        let block = match *layer {
            LayerSpec::Conv1d {
                filters,
                kernel,
                stride,
                dropout,
            } => {
                let b = Block::Conv {
                    shape: ConvShape {
                        in_ch: width,
                        filters,
                        kernel,
                        stride,
                    },
                    dropout,
                    w: offset,
                };
                width = filters;
                b
            }
            LayerSpec::Gru { units, dropout } => {
                let b = Block::Gru {
                    shape: GruShape {
                        input: width,
                        units,
                    },
                    dropout,
                    w: offset,
                };
                width = units;
                b
            }
            LayerSpec::Dense { nodes } => Block::Dense {
                input: width,
                classes: nodes,
                w: offset,
            },
        };
        offset += block.len();
        blocks.push(block);
    }
    (blocks, offset)
}

struct ConvRecord {
    input: Vec<f64>,
    n_in: usize,
    out: Vec<f64>,
    n_out: usize,
    mask: Option<Vec<f64>>,
}

struct Forward {
    convs: Vec<ConvRecord>,
    gru_in: Vec<f64>,
    gru_mask: Option<Vec<f64>>,
    trace: GruTrace,
    logits: Vec<f64>,
}

/// Inverted dropout: each unit is zeroed with probability `p`, survivors scaled by `1/(1-p)`.
fn dropout_mask(len: usize, p: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng?;
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_mask(v: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (x, k) in v.iter_mut().zip(m) {
            *x *= k;
        }
    }
}

fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}

/// A CNN-GRU classifier with all parameters in one flat vector.
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    blocks: Vec<Block>,
    params: Vec<f64>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in slice {
                *v = rng.gen_range(-a..a);
            }
        };
        for block in net.blocks.clone() {
            match block {
                Block::Conv { shape, w, .. } => fill(
                    &mut net.params[w..w + shape.weight_len()],
                    shape.in_ch * shape.kernel,
                    shape.filters * shape.kernel,
                ),
                Block::Gru { shape, w, .. } => {
                    let (lw, lu, _) = shape.block_lens();
                    fill(&mut net.params[w..w + lw], shape.input, 3 * shape.units);
                    fill(
                        &mut net.params[w + lw..w + lw + lu],
                        shape.units,
                        3 * shape.units,
                    );
                }
                Block::Dense { input, classes, w } => {
                    fill(&mut net.params[w..w + input * classes], input, classes)
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let (blocks, n) = layout(&spec);
        Ok(Self {
            spec,
            blocks,
            params: vec![0.0; n],
        })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters for a network with {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    fn check_input(&self, x: &FeatureMatrix) -> Result<()> {
        if x.rows() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} feature rows, got {}",
                self.spec.input_dim,
                x.rows()
            )));
        }
        let need = self.spec.min_sequence_len();
        if x.cols() < need {
            return Err(Error::TooShort {
                needed: need,
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &FeatureMatrix, mut rng: Option<&mut ChaCha8Rng>) -> Result<Forward> {
        self.check_input(x)?;
        let p = &self.params;
        let mut cur: Vec<f64> = x.as_slice().iter().map(|&v| v as f64).collect();
        let mut n = x.cols();
        let mut width = x.rows();
        let mut convs = Vec::new();
        for block in &self.blocks {
            match *block {
                Block::Conv { shape, dropout, w } => {
                    let lw = shape.weight_len();
                    let (mut out, n_out) =
                        conv1d_forward(shape, &p[w..w + lw], &p[w + lw..], &cur, n)?;
                    for v in &mut out {
                        *v = v.max(0.0);
                    }
                    let mask = dropout_mask(out.len(), dropout, rng.as_deref_mut());
                    let mut next = out.clone();
                    apply_mask(&mut next, &mask);
                    convs.push(ConvRecord {
                        input: std::mem::replace(&mut cur, next),
                        n_in: n,
                        out,
                        n_out,
                        mask,
                    });
                    n = n_out;
                    width = shape.filters;
                }
                Block::Gru { shape, dropout, w } => {
                    let (lw, lu, lb) = shape.block_lens();
                    let mut xs = transpose(&cur, width, n);
                    let gru_mask = dropout_mask(xs.len(), dropout, rng.as_deref_mut());
                    apply_mask(&mut xs, &gru_mask);
                    let trace = gru_forward(
                        shape,
                        &p[w..w + lw],
                        &p[w + lw..w + lw + lu],
                        &p[w + lw + lu..w + lw + lu + lb],
                        &xs,
                        n,
                        &vec![0.0; shape.units],
                    );
                    let Some(Block::Dense {
                        input,
                        classes,
                        w: dw,
                    }) = self.blocks.last().copied()
                    else {
                        unreachable!("validated stack ends in Dense")
                    };
                    let logits = dense_forward(
                        &p[dw..dw + input * classes],
                        &p[dw + input * classes..dw + input * classes + classes],
                        trace.last(),
                    );
                    return Ok(Forward {
                        convs,
                        gru_in: xs,
                        gru_mask,
                        trace,
                        logits,
                    });
                }
                Block::Dense { .. } => unreachable!("validated stack has a GRU before Dense"),
            }
        }
        unreachable!("validated stack contains a GRU")
    }

    /// Pre-softmax outputs in inference mode (no dropout).
    pub fn logits(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(self.forward(x, None)?.logits)
    }

    /// Class probabilities in inference mode.
    pub fn predict(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Cross-entropy loss and its gradient w.r.t. every parameter for one sample.
    /// Passing an RNG enables dropout (training mode); `None` is inference mode.
    pub fn loss_and_gradient(
        &self,
        x: &FeatureMatrix,
        label: usize,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        if label >= self.spec.classes {
            return Err(Error::InvalidParameter(format!(
                "label {label} out of range for {} classes",
                self.spec.classes
            )));
        }
        let fwd = self.forward(x, rng)?;
        let loss = cross_entropy(&fwd.logits, label);
        let probs = softmax(&fwd.logits);
        let mut grad = vec![0.0; self.params.len()];
        let p = &self.params;

        let mut dlogits = probs.clone();
        dlogits[label] -= 1.0;
        let Some(Block::Dense { input, classes, w }) = self.blocks.last().copied() else {
            unreachable!()
        };
        let lw = input * classes;
        let (gw, rest) = grad[w..].split_at_mut(lw);
        let dh = dense_backward(
            &p[w..w + lw],
            fwd.trace.last(),
            &dlogits,
            gw,
            &mut rest[..classes],
        );

        let gru_index = self.blocks.len() - 2;
        let Block::Gru { shape, w, .. } = self.blocks[gru_index] else {
            unreachable!()
        };
        let (lw, lu, lb) = shape.block_lens();
        let steps = fwd.trace.steps;
        let mut dxs = (!fwd.convs.is_empty()).then(|| vec![0.0; steps * shape.input]);
        {
            let (gw, rest) = grad[w..].split_at_mut(lw);
            let (gu, rest) = rest.split_at_mut(lu);
            gru_backward(
                shape,
                &p[w..w + lw],
                &p[w + lw..w + lw + lu],
                &fwd.gru_in,
                &fwd.trace,
                &dh,
                gw,
                gu,
                &mut rest[..lb],
                dxs.as_deref_mut(),
            );
        }

        if let Some(mut dxs) = dxs {
            apply_mask(&mut dxs, &fwd.gru_mask);
            let mut d_out = transpose(&dxs, steps, shape.input);
            for (i, rec) in fwd.convs.iter().enumerate().rev() {
                let Block::Conv { shape, w, .. } = self.blocks[i] else {
                    unreachable!()
                };
                apply_mask(&mut d_out, &rec.mask);
                for (d, &o) in d_out.iter_mut().zip(&rec.out) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
                let lw = shape.weight_len();
                let mut dx = (i > 0).then(|| vec![0.0; shape.in_ch * rec.n_in]);
                let (gw, rest) = grad[w..].split_at_mut(lw);
                conv1d_backward(
                    shape,
                    &p[w..w + lw],
                    &rec.input,
                    rec.n_in,
                    &d_out,
                    rec.n_out,
                    gw,
                    &mut rest[..shape.filters],
                    dx.as_deref_mut(),
                );
                match dx {
                    Some(dx) => d_out = dx,
                    None => break,
                }
            }
        }
        Ok((loss, grad, probs))
    }

    /// Inference-mode loss for one sample.
    pub fn loss(&self, x: &FeatureMatrix, label: usize) -> Result<f64> {
        Ok(cross_entropy(&self.logits(x)?, label))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NetworkSpec {
        NetworkSpec::parse("C1D(3,4,2,0.2) -> GRU(5,0.1) -> Dense(classes)", 4, 3).unwrap()
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut net = Network::new(spec(), 1).unwrap();
        let Some(Block::Dense { w, .. }) = net.blocks.last().copied() else {
            panic!()
        };
        net.params[w..].fill(0.0);
        let x = FeatureMatrix::from_vec(4, 20, (0..80).map(|i| i as f32 * 0.1).collect()).unwrap();
        let p = net.predict(&x).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn parameter_count() {
        // conv 3*4*4+3, gru 3*5*3 + 3*5*5 + 15, dense 5*3+3
        assert_eq!(Network::zeros(spec()).unwrap().num_params(), 51 + 135 + 18);
    }

    #[test]
    fn rejects_short_or_wrong_inputs() {
        let net = Network::new(spec(), 1).unwrap();
        assert!(matches!(
            net.predict(&FeatureMatrix::zeros(4, 3)),
            Err(Error::TooShort { needed: 4, got: 3 })
        ));
        assert!(matches!(
            net.predict(&FeatureMatrix::zeros(5, 30)),
            Err(Error::Shape(_))
        ));
        assert!(net
            .loss_and_gradient(&FeatureMatrix::zeros(4, 30), 3, None)
            .is_err());
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }
}
