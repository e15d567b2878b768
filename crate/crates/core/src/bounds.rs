//! Interval bound propagation of pre-/post-activation ranges over an input box.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NeuralNet;

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("input box has {got} intervals, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("input interval {0} is empty or non-finite")]
    BadInterval(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }
}

/// Pre- and post-activation ranges of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRange {
    pub pre: Vec<Interval>,
    pub post: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub layers: Vec<LayerRange>,
}

impl LayerBounds {
    pub fn output(&self) -> &[Interval] {
        self.layers.last().map_or(&[], |l| l.post.as_slice())
    }
}

pub fn propagate_bounds(net: &NeuralNet, input_box: &[Interval]) -> Result<LayerBounds, BoundsError> {
    if input_box.len() != net.input_dim() {
        return Err(BoundsError::Dimension {
            expected: net.input_dim(),
            got: input_box.len(),
        });
    }
    if let Some(i) = input_box.iter().position(|iv| !iv.is_valid()) {
        return Err(BoundsError::BadInterval(i));
    }
    let mut layers: Vec<LayerRange> = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let prev = layers.last().map_or(input_box, |l| l.post.as_slice());
        let pre: Vec<Interval> = layer
            .weights
            .iter()
            .zip(&layer.biases)
            .map(|(row, &b)| {
                let (mut lo, mut hi) = (b, b);
                for (&w, iv) in row.iter().zip(prev) {
                    if w >= 0.0 {
                        lo += w * iv.lo;
                        hi += w * iv.hi;
                    } else {
                        lo += w * iv.hi;
                        hi += w * iv.lo;
                    }
                }
                Interval::new(lo, hi.max(lo))
            })
            .collect();
        // every supported activation is monotone non-decreasing
        let post = pre
            .iter()
            .map(|iv| Interval::new(layer.activation.apply(iv.lo), layer.activation.apply(iv.hi)))
            .collect();
        layers.push(LayerRange { pre, post });
    }
    Ok(LayerBounds { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Layer};

    #[test]
    fn positive_negative_split() {
        let net = NeuralNet::new(
            2,
            vec![Layer::new(vec![vec![1.0, -1.0]], vec![0.0], Activation::Identity)],
        )
        .unwrap();
        let b = propagate_bounds(&net, &[Interval::new(0.0, 1.0); 2]).unwrap();
        assert_eq!(b.layers[0].pre[0], Interval::new(-1.0, 1.0));
    }

    #[test]
    fn affine_image() {
        let net =
            NeuralNet::new(1, vec![Layer::new(vec![vec![2.0]], vec![1.0], Activation::Relu)]).unwrap();
        let b = propagate_bounds(&net, &[Interval::new(0.0, 1.0)]).unwrap();
        assert_eq!(b.layers[0].pre[0], Interval::new(1.0, 3.0));
    }

    #[test]
    fn two_layer_relu_output_range() {
        let net = NeuralNet::new(
            1,
            vec![
                Layer::new(vec![vec![1.0], vec![-1.0]], vec![0.0, 0.0], Activation::Relu),
                Layer::new(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity),
            ],
        )
        .unwrap();
        let b = propagate_bounds(&net, &[Interval::new(0.0, 1.0)]).unwrap();
        assert_eq!(b.layers[0].post, vec![Interval::new(0.0, 1.0), Interval::new(0.0, 0.0)]);
        // hand propagation over [0,1]: relu(-x) collapses to 0, so [0,1];
        // with the box [-1,1] both hidden ranges are [0,1] and the sum is [0,2]
        let b = propagate_bounds(&net, &[Interval::new(-1.0, 1.0)]).unwrap();
        assert_eq!(b.layers[1].pre[0], Interval::new(0.0, 2.0));
    }

    #[test]
    fn rejects_bad_box() {
        let net =
            NeuralNet::new(1, vec![Layer::new(vec![vec![2.0]], vec![1.0], Activation::Relu)]).unwrap();
        assert!(propagate_bounds(&net, &[Interval::new(1.0, 0.0)]).is_err());
        assert!(propagate_bounds(&net, &[]).is_err());
    }
}
