//! Prediction head over final hidden states and the masked cross-entropy
//! loss restricted to labeled positions.

use crate::graph::{Graph, GraphError, Scalar, TensorId};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Two-layer MLP: `D -> D/2 (SiLU) -> 1` logit per position.
#[derive(Debug, Clone)]
pub struct HeadParams {
    pub input: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(input: usize) -> Self {
        let hidden = (input / 2).max(1);
        HeadParams {
            input,
            hidden,
            w1: vec![0.0; input * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: vec![0.0; 1],
        }
    }

    pub fn random_init<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let normal = Normal::new(0.0, std).unwrap();
        for w in self.w1.iter_mut().chain(self.w2.iter_mut()) {
            *w = normal.sample(rng);
        }
    }
}

/// Graph-bound head parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

pub fn bind_head<F: Scalar>(
    head: &HeadParams,
    g: &mut Graph<F>,
    trainable: bool,
) -> Result<BoundHead, GraphError> {
    let conv = |v: &[f64]| v.iter().map(|&x| F::from_f64(x)).collect::<Vec<F>>();
    Ok(BoundHead {
        w1: g.leaf(vec![head.input, head.hidden], conv(&head.w1), trainable)?,
        b1: g.leaf(vec![head.hidden], conv(&head.b1), trainable)?,
        w2: g.leaf(vec![head.hidden, 1], conv(&head.w2), trainable)?,
        b2: g.leaf(vec![1], conv(&head.b2), trainable)?,
    })
}

/// One logit per position; the click probability is `sigmoid(logit)`.
pub fn score<F: Scalar>(
    g: &mut Graph<F>,
    y: TensorId,
    head: &BoundHead,
) -> Result<TensorId, GraphError> {
    let h = g.matmul(y, head.w1)?;
    let h = g.add_row_vec(h, head.b1)?;
    let h = g.silu(h);
    let logits = g.matmul(h, head.w2)?;
    g.add_row_vec(logits, head.b2)
}

/// Mean binary cross-entropy over `label_mask`-true positions.
pub fn masked_bce<F: Scalar>(
    g: &mut Graph<F>,
    logits: TensorId,
    labels: &[F],
    label_mask: &[bool],
) -> Result<TensorId, GraphError> {
    g.masked_bce(logits, labels, label_mask)
}
