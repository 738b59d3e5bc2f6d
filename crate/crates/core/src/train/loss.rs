//! Joint node/graph objective.

use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean squared error between node scores and ±1 node labels.
pub fn node_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} node scores vs {} node labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Shape("node loss is undefined for an empty node list".into()));
    }
    let sum: f64 = scores.iter().zip(labels).map(|(s, l)| (s - l).powi(2)).sum();
    Ok(sum / scores.len() as f64)
}

/// Binary cross-entropy with logits, `softplus(z) - y z`.
pub fn graph_loss(logit: f64, label: u8) -> f64 {
    let y = f64::from(label);
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// d graph_loss / d logit.
pub fn graph_loss_grad(logit: f64, label: u8) -> f64 {
    sigmoid(logit) - f64::from(label)
}

/// Per-graph loss terms; `total = node + graph`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub node: f64,
    pub graph: f64,
}

impl LossBreakdown {
    pub fn new(node: f64, graph: f64) -> Self {
        LossBreakdown {
            total: node + graph,
            node,
            graph,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_loss_examples() {
        assert_eq!(node_loss(&[1.0, -1.0], &[1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(node_loss(&[0.0], &[1.0]).unwrap(), 1.0);
        assert!((node_loss(&[0.5, -0.5], &[1.0, 1.0]).unwrap() - 1.25).abs() < 1e-15);
        assert!(node_loss(&[], &[]).is_err());
        assert!(node_loss(&[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn graph_loss_examples() {
        assert!((graph_loss(0.0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        // -ln(1/(1+e^-1)) = ln(1 + e^-1)
        assert!((graph_loss(1.0, 1) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((graph_loss(1.0, 1) - 0.313262).abs() < 1e-6);
        assert!((graph_loss(-1.0, 1) - 1.313262).abs() < 1e-6);
        for z in [-30.0, -2.5, 0.0, 0.7, 40.0] {
            assert!((graph_loss(z, 0) - graph_loss(-z, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_loss_is_stable_for_large_logits() {
        assert!(graph_loss(800.0, 1).abs() < 1e-300);
        assert!((graph_loss(800.0, 0) - 800.0).abs() < 1e-9);
        assert!(graph_loss(-800.0, 1).is_finite());
    }

    #[test]
    fn graph_loss_grad_matches_difference_quotient() {
        for (z, y) in [(0.3, 1u8), (-1.2, 0), (2.0, 0)] {
            let h = 1e-6;
            let fd = (graph_loss(z + h, y) - graph_loss(z - h, y)) / (2.0 * h);
            assert!((fd - graph_loss_grad(z, y)).abs() < 1e-9);
        }
    }
}
