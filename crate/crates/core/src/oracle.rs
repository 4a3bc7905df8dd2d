//! Opaque query access to a victim model: batched logit queries with exact
//! query accounting, plus the margin loss that drives the attacks.
//!
//! The oracle hides everything about the victim except its logits — there
//! is deliberately no way to reach gradients or parameters through this
//! interface.

use thiserror::Error;

use crate::nnet::{Image, Model, NnetError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("query budget exhausted: {requested} images requested, {remaining} queries remaining")]
    BudgetExhausted { requested: u64, remaining: u64 },
    #[error("victim model failed: {0}")]
    Victim(#[from] NnetError),
}

/// Anything that maps an image to class logits. Implemented by [`Model`];
/// tests substitute spies or constant functions.
pub trait LogitModel {
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Image) -> Result<Vec<f64>, NnetError>;
}

impl LogitModel for Model {
    fn num_classes(&self) -> usize {
        Model::num_classes(self)
    }

    fn logits(&self, x: &Image) -> Result<Vec<f64>, NnetError> {
        self.forward(x)
    }
}

impl<M: LogitModel + ?Sized> LogitModel for &M {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn logits(&self, x: &Image) -> Result<Vec<f64>, NnetError> {
        (**self).logits(x)
    }
}

/// A budgeted logit oracle with a monotone query counter.
///
/// Each batch query costs exactly one query per image in the batch. If the
/// remaining budget cannot cover a whole batch, the query fails and the
/// counter is left unchanged — the error reports how much budget remains so
/// callers can split the batch.
#[derive(Debug)]
pub struct QueryOracle<M: LogitModel> {
    victim: M,
    query_count: u64,
    max_queries: u64,
}

impl<M: LogitModel> QueryOracle<M> {
    pub fn new(victim: M, max_queries: u64) -> Self {
        QueryOracle {
            victim,
            query_count: 0,
            max_queries,
        }
    }

    pub fn query_count(&self) -> u64 {
        self.query_count
    }

    pub fn max_queries(&self) -> u64 {
        self.max_queries
    }

    pub fn remaining(&self) -> u64 {
        self.max_queries - self.query_count
    }

    pub fn num_classes(&self) -> usize {
        self.victim.num_classes()
    }

    pub fn query(&mut self, batch: &[&Image]) -> Result<Vec<Vec<f64>>, OracleError> {
        let requested = batch.len() as u64;
        if requested > self.remaining() {
            return Err(OracleError::BudgetExhausted {
                requested,
                remaining: self.remaining(),
            });
        }
        let mut out = Vec::with_capacity(batch.len());
        for x in batch {
            out.push(self.victim.logits(x)?);
        }
        self.query_count += requested;
        Ok(out)
    }
}

/// Margin loss `max_{k≠y} z_k − z_y`. Maximizing it drives the input toward
/// misclassification; it is non-negative exactly when the image is (at
/// least tied) misclassified.
pub fn margin_loss(logits: &[f64], y: usize) -> f64 {
    assert!(
        y < logits.len(),
        "label {y} out of range for {} logits",
        logits.len()
    );
    assert!(logits.len() >= 2, "margin needs at least two classes");
    let mut best = f64::NEG_INFINITY;
    for (k, &z) in logits.iter().enumerate() {
        if k != y && z > best {
            best = z;
        }
    }
    best - logits[y]
}

/// Margin plus the misclassification verdict for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginEval {
    pub margin: f64,
    pub adversarial: bool,
}

/// Evaluate the margin and whether the logits are adversarial for label
/// `y`. An exact argmax tie with the true class counts as adversarial
/// (margin 0 ⇒ success), so `adversarial == (margin >= 0)`.
pub fn evaluate_margin(logits: &[f64], y: usize) -> MarginEval {
    let margin = margin_loss(logits, y);
    MarginEval {
        margin,
        adversarial: margin >= 0.0,
    }
}
