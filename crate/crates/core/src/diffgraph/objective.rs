use std::collections::BTreeMap;

use super::loss::LogitLoss;
use super::network::{backward, forward_trace, NetworkSpec, ParameterSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One weighted loss on one head, optionally restricted to a subset of the
/// batch rows.
pub struct Term<'a, T: Scalar> {
    pub head: String,
    /// `None` means every row of the batch.
    pub rows: Option<Vec<usize>>,
    pub weight: T,
    pub loss: Box<dyn LogitLoss<T> + 'a>,
}

/// Weighted sum of per-head losses over one forward pass.
pub struct Objective<'a, T: Scalar> {
    terms: Vec<Term<'a, T>>,
}

impl<'a, T: Scalar> Default for Objective<'a, T> {
    fn default() -> Self {
        Objective { terms: Vec::new() }
    }
}

impl<'a, T: Scalar> Objective<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(
        mut self,
        head: &str,
        rows: Option<Vec<usize>>,
        weight: T,
        loss: impl LogitLoss<T> + 'a,
    ) -> Self {
        self.push(head, rows, weight, loss);
        self
    }

    pub fn push(
        &mut self,
        head: &str,
        rows: Option<Vec<usize>>,
        weight: T,
        loss: impl LogitLoss<T> + 'a,
    ) {
        self.terms.push(Term {
            head: head.to_string(),
            rows,
            weight,
            loss: Box::new(loss),
        });
    }

    pub fn terms(&self) -> &[Term<'a, T>] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn heads(&self) -> Vec<&str> {
        let mut heads: Vec<&str> = self.terms.iter().map(|t| t.head.as_str()).collect();
        heads.sort_unstable();
        heads.dedup();
        heads
    }
}

/// Loss value plus whichever gradients were requested.
pub struct Evaluation<T: Scalar> {
    pub loss: T,
    pub param_grads: Option<ParameterSet<T>>,
    pub input_grad: Option<Tensor<T>>,
}

/// Forward, loss, and reverse pass in one call.
pub fn evaluate<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
    objective: &Objective<'_, T>,
    want_params: bool,
    want_input: bool,
) -> Result<Evaluation<T>> {
    let heads = objective.heads();
    let trace = forward_trace(spec, params, images, &heads)?;
    let n = trace.batch();
    let mut loss = T::zero();
    let mut logit_grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for term in objective.terms() {
        let logits = trace.logits(&term.head)?;
        let k = logits.shape()[1];
        let selected;
        let block = match &term.rows {
            None => logits,
            Some(rows) => {
                if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
                    return Err(Error::Shape(format!(
                        "row {bad} selected from a batch of {n}"
                    )));
                }
                if rows.is_empty() {
                    continue;
                }
                selected = logits.select(rows);
                &selected
            }
        };
        let (value, grad) = term.loss.value_and_grad(block)?;
        if !value.is_finite() {
            return Err(Error::NumericFailure {
                layer: format!("loss on head.{}", term.head),
            });
        }
        loss = loss + term.weight * value;
        if term.weight == T::zero() {
            continue;
        }
        let acc = logit_grads
            .entry(term.head.clone())
            .or_insert_with(|| Tensor::zeros(&[n, k]));
        let rows: Box<dyn Iterator<Item = usize>> = match &term.rows {
            None => Box::new(0..n),
            Some(r) => Box::new(r.iter().copied()),
        };
        for (src, dst) in rows.enumerate() {
            let g = grad.item(src);
            for (a, &b) in acc.item_mut(dst).iter_mut().zip(g) {
                *a = *a + term.weight * b;
            }
        }
    }
    if !(want_params || want_input) {
        return Ok(Evaluation {
            loss,
            param_grads: None,
            input_grad: None,
        });
    }
    let grads = backward(spec, params, &trace, &logit_grads, want_params, want_input)?;
    Ok(Evaluation {
        loss,
        param_grads: grads.params,
        input_grad: grads.input,
    })
}

/// Logits of `head` for a batch of images `[N, C, H, W]`.
pub fn forward_logits<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
    head: &str,
) -> Result<Tensor<T>> {
    let trace = forward_trace(spec, params, images, &[head])?;
    trace.logits(head).cloned()
}

pub fn loss_value<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
    objective: &Objective<'_, T>,
) -> Result<T> {
    evaluate(spec, params, images, objective, false, false).map(|e| e.loss)
}

/// Loss and its exact gradient with respect to every parameter tensor.
pub fn loss_and_param_grads<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
    objective: &Objective<'_, T>,
) -> Result<(T, ParameterSet<T>)> {
    let e = evaluate(spec, params, images, objective, true, false)?;
    Ok((e.loss, e.param_grads.expect("requested")))
}

/// Gradient of the loss with respect to the input images, parameters held fixed.
pub fn input_gradient<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    images: &Tensor<T>,
    objective: &Objective<'_, T>,
) -> Result<Tensor<T>> {
    let e = evaluate(spec, params, images, objective, false, true)?;
    Ok(e.input_grad.expect("requested"))
}
