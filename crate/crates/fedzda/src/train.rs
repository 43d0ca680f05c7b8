//! Minibatch SGD shared by local client updates, server-side fine-tuning
//! and oracle training.

use rand_core::RngCore;

use crate::data::TrainData;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng;
use crate::tensor::Tape;

/// Train in place with cross-entropy SGD. Each epoch shuffles the row
/// order (driven by `rng`), then walks fixed-size batches; the final
/// short batch is kept. With `prox = Some((anchor, mu))` a proximal pull
/// `mu * (w - anchor)` is added to every parameter gradient.
///
/// Returns the cross-entropy of the last processed batch.
pub fn train_sgd(
    model: &mut Model,
    data: &TrainData,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    prox: Option<(&[f64], f64)>,
    rng: &mut impl RngCore,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("train_sgd: empty training data".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("fed.batch_size", "must be at least 1"));
    }
    if let Some((anchor, _)) = prox {
        if anchor.len() != model.param_count() {
            return Err(Error::shape(
                "train_sgd",
                format!("prox anchor has {} values, model has {}", anchor.len(), model.param_count()),
            ));
        }
    }

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..epochs {
        rng::shuffle(rng, &mut order);
        for chunk in order.chunks(batch_size) {
            let batch = data.select(chunk);
            let mut tape = Tape::new();
            let x = tape.constant(&batch.images);
            let trace = model.forward_train(&mut tape, x)?;
            let loss = tape.softmax_xent(trace.logits, &batch.labels)?;
            last_loss = tape.value(loss)[0];
            tape.backward(loss)?;

            let mut offset = 0;
            for (tensor, var) in model.param_tensors_mut().into_iter().zip(&trace.param_vars) {
                let grad = tape.grad(*var).expect("parameters registered with grad");
                let values = tensor.data_mut();
                match prox {
                    Some((anchor, mu)) => {
                        let anchor_slice = &anchor[offset..offset + values.len()];
                        for ((p, &g), &a) in values.iter_mut().zip(grad).zip(anchor_slice) {
                            *p -= lr * (g + mu * (*p - a));
                        }
                    }
                    None => {
                        for (p, &g) in values.iter_mut().zip(grad) {
                            *p -= lr * g;
                        }
                    }
                }
                offset += values.len();
            }
        }
    }
    Ok(last_loss)
}
