use super::{Batch, BilevelObjective, BloError, Evaluation, Result, Split};
use crate::data::Sample;
use crate::loss::{binarize, composite_loss, dice_score, LossConfig};
use crate::nn::{ParamId, SegModel, Track};
use crate::tensor::{Tape, Tensor};

struct Encoded {
    tokens: Tensor,
    mask: Tensor,
}

/// The segmentation model as a bilevel objective over `D1` and `D2`.
///
/// Frozen encoder outputs are computed once up front; every evaluation only
/// replays the decoder and mask head.
pub struct SegObjective<'m> {
    model: &'m SegModel,
    loss: LossConfig,
    splits: [Vec<Encoded>; 2],
}

impl<'m> SegObjective<'m> {
    pub fn new(
        model: &'m SegModel,
        loss: LossConfig,
        d1: &[Sample],
        d2: &[Sample],
    ) -> Result<Self> {
        let encode = |samples: &[Sample]| -> Result<Vec<Encoded>> {
            samples
                .iter()
                .map(|s| {
                    Ok(Encoded {
                        tokens: model.encode(&s.image)?,
                        mask: s.mask.clone(),
                    })
                })
                .collect()
        };
        Ok(Self {
            model,
            loss,
            splits: [encode(d1)?, encode(d2)?],
        })
    }

    pub fn model(&self) -> &SegModel {
        self.model
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.splits[split as usize].len()
    }

    /// Mean Dice score and mean loss over arbitrary samples, no gradients.
    pub fn score(
        &self,
        weights: &[Tensor],
        prompt: &[Tensor],
        samples: &[Sample],
    ) -> Result<(f64, f64)> {
        let mut dice = 0.0;
        let mut loss = 0.0;
        for s in samples {
            let tape = Tape::new();
            let b = self.model.bind_with(&tape, weights, prompt, Track::NONE)?;
            let logits = self.model.forward(&b, &s.image)?;
            loss += composite_loss(logits, &s.mask, &self.loss)?.item();
            dice += dice_score(&binarize(&logits.value()), &s.mask)?;
        }
        let n = samples.len() as f64;
        Ok((dice / n, loss / n))
    }
}

impl BilevelObjective for SegObjective<'_> {
    fn evaluate(
        &self,
        weights: &[Tensor],
        prompt: &[Tensor],
        batch: &Batch,
        track: Track,
    ) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(BloError::EmptyBatch("segmentation objective"));
        }
        let tape = Tape::new();
        let bound = self.model.bind_with(&tape, weights, prompt, track)?;
        let mut total: Option<crate::tensor::Var<'_>> = None;
        for &(split, index) in &batch.members {
            let ex = self.splits[split as usize]
                .get(index)
                .ok_or(BloError::UnknownExample { split, index })?;
            let logits = self.model.forward_encoded(&bound, &ex.tokens)?;
            let l = composite_loss(logits, &ex.mask, &self.loss)?;
            total = Some(match total {
                None => l,
                Some(t) => t.add(l)?,
            });
        }
        let loss = total
            .expect("non-empty batch")
            .scale(1.0 / batch.len() as f64);
        let value = loss.item();
        let grads = loss.backward()?;
        let partition = self.model.parameter_partition();
        let collect = |ids: &[ParamId]| ids.iter().map(|&id| grads.wrt(bound.var(id))).collect();
        Ok(Evaluation {
            loss: value,
            grad_weights: collect(&partition.weights),
            grad_prompt: collect(&partition.prompt),
        })
    }
}
