//! The full counting model: encoder, relation learner and decoders.

use mafea_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::{decode_all, decoder_prefix, init_decoder};
use crate::encoder::{encode, init_encoder};
use crate::error::{data_err, Result};
use crate::objectives::{aux_loss, count_loss, partition_tokens, tbd_loss, total_loss, LossWeights};
use crate::params::{Bound, Init, ParamStore};
use crate::relation::{correlation_volumes, init_relation};
use crate::scenes::CountingSample;

#[derive(Clone, Debug, PartialEq)]
pub struct Mafea {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[1, H, W]`
    pub density: Var,
    pub aux: Vec<Var>,
    /// Per-layer alignment scores `[N^Q]`, empty without the background token.
    pub alignment: Vec<Var>,
}

/// Loss terms of one sample, each already a tape scalar.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub count: Var,
    pub aux: Var,
    pub tbd: Var,
    pub total: Var,
}

/// Model outputs detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub density: Tensor,
    pub count: f64,
    /// Layer-averaged alignment scores on the `h x w` token grid.
    pub alignment: Option<Tensor>,
}

impl Mafea {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut params,
            rng: &mut rng,
        };
        init_encoder(&mut init, &config);
        init_relation(&mut init, &config);
        init_decoder(&mut init, &config, &decoder_prefix(None))?;
        for k in 0..config.relation.iterations - 1 {
            init_decoder(&mut init, &config, &decoder_prefix(Some(k)))?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(config, 0)?;
        fresh.params.check_compatible(&params)?;
        Ok(Self {
            config: fresh.config,
            params,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, sample: &CountingSample) -> Result<Forward> {
        let enc = encode(tape, p, &self.config, &sample.query, &sample.exemplars)?;
        let volumes = correlation_volumes(tape, p, &self.config, &enc, &sample.boxes)?;
        let (density, aux) = decode_all(tape, p, &self.config, &volumes)?;
        Ok(Forward {
            density,
            aux,
            alignment: enc.alignment,
        })
    }

    /// Mean of the per-layer alignment scores.
    pub fn mean_alignment(tape: &mut Tape, alignment: &[Var]) -> Result<Option<Var>> {
        let Some((&first, rest)) = alignment.split_first() else {
            return Ok(None);
        };
        let mut acc = first;
        for &a in rest {
            acc = tape.add(acc, a)?;
        }
        if rest.is_empty() {
            Ok(Some(acc))
        } else {
            Ok(Some(tape.scale(acc, 1.0 / alignment.len() as f64)?))
        }
    }

    /// Loss of one sample inside a batch: squared errors normalised by the
    /// batch object count, the TBD term averaged over the batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        fwd: &Forward,
        sample: &CountingSample,
        batch_objects: f64,
        batch_size: usize,
        weights: &LossWeights,
    ) -> Result<LossTerms> {
        let gt = tape.constant(sample.density.clone());
        if tape.shape(gt) != tape.shape(fwd.density) {
            return Err(data_err(format!(
                "density target {:?} vs prediction {:?}",
                sample.density.shape(),
                tape.shape(fwd.density)
            )));
        }
        let count = count_loss(tape, fwd.density, gt, batch_objects)?;
        let aux = aux_loss(tape, &fwd.aux, gt, batch_objects)?;
        let tbd = match Self::mean_alignment(tape, &fwd.alignment)? {
            Some(scores) if weights.tbd > 0.0 => {
                let e = &self.config.encoder;
                let part = partition_tokens(&sample.points, e.patch_size, e.query_grid())?;
                let l = tbd_loss(tape, scores, &part)?;
                tape.scale(l, 1.0 / batch_size as f64)?
            }
            _ => tape.constant(Tensor::scalar(0.0)),
        };
        let total = total_loss(tape, count, aux, tbd, weights)?;
        Ok(LossTerms { count, aux, tbd, total })
    }

    pub fn predict(&self, sample: &CountingSample) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let fwd = self.forward(&mut tape, &p, sample)?;
        let density = tape.value(fwd.density).clone();
        let alignment = match Self::mean_alignment(&mut tape, &fwd.alignment)? {
            Some(a) => {
                let (h, w) = self.config.encoder.query_grid();
                Some(tape.value(a).clone().reshape(&[h, w])?)
            }
            None => None,
        };
        Ok(Prediction {
            count: density.sum(),
            density,
            alignment,
        })
    }
}
