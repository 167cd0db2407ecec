//! Correlation volume to density map.
//!
//! Each stage is a 3x3 convolution halving the channel count, a leaky
//! rectifier and x2 bilinear upsampling. A 1x1 convolution and a rectifier
//! produce the single-channel non-negative map.

use mafea_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{config_err, Result};
use crate::params::{Bound, Init};

/// Fixed output multiplier bringing O(1) head activations to per-pixel
/// density magnitudes.
pub const DENSITY_SCALE: f64 = 0.01;

const HEAD_BIAS_INIT: f64 = 0.1;

/// Channel widths `[C, C/2, ..]` of the stage inputs and the head input.
pub fn stage_widths(embed_dim: usize, stages: usize) -> Vec<usize> {
    (0..=stages).map(|i| (embed_dim >> i).max(1)).collect()
}

/// Parameter prefix of decoder `index`: the main decoder, or auxiliary
/// decoder `k` for intermediate volume `k`.
pub fn decoder_prefix(aux: Option<usize>) -> String {
    match aux {
        None => "decoder.main".to_string(),
        Some(k) => format!("decoder.aux{k}"),
    }
}

pub(crate) fn init_decoder<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig, prefix: &str) -> Result<()> {
    let stages = cfg.decoder_stages()?;
    let widths = stage_widths(cfg.encoder.embed_dim, stages);
    for i in 0..stages {
        init.conv(&format!("{prefix}.{i}.conv"), widths[i], widths[i + 1], 3);
    }
    // The head starts as a constant positive map so the rectifier is active
    // on every pixel whatever the incoming features.
    init.conv(&format!("{prefix}.head"), widths[stages], 1, 1);
    init.store.get_mut(&format!("{prefix}.head.w"))?.data_mut().fill(0.0);
    init.store.get_mut(&format!("{prefix}.head.b"))?.data_mut()[0] = HEAD_BIAS_INIT;
    Ok(())
}

/// `volume[C, h, w]` to `[1, h * S, w * S]`.
pub fn decode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, prefix: &str, volume: Var) -> Result<Var> {
    let stages = cfg.decoder_stages()?;
    let shape = tape.shape(volume).to_vec();
    let (gh, gw) = cfg.encoder.query_grid();
    if shape != [cfg.encoder.embed_dim, gh, gw] {
        return Err(config_err(format!(
            "volume {shape:?} does not match the {gh}x{gw} token grid"
        )));
    }
    let mut x = volume;
    for i in 0..stages {
        let w = p.var(&format!("{prefix}.{i}.conv.w"))?;
        let b = p.var(&format!("{prefix}.{i}.conv.b"))?;
        x = tape.conv2d(x, w, Some(b), 1, 1)?;
        x = tape.leaky_relu(x, cfg.decoder.leaky_slope)?;
        x = tape.upsample_bilinear(x, 2)?;
    }
    let w = p.var(&format!("{prefix}.head.w"))?;
    let b = p.var(&format!("{prefix}.head.b"))?;
    let y = tape.conv2d(x, w, Some(b), 1, 0)?;
    let y = tape.relu(y)?;
    Ok(tape.scale(y, DENSITY_SCALE)?)
}

/// The last volume feeds the main decoder, earlier ones their auxiliary
/// decoders.
pub fn decode_all(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, volumes: &[Var]) -> Result<(Var, Vec<Var>)> {
    let (&last, rest) = volumes
        .split_last()
        .ok_or_else(|| config_err("decoder needs at least one correlation volume"))?;
    let main = decode(tape, p, cfg, &decoder_prefix(None), last)?;
    let aux = rest
        .iter()
        .enumerate()
        .map(|(k, &v)| decode(tape, p, cfg, &decoder_prefix(Some(k)), v))
        .collect::<Result<_>>()?;
    Ok((main, aux))
}

/// Predicted count, the sum of the map.
pub fn count(y: &Tensor) -> f64 {
    y.sum()
}
