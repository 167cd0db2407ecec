//! Patch embedding and the mutual-relation encoder.
//!
//! Each layer refines the query stream `z_Q` and the exemplar stream
//! `[z_E; z_B]` with self-attention inside each stream plus bidirectional
//! cross-attention between them, summed into one residual update:
//!
//! ```text
//! z_Q     <- z_Q     + MHA(Q_Q, K_Q, V_Q)     + MHA(Q_Q, K_EB, V_EB)
//! z_EB    <- z_EB    + MHA(Q_EB, K_EB, V_EB)  + MHA(Q_EB, K_Q, V_Q)
//! ```
//!
//! followed by a feed-forward sublayer shared by both streams. The alignment
//! score of query token `i` is the attention mass it puts on the background
//! token inside `MHA(Q_Q, K_EB, V_EB)`.

use mafea_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{config_err, data_err, Result};
use crate::layers::{ffn, linear, norm};
use crate::params::{Bound, Init};

/// Splits `image[C, H, W]` into `S x S` patches.
///
/// Patches are listed row-major over the patch grid; each row flattens one
/// patch channel-major, then row, then column.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(data_err(format!("image must be [C, H, W], got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(data_err(format!("image {h}x{w} not divisible into {patch}x{patch} patches")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * row);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (ch * h + y) * w + px * patch;
                    out.extend_from_slice(&src[start..start + patch]);
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, row], out)?)
}

/// `patches . projection + bias + position`.
pub fn embed(tape: &mut Tape, patches: Var, proj_w: Var, proj_b: Var, position: Var) -> Result<Var> {
    let z = tape.matmul(patches, proj_w)?;
    let z = tape.add_bias(z, proj_b)?;
    Ok(tape.add(z, position)?)
}

/// Token streams between encoder layers.
#[derive(Clone, Copy, Debug)]
pub struct TokenState {
    pub query: Var,
    pub exemplar: Var,
    pub background: Option<Var>,
    pub layer: usize,
}

/// Output of one multi-head attention block.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Var,
    /// Row-stochastic attention weights, one `[a, b]` matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention over `heads` column groups of already
/// projected `q[a, C]`, `k[b, C]`, `v[b, C]`, heads concatenated and passed
/// through the output projection.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    out_w: Var,
    out_b: Var,
) -> Result<Attention> {
    let c = tape.shape(q)[1];
    if heads == 0 || c % heads != 0 {
        return Err(config_err(format!("{heads} heads do not divide width {c}")));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d, d)?,
                tape.slice_cols(k, h * d, d)?,
                tape.slice_cols(v, h * d, d)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, scale)?;
        let a = tape.softmax(logits, 1)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let y = tape.matmul(cat, out_w)?;
    let output = tape.add_bias(y, out_b)?;
    Ok(Attention { output, weights })
}

/// Mean over heads of the attention mass the last `background` keys receive,
/// one value per query row. `weights` are the per-head matrices of the
/// query-to-`[exemplar; background]` attention.
pub fn background_mass(tape: &mut Tape, weights: &[Var], background: usize) -> Result<Var> {
    let mut per_head = Vec::with_capacity(weights.len());
    for &w in weights {
        let [rows, cols] = tape.shape(w)[..] else { unreachable!() };
        let col = tape.slice_cols(w, cols - background, background)?;
        let col = if background == 1 {
            col
        } else {
            let ones = tape.constant(Tensor::ones(&[background, 1]));
            tape.matmul(col, ones)?
        };
        per_head.push(tape.reshape(col, &[rows])?);
    }
    let mut acc = per_head[0];
    for &h in &per_head[1..] {
        acc = tape.add(acc, h)?;
    }
    if per_head.len() == 1 {
        Ok(acc)
    } else {
        Ok(tape.scale(acc, 1.0 / per_head.len() as f64)?)
    }
}

/// Alignment scores `AS[N^Q]` from projected queries and keys: the softmax
/// mass of each query row on the background keys, averaged over heads.
pub fn alignment_scores(tape: &mut Tape, q_query: Var, k_exemplar: Var, k_background: Var, heads: usize) -> Result<Var> {
    if tape.shape(k_exemplar)[0] == 0 {
        return Err(data_err("alignment scores need at least one exemplar key"));
    }
    let c = tape.shape(q_query)[1];
    if heads == 0 || c % heads != 0 {
        return Err(config_err(format!("{heads} heads do not divide width {c}")));
    }
    let nb = tape.shape(k_background)[0];
    let keys = tape.concat_rows(&[k_exemplar, k_background])?;
    let d = c / heads;
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q_query, h * d, d)?;
        let kh = tape.slice_cols(keys, h * d, d)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
        weights.push(tape.softmax(logits, 1)?);
    }
    background_mass(tape, &weights, nb)
}

/// Background share of one query token given its raw logits against the
/// exemplar and background keys. A background logit of `-inf` yields 0.
pub fn alignment_from_logits(exemplar: &[f64], background: &[f64]) -> f64 {
    let max = exemplar
        .iter()
        .chain(background)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let bg: f64 = background.iter().map(|l| (l - max).exp()).sum();
    let ex: f64 = exemplar.iter().map(|l| (l - max).exp()).sum();
    bg / (bg + ex)
}

pub(crate) fn init_encoder<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let e = &cfg.encoder;
    let c = e.embed_dim;
    let patch_len = 3 * e.patch_size * e.patch_size;
    init.linear("embed.proj", patch_len, c);
    init.embedding("embed.pos_query", &[e.query_tokens(), c]);
    init.embedding("embed.pos_exemplar", &[e.tokens_per_exemplar(), c]);
    if cfg.variant.bt {
        init.embedding("encoder.background", &[1, c]);
    }
    if e.zero_shot {
        init.embedding("encoder.pseudo_exemplars", &[e.exemplar_tokens(), c]);
    }
    for l in 0..e.layers {
        init.norm(&format!("encoder.{l}.norm_q"), c);
        init.norm(&format!("encoder.{l}.norm_e"), c);
        for side in ["query", "exemplar"] {
            for m in ["q", "k", "v", "o"] {
                init.linear(&format!("encoder.{l}.{side}.{m}"), c, c);
            }
        }
        init.norm(&format!("encoder.{l}.norm_ffn"), c);
        init.linear(&format!("encoder.{l}.ffn.fc1"), c, c * e.mlp_ratio);
        init.linear(&format!("encoder.{l}.ffn.fc2"), c * e.mlp_ratio, c);
    }
    init.norm("encoder.norm_out", c);
}

struct Projections {
    q: Var,
    k: Var,
    v: Var,
}

fn project(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Projections> {
    Ok(Projections {
        q: linear(tape, p, &format!("{prefix}.q"), x)?,
        k: linear(tape, p, &format!("{prefix}.k"), x)?,
        v: linear(tape, p, &format!("{prefix}.v"), x)?,
    })
}

fn attend(tape: &mut Tape, p: &Bound, out: &str, q: Var, kv: &Projections, heads: usize) -> Result<Attention> {
    let w = p.var(&format!("{out}.w"))?;
    let b = p.var(&format!("{out}.b"))?;
    multi_head_attention(tape, q, kv.k, kv.v, heads, w, b)
}

/// One mutual-relation layer. Returns the updated streams and, when the
/// background token is present, the layer's alignment scores `[N^Q]`.
pub fn mrm_layer(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, state: TokenState) -> Result<(TokenState, Option<Var>)> {
    let l = state.layer;
    let heads = cfg.encoder.heads;
    let n_e = tape.shape(state.exemplar)[0];

    let side = match state.background {
        Some(b) => tape.concat_rows(&[state.exemplar, b])?,
        None => state.exemplar,
    };
    let zq_n = norm(tape, p, &format!("encoder.{l}.norm_q"), state.query)?;
    let ze_n = norm(tape, p, &format!("encoder.{l}.norm_e"), side)?;
    let pq = project(tape, p, &format!("encoder.{l}.query"), zq_n)?;
    let pe = project(tape, p, &format!("encoder.{l}.exemplar"), ze_n)?;
    let out_q = format!("encoder.{l}.query.o");
    let out_e = format!("encoder.{l}.exemplar.o");

    let self_q = attend(tape, p, &out_q, pq.q, &pq, heads)?;
    let self_e = attend(tape, p, &out_e, pe.q, &pe, heads)?;
    let mut zq = tape.add(state.query, self_q.output)?;
    let mut ze = tape.add(side, self_e.output)?;

    let mut alignment = None;
    if cfg.variant.mrm {
        let cross_q = attend(tape, p, &out_q, pq.q, &pe, heads)?;
        let cross_e = attend(tape, p, &out_e, pe.q, &pq, heads)?;
        zq = tape.add(zq, cross_q.output)?;
        ze = tape.add(ze, cross_e.output)?;
        if state.background.is_some() {
            alignment = Some(background_mass(tape, &cross_q.weights, 1)?);
        }
    }

    let ffn_norm = format!("encoder.{l}.norm_ffn");
    let ffn_name = format!("encoder.{l}.ffn");
    let hq = norm(tape, p, &ffn_norm, zq)?;
    let hq = ffn(tape, p, &ffn_name, hq)?;
    let zq = tape.add(zq, hq)?;
    let he = norm(tape, p, &ffn_norm, ze)?;
    let he = ffn(tape, p, &ffn_name, he)?;
    let ze = tape.add(ze, he)?;

    let (exemplar, background) = match state.background {
        Some(_) => (tape.slice_rows(ze, 0, n_e)?, Some(tape.slice_rows(ze, n_e, 1)?)),
        None => (ze, None),
    };
    Ok((
        TokenState {
            query: zq,
            exemplar,
            background,
            layer: l + 1,
        },
        alignment,
    ))
}

/// Encoder output after the final normalisation.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[N^Q, C]`
    pub query: Var,
    /// `[N^E, C]`, exemplars concatenated in input order.
    pub exemplar: Var,
    /// Alignment scores per layer, empty without the background token.
    pub alignment: Vec<Var>,
}

/// Embeds the query and exemplar images and stacks a layer state.
pub fn embed_inputs(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, query: &Tensor, exemplars: &[Tensor]) -> Result<TokenState> {
    let e = &cfg.encoder;
    let [qh, qw] = e.query_size;
    if query.shape() != [3, qh, qw] {
        return Err(data_err(format!(
            "query image {:?}, expected [3, {qh}, {qw}]",
            query.shape()
        )));
    }
    let proj_w = p.var("embed.proj.w")?;
    let proj_b = p.var("embed.proj.b")?;
    let patches = tape.constant(patchify(query, e.patch_size)?);
    let pos_q = p.var("embed.pos_query")?;
    let zq = embed(tape, patches, proj_w, proj_b, pos_q)?;

    let ze = if e.zero_shot {
        p.var("encoder.pseudo_exemplars")?
    } else {
        if e.shots == 0 {
            return Err(config_err("no exemplars and zero-shot mode is off"));
        }
        if exemplars.len() < e.shots {
            return Err(data_err(format!(
                "{} exemplars provided, {} required",
                exemplars.len(),
                e.shots
            )));
        }
        let [eh, ew] = e.exemplar_size;
        let mut rows = Vec::with_capacity(e.shots);
        for ex in &exemplars[..e.shots] {
            if ex.shape() != [3, eh, ew] {
                return Err(data_err(format!(
                    "exemplar image {:?}, expected [3, {eh}, {ew}]",
                    ex.shape()
                )));
            }
            rows.push(tape.constant(patchify(ex, e.patch_size)?));
        }
        let patches = tape.concat_rows(&rows)?;
        let pos_e = p.var("embed.pos_exemplar")?;
        let pos = tape.concat_rows(&vec![pos_e; e.shots])?;
        embed(tape, patches, proj_w, proj_b, pos)?
    };
    let background = if cfg.variant.bt {
        Some(p.var("encoder.background")?)
    } else {
        None
    };
    Ok(TokenState {
        query: zq,
        exemplar: ze,
        background,
        layer: 0,
    })
}

/// Full encoder: embedding, `L` mutual-relation layers, final normalisation.
pub fn encode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, query: &Tensor, exemplars: &[Tensor]) -> Result<Encoded> {
    let mut state = embed_inputs(tape, p, cfg, query, exemplars)?;
    let mut alignment = Vec::new();
    for _ in 0..cfg.encoder.layers {
        let (next, scores) = mrm_layer(tape, p, cfg, state)?;
        state = next;
        alignment.extend(scores);
    }
    let query = norm(tape, p, "encoder.norm_out", state.query)?;
    let exemplar = norm(tape, p, "encoder.norm_out", state.exemplar)?;
    Ok(Encoded {
        query,
        exemplar,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_token_counts() {
        let img = Tensor::zeros(&[3, 512, 512]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[1024, 768]);
        let img = Tensor::zeros(&[3, 48, 48]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[9, 768]);
        let img = Tensor::zeros(&[3, 64, 64]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[64, 192]);
        assert!(patchify(&Tensor::zeros(&[3, 60, 64]), 8).is_err());
    }

    #[test]
    fn patchify_layout() {
        // 1 channel, 4x4 image, 2x2 patches
        let img = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..16], &[10.0, 11.0, 14.0, 15.0]);
        // channel-major within a patch
        let img = Tensor::from_fn(&[2, 2, 2], |i| i as f64);
        assert_eq!(patchify(&img, 2).unwrap().data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
    }

    #[test]
    fn alignment_from_logits_cases() {
        assert_eq!(alignment_from_logits(&[0.0; 3], &[0.0]), 0.25);
        assert_eq!(alignment_from_logits(&[1.0, 2.0], &[f64::NEG_INFINITY]), 0.0);
        assert!(alignment_from_logits(&[0.0; 27], &[20.0]) > 0.99);
    }
}
