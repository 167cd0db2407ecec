//! Object prototypes from exemplar boxes and features, iterative adaptation
//! against the query, and correlation with the query feature map.
//!
//! Prototype token sets are `[n * s * s, C]` matrices: prototype `i` owns
//! rows `i * s * s .. (i + 1) * s * s`, row-major over its `s x s` grid.

use mafea_tensor::{Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::{multi_head_attention, Encoded};
use crate::error::{config_err, data_err, Result};
use crate::layers::{ffn, linear, norm};
use crate::params::{Bound, Init};

/// `(w / W, h / H)` through `fc1 -> gelu -> fc2`, repeated over the `s x s`
/// grid of each prototype.
pub fn shape_embedding(tape: &mut Tape, p: &Bound, boxes: &[[f64; 2]], image: [usize; 2], s: usize) -> Result<Var> {
    if boxes.is_empty() {
        return Err(data_err("shape embedding needs at least one box"));
    }
    let [ih, iw] = image;
    let mut input = Vec::with_capacity(boxes.len() * 2);
    for &[w, h] in boxes {
        if !(w > 0.0 && h > 0.0) {
            return Err(data_err(format!("box {w}x{h} is not positive")));
        }
        input.push(w / iw as f64);
        input.push(h / ih as f64);
    }
    let x = tape.constant(Tensor::new(&[boxes.len(), 2], input)?);
    let h = linear(tape, p, "relation.shape.fc1", x)?;
    let h = tape.gelu(h)?;
    let e = linear(tape, p, "relation.shape.fc2", h)?;
    Ok(tape.repeat_rows(e, s * s)?)
}

/// Adaptive average pooling of one exemplar's square token grid `[g*g, C]`
/// to `[s*s, C]`.
pub fn appearance_pooling(tape: &mut Tape, tokens: Var, s: usize) -> Result<Var> {
    let [n, c] = tape.shape(tokens)[..] else {
        return Err(data_err("exemplar tokens must be a matrix"));
    };
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || g == 0 {
        return Err(data_err(format!("{n} exemplar tokens do not form a square grid")));
    }
    if g == s {
        return Ok(tokens);
    }
    let t = tape.transpose(tokens)?;
    let t = tape.reshape(t, &[c, g, g])?;
    let pooled = tape.adaptive_avg_pool2d(t, s, s)?;
    let pooled = tape.reshape(pooled, &[c, s * s])?;
    Ok(tape.transpose(pooled)?)
}

/// Runs `K` adaptation iterations from `init`, returning every iteration's
/// prototype tokens.
pub fn iterative_adaptation(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, init: Var, query: Var) -> Result<Vec<Var>> {
    let heads = cfg.relation.heads;
    let mut z = init;
    let mut out = Vec::with_capacity(cfg.relation.iterations);
    for k in 0..cfg.relation.iterations {
        let pre = format!("relation.{k}");

        let h = norm(tape, p, &format!("{pre}.norm_self"), z)?;
        let q = linear(tape, p, &format!("{pre}.self.q"), h)?;
        let kk = linear(tape, p, &format!("{pre}.self.k"), h)?;
        let v = linear(tape, p, &format!("{pre}.self.v"), h)?;
        let (ow, ob) = (p.var(&format!("{pre}.self.o.w"))?, p.var(&format!("{pre}.self.o.b"))?);
        let a = multi_head_attention(tape, q, kk, v, heads, ow, ob)?;
        z = tape.add(z, a.output)?;

        let h = norm(tape, p, &format!("{pre}.norm_cross"), z)?;
        let q = linear(tape, p, &format!("{pre}.cross.q"), h)?;
        let kk = linear(tape, p, &format!("{pre}.cross.k"), query)?;
        let v = linear(tape, p, &format!("{pre}.cross.v"), query)?;
        let (ow, ob) = (p.var(&format!("{pre}.cross.o.w"))?, p.var(&format!("{pre}.cross.o.b"))?);
        let a = multi_head_attention(tape, q, kk, v, heads, ow, ob)?;
        z = tape.add(z, a.output)?;

        let h = norm(tape, p, &format!("{pre}.norm_ffn"), z)?;
        let h = ffn(tape, p, &format!("{pre}.ffn"), h)?;
        z = tape.add(z, h)?;
        out.push(z);
    }
    Ok(out)
}

/// Per-channel cross-correlation of `map[C, h, w]` with one prototype
/// `[s*s, C]`, zero padding `(s - 1) / 2`.
pub fn depthwise_correlate(tape: &mut Tape, map: Var, prototype: Var) -> Result<Var> {
    let [n, c] = tape.shape(prototype)[..] else {
        return Err(data_err("prototype must be a matrix"));
    };
    let s = (n as f64).sqrt().round() as usize;
    if s * s != n || s % 2 == 0 {
        return Err(config_err(format!("prototype of {n} tokens is not an odd square grid")));
    }
    let k = tape.transpose(prototype)?;
    let k = tape.reshape(k, &[c, s, s])?;
    Ok(tape.depthwise_conv2d(map, k)?)
}

/// Elementwise maximum over the prototypes' similarity maps, divided by
/// `s^2 sqrt(C)`.
pub fn prototype_match(tape: &mut Tape, map: Var, prototypes: Var, s: usize) -> Result<Var> {
    let [rows, c] = tape.shape(prototypes)[..] else {
        return Err(data_err("prototypes must be a matrix"));
    };
    let per = s * s;
    if rows == 0 || per == 0 || rows % per != 0 {
        return Err(data_err(format!("{rows} prototype tokens for {s}x{s} prototypes")));
    }
    let mut maps = Vec::with_capacity(rows / per);
    for i in 0..rows / per {
        let proto = tape.slice_rows(prototypes, i * per, per)?;
        maps.push(depthwise_correlate(tape, map, proto)?);
    }
    let m = if maps.len() == 1 { maps[0] } else { tape.max_n(&maps)? };
    Ok(tape.scale(m, 1.0 / (per as f64 * (c as f64).sqrt()))?)
}

pub(crate) fn init_relation<R: Rng>(init: &mut Init<'_, R>, cfg: &ModelConfig) {
    let c = cfg.encoder.embed_dim;
    let r = &cfg.relation;
    if !cfg.encoder.zero_shot {
        init.linear("relation.shape.fc1", 2, c);
        init.linear("relation.shape.fc2", c, c);
    }
    for k in 0..r.iterations {
        for n in ["norm_self", "norm_cross", "norm_ffn"] {
            init.norm(&format!("relation.{k}.{n}"), c);
        }
        for att in ["self", "cross"] {
            for m in ["q", "k", "v", "o"] {
                init.linear(&format!("relation.{k}.{att}.{m}"), c, c);
            }
        }
        init.linear(&format!("relation.{k}.ffn.fc1"), c, c * r.mlp_ratio);
        init.linear(&format!("relation.{k}.ffn.fc2"), c * r.mlp_ratio, c);
    }
}

/// Correlation volumes `[C, h, w]`, one per adaptation iteration.
pub fn correlation_volumes(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, enc: &Encoded, boxes: &[[f64; 2]]) -> Result<Vec<Var>> {
    let e = &cfg.encoder;
    let s = cfg.relation.prototype_size;
    let c = e.embed_dim;
    let tpe = e.tokens_per_exemplar();
    let n = e.exemplar_count();

    let mut appearance = Vec::with_capacity(n);
    for i in 0..n {
        let tokens = tape.slice_rows(enc.exemplar, i * tpe, tpe)?;
        appearance.push(appearance_pooling(tape, tokens, s)?);
    }
    let mut init = if n == 1 { appearance[0] } else { tape.concat_rows(&appearance)? };
    if !e.zero_shot {
        if boxes.len() < n {
            return Err(data_err(format!("{} boxes provided, {n} required", boxes.len())));
        }
        let shape = shape_embedding(tape, p, &boxes[..n], e.query_size, s)?;
        init = tape.add(init, shape)?;
    }

    let sets = iterative_adaptation(tape, p, cfg, init, enc.query)?;
    let (gh, gw) = e.query_grid();
    let map = tape.transpose(enc.query)?;
    let map = tape.reshape(map, &[c, gh, gw])?;
    sets.into_iter()
        .map(|protos| prototype_match(tape, map, protos, s))
        .collect()
}
