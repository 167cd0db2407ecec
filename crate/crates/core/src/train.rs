//! Training loop, evaluation, checkpoints and map export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mafea_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AblationVariant, TrainConfig};
use crate::error::{config_err, data_err, MafeaError, Result};
use crate::model::Mafea;
use crate::objectives::{region_eval, region_masks, EvalReport, SampleScore};
use crate::optim::{clip_grad_norm, AdamW, Grads};
use crate::params::ParamStore;
use crate::scenes::{CountingSample, Dataset};

pub const CHECKPOINT_FILE: &str = "checkpoint.mtnsa";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "MAFEA_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-batch totals over the epoch.
    pub loss: f64,
    pub count_loss: f64,
    pub aux_loss: f64,
    pub tbd_loss: f64,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

fn check_finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(MafeaError::Numeric(format!("{what} became {v} in epoch {epoch}")))
    }
}

/// Trains a fresh model on `data.train`. Initialisation and the per-epoch
/// sample order are derived from `cfg.seed`.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(Mafea, TrainLog)> {
    train_with(cfg, data, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(cfg: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<(Mafea, TrainLog)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(data_err("training split is empty"));
    }
    let mut model = Mafea::new(cfg.model.clone(), cfg.seed)?;
    let weights = cfg.effective_loss();
    let mut opt = AdamW::new(cfg.optim.clone());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.optim.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut sums = [0.0; 5];
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let objects: usize = batch.iter().map(|&i| data.train[i].count()).sum();
            let objects = (objects as f64).max(1.0);
            let mut grads: Option<Grads> = None;
            let mut terms = [0.0; 4];
            for &i in batch {
                let sample = &data.train[i];
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape, true);
                let fwd = model.forward(&mut tape, &p, sample)?;
                let l = model.loss(&mut tape, &fwd, sample, objects, batch.len(), &weights)?;
                for (t, v) in terms.iter_mut().zip([l.total, l.count, l.aux, l.tbd]) {
                    *t += tape.value(v).item();
                }
                let g = tape.backward(l.total)?;
                let g = p.collect_grads(&g, &model.params);
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (name, t) in acc.iter_mut() {
                            let add = &g[name];
                            t.data_mut().iter_mut().zip(add.data()).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            check_finite(terms[0], "training loss", epoch)?;
            let mut grads = grads.expect("batches are non-empty");
            let norm = check_finite(clip_grad_norm(&mut grads, cfg.optim.clip_norm), "gradient norm", epoch)?;
            opt.step(&mut model.params, &grads, lr)?;
            for (s, v) in sums.iter_mut().zip([terms[0], terms[1], terms[2], terms[3], norm]) {
                *s += v;
            }
            batches += 1;
        }
        if model.params.iter().any(|(_, t)| !t.all_finite()) {
            return Err(MafeaError::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let eval = if !data.eval.is_empty() && (due || last) {
            Some(evaluate(&model, &data.eval, true)?)
        } else {
            None
        };
        let n = batches as f64;
        let record = EpochRecord {
            epoch,
            lr,
            loss: sums[0] / n,
            count_loss: sums[1] / n,
            aux_loss: sums[2] / n,
            tbd_loss: sums[3] / n,
            grad_norm: sums[4] / n,
            eval,
        };
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok((model, log))
}

/// Thread cap from [`THREADS_ENV`], `None` when unset or unparsable.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Scores one sample.
pub fn score_sample(model: &Mafea, sample: &CountingSample, regions: bool) -> Result<SampleScore> {
    let pred = model.predict(sample)?;
    let regions = if regions {
        let masks = region_masks(&sample.points, &sample.boxes, sample.image_size());
        Some(region_eval(&pred.density, &sample.density, &masks)?)
    } else {
        None
    };
    Ok(SampleScore {
        pred: pred.count,
        gt: sample.count() as f64,
        regions,
    })
}

/// Per-image counts and errors over `samples`, fanned out over at most
/// `MAFEA_THREADS` worker threads. Aggregation follows sample order.
pub fn evaluate(model: &Mafea, samples: &[CountingSample], regions: bool) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(data_err("cannot evaluate on an empty dataset"));
    }
    let threads = thread_cap().unwrap_or_else(rayon::current_num_threads).max(1);
    let scores: Vec<SampleScore> = if threads == 1 {
        samples
            .iter()
            .map(|s| score_sample(model, s, regions))
            .collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| config_err(format!("thread pool: {e}")))?;
        pool.install(|| {
            samples
                .par_iter()
                .map(|s| score_sample(model, s, regions))
                .collect::<Result<_>>()
        })?
    };
    EvalReport::from_scores(&scores)
}

/// Writes `checkpoint.mtnsa`, `config.toml` and `metrics.jsonl` into `dir`.
pub fn save_checkpoint(dir: impl AsRef<Path>, cfg: &TrainConfig, model: &Mafea, log: &TrainLog) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    model.params.save(dir.join(CHECKPOINT_FILE))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    fs::write(dir.join(METRICS_FILE), log.to_jsonl())?;
    Ok(())
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainConfig, Mafea)> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(CONFIG_FILE))
        .map_err(|e| config_err(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
    let cfg = TrainConfig::from_toml(&text)?;
    let path = dir.join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(data_err(format!("{} not found", path.display())));
    }
    let params = ParamStore::load(path)?;
    let model = Mafea::with_params(cfg.model.clone(), params)?;
    Ok((cfg, model))
}

/// Grid values as CSV rows.
pub fn grid_csv(values: &[f64], h: usize, w: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(w).take(h) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// 16-bit binary PGM of `round(v * scale)` clamped to `0..=65535`. The scale
/// is written as a header comment.
pub fn write_pgm(path: impl AsRef<Path>, values: &[f64], h: usize, w: usize, scale: f64) -> Result<()> {
    let mut out = format!("P5\n# scale {scale:e}\n{w} {h}\n65535\n").into_bytes();
    for &v in values.iter().take(h * w) {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Density map as `<stem>.mtnsr` plus a PGM scaled so the peak maps to 65535.
pub fn export_density(dir: impl AsRef<Path>, stem: &str, map: &Tensor) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    mafea_tensor::io::save_tensor(dir.join(format!("{stem}.mtnsr")), map)?;
    let (h, w) = (map.shape()[map.rank() - 2], map.shape()[map.rank() - 1]);
    let peak = map.data().iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { 65535.0 / peak } else { 1.0 };
    write_pgm(dir.join(format!("{stem}.pgm")), map.data(), h, w, scale)
}

/// Alignment maps of one sample: `as.{csv,pgm}` holds the background share
/// per token, `exemplar_mass.{csv,pgm}` its complement. Also writes the
/// predicted density. Returns the alignment grid.
pub fn export_asmap(model: &Mafea, sample: &CountingSample, out: impl AsRef<Path>) -> Result<Tensor> {
    let out = out.as_ref();
    let pred = model.predict(sample)?;
    let alignment = pred
        .alignment
        .ok_or_else(|| config_err("model has no background token, so no alignment scores"))?;
    let (h, w) = (alignment.shape()[0], alignment.shape()[1]);
    let mass = alignment.map(|a| 1.0 - a);
    fs::create_dir_all(out)?;
    fs::write(out.join("as.csv"), grid_csv(alignment.data(), h, w))?;
    fs::write(out.join("exemplar_mass.csv"), grid_csv(mass.data(), h, w))?;
    write_pgm(out.join("as.pgm"), alignment.data(), h, w, 65535.0)?;
    write_pgm(out.join("exemplar_mass.pgm"), mass.data(), h, w, 65535.0)?;
    export_density(out, "density", &pred.density)?;
    Ok(alignment)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub report: EvalReport,
}

pub const ABLATION_HEADER: &str =
    "variant,mrm,bt,tbd,all_mae,all_rmse,target_mae,target_rmse,nontarget_mae,nontarget_rmse";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let v = r.variant;
        let t = r.report.target.map(|t| (t.mae, t.rmse)).unwrap_or((f64::NAN, f64::NAN));
        let n = r.report.nontarget.map(|t| (t.mae, t.rmse)).unwrap_or((f64::NAN, f64::NAN));
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            v.label(),
            v.mrm,
            v.bt,
            v.tbd,
            r.report.mae,
            r.report.rmse,
            t.0,
            t.1,
            n.0,
            n.1
        )
        .expect("writing to a string");
    }
    out
}

/// Trains every ablation variant from `base` with the same seed and scores
/// each on the eval split with region reports.
pub fn run_ablation_suite(base: &TrainConfig, data: &Dataset) -> Result<Vec<AblationRow>> {
    if data.eval.is_empty() {
        return Err(data_err("ablation needs a non-empty eval split"));
    }
    AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let mut cfg = base.clone();
            cfg.model.variant = variant;
            let (model, _) = train(&cfg, data)?;
            Ok(AblationRow {
                variant,
                report: evaluate(&model, &data.eval, true)?,
            })
        })
        .collect()
}
