//! Training losses and evaluation metrics.

use mafea_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{data_err, Result};

/// Pixel coordinate `(x, y)`.
pub type Point = [f64; 2];

/// Probability clamp for the log terms of the TBD loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Auxiliary density-map weight.
    pub aux: f64,
    /// Target-background discrimination weight.
    pub tbd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { aux: 0.3, tbd: 0.05 }
    }
}

/// Query tokens split by whether their patch holds a ground-truth point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPartition {
    positive: Vec<bool>,
}

impl TokenPartition {
    pub fn len(&self) -> usize {
        self.positive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positive.is_empty()
    }

    pub fn is_positive(&self, token: usize) -> bool {
        self.positive[token]
    }

    pub fn positive(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.positive[i]).collect()
    }

    pub fn negative(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.positive[i]).collect()
    }
}

/// Marks token `floor(y / S) * w + floor(x / S)` positive for every point.
pub fn partition_tokens(points: &[Point], patch: usize, grid: (usize, usize)) -> Result<TokenPartition> {
    let (gh, gw) = grid;
    let (h, w) = ((gh * patch) as f64, (gw * patch) as f64);
    let mut positive = vec![false; gh * gw];
    for &[x, y] in points {
        if !(0.0..w).contains(&x) || !(0.0..h).contains(&y) {
            return Err(data_err(format!("point ({x}, {y}) outside {w}x{h} image")));
        }
        let tx = (x / patch as f64).floor() as usize;
        let ty = (y / patch as f64).floor() as usize;
        positive[ty * gw + tx] = true;
    }
    Ok(TokenPartition { positive })
}

/// Mean over tokens of `-log(1 - AS_i)` on positives and `-log(AS_i)` on
/// negatives, probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn tbd_loss(tape: &mut Tape, scores: Var, partition: &TokenPartition) -> Result<Var> {
    let n = partition.len();
    if tape.shape(scores) != [n] {
        return Err(data_err(format!(
            "alignment scores {:?} vs {n} tokens",
            tape.shape(scores)
        )));
    }
    // p_i = AS_i on negatives, 1 - AS_i on positives
    let sign = Tensor::from_fn(&[n], |i| if partition.positive[i] { -1.0 } else { 1.0 });
    let offset = Tensor::from_fn(&[n], |i| if partition.positive[i] { 1.0 } else { 0.0 });
    let sign = tape.constant(sign);
    let offset = tape.constant(offset);
    let p = tape.mul(scores, sign)?;
    let p = tape.add(p, offset)?;
    let logp = tape.log_clamped(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let s = tape.sum(logp)?;
    Ok(tape.scale(s, -1.0 / n as f64)?)
}

/// `||y - gt||^2 / max(objects, 1)`
pub fn count_loss(tape: &mut Tape, y: Var, gt: Var, objects: f64) -> Result<Var> {
    let d = tape.sub(y, gt)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / objects.max(1.0))?)
}

/// Sum of object-normalised squared errors of the intermediate maps.
pub fn aux_loss(tape: &mut Tape, intermediates: &[Var], gt: Var, objects: f64) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &y in intermediates {
        let l = count_loss(tape, y, gt, objects)?;
        acc = tape.add(acc, l)?;
    }
    Ok(acc)
}

/// `count + aux * w.aux + tbd * w.tbd`
pub fn total_loss(tape: &mut Tape, count: Var, aux: Var, tbd: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(aux, w.aux)?;
    let t = tape.scale(tbd, w.tbd)?;
    let s = tape.add(count, a)?;
    Ok(tape.add(s, t)?)
}

/// Same weighting on plain values.
pub fn total_loss_value(count: f64, aux: f64, tbd: f64, w: &LossWeights) -> f64 {
    count + aux * w.aux + tbd * w.tbd
}

pub fn mae_rmse(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(data_err(format!(
            "cannot score {} predictions against {} targets",
            pred.len(),
            gt.len()
        )));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        abs += (p - g).abs();
        sq += (p - g) * (p - g);
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Binary pixel masks, `target` is the union of point boxes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub height: usize,
    pub width: usize,
    pub target: Vec<bool>,
}

impl RegionMasks {
    pub fn target_pixels(&self) -> usize {
        self.target.iter().filter(|&&t| t).count()
    }

    pub fn nontarget_pixels(&self) -> usize {
        self.target.len() - self.target_pixels()
    }
}

/// Expands every point into a box of the largest exemplar width and height
/// (each taken independently) centred on it, clipped to the image.
pub fn region_masks(points: &[Point], boxes: &[[f64; 2]], image: [usize; 2]) -> RegionMasks {
    let [h, w] = image;
    let bw = boxes.iter().map(|b| b[0]).fold(0.0, f64::max);
    let bh = boxes.iter().map(|b| b[1]).fold(0.0, f64::max);
    let mut target = vec![false; h * w];
    let span = |c: f64, size: f64, n: usize| {
        let lo = (c - size / 2.0).round();
        let hi = lo + size.round();
        (lo.max(0.0) as usize, hi.clamp(0.0, n as f64) as usize)
    };
    for &[x, y] in points {
        let (x0, x1) = span(x, bw, w);
        let (y0, y1) = span(y, bh, h);
        for row in y0..y1 {
            target[row * w + x0..row * w + x1.max(x0)].fill(true);
        }
    }
    RegionMasks {
        height: h,
        width: w,
        target,
    }
}

/// `(target, non-target)` mass of a `[1, H, W]` or `[H, W]` map.
pub fn region_counts(map: &Tensor, masks: &RegionMasks) -> Result<(f64, f64)> {
    if map.numel() != masks.target.len() {
        return Err(data_err(format!(
            "map {:?} vs {}x{} masks",
            map.shape(),
            masks.height,
            masks.width
        )));
    }
    let (mut t, mut n) = (0.0, 0.0);
    for (&v, &m) in map.data().iter().zip(&masks.target) {
        if m {
            t += v;
        } else {
            n += v;
        }
    }
    Ok((t, n))
}

/// Predicted and ground-truth counts per region for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionCounts {
    pub pred_target: f64,
    pub pred_nontarget: f64,
    pub gt_target: f64,
    pub gt_nontarget: f64,
}

pub fn region_eval(pred: &Tensor, gt: &Tensor, masks: &RegionMasks) -> Result<RegionCounts> {
    if pred.shape() != gt.shape() {
        return Err(data_err(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let (pred_target, pred_nontarget) = region_counts(pred, masks)?;
    let (gt_target, gt_nontarget) = region_counts(gt, masks)?;
    Ok(RegionCounts {
        pred_target,
        pred_nontarget,
        gt_target,
        gt_nontarget,
    })
}

/// Scores for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleScore {
    pub pred: f64,
    pub gt: f64,
    pub regions: Option<RegionCounts>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<RegionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nontarget: Option<RegionReport>,
}

impl EvalReport {
    /// Aggregates per-image scores. Region sub-reports are present only when
    /// every score carries region counts.
    pub fn from_scores(scores: &[SampleScore]) -> Result<Self> {
        let pred: Vec<f64> = scores.iter().map(|s| s.pred).collect();
        let gt: Vec<f64> = scores.iter().map(|s| s.gt).collect();
        let (mae, rmse) = mae_rmse(&pred, &gt)?;
        let regions: Option<Vec<RegionCounts>> = scores.iter().map(|s| s.regions).collect();
        let (target, nontarget) = match regions {
            Some(r) => {
                let pt: Vec<f64> = r.iter().map(|c| c.pred_target).collect();
                let gt_t: Vec<f64> = r.iter().map(|c| c.gt_target).collect();
                let pn: Vec<f64> = r.iter().map(|c| c.pred_nontarget).collect();
                let gn: Vec<f64> = r.iter().map(|c| c.gt_nontarget).collect();
                let (tm, tr) = mae_rmse(&pt, &gt_t)?;
                let (nm, nr) = mae_rmse(&pn, &gn)?;
                (
                    Some(RegionReport { mae: tm, rmse: tr }),
                    Some(RegionReport { mae: nm, rmse: nr }),
                )
            }
            None => (None, None),
        };
        Ok(Self {
            mae,
            rmse,
            n: scores.len(),
            target,
            nontarget,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
