//! Training criteria built on the tape: soft-target cross entropy plus
//! sample-wise soft Dice for segmentation, and a one-versus-all BCE on the
//! foreground probability for the outer objective. Scalar (non-graph)
//! variants back the hand-arithmetic tests.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndtensor::{Graph, NodeId};

/// Clamp bound applied to probabilities before any logarithm.
pub const PROB_EPS: f64 = 1e-7;
/// Smoothing constant in the soft Dice fraction.
pub const DICE_SMOOTH: f64 = 1e-5;

/// A differentiable scalar plus its per-term values for logging.
/// The breakdown entries sum to the node's value (within 1e-9).
#[derive(Debug, Clone)]
pub struct LossValue {
    pub node: NodeId,
    pub breakdown: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn total(&self, g: &Graph) -> f64 {
        g.value(self.node).item()
    }
}

fn expect_batch4(g: &Graph, id: NodeId, what: &str) -> Result<[usize; 4]> {
    match g.value(id).shape() {
        [n, k, h, w] => Ok([*n, *k, *h, *w]),
        s => Err(Error::shape("loss", format!("{what} must be [N,K,H,W], got {s:?}"))),
    }
}

/// Segmentation criterion: CE with soft targets plus sample-wise soft Dice,
/// equally weighted.
///
/// CE = -mean over pixels of sum_j target_j * log p_j, with p the
/// channel softmax of the logits clamped to [1e-7, 1 - 1e-7] before the
/// log. Dice term = 1 - mean over samples and classes of
/// (2*sum p*t + s) / (sum p + sum t + s), s = 1e-5, sums over pixels.
///
/// `target` is a graph node so that learned (differentiable) targets and
/// constant leaves flow through the identical computation.
pub fn seg_loss(g: &mut Graph, logits: NodeId, target: NodeId) -> Result<LossValue> {
    let [n, k, h, w] = expect_batch4(g, logits, "logits")?;
    let tshape = expect_batch4(g, target, "target")?;
    if tshape != [n, k, h, w] {
        return Err(Error::shape(
            "seg_loss",
            format!("logits [{n},{k},{h},{w}] vs target {tshape:?}"),
        ));
    }

    let p = g.softmax_channels(logits)?;

    let pc = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let lg = g.log(pc);
    let weighted = g.mul(target, lg)?;
    let total_log = g.sum(weighted);
    let ce = g.mul_scalar(total_log, -1.0 / (n * h * w) as f64);

    let inter = {
        let prod = g.mul(p, target)?;
        g.sum_spatial(prod)?
    };
    let psum = g.sum_spatial(p)?;
    let tsum = g.sum_spatial(target)?;
    let num = {
        let twice = g.mul_scalar(inter, 2.0);
        g.add_scalar(twice, DICE_SMOOTH)
    };
    let den = {
        let s = g.add(psum, tsum)?;
        g.add_scalar(s, DICE_SMOOTH)
    };
    let frac = g.div(num, den)?;
    let mean_frac = g.mean(frac);
    let dice = g.one_minus(mean_frac);

    let node = g.add(ce, dice)?;
    let mut breakdown = BTreeMap::new();
    breakdown.insert("ce".to_string(), g.value(ce).item());
    breakdown.insert("dice".to_string(), g.value(dice).item());
    Ok(LossValue { node, breakdown })
}

/// Outer objective: mean binary cross entropy between the softmax
/// probability of each listed foreground channel and its 0/1 target.
///
/// `channels` picks the foreground logit channels (strictly increasing);
/// `y` carries one target channel per entry, in the same order.
pub fn roi_loss(
    g: &mut Graph,
    logits: NodeId,
    y: NodeId,
    channels: &[usize],
) -> Result<LossValue> {
    let [n, k, h, w] = expect_batch4(g, logits, "logits")?;
    if k < 2 {
        return Err(Error::invalid(format!("roi_loss needs K >= 2 channels, got {k}")));
    }
    if channels.is_empty() {
        return Err(Error::invalid("roi_loss needs at least one foreground channel"));
    }
    if channels.windows(2).any(|p| p[1] <= p[0]) || *channels.last().unwrap() >= k {
        return Err(Error::invalid(format!(
            "foreground channels {channels:?} must be strictly increasing and < {k}"
        )));
    }
    let yshape = expect_batch4(g, y, "roi target")?;
    if yshape != [n, channels.len(), h, w] {
        return Err(Error::shape(
            "roi_loss",
            format!("target {yshape:?} vs expected [{n},{},{h},{w}]", channels.len()),
        ));
    }

    let p = g.softmax_channels(logits)?;
    let picked = if channels.len() == 1 {
        g.slice_channels(p, channels[0], channels[0] + 1)?
    } else {
        let parts: Vec<NodeId> = channels
            .iter()
            .map(|&c| g.slice_channels(p, c, c + 1))
            .collect::<Result<Vec<_>>>()?;
        g.concat_channels(&parts)?
    };
    let pc = g.clamp(picked, PROB_EPS, 1.0 - PROB_EPS);

    let log_p = g.log(pc);
    let pos = g.mul(y, log_p)?;
    let one_minus_p = g.one_minus(pc);
    let log_q = g.log(one_minus_p);
    let one_minus_y = g.one_minus(y);
    let neg = g.mul(one_minus_y, log_q)?;
    let both = g.add(pos, neg)?;
    let m = g.mean(both);
    let node = g.mul_scalar(m, -1.0);

    let mut breakdown = BTreeMap::new();
    breakdown.insert("roi_bce".to_string(), g.value(node).item());
    Ok(LossValue { node, breakdown })
}

fn clampp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Binary cross entropy of one probability against a 0/1 (or soft) target.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = clampp(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Cross entropy of one probability vector against a soft target.
pub fn ce(p: &[f64], y: &[f64]) -> f64 {
    assert_eq!(p.len(), y.len());
    -p.iter().zip(y).map(|(pi, yi)| yi * clampp(*pi).ln()).sum::<f64>()
}

/// Soft Dice coefficient (not loss) of two same-length vectors.
pub fn soft_dice(p: &[f64], y: &[f64]) -> f64 {
    assert_eq!(p.len(), y.len());
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let ps: f64 = p.iter().sum();
    let ys: f64 = y.iter().sum();
    (2.0 * inter + DICE_SMOOTH) / (ps + ys + DICE_SMOOTH)
}
