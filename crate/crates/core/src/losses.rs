//! Top-push ranking losses on Euclidean embedding distances.
//!
//! Every term here is a sum over anchors of a hinge between the hardest
//! positive and the hardest negative distance of that anchor. The three
//! tri-constrained terms differ only in where positives and negatives are
//! drawn from:
//!
//! | term  | anchor   | positives        | negatives        |
//! |-------|----------|------------------|------------------|
//! | cross | gray     | infrared         | infrared         |
//! | intra | gray     | gray (not self)  | gray             |
//! | inter | gray     | infrared         | gray             |
//!
//! plus the mirrored infrared-anchor direction. Gradients are analytic and
//! returned alongside the value so the trainer can back-propagate them into
//! the feature extractor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major embedding matrix with one identity label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(data: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} values cannot hold {} rows of dimension {dim}",
                data.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, data, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() != labels.len() || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        Self::new(rows.concat(), dim, labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Pairwise Euclidean distances between two embedding sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    row_labels: Vec<usize>,
    col_labels: Vec<usize>,
}

impl DistanceMatrix {
    pub fn from_values(values: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("distances must be finite and non-negative".into()));
        }
        Ok(Self {
            rows,
            cols,
            values,
            row_labels: Vec::new(),
            col_labels: Vec::new(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row_labels(&self) -> &[usize] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[usize] {
        &self.col_labels
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn pairwise_distances(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<DistanceMatrix> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!("dimension mismatch: {} vs {}", a.dim, b.dim)));
    }
    let values = a.rows().flat_map(|x| b.rows().map(move |y| euclidean(x, y))).collect();
    Ok(DistanceMatrix {
        rows: a.len(),
        cols: b.len(),
        values,
        row_labels: a.labels.clone(),
        col_labels: b.labels.clone(),
    })
}

/// How the per-anchor positive/negative distances are turned into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletVariant {
    /// `[margin + max positive - min negative]+`
    #[default]
    Hard,
    /// Hinge averaged over every positive/negative pair of the anchor.
    AllTriplets,
    /// `ln(1 + exp(max positive - min negative))`; the margin is unused.
    SoftMargin,
    /// Softmax-weighted positives against softmin-weighted negatives under a
    /// soft margin; the margin is unused.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Plain sum over anchors.
    #[default]
    Sum,
    /// Sum divided by the per-modality anchor count.
    Mean,
}

/// Margins, tradeoffs and mining variant of the ranking objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarginConfig {
    pub cross_margin: f64,
    pub intra_margin: f64,
    pub inter_margin: f64,
    pub intra_weight: f64,
    pub inter_weight: f64,
    pub variant: TripletVariant,
    pub reduction: Reduction,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            cross_margin: 0.5,
            intra_margin: 0.1,
            inter_margin: 0.3,
            intra_weight: 0.1,
            inter_weight: 0.5,
            variant: TripletVariant::Hard,
            reduction: Reduction::Sum,
        }
    }
}

impl MarginConfig {
    /// Default margins with the inter-modality margin raised to 0.9.
    pub fn wide_inter_margin() -> Self {
        Self {
            inter_margin: 0.9,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.cross_margin,
            self.intra_margin,
            self.inter_margin,
            self.intra_weight,
            self.inter_weight,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(
                "margins and tradeoffs must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// The three tri-constrained ranking terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingTerm {
    Cross,
    Intra,
    Inter,
}

/// Loss value with gradients w.r.t. both embedding sets (row-major, same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad_gray: Vec<f64>,
    pub grad_infrared: Vec<f64>,
}

impl LossWithGrad {
    fn zeros(gray: &EmbeddingSet, infrared: &EmbeddingSet) -> Self {
        Self {
            value: 0.0,
            grad_gray: vec![0.0; gray.data.len()],
            grad_infrared: vec![0.0; infrared.data.len()],
        }
    }

    fn scale(&mut self, s: f64) {
        self.value *= s;
        self.grad_gray.iter_mut().for_each(|g| *g *= s);
        self.grad_infrared.iter_mut().for_each(|g| *g *= s);
    }

    fn add_scaled(&mut self, other: &LossWithGrad, s: f64) {
        self.value += s * other.value;
        for (a, b) in self.grad_gray.iter_mut().zip(&other.grad_gray) {
            *a += s * b;
        }
        for (a, b) in self.grad_infrared.iter_mut().zip(&other.grad_infrared) {
            *a += s * b;
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    Gray,
    Infrared,
}

impl Side {
    fn flip(self) -> Side {
        match self {
            Side::Gray => Side::Infrared,
            Side::Infrared => Side::Gray,
        }
    }
}

struct Pair<'a> {
    gray: &'a EmbeddingSet,
    infrared: &'a EmbeddingSet,
}

impl<'a> Pair<'a> {
    fn set(&self, side: Side) -> &'a EmbeddingSet {
        match side {
            Side::Gray => self.gray,
            Side::Infrared => self.infrared,
        }
    }
}

fn grad_of(out: &mut LossWithGrad, side: Side) -> &mut Vec<f64> {
    match side {
        Side::Gray => &mut out.grad_gray,
        Side::Infrared => &mut out.grad_infrared,
    }
}

/// Accumulates `weight * d D(a_i, b_j)` into the gradient buffers.
fn push_distance_grad(
    out: &mut LossWithGrad,
    pair: &Pair<'_>,
    anchor_side: Side,
    anchor: usize,
    other_side: Side,
    other: usize,
    weight: f64,
) {
    if weight == 0.0 {
        return;
    }
    let a = pair.set(anchor_side).row(anchor);
    let b = pair.set(other_side).row(other);
    let d = euclidean(a, b);
    if d == 0.0 {
        // Zero subgradient at coincident points.
        return;
    }
    let dim = a.len();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| weight * (x - y) / d).collect();
    let ga = grad_of(out, anchor_side);
    for (g, v) in ga[anchor * dim..(anchor + 1) * dim].iter_mut().zip(&diff) {
        *g += v;
    }
    let gb = grad_of(out, other_side);
    for (g, v) in gb[other * dim..(other + 1) * dim].iter_mut().zip(&diff) {
        *g -= v;
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// First index attaining the extreme under `better`.
fn first_extreme(cands: &[(usize, f64)], better: impl Fn(f64, f64) -> bool) -> (usize, f64) {
    let mut best = cands[0];
    for &c in &cands[1..] {
        if better(c.1, best.1) {
            best = c;
        }
    }
    best
}

/// Softmax-weighted mean of `values` (use `sign = -1` for softmin) and its
/// derivative w.r.t. each value.
fn soft_weighted(values: &[f64], sign: f64) -> (f64, Vec<f64>) {
    let peak = values.iter().map(|v| sign * v).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = values.iter().map(|v| (sign * v - peak).exp()).collect();
    let z: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|x| x / z).collect();
    let mean: f64 = w.iter().zip(values).map(|(a, b)| a * b).sum();
    let d = w
        .iter()
        .zip(values)
        .map(|(wi, vi)| wi * (1.0 + sign * (vi - mean)))
        .collect();
    (mean, d)
}

/// One direction of a term: anchors on `anchor_side`, positives and
/// negatives drawn from the given sides.
#[allow(clippy::too_many_arguments)]
fn directed_term(
    pair: &Pair<'_>,
    anchor_side: Side,
    pos_side: Side,
    neg_side: Side,
    margin: f64,
    variant: TripletVariant,
    positive_required: bool,
    out: &mut LossWithGrad,
) -> Result<()> {
    let anchors = pair.set(anchor_side);
    let pos_set = pair.set(pos_side);
    let neg_set = pair.set(neg_side);
    for i in 0..anchors.len() {
        let label = anchors.labels[i];
        let a = anchors.row(i);
        let positives: Vec<(usize, f64)> = (0..pos_set.len())
            .filter(|&j| pos_set.labels[j] == label && !(pos_side == anchor_side && j == i))
            .map(|j| (j, euclidean(a, pos_set.row(j))))
            .collect();
        let negatives: Vec<(usize, f64)> = (0..neg_set.len())
            .filter(|&k| neg_set.labels[k] != label)
            .map(|k| (k, euclidean(a, neg_set.row(k))))
            .collect();
        if negatives.is_empty() {
            return Err(Error::MissingCandidate {
                label,
                what: if neg_side == anchor_side {
                    "same-modality negative"
                } else {
                    "cross-modality negative"
                },
            });
        }
        if positives.is_empty() {
            if positive_required {
                return Err(Error::MissingCandidate {
                    label,
                    what: "cross-modality positive",
                });
            }
            continue;
        }
        match variant {
            TripletVariant::Hard | TripletVariant::SoftMargin => {
                let (p, dp) = first_extreme(&positives, |c, b| c > b);
                let (n, dn) = first_extreme(&negatives, |c, b| c < b);
                let (value, slope) = if variant == TripletVariant::Hard {
                    let x = margin + dp - dn;
                    if x > 0.0 {
                        (x, 1.0)
                    } else {
                        (0.0, 0.0)
                    }
                } else {
                    let x = dp - dn;
                    (softplus(x), sigmoid(x))
                };
                out.value += value;
                push_distance_grad(out, pair, anchor_side, i, pos_side, p, slope);
                push_distance_grad(out, pair, anchor_side, i, neg_side, n, -slope);
            }
            TripletVariant::AllTriplets => {
                let count = (positives.len() * negatives.len()) as f64;
                for &(p, dp) in &positives {
                    for &(n, dn) in &negatives {
                        let x = margin + dp - dn;
                        if x > 0.0 {
                            out.value += x / count;
                            push_distance_grad(out, pair, anchor_side, i, pos_side, p, 1.0 / count);
                            push_distance_grad(out, pair, anchor_side, i, neg_side, n, -1.0 / count);
                        }
                    }
                }
            }
            TripletVariant::Weighted => {
                let pd: Vec<f64> = positives.iter().map(|c| c.1).collect();
                let nd: Vec<f64> = negatives.iter().map(|c| c.1).collect();
                let (wp, dwp) = soft_weighted(&pd, 1.0);
                let (wn, dwn) = soft_weighted(&nd, -1.0);
                let x = wp - wn;
                let slope = sigmoid(x);
                out.value += softplus(x);
                for (&(p, _), d) in positives.iter().zip(&dwp) {
                    push_distance_grad(out, pair, anchor_side, i, pos_side, p, slope * d);
                }
                for (&(n, _), d) in negatives.iter().zip(&dwn) {
                    push_distance_grad(out, pair, anchor_side, i, neg_side, n, -slope * d);
                }
            }
        }
    }
    Ok(())
}

fn check_pair(gray: &EmbeddingSet, infrared: &EmbeddingSet) -> Result<()> {
    if gray.dim != infrared.dim {
        return Err(Error::Shape(format!(
            "gray dimension {} differs from infrared dimension {}",
            gray.dim, infrared.dim
        )));
    }
    Ok(())
}

/// Evaluates one ranking term in both directions with its gradient.
pub fn ranking_term(
    term: RankingTerm,
    gray: &EmbeddingSet,
    infrared: &EmbeddingSet,
    margin: f64,
    variant: TripletVariant,
    reduction: Reduction,
) -> Result<LossWithGrad> {
    check_pair(gray, infrared)?;
    let pair = Pair { gray, infrared };
    let mut out = LossWithGrad::zeros(gray, infrared);
    for anchor in [Side::Gray, Side::Infrared] {
        let (pos, neg, required) = match term {
            RankingTerm::Cross => (anchor.flip(), anchor.flip(), true),
            RankingTerm::Intra => (anchor, anchor, false),
            RankingTerm::Inter => (anchor.flip(), anchor, true),
        };
        directed_term(&pair, anchor, pos, neg, margin, variant, required, &mut out)?;
    }
    if reduction == Reduction::Mean && !gray.is_empty() {
        out.scale(1.0 / gray.len() as f64);
    }
    Ok(out)
}

/// Hard-mined cross-modality term, summed over both anchor directions.
pub fn cross_modality_loss(gray: &EmbeddingSet, infrared: &EmbeddingSet, margin: f64) -> Result<f64> {
    ranking_term(
        RankingTerm::Cross,
        gray,
        infrared,
        margin,
        TripletVariant::Hard,
        Reduction::Sum,
    )
    .map(|l| l.value)
}

/// Hard-mined same-modality term; zero when no anchor has a same-modality positive.
pub fn intra_modality_loss(gray: &EmbeddingSet, infrared: &EmbeddingSet, margin: f64) -> Result<f64> {
    ranking_term(
        RankingTerm::Intra,
        gray,
        infrared,
        margin,
        TripletVariant::Hard,
        Reduction::Sum,
    )
    .map(|l| l.value)
}

/// Hard-mined term pairing a cross-modality positive with a same-modality negative.
pub fn inter_modality_loss(gray: &EmbeddingSet, infrared: &EmbeddingSet, margin: f64) -> Result<f64> {
    ranking_term(
        RankingTerm::Inter,
        gray,
        infrared,
        margin,
        TripletVariant::Hard,
        Reduction::Sum,
    )
    .map(|l| l.value)
}

/// Bi-directional dual-constrained reference loss: every cross-modality
/// triplet contributes, normalized by the per-modality sample count.
pub fn bdtr_reference_loss_with_grad(
    visible: &EmbeddingSet,
    infrared: &EmbeddingSet,
    margin: f64,
) -> Result<LossWithGrad> {
    check_pair(visible, infrared)?;
    let pair = Pair {
        gray: visible,
        infrared,
    };
    let mut out = LossWithGrad::zeros(visible, infrared);
    for anchor_side in [Side::Gray, Side::Infrared] {
        let anchors = pair.set(anchor_side);
        let other_side = anchor_side.flip();
        let others = pair.set(other_side);
        for i in 0..anchors.len() {
            let label = anchors.labels[i];
            let a = anchors.row(i);
            let mut has_pos = false;
            let mut has_neg = false;
            for j in 0..others.len() {
                if others.labels[j] != label {
                    has_neg = true;
                    continue;
                }
                has_pos = true;
                let dp = euclidean(a, others.row(j));
                for k in (0..others.len()).filter(|&k| others.labels[k] != label) {
                    let x = margin + dp - euclidean(a, others.row(k));
                    if x > 0.0 {
                        out.value += x;
                        push_distance_grad(&mut out, &pair, anchor_side, i, other_side, j, 1.0);
                        push_distance_grad(&mut out, &pair, anchor_side, i, other_side, k, -1.0);
                    }
                }
            }
            if !has_pos {
                return Err(Error::MissingCandidate {
                    label,
                    what: "cross-modality positive",
                });
            }
            if !has_neg {
                return Err(Error::MissingCandidate {
                    label,
                    what: "cross-modality negative",
                });
            }
        }
    }
    if !visible.is_empty() {
        out.scale(1.0 / visible.len() as f64);
    }
    Ok(out)
}

pub fn bdtr_reference_loss(visible: &EmbeddingSet, infrared: &EmbeddingSet, margin: f64) -> Result<f64> {
    bdtr_reference_loss_with_grad(visible, infrared, margin).map(|l| l.value)
}

/// Which terms of the objective are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossTerms {
    pub identity: bool,
    pub cross: bool,
    pub intra: bool,
    pub inter: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            identity: true,
            cross: true,
            intra: true,
            inter: true,
        }
    }
}

impl LossTerms {
    pub fn identity_only() -> Self {
        Self {
            identity: true,
            cross: false,
            intra: false,
            inter: false,
        }
    }

    /// Parses `id+cross+intra` style names.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut terms = Self {
            identity: false,
            cross: false,
            intra: false,
            inter: false,
        };
        for part in spec.split('+').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "id" | "identity" => terms.identity = true,
                "cross" => terms.cross = true,
                "intra" => terms.intra = true,
                "inter" => terms.inter = true,
                other => return Err(Error::Config(format!("unknown loss term '{other}'"))),
            }
        }
        if terms
            == (Self {
                identity: false,
                cross: false,
                intra: false,
                inter: false,
            })
        {
            return Err(Error::Config("empty loss term list".into()));
        }
        Ok(terms)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.identity {
            parts.push("id");
        }
        if self.cross {
            parts.push("cross");
        }
        if self.intra {
            parts.push("intra");
        }
        if self.inter {
            parts.push("inter");
        }
        parts.join("+")
    }

    pub fn any_ranking(&self) -> bool {
        self.cross || self.intra || self.inter
    }
}

/// Per-term values of the ranking objective and the gradient of the
/// weighted combination `cross + w_intra * intra + w_inter * inter`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingBreakdown {
    pub cross: f64,
    pub intra: f64,
    pub inter: f64,
    pub combined: LossWithGrad,
}

pub fn ranking_objective(
    gray: &EmbeddingSet,
    infrared: &EmbeddingSet,
    config: &MarginConfig,
    terms: LossTerms,
) -> Result<RankingBreakdown> {
    check_pair(gray, infrared)?;
    let mut combined = LossWithGrad::zeros(gray, infrared);
    let mut values = [0.0; 3];
    let parts = [
        (RankingTerm::Cross, terms.cross, config.cross_margin, 1.0),
        (
            RankingTerm::Intra,
            terms.intra,
            config.intra_margin,
            config.intra_weight,
        ),
        (
            RankingTerm::Inter,
            terms.inter,
            config.inter_margin,
            config.inter_weight,
        ),
    ];
    for (slot, (term, enabled, margin, weight)) in parts.into_iter().enumerate() {
        if !enabled {
            continue;
        }
        let part = ranking_term(term, gray, infrared, margin, config.variant, config.reduction)?;
        values[slot] = part.value;
        combined.add_scaled(&part, weight);
    }
    Ok(RankingBreakdown {
        cross: values[0],
        intra: values[1],
        inter: values[2],
        combined,
    })
}

/// `id + cross + w_intra * intra + w_inter * inter`
pub fn total_loss(identity: f64, cross: f64, intra: f64, inter: f64, intra_weight: f64, inter_weight: f64) -> f64 {
    identity + cross + intra_weight * intra + inter_weight * inter
}
