//! Scalar objectives: alignment (positive pull and hinge push), extrinsics
//! regression, masked box regression, the diffusion noise-prediction
//! surrogate for behavior cloning, and their weighted total.
//!
//! Every term is a per-batch mean over its items, so the weights do not
//! depend on batch size. The `*_grad` variants take head outputs as rows
//! of a matrix plus index pairs, and accumulate `scale · ∂term/∂output`
//! into a gradient matrix of the same shape.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PoseTarget;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_align: f64,
    pub lambda_ext: f64,
    pub lambda_bbox: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_align: 1.0,
            lambda_ext: 0.5,
            lambda_bbox: 0.5,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_align, self.lambda_ext, self.lambda_bbox]
            .iter()
            .all(|&l| l.is_finite() && l >= 0.0);
        if !ok {
            return Err(Error::InvalidInput(format!("loss weights must be non-negative: {self:?}")));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidInput(format!("margin must be positive, got {}", self.margin)));
        }
        Ok(())
    }
}

/// Per-term multipliers actually applied to the gradient. Derived from
/// [`LossWeights`] and the training variant; single-term objectives are
/// used for gradient verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub bc: f64,
    pub pos: f64,
    pub neg: f64,
    pub ext: f64,
    pub bbox: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Bc,
    Pos,
    Neg,
    Ext,
    Bbox,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Bc, Term::Pos, Term::Neg, Term::Ext, Term::Bbox];

    pub fn name(&self) -> &'static str {
        match self {
            Term::Bc => "l_bc",
            Term::Pos => "l_pos",
            Term::Neg => "l_neg",
            Term::Ext => "l_ext",
            Term::Bbox => "l_bbox",
        }
    }
}

impl Objective {
    pub fn from_weights(w: &LossWeights) -> Self {
        Self {
            bc: 1.0,
            pos: w.lambda_align,
            neg: w.lambda_align,
            ext: w.lambda_ext,
            bbox: w.lambda_bbox,
            margin: w.margin,
        }
    }

    pub fn only(term: Term, margin: f64) -> Self {
        let mut o = Self {
            bc: 0.0,
            pos: 0.0,
            neg: 0.0,
            ext: 0.0,
            bbox: 0.0,
            margin,
        };
        *o.weight_mut(term) = 1.0;
        o
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Bc => self.bc,
            Term::Pos => self.pos,
            Term::Neg => self.neg,
            Term::Ext => self.ext,
            Term::Bbox => self.bbox,
        }
    }

    pub fn weight_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Bc => &mut self.bc,
            Term::Pos => &mut self.pos,
            Term::Neg => &mut self.neg,
            Term::Ext => &mut self.ext,
            Term::Bbox => &mut self.bbox,
        }
    }

    pub fn needs(&self, term: Term) -> bool {
        self.weight(term) != 0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_pos: f64,
    pub l_neg: f64,
    pub l_alignment: f64,
    pub l_ext: f64,
    pub l_bbox: f64,
    pub l_bc: f64,
    pub l_total: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub n_ext: usize,
    pub n_bbox: usize,
    pub n_bc: usize,
}

pub const CSV_HEADER: &str = "step,l_pos,l_neg,l_alignment,l_ext,l_bbox,l_bc,l_total";

impl LossReport {
    pub fn value(&self, term: Term) -> f64 {
        match term {
            Term::Bc => self.l_bc,
            Term::Pos => self.l_pos,
            Term::Neg => self.l_neg,
            Term::Ext => self.l_ext,
            Term::Bbox => self.l_bbox,
        }
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{}",
            self.l_pos, self.l_neg, self.l_alignment, self.l_ext, self.l_bbox, self.l_bc, self.l_total
        )
    }

    /// Fills in the alignment sum and the weighted total.
    pub fn finish(&mut self, obj: &Objective) -> Result<()> {
        for term in Term::ALL {
            if !self.value(term).is_finite() {
                return Err(Error::NumericFailure {
                    term: term.name().into(),
                });
            }
        }
        self.l_alignment = self.l_pos + self.l_neg;
        let align = if obj.pos == obj.neg {
            obj.pos * self.l_alignment
        } else {
            obj.pos * self.l_pos + obj.neg * self.l_neg
        };
        self.l_total = obj.bc * self.l_bc + align + obj.ext * self.l_ext + obj.bbox * self.l_bbox;
        Ok(())
    }
}

/// `L_total = L_BC + λ_align·L_alignment + λ_ext·L_ext + λ_bbox·L_bbox`.
pub fn loss_total(l_bc: f64, l_alignment: f64, l_ext: f64, l_bbox: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l_bc", l_bc), ("l_alignment", l_alignment), ("l_ext", l_ext), ("l_bbox", l_bbox)] {
        if !v.is_finite() {
            return Err(Error::NumericFailure { term: name.into() });
        }
    }
    Ok(l_bc + w.lambda_align * l_alignment + w.lambda_ext * l_ext + w.lambda_bbox * l_bbox)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row<'a>(m: &'a ArrayView2<f64>, i: usize) -> &'a [f64] {
    m.row(i).to_slice().expect("rows are contiguous")
}

fn add_row(g: &mut Array2<f64>, i: usize, v: impl Iterator<Item = f64>) {
    let mut r = g.row_mut(i);
    for (dst, x) in r.iter_mut().zip(v) {
        *dst += x;
    }
}

/// Mean squared distance between paired head outputs.
pub fn pos_grad(out: ArrayView2<f64>, pairs: &[(usize, usize)], scale: f64, grad: Option<&mut Array2<f64>>) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let total: f64 = pairs.iter().map(|&(a, b)| sq_dist(row(&out, a), row(&out, b))).sum();
    if let Some(g) = grad {
        let c = 2.0 * scale / n;
        for &(a, b) in pairs {
            let diff: Vec<f64> = row(&out, a).iter().zip(row(&out, b)).map(|(x, y)| x - y).collect();
            add_row(g, a, diff.iter().map(|d| c * d));
            add_row(g, b, diff.iter().map(|d| -c * d));
        }
    }
    total / n
}

/// Mean of `max(0, δ − ‖a − b‖²)` over negative pairs.
pub fn neg_grad(
    out: ArrayView2<f64>,
    pairs: &[(usize, usize)],
    margin: f64,
    scale: f64,
    grad: Option<&mut Array2<f64>>,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let mut total = 0.0;
    let mut active = Vec::new();
    for &(a, b) in pairs {
        let d2 = sq_dist(row(&out, a), row(&out, b));
        if d2 < margin {
            total += margin - d2;
            active.push((a, b));
        }
    }
    if let Some(g) = grad {
        let c = 2.0 * scale / n;
        for (a, b) in active {
            let diff: Vec<f64> = row(&out, a).iter().zip(row(&out, b)).map(|(x, y)| x - y).collect();
            add_row(g, a, diff.iter().map(|d| -c * d));
            add_row(g, b, diff.iter().map(|d| c * d));
        }
    }
    total / n
}

/// Mean of `‖g_k − g_l − target‖²` over view pairs.
pub fn ext_grad(
    out: ArrayView2<f64>,
    pairs: &[(usize, usize, PoseTarget)],
    scale: f64,
    grad: Option<&mut Array2<f64>>,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let n = pairs.len() as f64;
    let residual = |k: usize, l: usize, t: &PoseTarget| -> Vec<f64> {
        row(&out, k).iter().zip(row(&out, l)).zip(t.0.iter()).map(|((a, b), t)| a - b - t).collect()
    };
    let mut total = 0.0;
    let mut grad = grad;
    for (k, l, t) in pairs {
        let r = residual(*k, *l, t);
        total += r.iter().map(|v| v * v).sum::<f64>();
        if let Some(g) = grad.as_deref_mut() {
            let c = 2.0 * scale / n;
            add_row(g, *k, r.iter().map(|v| c * v));
            add_row(g, *l, r.iter().map(|v| -c * v));
        }
    }
    total / n
}

/// Squared error averaged over the coordinates of visible boxes; returns
/// the loss and the number of visible boxes.
pub fn bbox_grad(
    out: ArrayView2<f64>,
    items: &[(usize, [f64; 8], [bool; 2])],
    scale: f64,
    grad: Option<&mut Array2<f64>>,
) -> (f64, usize) {
    let boxes: usize = items.iter().map(|(_, _, v)| v.iter().filter(|&&b| b).count()).sum();
    if boxes == 0 {
        return (0.0, 0);
    }
    let coords = (boxes * 4) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for (slot, target, visible) in items {
        let pred = row(&out, *slot);
        let mut d = [0.0; 8];
        for b in 0..2 {
            if !visible[b] {
                continue;
            }
            for j in b * 4..b * 4 + 4 {
                let e = pred[j] - target[j];
                total += e * e;
                d[j] = 2.0 * scale * e / coords;
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            add_row(g, *slot, d.into_iter());
        }
    }
    (total / coords, boxes)
}

/// Mean squared error between predicted and drawn noise, averaged over
/// every entry.
pub fn noise_mse_grad(pred: ArrayView2<f64>, noise: ArrayView2<f64>, scale: f64, grad: Option<&mut Array2<f64>>) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let n = pred.len() as f64;
    let diff = &pred - &noise;
    if let Some(g) = grad {
        g.scaled_add(2.0 * scale / n, &diff);
    }
    diff.iter().map(|v| v * v).sum::<f64>() / n
}

fn stack(rows: &[&[f64]]) -> Array2<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), dim), |(i, j)| rows[i][j])
}

fn pair_matrix(pairs: &[(&[f64], &[f64])]) -> (Array2<f64>, Vec<(usize, usize)>) {
    let rows: Vec<&[f64]> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
    let idx = (0..pairs.len()).map(|i| (2 * i, 2 * i + 1)).collect();
    (stack(&rows), idx)
}

/// Positive alignment loss over head-output pairs; `(mean, count)`.
pub fn loss_pos(pairs: &[(&[f64], &[f64])]) -> (f64, usize) {
    let (m, idx) = pair_matrix(pairs);
    (pos_grad(m.view(), &idx, 1.0, None), pairs.len())
}

/// Hinge negative alignment loss over head-output pairs; `(mean, count)`.
pub fn loss_neg(pairs: &[(&[f64], &[f64])], margin: f64) -> (f64, usize) {
    let (m, idx) = pair_matrix(pairs);
    (neg_grad(m.view(), &idx, margin, 1.0, None), pairs.len())
}

pub fn loss_ext(pairs: &[(&[f64], &[f64], PoseTarget)]) -> f64 {
    let ab: Vec<(&[f64], &[f64])> = pairs.iter().map(|(a, b, _)| (*a, *b)).collect();
    let (m, idx) = pair_matrix(&ab);
    let trip: Vec<_> = idx.iter().zip(pairs).map(|(&(k, l), p)| (k, l, p.2)).collect();
    ext_grad(m.view(), &trip, 1.0, None)
}

pub fn loss_bbox(items: &[(&[f64], [f64; 8], [bool; 2])]) -> (f64, usize) {
    let rows: Vec<&[f64]> = items.iter().map(|i| i.0).collect();
    let m = stack(&rows);
    let idx: Vec<_> = items.iter().enumerate().map(|(i, it)| (i, it.1, it.2)).collect();
    bbox_grad(m.view(), &idx, 1.0, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const I12: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];

    #[test]
    fn pos_examples() {
        let a = [0.3, -0.1];
        assert_eq!(loss_pos(&[(&a, &a)]).0, 0.0);
        assert_eq!(loss_pos(&[(&[0.0, 0.0], &[1.0, 0.0])]).0, 1.0);
        let s3 = 3f64.sqrt();
        let (l, n) = loss_pos(&[(&[0.0, 0.0], &[1.0, 0.0]), (&[0.0, 0.0], &[s3, 0.0])]);
        assert!((l - 2.0).abs() < 1e-12 && n == 2);
        assert_eq!(loss_pos(&[]), (0.0, 0));
    }

    #[test]
    fn neg_examples() {
        let z = [0.0, 0.0];
        assert_eq!(loss_neg(&[(&z, &[0.6f64.sqrt(), 0.0])], 0.5).0, 0.0);
        assert_eq!(loss_neg(&[(&z, &z)], 0.5).0, 0.5);
        let (l, _) = loss_neg(&[(&z, &[0.2f64.sqrt(), 0.0])], 0.5);
        assert!((l - 0.3).abs() < 1e-12);
        assert_eq!(loss_neg(&[], 0.5), (0.0, 0));
    }

    #[test]
    fn ext_examples() {
        let g = [0.25; 12];
        let mut shifted = g;
        for (s, t) in shifted.iter_mut().zip(I12) {
            *s += t;
        }
        assert_eq!(loss_ext(&[(&shifted, &g, PoseTarget(I12))]), 0.0);
        // zero head difference, target = identity rotation and unit x
        // translation: ‖I‖_F² + 1 = 4
        let mut t = I12;
        t[9] = 1.0;
        assert!((loss_ext(&[(&g, &g, PoseTarget(t))]) - 4.0).abs() < 1e-12);
        // order matters: swapping endpoints negates the head difference
        let fwd = loss_ext(&[(&shifted, &g, PoseTarget(I12))]);
        let rev = loss_ext(&[(&g, &shifted, PoseTarget(I12))]);
        assert!(rev > fwd);
    }

    #[test]
    fn bbox_examples() {
        let t = [0.4, 0.5, 0.2, 0.1, 0.6, 0.3, 0.2, 0.2];
        assert_eq!(loss_bbox(&[(&t, t, [true, true])]).0, 0.0);
        let pred = [0.5; 8];
        let mut target = [0.5; 8];
        target[3] = 0.9;
        let (l, n) = loss_bbox(&[(&pred, target, [true, true])]);
        assert!((l - 0.16 / 8.0).abs() < 1e-15 && n == 2);
        assert_eq!(loss_bbox(&[(&pred, target, [false, false])]), (0.0, 0));
    }

    #[test]
    fn noise_mse_of_exact_prediction_is_zero() {
        let e = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        assert_eq!(noise_mse_grad(e.view(), e.view(), 1.0, None), 0.0);
    }

    #[test]
    fn total_examples() {
        let zero = LossWeights {
            lambda_align: 0.0,
            lambda_ext: 0.0,
            lambda_bbox: 0.0,
            margin: 0.5,
        };
        assert_eq!(loss_total(1.7, 2.0, 3.0, 4.0, &zero).unwrap(), 1.7);
        let ones = LossWeights {
            lambda_align: 1.0,
            lambda_ext: 1.0,
            lambda_bbox: 1.0,
            margin: 0.5,
        };
        assert_eq!(loss_total(1.0, 2.0, 3.0, 4.0, &ones).unwrap(), 10.0);
        let two = LossWeights { lambda_align: 2.0, ..ones };
        assert_eq!(loss_total(1.0, 2.0, 3.0, 4.0, &two).unwrap() - 10.0, 2.0);
        assert!(matches!(
            loss_total(f64::NAN, 0.0, 0.0, 0.0, &ones),
            Err(Error::NumericFailure { .. })
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { margin: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_ext: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn report_finish_matches_formula() {
        let mut r = LossReport {
            l_pos: 0.3,
            l_neg: 0.2,
            l_ext: 1.5,
            l_bbox: 0.01,
            l_bc: 0.9,
            ..Default::default()
        };
        let w = LossWeights::default();
        r.finish(&Objective::from_weights(&w)).unwrap();
        assert_eq!(r.l_alignment, r.l_pos + r.l_neg);
        assert_eq!(r.l_total, loss_total(r.l_bc, r.l_alignment, r.l_ext, r.l_bbox, &w).unwrap());
        r.l_ext = f64::INFINITY;
        match r.finish(&Objective::from_weights(&w)) {
            Err(Error::NumericFailure { term }) => assert_eq!(term, "l_ext"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn hinge_is_continuous_and_zero_beyond(d2 in 0.0f64..2.0, margin in 0.05f64..1.5) {
            let z = [0.0];
            let p = [d2.sqrt()];
            let (l, _) = loss_neg(&[(&z, &p)], margin);
            prop_assert!(l >= 0.0);
            if d2 >= margin {
                prop_assert_eq!(l, 0.0);
            } else {
                prop_assert!((l - (margin - d2)).abs() < 1e-12);
            }
        }

        #[test]
        fn alignment_terms_symmetric_and_nonnegative(
            a in prop::collection::vec(-3.0f64..3.0, 4),
            b in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            prop_assert_eq!(loss_pos(&[(&a, &b)]).0, loss_pos(&[(&b, &a)]).0);
            prop_assert_eq!(loss_neg(&[(&a, &b)], 0.5).0, loss_neg(&[(&b, &a)], 0.5).0);
            prop_assert!(loss_pos(&[(&a, &b)]).0 >= 0.0);
        }

        #[test]
        fn masked_slots_do_not_matter(junk in prop::array::uniform4(0.0f64..1.0)) {
            let pred = [0.2, 0.3, 0.1, 0.1, 0.7, 0.7, 0.2, 0.2];
            let mut t1 = [0.25, 0.3, 0.1, 0.15, 0.0, 0.0, 0.0, 0.0];
            let base = loss_bbox(&[(&pred, t1, [true, false])]);
            t1[4..].copy_from_slice(&junk);
            prop_assert_eq!(loss_bbox(&[(&pred, t1, [true, false])]), base);
        }
    }
}
