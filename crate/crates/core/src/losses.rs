//! Training objectives.
//!
//! Pixel losses are means over every element rather than raw sums, so the
//! weights in [`LossConfig`] do not depend on resolution or batch size.

use alloc::vec::Vec;

use crate::error::{invalid, mismatch, Result};
use crate::numerics::{Activation, Graph, Var};

/// Loss weights and the divergence margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the divergence term inside the feature prototype loss.
    pub lambda_a: f64,
    /// Divergence margin.
    pub delta: f64,
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_f: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_a: 0.1,
            delta: 1.0,
            lambda_c: 0.1,
            lambda_s: 0.001,
            lambda_f: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_a, self.lambda_c, self.lambda_s, self.lambda_f];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid("loss_config", "loss weights must be finite and non-negative"));
        }
        if !(self.delta.is_finite() && self.delta > 0.0) {
            return Err(invalid("loss_config", "delta must be positive"));
        }
        Ok(())
    }

    /// `b + λc·c + λs·s + λf·fea`.
    pub fn combine(&self, b: f64, c: f64, s: f64, fea: f64) -> f64 {
        b + self.lambda_c * c + self.lambda_s * s + self.lambda_f * fea
    }
}

/// Per-term values of one evaluation of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub coh: f64,
    pub div: f64,
    pub fea: f64,
    pub b: f64,
    pub c: f64,
    pub s: f64,
    pub total: f64,
}

impl LossReport {
    /// Total rebuilt from the parts.
    pub fn reconstruct(&self, cfg: &LossConfig) -> f64 {
        cfg.combine(self.b, self.c, self.s, self.fea)
    }

    /// Term-wise mean; used to average over the pairs of a batch.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut acc = LossReport::default();
        for r in reports {
            acc.coh += r.coh;
            acc.div += r.div;
            acc.fea += r.fea;
            acc.b += r.b;
            acc.c += r.c;
            acc.s += r.s;
            acc.total += r.total;
        }
        LossReport {
            coh: acc.coh / n,
            div: acc.div / n,
            fea: acc.fea / n,
            b: acc.b / n,
            c: acc.c / n,
            s: acc.s / n,
            total: acc.total / n,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.coh, self.div, self.fea, self.b, self.c, self.s, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Index of the largest entry in each row; ties go to the smallest index.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (m, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = m;
                }
            }
            best
        })
        .collect()
}

fn flat_encoding(g: &mut Graph, x: Var, op: &'static str) -> Result<Var> {
    let s = g.shape(x);
    match *s {
        [_, _] => Ok(x),
        [h, w, c] => g.reshape(x, &[h * w, c]),
        _ => Err(invalid(op, alloc::format!("expected an encoding, got {:?}", s))),
    }
}

/// Mean distance from each encoding vector to its most relevant prototype.
///
/// The selection only reads the relevance values; gradient flows into `x`
/// and the selected prototype rows, never through the choice itself.
pub fn cohesion_loss(g: &mut Graph, x: Var, prototypes: Var, relevance: Var) -> Result<Var> {
    const OP: &str = "cohesion_loss";
    let flat = flat_encoding(g, x, OP)?;
    let (k, c) = (g.shape(flat)[0], g.shape(flat)[1]);
    let (ps, rs) = (g.shape(prototypes), g.shape(relevance));
    if ps.len() != 2 || ps[1] != c {
        return Err(mismatch(OP, &[0, c], ps));
    }
    if rs != [k, ps[0]] {
        return Err(mismatch(OP, &[k, ps[0]], rs));
    }
    let chosen = argmax_rows(g.value(relevance).data(), ps[0]);
    let selected = g.gather_rows(prototypes, &chosen)?;
    let diff = g.sub(flat, selected)?;
    let dist = g.vector_l2(diff, 1)?;
    g.mean_all(dist)
}

/// Hinge `[δ - ‖p^m - p^m'‖]_+` averaged over all ordered pairs `m ≠ m'`.
pub fn divergence_loss(g: &mut Graph, prototypes: Var, delta: f64) -> Result<Var> {
    const OP: &str = "divergence_loss";
    let ps = g.shape(prototypes);
    if ps.len() != 2 {
        return Err(invalid(OP, alloc::format!("expected [M, C] prototypes, got {:?}", ps)));
    }
    let m = ps[0];
    if m < 2 {
        return Err(invalid(OP, "needs at least two prototypes"));
    }
    let (left, right): (Vec<usize>, Vec<usize>) =
        (0..m).flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j))).unzip();
    let a = g.gather_rows(prototypes, &left)?;
    let b = g.gather_rows(prototypes, &right)?;
    let diff = g.sub(a, b)?;
    let dist = g.vector_l2(diff, 1)?;
    let neg = g.scale(dist, -1.0)?;
    let margin = g.add_scalar(neg, delta)?;
    let hinge = g.activation(margin, Activation::Relu)?;
    g.mean_all(hinge)
}

/// Returns `(coh + λa·div, coh, div)`.
pub fn feature_prototype_loss(
    g: &mut Graph,
    x: Var,
    prototypes: Var,
    relevance: Var,
    cfg: &LossConfig,
) -> Result<(Var, Var, Var)> {
    let coh = cohesion_loss(g, x, prototypes, relevance)?;
    let div = divergence_loss(g, prototypes, cfg.delta)?;
    let weighted = g.scale(div, cfg.lambda_a)?;
    Ok((g.add(coh, weighted)?, coh, div))
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var, op: &'static str) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(mismatch(op, g.shape(a), g.shape(b)));
    }
    let d = g.sub(a, b)?;
    let d = g.activation(d, Activation::Abs)?;
    g.mean_all(d)
}

/// Mean absolute difference between two background estimates of one scene.
pub fn background_consistency(g: &mut Graph, y_w: Var, y_v: Var) -> Result<Var> {
    mean_abs_diff(g, y_w, y_v, "background_consistency")
}

/// Mean absolute difference between a rainy frame and the background
/// estimated from another frame of the same scene.
pub fn cross_consistency(g: &mut Graph, x_w: Var, y_v: Var) -> Result<Var> {
    mean_abs_diff(g, x_w, y_v, "cross_consistency")
}

/// Mean absolute value of `X - (Ŷ + R̂)`.
pub fn self_consistency(g: &mut Graph, x: Var, y_hat: Var, r_hat: Var) -> Result<Var> {
    const OP: &str = "self_consistency";
    if g.shape(y_hat) != g.shape(r_hat) {
        return Err(mismatch(OP, g.shape(y_hat), g.shape(r_hat)));
    }
    let recon = g.add(y_hat, r_hat)?;
    mean_abs_diff(g, x, recon, OP)
}

/// Scalar loss terms recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub b: Var,
    pub c: Var,
    pub s: Var,
    pub fea: Var,
    pub coh: Var,
    pub div: Var,
}

/// Weighted total and the per-term report.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, cfg: &LossConfig) -> Result<(Var, LossReport)> {
    let c = g.scale(terms.c, cfg.lambda_c)?;
    let s = g.scale(terms.s, cfg.lambda_s)?;
    let f = g.scale(terms.fea, cfg.lambda_f)?;
    let total = g.add(terms.b, c)?;
    let total = g.add(total, s)?;
    let total = g.add(total, f)?;
    let read = |v: Var| g.value(v).data()[0];
    let report = LossReport {
        coh: read(terms.coh),
        div: read(terms.div),
        fea: read(terms.fea),
        b: read(terms.b),
        c: read(terms.c),
        s: read(terms.s),
        total: read(total),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item().unwrap()
    }

    #[test]
    fn paper_weights_are_defaults() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.lambda_a, cfg.delta), (0.1, 1.0));
        assert_eq!((cfg.lambda_c, cfg.lambda_s, cfg.lambda_f), (0.1, 0.001, 0.1));
        cfg.validate().unwrap();
        assert!(LossConfig { delta: 0.0, ..cfg }.validate().is_err());
        assert!(LossConfig { lambda_s: -1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn argmax_ties_pick_smallest_index() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.2, 0.3, 0.3], 5), [0]);
        assert_eq!(argmax_rows(&[0.1, 0.9, 0.6, 0.4], 2), [1, 0]);
    }

    #[test]
    fn cohesion_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let p = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[0.7, 0.3, 0.2, 0.8]));
        let l = cohesion_loss(&mut g, x, p, a).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        let x = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let p = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let a = g.constant(t(&[1, 1], &[1.0]));
        let l = cohesion_loss(&mut g, x, p, a).unwrap();
        assert!((scalar(&g, l) - core::f64::consts::SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn divergence_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let l = divergence_loss(&mut g, p, 1.0).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        let same = g.constant(Tensor::full(&[5, 3], 0.4));
        let l = divergence_loss(&mut g, same, 1.0).unwrap();
        assert_eq!(scalar(&g, l), 1.0);

        let half = g.constant(t(&[2, 1], &[0.0, 0.5]));
        let l = divergence_loss(&mut g, half, 1.0).unwrap();
        assert!((scalar(&g, l) - 0.5).abs() < 1e-15);

        let single = g.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(divergence_loss(&mut g, single, 1.0).is_err());
    }

    #[test]
    fn feature_loss_combines_terms() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let p = g.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let a = g.constant(t(&[1, 2], &[0.6, 0.4]));
        let (fea, coh, div) = feature_prototype_loss(&mut g, x, p, a, &cfg).unwrap();
        assert!((scalar(&g, coh) - core::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!(scalar(&g, div), 1.0);
        assert!((scalar(&g, fea) - (core::f64::consts::SQRT_2 + 0.1)).abs() < 1e-15);

        let no_div = LossConfig { lambda_a: 0.0, ..cfg };
        let (fea, coh, _) = feature_prototype_loss(&mut g, x, p, a, &no_div).unwrap();
        assert_eq!(scalar(&g, fea), scalar(&g, coh));
    }

    #[test]
    fn pixel_loss_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 2, 3], 0.3));
        let b = g.constant(Tensor::full(&[2, 2, 3], 0.5));
        let l = background_consistency(&mut g, a, a).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
        let ab = background_consistency(&mut g, a, b).unwrap();
        let ba = background_consistency(&mut g, b, a).unwrap();
        assert!((scalar(&g, ab) - 0.2).abs() < 1e-15);
        assert_eq!(scalar(&g, ab), scalar(&g, ba));

        let ones = g.constant(Tensor::full(&[2, 2, 3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2, 2, 3]));
        let l = cross_consistency(&mut g, ones, zeros).unwrap();
        assert_eq!(scalar(&g, l), 1.0);
        let l = cross_consistency(&mut g, ones, ones).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        let mut one_off = Tensor::zeros(&[2, 2, 3]);
        one_off.data_mut()[7] = 0.6;
        let one_off = g.constant(one_off);
        let l = cross_consistency(&mut g, one_off, zeros).unwrap();
        assert!((scalar(&g, l) - 0.6 / 12.0).abs() < 1e-15);

        let bad = g.constant(Tensor::zeros(&[2, 3, 2]));
        assert!(background_consistency(&mut g, a, bad).is_err());
        assert!(cross_consistency(&mut g, a, bad).is_err());
    }

    #[test]
    fn self_consistency_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3], 0.5));
        let r = g.constant(Tensor::full(&[1, 1, 3], 0.2));
        let y = g.sub(x, r).unwrap();
        let l = self_consistency(&mut g, x, y, r).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        let zero = g.constant(Tensor::zeros(&[1, 1, 3]));
        let l = self_consistency(&mut g, x, x, zero).unwrap();
        assert_eq!(scalar(&g, l), 0.0);

        // Clamp engaged: X = 0.9, R = 2.5, Y = clamp(-1.6) = -1, residual 0.6.
        let x = g.constant(Tensor::full(&[1, 1, 1], 0.9));
        let r = g.constant(Tensor::full(&[1, 1, 1], 2.5));
        let raw = g.sub(x, r).unwrap();
        let y = g.activation(raw, Activation::ClampUnit).unwrap();
        let l = self_consistency(&mut g, x, y, r).unwrap();
        assert!((scalar(&g, l) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn total_loss_uses_paper_weights() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let one = g.param(Tensor::scalar(1.0));
        let terms = LossTerms {
            b: one,
            c: one,
            s: one,
            fea: one,
            coh: one,
            div: one,
        };
        let (total, report) = total_loss(&mut g, &terms, &cfg).unwrap();
        assert!((scalar(&g, total) - 1.201).abs() < 1e-15);
        assert!((report.reconstruct(&cfg) - report.total).abs() <= 1e-12);

        let two = g.param(Tensor::scalar(2.0));
        let doubled = LossTerms {
            b: two,
            c: two,
            s: two,
            fea: two,
            coh: two,
            div: two,
        };
        let (t2, _) = total_loss(&mut g, &doubled, &cfg).unwrap();
        assert!((scalar(&g, t2) - 2.0 * scalar(&g, total)).abs() < 1e-15);

        let zero = g.param(Tensor::scalar(0.0));
        let zeros = LossTerms {
            b: zero,
            c: zero,
            s: zero,
            fea: zero,
            coh: zero,
            div: zero,
        };
        let (t0, _) = total_loss(&mut g, &zeros, &cfg).unwrap();
        assert_eq!(scalar(&g, t0), 0.0);
    }

    #[test]
    fn non_selected_prototypes_get_no_cohesion_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2, 2], &[1.0, 0.2, 0.1, 0.9]));
        let p = g.param(t(&[3, 2], &[0.5, 0.5, 0.0, 1.0, -3.0, 2.0]));
        // Both pixels pick row 1; rows 0 and 2 are never selected.
        let a = g.constant(t(&[2, 3], &[0.2, 0.5, 0.3, 0.1, 0.8, 0.1]));
        let l = cohesion_loss(&mut g, x, p, a).unwrap();
        g.backward(l).unwrap();
        let gp = g.grad(p).unwrap().data();
        assert_eq!(&gp[0..2], &[0.0, 0.0]);
        assert_eq!(&gp[4..6], &[0.0, 0.0]);
        assert!(gp[2] != 0.0 || gp[3] != 0.0);
    }

    #[test]
    fn report_mean_and_finiteness() {
        let a = LossReport {
            coh: 1.0,
            div: 2.0,
            fea: 3.0,
            b: 4.0,
            c: 5.0,
            s: 6.0,
            total: 7.0,
        };
        let m = LossReport::mean(&[a, LossReport::default()]);
        assert_eq!(m.total, 3.5);
        assert_eq!(m.coh, 0.5);
        assert!(m.is_finite());
    }
}
