//! Prediction head: max-pool over nodes, element-wise fusion with the
//! question encoding, a 2-layer ReLU MLP producing answer logits, and the
//! soft multi-label binary cross-entropy loss.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tensor2};

#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp2 {
    pub fn init(d_in: usize, hidden: usize, classes: usize, set: &mut ParamSet, rng: &mut Rng) -> Self {
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Mlp2 {
            w1: set.add("mlp.w1", Tensor2::from_fn(hidden, d_in, |_, _| rng.normal(0.0, s1)), true),
            b1: set.add("mlp.b1", Tensor2::zeros(1, hidden), true),
            w2: set.add("mlp.w2", Tensor2::from_fn(classes, hidden, |_, _| rng.normal(0.0, s2)), true),
            b2: set.add("mlp.b2", Tensor2::zeros(1, classes), true),
            d_in,
            hidden,
            classes,
        }
    }
}

/// Per-class soft target scores in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTargets {
    pub t: Vec<f64>,
}

/// Element-wise maximum over rows. Permutation invariant by construction.
pub fn max_pool_nodes(h: &Tensor2) -> Result<Vec<f64>> {
    if h.rows() == 0 {
        return Err(Error::Input("max_pool_nodes: empty node set".into()));
    }
    let mut out = h.row(0).to_vec();
    for i in 1..h.rows() {
        for (o, &v) in out.iter_mut().zip(h.row(i)) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

/// Row index of the maximum per column (first row wins ties); used to route
/// gradients back through the pool.
pub fn max_pool_argmax(h: &Tensor2) -> Vec<usize> {
    let mut arg = vec![0usize; h.cols()];
    for c in 0..h.cols() {
        let mut best = h.get(0, c);
        for r in 1..h.rows() {
            let v = h.get(r, c);
            if v > best {
                best = v;
                arg[c] = r;
            }
        }
    }
    arg
}

/// Element-wise product of pooled image vector and question encoding.
pub fn fuse(h_max: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if h_max.len() != q.len() {
        return Err(Error::Config(format!(
            "fuse: widths differ ({} vs {})",
            h_max.len(),
            q.len()
        )));
    }
    Ok(h_max.iter().zip(q).map(|(a, b)| a * b).collect())
}

#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    pub a1: Vec<f64>,
    pub h1: Vec<f64>,
    pub dropout_mask: Option<Vec<f64>>,
}

/// logits = W2 ReLU(W1 x + b1) + b2; no activation on the logits.
/// `hidden_dropout` applies an inverted-dropout mask to the hidden layer.
pub fn classify(
    fused: &[f64],
    mlp: &Mlp2,
    set: &ParamSet,
    hidden_dropout: Option<&[f64]>,
) -> Result<(Vec<f64>, MlpTrace)> {
    if fused.len() != mlp.d_in {
        return Err(Error::dim(
            "classify",
            format!("input {}", fused.len()),
            format!("d_in {}", mlp.d_in),
        ));
    }
    let mut a1 = set.value(mlp.w1).matvec(fused);
    for (a, b) in a1.iter_mut().zip(set.value(mlp.b1).row(0)) {
        *a += b;
    }
    let mut h1: Vec<f64> = a1.iter().map(|&v| v.max(0.0)).collect();
    if let Some(mask) = hidden_dropout {
        for (h, m) in h1.iter_mut().zip(mask) {
            *h *= m;
        }
    }
    let mut y = set.value(mlp.w2).matvec(&h1);
    for (a, b) in y.iter_mut().zip(set.value(mlp.b2).row(0)) {
        *a += b;
    }
    Ok((
        y,
        MlpTrace {
            input: fused.to_vec(),
            a1,
            h1,
            dropout_mask: hidden_dropout.map(|m| m.to_vec()),
        },
    ))
}

/// Backward through the MLP; returns the gradient w.r.t. the fused input.
pub fn classify_backward(
    trace: &MlpTrace,
    d_logits: &[f64],
    mlp: &Mlp2,
    set: &mut ParamSet,
) -> Result<Vec<f64>> {
    set.grad_mut(mlp.w2).add_outer(1.0, d_logits, &trace.h1);
    for (g, d) in set.grad_mut(mlp.b2).row_mut(0).iter_mut().zip(d_logits) {
        *g += d;
    }
    let mut dh1 = set.value(mlp.w2).matvec_t(d_logits);
    if let Some(mask) = &trace.dropout_mask {
        for (d, m) in dh1.iter_mut().zip(mask) {
            *d *= m;
        }
    }
    let da1: Vec<f64> = dh1
        .iter()
        .zip(&trace.a1)
        .map(|(d, &a)| if a > 0.0 { *d } else { 0.0 })
        .collect();
    set.grad_mut(mlp.w1).add_outer(1.0, &da1, &trace.input);
    for (g, d) in set.grad_mut(mlp.b1).row_mut(0).iter_mut().zip(&da1) {
        *g += d;
    }
    Ok(set.value(mlp.w1).matvec_t(&da1))
}

/// Sum over classes of binary cross entropy against soft targets, in the
/// numerically stable logit form max(y,0) - y*t + log(1 + exp(-|y|)).
pub fn soft_bce_loss(t: &SoftTargets, y: &[f64]) -> Result<f64> {
    if t.t.len() != y.len() {
        return Err(Error::dim(
            "soft_bce_loss",
            format!("targets {}", t.t.len()),
            format!("logits {}", y.len()),
        ));
    }
    Ok(t.t
        .iter()
        .zip(y)
        .map(|(&tc, &yc)| yc.max(0.0) - yc * tc + (1.0 + (-yc.abs()).exp()).ln())
        .sum())
}

/// dL/dy_c = sigmoid(y_c) - t_c.
pub fn soft_bce_grad(t: &SoftTargets, y: &[f64]) -> Vec<f64> {
    t.t.iter().zip(y).map(|(&tc, &yc)| sigmoid(yc) - tc).collect()
}

/// Count annotator votes per in-vocabulary class; out-of-vocabulary answers
/// contribute nothing.
pub fn make_soft_targets(
    answers: &[String],
    class_index: &std::collections::BTreeMap<String, usize>,
    n_classes: usize,
    n_annotators: usize,
) -> SoftTargets {
    let mut t = vec![0.0; n_classes];
    for a in answers {
        if let Some(&c) = class_index.get(a) {
            t[c] += 1.0;
        }
    }
    let n = n_annotators.max(1) as f64;
    t.iter_mut().for_each(|x| *x /= n);
    SoftTargets { t }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    #[test]
    fn max_pool_cases() {
        let h = Tensor2::from_vec(2, 2, vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        assert_eq!(max_pool_nodes(&h).unwrap(), vec![3.0, 4.0]);
        let single = Tensor2::from_vec(1, 3, vec![0.1, -0.2, 0.3]).unwrap();
        assert_eq!(max_pool_nodes(&single).unwrap(), vec![0.1, -0.2, 0.3]);
        let swapped = Tensor2::from_vec(2, 2, vec![3.0, 2.0, 1.0, 4.0]).unwrap();
        assert_eq!(max_pool_nodes(&swapped).unwrap(), max_pool_nodes(&h).unwrap());
        assert!(max_pool_nodes(&Tensor2::zeros(0, 3)).is_err());
    }

    #[test]
    fn fuse_cases() {
        assert_eq!(fuse(&[0.5, 1.0], &[2.0, 3.0]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(fuse(&[1.0, 1.0], &[2.0, 3.0]).unwrap(), vec![2.0, 3.0]);
        assert_eq!(fuse(&[0.0, 0.0], &[2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(fuse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn classify_zero_weights() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(1);
        let mlp = Mlp2::init(3, 4, 2, &mut set, &mut rng);
        for id in [mlp.w1, mlp.w2] {
            set.value_mut(id).fill(0.0);
        }
        let (y, _) = classify(&[1.0, 2.0, 3.0], &mlp, &set, None).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn classify_matches_scalar_oracle() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(2);
        let mlp = Mlp2::init(2, 3, 3, &mut set, &mut rng);
        let x = [0.4, -0.9];
        let (y, _) = classify(&x, &mlp, &set, None).unwrap();
        for c in 0..3 {
            let mut s = set.value(mlp.b2).get(0, c);
            for h in 0..3 {
                let mut a = set.value(mlp.b1).get(0, h);
                for i in 0..2 {
                    a += set.value(mlp.w1).get(h, i) * x[i];
                }
                s += set.value(mlp.w2).get(c, h) * a.max(0.0);
            }
            assert_abs_diff_eq!(y[c], s, epsilon = 1e-12);
        }
    }

    #[test]
    fn bce_analytic_cases() {
        let t = SoftTargets { t: vec![1.0] };
        assert_abs_diff_eq!(soft_bce_loss(&t, &[0.0]).unwrap(), (2.0f64).ln(), epsilon = 1e-12);
        let t0 = SoftTargets { t: vec![0.0] };
        let l = soft_bce_loss(&t0, &[-50.0]).unwrap();
        assert!(l >= 0.0 && l < 1e-20, "loss {l}");
        // no overflow at the other extreme either
        let l2 = soft_bce_loss(&t0, &[750.0]).unwrap();
        assert!(l2.is_finite());
    }

    #[test]
    fn bce_grad_matches_finite_differences() {
        let t = SoftTargets { t: vec![0.3, 1.0, 0.0] };
        let y = vec![0.7, -1.2, 2.5];
        let g = soft_bce_grad(&t, &y);
        let eps = 1e-6;
        for c in 0..3 {
            let mut yp = y.clone();
            yp[c] += eps;
            let mut ym = y.clone();
            ym[c] -= eps;
            let fd = (soft_bce_loss(&t, &yp).unwrap() - soft_bce_loss(&t, &ym).unwrap()) / (2.0 * eps);
            assert_abs_diff_eq!(g[c], fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn bce_nonnegative_zero_at_hard_match() {
        let t = SoftTargets { t: vec![1.0, 0.0] };
        let l = soft_bce_loss(&t, &[40.0, -40.0]).unwrap();
        assert!(l >= 0.0 && l < 1e-15);
    }

    fn classes(names: &[&str]) -> BTreeMap<String, usize> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), i))
            .collect()
    }

    #[test]
    fn soft_targets_vote_fraction() {
        let idx = classes(&["cat", "dog"]);
        let answers: Vec<String> = ["cat", "cat", "cat", "cat", "cat", "dog", "dog", "bird", "bird", "bird"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let t = make_soft_targets(&answers, &idx, 2, 10);
        assert_abs_diff_eq!(t.t[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(t.t[1], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn soft_targets_all_oov_is_zero() {
        let idx = classes(&["cat"]);
        let answers: Vec<String> = (0..10).map(|_| "zebra".to_string()).collect();
        let t = make_soft_targets(&answers, &idx, 1, 10);
        assert_eq!(t.t, vec![0.0]);
    }

    #[test]
    fn soft_targets_single_answer_one_hot() {
        let idx = classes(&["yes", "no"]);
        let t = make_soft_targets(&["yes".to_string()], &idx, 2, 1);
        assert_eq!(t.t, vec![1.0, 0.0]);
    }
}
