//! Question-to-image attention baseline. Replaces the graph pathway with a
//! scored soft attention over objects and a weighted-sum pooling; the head
//! (fusion + MLP) is shared with the graph model so the ablation isolates
//! the image-representation stage.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{dot, softmax_masked, Tensor2};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w: ParamId,   // d_att x (d_v + d_q)
    pub b: ParamId,   // 1 x d_att
    pub score: ParamId, // 1 x d_att
    pub w_v: ParamId, // d_q x d_v
    pub d_v: usize,
    pub d_q: usize,
    pub d_att: usize,
}

impl AttentionParams {
    pub fn init(d_v: usize, d_q: usize, d_att: usize, set: &mut ParamSet, rng: &mut Rng) -> Self {
        let d_in = d_v + d_q;
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (d_att as f64).sqrt();
        let s3 = 1.0 / (d_v as f64).sqrt();
        AttentionParams {
            w: set.add("attn.w", Tensor2::from_fn(d_att, d_in, |_, _| rng.normal(0.0, s1)), true),
            b: set.add("attn.b", Tensor2::zeros(1, d_att), true),
            score: set.add("attn.score", Tensor2::from_fn(1, d_att, |_, _| rng.normal(0.0, s2)), true),
            w_v: set.add("attn.w_v", Tensor2::from_fn(d_q, d_v, |_, _| rng.normal(0.0, s3)), true),
            d_v,
            d_q,
            d_att,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub inputs: Vec<Vec<f64>>, // [v_n || q]
    pub a: Vec<Vec<f64>>,      // pre-ReLU hidden
    pub h: Vec<Vec<f64>>,      // post-ReLU hidden
    pub weights: Vec<f64>,     // softmax over objects
    pub proj: Vec<Vec<f64>>,   // W_v v_n
    pub v_in: Tensor2,
}

/// scores s_n = w . ReLU(W [v_n || q] + b); weights = softmax(s);
/// output = sum_n weights_n (W_v v_n).
pub fn attention_forward(
    v: &Tensor2,
    q: &[f64],
    p: &AttentionParams,
    set: &ParamSet,
) -> Result<(Vec<f64>, AttentionTrace)> {
    if v.cols() != p.d_v || q.len() != p.d_q {
        return Err(Error::dim(
            "attention_forward",
            format!("v {} / q {}", v.cols(), q.len()),
            format!("d_v {} / d_q {}", p.d_v, p.d_q),
        ));
    }
    let n = v.rows();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut hid = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut proj = Vec::with_capacity(n);
    let score_vec = set.value(p.score).row(0).to_vec();
    for i in 0..n {
        let mut u = Vec::with_capacity(p.d_v + p.d_q);
        u.extend_from_slice(v.row(i));
        u.extend_from_slice(q);
        let mut a = set.value(p.w).matvec(&u);
        for (x, b) in a.iter_mut().zip(set.value(p.b).row(0)) {
            *x += b;
        }
        let h: Vec<f64> = a.iter().map(|&x| x.max(0.0)).collect();
        scores.push(dot(&score_vec, &h));
        proj.push(set.value(p.w_v).matvec(v.row(i)));
        inputs.push(u);
        pre.push(a);
        hid.push(h);
    }
    let sel: Vec<usize> = (0..n).collect();
    let weights = softmax_masked(&scores, &sel)?;
    let mut pooled = vec![0.0; p.d_q];
    for (wn, pn) in weights.iter().zip(&proj) {
        for (o, &x) in pooled.iter_mut().zip(pn) {
            *o += wn * x;
        }
    }
    Ok((
        pooled,
        AttentionTrace {
            inputs,
            a: pre,
            h: hid,
            weights,
            proj,
            v_in: v.clone(),
        },
    ))
}

/// Backward; returns (dV, dq) and accumulates parameter gradients.
pub fn attention_backward(
    trace: &AttentionTrace,
    d_pooled: &[f64],
    p: &AttentionParams,
    set: &mut ParamSet,
) -> Result<(Tensor2, Vec<f64>)> {
    let n = trace.weights.len();
    let mut d_v = Tensor2::zeros(n, p.d_v);
    let mut d_q = vec![0.0; p.d_q];

    // weighted-sum pooling
    let d_beta: Vec<f64> = trace.proj.iter().map(|pn| dot(d_pooled, pn)).collect();
    for i in 0..n {
        let beta = trace.weights[i];
        if beta != 0.0 {
            set.grad_mut(p.w_v)
                .add_outer(beta, d_pooled, trace.v_in.row(i));
            let back = set.value(p.w_v).matvec_t(d_pooled);
            for (acc, &x) in d_v.row_mut(i).iter_mut().zip(&back) {
                *acc += beta * x;
            }
        }
    }

    // softmax over scores
    let inner: f64 = d_beta.iter().zip(&trace.weights).map(|(d, b)| d * b).sum();
    let d_scores: Vec<f64> = trace
        .weights
        .iter()
        .zip(&d_beta)
        .map(|(&b, &d)| b * (d - inner))
        .collect();

    let score_vec = set.value(p.score).row(0).to_vec();
    for i in 0..n {
        let ds = d_scores[i];
        if ds == 0.0 {
            continue;
        }
        for (g, &h) in set.grad_mut(p.score).row_mut(0).iter_mut().zip(&trace.h[i]) {
            *g += ds * h;
        }
        let da: Vec<f64> = trace.a[i]
            .iter()
            .zip(&score_vec)
            .map(|(&a, &s)| if a > 0.0 { ds * s } else { 0.0 })
            .collect();
        set.grad_mut(p.w).add_outer(1.0, &da, &trace.inputs[i]);
        for (g, d) in set.grad_mut(p.b).row_mut(0).iter_mut().zip(&da) {
            *g += d;
        }
        let du = set.value(p.w).matvec_t(&da);
        for (acc, &x) in d_v.row_mut(i).iter_mut().zip(&du[..p.d_v]) {
            *acc += x;
        }
        for (acc, &x) in d_q.iter_mut().zip(&du[p.d_v..]) {
            *acc += x;
        }
    }
    Ok((d_v, d_q))
}
