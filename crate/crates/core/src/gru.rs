//! Question encoder: embedding lookup folded through a GRU. The recurrence
//! uses the standard convention where the update gate mixes the candidate
//! state:
//!
//!   z = sigmoid(W_z x + U_z h + b_z)
//!   r = sigmoid(W_r x + U_r h + b_r)
//!   h~ = tanh(W_h x + U_h (r .* h) + b_h)
//!   h' = (1 - z) .* h + z .* h~
//!
//! Dynamic length: iteration stops at the true sequence length, so padding
//! beyond it can never touch the encoding.

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Tensor2};

#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub d_w: usize,
    pub d_q: usize,
}

impl GruParams {
    pub fn init(d_w: usize, d_q: usize, set: &mut ParamSet, rng: &mut Rng) -> Self {
        let mut mat = |name: &str, rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            set.add(
                format!("gru.{name}"),
                Tensor2::from_fn(rows, cols, |_, _| rng.normal(0.0, scale)),
                true,
            )
        };
        let w_z = mat("w_z", d_q, d_w);
        let w_r = mat("w_r", d_q, d_w);
        let w_h = mat("w_h", d_q, d_w);
        let u_z = mat("u_z", d_q, d_q);
        let u_r = mat("u_r", d_q, d_q);
        let u_h = mat("u_h", d_q, d_q);
        // Negative update-gate bias starts the gate near 0.27, so early
        // tokens persist in the final state instead of being overwritten
        // step by step; with a zero bias the encoder tends to collapse to a
        // last-token attractor and distinct questions become inseparable.
        let b_z = set.add("gru.b_z", Tensor2::from_fn(1, d_q, |_, _| -1.0), true);
        let b_r = set.add("gru.b_r", Tensor2::zeros(1, d_q), true);
        let b_h = set.add("gru.b_h", Tensor2::zeros(1, d_q), true);
        GruParams {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            d_w,
            d_q,
        }
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GruStepCache {
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub h_bar: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GruTrace {
    pub token_ids: Vec<usize>,
    pub steps: Vec<GruStepCache>,
    pub q: Vec<f64>,
}

/// One GRU step. Returns the new hidden state and the cached activations.
pub fn gru_step(
    x: &[f64],
    h_prev: &[f64],
    p: &GruParams,
    set: &ParamSet,
) -> Result<(Vec<f64>, GruStepCache)> {
    if x.len() != p.d_w || h_prev.len() != p.d_q {
        return Err(Error::dim(
            "gru_step",
            format!("x {} / h {}", x.len(), h_prev.len()),
            format!("d_w {} / d_q {}", p.d_w, p.d_q),
        ));
    }
    let gate = |w: ParamId, u: ParamId, b: ParamId, hin: &[f64]| -> Vec<f64> {
        let wx = set.value(w).matvec(x);
        let uh = set.value(u).matvec(hin);
        let bias = set.value(b).row(0);
        wx.iter()
            .zip(&uh)
            .zip(bias)
            .map(|((a, b), c)| a + b + c)
            .collect()
    };
    let z: Vec<f64> = gate(p.w_z, p.u_z, p.b_z, h_prev)
        .into_iter()
        .map(sigmoid)
        .collect();
    let r: Vec<f64> = gate(p.w_r, p.u_r, p.b_r, h_prev)
        .into_iter()
        .map(sigmoid)
        .collect();
    let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let h_bar: Vec<f64> = gate(p.w_h, p.u_h, p.b_h, &rh)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let h: Vec<f64> = z
        .iter()
        .zip(h_prev)
        .zip(&h_bar)
        .map(|((zi, hp), hb)| (1.0 - zi) * hp + zi * hb)
        .collect();
    Ok((
        h,
        GruStepCache {
            h_prev: h_prev.to_vec(),
            z,
            r,
            h_bar,
        },
    ))
}

/// Fold the GRU over a token sequence from a zero initial state; the final
/// hidden state is the question encoding.
pub fn encode_question(
    token_ids: &[usize],
    table: &EmbeddingTable,
    p: &GruParams,
    set: &ParamSet,
) -> Result<(Vec<f64>, GruTrace)> {
    if token_ids.is_empty() {
        return Err(Error::Input("encode_question: empty token sequence".into()));
    }
    let vectors = set.value(table.vectors);
    let mut h = vec![0.0; p.d_q];
    let mut steps = Vec::with_capacity(token_ids.len());
    for &tid in token_ids {
        let x = vectors.row(tid);
        let (h_next, cache) = gru_step(x, &h, p, set)?;
        steps.push(cache);
        h = h_next;
    }
    Ok((
        h.clone(),
        GruTrace {
            token_ids: token_ids.to_vec(),
            steps,
            q: h,
        },
    ))
}

/// Backpropagate `d_q_grad` (gradient at the final hidden state) through the
/// whole sequence, accumulating into GRU parameters and embedding rows.
pub fn gru_backward(
    trace: &GruTrace,
    d_q_grad: &[f64],
    table: &EmbeddingTable,
    p: &GruParams,
    set: &mut ParamSet,
) -> Result<()> {
    if trace.steps.is_empty() {
        return Err(Error::State("gru_backward: no cached forward".into()));
    }
    let d_q = p.d_q;
    let mut dh = d_q_grad.to_vec();
    for (t, cache) in trace.steps.iter().enumerate().rev() {
        let tid = trace.token_ids[t];
        let x = set.value(table.vectors).row(tid).to_vec();
        let GruStepCache {
            h_prev,
            z,
            r,
            h_bar,
        } = cache;

        // h = (1-z) h_prev + z h_bar
        let mut dh_prev: Vec<f64> = dh.iter().zip(z).map(|(d, zi)| d * (1.0 - zi)).collect();
        let dz_pre: Vec<f64> = (0..d_q)
            .map(|i| dh[i] * (h_bar[i] - h_prev[i]) * z[i] * (1.0 - z[i]))
            .collect();
        let dhbar_pre: Vec<f64> = (0..d_q)
            .map(|i| dh[i] * z[i] * (1.0 - h_bar[i] * h_bar[i]))
            .collect();

        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();

        // candidate gate
        set.grad_mut(p.w_h).add_outer(1.0, &dhbar_pre, &x);
        set.grad_mut(p.u_h).add_outer(1.0, &dhbar_pre, &rh);
        for (g, d) in set.grad_mut(p.b_h).row_mut(0).iter_mut().zip(&dhbar_pre) {
            *g += d;
        }
        let drh = set.value(p.u_h).matvec_t(&dhbar_pre);
        let dr_pre: Vec<f64> = (0..d_q)
            .map(|i| drh[i] * h_prev[i] * r[i] * (1.0 - r[i]))
            .collect();
        for i in 0..d_q {
            dh_prev[i] += drh[i] * r[i];
        }

        // update gate
        set.grad_mut(p.w_z).add_outer(1.0, &dz_pre, &x);
        set.grad_mut(p.u_z).add_outer(1.0, &dz_pre, h_prev);
        for (g, d) in set.grad_mut(p.b_z).row_mut(0).iter_mut().zip(&dz_pre) {
            *g += d;
        }
        let back_z = set.value(p.u_z).matvec_t(&dz_pre);

        // reset gate
        set.grad_mut(p.w_r).add_outer(1.0, &dr_pre, &x);
        set.grad_mut(p.u_r).add_outer(1.0, &dr_pre, h_prev);
        for (g, d) in set.grad_mut(p.b_r).row_mut(0).iter_mut().zip(&dr_pre) {
            *g += d;
        }
        let back_r = set.value(p.u_r).matvec_t(&dr_pre);

        for i in 0..d_q {
            dh_prev[i] += back_z[i] + back_r[i];
        }

        // input gradient into the embedding row
        let dx_z = set.value(p.w_z).matvec_t(&dz_pre);
        let dx_r = set.value(p.w_r).matvec_t(&dr_pre);
        let dx_h = set.value(p.w_h).matvec_t(&dhbar_pre);
        let erow = set.grad_mut(table.vectors).row_mut(tid);
        for i in 0..erow.len() {
            erow[i] += dx_z[i] + dx_r[i] + dx_h[i];
        }

        dh = dh_prev;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn zero_gru(d_w: usize, d_q: usize, set: &mut ParamSet) -> GruParams {
        let mut rng = Rng::new(0);
        let mut p = GruParams::init(d_w, d_q, set, &mut rng);
        for id in [p.w_z, p.w_r, p.w_h, p.u_z, p.u_r, p.u_h, p.b_z, p.b_r, p.b_h] {
            set.value_mut(id).fill(0.0);
        }
        p.d_w = d_w;
        p
    }

    #[test]
    fn zero_weights_halve_hidden_state() {
        // z = sigmoid(0) = 0.5 and h~ = tanh(0) = 0, so h' = 0.5 h
        let mut set = ParamSet::new();
        let p = zero_gru(3, 4, &mut set);
        let h_prev = vec![0.4, -0.8, 1.0, 0.2];
        let (h, _) = gru_step(&[1.0, 2.0, 3.0], &h_prev, &p, &set).unwrap();
        for (out, inp) in h.iter().zip(&h_prev) {
            assert_abs_diff_eq!(*out, 0.5 * inp, epsilon = 1e-15);
        }
    }

    #[test]
    fn zero_state_zero_weights_stay_zero() {
        let mut set = ParamSet::new();
        let p = zero_gru(3, 4, &mut set);
        let (h, _) = gru_step(&[5.0, -1.0, 0.5], &vec![0.0; 4], &p, &set).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_matches_scalar_oracle() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(9);
        let p = GruParams::init(2, 3, &mut set, &mut rng);
        let x = vec![0.3, -0.7];
        let h_prev = vec![0.1, 0.2, -0.3];
        let (h, _) = gru_step(&x, &h_prev, &p, &set).unwrap();

        // element-by-element scalar recomputation
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let lin = |w: ParamId, u: ParamId, b: ParamId, hin: &[f64], i: usize| {
            let mut s = set.value(b).get(0, i);
            for j in 0..2 {
                s += set.value(w).get(i, j) * x[j];
            }
            for j in 0..3 {
                s += set.value(u).get(i, j) * hin[j];
            }
            s
        };
        for i in 0..3 {
            let z = sig(lin(p.w_z, p.u_z, p.b_z, &h_prev, i));
            let r: Vec<f64> = (0..3)
                .map(|k| sig(lin(p.w_r, p.u_r, p.b_r, &h_prev, k)))
                .collect();
            let rh: Vec<f64> = r.iter().zip(&h_prev).map(|(a, b)| a * b).collect();
            let hb = lin(p.w_h, p.u_h, p.b_h, &rh, i).tanh();
            let expect = (1.0 - z) * h_prev[i] + z * hb;
            assert_abs_diff_eq!(h[i], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_single_token_is_one_step() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(3);
        let table = EmbeddingTable::new_random(
            &["a".to_string(), "b".to_string()],
            2,
            &mut set,
            &mut rng,
        true,
        );
        let p = GruParams::init(2, 3, &mut set, &mut rng);
        let (q, _) = encode_question(&[0], &table, &p, &set).unwrap();
        let x = set.value(table.vectors).row(0).to_vec();
        let (h, _) = gru_step(&x, &vec![0.0; 3], &p, &set).unwrap();
        assert_eq!(q, h);
    }

    #[test]
    fn encode_length_three_matches_manual_composition() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(4);
        let table = EmbeddingTable::new_random(
            &["a".into(), "b".into(), "c".into()],
            3,
            &mut set,
            &mut rng,
            true,
        );
        let p = GruParams::init(3, 4, &mut set, &mut rng);
        let ids = [2usize, 0, 1];
        let (q, _) = encode_question(&ids, &table, &p, &set).unwrap();
        let mut h = vec![0.0; 4];
        for &tid in &ids {
            let x = set.value(table.vectors).row(tid).to_vec();
            h = gru_step(&x, &h, &p, &set).unwrap().0;
        }
        for (a, b) in q.iter().zip(&h) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn encode_empty_errors() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(5);
        let table = EmbeddingTable::new_random(&["a".into()], 2, &mut set, &mut rng, true);
        let p = GruParams::init(2, 2, &mut set, &mut rng);
        assert!(encode_question(&[], &table, &p, &set).is_err());
    }

    #[test]
    fn hidden_state_stays_in_convex_range() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(6);
        let table = EmbeddingTable::new_random(&["a".into(), "b".into()], 4, &mut set, &mut rng, true);
        let p = GruParams::init(4, 5, &mut set, &mut rng);
        let mut h = vec![0.0; 5];
        for step in 0..20 {
            let x = set.value(table.vectors).row(step % 2).to_vec();
            let bound: Vec<f64> = h.iter().map(|v: &f64| v.abs().max(1.0)).collect();
            h = gru_step(&x, &h, &p, &set).unwrap().0;
            for (hi, bi) in h.iter().zip(&bound) {
                assert!(hi.abs() <= bi + 1e-12);
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(7);
        let table = EmbeddingTable::new_random(&["a".into(), "b".into()], 3, &mut set, &mut rng, true);
        let p = GruParams::init(3, 4, &mut set, &mut rng);
        let (_, trace) = encode_question(&[0, 1, 0], &table, &p, &set).unwrap();
        gru_backward(&trace, &[0.0; 4], &table, &p, &mut set).unwrap();
        for (_, param) in set.iter() {
            assert!(param.grad.data().iter().all(|&g| g == 0.0), "{}", param.name);
        }
    }

    #[test]
    fn unused_vocab_rows_get_zero_grad() {
        let mut set = ParamSet::new();
        let mut rng = Rng::new(8);
        let table = EmbeddingTable::new_random(
            &["a".into(), "b".into(), "c".into()],
            3,
            &mut set,
            &mut rng,
            true,
        );
        let p = GruParams::init(3, 4, &mut set, &mut rng);
        let (_, trace) = encode_question(&[0, 0], &table, &p, &set).unwrap();
        gru_backward(&trace, &[1.0, -1.0, 0.5, 2.0], &table, &p, &mut set).unwrap();
        let g = set.get(table.vectors);
        let b_row = g.grad.row(1);
        assert!(b_row.iter().all(|&v| v == 0.0));
        assert!(g.grad.row(0).iter().any(|&v| v != 0.0));
    }

    /// Central finite differences over every GRU parameter and the used
    /// embedding rows on a tiny configuration.
    #[test]
    fn backward_matches_finite_differences() {
        let d_w = 3;
        let d_q = 4;
        let ids = [0usize, 1, 2];
        let build = |set: &mut ParamSet| {
            let mut rng = Rng::new(11);
            let table = EmbeddingTable::new_random(
                &["a".into(), "b".into(), "c".into()],
                d_w,
                set,
                &mut rng,
                true,
            );
            let p = GruParams::init(d_w, d_q, set, &mut rng);
            (table, p)
        };
        // loss = sum of squares of q, a simple downstream scalar
        let mut set = ParamSet::new();
        let (table, p) = build(&mut set);
        let loss = |set: &ParamSet| -> f64 {
            let (q, _) = encode_question(&ids, &table, &p, set).unwrap();
            q.iter().map(|v| v * v).sum::<f64>() * 0.5
        };
        let (q, trace) = encode_question(&ids, &table, &p, &set).unwrap();
        gru_backward(&trace, &q, &table, &p, &mut set).unwrap();

        let eps = 1e-5;
        let n = set.len();
        let mut max_rel: f64 = 0.0;
        for pi in 0..n {
            let id = crate::param::ParamId(pi);
            for k in 0..set.value(id).len() {
                let orig = set.value(id).data()[k];
                set.value_mut(id).data_mut()[k] = orig + eps;
                let lp = loss(&set);
                set.value_mut(id).data_mut()[k] = orig - eps;
                let lm = loss(&set);
                set.value_mut(id).data_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let an = set.get(id).grad.data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-5, "max relative error {max_rel}");
    }
}
