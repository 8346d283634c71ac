//! Spatial graph convolutions. Neighbor influence is a set of K Gaussian
//! kernels over polar pseudo-coordinates (distance and angle between box
//! centres), reweighted by the learned edge weights alpha, with one filter
//! matrix per kernel and kernel outputs concatenated channel-wise.

use crate::error::{Error, Result};
use crate::graph::LearnedGraph;
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{dot, Tensor2};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;

/// Relative polar position of node j's box centre in a frame centred at
/// node i. Angles follow image coordinates (y grows downward).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoCoord {
    pub rho: f64,
    pub theta: f64,
}

/// Box centre from normalized corners (x1, y1, x2, y2).
pub fn box_centre(corners: &[f64]) -> (f64, f64) {
    ((corners[0] + corners[2]) / 2.0, (corners[1] + corners[3]) / 2.0)
}

fn validate_box(b: &[f64]) -> Result<()> {
    if b.len() != 4 {
        return Err(Error::Input(format!("box needs 4 corners, got {}", b.len())));
    }
    let ok = b.iter().all(|&v| (0.0..=1.0).contains(&v)) && b[0] <= b[2] && b[1] <= b[3];
    if !ok {
        return Err(Error::Input(format!("malformed box {b:?}")));
    }
    Ok(())
}

/// Polar pseudo-coordinates between two boxes' centres.
pub fn pseudo_coords(box_i: &[f64], box_j: &[f64]) -> Result<PseudoCoord> {
    validate_box(box_i)?;
    validate_box(box_j)?;
    let (xi, yi) = box_centre(box_i);
    let (xj, yj) = box_centre(box_j);
    let dx = xj - xi;
    let dy = yj - yi;
    let rho = (dx * dx + dy * dy).sqrt();
    let theta = if rho < 1e-9 { 0.0 } else { dy.atan2(dx) };
    Ok(PseudoCoord { rho, theta })
}

/// All pairwise pseudo-coordinates for a scene's boxes (N x N).
pub fn pairwise_coords(boxes: &Tensor2) -> Result<Vec<Vec<PseudoCoord>>> {
    let n = boxes.rows();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            row.push(pseudo_coords(boxes.row(i), boxes.row(j))?);
        }
        out.push(row);
    }
    Ok(out)
}

#[inline]
fn clamped_sigma(log_sigma: f64) -> f64 {
    log_sigma.exp().clamp(SIGMA_MIN, SIGMA_MAX)
}

/// Unnormalized Gaussian bump: exp(-1/2 sum_d ((u_d - mu_d)/sigma_d)^2).
pub fn kernel_weight(u: PseudoCoord, mu: &[f64], log_sigma: &[f64]) -> f64 {
    let s0 = clamped_sigma(log_sigma[0]);
    let s1 = clamped_sigma(log_sigma[1]);
    let d0 = (u.rho - mu[0]) / s0;
    let d1 = (u.theta - mu[1]) / s1;
    (-0.5 * (d0 * d0 + d1 * d1)).exp()
}

/// One spatial graph convolution layer: K Gaussian kernels (means over
/// (rho, theta) and log standard deviations) plus one filter matrix per
/// kernel mapping aggregated features to a d_h/K channel slice.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub mu: ParamId,        // K x 2
    pub log_sigma: ParamId, // K x 2
    pub filters: Vec<ParamId>,
    pub k: usize,
    pub d_in: usize,
    pub d_h: usize,
}

impl ConvLayer {
    pub fn init(
        name: &str,
        k: usize,
        d_in: usize,
        d_h: usize,
        set: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self> {
        Self::init_with_sigma(name, k, d_in, d_h, (2.0, std::f64::consts::PI), set, rng)
    }

    pub fn init_with_sigma(
        name: &str,
        k: usize,
        d_in: usize,
        d_h: usize,
        sigma_init: (f64, f64),
        set: &mut ParamSet,
        rng: &mut Rng,
    ) -> Result<Self> {
        if d_h % k != 0 {
            return Err(Error::Config(format!(
                "conv layer {name}: d_h={d_h} not divisible by K={k}"
            )));
        }
        if !(sigma_init.0 > 0.0 && sigma_init.1 > 0.0) {
            return Err(Error::Config(format!(
                "conv layer {name}: kernel sigma init {sigma_init:?} must be positive"
            )));
        }
        // mu_rho uniform over the near half of the unit-square distance
        // range; mu_theta at K equally spaced angles covering the circle.
        let mu = Tensor2::from_fn(k, 2, |r, c| {
            if c == 0 {
                rng.uniform_in(0.0, 0.5)
            } else {
                -std::f64::consts::PI + (r as f64 + 1.0) * 2.0 * std::f64::consts::PI / k as f64
            }
        });
        let log_sigma = Tensor2::from_fn(k, 2, |_, c| {
            if c == 0 {
                sigma_init.0.ln()
            } else {
                sigma_init.1.ln()
            }
        });
        let mu = set.add(format!("{name}.mu"), mu, true);
        let log_sigma = set.add(format!("{name}.log_sigma"), log_sigma, true);
        let slice = d_h / k;
        let scale = 1.0 / (d_in as f64).sqrt();
        let filters = (0..k)
            .map(|ki| {
                set.add(
                    format!("{name}.g{ki}"),
                    Tensor2::from_fn(slice, d_in, |_, _| rng.normal(0.0, scale)),
                    true,
                )
            })
            .collect();
        Ok(ConvLayer {
            mu,
            log_sigma,
            filters,
            k,
            d_in,
            d_h,
        })
    }
}

/// Patch operator at node i: f_k(i) = sum_{j in N(i)} w_k(u(i,j)) alpha_ij v_j
/// for every kernel k. Returns K vectors of width d_in.
pub fn patch_operator(
    i: usize,
    v_in: &Tensor2,
    g: &LearnedGraph,
    coords: &[Vec<PseudoCoord>],
    mu: &Tensor2,
    log_sigma: &Tensor2,
) -> Vec<Vec<f64>> {
    let k = mu.rows();
    let d = v_in.cols();
    let mut out = vec![vec![0.0; d]; k];
    for (pos, &j) in g.neighborhoods[i].iter().enumerate() {
        let alpha = g.alpha[i][pos];
        let u = coords[i][j];
        let vj = v_in.row(j);
        for (ki, f) in out.iter_mut().enumerate() {
            let w = kernel_weight(u, mu.row(ki), log_sigma.row(ki));
            let c = w * alpha;
            for (acc, &v) in f.iter_mut().zip(vj) {
                *acc += c * v;
            }
        }
    }
    out
}

/// Forward cache for one conv layer.
#[derive(Clone, Debug)]
pub struct ConvTrace {
    pub v_in: Tensor2,
    pub pre: Tensor2,              // N x d_h, pre-ReLU
    pub patches: Vec<Vec<Vec<f64>>>, // [node][kernel][d_in]
}

/// h_i = ReLU(concat_k G_k f_k(i)).
pub fn conv_forward(
    v_in: &Tensor2,
    g: &LearnedGraph,
    coords: &[Vec<PseudoCoord>],
    layer: &ConvLayer,
    set: &ParamSet,
) -> Result<(Tensor2, ConvTrace)> {
    if v_in.cols() != layer.d_in {
        return Err(Error::dim(
            "conv_forward",
            format!("d_in {}", v_in.cols()),
            format!("layer d_in {}", layer.d_in),
        ));
    }
    let n = v_in.rows();
    let slice = layer.d_h / layer.k;
    let mu = set.value(layer.mu).clone();
    let log_sigma = set.value(layer.log_sigma).clone();
    let mut pre = Tensor2::zeros(n, layer.d_h);
    let mut patches = Vec::with_capacity(n);
    for i in 0..n {
        let f = patch_operator(i, v_in, g, coords, &mu, &log_sigma);
        for ki in 0..layer.k {
            let gk = set.value(layer.filters[ki]);
            let out = gk.matvec(&f[ki]);
            pre.row_mut(i)[ki * slice..(ki + 1) * slice].copy_from_slice(&out);
        }
        patches.push(f);
    }
    let h = crate::tensor::relu(&pre);
    Ok((
        h,
        ConvTrace {
            v_in: v_in.clone(),
            pre,
            patches,
        },
    ))
}

/// Backward through one conv layer. Accumulates gradients for the filters,
/// kernel means and log-sigmas; returns the gradient w.r.t. the layer input
/// and the per-node alpha gradients (to be routed to the graph learner).
pub fn conv_backward(
    trace: &ConvTrace,
    d_h: &Tensor2,
    g: &LearnedGraph,
    coords: &[Vec<PseudoCoord>],
    layer: &ConvLayer,
    set: &mut ParamSet,
) -> Result<(Tensor2, Vec<Vec<f64>>)> {
    let n = trace.v_in.rows();
    if d_h.shape() != (n, layer.d_h) {
        return Err(Error::State("conv_backward: upstream shape mismatch".into()));
    }
    let slice = layer.d_h / layer.k;
    let mu = set.value(layer.mu).clone();
    let log_sigma = set.value(layer.log_sigma).clone();
    let mut d_v = Tensor2::zeros(n, layer.d_in);
    let mut d_alpha: Vec<Vec<f64>> = g.alpha.iter().map(|a| vec![0.0; a.len()]).collect();
    let mut d_mu = Tensor2::zeros(layer.k, 2);
    let mut d_log_sigma = Tensor2::zeros(layer.k, 2);

    for i in 0..n {
        let pre_row = trace.pre.row(i);
        let dh_row = d_h.row(i);
        for ki in 0..layer.k {
            let dpre: Vec<f64> = (0..slice)
                .map(|c| {
                    let idx = ki * slice + c;
                    if pre_row[idx] > 0.0 {
                        dh_row[idx]
                    } else {
                        0.0
                    }
                })
                .collect();
            if dpre.iter().all(|&x| x == 0.0) {
                continue;
            }
            let fk = &trace.patches[i][ki];
            set.grad_mut(layer.filters[ki]).add_outer(1.0, &dpre, fk);
            let dfk = set.value(layer.filters[ki]).matvec_t(&dpre);

            let mu_k = mu.row(ki);
            let ls_k = log_sigma.row(ki);
            let s0 = clamped_sigma(ls_k[0]);
            let s1 = clamped_sigma(ls_k[1]);
            let clamped0 = ls_k[0].exp() < SIGMA_MIN || ls_k[0].exp() > SIGMA_MAX;
            let clamped1 = ls_k[1].exp() < SIGMA_MIN || ls_k[1].exp() > SIGMA_MAX;
            for (pos, &j) in g.neighborhoods[i].iter().enumerate() {
                let alpha = g.alpha[i][pos];
                let u = coords[i][j];
                let w = kernel_weight(u, mu_k, ls_k);
                let vj = trace.v_in.row(j);
                // d/d v_j
                let c = w * alpha;
                if c != 0.0 {
                    for (acc, &dv) in d_v.row_mut(j).iter_mut().zip(&dfk) {
                        *acc += c * dv;
                    }
                }
                let s = dot(&dfk, vj);
                d_alpha[i][pos] += s * w;
                let dw = s * alpha;
                if dw != 0.0 && w != 0.0 {
                    let z0 = (u.rho - mu_k[0]) / s0;
                    let z1 = (u.theta - mu_k[1]) / s1;
                    d_mu.row_mut(ki)[0] += dw * w * z0 / s0;
                    d_mu.row_mut(ki)[1] += dw * w * z1 / s1;
                    if !clamped0 {
                        d_log_sigma.row_mut(ki)[0] += dw * w * z0 * z0;
                    }
                    if !clamped1 {
                        d_log_sigma.row_mut(ki)[1] += dw * w * z1 * z1;
                    }
                }
            }
        }
    }
    set.grad_mut(layer.mu).add_assign(&d_mu)?;
    set.grad_mut(layer.log_sigma).add_assign(&d_log_sigma)?;
    Ok((d_v, d_alpha))
}
