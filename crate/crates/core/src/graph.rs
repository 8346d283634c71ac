//! Question-conditioned graph learner. Each object feature is concatenated
//! with the question encoding and pushed through a two-layer ReLU network F;
//! the adjacency matrix is the Gram matrix of the resulting embeddings,
//! sparsified per row to the top-m entries, with softmax edge weights over
//! each neighborhood.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::{softmax_masked, Tensor2};

/// The joint embedding network F: ReLU(W2 ReLU(W1 [v || q] + b1) + b2).
#[derive(Clone, Debug)]
pub struct JointEmbedF {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub d_q: usize,
    pub d_g: usize,
    pub d_e: usize,
}

impl JointEmbedF {
    pub fn init(d_v: usize, d_q: usize, d_g: usize, d_e: usize, set: &mut ParamSet, rng: &mut Rng) -> Self {
        let d_in = d_v + d_q;
        let s1 = 1.0 / (d_in as f64).sqrt();
        let s2 = 1.0 / (d_g as f64).sqrt();
        JointEmbedF {
            w1: set.add("f.w1", Tensor2::from_fn(d_g, d_in, |_, _| rng.normal(0.0, s1)), true),
            b1: set.add("f.b1", Tensor2::zeros(1, d_g), true),
            w2: set.add("f.w2", Tensor2::from_fn(d_e, d_g, |_, _| rng.normal(0.0, s2)), true),
            b2: set.add("f.b2", Tensor2::zeros(1, d_e), true),
            d_in,
            d_q,
            d_g,
            d_e,
        }
    }
}

/// Learned graph structure: dense adjacency, per-node top-m neighborhoods,
/// and softmax edge weights over each neighborhood.
#[derive(Clone, Debug)]
pub struct LearnedGraph {
    pub a: Tensor2,
    pub neighborhoods: Vec<Vec<usize>>,
    pub alpha: Vec<Vec<f64>>,
    pub m: usize,
}

impl LearnedGraph {
    pub fn n(&self) -> usize {
        self.neighborhoods.len()
    }

    /// Total alpha mass incident to each node (incoming plus outgoing).
    pub fn node_degrees(&self) -> Vec<f64> {
        let mut deg = vec![0.0; self.n()];
        for (i, (nbrs, al)) in self.neighborhoods.iter().zip(&self.alpha).enumerate() {
            // outgoing mass to i, incoming mass to j; a self loop counts in both sums
            for (&j, &w) in nbrs.iter().zip(al) {
                deg[i] += w;
                deg[j] += w;
            }
        }
        deg
    }
}

/// Per-node activation cache for [`graph_learner_backward`].
#[derive(Clone, Debug)]
pub struct NodeEmbedCache {
    pub input: Vec<f64>,
    pub a1: Vec<f64>,
    pub h1: Vec<f64>,
    pub a2: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GraphTrace {
    pub node_caches: Vec<NodeEmbedCache>,
    pub e: Tensor2,
    pub graph: LearnedGraph,
}

/// e_n = F([v_n || q]). Returns the embedding and cached pre-activations.
pub fn joint_embed(
    v_n: &[f64],
    q: &[f64],
    f: &JointEmbedF,
    set: &ParamSet,
) -> Result<(Vec<f64>, NodeEmbedCache)> {
    if v_n.len() + q.len() != f.d_in {
        return Err(Error::dim(
            "joint_embed",
            format!("v {} + q {}", v_n.len(), q.len()),
            format!("d_in {}", f.d_in),
        ));
    }
    let mut input = Vec::with_capacity(f.d_in);
    input.extend_from_slice(v_n);
    input.extend_from_slice(q);
    let mut a1 = set.value(f.w1).matvec(&input);
    for (a, b) in a1.iter_mut().zip(set.value(f.b1).row(0)) {
        *a += b;
    }
    let h1: Vec<f64> = a1.iter().map(|&v| v.max(0.0)).collect();
    let mut a2 = set.value(f.w2).matvec(&h1);
    for (a, b) in a2.iter_mut().zip(set.value(f.b2).row(0)) {
        *a += b;
    }
    let e: Vec<f64> = a2.iter().map(|&v| v.max(0.0)).collect();
    Ok((e, NodeEmbedCache { input, a1, h1, a2 }))
}

/// A = E E^T. Symmetric with nonnegative diagonal by construction.
pub fn build_adjacency(e: &Tensor2) -> Tensor2 {
    let n = e.rows();
    let mut a = Tensor2::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = crate::tensor::dot(e.row(i), e.row(j));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
    a
}

/// Indices of the m largest values of `row`, ties broken by lower index,
/// output sorted ascending.
pub fn top_m(row: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > row.len() {
        return Err(Error::Config(format!(
            "top_m: m={} exceeds row length {}",
            m,
            row.len()
        )));
    }
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort by descending value keeps lower indices first on ties
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    let mut sel: Vec<usize> = idx.into_iter().take(m).collect();
    sel.sort_unstable();
    Ok(sel)
}

/// Softmax edge weights over a node's selected neighborhood.
pub fn edge_weights(row: &[f64], neighborhood: &[usize]) -> Result<Vec<f64>> {
    softmax_masked(row, neighborhood)
}

/// Full graph learner: embeddings, adjacency, per-row top-m, edge weights.
pub fn learn_graph(
    v: &Tensor2,
    q: &[f64],
    f: &JointEmbedF,
    m: usize,
    force_self_loop: bool,
    set: &ParamSet,
) -> Result<(LearnedGraph, GraphTrace)> {
    let n = v.rows();
    if n == 0 || m == 0 || m > n {
        return Err(Error::Config(format!("learn_graph: need N >= m >= 1, got N={n}, m={m}")));
    }
    let mut e = Tensor2::zeros(n, f.d_e);
    let mut node_caches = Vec::with_capacity(n);
    for i in 0..n {
        let (ei, cache) = joint_embed(v.row(i), q, f, set)?;
        e.row_mut(i).copy_from_slice(&ei);
        node_caches.push(cache);
    }
    let a = build_adjacency(&e);
    let mut neighborhoods = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    for i in 0..n {
        let mut sel = top_m(a.row(i), m)?;
        if force_self_loop && !sel.contains(&i) {
            // replace the lowest-ranked selected entry with the self index
            let worst = *sel
                .iter()
                .min_by(|&&x, &&y| a.get(i, x).partial_cmp(&a.get(i, y)).unwrap())
                .unwrap();
            sel.retain(|&j| j != worst);
            sel.push(i);
            sel.sort_unstable();
        }
        let al = edge_weights(a.row(i), &sel)?;
        neighborhoods.push(sel);
        alpha.push(al);
    }
    let graph = LearnedGraph {
        a,
        neighborhoods,
        alpha,
        m,
    };
    Ok((
        graph.clone(),
        GraphTrace {
            node_caches,
            e,
            graph,
        },
    ))
}

/// Backward pass. `d_alpha[i]` is the upstream gradient for node i's edge
/// weights. The top-m routing is treated as constant; gradients flow through
/// the selected adjacency values only. Returns (dV, dq) and accumulates F's
/// parameter gradients.
pub fn graph_learner_backward(
    trace: &GraphTrace,
    d_alpha: &[Vec<f64>],
    f: &JointEmbedF,
    set: &mut ParamSet,
) -> Result<(Tensor2, Vec<f64>)> {
    let g = &trace.graph;
    let n = g.n();
    if d_alpha.len() != n {
        return Err(Error::State("graph_learner_backward: d_alpha size mismatch".into()));
    }
    let d_e_width = trace.e.cols();

    // softmax backward per row -> sparse dA
    let mut d_e = Tensor2::zeros(n, d_e_width);
    for i in 0..n {
        let al = &g.alpha[i];
        let da = &d_alpha[i];
        if da.len() != al.len() {
            return Err(Error::State("graph_learner_backward: alpha row size mismatch".into()));
        }
        let inner: f64 = da.iter().zip(al).map(|(d, a)| d * a).sum();
        for (k, &j) in g.neighborhoods[i].iter().enumerate() {
            let d_aij = al[k] * (da[k] - inner);
            if d_aij != 0.0 {
                // A_ij = e_i . e_j
                let (ei, ej): (Vec<f64>, Vec<f64>) =
                    (trace.e.row(i).to_vec(), trace.e.row(j).to_vec());
                for (gi, &v) in d_e.row_mut(i).iter_mut().zip(&ej) {
                    *gi += d_aij * v;
                }
                for (gj, &v) in d_e.row_mut(j).iter_mut().zip(&ei) {
                    *gj += d_aij * v;
                }
            }
        }
    }

    backward_f_nodes(trace, &d_e, f, set)
}

fn backward_f_nodes(
    trace: &GraphTrace,
    d_e: &Tensor2,
    f: &JointEmbedF,
    set: &mut ParamSet,
) -> Result<(Tensor2, Vec<f64>)> {
    let n = trace.node_caches.len();
    let d_in = f.d_in;
    let mut d_input = Tensor2::zeros(n, d_in);
    for i in 0..n {
        let cache = &trace.node_caches[i];
        let de_row = d_e.row(i);
        // ReLU at the output layer
        let da2: Vec<f64> = de_row
            .iter()
            .zip(&cache.a2)
            .map(|(d, &a)| if a > 0.0 { *d } else { 0.0 })
            .collect();
        set.grad_mut(f.w2).add_outer(1.0, &da2, &cache.h1);
        for (g, d) in set.grad_mut(f.b2).row_mut(0).iter_mut().zip(&da2) {
            *g += d;
        }
        let dh1 = set.value(f.w2).matvec_t(&da2);
        let da1: Vec<f64> = dh1
            .iter()
            .zip(&cache.a1)
            .map(|(d, &a)| if a > 0.0 { *d } else { 0.0 })
            .collect();
        set.grad_mut(f.w1).add_outer(1.0, &da1, &cache.input);
        for (g, d) in set.grad_mut(f.b1).row_mut(0).iter_mut().zip(&da1) {
            *g += d;
        }
        let din = set.value(f.w1).matvec_t(&da1);
        d_input.row_mut(i).copy_from_slice(&din);
    }
    // split the concatenated input gradient back into [v || q]
    let split = d_in - f.d_q;
    let mut dv = Tensor2::zeros(n, split);
    let mut dq = vec![0.0; f.d_q];
    for i in 0..n {
        let row = d_input.row(i);
        dv.row_mut(i).copy_from_slice(&row[..split]);
        for (acc, &v) in dq.iter_mut().zip(&row[split..]) {
            *acc += v;
        }
    }
    Ok((dv, dq))
}
