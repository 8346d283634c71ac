//! Wires the question encoder, graph learner, spatial convolutions, and
//! prediction head into one differentiable model with three selectable image
//! pathways: the learned graph, a fixed kNN graph, and a plain attention
//! baseline.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, attention_forward, AttentionParams, AttentionTrace};
use crate::conv::{conv_backward, conv_forward, pairwise_coords, ConvLayer, ConvTrace, PseudoCoord};
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{graph_learner_backward, learn_graph, GraphTrace, JointEmbedF, LearnedGraph};
use crate::gru::{encode_question, gru_backward, GruParams, GruTrace};
use crate::head::{
    classify, classify_backward, fuse, max_pool_argmax, max_pool_nodes, soft_bce_grad, Mlp2,
    MlpTrace, SoftTargets,
};
use crate::param::ParamSet;
use crate::rng::Rng;
use crate::tensor::{dropout_mask, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Graph,
    Knn,
    Attention,
}

impl std::str::FromStr for Pathway {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(Pathway::Graph),
            "knn" => Ok(Pathway::Knn),
            "attention" => Ok(Pathway::Attention),
            other => Err(Error::Config(format!("unknown pathway {other:?}"))),
        }
    }
}

impl std::fmt::Display for Pathway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Pathway::Graph => "graph",
            Pathway::Knn => "knn",
            Pathway::Attention => "attention",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_w: usize,
    pub d_q: usize,
    pub d_v_raw: usize,
    pub d_g: usize,
    pub d_e: usize,
    pub k: usize,
    pub m: usize,
    pub l: usize,
    pub d_h: Vec<usize>,
    pub classes: usize,
    pub mlp_hidden: usize,
    pub dropout_p: f64,
    pub force_self_loop: bool,
    pub pathway: Pathway,
    /// Initial kernel standard deviations (rho, theta). Wide defaults start
    /// the Gaussian kernels nearly flat over the data range, so early
    /// training is not dominated by scene-specific geometry; both remain
    /// learnable and can sharpen.
    #[serde(default = "default_kernel_sigma")]
    pub kernel_sigma_init: (f64, f64),
    /// Learning-rate multiplier for the question encoder (word embeddings
    /// and GRU). Values < 1 keep distinct questions separable during early
    /// training instead of letting the encoder collapse onto answer
    /// marginals before the visual pathway has learned anything.
    #[serde(default = "default_question_lr_scale")]
    pub question_lr_scale: f64,
}

fn default_kernel_sigma() -> (f64, f64) {
    (2.0, std::f64::consts::PI)
}

fn default_question_lr_scale() -> f64 {
    1.0
}

impl ModelConfig {
    /// Desk-scale defaults used by the synthetic experiments.
    pub fn desk(classes: usize) -> Self {
        ModelConfig {
            d_w: 32,
            d_q: 64,
            d_v_raw: 32,
            d_g: 64,
            d_e: 64,
            k: 8,
            m: 4,
            l: 2,
            d_h: vec![128, 64],
            classes,
            mlp_hidden: 64,
            dropout_p: 0.0,
            force_self_loop: false,
            pathway: Pathway::Graph,
            kernel_sigma_init: default_kernel_sigma(),
            question_lr_scale: 1.0,
        }
    }

    /// Full-scale settings, shipped for documentation parity; not used by
    /// the desk experiments.
    pub fn paper_scale(classes: usize) -> Self {
        ModelConfig {
            d_w: 300,
            d_q: 1024,
            d_v_raw: 2048,
            d_g: 512,
            d_e: 512,
            k: 8,
            m: 16,
            l: 2,
            d_h: vec![2048, 1024],
            classes,
            mlp_hidden: 1024,
            dropout_p: 0.5,
            force_self_loop: false,
            pathway: Pathway::Graph,
            kernel_sigma_init: default_kernel_sigma(),
            question_lr_scale: 1.0,
        }
    }

    /// Tiny configuration for gradient checking.
    pub fn tiny() -> Self {
        ModelConfig {
            d_w: 5,
            d_q: 6,
            d_v_raw: 3,
            d_g: 6,
            d_e: 4,
            k: 3,
            m: 3,
            l: 1,
            d_h: vec![6],
            classes: 4,
            mlp_hidden: 6,
            dropout_p: 0.0,
            force_self_loop: false,
            pathway: Pathway::Graph,
            kernel_sigma_init: default_kernel_sigma(),
            question_lr_scale: 1.0,
        }
    }

    /// Concatenated object feature width (raw features plus 4 box corners).
    pub fn d_v(&self) -> usize {
        self.d_v_raw + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.d_h.len() != self.l {
            return Err(Error::Config(format!(
                "d_h list length {} must equal L={}",
                self.d_h.len(),
                self.l
            )));
        }
        if *self.d_h.last().unwrap() != self.d_q {
            return Err(Error::Config(format!(
                "fusion requires d_h[L-1]={} to equal d_q={}",
                self.d_h.last().unwrap(),
                self.d_q
            )));
        }
        for (i, &dh) in self.d_h.iter().enumerate() {
            if dh % self.k != 0 {
                return Err(Error::Config(format!(
                    "d_h[{i}]={dh} not divisible by K={}",
                    self.k
                )));
            }
        }
        if self.m == 0 || self.k == 0 || self.classes == 0 {
            return Err(Error::Config("m, K, classes must be positive".into()));
        }
        if !(self.kernel_sigma_init.0 > 0.0 && self.kernel_sigma_init.1 > 0.0) {
            return Err(Error::Config(format!(
                "kernel_sigma_init {:?} must be positive",
                self.kernel_sigma_init
            )));
        }
        if !(self.question_lr_scale > 0.0 && self.question_lr_scale.is_finite()) {
            return Err(Error::Config(format!(
                "question_lr_scale {} must be positive",
                self.question_lr_scale
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} not in [0,1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Forward or training mode; training carries the dropout source.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut Rng, dropout_p: f64 },
}

#[derive(Clone, Debug)]
pub enum PathTrace {
    Graph {
        graph: GraphTrace,
        convs: Vec<ConvTrace>,
        coords: Vec<Vec<PseudoCoord>>,
    },
    Knn {
        graph: LearnedGraph,
        convs: Vec<ConvTrace>,
        coords: Vec<Vec<PseudoCoord>>,
    },
    Attention(AttentionTrace),
}

/// Cached intermediates of one forward pass, consumed by [`Model::backward`]
/// and by the interpretability export.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub v_mask: Vec<f64>,
    pub v_used: Tensor2,
    pub gru: GruTrace,
    pub q: Vec<f64>,
    pub path: PathTrace,
    pub h_max: Vec<f64>,
    pub pool_argmax: Vec<usize>,
    pub fused: Vec<f64>,
    pub mlp: MlpTrace,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// The learned (or fixed) graph of this pass, when the pathway has one.
    pub fn graph(&self) -> Option<&LearnedGraph> {
        match &self.path {
            PathTrace::Graph { graph, .. } => Some(&graph.graph),
            PathTrace::Knn { graph, .. } => Some(graph),
            PathTrace::Attention(_) => None,
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub set: ParamSet,
    pub embed: EmbeddingTable,
    pub gru: GruParams,
    pub f: JointEmbedF,
    pub convs: Vec<ConvLayer>,
    pub mlp: Mlp2,
    pub attn: AttentionParams,
}

impl Model {
    /// Build a model with seeded random initialization over the given
    /// question vocabulary.
    pub fn new(cfg: ModelConfig, question_vocab: &[String], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::derive(seed, 0x6d6f64656c); // "model"
        let mut set = ParamSet::new();
        let embed = EmbeddingTable::new_random(question_vocab, cfg.d_w, &mut set, &mut rng, true);
        let gru = GruParams::init(cfg.d_w, cfg.d_q, &mut set, &mut rng);
        let f = JointEmbedF::init(cfg.d_v(), cfg.d_q, cfg.d_g, cfg.d_e, &mut set, &mut rng);
        let mut convs = Vec::with_capacity(cfg.l);
        let mut d_in = cfg.d_v();
        for (li, &dh) in cfg.d_h.iter().enumerate() {
            convs.push(ConvLayer::init_with_sigma(
                &format!("conv{li}"),
                cfg.k,
                d_in,
                dh,
                cfg.kernel_sigma_init,
                &mut set,
                &mut rng,
            )?);
            d_in = dh;
        }
        let mlp = Mlp2::init(cfg.d_q, cfg.mlp_hidden, cfg.classes, &mut set, &mut rng);
        let attn = AttentionParams::init(cfg.d_v(), cfg.d_q, cfg.d_g, &mut set, &mut rng);
        for (_, p) in set.iter_mut() {
            if p.name.starts_with("embed.") || p.name.starts_with("gru.") {
                p.lr_scale = cfg.question_lr_scale;
            }
        }
        Ok(Model {
            cfg,
            set,
            embed,
            gru,
            f,
            convs,
            mlp,
            attn,
        })
    }

    /// Run the full pipeline on one scene/question pair.
    /// `v` is the N x d_v feature matrix with corners already concatenated;
    /// `boxes` the N x 4 normalized corners.
    pub fn forward(
        &self,
        v: &Tensor2,
        boxes: &Tensor2,
        token_ids: &[usize],
        mode: Mode,
        want_trace: bool,
    ) -> Result<(Vec<f64>, Option<ForwardTrace>)> {
        let n = v.rows();
        if n == 0 {
            return Err(Error::Input("forward: empty scene".into()));
        }
        if v.cols() != self.cfg.d_v() {
            return Err(Error::dim(
                "forward",
                format!("features {}", v.cols()),
                format!("d_v {}", self.cfg.d_v()),
            ));
        }
        if self.cfg.pathway != Pathway::Attention && self.cfg.m > n {
            return Err(Error::Config(format!(
                "forward: m={} exceeds N={n}",
                self.cfg.m
            )));
        }

        // dropout on the image features; identity in eval mode
        let (v_mask, mlp_mask) = match mode {
            Mode::Eval => (vec![1.0; v.len()], None),
            Mode::Train { rng, dropout_p } => {
                let vm = dropout_mask(v.len(), dropout_p, true, rng)?;
                let hm = dropout_mask(self.cfg.mlp_hidden, dropout_p, true, rng)?;
                (vm, Some(hm))
            }
        };
        let mut v_used = v.clone();
        for (x, m) in v_used.data_mut().iter_mut().zip(&v_mask) {
            *x *= m;
        }

        let (q, gru_trace) = encode_question(token_ids, &self.embed, &self.gru, &self.set)?;

        let (pooled_or_hmax, path, h_for_pool): (Vec<f64>, PathTrace, Option<Tensor2>) =
            match self.cfg.pathway {
                Pathway::Graph => {
                    let coords = pairwise_coords(boxes)?;
                    let (graph, gtrace) = learn_graph(
                        &v_used,
                        &q,
                        &self.f,
                        self.cfg.m,
                        self.cfg.force_self_loop,
                        &self.set,
                    )?;
                    let (h, convs) = self.run_convs(&v_used, &graph, &coords)?;
                    (
                        Vec::new(),
                        PathTrace::Graph {
                            graph: gtrace,
                            convs,
                            coords,
                        },
                        Some(h),
                    )
                }
                Pathway::Knn => {
                    let coords = pairwise_coords(boxes)?;
                    let graph = crate::data::knn_graph_from_boxes(boxes, self.cfg.m)?;
                    let (h, convs) = self.run_convs(&v_used, &graph, &coords)?;
                    (
                        Vec::new(),
                        PathTrace::Knn {
                            graph,
                            convs,
                            coords,
                        },
                        Some(h),
                    )
                }
                Pathway::Attention => {
                    let (pooled, atrace) = attention_forward(&v_used, &q, &self.attn, &self.set)?;
                    (pooled, PathTrace::Attention(atrace), None)
                }
            };

        let (h_max, pool_argmax) = match &h_for_pool {
            Some(h) => (max_pool_nodes(h)?, max_pool_argmax(h)),
            None => (pooled_or_hmax, Vec::new()),
        };
        let fused = fuse(&h_max, &q)?;
        let (logits, mlp_trace) = classify(&fused, &self.mlp, &self.set, mlp_mask.as_deref())?;

        let trace = if want_trace {
            Some(ForwardTrace {
                v_mask,
                v_used,
                gru: gru_trace,
                q,
                path,
                h_max,
                pool_argmax,
                fused,
                mlp: mlp_trace,
                logits: logits.clone(),
            })
        } else {
            None
        };
        Ok((logits, trace))
    }

    fn run_convs(
        &self,
        v_used: &Tensor2,
        graph: &LearnedGraph,
        coords: &[Vec<PseudoCoord>],
    ) -> Result<(Tensor2, Vec<ConvTrace>)> {
        let mut traces = Vec::with_capacity(self.convs.len());
        let mut h = v_used.clone();
        for layer in &self.convs {
            let (h_next, trace) = conv_forward(&h, graph, coords, layer, &self.set)?;
            traces.push(trace);
            h = h_next;
        }
        Ok((h, traces))
    }

    /// Accumulate gradients of `scale * soft_bce_loss(targets, logits)` into
    /// the parameter set. Returns the loss value (unscaled).
    pub fn backward(&mut self, trace: &ForwardTrace, targets: &SoftTargets, scale: f64) -> Result<f64> {
        let Model {
            ref mut set,
            ref embed,
            ref gru,
            ref f,
            ref convs,
            ref mlp,
            ref attn,
            ..
        } = *self;
        let loss = crate::head::soft_bce_loss(targets, &trace.logits)?;
        let mut d_logits = soft_bce_grad(targets, &trace.logits);
        d_logits.iter_mut().for_each(|d| *d *= scale);

        let d_fused = classify_backward(&trace.mlp, &d_logits, mlp, set)?;
        // fused = h_max .* q
        let mut d_q: Vec<f64> = d_fused.iter().zip(&trace.h_max).map(|(d, h)| d * h).collect();
        let d_h_max: Vec<f64> = d_fused.iter().zip(&trace.q).map(|(d, q)| d * q).collect();

        match &trace.path {
            PathTrace::Graph {
                graph,
                convs: ctraces,
                coords,
            } => {
                let g = &graph.graph;
                let mut d_alpha: Vec<Vec<f64>> =
                    g.alpha.iter().map(|a| vec![0.0; a.len()]).collect();
                let _dv_conv = backward_conv_stack(
                    convs,
                    g,
                    ctraces,
                    coords,
                    &d_h_max,
                    Some(&mut d_alpha),
                    set,
                )?;
                let (_dv_graph, dq_extra) = graph_learner_backward(graph, &d_alpha, f, set)?;
                for (a, b) in d_q.iter_mut().zip(&dq_extra) {
                    *a += b;
                }
            }
            PathTrace::Knn {
                graph,
                convs: ctraces,
                coords,
            } => {
                backward_conv_stack(convs, graph, ctraces, coords, &d_h_max, None, set)?;
            }
            PathTrace::Attention(atrace) => {
                let (_dv, dq_extra) = attention_backward(atrace, &d_h_max, attn, set)?;
                for (a, b) in d_q.iter_mut().zip(&dq_extra) {
                    *a += b;
                }
            }
        }
        // image-feature gradients stop here: the features are inputs

        gru_backward(&trace.gru, &d_q, embed, gru, set)?;
        Ok(loss)
    }
}

/// Backward through the conv layers via the max pool. `d_alpha_out`, when
/// present, accumulates edge-weight gradients from every layer. Returns the
/// gradient w.r.t. the first layer's input features.
fn backward_conv_stack(
    layers: &[ConvLayer],
    graph: &LearnedGraph,
    traces: &[ConvTrace],
    coords: &[Vec<PseudoCoord>],
    d_h_max: &[f64],
    mut d_alpha_out: Option<&mut Vec<Vec<f64>>>,
    set: &mut ParamSet,
) -> Result<Tensor2> {
    let last = traces.last().ok_or_else(|| Error::State("no conv trace".into()))?;
    let n = last.pre.rows();
    // route pooled gradient to the argmax rows of the post-ReLU output
    let h_last = crate::tensor::relu(&last.pre);
    let arg = max_pool_argmax(&h_last);
    let mut d_h = Tensor2::zeros(n, last.pre.cols());
    for (c, (&r, &g)) in arg.iter().zip(d_h_max).enumerate() {
        d_h.set(r, c, g);
    }

    let mut upstream = d_h;
    for (layer, trace) in layers.iter().zip(traces).rev() {
        let (dv, d_alpha) = conv_backward(trace, &upstream, graph, coords, layer, set)?;
        if let Some(acc) = d_alpha_out.as_deref_mut() {
            for (row, drow) in acc.iter_mut().zip(&d_alpha) {
                for (a, b) in row.iter_mut().zip(drow) {
                    *a += b;
                }
            }
        }
        upstream = dv;
    }
    Ok(upstream)
}
