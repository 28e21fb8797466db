//! The two-stage training pipeline: pretraining on a source graph,
//! checkpointing, frozen-backbone fine-tuning on a target graph, early
//! stopping, and evaluation.
//!
//! A run is deterministic given (graph, x_init, config): every random
//! choice flows from the config seed through named substreams, so metrics
//! streams replay bitwise.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::rc::Rc;
use std::time::Instant;

use ndarray::Array2;

use crate::autodiff::{backward, SparseMat, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{
    build_distant_table, diffuse_graph, populate_negatives, split_edges, Edge, EdgeSplit, Graph,
};
use crate::layers::{
    adapter_forward, attention_enhance, distant_bias, distant_mean_matrix, gat_forward,
    transformer_encoder, AdapterParams, DistantBiasParams, DropoutCfg, GatHeadParams,
    GatLayerParams, GatStructure, HeadAggregation, TransformerLayerParams, TransformerParams,
};
use crate::metrics::{auc, average_precision, f1, MetricsLog, MetricsRecord};
use crate::node2vec::EmbeddingMatrix;
use crate::objective::{
    build_contrastive_groups, contrastive_loss, dot_scores, link_loss, link_scores, total_loss,
    ContrastiveGroups,
};
use crate::optim::{xavier_uniform, AdamConfig, ModelParams};
use crate::rng::{fnv1a, substream_keyed, Stream};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub alpha: f64,
    pub diffusion_steps: usize,
    pub gat_heads: usize,
    pub gat_head_dim: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub ffn_dim: usize,
    pub enhance_dim: usize,
    pub distant_hops: Vec<usize>,
    pub distant_per_node: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    pub contrastive_full_denominator: bool,
    pub patience: usize,
    pub seed: u64,
    pub neg_ratio: u32,
    /// Ablations.
    pub non_aug: bool,
    pub non_ft: bool,
    pub non_con: bool,
    pub score_dot: bool,
    /// Provenance recorded into checkpoints.
    pub fingerprint: u64,
    pub source_id: String,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 200,
            alpha: 0.15,
            diffusion_steps: 50,
            gat_heads: 4,
            gat_head_dim: 64,
            transformer_layers: 2,
            transformer_heads: 4,
            ffn_dim: 64,
            enhance_dim: 8,
            distant_hops: vec![2, 3],
            distant_per_node: 4,
            lr: 0.01,
            dropout: 0.3,
            weight_decay: 5e-4,
            lambda: 0.5,
            tau: 0.5,
            contrastive_full_denominator: false,
            patience: 20,
            seed: 0,
            neg_ratio: 1,
            non_aug: false,
            non_ft: false,
            non_con: false,
            score_dot: false,
            fingerprint: 0,
            source_id: String::new(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("pretrain epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1)".into()));
        }
        if self.tau <= 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("bad loss hyperparameters".into()));
        }
        if self.gat_heads == 0 || self.gat_head_dim == 0 || self.enhance_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let d_m = self.d_model();
        if self.transformer_heads == 0 || d_m % self.transformer_heads != 0 {
            return Err(Error::Config(format!(
                "transformer heads {} must divide d_m {d_m}",
                self.transformer_heads
            )));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.gat_heads * self.gat_head_dim
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub adapter_dim: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    pub contrastive_full_denominator: bool,
    pub patience: usize,
    pub seed: u64,
    pub neg_ratio: u32,
    /// Ablations.
    pub non_sa: bool,
    pub non_con: bool,
    pub score_dot: bool,
    /// When set, the loaded checkpoint's fingerprint must match.
    pub expect_fingerprint: Option<u64>,
    pub fingerprint: u64,
    pub target_id: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 200,
            adapter_dim: 8,
            lr: 0.01,
            dropout: 0.3,
            weight_decay: 5e-4,
            lambda: 0.5,
            tau: 0.5,
            contrastive_full_denominator: false,
            patience: 20,
            seed: 0,
            neg_ratio: 1,
            non_sa: false,
            non_con: false,
            score_dot: false,
            expect_fingerprint: None,
            fingerprint: 0,
            target_id: String::new(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("finetune epochs must be >= 1".into()));
        }
        if self.adapter_dim == 0 {
            return Err(Error::Config("adapter dimension must be >= 1".into()));
        }
        if self.tau <= 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("bad loss hyperparameters".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Shared data preparation
// ---------------------------------------------------------------------------

/// Split-derived data shared by both training loops.
pub struct PreparedData {
    pub split: EdgeSplit,
    pub train_view: Graph,
    pub structure: GatStructure,
    pub train_edges: Vec<Edge>,
    pub train_labels: Rc<Vec<f64>>,
}

/// Split the graph, sample negatives, and assert the no-leakage contract.
pub fn prepare_data(g: &Graph, seed: u64, neg_ratio: u32) -> Result<PreparedData> {
    let (mut split, train_view) = split_edges(g, seed)?;
    populate_negatives(g, &mut split, neg_ratio)?;
    assert_no_leakage(&train_view, &split)?;
    Ok(prepared_from_split(split, train_view))
}

/// Build the derived structures from an existing split (e.g. one read back
/// from a manifest).
pub fn prepared_from_split(split: EdgeSplit, train_view: Graph) -> PreparedData {
    let structure = GatStructure::new(&train_view);
    let mut train_edges = split.train_pos.clone();
    train_edges.extend_from_slice(&split.train_neg);
    let labels: Vec<f64> = split
        .train_pos
        .iter()
        .map(|_| 1.0)
        .chain(split.train_neg.iter().map(|_| 0.0))
        .collect();
    PreparedData {
        split,
        train_view,
        structure,
        train_edges,
        train_labels: Rc::new(labels),
    }
}

/// Structural no-leakage check: the message-passing graph must not contain
/// any validation/test positive.
pub fn assert_no_leakage(train_view: &Graph, split: &EdgeSplit) -> Result<()> {
    for &(u, v) in split.val_pos.iter().chain(split.test_pos.iter()) {
        if train_view.has_edge(u, v) {
            return Err(Error::Evaluation(format!(
                "held-out edge ({u},{v}) leaked into the message-passing graph"
            )));
        }
    }
    Ok(())
}

fn init_rng(seed: u64, name: &str) -> rand_chacha::ChaCha8Rng {
    substream_keyed(seed, Stream::ParamInit, &[fnv1a(name.as_bytes())])
}

// ---------------------------------------------------------------------------
// Pretraining network
// ---------------------------------------------------------------------------

/// Layer views over registry tensors (handles alias the registry storage).
pub struct PretrainNet {
    gat: GatLayerParams,
    dist: Option<DistantBiasParams>,
    transformer: Option<TransformerParams>,
    enhance: GatHeadParams,
    psi: Option<Tensor>,
}

impl PretrainNet {
    /// Full pretraining forward pass to the scoring embedding Z''.
    pub fn forward(
        &self,
        x: &Tensor,
        structure: &GatStructure,
        mean_mat: &Rc<SparseMat>,
        dropout: DropoutCfg,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Tensor {
        let z = gat_forward(x, structure, &self.gat, dropout, rng);
        let z = match (&self.transformer, &self.dist) {
            (Some(tf), Some(dist)) => {
                let b = distant_bias(&z, mean_mat, dist);
                transformer_encoder(&z, Some(&b), tf, dropout, rng)
            }
            _ => z,
        };
        attention_enhance(&z, structure, &self.enhance)
    }

    pub fn scores(&self, z: &Tensor, edges: &[Edge]) -> Tensor {
        match &self.psi {
            Some(psi) => link_scores(z, edges, psi),
            None => dot_scores(z, edges),
        }
    }
}

/// Fresh pretraining model: Xavier weights, zero attention vectors and
/// biases, unit/zero LayerNorm parameters, psi at 0.1.
pub fn new_pretrain_model(d0: usize, cfg: &PretrainConfig) -> Result<(ModelParams, PretrainNet)> {
    cfg.validate()?;
    let mut params = ModelParams::new();
    let d_m = cfg.d_model();

    let weight = |name: String, rows: usize, cols: usize, params: &mut ModelParams| {
        let t = Tensor::leaf(xavier_uniform(rows, cols, &mut init_rng(cfg.seed, &name)), true);
        params.register(&name, t.clone(), true, true);
        t
    };
    let mut heads = Vec::with_capacity(cfg.gat_heads);
    for k in 0..cfg.gat_heads {
        let w = weight(format!("gat.h{k}.weight"), d0, cfg.gat_head_dim, &mut params);
        let a = Tensor::leaf(Array2::zeros((2 * cfg.gat_head_dim, 1)), true);
        params.register(&format!("gat.h{k}.attn"), a.clone(), true, true);
        heads.push(GatHeadParams { weight: w, attn: a });
    }
    let gat = GatLayerParams {
        heads,
        aggregation: HeadAggregation::Concat,
    };

    let (dist, transformer) = if cfg.non_ft {
        (None, None)
    } else {
        let dw = weight("dist.weight".to_string(), d_m, 1, &mut params);
        let db = Tensor::leaf(Array2::zeros((1, 1)), true);
        params.register("dist.bias", db.clone(), true, false);
        let dist = DistantBiasParams {
            weight: dw,
            bias: db,
        };

        let mut layers = Vec::with_capacity(cfg.transformer_layers);
        for l in 0..cfg.transformer_layers {
            let bias = |name: String, cols: usize, params: &mut ModelParams| {
                let t = Tensor::leaf(Array2::zeros((1, cols)), true);
                params.register(&name, t.clone(), true, false);
                t
            };
            let ln = |name: String, cols: usize, ones: bool, params: &mut ModelParams| {
                let init = if ones {
                    Array2::ones((1, cols))
                } else {
                    Array2::zeros((1, cols))
                };
                let t = Tensor::leaf(init, true);
                params.register(&name, t.clone(), true, false);
                t
            };
            layers.push(TransformerLayerParams {
                wq: weight(format!("tf.l{l}.wq"), d_m, d_m, &mut params),
                wk: weight(format!("tf.l{l}.wk"), d_m, d_m, &mut params),
                wv: weight(format!("tf.l{l}.wv"), d_m, d_m, &mut params),
                wo: weight(format!("tf.l{l}.wo"), d_m, d_m, &mut params),
                ffn_a_weight: weight(format!("tf.l{l}.ffn_a.weight"), d_m, cfg.ffn_dim, &mut params),
                ffn_a_bias: bias(format!("tf.l{l}.ffn_a.bias"), cfg.ffn_dim, &mut params),
                ffn_b_weight: weight(format!("tf.l{l}.ffn_b.weight"), cfg.ffn_dim, d_m, &mut params),
                ffn_b_bias: bias(format!("tf.l{l}.ffn_b.bias"), d_m, &mut params),
                ln_attn_scale: ln(format!("layernorm.tf{l}.attn.scale"), d_m, true, &mut params),
                ln_attn_shift: ln(format!("layernorm.tf{l}.attn.shift"), d_m, false, &mut params),
                ln_ffn_scale: ln(format!("layernorm.tf{l}.ffn.scale"), d_m, true, &mut params),
                ln_ffn_shift: ln(format!("layernorm.tf{l}.ffn.shift"), d_m, false, &mut params),
            });
        }
        (
            Some(dist),
            Some(TransformerParams {
                layers,
                heads: cfg.transformer_heads,
            }),
        )
    };

    let ew = weight("enhance.weight".to_string(), d_m, cfg.enhance_dim, &mut params);
    let ea = Tensor::leaf(Array2::zeros((2 * cfg.enhance_dim, 1)), true);
    params.register("enhance.attn", ea.clone(), true, true);
    let enhance = GatHeadParams {
        weight: ew,
        attn: ea,
    };

    let psi = if cfg.score_dot {
        None
    } else {
        let t = Tensor::leaf(Array2::from_elem((cfg.enhance_dim, 1), 0.1), true);
        params.register("psi", t.clone(), true, true);
        Some(t)
    };

    Ok((
        params,
        PretrainNet {
            gat,
            dist,
            transformer,
            enhance,
            psi,
        },
    ))
}

// ---------------------------------------------------------------------------
// Training loop (shared by both stages)
// ---------------------------------------------------------------------------

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<MetricsRecord>,
    /// Set when training stopped on a numeric failure; the checkpoint then
    /// holds the last good (best validation) state.
    pub aborted: Option<String>,
}

struct EpochEval {
    auc: f64,
    f1: f64,
    ap: f64,
    loss_link: f64,
    loss_con: f64,
    loss_total: f64,
}

fn eval_triplet(scores: &[f64], labels: &[f64]) -> Result<(f64, f64, f64)> {
    Ok((
        auc(scores, labels)?,
        f1(scores, labels, 0.5),
        average_precision(scores, labels)?,
    ))
}

fn split_edges_labels(split: &EdgeSplit, which: &str) -> Result<(Vec<Edge>, Vec<f64>)> {
    let (pos, neg) = match which {
        "train" => (&split.train_pos, &split.train_neg),
        "val" => (&split.val_pos, &split.val_neg),
        "test" => (&split.test_pos, &split.test_neg),
        other => return Err(Error::Evaluation(format!("unknown split {other}"))),
    };
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Evaluation(format!("split {which} is empty")));
    }
    let mut edges = pos.clone();
    edges.extend_from_slice(neg);
    let labels: Vec<f64> = pos
        .iter()
        .map(|_| 1.0)
        .chain(neg.iter().map(|_| 0.0))
        .collect();
    Ok((edges, labels))
}

struct LoopSpec<'a> {
    epochs: usize,
    patience: usize,
    adam: AdamConfig,
    dropout: f64,
    lambda: f64,
    tau: f64,
    seed: u64,
    stage: &'a str,
    fingerprint: u64,
    graph_id: String,
}

fn run_training_loop(
    spec: LoopSpec<'_>,
    params: &mut ModelParams,
    data: &PreparedData,
    groups: Option<&ContrastiveGroups>,
    log: &mut MetricsLog,
    forward: impl Fn(DropoutCfg, &mut rand_chacha::ChaCha8Rng) -> Tensor,
    score: impl Fn(&Tensor, &[Edge]) -> Tensor,
) -> Result<TrainOutcome> {
    let trainable = params.trainable_scalars();
    let (val_edges, val_labels) = split_edges_labels(&data.split, "val")?;
    let record_start = log.records().len();
    let mut best: Option<(f64, u64, BTreeMap<String, Array2<f64>>)> = None;
    let mut since_best = 0usize;
    let mut aborted = None;

    for epoch in 0..spec.epochs {
        let started = Instant::now();
        let step = catch_unwind(AssertUnwindSafe(|| -> Result<EpochEval> {
            // Training step in train mode.
            let mut drop_rng = substream_keyed(spec.seed, Stream::Dropout, &[epoch as u64]);
            let z = forward(DropoutCfg::train(spec.dropout), &mut drop_rng);
            let scores = score(&z, &data.train_edges);
            let l_link = link_loss(&scores, &data.train_labels);
            let (l_con_val, l_total) = match groups {
                Some(g) => {
                    let l_con = contrastive_loss(&z, g, spec.tau);
                    let v = l_con.item();
                    (v, total_loss(&l_link, &l_con, spec.lambda))
                }
                None => (0.0, l_link.clone()),
            };
            let link_val = l_link.item();
            let total_val = l_total.item();
            backward(&l_total);
            params.adam_step(&spec.adam)?;

            // Validation in eval mode.
            let mut eval_rng = substream_keyed(spec.seed, Stream::Dropout, &[u64::MAX]);
            let z_eval = forward(DropoutCfg::eval(), &mut eval_rng);
            let val_scores: Vec<f64> = score(&z_eval, &val_edges)
                .to_array()
                .iter()
                .copied()
                .collect();
            let (auc_v, f1_v, ap_v) = eval_triplet(&val_scores, &val_labels)?;
            Ok(EpochEval {
                auc: auc_v,
                f1: f1_v,
                ap: ap_v,
                loss_link: link_val,
                loss_con: l_con_val,
                loss_total: total_val,
            })
        }));
        let eval = match step {
            Ok(Ok(eval)) => eval,
            Ok(Err(e)) => return Err(e),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic during training step".into());
                aborted = Some(msg);
                break;
            }
        };
        let secs = started.elapsed().as_secs_f64();
        log.push(MetricsRecord {
            stage: spec.stage.to_string(),
            epoch,
            split: "val".to_string(),
            auc: eval.auc,
            f1: eval.f1,
            ap: eval.ap,
            loss_link: eval.loss_link,
            loss_con: eval.loss_con,
            loss_total: eval.loss_total,
            seconds_per_epoch: secs,
            trainable_params: trainable,
        });

        // Strictly better validation AUC wins; ties keep the earlier epoch.
        let improved = best.as_ref().map_or(true, |(b, _, _)| eval.auc > *b);
        if improved {
            best = Some((eval.auc, epoch as u64, params.snapshot()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > spec.patience {
                break;
            }
        }
    }

    let (best_auc, best_epoch, tensors) = best.ok_or_else(|| {
        Error::NumericFailure(format!(
            "{} failed before completing a single epoch: {}",
            spec.stage,
            aborted.clone().unwrap_or_default()
        ))
    })?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            tensors,
            fingerprint: spec.fingerprint,
            source_id: spec.graph_id,
            best_val_auc: best_auc,
            best_epoch,
        },
        records: log.records()[record_start..].to_vec(),
        aborted,
    })
}

/// Pretrain on the source graph per the configured recipe: diffusion over
/// the training view, 4-head GAT, distant-neighbor-biased transformer,
/// attention-enhanced scoring, joint BCE + InfoNCE objective, Adam, early
/// stopping on validation AUC. Returns the best-validation checkpoint.
pub fn pretrain(
    source: &Graph,
    x_init: &EmbeddingMatrix,
    cfg: &PretrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if x_init.num_nodes() != source.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "x_init has {} rows for a graph with {} nodes",
            x_init.num_nodes(),
            source.num_nodes()
        )));
    }
    let data = prepare_data(source, cfg.seed, cfg.neg_ratio)?;
    pretrain_prepared(&data, x_init, cfg, log)
}

/// As [`pretrain`] but over an existing split (so callers can share one
/// split across runs).
pub fn pretrain_prepared(
    data: &PreparedData,
    x_init: &EmbeddingMatrix,
    cfg: &PretrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let table = build_distant_table(
        &data.train_view,
        &cfg.distant_hops,
        cfg.distant_per_node,
        cfg.seed,
    );
    let mean_mat = distant_mean_matrix(&table, data.train_view.num_nodes());

    // Diffusion over the training view, once, before the loop.
    let features = if cfg.non_aug {
        x_init.values().clone()
    } else {
        diffuse_graph(x_init.values(), &data.train_view, cfg.alpha, cfg.diffusion_steps)?
    };
    let x = Tensor::constant(features);

    let (mut params, net) = new_pretrain_model(x_init.dim(), cfg)?;
    let groups = contrastive_setup(cfg.non_con, cfg.lambda, cfg.contrastive_full_denominator, data)?;
    run_training_loop(
        LoopSpec {
            epochs: cfg.epochs,
            patience: cfg.patience,
            adam: AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
            dropout: cfg.dropout,
            lambda: cfg.lambda,
            tau: cfg.tau,
            seed: cfg.seed,
            stage: "pretrain",
            fingerprint: cfg.fingerprint,
            graph_id: cfg.source_id.clone(),
        },
        &mut params,
        data,
        groups.as_ref(),
        log,
        |dropout, rng| net.forward(&x, &data.structure, &mean_mat, dropout, rng),
        |z, edges| net.scores(z, edges),
    )
}

fn contrastive_setup(
    non_con: bool,
    lambda: f64,
    full_denominator: bool,
    data: &PreparedData,
) -> Result<Option<ContrastiveGroups>> {
    if non_con || lambda == 0.0 {
        return Ok(None);
    }
    Ok(Some(build_contrastive_groups(
        &data.split.train_pos,
        &data.split.train_neg,
        full_denominator,
    )?))
}

// ---------------------------------------------------------------------------
// Fine-tuning network
// ---------------------------------------------------------------------------

pub struct FinetuneNet {
    gat_head: GatHeadParams,
    ln_in: Option<(Tensor, Tensor)>,
    adapter: Option<AdapterParams>,
    ln_out: Option<(Tensor, Tensor)>,
    enhance: GatHeadParams,
    psi: Option<Tensor>,
}

impl FinetuneNet {
    pub fn forward(
        &self,
        x: &Tensor,
        structure: &GatStructure,
        dropout: DropoutCfg,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Tensor {
        let layer = GatLayerParams {
            heads: vec![self.gat_head.clone()],
            aggregation: HeadAggregation::Concat,
        };
        let mut z = gat_forward(x, structure, &layer, dropout, rng);
        if let Some(adapter) = &self.adapter {
            let (scale, shift) = self.ln_in.as_ref().expect("adapter implies layernorm");
            z = z.layer_norm(scale, shift, LN_EPS);
            z = adapter_forward(&z, adapter);
            let (scale, shift) = self.ln_out.as_ref().expect("adapter implies layernorm");
            z = z.layer_norm(scale, shift, LN_EPS);
        }
        attention_enhance(&z, structure, &self.enhance)
    }

    pub fn scores(&self, z: &Tensor, edges: &[Edge]) -> Tensor {
        match &self.psi {
            Some(psi) => link_scores(z, edges, psi),
            None => dot_scores(z, edges),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.gat_head.weight.shape().0
    }
}

/// Assemble the fine-tune network from a pretraining checkpoint.
///
/// The single-head GAT weight is the column-wise concatenation of the
/// frozen pretrained head weights, with a fresh trainable attention
/// vector; the adapter is fresh and trainable, wrapped in the last
/// pretrained encoder layer's LayerNorm pair (fresh when the checkpoint
/// has none), which stays trainable; the attention-enhancement head loads
/// frozen; psi loads trainable.
pub fn build_finetune_model(
    ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
) -> Result<(ModelParams, FinetuneNet)> {
    cfg.validate()?;
    if let Some(expect) = cfg.expect_fingerprint {
        if expect != ckpt.fingerprint {
            return Err(Error::Checkpoint(format!(
                "checkpoint fingerprint {:#018x} does not match expected {:#018x}",
                ckpt.fingerprint, expect
            )));
        }
    }
    let mut params = ModelParams::new();

    let mut head_weights = Vec::new();
    while let Some(w) = ckpt.tensors.get(&format!("gat.h{}.weight", head_weights.len())) {
        head_weights.push(w.clone());
    }
    if head_weights.is_empty() {
        return Err(Error::Checkpoint(
            "checkpoint holds no pretrained attention heads".into(),
        ));
    }
    let d0 = head_weights[0].nrows();
    let d_m: usize = head_weights.iter().map(|w| w.ncols()).sum();
    let mut w_ft = Array2::zeros((d0, d_m));
    let mut lo = 0;
    for w in &head_weights {
        let hi = lo + w.ncols();
        w_ft.slice_mut(ndarray::s![.., lo..hi]).assign(w);
        lo = hi;
    }
    let w_ft = Tensor::leaf(w_ft, false);
    let a_ft = Tensor::leaf(Array2::zeros((2 * d_m, 1)), true);
    params.register("ft_gat.weight", w_ft.clone(), false, true);
    params.register("ft_gat.attn", a_ft.clone(), true, true);
    let gat_head = GatHeadParams {
        weight: w_ft,
        attn: a_ft,
    };

    let (ln_in, adapter, ln_out) = if cfg.non_sa {
        (None, None, None)
    } else {
        if cfg.adapter_dim >= d_m {
            return Err(Error::Config(format!(
                "adapter dimension {} must be < d' = {d_m}",
                cfg.adapter_dim
            )));
        }
        // Load the last pretrained encoder layer's normalization pair when
        // available (a NonFT checkpoint has none).
        let last_ln = (0..)
            .take_while(|l| {
                ckpt.tensors
                    .contains_key(&format!("layernorm.tf{l}.attn.scale"))
            })
            .last();
        let pick = |suffix: &str, ones: bool| -> Result<Array2<f64>> {
            let arr = match last_ln {
                Some(l) => ckpt.tensors[&format!("layernorm.tf{l}.{suffix}")].clone(),
                None => {
                    if ones {
                        Array2::ones((1, d_m))
                    } else {
                        Array2::zeros((1, d_m))
                    }
                }
            };
            if arr.dim() != (1, d_m) {
                return Err(Error::ShapeMismatch(format!(
                    "layernorm {suffix} has shape {:?}, expected (1, {d_m})",
                    arr.dim()
                )));
            }
            Ok(arr)
        };
        let ln_in_scale = Tensor::leaf(pick("attn.scale", true)?, true);
        let ln_in_shift = Tensor::leaf(pick("attn.shift", false)?, true);
        let ln_out_scale = Tensor::leaf(pick("ffn.scale", true)?, true);
        let ln_out_shift = Tensor::leaf(pick("ffn.shift", false)?, true);
        params.register("layernorm.adapter_in.scale", ln_in_scale.clone(), true, false);
        params.register("layernorm.adapter_in.shift", ln_in_shift.clone(), true, false);
        params.register("layernorm.adapter_out.scale", ln_out_scale.clone(), true, false);
        params.register("layernorm.adapter_out.shift", ln_out_shift.clone(), true, false);

        let q = cfg.adapter_dim;
        let w1 = Tensor::leaf(xavier_uniform(d_m, q, &mut init_rng(cfg.seed, "adapter.w1")), true);
        let w2 = Tensor::leaf(xavier_uniform(q, q, &mut init_rng(cfg.seed, "adapter.w2")), true);
        let w3 = Tensor::leaf(xavier_uniform(q, d_m, &mut init_rng(cfg.seed, "adapter.w3")), true);
        params.register("adapter.w1", w1.clone(), true, true);
        params.register("adapter.w2", w2.clone(), true, true);
        params.register("adapter.w3", w3.clone(), true, true);
        (
            Some((ln_in_scale, ln_in_shift)),
            Some(AdapterParams { w1, w2, w3 }),
            Some((ln_out_scale, ln_out_shift)),
        )
    };

    let ew = ckpt
        .tensors
        .get("enhance.weight")
        .ok_or_else(|| Error::Checkpoint("checkpoint missing enhance.weight".into()))?;
    let ea = ckpt
        .tensors
        .get("enhance.attn")
        .ok_or_else(|| Error::Checkpoint("checkpoint missing enhance.attn".into()))?;
    if ew.nrows() != d_m {
        return Err(Error::ShapeMismatch(format!(
            "enhance.weight expects {} input features, assembled heads give {d_m}",
            ew.nrows()
        )));
    }
    let enhance_dim = ew.ncols();
    let ew = Tensor::leaf(ew.clone(), false);
    let ea = Tensor::leaf(ea.clone(), false);
    params.register("enhance.weight", ew.clone(), false, true);
    params.register("enhance.attn", ea.clone(), false, true);
    let enhance = GatHeadParams {
        weight: ew,
        attn: ea,
    };

    let psi = if cfg.score_dot {
        None
    } else {
        let init = ckpt
            .tensors
            .get("psi")
            .cloned()
            .unwrap_or_else(|| Array2::from_elem((enhance_dim, 1), 0.1));
        let t = Tensor::leaf(init, true);
        params.register("psi", t.clone(), true, true);
        Some(t)
    };

    Ok((
        params,
        FinetuneNet {
            gat_head,
            ln_in,
            adapter,
            ln_out,
            enhance,
            psi,
        },
    ))
}

/// Rebuild a fine-tuned network from its own (already assembled) snapshot.
pub fn finetune_net_from_snapshot(
    tensors: &BTreeMap<String, Array2<f64>>,
    score_dot: bool,
) -> Result<(ModelParams, FinetuneNet)> {
    let mut params = ModelParams::new();
    let get = |name: &str| -> Result<&Array2<f64>> {
        tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("snapshot missing {name}")))
    };
    let w_ft = Tensor::leaf(get("ft_gat.weight")?.clone(), false);
    let a_ft = Tensor::leaf(get("ft_gat.attn")?.clone(), true);
    params.register("ft_gat.weight", w_ft.clone(), false, true);
    params.register("ft_gat.attn", a_ft.clone(), true, true);
    let gat_head = GatHeadParams {
        weight: w_ft,
        attn: a_ft,
    };

    let (ln_in, adapter, ln_out) = if tensors.contains_key("adapter.w1") {
        let reg_ln = |name: &str, params: &mut ModelParams| -> Result<Tensor> {
            let t = Tensor::leaf(get(name)?.clone(), true);
            params.register(name, t.clone(), true, false);
            Ok(t)
        };
        let ln_in = (
            reg_ln("layernorm.adapter_in.scale", &mut params)?,
            reg_ln("layernorm.adapter_in.shift", &mut params)?,
        );
        let ln_out = (
            reg_ln("layernorm.adapter_out.scale", &mut params)?,
            reg_ln("layernorm.adapter_out.shift", &mut params)?,
        );
        let reg_w = |name: &str, params: &mut ModelParams| -> Result<Tensor> {
            let t = Tensor::leaf(get(name)?.clone(), true);
            params.register(name, t.clone(), true, true);
            Ok(t)
        };
        let adapter = AdapterParams {
            w1: reg_w("adapter.w1", &mut params)?,
            w2: reg_w("adapter.w2", &mut params)?,
            w3: reg_w("adapter.w3", &mut params)?,
        };
        (Some(ln_in), Some(adapter), Some(ln_out))
    } else {
        (None, None, None)
    };

    let ew = Tensor::leaf(get("enhance.weight")?.clone(), false);
    let ea = Tensor::leaf(get("enhance.attn")?.clone(), false);
    params.register("enhance.weight", ew.clone(), false, true);
    params.register("enhance.attn", ea.clone(), false, true);
    let enhance = GatHeadParams {
        weight: ew,
        attn: ea,
    };

    let psi = if score_dot {
        None
    } else {
        let t = Tensor::leaf(get("psi")?.clone(), true);
        params.register("psi", t.clone(), true, true);
        Some(t)
    };

    Ok((
        params,
        FinetuneNet {
            gat_head,
            ln_in,
            adapter,
            ln_out,
            enhance,
            psi,
        },
    ))
}

/// Fine-tune on the target graph: no diffusion, frozen backbone, trainable
/// adapter + LayerNorm + attention vector + psi. Returns the best model
/// and the training outcome; the outcome's checkpoint snapshots the full
/// fine-tuned registry.
pub fn finetune(
    target: &Graph,
    x_init: &EmbeddingMatrix,
    ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    log: &mut MetricsLog,
) -> Result<(ModelParams, FinetuneNet, TrainOutcome)> {
    cfg.validate()?;
    if x_init.num_nodes() != target.num_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "x_init has {} rows for a graph with {} nodes",
            x_init.num_nodes(),
            target.num_nodes()
        )));
    }
    let data = prepare_data(target, cfg.seed, cfg.neg_ratio)?;
    finetune_prepared(&data, x_init, ckpt, cfg, log)
}

/// As [`finetune`] but over an existing split.
pub fn finetune_prepared(
    data: &PreparedData,
    x_init: &EmbeddingMatrix,
    ckpt: &Checkpoint,
    cfg: &FinetuneConfig,
    log: &mut MetricsLog,
) -> Result<(ModelParams, FinetuneNet, TrainOutcome)> {
    let (mut params, net) = build_finetune_model(ckpt, cfg)?;
    if net.input_dim() != x_init.dim() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint embedding dimension {} does not match target x_init width {}",
            net.input_dim(),
            x_init.dim()
        )));
    }
    let frozen_before = params.value_fingerprint(|n| !params.is_trainable(n).unwrap_or(true));
    let x = Tensor::constant(x_init.values().clone());
    let groups = contrastive_setup(cfg.non_con, cfg.lambda, cfg.contrastive_full_denominator, data)?;

    let outcome = run_training_loop(
        LoopSpec {
            epochs: cfg.epochs,
            patience: cfg.patience,
            adam: AdamConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
            dropout: cfg.dropout,
            lambda: cfg.lambda,
            tau: cfg.tau,
            seed: cfg.seed,
            stage: "finetune",
            fingerprint: cfg.fingerprint,
            graph_id: cfg.target_id.clone(),
        },
        &mut params,
        data,
        groups.as_ref(),
        log,
        |dropout, rng| net.forward(&x, &data.structure, dropout, rng),
        |z, edges| net.scores(z, edges),
    )?;

    // Load the best snapshot back so the returned model is the best one,
    // then confirm the freeze contract held.
    params.load(&outcome.checkpoint.tensors)?;
    let frozen_after = params.value_fingerprint(|n| !params.is_trainable(n).unwrap_or(true));
    if frozen_before != frozen_after {
        return Err(Error::NumericFailure(
            "frozen parameters changed during fine-tuning".into(),
        ));
    }
    Ok((params, net, outcome))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Score one split in eval mode (dropout off) and emit a metrics record.
/// Deterministic: repeated calls produce identical output.
pub fn evaluate(
    z_eval: &Tensor,
    score: impl Fn(&Tensor, &[Edge]) -> Tensor,
    split: &EdgeSplit,
    which: &str,
    stage: &str,
    trainable_params: usize,
) -> Result<MetricsRecord> {
    let started = Instant::now();
    let (edges, labels) = split_edges_labels(split, which)?;
    let score_tensor = score(z_eval, &edges);
    let scores: Vec<f64> = score_tensor.to_array().iter().copied().collect();
    let (auc_v, f1_v, ap_v) = eval_triplet(&scores, &labels)?;
    let loss_link = link_loss(&score_tensor, &Rc::new(labels)).item();
    Ok(MetricsRecord {
        stage: stage.to_string(),
        epoch: 0,
        split: which.to_string(),
        auc: auc_v,
        f1: f1_v,
        ap: ap_v,
        loss_link,
        loss_con: 0.0,
        loss_total: loss_link,
        seconds_per_epoch: started.elapsed().as_secs_f64(),
        trainable_params,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint-backed evaluators
// ---------------------------------------------------------------------------

/// A pretrained model reloaded next to its (deterministically re-derived)
/// data, ready for eval-mode scoring.
pub struct PretrainEvaluator {
    pub params: ModelParams,
    pub data: PreparedData,
    net: PretrainNet,
    x: Tensor,
    mean_mat: Rc<SparseMat>,
}

pub fn load_pretrain_evaluator(
    source: &Graph,
    x_init: &EmbeddingMatrix,
    tensors: &BTreeMap<String, Array2<f64>>,
    cfg: &PretrainConfig,
) -> Result<PretrainEvaluator> {
    let data = prepare_data(source, cfg.seed, cfg.neg_ratio)?;
    let table = build_distant_table(
        &data.train_view,
        &cfg.distant_hops,
        cfg.distant_per_node,
        cfg.seed,
    );
    let mean_mat = distant_mean_matrix(&table, source.num_nodes());
    let features = if cfg.non_aug {
        x_init.values().clone()
    } else {
        diffuse_graph(x_init.values(), &data.train_view, cfg.alpha, cfg.diffusion_steps)?
    };
    let (mut params, net) = new_pretrain_model(x_init.dim(), cfg)?;
    params.load(tensors)?;
    Ok(PretrainEvaluator {
        params,
        data,
        net,
        x: Tensor::constant(features),
        mean_mat,
    })
}

impl PretrainEvaluator {
    /// Eval-mode scoring embedding Z''.
    pub fn embed(&self) -> Tensor {
        let mut rng = substream_keyed(0, Stream::Dropout, &[u64::MAX]);
        self.net
            .forward(&self.x, &self.data.structure, &self.mean_mat, DropoutCfg::eval(), &mut rng)
    }

    pub fn metrics(&self, which: &str) -> Result<MetricsRecord> {
        let z = self.embed();
        evaluate(
            &z,
            |z, e| self.net.scores(z, e),
            &self.data.split,
            which,
            "pretrain",
            self.params.trainable_scalars(),
        )
    }
}

/// A fine-tuned model reloaded from its own snapshot next to its data.
pub struct FinetuneEvaluator {
    pub params: ModelParams,
    pub data: PreparedData,
    net: FinetuneNet,
    x: Tensor,
}

pub fn load_finetune_evaluator(
    target: &Graph,
    x_init: &EmbeddingMatrix,
    tensors: &BTreeMap<String, Array2<f64>>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneEvaluator> {
    let data = prepare_data(target, cfg.seed, cfg.neg_ratio)?;
    let (params, net) = finetune_net_from_snapshot(tensors, cfg.score_dot)?;
    if net.input_dim() != x_init.dim() {
        return Err(Error::ShapeMismatch(format!(
            "snapshot embedding dimension {} does not match x_init width {}",
            net.input_dim(),
            x_init.dim()
        )));
    }
    Ok(FinetuneEvaluator {
        params,
        data,
        net,
        x: Tensor::constant(x_init.values().clone()),
    })
}

impl FinetuneEvaluator {
    pub fn embed(&self) -> Tensor {
        let mut rng = substream_keyed(0, Stream::Dropout, &[u64::MAX]);
        self.net
            .forward(&self.x, &self.data.structure, DropoutCfg::eval(), &mut rng)
    }

    pub fn metrics(&self, which: &str) -> Result<MetricsRecord> {
        let z = self.embed();
        evaluate(
            &z,
            |z, e| self.net.scores(z, e),
            &self.data.split,
            which,
            "finetune",
            self.params.trainable_scalars(),
        )
    }
}

/// Whether a snapshot holds a fine-tuned model (as opposed to a
/// pretraining checkpoint).
pub fn snapshot_is_finetuned(tensors: &BTreeMap<String, Array2<f64>>) -> bool {
    tensors.contains_key("ft_gat.weight")
}

// ---------------------------------------------------------------------------
// Seed aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SeedReport {
    pub rows: Vec<(u64, BTreeMap<String, f64>)>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub failures: Vec<(u64, String)>,
}

/// Repeat a pipeline command over seeds, reporting per-metric mean and
/// sample standard deviation. Per-seed failures are collected, not fatal.
pub fn run_seeds(
    seeds: &[u64],
    mut command: impl FnMut(u64) -> Result<BTreeMap<String, f64>>,
) -> SeedReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        match command(seed) {
            Ok(metrics) => rows.push((seed, metrics)),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    if !rows.is_empty() {
        let keys: Vec<String> = rows[0].1.keys().cloned().collect();
        for key in keys {
            let values: Vec<f64> = rows
                .iter()
                .filter_map(|(_, m)| m.get(&key).copied())
                .collect();
            let m = values.iter().sum::<f64>() / values.len() as f64;
            let var = if values.len() > 1 {
                values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
            } else {
                0.0
            };
            mean.insert(key.clone(), m);
            std.insert(key, var.sqrt());
        }
    }
    SeedReport {
        rows,
        mean,
        std,
        failures,
    }
}
