//! Run configuration: a flat `key = value` text format with `[sections]`,
//! every field defaulted and documented, unknown keys rejected. The
//! canonical serialization is archived into each run directory so any run
//! can be reproduced from its config + inputs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::node2vec::Node2VecConfig;
use crate::pipeline::{FinetuneConfig, PretrainConfig};
use crate::rng::fnv1a;

/// Ablation switches (the training-strategy variants).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AblationFlags {
    pub non_aug: bool,
    pub non_ft: bool,
    pub non_sa: bool,
    pub non_con: bool,
    pub score_dot: bool,
}

impl AblationFlags {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut flags = AblationFlags::default();
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match token {
                "full" => {}
                "non_aug" => flags.non_aug = true,
                "non_ft" => flags.non_ft = true,
                "non_sa" => flags.non_sa = true,
                "non_con" => flags.non_con = true,
                "score_dot" => flags.score_dot = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation {other:?} (expected full|non_aug|non_ft|non_sa|non_con|score_dot)"
                    )))
                }
            }
        }
        Ok(flags)
    }

    /// Canonical variant name used in summaries and reports.
    pub fn variant_name(&self) -> String {
        let mut parts = Vec::new();
        if self.non_aug {
            parts.push("NonAug");
        }
        if self.non_ft {
            parts.push("NonFT");
        }
        if self.non_sa {
            parts.push("NonSA");
        }
        if self.non_con {
            parts.push("NonCon");
        }
        if self.score_dot {
            parts.push("Dot");
        }
        if parts.is_empty() {
            "Full".to_string()
        } else {
            parts.join("+")
        }
    }

    fn to_key(self) -> String {
        let mut parts = Vec::new();
        if self.non_aug {
            parts.push("non_aug");
        }
        if self.non_ft {
            parts.push("non_ft");
        }
        if self.non_sa {
            parts.push("non_sa");
        }
        if self.non_con {
            parts.push("non_con");
        }
        if self.score_dot {
            parts.push("score_dot");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join(",")
        }
    }
}

/// Every knob of a run. Defaults follow the experimental recipe: 8:1:1
/// splits, 256-dim embeddings, 50 diffusion steps, 4-head GAT, two
/// 4-head encoder layers with a 64-wide FFN, g in {2,3}, adapter width 8,
/// lr 0.01, dropout 0.3, weight decay 5e-4.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // [data]
    pub edges: String,
    pub x_init: String,
    pub split_manifest: String,
    pub dataset: String,
    // [run]
    pub seed: u64,
    pub neg_ratio: u32,
    pub ablate: AblationFlags,
    // [node2vec]
    pub n2v_dim: usize,
    pub n2v_walk_length: usize,
    pub n2v_walks_per_node: usize,
    pub n2v_p: f64,
    pub n2v_q: f64,
    pub n2v_window: usize,
    pub n2v_negatives: usize,
    pub n2v_epochs: usize,
    pub n2v_lr: f64,
    // [diffusion]
    pub alpha: f64,
    pub diffusion_steps: usize,
    // [model]
    pub gat_heads: usize,
    pub gat_head_dim: usize,
    pub transformer_layers: usize,
    pub transformer_heads: usize,
    pub ffn_dim: usize,
    pub enhance_dim: usize,
    pub adapter_dim: usize,
    pub distant_hops: Vec<usize>,
    pub distant_per_node: usize,
    // [train]
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub tau: f64,
    pub patience: usize,
    pub contrastive_full_denominator: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            edges: String::new(),
            x_init: String::new(),
            split_manifest: String::new(),
            dataset: String::new(),
            seed: 42,
            neg_ratio: 1,
            ablate: AblationFlags::default(),
            n2v_dim: 256,
            n2v_walk_length: 80,
            n2v_walks_per_node: 10,
            n2v_p: 1.0,
            n2v_q: 1.0,
            n2v_window: 10,
            n2v_negatives: 5,
            n2v_epochs: 5,
            n2v_lr: 0.025,
            alpha: 0.15,
            diffusion_steps: 50,
            gat_heads: 4,
            gat_head_dim: 64,
            transformer_layers: 2,
            transformer_heads: 4,
            ffn_dim: 64,
            enhance_dim: 8,
            adapter_dim: 8,
            distant_hops: vec![2, 3],
            distant_per_node: 4,
            epochs: 200,
            lr: 0.01,
            dropout: 0.3,
            weight_decay: 5e-4,
            lambda: 0.5,
            tau: 0.5,
            patience: 20,
            contrastive_full_denominator: false,
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad list entry {t:?}")))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                match section.as_str() {
                    "data" | "run" | "node2vec" | "diffusion" | "model" | "train" => {}
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: unknown section [{other}]",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value).map_err(|e| {
                Error::Config(format!("line {}: {e}", lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        let unknown = || Err(Error::Config(format!("unknown key {key:?} in [{section}]")));
        match section {
            "data" => match key {
                "edges" => self.edges = value.to_string(),
                "x_init" => self.x_init = value.to_string(),
                "split_manifest" => self.split_manifest = value.to_string(),
                "dataset" => self.dataset = value.to_string(),
                _ => return unknown(),
            },
            "run" => match key {
                "seed" => self.seed = num(key, value)?,
                "neg_ratio" => self.neg_ratio = num(key, value)?,
                "ablate" => self.ablate = AblationFlags::parse(value)?,
                _ => return unknown(),
            },
            "node2vec" => match key {
                "dim" => self.n2v_dim = num(key, value)?,
                "walk_length" => self.n2v_walk_length = num(key, value)?,
                "walks_per_node" => self.n2v_walks_per_node = num(key, value)?,
                "p" => self.n2v_p = num(key, value)?,
                "q" => self.n2v_q = num(key, value)?,
                "window" => self.n2v_window = num(key, value)?,
                "negatives" => self.n2v_negatives = num(key, value)?,
                "epochs" => self.n2v_epochs = num(key, value)?,
                "lr" => self.n2v_lr = num(key, value)?,
                _ => return unknown(),
            },
            "diffusion" => match key {
                "alpha" => self.alpha = num(key, value)?,
                "steps" => self.diffusion_steps = num(key, value)?,
                _ => return unknown(),
            },
            "model" => match key {
                "gat_heads" => self.gat_heads = num(key, value)?,
                "gat_head_dim" => self.gat_head_dim = num(key, value)?,
                "transformer_layers" => self.transformer_layers = num(key, value)?,
                "transformer_heads" => self.transformer_heads = num(key, value)?,
                "ffn_dim" => self.ffn_dim = num(key, value)?,
                "enhance_dim" => self.enhance_dim = num(key, value)?,
                "adapter_dim" => self.adapter_dim = num(key, value)?,
                "distant_hops" => self.distant_hops = parse_list(value)?,
                "distant_per_node" => self.distant_per_node = num(key, value)?,
                _ => return unknown(),
            },
            "train" => match key {
                "epochs" => self.epochs = num(key, value)?,
                "lr" => self.lr = num(key, value)?,
                "dropout" => self.dropout = num(key, value)?,
                "weight_decay" => self.weight_decay = num(key, value)?,
                "lambda" => self.lambda = num(key, value)?,
                "tau" => self.tau = num(key, value)?,
                "patience" => self.patience = num(key, value)?,
                "contrastive_full_denominator" => {
                    self.contrastive_full_denominator = num(key, value)?
                }
                _ => return unknown(),
            },
            "" => {
                return Err(Error::Config(format!(
                    "key {key:?} appears before any [section]"
                )))
            }
            other => return Err(Error::Config(format!("unknown section [{other}]"))),
        }
        Ok(())
    }

    /// Canonical serialization: every field, fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let hops = self
            .distant_hops
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "[data]").unwrap();
        writeln!(out, "edges = {}", self.edges).unwrap();
        writeln!(out, "x_init = {}", self.x_init).unwrap();
        writeln!(out, "split_manifest = {}", self.split_manifest).unwrap();
        writeln!(out, "dataset = {}", self.dataset).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "[run]").unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "neg_ratio = {}", self.neg_ratio).unwrap();
        writeln!(out, "ablate = {}", self.ablate.to_key()).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "[node2vec]").unwrap();
        writeln!(out, "dim = {}", self.n2v_dim).unwrap();
        writeln!(out, "walk_length = {}", self.n2v_walk_length).unwrap();
        writeln!(out, "walks_per_node = {}", self.n2v_walks_per_node).unwrap();
        writeln!(out, "p = {}", self.n2v_p).unwrap();
        writeln!(out, "q = {}", self.n2v_q).unwrap();
        writeln!(out, "window = {}", self.n2v_window).unwrap();
        writeln!(out, "negatives = {}", self.n2v_negatives).unwrap();
        writeln!(out, "epochs = {}", self.n2v_epochs).unwrap();
        writeln!(out, "lr = {}", self.n2v_lr).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "[diffusion]").unwrap();
        writeln!(out, "alpha = {}", self.alpha).unwrap();
        writeln!(out, "steps = {}", self.diffusion_steps).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "[model]").unwrap();
        writeln!(out, "gat_heads = {}", self.gat_heads).unwrap();
        writeln!(out, "gat_head_dim = {}", self.gat_head_dim).unwrap();
        writeln!(out, "transformer_layers = {}", self.transformer_layers).unwrap();
        writeln!(out, "transformer_heads = {}", self.transformer_heads).unwrap();
        writeln!(out, "ffn_dim = {}", self.ffn_dim).unwrap();
        writeln!(out, "enhance_dim = {}", self.enhance_dim).unwrap();
        writeln!(out, "adapter_dim = {}", self.adapter_dim).unwrap();
        writeln!(out, "distant_hops = {hops}").unwrap();
        writeln!(out, "distant_per_node = {}", self.distant_per_node).unwrap();
        writeln!(out).unwrap();
        writeln!(out, "[train]").unwrap();
        writeln!(out, "epochs = {}", self.epochs).unwrap();
        writeln!(out, "lr = {}", self.lr).unwrap();
        writeln!(out, "dropout = {}", self.dropout).unwrap();
        writeln!(out, "weight_decay = {}", self.weight_decay).unwrap();
        writeln!(out, "lambda = {}", self.lambda).unwrap();
        writeln!(out, "tau = {}", self.tau).unwrap();
        writeln!(out, "patience = {}", self.patience).unwrap();
        writeln!(
            out,
            "contrastive_full_denominator = {}",
            self.contrastive_full_denominator
        )
        .unwrap();
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_text()).map_err(|source| Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    /// Fingerprint over the architecture-defining fields only (embedding
    /// dimension and [model] section), so checkpoints transfer across
    /// graphs and seeds but incompatible shapes are caught on load.
    pub fn fingerprint(&self) -> u64 {
        let hops = self
            .distant_hops
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",");
        let arch = format!(
            "d0={} gat={}x{} tf={}x{} ffn={} enhance={} hops={} per_node={}",
            self.n2v_dim,
            self.gat_heads,
            self.gat_head_dim,
            self.transformer_layers,
            self.transformer_heads,
            self.ffn_dim,
            self.enhance_dim,
            hops,
            self.distant_per_node,
        );
        fnv1a(arch.as_bytes())
    }

    pub fn node2vec_config(&self) -> Node2VecConfig {
        Node2VecConfig {
            dim: self.n2v_dim,
            walk_length: self.n2v_walk_length,
            walks_per_node: self.n2v_walks_per_node,
            return_param: self.n2v_p,
            inout_param: self.n2v_q,
            window: self.n2v_window,
            negatives: self.n2v_negatives,
            epochs: self.n2v_epochs,
            lr: self.n2v_lr,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.epochs,
            alpha: if self.ablate.non_aug { 0.0 } else { self.alpha },
            diffusion_steps: self.diffusion_steps,
            gat_heads: self.gat_heads,
            gat_head_dim: self.gat_head_dim,
            transformer_layers: self.transformer_layers,
            transformer_heads: self.transformer_heads,
            ffn_dim: self.ffn_dim,
            enhance_dim: self.enhance_dim,
            distant_hops: self.distant_hops.clone(),
            distant_per_node: self.distant_per_node,
            lr: self.lr,
            dropout: self.dropout,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            tau: self.tau,
            contrastive_full_denominator: self.contrastive_full_denominator,
            patience: self.patience,
            seed: self.seed,
            neg_ratio: self.neg_ratio,
            non_aug: self.ablate.non_aug,
            non_ft: self.ablate.non_ft,
            non_con: self.ablate.non_con,
            score_dot: self.ablate.score_dot,
            fingerprint: self.fingerprint(),
            source_id: self.dataset_id(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.epochs,
            adapter_dim: self.adapter_dim,
            lr: self.lr,
            dropout: self.dropout,
            weight_decay: self.weight_decay,
            lambda: self.lambda,
            tau: self.tau,
            contrastive_full_denominator: self.contrastive_full_denominator,
            patience: self.patience,
            seed: self.seed,
            neg_ratio: self.neg_ratio,
            non_sa: self.ablate.non_sa,
            non_con: self.ablate.non_con,
            score_dot: self.ablate.score_dot,
            expect_fingerprint: Some(self.fingerprint()),
            fingerprint: self.fingerprint(),
            target_id: self.dataset_id(),
        }
    }

    pub fn dataset_id(&self) -> String {
        if !self.dataset.is_empty() {
            self.dataset.clone()
        } else if !self.edges.is_empty() {
            Path::new(&self.edges)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.edges.clone())
        } else {
            "unnamed".to_string()
        }
    }
}
