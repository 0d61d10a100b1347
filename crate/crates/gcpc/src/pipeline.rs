//! Experiment orchestration: prior-classifier training, the pre-training
//! schemes (scratch / phone cross-entropy / contrastive / guided contrastive
//! / joint contrastive), encoder initialization from checkpoints, transducer
//! fine-tuning with the plain or joint loss, and the scheme-comparison grid.

use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, AlignmentCounts, EmbeddingMatrix};
use crate::losses::{self, ContrastiveConfig, TargetMode};
use crate::nets::{self, Activation, ClassifierSpec, DenseStackSpec, EncoderTopology, LstmStackSpec, TransducerSpec};
use crate::numcore::{AdamConfig, AdamState, Graph, NodeId, ParameterStore, Tensor};
use crate::seeds;
use crate::synthdata::{Corpus, CorpusConfig, Split, Utterance};

// ---- configuration -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub fenc_widths: Vec<usize>,
    pub far_layers: usize,
    pub far_width: usize,
    pub genc_depth: usize,
    pub genc_width: usize,
    pub genc_activation: Activation,
    pub cls_lstm_layers: usize,
    pub cls_lstm_width: usize,
    pub pred_width: usize,
    pub embed_dim: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            fenc_widths: vec![32, 32],
            far_layers: 1,
            far_width: 64,
            genc_depth: 2,
            genc_width: 32,
            genc_activation: Activation::Relu,
            cls_lstm_layers: 1,
            cls_lstm_width: 64,
            pred_width: 32,
            embed_dim: 16,
        }
    }
}

impl ModelSettings {
    pub fn encoder_topology(&self, feature_dim: usize, phones: usize) -> EncoderTopology {
        EncoderTopology {
            fenc: DenseStackSpec {
                input_dim: feature_dim,
                widths: self.fenc_widths.clone(),
                activation: Activation::Relu,
            },
            far: LstmStackSpec {
                input_dim: *self.fenc_widths.last().unwrap_or(&feature_dim),
                layers: self.far_layers,
                width: self.far_width,
            },
            genc: DenseStackSpec {
                input_dim: phones,
                widths: vec![self.genc_width; self.genc_depth],
                activation: self.genc_activation,
            },
        }
    }

    pub fn classifier_spec(&self, feature_dim: usize, phones: usize) -> ClassifierSpec {
        ClassifierSpec {
            input_dim: feature_dim,
            lstm: LstmStackSpec {
                input_dim: feature_dim,
                layers: self.cls_lstm_layers,
                width: self.cls_lstm_width,
            },
            phones,
        }
    }

    pub fn transducer_spec(&self, feature_dim: usize, phones: usize) -> TransducerSpec {
        TransducerSpec {
            encoder: self.encoder_topology(feature_dim, phones),
            vocab: phones,
            embed_dim: self.embed_dim,
            pred_width: self.pred_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveSettings {
    pub steps: usize,
    pub kappa_cpc: f64,
    pub kappa_gcpc: f64,
    pub n_neg: usize,
    pub include_positive: bool,
    pub per_step_redraw: bool,
}

impl Default for ContrastiveSettings {
    fn default() -> Self {
        Self {
            steps: 4,
            kappa_cpc: 0.1,
            kappa_gcpc: 0.01,
            n_neg: 8,
            include_positive: true,
            per_step_redraw: false,
        }
    }
}

impl ContrastiveSettings {
    pub fn cpc(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            steps: self.steps,
            kappa: self.kappa_cpc,
            n_neg: self.n_neg,
            target_mode: TargetMode::Latent,
            include_positive: self.include_positive,
            per_step_redraw: self.per_step_redraw,
        }
    }

    pub fn gcpc(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            kappa: self.kappa_gcpc,
            target_mode: TargetMode::Guidance,
            ..self.cpc()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub classifier_steps: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            pretrain_steps: 2000,
            finetune_steps: 2000,
            classifier_steps: 1000,
        }
    }
}

impl OptimSettings {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Everything the pipeline needs to run an experiment.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSettings,
    pub contrastive: ContrastiveSettings,
    pub optim: OptimSettings,
    pub emission_cap: usize,
}

impl ExperimentConfig {
    /// Stable content hash for checkpoint provenance.
    pub fn content_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        seeds::text_hash(&json)
    }
}

// ---- schemes and specs ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PretrainScheme {
    Scratch,
    Pce,
    Cpc,
    Gcpc,
    CpcPlusGcpc,
}

impl PretrainScheme {
    pub const ALL: [PretrainScheme; 5] = [
        PretrainScheme::Scratch,
        PretrainScheme::Pce,
        PretrainScheme::Cpc,
        PretrainScheme::Gcpc,
        PretrainScheme::CpcPlusGcpc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PretrainScheme::Scratch => "scratch",
            PretrainScheme::Pce => "pce",
            PretrainScheme::Cpc => "cpc",
            PretrainScheme::Gcpc => "gcpc",
            PretrainScheme::CpcPlusGcpc => "cpc+gcpc",
        }
    }

    pub fn requires_classifier(self) -> bool {
        matches!(self, PretrainScheme::Gcpc | PretrainScheme::CpcPlusGcpc)
    }

    fn order(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }
}

impl FromStr for PretrainScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrefixDepth {
    /// Copy the whole f_enc + f_ar stack.
    Full,
    /// Copy f_enc plus the first n recurrent layers.
    DensePlusLstm(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub depth: PrefixDepth,
    pub frozen: bool,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            depth: PrefixDepth::Full,
            frozen: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FinetuneLoss {
    Rnnt,
    RnntPlusContrastive,
}

impl FinetuneLoss {
    pub const ALL: [FinetuneLoss; 2] = [FinetuneLoss::Rnnt, FinetuneLoss::RnntPlusContrastive];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneLoss::Rnnt => "rnnt",
            FinetuneLoss::RnntPlusContrastive => "rnnt+c",
        }
    }

    fn order(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }
}

impl FromStr for FinetuneLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown finetune loss {s:?}")))
    }
}

/// Named parameters produced by a pre-training run, plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scheme: String,
    pub seed: u64,
    pub config_hash: u64,
    pub params: ParameterStore,
}

impl Checkpoint {
    pub fn empty(scheme: &str, seed: u64, config_hash: u64) -> Self {
        Self {
            scheme: scheme.to_string(),
            seed,
            config_hash,
            params: ParameterStore::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransducerModel {
    pub spec: TransducerSpec,
    pub params: ParameterStore,
    /// Names locked by the init spec; kept non-trainable throughout.
    pub frozen: Vec<String>,
}

// ---- small shared helpers ------------------------------------------------------

fn sample_batch<R: Rng>(rng: &mut R, len: usize, batch: usize) -> Vec<usize> {
    (0..batch.min(len).max(1)).map(|_| rng.gen_range(0..len)).collect()
}

fn mean_of(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let stacked = g.stack_rows(terms)?;
    g.mean(stacked)
}

/// Pool per-step InfoNCE losses over a batch: each step k averages over the
/// utterances long enough to support it, then steps average together.
fn pooled_contrastive(
    g: &mut Graph,
    store: &ParameterStore,
    views: &[(NodeId, NodeId)],
    heads_prefix: &str,
    cfg: &ContrastiveConfig,
    neg_seeds: &[u64],
) -> Result<NodeId> {
    cfg.validate()?;
    let mut step_means = Vec::new();
    for k in 1..=cfg.steps {
        let mut per_utt = Vec::new();
        for (i, &(targets, contexts)) in views.iter().enumerate() {
            let (t_len, _) = g.value(targets).dim2()?;
            if t_len <= k {
                continue;
            }
            let negatives = losses::sample_negative_sets(t_len, k, cfg, neg_seeds[i])?;
            per_utt.push(losses::infonce_step_loss(
                g,
                targets,
                contexts,
                store,
                heads_prefix,
                k,
                cfg.steps,
                cfg.kappa,
                &negatives,
                cfg.include_positive,
            )?);
        }
        if !per_utt.is_empty() {
            step_means.push(mean_of(g, &per_utt)?);
        }
    }
    if step_means.is_empty() {
        return Err(Error::Contract(
            "no utterance in the batch supports any prediction step".into(),
        ));
    }
    mean_of(g, &step_means)
}

fn classifier_logits(
    store: &ParameterStore,
    spec: &ClassifierSpec,
    utt: &Utterance,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let node = nets::run_phone_classifier(&mut g, store, spec, &utt.frames)?;
    Ok(g.value(node).clone())
}

fn frame_accuracy(logits: &Tensor, labels: &[u16]) -> f64 {
    let (t_len, _) = logits.dim2().expect("logits 2-D");
    let mut correct = 0usize;
    for t in 0..t_len {
        let row = logits.row(t);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(i, _)| i)
            .unwrap();
        if best == labels[t] as usize {
            correct += 1;
        }
    }
    correct as f64 / t_len as f64
}

// ---- prior classifier ------------------------------------------------------------

/// Train the frame-level phone classifier on the labeled split with
/// cross-entropy, holding out the last tenth for the reported accuracy.
/// The returned store is frozen.
pub fn train_prior_classifier(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(ParameterStore, f64)> {
    let labeled = &corpus.train;
    if labeled.is_empty() {
        return Err(Error::Contract("labeled split is empty".into()));
    }
    let holdout = (labeled.len() / 10).max(1).min(labeled.len().saturating_sub(1));
    let train = &labeled[..labeled.len() - holdout];
    let held = &labeled[labeled.len() - holdout..];
    if train.is_empty() {
        return Err(Error::Contract(
            "labeled split too small to carve a held-out portion".into(),
        ));
    }
    let spec = cfg.model.classifier_spec(corpus.config.feature_dim, corpus.config.phones);
    let mut rng = seeds::rng(seeds::derive(seed, "classifier-init"));
    let mut store = nets::init_classifier(&spec, &mut rng)?;
    let mut adam = AdamState::new(cfg.optim.adam());
    let mut batch_rng = seeds::rng(seeds::derive(seed, "classifier-batches"));

    for _ in 0..cfg.optim.classifier_steps {
        let batch = sample_batch(&mut batch_rng, train.len(), cfg.optim.batch_size);
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(batch.len());
        for &i in &batch {
            let logits = nets::run_phone_classifier(&mut g, &store, &spec, &train[i].frames)?;
            terms.push(losses::frame_cross_entropy(&mut g, logits, &train[i].frame_labels)?);
        }
        let loss = mean_of(&mut g, &terms)?;
        g.backward(loss)?;
        let grads = g.param_grads(&store);
        adam.apply(&mut store, &grads)?;
    }

    let mut correct_frames = 0.0;
    let mut total_frames = 0.0;
    for utt in held {
        let logits = classifier_logits(&store, &spec, utt)?;
        correct_frames += frame_accuracy(&logits, &utt.frame_labels) * utt.len() as f64;
        total_frames += utt.len() as f64;
    }
    store.freeze_all();
    Ok((store, correct_frames / total_frames))
}

// ---- pre-training -------------------------------------------------------------

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<f64>,
}

/// Pre-train the encoder under one scheme. The checkpoint holds exactly the
/// parameters the scheme trained; scratch yields an empty marker. Guided
/// schemes require the frozen classifier and never touch its parameters.
pub fn pretrain_encoder(
    corpus: &Corpus,
    scheme: PretrainScheme,
    cfg: &ExperimentConfig,
    seed: u64,
    classifier: Option<&ParameterStore>,
) -> Result<PretrainOutcome> {
    let config_hash = cfg.content_hash();
    if scheme == PretrainScheme::Scratch {
        return Ok(PretrainOutcome {
            checkpoint: Checkpoint::empty(scheme.name(), seed, config_hash),
            curve: Vec::new(),
        });
    }
    if scheme.requires_classifier() && classifier.is_none() {
        return Err(Error::Contract(format!(
            "{} pre-training requires a trained phone classifier",
            scheme.name()
        )));
    }
    let utts = &corpus.pretrain;
    if utts.is_empty() {
        return Err(Error::Contract("pretrain split is empty".into()));
    }
    let phones = corpus.config.phones;
    let topo = cfg.model.encoder_topology(corpus.config.feature_dim, phones);
    let cls_spec = cfg.model.classifier_spec(corpus.config.feature_dim, phones);

    let mut rng = seeds::rng(seeds::derive(seed, "pretrain-init"));
    let mut store = ParameterStore::new();
    nets::init_encoder(&mut store, &topo, &mut rng)?;
    match scheme {
        PretrainScheme::Pce => {
            let w = crate::numcore::params::uniform_init(
                &mut rng,
                vec![phones, topo.context_dim()],
                topo.context_dim(),
                phones,
            );
            store.insert("pce.w", w, true)?;
            store.insert("pce.b", Tensor::zeros(vec![phones]), true)?;
        }
        PretrainScheme::Cpc => {
            nets::init_step_heads(
                &mut store,
                "cheads",
                cfg.contrastive.steps,
                topo.latent_dim(),
                topo.context_dim(),
                &mut rng,
            )?;
        }
        PretrainScheme::Gcpc => {
            nets::init_dense_stack(&mut store, "genc", &topo.genc, &mut rng)?;
            nets::init_step_heads(
                &mut store,
                "gheads",
                cfg.contrastive.steps,
                topo.guidance_dim(),
                topo.context_dim(),
                &mut rng,
            )?;
        }
        PretrainScheme::CpcPlusGcpc => {
            nets::init_step_heads(
                &mut store,
                "cheads",
                cfg.contrastive.steps,
                topo.latent_dim(),
                topo.context_dim(),
                &mut rng,
            )?;
            nets::init_dense_stack(&mut store, "genc", &topo.genc, &mut rng)?;
            nets::init_step_heads(
                &mut store,
                "gheads",
                cfg.contrastive.steps,
                topo.guidance_dim(),
                topo.context_dim(),
                &mut rng,
            )?;
        }
        PretrainScheme::Scratch => unreachable!(),
    }

    // The prior model is fixed: its logits depend only on the data, so they
    // are computed once outside the training graph.
    let prior_logits: Vec<Tensor> = if scheme.requires_classifier() {
        let cls = classifier.unwrap();
        utts.iter()
            .map(|u| classifier_logits(cls, &cls_spec, u))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut adam = AdamState::new(cfg.optim.adam());
    let mut batch_rng = seeds::rng(seeds::derive(seed, "pretrain-batches"));
    let neg_base = seeds::derive(seed, "pretrain-negatives");
    let mut curve = Vec::with_capacity(cfg.optim.pretrain_steps);

    for step in 0..cfg.optim.pretrain_steps {
        let batch = sample_batch(&mut batch_rng, utts.len(), cfg.optim.batch_size);
        let mut g = Graph::new();
        let loss = match scheme {
            PretrainScheme::Pce => {
                let mut terms = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let (_, c) = nets::run_encoder(&mut g, &store, &topo, &utts[i].frames)?;
                    let w = g.param(&store, "pce.w")?;
                    let b = g.param(&store, "pce.b")?;
                    let logits = g.matmul_bt(c, w)?;
                    let logits = g.add_row_broadcast(logits, b)?;
                    terms.push(losses::frame_cross_entropy(&mut g, logits, &utts[i].frame_labels)?);
                }
                mean_of(&mut g, &terms)?
            }
            PretrainScheme::Cpc | PretrainScheme::Gcpc | PretrainScheme::CpcPlusGcpc => {
                let mut latent_views = Vec::with_capacity(batch.len());
                let mut guided_views = Vec::with_capacity(batch.len());
                let mut neg_seeds = Vec::with_capacity(batch.len());
                for (slot, &i) in batch.iter().enumerate() {
                    let (z, c) = nets::run_encoder(&mut g, &store, &topo, &utts[i].frames)?;
                    if scheme != PretrainScheme::Gcpc {
                        latent_views.push((z, c));
                    }
                    if scheme.requires_classifier() {
                        let p = g.constant(prior_logits[i].clone());
                        let q = nets::run_guidance(&mut g, &store, &topo.genc, p)?;
                        guided_views.push((q, c));
                    }
                    neg_seeds.push(seeds::derive_indexed(
                        neg_base,
                        "step-slot",
                        (step * cfg.optim.batch_size + slot) as u64,
                    ));
                }
                match scheme {
                    PretrainScheme::Cpc => pooled_contrastive(
                        &mut g,
                        &store,
                        &latent_views,
                        "cheads",
                        &cfg.contrastive.cpc(),
                        &neg_seeds,
                    )?,
                    PretrainScheme::Gcpc => pooled_contrastive(
                        &mut g,
                        &store,
                        &guided_views,
                        "gheads",
                        &cfg.contrastive.gcpc(),
                        &neg_seeds,
                    )?,
                    _ => {
                        let plain = pooled_contrastive(
                            &mut g,
                            &store,
                            &latent_views,
                            "cheads",
                            &cfg.contrastive.cpc(),
                            &neg_seeds,
                        )?;
                        let guided = pooled_contrastive(
                            &mut g,
                            &store,
                            &guided_views,
                            "gheads",
                            &cfg.contrastive.gcpc(),
                            &neg_seeds,
                        )?;
                        g.add(plain, guided)?
                    }
                }
            }
            PretrainScheme::Scratch => unreachable!(),
        };
        curve.push(g.value(loss).item());
        g.backward(loss)?;
        let grads = g.param_grads(&store);
        adam.apply(&mut store, &grads)?;
    }

    Ok(PretrainOutcome {
        checkpoint: Checkpoint {
            scheme: scheme.name().to_string(),
            seed,
            config_hash,
            params: store,
        },
        curve,
    })
}

// ---- downstream initialization ------------------------------------------------------

fn prefix_names(store: &ParameterStore, topo_far_layers: usize, depth: PrefixDepth) -> Vec<String> {
    match depth {
        PrefixDepth::Full => {
            let mut names = store.names_with_prefix("fenc.");
            names.extend(store.names_with_prefix("far."));
            names
        }
        PrefixDepth::DensePlusLstm(n) => {
            let mut names = store.names_with_prefix("fenc.");
            for layer in 0..n.min(topo_far_layers) {
                names.extend(store.names_with_prefix(&format!("far.{layer}.")));
            }
            names
        }
    }
}

/// Build a fresh transducer and copy the checkpoint's encoder prefix into it
/// bit-exactly. Everything else (remaining encoder layers, prediction and
/// joint networks) keeps its fresh initialization.
pub fn initialize_downstream(
    checkpoint: &Checkpoint,
    init: &InitSpec,
    cfg: &ExperimentConfig,
    corpus_config: &CorpusConfig,
    seed: u64,
) -> Result<TransducerModel> {
    let spec = cfg.model.transducer_spec(corpus_config.feature_dim, corpus_config.phones);
    if let PrefixDepth::DensePlusLstm(n) = init.depth {
        if n > spec.encoder.far.layers {
            return Err(Error::Contract(format!(
                "init prefix asks for {n} recurrent layers, encoder has {}",
                spec.encoder.far.layers
            )));
        }
    }
    let mut rng = seeds::rng(seeds::derive(seed, "downstream-init"));
    let mut params = nets::init_transducer(&spec, &mut rng)?;
    let mut frozen = Vec::new();
    if !checkpoint.params.is_empty() {
        let names = prefix_names(&params, spec.encoder.far.layers, init.depth);
        for name in &names {
            let source = checkpoint.params.get(name).map_err(|_| {
                Error::Contract(format!(
                    "checkpoint from scheme {:?} lacks parameter {name:?}",
                    checkpoint.scheme
                ))
            })?;
            params.set(name, source.clone())?;
        }
        if init.frozen {
            for name in &names {
                params.set_trainable(name, false)?;
            }
            frozen = names;
        }
    }
    Ok(TransducerModel { spec, params, frozen })
}

// ---- fine-tuning ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub curve: Vec<f64>,
    /// Utterances whose contrastive term was skipped because T <= K.
    pub contrastive_skips: usize,
}

fn utterance_rnnt_loss(
    g: &mut Graph,
    model: &TransducerModel,
    utt: &Utterance,
) -> Result<(NodeId, NodeId, NodeId)> {
    let (z, enc) = nets::run_encoder(g, &model.params, &model.spec.encoder, &utt.frames)?;
    let pred = nets::prediction_network_forward(g, &model.params, &model.spec, &utt.tokens)?;
    let grid = nets::joint_logprob_grid(g, &model.params, &model.spec, enc, pred)?;
    let loss = losses::rnnt_loss(g, &grid, &utt.tokens, model.spec.blank_id())?;
    Ok((loss, z, enc))
}

/// Fine-tune with the transducer loss, optionally adding the contrastive
/// term on the encoder being trained (joint training). Frozen parameters are
/// respected by the optimizer.
pub fn finetune_transducer(
    model: &mut TransducerModel,
    corpus: &Corpus,
    ft_loss: FinetuneLoss,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let labeled = &corpus.train;
    if labeled.is_empty() {
        return Err(Error::Contract("labeled split is empty".into()));
    }
    if ft_loss == FinetuneLoss::RnntPlusContrastive && !model.params.contains("ftheads.1.w") {
        let mut rng = seeds::rng(seeds::derive(seed, "ftheads-init"));
        nets::init_step_heads(
            &mut model.params,
            "ftheads",
            cfg.contrastive.steps,
            model.spec.encoder.latent_dim(),
            model.spec.encoder.context_dim(),
            &mut rng,
        )?;
    }
    let mut adam = AdamState::new(cfg.optim.adam());
    let mut batch_rng = seeds::rng(seeds::derive(seed, "finetune-batches"));
    let neg_base = seeds::derive(seed, "finetune-negatives");
    let cpc_cfg = cfg.contrastive.cpc();
    let mut curve = Vec::with_capacity(cfg.optim.finetune_steps);
    let mut skips = 0usize;

    for step in 0..cfg.optim.finetune_steps {
        let batch = sample_batch(&mut batch_rng, labeled.len(), cfg.optim.batch_size);
        let mut g = Graph::new();
        let mut rnnt_terms = Vec::with_capacity(batch.len());
        let mut contrastive_terms = Vec::new();
        for (slot, &i) in batch.iter().enumerate() {
            let utt = &labeled[i];
            let (loss, z, enc) = utterance_rnnt_loss(&mut g, model, utt)?;
            rnnt_terms.push(loss);
            if ft_loss == FinetuneLoss::RnntPlusContrastive {
                if utt.len() > cpc_cfg.steps {
                    let neg_seed = seeds::derive_indexed(
                        neg_base,
                        "step-slot",
                        (step * cfg.optim.batch_size + slot) as u64,
                    );
                    contrastive_terms.push(losses::contrastive_loss(
                        &mut g,
                        z,
                        enc,
                        &model.params,
                        "ftheads",
                        &cpc_cfg,
                        neg_seed,
                    )?);
                } else {
                    skips += 1;
                }
            }
        }
        let mut loss = mean_of(&mut g, &rnnt_terms)?;
        if !contrastive_terms.is_empty() {
            let c = mean_of(&mut g, &contrastive_terms)?;
            loss = g.add(loss, c)?;
        }
        curve.push(g.value(loss).item());
        g.backward(loss)?;
        let grads = g.param_grads(&model.params);
        adam.apply(&mut model.params, &grads)?;
    }
    Ok(FinetuneReport {
        curve,
        contrastive_skips: skips,
    })
}

// ---- evaluation helpers -----------------------------------------------------------

/// Decode a split and accumulate alignment counts against the references.
pub fn evaluate_transducer(
    model: &TransducerModel,
    corpus: &Corpus,
    split: Split,
    emission_cap: usize,
) -> Result<AlignmentCounts> {
    let utts = corpus.split(split);
    if utts.is_empty() {
        return Err(Error::Contract(format!("{} split is empty", split.tag())));
    }
    let mut counts = AlignmentCounts::default();
    for utt in utts {
        let hyp = eval::greedy_decode(&model.params, &model.spec, &utt.frames, emission_cap)?;
        counts.accumulate(&eval::align_and_count_errors(&utt.tokens, &hyp));
    }
    Ok(counts)
}

/// Frame-level context embeddings (f_ar outputs) with phone labels, for
/// separation analysis.
pub fn context_embeddings(
    store: &ParameterStore,
    topo: &EncoderTopology,
    utterances: &[Utterance],
    max_utterances: usize,
) -> Result<EmbeddingMatrix> {
    let take = utterances.len().min(max_utterances);
    if take == 0 {
        return Err(Error::Contract("no utterances for embedding analysis".into()));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for utt in &utterances[..take] {
        let mut g = Graph::new();
        let (_, c) = nets::run_encoder(&mut g, store, topo, &utt.frames)?;
        let value = g.value(c);
        for t in 0..utt.len() {
            rows.push(value.row(t).to_vec());
            labels.push(utt.frame_labels[t]);
        }
    }
    EmbeddingMatrix::new(Tensor::from_rows(&rows)?, labels)
}

// ---- the comparison grid ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub scheme: String,
    pub finetune_loss: String,
    pub seed: u64,
    pub error: Option<String>,
    pub wer: Option<f64>,
    pub werr_pct: Option<f64>,
    pub subr_pct: Option<f64>,
    pub insr_pct: Option<f64>,
    pub delr_pct: Option<f64>,
    pub counts: Option<AlignmentCounts>,
    /// Class separation of the initial (pre-trained or fresh) encoder's
    /// context embeddings on the test subset.
    pub fisher_ratio: Option<f64>,
    pub classifier_accuracy: Option<f64>,
    pub pretrain_curve: Vec<f64>,
    pub finetune_curve: Vec<f64>,
    pub contrastive_skips: usize,
    pub wall_time_secs: f64,
}

impl RunMetrics {
    fn failed(scheme: PretrainScheme, ft: FinetuneLoss, seed: u64, err: &Error) -> Self {
        Self {
            scheme: scheme.name().into(),
            finetune_loss: ft.name().into(),
            seed,
            error: Some(err.to_string()),
            wer: None,
            werr_pct: None,
            subr_pct: None,
            insr_pct: None,
            delr_pct: None,
            counts: None,
            fisher_ratio: None,
            classifier_accuracy: None,
            pretrain_curve: Vec::new(),
            finetune_curve: Vec::new(),
            contrastive_skips: 0,
            wall_time_secs: 0.0,
        }
    }
}

pub const EMBEDDING_ANALYSIS_UTTERANCES: usize = 40;

fn run_cell(
    corpus: &Corpus,
    scheme: PretrainScheme,
    ft: FinetuneLoss,
    cfg: &ExperimentConfig,
    seed: u64,
    init: &InitSpec,
    pretrained: &Checkpoint,
    pretrain_curve: &[f64],
    classifier_accuracy: Option<f64>,
) -> Result<RunMetrics> {
    let started = Instant::now();
    let mut model = initialize_downstream(pretrained, init, cfg, &corpus.config, seed)?;
    let topo = model.spec.encoder.clone();
    let fisher = context_embeddings(
        &model.params,
        &topo,
        &corpus.test,
        EMBEDDING_ANALYSIS_UTTERANCES,
    )
    .and_then(|e| eval::fisher_ratio(&e))?;
    let report = finetune_transducer(&mut model, corpus, ft, cfg, seed)?;
    let counts = evaluate_transducer(&model, corpus, Split::Test, cfg.emission_cap)?;
    Ok(RunMetrics {
        scheme: scheme.name().into(),
        finetune_loss: ft.name().into(),
        seed,
        error: None,
        wer: Some(counts.wer()?),
        werr_pct: None,
        subr_pct: None,
        insr_pct: None,
        delr_pct: None,
        counts: Some(counts),
        fisher_ratio: Some(fisher),
        classifier_accuracy,
        pretrain_curve: pretrain_curve.to_vec(),
        finetune_curve: report.curve,
        contrastive_skips: report.contrastive_skips,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

fn seed_cells(
    corpus: &Corpus,
    schemes: &[PretrainScheme],
    ft_losses: &[FinetuneLoss],
    cfg: &ExperimentConfig,
    init: &InitSpec,
    seed: u64,
) -> Vec<RunMetrics> {
    let needs_classifier = schemes.iter().any(|s| s.requires_classifier());
    let classifier = if needs_classifier {
        match train_prior_classifier(corpus, cfg, seed) {
            Ok((store, acc)) => Some((store, acc)),
            Err(e) => {
                // Every classifier-dependent cell of this seed fails together.
                return schemes
                    .iter()
                    .flat_map(|&s| ft_losses.iter().map(move |&f| (s, f)))
                    .map(|(s, f)| {
                        if s.requires_classifier() {
                            RunMetrics::failed(s, f, seed, &e)
                        } else {
                            run_scheme_without_classifier(corpus, s, f, cfg, init, seed)
                        }
                    })
                    .collect();
            }
        }
    } else {
        None
    };

    let mut out = Vec::new();
    for &scheme in schemes {
        let accuracy = classifier.as_ref().map(|(_, a)| *a).filter(|_| scheme.requires_classifier());
        let pretrain = pretrain_encoder(
            corpus,
            scheme,
            cfg,
            seed,
            classifier.as_ref().map(|(s, _)| s),
        );
        match pretrain {
            Ok(outcome) => {
                for &ft in ft_losses {
                    let cell = run_cell(
                        corpus,
                        scheme,
                        ft,
                        cfg,
                        seed,
                        init,
                        &outcome.checkpoint,
                        &outcome.curve,
                        accuracy,
                    )
                    .unwrap_or_else(|e| RunMetrics::failed(scheme, ft, seed, &e));
                    out.push(cell);
                }
            }
            Err(e) => {
                for &ft in ft_losses {
                    out.push(RunMetrics::failed(scheme, ft, seed, &e));
                }
            }
        }
    }
    out
}

fn run_scheme_without_classifier(
    corpus: &Corpus,
    scheme: PretrainScheme,
    ft: FinetuneLoss,
    cfg: &ExperimentConfig,
    init: &InitSpec,
    seed: u64,
) -> RunMetrics {
    match pretrain_encoder(corpus, scheme, cfg, seed, None) {
        Ok(outcome) => run_cell(
            corpus,
            scheme,
            ft,
            cfg,
            seed,
            init,
            &outcome.checkpoint,
            &outcome.curve,
            None,
        )
        .unwrap_or_else(|e| RunMetrics::failed(scheme, ft, seed, &e)),
        Err(e) => RunMetrics::failed(scheme, ft, seed, &e),
    }
}

/// Run the full (scheme x finetune-loss x seed) grid. The scratch + plain
/// transducer cell is always included and serves as the per-seed baseline
/// for relative reductions. Cells are independent and run in parallel; the
/// result order is deterministic.
pub fn run_comparison(
    corpus: &Corpus,
    schemes: &[PretrainScheme],
    ft_losses: &[FinetuneLoss],
    seeds_list: &[u64],
    cfg: &ExperimentConfig,
    init: &InitSpec,
) -> Result<Vec<RunMetrics>> {
    if seeds_list.is_empty() {
        return Err(Error::Contract("need at least one seed".into()));
    }
    let mut schemes: Vec<PretrainScheme> = schemes.to_vec();
    if !schemes.contains(&PretrainScheme::Scratch) {
        schemes.insert(0, PretrainScheme::Scratch);
    }
    schemes.sort_by_key(|s| s.order());
    schemes.dedup();
    let mut ft_losses: Vec<FinetuneLoss> = ft_losses.to_vec();
    if !ft_losses.contains(&FinetuneLoss::Rnnt) {
        ft_losses.insert(0, FinetuneLoss::Rnnt);
    }
    ft_losses.sort_by_key(|f| f.order());
    ft_losses.dedup();

    let mut cells: Vec<RunMetrics> = seeds_list
        .par_iter()
        .flat_map(|&seed| seed_cells(corpus, &schemes, &ft_losses, cfg, init, seed))
        .collect();

    // Pair each cell with its seed's scratch + rnnt baseline.
    let baselines: std::collections::HashMap<u64, AlignmentCounts> = cells
        .iter()
        .filter(|c| c.scheme == "scratch" && c.finetune_loss == "rnnt")
        .filter_map(|c| c.counts.map(|k| (c.seed, k)))
        .collect();
    for cell in &mut cells {
        let (Some(counts), Some(base)) = (cell.counts.as_ref(), baselines.get(&cell.seed)) else {
            continue;
        };
        if let Ok(report) = eval::compute_wer_werr(counts, base) {
            cell.werr_pct = Some(report.werr_pct);
            cell.subr_pct = report.subr_pct;
            cell.insr_pct = report.insr_pct;
            cell.delr_pct = report.delr_pct;
        }
    }
    cells.sort_by_key(|c| {
        (
            PretrainScheme::from_str(&c.scheme).map(|s| s.order()).unwrap_or(usize::MAX),
            FinetuneLoss::from_str(&c.finetune_loss).map(|f| f.order()).unwrap_or(usize::MAX),
            c.seed,
        )
    });
    Ok(cells)
}

/// Mean/stddev rows per (scheme, finetune loss) across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub scheme: String,
    pub finetune_loss: String,
    pub seeds: usize,
    pub mean_wer: f64,
    pub std_wer: f64,
    pub mean_werr_pct: f64,
    pub std_werr_pct: f64,
    pub mean_fisher: f64,
}

pub fn aggregate(cells: &[RunMetrics]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in cells {
        let key = (c.scheme.clone(), c.finetune_loss.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let stats = |xs: &[f64]| -> (f64, f64) {
        if xs.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        (mean, var.sqrt())
    };
    keys.into_iter()
        .map(|(scheme, ft)| {
            let group: Vec<&RunMetrics> = cells
                .iter()
                .filter(|c| c.scheme == scheme && c.finetune_loss == ft && c.error.is_none())
                .collect();
            let wers: Vec<f64> = group.iter().filter_map(|c| c.wer).collect();
            let werrs: Vec<f64> = group.iter().filter_map(|c| c.werr_pct).collect();
            let fishers: Vec<f64> = group.iter().filter_map(|c| c.fisher_ratio).collect();
            let (mean_wer, std_wer) = stats(&wers);
            let (mean_werr, std_werr) = stats(&werrs);
            let (mean_fisher, _) = stats(&fishers);
            AggregateRow {
                scheme,
                finetune_loss: ft,
                seeds: group.len(),
                mean_wer,
                std_wer,
                mean_werr_pct: mean_werr,
                std_werr_pct: std_werr,
                mean_fisher,
            }
        })
        .collect()
}
