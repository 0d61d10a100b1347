//! Network building blocks: dense stacks, LSTM stacks, the feature encoder
//! (f_enc) + autoregressive context network (f_ar) pair, the guidance encoder
//! (g_enc), step-specific prediction heads, the frame-level phone classifier,
//! and the transducer components (encoder, prediction network, joint network).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::params::uniform_init;
use crate::numcore::{Graph, NodeId, ParameterStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Feed-forward stack: affine + activation per layer. Zero layers = identity.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseStackSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl DenseStackSpec {
    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.input_dim)
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }
}

/// Stack of LSTM layers, all of the same width.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStackSpec {
    pub input_dim: usize,
    pub layers: usize,
    pub width: usize,
}

/// f_enc (dense) feeding f_ar (recurrent), plus the guidance stack g_enc.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTopology {
    pub fenc: DenseStackSpec,
    pub far: LstmStackSpec,
    pub genc: DenseStackSpec,
}

impl EncoderTopology {
    pub fn validate(&self) -> Result<()> {
        if self.fenc.widths.is_empty() {
            return Err(Error::Contract("f_enc needs at least one layer".into()));
        }
        if self.far.layers == 0 {
            return Err(Error::Contract("f_ar needs at least one layer".into()));
        }
        if self.fenc.output_dim() != self.far.input_dim {
            return Err(Error::Dimension(format!(
                "f_enc output {} does not feed f_ar input {}",
                self.fenc.output_dim(),
                self.far.input_dim
            )));
        }
        if self.genc.depth() > 3 {
            return Err(Error::Contract(format!(
                "g_enc depth {} outside 0..=3",
                self.genc.depth()
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.fenc.output_dim()
    }

    pub fn context_dim(&self) -> usize {
        self.far.width
    }

    pub fn guidance_dim(&self) -> usize {
        self.genc.output_dim()
    }
}

/// Recurrent frame-level phone classifier (the prior-knowledge model).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub lstm: LstmStackSpec,
    pub phones: usize,
}

/// Transducer: pretrainable encoder + prediction network + single-dense-layer
/// joint network over the vocabulary plus blank.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerSpec {
    pub encoder: EncoderTopology,
    pub vocab: usize,
    pub embed_dim: usize,
    pub pred_width: usize,
}

impl TransducerSpec {
    pub fn blank_id(&self) -> usize {
        self.vocab
    }
}

// ---- parameter initialization ----------------------------------------------

pub fn init_dense_stack<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    spec: &DenseStackSpec,
    rng: &mut R,
) -> Result<()> {
    let mut in_dim = spec.input_dim;
    for (i, &out_dim) in spec.widths.iter().enumerate() {
        let w = uniform_init(rng, vec![out_dim, in_dim], in_dim, out_dim);
        store.insert(&format!("{prefix}.{i}.w"), w, true)?;
        store.insert(&format!("{prefix}.{i}.b"), Tensor::zeros(vec![out_dim]), true)?;
        in_dim = out_dim;
    }
    Ok(())
}

/// Gate layout is [input, forget, candidate, output]; the forget-gate bias
/// section starts at 1.0.
pub fn init_lstm_stack<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    spec: &LstmStackSpec,
    rng: &mut R,
) -> Result<()> {
    let h = spec.width;
    let mut in_dim = spec.input_dim;
    for i in 0..spec.layers {
        let w_ih = uniform_init(rng, vec![4 * h, in_dim], in_dim, 4 * h);
        let w_hh = uniform_init(rng, vec![4 * h, h], h, 4 * h);
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
        store.insert(&format!("{prefix}.{i}.w_ih"), w_ih, true)?;
        store.insert(&format!("{prefix}.{i}.w_hh"), w_hh, true)?;
        store.insert(&format!("{prefix}.{i}.b"), Tensor::vector(bias)?, true)?;
        in_dim = h;
    }
    Ok(())
}

pub fn init_encoder<R: Rng>(
    store: &mut ParameterStore,
    topo: &EncoderTopology,
    rng: &mut R,
) -> Result<()> {
    topo.validate()?;
    init_dense_stack(store, "fenc", &topo.fenc, rng)?;
    init_lstm_stack(store, "far", &topo.far, rng)
}

/// One affine head per prediction step k = 1..=steps.
pub fn init_step_heads<R: Rng>(
    store: &mut ParameterStore,
    prefix: &str,
    steps: usize,
    target_dim: usize,
    context_dim: usize,
    rng: &mut R,
) -> Result<()> {
    for k in 1..=steps {
        let w = uniform_init(rng, vec![target_dim, context_dim], context_dim, target_dim);
        store.insert(&format!("{prefix}.{k}.w"), w, true)?;
        store.insert(&format!("{prefix}.{k}.b"), Tensor::zeros(vec![target_dim]), true)?;
    }
    Ok(())
}

pub fn init_classifier<R: Rng>(spec: &ClassifierSpec, rng: &mut R) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    init_lstm_stack(&mut store, "cls.lstm", &spec.lstm, rng)?;
    let w = uniform_init(rng, vec![spec.phones, spec.lstm.width], spec.lstm.width, spec.phones);
    store.insert("cls.out.w", w, true)?;
    store.insert("cls.out.b", Tensor::zeros(vec![spec.phones]), true)?;
    Ok(store)
}

pub fn init_transducer<R: Rng>(spec: &TransducerSpec, rng: &mut R) -> Result<ParameterStore> {
    let mut store = ParameterStore::new();
    init_encoder(&mut store, &spec.encoder, rng)?;
    let emb = uniform_init(
        rng,
        vec![spec.vocab, spec.embed_dim],
        spec.vocab,
        spec.embed_dim,
    );
    store.insert("pred.emb", emb, true)?;
    init_lstm_stack(
        &mut store,
        "pred.lstm",
        &LstmStackSpec {
            input_dim: spec.embed_dim,
            layers: 1,
            width: spec.pred_width,
        },
        rng,
    )?;
    let out = spec.vocab + 1;
    let d_c = spec.encoder.context_dim();
    let w_enc = uniform_init(rng, vec![out, d_c], d_c, out);
    let w_pred = uniform_init(rng, vec![out, spec.pred_width], spec.pred_width, out);
    store.insert("joint.w_enc", w_enc, true)?;
    store.insert("joint.w_pred", w_pred, true)?;
    store.insert("joint.b", Tensor::zeros(vec![out]), true)?;
    Ok(store)
}

// ---- forward passes ----------------------------------------------------------

pub fn dense_stack_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    spec: &DenseStackSpec,
    x: NodeId,
) -> Result<NodeId> {
    let mut cur = x;
    for i in 0..spec.widths.len() {
        let w = g.param(store, &format!("{prefix}.{i}.w"))?;
        let b = g.param(store, &format!("{prefix}.{i}.b"))?;
        let pre = g.matmul_bt(cur, w)?;
        let pre = g.add_row_broadcast(pre, b)?;
        cur = spec.activation.apply(g, pre)?;
    }
    Ok(cur)
}

/// Standard LSTM gate equations for one step.
pub fn lstm_cell_step(
    g: &mut Graph,
    w_ih: NodeId,
    w_hh: NodeId,
    bias: NodeId,
    x: NodeId,
    h: NodeId,
    c: NodeId,
) -> Result<(NodeId, NodeId)> {
    let four_h = g.value(bias).numel();
    if four_h % 4 != 0 {
        return Err(Error::Dimension("lstm bias length must be 4*width".into()));
    }
    let hs = four_h / 4;
    let xi = g.matvec(w_ih, x)?;
    let hh = g.matvec(w_hh, h)?;
    let pre = g.add(xi, hh)?;
    let pre = g.add(pre, bias)?;
    let i_gate = g.slice(pre, 0, hs)?;
    let i_gate = g.sigmoid(i_gate)?;
    let f_gate = g.slice(pre, hs, hs)?;
    let f_gate = g.sigmoid(f_gate)?;
    let cand = g.slice(pre, 2 * hs, hs)?;
    let cand = g.tanh(cand)?;
    let o_gate = g.slice(pre, 3 * hs, hs)?;
    let o_gate = g.sigmoid(o_gate)?;
    let keep = g.mul(f_gate, c)?;
    let write = g.mul(i_gate, cand)?;
    let c_next = g.add(keep, write)?;
    let c_act = g.tanh(c_next)?;
    let h_next = g.mul(o_gate, c_act)?;
    Ok((h_next, c_next))
}

/// Left-to-right LSTM stack over a [T, d] sequence; returns [T, width]
/// hidden states of the top layer. Causal by construction.
pub fn lstm_stack_forward(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    spec: &LstmStackSpec,
    input: NodeId,
) -> Result<NodeId> {
    let (t_len, _) = g.value(input).dim2()?;
    let mut cur = input;
    for layer in 0..spec.layers {
        let w_ih = g.param(store, &format!("{prefix}.{layer}.w_ih"))?;
        let w_hh = g.param(store, &format!("{prefix}.{layer}.w_hh"))?;
        let bias = g.param(store, &format!("{prefix}.{layer}.b"))?;
        let mut h = g.zeros(vec![spec.width]);
        let mut c = g.zeros(vec![spec.width]);
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let x = g.row(cur, t)?;
            let (h2, c2) = lstm_cell_step(g, w_ih, w_hh, bias, x, h, c)?;
            h = h2;
            c = c2;
            rows.push(h);
        }
        cur = g.stack_rows(&rows)?;
    }
    Ok(cur)
}

/// z = f_enc(x) per frame, c = f_ar(z) left to right.
/// Empty feature sequences are unrepresentable (tensor dims are positive).
pub fn run_encoder(
    g: &mut Graph,
    store: &ParameterStore,
    topo: &EncoderTopology,
    features: &Tensor,
) -> Result<(NodeId, NodeId)> {
    let (_, d) = features.dim2()?;
    if d != topo.fenc.input_dim {
        return Err(Error::Dimension(format!(
            "features have dim {d}, f_enc expects {}",
            topo.fenc.input_dim
        )));
    }
    let x = g.constant(features.clone());
    let z = dense_stack_forward(g, store, "fenc", &topo.fenc, x)?;
    let c = lstm_stack_forward(g, store, "far", &topo.far, z)?;
    Ok((z, c))
}

/// q = g_enc(p) per frame. Depth 0 returns the logits node unchanged.
pub fn run_guidance(
    g: &mut Graph,
    store: &ParameterStore,
    spec: &DenseStackSpec,
    logits: NodeId,
) -> Result<NodeId> {
    dense_stack_forward(g, store, "genc", spec, logits)
}

/// W_k * c + b_k for step k in 1..=steps.
pub fn apply_step_head(
    g: &mut Graph,
    store: &ParameterStore,
    prefix: &str,
    k: usize,
    steps: usize,
    context: NodeId,
) -> Result<NodeId> {
    if k < 1 || k > steps {
        return Err(Error::Contract(format!(
            "step head k={k} outside 1..={steps}"
        )));
    }
    let w = g.param(store, &format!("{prefix}.{k}.w"))?;
    let b = g.param(store, &format!("{prefix}.{k}.b"))?;
    g.affine(w, context, b)
}

/// Frame-synchronous phone logits, no softmax applied.
pub fn run_phone_classifier(
    g: &mut Graph,
    store: &ParameterStore,
    spec: &ClassifierSpec,
    features: &Tensor,
) -> Result<NodeId> {
    let (_, d) = features.dim2()?;
    if d != spec.input_dim {
        return Err(Error::Dimension(format!(
            "features have dim {d}, classifier expects {}",
            spec.input_dim
        )));
    }
    let x = g.constant(features.clone());
    let h = lstm_stack_forward(g, store, "cls.lstm", &spec.lstm, x)?;
    let w = g.param(store, "cls.out.w")?;
    let b = g.param(store, "cls.out.b")?;
    let logits = g.matmul_bt(h, w)?;
    g.add_row_broadcast(logits, b)
}

/// Prediction-network states for u = 0..=U. Row 0 is the all-zero start
/// state; row u is the state after consuming tokens[..u].
pub fn prediction_network_forward(
    g: &mut Graph,
    store: &ParameterStore,
    spec: &TransducerSpec,
    tokens: &[u16],
) -> Result<NodeId> {
    for &tok in tokens {
        if tok as usize >= spec.vocab {
            return Err(Error::Contract(format!(
                "token {tok} outside vocabulary of size {}",
                spec.vocab
            )));
        }
    }
    let emb = g.param(store, "pred.emb")?;
    let w_ih = g.param(store, "pred.lstm.0.w_ih")?;
    let w_hh = g.param(store, "pred.lstm.0.w_hh")?;
    let bias = g.param(store, "pred.lstm.0.b")?;
    let mut rows = Vec::with_capacity(tokens.len() + 1);
    rows.push(g.zeros(vec![spec.pred_width]));
    let mut h = g.zeros(vec![spec.pred_width]);
    let mut c = g.zeros(vec![spec.pred_width]);
    for &tok in tokens {
        let x = g.row(emb, tok as usize)?;
        let (h2, c2) = lstm_cell_step(g, w_ih, w_hh, bias, x, h, c)?;
        h = h2;
        c = c2;
        rows.push(h);
    }
    g.stack_rows(&rows)
}

/// Normalized log-distributions of the joint network for every (t, u):
/// log_softmax(W_enc h_t + W_pred h_u + b). Indexed [t][u], each of length
/// vocab + 1 with blank last.
pub fn joint_logprob_grid(
    g: &mut Graph,
    store: &ParameterStore,
    spec: &TransducerSpec,
    enc_out: NodeId,
    pred_out: NodeId,
) -> Result<Vec<Vec<NodeId>>> {
    let (t_len, _) = g.value(enc_out).dim2()?;
    let (u_len, _) = g.value(pred_out).dim2()?;
    if g.value(pred_out).dim2()?.1 != spec.pred_width {
        return Err(Error::Dimension(
            "prediction output width does not match transducer spec".into(),
        ));
    }
    let w_enc = g.param(store, "joint.w_enc")?;
    let w_pred = g.param(store, "joint.w_pred")?;
    let b = g.param(store, "joint.b")?;
    let e = g.matmul_bt(enc_out, w_enc)?;
    let p = g.matmul_bt(pred_out, w_pred)?;
    let p = g.add_row_broadcast(p, b)?;
    let mut grid = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let et = g.row(e, t)?;
        let mut row = Vec::with_capacity(u_len);
        for u in 0..u_len {
            let pu = g.row(p, u)?;
            let logits = g.add(et, pu)?;
            row.push(g.log_softmax(logits)?);
        }
        grid.push(row);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{finite_diff_gradient, max_rel_error};
    use crate::seeds;
    use rand::Rng;

    fn zero_cell_params(g: &mut Graph, in_dim: usize, h: usize) -> (NodeId, NodeId, NodeId) {
        let w_ih = g.zeros(vec![4 * h, in_dim]);
        let w_hh = g.zeros(vec![4 * h, h]);
        let b = g.zeros(vec![4 * h]);
        (w_ih, w_hh, b)
    }

    #[test]
    fn lstm_cell_all_zero_params_gives_zero_state() {
        let mut g = Graph::new();
        let (w_ih, w_hh, b) = zero_cell_params(&mut g, 3, 2);
        let x = g.constant(Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap());
        let h = g.zeros(vec![2]);
        let c = g.zeros(vec![2]);
        let (h2, c2) = lstm_cell_step(&mut g, w_ih, w_hh, b, x, h, c).unwrap();
        assert_eq!(g.value(h2).data(), &[0.0, 0.0]);
        assert_eq!(g.value(c2).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_cell_forget_bias_passes_cell_state() {
        // forget bias 10, c = 1, x = 0, h = 0:
        // c' = sigmoid(10) ~ 1, h' = 0.5 * tanh(c') ~ 0.3808
        let mut g = Graph::new();
        let w_ih = g.zeros(vec![4, 1]);
        let w_hh = g.zeros(vec![4, 1]);
        let b = g.constant(Tensor::vector(vec![0.0, 10.0, 0.0, 0.0]).unwrap());
        let x = g.constant(Tensor::vector(vec![0.0]).unwrap());
        let h = g.zeros(vec![1]);
        let c = g.constant(Tensor::vector(vec![1.0]).unwrap());
        let (h2, c2) = lstm_cell_step(&mut g, w_ih, w_hh, b, x, h, c).unwrap();
        assert!((g.value(c2).data()[0] - 1.0).abs() < 1e-4);
        assert!((g.value(h2).data()[0] - 0.3808).abs() < 1e-3);
    }

    #[test]
    fn dense_stack_zero_layers_is_identity() {
        let spec = DenseStackSpec {
            input_dim: 3,
            widths: vec![],
            activation: Activation::Relu,
        };
        let store = ParameterStore::new();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.0, 5.0, -6.0]).unwrap());
        let y = dense_stack_forward(&mut g, &store, "s", &spec, x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dense_stack_identity_relu_layer_keeps_nonnegative_input() {
        let spec = DenseStackSpec {
            input_dim: 2,
            widths: vec![2],
            activation: Activation::Relu,
        };
        let mut store = ParameterStore::new();
        store
            .insert("s.0.w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), true)
            .unwrap();
        store.insert("s.0.b", Tensor::zeros(vec![2]), true).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = dense_stack_forward(&mut g, &store, "s", &spec, x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_stack_two_layers_hand_value() {
        // layer 1: W=[[1,2],[3,4]], b=[1,1]; layer 2: W=[[0.5,-0.25],[1,0]], b=[0,1]
        // x=[1,1] -> relu([4,8]) -> relu([0.5*4-0.25*8, 4] + [0,1]) = [0, 5]
        let spec = DenseStackSpec {
            input_dim: 2,
            widths: vec![2, 2],
            activation: Activation::Relu,
        };
        let mut store = ParameterStore::new();
        store
            .insert("s.0.w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true)
            .unwrap();
        store.insert("s.0.b", Tensor::vector(vec![1.0, 1.0]).unwrap(), true).unwrap();
        store
            .insert("s.1.w", Tensor::matrix(2, 2, vec![0.5, -0.25, 1.0, 0.0]).unwrap(), true)
            .unwrap();
        store.insert("s.1.b", Tensor::vector(vec![0.0, 1.0]).unwrap(), true).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let y = dense_stack_forward(&mut g, &store, "s", &spec, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 5.0]);
    }

    fn tiny_topology() -> EncoderTopology {
        EncoderTopology {
            fenc: DenseStackSpec {
                input_dim: 3,
                widths: vec![4],
                activation: Activation::Relu,
            },
            far: LstmStackSpec {
                input_dim: 4,
                layers: 1,
                width: 5,
            },
            genc: DenseStackSpec {
                input_dim: 3,
                widths: vec![4, 4],
                activation: Activation::Relu,
            },
        }
    }

    fn random_features<R: Rng>(rng: &mut R, t: usize, d: usize) -> Tensor {
        let data = (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(t, d, data).unwrap()
    }

    #[test]
    fn encoder_is_causal() {
        let topo = tiny_topology();
        let mut rng = seeds::rng(3);
        let mut store = ParameterStore::new();
        init_encoder(&mut store, &topo, &mut rng).unwrap();
        let feats = random_features(&mut rng, 6, 3);

        // Perturb frame 4; context rows 0..=3 must be bit-identical.
        let mut perturbed_data = feats.data().to_vec();
        perturbed_data[4 * 3 + 1] += 0.37;
        let perturbed = Tensor::matrix(6, 3, perturbed_data).unwrap();

        let mut g1 = Graph::new();
        let (_, c1) = run_encoder(&mut g1, &store, &topo, &feats).unwrap();
        let mut g2 = Graph::new();
        let (_, c2) = run_encoder(&mut g2, &store, &topo, &perturbed).unwrap();
        for t in 0..4 {
            let a = g1.value(c1).row(t);
            let b = g2.value(c2).row(t);
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "context row {t} changed"
            );
        }
        let a = g1.value(c1).row(4);
        let b = g2.value(c2).row(4);
        assert!(a.iter().zip(b).any(|(x, y)| x != y), "row 4 should change");
    }

    #[test]
    fn encoder_single_frame() {
        let topo = tiny_topology();
        let mut rng = seeds::rng(4);
        let mut store = ParameterStore::new();
        init_encoder(&mut store, &topo, &mut rng).unwrap();
        let feats = random_features(&mut rng, 1, 3);
        let mut g = Graph::new();
        let (z, c) = run_encoder(&mut g, &store, &topo, &feats).unwrap();
        assert_eq!(g.value(z).shape(), &[1, 4]);
        assert_eq!(g.value(c).shape(), &[1, 5]);
    }

    #[test]
    fn encoder_deterministic() {
        let topo = tiny_topology();
        let mut rng = seeds::rng(5);
        let mut store = ParameterStore::new();
        init_encoder(&mut store, &topo, &mut rng).unwrap();
        let feats = random_features(&mut rng, 4, 3);
        let run = || {
            let mut g = Graph::new();
            let (_, c) = run_encoder(&mut g, &store, &topo, &feats).unwrap();
            g.value(c).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn guidance_depth_zero_returns_logits_node() {
        let spec = DenseStackSpec {
            input_dim: 3,
            widths: vec![],
            activation: Activation::Relu,
        };
        let store = ParameterStore::new();
        let mut g = Graph::new();
        let p = g.constant(Tensor::matrix(2, 3, vec![0.1; 6]).unwrap());
        let q = run_guidance(&mut g, &store, &spec, p).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn step_head_identity_and_distinctness() {
        let mut store = ParameterStore::new();
        store
            .insert("heads.1.w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), true)
            .unwrap();
        store.insert("heads.1.b", Tensor::zeros(vec![2]), true).unwrap();
        store
            .insert("heads.2.w", Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap(), true)
            .unwrap();
        store.insert("heads.2.b", Tensor::vector(vec![1.0, -1.0]).unwrap(), true).unwrap();

        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let h1 = apply_step_head(&mut g, &store, "heads", 1, 2, c).unwrap();
        let h2 = apply_step_head(&mut g, &store, "heads", 2, 2, c).unwrap();
        assert_eq!(g.value(h1).data(), &[3.0, 4.0]);
        assert_eq!(g.value(h2).data(), &[7.0, 7.0]);
        assert!(apply_step_head(&mut g, &store, "heads", 3, 2, c).is_err());
        assert!(apply_step_head(&mut g, &store, "heads", 0, 2, c).is_err());
    }

    #[test]
    fn classifier_output_shape() {
        let spec = ClassifierSpec {
            input_dim: 3,
            lstm: LstmStackSpec {
                input_dim: 3,
                layers: 1,
                width: 4,
            },
            phones: 5,
        };
        let mut rng = seeds::rng(6);
        let store = init_classifier(&spec, &mut rng).unwrap();
        let feats = random_features(&mut rng, 7, 3);
        let mut g = Graph::new();
        let logits = run_phone_classifier(&mut g, &store, &spec, &feats).unwrap();
        assert_eq!(g.value(logits).shape(), &[7, 5]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let topo = tiny_topology();
        let mut rng = seeds::rng(7);
        let mut store = ParameterStore::new();
        init_encoder(&mut store, &topo, &mut rng).unwrap();
        let feats = random_features(&mut rng, 4, 3);

        let eval = |p: &ParameterStore| -> crate::error::Result<f64> {
            let mut g = Graph::new();
            let (z, c) = run_encoder(&mut g, p, &topo, &feats)?;
            let zs = g.sum(z)?;
            let ct = g.tanh(c)?;
            let cs = g.sum(ct)?;
            let tot = g.add(zs, cs)?;
            Ok(g.value(tot).item())
        };
        let mut g = Graph::new();
        let (z, c) = run_encoder(&mut g, &store, &topo, &feats).unwrap();
        let zs = g.sum(z).unwrap();
        let ct = g.tanh(c).unwrap();
        let cs = g.sum(ct).unwrap();
        let tot = g.add(zs, cs).unwrap();
        g.backward(tot).unwrap();
        let auto = g.param_grads(&store);
        let fd = finite_diff_gradient(eval, &store, 1e-5).unwrap();
        let err = max_rel_error(&auto, &fd);
        assert!(err < 1e-6, "encoder gradient error {err}");
    }

    #[test]
    fn prediction_network_rows() {
        let spec = TransducerSpec {
            encoder: tiny_topology(),
            vocab: 4,
            embed_dim: 3,
            pred_width: 4,
        };
        let mut rng = seeds::rng(8);
        let store = init_transducer(&spec, &mut rng).unwrap();
        let mut g = Graph::new();
        let out = prediction_network_forward(&mut g, &store, &spec, &[2, 0, 3]).unwrap();
        assert_eq!(g.value(out).shape(), &[4, 4]);
        assert_eq!(g.value(out).row(0), &[0.0; 4]);
        assert!(prediction_network_forward(&mut g, &store, &spec, &[4]).is_err());
    }

    #[test]
    fn joint_grid_rows_are_normalized() {
        let spec = TransducerSpec {
            encoder: tiny_topology(),
            vocab: 4,
            embed_dim: 3,
            pred_width: 4,
        };
        let mut rng = seeds::rng(9);
        let store = init_transducer(&spec, &mut rng).unwrap();
        let feats = random_features(&mut rng, 3, 3);
        let mut g = Graph::new();
        let (_, enc) = run_encoder(&mut g, &store, &spec.encoder, &feats).unwrap();
        let pred = prediction_network_forward(&mut g, &store, &spec, &[1, 2]).unwrap();
        let grid = joint_logprob_grid(&mut g, &store, &spec, enc, pred).unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(grid[0].len(), 3);
        for row in &grid {
            for &cell in row {
                let sum: f64 = g.value(cell).data().iter().map(|v| v.exp()).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }
}
