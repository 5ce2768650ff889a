//! Neural building blocks: dense layers, MLPs, LSTM cells, bidirectional
//! sequence encoders, softmax and Gumbel-softmax sampling.
//!
//! Each block has a graph form (building nodes on a [`Tape`]) used for
//! training, and a value form used during play. The value form runs the same
//! graph code on a throwaway tape, so the two paths cannot drift apart.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::params::{load_store, ParamMode, ParamStore, StoreNodes};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

/// Uniform initialisation in +-sqrt(6 / (fan_in + fan_out)).
fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform_tensor(shape: Vec<usize>, limit: f64, rng: &mut ChaCha20Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::from_raw(shape, data)
}

/// Applies one dense layer on the tape: `activation(x W + b)`.
pub fn dense(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    activation: Activation,
) -> Result<NodeId, TensorError> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_bias(z, b)?;
    Ok(match activation {
        Activation::Relu => tape.relu(z),
        Activation::Tanh => tape.tanh(z),
        Activation::Linear => z,
    })
}

/// Value-level dense layer forward.
pub fn dense_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    activation: Activation,
) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let wn = tape.constant(w.clone());
    let bn = tape.constant(b.clone());
    let out = dense(&mut tape, xn, wn, bn, activation)?;
    Ok(tape.value(out).clone())
}

/// Row-wise softmax of logits; rows sum to one and stay strictly positive.
pub fn softmax(logits: &Tensor) -> Result<Tensor, TensorError> {
    if !logits.is_matrix() {
        return Err(TensorError::NotAMatrix {
            op: "softmax",
            shape: logits.shape().to_vec(),
        });
    }
    Ok(tensor::softmax_rows(logits))
}

/// A fully connected stack. `dims` holds layer widths from input to output;
/// hidden layers use `hidden`, the final layer `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDef {
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpDef {
    pub fn new(dims: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        debug_assert!(dims.len() >= 2);
        Self {
            dims,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Inserts freshly initialised weights into `store` under
    /// `l{idx}.w` / `l{idx}.b`.
    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        for (idx, pair) in self.dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = glorot_limit(fan_in, fan_out);
            store
                .insert(
                    format!("l{idx}.w"),
                    uniform_tensor(vec![fan_in, fan_out], limit, rng),
                )
                .expect("fresh store");
            store
                .insert(format!("l{idx}.b"), Tensor::zeros(vec![fan_out]))
                .expect("fresh store");
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &StoreNodes,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let layers = self.dims.len() - 1;
        let mut cur = x;
        for idx in 0..layers {
            let act = if idx + 1 == layers {
                self.output
            } else {
                self.hidden
            };
            let w = nodes.get(&format!("l{idx}.w"));
            let b = nodes.get(&format!("l{idx}.b"));
            cur = dense(tape, cur, w, b, act)?;
        }
        Ok(cur)
    }

    /// Value-level forward on a frozen store.
    pub fn forward_values(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let nodes = load_store(&mut tape, store, "mlp", ParamMode::Frozen);
        let xn = tape.constant(x.clone());
        let out = self.forward(&mut tape, &nodes, xn)?;
        Ok(tape.value(out).clone())
    }
}

/// Hidden/cell pair of an LSTM. Both tensors are `[batch, hidden]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(vec![batch, hidden]),
            c: Tensor::zeros(vec![batch, hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.h.cols()
    }

    pub fn batch(&self) -> usize {
        self.h.rows()
    }
}

/// LSTM cell definition. Parameters live under a prefix in a store:
/// `{p}.wx [I,4H]`, `{p}.wh [H,4H]`, `{p}.b [4H]`, gate order
/// (input, forget, output, candidate). Forget-gate biases start at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmDef {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmDef {
    pub fn new(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut ChaCha20Rng) {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let mut wx = Tensor::zeros(vec![i, h * 4]);
        let mut wh = Tensor::zeros(vec![h, h * 4]);
        // Per-gate glorot bounds; gates live in contiguous column blocks.
        for gate in 0..4 {
            let lim_x = glorot_limit(i, h);
            for r in 0..i {
                for c in 0..h {
                    wx.data_mut()[r * h * 4 + gate * h + c] = rng.gen_range(-lim_x..lim_x);
                }
            }
            let lim_h = glorot_limit(h, h);
            for r in 0..h {
                for c in 0..h {
                    wh.data_mut()[r * h * 4 + gate * h + c] = rng.gen_range(-lim_h..lim_h);
                }
            }
        }
        let mut b = Tensor::zeros(vec![h * 4]);
        for c in 0..h {
            b.data_mut()[h + c] = 1.0; // forget gate
        }
        store.insert(format!("{prefix}.wx"), wx).expect("fresh store");
        store.insert(format!("{prefix}.wh"), wh).expect("fresh store");
        store.insert(format!("{prefix}.b"), b).expect("fresh store");
    }

    /// One gate update on the tape. Inputs `x [B,I]`, state `[B,H]`.
    pub fn step(
        &self,
        tape: &mut Tape,
        nodes: &StoreNodes,
        prefix: &str,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let hd = self.hidden_dim;
        let wx = nodes.get(&format!("{prefix}.wx"));
        let wh = nodes.get(&format!("{prefix}.wh"));
        let b = nodes.get(&format!("{prefix}.b"));
        let zx = tape.matmul(x, wx)?;
        let zh = tape.matmul(h, wh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_bias(z, b)?;
        let i_gate = tape.slice_cols(z, 0, hd)?;
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.slice_cols(z, hd, 2 * hd)?;
        let f_gate = tape.sigmoid(f_gate);
        let o_gate = tape.slice_cols(z, 2 * hd, 3 * hd)?;
        let o_gate = tape.sigmoid(o_gate);
        let cand = tape.slice_cols(z, 3 * hd, 4 * hd)?;
        let cand = tape.tanh(cand);
        let keep = tape.mul(f_gate, c)?;
        let write = tape.mul(i_gate, cand)?;
        let c_new = tape.add(keep, write)?;
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o_gate, c_act)?;
        Ok((h_new, c_new))
    }
}

/// Pure value-level LSTM transition; the input state is not modified.
pub fn lstm_step(
    x: &Tensor,
    state: &LstmState,
    store: &ParamStore,
    prefix: &str,
) -> Result<LstmState, TensorError> {
    let def = LstmDef::new(x.cols(), state.hidden_dim());
    let mut tape = Tape::new();
    let nodes = load_store(&mut tape, store, "lstm", ParamMode::Frozen);
    let xn = tape.constant(x.clone());
    let hn = tape.constant(state.h.clone());
    let cn = tape.constant(state.c.clone());
    let (h2, c2) = def.step(&mut tape, &nodes, prefix, xn, hn, cn)?;
    Ok(LstmState {
        h: tape.value(h2).clone(),
        c: tape.value(c2).clone(),
    })
}

/// Bidirectional LSTM encoder: one pass forward, one backward, final hidden
/// states concatenated and linearly projected to `out_dim`.
///
/// Parameters: `fwd.*`, `bwd.*` (LSTM cells) and `proj.w [2H,E]`, `proj.b [E]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmDef {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl BiLstmDef {
    pub fn new(input_dim: usize, hidden_dim: usize, out_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            out_dim,
        }
    }

    fn cell(&self) -> LstmDef {
        LstmDef::new(self.input_dim, self.hidden_dim)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        self.cell().init(store, "fwd", rng);
        self.cell().init(store, "bwd", rng);
        let limit = glorot_limit(2 * self.hidden_dim, self.out_dim);
        store
            .insert(
                "proj.w",
                uniform_tensor(vec![2 * self.hidden_dim, self.out_dim], limit, rng),
            )
            .expect("fresh store");
        store
            .insert("proj.b", Tensor::zeros(vec![self.out_dim]))
            .expect("fresh store");
    }

    /// Encodes a non-empty sequence of `[B,I]` nodes into `[B,E]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        nodes: &StoreNodes,
        sequence: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        if sequence.is_empty() {
            return Err(TensorError::EmptyInput { op: "bilstm_encode" });
        }
        let batch = tape.value(sequence[0]).rows();
        let cell = self.cell();
        let zero = LstmState::zeros(batch, self.hidden_dim);

        let mut h = tape.constant(zero.h.clone());
        let mut c = tape.constant(zero.c.clone());
        for &x in sequence {
            let (h2, c2) = cell.step(tape, nodes, "fwd", x, h, c)?;
            h = h2;
            c = c2;
        }
        let fwd_final = h;

        let mut h = tape.constant(zero.h.clone());
        let mut c = tape.constant(zero.c);
        for &x in sequence.iter().rev() {
            let (h2, c2) = cell.step(tape, nodes, "bwd", x, h, c)?;
            h = h2;
            c = c2;
        }
        let bwd_final = h;

        let both = tape.concat(fwd_final, bwd_final)?;
        dense(tape, both, nodes.get("proj.w"), nodes.get("proj.b"), Activation::Linear)
    }

    /// Value-level encoding of a sequence of `[B,I]` tensors.
    pub fn encode_values(
        &self,
        store: &ParamStore,
        sequence: &[Tensor],
    ) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let nodes = load_store(&mut tape, store, "bilstm", ParamMode::Frozen);
        let seq: Vec<NodeId> = sequence
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let out = self.encode(&mut tape, &nodes, &seq)?;
        Ok(tape.value(out).clone())
    }
}

/// Standard Gumbel(0,1) noise: `-ln(-ln(u))` with `u ~ U(0,1)`.
pub fn sample_gumbel(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_raw(vec![rows, cols], data)
}

/// Differentiable Gumbel-softmax relaxation:
/// `softmax((logits + noise) / temperature)`.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: NodeId,
    noise: &Tensor,
    temperature: f64,
) -> Result<NodeId, TensorError> {
    let noise_node = tape.constant(noise.clone());
    let shifted = tape.add(logits, noise_node)?;
    let scaled = tape.scale(shifted, 1.0 / temperature);
    tape.softmax(scaled)
}
