//! LSTM sentence encoders: unidirectional, bidirectional, or identity
//! (raw embeddings passed straight through).

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParameterStore, Tensor, Var};

/// Uniform Glorot initialisation bound for a `rows × cols` matrix.
pub fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

pub(crate) fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = glorot_bound(rows, cols);
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

pub(crate) fn glorot_vector<R: Rng>(rng: &mut R, n: usize) -> Tensor {
    let bound = glorot_bound(n, 1);
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::vector(data).expect("finite init")
}

/// Gate order used for the four weight groups.
pub const GATES: [&str; 4] = ["i", "f", "o", "c"];

/// Handles to the twelve tensors of one LSTM: input weights `W`
/// (`d × l_in`), recurrent weights `V` (`d × d`) and biases `b` (`d`), one
/// of each per gate in [`GATES`] order.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w: [ParamId; 4],
    pub v: [ParamId; 4],
    pub b: [ParamId; 4],
    pub hidden: usize,
    pub input: usize,
}

impl LstmParams {
    /// Registers `{prefix}.W_{g}`, `{prefix}.V_{g}` and `{prefix}.b_{g}` for
    /// every gate, with Glorot-uniform matrices and zero biases.
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        hidden: usize,
        input: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(Error::Dimension(format!(
                "LSTM dimensions must be positive (hidden {hidden}, input {input})"
            )));
        }
        let mut w = Vec::with_capacity(4);
        let mut v = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for g in GATES {
            w.push(store.insert(format!("{prefix}.W_{g}"), glorot(rng, hidden, input))?);
        }
        for g in GATES {
            v.push(store.insert(format!("{prefix}.V_{g}"), glorot(rng, hidden, hidden))?);
        }
        for g in GATES {
            b.push(store.insert(format!("{prefix}.b_{g}"), Tensor::zeros(&[hidden]))?);
        }
        Ok(Self {
            w: w.try_into().expect("four gates"),
            v: v.try_into().expect("four gates"),
            b: b.try_into().expect("four gates"),
            hidden,
            input,
        })
    }

    /// Looks up an already-registered LSTM by prefix.
    pub fn find(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let get = |kind: &str, g: &str| {
            let name = format!("{prefix}.{kind}_{g}");
            store
                .id(&name)
                .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name:?}")))
        };
        let mut w = [ParamId(0); 4];
        let mut v = [ParamId(0); 4];
        let mut b = [ParamId(0); 4];
        for (k, g) in GATES.iter().enumerate() {
            w[k] = get("W", g)?;
            v[k] = get("V", g)?;
            b[k] = get("b", g)?;
        }
        let ws = store.value(w[0]).shape();
        let (hidden, input) = (ws[0], ws[1]);
        for k in 0..4 {
            let ok = store.value(w[k]).shape() == [hidden, input]
                && store.value(v[k]).shape() == [hidden, hidden]
                && store.value(b[k]).shape() == [hidden];
            if !ok {
                return Err(Error::Dimension(format!("inconsistent shapes under {prefix:?}")));
            }
        }
        Ok(Self { w, v, b, hidden, input })
    }

    pub fn num_scalars(&self) -> usize {
        4 * (self.hidden * self.input + self.hidden * self.hidden + self.hidden)
    }

    pub fn bind<'a>(&self, g: &mut Graph<'a>, store: &'a ParameterStore) -> BoundLstm {
        BoundLstm {
            w: self.w.map(|id| g.param(store, id)),
            v: self.v.map(|id| g.param(store, id)),
            b: self.b.map(|id| g.param(store, id)),
            hidden: self.hidden,
        }
    }
}

/// An LSTM whose parameters are bound on a particular graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    w: [Var; 4],
    v: [Var; 4],
    b: [Var; 4],
    hidden: usize,
}

/// Output of one recurrence step on a graph.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h: Var,
    pub c: Var,
    pub input_gate: Var,
    pub forget_gate: Var,
    pub output_gate: Var,
}

impl BoundLstm {
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step of the gated recurrence:
    ///
    /// ```text
    /// i = σ(W_i x + V_i h + b_i)    f = σ(W_f x + V_f h + b_f)
    /// o = σ(W_o x + V_o h + b_o)    c' = f ⊙ c + i ⊙ tanh(W_c x + V_c h + b_c)
    /// h' = o ⊙ tanh(c')
    /// ```
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h_prev: Var, c_prev: Var) -> Result<StepVars> {
        let mut pre = [x; 4];
        for k in 0..4 {
            let wx = g.affine(self.w[k], x, Some(self.b[k]))?;
            let vh = g.matvec(self.v[k], h_prev)?;
            pre[k] = g.add(wx, vh)?;
        }
        let i = g.sigmoid(pre[0])?;
        let f = g.sigmoid(pre[1])?;
        let o = g.sigmoid(pre[2])?;
        let cand = g.tanh(pre[3])?;
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(StepVars {
            h,
            c,
            input_gate: i,
            forget_gate: f,
            output_gate: o,
        })
    }

    /// Runs the recurrence over `inputs` in order from zero initial state,
    /// returning every hidden state.
    pub fn run(&self, g: &mut Graph<'_>, inputs: &[Var]) -> Result<Vec<Var>> {
        let zero = g.constant(Tensor::zeros(&[self.hidden]));
        let (mut h, mut c) = (zero, zero);
        let mut out = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let s = self.step(g, x, h, c)?;
            h = s.h;
            c = s.c;
            out.push(h);
        }
        Ok(out)
    }
}

/// Concrete values of one recurrence step.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmStep {
    pub h: Tensor,
    pub c: Tensor,
    pub input_gate: Tensor,
    pub forget_gate: Tensor,
    pub output_gate: Tensor,
}

/// Tape-free single step.
pub fn lstm_step(
    store: &ParameterStore,
    params: &LstmParams,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<LstmStep> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, store);
    let xv = g.constant_ref(x);
    let hv = g.constant_ref(h_prev);
    let cv = g.constant_ref(c_prev);
    let s = bound.step(&mut g, xv, hv, cv)?;
    Ok(LstmStep {
        h: g.value(s.h).clone(),
        c: g.value(s.c).clone(),
        input_gate: g.value(s.input_gate).clone(),
        forget_gate: g.value(s.forget_gate).clone(),
        output_gate: g.value(s.output_gate).clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Lstm,
    BiLstm,
    Identity,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Lstm => "lstm",
            EncoderKind::BiLstm => "bilstm",
            EncoderKind::Identity => "identity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub kind: EncoderKind,
    /// Premise and hypothesis share one set of encoder weights.
    pub shared: bool,
}

impl EncoderConfig {
    /// Width of the encoded states for input width `embed_dim`.
    pub fn output_dim(&self, embed_dim: usize) -> usize {
        match self.kind {
            EncoderKind::Lstm => self.hidden,
            EncoderKind::BiLstm => 2 * self.hidden,
            EncoderKind::Identity => embed_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Premise,
    Hypothesis,
}

/// Encoder weights for one sentence side.
#[derive(Clone, Debug)]
pub enum SideEncoder {
    Lstm(LstmParams),
    BiLstm { forward: LstmParams, backward: LstmParams },
    Identity,
}

impl SideEncoder {
    fn num_scalars(&self) -> usize {
        match self {
            SideEncoder::Lstm(p) => p.num_scalars(),
            SideEncoder::BiLstm { forward, backward } => forward.num_scalars() + backward.num_scalars(),
            SideEncoder::Identity => 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub premise: SideEncoder,
    pub hypothesis: SideEncoder,
}

fn side_prefixes(shared: bool) -> [&'static str; 2] {
    if shared {
        ["encoder", "encoder"]
    } else {
        ["encoder.premise", "encoder.hypothesis"]
    }
}

impl Encoder {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        config: EncoderConfig,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let make = |store: &mut ParameterStore, prefix: &str, rng: &mut R| -> Result<SideEncoder> {
            Ok(match config.kind {
                EncoderKind::Lstm => SideEncoder::Lstm(LstmParams::register(store, prefix, config.hidden, embed_dim, rng)?),
                EncoderKind::BiLstm => SideEncoder::BiLstm {
                    forward: LstmParams::register(store, &format!("{prefix}.fwd"), config.hidden, embed_dim, rng)?,
                    backward: LstmParams::register(store, &format!("{prefix}.bwd"), config.hidden, embed_dim, rng)?,
                },
                EncoderKind::Identity => SideEncoder::Identity,
            })
        };
        let [p, h] = side_prefixes(config.shared);
        let premise = make(store, p, rng)?;
        let hypothesis = if config.shared { premise.clone() } else { make(store, h, rng)? };
        Ok(Self { config, premise, hypothesis })
    }

    pub fn find(store: &ParameterStore, config: EncoderConfig) -> Result<Self> {
        let find = |prefix: &str| -> Result<SideEncoder> {
            Ok(match config.kind {
                EncoderKind::Lstm => SideEncoder::Lstm(LstmParams::find(store, prefix)?),
                EncoderKind::BiLstm => SideEncoder::BiLstm {
                    forward: LstmParams::find(store, &format!("{prefix}.fwd"))?,
                    backward: LstmParams::find(store, &format!("{prefix}.bwd"))?,
                },
                EncoderKind::Identity => SideEncoder::Identity,
            })
        };
        let [p, h] = side_prefixes(config.shared);
        Ok(Self {
            config,
            premise: find(p)?,
            hypothesis: find(h)?,
        })
    }

    pub fn side(&self, side: Side) -> &SideEncoder {
        match side {
            Side::Premise => &self.premise,
            Side::Hypothesis => &self.hypothesis,
        }
    }

    /// Trainable scalars, counting shared weights once.
    pub fn num_scalars(&self) -> usize {
        let p = self.premise.num_scalars();
        if self.config.shared {
            p
        } else {
            p + self.hypothesis.num_scalars()
        }
    }

    pub fn bind<'a>(&self, g: &mut Graph<'a>, store: &'a ParameterStore) -> BoundEncoder {
        let bind_side = |g: &mut Graph<'a>, s: &SideEncoder| match s {
            SideEncoder::Lstm(p) => BoundSide::Lstm(p.bind(g, store)),
            SideEncoder::BiLstm { forward, backward } => BoundSide::BiLstm(forward.bind(g, store), backward.bind(g, store)),
            SideEncoder::Identity => BoundSide::Identity,
        };
        let premise = bind_side(g, &self.premise);
        let hypothesis = if self.config.shared { premise } else { bind_side(g, &self.hypothesis) };
        BoundEncoder { premise, hypothesis }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum BoundSide {
    Lstm(BoundLstm),
    BiLstm(BoundLstm, BoundLstm),
    Identity,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundEncoder {
    pub premise: BoundSide,
    pub hypothesis: BoundSide,
}

impl BoundEncoder {
    pub fn side(&self, side: Side) -> BoundSide {
        match side {
            Side::Premise => self.premise,
            Side::Hypothesis => self.hypothesis,
        }
    }
}

impl BoundSide {
    /// Encodes `rows` (one embedded token each) of which the first `length`
    /// are real and the rest padding. Returns one state per row; states at
    /// padded rows are computed but never depend on, or feed into, the
    /// real positions.
    pub fn encode(&self, g: &mut Graph<'_>, rows: &[Var], length: usize) -> Result<Vec<Var>> {
        if length == 0 || length > rows.len() {
            return Err(Error::Bounds(format!(
                "sentence length {length} outside 1..={}",
                rows.len()
            )));
        }
        match self {
            BoundSide::Identity => Ok(rows.to_vec()),
            BoundSide::Lstm(lstm) => lstm.run(g, rows),
            BoundSide::BiLstm(fwd, bwd) => {
                let forward = fwd.run(g, rows)?;
                let mut backward = vec![None; rows.len()];
                let real: Vec<Var> = rows[..length].iter().rev().copied().collect();
                for (k, h) in bwd.run(g, &real)?.into_iter().enumerate() {
                    backward[length - 1 - k] = Some(h);
                }
                if length < rows.len() {
                    let pad: Vec<Var> = rows[length..].iter().rev().copied().collect();
                    for (k, h) in bwd.run(g, &pad)?.into_iter().enumerate() {
                        backward[rows.len() - 1 - k] = Some(h);
                    }
                }
                forward
                    .into_iter()
                    .zip(backward)
                    .map(|(f, b)| g.concat(&[f, b.expect("every position filled")]))
                    .collect()
            }
        }
    }
}

/// Tape-free encoding of an `n × l` embedded sentence of true length
/// `length`.
pub fn encode(
    store: &ParameterStore,
    encoder: &Encoder,
    side: Side,
    embedded: &Tensor,
    length: usize,
) -> Result<Tensor> {
    if !embedded.is_matrix() {
        return Err(Error::Dimension(format!(
            "embedded sentence must be a matrix, got shape {:?}",
            embedded.shape()
        )));
    }
    if encoder.config.kind == EncoderKind::Identity {
        if length == 0 || length > embedded.rows() {
            return Err(Error::Bounds(format!("sentence length {length} outside 1..={}", embedded.rows())));
        }
        return Ok(embedded.clone());
    }
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g, store);
    let rows: Vec<Var> = (0..embedded.rows())
        .map(|r| embedded.row(r).map(|t| g.constant(t)))
        .collect::<Result<_>>()?;
    let states = bound.side(side).encode(&mut g, &rows, length)?;
    let values: Vec<Tensor> = states.iter().map(|&s| g.value(s).clone()).collect();
    Tensor::stack_rows(&values)
}
