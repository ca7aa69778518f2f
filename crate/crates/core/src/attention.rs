//! Word-by-word soft attention over the premise.
//!
//! For hypothesis position `k` every premise slot `j` (slot 0 is the NULL
//! vector) is scored as
//!
//! ```text
//! e_kj = w_e · tanh(W_s h^s_j + W_t h^t_k + W_r r_{k-1})
//! ```
//!
//! where `r_{k-1}` is the previous recurrent state of whichever head is
//! attending: the match-LSTM state, or the aggregation RNN state in the
//! baseline. Scores are normalised with a masked softmax and the attended
//! vector is the weighted sum of the premise slots.

use rand::Rng;

use crate::encoder::{glorot, glorot_vector};
use crate::error::{Error, Result};
use crate::numerics::{masked_softmax, Graph, ParamId, ParameterStore, Tensor, Var};

/// Encoded premise with the NULL slot prepended.
#[derive(Clone, Debug, PartialEq)]
pub struct PremiseBank {
    states: Tensor,
    mask: Vec<bool>,
}

impl PremiseBank {
    /// `encoded` is `n × d_out` with the first `length` rows real.
    pub fn new(encoded: &Tensor, length: usize) -> Result<Self> {
        if !encoded.is_matrix() {
            return Err(Error::Dimension("premise states must be a matrix".into()));
        }
        if length == 0 || length > encoded.rows() {
            return Err(Error::Bounds(format!("premise length {length} outside 1..={}", encoded.rows())));
        }
        let width = encoded.cols();
        let mut data = vec![0.0; width];
        data.extend_from_slice(encoded.data());
        let rows = encoded.rows() + 1;
        let mask = (0..rows).map(|j| j <= length).collect();
        Ok(Self {
            states: Tensor::matrix(rows, width, data)?,
            mask,
        })
    }

    /// `(M+1) × d_out`; row 0 is the NULL slot.
    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.states.cols()
    }

    pub fn slots(&self) -> usize {
        self.states.rows()
    }

    /// Reorders the premise slots (NULL stays at 0). `order[k]` is the
    /// original index of new slot `k + 1`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() + 1 != self.slots() {
            return Err(Error::Dimension("permutation length mismatch".into()));
        }
        let w = self.width();
        let mut data = vec![0.0; w];
        let mut mask = vec![true];
        for &j in order {
            data.extend_from_slice(&self.states.data()[(j + 1) * w..(j + 2) * w]);
            mask.push(self.mask[j + 1]);
        }
        Ok(Self {
            states: Tensor::matrix(self.slots(), w, data)?,
            mask,
        })
    }
}

/// Premise bank on a graph: slot states, their `W_s` projections, mask.
#[derive(Clone, Debug)]
pub struct BankVars {
    pub rows: Vec<Var>,
    pub projected: Vec<Var>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_e: ParamId,
    pub w_s: ParamId,
    pub w_t: ParamId,
    pub w_r: ParamId,
    /// Aggregation RNN weights; only the baseline head has them.
    pub v_a: Option<ParamId>,
    pub width: usize,
}

impl AttentionParams {
    pub fn register<R: Rng>(store: &mut ParameterStore, width: usize, with_rnn: bool, rng: &mut R) -> Result<Self> {
        let w_e = store.insert("attention.w_e", glorot_vector(rng, width))?;
        let w_s = store.insert("attention.W_s", glorot(rng, width, width))?;
        let w_t = store.insert("attention.W_t", glorot(rng, width, width))?;
        let w_r = store.insert("attention.W_r", glorot(rng, width, width))?;
        let v_a = if with_rnn {
            Some(store.insert("attention.V_a", glorot(rng, width, width))?)
        } else {
            None
        };
        Ok(Self { w_e, w_s, w_t, w_r, v_a, width })
    }

    pub fn find(store: &ParameterStore, with_rnn: bool) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::InvalidInput(format!("missing parameter {n:?}")))
        };
        let w_e = get("attention.w_e")?;
        let width = store.value(w_e).len();
        let v_a = if with_rnn { Some(get("attention.V_a")?) } else { None };
        let p = Self {
            w_e,
            w_s: get("attention.W_s")?,
            w_t: get("attention.W_t")?,
            w_r: get("attention.W_r")?,
            v_a,
            width,
        };
        for id in [Some(p.w_s), Some(p.w_t), Some(p.w_r), p.v_a].into_iter().flatten() {
            if store.value(id).shape() != [width, width] {
                return Err(Error::Dimension(format!("{} must be {width}x{width}", store.name(id))));
            }
        }
        Ok(p)
    }

    pub fn num_scalars(&self) -> usize {
        let w = self.width;
        let mats = if self.v_a.is_some() { 4 } else { 3 };
        w + mats * w * w
    }

    pub fn bind<'a>(&self, g: &mut Graph<'a>, store: &'a ParameterStore) -> BoundAttention {
        BoundAttention {
            w_e: g.param(store, self.w_e),
            w_s: g.param(store, self.w_s),
            w_t: g.param(store, self.w_t),
            w_r: g.param(store, self.w_r),
            v_a: self.v_a.map(|id| g.param(store, id)),
            width: self.width,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    w_e: Var,
    w_s: Var,
    w_t: Var,
    w_r: Var,
    v_a: Option<Var>,
    width: usize,
}

impl BoundAttention {
    pub fn width(&self) -> usize {
        self.width
    }

    /// Builds the bank: a zero NULL slot followed by `states`, the first
    /// `length` of which are real.
    pub fn bank(&self, g: &mut Graph<'_>, states: &[Var], length: usize) -> Result<BankVars> {
        if length == 0 || length > states.len() {
            return Err(Error::Bounds(format!("premise length {length} outside 1..={}", states.len())));
        }
        let mask: Vec<bool> = (0..=states.len()).map(|j| j <= length).collect();
        self.bank_masked(g, states, mask)
    }

    pub fn bank_from(&self, g: &mut Graph<'_>, bank: &PremiseBank) -> Result<BankVars> {
        if bank.width() != self.width {
            return Err(Error::Dimension(format!(
                "premise width {} does not match attention width {}",
                bank.width(),
                self.width
            )));
        }
        let rows: Vec<Var> = (1..bank.slots())
            .map(|j| bank.states().row(j).map(|t| g.constant(t)))
            .collect::<Result<_>>()?;
        self.bank_masked(g, &rows, bank.mask().to_vec())
    }

    fn bank_masked(&self, g: &mut Graph<'_>, states: &[Var], mask: Vec<bool>) -> Result<BankVars> {
        let null = g.constant(Tensor::zeros(&[self.width]));
        let mut rows = Vec::with_capacity(states.len() + 1);
        rows.push(null);
        rows.extend_from_slice(states);
        let mut projected = Vec::with_capacity(rows.len());
        for (j, &r) in rows.iter().enumerate() {
            // Masked slots never reach a softmax; skip their projection.
            projected.push(if mask[j] { g.matvec(self.w_s, r)? } else { r });
        }
        Ok(BankVars { rows, projected, mask })
    }

    /// Scores over every slot; masked slots get a constant 0 that the
    /// softmax ignores.
    pub fn scores(&self, g: &mut Graph<'_>, bank: &BankVars, h_t: Var, h_rec_prev: Var) -> Result<Var> {
        let wt = g.matvec(self.w_t, h_t)?;
        let wr = g.matvec(self.w_r, h_rec_prev)?;
        let query = g.add(wt, wr)?;
        let masked = g.constant(Tensor::zeros(&[1]));
        let mut parts = Vec::with_capacity(bank.rows.len());
        for (j, &proj) in bank.projected.iter().enumerate() {
            if !bank.mask[j] {
                parts.push(masked);
                continue;
            }
            let pre = g.add(proj, query)?;
            let act = g.tanh(pre)?;
            parts.push(g.dot(self.w_e, act)?);
        }
        g.concat(&parts)
    }

    pub fn weights(&self, g: &mut Graph<'_>, bank: &BankVars, scores: Var) -> Result<Var> {
        g.masked_softmax(scores, &bank.mask)
    }

    pub fn attend(&self, g: &mut Graph<'_>, bank: &BankVars, alpha: Var) -> Result<Var> {
        g.weighted_sum(alpha, &bank.rows)
    }

    /// `h_a = a + tanh(V_a h_a_prev)`.
    pub fn aggregate(&self, g: &mut Graph<'_>, a: Var, h_a_prev: Var) -> Result<Var> {
        let v_a = self
            .v_a
            .ok_or_else(|| Error::InvalidInput("aggregation RNN is only available on the baseline head".into()))?;
        let vh = g.matvec(v_a, h_a_prev)?;
        let t = g.tanh(vh)?;
        g.add(a, t)
    }
}

/// Tape-free score computation for one hypothesis position.
pub fn attention_scores(
    store: &ParameterStore,
    params: &AttentionParams,
    bank: &PremiseBank,
    h_t: &Tensor,
    h_rec_prev: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, store);
    let bv = bound.bank_from(&mut g, bank)?;
    let ht = g.constant_ref(h_t);
    let hr = g.constant_ref(h_rec_prev);
    let s = bound.scores(&mut g, &bv, ht, hr)?;
    Ok(g.value(s).clone())
}

/// Normalised alignment weights; masked slots are exactly zero.
pub fn attention_weights(scores: &Tensor, mask: &[bool]) -> Result<Tensor> {
    masked_softmax(scores, mask)
}

/// `Σ_j alpha_j h^s_j` over the bank's slots.
pub fn attend(alpha: &Tensor, bank: &PremiseBank) -> Result<Tensor> {
    if !alpha.is_vector() || alpha.len() != bank.slots() {
        return Err(Error::Dimension(format!(
            "attend: {} weights for {} slots",
            alpha.len(),
            bank.slots()
        )));
    }
    let w = bank.width();
    let mut out = vec![0.0; w];
    for j in 0..bank.slots() {
        let a = alpha.get(j);
        for (o, x) in out.iter_mut().zip(&bank.states().data()[j * w..(j + 1) * w]) {
            *o += a * x;
        }
    }
    Tensor::vector(out)
}

/// One step of the baseline aggregation RNN.
pub fn aggregate_rnn_step(a: &Tensor, h_a_prev: &Tensor, v_a: &Tensor) -> Result<Tensor> {
    let vh = crate::numerics::affine(h_a_prev, v_a, &Tensor::zeros(&[v_a.rows()]))?;
    let t = crate::numerics::pointwise(crate::numerics::Pointwise::Tanh, &[&vh])?;
    crate::numerics::pointwise(crate::numerics::Pointwise::Add, &[a, &t])
}
