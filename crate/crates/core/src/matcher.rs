//! The match-LSTM head, the final classifier, the word-by-word attention
//! baseline head, and assembly of the four model variants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionParams, BankVars, BoundAttention, PremiseBank};
use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::encoder::{glorot, lstm_step, BoundLstm, Encoder, EncoderConfig, EncoderKind, LstmParams, LstmStep, Side};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::snli::{Label, LabeledPair};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    /// Word-by-word attention with an aggregation RNN, predicting from the
    /// last aggregated state together with the last hypothesis state.
    WbwAttentionBaseline,
    Mlstm,
    /// Match-LSTM over bi-LSTM sentence states.
    MlstmBilstm,
    /// Match-LSTM directly over the frozen word embeddings.
    MlstmWordEmbedding,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::WbwAttentionBaseline,
        ModelVariant::Mlstm,
        ModelVariant::MlstmBilstm,
        ModelVariant::MlstmWordEmbedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::WbwAttentionBaseline => "wbw_attention_baseline",
            ModelVariant::Mlstm => "mlstm",
            ModelVariant::MlstmBilstm => "mlstm_bilstm",
            ModelVariant::MlstmWordEmbedding => "mlstm_word_embedding",
        }
    }

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            ModelVariant::WbwAttentionBaseline | ModelVariant::Mlstm => EncoderKind::Lstm,
            ModelVariant::MlstmBilstm => EncoderKind::BiLstm,
            ModelVariant::MlstmWordEmbedding => EncoderKind::Identity,
        }
    }

    pub fn is_baseline(self) -> bool {
        self == ModelVariant::WbwAttentionBaseline
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Hidden size `d` of the LSTMs.
    pub hidden: usize,
    /// Embedding width `l`.
    pub embed_dim: usize,
    pub shared_encoder: bool,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, hidden: usize, embed_dim: usize) -> Self {
        Self {
            variant,
            hidden,
            embed_dim,
            shared_encoder: true,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            kind: self.variant.encoder_kind(),
            shared: self.shared_encoder,
        }
    }

    /// Width of sentence states, attention vectors and match-LSTM state.
    pub fn state_dim(&self) -> usize {
        self.encoder().output_dim(self.embed_dim)
    }

    pub fn classifier_input(&self) -> usize {
        if self.variant.is_baseline() {
            2 * self.state_dim()
        } else {
            self.state_dim()
        }
    }

    /// Closed-form trainable scalar count.
    pub fn parameter_count(&self) -> usize {
        let (d, l, s) = (self.hidden, self.embed_dim, self.state_dim());
        let lstm = |h: usize, i: usize| 4 * (h * i + h * h + h);
        let side = match self.variant.encoder_kind() {
            EncoderKind::Lstm => lstm(d, l),
            EncoderKind::BiLstm => 2 * lstm(d, l),
            EncoderKind::Identity => 0,
        };
        let encoder = if self.shared_encoder { side } else { 2 * side };
        let attention = s + if self.variant.is_baseline() { 4 } else { 3 } * s * s;
        let matcher = if self.variant.is_baseline() { 0 } else { lstm(s, 2 * s) };
        let classifier = NUM_CLASSES * self.classifier_input() + NUM_CLASSES;
        encoder + attention + matcher + classifier
    }

    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        if self.hidden == 0 && self.variant.encoder_kind() != EncoderKind::Identity {
            return Err(Error::Config("hidden dimension must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub w_y: ParamId,
    pub b_y: ParamId,
}

impl ClassifierParams {
    pub fn register<R: Rng>(store: &mut ParameterStore, input: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_y: store.insert("classifier.W_y", glorot(rng, NUM_CLASSES, input))?,
            b_y: store.insert("classifier.b_y", Tensor::zeros(&[NUM_CLASSES]))?,
        })
    }

    pub fn find(store: &ParameterStore, input: usize) -> Result<Self> {
        let w_y = store
            .id("classifier.W_y")
            .ok_or_else(|| Error::InvalidInput("missing classifier.W_y".into()))?;
        let b_y = store
            .id("classifier.b_y")
            .ok_or_else(|| Error::InvalidInput("missing classifier.b_y".into()))?;
        if store.value(w_y).shape() != [NUM_CLASSES, input] || store.value(b_y).shape() != [NUM_CLASSES] {
            return Err(Error::Dimension("classifier shape mismatch".into()));
        }
        Ok(Self { w_y, b_y })
    }
}

/// Per-position gate values of the match-LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRow {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub output: Vec<f64>,
}

/// What one hypothesis position produced.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    /// Alignment over the NULL slot followed by every premise slot,
    /// padding included (padded slots are exactly 0).
    pub alpha: Vec<f64>,
    /// Match-LSTM gates; `None` on the baseline head.
    pub gates: Option<GateRow>,
    /// Match-LSTM state, or the aggregation state on the baseline head.
    pub hidden: Vec<f64>,
}

/// One row per real hypothesis position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchTrace {
    pub rows: Vec<TraceRow>,
}

impl MatchTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Token ids for one pair. Sequences may be right-padded; the lengths give
/// the real extents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub premise: Vec<usize>,
    pub premise_len: usize,
    pub hypothesis: Vec<usize>,
    pub hypothesis_len: usize,
    pub label: Label,
}

impl Example {
    pub fn from_pair(pair: &LabeledPair, vocab: &Vocabulary) -> Result<Self> {
        if pair.premise.is_empty() || pair.hypothesis.is_empty() {
            return Err(Error::InvalidInput("empty sentence".into()));
        }
        Ok(Self {
            premise: vocab.ids(&pair.premise),
            premise_len: pair.premise.len(),
            hypothesis: vocab.ids(&pair.hypothesis),
            hypothesis_len: pair.hypothesis.len(),
            label: pair.label,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.premise_len == 0 || self.hypothesis_len == 0 {
            return Err(Error::InvalidInput("empty sentence".into()));
        }
        if self.premise_len > self.premise.len() || self.hypothesis_len > self.hypothesis.len() {
            return Err(Error::Bounds("sentence length exceeds padded width".into()));
        }
        Ok(())
    }
}

/// Variables produced by one forward pass on a graph.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub probs: Var,
    /// Final state fed to the classifier (before any concatenation).
    pub final_state: Var,
    pub alphas: Vec<Var>,
    pub gates: Vec<Option<[Var; 3]>>,
    pub hidden: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub encoder: Encoder,
    pub attention: AttentionParams,
    /// Match-LSTM (`d_out` state, `2·d_out` input); absent on the baseline.
    pub matcher: Option<LstmParams>,
    pub classifier: ClassifierParams,
}

impl Model {
    /// Fresh model with Glorot-uniform weights and zero biases, drawn from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let encoder = Encoder::register(&mut store, config.encoder(), config.embed_dim, &mut rng)?;
        let s = config.state_dim();
        let attention = AttentionParams::register(&mut store, s, config.variant.is_baseline(), &mut rng)?;
        let matcher = if config.variant.is_baseline() {
            None
        } else {
            Some(LstmParams::register(&mut store, "match", s, 2 * s, &mut rng)?)
        };
        let classifier = ClassifierParams::register(&mut store, config.classifier_input(), &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            attention,
            matcher,
            classifier,
        })
    }

    /// Rebuilds a model around an existing store (e.g. from a checkpoint).
    pub fn from_store(config: ModelConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::find(&store, config.encoder())?;
        let attention = AttentionParams::find(&store, config.variant.is_baseline())?;
        if attention.width != config.state_dim() {
            return Err(Error::Dimension(format!(
                "attention width {} does not match state width {}",
                attention.width,
                config.state_dim()
            )));
        }
        let matcher = if config.variant.is_baseline() {
            None
        } else {
            Some(LstmParams::find(&store, "match")?)
        };
        let classifier = ClassifierParams::find(&store, config.classifier_input())?;
        let model = Self {
            config,
            store,
            encoder,
            attention,
            matcher,
            classifier,
        };
        if model.count_parameters() != config.parameter_count() {
            return Err(Error::Dimension("store holds parameters the variant does not use".into()));
        }
        Ok(model)
    }

    /// Trainable scalars; embeddings are frozen and excluded.
    pub fn count_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> BoundModel {
        self.bind_to(g, &self.store)
    }

    /// Binds this model's layout against another store with the same
    /// parameters (used by gradient checks that perturb a copy).
    pub fn bind_to<'a>(&self, g: &mut Graph<'a>, store: &'a ParameterStore) -> BoundModel {
        BoundModel {
            variant: self.config.variant,
            encoder: self.encoder.bind(g, store),
            attention: self.attention.bind(g, store),
            matcher: self.matcher.as_ref().map(|m| m.bind(g, store)),
            w_y: g.param(store, self.classifier.w_y),
            b_y: g.param(store, self.classifier.b_y),
            state_dim: self.config.state_dim(),
        }
    }

    /// Class probabilities and trace for one example.
    pub fn forward(&self, table: &EmbeddingTable, example: &Example) -> Result<(Tensor, MatchTrace)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let vars = bound.forward(&mut g, table, example)?;
        Ok((g.value(vars.probs).clone(), read_trace(&g, &vars.alphas, &vars.gates, &vars.hidden)))
    }

    pub fn forward_pair(&self, vocab: &Vocabulary, table: &EmbeddingTable, pair: &LabeledPair) -> Result<(Tensor, MatchTrace)> {
        self.forward(table, &Example::from_pair(pair, vocab)?)
    }

    pub fn predict(&self, table: &EmbeddingTable, example: &Example) -> Result<Label> {
        let (probs, _) = self.forward(table, example)?;
        Label::from_index(argmax(probs.data()))
    }

    /// Cross-entropy loss, its parameter gradients (store order), and the
    /// predicted probabilities.
    pub fn loss_and_grads(&self, table: &EmbeddingTable, example: &Example) -> Result<(f64, Vec<Vec<f64>>, Tensor)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let vars = bound.forward(&mut g, table, example)?;
        let loss = g.cross_entropy(vars.probs, example.label.index())?;
        let grads = g.backward(loss)?.param_grads(&g, &self.store);
        Ok((g.value(loss).get(0), grads, g.value(vars.probs).clone()))
    }

    /// Runs the match-LSTM head over encoded hypothesis states `N × d_out`
    /// (all rows real), returning `h^m_N` and the trace.
    pub fn run_match(&self, bank: &PremiseBank, hyp_states: &Tensor) -> Result<(Tensor, MatchTrace)> {
        if self.config.variant.is_baseline() {
            return Err(Error::InvalidInput("run_match needs a match-LSTM variant".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let bv = bound.attention.bank_from(&mut g, bank)?;
        let rows: Vec<Var> = (0..hyp_states.rows())
            .map(|r| hyp_states.row(r).map(|t| g.constant(t)))
            .collect::<Result<_>>()?;
        let (final_state, alphas, gates, hidden) = bound.run_match(&mut g, &bv, &rows)?;
        Ok((g.value(final_state).clone(), read_trace(&g, &alphas, &gates, &hidden)))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn read_trace(g: &Graph<'_>, alphas: &[Var], gates: &[Option<[Var; 3]>], hidden: &[Var]) -> MatchTrace {
    let rows = alphas
        .iter()
        .zip(gates)
        .zip(hidden)
        .map(|((&a, gates), &h)| TraceRow {
            alpha: g.value(a).data().to_vec(),
            gates: gates.map(|[i, f, o]| GateRow {
                input: g.value(i).data().to_vec(),
                forget: g.value(f).data().to_vec(),
                output: g.value(o).data().to_vec(),
            }),
            hidden: g.value(h).data().to_vec(),
        })
        .collect();
    MatchTrace { rows }
}

type MatchOutput = (Var, Vec<Var>, Vec<Option<[Var; 3]>>, Vec<Var>);

/// A model whose parameters are bound on one graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel {
    variant: ModelVariant,
    pub encoder: crate::encoder::BoundEncoder,
    pub attention: BoundAttention,
    pub matcher: Option<BoundLstm>,
    w_y: Var,
    b_y: Var,
    state_dim: usize,
}

impl BoundModel {
    fn embed(g: &mut Graph<'_>, table: &EmbeddingTable, ids: &[usize]) -> Result<Vec<Var>> {
        ids.iter()
            .map(|&id| {
                if id >= table.vocab_size() {
                    return Err(Error::Index(format!(
                        "token id {id} out of range for vocabulary of {}",
                        table.vocab_size()
                    )));
                }
                Ok(g.constant(Tensor::vector(table.row(id).to_vec())?))
            })
            .collect()
    }

    /// `softmax(W_y h + b_y)`.
    pub fn classify(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let logits = g.affine(self.w_y, h, Some(self.b_y))?;
        g.softmax(logits)
    }

    /// Match-LSTM recurrence over the real hypothesis states.
    pub fn run_match(&self, g: &mut Graph<'_>, bank: &BankVars, hyp: &[Var]) -> Result<MatchOutput> {
        let matcher = self
            .matcher
            .ok_or_else(|| Error::InvalidInput("variant has no match-LSTM".into()))?;
        if hyp.is_empty() {
            return Err(Error::InvalidInput("empty hypothesis".into()));
        }
        let zero = g.constant(Tensor::zeros(&[self.state_dim]));
        let (mut h, mut c) = (zero, zero);
        let mut alphas = Vec::with_capacity(hyp.len());
        let mut gates = Vec::with_capacity(hyp.len());
        let mut hidden = Vec::with_capacity(hyp.len());
        for &h_t in hyp {
            let scores = self.attention.scores(g, bank, h_t, h)?;
            let alpha = self.attention.weights(g, bank, scores)?;
            let a = self.attention.attend(g, bank, alpha)?;
            let m = g.concat(&[a, h_t])?;
            let step = matcher.step(g, m, h, c)?;
            h = step.h;
            c = step.c;
            alphas.push(alpha);
            gates.push(Some([step.input_gate, step.forget_gate, step.output_gate]));
            hidden.push(h);
        }
        Ok((h, alphas, gates, hidden))
    }

    /// Baseline head: attention driven by the aggregation RNN state.
    fn run_baseline(&self, g: &mut Graph<'_>, bank: &BankVars, hyp: &[Var]) -> Result<MatchOutput> {
        let zero = g.constant(Tensor::zeros(&[self.state_dim]));
        let mut h_a = zero;
        let mut alphas = Vec::with_capacity(hyp.len());
        let mut hidden = Vec::with_capacity(hyp.len());
        for &h_t in hyp {
            let scores = self.attention.scores(g, bank, h_t, h_a)?;
            let alpha = self.attention.weights(g, bank, scores)?;
            let a = self.attention.attend(g, bank, alpha)?;
            h_a = self.attention.aggregate(g, a, h_a)?;
            alphas.push(alpha);
            hidden.push(h_a);
        }
        let gates = vec![None; hyp.len()];
        Ok((h_a, alphas, gates, hidden))
    }

    pub fn forward(&self, g: &mut Graph<'_>, table: &EmbeddingTable, ex: &Example) -> Result<ForwardVars> {
        ex.validate()?;
        let prem_rows = Self::embed(g, table, &ex.premise)?;
        let hyp_rows = Self::embed(g, table, &ex.hypothesis)?;
        let prem = self.encoder.side(Side::Premise).encode(g, &prem_rows, ex.premise_len)?;
        let hyp = self.encoder.side(Side::Hypothesis).encode(g, &hyp_rows, ex.hypothesis_len)?;
        if g.value(prem[0]).len() != self.state_dim {
            return Err(Error::Dimension(format!(
                "sentence states have width {}, model expects {}",
                g.value(prem[0]).len(),
                self.state_dim
            )));
        }
        let bank = self.attention.bank(g, &prem, ex.premise_len)?;
        let real_hyp = &hyp[..ex.hypothesis_len];
        let (final_state, alphas, gates, hidden) = if self.variant.is_baseline() {
            self.run_baseline(g, &bank, real_hyp)?
        } else {
            self.run_match(g, &bank, real_hyp)?
        };
        let features = if self.variant.is_baseline() {
            g.concat(&[final_state, real_hyp[real_hyp.len() - 1]])?
        } else {
            final_state
        };
        let probs = self.classify(g, features)?;
        Ok(ForwardVars {
            probs,
            final_state,
            alphas,
            gates,
            hidden,
        })
    }
}

/// One match-LSTM step on `[a_k; h_t_k]`, tape-free.
pub fn match_step(
    store: &ParameterStore,
    params: &LstmParams,
    a_k: &Tensor,
    h_t_k: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<LstmStep> {
    if a_k.len() != h_t_k.len() || 2 * a_k.len() != params.input {
        return Err(Error::Dimension(format!(
            "match_step: a_k has {} values, h_t_k {}, match-LSTM input is {}",
            a_k.len(),
            h_t_k.len(),
            params.input
        )));
    }
    let m = crate::numerics::concat(a_k, h_t_k)?;
    lstm_step(store, params, &m, h_prev, c_prev)
}

/// Class probabilities `softmax(W_y h + b_y)`, tape-free.
pub fn classify(model: &Model, h_final: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let h = g.constant_ref(h_final);
    let p = bound.classify(&mut g, h)?;
    Ok(g.value(p).clone())
}

pub fn count_parameters(model: &Model) -> usize {
    model.count_parameters()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(vocab: usize, dim: usize, seed: u64) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..vocab * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        data[..dim].iter_mut().for_each(|x| *x = 0.0);
        EmbeddingTable::new(Tensor::matrix(vocab, dim, data).unwrap()).unwrap()
    }

    fn example(premise: &[usize], hypothesis: &[usize], pad_p: usize, pad_h: usize) -> Example {
        let mut p = premise.to_vec();
        p.resize(premise.len() + pad_p, 0);
        let mut h = hypothesis.to_vec();
        h.resize(hypothesis.len() + pad_h, 0);
        Example {
            premise: p,
            premise_len: premise.len(),
            hypothesis: h,
            hypothesis_len: hypothesis.len(),
            label: Label::Neutral,
        }
    }

    fn zero_store(store: &mut ParameterStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn zero_match_step() {
        let mut m = Model::new(ModelConfig::new(ModelVariant::Mlstm, 3, 4), 0).unwrap();
        zero_store(&mut m.store);
        let p = m.matcher.clone().unwrap();
        let v = Tensor::vector(vec![0.7, -2.0, 5.0]).unwrap();
        let s = match_step(&m.store, &p, &v, &v, &v, &Tensor::zeros(&[3])).unwrap();
        assert!(s.input_gate.data().iter().all(|&x| x == 0.5));
        assert!(s.forget_gate.data().iter().all(|&x| x == 0.5));
        assert!(s.h.data().iter().all(|&x| x == 0.0));
        assert!(s.c.data().iter().all(|&x| x == 0.0));

        m.store.set("match.b_i", Tensor::filled(&[3], 10.0)).unwrap();
        let s = match_step(&m.store, &p, &v, &v, &Tensor::zeros(&[3]), &Tensor::zeros(&[3])).unwrap();
        assert!(s.input_gate.data().iter().all(|&x| x > 0.9999));
        assert!(s.c.data().iter().all(|&x| x == 0.0));
        assert!(s.h.data().iter().all(|&x| x == 0.0));

        let short = Tensor::zeros(&[2]);
        assert!(matches!(match_step(&m.store, &p, &short, &v, &v, &v), Err(Error::Dimension(_))));
    }

    #[test]
    fn single_position_is_one_step() {
        let m = Model::new(ModelConfig::new(ModelVariant::Mlstm, 4, 4), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bank = PremiseBank::new(&enc, 3).unwrap();
        let h_t = Tensor::matrix(1, 4, vec![0.1, -0.4, 0.3, 0.9]).unwrap();
        let (h, trace) = m.run_match(&bank, &h_t).unwrap();

        let zero = Tensor::zeros(&[4]);
        let row = h_t.row(0).unwrap();
        let scores = crate::attention::attention_scores(&m.store, &m.attention, &bank, &row, &zero).unwrap();
        let alpha = crate::attention::attention_weights(&scores, bank.mask()).unwrap();
        let a = crate::attention::attend(&alpha, &bank).unwrap();
        let step = match_step(&m.store, m.matcher.as_ref().unwrap(), &a, &row, &zero, &zero).unwrap();
        for (x, y) in h.data().iter().zip(step.h.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.rows[0].alpha.len(), 4);
    }

    #[test]
    fn classifier_examples() {
        let mut m = Model::new(ModelConfig::new(ModelVariant::Mlstm, 2, 3), 0).unwrap();
        zero_store(&mut m.store);
        let h = Tensor::vector(vec![0.3, -0.2]).unwrap();
        let p = classify(&m, &h).unwrap();
        assert!(p.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        m.store.set("classifier.b_y", Tensor::vector(vec![10.0, 0.0, 0.0]).unwrap()).unwrap();
        let p = classify(&m, &h).unwrap();
        assert_eq!(argmax(p.data()), Label::Entailment.index());
        assert!(p.get(0) > 0.9999);
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_counts() {
        for variant in ModelVariant::ALL {
            for shared in [true, false] {
                let config = ModelConfig {
                    shared_encoder: shared,
                    ..ModelConfig::new(variant, 3, 5)
                };
                let m = Model::new(config, 1).unwrap();
                assert_eq!(m.count_parameters(), config.parameter_count(), "{variant} shared={shared}");
            }
        }
        let c = ModelConfig::new(ModelVariant::Mlstm, 150, 300);
        assert_eq!(3 * c.state_dim() + 3, 453);
        assert_eq!(c.parameter_count(), 609_303);
        let bi = ModelConfig::new(ModelVariant::MlstmBilstm, 4, 5);
        assert_eq!(bi.state_dim(), 8);
        let we = ModelConfig::new(ModelVariant::MlstmWordEmbedding, 4, 5);
        assert_eq!(we.state_dim(), 5);
    }

    #[test]
    fn trace_rows_normalized() {
        let t = table(12, 5, 2);
        for variant in ModelVariant::ALL {
            let m = Model::new(ModelConfig::new(variant, 4, 5), 7).unwrap();
            let ex = example(&[2, 3, 4, 5], &[6, 7, 8], 2, 1);
            let (p, trace) = m.forward(&t, &ex).unwrap();
            assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(trace.len(), 3);
            for row in &trace.rows {
                assert_eq!(row.alpha.len(), 7);
                assert!((row.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(&row.alpha[5..], &[0.0, 0.0]);
                assert_eq!(row.gates.is_some(), !variant.is_baseline());
                if let Some(g) = &row.gates {
                    for x in g.input.iter().chain(&g.forget).chain(&g.output) {
                        assert!(*x > 0.0 && *x < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn padding_invariance() {
        let t = table(12, 5, 4);
        for variant in ModelVariant::ALL {
            let m = Model::new(ModelConfig::new(variant, 3, 5), 11).unwrap();
            let (base, _) = m.forward(&t, &example(&[2, 3, 4], &[5, 6], 0, 0)).unwrap();
            for pad in [3, 7] {
                let (p, _) = m.forward(&t, &example(&[2, 3, 4], &[5, 6], pad, pad + 1)).unwrap();
                for (x, y) in base.data().iter().zip(p.data()) {
                    assert!((x - y).abs() < 1e-12, "{variant} pad {pad}");
                }
            }
        }
    }

    #[test]
    fn premise_permutation_consistency() {
        let m = Model::new(ModelConfig::new(ModelVariant::Mlstm, 3, 3), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Tensor::matrix(4, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let hyp = Tensor::matrix(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let bank = PremiseBank::new(&enc, 3).unwrap();
        let order = [2, 0, 3, 1];
        let permuted = bank.permuted(&order).unwrap();
        let (h1, t1) = m.run_match(&bank, &hyp).unwrap();
        let (h2, t2) = m.run_match(&permuted, &hyp).unwrap();
        for (x, y) in h1.data().iter().zip(h2.data()) {
            assert!((x - y).abs() < 1e-13, "{x} {y}");
        }
        for (r1, r2) in t1.rows.iter().zip(&t2.rows) {
            assert_eq!(r2.alpha[0], r1.alpha[0]);
            for (k, &src) in order.iter().enumerate() {
                assert!((r2.alpha[k + 1] - r1.alpha[src + 1]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn word_embedding_variant_attends_raw_rows() {
        let t = table(10, 4, 8);
        let m = Model::new(ModelConfig::new(ModelVariant::MlstmWordEmbedding, 1, 4), 2).unwrap();
        let ex = example(&[2, 5, 7], &[3], 0, 0);
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let rows: Vec<Var> = ex.premise.iter().map(|&i| g.constant(Tensor::vector(t.row(i).to_vec()).unwrap())).collect();
        let states = bound.encoder.side(Side::Premise).encode(&mut g, &rows, 3).unwrap();
        let bank = bound.attention.bank(&mut g, &states, 3).unwrap();
        for slot in 0..4 {
            let mut onehot = vec![0.0; 4];
            onehot[slot] = 1.0;
            let alpha = g.constant(Tensor::vector(onehot).unwrap());
            let a = bound.attention.attend(&mut g, &bank, alpha).unwrap();
            let expect = if slot == 0 { vec![0.0; 4] } else { t.row(ex.premise[slot - 1]).to_vec() };
            assert_eq!(g.value(a).data(), expect.as_slice());
        }
    }

    #[test]
    fn full_model_gradients() {
        let t = table(9, 5, 6);
        let ex = Example {
            label: Label::Contradiction,
            ..example(&[2, 3, 4, 5], &[6, 7, 8], 1, 0)
        };
        for variant in ModelVariant::ALL {
            let m = Model::new(ModelConfig::new(variant, 6, 5), 0).unwrap();
            let report = crate::reference::check_model_gradients(&m, &t, &ex, 1e-5).unwrap();
            assert!(report.max_rel_err() <= 1e-4, "{variant}: {:?}", report.worst());
        }
    }

    #[test]
    fn empty_and_unknown_inputs() {
        let t = table(6, 3, 0);
        let m = Model::new(ModelConfig::new(ModelVariant::Mlstm, 2, 3), 0).unwrap();
        assert!(matches!(m.forward(&t, &example(&[], &[2], 0, 0)), Err(Error::InvalidInput(_))));
        assert!(matches!(m.forward(&t, &example(&[2], &[9], 0, 0)), Err(Error::Index(_))));
        assert!("lstm".parse::<ModelVariant>().is_err());
        assert_eq!("mlstm_bilstm".parse::<ModelVariant>().unwrap(), ModelVariant::MlstmBilstm);
    }
}
