//! Tape-free reference forward pass of the full model, generic over the
//! scalar type. Instantiated with `f64` it cross-checks the graph; with
//! [`Precise`] it supplies finite differences below `f64` resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rug::Float;

use crate::embeddings::EmbeddingTable;
use crate::encoder::{LstmParams, Side, SideEncoder};
use crate::error::{Error, Result};
use crate::matcher::{Example, Model, ModelConfig};
use crate::numerics::{gradient_check_with, GradCheckReport, ParamId, ParameterStore, Tensor, LOG_CLAMP};
use crate::snli::Label;

pub trait Real: Clone {
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn add(&self, o: &Self) -> Self;
    fn sub(&self, o: &Self) -> Self;
    fn mul(&self, o: &Self) -> Self;
    fn div(&self, o: &Self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn tanh(&self) -> Self;
    fn lt(&self, o: &Self) -> bool;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn sigmoid(&self) -> Self {
        let one = Self::from_f64(1.0);
        if self.lt(&Self::zero()) {
            let e = self.exp();
            e.div(&one.add(&e))
        } else {
            let e = Self::zero().sub(self).exp();
            one.div(&one.add(&e))
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn add(&self, o: &Self) -> Self {
        self + o
    }
    fn sub(&self, o: &Self) -> Self {
        self - o
    }
    fn mul(&self, o: &Self) -> Self {
        self * o
    }
    fn div(&self, o: &Self) -> Self {
        self / o
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn lt(&self, o: &Self) -> bool {
        self < o
    }
}

/// Mantissa bits of [`Precise`].
pub const PRECISION: u32 = 128;

/// MPFR float at [`PRECISION`] bits.
#[derive(Clone, Debug)]
pub struct Precise(Float);

impl Real for Precise {
    fn from_f64(x: f64) -> Self {
        Precise(Float::with_val(PRECISION, x))
    }
    fn to_f64(&self) -> f64 {
        self.0.to_f64()
    }
    fn add(&self, o: &Self) -> Self {
        Precise(Float::with_val(PRECISION, &self.0 + &o.0))
    }
    fn sub(&self, o: &Self) -> Self {
        Precise(Float::with_val(PRECISION, &self.0 - &o.0))
    }
    fn mul(&self, o: &Self) -> Self {
        Precise(Float::with_val(PRECISION, &self.0 * &o.0))
    }
    fn div(&self, o: &Self) -> Self {
        Precise(Float::with_val(PRECISION, &self.0 / &o.0))
    }
    fn exp(&self) -> Self {
        Precise(self.0.clone().exp())
    }
    fn ln(&self) -> Self {
        Precise(self.0.clone().ln())
    }
    fn tanh(&self) -> Self {
        Precise(self.0.clone().tanh())
    }
    fn lt(&self, o: &Self) -> bool {
        self.0 < o.0
    }
}

struct Mat<R> {
    cols: usize,
    data: Vec<R>,
}

impl<R: Real> Mat<R> {
    fn load(store: &ParameterStore, id: ParamId) -> Self {
        let t = store.value(id);
        let cols = if t.is_matrix() { t.cols() } else { t.len() };
        Self {
            cols,
            data: t.data().iter().map(|&x| R::from_f64(x)).collect(),
        }
    }

    fn matvec(&self, x: &[R]) -> Vec<R> {
        self.data
            .chunks(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |acc, (x, y)| acc.add(&x.mul(y)))
}

fn add<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(x, y)| x.add(y)).collect()
}

fn softmax<R: Real>(z: &[R]) -> Vec<R> {
    let max = z.iter().skip(1).fold(z[0].clone(), |m, x| if m.lt(x) { x.clone() } else { m });
    let e: Vec<R> = z.iter().map(|x| x.sub(&max).exp()).collect();
    let total = e.iter().fold(R::zero(), |a, x| a.add(x));
    e.iter().map(|x| x.div(&total)).collect()
}

struct Lstm<R> {
    w: Vec<Mat<R>>,
    v: Vec<Mat<R>>,
    b: Vec<Vec<R>>,
    hidden: usize,
}

impl<R: Real> Lstm<R> {
    fn load(store: &ParameterStore, p: &LstmParams) -> Self {
        Self {
            w: p.w.iter().map(|&id| Mat::load(store, id)).collect(),
            v: p.v.iter().map(|&id| Mat::load(store, id)).collect(),
            b: p.b.iter().map(|&id| Mat::<R>::load(store, id).data).collect(),
            hidden: p.hidden,
        }
    }

    fn pre(&self, g: usize, x: &[R], h: &[R]) -> Vec<R> {
        add(&add(&self.w[g].matvec(x), &self.v[g].matvec(h)), &self.b[g])
    }

    fn step(&self, x: &[R], h: &[R], c: &[R]) -> (Vec<R>, Vec<R>) {
        let i: Vec<R> = self.pre(0, x, h).iter().map(R::sigmoid).collect();
        let f: Vec<R> = self.pre(1, x, h).iter().map(R::sigmoid).collect();
        let o: Vec<R> = self.pre(2, x, h).iter().map(R::sigmoid).collect();
        let cand: Vec<R> = self.pre(3, x, h).iter().map(R::tanh).collect();
        let c_new: Vec<R> = (0..self.hidden)
            .map(|k| f[k].mul(&c[k]).add(&i[k].mul(&cand[k])))
            .collect();
        let h_new = (0..self.hidden).map(|k| o[k].mul(&c_new[k].tanh())).collect();
        (h_new, c_new)
    }

    fn run(&self, xs: &[Vec<R>]) -> Vec<Vec<R>> {
        let mut h = vec![R::zero(); self.hidden];
        let mut c = vec![R::zero(); self.hidden];
        xs.iter()
            .map(|x| {
                (h, c) = self.step(x, &h, &c);
                h.clone()
            })
            .collect()
    }
}

fn encode<R: Real>(store: &ParameterStore, side: &SideEncoder, rows: Vec<Vec<R>>) -> Vec<Vec<R>> {
    match side {
        SideEncoder::Identity => rows,
        SideEncoder::Lstm(p) => Lstm::load(store, p).run(&rows),
        SideEncoder::BiLstm { forward, backward } => {
            let f = Lstm::load(store, forward).run(&rows);
            let reversed: Vec<Vec<R>> = rows.iter().rev().cloned().collect();
            let mut b = Lstm::load(store, backward).run(&reversed);
            b.reverse();
            f.into_iter().zip(b).map(|(x, y)| [x, y].concat()).collect()
        }
    }
}

/// Class probabilities for `example`, reading parameter values from
/// `store` through `model`'s layout.
pub fn forward<R: Real>(model: &Model, store: &ParameterStore, table: &EmbeddingTable, example: &Example) -> Result<Vec<R>> {
    let (m, n) = (example.premise_len, example.hypothesis_len);
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("empty sentence".into()));
    }
    let embed = |ids: &[usize]| -> Result<Vec<Vec<R>>> {
        ids.iter()
            .map(|&id| {
                if id >= table.vocab_size() {
                    return Err(Error::Index(format!("token id {id} out of range")));
                }
                Ok(table.row(id).iter().map(|&x| R::from_f64(x)).collect())
            })
            .collect()
    };
    let premise = encode(store, model.encoder.side(Side::Premise), embed(&example.premise[..m])?);
    let hypothesis = encode(store, model.encoder.side(Side::Hypothesis), embed(&example.hypothesis[..n])?);
    let width = model.config.state_dim();

    let att = &model.attention;
    let w_e: Vec<R> = Mat::load(store, att.w_e).data;
    let (w_s, w_t, w_r) = (Mat::load(store, att.w_s), Mat::load(store, att.w_t), Mat::load(store, att.w_r));
    let mut slots = vec![vec![R::zero(); width]];
    slots.extend(premise);
    let projected: Vec<Vec<R>> = slots.iter().map(|s| w_s.matvec(s)).collect();

    let matcher = model.matcher.as_ref().map(|p| Lstm::load(store, p));
    let v_a = att.v_a.map(|id| Mat::load(store, id));
    let mut h = vec![R::zero(); width];
    let mut c = vec![R::zero(); width];
    for h_t in &hypothesis {
        let query = add(&w_t.matvec(h_t), &w_r.matvec(&h));
        let scores: Vec<R> = projected
            .iter()
            .map(|p| {
                let act: Vec<R> = add(p, &query).iter().map(R::tanh).collect();
                dot(&w_e, &act)
            })
            .collect();
        let alpha = softmax(&scores);
        let a: Vec<R> = (0..width)
            .map(|k| alpha.iter().zip(&slots).fold(R::zero(), |acc, (w, s)| acc.add(&w.mul(&s[k]))))
            .collect();
        match (&matcher, &v_a) {
            (Some(lstm), _) => (h, c) = lstm.step(&[a, h_t.clone()].concat(), &h, &c),
            (None, Some(v)) => h = add(&a, &v.matvec(&h).iter().map(R::tanh).collect::<Vec<_>>()),
            (None, None) => return Err(Error::InvalidInput("model has neither head".into())),
        }
    }
    let features = if model.config.variant.is_baseline() {
        [h, hypothesis[n - 1].clone()].concat()
    } else {
        h
    };
    let w_y = Mat::load(store, model.classifier.w_y);
    let b_y: Vec<R> = Mat::load(store, model.classifier.b_y).data;
    Ok(softmax(&add(&w_y.matvec(&features), &b_y)))
}

/// `-ln(max(p[label], 1e-12))` on the reference forward pass.
pub fn loss<R: Real>(model: &Model, store: &ParameterStore, table: &EmbeddingTable, example: &Example) -> Result<R> {
    let probs = forward::<R>(model, store, table, example)?;
    let p = &probs[example.label.index()];
    let clamp = R::from_f64(LOG_CLAMP);
    let p = if p.lt(&clamp) { clamp } else { p.clone() };
    Ok(R::zero().sub(&p.ln()))
}

/// Below this magnitude an `f64` central difference at `ε = 1e-5` cannot
/// reach 1e-4 relative accuracy, since the loss itself carries about one
/// ulp of rounding.
pub const F64_RESOLUTION: f64 = 1e-6;

/// Full-model gradient check of the cross-entropy loss on `example`.
/// Central differences are taken in `f64` on the graph; entries whose
/// derivative is smaller than [`F64_RESOLUTION`] are re-evaluated on the
/// reference pass at [`PRECISION`] bits.
pub fn check_model_gradients(model: &Model, table: &EmbeddingTable, example: &Example, epsilon: f64) -> Result<GradCheckReport> {
    let mut store = model.store.clone();
    gradient_check_with(
        |g, s| {
            let bound = model.bind_to(g, s);
            let vars = bound.forward(g, table, example)?;
            g.cross_entropy(vars.probs, example.label.index())
        },
        |analytic, numeric, s: &mut ParameterStore, id, i| {
            if analytic.abs().max(numeric.abs()) >= F64_RESOLUTION {
                return Ok(None);
            }
            let x = s.value(id).data()[i];
            s.value_mut(id).data_mut()[i] = x + epsilon;
            let plus = loss::<Precise>(model, s, table, example);
            s.value_mut(id).data_mut()[i] = x - epsilon;
            let minus = loss::<Precise>(model, s, table, example);
            s.value_mut(id).data_mut()[i] = x;
            let (plus, minus) = (plus?, minus?);
            Ok(Some(plus.sub(&minus).div(&Precise::from_f64(2.0 * epsilon)).to_f64()))
        },
        &mut store,
        epsilon,
    )
}

/// A random model, embedding table and example with premise length `m`
/// and hypothesis length `n`, all drawn from `seed`. Embedding rows and
/// token ids are uniform; the label cycles with the seed.
pub fn random_instance(config: ModelConfig, seed: u64, m: usize, n: usize) -> Result<(Model, EmbeddingTable, Example)> {
    let model = Model::new(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_da7a);
    let vocab = 2 + m + n;
    let l = config.embed_dim;
    let mut data: Vec<f64> = (0..vocab * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
    data[..l].iter_mut().for_each(|x| *x = 0.0);
    let table = EmbeddingTable::new(Tensor::matrix(vocab, l, data)?)?;
    let premise = (0..m).map(|_| rng.gen_range(2..vocab)).collect();
    let hypothesis = (0..n).map(|_| rng.gen_range(2..vocab)).collect();
    let example = Example {
        premise,
        premise_len: m,
        hypothesis,
        hypothesis_len: n,
        label: Label::from_index((seed % 3) as usize)?,
    };
    Ok((model, table, example))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::ModelVariant;

    fn setup(seed: u64) -> (EmbeddingTable, Example) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        data[..5].iter_mut().for_each(|x| *x = 0.0);
        let table = EmbeddingTable::new(Tensor::matrix(10, 5, data).unwrap()).unwrap();
        let ex = Example {
            premise: vec![2, 3, 4, 5, 0],
            premise_len: 4,
            hypothesis: vec![6, 7, 8],
            hypothesis_len: 3,
            label: Label::Entailment,
        };
        (table, ex)
    }

    #[test]
    fn matches_graph_forward() {
        let (table, ex) = setup(1);
        for variant in ModelVariant::ALL {
            for shared in [true, false] {
                let config = ModelConfig {
                    shared_encoder: shared,
                    ..ModelConfig::new(variant, 4, 5)
                };
                let model = Model::new(config, 3).unwrap();
                let (graph, _) = model.forward(&table, &ex).unwrap();
                let plain = forward::<f64>(&model, &model.store, &table, &ex).unwrap();
                let precise = forward::<Precise>(&model, &model.store, &table, &ex).unwrap();
                for k in 0..3 {
                    assert!((graph.get(k) - plain[k]).abs() < 1e-13, "{variant}");
                    assert!((graph.get(k) - precise[k].to_f64()).abs() < 1e-13, "{variant}");
                }
            }
        }
    }

    #[test]
    fn precise_sigmoid_and_loss() {
        let x = Precise::from_f64(-3.0).sigmoid().to_f64();
        assert!((x - 1.0 / (1.0 + 3f64.exp())).abs() < 1e-16);
        let (table, ex) = setup(2);
        let model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 3, 5), 0).unwrap();
        let a = loss::<f64>(&model, &model.store, &table, &ex).unwrap();
        let b = loss::<Precise>(&model, &model.store, &table, &ex).unwrap().to_f64();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn model_check_within_tolerance() {
        let (table, ex) = setup(3);
        let model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 6, 5), 1).unwrap();
        let report = check_model_gradients(&model, &table, &ex, 1e-5).unwrap();
        assert!(report.max_rel_err() <= 1e-4, "{:?}", report.worst());
        assert!(report.params.iter().map(|p| p.scalars).sum::<usize>() == model.count_parameters());
    }
}
