#![allow(dead_code)]

use std::path::PathBuf;

use mlstm::embeddings::{build_vocab, impute_oov, load_pretrained, EmbeddingTable, Vocabulary, DEFAULT_WINDOW};
use mlstm::matcher::{Example, Model, ModelVariant};
use mlstm::numerics::ParameterStore;
use mlstm::snli::{read_tsv, LabeledPair};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub struct FixtureData {
    pub vocab: Vocabulary,
    pub table: EmbeddingTable,
    pub train_pairs: Vec<LabeledPair>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

/// The 64-pair training fixture and 8-pair dev fixture, with embeddings of
/// width `dim` (50 or 300) imputed the same way `prepare` does.
pub fn fixture_data(dim: usize) -> FixtureData {
    let train = read_tsv(fixture("train64.tsv")).unwrap();
    let dev = read_tsv(fixture("dev8.tsv")).unwrap();
    let all: Vec<LabeledPair> = train.pairs.iter().chain(&dev.pairs).cloned().collect();
    let mut vocab = build_vocab(&all).unwrap();
    let raw = load_pretrained(fixture(&format!("vectors{dim}.txt")), &mut vocab, dim).unwrap();
    let table = impute_oov(&raw, &vocab, &all, DEFAULT_WINDOW).unwrap();
    let ex = |pairs: &[LabeledPair]| -> Vec<Example> {
        pairs.iter().map(|p| Example::from_pair(p, &vocab).unwrap()).collect()
    };
    FixtureData {
        train: ex(&train.pairs),
        dev: ex(&dev.pairs),
        train_pairs: train.pairs,
        vocab,
        table,
    }
}

/// Straight-line scalar evaluation of the whole model: plain loops over
/// `Vec<f64>`, reading parameters by name. Shares nothing with the graph
/// engine beyond the parameter store.
pub mod oracle {
    use super::*;

    pub struct Output {
        pub probs: Vec<f64>,
        /// One row per hypothesis position: NULL weight, then the premise.
        pub alphas: Vec<Vec<f64>>,
        pub final_state: Vec<f64>,
    }

    struct Mat {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    fn mat(store: &ParameterStore, name: &str) -> Mat {
        let t = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let (rows, cols) = if t.shape().len() == 2 { (t.shape()[0], t.shape()[1]) } else { (t.len(), 1) };
        Mat {
            rows,
            cols,
            data: t.data().to_vec(),
        }
    }

    fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
        assert_eq!(m.cols, x.len());
        let mut out = vec![0.0; m.rows];
        for r in 0..m.rows {
            let mut s = 0.0;
            for c in 0..m.cols {
                s += m.data[r * m.cols + c] * x[c];
            }
            out[r] = s;
        }
        out
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn softmax(x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    struct Lstm {
        w: Vec<Mat>,
        v: Vec<Mat>,
        b: Vec<Vec<f64>>,
    }

    impl Lstm {
        fn load(store: &ParameterStore, prefix: &str) -> Self {
            let gates = ["i", "f", "o", "c"];
            Lstm {
                w: gates.iter().map(|g| mat(store, &format!("{prefix}.W_{g}"))).collect(),
                v: gates.iter().map(|g| mat(store, &format!("{prefix}.V_{g}"))).collect(),
                b: gates.iter().map(|g| mat(store, &format!("{prefix}.b_{g}")).data).collect(),
            }
        }

        fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
            let d = h.len();
            let pre: Vec<Vec<f64>> = (0..4)
                .map(|k| {
                    let wx = mv(&self.w[k], x);
                    let vh = mv(&self.v[k], h);
                    (0..d).map(|i| wx[i] + vh[i] + self.b[k][i]).collect()
                })
                .collect();
            let mut c_new = vec![0.0; d];
            let mut h_new = vec![0.0; d];
            for i in 0..d {
                let (ig, fg, og) = (sig(pre[0][i]), sig(pre[1][i]), sig(pre[2][i]));
                c_new[i] = fg * c[i] + ig * pre[3][i].tanh();
                h_new[i] = og * c_new[i].tanh();
            }
            (h_new, c_new)
        }

        fn run(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let d = self.b[0].len();
            let (mut h, mut c) = (vec![0.0; d], vec![0.0; d]);
            xs.iter()
                .map(|x| {
                    (h, c) = self.step(x, &h, &c);
                    h.clone()
                })
                .collect()
        }
    }

    fn encode(model: &Model, prefix: &str, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let store = &model.store;
        match model.config.variant {
            ModelVariant::MlstmWordEmbedding => xs.to_vec(),
            ModelVariant::MlstmBilstm => {
                let f = Lstm::load(store, &format!("{prefix}.fwd")).run(xs);
                let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
                let mut b = Lstm::load(store, &format!("{prefix}.bwd")).run(&rev);
                b.reverse();
                f.into_iter().zip(b).map(|(mut f, b)| {
                    f.extend(b);
                    f
                })
                .collect()
            }
            _ => Lstm::load(store, prefix).run(xs),
        }
    }

    pub fn forward(model: &Model, table: &EmbeddingTable, ex: &Example) -> Output {
        let store = &model.store;
        let rows = |ids: &[usize]| -> Vec<Vec<f64>> { ids.iter().map(|&i| table.row(i).to_vec()).collect() };
        let (pp, hp) = if model.config.shared_encoder {
            ("encoder", "encoder")
        } else {
            ("encoder.premise", "encoder.hypothesis")
        };
        let hs = encode(model, pp, &rows(&ex.premise[..ex.premise_len]));
        let ht = encode(model, hp, &rows(&ex.hypothesis[..ex.hypothesis_len]));
        let width = ht[0].len();

        let w_e = mat(store, "attention.w_e").data;
        let w_s = mat(store, "attention.W_s");
        let w_t = mat(store, "attention.W_t");
        let w_r = mat(store, "attention.W_r");
        let mut bank = vec![vec![0.0; width]];
        bank.extend(hs);
        let projected: Vec<Vec<f64>> = bank.iter().map(|y| mv(&w_s, y)).collect();

        let baseline = model.config.variant == ModelVariant::WbwAttentionBaseline;
        let matcher = (!baseline).then(|| Lstm::load(store, "match"));
        let v_a = baseline.then(|| mat(store, "attention.V_a"));

        let mut r = vec![0.0; width];
        let mut c = vec![0.0; width];
        let mut alphas = Vec::new();
        for h_t in &ht {
            let wt = mv(&w_t, h_t);
            let wr = mv(&w_r, &r);
            let scores: Vec<f64> = projected
                .iter()
                .map(|p| (0..width).map(|i| w_e[i] * (p[i] + wt[i] + wr[i]).tanh()).sum())
                .collect();
            let alpha = softmax(&scores);
            let mut a = vec![0.0; width];
            for (j, y) in bank.iter().enumerate() {
                for i in 0..width {
                    a[i] += alpha[j] * y[i];
                }
            }
            if let Some(m) = &matcher {
                let mut input = a.clone();
                input.extend_from_slice(h_t);
                (r, c) = m.step(&input, &r, &c);
            } else {
                let vh = mv(v_a.as_ref().unwrap(), &r);
                r = (0..width).map(|i| a[i] + vh[i].tanh()).collect();
            }
            alphas.push(alpha);
        }

        let mut features = r.clone();
        if baseline {
            features.extend_from_slice(ht.last().unwrap());
        }
        let w_y = mat(store, "classifier.W_y");
        let b_y = mat(store, "classifier.b_y").data;
        let logits: Vec<f64> = mv(&w_y, &features).iter().zip(&b_y).map(|(a, b)| a + b).collect();
        Output {
            probs: softmax(&logits),
            alphas,
            final_state: r,
        }
    }
}
