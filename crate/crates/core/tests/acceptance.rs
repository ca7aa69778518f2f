//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so
//! the lines are always visible in `cargo test` output; exits non-zero if
//! any gating criterion fails.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mlstm::cli::{self, Cli, Command, PrepareArgs, TrainArgs};
use mlstm::embeddings::{EmbeddingTable, PAD_ID};
use mlstm::introspect::{gate_statistics, Gate, StopwordList};
use mlstm::matcher::{Example, Model, ModelConfig, ModelVariant};
use mlstm::reference::{check_model_gradients, random_instance};
use mlstm::snli::{parse_snli, Label};
use mlstm::training::{evaluate, make_batches, train_step, AdamState, Confusion, TrainConfig};

use common::{fixture, fixture_data, oracle};

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_TOL: f64 = 1e-10;
const ALPHA_SUM_TOL: f64 = 1e-9;
const PAD_TOL: f64 = 1e-12;
const OVERFIT_EPOCHS: usize = 500;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const FULL_SPLITS: [(&str, usize); 3] = [("train", 549_367), ("dev", 9_842), ("test", 9_824)];
const FULL_TEST_TARGET: f64 = 0.84;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn small_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let variant = ModelVariant::ALL[rng.gen_range(0..4)];
    ModelConfig {
        shared_encoder: rng.gen_bool(0.5),
        ..ModelConfig::new(variant, rng.gen_range(2..6), rng.gen_range(2..6))
    }
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    for variant in ModelVariant::ALL {
        for seed in 0..5 {
            let (model, table, ex) = random_instance(ModelConfig::new(variant, 6, 5), seed, 4, 3).unwrap();
            let report = check_model_gradients(&model, &table, &ex, GRAD_EPS).unwrap();
            let p = report.worst().unwrap();
            if p.max_rel_err >= worst.0 {
                worst = (p.max_rel_err, format!("{variant} seed {seed} {}", p.name));
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        worst.0 <= GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("worst rel err {:.2e} ({}), {:.1}s", worst.0, worst.1, elapsed.as_secs_f64()),
    )
}

fn scalar_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let config = small_config(&mut rng);
        let (m, n) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let (model, table, ex) = random_instance(config, i, m, n).unwrap();
        let (probs, trace) = model.forward(&table, &ex).unwrap();
        let o = oracle::forward(&model, &table, &ex);
        for k in 0..3 {
            worst = worst.max((probs.get(k) - o.probs[k]).abs());
        }
        for (row, alpha) in trace.rows.iter().zip(&o.alphas) {
            for (a, b) in row.alpha.iter().zip(alpha) {
                worst = worst.max((a - b).abs());
            }
        }
        for (a, b) in trace.rows.last().unwrap().hidden.iter().zip(&o.final_state) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= ORACLE_TOL, format!("50 instances, max abs diff {worst:.2e}"))
}

fn padded(ids: &[usize], extra: usize) -> Vec<usize> {
    let mut v = ids.to_vec();
    v.extend(std::iter::repeat_n(PAD_ID, extra));
    v
}

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let (mut worst, mut bad_mask, mut bad_null) = (0.0f64, 0, 0);
    for i in 0..1000 {
        let config = small_config(&mut rng);
        let (m, n) = (rng.gen_range(1..8), rng.gen_range(1..6));
        let (model, table, mut ex) = random_instance(config, 10_000 + i, m, n).unwrap();
        ex.premise = padded(&ex.premise, rng.gen_range(0..4));
        let (_, trace) = model.forward(&table, &ex).unwrap();
        for row in &trace.rows {
            if row.alpha.len() != ex.premise.len() + 1 || !(row.alpha[0] > 0.0) {
                bad_null += 1;
            }
            worst = worst.max((row.alpha.iter().sum::<f64>() - 1.0).abs());
            bad_mask += row.alpha[m + 1..].iter().filter(|&&a| a != 0.0).count();
        }
    }
    verdict(
        worst <= ALPHA_SUM_TOL && bad_mask == 0 && bad_null == 0,
        format!("1000 forwards, max |sum-1| {worst:.1e}, nonzero masked {bad_mask}, missing NULL {bad_null}"),
    )
}

fn overfit() -> Outcome {
    let data = fixture_data(300);
    let config = TrainConfig {
        epochs: OVERFIT_EPOCHS,
        ..TrainConfig::default()
    };
    let mut model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 32, 300), config.seed).unwrap();
    let mut state = AdamState::from_config(&model.store, &config);
    let start = Instant::now();
    let mut acc = 0.0;
    for epoch in 0..config.epochs {
        let batches = make_batches(&data.train, config.batch_size, config.seed.wrapping_add(epoch as u64), config.shuffle).unwrap();
        for batch in &batches {
            train_step(&mut model, &mut state, &data.table, &batch.examples().unwrap(), config.lr_at(epoch), config.clip).unwrap();
        }
        acc = evaluate(&model, &data.table, &data.train).unwrap().accuracy();
        if acc == 1.0 {
            let elapsed = start.elapsed();
            return verdict(
                elapsed < OVERFIT_BUDGET,
                format!("100% train accuracy after epoch {epoch}, {:.1}s", elapsed.as_secs_f64()),
            );
        }
        if start.elapsed() > OVERFIT_BUDGET {
            break;
        }
    }
    Outcome::Fail(format!("train accuracy {acc:.4} at stop, {:.1}s", start.elapsed().as_secs_f64()))
}

fn padding_invariance() -> Outcome {
    let mut worst = 0.0f64;
    for variant in ModelVariant::ALL {
        for seed in 0..10 {
            let (model, table, ex) = random_instance(ModelConfig::new(variant, 5, 4), 500 + seed, 4, 3).unwrap();
            let (p0, t0) = model.forward(&table, &ex).unwrap();
            for extra in [3, 7] {
                let ex_pad = Example {
                    premise: padded(&ex.premise, extra),
                    hypothesis: padded(&ex.hypothesis, extra),
                    ..ex.clone()
                };
                let (p, t) = model.forward(&table, &ex_pad).unwrap();
                for k in 0..3 {
                    worst = worst.max((p.get(k) - p0.get(k)).abs());
                }
                let (h0, h) = (&t0.rows.last().unwrap().hidden, &t.rows.last().unwrap().hidden);
                for (a, b) in h0.iter().zip(h) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    verdict(worst <= PAD_TOL, format!("widths N, N+3, N+7, max abs diff {worst:.1e}"))
}

fn data_contract() -> Outcome {
    let mini = parse_snli(fixture("snli_mini.jsonl")).unwrap();
    let mut ok = mini.kept == 3 && mini.dropped == 1 && mini.pairs.len() == 3;
    let mut detail = format!("fixture kept {} dropped {}", mini.kept, mini.dropped);
    match std::env::var_os("MLSTM_SNLI_DIR") {
        Some(dir) => {
            for (split, expected) in FULL_SPLITS {
                let c = parse_snli(Path::new(&dir).join(format!("snli_1.0_{split}.jsonl"))).unwrap();
                ok &= c.kept == expected;
                detail.push_str(&format!("; {split} {} (expected {expected})", c.kept));
            }
        }
        None => detail.push_str("; full corpus not supplied (set MLSTM_SNLI_DIR)"),
    }
    verdict(ok, detail)
}

fn run_cli(command: Command) {
    let mut sink = Vec::new();
    cli::run(&Cli { command }, &mut sink).unwrap();
}

fn prepare_fixture(dir: &Path, dim: usize) -> PathBuf {
    let out = dir.join("prepared");
    run_cli(Command::Prepare(PrepareArgs {
        train: fixture("train64.tsv"),
        dev: Some(fixture("dev8.tsv")),
        test: None,
        embeddings: fixture(&format!("vectors{dim}.txt")),
        dim,
        window: mlstm::embeddings::DEFAULT_WINDOW,
        out: out.clone(),
    }));
    out
}

fn train_once(prepared: &Path, out: PathBuf) -> (String, Vec<u8>) {
    let log = out.with_extension("log.jsonl");
    run_cli(Command::Train(TrainArgs {
        prepared: prepared.to_path_buf(),
        variant: ModelVariant::Mlstm,
        d: 16,
        epochs: 1,
        seed: 7,
        batch_size: 30,
        lr: 0.001,
        decay: 0.95,
        beta1: 0.9,
        beta2: 0.999,
        adam_epsilon: 1e-8,
        clip: None,
        no_shuffle: false,
        unshared: false,
        out: out.clone(),
        log: Some(log.clone()),
    }));
    let text = fs::read_to_string(log).unwrap();
    let epoch0 = text.lines().find(|l| l.contains("\"epoch\":0")).unwrap_or_default().to_string();
    (epoch0, fs::read(out).unwrap())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let prepared = prepare_fixture(tmp.path(), 50);
    let (log_a, ck_a) = train_once(&prepared, tmp.path().join("a.ckpt"));
    let (log_b, ck_b) = train_once(&prepared, tmp.path().join("b.ckpt"));
    verdict(
        !log_a.is_empty() && log_a == log_b && ck_a == ck_b,
        format!(
            "epoch-0 log lines {}, checkpoints ({} bytes) {}",
            if log_a == log_b { "identical" } else { "differ" },
            ck_a.len(),
            if ck_a == ck_b { "identical" } else { "differ" }
        ),
    )
}

fn frozen_embeddings() -> Outcome {
    let data = fixture_data(50);
    let before = data.table.checksum();
    let config = TrainConfig::default();
    let mut model = Model::new(ModelConfig::new(ModelVariant::Mlstm, 8, 50), 3).unwrap();
    let initial = model.store.clone();
    let mut state = AdamState::from_config(&model.store, &config);
    let table: &EmbeddingTable = &data.table;
    for step in 0..10 {
        let batch: Vec<Example> = data.train.iter().cycle().skip(step * 6).take(6).cloned().collect();
        train_step(&mut model, &mut state, table, &batch, config.lr0, None).unwrap();
    }
    let after = table.checksum();
    let moved = model.store != initial;
    verdict(
        before == after && moved,
        format!("checksum {}... unchanged: {}, parameters updated: {moved}", &before[..12], before == after),
    )
}

fn confusion_arithmetic() -> Outcome {
    use Label::{Contradiction as C, Entailment as E, Neutral as N};
    let counts = [
        (N, [(N, 2628), (E, 286), (C, 255)]),
        (E, [(N, 340), (E, 3005), (C, 159)]),
        (C, [(N, 250), (E, 77), (C, 2823)]),
    ];
    let mut confusion = Confusion::default();
    for (pred, row) in counts {
        for (gold, count) in row {
            confusion.counts[pred.index()][gold.index()] += count;
        }
    }
    let acc = confusion.accuracy();
    let reported = 86.1;
    let ok = confusion.correct() == 8456 && ((acc * 1000.0).round() / 10.0 - reported).abs() < 1e-9;
    verdict(
        ok,
        format!(
            "correct {} / cells {} = {acc:.4} (8456/9824 = {:.4}), reported {reported}%",
            confusion.correct(),
            confusion.total(),
            8456.0 / 9824.0
        ),
    )
}

/// Non-gating: checks a model trained with the documented full-scale
/// command sequence, when one is supplied.
fn full_scale() -> Outcome {
    let (Some(ckpt), Some(test)) = (std::env::var_os("MLSTM_FULL_CHECKPOINT"), std::env::var_os("MLSTM_FULL_TEST")) else {
        return Outcome::Skip("set MLSTM_FULL_CHECKPOINT and MLSTM_FULL_TEST to check a full-scale model".into());
    };
    let args = cli::ModelArgs {
        checkpoint: PathBuf::from(ckpt),
        prepared: None,
    };
    let (model, prepared) = cli::load_model(&args).unwrap();
    let corpus = cli::read_corpus(Path::new(&test)).unwrap();
    let examples = prepared.examples(&corpus.pairs).unwrap();
    let acc = evaluate(&model, &prepared.table, &examples).unwrap().accuracy();
    let report = gate_statistics(&model, &prepared.vocab, &prepared.table, &corpus.pairs, &StopwordList::from_env().unwrap(), &[]).unwrap();
    let mean = |g: &str, gate| report.get(g, gate).map_or(f64::NAN, |s| s.mean);
    let (stop, content) = (mean("stopword", Gate::Input), mean("content", Gate::Input));
    let (ent, con) = (mean("label=entailment", Gate::Forget), mean("label=contradiction", Gate::Forget));
    verdict(
        acc >= FULL_TEST_TARGET && stop < content && ent < con,
        format!("test acc {acc:.4}; input gate stopword {stop:.3} vs content {content:.3}; forget gate E {ent:.3} vs C {con:.3}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, bool); 10] = [
        ("gradient correctness", gradient_correctness, true),
        ("scalar-oracle equivalence", scalar_oracle, true),
        ("attention normalization", attention_normalization, true),
        ("overfit capacity", overfit, true),
        ("padding invariance", padding_invariance, true),
        ("data contract", data_contract, true),
        ("determinism", determinism, true),
        ("frozen embeddings", frozen_embeddings, true),
        ("confusion-matrix arithmetic", confusion_arithmetic, true),
        ("full-scale reproduction (non-gating)", full_scale, false),
    ];
    let mut failed = 0;
    for (name, check, gating) in criteria {
        match check() {
            Outcome::Pass(d) => println!("PASS  {name}: {d}"),
            Outcome::Skip(d) => println!("SKIP  {name}: {d}"),
            Outcome::Fail(d) => {
                println!("FAIL  {name}: {d}");
                failed += gating as usize;
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
