//! End-to-end acceptance run. Prints one line per criterion and fails if
//! any criterion fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::checks;
use hiergen::data::{load_squad, Corpus, Limits, QGInstance};
use hiergen::decode::{greedy_decode, DecodeOptions};
use hiergen::eval::EvalReport;
use hiergen::model::{Architecture, Model, ModelConfig};
use hiergen::tensor::{load_checkpoint, save_checkpoint};
use hiergen::train::{gradcheck, train, train_step, GradCheckOptions, OptimState, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::json;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

const NOUNS: [&str; 12] = [
    "farmer", "engineer", "river", "council", "museum", "army", "king", "company", "teacher", "city", "ship", "poet",
];
const VERBS: [&str; 8] = ["built", "crossed", "founded", "painted", "sold", "visited", "opened", "described"];
const OBJECTS: [&str; 12] = [
    "bridge", "tower", "library", "harbor", "school", "mill", "garden", "railway", "temple", "market", "castle", "canal",
];
const PLACES: [&str; 10] = [
    "london", "paris", "cairo", "lima", "oslo", "delhi", "quito", "rome", "tokyo", "accra",
];
const YEARS: [&str; 8] = ["1801", "1850", "1877", "1902", "1919", "1946", "1968", "1990"];

/// A SQuAD-format file of `n` (paragraph, question, answer) triples built
/// from templated sentences. Five questions per paragraph.
fn synthetic_squad(path: &Path, n: usize, seed: u64) {
    let mut r = common::rng(seed);
    let mut paragraphs = Vec::new();
    let mut made = 0;
    while made < n {
        let k = r.gen_range(3..6);
        let mut facts = Vec::new();
        let mut text = String::new();
        for _ in 0..k {
            let f = (
                *NOUNS.choose(&mut r).unwrap(),
                *VERBS.choose(&mut r).unwrap(),
                *OBJECTS.choose(&mut r).unwrap(),
                *PLACES.choose(&mut r).unwrap(),
                *YEARS.choose(&mut r).unwrap(),
            );
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(&format!("The {} {} the {} in {} in {}.", f.0, f.1, f.2, f.3, f.4));
            facts.push(f);
        }
        let mut qas = Vec::new();
        for q in 0..5.min(n - made) {
            let f = facts[r.gen_range(0..k)];
            let (question, answer) = match r.gen_range(0..3) {
                0 => (format!("What did the {} {} in {} ?", f.0, f.1, f.3), f.2),
                1 => (format!("Where did the {} {} the {} ?", f.0, f.1, f.2), f.3),
                _ => (format!("When did the {} {} the {} ?", f.0, f.1, f.2), f.4),
            };
            let sentence = format!("The {} {} the {} in {} in {}.", f.0, f.1, f.2, f.3, f.4);
            let start = text.find(&sentence).unwrap() + sentence.find(&format!(" {answer}")).unwrap() + 1;
            qas.push(json!({
                "id": format!("s{made}-{q}"),
                "question": question,
                "answers": [{"text": answer, "answer_start": start}],
            }));
        }
        made += qas.len();
        paragraphs.push(json!({"context": text, "qas": qas}));
    }
    let doc = json!({"version": "synthetic", "data": [{"title": "synthetic", "paragraphs": paragraphs}]});
    std::fs::write(path, serde_json::to_string(&doc).unwrap()).unwrap();
}

fn small_lstm(arch: Architecture, vocab: usize) -> ModelConfig {
    ModelConfig {
        emb_dim: 24,
        bio_dim: 4,
        flag_dim: 4,
        lstm_hidden: 24,
        dec_hidden: 32,
        attn_dim: 24,
        ..ModelConfig::toy(arch, vocab)
    }
}

fn criterion_1() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = match std::env::var_os("HIERGEN_SQUAD_SUBSAMPLE") {
        Some(p) => PathBuf::from(p),
        None => {
            let p = dir.path().join("squad_500.json");
            synthetic_squad(&p, 500, 2024);
            p
        }
    };
    let mut records = load_squad(&path).unwrap();
    records.truncate(500);
    let n = records.len();
    let corpus = Corpus::prepare(records, &Limits::default(), 45_000, 1, 0.9, 1).unwrap();
    let (train_set, dev_set) = (corpus.encode(&corpus.train), corpus.encode(&corpus.dev));
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr: 5e-3,
        patience: 20,
        ..TrainConfig::default()
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for arch in [Architecture::Seq2SeqAttAE, Architecture::HierSeq2SeqAE] {
        let mut model = Model::build(small_lstm(arch, corpus.vocab.len())).unwrap();
        let record = train(&mut model, &train_set, &dev_set, &cfg, None).unwrap();
        let opts = DecodeOptions {
            beam: 1,
            ..DecodeOptions::default()
        };
        let hyps: Vec<Vec<usize>> = dev_set
            .iter()
            .map(|inst| {
                let mut dec = model.decoder(inst).unwrap();
                greedy_decode(&mut dec, &opts).unwrap().output().to_vec()
            })
            .collect();
        let refs: Vec<Vec<usize>> = dev_set.iter().map(|i| i.question.clone()).collect();
        let report = EvalReport::compute(&hyps, &refs).unwrap();
        let valid = record.epoch_losses.len() == 20
            && record.dev_bleu4.iter().all(|b| (0.0..=1.0).contains(b))
            && report.scores().iter().all(|s| (0.0..=1.0).contains(s));
        pass &= valid;
        parts.push(format!(
            "{arch} dev BLEU-4 {:.4} ROUGE-L {:.4} (epochs {})",
            report.bleu4,
            report.rouge_l,
            record.epoch_losses.len()
        ));
    }
    outcome(pass, format!("{n} instances; {}", parts.join("; ")))
}

fn toy_model(arch: Architecture) -> Model {
    Model::build(ModelConfig::toy(arch, common::TOY_WORDS.len() + 4)).unwrap()
}

fn criterion_2() -> Outcome {
    let batch = [common::toy_instance(), common::toy_instance_no_answer()];
    let opts = GradCheckOptions {
        samples: 200,
        eps: 1e-5,
        tol: 1e-3,
        seed: 0,
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for arch in Architecture::ALL {
        let mut model = toy_model(arch);
        let report = gradcheck(&mut model, &batch, &opts).unwrap();
        let coverage = report.groups.iter().all(|g| g.sampled == g.coordinates.min(200));
        pass &= report.passed && coverage && report.max_rel_error() < 1e-3;
        parts.push(format!("{arch} {:.2e}", report.max_rel_error()));
    }
    outcome(pass, format!("max rel error: {}", parts.join(", ")))
}

fn criterion_3() -> Outcome {
    let (sp, kkt) = checks::sparsemax_vs_oracle(1000, 101);
    let hatt = checks::hatt_vs_brute(100, 102);
    let hier = checks::hier_context_vs_brute(100, 103);
    let mh = checks::mhatt_identity_vs_hatt(100, 104);
    let pass = sp <= 1e-9 && kkt && hatt <= 1e-9 && hier <= 1e-9 && mh <= 1e-12;
    outcome(
        pass,
        format!("sparsemax {sp:.1e} (KKT {kkt}), HATT {hatt:.1e}, hierarchical context {hier:.1e}, MHATT {mh:.1e}"),
    )
}

fn criterion_4() -> Outcome {
    let inst = common::toy_instance();
    let batch = std::slice::from_ref(&inst);
    let mut pass = true;
    let mut parts = Vec::new();
    for arch in Architecture::ALL {
        let mut model = toy_model(arch);
        let mut opt = OptimState::new(model.params(), 1e-2);
        let mut steps = 0;
        let mut loss = model.forward_loss(batch).unwrap();
        while loss >= 0.05 && steps < 500 {
            train_step(&mut model, batch, &mut opt, 5.0).unwrap();
            steps += 1;
            loss = model.forward_loss(batch).unwrap();
        }
        let opts = DecodeOptions {
            beam: 1,
            max_len: inst.question.len() + 5,
            ..DecodeOptions::default()
        };
        let mut dec = model.decoder(&inst).unwrap();
        let out = greedy_decode(&mut dec, &opts).unwrap();
        let memorized = out.output() == inst.question.as_slice();
        pass &= loss < 0.05 && memorized;
        parts.push(format!("{arch} {steps} steps loss {loss:.4} memorized {memorized}"));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_5() -> Outcome {
    let mut failed = Vec::new();
    let fixtures = checks::metric_fixtures();
    for (name, got, want, tol) in &fixtures {
        if (got - want).abs() > *tol {
            failed.push(format!("{name}: {got} vs {want}"));
        }
    }
    let questions: Vec<Vec<String>> = load_squad(fixture("squad_3articles.json"))
        .unwrap()
        .iter()
        .map(|r| hiergen::data::tokenize(&r.question))
        .collect();
    let (b, r) = checks::self_scores(&questions);
    if b != 1.0 || r != 1.0 {
        failed.push(format!("self scores {b} {r}"));
    }
    let detail = if failed.is_empty() {
        format!("{} fixture values, bleu(h,h) = rouge_l(h,h) = 1", fixtures.len())
    } else {
        failed.join("; ")
    };
    outcome(failed.is_empty(), detail)
}

fn criterion_6() -> Outcome {
    let (zeros, diff) = checks::selectivity(200, 106);
    outcome(
        zeros > 0 && diff <= 1e-12,
        format!("{zeros} zero-weight sentences perturbed, max context change {diff:.1e}"),
    )
}

fn run_bytes(dir: &Path, data: &[QGInstance]) -> (Vec<u8>, Vec<u8>) {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        lr: 1e-2,
        eval_max_len: 8,
        ..TrainConfig::default()
    };
    let mut model = toy_model(Architecture::HierTransSeq2SeqAE);
    train(&mut model, data, &data[..1], &cfg, Some(dir)).unwrap();
    save_checkpoint(model.params(), dir.join("last.ckpt")).unwrap();
    (
        std::fs::read(dir.join("train_log.jsonl")).unwrap(),
        std::fs::read(dir.join("last.ckpt")).unwrap(),
    )
}

fn criterion_7() -> Outcome {
    let data = vec![common::toy_instance(), common::toy_instance_no_answer()];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let identical = run_bytes(a.path(), &data) == run_bytes(b.path(), &data);

    let mut exact = true;
    for arch in Architecture::ALL {
        let mut model = toy_model(arch);
        let mut opt = OptimState::new(model.params(), 1e-2);
        for _ in 0..3 {
            train_step(&mut model, &data, &mut opt, 5.0).unwrap();
        }
        let path = a.path().join(format!("{arch}.ckpt"));
        save_checkpoint(model.params(), &path).unwrap();
        let mut restored = Model::build(ModelConfig {
            seed: 7,
            ..model.config().clone()
        })
        .unwrap();
        restored.params_mut().assign(load_checkpoint(&path).unwrap()).unwrap();
        let (x, y) = (model.forward_loss(&data).unwrap(), restored.forward_loss(&data).unwrap());
        exact &= x.to_bits() == y.to_bits();
    }
    outcome(
        identical && exact,
        format!("same-seed runs byte-identical {identical}, checkpoint loss bit-exact {exact}"),
    )
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("subsample training run", criterion_1),
        ("gradient integrity", criterion_2),
        ("oracle equivalences", criterion_3),
        ("learnability", criterion_4),
        ("metric correctness", criterion_5),
        ("selectivity", criterion_6),
        ("determinism and round-trip", criterion_7),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} ({name}): {verdict} [{:.1}s] {}",
            i + 1,
            start.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
