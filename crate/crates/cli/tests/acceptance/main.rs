//! Acceptance suite: one test per release criterion, each printing a
//! PASS line once its assertions hold (run with `--nocapture` to see them).
//!
//! Numeric expectations marked "precomputed" were derived with a
//! standalone script before the implementation existed and frozen here;
//! fixture-level accuracy checks compare against the brute-force oracle in
//! `oracle.rs`.

mod oracle;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oracle::{FixtureParams, OracleMode};
use qcd_core::backend::TableLm;
use qcd_core::decoder::DecodeMode;
use qcd_core::dist::{
    apply_temperature, qcd_combine, softmax, CombineSpace, QcdConfig, TokenDistribution,
};
use qcd_core::embedding::{check_variant, FixtureEmbeddings, DEFAULT_GATE_THRESHOLD};
use qcd_core::evalkit::{
    count_compliance_errors, decode_task, load_tasks, parse_report_lines, run_eval, CellSpec,
    EvalMatrix, EvalOptions, Prediction, TaskInstance,
};
use qcd_core::prompt::{InstructionTemplate, TemplateName, CANONICAL_HINT, TD_INS_BODY};

fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn fixture(name: &str) -> PathBuf {
    fixtures_dir().join(name)
}

fn pass(n: usize, what: &str) {
    println!("[criterion {n:2}] PASS - {what}");
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize, allow_zeros: bool) -> TokenDistribution {
    loop {
        let mut w: Vec<f64> = (0..n)
            .map(|_| {
                if allow_zeros && rng.gen_bool(0.15) {
                    0.0
                } else {
                    rng.gen_range(0.01..1.0)
                }
            })
            .collect();
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 {
            continue;
        }
        for x in &mut w {
            *x /= sum;
        }
        return TokenDistribution::new(w).unwrap();
    }
}

fn log_cfg(alpha: f64) -> QcdConfig {
    QcdConfig { alpha, ..QcdConfig::default() }
}

#[test]
fn criterion_01_identity_at_alpha_zero() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for round in 0..1_000 {
        let n = rng.gen_range(2..16);
        let full = random_dist(&mut rng, n, true);
        let sub = random_dist(&mut rng, n, true);
        let out = qcd_combine(&full, &sub, &log_cfg(0.0)).unwrap();
        for i in 0..n {
            assert!(
                (out.get(i) - full.get(i)).abs() <= 1e-12,
                "round {round}, entry {i}: {} vs {}",
                out.get(i),
                full.get(i)
            );
        }
    }
    assert!(started.elapsed() < Duration::from_secs(1));
    pass(1, "alpha = 0 reproduces the full distribution on 1,000 random pairs (1e-12)");
}

#[test]
fn criterion_02_fixed_point_when_streams_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for &alpha in &[0.25, 0.5, 0.75, 1.0] {
        for _ in 0..250 {
            let n = rng.gen_range(2..12);
            let d = random_dist(&mut rng, n, true);
            let out = qcd_combine(&d, &d, &log_cfg(alpha)).unwrap();
            for i in 0..n {
                assert!((out.get(i) - d.get(i)).abs() <= 1e-12);
            }
        }
    }
    pass(2, "equal streams are a fixed point for alpha in {0.25, 0.5, 0.75, 1.0} (1e-12)");
}

#[test]
fn criterion_03_odds_amplification() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = log_cfg(0.5);
    let mut checked = 0usize;
    while checked < 10_000 {
        let n = rng.gen_range(3..8);
        let full = random_dist(&mut rng, n, false);
        let sub = random_dist(&mut rng, n, false);
        let i = rng.gen_range(0..n);
        let j = loop {
            let j = rng.gen_range(0..n);
            if j != i {
                break j;
            }
        };
        let full_odds = full.get(i) / full.get(j);
        let sub_odds = sub.get(i) / sub.get(j);
        let (i, j, full_odds) = if full_odds > sub_odds {
            (i, j, full_odds)
        } else if sub_odds > full_odds {
            // Swap so the hypothesis holds for (i, j).
            (j, i, 1.0 / full_odds)
        } else {
            continue;
        };
        let out = qcd_combine(&full, &sub, &cfg).unwrap();
        let combined_odds = out.get(i) / out.get(j);
        assert!(
            combined_odds > full_odds,
            "odds not amplified: {combined_odds} vs {full_odds}"
        );
        checked += 1;
    }
    assert!(started.elapsed() < Duration::from_secs(1));
    pass(3, "favored-token odds strictly amplified on 10,000 random triples at alpha = 0.5");
}

#[test]
fn criterion_04_prior_correction_flip() {
    // Three tokens: red, purple, green. The full stream prefers red on the
    // prior's strength; the contrast flips the choice to purple.
    let full = TokenDistribution::new(vec![0.5, 0.4, 0.1]).unwrap();
    let cfg = log_cfg(0.5);

    // Route one: sub exactly as listed. Expected values precomputed by
    // direct evaluation of 1.5*ln(p_full) - 0.5*ln(p_sub) then softmax.
    let sub = TokenDistribution::new(vec![0.8, 0.1, 0.1]).unwrap();
    let out = qcd_combine(&full, &sub, &cfg).unwrap();
    let expected = [0.305172, 0.617625, 0.077203];
    for (i, want) in expected.iter().enumerate() {
        assert!((out.get(i) - want).abs() <= 1e-3, "entry {i}: {}", out.get(i));
    }
    assert_eq!(full.argmax(), 0, "full stream prefers red");
    assert_eq!(out.argmax(), 1, "combined stream prefers purple");

    // Route two: the combination only sees sub through ln(sub) inside a
    // softmax, so scaling sub leaves the result unchanged; the classic
    // reference vector [0.2615, 0.5293, 0.2092] corresponds to sub odds
    // 0.8 : 0.1 : 0.01, normalized here to a valid distribution.
    let sub_scaled =
        TokenDistribution::new(vec![0.8 / 0.91, 0.1 / 0.91, 0.01 / 0.91]).unwrap();
    let out = qcd_combine(&full, &sub_scaled, &cfg).unwrap();
    let expected = [0.2615, 0.5293, 0.2092];
    for (i, want) in expected.iter().enumerate() {
        assert!((out.get(i) - want).abs() <= 1e-3, "entry {i}: {}", out.get(i));
    }
    assert_eq!(out.argmax(), 1, "combined stream prefers purple");

    pass(4, "hand-specified three-token example flips the argmax from red to purple");
}

fn eval_matrix(alphas: &[f64], hints: &[bool]) -> EvalMatrix {
    EvalMatrix {
        include_base: true,
        alphas: alphas.to_vec(),
        hints: hints.to_vec(),
        instructions: vec![TemplateName::TdIns],
    }
}

fn report_for(
    reports: &[qcd_core::evalkit::EvalReport],
    mode: DecodeMode,
    alpha: f64,
    hint: bool,
) -> &qcd_core::evalkit::EvalReport {
    reports
        .iter()
        .find(|r| {
            let c = r.config.as_ref().unwrap();
            c.mode == mode && c.alpha == alpha && c.hint == hint
        })
        .unwrap()
}

#[test]
fn criterion_05_end_to_end_toy_correction() {
    let started = Instant::now();
    let tasks = load_tasks(fixture("cobsat-mini.tasks")).unwrap();
    assert_eq!(tasks.len(), 20);
    let lm = TableLm::load(fixture("apple-task.tablelm")).unwrap();
    let reports = run_eval(
        &tasks,
        &lm,
        &eval_matrix(&[0.5], &[false]),
        &EvalOptions::default(),
    )
    .unwrap();
    let base = report_for(&reports, DecodeMode::Base, 0.0, false);
    let qcd = report_for(&reports, DecodeMode::Qcd, 0.5, false);
    assert!(qcd.accuracy > base.accuracy, "{} vs {}", qcd.accuracy, base.accuracy);

    let params = FixtureParams::plain();
    let oracle_base = oracle::accuracy(&tasks, OracleMode::Base, 0.0, false, params);
    let oracle_qcd = oracle::accuracy(&tasks, OracleMode::Qcd, 0.5, false, params);
    assert_eq!(base.accuracy, oracle_base);
    assert_eq!(qcd.accuracy, oracle_qcd);
    assert!(started.elapsed() < Duration::from_secs(5));
    pass(
        5,
        "qcd(0.5) beats base on the toy fixture and both match the brute-force oracle exactly",
    );
}

#[test]
fn criterion_06_hint_mechanism() {
    let tasks = load_tasks(fixture("cobsat-mini.tasks")).unwrap();
    let opts = EvalOptions::default();

    // Hint-sensitive model: hint-on accuracy never drops below hint-off,
    // and every cell equals the oracle.
    let hint_lm = TableLm::load(fixture("apple-task-hint.tablelm")).unwrap();
    let reports = run_eval(&tasks, &hint_lm, &eval_matrix(&[0.5], &[false, true]), &opts).unwrap();
    let params = FixtureParams::hint_sensitive();
    for (mode, alpha, omode) in [
        (DecodeMode::Base, 0.0, OracleMode::Base),
        (DecodeMode::Qcd, 0.5, OracleMode::Qcd),
    ] {
        let off = report_for(&reports, mode, alpha, false);
        let on = report_for(&reports, mode, alpha, true);
        assert!(on.accuracy >= off.accuracy);
        assert_eq!(off.accuracy, oracle::accuracy(&tasks, omode, alpha, false, params));
        assert_eq!(on.accuracy, oracle::accuracy(&tasks, omode, alpha, true, params));
    }

    // Hint-insensitive model: hint-on decodes token-for-token like hint-off.
    let plain_lm = TableLm::load(fixture("apple-task.tablelm")).unwrap();
    for task in &tasks {
        for mode in [DecodeMode::Base, DecodeMode::Qcd] {
            let cell_off = CellSpec { mode, alpha: 0.5, hint: false, instruction: TemplateName::TdIns };
            let cell_on = CellSpec { hint: true, ..cell_off.clone() };
            let off = decode_task(task, &plain_lm, &cell_off, &opts).unwrap();
            let on = decode_task(task, &plain_lm, &cell_on, &opts).unwrap();
            assert_eq!(off.output, on.output, "task {}", task.id);
            assert_eq!(off.records, on.records, "task {}", task.id);
        }
    }
    pass(6, "compliance gain makes hint-on >= hint-off (oracle-exact); zero gain is a no-op");
}

#[test]
fn criterion_07_compliance_truth_table() {
    let lexicon_obj: Vec<String> = ["apple", "hat", "cup", "book", "leaf"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let lexicon_attr: Vec<String> = ["purple", "red", "green", "wooden", "glass"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let make_task = |id: &str, ctx_objs: &[&str], ctx_attrs: &[&str]| TaskInstance {
        id: id.to_string(),
        context_pairs: vec![("img".into(), "ctx".into())],
        query: "purple".into(),
        truth_object: "apple".into(),
        truth_attribute: "purple".into(),
        object_lexicon: lexicon_obj.clone(),
        attribute_lexicon: lexicon_attr.clone(),
        context_objects: ctx_objs.iter().map(|s| s.to_string()).collect(),
        context_attributes: ctx_attrs.iter().map(|s| s.to_string()).collect(),
        shot: 1,
    };
    let make_pred = |id: &str, object: &str, attribute: &str| Prediction {
        task_id: id.to_string(),
        object: object.to_string(),
        attribute: attribute.to_string(),
        raw_text: String::new(),
    };

    // Twelve hand-enumerated cases, three per class:
    // (condition-1 only, condition-2 only, both, neither).
    let cases: Vec<(TaskInstance, Prediction, usize)> = vec![
        // Condition (1) only: attribute right, object copied from context.
        (make_task("c1a", &["hat", "cup"], &[]), make_pred("c1a", "hat", "purple"), 1),
        (make_task("c1b", &["cup"], &["red"]), make_pred("c1b", "cup", "purple"), 1),
        (make_task("c1c", &["apple"], &["red"]), make_pred("c1c", "apple", "purple"), 1),
        // Condition (2) only: object right, attribute copied from context.
        (make_task("c2a", &[], &["red"]), make_pred("c2a", "apple", "red"), 1),
        (make_task("c2b", &["hat"], &["green"]), make_pred("c2b", "apple", "green"), 1),
        (make_task("c2c", &["hat"], &["purple", "red"]), make_pred("c2c", "apple", "purple"), 1),
        // Both conditions; still counted once.
        (make_task("bo1", &["apple"], &["purple"]), make_pred("bo1", "apple", "purple"), 1),
        (make_task("bo2", &["apple", "hat"], &["purple", "red"]), make_pred("bo2", "apple", "purple"), 1),
        (make_task("bo3", &["apple"], &["purple", "green"]), make_pred("bo3", "apple", "purple"), 1),
        // Neither condition.
        (make_task("ne1", &["hat"], &["red"]), make_pred("ne1", "book", "wooden"), 0),
        (make_task("ne2", &["hat"], &["red"]), make_pred("ne2", "apple", "wooden"), 0),
        (make_task("ne3", &["hat"], &["red"]), make_pred("ne3", "cup", "red"), 0),
    ];
    assert_eq!(cases.len(), 12);

    let mut expected_total = 0usize;
    for (task, pred, expected) in &cases {
        let got = count_compliance_errors(
            std::slice::from_ref(task),
            std::slice::from_ref(pred),
        );
        assert_eq!(got, *expected, "case {}", task.id);
        expected_total += expected;
    }
    let (tasks, preds): (Vec<_>, Vec<_>) =
        cases.into_iter().map(|(t, p, _)| (t, p)).unzip();
    assert_eq!(count_compliance_errors(&tasks, &preds), expected_total);
    assert_eq!(expected_total, 9);
    pass(7, "compliance error count reproduces the 12-case truth table exactly");
}

#[test]
fn criterion_08_golden_prompts() {
    let hi = InstructionTemplate::builtin(TemplateName::Hi);
    let expected_hi = "I give you several words and pictures. First, please analyse what the \
next picture is. Then give me a detailed diffusion prompt to describe the next picture. \
Please only provide me the detailed prompt and start the answer with 'Create an image'. \
Note: The last text I provide contains the most important clue about the next picture. \
Focus mainly on understanding and following the meaning of the final text when creating \
your description.";
    assert_eq!(hi.body, expected_hi);
    assert_eq!(hi.body, format!("{TD_INS_BODY} Note: {CANONICAL_HINT}"));

    let tdpp = InstructionTemplate::builtin(TemplateName::TdInsPlusPlus);
    assert_eq!(tdpp.body, format!("{TD_INS_BODY} Let's think step by step"));
    pass(8, "hint and step-by-step instructions byte-match their golden concatenations");
}

#[test]
fn criterion_09_variant_gate() {
    let embeddings = FixtureEmbeddings::load(fixture("hint-embeddings.tsv")).unwrap();
    let expectations: [(&str, f64); 5] = [
        (CANONICAL_HINT, 1.000),
        (
            "Consider the last text the most decisive guidance; your description should \
             mainly reflect its intent.",
            0.688,
        ),
        (
            "The concluding text is the key signal\u{2014}base your description chiefly on \
             it, giving it precedence over the rest of the context.",
            0.684,
        ),
        (
            "Treat the last text as the decisive guide, and make sure your description is \
             driven mainly by its intent.",
            0.681,
        ),
        (
            "Treat the last text I provide as your primary guide for the next picture. Base \
             your description mainly on this final text, even if earlier words or images \
             suggest something different.",
            0.788,
        ),
    ];
    for (text, want) in expectations {
        let report = check_variant(text, &embeddings, DEFAULT_GATE_THRESHOLD).unwrap();
        assert!(
            (report.similarity - want).abs() <= 1e-3,
            "{want} expected, got {}",
            report.similarity
        );
        assert_eq!(report.passes_gate, want >= DEFAULT_GATE_THRESHOLD, "gate for {text:?}");
    }
    pass(9, "shipped embedding fixtures reproduce the variant similarities; only 1.000 passes");
}

fn qcd_binary(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

type EvalArtifacts = (String, Vec<u8>, Vec<(String, Vec<u8>)>);

#[test]
fn criterion_10_eval_determinism() {
    let backend = format!("table:{}", fixture("apple-task.tablelm").display());
    let tasks = fixture("cobsat-mini.tasks").display().to_string();
    let run = |dir: &Path| -> EvalArtifacts {
        let lines = dir.join("report.lines");
        let traces = dir.join("traces");
        let out = qcd_binary(&[
            "eval",
            "--backend",
            &backend,
            "--tasks",
            &tasks,
            "--seed",
            "9",
            "--out",
            lines.to_str().unwrap(),
            "--trace-dir",
            traces.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        (
            String::from_utf8(out.stdout).unwrap(),
            std::fs::read(&lines).unwrap(),
            read_dir_sorted(&traces),
        )
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (stdout_a, lines_a, traces_a) = run(dir_a.path());
    let (stdout_b, lines_b, traces_b) = run(dir_b.path());
    assert_eq!(stdout_a, stdout_b);
    assert_eq!(lines_a, lines_b);
    assert!(!traces_a.is_empty());
    assert_eq!(traces_a, traces_b);
    pass(10, "two identically seeded eval runs emit byte-identical reports and trace files");
}

#[test]
fn criterion_11_alpha_sweep_matches_oracle() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let lines_path = dir.path().join("sweep.lines");
    let out = qcd_binary(&[
        "sweep",
        "--backend",
        &format!("table:{}", fixture("apple-task.tablelm").display()),
        "--tasks",
        &fixture("cobsat-mini.tasks").display().to_string(),
        "--out",
        lines_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let rows = parse_report_lines(&std::fs::read_to_string(&lines_path).unwrap()).unwrap();
    let grid = [0.25, 0.5, 0.75, 1.0];
    assert_eq!(rows.len(), grid.len());

    let tasks = load_tasks(fixture("cobsat-mini.tasks")).unwrap();
    let params = FixtureParams::plain();
    for (row, &alpha) in rows.iter().zip(&grid) {
        assert_eq!(row.alpha, alpha);
        let want = oracle::accuracy(&tasks, OracleMode::Qcd, alpha, false, params);
        assert_eq!(row.accuracy, want, "alpha {alpha}");
    }
    assert!(started.elapsed() < Duration::from_secs(30));
    pass(11, "sweep over the default grid reproduces the oracle's accuracy curve exactly");
}

/// The combined query-token probability grows with the contrast weight on
/// this fixture, and the implementation tracks the oracle's arithmetic.
#[test]
fn query_token_probability_is_monotone_in_alpha() {
    let tasks = load_tasks(fixture("cobsat-mini.tasks")).unwrap();
    let lm = TableLm::load(fixture("apple-task.tablelm")).unwrap();
    let params = FixtureParams::plain();
    let opts = EvalOptions::default();
    for task in tasks.iter().take(5) {
        let mut previous = 0.0f64;
        for alpha in [0.25, 0.5, 0.75, 1.0] {
            let cell = CellSpec {
                mode: DecodeMode::Qcd,
                alpha,
                hint: false,
                instruction: TemplateName::TdIns,
            };
            // Recompute the step-0 combined distribution through the public
            // kernel pieces, pre-truncation.
            let template = InstructionTemplate::builtin(cell.instruction);
            let seq = qcd_core::prompt::build_sequence(
                &template,
                &task.context_pairs,
                &task.query,
                false,
            )
            .unwrap();
            let sub_seq = qcd_core::prompt::drop_query(&seq).unwrap();
            let ctx_full = qcd_core::prompt::render(&seq);
            let ctx_sub = qcd_core::prompt::render(&sub_seq);
            let temp = opts.temperature;
            let to_dist = |ctx: &str| {
                let logits = qcd_core::backend::NextTokenProvider::next_logits(&lm, ctx, &[])
                    .unwrap();
                softmax(&apply_temperature(&logits, temp).unwrap()).unwrap()
            };
            let combined = qcd_combine(
                &to_dist(&ctx_full),
                &to_dist(&ctx_sub),
                &QcdConfig { alpha, space: CombineSpace::Log, temperature: temp, top_p: 0.9 },
            )
            .unwrap();
            let vocab = qcd_core::backend::NextTokenProvider::vocabulary(&lm);
            let qid = vocab.id(&task.query).unwrap();
            let p_query = combined.get(qid);

            let oracle_dist = oracle::attribute_step_combined(&task.query, alpha, false, params);
            let oracle_idx = oracle::ATTRS.iter().position(|a| *a == task.query).unwrap();
            assert!(
                (p_query - oracle_dist[oracle_idx]).abs() < 1e-9,
                "task {} alpha {alpha}",
                task.id
            );
            assert!(p_query >= previous, "task {} alpha {alpha}", task.id);
            previous = p_query;
        }
    }
}

/// Frozen spot check of the purple-query attribute step (precomputed):
/// combined = [purple 0.735040, red 0.253085, ...], post-truncation
/// [purple 0.743873, red 0.256127].
#[test]
fn attribute_step_distribution_spot_check() {
    let tasks = load_tasks(fixture("cobsat-mini.tasks")).unwrap();
    let task = tasks.iter().find(|t| t.query == "purple").unwrap();
    let lm = TableLm::load(fixture("apple-task.tablelm")).unwrap();
    let cell = CellSpec {
        mode: DecodeMode::Qcd,
        alpha: 0.5,
        hint: false,
        instruction: TemplateName::TdIns,
    };
    let trace = decode_task(task, &lm, &cell, &EvalOptions::default()).unwrap();
    let vocab = qcd_core::backend::NextTokenProvider::vocabulary(&lm);
    let step0 = &trace.records[0];
    let purple = vocab.id("purple").unwrap();
    let red = vocab.id("red").unwrap();
    assert!((step0.p_qcd.get(purple) - 0.743873).abs() < 1e-6);
    assert!((step0.p_qcd.get(red) - 0.256127).abs() < 1e-6);
    assert!((step0.p_full.get(purple) - 0.283442).abs() < 1e-6);
    assert!((step0.p_sub.as_ref().unwrap().get(red) - 0.947564).abs() < 1e-6);
    assert_eq!(trace.output, vec!["purple", task.truth_object.as_str(), "<eos>"]);
}
