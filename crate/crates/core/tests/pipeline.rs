//! Cross-module checks on the bundled models and generated datasets.

use std::collections::BTreeSet;

use conjunct_core::constraint::{classify, ComplianceLabel, ConstraintAutomaton, ConstraintMode, ConstraintSpec};
use conjunct_core::decoder::{decode_samples, prompt_tokens, render, DecodeConfig};
use conjunct_core::inlp::{run_inlp, train_classifier, LowRankHead, DEFAULT_L2_C};
use conjunct_core::lexicon::{
    default_templates, generate_preference_pairs, generate_sft_dataset, read_jsonl, write_jsonl, Lexicon,
    LexiconError, OccupationSet, PreferencePair, TrainingExample,
};
use conjunct_core::lm::{perplexity, train_bundled, BundledLmConfig, LanguageModel, NGramModel};
use conjunct_core::metrics::{compliance, diversity};
use conjunct_core::preference::{build_benchmark, train_sft, BenchmarkConfig, SftConfig, TrainingRun};
use conjunct_core::text::{count_words, tokenize};

fn bundled(seed: u64) -> NGramModel {
    let occ: Vec<String> = OccupationSet::default().all().cloned().collect();
    train_bundled(&Lexicon::default(), &occ, &default_templates(), &BundledLmConfig::default(), seed).unwrap()
}

#[test]
fn and_decoding_on_heldout_occupations() {
    let lex = Lexicon::default();
    let model = bundled(123);
    let spec = ConstraintSpec::new(ConstraintMode::And);
    let automaton = ConstraintAutomaton::compile(&spec, &lex).unwrap();
    let config = DecodeConfig {
        samples_per_prompt: 10,
        ..DecodeConfig::default()
    };
    let mut texts = Vec::new();
    for occ in OccupationSet::default().heldout.iter().take(2) {
        let prompt = prompt_tokens(&model, occ).unwrap();
        let out = decode_samples(&model, &automaton, &lex, &prompt, &config).unwrap();
        assert_eq!(out.hypotheses.len(), 10);
        for h in &out.hypotheses {
            let t = render(&model, &prompt, &h.tokens);
            assert!(t.starts_with(&format!("The {occ} was")));
            texts.push(t);
        }
    }
    let report = compliance(&texts, &lex).unwrap();
    assert_eq!(report.and_pct, 100.0);
    for t in &texts {
        assert!((spec.min_words..=spec.max_words).contains(&count_words(t)), "{t}");
        assert!(perplexity(&model, &tokenize(t)).unwrap().is_finite());
    }
    // Distinct sentences, and more than one trait pairing among them.
    assert_eq!(texts.iter().collect::<BTreeSet<_>>().len(), texts.len());
    assert!(diversity(&texts, &lex).unique_pairs > 1);
}

#[test]
fn projection_removes_linear_term_information() {
    let lex = Lexicon::default();
    let head = LowRankHead::fit(&bundled(42), Some(32));
    let data = head.term_embeddings(&lex);
    assert_eq!(data.len(), 20);
    let before = train_classifier(&data, DEFAULT_L2_C).unwrap().accuracy(&data);
    let state = run_inlp(&data, DEFAULT_L2_C, 20).unwrap();
    assert!(state.iterations >= 1);
    let after = *state.accuracy_history.last().unwrap();
    assert!(before > 0.9, "separable before projection: {before}");
    assert!(after <= 0.55, "chance after projection: {after}");
    let projected = head.with_projection(&state).unwrap();
    // Still a normalized model over the same vocabulary.
    let prompt = prompt_tokens(&projected, "nurse").unwrap();
    let total: f64 = projected.next_log_probs(&prompt).iter().map(|l| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn datasets_roundtrip_through_jsonl() {
    let lex = Lexicon::default();
    let occ = OccupationSet::default();
    let ts = default_templates();
    let sft = generate_sft_dataset(&occ, &lex, &ts, 50, 42).unwrap();
    let pairs = generate_preference_pairs(&occ, &lex, &ts, 50, 42).unwrap();
    assert_eq!((sft.len(), pairs.len()), (750, 750));
    assert!(sft.iter().all(|e| classify(&e.text, &lex) == ComplianceLabel::Both));
    assert!(pairs.iter().all(|p| classify(&p.rejected, &lex) != ComplianceLabel::Both));
    // No held-out occupation leaks into training data.
    for h in &occ.heldout {
        assert!(sft.iter().all(|e| &e.occupation != h));
        assert!(pairs.iter().all(|p| !p.chosen.contains(h.as_str())));
    }

    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("sft.jsonl"), dir.path().join("pairs.jsonl"));
    write_jsonl(&a, &sft).unwrap();
    write_jsonl(&b, &pairs).unwrap();
    assert_eq!(read_jsonl::<TrainingExample>(&a).unwrap(), sft);
    assert_eq!(read_jsonl::<PreferencePair>(&b).unwrap(), pairs);

    std::fs::write(&a, "{\"text\": \"x\"}\nnot json\n").unwrap();
    assert!(matches!(read_jsonl::<TrainingExample>(&a), Err(LexiconError::Jsonl { line: 1, .. })));
}

#[test]
fn short_sft_run_lowers_loss_and_serializes() {
    let lex = Lexicon::default();
    let occ = OccupationSet::default();
    let config = BenchmarkConfig {
        base_corpus: 300,
        base_epochs: 30,
        per_occupation: 10,
        ..BenchmarkConfig::default()
    };
    let bench = build_benchmark(&lex, &occ, &default_templates(), &config, 5).unwrap();
    let cfg = SftConfig {
        epochs: 60,
        ..SftConfig::default()
    };
    let run = train_sft(&bench.base, &bench.sft_data, &cfg).unwrap();
    assert_eq!(run.loss_history.len(), 60);
    for w in run.loss_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "loss rose: {} -> {}", w[0], w[1]);
    }
    assert!(run.final_loss < run.loss_history[0]);
    let back = TrainingRun::from_json(&run.to_json()).unwrap();
    assert_eq!(back, run);
}
