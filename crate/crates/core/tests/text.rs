use proptest::prelude::*;
use volrep_core::abnormality::AbnormalitySpec;
use volrep_core::report::{parse_report, render_report, TemplateLibrary, Vocabulary, EOS, SOS, MAX_REPORT_WORDS};
use volrep_core::sarle::{
    bundled_corpus, evaluate_corpus, filter_normal, label_report, MedicalVocabulary, RuleTable,
};

fn library() -> TemplateLibrary {
    TemplateLibrary::default_library()
}

proptest! {
    #[test]
    fn rendered_reports_parse_back_and_encode_losslessly(spec_i in 0usize..50, seed in any::<u64>()) {
        let lib = library();
        let vocab = Vocabulary::from_words(lib.words());
        let findings = AbnormalitySpec::all()[spec_i].findings();
        let report = render_report(&findings, &lib, seed).unwrap();
        prop_assert!(report.word_count() <= MAX_REPORT_WORDS);
        prop_assert_eq!(parse_report(&report, &lib).findings, findings);
        let ids = vocab.encode_report(&report.text());
        prop_assert_eq!(ids[0], SOS);
        prop_assert_eq!(*ids.last().unwrap(), EOS);
        prop_assert_eq!(vocab.count_unknown(&report.text()), 0);
        prop_assert_eq!(vocab.decode(&ids).unwrap(), report.text());
    }

    #[test]
    fn text_without_trigger_words_passes_the_filter(words in proptest::collection::vec("[a-z]{3,8}", 1..12)) {
        let rules = RuleTable::default_table();
        let text = format!("{}.", words.join(" "));
        let filtered = filter_normal(&text, &rules);
        // The filter only ever deletes tokens.
        let kept: Vec<&str> = filtered.split_whitespace().collect();
        let orig = format!("{} .", words.join(" "));
        let mut it = orig.split_whitespace();
        for k in kept {
            let k = k.trim_end_matches('.');
            if k.is_empty() { continue; }
            prop_assert!(it.any(|o| o == k), "{} not in order", k);
        }
    }
}

#[test]
fn labeler_is_deterministic_over_the_bundled_corpus() {
    let rules = RuleTable::default_table();
    let vocab = MedicalVocabulary::default_vocabulary();
    let corpus = bundled_corpus();
    assert_eq!(corpus.len(), 25);
    for r in &corpus {
        assert_eq!(label_report(&r.text, &rules, &vocab), label_report(&r.text, &rules, &vocab));
    }
    for label in vocab.label_names() {
        let e = evaluate_corpus(&corpus, label, &rules, &vocab).unwrap();
        assert_eq!(e.confusion.total(), 25);
    }
    assert!(evaluate_corpus(&corpus, "no-such-label", &rules, &vocab).is_err());
}
