//! Rule-based label mining from narrative reports.
//!
//! Phase one removes (sub)sentences describing normal findings using a table
//! of main phrases and operations; phase two looks up trigger phrases of a
//! medical vocabulary in what remains.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::metrics::ConfusionMatrix;
use crate::report::tokenize_words;
use crate::{Error, Result};

pub const DEFAULT_RULES: &str = include_str!("../data/sarle_rules.txt");
pub const DEFAULT_VOCABULARY: &str = include_str!("../data/sarle_vocabulary.txt");
pub const BUNDLED_CORPUS: &str = include_str!("../data/sarle_corpus.jsonl");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    /// Delete the main phrase and everything after it up to (not including)
    /// a stop phrase or the end of the sentence.
    DeleteFollowingUntilStop,
    DeleteSentence,
    /// Delete everything from the previous stop phrase (or sentence start)
    /// through the main phrase.
    DeletePreceding,
}

impl Operation {
    fn parse(s: &str) -> Option<Operation> {
        match s {
            "delete_following_until_stop" => Some(Operation::DeleteFollowingUntilStop),
            "delete_sentence" => Some(Operation::DeleteSentence),
            "delete_preceding" => Some(Operation::DeletePreceding),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rule {
    pub main: Vec<String>,
    pub operation: Operation,
    pub stops: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

fn config_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<RuleTable> {
        let mut rules = Vec::new();
        for (lineno, line) in config_lines(text) {
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Config(format!("rule line {lineno}: expected `phrase | operation | stops`")));
            }
            let main = tokenize_words(fields[0]);
            if main.is_empty() {
                return Err(Error::Config(format!("rule line {lineno}: empty main phrase")));
            }
            let operation = Operation::parse(fields[1])
                .ok_or_else(|| Error::Config(format!("rule line {lineno}: unknown operation {:?}", fields[1])))?;
            let stops = fields
                .get(2)
                .map(|s| s.split(',').map(tokenize_words).filter(|p| !p.is_empty()).collect())
                .unwrap_or_default();
            rules.push(Rule { main, operation, stops });
        }
        if rules.is_empty() {
            return Err(Error::Config("rule table is empty".into()));
        }
        Ok(RuleTable { rules })
    }

    pub fn from_path(path: &Path) -> Result<RuleTable> {
        RuleTable::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn default_table() -> RuleTable {
        RuleTable::parse(DEFAULT_RULES).expect("bundled rules are valid")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Longest rule whose main phrase starts at `tokens[i]`.
    fn match_at(&self, tokens: &[String], i: usize) -> Option<&Rule> {
        self.rules
            .iter()
            .filter(|r| tokens[i..].starts_with(&r.main))
            .max_by_key(|r| r.main.len())
    }
}

/// Trigger phrases per label. Phrase sets of different labels may overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MedicalVocabulary {
    labels: BTreeMap<String, Vec<Vec<String>>>,
}

impl MedicalVocabulary {
    pub fn parse(text: &str) -> Result<MedicalVocabulary> {
        let mut labels: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for (lineno, line) in config_lines(text) {
            let (label, phrase) = line
                .split_once('|')
                .ok_or_else(|| Error::Config(format!("vocabulary line {lineno}: expected `label | phrase`")))?;
            let phrase = tokenize_words(phrase);
            if phrase.is_empty() || label.trim().is_empty() {
                return Err(Error::Config(format!("vocabulary line {lineno}: empty label or phrase")));
            }
            labels.entry(label.trim().to_string()).or_default().push(phrase);
        }
        if labels.is_empty() {
            return Err(Error::Config("medical vocabulary is empty".into()));
        }
        Ok(MedicalVocabulary { labels })
    }

    pub fn from_path(path: &Path) -> Result<MedicalVocabulary> {
        MedicalVocabulary::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn default_vocabulary() -> MedicalVocabulary {
        MedicalVocabulary::parse(DEFAULT_VOCABULARY).expect("bundled vocabulary is valid")
    }

    pub fn label_names(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }
}

fn join_tokens(tokens: &[&String]) -> String {
    let mut out = String::new();
    for t in tokens {
        if !out.is_empty() && t.chars().any(char::is_alphanumeric) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

fn ends_with_stop(tokens: &[String], end: usize, stops: &[Vec<String>]) -> bool {
    stops.iter().any(|s| end >= s.len() && tokens[end - s.len()..end] == s[..])
}

/// Removes normal findings sentence by sentence. The output is lowercase and
/// keeps the surviving tokens in order; sentences left without any word are
/// dropped.
pub fn filter_normal(text: &str, rules: &RuleTable) -> String {
    let tokens = tokenize_words(text);
    let mut sentences: Vec<&[String]> = Vec::new();
    let mut start = 0;
    for (i, t) in tokens.iter().enumerate() {
        if t == "." {
            sentences.push(&tokens[start..=i]);
            start = i + 1;
        }
    }
    if start < tokens.len() {
        sentences.push(&tokens[start..]);
    }

    let mut kept = Vec::new();
    for sentence in sentences {
        let n = sentence.len();
        let mut deleted = vec![false; n];
        let mut i = 0;
        while i < n {
            let Some(rule) = (!deleted[i]).then(|| rules.match_at(sentence, i)).flatten() else {
                i += 1;
                continue;
            };
            let end = i + rule.main.len();
            match rule.operation {
                Operation::DeleteSentence => {
                    deleted.fill(true);
                    break;
                }
                Operation::DeleteFollowingUntilStop => {
                    let mut j = end;
                    while j < n && !rule.stops.iter().any(|s| sentence[j..].starts_with(s)) {
                        j += 1;
                    }
                    deleted[i..j].fill(true);
                    i = j;
                }
                Operation::DeletePreceding => {
                    let from = (0..i).rev().find(|&k| ends_with_stop(sentence, k + 1, &rule.stops)).map_or(0, |k| k + 1);
                    deleted[from..end].fill(true);
                    i = end;
                }
            }
        }
        let survivors: Vec<&String> =
            sentence.iter().zip(&deleted).filter(|(_, &d)| !d).map(|(t, _)| t).collect();
        if survivors.iter().any(|t| t.chars().any(char::is_alphanumeric)) {
            kept.push(join_tokens(&survivors));
        }
    }
    kept.join(" ")
}

/// 1 for every label with a trigger phrase in `text`, 0 otherwise.
pub fn extract_labels(text: &str, vocab: &MedicalVocabulary) -> BTreeMap<String, u8> {
    let tokens = tokenize_words(text);
    vocab
        .labels
        .iter()
        .map(|(label, phrases)| {
            let hit = phrases.iter().any(|p| tokens.windows(p.len()).any(|w| w == &p[..]));
            (label.clone(), u8::from(hit))
        })
        .collect()
}

pub fn label_report(text: &str, rules: &RuleTable, vocab: &MedicalVocabulary) -> BTreeMap<String, u8> {
    extract_labels(&filter_normal(text, rules), vocab)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub id: String,
    pub text: String,
    pub labels: BTreeMap<String, u8>,
}

/// The 25 hand-labelled English reports shipped with the crate.
pub fn bundled_corpus() -> Vec<LabeledReport> {
    BUNDLED_CORPUS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled corpus is valid JSON lines"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelerEvaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn evaluate_labeler(predicted: &[u8], truth: &[u8]) -> Result<LabelerEvaluation> {
    let p: Vec<bool> = predicted.iter().map(|&v| v == 1).collect();
    let t: Vec<bool> = truth.iter().map(|&v| v == 1).collect();
    let confusion = ConfusionMatrix::from_predictions(&p, &t)?;
    Ok(LabelerEvaluation {
        confusion,
        accuracy: confusion.accuracy(),
        sensitivity: confusion.recall(),
        specificity: confusion.specificity(),
    })
}

/// Runs the labeler over `reports` and scores `label` against the hand labels.
pub fn evaluate_corpus(
    reports: &[LabeledReport],
    label: &str,
    rules: &RuleTable,
    vocab: &MedicalVocabulary,
) -> Result<LabelerEvaluation> {
    let mut predicted = Vec::with_capacity(reports.len());
    let mut truth = Vec::with_capacity(reports.len());
    for r in reports {
        let labels = label_report(&r.text, rules, vocab);
        predicted.push(*labels.get(label).ok_or_else(|| Error::invalid(format!("unknown label {label}")))?);
        truth.push(
            *r.labels
                .get(label)
                .ok_or_else(|| Error::invalid(format!("report {} has no {label} label", r.id)))?,
        );
    }
    evaluate_labeler(&predicted, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rules() -> RuleTable {
        RuleTable::default_table()
    }

    #[test]
    fn negated_sentence_disappears() {
        assert_eq!(filter_normal("no sign of pleural effusion.", &rules()), "");
    }

    #[test]
    fn deletion_stops_at_however() {
        assert_eq!(
            filter_normal("no sign of consolidation however a nodule is visible.", &rules()),
            "however a nodule is visible."
        );
    }

    #[test]
    fn text_without_main_words_is_unchanged() {
        let t = "a nodule is visible in the left lower lobe.";
        assert_eq!(filter_normal(t, &rules()), t);
        assert_eq!(filter_normal("", &rules()), "");
    }

    #[test]
    fn delete_preceding_and_sentence() {
        assert_eq!(filter_normal("The nodule has resolved. Effusion.", &rules()), "effusion.");
        assert_eq!(filter_normal("Lungs unremarkable with a nodule. Effusion.", &rules()), "effusion.");
        assert_eq!(
            filter_normal("Effusion, however the nodule is not seen.", &rules()),
            "effusion, however."
        );
    }

    #[test]
    fn label_extraction_examples() {
        let vocab = MedicalVocabulary::default_vocabulary();
        let l = extract_labels("a nodule is visible", &vocab);
        assert_eq!(l["pulmonary_nodule"], 1);
        let l = extract_labels("pleural effusion on the left", &vocab);
        assert_eq!((l["pleural_effusion"], l["pulmonary_nodule"]), (1, 0));
        assert!(extract_labels("", &vocab).values().all(|&v| v == 0));
    }

    #[test]
    fn bundled_corpus_accuracy() {
        let corpus = bundled_corpus();
        assert_eq!(corpus.len(), 25);
        let eval = evaluate_corpus(&corpus, "pulmonary_nodule", &rules(), &MedicalVocabulary::default_vocabulary())
            .unwrap();
        assert_eq!(eval.confusion.total(), 25);
        assert!(eval.accuracy.unwrap() >= 0.9, "{eval:?}");
    }

    #[test]
    fn nine_two_zero_fourteen_matrix() {
        let mut predicted = vec![1u8; 9];
        let mut truth = vec![1u8; 9];
        predicted.extend([1, 1]);
        truth.extend([0, 0]);
        predicted.extend([0; 14]);
        truth.extend([0; 14]);
        let e = evaluate_labeler(&predicted, &truth).unwrap();
        assert_eq!(e.confusion, ConfusionMatrix::new(9, 2, 0, 14));
        assert_eq!((e.accuracy, e.sensitivity, e.specificity), (Some(0.92), Some(1.0), Some(0.875)));
    }

    #[test]
    fn config_errors() {
        assert!(RuleTable::parse("no | explode | .").is_err());
        assert!(RuleTable::parse("# only comments").is_err());
        assert!(MedicalVocabulary::parse("nodule").is_err());
    }
}
