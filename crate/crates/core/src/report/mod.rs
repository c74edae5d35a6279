//! Narrative reports for the surrogate tasks.
//!
//! Reports are rendered from a closed template language, which makes them
//! invertible: [`parse_report`] recovers the claimed findings from any
//! sentence produced by the library, generated or not.

mod templates;
mod vocab;

pub use templates::{Slot, TemplateKind, TemplateLibrary, DEFAULT_TEMPLATES};
pub use vocab::{detokenize_words, tokenize_words, TokenId, Vocabulary, EOS, PAD, SOS, UNK};

use serde::{Deserialize, Serialize};

use crate::abnormality::{Findings, Rotation};
use crate::phantom::Lobe;
use crate::{seed, Error, Result};

/// Combined reports stay within this many words.
pub const MAX_REPORT_WORDS: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub sentences: Vec<String>,
}

impl Report {
    pub fn from_text(text: &str) -> Report {
        let words = tokenize_words(text);
        let mut sentences = Vec::new();
        let mut current = Vec::new();
        for w in words {
            let end = w == ".";
            current.push(w);
            if end {
                sentences.push(detokenize_words(&current));
                current.clear();
            }
        }
        if !current.is_empty() {
            sentences.push(detokenize_words(&current));
        }
        Report { sentences }
    }

    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }

    pub fn word_count(&self) -> usize {
        self.sentences.iter().map(|s| count_words(s)).sum()
    }
}

/// Number of word tokens, punctuation excluded.
pub fn count_words(text: &str) -> usize {
    tokenize_words(text).iter().filter(|w| w.chars().any(char::is_alphanumeric)).count()
}

/// One sentence per present finding, in the order mirror, rotation,
/// occlusion. Template choice is uniform and fixed by `seed`.
pub fn render_report(findings: &Findings, lib: &TemplateLibrary, seed: u64) -> Result<Report> {
    let mut rng = seed::rng(seed, &[0x7265_706f]);
    let mut sentences = Vec::new();
    if let Some(mirrored) = findings.mirrored {
        let kind = if mirrored { TemplateKind::MirrorYes } else { TemplateKind::MirrorNo };
        sentences.push(lib.render(kind, &mut rng, &SlotValues::default())?);
    }
    if let Some(rotation) = findings.rotation {
        let kind =
            if rotation == Rotation::Zero { TemplateKind::RotationNone } else { TemplateKind::Rotation };
        let values = SlotValues { rotation: Some(rotation), lobe: None };
        sentences.push(lib.render(kind, &mut rng, &values)?);
    }
    if let Some(lobe) = findings.occluded_lobe {
        let values = SlotValues { rotation: None, lobe: Some(lobe) };
        sentences.push(lib.render(TemplateKind::Occlusion, &mut rng, &values)?);
    }
    if sentences.is_empty() {
        return Err(Error::invalid("cannot render a report without findings"));
    }
    Ok(Report { sentences })
}

#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct SlotValues {
    pub rotation: Option<Rotation>,
    pub lobe: Option<Lobe>,
}

/// What a single sentence claims.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    Mirrored(bool),
    Rotation(Rotation),
    Occlusion(Lobe),
    Unparseable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedReport {
    /// Claims per abnormality; a component claimed inconsistently by two
    /// sentences is dropped.
    pub findings: Findings,
    pub claims: Vec<Claim>,
}

impl ParsedReport {
    pub fn unparseable(&self) -> usize {
        self.claims.iter().filter(|c| **c == Claim::Unparseable).count()
    }
}

pub fn parse_report(report: &Report, lib: &TemplateLibrary) -> ParsedReport {
    let claims: Vec<Claim> = report.sentences.iter().map(|s| lib.parse_sentence(s)).collect();
    let mut findings = Findings::default();
    let (mut m_conflict, mut r_conflict, mut o_conflict) = (false, false, false);
    fn merge<T: PartialEq + Copy>(slot: &mut Option<T>, conflict: &mut bool, v: T) {
        match *slot {
            Some(old) if old != v => *conflict = true,
            _ => *slot = Some(v),
        }
    }
    for c in &claims {
        match *c {
            Claim::Mirrored(m) => merge(&mut findings.mirrored, &mut m_conflict, m),
            Claim::Rotation(r) => merge(&mut findings.rotation, &mut r_conflict, r),
            Claim::Occlusion(l) => merge(&mut findings.occluded_lobe, &mut o_conflict, l),
            Claim::Unparseable => {}
        }
    }
    if m_conflict {
        findings.mirrored = None;
    }
    if r_conflict {
        findings.rotation = None;
    }
    if o_conflict {
        findings.occluded_lobe = None;
    }
    ParsedReport { findings, claims }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abnormality::AbnormalitySpec;

    fn lib() -> TemplateLibrary {
        TemplateLibrary::default_library()
    }

    #[test]
    fn library_meets_coverage() {
        let lib = lib();
        let n = |k| lib.templates_of(k).count();
        assert!(n(TemplateKind::MirrorYes) + n(TemplateKind::MirrorNo) >= 30);
        assert!(n(TemplateKind::Rotation) + n(TemplateKind::RotationNone) >= 30);
        assert!(n(TemplateKind::Occlusion) >= 30);
        assert!(n(TemplateKind::Rotation) >= 30 && n(TemplateKind::MirrorYes) >= 30);
    }

    #[test]
    fn published_example_is_in_the_library() {
        let lib = lib();
        let target = "The image appears to have been affected by a counterclockwise rotation of 45 degrees.";
        let hit = (0..200u64).any(|s| {
            let f = Findings { rotation: Some(Rotation::Pos45), ..Default::default() };
            render_report(&f, &lib, s).unwrap().text() == target
        });
        assert!(hit);
        assert_eq!(lib.parse_sentence(target), Claim::Rotation(Rotation::Pos45));
    }

    #[test]
    fn combined_report_structure() {
        let lib = lib();
        let spec = AbnormalitySpec { mirrored: false, rotation: Rotation::Zero, occluded_lobe: Lobe::LeftLower };
        for seed in 0..50 {
            let r = render_report(&spec.findings(), &lib, seed).unwrap();
            assert_eq!(r.sentences.len(), 3);
            assert!(r.word_count() <= MAX_REPORT_WORDS);
            assert_eq!(lib.parse_sentence(&r.sentences[0]), Claim::Mirrored(false));
            assert_eq!(lib.parse_sentence(&r.sentences[1]), Claim::Rotation(Rotation::Zero));
            assert_eq!(r, render_report(&spec.findings(), &lib, seed).unwrap());
        }
    }

    #[test]
    fn factually_wrong_sentence_parses_to_its_claim() {
        let lib = lib();
        let report = Report::from_text("The image has been rotated by 90 degrees.");
        let parsed = parse_report(&report, &lib);
        assert_eq!(parsed.findings.rotation, Some(Rotation::Pos90));
        assert_ne!(parsed.findings.rotation, Some(Rotation::Neg45));
    }

    #[test]
    fn word_salad_is_unparseable() {
        let lib = lib();
        let report = Report::from_text("lobe degrees image the rotated banana sagittal.");
        let parsed = parse_report(&report, &lib);
        assert_eq!(parsed.claims, vec![Claim::Unparseable]);
        assert_eq!(parsed.findings, Findings::default());
    }

    #[test]
    fn conflicting_claims_are_dropped() {
        let lib = lib();
        let r = Report::from_text("The image is not mirrored. The scan is flipped in the sagittal plane.");
        let parsed = parse_report(&r, &lib);
        assert_eq!(parsed.findings.mirrored, None);
    }

    #[test]
    fn render_parse_identity_over_full_grid() {
        let lib = lib();
        for spec in AbnormalitySpec::all() {
            for sentence in lib.all_renderings(&spec.findings()) {
                let claim = lib.parse_sentence(&sentence);
                let ok = match claim {
                    Claim::Mirrored(m) => m == spec.mirrored,
                    Claim::Rotation(r) => r == spec.rotation,
                    Claim::Occlusion(l) => l == spec.occluded_lobe,
                    Claim::Unparseable => false,
                };
                assert!(ok, "{sentence} -> {claim:?} for {spec:?}");
            }
        }
    }

    #[test]
    fn every_rendering_matches_exactly_one_template() {
        let lib = lib();
        for spec in AbnormalitySpec::all().into_iter().filter(|s| s.occluded_lobe == Lobe::LeftUpper) {
            for sentence in lib.all_renderings(&spec.findings()) {
                assert_eq!(lib.matching_templates(&sentence), 1, "{sentence}");
            }
        }
    }

    #[test]
    fn worst_case_combined_length_fits() {
        let lib = lib();
        let longest = |kinds: &[TemplateKind]| {
            kinds
                .iter()
                .flat_map(|&k| lib.templates_of(k))
                .map(|t| t.max_words())
                .max()
                .unwrap()
        };
        let total = longest(&[TemplateKind::MirrorYes, TemplateKind::MirrorNo])
            + longest(&[TemplateKind::Rotation, TemplateKind::RotationNone])
            + longest(&[TemplateKind::Occlusion]);
        assert!(total <= MAX_REPORT_WORDS, "{total}");
    }

    #[test]
    fn tokenization_examples() {
        let vocab = Vocabulary::from_words(lib().words());
        assert_eq!(vocab.encode_report(""), vec![SOS, EOS]);
        let ids = vocab.encode_report("45 degrees.");
        let words: Vec<&str> = ids[1..3].iter().map(|&i| vocab.word(i).unwrap()).collect();
        assert_eq!((ids[0], words, ids[3], ids[4]), (SOS, vec!["45", "degrees"], vocab.id("."), EOS));
        assert_eq!(vocab.encode("banana"), vec![UNK]);
    }

    #[test]
    fn vocabulary_is_closed_over_rendered_reports() {
        let lib = lib();
        let vocab = Vocabulary::from_words(lib.words());
        for spec in AbnormalitySpec::all() {
            for sentence in lib.all_renderings(&spec.findings()) {
                assert_eq!(vocab.count_unknown(&sentence), 0, "{sentence}");
                let ids = vocab.encode_report(&sentence);
                assert_eq!(vocab.decode(&ids).unwrap(), sentence);
            }
        }
    }

    #[test]
    fn single_task_reports_have_one_sentence() {
        let lib = lib();
        let f = Findings { occluded_lobe: Some(Lobe::RightMiddle), ..Default::default() };
        let r = render_report(&f, &lib, 4).unwrap();
        assert_eq!(r.sentences.len(), 1);
        assert!(r.text().contains("right middle lobe"));
        assert!(render_report(&Findings::default(), &lib, 0).is_err());
    }
}
