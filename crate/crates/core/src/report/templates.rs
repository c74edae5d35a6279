use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;

use super::vocab::{detokenize_words, tokenize_words};
use super::{Claim, SlotValues};
use crate::abnormality::{Findings, Rotation};
use crate::phantom::Lobe;
use crate::{Error, Result};

pub const DEFAULT_TEMPLATES: &str = include_str!("../../data/templates.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateKind {
    MirrorYes,
    MirrorNo,
    Rotation,
    RotationNone,
    Occlusion,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 5] = [
        TemplateKind::MirrorYes,
        TemplateKind::MirrorNo,
        TemplateKind::Rotation,
        TemplateKind::RotationNone,
        TemplateKind::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateKind::MirrorYes => "mirror_yes",
            TemplateKind::MirrorNo => "mirror_no",
            TemplateKind::Rotation => "rotation",
            TemplateKind::RotationNone => "rotation_none",
            TemplateKind::Occlusion => "occlusion",
        }
    }

    pub fn parse(s: &str) -> Option<TemplateKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Slot {
    Direction,
    Degrees,
    Angle,
    Lobe,
}

impl Slot {
    fn parse(s: &str) -> Option<Slot> {
        match s {
            "direction" => Some(Slot::Direction),
            "degrees" => Some(Slot::Degrees),
            "angle" => Some(Slot::Angle),
            "lobe" => Some(Slot::Lobe),
            _ => None,
        }
    }

    /// Every filler this slot accepts, tokenized, with the value it denotes.
    fn fillers(self) -> Vec<(Vec<String>, Binding)> {
        let toks = |s: &str| tokenize_words(s);
        match self {
            Slot::Direction => vec![
                (toks("clockwise"), Binding::Sign(-1)),
                (toks("counterclockwise"), Binding::Sign(1)),
            ],
            Slot::Degrees => {
                vec![(toks("45"), Binding::Magnitude(45)), (toks("90"), Binding::Magnitude(90))]
            }
            Slot::Angle => [Rotation::Neg90, Rotation::Neg45, Rotation::Pos45, Rotation::Pos90]
                .into_iter()
                .map(|r| (toks(&angle_words(r)), Binding::Angle(r)))
                .collect(),
            Slot::Lobe => Lobe::ALL.into_iter().map(|l| (toks(l.name()), Binding::Lobe(l))).collect(),
        }
    }
}

fn angle_words(r: Rotation) -> String {
    let d = r.degrees();
    if d < 0 {
        format!("minus {}", -d)
    } else {
        d.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binding {
    Sign(i32),
    Magnitude(i32),
    Angle(Rotation),
    Lobe(Lobe),
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Part {
    Word(String),
    Slot(Slot),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    kind: TemplateKind,
    source: String,
    parts: Vec<Part>,
}

impl Template {
    fn parse(kind: TemplateKind, source: &str) -> Result<Template> {
        let mut parts = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find('[') {
            let close = rest[open..]
                .find(']')
                .map(|c| open + c)
                .ok_or_else(|| Error::Config(format!("unclosed slot in template: {source}")))?;
            parts.extend(tokenize_words(&rest[..open]).into_iter().map(Part::Word));
            let name = &rest[open + 1..close];
            let slot = Slot::parse(name)
                .ok_or_else(|| Error::Config(format!("unknown slot [{name}] in template: {source}")))?;
            parts.push(Part::Slot(slot));
            rest = &rest[close + 1..];
        }
        parts.extend(tokenize_words(rest).into_iter().map(Part::Word));

        let slots: Vec<Slot> =
            parts.iter().filter_map(|p| if let Part::Slot(s) = p { Some(*s) } else { None }).collect();
        let has = |s| slots.contains(&s);
        let valid = match kind {
            TemplateKind::MirrorYes | TemplateKind::MirrorNo | TemplateKind::RotationNone => {
                slots.is_empty()
            }
            TemplateKind::Rotation => {
                (slots == [Slot::Angle])
                    || (slots.len() == 2 && has(Slot::Direction) && has(Slot::Degrees))
            }
            TemplateKind::Occlusion => slots == [Slot::Lobe],
        };
        if !valid {
            return Err(Error::Config(format!(
                "template slots do not fit kind {}: {source}",
                kind.name()
            )));
        }
        Ok(Template { kind, source: source.to_string(), parts })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Word count of the longest possible rendering.
    pub fn max_words(&self) -> usize {
        self.parts
            .iter()
            .map(|p| match p {
                Part::Word(w) => usize::from(w.chars().any(char::is_alphanumeric)),
                Part::Slot(s) => s.fillers().iter().map(|(t, _)| t.len()).max().unwrap_or(0),
            })
            .sum()
    }

    fn render(&self, values: &SlotValues) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        for part in &self.parts {
            match part {
                Part::Word(w) => words.push(w.clone()),
                Part::Slot(slot) => {
                    let text = match (slot, values.rotation, values.lobe) {
                        (Slot::Direction, Some(r), _) if r != Rotation::Zero => {
                            if r.degrees() < 0 { "clockwise" } else { "counterclockwise" }.to_string()
                        }
                        (Slot::Degrees, Some(r), _) if r != Rotation::Zero => r.degrees().abs().to_string(),
                        (Slot::Angle, Some(r), _) if r != Rotation::Zero => angle_words(r),
                        (Slot::Lobe, _, Some(l)) => l.name().to_string(),
                        _ => {
                            return Err(Error::invalid(format!(
                                "no value for slot {slot:?} in template: {}",
                                self.source
                            )))
                        }
                    };
                    words.extend(tokenize_words(&text));
                }
            }
        }
        Ok(detokenize_words(&words))
    }

    /// Matches the whole token sequence, returning the slot bindings of the
    /// first successful assignment.
    fn match_tokens(&self, tokens: &[String]) -> Option<Vec<Binding>> {
        fn go(parts: &[Part], tokens: &[String], acc: &mut Vec<Binding>) -> bool {
            let Some((head, tail)) = parts.split_first() else {
                return tokens.is_empty();
            };
            match head {
                Part::Word(w) => tokens.first() == Some(w) && go(tail, &tokens[1..], acc),
                Part::Slot(slot) => {
                    for (filler, binding) in slot.fillers() {
                        if tokens.starts_with(&filler) {
                            acc.push(binding);
                            if go(tail, &tokens[filler.len()..], acc) {
                                return true;
                            }
                            acc.pop();
                        }
                    }
                    false
                }
            }
        }
        let mut acc = Vec::new();
        go(&self.parts, tokens, &mut acc).then_some(acc)
    }

    fn claim(&self, bindings: &[Binding]) -> Option<Claim> {
        match self.kind {
            TemplateKind::MirrorYes => Some(Claim::Mirrored(true)),
            TemplateKind::MirrorNo => Some(Claim::Mirrored(false)),
            TemplateKind::RotationNone => Some(Claim::Rotation(Rotation::Zero)),
            TemplateKind::Rotation => {
                let (mut sign, mut mag) = (None, None);
                for b in bindings {
                    match *b {
                        Binding::Angle(r) => return Some(Claim::Rotation(r)),
                        Binding::Sign(s) => sign = Some(s),
                        Binding::Magnitude(m) => mag = Some(m),
                        Binding::Lobe(_) => {}
                    }
                }
                Rotation::from_degrees(sign? * mag?).ok().map(Claim::Rotation)
            }
            TemplateKind::Occlusion => bindings.iter().find_map(|b| match b {
                Binding::Lobe(l) => Some(Claim::Occlusion(*l)),
                _ => None,
            }),
        }
    }
}

/// Parsed template library, grouped by kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateLibrary {
    templates: Vec<Template>,
}

impl TemplateLibrary {
    /// Parses `kind | sentence` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<TemplateLibrary> {
        let mut templates = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (kind, sentence) = line
                .split_once('|')
                .ok_or_else(|| Error::Config(format!("template line {}: missing '|'", lineno + 1)))?;
            let kind = TemplateKind::parse(kind.trim()).ok_or_else(|| {
                Error::Config(format!("template line {}: unknown kind {:?}", lineno + 1, kind.trim()))
            })?;
            templates.push(Template::parse(kind, sentence.trim())?);
        }
        for kind in TemplateKind::ALL {
            if !templates.iter().any(|t| t.kind == kind) {
                return Err(Error::Config(format!("no templates of kind {}", kind.name())));
            }
        }
        Ok(TemplateLibrary { templates })
    }

    pub fn from_path(path: &Path) -> Result<TemplateLibrary> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TemplateLibrary::parse(&text)
    }

    pub fn default_library() -> TemplateLibrary {
        TemplateLibrary::parse(DEFAULT_TEMPLATES).expect("bundled templates are valid")
    }

    pub fn templates_of(&self, kind: TemplateKind) -> impl Iterator<Item = &Template> {
        self.templates.iter().filter(move |t| t.kind == kind)
    }

    pub(crate) fn render<R: Rng>(&self, kind: TemplateKind, rng: &mut R, values: &SlotValues) -> Result<String> {
        let options: Vec<&Template> = self.templates_of(kind).collect();
        options[rng.random_range(0..options.len())].render(values)
    }

    /// Claim made by the first template matching `sentence` in full.
    pub fn parse_sentence(&self, sentence: &str) -> Claim {
        let tokens = tokenize_words(sentence);
        self.templates
            .iter()
            .find_map(|t| t.match_tokens(&tokens).and_then(|b| t.claim(&b)))
            .unwrap_or(Claim::Unparseable)
    }

    pub fn matching_templates(&self, sentence: &str) -> usize {
        let tokens = tokenize_words(sentence);
        self.templates.iter().filter(|t| t.match_tokens(&tokens).is_some()).count()
    }

    /// Every sentence the library can produce for the given findings.
    pub fn all_renderings(&self, findings: &Findings) -> Vec<String> {
        let mut out = Vec::new();
        let mut push_kind = |kind, values: SlotValues| {
            for t in self.templates_of(kind) {
                out.push(t.render(&values).expect("kind and values agree"));
            }
        };
        if let Some(m) = findings.mirrored {
            let kind = if m { TemplateKind::MirrorYes } else { TemplateKind::MirrorNo };
            push_kind(kind, SlotValues::default());
        }
        if let Some(r) = findings.rotation {
            let kind = if r == Rotation::Zero { TemplateKind::RotationNone } else { TemplateKind::Rotation };
            push_kind(kind, SlotValues { rotation: Some(r), lobe: None });
        }
        if let Some(l) = findings.occluded_lobe {
            push_kind(TemplateKind::Occlusion, SlotValues { rotation: None, lobe: Some(l) });
        }
        out
    }

    /// Every word the library can emit, including punctuation tokens.
    pub fn words(&self) -> BTreeSet<String> {
        let mut words = BTreeSet::new();
        for t in &self.templates {
            for p in &t.parts {
                match p {
                    Part::Word(w) => {
                        words.insert(w.clone());
                    }
                    Part::Slot(s) => {
                        for (filler, _) in s.fillers() {
                            words.extend(filler);
                        }
                    }
                }
            }
        }
        words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lines() {
        let base = "mirror_yes | A.\nmirror_no | B.\nrotation | R [angle].\nrotation_none | N.\nocclusion | O [lobe].\n";
        assert!(TemplateLibrary::parse(base).is_ok());
        assert!(TemplateLibrary::parse(&format!("{base}occlusion | O [colour].")).is_err());
        assert!(TemplateLibrary::parse(&format!("{base}weird | O.")).is_err());
        assert!(TemplateLibrary::parse(&format!("{base}mirror_yes no bar")).is_err());
        assert!(TemplateLibrary::parse(&format!("{base}occlusion | O.")).is_err());
        assert!(TemplateLibrary::parse("mirror_yes | A.").is_err());
    }

    #[test]
    fn multiword_fillers_backtrack() {
        let lib = TemplateLibrary::default_library();
        assert_eq!(
            lib.parse_sentence("The scan is rotated by minus 45 degrees."),
            Claim::Rotation(Rotation::Neg45)
        );
        assert_eq!(
            lib.parse_sentence("the scan shows an occluded right middle lobe ."),
            Claim::Occlusion(Lobe::RightMiddle)
        );
    }
}
