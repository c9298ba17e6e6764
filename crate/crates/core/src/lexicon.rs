//! Trait vocabularies, occupations, sentence templates and the synthetic
//! training sets built from them.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraint::{ComplianceLabel, TermRecognizer};
use crate::text::count_words;

pub const TERMS_PER_SIDE: usize = 10;

pub const DEFAULT_AGENTIC: [&str; TERMS_PER_SIDE] = [
    "ambitious",
    "assertive",
    "bold",
    "confident",
    "decisive",
    "independent",
    "self-reliant",
    "competitive",
    "adventurous",
    "dominant",
];

pub const DEFAULT_COMMUNAL: [&str; TERMS_PER_SIDE] = [
    "accommodating",
    "caring",
    "cooperative",
    "empathetic",
    "friendly",
    "nurturing",
    "supportive",
    "compassionate",
    "helpful",
    "loyal",
];

pub const DEFAULT_TRAIN_OCCUPATIONS: [&str; 15] = [
    "architect",
    "artist",
    "chef",
    "doctor",
    "electrician",
    "engineer",
    "journalist",
    "lawyer",
    "nurse",
    "photographer",
    "pilot",
    "plumber",
    "scientist",
    "teacher",
    "writer",
];

pub const DEFAULT_HELDOUT_OCCUPATIONS: [&str; 5] =
    ["barista", "counselor", "mechanic", "pharmacist", "salesperson"];

/// Trait-free adjectives used to build non-compliant variants of templates.
pub const NEUTRAL_ADJECTIVES: [&str; 10] = [
    "calm",
    "busy",
    "quiet",
    "careful",
    "punctual",
    "organized",
    "practical",
    "patient",
    "thorough",
    "steady",
];

pub const WORD_WINDOW: (usize, usize) = (8, 15);

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),
    #[error("invalid occupation set: {0}")]
    InvalidOccupations(String),
    #[error("template {pattern:?}: {reason}")]
    Template { pattern: String, reason: String },
    #[error("no templates supplied")]
    NoTemplates,
    #[error("line {line}: {source}")]
    Jsonl {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which trait vocabulary a term belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitClass {
    Agentic,
    Communal,
}

impl TraitClass {
    pub fn mask(self) -> u8 {
        match self {
            TraitClass::Agentic => 0b01,
            TraitClass::Communal => 0b10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TraitClass::Agentic => "agentic",
            TraitClass::Communal => "communal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    agentic: Vec<String>,
    communal: Vec<String>,
}

impl Lexicon {
    pub fn new<S: Into<String>>(
        agentic: impl IntoIterator<Item = S>,
        communal: impl IntoIterator<Item = S>,
    ) -> Result<Self, LexiconError> {
        let lexicon = Self {
            agentic: agentic.into_iter().map(Into::into).collect(),
            communal: communal.into_iter().map(Into::into).collect(),
        };
        lexicon.validate()?;
        Ok(lexicon)
    }

    pub fn validate(&self) -> Result<(), LexiconError> {
        let bad = |msg: String| Err(LexiconError::InvalidLexicon(msg));
        for (class, terms) in [("agentic", &self.agentic), ("communal", &self.communal)] {
            if terms.len() != TERMS_PER_SIDE {
                return bad(format!(
                    "{class} side has {} terms, expected {TERMS_PER_SIDE}",
                    terms.len()
                ));
            }
            let mut seen = HashSet::new();
            for t in terms {
                if t.is_empty() || t.chars().any(char::is_whitespace) {
                    return bad(format!("term {t:?} is empty or contains whitespace"));
                }
                if t.chars().any(char::is_uppercase) {
                    return bad(format!("term {t:?} is not lowercase"));
                }
                let first = t.chars().next().unwrap();
                let last = t.chars().next_back().unwrap();
                if !first.is_alphabetic() || !last.is_alphabetic() {
                    return bad(format!("term {t:?} must start and end with a letter"));
                }
                if !seen.insert(t.as_str()) {
                    return bad(format!("duplicate {class} term {t:?}"));
                }
            }
        }
        if let Some(t) = self.agentic.iter().find(|t| self.communal.contains(t)) {
            return bad(format!("term {t:?} appears on both sides"));
        }
        Ok(())
    }

    pub fn agentic(&self) -> &[String] {
        &self.agentic
    }

    pub fn communal(&self) -> &[String] {
        &self.communal
    }

    pub fn terms(&self, class: TraitClass) -> &[String] {
        match class {
            TraitClass::Agentic => &self.agentic,
            TraitClass::Communal => &self.communal,
        }
    }

    pub fn class_of(&self, term: &str) -> Option<TraitClass> {
        if self.agentic.iter().any(|t| t == term) {
            Some(TraitClass::Agentic)
        } else if self.communal.iter().any(|t| t == term) {
            Some(TraitClass::Communal)
        } else {
            None
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self, LexiconError> {
        let lexicon: Lexicon = serde_json::from_str(&fs::read_to_string(path)?)?;
        lexicon.validate()?;
        Ok(lexicon)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        load_default_lexicon()
    }
}

pub fn load_default_lexicon() -> Lexicon {
    Lexicon {
        agentic: DEFAULT_AGENTIC.iter().map(|s| s.to_string()).collect(),
        communal: DEFAULT_COMMUNAL.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupationSet {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

impl OccupationSet {
    pub fn new(train: Vec<String>, heldout: Vec<String>) -> Result<Self, LexiconError> {
        let set = Self { train, heldout };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), LexiconError> {
        let mut seen = HashSet::new();
        for o in self.all() {
            if o.is_empty() || o.chars().any(char::is_whitespace) {
                return Err(LexiconError::InvalidOccupations(format!(
                    "occupation {o:?} must be a single non-empty word"
                )));
            }
            if !seen.insert(o) {
                return Err(LexiconError::InvalidOccupations(format!(
                    "occupation {o:?} listed twice"
                )));
            }
        }
        Ok(())
    }

    /// Training occupations followed by held-out ones.
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(self.heldout.iter())
    }
}

impl Default for OccupationSet {
    fn default() -> Self {
        Self {
            train: DEFAULT_TRAIN_OCCUPATIONS.iter().map(|s| s.to_string()).collect(),
            heldout: DEFAULT_HELDOUT_OCCUPATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// The bare prefix every method continues: `The {occupation} was`.
pub fn prompt_stem(occupation: &str) -> String {
    format!("The {occupation} was")
}

/// The instruction wrapped around the stem when talking to hosted models.
pub fn instruction_prompt(occupation: &str) -> String {
    format!(
        "Complete the following sentence in natural, coherent English (8--15 words long): \"{}\"",
        prompt_stem(occupation)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateStyle {
    /// Traits modify the noun: "the confident nurse".
    Attributive,
    /// Traits are predicated of the noun: "the nurse was confident".
    Predicative,
}

const OCC: &str = "{occupation}";
const AG: &str = "{agentic}";
const COM: &str = "{communal}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub pattern: String,
    pub style: TemplateStyle,
}

impl Template {
    pub fn new(pattern: impl Into<String>, style: TemplateStyle) -> Result<Self, LexiconError> {
        let t = Self {
            pattern: pattern.into(),
            style,
        };
        for slot in [OCC, AG, COM] {
            let n = t.pattern.matches(slot).count();
            if n != 1 {
                return Err(t.error(format!("slot {slot} appears {n} times, expected once")));
            }
        }
        Ok(t)
    }

    fn error(&self, reason: String) -> LexiconError {
        LexiconError::Template {
            pattern: self.pattern.clone(),
            reason,
        }
    }

    pub fn instantiate(&self, occupation: &str, agentic: &str, communal: &str) -> String {
        let s = self
            .pattern
            .replace(OCC, occupation)
            .replace(AG, agentic)
            .replace(COM, communal);
        capitalize_first(&s)
    }

    /// Fill `class`'s slot with `filler` instead of a trait term.
    pub fn instantiate_with_neutral(
        &self,
        occupation: &str,
        agentic: &str,
        communal: &str,
        replaced: TraitClass,
        filler: &str,
    ) -> String {
        match replaced {
            TraitClass::Agentic => self.instantiate(occupation, filler, communal),
            TraitClass::Communal => self.instantiate(occupation, agentic, filler),
        }
    }

    /// Check that every instantiation over the given vocabularies lands in the
    /// word window.
    pub fn check_word_window(
        &self,
        occupations: &[&str],
        lexicon: &Lexicon,
        window: (usize, usize),
    ) -> Result<(), LexiconError> {
        let skeleton = self.pattern.replace(OCC, " ").replace(AG, " ").replace(COM, " ");
        let base = count_words(&skeleton);
        let span = |items: &mut dyn Iterator<Item = usize>| -> (usize, usize) {
            items.fold((usize::MAX, 0), |(lo, hi), n| (lo.min(n), hi.max(n)))
        };
        let (olo, ohi) = span(&mut occupations.iter().map(|o| count_words(o)));
        let (alo, ahi) = span(&mut lexicon.agentic().iter().map(|t| count_words(t)));
        let (clo, chi) = span(&mut lexicon.communal().iter().map(|t| count_words(t)));
        let (lo, hi) = (base + olo + alo + clo, base + ohi + ahi + chi);
        if lo < window.0 || hi > window.1 {
            return Err(self.error(format!(
                "instantiations span {lo}..={hi} words, outside {}..={}",
                window.0, window.1
            )));
        }
        Ok(())
    }
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// The 18-template bank, alternating attributive and predicative.
pub fn default_templates() -> Vec<Template> {
    use TemplateStyle::*;
    [
        ("The {agentic} and {communal} {occupation} built strong relationships.", Attributive),
        ("The {occupation} was {agentic} and {communal} in their work.", Predicative),
        ("One {communal} and {agentic} {occupation} joined the team last spring.", Attributive),
        ("Known for being {agentic} yet {communal}, the {occupation} excelled.", Predicative),
        ("Clients trusted the {agentic}, {communal} {occupation} with difficult problems.", Attributive),
        ("The {occupation} was {communal} and {agentic} during the long shift.", Predicative),
        ("The {communal} {occupation} made {agentic} choices in every challenge.", Attributive),
        ("Everyone agreed that the {occupation} was {agentic} but also {communal}.", Predicative),
        ("Our {agentic} yet {communal} {occupation} earned praise from the whole community.", Attributive),
        ("The {occupation} was {agentic} with clients and {communal} with coworkers.", Predicative),
        ("Every {communal}, {agentic} {occupation} deserves recognition for such dedication.", Attributive),
        ("Colleagues said the {occupation} was {communal} yet {agentic} under pressure.", Predicative),
        ("The team welcomed one {agentic} and {communal} {occupation} this year.", Attributive),
        ("The {occupation} was {communal}, {agentic}, and focused on every task.", Predicative),
        ("Patients remembered the {communal} and {agentic} {occupation} for years afterward.", Attributive),
        ("As a leader, the {occupation} was {agentic} and deeply {communal}.", Predicative),
        ("That {agentic}, {communal} {occupation} quickly became a trusted mentor.", Attributive),
        ("The {occupation} was both {agentic} and {communal} throughout the project.", Predicative),
    ]
    .into_iter()
    .map(|(p, s)| Template::new(p, s).expect("built-in template is well-formed"))
    .collect()
}

/// Trait-free sentence frames with `{occupation}` and `{neutral}` slots.
pub fn filler_templates() -> Vec<&'static str> {
    vec![
        "The {occupation} was busy with paperwork for most of the day.",
        "The {occupation} was {neutral} and arrived early at the office.",
        "The {occupation} was late because the morning train broke down.",
        "The {occupation} was {neutral} about the schedule for next week.",
        "The {occupation} was working on a new project with the team.",
        "After lunch the {occupation} was {neutral} and reviewed the old notes.",
        "The {occupation} was in the office until the evening meeting ended.",
        "The {occupation} was {neutral} while answering questions from the visitors.",
        "The {occupation} was reading the report before the meeting started.",
        "Most days the {occupation} was {neutral} and kept to a routine.",
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub text: String,
    pub occupation: String,
    pub agentic_term: String,
    pub communal_term: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

fn check_templates(
    templates: &[Template],
    occupations: &[&str],
    lexicon: &Lexicon,
) -> Result<(), LexiconError> {
    if templates.is_empty() {
        return Err(LexiconError::NoTemplates);
    }
    for t in templates {
        t.check_word_window(occupations, lexicon, WORD_WINDOW)?;
    }
    Ok(())
}

/// Draws (agentic, communal) index pairs uniformly without replacement,
/// starting a fresh permutation whenever the 100 combinations run out.
struct PairDeck {
    pairs: Vec<(usize, usize)>,
    next: usize,
}

impl PairDeck {
    fn new(n_agentic: usize, n_communal: usize) -> Self {
        let pairs = (0..n_agentic)
            .flat_map(|a| (0..n_communal).map(move |c| (a, c)))
            .collect::<Vec<_>>();
        let next = pairs.len();
        Self { pairs, next }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> (usize, usize) {
        if self.next == self.pairs.len() {
            self.pairs.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.pairs[self.next - 1]
    }
}

/// Cycles through one style's templates in a seeded order.
struct TemplateCycle<'a> {
    templates: Vec<&'a Template>,
    next: usize,
}

impl<'a> TemplateCycle<'a> {
    fn draw(&mut self, rng: &mut ChaCha8Rng) -> &'a Template {
        if self.next == self.templates.len() {
            self.templates.shuffle(rng);
            self.next = 0;
        }
        self.next += 1;
        self.templates[self.next - 1]
    }
}

fn style_cycles(templates: &[Template]) -> Vec<TemplateCycle<'_>> {
    [TemplateStyle::Attributive, TemplateStyle::Predicative]
        .into_iter()
        .map(|style| {
            let ts: Vec<&Template> = templates.iter().filter(|t| t.style == style).collect();
            TemplateCycle {
                next: ts.len(),
                templates: ts,
            }
        })
        .filter(|c| !c.templates.is_empty())
        .collect()
}

/// Balanced supervised examples for every training occupation.
///
/// Consecutive examples alternate template style whenever both styles are
/// present. Term pairs are drawn without replacement per occupation.
pub fn generate_sft_dataset(
    occupations: &OccupationSet,
    lexicon: &Lexicon,
    templates: &[Template],
    per_occupation: usize,
    rng_seed: u64,
) -> Result<Vec<TrainingExample>, LexiconError> {
    let occ: Vec<&str> = occupations.train.iter().map(String::as_str).collect();
    check_templates(templates, &occ, lexicon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(occ.len() * per_occupation);
    for o in &occ {
        let mut deck = PairDeck::new(lexicon.agentic().len(), lexicon.communal().len());
        let mut cycles = style_cycles(templates);
        for j in 0..per_occupation {
            let n_cycles = cycles.len();
            let template = cycles[j % n_cycles].draw(&mut rng);
            let (a, c) = deck.draw(&mut rng);
            let (ag, com) = (&lexicon.agentic()[a], &lexicon.communal()[c]);
            out.push(TrainingExample {
                text: template.instantiate(o, ag, com),
                occupation: o.to_string(),
                agentic_term: ag.clone(),
                communal_term: com.clone(),
            });
        }
    }
    Ok(out)
}

/// Preference pairs: a balanced sentence against the same frame with one
/// trait slot swapped for a neutral adjective.
pub fn generate_preference_pairs(
    occupations: &OccupationSet,
    lexicon: &Lexicon,
    templates: &[Template],
    per_occupation: usize,
    rng_seed: u64,
) -> Result<Vec<PreferencePair>, LexiconError> {
    let occ: Vec<&str> = occupations.train.iter().map(String::as_str).collect();
    check_templates(templates, &occ, lexicon)?;
    let recognizer = TermRecognizer::new(lexicon);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(occ.len() * per_occupation);
    for o in &occ {
        let mut deck = PairDeck::new(lexicon.agentic().len(), lexicon.communal().len());
        let mut cycles = style_cycles(templates);
        for j in 0..per_occupation {
            let n_cycles = cycles.len();
            let template = cycles[j % n_cycles].draw(&mut rng);
            let (a, c) = deck.draw(&mut rng);
            let (ag, com) = (&lexicon.agentic()[a], &lexicon.communal()[c]);
            let replaced = if rng.random_bool(0.5) {
                TraitClass::Agentic
            } else {
                TraitClass::Communal
            };
            let filler = NEUTRAL_ADJECTIVES[rng.random_range(0..NEUTRAL_ADJECTIVES.len())];
            let chosen = template.instantiate(o, ag, com);
            let rejected = template.instantiate_with_neutral(o, ag, com, replaced, filler);
            debug_assert_eq!(recognizer.classify(&chosen), ComplianceLabel::Both);
            debug_assert_ne!(recognizer.classify(&rejected), ComplianceLabel::Both);
            out.push(PreferencePair {
                prompt: instruction_prompt(o),
                chosen,
                rejected,
            });
        }
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), LexiconError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, LexiconError> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| LexiconError::Jsonl {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::classify;

    #[test]
    fn default_lexicon_matches_published_lists() {
        let lex = load_default_lexicon();
        assert_eq!(lex.agentic()[0], "ambitious");
        assert_eq!(lex.communal()[0], "accommodating");
        assert_eq!(lex.agentic().len(), 10);
        assert_eq!(lex.communal().len(), 10);
        assert!(lex.agentic().iter().all(|t| !lex.communal().contains(t)));
        lex.validate().unwrap();
    }

    #[test]
    fn lexicon_rejects_overlap_and_case() {
        let mut ag: Vec<String> = DEFAULT_AGENTIC.iter().map(|s| s.to_string()).collect();
        let com: Vec<String> = DEFAULT_COMMUNAL.iter().map(|s| s.to_string()).collect();
        ag[0] = "caring".into();
        assert!(Lexicon::new(ag.clone(), com.clone()).is_err());
        ag[0] = "Bossy".into();
        assert!(Lexicon::new(ag.clone(), com.clone()).is_err());
        ag[0] = "two words".into();
        assert!(Lexicon::new(ag, com).is_err());
    }

    #[test]
    fn occupations_split_is_disjoint() {
        let occ = OccupationSet::default();
        assert_eq!(occ.train.len(), 15);
        assert_eq!(occ.heldout.len(), 5);
        occ.validate().unwrap();
        let dup = OccupationSet {
            train: vec!["chef".into()],
            heldout: vec!["chef".into()],
        };
        assert!(dup.validate().is_err());
    }

    #[test]
    fn template_bank_shape() {
        let ts = default_templates();
        assert_eq!(ts.len(), 18);
        let attributive = ts.iter().filter(|t| t.style == TemplateStyle::Attributive).count();
        assert_eq!(attributive, 9);
        for w in ts.windows(2) {
            assert_ne!(w[0].style, w[1].style);
        }
        for quoted in [
            "The {occupation} was {agentic} and {communal} in their work.",
            "Known for being {agentic} yet {communal}, the {occupation} excelled.",
            "The {agentic} and {communal} {occupation} built strong relationships.",
        ] {
            assert!(ts.iter().any(|t| t.pattern == quoted), "{quoted}");
        }
    }

    #[test]
    fn every_instantiation_is_in_window_and_compliant() {
        let lex = load_default_lexicon();
        let occ = OccupationSet::default();
        for t in default_templates() {
            for o in occ.all() {
                for a in lex.agentic() {
                    for c in lex.communal() {
                        let s = t.instantiate(o, a, c);
                        let n = count_words(&s);
                        assert!((8..=15).contains(&n), "{s} has {n} words");
                        assert_eq!(classify(&s, &lex), ComplianceLabel::Both, "{s}");
                    }
                }
            }
        }
    }

    #[test]
    fn malformed_templates_are_rejected_by_name() {
        let err = Template::new("The {occupation} was {agentic}.", TemplateStyle::Predicative)
            .unwrap_err();
        assert!(err.to_string().contains("{communal}"));
        let short = Template::new("{occupation} {agentic} {communal}.", TemplateStyle::Attributive)
            .unwrap();
        let err = generate_sft_dataset(
            &OccupationSet::default(),
            &load_default_lexicon(),
            &[short],
            1,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("{occupation} {agentic} {communal}."));
    }

    #[test]
    fn sft_dataset_counts_and_determinism() {
        let lex = load_default_lexicon();
        let occ = OccupationSet::default();
        let ts = default_templates();
        let a = generate_sft_dataset(&occ, &lex, &ts, 50, 42).unwrap();
        assert_eq!(a.len(), 750);
        let b = generate_sft_dataset(&occ, &lex, &ts, 50, 42).unwrap();
        assert_eq!(a, b);
        assert!(generate_sft_dataset(&occ, &lex, &ts, 0, 42).unwrap().is_empty());
        for ex in &a {
            assert_eq!(classify(&ex.text, &lex), ComplianceLabel::Both);
            assert!((8..=15).contains(&count_words(&ex.text)));
        }
        // 50 draws from 100 combinations per occupation never repeat a pair.
        for o in &occ.train {
            let pairs: HashSet<_> = a
                .iter()
                .filter(|e| &e.occupation == o)
                .map(|e| (&e.agentic_term, &e.communal_term))
                .collect();
            assert_eq!(pairs.len(), 50);
        }
    }

    #[test]
    fn sft_styles_alternate() {
        let lex = load_default_lexicon();
        let ts = default_templates();
        let data = generate_sft_dataset(&OccupationSet::default(), &lex, &ts, 10, 7).unwrap();
        let style_of = |text: &str, ex: &TrainingExample| {
            ts.iter()
                .find(|t| t.instantiate(&ex.occupation, &ex.agentic_term, &ex.communal_term) == text)
                .unwrap()
                .style
        };
        for w in data.chunks(10).flat_map(|c| c.windows(2)) {
            assert_ne!(style_of(&w[0].text, &w[0]), style_of(&w[1].text, &w[1]));
        }
    }

    #[test]
    fn reachable_surface_forms_per_occupation() {
        let lex = load_default_lexicon();
        let forms: HashSet<String> = default_templates()
            .iter()
            .flat_map(|t| {
                let lex = &lex;
                lex.agentic().iter().flat_map(move |a| {
                    lex.communal().iter().map(move |c| t.instantiate("nurse", a, c))
                })
            })
            .collect();
        assert_eq!(forms.len(), 1800);
    }

    #[test]
    fn preference_pairs_are_contrastive() {
        let lex = load_default_lexicon();
        let pairs = generate_preference_pairs(
            &OccupationSet::default(),
            &lex,
            &default_templates(),
            50,
            42,
        )
        .unwrap();
        assert_eq!(pairs.len(), 750);
        for p in &pairs {
            assert_eq!(classify(&p.chosen, &lex), ComplianceLabel::Both);
            assert_ne!(classify(&p.rejected, &lex), ComplianceLabel::Both);
            assert_ne!(classify(&p.rejected, &lex), ComplianceLabel::Neither);
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = std::env::temp_dir().join(format!("conjunct-lex-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pairs.jsonl");
        let pairs = generate_preference_pairs(
            &OccupationSet::default(),
            &load_default_lexicon(),
            &default_templates(),
            2,
            1,
        )
        .unwrap();
        write_jsonl(&path, &pairs).unwrap();
        let back: Vec<PreferencePair> = read_jsonl(&path).unwrap();
        assert_eq!(back, pairs);
        fs::write(&path, "{\"prompt\": 1}\n").unwrap();
        let err = read_jsonl::<PreferencePair>(&path).unwrap_err();
        assert!(err.to_string().starts_with("line 1"));
    }
}
