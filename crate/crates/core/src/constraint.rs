//! Trait-term recognition and the AND/OR acceptance automaton.
//!
//! Terms are matched over a normalized character stream rather than per
//! token, so a term split across several tokens is still recognized. The
//! stream is lowercased and every non-word character is followed by a
//! synthetic boundary symbol; each pattern is the boundary symbol followed by
//! the normalized term. A pattern hit therefore always starts on a word
//! boundary. The right boundary is checked one character later: a hit is
//! *pending* until a non-word character commits it or a word character
//! cancels it.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{Lexicon, TraitClass};
use crate::text::is_word_char;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConstraintError {
    #[error("step called on a terminated constraint state")]
    Terminated,
    #[error("invalid constraint spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    And,
    Or,
}

impl ConstraintMode {
    fn satisfied(self, mask: u8) -> bool {
        match self {
            ConstraintMode::And => mask == BOTH,
            ConstraintMode::Or => mask != 0,
        }
    }
}

const BOTH: u8 = 0b11;

fn default_min_words() -> usize {
    8
}
fn default_max_words() -> usize {
    15
}
fn default_terminal() -> String {
    ".".to_string()
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub mode: ConstraintMode,
    #[serde(default = "default_min_words")]
    pub min_words: usize,
    #[serde(default = "default_max_words")]
    pub max_words: usize,
    #[serde(default = "default_terminal")]
    pub terminal: String,
    /// Whether the words of the prompt stem count toward the length window.
    #[serde(default = "default_true")]
    pub count_prompt_words: bool,
}

impl ConstraintSpec {
    pub fn new(mode: ConstraintMode) -> Self {
        Self {
            mode,
            min_words: default_min_words(),
            max_words: default_max_words(),
            terminal: default_terminal(),
            count_prompt_words: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConstraintError> {
        if self.min_words < 1 || self.min_words > self.max_words {
            return Err(ConstraintError::InvalidSpec(format!(
                "need 1 <= min_words <= max_words, got {}..{}",
                self.min_words, self.max_words
            )));
        }
        if self.terminal.is_empty()
            || self
                .terminal
                .chars()
                .any(|c| is_word_char(c) || c.is_whitespace())
        {
            return Err(ConstraintError::InvalidSpec(format!(
                "terminal {:?} must be non-empty punctuation",
                self.terminal
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceLabel {
    Both,
    AgenticOnly,
    CommunalOnly,
    Neither,
}

impl ComplianceLabel {
    pub fn from_mask(mask: u8) -> Self {
        match mask & BOTH {
            0b11 => ComplianceLabel::Both,
            0b01 => ComplianceLabel::AgenticOnly,
            0b10 => ComplianceLabel::CommunalOnly,
            _ => ComplianceLabel::Neither,
        }
    }

    pub fn is_or_compliant(self) -> bool {
        self != ComplianceLabel::Neither
    }
}

// Symbol classes of the matcher alphabet.
const BOUNDARY: usize = 0;
const OTHER_LETTER: usize = 1;
const OTHER_MARK: usize = 2;
const FIXED_CLASSES: usize = 3;

/// One recognized term occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMatch {
    /// Index into the lexicon's agentic list followed by its communal list.
    pub term: usize,
    pub class: TraitClass,
}

/// Aho-Corasick automaton over the normalized stream, compiled to a dense
/// transition table.
#[derive(Debug, Clone)]
pub struct TermRecognizer {
    classes: HashMap<char, usize>,
    class_chars: Vec<Option<char>>,
    n_classes: usize,
    delta: Vec<u32>,
    out_mask: Vec<u8>,
    out_terms: Vec<Vec<u16>>,
    term_classes: Vec<TraitClass>,
    start: u32,
}

fn normalized_pattern(term: &str) -> Vec<Sym> {
    let mut out = vec![Sym::Boundary];
    for c in term.chars() {
        if is_word_char(c) {
            out.extend(c.to_lowercase().map(Sym::Char));
        } else {
            out.push(Sym::Char(c));
            out.push(Sym::Boundary);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sym {
    Boundary,
    Char(char),
}

impl TermRecognizer {
    pub fn new(lexicon: &Lexicon) -> Self {
        let mut terms: Vec<(&str, TraitClass)> = Vec::new();
        terms.extend(lexicon.agentic().iter().map(|t| (t.as_str(), TraitClass::Agentic)));
        terms.extend(lexicon.communal().iter().map(|t| (t.as_str(), TraitClass::Communal)));
        let patterns: Vec<Vec<Sym>> = terms.iter().map(|(t, _)| normalized_pattern(t)).collect();

        let mut alphabet: Vec<char> = patterns
            .iter()
            .flatten()
            .filter_map(|s| match s {
                Sym::Char(c) => Some(*c),
                Sym::Boundary => None,
            })
            .collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let classes: HashMap<char, usize> = alphabet
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i + FIXED_CLASSES))
            .collect();
        let n_classes = FIXED_CLASSES + alphabet.len();
        let mut class_chars = vec![None; FIXED_CLASSES];
        class_chars.extend(alphabet.iter().copied().map(Some));
        let class_of = |s: Sym| match s {
            Sym::Boundary => BOUNDARY,
            Sym::Char(c) => classes[&c],
        };

        // Trie.
        let mut children: Vec<BTreeMap<usize, u32>> = vec![BTreeMap::new()];
        let mut own: Vec<Vec<u16>> = vec![Vec::new()];
        for (pid, pat) in patterns.iter().enumerate() {
            let mut s = 0usize;
            for &sym in pat {
                let cls = class_of(sym);
                s = match children[s].get(&cls) {
                    Some(&n) => n as usize,
                    None => {
                        let n = children.len();
                        children.push(BTreeMap::new());
                        own.push(Vec::new());
                        children[s].insert(cls, n as u32);
                        n
                    }
                };
            }
            own[s].push(pid as u16);
        }

        // Failure links in BFS order, filling the dense table as we go.
        let n_states = children.len();
        let mut delta = vec![0u32; n_states * n_classes];
        let mut fail = vec![0usize; n_states];
        let mut out_terms = own;
        let mut queue = VecDeque::new();
        for cls in 0..n_classes {
            if let Some(&n) = children[0].get(&cls) {
                delta[cls] = n;
                queue.push_back(n as usize);
            }
        }
        while let Some(s) = queue.pop_front() {
            let f = fail[s];
            let inherited = out_terms[f].clone();
            out_terms[s].extend(inherited);
            for cls in 0..n_classes {
                match children[s].get(&cls) {
                    Some(&n) => {
                        fail[n as usize] = delta[f * n_classes + cls] as usize;
                        delta[s * n_classes + cls] = n;
                        queue.push_back(n as usize);
                    }
                    None => delta[s * n_classes + cls] = delta[f * n_classes + cls],
                }
            }
        }
        let term_classes: Vec<TraitClass> = terms.iter().map(|(_, c)| *c).collect();
        let out_mask = out_terms
            .iter()
            .map(|ts| ts.iter().fold(0u8, |m, &t| m | term_classes[t as usize].mask()))
            .collect();
        let start = delta[BOUNDARY];
        Self {
            classes,
            class_chars,
            n_classes,
            delta,
            out_mask,
            out_terms,
            term_classes,
            start,
        }
    }

    pub fn n_states(&self) -> usize {
        self.out_mask.len()
    }

    #[inline]
    fn next(&self, state: u32, cls: usize) -> u32 {
        self.delta[state as usize * self.n_classes + cls]
    }

    fn letter_class(&self, c: char) -> usize {
        *self.classes.get(&c).unwrap_or(&OTHER_LETTER)
    }

    fn mark_class(&self, c: char) -> usize {
        *self.classes.get(&c).unwrap_or(&OTHER_MARK)
    }

    /// Advance over one raw character. Returns the new state and whether the
    /// character was a word character.
    #[inline]
    fn advance(&self, mut state: u32, c: char) -> (u32, bool) {
        if is_word_char(c) {
            for lc in c.to_lowercase() {
                state = self.next(state, self.letter_class(lc));
            }
            (state, true)
        } else {
            state = self.next(state, self.mark_class(c));
            (self.next(state, BOUNDARY), false)
        }
    }

    /// Every whole-word, case-insensitive term occurrence in `text`.
    pub fn find_terms(&self, text: &str) -> Vec<TermMatch> {
        let mut out = Vec::new();
        let mut state = self.start;
        let mut pending: &[u16] = &[];
        for c in text.chars() {
            let (next, word) = self.advance(state, c);
            if !word {
                out.extend(pending.iter().map(|&t| self.term_match(t)));
            }
            state = next;
            pending = if word { &self.out_terms[state as usize] } else { &[] };
        }
        out.extend(pending.iter().map(|&t| self.term_match(t)));
        out
    }

    fn term_match(&self, t: u16) -> TermMatch {
        TermMatch {
            term: t as usize,
            class: self.term_classes[t as usize],
        }
    }

    /// Bitmask of trait classes present in `text` (bit 0 agentic, bit 1 communal).
    pub fn class_mask(&self, text: &str) -> u8 {
        self.find_terms(text).iter().fold(0, |m, t| m | t.class.mask())
    }

    pub fn classify(&self, text: &str) -> ComplianceLabel {
        ComplianceLabel::from_mask(self.class_mask(text))
    }
}

/// Post-hoc compliance label of a finished sentence.
pub fn classify(text: &str, lexicon: &Lexicon) -> ComplianceLabel {
    TermRecognizer::new(lexicon).classify(text)
}

/// Per-hypothesis automaton state. Small and `Copy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConstraintState {
    matcher: u32,
    committed: u8,
    pending: u8,
    word_count: u32,
    in_word: bool,
    terminal_progress: u16,
    terminated: bool,
}

impl ConstraintState {
    /// Classes observed so far, treating the end of the stream as a boundary.
    pub fn flags(&self) -> u8 {
        self.committed | self.pending
    }

    /// Classes confirmed by a following boundary character.
    pub fn committed_flags(&self) -> u8 {
        self.committed
    }

    pub fn seen_agentic(&self) -> bool {
        self.flags() & TraitClass::Agentic.mask() != 0
    }

    pub fn seen_communal(&self) -> bool {
        self.flags() & TraitClass::Communal.mask() != 0
    }

    /// Words started so far. A word counts from its first character.
    pub fn word_count(&self) -> usize {
        self.word_count as usize
    }

    pub fn terminated(&self) -> bool {
        self.terminated
    }

    pub fn matcher_state(&self) -> u32 {
        self.matcher
    }
}

const UNREACHABLE: u32 = u32::MAX;

/// Compiled constraint: recognizer, termination matcher and a table of the
/// fewest additional words needed to reach acceptance from every matcher
/// configuration.
#[derive(Debug, Clone)]
pub struct ConstraintAutomaton {
    spec: ConstraintSpec,
    recognizer: TermRecognizer,
    terminal: Vec<char>,
    terminal_fail: Vec<u16>,
    words_needed: Vec<u32>,
}

#[inline]
fn node_index(matcher: u32, committed: u8, pending: u8, in_word: bool) -> usize {
    (((matcher as usize * 4 + committed as usize) * 4 + pending as usize) * 2) + in_word as usize
}

impl ConstraintAutomaton {
    pub fn compile(spec: &ConstraintSpec, lexicon: &Lexicon) -> Result<Self, ConstraintError> {
        spec.validate()?;
        let terminal: Vec<char> = spec.terminal.chars().collect();
        let clash = lexicon
            .agentic()
            .iter()
            .chain(lexicon.communal())
            .find(|t| t.chars().any(|c| terminal.contains(&c)));
        if let Some(t) = clash {
            return Err(ConstraintError::InvalidSpec(format!(
                "term {t:?} contains a terminal character"
            )));
        }
        let recognizer = TermRecognizer::new(lexicon);
        let terminal_fail = kmp_failure(&terminal);
        let words_needed = words_needed_table(&recognizer, spec.mode);
        Ok(Self {
            spec: spec.clone(),
            recognizer,
            terminal,
            terminal_fail,
            words_needed,
        })
    }

    pub fn spec(&self) -> &ConstraintSpec {
        &self.spec
    }

    pub fn recognizer(&self) -> &TermRecognizer {
        &self.recognizer
    }

    pub fn start(&self) -> ConstraintState {
        ConstraintState {
            matcher: self.recognizer.start,
            committed: 0,
            pending: 0,
            word_count: 0,
            in_word: false,
            terminal_progress: 0,
            terminated: false,
        }
    }

    /// State after reading a prompt stem, honoring `count_prompt_words`.
    pub fn start_with_prompt(&self, prompt: &str) -> Result<ConstraintState, ConstraintError> {
        let mut state = self.step(&self.start(), prompt)?;
        if !self.spec.count_prompt_words {
            state.word_count = 0;
        }
        Ok(state)
    }

    /// Advance over the characters of one token.
    pub fn step(
        &self,
        state: &ConstraintState,
        token_text: &str,
    ) -> Result<ConstraintState, ConstraintError> {
        if state.terminated {
            return Err(ConstraintError::Terminated);
        }
        let mut s = *state;
        for c in token_text.chars() {
            if s.terminated {
                if c.is_whitespace() {
                    continue;
                }
                return Err(ConstraintError::Terminated);
            }
            let (matcher, word) = self.recognizer.advance(s.matcher, c);
            if word {
                if !s.in_word {
                    s.word_count += 1;
                }
                s.pending = self.recognizer.out_mask[matcher as usize];
            } else {
                s.committed |= s.pending;
                s.pending = 0;
            }
            s.matcher = matcher;
            s.in_word = word;
            s.terminal_progress = self.advance_terminal(s.terminal_progress, c);
            if s.terminal_progress as usize == self.terminal.len() {
                s.terminated = true;
            }
        }
        Ok(s)
    }

    fn advance_terminal(&self, mut k: u16, c: char) -> u16 {
        if k as usize == self.terminal.len() {
            k = self.terminal_fail[k as usize - 1];
        }
        while k > 0 && self.terminal[k as usize] != c {
            k = self.terminal_fail[k as usize - 1];
        }
        if self.terminal[k as usize] == c {
            k + 1
        } else {
            0
        }
    }

    /// Run the whole text from the start state, ignoring the length window.
    pub fn run(&self, text: &str) -> Result<ConstraintState, ConstraintError> {
        self.step(&self.start(), text)
    }

    pub fn is_accepting(&self, state: &ConstraintState) -> bool {
        state.terminated
            && (self.spec.min_words..=self.spec.max_words).contains(&state.word_count())
            && self.spec.mode.satisfied(state.committed)
    }

    /// Whether any character continuation of `state` can still be accepted.
    pub fn is_feasible(&self, state: &ConstraintState) -> bool {
        if state.terminated {
            return self.is_accepting(state);
        }
        let need = self.words_needed[node_index(
            state.matcher,
            state.committed,
            state.pending,
            state.in_word,
        )];
        need != UNREACHABLE && state.word_count() + need as usize <= self.spec.max_words
    }

    /// Fewest additional words any accepted continuation needs, if one exists.
    pub fn words_needed(&self, state: &ConstraintState) -> Option<usize> {
        let need = self.words_needed
            [node_index(state.matcher, state.committed, state.pending, state.in_word)];
        (need != UNREACHABLE).then_some(need as usize)
    }

    /// Accepts the complete sentence `text`.
    pub fn accepts(&self, text: &str) -> bool {
        match self.run(text) {
            Ok(state) => self.is_accepting(&state),
            Err(_) => false,
        }
    }

    /// The reachable matcher-by-flags graph in Graphviz DOT. Nodes are
    /// labeled `matcher/flags/pending/in-word` with the fewest words still
    /// needed; double circles can terminate into acceptance.
    pub fn to_dot(&self) -> String {
        let r = &self.recognizer;
        let start = node_index(r.start, 0, 0, false);
        let mut seen = BTreeMap::new();
        let mut order = vec![start];
        seen.insert(start, ());
        let mut edges: BTreeMap<(usize, usize), Vec<String>> = BTreeMap::new();
        let mut i = 0;
        while i < order.len() {
            let node = order[i];
            i += 1;
            for (cls, next, _) in node_successors(r, node) {
                let label = match r.class_chars[cls] {
                    Some(c) => c.escape_default().to_string(),
                    None if cls == OTHER_LETTER => "letter".into(),
                    None => "mark".into(),
                };
                edges.entry((node, next)).or_default().push(label);
                if seen.insert(next, ()).is_none() {
                    order.push(next);
                }
            }
        }
        let mut out = String::from("digraph constraint {\n  rankdir=LR;\n");
        for &node in seen.keys() {
            let (m, committed, pending, in_word) = decode_node(node);
            let need = self.words_needed[node];
            let shape = if self.spec.mode.satisfied(committed | pending) {
                "doublecircle"
            } else {
                "circle"
            };
            let need = if need == UNREACHABLE {
                "inf".to_string()
            } else {
                need.to_string()
            };
            let _ = writeln!(
                out,
                "  n{node} [shape={shape}, label=\"{m}/{committed:02b}/{pending:02b}/{}\\nneed {need}\"];",
                in_word as u8
            );
        }
        for ((a, b), labels) in &edges {
            let _ = writeln!(out, "  n{a} -> n{b} [label=\"{}\"];", labels.join(" "));
        }
        out.push_str("}\n");
        out
    }
}

fn kmp_failure(pattern: &[char]) -> Vec<u16> {
    let mut fail = vec![0u16; pattern.len()];
    let mut k = 0usize;
    for i in 1..pattern.len() {
        while k > 0 && pattern[i] != pattern[k] {
            k = fail[k - 1] as usize;
        }
        if pattern[i] == pattern[k] {
            k += 1;
        }
        fail[i] = k as u16;
    }
    fail
}

fn decode_node(node: usize) -> (u32, u8, u8, bool) {
    let in_word = node % 2 == 1;
    let rest = node / 2;
    let pending = (rest % 4) as u8;
    let rest = rest / 4;
    let committed = (rest % 4) as u8;
    ((rest / 4) as u32, committed, pending, in_word)
}

/// Successors of a product node over every symbol class: `(class, node, cost)`
/// where cost is 1 when the symbol starts a new word.
fn node_successors(r: &TermRecognizer, node: usize) -> Vec<(usize, usize, u32)> {
    let (m, committed, pending, in_word) = decode_node(node);
    let mut out = Vec::with_capacity(r.n_classes);
    for cls in 1..r.n_classes {
        let is_letter = match r.class_chars[cls] {
            Some(c) => is_word_char(c),
            None => cls == OTHER_LETTER,
        };
        if is_letter {
            let next = r.next(m, cls);
            let cost = u32::from(!in_word);
            out.push((
                cls,
                node_index(next, committed, r.out_mask[next as usize], true),
                cost,
            ));
        } else {
            let next = r.next(r.next(m, cls), BOUNDARY);
            out.push((cls, node_index(next, committed | pending, 0, false), 0));
        }
    }
    out
}

/// Reverse 0-1 BFS from every node that can terminate into acceptance.
fn words_needed_table(r: &TermRecognizer, mode: ConstraintMode) -> Vec<u32> {
    let n_nodes = r.n_states() * 32;
    let mut reverse: Vec<Vec<(u32, u8)>> = vec![Vec::new(); n_nodes];
    for node in 0..n_nodes {
        let (m, _, pending, in_word) = decode_node(node);
        // Pending hits only exist inside a word, at states with that output.
        if pending != 0 && (!in_word || r.out_mask[m as usize] != pending) {
            continue;
        }
        for (_, next, cost) in node_successors(r, node) {
            reverse[next].push((node as u32, cost as u8));
        }
    }
    let mut dist = vec![UNREACHABLE; n_nodes];
    let mut queue = VecDeque::new();
    for (node, d) in dist.iter_mut().enumerate() {
        let (_, committed, pending, _) = decode_node(node);
        if mode.satisfied(committed | pending) {
            *d = 0;
            queue.push_back(node);
        }
    }
    while let Some(node) = queue.pop_front() {
        let d = dist[node];
        for &(prev, cost) in &reverse[node] {
            let nd = d + cost as u32;
            if nd < dist[prev as usize] {
                dist[prev as usize] = nd;
                if cost == 0 {
                    queue.push_front(prev as usize);
                } else {
                    queue.push_back(prev as usize);
                }
            }
        }
    }
    dist
}
