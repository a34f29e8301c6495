//! Shared domain types and text normalization.
//!
//! Stack Overflow bodies arrive as HTML; everything downstream (BM-25,
//! embeddings, prompts) works on the plain text produced by [`strip_html`]
//! and the tokens produced by [`tokenize`].

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("query text is empty")]
    EmptyQuery,
    #[error("keyword list is empty")]
    EmptyKeywords,
    #[error("invalid question record {id}: {reason}")]
    InvalidQuestion { id: u64, reason: &'static str },
    #[error("invalid answer record {id}: {reason}")]
    InvalidAnswer { id: u64, reason: &'static str },
}

/// A developer question.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserQuery(String);

impl UserQuery {
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(DomainError::EmptyQuery);
        }
        Ok(Self(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UserQuery {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<UserQuery> for String {
    fn from(q: UserQuery) -> Self {
        q.0
    }
}

impl fmt::Display for UserQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ordered, duplicate-free list of search queries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordList {
    keywords: Vec<String>,
}

impl KeywordList {
    /// Builds a list from raw entries: whitespace is normalized, empty entries
    /// are dropped and duplicates keep their first position.
    pub fn from_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = Self::default();
        list.extend(entries);
        list
    }

    pub fn extend<I, S>(&mut self, entries: I)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for entry in entries {
            let normalized = entry.as_ref().split_whitespace().collect::<Vec<_>>().join(" ");
            if !normalized.is_empty() && !self.keywords.contains(&normalized) {
                self.keywords.push(normalized);
            }
        }
    }

    pub fn as_slice(&self) -> &[String] {
        &self.keywords
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.keywords.iter()
    }
}

impl<'a> IntoIterator for &'a KeywordList {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.keywords.iter()
    }
}

/// A Stack Overflow question as returned by the search endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SOQuestion {
    pub id: u64,
    pub link: String,
    pub title: String,
    /// HTML body.
    pub body: String,
    /// Unix seconds.
    pub creation_date: i64,
    pub accepted_answer_id: Option<u64>,
}

impl SOQuestion {
    pub fn validate(&self) -> Result<(), DomainError> {
        let err = |reason| DomainError::InvalidQuestion { id: self.id, reason };
        if self.id == 0 {
            return Err(err("id must be positive"));
        }
        if self.link.trim().is_empty() {
            return Err(err("link is empty"));
        }
        if self.creation_date <= 0 {
            return Err(err("creation date must be positive"));
        }
        if self.accepted_answer_id == Some(0) {
            return Err(err("accepted answer id must be positive"));
        }
        Ok(())
    }

    pub fn has_accepted_answer(&self) -> bool {
        self.accepted_answer_id.is_some()
    }

    pub fn link_ref(&self) -> LinkRef {
        LinkRef::new(self.title.clone(), self.link.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SOAnswer {
    pub id: u64,
    pub question_id: u64,
    /// HTML body.
    pub body: String,
    pub score: i64,
    pub creation_date: i64,
    pub is_accepted: bool,
}

impl SOAnswer {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.id == 0 {
            return Err(DomainError::InvalidAnswer { id: self.id, reason: "id must be positive" });
        }
        if self.question_id == 0 {
            return Err(DomainError::InvalidAnswer {
                id: self.id,
                reason: "question id must be positive",
            });
        }
        Ok(())
    }
}

/// A `(title, url)` pair as it appears in the answer's link sections.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinkRef {
    pub title: String,
    pub url: String,
}

impl LinkRef {
    pub fn new(title: impl Into<String>, url: impl Into<String>) -> Self {
        Self { title: title.into(), url: url.into() }
    }
}

impl fmt::Display for LinkRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "- [{}] {}", self.title, self.url)
    }
}

/// LLM-assigned usefulness of one piece of evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Unscored,
    NotUseful,
    /// 1 (barely useful) through 5 (really useful).
    Score(u8),
}

impl Relevance {
    /// Returns `None` outside 1..=5.
    pub fn from_score(score: u8) -> Option<Self> {
        (1..=5).contains(&score).then_some(Self::Score(score))
    }

    fn rank(self) -> i16 {
        match self {
            Self::Unscored => -2,
            Self::NotUseful => -1,
            Self::Score(s) => s as i16,
        }
    }
}

impl PartialOrd for Relevance {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Relevance {
    fn cmp(&self, other: &Self) -> Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for Relevance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Unscored => f.write_str("unscored"),
            Self::NotUseful => f.write_str("not useful"),
            Self::Score(s) => write!(f, "{s}"),
        }
    }
}

/// One question-plus-answers document retrieved as candidate evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub question_id: u64,
    pub title: String,
    pub link: String,
    pub document_text: String,
    pub cosine_score: f64,
    pub relevance: Relevance,
}

impl EvidenceItem {
    pub fn link_ref(&self) -> LinkRef {
        LinkRef::new(self.title.clone(), self.link.clone())
    }
}

/// The evidence handed to the sufficiency check and the answer generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub items: Vec<EvidenceItem>,
    pub unanswered_links: Vec<LinkRef>,
    pub combined_text: String,
}

impl EvidenceBundle {
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
}

/// A link the model cited that was not among the links it was given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerWarning {
    HallucinatedLink { url: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedAnswer {
    pub text: String,
    pub used_links: Vec<LinkRef>,
    pub unanswered_links: Vec<LinkRef>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<AnswerWarning>,
}

// Element names recognised as markup. Angle-bracket text outside this set
// (`List<String>`, `<T>`) is kept as text.
const INLINE_ELEMENTS: &[&str] = &[
    "a", "abbr", "b", "bdi", "bdo", "big", "cite", "code", "data", "del", "dfn", "em", "font",
    "i", "ins", "kbd", "label", "mark", "q", "s", "samp", "small", "span", "strike", "strong",
    "sub", "sup", "time", "tt", "u", "var", "wbr",
];

const BLOCK_ELEMENTS: &[&str] = &[
    "address", "article", "aside", "blockquote", "body", "br", "caption", "col", "colgroup",
    "dd", "details", "div", "dl", "dt", "figcaption", "figure", "footer", "form", "h1", "h2",
    "h3", "h4", "h5", "h6", "head", "header", "hr", "html", "iframe", "img", "input", "li",
    "link", "main", "meta", "nav", "ol", "p", "pre", "script", "section", "source", "style",
    "summary", "table", "tbody", "td", "tfoot", "th", "thead", "title", "tr", "ul", "video",
];

#[derive(Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Inline,
    Block,
}

fn element_kind(name: &str) -> Option<TagKind> {
    let lower = name.to_ascii_lowercase();
    if INLINE_ELEMENTS.contains(&lower.as_str()) {
        Some(TagKind::Inline)
    } else if BLOCK_ELEMENTS.contains(&lower.as_str()) {
        Some(TagKind::Block)
    } else {
        None
    }
}

/// If `rest` starts with a markup construct, returns its byte length and kind.
fn match_markup(rest: &str) -> Option<(usize, TagKind)> {
    let bytes = rest.as_bytes();
    debug_assert_eq!(bytes.first(), Some(&b'<'));
    if let Some(comment) = rest.strip_prefix("<!--") {
        let end = comment.find("-->")?;
        return Some((4 + end + 3, TagKind::Inline));
    }
    if rest.len() > 2 && bytes[1] == b'!' && bytes[2].is_ascii_alphabetic() {
        let end = rest.find('>')?;
        return Some((end + 1, TagKind::Inline));
    }
    let mut i = 1;
    if bytes.get(i) == Some(&b'/') {
        i += 1;
    }
    let name_start = i;
    if !bytes.get(i).is_some_and(u8::is_ascii_alphabetic) {
        return None;
    }
    while bytes.get(i).is_some_and(u8::is_ascii_alphanumeric) {
        i += 1;
    }
    let kind = element_kind(&rest[name_start..i])?;
    match bytes.get(i)? {
        b'>' => Some((i + 1, kind)),
        b'/' if bytes.get(i + 1) == Some(&b'>') => Some((i + 2, kind)),
        c if c.is_ascii_whitespace() => {
            // attributes; `>` inside quoted values does not close the tag
            let mut quote: Option<u8> = None;
            while let Some(&c) = bytes.get(i) {
                match quote {
                    Some(q) if c == q => quote = None,
                    Some(_) => {}
                    None if c == b'"' || c == b'\'' => quote = Some(c),
                    None if c == b'>' => return Some((i + 1, kind)),
                    None => {}
                }
                i += 1;
            }
            None
        }
        _ => None,
    }
}

fn strip_html_once(input: &str) -> String {
    let mut text = String::with_capacity(input.len());
    let mut rest = input;
    while let Some(pos) = rest.find('<') {
        text.push_str(&rest[..pos]);
        rest = &rest[pos..];
        match match_markup(rest) {
            Some((len, kind)) => {
                if kind == TagKind::Block {
                    text.push(' ');
                }
                rest = &rest[len..];
            }
            None => {
                text.push('<');
                rest = &rest[1..];
            }
        }
    }
    text.push_str(rest);
    let decoded = html_escape::decode_html_entities(&text);
    decoded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Converts a Stack Overflow HTML body to plain text.
///
/// Markup is removed (block elements become word breaks), code contents are
/// kept, entities are decoded and whitespace runs collapse to one space. The
/// pass is repeated until the text no longer changes, so decoded entities that
/// themselves spell markup are handled and the function is idempotent.
pub fn strip_html(body: &str) -> String {
    let mut current = strip_html_once(body);
    loop {
        let next = strip_html_once(&current);
        if next == current {
            return current;
        }
        current = next;
    }
}

/// Lowercase ASCII-alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_ascii_lowercase)
        .collect()
}
