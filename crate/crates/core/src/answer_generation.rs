//! Final answer generation and parsing of the link sections in the reply.

use std::collections::HashSet;
use std::sync::{Arc, LazyLock};

use regex::Regex;
use thiserror::Error;

use crate::domain::{AnswerWarning, EvidenceBundle, GeneratedAnswer, LinkRef, UserQuery};
use crate::llm_gateway::{Gateway, GatewayError};
use crate::prompts::{self, render};

pub const USED_LINKS_HEADER: &str = "Links used:";
pub const UNANSWERED_HEADER: &str = "Unanswered questions that you may find useful in the future:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnswerError {
    #[error("cannot generate an answer from an empty evidence bundle")]
    EmptyBundle,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

// `- [Title] URL`, also accepting `*` bullets and `[Title](URL)`.
static BULLET: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*[-*\u{2022}]\s*\[(.+)\]\s*\(?\s*<?(\S+?)>?\s*\)?\s*$").unwrap());

#[derive(Clone, Copy, PartialEq)]
enum Section {
    None,
    Used,
    Unanswered,
}

fn header_of(line: &str) -> Option<Section> {
    let bare = line.trim().trim_start_matches('#').trim().trim_matches(|c| c == '*' || c == '_').trim();
    let lower = bare.to_lowercase();
    if lower.starts_with("links used") {
        Some(Section::Used)
    } else if lower.starts_with("unanswered questions") {
        Some(Section::Unanswered)
    } else {
        None
    }
}

/// Extracts the "Links used" and "Unanswered questions" bullet lists.
/// A section ends at the first non-blank line that is not a bullet; missing
/// sections give empty lists.
pub fn parse_links(text: &str) -> (Vec<LinkRef>, Vec<LinkRef>) {
    let mut used = Vec::new();
    let mut unanswered = Vec::new();
    let mut section = Section::None;
    for line in text.lines() {
        if let Some(next) = header_of(line) {
            section = next;
            continue;
        }
        if section == Section::None || line.trim().is_empty() {
            continue;
        }
        match BULLET.captures(line) {
            Some(c) => {
                let link = LinkRef::new(c[1].trim(), &c[2]);
                match section {
                    Section::Used => used.push(link),
                    Section::Unanswered => unanswered.push(link),
                    Section::None => {}
                }
            }
            None => section = Section::None,
        }
    }
    (used, unanswered)
}

/// The unanswered list as given to the model, one `- [Title] URL` per line.
pub fn format_unanswered(links: &[LinkRef]) -> String {
    if links.is_empty() {
        return "None".to_string();
    }
    links.iter().map(LinkRef::to_string).collect::<Vec<_>>().join("\n")
}

pub fn render_prompt(query: &UserQuery, bundle: &EvidenceBundle) -> String {
    render(
        prompts::ANSWER_GENERATOR,
        &[
            ("question", query.as_str()),
            ("evidence", &bundle.combined_text),
            ("unanswered_question_list", &format_unanswered(&bundle.unanswered_links)),
        ],
    )
}

/// Flags every parsed link whose URL was not supplied to the model.
pub fn link_warnings(bundle: &EvidenceBundle, used: &[LinkRef], unanswered: &[LinkRef]) -> Vec<AnswerWarning> {
    let known: HashSet<&str> = bundle
        .items
        .iter()
        .map(|i| i.link.as_str())
        .chain(bundle.unanswered_links.iter().map(|l| l.url.as_str()))
        .collect();
    let mut seen = HashSet::new();
    used.iter()
        .chain(unanswered)
        .filter(|l| !known.contains(l.url.as_str()) && seen.insert(l.url.clone()))
        .map(|l| AnswerWarning::HallucinatedLink { url: l.url.clone() })
        .collect()
}

pub struct AnswerGenerator {
    gateway: Arc<Gateway>,
}

impl AnswerGenerator {
    pub fn new(gateway: Arc<Gateway>) -> Self {
        Self { gateway }
    }

    pub async fn generate(&self, query: &UserQuery, bundle: &EvidenceBundle) -> Result<GeneratedAnswer, AnswerError> {
        if bundle.is_empty() {
            return Err(AnswerError::EmptyBundle);
        }
        let text = self.gateway.chat(render_prompt(query, bundle)).await?;
        let (used_links, unanswered_links) = parse_links(&text);
        let warnings = link_warnings(bundle, &used_links, &unanswered_links);
        Ok(GeneratedAnswer { text, used_links, unanswered_links, warnings })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EvidenceItem, Relevance};
    use crate::evidence::select_bundle;
    use crate::llm_gateway::{MockBackend, MockScript, ScriptedChat};

    fn bundle(n: u64, unanswered: &[LinkRef]) -> EvidenceBundle {
        let items: Vec<EvidenceItem> = (1..=n)
            .map(|id| EvidenceItem {
                question_id: id,
                title: format!("Question {id}"),
                link: format!("https://stackoverflow.com/questions/{id}"),
                document_text: format!("text {id}"),
                cosine_score: 0.5,
                relevance: Relevance::Score(4),
            })
            .collect();
        select_bundle(&items, unanswered, 3)
    }

    fn generator(reply: &str) -> AnswerGenerator {
        let script = MockScript::new(4).with_chat(ScriptedChat::always("construct the final answer", reply));
        AnswerGenerator::new(Arc::new(Gateway::mock(Arc::new(MockBackend::new(script)))))
    }

    fn q() -> UserQuery {
        UserQuery::new("How to import from a parent directory in Python?").unwrap()
    }

    const REPLY: &str = "Use a relative import.\n\n\
Links used:\n\
- [Question 1] https://stackoverflow.com/questions/1\n\
- [Question 2] https://stackoverflow.com/questions/2\n\
\n\
Unanswered questions that you may find useful in the future:\n\
- [Open one] https://stackoverflow.com/questions/9\n";

    #[tokio::test]
    async fn parses_both_sections() {
        let open = [LinkRef::new("Open one", "https://stackoverflow.com/questions/9")];
        let answer = generator(REPLY).generate(&q(), &bundle(3, &open)).await.unwrap();
        assert_eq!(answer.text, REPLY);
        assert_eq!(answer.used_links.len(), 2);
        assert_eq!(answer.unanswered_links.as_slice(), open);
        assert!(answer.warnings.is_empty());
    }

    #[tokio::test]
    async fn missing_sections_are_empty() {
        let answer = generator("Just do it.").generate(&q(), &bundle(1, &[])).await.unwrap();
        assert!(answer.used_links.is_empty() && answer.unanswered_links.is_empty());
    }

    #[tokio::test]
    async fn fabricated_links_are_flagged() {
        let reply = "x\nLinks used:\n- [Made up] https://example.com/nope\n- [Question 1] https://stackoverflow.com/questions/1";
        let answer = generator(reply).generate(&q(), &bundle(1, &[])).await.unwrap();
        assert_eq!(answer.used_links.len(), 2);
        assert_eq!(answer.warnings, vec![AnswerWarning::HallucinatedLink { url: "https://example.com/nope".into() }]);
    }

    #[tokio::test]
    async fn empty_bundle_is_rejected() {
        let err = generator(REPLY).generate(&q(), &EvidenceBundle::default()).await.unwrap_err();
        assert_eq!(err, AnswerError::EmptyBundle);
    }

    #[test]
    fn prompt_contains_every_link_and_the_unanswered_list() {
        let open = [LinkRef::new("Open one", "https://stackoverflow.com/questions/9"), LinkRef::new("Open two", "https://stackoverflow.com/questions/10")];
        let b = bundle(3, &open);
        let prompt = render_prompt(&q(), &b);
        for id in 1..=3 {
            assert!(prompt.contains(&format!("https://stackoverflow.com/questions/{id}")));
        }
        assert!(prompt.contains(
            "Unanswered Question List: - [Open one] https://stackoverflow.com/questions/9\n- [Open two] https://stackoverflow.com/questions/10"
        ));
        assert_eq!(prompt, render_prompt(&q(), &b));
        assert!(render_prompt(&q(), &bundle(1, &[])).ends_with("Unanswered Question List: None"));
    }

    #[test]
    fn tolerant_formats() {
        let text = "**Links used:**\n* [A](https://a.example/1)\n-  [B [v2]]   https://b.example/2  \nThat's all.\n- [C] https://c.example/3";
        let (used, open) = parse_links(text);
        assert_eq!(used, vec![LinkRef::new("A", "https://a.example/1"), LinkRef::new("B [v2]", "https://b.example/2")]);
        assert!(open.is_empty());
    }
}
