use super::{ContrastivePair, Polarity};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Text,
}

/// A prompt template with a single `{text}` placeholder.
///
/// `{{` and `}}` render literal braces; any other placeholder is rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(source: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut lit = String::new();
        let mut chars = source.chars().peekable();
        let mut has_text = false;
        while let Some(c) = chars.next() {
            match c {
                '{' if chars.peek() == Some(&'{') => {
                    chars.next();
                    lit.push('{');
                }
                '}' if chars.peek() == Some(&'}') => {
                    chars.next();
                    lit.push('}');
                }
                '{' => {
                    let mut name = String::new();
                    loop {
                        match chars.next() {
                            Some('}') => break,
                            Some(c) => name.push(c),
                            None => {
                                return Err(Error::Template(format!(
                                    "unterminated placeholder `{{{name}`"
                                )))
                            }
                        }
                    }
                    if name != "text" {
                        return Err(Error::Template(format!("unknown placeholder `{{{name}}}`")));
                    }
                    if !lit.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut lit)));
                    }
                    segments.push(Segment::Text);
                    has_text = true;
                }
                '}' => return Err(Error::Template("unmatched `}`".into())),
                c => lit.push(c),
            }
        }
        if !lit.is_empty() {
            segments.push(Segment::Literal(lit));
        }
        if !has_text {
            return Err(Error::Template("template has no `{text}` placeholder".into()));
        }
        Ok(PromptTemplate { segments })
    }

    pub fn render(&self, text: &str) -> String {
        let mut out = String::new();
        for s in &self.segments {
            match s {
                Segment::Literal(l) => out.push_str(l),
                Segment::Text => out.push_str(text),
            }
        }
        out
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            segments: vec![Segment::Text],
        }
    }
}

pub fn render_prompt(pair: &ContrastivePair, polarity: Polarity, template: &PromptTemplate) -> String {
    template.render(pair.text(polarity))
}
