//! Prompt assets and placeholder filling.

/// System prompt for the search policy.
pub fn agent_system_prompt() -> &'static str {
    include_str!("../assets/agent_prompt.txt").trim_end()
}

/// Usefulness-scoring prompt with `{question}`, `{answer}` and `{context}`.
pub fn scoring_template() -> &'static str {
    include_str!("../assets/scoring_prompt.txt").trim_end()
}

/// Query-refinement prompt with `{question}`, `{context}` and `{explanation}`.
pub fn refine_template() -> &'static str {
    include_str!("../assets/refine_prompt.txt").trim_end()
}

/// Substitutes `{name}` placeholders in a single left-to-right pass, so
/// braces inside substituted values are never re-expanded. Unknown
/// placeholders are left as they are.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Trimmed body of the first `<name>...</name>` pair in `text`.
pub fn tag_body<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = text.find(&open)? + open.len();
    let len = text[start..].find(&close)?;
    Some(text[start..start + len].trim())
}

pub fn scoring_prompt(question: &str, golden_answer: &str, context: &str) -> String {
    fill(scoring_template(), &[("question", question), ("answer", golden_answer), ("context", context)])
}

pub fn refine_prompt(question: &str, context: &str, explanation: &str) -> String {
    fill(refine_template(), &[("question", question), ("context", context), ("explanation", explanation)])
}
