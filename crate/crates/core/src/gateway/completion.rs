use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailure {
    #[error("completion has no closed code block")]
    NoCodeBlock,
    #[error("code block does not define `transform`")]
    NoTransformFunction,
}

const CODE_TAGS: [&str; 4] = ["", "python", "py", "python3"];

/// Closed fenced blocks tagged as Python (or untagged), in order.
fn code_blocks(text: &str) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in text.lines() {
        let trimmed = line.trim_end();
        match current.as_mut() {
            None => {
                if let Some(tag) = trimmed.trim_start().strip_prefix("```") {
                    if CODE_TAGS.contains(&tag.trim().to_ascii_lowercase().as_str()) {
                        current = Some(Vec::new());
                    }
                }
            }
            Some(body) => {
                if trimmed.trim_start() == "```" {
                    blocks.push(body.join("\n"));
                    current = None;
                } else {
                    body.push(line);
                }
            }
        }
    }
    blocks
}

/// Extracts the program source from a model completion: the last closed
/// Python code block, which must define `transform`.
pub fn parse_completion(text: &str) -> Result<String, ParseFailure> {
    let block = code_blocks(text).pop().ok_or(ParseFailure::NoCodeBlock)?;
    let defines_transform = block.lines().any(|l| {
        let l = l.trim_start();
        l.starts_with("def transform(") || l.starts_with("def transform (")
    });
    if !defines_transform {
        return Err(ParseFailure::NoTransformFunction);
    }
    Ok(block)
}
