use serde::{Deserialize, Serialize};

use crate::knowledge::Partition;

pub const SYSTEM_HEADER: &str = "=== SYSTEM ===";
pub const CONTEXT_HEADER: &str = "=== RETRIEVED CONTEXT ===";
pub const TOKENS_HEADER: &str = "=== VISUAL TOKENS ===";
pub const HISTORY_HEADER: &str = "=== HISTORY ===";
pub const ELISION_MARKER: &str = "[... earlier steps elided ...]";

/// A retrieved chunk as shown to the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextChunk {
    pub id: String,
    pub partition: Partition,
    pub score: f64,
    pub text: String,
}

/// Keeps the best score per id, ordered by score (descending) then id.
pub fn merge_context(chunks: &mut Vec<ContextChunk>) {
    chunks.sort_by(|a, b| a.id.cmp(&b.id).then_with(|| b.score.total_cmp(&a.score)));
    chunks.dedup_by(|later, earlier| later.id == earlier.id);
    chunks.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
}

/// Newest entries that fit in `budget` characters, oldest dropped first,
/// with [`ELISION_MARKER`] in front when anything was dropped.
pub fn history_view(entries: &[String], budget: usize) -> String {
    let mut used = 0;
    let mut keep = 0;
    for e in entries.iter().rev() {
        let cost = e.chars().count() + 1;
        if used + cost > budget {
            break;
        }
        used += cost;
        keep += 1;
    }
    let mut lines: Vec<&str> = Vec::with_capacity(keep + 1);
    if keep < entries.len() {
        lines.push(ELISION_MARKER);
    }
    lines.extend(entries[entries.len() - keep..].iter().map(String::as_str));
    lines.join("\n")
}

/// Sections in fixed order: system instruction, retrieved context, visual
/// tokens, history. Empty context and history sections are left out.
pub fn assemble_prompt(
    system: &str,
    context: &[ContextChunk],
    tokens: &str,
    history: &[String],
    history_budget: usize,
) -> String {
    let mut out = String::new();
    out.push_str(SYSTEM_HEADER);
    out.push('\n');
    out.push_str(system.trim());
    out.push_str("\n\n");
    if !context.is_empty() {
        out.push_str(CONTEXT_HEADER);
        out.push('\n');
        for c in context {
            out.push_str(&format!("[{}|{}|score {:.4}]\n{}\n", c.id, c.partition.as_str(), c.score, c.text.trim()));
        }
        out.push('\n');
    }
    out.push_str(TOKENS_HEADER);
    out.push('\n');
    out.push_str(tokens.trim());
    out.push('\n');
    if !history.is_empty() {
        out.push('\n');
        out.push_str(HISTORY_HEADER);
        out.push('\n');
        out.push_str(&history_view(history, history_budget));
        out.push('\n');
    }
    out
}
