//! Token counting shared by corpus validation and prompt assembly.

/// Anything that can report how many tokens a text occupies.
pub trait TokenCounter: Send + Sync {
    /// Stable identifier recorded in stats and manifests.
    fn name(&self) -> &str;
    fn count(&self, text: &str) -> usize;
}

/// Counts whitespace-separated words. Used when no model tokenizer is active.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}
