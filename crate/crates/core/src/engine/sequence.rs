/// Soft guardrail on the order of tool calls. Deviations produce a warning
/// for the model; the call itself has already run.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGuard {
    order: Vec<String>,
    position: usize,
    last: Option<String>,
}

impl SequenceGuard {
    pub fn new(order: &[&str]) -> Self {
        assert!(!order.is_empty(), "sequence must not be empty");
        SequenceGuard {
            order: order.iter().map(|s| s.to_string()).collect(),
            position: 0,
            last: None,
        }
    }

    /// Starts the cycle at `tool` instead of the first entry.
    pub fn starting_at(mut self, tool: &str) -> Self {
        if let Some(i) = self.order.iter().position(|t| t == tool) {
            self.position = i;
        }
        self
    }

    pub fn expected(&self) -> &str {
        &self.order[self.position]
    }

    /// Records a call and returns a warning when it is out of order.
    pub fn check(&mut self, tool: &str) -> Option<String> {
        let expected = self.expected().to_string();
        let warning = if tool == expected {
            self.position = (self.position + 1) % self.order.len();
            None
        } else if self.last.as_deref() == Some(tool) {
            Some(format!(
                "Warning: `{tool}` was called again. The expected next tool is `{expected}`."
            ))
        } else if let Some(i) = self.order.iter().position(|t| t == tool) {
            self.position = (i + 1) % self.order.len();
            Some(format!(
                "Warning: `{tool}` was called out of order. The expected next tool was `{expected}`."
            ))
        } else {
            Some(format!(
                "Warning: `{tool}` is not part of this workflow. The expected next tool is `{expected}`."
            ))
        };
        self.last = Some(tool.to_string());
        warning
    }
}
