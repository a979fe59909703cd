//! Attribution judge backed by the chat-completion client.

use std::sync::Arc;

use coem_core::attribution::{parse_score_list, AttributionRequest, Judge, ScorerError};

use crate::remote::RemoteGenerator;
use crate::templates::ATTRIBUTE_TEMPLATE;

/// Asks the model to score every fragment's contribution in one call.
#[derive(Clone)]
pub struct ChatJudge {
    pub remote: Arc<RemoteGenerator>,
}

impl ChatJudge {
    pub fn new(remote: Arc<RemoteGenerator>) -> Self {
        Self { remote }
    }
}

impl Judge for ChatJudge {
    fn judge(&self, req: &AttributionRequest) -> Result<Vec<f64>, ScorerError> {
        let texts: Vec<String> = req.fragments.iter().map(|(_, t)| t.clone()).collect();
        let reply = self
            .remote
            .complete(ATTRIBUTE_TEMPLATE, &texts, &req.output_text)
            .map_err(|e| ScorerError(e.to_string()))?;
        let scores = parse_score_list(&reply).ok_or_else(|| ScorerError("judge reply holds no score list".into()))?;
        if scores.len() != req.len() {
            return Err(ScorerError(format!(
                "judge scored {} fragments, expected {}",
                scores.len(),
                req.len()
            )));
        }
        Ok(scores)
    }
}
