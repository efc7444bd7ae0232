//! Descriptions of object images from a vision-language model.
//!
//! Every stored description fits the text encoder's token budget. Responses
//! that run over are cut back to the last whole sentence that fits; if no
//! sentence fits, the model is asked once more with an explicit word limit.

mod backend;
#[cfg(feature = "remote")]
mod remote;
mod templates;
mod tokens;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{DatasetCatalog, ObjectRecord};

pub use backend::{
    vlm_from_config, Clock, MockVlm, RateLimiter, SystemClock, VirtualClock, VlmBackend, VlmBackendConfig,
    VlmKind, VLM_TOKEN_ENV,
};
#[cfg(feature = "remote")]
pub use remote::RemoteVlm;
pub use templates::{builtin_template, builtin_templates, PromptKind, PromptTemplate, DEFAULT_MAX_TOKENS};
pub use tokens::{count_tokens, sentences, truncate_to_sentences, TokenCounter, WhitespaceCounter};

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("template: {0}")]
    Template(String),
    #[error("backend config: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error("backend returned an empty description for {0}")]
    EmptyResponse(String),
    #[error("description for {object_id} has {count} tokens, budget is {budget}, even after re-request")]
    OverBudget {
        object_id: String,
        count: usize,
        budget: usize,
    },
}

/// What the over-budget policy did to a response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetAction {
    Truncated,
    Rerequested,
    RerequestedAndTruncated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub object_id: String,
    pub kind: PromptKind,
    pub text: String,
    pub token_count: usize,
    pub backend_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_action: Option<BudgetAction>,
}

/// Everything a labeling run needs besides the catalog.
pub struct Labeler<'a> {
    pub backend: &'a dyn VlmBackend,
    pub counter: &'a dyn TokenCounter,
    pub clock: &'a dyn Clock,
    limiter: RateLimiter,
}

#[derive(Debug, Default, Clone, PartialEq, Serialize)]
pub struct LabelReport {
    pub labeled: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub backend_calls: usize,
}

impl<'a> Labeler<'a> {
    pub fn new(
        backend: &'a dyn VlmBackend,
        config: &VlmBackendConfig,
        counter: &'a dyn TokenCounter,
        clock: &'a dyn Clock,
    ) -> Result<Self, LabelError> {
        config.validate()?;
        Ok(Self {
            backend,
            counter,
            clock,
            limiter: RateLimiter::new(config.interval()),
        })
    }

    fn call(&mut self, image_ref: &str, prompt: &str, calls: &mut usize) -> Result<String, LabelError> {
        self.limiter.acquire(self.clock);
        *calls += 1;
        self.backend.describe(image_ref, prompt)
    }

    /// Labels one record, applying the budget policy.
    pub fn request_description(
        &mut self,
        record: &ObjectRecord,
        template: &PromptTemplate,
    ) -> Result<Description, LabelError> {
        let mut calls = 0;
        self.request_counted(record, template, &mut calls)
    }

    fn request_counted(
        &mut self,
        record: &ObjectRecord,
        template: &PromptTemplate,
        calls: &mut usize,
    ) -> Result<Description, LabelError> {
        template.validate()?;
        let budget = self.counter.budget(template.max_description_tokens);
        let prompt = template.render(record);
        let raw = self.call(&record.image_ref, &prompt, calls)?;
        let (text, action) = match self.fit(&raw, budget, &record.object_id)? {
            Some((text, truncated)) => (text, truncated.then_some(BudgetAction::Truncated)),
            None => {
                let retry_prompt = format!("{prompt} Answer in complete sentences using at most {budget} words.");
                let raw = self.call(&record.image_ref, &retry_prompt, calls)?;
                match self.fit(&raw, budget, &record.object_id)? {
                    Some((text, false)) => (text, Some(BudgetAction::Rerequested)),
                    Some((text, true)) => (text, Some(BudgetAction::RerequestedAndTruncated)),
                    None => {
                        return Err(LabelError::OverBudget {
                            object_id: record.object_id.clone(),
                            count: self.counter.count(&raw),
                            budget,
                        })
                    }
                }
            }
        };
        Ok(Description {
            object_id: record.object_id.clone(),
            kind: template.kind,
            token_count: self.counter.count(&text),
            text,
            backend_id: self.backend.backend_id(),
            created_at: self.clock.now().as_secs(),
            budget_action: action,
        })
    }

    /// `Some((text, truncated))` when the response fits or can be cut to fit.
    fn fit(&self, raw: &str, budget: usize, object_id: &str) -> Result<Option<(String, bool)>, LabelError> {
        let text = raw.split_whitespace().collect::<Vec<_>>().join(" ");
        if text.is_empty() {
            return Err(LabelError::EmptyResponse(object_id.to_owned()));
        }
        if self.counter.count(&text) <= budget {
            return Ok(Some((text, false)));
        }
        Ok(truncate_to_sentences(&text, budget, self.counter).map(|t| (t, true)))
    }

    /// Adds a description of `template.kind` to every record that lacks one.
    /// Individual failures are reported and do not stop the run.
    pub fn batch_label(
        &mut self,
        catalog: &DatasetCatalog,
        template: &PromptTemplate,
    ) -> Result<(DatasetCatalog, LabelReport), LabelError> {
        template.validate()?;
        let mut next = catalog.clone();
        let mut report = LabelReport::default();
        for record in &catalog.manifest.records {
            if catalog.has_description(&record.object_id, template.kind) {
                report.skipped.push(record.object_id.clone());
                continue;
            }
            let mut calls = 0;
            let result = self.request_counted(record, template, &mut calls);
            report.backend_calls += calls;
            match result {
                Ok(d) => {
                    next = next.with_description(d).expect("record is in the catalog");
                    report.labeled.push(record.object_id.clone());
                }
                Err(e) => report.failed.push((record.object_id.clone(), e.to_string())),
            }
        }
        Ok((next, report))
    }
}
