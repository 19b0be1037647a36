//! Inference token accounting for the generator's attention window. The
//! count depends only on the slot layout (views, slots per view, horizons),
//! never on the encoder grid size: pooling reduces each frame to exactly
//! `tokens_per_view` slots regardless of patch count.

use crate::error::{OwmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetConfig {
    pub views: usize,
    pub tokens_per_view: usize,
    /// Latent rollout length; zero when the latent branch is disabled.
    pub latent_steps: usize,
    pub action_steps: usize,
}

impl BudgetConfig {
    /// Deployment layout: three views, 20-step latent horizon, 30-step
    /// action horizon.
    pub fn paper_default(tokens_per_view: usize) -> Self {
        BudgetConfig { views: 3, tokens_per_view, latent_steps: 20, action_steps: 30 }
    }
}

/// Tokens attended per inference pass: views * tokens_per_view * latent_steps
/// + action_steps.
pub fn inference_token_count(b: &BudgetConfig) -> Result<usize> {
    if b.views == 0 || b.tokens_per_view == 0 || b.action_steps == 0 {
        return Err(OwmError::Config(format!(
            "budget needs positive views/tokens_per_view/action_steps, got {b:?}"
        )));
    }
    Ok(b.views * b.tokens_per_view * b.latent_steps + b.action_steps)
}
