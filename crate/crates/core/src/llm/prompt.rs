//! Prompt templates for the two elicitation tasks.

use crate::types::ProportionTask;

pub const COIN_SYSTEM: &str =
    "Imagine that you are a participant in a psychology experiment. Your task is to evaluate the bias in a coin.";

pub const LIFE_SYSTEM: &str = "You are an expert at predicting future events.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

/// Coin-flip prompt after seeing `omega` heads out of `task.n_obs` tosses.
pub fn render_coin_prompt(omega: u64, task: &ProportionTask) -> Prompt {
    let total = task.n_obs;
    let tails = total.saturating_sub(omega);
    Prompt {
        system: COIN_SYSTEM.to_string(),
        user: format!(
            "Here is a brief overview of the past coin flips: Out of {total} coin flips, {omega} resulted in heads \
             and {tails} in tails. With this information, please predict the number of heads in a larger set of \
             {} coin flips. Please limit your answer to a single value without outputting anything else.",
            task.m_pred
        ),
    }
}

/// Life-expectancy prompt for a person currently `age` years old.
pub fn render_life_prompt(age: u64) -> Prompt {
    Prompt {
        system: LIFE_SYSTEM.to_string(),
        user: format!(
            "If you were to evaluate the lifespan of a random {age}-year-old man, what age would you predict he \
             might reach? Please limit your answer to a single value without outputting anything else."
        ),
    }
}
