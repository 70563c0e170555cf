//! Language-model decision backend over a chat-completions endpoint.

mod cache;
mod client;
mod parse;
mod prompt;
mod ratelimit;

pub use cache::{cache_key, ExchangeCache, PromptExchange};
pub use client::{
    BackendConfig, ChatMessage, ChatRequest, ChatTransport, HttpTransport, LlmError, Mode, RemoteBackend,
    TransportError,
};
pub use parse::{parse_single_value, ParseError, ParsedValue};
pub use prompt::{render_coin_prompt, render_life_prompt, Prompt, COIN_SYSTEM, LIFE_SYSTEM};
pub use ratelimit::{Clock, FakeClock, RateLimiter, SystemClock};
