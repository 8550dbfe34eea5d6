//! Serving layer: model artifacts, the framed JSON protocol, an in-memory
//! publish/subscribe broker, the model server and a client.

pub mod artifact;
pub mod broker;
pub mod client;
pub mod frame;
mod net;
pub mod server;

pub use artifact::ArtifactError;
pub use broker::{run_broker, Broker};
pub use client::{client_request, BrokerClient, ClientError, ForecastResponse, Target};
pub use frame::{FrameError, Message};
pub use net::ServerHandle;
pub use server::{run_model_server, ModelRegistry, ServeMode};

/// Topic the model server consumes in broker mode.
pub const REQUEST_TOPIC: &str = "forecast.requests";

pub fn reply_topic(id: &str) -> String {
    format!("forecast.reply.{id}")
}
