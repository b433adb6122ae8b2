//! The agent interaction protocol: framed JSON messages, sessions, device
//! profiles, failure detection and the constellation-side endpoint.

pub mod endpoint;
pub mod message;
pub mod profile;
pub mod resilience;
pub mod session;
pub mod transport;

pub use endpoint::{
    ConstellationEndpoint, EndpointError, EndpointEvent, EndpointOutput, EndpointPhase,
    HeartbeatConfig,
};
pub use message::{AipMessage, Direction, MessageBody, MsgType, SchemaViolation};
pub use profile::{AgentProfile, AgentRegistry, ProfileFragment};
pub use resilience::{BackoffPolicy, HeartbeatMonitor};
