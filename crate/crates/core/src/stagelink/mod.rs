//! Coupling fabric between plant and controller.

pub mod controller;
pub mod endpoint;
pub mod frame;
pub mod impair;
pub mod orchestrator;
pub mod registers;
pub mod trace;

pub use controller::{ControlOutput, Controller, ControllerHost};
pub use endpoint::{serve_connection, ControllerEndpoint, LocalEndpoint, TcpEndpoint, TransportError};
pub use frame::{decode_frame, encode_frame, Frame, FrameError, FrameType};
pub use impair::{analog_transduce, impair_message, AnalogChannel, Delivery, ImpairmentProfile};
pub use orchestrator::{
    run_closed_loop, stream_rng, ControllerLink, HookOutcome, LinkError, LinkSettings, StepHook, ANALOG_STREAM,
    LINK_STREAM, PHIL_STREAM,
};
pub use registers::{CommandImage, Measurements, RegisterBank, RegisterError};
pub use trace::{
    AppliedCommand, CycleRecord, Direction, LinkCounts, MessageOutcome, MessageRecord, StageKind, StepRow,
    Trace,
};
