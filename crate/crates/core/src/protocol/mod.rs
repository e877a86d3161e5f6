//! Framed publish/subscribe wire protocol and the hub that connects
//! operator clients to a [`Session`](crate::Session).
//!
//! Every message is a [`Frame`]. The same bytes travel over a raw TCP stream
//! or, one frame per binary message, over a web socket.

mod client;
mod frame;
mod hub;
mod scene;
mod server;
pub mod topics;
mod video;

pub use client::Client;
pub use frame::{decode_frame, encode_frame, Decoded, Frame, FrameDecoder, Kind, MAX_FRAME_BODY, MAX_PAYLOAD, MAX_TOPIC};
pub use hub::{Hub, QueuePolicy, SubscriberId};
pub use scene::{chunk_scene, SceneAssembler, SCENE_CHUNK_MAX};
pub use server::{serve, Clock, ServerConfig, ServerHandle};
pub use video::{decode_video, encode_depth, encode_video, Encoding, VideoFrame, VideoPixels, VIDEO_HEADER_LEN};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("frame body of {0} bytes exceeds the frame cap")]
    OversizedFrame(usize),
    #[error("unknown frame kind {0}")]
    BadKind(u8),
    #[error("topic is not valid UTF-8")]
    BadTopicUtf8,
    #[error("topic of {0} bytes exceeds 255")]
    TopicTooLong(usize),
    #[error("frame kind {0} needs a topic")]
    EmptyTopic(u8),
    #[error("frame kind {0} must not carry a payload")]
    UnexpectedPayload(u8),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
    #[error("pixel section holds {actual} bytes, header declares {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("unknown pixel encoding {0}")]
    BadEncoding(u8),
    #[error("image dimension {0} does not fit in 16 bits")]
    ImageTooLarge(u32),
    #[error("payload on {topic} does not match its schema: {reason}")]
    Schema { topic: String, reason: String },
    #[error("bad scene chunk: {0}")]
    BadChunk(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("connection closed")]
    Closed,
}

impl From<std::io::Error> for ProtocolError {
    fn from(e: std::io::Error) -> Self {
        ProtocolError::Io(e.to_string())
    }
}
