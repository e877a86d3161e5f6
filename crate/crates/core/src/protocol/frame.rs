use super::ProtocolError;

/// Largest payload a frame may carry.
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;
/// Largest topic, bytes.
pub const MAX_TOPIC: usize = 255;
/// Largest value of the length field: kind, topic length, topic and payload.
pub const MAX_FRAME_BODY: usize = 2 + MAX_TOPIC + MAX_PAYLOAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Publish = 1,
    Subscribe = 2,
    Unsubscribe = 3,
    Ping = 4,
    Pong = 5,
}

impl TryFrom<u8> for Kind {
    type Error = ProtocolError;

    fn try_from(b: u8) -> Result<Self, ProtocolError> {
        Ok(match b {
            1 => Kind::Publish,
            2 => Kind::Subscribe,
            3 => Kind::Unsubscribe,
            4 => Kind::Ping,
            5 => Kind::Pong,
            other => return Err(ProtocolError::BadKind(other)),
        })
    }
}

/// One protocol message.
///
/// Wire layout: `u32` little-endian length of everything that follows,
/// `u8` kind, `u8` topic length, topic bytes (UTF-8), payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: Kind,
    pub topic: String,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn publish(topic: impl Into<String>, payload: Vec<u8>) -> Self {
        Self { kind: Kind::Publish, topic: topic.into(), payload }
    }

    pub fn subscribe(topic: impl Into<String>) -> Self {
        Self { kind: Kind::Subscribe, topic: topic.into(), payload: Vec::new() }
    }

    pub fn unsubscribe(topic: impl Into<String>) -> Self {
        Self { kind: Kind::Unsubscribe, topic: topic.into(), payload: Vec::new() }
    }

    pub fn ping() -> Self {
        Self { kind: Kind::Ping, topic: String::new(), payload: Vec::new() }
    }

    pub fn pong() -> Self {
        Self { kind: Kind::Pong, topic: String::new(), payload: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.topic.len() > MAX_TOPIC {
            return Err(ProtocolError::TopicTooLong(self.topic.len()));
        }
        if self.payload.len() > MAX_PAYLOAD {
            return Err(ProtocolError::OversizedFrame(2 + self.topic.len() + self.payload.len()));
        }
        let needs_topic = matches!(self.kind, Kind::Publish | Kind::Subscribe | Kind::Unsubscribe);
        if needs_topic && self.topic.is_empty() {
            return Err(ProtocolError::EmptyTopic(self.kind as u8));
        }
        if self.kind != Kind::Publish && !self.payload.is_empty() {
            return Err(ProtocolError::UnexpectedPayload(self.kind as u8));
        }
        Ok(())
    }

    /// Bytes this frame occupies on the wire.
    pub fn encoded_len(&self) -> usize {
        6 + self.topic.len() + self.payload.len()
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, ProtocolError> {
    f.validate()?;
    let mut out = Vec::with_capacity(f.encoded_len());
    encode_into(f, &mut out);
    Ok(out)
}

/// Appends the encoding of an already validated frame.
pub(crate) fn encode_into(f: &Frame, out: &mut Vec<u8>) {
    let body = 2 + f.topic.len() + f.payload.len();
    out.extend_from_slice(&(body as u32).to_le_bytes());
    out.push(f.kind as u8);
    out.push(f.topic.len() as u8);
    out.extend_from_slice(f.topic.as_bytes());
    out.extend_from_slice(&f.payload);
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Frame { frame: Frame, consumed: usize },
    /// The input is a valid prefix of a frame; nothing was consumed.
    NeedMoreBytes,
}

/// Decodes the frame at the start of `bytes`.
///
/// A declared length above the frame cap is rejected as soon as the length
/// field is readable, so a hostile peer cannot make the caller buffer it.
pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, ProtocolError> {
    let Some(len_bytes) = bytes.get(..4) else {
        return Ok(Decoded::NeedMoreBytes);
    };
    let body = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    if body > MAX_FRAME_BODY {
        return Err(ProtocolError::OversizedFrame(body));
    }
    if body < 2 {
        return Err(ProtocolError::Malformed("length field smaller than the fixed header"));
    }
    let Some(frame_bytes) = bytes.get(4..4 + body) else {
        return Ok(Decoded::NeedMoreBytes);
    };
    let kind = Kind::try_from(frame_bytes[0])?;
    let topic_len = frame_bytes[1] as usize;
    let Some(topic) = frame_bytes.get(2..2 + topic_len) else {
        return Err(ProtocolError::Malformed("topic runs past the frame end"));
    };
    let topic = std::str::from_utf8(topic).map_err(|_| ProtocolError::BadTopicUtf8)?.to_string();
    let frame = Frame { kind, topic, payload: frame_bytes[2 + topic_len..].to_vec() };
    frame.validate()?;
    Ok(Decoded::Frame { frame, consumed: 4 + body })
}

/// Accumulates stream bytes and yields complete frames in order.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start * 2 >= self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `Ok(None)` if more bytes are needed. After an
    /// error the stream cannot be resynchronized.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, ProtocolError> {
        match decode_frame(&self.buf[self.start..])? {
            Decoded::Frame { frame, consumed } => {
                self.start += consumed;
                Ok(Some(frame))
            }
            Decoded::NeedMoreBytes => Ok(None),
        }
    }

    /// Bytes received but not yet returned as frames.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }
}
