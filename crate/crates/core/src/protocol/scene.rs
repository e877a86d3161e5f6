use super::ProtocolError;
use crate::splat::RECORD_SIZE;

/// Largest scene chunk payload, prefix included.
pub const SCENE_CHUNK_MAX: usize = 1024 * 1024;
const PREFIX: usize = 8;
/// Records per chunk; chunks never split a record so clients can render
/// each one as it arrives.
const RECORDS_PER_CHUNK: usize = (SCENE_CHUNK_MAX - PREFIX) / RECORD_SIZE;

/// Splits `.splat` bytes into payloads prefixed with `u32` chunk index and
/// `u32` chunk count, both little-endian. An empty scene is one empty chunk.
pub fn chunk_scene(splat_bytes: &[u8]) -> Vec<Vec<u8>> {
    let per = RECORDS_PER_CHUNK * RECORD_SIZE;
    let parts: Vec<&[u8]> = if splat_bytes.is_empty() { vec![&[]] } else { splat_bytes.chunks(per).collect() };
    let count = parts.len() as u32;
    parts
        .iter()
        .enumerate()
        .map(|(i, part)| {
            let mut out = Vec::with_capacity(PREFIX + part.len());
            out.extend_from_slice(&(i as u32).to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
            out.extend_from_slice(part);
            out
        })
        .collect()
}

/// Reassembles chunks published in order. Index 0 starts a new scene.
#[derive(Debug, Default)]
pub struct SceneAssembler {
    expected: Option<(u32, u32)>,
    bytes: Vec<u8>,
}

impl SceneAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the complete `.splat` bytes once the last chunk arrives.
    pub fn push(&mut self, payload: &[u8]) -> Result<Option<Vec<u8>>, ProtocolError> {
        if payload.len() < PREFIX {
            return Err(ProtocolError::BadChunk(format!("{} bytes is shorter than the prefix", payload.len())));
        }
        let index = u32::from_le_bytes(payload[0..4].try_into().unwrap());
        let count = u32::from_le_bytes(payload[4..8].try_into().unwrap());
        if count == 0 || index >= count {
            return Err(ProtocolError::BadChunk(format!("index {index} of {count}")));
        }
        if index == 0 {
            self.bytes.clear();
        } else if self.expected != Some((index, count)) {
            self.expected = None;
            return Err(ProtocolError::BadChunk(format!("unexpected chunk {index} of {count}")));
        }
        self.bytes.extend_from_slice(&payload[PREFIX..]);
        if index + 1 == count {
            self.expected = None;
            return Ok(Some(std::mem::take(&mut self.bytes)));
        }
        self.expected = Some((index + 1, count));
        Ok(None)
    }

    /// Whole records received so far for the scene in progress.
    pub fn partial(&self) -> &[u8] {
        &self.bytes[..self.bytes.len() / RECORD_SIZE * RECORD_SIZE]
    }
}
