//! Recording files: `"AMBR"`, a version byte, framed messages back to back,
//! and an optional index footer.
//!
//! The footer is `"AMBI"`, `u32` topic count, then per topic `u8` id, `u32`
//! message count and that many `u64` message offsets, then the `u64` offset
//! of the footer itself and `"AMBI"` again.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use super::*;

pub const RECORDING_MAGIC: [u8; 4] = *b"AMBR";
pub const RECORDING_VERSION: u8 = 1;
pub const INDEX_MAGIC: [u8; 4] = *b"AMBI";
const FILE_HEADER_LEN: u64 = 5;

/// Message offsets per topic.
pub type RecordingIndex = BTreeMap<Topic, Vec<u64>>;

pub struct RecordingWriter<W: Write> {
    out: W,
    offset: u64,
    index: RecordingIndex,
    messages: u64,
}

impl RecordingWriter<BufWriter<File>> {
    /// Creates `path`, refusing to replace an existing file unless `force`.
    pub fn create(path: &Path, force: bool) -> Result<Self, StreamError> {
        let mut opts = OpenOptions::new();
        opts.write(true);
        if force {
            opts.create(true).truncate(true);
        } else {
            opts.create_new(true);
        }
        let f = opts.open(path).map_err(|e| match e.kind() {
            io::ErrorKind::AlreadyExists => StreamError::Exists(path.to_path_buf()),
            _ => StreamError::Io(format!("{}: {e}", path.display())),
        })?;
        RecordingWriter::new(BufWriter::with_capacity(1 << 20, f))
    }
}

impl<W: Write> RecordingWriter<W> {
    pub fn new(mut out: W) -> Result<Self, StreamError> {
        out.write_all(&RECORDING_MAGIC)?;
        out.write_all(&[RECORDING_VERSION])?;
        Ok(Self {
            out,
            offset: FILE_HEADER_LEN,
            index: RecordingIndex::new(),
            messages: 0,
        })
    }

    pub fn write(&mut self, m: &TopicMessage) -> Result<(), StreamError> {
        m.write_to(&mut self.out)?;
        self.index.entry(m.topic).or_default().push(self.offset);
        self.offset += m.encoded_len() as u64;
        self.messages += 1;
        Ok(())
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    pub fn bytes_written(&self) -> u64 {
        self.offset
    }

    /// Writes the index footer and flushes; returns the sink.
    pub fn finish(mut self) -> Result<W, StreamError> {
        let start = self.offset;
        let o = &mut self.out;
        o.write_all(&INDEX_MAGIC)?;
        o.write_all(&(self.index.len() as u32).to_le_bytes())?;
        for (topic, offsets) in &self.index {
            o.write_all(&[topic.id()])?;
            o.write_all(&(offsets.len() as u32).to_le_bytes())?;
            for off in offsets {
                o.write_all(&off.to_le_bytes())?;
            }
        }
        o.write_all(&start.to_le_bytes())?;
        o.write_all(&INDEX_MAGIC)?;
        o.flush()?;
        Ok(self.out)
    }
}

/// Streaming reader yielding messages in file order. Stops at the footer or
/// at the end of the data; a cut-off message yields
/// [`StreamError::TruncatedFile`] and ends iteration.
pub struct RecordingReader<R: Read> {
    input: R,
    offset: u64,
    messages: u64,
    done: bool,
    index: Option<RecordingIndex>,
}

impl RecordingReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self, StreamError> {
        let f = File::open(path).map_err(|e| StreamError::Io(format!("{}: {e}", path.display())))?;
        RecordingReader::new(BufReader::with_capacity(1 << 20, f))
    }
}

impl<R: Read> RecordingReader<R> {
    pub fn new(mut input: R) -> Result<Self, StreamError> {
        let mut head = [0u8; FILE_HEADER_LEN as usize];
        let n = read_full(&mut input, &mut head)?;
        if n < head.len() {
            return Err(StreamError::TruncatedFile { offset: 0, messages: 0 });
        }
        if head[..4] != RECORDING_MAGIC {
            return Err(StreamError::CorruptRecording {
                offset: 0,
                reason: "not a recording file".into(),
            });
        }
        if head[4] != RECORDING_VERSION {
            return Err(StreamError::UnsupportedVersion(head[4]));
        }
        Ok(Self {
            input,
            offset: FILE_HEADER_LEN,
            messages: 0,
            done: false,
            index: None,
        })
    }

    /// Byte offset of the next message.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn messages_read(&self) -> u64 {
        self.messages
    }

    /// The footer index, available once iteration reached it.
    pub fn index(&self) -> Option<&RecordingIndex> {
        self.index.as_ref()
    }

    fn truncated(&self) -> StreamError {
        StreamError::TruncatedFile {
            offset: self.offset,
            messages: self.messages,
        }
    }

    fn corrupt(&self, reason: impl Into<String>) -> StreamError {
        StreamError::CorruptRecording {
            offset: self.offset,
            reason: reason.into(),
        }
    }

    fn read_footer(&mut self) -> Result<RecordingIndex, StreamError> {
        let mut rest = Vec::new();
        self.input.read_to_end(&mut rest)?;
        let mut r = rest.as_slice();
        let mut take = |n: usize| -> Result<&[u8], StreamError> {
            if r.len() < n {
                return Err(StreamError::TruncatedFile {
                    offset: self.offset,
                    messages: self.messages,
                });
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        let topics = u32::from_le_bytes(take(4)?.try_into().unwrap());
        let mut index = RecordingIndex::new();
        for _ in 0..topics {
            let topic = Topic::from_id(take(1)?[0]).map_err(|e| self.corrupt(e.to_string()))?;
            let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let bytes = take(8 * count)?;
            index.insert(
                topic,
                bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect(),
            );
        }
        let start = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let magic = take(4)?;
        if magic != INDEX_MAGIC || start != self.offset {
            return Err(self.corrupt("malformed index footer"));
        }
        if !r.is_empty() {
            return Err(self.corrupt("data after index footer"));
        }
        Ok(index)
    }

    fn next_message(&mut self) -> Result<Option<TopicMessage>, StreamError> {
        let mut prefix = [0u8; FRAME_PREFIX_LEN];
        let n = read_full(&mut self.input, &mut prefix[..4])?;
        if n == 0 {
            return Ok(None);
        }
        if n == 4 && prefix[..4] == INDEX_MAGIC {
            self.index = Some(self.read_footer()?);
            return Ok(None);
        }
        if n < 4 {
            return Err(self.truncated());
        }
        if prefix[..4] != FRAME_MAGIC {
            return Err(self.corrupt(format!("bad magic {:02x?}", &prefix[..4])));
        }
        if read_full(&mut self.input, &mut prefix[4..])? < FRAME_PREFIX_LEN - 4 {
            return Err(self.truncated());
        }
        let p = match parse_prefix(&prefix) {
            Ok(p) => p,
            Err(e) => return Err(self.corrupt(e.to_string())),
        };
        let msg = match read_frame_body(&mut self.input, p) {
            Ok(m) => m,
            Err(StreamError::TruncatedFile { .. }) => return Err(self.truncated()),
            Err(StreamError::Io(e)) => return Err(StreamError::Io(e)),
            Err(e) => return Err(self.corrupt(e.to_string())),
        };
        self.offset += msg.encoded_len() as u64;
        self.messages += 1;
        Ok(Some(msg))
    }
}

impl<R: Read> Iterator for RecordingReader<R> {
    type Item = Result<TopicMessage, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_message() {
            Ok(Some(m)) => Some(Ok(m)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads the index footer without scanning the file. `Ok(None)` when the
/// file has no footer.
pub fn read_index(path: &Path) -> Result<Option<RecordingIndex>, StreamError> {
    let mut f = File::open(path).map_err(|e| StreamError::Io(format!("{}: {e}", path.display())))?;
    let len = f.seek(SeekFrom::End(0))?;
    if len < FILE_HEADER_LEN + 16 {
        return Ok(None);
    }
    let mut tail = [0u8; 12];
    f.seek(SeekFrom::End(-12))?;
    f.read_exact(&mut tail)?;
    if tail[8..] != INDEX_MAGIC {
        return Ok(None);
    }
    let start = u64::from_le_bytes(tail[..8].try_into().unwrap());
    if start < FILE_HEADER_LEN || start > len - 16 {
        return Ok(None);
    }
    f.seek(SeekFrom::Start(start))?;
    let mut reader = RecordingReader {
        input: BufReader::new(f),
        offset: start,
        messages: 0,
        done: false,
        index: None,
    };
    match reader.next_message() {
        Ok(None) => Ok(reader.index),
        _ => Ok(None),
    }
}

/// Reads the message starting at `offset`.
pub fn read_message_at<F: Read + Seek>(f: &mut F, offset: u64) -> Result<TopicMessage, StreamError> {
    f.seek(SeekFrom::Start(offset))?;
    match read_frame(f) {
        Ok(Some(m)) => Ok(m),
        Ok(None) | Err(StreamError::TruncatedFile { .. }) => Err(StreamError::TruncatedFile { offset, messages: 0 }),
        Err(StreamError::Io(e)) => Err(StreamError::Io(e)),
        Err(e) => Err(StreamError::CorruptRecording {
            offset,
            reason: e.to_string(),
        }),
    }
}

/// All messages of the given topics, using the footer index when present.
pub fn read_topics(path: &Path, topics: &[Topic]) -> Result<Vec<TopicMessage>, StreamError> {
    if let Some(index) = read_index(path)? {
        let mut offsets: Vec<u64> = topics.iter().filter_map(|t| index.get(t)).flatten().copied().collect();
        offsets.sort_unstable();
        let mut f = BufReader::new(File::open(path)?);
        return offsets.into_iter().map(|o| read_message_at(&mut f, o)).collect();
    }
    let mut out = Vec::new();
    for m in RecordingReader::open(path)? {
        let m = m?;
        if topics.contains(&m.topic) {
            out.push(m);
        }
    }
    Ok(out)
}

#[derive(Debug, Default, PartialEq)]
pub struct ReplaySummary {
    pub messages: u64,
    /// Set when the file ended early or was corrupt; the messages before it
    /// were replayed.
    pub error: Option<StreamError>,
}

/// Feeds a recording to `sink`, keeping the original inter-message gaps
/// divided by `speed`. A speed of zero replays as fast as possible.
pub fn replay<R: Read, E>(
    reader: RecordingReader<R>,
    speed: f64,
    mut sink: impl FnMut(&TopicMessage) -> Result<(), E>,
) -> Result<ReplaySummary, E> {
    let mut summary = ReplaySummary::default();
    let mut origin: Option<(Instant, u64)> = None;
    for m in reader {
        let m = match m {
            Ok(m) => m,
            Err(e) => {
                summary.error = Some(e);
                break;
            }
        };
        if speed > 0.0 {
            let (t0, ts0) = *origin.get_or_insert((Instant::now(), m.timestamp_ns));
            let due = t0 + Duration::from_secs_f64(m.timestamp_ns.saturating_sub(ts0) as f64 * 1e-9 / speed);
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        sink(&m)?;
        summary.messages += 1;
    }
    Ok(summary)
}
