//! Activation streams and the `S3AC` interchange format.
//!
//! Layout (little-endian): magic `S3AC`, version u32, L u64, layer count u32,
//! layer ids u32[], d_in u32, then L tokens (u32 byte length, UTF-8 bytes, u64
//! char offset), then one record per (position, layer) in position order:
//! position u64, layer u32, f32[d_in].

use std::collections::HashSet;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ACTIVATION_MAGIC: &[u8; 4] = b"S3AC";
pub const ACTIVATION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    /// Character offset of the token in the original text.
    pub offset: u64,
}

impl Token {
    /// Token table for words joined by single spaces.
    pub fn table_from_words<S: AsRef<str>>(words: &[S]) -> Vec<Token> {
        let mut offset = 0u64;
        words
            .iter()
            .map(|w| {
                let w = w.as_ref();
                let tok = Token {
                    text: w.to_string(),
                    offset,
                };
                offset += w.chars().count() as u64 + 1;
                tok
            })
            .collect()
    }
}

/// A contiguous block of positions, laid out `[position][layer][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationChunk {
    pub start: u64,
    pub len: usize,
    pub n_layers: usize,
    pub d_in: usize,
    pub data: Vec<f32>,
}

impl ActivationChunk {
    pub fn vector(&self, offset: usize, layer_idx: usize) -> &[f32] {
        let at = (offset * self.n_layers + layer_idx) * self.d_in;
        &self.data[at..at + self.d_in]
    }

    pub fn vectors(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.d_in)
    }

    pub fn vector_count(&self) -> usize {
        self.len * self.n_layers
    }
}

/// Anything that can hand out activations chunk by chunk, in position order.
pub trait ActivationSource {
    fn layers(&self) -> &[u32];
    fn d_in(&self) -> usize;
    fn context_len(&self) -> u64;
    /// Next block of at most `max_positions` positions, or `None` when done.
    fn next_chunk(&mut self, max_positions: usize) -> Result<Option<ActivationChunk>>;
}

fn validate_layers(layers: &[u32]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::contract("activation stream has no layers"));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = layers.iter().find(|l| !seen.insert(**l)) {
        return Err(Error::contract(format!("duplicate layer id {dup}")));
    }
    Ok(())
}

/// Fully materialized activations for a context or a query.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStream {
    tokens: Vec<Token>,
    layers: Vec<u32>,
    d_in: usize,
    data: Vec<f32>,
}

impl ActivationStream {
    pub fn new(tokens: Vec<Token>, layers: Vec<u32>, d_in: usize, data: Vec<f32>) -> Result<Self> {
        validate_layers(&layers)?;
        if d_in == 0 {
            return Err(Error::contract("d_in must be positive"));
        }
        let want = tokens.len() * layers.len() * d_in;
        if data.len() != want {
            return Err(Error::contract(format!(
                "activation data has {} values, expected {want}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("activation data contains NaN or infinity"));
        }
        Ok(ActivationStream {
            tokens,
            layers,
            d_in,
            data,
        })
    }

    /// Builds a stream by calling `fill(position, layer_idx, out)` for every
    /// vector.
    pub fn from_fn<F>(
        tokens: Vec<Token>,
        layers: Vec<u32>,
        d_in: usize,
        mut fill: F,
    ) -> Result<Self>
    where
        F: FnMut(usize, usize, &mut [f32]),
    {
        let n_layers = layers.len();
        let mut data = vec![0f32; tokens.len() * n_layers * d_in];
        if d_in > 0 {
            for (i, v) in data.chunks_exact_mut(d_in).enumerate() {
                fill(i / n_layers.max(1), i % n_layers.max(1), v);
            }
        }
        Self::new(tokens, layers, d_in, data)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token_texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    pub fn layers(&self) -> &[u32] {
        &self.layers
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn vector(&self, position: usize, layer_idx: usize) -> &[f32] {
        let at = (position * self.layers.len() + layer_idx) * self.d_in;
        &self.data[at..at + self.d_in]
    }

    pub fn source(&self) -> StreamSource<'_> {
        StreamSource {
            stream: self,
            next: 0,
        }
    }
}

pub struct StreamSource<'a> {
    stream: &'a ActivationStream,
    next: usize,
}

impl ActivationSource for StreamSource<'_> {
    fn layers(&self) -> &[u32] {
        &self.stream.layers
    }

    fn d_in(&self) -> usize {
        self.stream.d_in
    }

    fn context_len(&self) -> u64 {
        self.stream.len() as u64
    }

    fn next_chunk(&mut self, max_positions: usize) -> Result<Option<ActivationChunk>> {
        let s = self.stream;
        if self.next >= s.len() || max_positions == 0 {
            return Ok(None);
        }
        let end = (self.next + max_positions).min(s.len());
        let per_pos = s.layers.len() * s.d_in;
        let chunk = ActivationChunk {
            start: self.next as u64,
            len: end - self.next,
            n_layers: s.layers.len(),
            d_in: s.d_in,
            data: s.data[self.next * per_pos..end * per_pos].to_vec(),
        };
        self.next = end;
        Ok(Some(chunk))
    }
}

/// Source whose vectors are produced on demand, never all at once.
pub struct GeneratedSource<F> {
    layers: Vec<u32>,
    d_in: usize,
    len: u64,
    next: u64,
    fill: F,
}

impl<F> GeneratedSource<F>
where
    F: FnMut(u64, usize, &mut [f32]),
{
    pub fn new(len: u64, layers: Vec<u32>, d_in: usize, fill: F) -> Result<Self> {
        validate_layers(&layers)?;
        if d_in == 0 {
            return Err(Error::contract("d_in must be positive"));
        }
        Ok(GeneratedSource {
            layers,
            d_in,
            len,
            next: 0,
            fill,
        })
    }
}

impl<F> ActivationSource for GeneratedSource<F>
where
    F: FnMut(u64, usize, &mut [f32]),
{
    fn layers(&self) -> &[u32] {
        &self.layers
    }

    fn d_in(&self) -> usize {
        self.d_in
    }

    fn context_len(&self) -> u64 {
        self.len
    }

    fn next_chunk(&mut self, max_positions: usize) -> Result<Option<ActivationChunk>> {
        if self.next >= self.len || max_positions == 0 {
            return Ok(None);
        }
        let n = (self.len - self.next).min(max_positions as u64) as usize;
        let n_layers = self.layers.len();
        let mut data = vec![0f32; n * n_layers * self.d_in];
        for (i, v) in data.chunks_exact_mut(self.d_in).enumerate() {
            (self.fill)(self.next + (i / n_layers) as u64, i % n_layers, v);
        }
        let chunk = ActivationChunk {
            start: self.next,
            len: n,
            n_layers,
            d_in: self.d_in,
            data,
        };
        self.next += n as u64;
        Ok(Some(chunk))
    }
}

fn eof_as_format(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("activation file truncated in {what}"))
        } else {
            Error::Io(e)
        }
    }
}

/// Header and token table of an `S3AC` file.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationHeader {
    pub context_len: u64,
    pub layers: Vec<u32>,
    pub d_in: usize,
    pub tokens: Vec<Token>,
}

pub fn read_header<R: Read>(r: &mut R) -> Result<ActivationHeader> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(Error::format("no records: activation file is empty"))
        }
        other => other?,
    }
    if &magic != ACTIVATION_MAGIC {
        return Err(Error::format("not an activation file (bad magic)"));
    }
    let header = eof_as_format("header");
    let version = r.read_u32::<LittleEndian>().map_err(&header)?;
    if version != ACTIVATION_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported activation format version {version}"
        )));
    }
    let context_len = r.read_u64::<LittleEndian>().map_err(&header)?;
    if context_len == 0 {
        return Err(Error::format(
            "no records: activation file has zero positions",
        ));
    }
    let n_layers = r.read_u32::<LittleEndian>().map_err(&header)? as usize;
    let mut layers = vec![0u32; n_layers];
    r.read_u32_into::<LittleEndian>(&mut layers)
        .map_err(&header)?;
    validate_layers(&layers).map_err(|e| Error::format(e.to_string()))?;
    let d_in = r.read_u32::<LittleEndian>().map_err(&header)? as usize;
    if d_in == 0 {
        return Err(Error::format("activation file declares d_in = 0"));
    }
    let table = eof_as_format("token table");
    let mut tokens = Vec::new();
    for _ in 0..context_len {
        let n = r.read_u32::<LittleEndian>().map_err(&table)? as usize;
        let mut bytes = vec![0u8; n];
        r.read_exact(&mut bytes).map_err(&table)?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::format("token is not valid UTF-8"))?;
        let offset = r.read_u64::<LittleEndian>().map_err(&table)?;
        tokens.push(Token { text, offset });
    }
    Ok(ActivationHeader {
        context_len,
        layers,
        d_in,
        tokens,
    })
}

/// Streaming `S3AC` reader; holds at most one chunk of vectors at a time.
pub struct ActivationReader<R> {
    reader: R,
    header: ActivationHeader,
    next: u64,
}

impl<R: Read> ActivationReader<R> {
    pub fn new(mut reader: R) -> Result<Self> {
        let header = read_header(&mut reader)?;
        Ok(ActivationReader {
            reader,
            header,
            next: 0,
        })
    }

    pub fn header(&self) -> &ActivationHeader {
        &self.header
    }

    pub fn tokens(&self) -> &[Token] {
        &self.header.tokens
    }

    fn read_position(&mut self, out: &mut [f32]) -> Result<()> {
        let n_layers = self.header.layers.len();
        let d_in = self.header.d_in;
        let mut filled = vec![false; n_layers];
        let rec = eof_as_format("records");
        for _ in 0..n_layers {
            let position = self.reader.read_u64::<LittleEndian>().map_err(&rec)?;
            if position != self.next {
                return Err(Error::format(format!(
                    "non-monotone positions: expected record for position {}, found {position}",
                    self.next
                )));
            }
            let layer = self.reader.read_u32::<LittleEndian>().map_err(&rec)?;
            let idx = self
                .header
                .layers
                .iter()
                .position(|&l| l == layer)
                .ok_or_else(|| Error::format(format!("record for undeclared layer {layer}")))?;
            if std::mem::replace(&mut filled[idx], true) {
                return Err(Error::format(format!(
                    "duplicate record for position {position} layer {layer}"
                )));
            }
            let slot = &mut out[idx * d_in..(idx + 1) * d_in];
            self.reader
                .read_f32_into::<LittleEndian>(slot)
                .map_err(&rec)?;
            if slot.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(format!(
                    "non-finite activation at position {position} layer {layer}"
                )));
            }
        }
        self.next += 1;
        Ok(())
    }

    fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        if self.reader.read(&mut probe)? != 0 {
            return Err(Error::format("trailing bytes after the last record"));
        }
        Ok(())
    }

    /// Reads everything into memory.
    pub fn into_stream(mut self) -> Result<ActivationStream> {
        let per_pos = self.header.layers.len() * self.header.d_in;
        let mut data = vec![0f32; self.header.context_len as usize * per_pos];
        for p in 0..self.header.context_len as usize {
            self.read_position(&mut data[p * per_pos..(p + 1) * per_pos])?;
        }
        self.expect_eof()?;
        let h = self.header;
        ActivationStream::new(h.tokens, h.layers, h.d_in, data)
    }
}

impl<R: Read> ActivationSource for ActivationReader<R> {
    fn layers(&self) -> &[u32] {
        &self.header.layers
    }

    fn d_in(&self) -> usize {
        self.header.d_in
    }

    fn context_len(&self) -> u64 {
        self.header.context_len
    }

    fn next_chunk(&mut self, max_positions: usize) -> Result<Option<ActivationChunk>> {
        let total = self.header.context_len;
        if self.next >= total || max_positions == 0 {
            return Ok(None);
        }
        let start = self.next;
        let n = (total - start).min(max_positions as u64) as usize;
        let n_layers = self.header.layers.len();
        let per_pos = n_layers * self.header.d_in;
        let mut data = vec![0f32; n * per_pos];
        for p in 0..n {
            self.read_position(&mut data[p * per_pos..(p + 1) * per_pos])?;
        }
        if self.next == total {
            self.expect_eof()?;
        }
        Ok(Some(ActivationChunk {
            start,
            len: n,
            n_layers,
            d_in: self.header.d_in,
            data,
        }))
    }
}

pub fn read_activations<R: Read>(r: R) -> Result<ActivationStream> {
    ActivationReader::new(r)?.into_stream()
}

pub fn write_activations<W: Write>(mut w: W, stream: &ActivationStream) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::input(
            "no records: refusing to write an empty activation stream",
        ));
    }
    w.write_all(ACTIVATION_MAGIC)?;
    w.write_u32::<LittleEndian>(ACTIVATION_FORMAT_VERSION)?;
    w.write_u64::<LittleEndian>(stream.len() as u64)?;
    w.write_u32::<LittleEndian>(stream.layers.len() as u32)?;
    for &l in &stream.layers {
        w.write_u32::<LittleEndian>(l)?;
    }
    w.write_u32::<LittleEndian>(stream.d_in as u32)?;
    for t in &stream.tokens {
        w.write_u32::<LittleEndian>(t.text.len() as u32)?;
        w.write_all(t.text.as_bytes())?;
        w.write_u64::<LittleEndian>(t.offset)?;
    }
    for p in 0..stream.len() {
        for (li, &layer) in stream.layers.iter().enumerate() {
            w.write_u64::<LittleEndian>(p as u64)?;
            w.write_u32::<LittleEndian>(layer)?;
            for &v in stream.vector(p, li) {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    Ok(())
}
