//! Fixed-position input layout.
//!
//! ```text
//! pos:  0      1 ..= q_max            q_max+1   q_max+2 ..        last
//!       [CLS]  query tokens, then PAD  [SEP]     document tokens   [SEP]
//! ```
//!
//! Queries are padded to `q_max` slots so a document always lands on the
//! same absolute positions, whatever query it is later joined with.

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const PAD_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
pub const MASK_ID: u32 = 3;
/// Ids below this are special tokens; the tokenizer never produces them.
pub const RESERVED_IDS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    ClsQ,
    Query,
    SepQ,
    Doc,
    SepD,
    Pad,
}

/// Which half of the query/document split a token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Query,
    Doc,
}

impl Side {
    /// `None` for padding, which belongs to neither half.
    pub fn group(self) -> Option<Group> {
        match self {
            Side::ClsQ | Side::Query | Side::SepQ => Some(Group::Query),
            Side::Doc | Side::SepD => Some(Group::Doc),
            Side::Pad => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    A,
    B,
}

impl Segment {
    pub fn index(self) -> usize {
        match self {
            Segment::A => 0,
            Segment::B => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub token_ids: Vec<u32>,
    pub segment_ids: Vec<Segment>,
    pub position_ids: Vec<u32>,
    pub sides: Vec<Side>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `[CLS]`, `q_max` query slots and `[SEP]` at positions `0..=q_max+1`.
    /// Queries longer than `q_max` are truncated.
    pub fn query_block(query: &[u32], cfg: &ModelConfig) -> Result<Self> {
        if query.is_empty() {
            return Err(Error::invalid("empty query"));
        }
        let q = &query[..query.len().min(cfg.q_max)];
        let mut seq = Self::with_capacity(cfg.q_max + 2);
        seq.push(CLS_ID, Segment::A, 0, Side::ClsQ);
        for slot in 0..cfg.q_max {
            let pos = (slot + 1) as u32;
            match q.get(slot) {
                Some(&t) => seq.push(t, Segment::A, pos, Side::Query),
                None => seq.push(PAD_ID, Segment::A, pos, Side::Pad),
            }
        }
        seq.push(SEP_ID, Segment::A, (cfg.q_max + 1) as u32, Side::SepQ);
        Ok(seq)
    }

    /// Document tokens and the trailing `[SEP]`, positioned after the query
    /// block. Documents longer than [`ModelConfig::max_doc_tokens`] are
    /// truncated.
    pub fn doc_block(doc: &[u32], cfg: &ModelConfig) -> Result<Self> {
        if doc.is_empty() {
            return Err(Error::invalid("empty document"));
        }
        let d = &doc[..doc.len().min(cfg.max_doc_tokens())];
        let start = cfg.q_max + 2;
        let mut seq = Self::with_capacity(d.len() + 1);
        for (k, &t) in d.iter().enumerate() {
            seq.push(t, Segment::B, (start + k) as u32, Side::Doc);
        }
        seq.push(SEP_ID, Segment::B, (start + d.len()) as u32, Side::SepD);
        Ok(seq)
    }

    /// The full `[CLS] q [SEP] d [SEP]` sequence.
    pub fn pair(query: &[u32], doc: &[u32], cfg: &ModelConfig) -> Result<Self> {
        let mut seq = Self::query_block(query, cfg)?;
        seq.extend(Self::doc_block(doc, cfg)?);
        Ok(seq)
    }

    pub fn extend(&mut self, other: Self) {
        self.token_ids.extend(other.token_ids);
        self.segment_ids.extend(other.segment_ids);
        self.position_ids.extend(other.position_ids);
        self.sides.extend(other.sides);
    }

    /// Indices of the document half (document tokens and their `[SEP]`).
    pub fn doc_rows(&self) -> Vec<usize> {
        self.rows_in(Group::Doc)
    }

    pub fn query_rows(&self) -> Vec<usize> {
        self.rows_in(Group::Query)
    }

    fn rows_in(&self, g: Group) -> Vec<usize> {
        self.sides
            .iter()
            .enumerate()
            .filter(|(_, s)| s.group() == Some(g))
            .map(|(i, _)| i)
            .collect()
    }

    fn with_capacity(n: usize) -> Self {
        Self {
            token_ids: Vec::with_capacity(n),
            segment_ids: Vec::with_capacity(n),
            position_ids: Vec::with_capacity(n),
            sides: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, token: u32, segment: Segment, position: u32, side: Side) {
        self.token_ids.push(token);
        self.segment_ids.push(segment);
        self.position_ids.push(position);
        self.sides.push(side);
    }
}
