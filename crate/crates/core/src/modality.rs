//! Multimodal token sequences.
//!
//! A sequence is a token matrix plus a segmentation into contiguous,
//! non-overlapping modality blocks that cover every row exactly once
//! (for example image tokens followed by text tokens).

use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalityId(pub u32);

impl ModalityId {
    pub const VISUAL: ModalityId = ModalityId(0);
    pub const TEXT: ModalityId = ModalityId(1);
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ModalityId::VISUAL => f.write_str("visual"),
            ModalityId::TEXT => f.write_str("text"),
            ModalityId(m) => write!(f, "m{m}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub modality: ModalityId,
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Ordered, gap-free partition of `[0, n)` into modality blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct Segmentation {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for Segmentation {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        Segmentation::new(segments)
    }
}

impl From<Segmentation> for Vec<Segment> {
    fn from(s: Segmentation) -> Self {
        s.segments
    }
}

impl Segmentation {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::InvalidSegmentation("no segments".into()));
        }
        let mut cursor = 0;
        for (i, s) in segments.iter().enumerate() {
            if s.start != cursor {
                return Err(Error::InvalidSegmentation(format!(
                    "segment {i} starts at {} but previous block ended at {cursor}",
                    s.start
                )));
            }
            if s.len == 0 {
                return Err(Error::InvalidSegmentation(format!("segment {i} is empty")));
            }
            if segments[..i].iter().any(|p| p.modality == s.modality) {
                return Err(Error::DuplicateModality(s.modality.0));
            }
            cursor = s.end();
        }
        Ok(Segmentation { segments })
    }

    /// Builds a segmentation from `(modality, length)` pairs laid out in order.
    pub fn from_lengths(parts: &[(ModalityId, usize)]) -> Result<Self> {
        let mut start = 0;
        let segs = parts
            .iter()
            .map(|&(modality, len)| {
                let s = Segment {
                    modality,
                    start,
                    len,
                };
                start += len;
                s
            })
            .collect();
        Segmentation::new(segs)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Total token count.
    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, Segment::end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn modalities(&self) -> impl Iterator<Item = ModalityId> + '_ {
        self.segments.iter().map(|s| s.modality)
    }

    pub fn get(&self, m: ModalityId) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.modality == m)
            .ok_or(Error::UnknownModality(m.0))
    }

    /// Position of modality `m` in the segment order.
    pub fn position(&self, m: ModalityId) -> Result<usize> {
        self.segments
            .iter()
            .position(|s| s.modality == m)
            .ok_or(Error::UnknownModality(m.0))
    }

    pub fn modality_of(&self, token: usize) -> Option<ModalityId> {
        self.segments
            .iter()
            .find(|s| s.range().contains(&token))
            .map(|s| s.modality)
    }

    /// Token indices of the focus modality, ascending.
    pub fn focus_indices(&self, pair: &ModalityPair) -> Result<Vec<usize>> {
        self.check_pair(pair)?;
        Ok(self.get(pair.focus)?.range().collect())
    }

    /// Token indices of every rest modality, in sequence order.
    pub fn rest_indices(&self, pair: &ModalityPair) -> Result<Vec<usize>> {
        self.check_pair(pair)?;
        Ok(self
            .segments
            .iter()
            .filter(|s| pair.rest.contains(&s.modality))
            .flat_map(Segment::range)
            .collect())
    }

    fn check_pair(&self, pair: &ModalityPair) -> Result<()> {
        self.get(pair.focus)?;
        for &r in &pair.rest {
            self.get(r)?;
        }
        if pair.rest.len() + 1 != self.segments.len() {
            return Err(Error::InvalidSegmentation(format!(
                "pair covers {} of {} modalities",
                pair.rest.len() + 1,
                self.segments.len()
            )));
        }
        Ok(())
    }
}

/// Focus modality `m` against the rest `m̄`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityPair {
    pub focus: ModalityId,
    pub rest: Vec<ModalityId>,
}

impl ModalityPair {
    /// Pair with `focus` against every other modality of `seg`.
    pub fn focus_on(seg: &Segmentation, focus: ModalityId) -> Result<Self> {
        seg.get(focus)?;
        Ok(ModalityPair {
            focus,
            rest: seg.modalities().filter(|&m| m != focus).collect(),
        })
    }
}

/// Token matrix plus its modality segmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSequence", into = "RawSequence")]
pub struct ModalSequence {
    tokens: Matrix,
    segmentation: Segmentation,
}

#[derive(Serialize, Deserialize)]
struct RawSequence {
    tokens: Matrix,
    segmentation: Segmentation,
}

impl TryFrom<RawSequence> for ModalSequence {
    type Error = Error;

    fn try_from(r: RawSequence) -> Result<Self> {
        ModalSequence::new(r.tokens, r.segmentation)
    }
}

impl From<ModalSequence> for RawSequence {
    fn from(s: ModalSequence) -> Self {
        RawSequence {
            tokens: s.tokens,
            segmentation: s.segmentation,
        }
    }
}

impl ModalSequence {
    pub fn new(tokens: Matrix, segmentation: Segmentation) -> Result<Self> {
        if segmentation.len() != tokens.rows() {
            return Err(Error::InvalidSegmentation(format!(
                "segmentation covers {} tokens but matrix has {} rows",
                segmentation.len(),
                tokens.rows()
            )));
        }
        Ok(ModalSequence {
            tokens,
            segmentation,
        })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn segmentation(&self) -> &Segmentation {
        &self.segmentation
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Copy of the rows belonging to modality `m`.
    pub fn segment(&self, m: ModalityId) -> Result<Matrix> {
        let s = self.segmentation.get(m)?;
        let idx: Vec<usize> = s.range().collect();
        Ok(self.tokens.select_rows(&idx))
    }
}

/// Stacks per-modality token blocks into one sequence, in the given order.
pub fn concat(parts: &[(ModalityId, Matrix)]) -> Result<ModalSequence> {
    let Some((_, first)) = parts.first() else {
        return Err(Error::InvalidSegmentation("no parts".into()));
    };
    let d = first.cols();
    for (i, (m, p)) in parts.iter().enumerate() {
        if p.cols() != d {
            return Err(Error::DimMismatch {
                expected: d,
                found: p.cols(),
            });
        }
        if parts[..i].iter().any(|(q, _)| q == m) {
            return Err(Error::DuplicateModality(m.0));
        }
    }
    let mut data = Vec::new();
    for (_, p) in parts {
        data.extend_from_slice(p.data());
    }
    let n: usize = parts.iter().map(|(_, p)| p.rows()).sum();
    let lens: Vec<(ModalityId, usize)> = parts.iter().map(|(m, p)| (*m, p.rows())).collect();
    ModalSequence::new(Matrix::new(n, d, data)?, Segmentation::from_lengths(&lens)?)
}
