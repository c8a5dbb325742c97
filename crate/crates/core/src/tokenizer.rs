//! Coordinate tokens, sequence assembly and the output grammar.
//!
//! Vocabulary layout (ids in order): `K` coordinate bins shared by both
//! axes, then `LBRACK`, `SEP`, `RBRACK`, `BOS`, `EOS`, then `L` latent ids.
//! A detection list is emitted as
//!
//! ```text
//! BOS [latents] ( LBRACK x SEP y RBRACK ( SEP LBRACK x SEP y RBRACK )* )? EOS
//! ```
//!
//! with points in raster order of their quantized bins.

use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::scene::Point;

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Vocabulary {
    bins: u32,
    latents: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Coord(u32),
    LBrack,
    Sep,
    RBrack,
    Bos,
    Eos,
    Latent(u32),
}

impl Vocabulary {
    pub fn new(bins: u32, latents: u32) -> Result<Self, TokenizerError> {
        if bins < 2 {
            return Err(TokenizerError::TooFewBins(bins));
        }
        Ok(Self { bins, latents })
    }

    pub fn bins(&self) -> u32 {
        self.bins
    }

    pub fn latents(&self) -> u32 {
        self.latents
    }

    pub fn size(&self) -> usize {
        (self.bins + 5 + self.latents) as usize
    }

    pub fn lbrack(&self) -> TokenId {
        self.bins
    }

    pub fn sep(&self) -> TokenId {
        self.bins + 1
    }

    pub fn rbrack(&self) -> TokenId {
        self.bins + 2
    }

    pub fn bos(&self) -> TokenId {
        self.bins + 3
    }

    pub fn eos(&self) -> TokenId {
        self.bins + 4
    }

    pub fn latent(&self, i: u32) -> TokenId {
        debug_assert!(i < self.latents);
        self.bins + 5 + i
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        let k = self.bins;
        Some(match id {
            i if i < k => TokenKind::Coord(i),
            i if i == k => TokenKind::LBrack,
            i if i == k + 1 => TokenKind::Sep,
            i if i == k + 2 => TokenKind::RBrack,
            i if i == k + 3 => TokenKind::Bos,
            i if i == k + 4 => TokenKind::Eos,
            i if i < k + 5 + self.latents => TokenKind::Latent(i - k - 5),
            _ => return None,
        })
    }

    pub fn is_coord(&self, id: TokenId) -> bool {
        id < self.bins
    }

    /// Canonical textual description of the layout, used for checkpoint
    /// compatibility hashing.
    pub fn layout_descriptor(&self) -> alloc::string::String {
        let k = self.bins;
        alloc::format!("coord[0..{k}];LBRACK={};SEP={};RBRACK={};BOS={};EOS={};latent[{}..{}]", self.lbrack(), self.sep(), self.rbrack(), self.bos(), self.eos(), k + 5, k + 5 + self.latents,)
    }

    /// `BOS` followed by every latent id.
    pub fn prefix(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(1 + self.latents as usize);
        v.push(self.bos());
        v.extend((0..self.latents).map(|i| self.latent(i)));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    /// Per-token log-probabilities, present on sampled rollouts.
    pub logprobs: Option<Vec<f64>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids, logprobs: None }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_invariants(&self) -> bool {
        match &self.logprobs {
            None => true,
            Some(lp) => lp.len() == self.ids.len() && lp.iter().all(|v| v.is_finite()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenizerError {
    TooFewBins(u32),
    OutOfDomain(f64),
    BinOutOfRange { index: u32, bins: u32 },
    PointOutOfBounds { index: usize },
}

impl fmt::Display for TokenizerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenizerError::TooFewBins(k) => write!(f, "need at least 2 coordinate bins, got {k}"),
            TokenizerError::OutOfDomain(x) => write!(f, "normalized coordinate {x} outside [0, 1]"),
            TokenizerError::BinOutOfRange { index, bins } => write!(f, "bin {index} out of range for K={bins}"),
            TokenizerError::PointOutOfBounds { index } => write!(f, "point {index} is outside the scene"),
        }
    }
}

impl core::error::Error for TokenizerError {}

/// Nearest bin centre `(i + 0.5) / K`; exact ties go to the lower index.
pub fn quantize(x_norm: f64, bins: u32) -> Result<u32, TokenizerError> {
    if !(0.0..=1.0).contains(&x_norm) {
        return Err(TokenizerError::OutOfDomain(x_norm));
    }
    let k = bins as f64;
    let guess = ((x_norm * k) as u32).min(bins - 1);
    let lo = guess.saturating_sub(1);
    let hi = (guess + 1).min(bins - 1);
    let mut best = lo;
    let mut best_d = f64::INFINITY;
    for i in lo..=hi {
        let d = (x_norm - (i as f64 + 0.5) / k).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

pub fn dequantize(index: u32, bins: u32) -> Result<f64, TokenizerError> {
    if index >= bins {
        return Err(TokenizerError::BinOutOfRange { index, bins });
    }
    Ok((index as f64 + 0.5) / bins as f64)
}

fn point_bins(p: &Point, width: usize, height: usize, bins: u32) -> Result<(u32, u32), TokenizerError> {
    Ok((quantize(p.x / width as f64, bins)?, quantize(p.y / height as f64, bins)?))
}

/// Stable raster permutation: indices sorted by quantized `(y, x)` bins.
pub fn raster_order(points: &[Point], width: usize, height: usize, bins: u32) -> Result<Vec<usize>, TokenizerError> {
    let mut keyed = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        if !p.in_bounds(width, height) {
            return Err(TokenizerError::PointOutOfBounds { index: i });
        }
        let (bx, by) = point_bins(p, width, height, bins)?;
        keyed.push((by, bx, i));
    }
    // sort_by_key is stable
    keyed.sort_by_key(|&(by, bx, _)| (by, bx));
    Ok(keyed.into_iter().map(|(_, _, i)| i).collect())
}

pub fn raster_sort(points: &[Point], width: usize, height: usize, bins: u32) -> Result<Vec<Point>, TokenizerError> {
    Ok(raster_order(points, width, height, bins)?.into_iter().map(|i| points[i]).collect())
}

/// Tokenizes a detection list (without latent prefix).
pub fn encode_points(points: &[Point], width: usize, height: usize, vocab: &Vocabulary) -> Result<TokenSequence, TokenizerError> {
    let k = vocab.bins();
    let order = raster_order(points, width, height, k)?;
    let mut ids = Vec::with_capacity(encoded_len(points.len()));
    ids.push(vocab.bos());
    for (n, &i) in order.iter().enumerate() {
        if n > 0 {
            ids.push(vocab.sep());
        }
        let (bx, by) = point_bins(&points[i], width, height, k)?;
        ids.extend_from_slice(&[vocab.lbrack(), bx, vocab.sep(), by, vocab.rbrack()]);
    }
    ids.push(vocab.eos());
    Ok(TokenSequence::new(ids))
}

/// Length of `encode_points` output for `n` points.
pub const fn encoded_len(n: usize) -> usize {
    2 + 5 * n + n.saturating_sub(1)
}

/// Inserts the latent ids right after `BOS`.
pub fn with_latent_prefix(seq: &TokenSequence, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vocab.prefix();
    ids.extend(seq.ids.iter().skip(1).copied());
    TokenSequence::new(ids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    UnknownToken,
    MissingBos,
    ExpectedPairOrEos,
    MissingXToken,
    MissingInnerSeparator,
    MissingYToken,
    MissingRbrack,
    ExpectedSeparatorOrEos,
    TrailingSeparator,
    MissingLbrack,
    MissingEos,
    TokensAfterEos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FormatError {
    /// Index of the first offending token (equal to the sequence length when
    /// the sequence ended early).
    pub index: usize,
    pub kind: Violation,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "format violation {:?} at token {}", self.kind, self.index)
    }
}

impl core::error::Error for FormatError {}

/// What the grammar expects next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum GrammarState {
    Start = 0,
    Prefix,
    ExpectX,
    ExpectInnerSep,
    ExpectY,
    ExpectRbrack,
    ExpectSepOrEos,
    ExpectLbrack,
    Done,
    Invalid,
}

impl GrammarState {
    pub const COUNT: usize = 10;

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Single-pass recognizer with O(1) state. Also tracks the most recent x and
/// y bins, which the policy uses as conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarTracker {
    state: GrammarState,
    last_x: Option<u32>,
    last_y: Option<u32>,
}

impl Default for GrammarTracker {
    fn default() -> Self {
        Self::new()
    }
}

impl GrammarTracker {
    pub fn new() -> Self {
        Self { state: GrammarState::Start, last_x: None, last_y: None }
    }

    pub fn state(&self) -> GrammarState {
        self.state
    }

    pub fn last_x(&self) -> Option<u32> {
        self.last_x
    }

    pub fn last_y(&self) -> Option<u32> {
        self.last_y
    }

    /// Consumes one token. Once a violation occurs the tracker stays in
    /// [`GrammarState::Invalid`].
    pub fn push(&mut self, id: TokenId, vocab: &Vocabulary) -> Result<(), Violation> {
        use GrammarState as S;
        use TokenKind as T;
        if self.state == S::Invalid {
            return Err(Violation::UnknownToken);
        }
        let kind = match vocab.kind(id) {
            Some(k) => k,
            None => return self.fail(Violation::UnknownToken),
        };
        let next = match (self.state, kind) {
            (S::Start, T::Bos) => S::Prefix,
            (S::Start, _) => return self.fail(Violation::MissingBos),
            (S::Prefix, T::Latent(_)) => S::Prefix,
            (S::Prefix, T::LBrack) => S::ExpectX,
            (S::Prefix, T::Eos) => S::Done,
            (S::Prefix, _) => return self.fail(Violation::ExpectedPairOrEos),
            (S::ExpectX, T::Coord(b)) => {
                self.last_x = Some(b);
                S::ExpectInnerSep
            }
            (S::ExpectX, _) => return self.fail(Violation::MissingXToken),
            (S::ExpectInnerSep, T::Sep) => S::ExpectY,
            (S::ExpectInnerSep, _) => return self.fail(Violation::MissingInnerSeparator),
            (S::ExpectY, T::Coord(b)) => {
                self.last_y = Some(b);
                S::ExpectRbrack
            }
            (S::ExpectY, _) => return self.fail(Violation::MissingYToken),
            (S::ExpectRbrack, T::RBrack) => S::ExpectSepOrEos,
            (S::ExpectRbrack, _) => return self.fail(Violation::MissingRbrack),
            (S::ExpectSepOrEos, T::Sep) => S::ExpectLbrack,
            (S::ExpectSepOrEos, T::Eos) => S::Done,
            (S::ExpectSepOrEos, _) => return self.fail(Violation::ExpectedSeparatorOrEos),
            (S::ExpectLbrack, T::LBrack) => S::ExpectX,
            (S::ExpectLbrack, T::Eos) => return self.fail(Violation::TrailingSeparator),
            (S::ExpectLbrack, _) => return self.fail(Violation::MissingLbrack),
            (S::Done, _) => return self.fail(Violation::TokensAfterEos),
            (S::Invalid, _) => unreachable!(),
        };
        self.state = next;
        Ok(())
    }

    fn fail(&mut self, v: Violation) -> Result<(), Violation> {
        self.state = GrammarState::Invalid;
        Err(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDetections {
    pub points: Vec<Point>,
    /// Token index span (LBRACK through RBRACK, inclusive start, exclusive
    /// end) of each point; the x token sits at `start + 1`, y at `start + 3`.
    pub token_spans: Vec<Range<usize>>,
}

/// Checks the grammar and converts each pair's bins back to pixel centres.
pub fn parse_sequence(seq: &TokenSequence, width: usize, height: usize, vocab: &Vocabulary) -> Result<ParsedDetections, FormatError> {
    let k = vocab.bins();
    let mut tracker = GrammarTracker::new();
    let mut points = Vec::new();
    let mut spans = Vec::new();
    let mut pair_start = 0;
    let mut xb = 0;
    for (i, &id) in seq.ids.iter().enumerate() {
        let before = tracker.state();
        tracker.push(id, vocab).map_err(|kind| FormatError { index: i, kind })?;
        match before {
            GrammarState::Prefix | GrammarState::ExpectLbrack if id == vocab.lbrack() => pair_start = i,
            GrammarState::ExpectX => xb = id,
            GrammarState::ExpectRbrack => {
                let yb = tracker.last_y().unwrap_or(0);
                // the tracker only accepts coordinate ids, so both bins are < K
                let px = dequantize(xb, k).unwrap_or(0.0) * width as f64;
                let py = dequantize(yb, k).unwrap_or(0.0) * height as f64;
                points.push(Point::new(px, py));
                spans.push(pair_start..i + 1);
            }
            _ => {}
        }
    }
    if tracker.state() != GrammarState::Done {
        let kind = if tracker.state() == GrammarState::ExpectLbrack { Violation::TrailingSeparator } else { Violation::MissingEos };
        return Err(FormatError { index: seq.ids.len(), kind });
    }
    Ok(ParsedDetections { points, token_spans: spans })
}
