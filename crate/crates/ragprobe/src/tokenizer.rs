// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic word-piece tokenizer with exact text/token alignment.
//!
//! The interpretability passes in this crate reason about *token positions*
//! (subject span, attribute span, context span), so the tokenizer's job is
//! less about compression and more about bookkeeping:
//!
//! * **Greedy longest-match** over a fixed vocabulary, with **byte fallback**:
//!   every one of the 256 byte values has a token id, so `encode` is total —
//!   any string tokenizes without an UNK token.
//! * **Exact offsets**: every token carries the half-open byte range of the
//!   input it covers. Offsets partition the input — no gaps, no overlaps —
//!   which is what makes span lookup ([`find_span`]) exact. Offsets are byte
//!   offsets into the UTF-8 text; byte-fallback can split one multi-byte
//!   character across several tokens and byte offsets represent that split
//!   exactly where character offsets could not.
//! * **Round-trip identity**: `decode(encode(s)) == s` for every string.
//!
//! A vocabulary is stored as a text file, one token per line, where the line
//! number is the token id. See [`Vocabulary::from_file`] for the escape rules.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Number of reserved byte-fallback tokens.
pub const NUM_BYTE_TOKENS: usize = 256;

/// One entry of a [`Vocabulary`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Piece {
    /// Fallback token for a single raw byte.
    Byte(u8),
    /// Beginning-of-sequence marker. Never produced by text matching.
    Bos,
    /// An ordinary text token (any non-empty UTF-8 string).
    Text(String),
}

/// A token vocabulary with dense ids in `[0, len)`.
///
/// Invariants enforced at construction:
/// * all 256 byte-fallback pieces are present,
/// * at most one BOS piece,
/// * text pieces are non-empty and unique.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<Piece>,
    byte_ids: [u32; NUM_BYTE_TOKENS],
    bos_id: Option<u32>,
    /// Text pieces bucketed by first byte, each bucket sorted longest-first,
    /// so greedy matching scans only plausible candidates.
    index: HashMap<u8, Vec<(u32, Vec<u8>)>>,
}

impl Vocabulary {
    /// Build a vocabulary from an explicit piece list (ids = indices).
    pub fn new(pieces: Vec<Piece>) -> Result<Self> {
        let mut byte_ids = [u32::MAX; NUM_BYTE_TOKENS];
        let mut bos_id = None;
        let mut index: HashMap<u8, Vec<(u32, Vec<u8>)>> = HashMap::new();
        let mut seen_text: HashMap<&str, u32> = HashMap::new();

        for (id, piece) in pieces.iter().enumerate() {
            let id = id as u32;
            match piece {
                Piece::Byte(b) => {
                    if byte_ids[*b as usize] != u32::MAX {
                        return Err(Error::VocabParse {
                            line: id as usize,
                            message: format!("duplicate byte token for 0x{b:02x}"),
                        });
                    }
                    byte_ids[*b as usize] = id;
                }
                Piece::Bos => {
                    if bos_id.is_some() {
                        return Err(Error::VocabParse {
                            line: id as usize,
                            message: "duplicate <bos> token".into(),
                        });
                    }
                    bos_id = Some(id);
                }
                Piece::Text(t) => {
                    if t.is_empty() {
                        return Err(Error::VocabParse {
                            line: id as usize,
                            message: "empty text token".into(),
                        });
                    }
                    if let Some(prev) = seen_text.insert(t.as_str(), id) {
                        return Err(Error::VocabParse {
                            line: id as usize,
                            message: format!("text token {t:?} duplicates id {prev}"),
                        });
                    }
                    let bytes = t.as_bytes().to_vec();
                    index.entry(bytes[0]).or_default().push((id, bytes));
                }
            }
        }

        for (b, id) in byte_ids.iter().enumerate() {
            if *id == u32::MAX {
                return Err(Error::VocabParse {
                    line: 0,
                    message: format!("missing byte-fallback token for 0x{b:02x}"),
                });
            }
        }

        // Longest-first within a bucket; ties cannot happen (spellings are
        // unique), so the order is total and matching is deterministic.
        for bucket in index.values_mut() {
            bucket.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        }

        Ok(Vocabulary {
            pieces,
            byte_ids,
            bos_id,
            index,
        })
    }

    /// Standard layout used by the toy models and tests: byte tokens at ids
    /// `0..=255`, BOS at `256`, then `words` in the given order.
    pub fn standard(words: &[&str]) -> Result<Self> {
        let mut pieces: Vec<Piece> = (0..=255u8).map(Piece::Byte).collect();
        pieces.push(Piece::Bos);
        pieces.extend(words.iter().map(|w| Piece::Text((*w).to_string())));
        Vocabulary::new(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn bos_id(&self) -> Option<u32> {
        self.bos_id
    }

    pub fn piece(&self, id: u32) -> Option<&Piece> {
        self.pieces.get(id as usize)
    }

    /// Id of a text piece with exactly this spelling, if present.
    pub fn text_id(&self, spelling: &str) -> Option<u32> {
        let bytes = spelling.as_bytes();
        self.index
            .get(bytes.first()?)?
            .iter()
            .find(|(_, b)| b == bytes)
            .map(|(id, _)| *id)
    }

    // ------------------------------------------------------------------
    // File format
    // ------------------------------------------------------------------
    //
    // One token per line; the line number (0-based) is the token id.
    //   <bos>        the BOS piece
    //   <byte:hh>    byte-fallback piece for byte 0xhh (two lowercase hex digits)
    //   anything else: a text piece, unescaped with  \\  \n  \t  \r  \<
    // A text token that literally starts with `<` is written with a leading
    // `\<` so it cannot collide with the special forms.

    /// Load a vocabulary from its text file format.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pieces = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line == "<bos>" {
                pieces.push(Piece::Bos);
            } else if let Some(hex) = line.strip_prefix("<byte:").and_then(|s| s.strip_suffix('>'))
            {
                let b = u8::from_str_radix(hex, 16).map_err(|_| Error::VocabParse {
                    line: lineno,
                    message: format!("bad byte token {line:?}"),
                })?;
                pieces.push(Piece::Byte(b));
            } else {
                pieces.push(Piece::Text(unescape(line, lineno)?));
            }
        }
        Vocabulary::new(pieces)
    }

    /// Serialize to the text file format. Round-trips through
    /// [`Vocabulary::from_file`].
    pub fn to_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Bos => out.push_str("<bos>"),
                Piece::Byte(b) => out.push_str(&format!("<byte:{b:02x}>")),
                Piece::Text(t) => out.push_str(&escape(t)),
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    // ------------------------------------------------------------------
    // Encode / decode
    // ------------------------------------------------------------------

    /// Tokenize `text`. With `add_bos`, the BOS token (zero-width offsets) is
    /// prepended when the vocabulary has one.
    ///
    /// Matching is greedy longest-match over text pieces; where no text piece
    /// matches, one byte-fallback token is emitted for the next byte. The
    /// returned offsets partition `[0, text.len())` (BOS covers the empty
    /// range `[0, 0)`).
    pub fn encode(&self, text: &str, add_bos: bool) -> Encoding {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        if add_bos {
            if let Some(bos) = self.bos_id {
                ids.push(bos);
                offsets.push((0usize, 0usize));
            }
        }
        let mut pos = 0usize;
        while pos < bytes.len() {
            let mut matched: Option<(u32, usize)> = None;
            if let Some(bucket) = self.index.get(&bytes[pos]) {
                for (id, piece) in bucket {
                    if bytes[pos..].starts_with(piece) {
                        matched = Some((*id, piece.len()));
                        break; // buckets are longest-first
                    }
                }
            }
            let (id, len) = matched.unwrap_or((self.byte_ids[bytes[pos] as usize], 1));
            ids.push(id);
            offsets.push((pos, pos + len));
            pos += len;
        }
        Encoding { ids, offsets }
    }

    /// Inverse of [`Vocabulary::encode`]. BOS tokens decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for id in ids {
            match self.pieces.get(*id as usize) {
                Some(Piece::Byte(b)) => bytes.push(*b),
                Some(Piece::Bos) => {}
                Some(Piece::Text(t)) => bytes.extend_from_slice(t.as_bytes()),
                None => {
                    return Err(Error::TokenOutOfRange {
                        token: *id,
                        vocab_size: self.pieces.len(),
                    })
                }
            }
        }
        String::from_utf8(bytes).map_err(|_| Error::InvalidUtf8)
    }
}

fn escape(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    let mut first = true;
    for c in t.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            '<' if first => out.push_str("\\<"),
            c => out.push(c),
        }
        first = false;
    }
    out
}

fn unescape(line: &str, lineno: usize) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('<') => out.push('<'),
            other => {
                return Err(Error::VocabParse {
                    line: lineno,
                    message: format!("bad escape \\{}", other.map(String::from).unwrap_or_default()),
                })
            }
        }
    }
    Ok(out)
}

/// Result of tokenizing one string: ids plus the byte range each token covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// Half-open byte offsets into the encoded text, one per token.
    pub offsets: Vec<(usize, usize)>,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Index of the token whose byte range contains `byte` (zero-width
    /// tokens never match).
    pub fn token_at_byte(&self, byte: usize) -> Option<usize> {
        self.offsets
            .iter()
            .position(|(s, e)| *s <= byte && byte < *e)
    }
}

/// What a token span denotes within a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanLabel {
    Subject,
    Attribute,
    Context,
    Query,
    Control,
}

impl fmt::Display for SpanLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SpanLabel::Subject => "subject",
            SpanLabel::Attribute => "attribute",
            SpanLabel::Context => "context",
            SpanLabel::Query => "query",
            SpanLabel::Control => "control",
        };
        f.write_str(s)
    }
}

/// A labelled, contiguous run of tokens with its byte range in the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenSpan {
    /// First token index (inclusive).
    pub start: usize,
    /// One past the last token index.
    pub end: usize,
    /// Byte range of the covered text.
    pub byte_start: usize,
    pub byte_end: usize,
    pub label: SpanLabel,
}

impl TokenSpan {
    pub fn token_len(&self) -> usize {
        self.end - self.start
    }

    pub fn contains(&self, token_index: usize) -> bool {
        self.start <= token_index && token_index < self.end
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Which occurrence of a needle [`find_span`] should resolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occurrence {
    First,
    Last,
    /// Error (listing all byte offsets) unless the needle occurs exactly once.
    RequireUnique,
}

/// Resolve `needle` to the smallest token span of `enc` covering one of its
/// occurrences in `text`.
///
/// Matching is plain substring matching. When token boundaries do not line up
/// with the needle's byte range, the span widens to the smallest run of
/// tokens that covers it.
pub fn find_span(
    text: &str,
    enc: &Encoding,
    needle: &str,
    policy: Occurrence,
    label: SpanLabel,
) -> Result<TokenSpan> {
    find_span_in(text, enc, needle, policy, label, 0..text.len())
}

/// [`find_span`] restricted to occurrences inside `range` (byte offsets).
pub fn find_span_in(
    text: &str,
    enc: &Encoding,
    needle: &str,
    policy: Occurrence,
    label: SpanLabel,
    range: std::ops::Range<usize>,
) -> Result<TokenSpan> {
    if needle.is_empty() {
        return Err(Error::SpanNotFound {
            needle: needle.into(),
        });
    }
    let hay = &text[range.clone()];
    let occurrences: Vec<usize> = hay
        .match_indices(needle)
        .map(|(i, _)| i + range.start)
        .collect();
    let byte_start = match (&policy, occurrences.as_slice()) {
        (_, []) => {
            return Err(Error::SpanNotFound {
                needle: needle.into(),
            })
        }
        (Occurrence::First, occ) => occ[0],
        (Occurrence::Last, occ) => *occ.last().unwrap(),
        (Occurrence::RequireUnique, [only]) => *only,
        (Occurrence::RequireUnique, _) => {
            return Err(Error::SpanAmbiguous {
                needle: needle.into(),
                offsets: occurrences,
            })
        }
    };
    span_from_byte_range(enc, byte_start, byte_start + needle.len(), label)
}

/// Smallest token span of `enc` covering the byte range `[byte_start, byte_end)`.
pub fn span_from_byte_range(
    enc: &Encoding,
    byte_start: usize,
    byte_end: usize,
    label: SpanLabel,
) -> Result<TokenSpan> {
    if byte_end <= byte_start {
        return Err(Error::SpanNotFound {
            needle: String::new(),
        });
    }
    let first = enc.token_at_byte(byte_start);
    let last = enc.token_at_byte(byte_end - 1);
    match (first, last) {
        (Some(a), Some(b)) => Ok(TokenSpan {
            start: a,
            end: b + 1,
            byte_start: enc.offsets[a].0,
            byte_end: enc.offsets[b].1,
            label,
        }),
        _ => Err(Error::SpanNotFound {
            needle: String::new(),
        }),
    }
}

// ======================================================================
// Tests
// ======================================================================

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::standard(words).expect("vocab builds")
    }

    /// Independent oracle: token offsets must partition `[0, text.len())` in
    /// order, ignoring zero-width specials.
    fn assert_partition(text: &str, enc: &Encoding) {
        let mut cursor = 0usize;
        for (i, (s, e)) in enc.offsets.iter().enumerate() {
            if s == e {
                continue; // zero-width special (BOS)
            }
            assert_eq!(*s, cursor, "gap/overlap before token {i} in {text:?}");
            assert!(e > s);
            cursor = *e;
        }
        assert_eq!(cursor, text.len(), "offsets do not cover {text:?}");
    }

    #[test]
    fn greedy_longest_match_basic() {
        let v = vocab(&["ab", " cd", "a", "b", "c", "d", " "]);
        let enc = v.encode("ab cd", false);
        assert_eq!(
            enc.ids,
            vec![v.text_id("ab").unwrap(), v.text_id(" cd").unwrap()]
        );
        assert_eq!(enc.offsets, vec![(0, 2), (2, 5)]);
        assert_partition("ab cd", &enc);
    }

    #[test]
    fn empty_input_yields_no_tokens() {
        let v = vocab(&["x"]);
        assert!(v.encode("", false).ids.is_empty());
        let with_bos = v.encode("", true);
        assert_eq!(with_bos.ids, vec![v.bos_id().unwrap()]);
        assert_eq!(with_bos.offsets, vec![(0, 0)]);
    }

    #[test]
    fn byte_fallback_handles_oov_and_utf8() {
        let v = vocab(&["hello"]);
        let text = "hello Zoë";
        let enc = v.encode(text, false);
        // "hello" as one piece, everything else as single bytes ("ë" is two).
        assert_eq!(enc.ids.len(), 1 + " Zo".len() + 2);
        assert_partition(text, &enc);
        assert_eq!(v.decode(&enc.ids).unwrap(), text);
    }

    #[test]
    fn round_trip_with_bos() {
        let v = vocab(&["Eavan", " Boland", " was", " born", " in"]);
        let text = "Eavan Boland was born in";
        let enc = v.encode(text, true);
        assert_eq!(enc.ids.len(), 6); // BOS + 5 words
        assert_eq!(v.decode(&enc.ids).unwrap(), text);
        assert_partition(text, &enc);
    }

    #[test]
    fn find_span_first_occurrence() {
        let v = vocab(&["Eavan", " Boland", " was", " born", " in"]);
        let text = "Eavan Boland was born in";
        let enc = v.encode(text, false);
        let span = find_span(text, &enc, "Eavan Boland", Occurrence::First, SpanLabel::Subject)
            .unwrap();
        assert_eq!((span.start, span.end), (0, 2));
        assert_eq!((span.byte_start, span.byte_end), (0, 12));
    }

    #[test]
    fn find_span_bos_shifts_token_indices() {
        let v = vocab(&["Eavan", " Boland", " was", " born", " in"]);
        let text = "Eavan Boland was born in";
        let enc = v.encode(text, true);
        let span =
            find_span(text, &enc, "Eavan Boland", Occurrence::First, SpanLabel::Subject).unwrap();
        assert_eq!((span.start, span.end), (1, 3));
    }

    #[test]
    fn find_span_require_unique_rejects_ambiguity() {
        let v = vocab(&["the", " cat", " and", " dog", " the"]);
        let text = "the cat and the dog";
        let enc = v.encode(text, false);
        let err = find_span(text, &enc, "the", Occurrence::RequireUnique, SpanLabel::Subject)
            .unwrap_err();
        match err {
            Error::SpanAmbiguous { offsets, .. } => assert_eq!(offsets, vec![0, 12]),
            other => panic!("expected ambiguity error, got {other}"),
        }
        // First/Last still resolve.
        let first =
            find_span(text, &enc, "the", Occurrence::First, SpanLabel::Subject).unwrap();
        assert_eq!(first.byte_start, 0);
        let last = find_span(text, &enc, "the", Occurrence::Last, SpanLabel::Subject).unwrap();
        // The needle matches at byte 12, but the covering token is " the"
        // (bytes 11..15): spans widen to token boundaries.
        assert_eq!(last.byte_start, 11);
        assert_eq!((last.start, last.end), (3, 4));
    }

    #[test]
    fn find_span_missing_needle_errors() {
        let v = vocab(&["a"]);
        let text = "aaa";
        let enc = v.encode(text, false);
        assert!(matches!(
            find_span(text, &enc, "zzz", Occurrence::First, SpanLabel::Subject),
            Err(Error::SpanNotFound { .. })
        ));
    }

    #[test]
    fn span_widens_to_covering_tokens() {
        // Needle "lan" straddles the middle of the single token " Boland":
        // the smallest covering span is that whole token.
        let v = vocab(&["Eavan", " Boland"]);
        let text = "Eavan Boland";
        let enc = v.encode(text, false);
        let span = find_span(text, &enc, "lan", Occurrence::First, SpanLabel::Subject).unwrap();
        assert_eq!((span.start, span.end), (1, 2));
        assert_eq!((span.byte_start, span.byte_end), (5, 12));
    }

    #[test]
    fn find_span_in_restricts_range() {
        let v = vocab(&["the", " cat", " the"]);
        let text = "the cat the";
        let enc = v.encode(text, false);
        // Restricted to the tail, "the" is unique; the covering token is
        // " the" (bytes 7..11).
        let span = find_span_in(
            text,
            &enc,
            "the",
            Occurrence::RequireUnique,
            SpanLabel::Attribute,
            4..text.len(),
        )
        .unwrap();
        assert_eq!(span.byte_start, 7);
        assert_eq!((span.start, span.end), (2, 3));
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = vocab(&["hello", " world", "line\nbreak", "tab\there", "back\\slash", "<angle>"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.vocab");
        v.to_file(&path).unwrap();
        let reloaded = Vocabulary::from_file(&path).unwrap();
        assert_eq!(reloaded.len(), v.len());
        for id in 0..v.len() as u32 {
            assert_eq!(reloaded.piece(id), v.piece(id), "piece {id} differs");
        }
        // The tricky spellings still tokenize identically.
        let text = "hello world line\nbreak <angle>";
        assert_eq!(reloaded.encode(text, false), v.encode(text, false));
    }

    #[test]
    fn missing_byte_tokens_rejected() {
        // Only text pieces: construction must fail loudly.
        let err = Vocabulary::new(vec![Piece::Text("a".into())]).unwrap_err();
        assert!(err.to_string().contains("missing byte-fallback"));
    }

    #[test]
    fn duplicate_text_piece_rejected() {
        let err = Vocabulary::standard(&["dup", "dup"]).unwrap_err();
        assert!(err.to_string().contains("duplicates"));
    }

    #[test]
    fn decode_skips_bos_and_rejects_bad_ids() {
        let v = vocab(&["hi"]);
        let bos = v.bos_id().unwrap();
        assert_eq!(v.decode(&[bos, v.text_id("hi").unwrap()]).unwrap(), "hi");
        assert!(matches!(
            v.decode(&[9_999_999]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    proptest! {
        /// Round-trip identity over arbitrary unicode strings.
        #[test]
        fn prop_round_trip(text in "\\PC{0,60}", add_bos in proptest::bool::ANY) {
            let v = vocab(&["the", " the", "he", " ", "ab", "abc", "é", "日本"]);
            let enc = v.encode(&text, add_bos);
            prop_assert_eq!(v.decode(&enc.ids).unwrap(), text.clone());
            assert_partition(&text, &enc);
        }

        /// Tokenizing a concatenation whose final encoding happens to place a
        /// token boundary at the seam produces exactly the prefix's tokens
        /// before the seam.
        #[test]
        fn prop_prefix_stable_at_token_edges(
            a in "[ab c]{0,24}",
            b in "[ab c]{0,24}",
        ) {
            let v = vocab(&["ab", " cd", "a", "b", "c", " "]);
            let joined = format!("{a}{b}");
            let enc_joined = v.encode(&joined, false);
            let boundary = a.len();
            if enc_joined.offsets.iter().any(|(s, _)| *s == boundary)
                || boundary == joined.len()
            {
                let enc_prefix = v.encode(&a, false);
                let upto = enc_joined
                    .offsets
                    .iter()
                    .position(|(s, _)| *s >= boundary)
                    .unwrap_or(enc_joined.ids.len());
                prop_assert_eq!(&enc_joined.ids[..upto], &enc_prefix.ids[..]);
            }
        }
    }
}
