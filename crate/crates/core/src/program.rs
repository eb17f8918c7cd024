//! Target programs as opaque text with marked evolvable regions.
//!
//! A program is split into alternating *outside* segments and block bodies:
//!
//! ```text
//! segment[0]  (prefix, through the first START marker line)
//! body[0]
//! segment[1]  (END marker line .. next START marker line)
//! ...
//! segment[n]  (last END marker line through end of file)
//! ```
//!
//! Concatenating the pieces in order reproduces the normalized text exactly.
//! Only block bodies may change between variants of the same program.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const START_MARKER: &str = "EVOLVE-BLOCK-START";
pub const END_MARKER: &str = "EVOLVE-BLOCK-END";

#[derive(Debug, Error, Clone)]
pub enum ProgramError {
    #[error("unbalanced EVOLVE-BLOCK markers at line {line}: {detail}")]
    UnbalancedMarkers { line: usize, detail: String },
    #[error("modification references unknown block index {0}")]
    UnknownBlockIndex(usize),
    #[error("replacement for block {0} contains an EVOLVE-BLOCK marker line")]
    MarkerInReplacement(usize),
    #[error("modification sequence is full (bound {0})")]
    SequenceFull(usize),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::sync::Arc<std::io::Error>,
    },
}

pub type Result<T> = std::result::Result<T, ProgramError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineEnding {
    #[default]
    Lf,
    CrLf,
}

impl LineEnding {
    /// CRLF only when every newline in `text` is preceded by `\r`; anything
    /// mixed is kept verbatim as LF text so reconstruction stays byte-exact.
    fn detect(text: &str) -> Self {
        let newlines = text.matches('\n').count();
        if newlines > 0 && text.matches("\r\n").count() == newlines {
            LineEnding::CrLf
        } else {
            LineEnding::Lf
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvolveBlock {
    pub index: usize,
    pub body: String,
    /// First body line, 1-based.
    pub start_line: usize,
    /// Last body line, 1-based. `end_line < start_line` for an empty body.
    pub end_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceProgram {
    full_text: String,
    line_ending: LineEnding,
    segments: Vec<String>,
    blocks: Vec<EvolveBlock>,
    origin_path: Option<PathBuf>,
}

fn is_marker(line: &str) -> bool {
    line.contains(START_MARKER) || line.contains(END_MARKER)
}

/// Splits text into lines that keep their trailing `\n`.
fn lines_inclusive(text: &str) -> impl Iterator<Item = &str> {
    text.split_inclusive('\n')
}

/// Splits normalized text into outside segments and block bodies.
fn split_blocks(text: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut segments = Vec::new();
    let mut bodies = Vec::new();
    let mut current = String::new();
    let mut in_block = false;

    for (i, line) in lines_inclusive(text).enumerate() {
        let lineno = i + 1;
        let has_start = line.contains(START_MARKER);
        let has_end = line.contains(END_MARKER);
        if has_start && has_end {
            return Err(ProgramError::UnbalancedMarkers {
                line: lineno,
                detail: "START and END on the same line".into(),
            });
        }
        if has_start {
            if in_block {
                return Err(ProgramError::UnbalancedMarkers {
                    line: lineno,
                    detail: "nested START marker".into(),
                });
            }
            if !line.ends_with('\n') {
                return Err(ProgramError::UnbalancedMarkers {
                    line: lineno,
                    detail: "START marker on the final line".into(),
                });
            }
            current.push_str(line);
            segments.push(std::mem::take(&mut current));
            in_block = true;
        } else if has_end {
            if !in_block {
                return Err(ProgramError::UnbalancedMarkers {
                    line: lineno,
                    detail: "END marker without START".into(),
                });
            }
            bodies.push(std::mem::take(&mut current));
            current.push_str(line);
            in_block = false;
        } else {
            current.push_str(line);
        }
    }
    if in_block {
        let line = text.lines().count();
        return Err(ProgramError::UnbalancedMarkers {
            line,
            detail: "START marker without END".into(),
        });
    }
    segments.push(current);
    Ok((segments, bodies))
}

fn number_blocks(segments: &[String], bodies: Vec<String>) -> Vec<EvolveBlock> {
    let mut line = 0usize;
    bodies
        .into_iter()
        .enumerate()
        .map(|(index, body)| {
            line += segments[index].matches('\n').count();
            let start_line = line + 1;
            let n = body.matches('\n').count();
            line += n;
            EvolveBlock {
                index,
                body,
                start_line,
                end_line: start_line + n - 1,
            }
        })
        .collect()
}

fn normalize(text: &str) -> (String, LineEnding) {
    match LineEnding::detect(text) {
        LineEnding::CrLf => (text.replace("\r\n", "\n"), LineEnding::CrLf),
        LineEnding::Lf => (text.to_string(), LineEnding::Lf),
    }
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn short_digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
}

/// Parses `text` into a program, delimiting every `EVOLVE-BLOCK-START` /
/// `EVOLVE-BLOCK-END` pair.
pub fn extract_blocks(text: &str) -> Result<SourceProgram> {
    let (full_text, line_ending) = normalize(text);
    let (segments, bodies) = split_blocks(&full_text)?;
    let blocks = number_blocks(&segments, bodies);
    Ok(SourceProgram {
        full_text,
        line_ending,
        segments,
        blocks,
        origin_path: None,
    })
}

impl SourceProgram {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ProgramError::Io {
            path: path.to_path_buf(),
            source: std::sync::Arc::new(e),
        })?;
        let mut program = extract_blocks(&text)?;
        program.origin_path = Some(path.to_path_buf());
        Ok(program)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    /// Normalized (`\n`) text.
    pub fn full_text(&self) -> &str {
        &self.full_text
    }

    /// Text with the original line-ending style restored.
    pub fn to_text(&self) -> String {
        match self.line_ending {
            LineEnding::Lf => self.full_text.clone(),
            LineEnding::CrLf => self.full_text.replace('\n', "\r\n"),
        }
    }

    pub fn line_ending(&self) -> LineEnding {
        self.line_ending
    }

    pub fn blocks(&self) -> &[EvolveBlock] {
        &self.blocks
    }

    /// Text outside the block bodies, marker lines included.
    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn origin_path(&self) -> Option<&Path> {
        self.origin_path.as_deref()
    }

    pub fn with_origin(mut self, path: impl Into<PathBuf>) -> Self {
        self.origin_path = Some(path.into());
        self
    }

    /// Reassembles segments and bodies; always equals [`Self::full_text`].
    pub fn reassemble(&self) -> String {
        let mut out = String::with_capacity(self.full_text.len());
        for (i, seg) in self.segments.iter().enumerate() {
            out.push_str(seg);
            if let Some(block) = self.blocks.get(i) {
                out.push_str(&block.body);
            }
        }
        out
    }

    /// Hex SHA-256 of the normalized text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.full_text.as_bytes()))
    }

    /// Short content id used for candidates.
    pub fn short_id(&self) -> String {
        short_digest(&self.full_text)
    }

    /// Applies `m`, leaving everything outside the replaced bodies untouched.
    pub fn apply(&self, m: &Modification) -> Result<SourceProgram> {
        apply_modification(self, m)
    }

    /// True iff `candidate_text` differs from this program outside block
    /// bodies (including a different number of blocks).
    pub fn diff_outside_blocks(&self, candidate_text: &str) -> Result<bool> {
        diff_outside_blocks(self, candidate_text)
    }
}

impl fmt::Display for SourceProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.full_text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Modification {
    pub id: String,
    pub description: String,
    pub replacements: BTreeMap<usize, String>,
}

impl Modification {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            description: description.into(),
            replacements: BTreeMap::new(),
        }
    }

    pub fn replace(mut self, block: usize, body: impl Into<String>) -> Self {
        self.replacements.insert(block, body.into());
        self
    }

    /// Builds the modification that turns `base` into `candidate`. The
    /// candidate must have the same block count and outside text.
    pub fn between(id: impl Into<String>, base: &SourceProgram, candidate: &SourceProgram) -> Option<Self> {
        if base.segments != candidate.segments {
            return None;
        }
        let mut m = Modification::new(id, "");
        for (a, b) in base.blocks.iter().zip(&candidate.blocks) {
            if a.body != b.body {
                m.replacements.insert(a.index, b.body.clone());
            }
        }
        Some(m)
    }
}

pub fn apply_modification(p: &SourceProgram, m: &Modification) -> Result<SourceProgram> {
    let mut bodies: Vec<String> = p.blocks.iter().map(|b| b.body.clone()).collect();
    for (&index, replacement) in &m.replacements {
        let slot = bodies.get_mut(index).ok_or(ProgramError::UnknownBlockIndex(index))?;
        let mut body = replacement.replace("\r\n", "\n");
        if body.lines().any(is_marker) {
            return Err(ProgramError::MarkerInReplacement(index));
        }
        if !body.is_empty() && !body.ends_with('\n') {
            body.push('\n');
        }
        *slot = body;
    }
    let mut full_text = String::new();
    for (i, seg) in p.segments.iter().enumerate() {
        full_text.push_str(seg);
        if let Some(body) = bodies.get(i) {
            full_text.push_str(body);
        }
    }
    let blocks = number_blocks(&p.segments, bodies);
    Ok(SourceProgram {
        full_text,
        line_ending: p.line_ending,
        segments: p.segments.clone(),
        blocks,
        origin_path: p.origin_path.clone(),
    })
}

pub fn diff_outside_blocks(p: &SourceProgram, candidate_text: &str) -> Result<bool> {
    let (normalized, _) = normalize(candidate_text);
    let (segments, _) = split_blocks(&normalized)?;
    Ok(segments != p.segments)
}

/// An ordered, length-bounded sequence of modifications.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModificationSequence {
    steps: Vec<Modification>,
    bound: usize,
}

impl ModificationSequence {
    pub fn new(bound: usize) -> Self {
        Self {
            steps: Vec::new(),
            bound,
        }
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    pub fn steps(&self) -> &[Modification] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, m: Modification) -> Result<()> {
        if self.steps.len() >= self.bound {
            return Err(ProgramError::SequenceFull(self.bound));
        }
        self.steps.push(m);
        Ok(())
    }

    /// `(m_k ∘ … ∘ m_1)(p0)`.
    pub fn apply_all(&self, p0: &SourceProgram) -> Result<SourceProgram> {
        self.steps
            .iter()
            .try_fold(p0.clone(), |p, m| apply_modification(&p, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ONE_BLOCK: &str = "head\n// EVOLVE-BLOCK-START\nl1\nl2\nl3\n// EVOLVE-BLOCK-END\ntail\n";

    #[test]
    fn single_block_body() {
        let p = extract_blocks(ONE_BLOCK).unwrap();
        assert_eq!(p.blocks().len(), 1);
        let b = &p.blocks()[0];
        assert_eq!(b.body, "l1\nl2\nl3\n");
        assert_eq!((b.start_line, b.end_line), (3, 5));
        assert_eq!(p.reassemble(), ONE_BLOCK);
    }

    #[test]
    fn no_markers() {
        let text = "int main() {}\nreturn 0;";
        let p = extract_blocks(text).unwrap();
        assert!(p.blocks().is_empty());
        assert_eq!(p.full_text(), text);
        assert_eq!(p.to_text(), text);
    }

    #[test]
    fn unbalanced_inputs() {
        for text in [
            "a\n// EVOLVE-BLOCK-START\nb\n",
            "a\n// EVOLVE-BLOCK-END\n",
            "// EVOLVE-BLOCK-START\n// EVOLVE-BLOCK-START\n// EVOLVE-BLOCK-END\n",
            "// EVOLVE-BLOCK-START EVOLVE-BLOCK-END\n",
        ] {
            assert!(
                matches!(extract_blocks(text), Err(ProgramError::UnbalancedMarkers { .. })),
                "{text:?}"
            );
        }
    }

    #[test]
    fn crlf_round_trip() {
        let text = ONE_BLOCK.replace('\n', "\r\n");
        let p = extract_blocks(&text).unwrap();
        assert_eq!(p.line_ending(), LineEnding::CrLf);
        assert_eq!(p.blocks()[0].body, "l1\nl2\nl3\n");
        assert_eq!(p.to_text(), text);
    }

    #[test]
    fn identity_modification() {
        let p = extract_blocks(ONE_BLOCK).unwrap();
        let m = Modification::new("id", "").replace(0, p.blocks()[0].body.clone());
        assert_eq!(p.apply(&m).unwrap().to_text(), ONE_BLOCK);
    }

    #[test]
    fn single_substitution_changes_only_block() {
        let text = "x\n// EVOLVE-BLOCK-START\na\n// EVOLVE-BLOCK-END\ny\n// EVOLVE-BLOCK-START\nc\n// EVOLVE-BLOCK-END\n";
        let p = extract_blocks(text).unwrap();
        let q = p.apply(&Modification::new("m", "").replace(0, "b")).unwrap();
        assert_eq!(q.blocks()[0].body, "b\n");
        assert_eq!(q.blocks()[1].body, "c\n");
        assert!(!p.diff_outside_blocks(q.full_text()).unwrap());
        assert_eq!(
            q.full_text(),
            "x\n// EVOLVE-BLOCK-START\nb\n// EVOLVE-BLOCK-END\ny\n// EVOLVE-BLOCK-START\nc\n// EVOLVE-BLOCK-END\n"
        );
    }

    #[test]
    fn replacement_line_numbers_follow_body_length() {
        let text = "x\n// EVOLVE-BLOCK-START\na\n// EVOLVE-BLOCK-END\n// EVOLVE-BLOCK-START\nc\n// EVOLVE-BLOCK-END\n";
        let p = extract_blocks(text).unwrap();
        let q = p.apply(&Modification::new("m", "").replace(0, "a\nb\nc\n")).unwrap();
        assert_eq!((q.blocks()[0].start_line, q.blocks()[0].end_line), (3, 5));
        assert_eq!((q.blocks()[1].start_line, q.blocks()[1].end_line), (8, 8));
        let r = p.apply(&Modification::new("m", "").replace(0, "")).unwrap();
        assert_eq!((r.blocks()[0].start_line, r.blocks()[0].end_line), (3, 2));
    }

    #[test]
    fn disjoint_modifications_commute() {
        let text = "x\n// EVOLVE-BLOCK-START\na\n// EVOLVE-BLOCK-END\ny\n// EVOLVE-BLOCK-START\nc\n// EVOLVE-BLOCK-END\nz";
        let p = extract_blocks(text).unwrap();
        let m1 = Modification::new("m1", "").replace(0, "first\nsecond\n");
        let m2 = Modification::new("m2", "").replace(1, "third");
        let ab = p.apply(&m1).unwrap().apply(&m2).unwrap();
        let ba = p.apply(&m2).unwrap().apply(&m1).unwrap();
        assert_eq!(ab.to_text(), ba.to_text());
    }

    #[test]
    fn unknown_block_and_marker_injection() {
        let p = extract_blocks(ONE_BLOCK).unwrap();
        assert!(matches!(
            p.apply(&Modification::new("m", "").replace(3, "x")),
            Err(ProgramError::UnknownBlockIndex(3))
        ));
        assert!(matches!(
            p.apply(&Modification::new("m", "").replace(0, "// EVOLVE-BLOCK-END\n")),
            Err(ProgramError::MarkerInReplacement(0))
        ));
    }

    #[test]
    fn outside_diff_detection() {
        let p = extract_blocks(ONE_BLOCK).unwrap();
        assert!(!p.diff_outside_blocks(ONE_BLOCK).unwrap());
        let edited = ONE_BLOCK.replace("l2", "changed");
        assert!(!p.diff_outside_blocks(&edited).unwrap());
        let extra = format!("{ONE_BLOCK}garbage\n");
        assert!(p.diff_outside_blocks(&extra).unwrap());
        let bad = ONE_BLOCK.replace("// EVOLVE-BLOCK-END\n", "");
        assert!(p.diff_outside_blocks(&bad).is_err());
    }

    #[test]
    fn sequence_bound() {
        let p = extract_blocks(ONE_BLOCK).unwrap();
        let mut seq = ModificationSequence::new(2);
        seq.push(Modification::new("1", "").replace(0, "a")).unwrap();
        seq.push(Modification::new("2", "").replace(0, "b")).unwrap();
        assert!(matches!(
            seq.push(Modification::new("3", "").replace(0, "c")),
            Err(ProgramError::SequenceFull(2))
        ));
        let out = seq.apply_all(&p).unwrap();
        assert_eq!(out.blocks()[0].body, "b\n");
        assert_eq!(seq.len(), 2);
    }

    #[test]
    fn between_recovers_modification() {
        let p = extract_blocks(ONE_BLOCK).unwrap();
        let q = p.apply(&Modification::new("m", "").replace(0, "new\n")).unwrap();
        let m = Modification::between("r", &p, &q).unwrap();
        assert_eq!(p.apply(&m).unwrap(), q);
    }

    fn marker_balanced_text() -> impl Strategy<Value = String> {
        let plain = prop::collection::vec("[a-z {};=]{0,12}", 0..4);
        let chunk = (plain.clone(), plain, any::<bool>(), any::<bool>());
        (prop::collection::vec(chunk, 0..4), "[a-z ]{0,8}", any::<bool>()).prop_map(
            |(chunks, tail, crlf)| {
                let mut s = String::new();
                for (outside, body, hash_comment, trailing) in chunks {
                    for l in outside {
                        s.push_str(&l);
                        s.push('\n');
                    }
                    let prefix = if hash_comment { "# " } else { "  // " };
                    s.push_str(prefix);
                    s.push_str(START_MARKER);
                    if trailing {
                        s.push_str(" (keep)");
                    }
                    s.push('\n');
                    for l in body {
                        s.push_str(&l);
                        s.push('\n');
                    }
                    s.push_str(prefix);
                    s.push_str(END_MARKER);
                    s.push('\n');
                }
                s.push_str(&tail);
                if crlf {
                    s = s.replace('\n', "\r\n");
                }
                s
            },
        )
    }

    proptest! {
        #[test]
        fn extract_reassemble_is_identity(text in marker_balanced_text()) {
            let p = extract_blocks(&text).unwrap();
            prop_assert_eq!(p.reassemble(), p.full_text());
            prop_assert_eq!(p.to_text(), text);
            for b in p.blocks() {
                prop_assert!(!b.body.lines().any(is_marker));
            }
        }

        #[test]
        fn modifications_never_touch_outside(
            text in marker_balanced_text(),
            bodies in prop::collection::vec("[a-z\n ]{0,20}", 4),
        ) {
            let p = extract_blocks(&text).unwrap();
            let mut m = Modification::new("m", "");
            for (i, b) in bodies.into_iter().enumerate().take(p.blocks().len()) {
                m = m.replace(i, b);
            }
            let q = p.apply(&m).unwrap();
            prop_assert!(!p.diff_outside_blocks(&q.to_text()).unwrap());
            let reparsed = extract_blocks(q.full_text()).unwrap();
            prop_assert_eq!(reparsed.blocks(), q.blocks());
        }
    }
}
