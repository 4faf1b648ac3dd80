use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::{IngestError, Span};

/// Maximum span length in characters.
pub const DEFAULT_SPAN_BUDGET: usize = 4000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chapter {
    pub index: u32,
    pub heading: String,
    /// Body range (after the heading line) in character offsets.
    pub char_range: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub spans: Vec<Span>,
    pub chapters: Vec<Chapter>,
    pub warnings: Vec<String>,
}

/// Byte offset to character offset lookup over one document.
struct CharIndex {
    starts: Vec<usize>,
    len_bytes: usize,
}

impl CharIndex {
    fn new(doc: &str) -> Self {
        Self { starts: doc.char_indices().map(|(b, _)| b).collect(), len_bytes: doc.len() }
    }

    fn chars_at(&self, byte: usize) -> usize {
        if byte >= self.len_bytes {
            return self.starts.len();
        }
        self.starts.partition_point(|&b| b < byte)
    }

    fn len(&self, start: usize, end: usize) -> usize {
        self.chars_at(end) - self.chars_at(start)
    }
}

/// Split a document into chapters (one per `chapter_pattern` match, matched in
/// multi-line mode) and each chapter body into paragraph-aligned spans of at
/// most `budget` characters.
///
/// Text before the first heading becomes a "Prologue" chapter when non-blank.
/// When nothing matches the whole document is a single chapter and a warning
/// is recorded.
pub fn segment_novel(
    document: &str,
    chapter_pattern: &str,
    budget: usize,
) -> Result<Segmentation, IngestError> {
    if document.trim().is_empty() {
        return Err(IngestError::EmptyDocument);
    }
    let budget = budget.max(1);
    let pattern = RegexBuilder::new(chapter_pattern).multi_line(true).build()?;
    let index = CharIndex::new(document);
    let mut warnings = Vec::new();

    // (heading, body byte range)
    let mut bodies: Vec<(String, usize, usize)> = Vec::new();
    let headings: Vec<(usize, usize)> = pattern
        .find_iter(document)
        .map(|m| line_bounds(document, m.start()))
        .fold(Vec::new(), |mut acc, line| {
            if acc.last() != Some(&line) {
                acc.push(line);
            }
            acc
        });

    if headings.is_empty() {
        warnings.push(format!(
            "no chapter heading matched {chapter_pattern:?}; treating the document as one chapter"
        ));
        bodies.push(("Chapter 1".to_string(), 0, document.len()));
    } else {
        let (first_start, _) = headings[0];
        if !document[..first_start].trim().is_empty() {
            bodies.push(("Prologue".to_string(), 0, first_start));
        }
        for (i, &(line_start, line_end)) in headings.iter().enumerate() {
            let body_end = headings.get(i + 1).map(|h| h.0).unwrap_or(document.len());
            let heading = document[line_start..line_end].trim().to_string();
            let body_start = (line_end + 1).min(body_end);
            bodies.push((heading, body_start, body_end));
        }
    }

    let mut spans = Vec::new();
    let mut chapters = Vec::new();
    let paragraph_break = Regex::new(r"\n[ \t\r]*\n").expect("static regex");
    for (chapter_index, (heading, start, end)) in bodies.into_iter().enumerate() {
        let chapter_index = chapter_index as u32;
        chapters.push(Chapter {
            index: chapter_index,
            heading,
            char_range: (index.chars_at(start), index.chars_at(end)),
        });
        let pieces = paragraphs(document, start, end, &paragraph_break)
            .into_iter()
            .flat_map(|(a, b)| split_long(document, a, b, budget, &index))
            .collect::<Vec<_>>();
        for (k, (a, b)) in pack(&pieces, budget, &index).into_iter().enumerate() {
            spans.push(Span {
                span_id: format!("c{chapter_index:03}-s{k:03}"),
                chapter_index,
                text: document[a..b].to_string(),
                char_range: (index.chars_at(a), index.chars_at(b)),
            });
        }
    }
    Ok(Segmentation { spans, chapters, warnings })
}

fn line_bounds(doc: &str, at: usize) -> (usize, usize) {
    let start = doc[..at].rfind('\n').map(|p| p + 1).unwrap_or(0);
    let end = doc[at..].find('\n').map(|p| at + p).unwrap_or(doc.len());
    (start, end)
}

/// Trimmed paragraph byte ranges within `[start, end)`.
fn paragraphs(doc: &str, start: usize, end: usize, brk: &Regex) -> Vec<(usize, usize)> {
    let body = &doc[start..end];
    let mut out = Vec::new();
    let mut cursor = 0;
    let mut push = |a: usize, b: usize| {
        let chunk = &body[a..b];
        let lead = chunk.len() - chunk.trim_start().len();
        let trail = chunk.len() - chunk.trim_end().len();
        if lead + trail < chunk.len() {
            out.push((start + a + lead, start + b - trail));
        }
    };
    for m in brk.find_iter(body) {
        push(cursor, m.start());
        cursor = m.end();
    }
    push(cursor, body.len());
    out
}

/// Break a paragraph longer than `budget` at sentence ends, falling back to
/// hard character cuts.
fn split_long(doc: &str, a: usize, b: usize, budget: usize, index: &CharIndex) -> Vec<(usize, usize)> {
    if index.len(a, b) <= budget {
        return vec![(a, b)];
    }
    let mut out = Vec::new();
    let mut start = a;
    while index.len(start, b) > budget {
        let limit_char = index.chars_at(start) + budget;
        let limit = index.starts.get(limit_char).copied().unwrap_or(b).min(b);
        let window = &doc[start..limit];
        let cut = window
            .char_indices()
            .filter(|&(i, c)| {
                matches!(c, '.' | '!' | '?')
                    && window[i + 1..].starts_with(char::is_whitespace)
            })
            .map(|(i, c)| start + i + c.len_utf8())
            .last()
            .unwrap_or(limit);
        out.push((start, cut));
        start = cut;
        while start < b && doc[start..].starts_with(char::is_whitespace) {
            start += doc[start..].chars().next().map(char::len_utf8).unwrap_or(1);
        }
    }
    if start < b {
        out.push((start, b));
    }
    out
}

/// Greedily merge consecutive pieces while the merged span fits the budget.
fn pack(pieces: &[(usize, usize)], budget: usize, index: &CharIndex) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &(a, b) in pieces {
        match out.last_mut() {
            Some(last) if index.len(last.0, b) <= budget => last.1 = b,
            _ => out.push((a, b)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalize_ws;

    const TWO_CHAPTERS: &str = "CHAPTER I. A Shifting Reef\n\nThe year 1866 was marked by a strange event.\n\nShips reported a long object, phosphorescent and swift.\n\nThe learned world was divided.\n\nCHAPTER II. Pro and Con\n\nProfessor Aronnax arrived in New York.\n\nHe was asked for his opinion on the monster.\n\nConseil packed the trunks without a word.\n";

    fn chars(s: &str, range: (usize, usize)) -> String {
        s.chars().skip(range.0).take(range.1 - range.0).collect()
    }

    #[test]
    fn two_chapters_reconstruct_bodies() {
        let seg = segment_novel(TWO_CHAPTERS, "^CHAPTER", DEFAULT_SPAN_BUDGET).unwrap();
        assert_eq!(seg.chapters.len(), 2);
        assert!(seg.warnings.is_empty());
        for ch in &seg.chapters {
            let joined: Vec<String> = seg
                .spans
                .iter()
                .filter(|s| s.chapter_index == ch.index)
                .map(|s| s.text.clone())
                .collect();
            assert_eq!(normalize_ws(&joined.join(" ")), normalize_ws(&chars(TWO_CHAPTERS, ch.char_range)));
        }
        assert_eq!(seg.chapters[1].heading, "CHAPTER II. Pro and Con");
    }

    #[test]
    fn small_budget_splits_at_paragraphs() {
        let seg = segment_novel(TWO_CHAPTERS, "^CHAPTER", 60).unwrap();
        assert!(seg.spans.len() > 2);
        for s in &seg.spans {
            assert!(s.char_range.0 < s.char_range.1);
            assert!(s.text.chars().count() <= 60);
            assert_eq!(chars(TWO_CHAPTERS, s.char_range), s.text);
        }
        for w in seg.spans.windows(2) {
            assert!(w[0].char_range.1 <= w[1].char_range.0);
        }
    }

    #[test]
    fn empty_document_is_an_error() {
        assert!(matches!(segment_novel("", "^CHAPTER", 10), Err(IngestError::EmptyDocument)));
        assert!(matches!(segment_novel(" \n\n ", "^CHAPTER", 10), Err(IngestError::EmptyDocument)));
    }

    #[test]
    fn single_short_paragraph_is_one_span() {
        let doc = "The sea was calm that night.";
        let seg = segment_novel(doc, "^CHAPTER", DEFAULT_SPAN_BUDGET).unwrap();
        assert_eq!(seg.spans.len(), 1);
        assert_eq!(seg.spans[0].char_range, (0, doc.chars().count()));
        assert_eq!(seg.warnings.len(), 1);
    }

    #[test]
    fn bad_pattern() {
        assert!(matches!(segment_novel("x", "(", 10), Err(IngestError::BadPattern(_))));
    }

    #[test]
    fn long_paragraph_is_split_by_sentence() {
        let para = "One sentence here. ".repeat(20);
        let seg = segment_novel(&para, "^CHAPTER", 50).unwrap();
        assert!(seg.spans.len() > 1);
        let joined: Vec<&str> = seg.spans.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(normalize_ws(&joined.join(" ")), normalize_ws(&para));
        assert!(seg.spans.iter().all(|s| s.text.chars().count() <= 50));
    }

    #[test]
    fn unicode_offsets_are_in_chars() {
        let doc = "CHAPTER 1\n\nÉté à la mer.\n";
        let seg = segment_novel(doc, "^CHAPTER", 100).unwrap();
        assert_eq!(chars(doc, seg.spans[0].char_range), "Été à la mer.");
    }
}
