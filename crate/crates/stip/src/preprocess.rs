//! Solidity source normalization, tokenization and pattern annotation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VulnClass {
    Reentrancy,
    Timestamp,
    Delegatecall,
    IntegerOverflowUnderflow,
    Cdav,
}

impl VulnClass {
    pub const ALL: [VulnClass; 5] = [
        VulnClass::Reentrancy,
        VulnClass::Timestamp,
        VulnClass::Delegatecall,
        VulnClass::IntegerOverflowUnderflow,
        VulnClass::Cdav,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VulnClass::Reentrancy => "reentrancy",
            VulnClass::Timestamp => "timestamp",
            VulnClass::Delegatecall => "delegatecall",
            VulnClass::IntegerOverflowUnderflow => "integer-overflow-underflow",
            VulnClass::Cdav => "cdav",
        }
    }
}

impl fmt::Display for VulnClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VulnClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VulnClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown vulnerability class `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub class: VulnClass,
    pub vulnerable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawContract {
    pub id: String,
    pub source: String,
    pub label: Label,
}

/// Half-open token range `[start, end)` flagged by `pattern`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub pattern: String,
}

/// Half-open byte range of the annotated source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedContract {
    pub id: String,
    pub tokens: Vec<String>,
    pub spans: Vec<Span>,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TokenizedContract {
    /// Index of the first annotated token, or 0 without annotations.
    pub fn start_token(&self) -> usize {
        self.spans.iter().map(|s| s.start).min().unwrap_or(0)
    }

    /// Tokens covered by at least one span, in source order.
    pub fn span_tokens(&self) -> Vec<&str> {
        let mut covered = vec![false; self.tokens.len()];
        for s in &self.spans {
            covered[s.start..s.end].iter_mut().for_each(|c| *c = true);
        }
        self.tokens.iter().zip(covered).filter(|(_, c)| *c).map(|(t, _)| t.as_str()).collect()
    }

    pub fn token_refs(&self) -> Vec<&str> {
        self.tokens.iter().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stripped {
    pub text: String,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Lex {
    Code,
    Str(char),
    LineComment,
    BlockComment,
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

fn is_ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '$'
}

/// Marks each byte of `source` as code (true) or comment (false). String
/// literals count as code. Also reports where an unterminated block comment
/// began.
fn code_mask(source: &str) -> (Vec<bool>, Option<usize>) {
    let mut mask = vec![true; source.len()];
    let mut state = Lex::Code;
    let mut comment_start = 0;
    let mut iter = source.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        let next = iter.peek().map(|&(_, n)| n);
        match state {
            Lex::Code => match (c, next) {
                ('"' | '\'', _) => state = Lex::Str(c),
                ('/', Some('/')) => {
                    state = Lex::LineComment;
                    mask[i] = false;
                }
                ('/', Some('*')) => {
                    state = Lex::BlockComment;
                    comment_start = i;
                    mask[i] = false;
                    let (j, _) = iter.next().unwrap();
                    mask[j] = false;
                }
                _ => {}
            },
            Lex::Str(q) => {
                if c == '\\' {
                    iter.next();
                } else if c == q || c == '\n' {
                    state = Lex::Code;
                }
            }
            Lex::LineComment => {
                if c == '\n' {
                    state = Lex::Code;
                } else {
                    mask[i..i + c.len_utf8()].iter_mut().for_each(|m| *m = false);
                }
            }
            Lex::BlockComment => {
                mask[i..i + c.len_utf8()].iter_mut().for_each(|m| *m = false);
                if c == '*' && next == Some('/') {
                    let (j, _) = iter.next().unwrap();
                    mask[j] = false;
                    state = Lex::Code;
                }
            }
        }
    }
    let unterminated = (state == Lex::BlockComment).then_some(comment_start);
    (mask, unterminated)
}

fn line_of(source: &str, byte: usize) -> usize {
    source[..byte].bytes().filter(|&b| b == b'\n').count() + 1
}

fn is_import(line: &str) -> bool {
    let t = line.trim_start();
    t.strip_prefix("import").is_some_and(|rest| !rest.starts_with(is_ident_char))
}

/// Removes comments, blank lines and `import` statements. String literals and
/// all other code are kept verbatim, apart from trailing whitespace.
pub fn strip_noise(source: &str) -> Stripped {
    let (mask, unterminated) = code_mask(source);
    let mut warnings = vec![];
    if let Some(at) = unterminated {
        warnings.push(format!(
            "unterminated block comment at line {}; stripped to end of file",
            line_of(source, at)
        ));
    }
    let mut code = String::with_capacity(source.len());
    let mut in_comment = false;
    for (i, c) in source.char_indices() {
        if mask[i] {
            // A comment between two identifier characters still separates them.
            if in_comment && code.chars().next_back().is_some_and(is_ident_char) && is_ident_char(c) {
                code.push(' ');
            }
            in_comment = false;
            code.push(c);
        } else {
            in_comment = true;
        }
    }
    let mut lines = vec![];
    let mut in_import = false;
    for line in code.split('\n') {
        let line = line.trim_end();
        if in_import || is_import(line) {
            in_import = !line.contains(';');
            continue;
        }
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Stripped {
        text: lines.join("\n"),
        warnings,
    }
}

const CHAIN_ROOTS: [&str; 5] = ["msg", "block", "tx", "this", "address"];

/// Tokens with the byte offset at which each starts.
pub fn tokenize_with_offsets(source: &str) -> Vec<(String, usize)> {
    let chars: Vec<(usize, char)> = source.char_indices().collect();
    let at = |i: usize| chars.get(i).map(|&(_, c)| c);
    let mut out = vec![];
    let mut i = 0;
    while i < chars.len() {
        let (offset, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if is_ident_start(c) {
            let mut j = i + 1;
            while at(j).is_some_and(is_ident_char) {
                j += 1;
            }
            let word: String = chars[i..j].iter().map(|&(_, c)| c).collect();
            if CHAIN_ROOTS.contains(&word.as_str()) && at(j) == Some('.') && at(j + 1).is_some_and(is_ident_start) {
                j += 2;
                while at(j).is_some_and(is_ident_char) {
                    j += 1;
                }
            }
            out.push((chars[i..j].iter().map(|&(_, c)| c).collect(), offset));
            i = j;
        } else if c.is_ascii_digit() {
            let hex = c == '0' && matches!(at(i + 1), Some('x' | 'X')) && at(i + 2).is_some_and(|d| d.is_ascii_hexdigit());
            let mut j = i + 1;
            if hex {
                j = i + 2;
                while at(j).is_some_and(|d| d.is_ascii_hexdigit() || d == '_') {
                    j += 1;
                }
                out.push(("HEXNUM".into(), offset));
            } else {
                loop {
                    match at(j) {
                        Some(d) if d.is_ascii_digit() || d == '_' => j += 1,
                        Some('.') if at(j + 1).is_some_and(|d| d.is_ascii_digit()) => j += 2,
                        Some('e' | 'E') if at(j + 1).is_some_and(|d| d.is_ascii_digit()) => j += 2,
                        Some('e' | 'E')
                            if matches!(at(j + 1), Some('-' | '+')) && at(j + 2).is_some_and(|d| d.is_ascii_digit()) =>
                        {
                            j += 3
                        }
                        _ => break,
                    }
                }
                out.push(("NUM".into(), offset));
            }
            i = j;
        } else if c == '"' || c == '\'' {
            // String contents may hold whitespace, so the literal becomes one
            // placeholder token.
            let mut j = i + 1;
            while let Some(d) = at(j) {
                j += 1;
                if d == '\\' {
                    j += 1;
                } else if d == c || d == '\n' {
                    break;
                }
            }
            out.push(("STR".into(), offset));
            i = j.min(chars.len());
        } else {
            out.push((c.to_string(), offset));
            i += 1;
        }
    }
    out
}

pub fn tokenize(source: &str) -> Vec<String> {
    tokenize_with_offsets(source).into_iter().map(|(t, _)| t).collect()
}

#[derive(Debug, Clone)]
pub struct Pattern {
    pub name: String,
    pub regex: Regex,
    /// The pattern is skipped for sources matching this.
    pub exclude: Option<Regex>,
}

#[derive(Debug, Clone)]
pub struct PatternTable {
    pub patterns: Vec<Pattern>,
}

const BUILTIN_PATTERNS: &str = include_str!("../data/patterns.tsv");

impl PatternTable {
    /// Parses `name<TAB>regex[<TAB>exclude]` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut patterns = vec![];
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) || fields[0].is_empty() || fields[1].is_empty() {
                return Err(Error::Data(format!("pattern table line {}: expected name<TAB>regex[<TAB>exclude]", n + 1)));
            }
            let compile = |src: &str| {
                Regex::new(src).map_err(|source| Error::Pattern {
                    name: fields[0].to_string(),
                    source,
                })
            };
            patterns.push(Pattern {
                name: fields[0].to_string(),
                regex: compile(fields[1])?,
                exclude: fields.get(2).filter(|s| !s.is_empty()).map(|s| compile(s)).transpose()?,
            });
        }
        Ok(PatternTable { patterns })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PATTERNS).expect("shipped pattern table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub spans: Vec<SourceSpan>,
    pub warnings: Vec<String>,
}

const FUNCTION_KEYWORDS: [&str; 5] = ["function", "constructor", "modifier", "fallback", "receive"];

fn has_word(text: &str, word: &str) -> bool {
    text.match_indices(word).any(|(i, _)| {
        let before = text[..i].chars().next_back();
        let after = text[i + word.len()..].chars().next();
        !before.is_some_and(is_ident_char) && !after.is_some_and(is_ident_char)
    })
}

/// Matched brace pairs over code bytes, or `None` when braces do not balance.
fn brace_pairs(source: &str) -> Option<Vec<(usize, usize)>> {
    let (mask, _) = code_mask(source);
    let mut in_string = None;
    let mut stack = vec![];
    let mut pairs = vec![];
    let mut escaped = false;
    for (i, c) in source.char_indices() {
        if !mask[i] {
            continue;
        }
        if let Some(q) = in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q || c == '\n' {
                in_string = None;
            }
            continue;
        }
        match c {
            '"' | '\'' => in_string = Some(c),
            '{' => stack.push(i),
            '}' => pairs.push((stack.pop()?, i)),
            _ => {}
        }
    }
    stack.is_empty().then_some(pairs)
}

/// Byte range from the function header through its closing brace, for the
/// innermost function-like block containing `at`.
fn enclosing_function(source: &str, pairs: &[(usize, usize)], at: usize) -> Option<(usize, usize)> {
    let mut containing: Vec<_> = pairs.iter().filter(|&&(o, c)| o < at && at < c).collect();
    containing.sort_by_key(|&&(o, _)| std::cmp::Reverse(o));
    containing.into_iter().find_map(|&(open, close)| {
        let header_start = source[..open].rfind([';', '{', '}']).map_or(0, |p| p + 1);
        let header = &source[header_start..open];
        FUNCTION_KEYWORDS.iter().any(|k| has_word(header, k)).then(|| {
            let lead = header.len() - header.trim_start().len();
            (header_start + lead, close + 1)
        })
    })
}

fn line_window(source: &str, at: usize, radius: usize) -> (usize, usize) {
    let starts: Vec<usize> = std::iter::once(0)
        .chain(source.match_indices('\n').map(|(i, _)| i + 1))
        .collect();
    let line = starts.partition_point(|&s| s <= at) - 1;
    let first = line.saturating_sub(radius);
    let last = (line + radius).min(starts.len() - 1);
    let end = starts.get(last + 1).map_or(source.len(), |&s| s - 1);
    (starts[first], end)
}

/// One span per pattern match: the enclosing function, or the matched line
/// +/- 2 lines when no function encloses it or braces do not balance.
pub fn annotate(source: &str, table: &PatternTable) -> Annotation {
    let pairs = brace_pairs(source);
    let mut warnings = vec![];
    let mut spans = vec![];
    for p in &table.patterns {
        if p.exclude.as_ref().is_some_and(|x| x.is_match(source)) {
            continue;
        }
        for m in p.regex.find_iter(source) {
            if m.as_str().trim().is_empty() {
                continue;
            }
            let at = m.start() + (m.as_str().len() - m.as_str().trim_start().len());
            let (start, end) = pairs
                .as_deref()
                .and_then(|pairs| enclosing_function(source, pairs, at))
                .unwrap_or_else(|| line_window(source, at, 2));
            spans.push(SourceSpan {
                start,
                end,
                pattern: p.name.clone(),
            });
        }
    }
    if pairs.is_none() && !spans.is_empty() {
        warnings.push("unbalanced braces; annotations fall back to matched line +/- 2".to_string());
    }
    spans.sort_by_key(|s| s.start);
    Annotation { spans, warnings }
}

/// Strips, tokenizes and annotates one contract.
pub fn preprocess(raw: &RawContract, table: &PatternTable) -> TokenizedContract {
    let stripped = strip_noise(&raw.source);
    let annotation = annotate(&stripped.text, table);
    let tokens = tokenize_with_offsets(&stripped.text);
    let offsets: Vec<usize> = tokens.iter().map(|&(_, o)| o).collect();
    let spans = annotation
        .spans
        .into_iter()
        .filter_map(|s| {
            let start = offsets.partition_point(|&o| o < s.start);
            let end = offsets.partition_point(|&o| o < s.end);
            (start < end).then_some(Span {
                start,
                end,
                pattern: s.pattern,
            })
        })
        .collect();
    let mut warnings = stripped.warnings;
    warnings.extend(annotation.warnings);
    TokenizedContract {
        id: raw.id.clone(),
        tokens: tokens.into_iter().map(|(t, _)| t).collect(),
        spans,
        label: raw.label,
        warnings,
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    filename: String,
    class: String,
    flag: u8,
}

pub fn parse_labels(path: &Path) -> Result<Vec<(String, Label)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let mut out = vec![];
    for row in reader.deserialize() {
        let row: LabelRow = row.map_err(|e| Error::format(path, e))?;
        let vulnerable = match row.flag {
            0 => false,
            1 => true,
            f => return Err(Error::format(path, format!("{}: flag must be 0 or 1, got {f}", row.filename))),
        };
        let class = row.class.parse().map_err(|e| Error::format(path, e))?;
        out.push((row.filename, Label { class, vulnerable }));
    }
    Ok(out)
}

/// Reads `labels.csv` and every listed `.sol` file from `dir`.
pub fn load_contracts(dir: &Path) -> Result<Vec<RawContract>> {
    let labels = parse_labels(&dir.join("labels.csv"))?;
    labels
        .into_iter()
        .map(|(filename, label)| {
            let path = dir.join(&filename);
            let source = std::fs::read_to_string(&path).map_err(Error::io(&path))?;
            if source.trim().is_empty() {
                return Err(Error::format(&path, "empty source"));
            }
            Ok(RawContract {
                id: filename,
                source,
                label,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_trailing_line_comment() {
        assert_eq!(strip_noise("uint x; // note").text, "uint x;");
    }

    #[test]
    fn strips_leading_block_comment() {
        assert_eq!(strip_noise("/* a */ transfer();").text, " transfer();");
    }

    #[test]
    fn keeps_comment_markers_inside_strings() {
        let s = r#"string u = "http://x/*y*/"; // gone"#;
        assert_eq!(strip_noise(s).text, r#"string u = "http://x/*y*/";"#);
    }

    #[test]
    fn drops_imports_and_blank_lines_but_keeps_pragma() {
        let s = "pragma solidity ^0.4.24;\n\nimport \"./A.sol\";\nimport {\n  B\n} from \"./B.sol\";\ncontract C {}\n";
        assert_eq!(strip_noise(s).text, "pragma solidity ^0.4.24;\ncontract C {}");
    }

    #[test]
    fn unterminated_block_comment_warns() {
        let out = strip_noise("a();\n/* open\nb();");
        assert_eq!(out.text, "a();");
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn comment_between_identifiers_keeps_them_apart() {
        assert_eq!(strip_noise("uint/*c*/x;").text, "uint x;");
    }

    #[test]
    fn member_chain_rooted_at_msg() {
        assert_eq!(
            tokenize("msg.sender.transfer(amount);"),
            ["msg.sender", ".", "transfer", "(", "amount", ")", ";"]
        );
    }

    #[test]
    fn numbers_normalize() {
        assert_eq!(tokenize("x = 123;"), ["x", "=", "NUM", ";"]);
        assert_eq!(tokenize("a = 0xdead + 1.5e18"), ["a", "=", "HEXNUM", "+", "NUM"]);
    }

    #[test]
    fn user_chains_split() {
        assert_eq!(tokenize("owner.balance"), ["owner", ".", "balance"]);
        assert_eq!(tokenize("address(this)"), ["address", "(", "this", ")"]);
    }

    #[test]
    fn strings_become_one_token() {
        assert_eq!(tokenize(r#"require(ok, "not \"ok\" here");"#), ["require", "(", "ok", ",", "STR", ")", ";"]);
    }

    #[test]
    fn builtin_patterns_compile() {
        assert_eq!(PatternTable::builtin().patterns.len(), 5);
    }

    #[test]
    fn no_match_no_spans() {
        let a = annotate("contract C { function f() public {} }", &PatternTable::builtin());
        assert!(a.spans.is_empty());
    }

    #[test]
    fn unbalanced_braces_fall_back_to_lines() {
        let src = "l1\nl2\nl3\nfunction f() { x.delegatecall(d);\nl5\nl6\nl7";
        let a = annotate(src, &PatternTable::builtin());
        assert_eq!(a.spans.len(), 1);
        assert_eq!(&src[a.spans[0].start..a.spans[0].end], "l2\nl3\nfunction f() { x.delegatecall(d);\nl5\nl6");
        assert_eq!(a.warnings.len(), 1);
    }

    #[test]
    fn overflow_pattern_skips_safemath_contracts() {
        let t = PatternTable::builtin();
        let plain = "contract C { function f(uint a) public { total += a; } }";
        assert_eq!(annotate(plain, &t).spans.len(), 1);
        let safe = "using SafeMath for uint;\ncontract C { function f(uint a) public { total += a; } }";
        assert!(annotate(safe, &t).spans.is_empty());
    }

    #[test]
    fn labels_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        std::fs::write(&p, "filename,class,flag\na.sol,reentrancy,1\nb.sol,cdav,0\n").unwrap();
        let rows = parse_labels(&p).unwrap();
        assert_eq!(rows[1].1, Label { class: VulnClass::Cdav, vulnerable: false });
        std::fs::write(&p, "filename,class,flag\na.sol,reentrancy,2\n").unwrap();
        assert!(parse_labels(&p).is_err());
    }
}
