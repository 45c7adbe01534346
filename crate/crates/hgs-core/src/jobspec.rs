//! Resource request specifications.
//!
//! A request is a tree of `{kind, count, children}` entries with per-parent
//! counts, e.g. one node containing two sockets of sixteen cores each.
//! The text syntax has two forms:
//!
//! - A bare chain, `"node:64 socket:128 core:2048"`, lists running totals and
//!   implies strict nesting; totals must divide evenly level to level.
//! - Bracketed form gives explicit per-parent counts and supports
//!   heterogeneous children: `"node:1[gpu:4 socket:2[core:16 memory:4]]"`.
//!   When brackets appear, top-level entries are siblings.
//!
//! Printing always emits the canonical bracketed form, so parse-print-parse
//! is idempotent. A request may instead (or additionally) carry a provider
//! hint: `"@type:t2.micro"` or `"@fleet:10:t2.micro,t2.small"`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::ResourceKind;

/// One request entry: `count` vertices of `kind` under each parent, each
/// satisfying `children` recursively.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestEntry {
    pub kind: ResourceKind,
    pub count: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<RequestEntry>,
}

impl RequestEntry {
    pub fn new(kind: ResourceKind, count: u64) -> Self {
        RequestEntry {
            kind,
            count,
            children: Vec::new(),
        }
    }

    pub fn with_children(mut self, children: Vec<RequestEntry>) -> Self {
        self.children = children;
        self
    }

    /// Core vertices one candidate of this entry must provide.
    pub fn cores_per_candidate(&self) -> u64 {
        if self.kind == ResourceKind::Core {
            1
        } else {
            self.children
                .iter()
                .map(|c| c.count * c.cores_per_candidate())
                .sum()
        }
    }
}

/// Optional provider routing for a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderHint {
    InstanceType(String),
    Fleet {
        total_count: u64,
        allowed_types: Vec<String>,
    },
}

/// A resource request: nested entries plus an optional provider hint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub entries: Vec<RequestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<ProviderHint>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("semantic error: {0}")]
    Semantic(String),
}

impl JobSpec {
    pub fn from_entries(entries: Vec<RequestEntry>) -> Result<Self, SpecError> {
        let spec = JobSpec { entries, hint: None };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a strictly nested request from running totals, the way the bare
    /// chain syntax does.
    pub fn chain(totals: &[(ResourceKind, u64)]) -> Result<Self, SpecError> {
        let entries = nest_chain(totals)?;
        JobSpec::from_entries(entries)
    }

    pub fn with_hint(mut self, hint: ProviderHint) -> Self {
        self.hint = Some(hint);
        self
    }

    /// Parses the documented request syntax.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        Parser::new(text).parse()
    }

    /// Canonical text form: bracketed per-parent counts.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut first = true;
        for entry in &self.entries {
            if !first {
                out.push(' ');
            }
            first = false;
            print_entry(entry, &mut out);
        }
        if let Some(hint) = &self.hint {
            if !out.is_empty() {
                out.push(' ');
            }
            match hint {
                ProviderHint::InstanceType(name) => {
                    out.push_str("@type:");
                    out.push_str(name);
                }
                ProviderHint::Fleet {
                    total_count,
                    allowed_types,
                } => {
                    out.push_str("@fleet:");
                    out.push_str(&total_count.to_string());
                    out.push(':');
                    out.push_str(&allowed_types.join(","));
                }
            }
        }
        out
    }

    /// Size of the subgraph that would satisfy the request exactly: each
    /// requested vertex plus its one in-edge.
    pub fn request_size(&self) -> u64 {
        2 * self.total_vertices()
    }

    pub fn total_vertices(&self) -> u64 {
        fn walk(entries: &[RequestEntry], multiplier: u64) -> u64 {
            entries
                .iter()
                .map(|e| {
                    let here = multiplier * e.count;
                    here + walk(&e.children, here)
                })
                .sum()
        }
        walk(&self.entries, 1)
    }

    /// Total count of a kind across the whole request.
    pub fn total_of_kind(&self, kind: ResourceKind) -> u64 {
        fn walk(entries: &[RequestEntry], multiplier: u64, kind: ResourceKind) -> u64 {
            entries
                .iter()
                .map(|e| {
                    let here = multiplier * e.count;
                    let own = if e.kind == kind { here } else { 0 };
                    own + walk(&e.children, here, kind)
                })
                .sum()
        }
        walk(&self.entries, 1, kind)
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if self.entries.is_empty() && self.hint.is_none() {
            return Err(SpecError::Semantic("empty request".into()));
        }
        fn walk(entries: &[RequestEntry], parent_depth: Option<u8>) -> Result<(), SpecError> {
            for e in entries {
                if e.count == 0 {
                    return Err(SpecError::Semantic(format!(
                        "count for {} must be at least 1",
                        e.kind
                    )));
                }
                if e.kind == ResourceKind::Cluster {
                    return Err(SpecError::Semantic(
                        "the cluster root cannot be requested".into(),
                    ));
                }
                if let Some(pd) = parent_depth {
                    if e.kind.depth() <= pd {
                        return Err(SpecError::Semantic(format!(
                            "{} cannot nest under the preceding kind: containment order violated",
                            e.kind
                        )));
                    }
                }
                walk(&e.children, Some(e.kind.depth()))?;
            }
            Ok(())
        }
        walk(&self.entries, None)
    }
}

fn nest_chain(totals: &[(ResourceKind, u64)]) -> Result<Vec<RequestEntry>, SpecError> {
    let mut entries: Vec<RequestEntry> = Vec::new();
    let mut prev_total: u64 = 1;
    for (kind, total) in totals {
        if *total == 0 {
            return Err(SpecError::Semantic(format!(
                "count for {kind} must be at least 1"
            )));
        }
        if *total % prev_total != 0 {
            return Err(SpecError::Semantic(format!(
                "chain total {total} for {kind} does not divide evenly by the {prev_total} enclosing vertices"
            )));
        }
        entries.push(RequestEntry::new(*kind, total / prev_total));
        prev_total = *total;
    }
    // Fold right-to-left into a nested chain.
    let mut nested: Vec<RequestEntry> = Vec::new();
    while let Some(mut e) = entries.pop() {
        e.children = nested;
        nested = vec![e];
    }
    Ok(nested)
}

fn print_entry(entry: &RequestEntry, out: &mut String) {
    out.push_str(entry.kind.as_str());
    out.push(':');
    out.push_str(&entry.count.to_string());
    if !entry.children.is_empty() {
        out.push('[');
        let mut first = true;
        for child in &entry.children {
            if !first {
                out.push(' ');
            }
            first = false;
            print_entry(child, out);
        }
        out.push(']');
    }
}

// ---- text parser ----

struct Parser<'a> {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
    text: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(u64),
    Colon,
    Comma,
    At,
    Open,
    Close,
}

struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            chars: text.chars().collect(),
            pos: 0,
            line: 1,
            col: 1,
            text,
        }
    }

    fn err(&self, line: usize, col: usize, msg: impl Into<String>) -> SpecError {
        SpecError::Syntax {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn tokenize(&mut self) -> Result<Vec<Spanned>, SpecError> {
        let mut toks = Vec::new();
        while self.pos < self.chars.len() {
            let c = self.chars[self.pos];
            let (line, col) = (self.line, self.col);
            let advance = |p: &mut Self| {
                p.pos += 1;
                if c == '\n' {
                    p.line += 1;
                    p.col = 1;
                } else {
                    p.col += 1;
                }
            };
            match c {
                ' ' | '\t' | '\n' | '\r' => advance(self),
                ':' => {
                    toks.push(Spanned { tok: Tok::Colon, line, col });
                    advance(self);
                }
                ',' => {
                    toks.push(Spanned { tok: Tok::Comma, line, col });
                    advance(self);
                }
                '@' => {
                    toks.push(Spanned { tok: Tok::At, line, col });
                    advance(self);
                }
                '[' => {
                    toks.push(Spanned { tok: Tok::Open, line, col });
                    advance(self);
                }
                ']' => {
                    toks.push(Spanned { tok: Tok::Close, line, col });
                    advance(self);
                }
                c if c.is_ascii_digit() => {
                    let start = self.pos;
                    while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_digit() {
                        self.pos += 1;
                        self.col += 1;
                    }
                    let s: String = self.chars[start..self.pos].iter().collect();
                    let n = s
                        .parse()
                        .map_err(|_| self.err(line, col, format!("number {s:?} out of range")))?;
                    toks.push(Spanned { tok: Tok::Number(n), line, col });
                }
                c if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-' => {
                    let start = self.pos;
                    while self.pos < self.chars.len() {
                        let c = self.chars[self.pos];
                        if c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-' {
                            self.pos += 1;
                            self.col += 1;
                        } else {
                            break;
                        }
                    }
                    let s: String = self.chars[start..self.pos].iter().collect();
                    toks.push(Spanned { tok: Tok::Ident(s), line, col });
                }
                other => {
                    return Err(self.err(line, col, format!("unexpected character {other:?}")));
                }
            }
        }
        Ok(toks)
    }

    fn parse(mut self) -> Result<JobSpec, SpecError> {
        if self.text.trim().is_empty() {
            return Err(self.err(1, 1, "empty request"));
        }
        let toks = self.tokenize()?;
        let mut cursor = Cursor { toks: &toks, idx: 0 };

        let mut entries_syntax: Vec<SyntaxEntry> = Vec::new();
        let mut hint: Option<ProviderHint> = None;
        while !cursor.done() {
            if cursor.peek_is(&Tok::At) {
                let (line, col) = cursor.pos();
                let parsed = parse_hint(&mut cursor)?;
                if hint.is_some() {
                    return Err(SpecError::Syntax {
                        line,
                        col,
                        msg: "at most one provider hint is allowed".into(),
                    });
                }
                hint = Some(parsed);
            } else {
                entries_syntax.push(parse_entry(&mut cursor)?);
            }
        }

        let has_brackets = entries_syntax.iter().any(syntax_entry_has_children);
        let entries = if has_brackets {
            entries_syntax.into_iter().map(to_request_entry).collect()
        } else {
            // Bare chain: totals with implied nesting.
            let totals: Vec<(ResourceKind, u64)> = entries_syntax
                .into_iter()
                .map(|e| (e.kind, e.count))
                .collect();
            nest_chain(&totals)?
        };

        let spec = JobSpec { entries, hint };
        spec.validate()?;
        Ok(spec)
    }
}

struct SyntaxEntry {
    kind: ResourceKind,
    count: u64,
    children: Vec<SyntaxEntry>,
}

fn syntax_entry_has_children(e: &SyntaxEntry) -> bool {
    !e.children.is_empty()
}

fn to_request_entry(e: SyntaxEntry) -> RequestEntry {
    RequestEntry {
        kind: e.kind,
        count: e.count,
        children: e.children.into_iter().map(to_request_entry).collect(),
    }
}

struct Cursor<'a> {
    toks: &'a [Spanned],
    idx: usize,
}

impl<'a> Cursor<'a> {
    fn done(&self) -> bool {
        self.idx >= self.toks.len()
    }

    fn pos(&self) -> (usize, usize) {
        self.toks
            .get(self.idx)
            .map(|s| (s.line, s.col))
            .unwrap_or_else(|| {
                self.toks
                    .last()
                    .map(|s| (s.line, s.col + 1))
                    .unwrap_or((1, 1))
            })
    }

    fn peek_is(&self, tok: &Tok) -> bool {
        self.toks.get(self.idx).map(|s| &s.tok) == Some(tok)
    }

    fn next(&mut self) -> Option<&'a Spanned> {
        let t = self.toks.get(self.idx);
        self.idx += 1;
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<&'a Spanned, SpecError> {
        let (line, col) = self.pos();
        match self.next() {
            Some(s) if &s.tok == want => Ok(s),
            Some(s) => Err(SpecError::Syntax {
                line: s.line,
                col: s.col,
                msg: format!("expected {what}"),
            }),
            None => Err(SpecError::Syntax {
                line,
                col,
                msg: format!("expected {what}, found end of input"),
            }),
        }
    }
}

fn parse_entry(cursor: &mut Cursor) -> Result<SyntaxEntry, SpecError> {
    let (line, col) = cursor.pos();
    let kind = match cursor.next() {
        Some(Spanned { tok: Tok::Ident(name), line, col }) => {
            name.parse::<ResourceKind>().map_err(|msg| SpecError::Syntax {
                line: *line,
                col: *col,
                msg,
            })?
        }
        Some(s) => {
            return Err(SpecError::Syntax {
                line: s.line,
                col: s.col,
                msg: "expected a resource kind".into(),
            })
        }
        None => {
            return Err(SpecError::Syntax {
                line,
                col,
                msg: "expected a resource kind, found end of input".into(),
            })
        }
    };
    cursor.expect(&Tok::Colon, "':' after the resource kind")?;
    let count = match cursor.next() {
        Some(Spanned { tok: Tok::Number(n), .. }) => *n,
        Some(s) => {
            return Err(SpecError::Syntax {
                line: s.line,
                col: s.col,
                msg: "expected a count".into(),
            })
        }
        None => {
            let (line, col) = cursor.pos();
            return Err(SpecError::Syntax {
                line,
                col,
                msg: "expected a count, found end of input".into(),
            });
        }
    };
    let mut children = Vec::new();
    if cursor.peek_is(&Tok::Open) {
        cursor.next();
        while !cursor.peek_is(&Tok::Close) {
            if cursor.done() {
                let (line, col) = cursor.pos();
                return Err(SpecError::Syntax {
                    line,
                    col,
                    msg: "unclosed '['".into(),
                });
            }
            children.push(parse_entry(cursor)?);
        }
        cursor.next();
    }
    Ok(SyntaxEntry { kind, count, children })
}

fn parse_hint(cursor: &mut Cursor) -> Result<ProviderHint, SpecError> {
    cursor.expect(&Tok::At, "'@'")?;
    let (line, col) = cursor.pos();
    let name = match cursor.next() {
        Some(Spanned { tok: Tok::Ident(name), .. }) => name.clone(),
        _ => {
            return Err(SpecError::Syntax {
                line,
                col,
                msg: "expected 'type' or 'fleet' after '@'".into(),
            })
        }
    };
    cursor.expect(&Tok::Colon, "':' after the hint keyword")?;
    match name.as_str() {
        "type" => {
            let (line, col) = cursor.pos();
            match cursor.next() {
                Some(Spanned { tok: Tok::Ident(ty), .. }) => {
                    Ok(ProviderHint::InstanceType(ty.clone()))
                }
                _ => Err(SpecError::Syntax {
                    line,
                    col,
                    msg: "expected an instance type name".into(),
                }),
            }
        }
        "fleet" => {
            let (line, col) = cursor.pos();
            let total = match cursor.next() {
                Some(Spanned { tok: Tok::Number(n), .. }) => *n,
                _ => {
                    return Err(SpecError::Syntax {
                        line,
                        col,
                        msg: "expected a fleet instance count".into(),
                    })
                }
            };
            cursor.expect(&Tok::Colon, "':' after the fleet count")?;
            let mut types = Vec::new();
            loop {
                let (line, col) = cursor.pos();
                match cursor.next() {
                    Some(Spanned { tok: Tok::Ident(ty), .. }) => types.push(ty.clone()),
                    _ => {
                        return Err(SpecError::Syntax {
                            line,
                            col,
                            msg: "expected an instance type name".into(),
                        })
                    }
                }
                if cursor.peek_is(&Tok::Comma) {
                    cursor.next();
                } else {
                    break;
                }
            }
            Ok(ProviderHint::Fleet {
                total_count: total,
                allowed_types: types,
            })
        }
        other => Err(SpecError::Syntax {
            line,
            col,
            msg: format!("unknown hint {other:?}, expected 'type' or 'fleet'"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_parses_to_nested_totals() {
        let spec = JobSpec::parse("node:1 socket:2 core:32").unwrap();
        assert_eq!(spec.entries.len(), 1);
        let node = &spec.entries[0];
        assert_eq!((node.kind, node.count), (ResourceKind::Node, 1));
        let socket = &node.children[0];
        assert_eq!((socket.kind, socket.count), (ResourceKind::Socket, 2));
        let core = &socket.children[0];
        assert_eq!((core.kind, core.count), (ResourceKind::Core, 16));
        assert_eq!(spec.request_size(), 70);
    }

    #[test]
    fn table_request_sizes_halve() {
        let rows: [(u64, u64, u64, u64); 7] = [
            (64, 128, 2048, 4480),
            (32, 64, 1024, 2240),
            (16, 32, 512, 1120),
            (8, 16, 256, 560),
            (4, 8, 128, 280),
            (2, 4, 64, 140),
            (1, 2, 32, 70),
        ];
        for (nodes, sockets, cores, size) in rows {
            let spec = JobSpec::chain(&[
                (ResourceKind::Node, nodes),
                (ResourceKind::Socket, sockets),
                (ResourceKind::Core, cores),
            ])
            .unwrap();
            assert_eq!(spec.request_size(), size);
        }
    }

    #[test]
    fn zero_count_rejected() {
        let err = JobSpec::parse("core:0").unwrap_err();
        assert!(matches!(err, SpecError::Semantic(_)));
    }

    #[test]
    fn inverted_nesting_rejected() {
        let err = JobSpec::parse("core:16 node:1").unwrap_err();
        assert!(matches!(err, SpecError::Semantic(_)));
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = JobSpec::parse("node:").unwrap_err();
        match err {
            SpecError::Syntax { line, col, .. } => {
                assert_eq!(line, 1);
                assert!(col >= 5);
            }
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn parse_print_parse_is_idempotent() {
        for text in [
            "node:1 socket:2 core:32",
            "node:1[gpu:4 socket:2[core:16 memory:4]]",
            "socket:1 core:16",
            "node:2[socket:1[core:3]] @type:t2.micro",
        ] {
            let first = JobSpec::parse(text).unwrap();
            let printed = first.to_text();
            let second = JobSpec::parse(&printed).unwrap();
            assert_eq!(first, second, "normalization not idempotent for {text:?}");
            assert_eq!(printed, second.to_text());
        }
    }

    #[test]
    fn gpu_jobspec_size() {
        // One node with 4 gpus and two sockets, each with 16 cores and 4 GB.
        let spec = JobSpec::parse("node:1[gpu:4 socket:2[core:16 memory:4]]").unwrap();
        assert_eq!(spec.total_vertices(), 47);
        assert_eq!(spec.request_size(), 94);
    }

    #[test]
    fn single_core_size() {
        let spec = JobSpec::parse("core:1").unwrap();
        assert_eq!(spec.request_size(), 2);
    }

    #[test]
    fn non_divisible_chain_rejected() {
        let err = JobSpec::parse("node:2 socket:3").unwrap_err();
        assert!(matches!(err, SpecError::Semantic(_)));
    }

    #[test]
    fn hints_parse_and_print() {
        let spec = JobSpec::parse("@fleet:10:t2.micro,t2.small").unwrap();
        assert_eq!(
            spec.hint,
            Some(ProviderHint::Fleet {
                total_count: 10,
                allowed_types: vec!["t2.micro".into(), "t2.small".into()],
            })
        );
        assert!(spec.entries.is_empty());
        assert_eq!(spec.request_size(), 0);

        let spec = JobSpec::parse("node:1 core:4 @type:g3.4xlarge").unwrap();
        assert_eq!(spec.hint, Some(ProviderHint::InstanceType("g3.4xlarge".into())));
        let reparsed = JobSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(spec, reparsed);
    }

    #[test]
    fn double_hint_rejected() {
        let err = JobSpec::parse("@type:t2.micro @type:t2.small").unwrap_err();
        assert!(matches!(err, SpecError::Syntax { .. }));
    }

    #[test]
    fn json_body_roundtrip() {
        let spec = JobSpec::parse("node:1[socket:2[core:16]] @fleet:3:t2.micro").unwrap();
        let body = serde_json::to_string(&spec).unwrap();
        let back: JobSpec = serde_json::from_str(&body).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn cores_per_candidate() {
        let spec = JobSpec::parse("node:1[gpu:4 socket:2[core:16 memory:4]]").unwrap();
        assert_eq!(spec.entries[0].cores_per_candidate(), 32);
    }
}
