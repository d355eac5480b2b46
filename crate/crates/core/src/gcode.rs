//! G-code parsing, layer detection, slicer-config extraction, and the
//! deterministic shortening preprocessor.
//!
//! The parser is purely structural: every input line is kept verbatim (byte
//! round-trip is guaranteed), commands and numeric parameters are tokenized
//! where possible, and anything that cannot be tokenized is passed through as
//! comment-like content and counted in the parse diagnostics. Screening must
//! never crash on adversarial input.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Classification of one source line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineKind {
    Command,
    Comment,
    ConfigComment,
    Blank,
}

/// One parsed line. `raw` is the verbatim source text including its line
/// terminator (if any), so rejoining lines in order reproduces the input
/// byte-for-byte.
#[derive(Debug, Clone, PartialEq)]
pub struct GcodeLine {
    pub index: usize,
    pub kind: LineKind,
    pub code: Option<String>,
    pub params: Vec<(char, f64)>,
    pub raw: String,
}

impl GcodeLine {
    /// Line content without the trailing terminator.
    pub fn content(&self) -> &str {
        self.raw.trim_end_matches(['\n', '\r'])
    }

    /// First value for a parameter letter, if present.
    pub fn param(&self, letter: char) -> Option<f64> {
        let upper = letter.to_ascii_uppercase();
        self.params.iter().find(|(l, _)| *l == upper).map(|(_, v)| *v)
    }

    /// Comment body after the first `;`, if the line carries one.
    pub fn comment_body(&self) -> Option<&str> {
        self.content().split_once(';').map(|(_, body)| body)
    }
}

/// Tallies for input the tokenizer could not fully interpret.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostics {
    /// Non-comment lines that did not start with a command word and were
    /// passed through as comment-like content.
    pub passthrough_lines: usize,
    /// Parameter tokens with malformed numeric values (kept raw, excluded
    /// from `params`).
    pub malformed_params: usize,
}

/// Inclusive line-index range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    /// Number of lines covered; inclusive spans are never empty.
    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }
}

/// A parsed program: ordered lines, detected printed-layer starts, and the
/// recognized slicer configuration region(s).
#[derive(Debug, Clone, PartialEq)]
pub struct GcodeDocument {
    pub lines: Vec<GcodeLine>,
    /// Strictly increasing indices where a printed layer begins.
    pub layer_starts: Vec<usize>,
    /// Largest contiguous configuration region, if any.
    pub config_span: Option<Span>,
    /// Every configuration region, in source order.
    pub config_regions: Vec<Span>,
    pub diagnostics: ParseDiagnostics,
}

impl GcodeDocument {
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    /// Reassemble the original text byte-for-byte.
    pub fn rejoin(&self) -> String {
        let mut out = String::with_capacity(self.lines.iter().map(|l| l.raw.len()).sum());
        for line in &self.lines {
            out.push_str(&line.raw);
        }
        out
    }
}

/// Which parts of a program the shortener keeps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShorteningPolicy {
    /// Number of initial printed layers to keep.
    pub head_layers: usize,
    pub keep_final_layer: bool,
    pub keep_config: bool,
    pub keep_init: bool,
}

impl Default for ShorteningPolicy {
    fn default() -> Self {
        ShorteningPolicy {
            head_layers: 3,
            keep_final_layer: true,
            keep_config: true,
            keep_init: true,
        }
    }
}

/// Reason a span survived shortening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeepReason {
    Config,
    Init,
    HeadLayer,
    FinalLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeptSpan {
    pub start: usize,
    pub end: usize,
    pub reason: KeepReason,
}

/// Output of the shortening preprocessor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortenedGcode {
    /// The shortened program. Elided gaps between kept spans are replaced by
    /// a single marker comment recording how many lines were removed.
    pub text: String,
    pub kept_spans: Vec<KeptSpan>,
    pub original_line_count: usize,
    pub kept_line_count: usize,
    /// True when no layers were detected and the whole file was kept.
    pub degraded: bool,
}

/// Machine-readable description of a shortening run, suitable for a JSON
/// sidecar next to the shortened program text.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShorteningSidecar {
    pub original_line_count: usize,
    pub kept_line_count: usize,
    pub degraded: bool,
    pub kept_spans: Vec<KeptSpan>,
}

impl ShortenedGcode {
    pub fn sidecar(&self) -> ShorteningSidecar {
        ShorteningSidecar {
            original_line_count: self.original_line_count,
            kept_line_count: self.kept_line_count,
            degraded: self.degraded,
            kept_spans: self.kept_spans.clone(),
        }
    }
}

/// Split text into raw lines, each keeping its terminator, so that
/// concatenation reproduces the input exactly.
fn split_keep_eol(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            out.push(&text[start..=i]);
            start = i + 1;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn is_config_kv(body: &str) -> Option<(String, String)> {
    let body = body.trim_start();
    let mut chars = body.char_indices();
    let (_, first) = chars.next()?;
    if !(first.is_ascii_alphabetic() || first == '_') {
        return None;
    }
    let mut key_end = first.len_utf8();
    for (i, c) in chars {
        if c.is_ascii_alphanumeric() || c == '_' {
            key_end = i + c.len_utf8();
        } else {
            break;
        }
    }
    let key = &body[..key_end];
    let rest = body[key_end..].trim_start();
    let value = rest.strip_prefix(['=', ':'])?;
    // `:`-separated entries are accepted only for snake_case keys; this
    // keeps per-feature annotations like `;Z:0.2` or `;TYPE:Perimeter`
    // classified as plain comments.
    if rest.starts_with(':') && !key.contains('_') {
        return None;
    }
    Some((key.to_string(), value.trim().to_string()))
}

struct TokenizedCommand {
    code: String,
    params: Vec<(char, f64)>,
    malformed: usize,
}

/// Tokenize the command part of a line (inline comment already removed).
/// `None` when the line does not start with a command word.
fn tokenize_command(content: &str) -> Option<TokenizedCommand> {
    let mut rest = content.trim();
    let mut code: Option<String> = None;
    let mut params = Vec::new();
    let mut malformed = 0usize;

    while !rest.is_empty() {
        let mut chars = rest.char_indices();
        let (_, letter) = chars.next().unwrap();
        if !letter.is_ascii_alphabetic() {
            // Not a word start (checksums, stray tokens). If we have no code
            // yet the line is not a command at all.
            code.as_ref()?;
            malformed += 1;
            break;
        }
        // Value runs until the next letter or whitespace.
        let mut value_end = letter.len_utf8();
        for (i, c) in chars {
            if c.is_ascii_alphabetic() || c.is_whitespace() {
                break;
            }
            value_end = i + c.len_utf8();
        }
        let value_str = &rest[letter.len_utf8()..value_end];
        let letter_up = letter.to_ascii_uppercase();

        if code.is_none() {
            // Skip classic N-prefixed line numbers.
            if letter_up == 'N' && value_str.chars().all(|c| c.is_ascii_digit()) && !value_str.is_empty() {
                rest = rest[value_end..].trim_start();
                continue;
            }
            if value_str.is_empty() || value_str.parse::<f64>().is_err() {
                // A command word needs a numeric part (G1, M104, T0).
                return None;
            }
            code = Some(format!("{letter_up}{value_str}"));
        } else {
            match value_str.parse::<f64>() {
                Ok(v) if v.is_finite() => params.push((letter_up, v)),
                _ => malformed += 1,
            }
        }
        rest = rest[value_end..].trim_start();
    }

    code.map(|code| TokenizedCommand { code, params, malformed })
}

/// Parse raw G-code text into a structured document.
///
/// Never fails on malformed content: lines that cannot be interpreted are
/// retained verbatim as comment-like passthrough and tallied in the
/// diagnostics. Layer starts and configuration regions are populated as part
/// of parsing.
pub fn parse_gcode(text: &str) -> GcodeDocument {
    let raw_lines = split_keep_eol(text);
    let mut lines = Vec::with_capacity(raw_lines.len());
    let mut diagnostics = ParseDiagnostics::default();

    for (index, raw) in raw_lines.iter().enumerate() {
        let content = raw.trim_end_matches(['\n', '\r']);
        let trimmed = content.trim();

        let (kind, code, params) = if trimmed.is_empty() {
            (LineKind::Blank, None, Vec::new())
        } else if let Some(body) = trimmed.strip_prefix(';') {
            if is_config_kv(body).is_some() {
                (LineKind::ConfigComment, None, Vec::new())
            } else {
                (LineKind::Comment, None, Vec::new())
            }
        } else {
            let command_part = match trimmed.split_once(';') {
                Some((before, _)) => before,
                None => trimmed,
            };
            match tokenize_command(command_part) {
                Some(token) => {
                    diagnostics.malformed_params += token.malformed;
                    (LineKind::Command, Some(token.code), token.params)
                }
                None => {
                    diagnostics.passthrough_lines += 1;
                    (LineKind::Comment, None, Vec::new())
                }
            }
        };

        lines.push(GcodeLine {
            index,
            kind,
            code,
            params,
            raw: (*raw).to_string(),
        });
    }

    let config_regions = find_config_regions(&lines);
    let config_span = config_regions
        .iter()
        .max_by_key(|s| (s.len(), std::cmp::Reverse(s.start)))
        .copied();
    let layer_starts = detect_layer_starts(&lines);

    GcodeDocument {
        lines,
        layer_starts,
        config_span,
        config_regions,
        diagnostics,
    }
}

/// Block delimiters recognized as explicit configuration regions.
fn block_delimiter(body: &str) -> Option<bool /* opens */> {
    let b = body.trim().to_ascii_uppercase();
    if b.contains("CONFIG_BLOCK_START") || b.contains("HEADER_BLOCK_START") {
        return Some(true);
    }
    if b.contains("CONFIG_BLOCK_END") || b.contains("HEADER_BLOCK_END") {
        return Some(false);
    }
    let lower = body.trim().to_ascii_lowercase();
    if let Some((key, value)) = is_config_kv(&lower) {
        if key == "prusaslicer_config" {
            return Some(value == "begin");
        }
    }
    None
}

fn find_config_regions(lines: &[GcodeLine]) -> Vec<Span> {
    let mut regions: Vec<Span> = Vec::new();
    let mut block_start: Option<usize> = None;
    let mut run_start: Option<usize> = None;

    let close_run = |run_start: &mut Option<usize>, end: usize, regions: &mut Vec<Span>| {
        if let Some(start) = run_start.take() {
            regions.push(Span { start, end });
        }
    };

    for line in lines {
        let body = line.comment_body();
        let delim = body.and_then(block_delimiter);
        match delim {
            Some(true) => {
                close_run(&mut run_start, line.index.saturating_sub(1), &mut regions);
                if block_start.is_none() {
                    block_start = Some(line.index);
                }
                continue;
            }
            Some(false) => {
                if let Some(start) = block_start.take() {
                    regions.push(Span { start, end: line.index });
                }
                continue;
            }
            None => {}
        }
        if block_start.is_some() {
            continue; // inside an explicit block
        }
        if line.kind == LineKind::ConfigComment {
            if run_start.is_none() {
                run_start = Some(line.index);
            }
        } else if let Some(start) = run_start.take() {
            regions.push(Span {
                start,
                end: line.index - 1,
            });
        }
    }
    if let Some(start) = block_start {
        // Unterminated block runs to EOF.
        regions.push(Span {
            start,
            end: lines.len().saturating_sub(1),
        });
    }
    if let Some(start) = run_start {
        regions.push(Span {
            start,
            end: lines.len().saturating_sub(1),
        });
    }

    // Merge overlapping or adjacent regions.
    regions.sort_by_key(|s| s.start);
    let mut merged: Vec<Span> = Vec::with_capacity(regions.len());
    for region in regions {
        match merged.last_mut() {
            Some(last) if region.start <= last.end + 1 => {
                last.end = last.end.max(region.end);
            }
            _ => merged.push(region),
        }
    }
    merged
}

fn is_layer_marker(body: &str) -> bool {
    let b = body.trim();
    let upper = b.to_ascii_uppercase();
    upper.starts_with("LAYER_CHANGE")
        || upper.starts_with("LAYER:")
        || b.to_ascii_lowercase().starts_with("layer num")
}

fn detect_layer_starts(lines: &[GcodeLine]) -> Vec<usize> {
    let mut starts: Vec<usize> = lines
        .iter()
        .filter(|l| {
            matches!(l.kind, LineKind::Comment | LineKind::ConfigComment)
                && l.comment_body().is_some_and(is_layer_marker)
        })
        .map(|l| l.index)
        .collect();
    if !starts.is_empty() {
        starts.dedup();
        return starts;
    }

    // Fallback: strictly increasing Z across extruding moves. Only absolute
    // positioning is trusted; relative XYZ mode disables the scan.
    let mut current_z: Option<f64> = None;
    let mut last_extrude_z: Option<f64> = None;
    let mut last_e = 0.0f64;
    let mut relative_e = false;
    let mut absolute_xyz = true;
    let mut fallback = Vec::new();

    for line in lines {
        let Some(code) = line.code.as_deref() else { continue };
        match code {
            "G90" => absolute_xyz = true,
            "G91" => absolute_xyz = false,
            "M82" => relative_e = false,
            "M83" => relative_e = true,
            "G92" => {
                if let Some(e) = line.param('E') {
                    last_e = e;
                }
            }
            "G0" | "G1" | "G2" | "G3" => {
                if !absolute_xyz {
                    continue;
                }
                if let Some(z) = line.param('Z') {
                    current_z = Some(z);
                }
                let extruding = match line.param('E') {
                    Some(e) if relative_e => e > 1e-9,
                    Some(e) => {
                        let delta = e - last_e;
                        last_e = e;
                        delta > 1e-9
                    }
                    None => false,
                };
                if extruding {
                    if let Some(z) = current_z {
                        if last_extrude_z.is_none_or(|prev| z > prev + 1e-9) {
                            fallback.push(line.index);
                            last_extrude_z = Some(z);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    fallback
}

/// Indices of printed-layer starts. Primary signal is slicer layer-change
/// comments; when none exist, falls back to strictly increasing Z across
/// extruding moves. An empty result is a valid outcome.
pub fn detect_layers(doc: &GcodeDocument) -> Vec<usize> {
    detect_layer_starts(&doc.lines)
}

/// Flatten slicer `key = value` / `key: value` comments into a map.
/// The last occurrence of a key wins.
pub fn extract_config_comments(doc: &GcodeDocument) -> BTreeMap<String, String> {
    let mut map = BTreeMap::new();
    for line in &doc.lines {
        if line.kind != LineKind::ConfigComment {
            continue;
        }
        if let Some((key, value)) = line.comment_body().and_then(is_config_kv) {
            map.insert(key, value);
        }
    }
    map
}

/// Apply the shortening policy: keep configuration regions, initialization
/// (everything before the first layer), the first `head_layers` printed
/// layers, and the final layer through EOF. Deterministic; identical input
/// and policy yield byte-identical output. When no layers are detected the
/// whole file is kept and the result is flagged `degraded`.
pub fn shorten_gcode(doc: &GcodeDocument, policy: &ShorteningPolicy) -> ShortenedGcode {
    let n = doc.lines.len();
    let layers = &doc.layer_starts;
    let degraded = layers.is_empty();

    let mut reasons: Vec<Option<KeepReason>> = vec![None; n];
    let assign = |span: Span, reason: KeepReason, reasons: &mut Vec<Option<KeepReason>>| {
        for slot in reasons[span.start..=span.end].iter_mut() {
            if slot.is_none() {
                *slot = Some(reason);
            }
        }
    };

    // Priority order: config, head layers, final layer, init.
    if policy.keep_config {
        for region in &doc.config_regions {
            assign(*region, KeepReason::Config, &mut reasons);
        }
    }
    if n > 0 {
        let first_layer = layers.first().copied().unwrap_or(n);
        let layer_count = layers.len();
        for (ordinal, start) in layers.iter().enumerate().take(policy.head_layers) {
            let end = if ordinal + 1 < layer_count {
                layers[ordinal + 1] - 1
            } else {
                n - 1
            };
            assign(Span { start: *start, end }, KeepReason::HeadLayer, &mut reasons);
        }
        if policy.keep_final_layer {
            if let Some(last) = layers.last() {
                assign(Span { start: *last, end: n - 1 }, KeepReason::FinalLayer, &mut reasons);
            }
        }
        if policy.keep_init || degraded {
            if first_layer > 0 {
                assign(
                    Span { start: 0, end: first_layer - 1 },
                    KeepReason::Init,
                    &mut reasons,
                );
            }
            if degraded {
                assign(Span { start: 0, end: n - 1 }, KeepReason::Init, &mut reasons);
            }
        }
    }

    // Group consecutive same-reason lines into kept spans.
    let mut kept_spans: Vec<KeptSpan> = Vec::new();
    for (i, reason) in reasons.iter().enumerate() {
        let Some(reason) = reason else { continue };
        match kept_spans.last_mut() {
            Some(last) if last.end + 1 == i && last.reason == *reason => last.end = i,
            _ => kept_spans.push(KeptSpan { start: i, end: i, reason: *reason }),
        }
    }

    let kept_line_count = kept_spans.iter().map(|s| s.end - s.start + 1).sum();
    let mut text = String::new();
    let mut prev_end: Option<usize> = None;
    for span in &kept_spans {
        if let Some(prev) = prev_end {
            let gap = span.start - prev - 1;
            if gap > 0 {
                text.push_str(&format!("; [elided {gap} lines]\n"));
            }
        }
        for line in &doc.lines[span.start..=span.end] {
            text.push_str(&line.raw);
        }
        prev_end = Some(span.end);
    }

    ShortenedGcode {
        text,
        kept_spans,
        original_line_count: n,
        kept_line_count,
        degraded,
    }
}
