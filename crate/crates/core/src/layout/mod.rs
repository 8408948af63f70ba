//! Text-to-layout control: few-shot prompt construction, an LLM client with
//! an offline stub, strict JSON parsing, the kNN baseline and tMSE.
//!
//! Coordinates are head translations in meters with +z forward, +x right
//! and the origin at the centre of the interaction.

mod client;

pub use client::{request_layout, request_live, HttpTransport, LlmClientConfig, LlmMode, LlmTransport};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::facemodel::Vec3;
use crate::scalar::Scalar;

/// Largest accepted coordinate magnitude in meters.
pub const MAX_COORD: f64 = 10.0;
pub const PROMPT_EXAMPLES: usize = 3;
pub const DEFAULT_KNN_K: usize = 5;

pub const SYSTEM_INSTRUCTION: &str = "System: You are a 3D scene layout assistant. Generate 3D head translation coordinates (in meters) for two people (A and B) based on a text description. The center of the conversation is (0,0,0). Output ONLY valid JSON.";

const DEFAULT_BANK: &str = include_str!("../../data/layout_bank.jsonl");

#[derive(Debug, thiserror::Error)]
pub enum LayoutError {
    /// No JSON object could be read from the text.
    #[error("parse error: {0}")]
    Parse(String),
    /// A JSON object was found but does not describe a layout.
    #[error("schema error: {0}")]
    Schema(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("example bank: {0}")]
    Bank(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// First-frame head translations of both participants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutResult {
    #[serde(rename = "A")]
    pub a: [f64; 3],
    #[serde(rename = "B")]
    pub b: [f64; 3],
}

impl LayoutResult {
    pub fn new(a: [f64; 3], b: [f64; 3]) -> Result<Self, LayoutError> {
        for v in a.iter().chain(&b) {
            if !v.is_finite() {
                return Err(LayoutError::Schema(format!("non-finite coordinate {v}")));
            }
            if v.abs() > MAX_COORD {
                return Err(LayoutError::Schema(format!("coordinate {v} exceeds {MAX_COORD} m")));
            }
        }
        Ok(Self { a, b })
    }

    /// `{"A": [x, y, z], "B": [x, y, z]}` with shortest round-trip numbers.
    pub fn to_json(&self) -> String {
        let v = |p: &[f64; 3]| format!("[{:?}, {:?}, {:?}]", p[0], p[1], p[2]);
        format!("{{\"A\": {}, \"B\": {}}}", v(&self.a), v(&self.b))
    }

    /// Translations as conditioning vectors `(t_A, t_B)`.
    pub fn translations<T: Scalar>(&self) -> (Vec3<T>, Vec3<T>) {
        let c = |p: &[f64; 3]| [T::lit(p[0]), T::lit(p[1]), T::lit(p[2])];
        (c(&self.a), c(&self.b))
    }
}

/// Mean over both participants of the squared translation error.
pub fn tmse(pred: &LayoutResult, gt: &LayoutResult) -> f64 {
    let d2 = |p: &[f64; 3], q: &[f64; 3]| -> f64 { p.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum() };
    0.5 * (d2(&pred.a, &gt.a) + d2(&pred.b, &gt.b))
}

/// Start of every balanced top-level `{...}` span, ignoring braces inside
/// JSON strings.
fn object_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let (mut depth, mut in_str, mut esc) = (0usize, false, false);
        let mut close = None;
        for (i, &c) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match c {
                    _ if esc => esc = false,
                    b'\\' => esc = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match c {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match close {
            Some(end) => {
                spans.push((open, end + 1));
                start = end + 1;
            }
            None => break,
        }
    }
    spans
}

fn coord_triple(obj: &serde_json::Map<String, Value>, key: &str) -> Result<[f64; 3], LayoutError> {
    let arr = obj
        .get(key)
        .ok_or_else(|| LayoutError::Schema(format!("missing key \"{key}\"")))?
        .as_array()
        .ok_or_else(|| LayoutError::Schema(format!("\"{key}\" is not an array")))?;
    if arr.len() != 3 {
        return Err(LayoutError::Schema(format!(
            "\"{key}\" has {} entries, expected 3",
            arr.len()
        )));
    }
    let mut out = [0.0; 3];
    for (o, v) in out.iter_mut().zip(arr) {
        *o = v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| LayoutError::Schema(format!("\"{key}\" entry {v} is not a finite number")))?;
    }
    Ok(out)
}

/// Reads the first JSON object in `raw`, tolerating surrounding prose or
/// markdown fences. Coordinates beyond ±10 m are clamped with a warning.
/// Extra keys besides `A` and `B` are ignored.
pub fn parse_layout(raw: &str) -> Result<LayoutResult, LayoutError> {
    let obj = object_spans(raw)
        .into_iter()
        .find_map(|(s, e)| match serde_json::from_str::<Value>(&raw[s..e]) {
            Ok(Value::Object(m)) => Some(m),
            _ => None,
        })
        .ok_or_else(|| LayoutError::Parse(format!("no JSON object in {:?}", truncate(raw, 80))))?;
    let mut a = coord_triple(&obj, "A")?;
    let mut b = coord_triple(&obj, "B")?;
    for v in a.iter_mut().chain(b.iter_mut()) {
        if v.abs() > MAX_COORD {
            log::warn!("layout coordinate {v} clamped to ±{MAX_COORD} m");
            *v = v.clamp(-MAX_COORD, MAX_COORD);
        }
    }
    LayoutResult::new(a, b)
}

fn truncate(s: &str, n: usize) -> String {
    s.chars().take(n).collect()
}

/// A labelled description/layout pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub description: String,
    #[serde(flatten)]
    pub layout: LayoutResult,
    /// `reference` or `synthetic`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExampleBank {
    examples: Vec<FewShotExample>,
}

impl ExampleBank {
    pub fn new(examples: Vec<FewShotExample>) -> Result<Self, LayoutError> {
        for e in &examples {
            LayoutResult::new(e.layout.a, e.layout.b)
                .map_err(|err| LayoutError::Bank(format!("{:?}: {err}", e.description)))?;
        }
        Ok(Self { examples })
    }

    /// Line-delimited JSON `{description, A, B}`; blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, LayoutError> {
        let examples = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| LayoutError::Bank(format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(examples)
    }

    pub fn load(path: &Path) -> Result<Self, LayoutError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?)
    }

    /// The 30-entry bank shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_jsonl(DEFAULT_BANK).expect("bundled bank is valid")
    }

    pub fn examples(&self) -> &[FewShotExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// System instruction, three seeded examples in bank order, then the query.
/// Descriptions are emitted as JSON string literals so quotes stay escaped.
pub fn build_prompt(query: &str, bank: &ExampleBank, seed: u64) -> Result<String, LayoutError> {
    if bank.len() < PROMPT_EXAMPLES {
        return Err(LayoutError::Bank(format!(
            "need at least {PROMPT_EXAMPLES} examples, bank has {}",
            bank.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, bank.len(), PROMPT_EXAMPLES).into_vec();
    picks.sort_unstable();
    let quote = |s: &str| serde_json::to_string(s).expect("string serializes");
    let mut out = String::from(SYSTEM_INSTRUCTION);
    out.push_str("\n\n");
    for (n, &i) in picks.iter().enumerate() {
        let e = &bank.examples[i];
        out.push_str(&format!(
            "[Example {}]\nInput: {}\nOutput: {}\n\n",
            n + 1,
            quote(&e.description),
            e.layout.to_json()
        ));
    }
    out.push_str(&format!("[User Query]\nInput: {}\nOutput:", quote(query)));
    Ok(out)
}

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn bag(text: &str) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for t in tokens(text) {
        *m.entry(t).or_insert(0.0) += 1.0;
    }
    m
}

/// Cosine similarity of token-count vectors; 0 when either side is empty.
pub fn bag_cosine(a: &str, b: &str) -> f64 {
    let (x, y) = (bag(a), bag(b));
    let dot: f64 = x.iter().filter_map(|(k, v)| y.get(k).map(|w| v * w)).sum();
    let n = |m: &BTreeMap<String, f64>| m.values().map(|v| v * v).sum::<f64>().sqrt();
    let (nx, ny) = (n(&x), n(&y));
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        dot / (nx * ny)
    }
}

/// Jaccard overlap of token sets.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let x: std::collections::BTreeSet<String> = tokens(a).into_iter().collect();
    let y: std::collections::BTreeSet<String> = tokens(b).into_iter().collect();
    let union = x.union(&y).count();
    if union == 0 {
        0.0
    } else {
        x.intersection(&y).count() as f64 / union as f64
    }
}

/// Offline stand-in for the LLM: the layout of the bank entry with the
/// highest token overlap, earliest entry on ties.
pub fn stub_layout(query: &str, bank: &ExampleBank) -> Result<LayoutResult, LayoutError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in bank.examples.iter().enumerate() {
        let s = token_overlap(query, &e.description);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| bank.examples[i].layout)
        .ok_or_else(|| LayoutError::Bank("empty bank".into()))
}

/// Mean layout of the `k` bank entries most similar to `query` under
/// bag-of-tokens cosine similarity; ties keep bank order.
pub fn knn_layout(query: &str, bank: &ExampleBank, k: usize) -> Result<LayoutResult, LayoutError> {
    if k == 0 || bank.len() < k {
        return Err(LayoutError::Bank(format!("k = {k} with a bank of {}", bank.len())));
    }
    let mut scored: Vec<(usize, f64)> = bank
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| (i, bag_cosine(query, &e.description)))
        .collect();
    scored.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
    for &(i, _) in &scored[..k] {
        let l = &bank.examples[i].layout;
        for j in 0..3 {
            a[j] += l.a[j] / k as f64;
            b[j] += l.b[j] / k as f64;
        }
    }
    Ok(LayoutResult { a, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(d: &str, a: [f64; 3], b: [f64; 3]) -> FewShotExample {
        FewShotExample {
            description: d.into(),
            layout: LayoutResult { a, b },
            source: None,
        }
    }

    #[test]
    fn parses_the_face_to_face_example() {
        let l = parse_layout(r#"{"A": [0.0, 0.0, -0.5], "B": [0.0, 0.0, 0.5]}"#).unwrap();
        assert_eq!(l.a, [0.0, 0.0, -0.5]);
        assert_eq!(l.b, [0.0, 0.0, 0.5]);
    }

    #[test]
    fn fenced_json_is_accepted() {
        let l = parse_layout("```json\n{\"A\":[0,0,0],\"B\":[0,0,0]}\n```").unwrap();
        assert_eq!(
            l,
            LayoutResult {
                a: [0.0; 3],
                b: [0.0; 3]
            }
        );
    }

    #[test]
    fn parse_and_schema_errors_are_distinct() {
        assert!(matches!(
            parse_layout(r#"{"A":[1,2],"B":[0,0,0]}"#),
            Err(LayoutError::Schema(_))
        ));
        assert!(matches!(parse_layout("no json here"), Err(LayoutError::Parse(_))));
        assert!(matches!(
            parse_layout(r#"{"A": [0,0,0], "B": "#),
            Err(LayoutError::Parse(_))
        ));
        assert!(matches!(parse_layout(r#"{"A":[0,0,0]}"#), Err(LayoutError::Schema(_))));
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_the_scanner() {
        let l = parse_layout(r#"Sure: {"note": "a } b {", "A": [1,0,0], "B": [0,1,0]} done"#).unwrap();
        assert_eq!(l.a, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn out_of_range_coordinates_are_clamped() {
        let l = parse_layout(r#"{"A":[25,0,0],"B":[0,0,-11]}"#).unwrap();
        assert_eq!(l.a[0], 10.0);
        assert_eq!(l.b[2], -10.0);
    }

    #[test]
    fn tmse_cases() {
        let gt = LayoutResult {
            a: [0.0, 0.0, -0.5],
            b: [0.0, 0.0, 0.5],
        };
        assert_eq!(tmse(&gt, &gt), 0.0);
        let mut p = gt;
        p.a[0] += 1.0;
        assert_eq!(tmse(&p, &gt), 0.5);
        let mut q = gt;
        q.a[2] += 2.0;
        q.b[2] += 2.0;
        assert_eq!(tmse(&q, &gt), 4.0);
    }

    #[test]
    fn builtin_bank_has_thirty_examples_with_three_reference_entries() {
        let bank = ExampleBank::builtin();
        assert_eq!(bank.len(), 30);
        let reference = bank
            .examples()
            .iter()
            .filter(|e| e.source.as_deref() == Some("reference"))
            .count();
        assert_eq!(reference, 3);
    }

    #[test]
    fn prompt_is_deterministic_and_has_three_examples() {
        let bank = ExampleBank::builtin();
        let p = build_prompt("two people on a bench", &bank, 5).unwrap();
        assert_eq!(p, build_prompt("two people on a bench", &bank, 5).unwrap());
        assert_eq!(p.matches("[Example").count(), 3);
        assert_eq!(p.matches("[User Query]").count(), 1);
        assert!(p.starts_with(SYSTEM_INSTRUCTION));
        assert!(p.ends_with("Output:"));
    }

    #[test]
    fn bank_of_three_is_used_in_order() {
        let bank = ExampleBank::new(vec![
            ex("first", [0.0; 3], [0.0; 3]),
            ex("second", [0.0; 3], [0.0; 3]),
            ex("third", [0.0; 3], [0.0; 3]),
        ])
        .unwrap();
        let p = build_prompt("q", &bank, 99).unwrap();
        let (f, s, t) = (
            p.find("first").unwrap(),
            p.find("second").unwrap(),
            p.find("third").unwrap(),
        );
        assert!(f < s && s < t);
        assert!(build_prompt("q", &ExampleBank::new(vec![]).unwrap(), 0).is_err());
    }

    #[test]
    fn quoted_query_stays_well_formed() {
        let bank = ExampleBank::builtin();
        let q = r#"She said "hi" and \ left"#;
        let p = build_prompt(q, &bank, 1).unwrap();
        let line = p.lines().rev().nth(1).unwrap();
        let lit = line.strip_prefix("Input: ").unwrap();
        assert_eq!(serde_json::from_str::<String>(lit).unwrap(), q);
    }

    #[test]
    fn first_reference_example_block_matches_the_template() {
        let bank = ExampleBank::new(vec![
            ex(
                "Standing face-to-face in a normal conversation.",
                [0.0, 0.0, -0.5],
                [0.0, 0.0, 0.5],
            ),
            ex(
                "Sitting side-by-side on a bench watching a game.",
                [-0.3, -0.2, 0.0],
                [0.3, -0.2, 0.0],
            ),
            ex("A is whispering into B's ear.", [-0.15, 0.0, -0.1], [0.15, 0.0, 0.1]),
        ])
        .unwrap();
        let p = build_prompt("<USER_PROMPT>", &bank, 0).unwrap();
        let want = format!(
            "{SYSTEM_INSTRUCTION}\n\n[Example 1]\nInput: \"Standing face-to-face in a normal conversation.\"\nOutput: {{\"A\": [0.0, 0.0, -0.5], \"B\": [0.0, 0.0, 0.5]}}\n\n[Example 2]\nInput: \"Sitting side-by-side on a bench watching a game.\"\nOutput: {{\"A\": [-0.3, -0.2, 0.0], \"B\": [0.3, -0.2, 0.0]}}\n\n[Example 3]\nInput: \"A is whispering into B's ear.\"\nOutput: {{\"A\": [-0.15, 0.0, -0.1], \"B\": [0.15, 0.0, 0.1]}}\n\n[User Query]\nInput: \"<USER_PROMPT>\"\nOutput:"
        );
        assert_eq!(p, want);
    }

    #[test]
    fn stub_returns_exact_match() {
        let bank = ExampleBank::builtin();
        for e in bank.examples() {
            assert_eq!(stub_layout(&e.description, &bank).unwrap(), e.layout);
        }
    }

    #[test]
    fn knn_cases() {
        let bank = ExampleBank::new(vec![
            ex("alpha beta", [1.0, 0.0, 0.0], [0.0; 3]),
            ex("gamma delta", [0.0, 1.0, 0.0], [0.0; 3]),
            ex("gamma delta", [0.0, 0.0, 1.0], [0.0; 3]),
        ])
        .unwrap();
        assert_eq!(knn_layout("alpha beta", &bank, 1).unwrap().a, [1.0, 0.0, 0.0]);
        let all = knn_layout("anything", &bank, 3).unwrap();
        for (x, w) in all.a.iter().zip([1.0 / 3.0; 3]) {
            assert!((x - w).abs() < 1e-15);
        }
        // the two "gamma delta" entries tie; the earlier one wins
        assert_eq!(knn_layout("gamma delta", &bank, 1).unwrap().a, [0.0, 1.0, 0.0]);
        assert!(knn_layout("q", &bank, 4).is_err());
    }

    fn coord() -> impl Strategy<Value = f64> {
        -MAX_COORD..=MAX_COORD
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(a in [coord(), coord(), coord()], b in [coord(), coord(), coord()]) {
            let l = LayoutResult::new(a, b).unwrap();
            prop_assert_eq!(parse_layout(&l.to_json()).unwrap(), l);
        }

        #[test]
        fn tmse_is_symmetric_and_nonnegative(a in [coord(), coord(), coord()], b in [coord(), coord(), coord()], c in [coord(), coord(), coord()]) {
            let p = LayoutResult::new(a, b).unwrap();
            let q = LayoutResult::new(c, b).unwrap();
            prop_assert!(tmse(&p, &q) >= 0.0);
            prop_assert_eq!(tmse(&p, &q), tmse(&q, &p));
            prop_assert_eq!(tmse(&p, &q) == 0.0, p == q);
        }
    }
}
