use std::path::PathBuf;

use proptest::prelude::*;
use stip::preprocess::{
    annotate, preprocess, strip_noise, tokenize, Label, PatternTable, RawContract, VulnClass,
};
use stip::synth::make_synthetic_corpus;

fn fixture(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn bank() -> RawContract {
    RawContract {
        id: "bank.sol".into(),
        source: fixture("bank.sol"),
        label: Label {
            class: VulnClass::Reentrancy,
            vulnerable: true,
        },
    }
}

#[test]
fn stripped_fixture_matches_golden() {
    let s = strip_noise(&fixture("bank.sol"));
    assert_eq!(s.text, fixture("bank.stripped.sol"));
    assert!(s.warnings.is_empty());
    assert!(s.text.contains("\"see https://example.org // not a comment\""));
    assert!(s.text.contains("'a /* b */ c'"));
}

#[test]
fn token_stream_matches_golden() {
    let tokens = tokenize(&strip_noise(&fixture("bank.sol")).text);
    let golden: Vec<String> = fixture("bank.tokens").lines().map(str::to_string).collect();
    assert_eq!(tokens, golden);
}

/// Byte range of the `withdraw` function in the stripped fixture, located
/// by hand from its header to its closing brace.
fn withdraw_extent(text: &str) -> (usize, usize) {
    let start = text.find("function withdraw").unwrap();
    let close = text[start..].find("\n    }").unwrap() + start + "\n    }".len();
    (start, close)
}

#[test]
fn reentrancy_span_covers_the_withdraw_function() {
    let text = fixture("bank.stripped.sol");
    let spans: Vec<_> = annotate(&text, &PatternTable::builtin())
        .spans
        .into_iter()
        .filter(|s| s.pattern == "reentrancy-call")
        .collect();
    assert_eq!(spans.len(), 2, "two call.value matches");
    let want = withdraw_extent(&text);
    for s in &spans {
        assert_eq!((s.start, s.end), want);
    }
}

#[test]
fn timestamp_span_covers_only_stamp() {
    let text = fixture("bank.stripped.sol");
    let spans: Vec<_> = annotate(&text, &PatternTable::builtin())
        .spans
        .into_iter()
        .filter(|s| s.pattern == "timestamp")
        .collect();
    assert_eq!(spans.len(), 1);
    let body = &text[spans[0].start..spans[0].end];
    assert!(body.starts_with("function stamp()"));
    assert!(body.ends_with('}'));
    assert!(!body.contains("withdraw"));
}

#[test]
fn token_spans_follow_source_spans() {
    let c = preprocess(&bank(), &PatternTable::builtin());
    let re: Vec<_> = c.spans.iter().filter(|s| s.pattern == "reentrancy-call").collect();
    assert_eq!(re.len(), 2);
    assert_eq!((re[0].start, re[0].end), (re[1].start, re[1].end));
    let span = &c.tokens[re[0].start..re[0].end];
    assert_eq!(&span[..2], ["function", "withdraw"]);
    assert_eq!(span.last().map(String::as_str), Some("}"));
    assert_eq!(c.start_token(), c.spans[0].start);
    for w in c.spans.windows(2) {
        assert!(w[0].start <= w[1].start);
    }
}

#[test]
fn matches_outside_functions_use_a_line_window() {
    let text = "contract A {\n    uint a;\n    uint b;\n    uint t = now;\n    uint c;\n    uint d;\n    uint e;\n}";
    let spans = annotate(text, &PatternTable::builtin()).spans;
    assert_eq!(spans.len(), 1);
    assert_eq!(&text[spans[0].start..spans[0].end], "    uint a;\n    uint b;\n    uint t = now;\n    uint c;\n    uint d;");
}

#[test]
fn custom_pattern_table_replaces_builtin() {
    let table = PatternTable::parse("# name\tregex\nselfdestruct\t\\bselfdestruct\\s*\\(\n").unwrap();
    let text = "contract A {\n    function kill() public {\n        selfdestruct(msg.sender);\n    }\n}";
    let spans = annotate(text, &table).spans;
    assert_eq!(spans.len(), 1);
    assert_eq!(spans[0].pattern, "selfdestruct");
    assert!(PatternTable::parse("bad\t(unclosed\n").is_err());
}

/// Random code-like text mixing the constructs the stripper must handle.
fn noisy_source() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("uint x = 1;".to_string()),
        Just("// comment".to_string()),
        Just("/* block */".to_string()),
        Just("/* multi\nline */".to_string()),
        Just("\"str // not comment\"".to_string()),
        Just("'q /* x */'".to_string()),
        Just("import \"a.sol\";".to_string()),
        Just("msg.sender.call.value(1)();".to_string()),
        Just("function f() public {".to_string()),
        Just("}".to_string()),
        Just("\n".to_string()),
        Just("   ".to_string()),
        Just("block.timestamp".to_string()),
        "[a-z{}();=+*/\"' \n]{0,12}",
    ];
    prop::collection::vec(piece, 0..30).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn strip_is_idempotent(src in noisy_source()) {
        let once = strip_noise(&src).text;
        prop_assert_eq!(strip_noise(&once).text, once);
    }

    #[test]
    fn tokens_never_carry_comment_markers(src in noisy_source()) {
        for t in tokenize(&strip_noise(&src).text) {
            prop_assert!(!t.contains("//") && !t.contains("/*"), "token {:?}", t);
            prop_assert!(!t.is_empty() && !t.chars().any(char::is_whitespace));
        }
    }

    #[test]
    fn spans_index_valid_ranges(src in noisy_source()) {
        let raw = RawContract {
            id: "x.sol".into(),
            source: src,
            label: Label { class: VulnClass::Reentrancy, vulnerable: false },
        };
        let c = preprocess(&raw, &PatternTable::builtin());
        for s in &c.spans {
            prop_assert!(s.start < s.end && s.end <= c.tokens.len());
        }
    }

    #[test]
    fn synthetic_contract_spans_are_valid(seed in any::<u64>(), class_index in 0usize..5) {
        let class = VulnClass::ALL[class_index];
        for raw in make_synthetic_corpus(20, class, seed).unwrap() {
            let c = preprocess(&raw, &PatternTable::builtin());
            prop_assert!(c.warnings.is_empty());
            for s in &c.spans {
                prop_assert!(s.start < s.end && s.end <= c.tokens.len());
            }
        }
    }
}

#[test]
fn vulnerable_synthetic_samples_carry_their_trigger() {
    let triggers = [
        (VulnClass::Reentrancy, "reentrancy-call"),
        (VulnClass::Timestamp, "timestamp"),
        (VulnClass::Delegatecall, "delegatecall"),
        (VulnClass::IntegerOverflowUnderflow, "integer-overflow"),
        (VulnClass::Cdav, "cdav"),
    ];
    for (class, pattern) in triggers {
        for raw in make_synthetic_corpus(40, class, 5).unwrap() {
            let c = preprocess(&raw, &PatternTable::builtin());
            let hit = c.spans.iter().any(|s| s.pattern == pattern);
            assert_eq!(hit, raw.label.vulnerable, "{} ({pattern})", raw.id);
        }
    }
}
