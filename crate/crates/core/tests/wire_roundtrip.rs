//! Wire messages survive serialization unchanged.

use lookback_core::backend::wire::{
    WireChunk, WireGenerateRequest, WireImage, WireScoreRequest, WireScoreResponse,
};
use lookback_core::backend::{
    ContextKind, GenerateRequest, Sampling, ScoreRequest, TokenLogprob, VisualContext,
};
use proptest::prelude::*;

fn context() -> impl Strategy<Value = VisualContext> {
    prop_oneof![
        Just(VisualContext::absent()),
        (
            proptest::collection::vec(any::<u8>(), 1..64),
            prop_oneof![Just("image/png"), Just("image/jpeg")],
            1u32..4096,
            1u32..4096
        )
            .prop_map(|(bytes, mime, w, h)| VisualContext::real_with_resolution(
                bytes,
                mime,
                (w, h)
            )),
    ]
}

fn logprob() -> impl Strategy<Value = f64> {
    prop_oneof![
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN),
        -1e300..0.0f64,
        (-50.0..0.0f64),
        any::<f64>().prop_filter_map("finite non-positive", |v| (v.is_finite() && v <= 0.0)
            .then_some(v)),
    ]
}

fn text() -> impl Strategy<Value = String> {
    prop_oneof![
        any::<String>(),
        "[ a-zA-Z.,\\n\\t\"\\\\{}]{0,12}",
        Just(String::new())
    ]
}

fn same_context(a: &VisualContext, b: &VisualContext) -> bool {
    a.kind() == b.kind() && a.payload() == b.payload()
}

fn json_round<T: serde::Serialize + serde::de::DeserializeOwned>(v: &T) -> T {
    serde_json::from_str(&serde_json::to_string(v).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_500))]

    #[test]
    fn score_request_round_trip(
        model in text(),
        question in text(),
        ctx in context(),
        continuation in proptest::collection::vec(text(), 1..8),
    ) {
        let req = ScoreRequest { model_id: model, question, context: ctx, continuation };
        let wire = WireScoreRequest::from(&req);
        let back_wire: WireScoreRequest = json_round(&wire);
        prop_assert_eq!(&back_wire, &wire);
        let back = back_wire.into_domain().unwrap();
        prop_assert_eq!(&back.model_id, &req.model_id);
        prop_assert_eq!(&back.question, &req.question);
        prop_assert_eq!(&back.continuation, &req.continuation);
        prop_assert!(same_context(&back.context, &req.context));
    }

    #[test]
    fn score_response_round_trip(
        tokens in proptest::collection::vec((text(), logprob()), 0..16),
        model in proptest::option::of(text()),
    ) {
        let wire = WireScoreResponse {
            tokens: tokens.into_iter().map(|(text, logprob)| TokenLogprob { text, logprob }).collect(),
            model,
        };
        let back: WireScoreResponse = json_round(&wire);
        prop_assert_eq!(back.tokens.len(), wire.tokens.len());
        for (a, b) in back.tokens.iter().zip(&wire.tokens) {
            prop_assert_eq!(&a.text, &b.text);
            prop_assert_eq!(a.logprob.to_bits(), b.logprob.to_bits());
        }
        prop_assert_eq!(&back.model, &wire.model);
    }

    #[test]
    fn generate_request_round_trip(
        model in text(),
        question in text(),
        ctx in context(),
        prefix in proptest::collection::vec(text(), 0..8),
        temperature in 0.0..4.0f64,
        top_p in (1e-9..=1.0f64),
        seed in any::<u64>(),
        max_new_tokens in 1usize..100_000,
    ) {
        let req = GenerateRequest {
            model_id: model,
            question,
            context: ctx,
            prefix,
            sampling: Sampling { temperature, top_p, seed, max_new_tokens },
        };
        let wire = WireGenerateRequest::from(&req);
        let back_wire: WireGenerateRequest = json_round(&wire);
        prop_assert_eq!(&back_wire, &wire);
        let back = back_wire.into_domain().unwrap();
        prop_assert_eq!(back.sampling, req.sampling);
        prop_assert_eq!(&back.prefix, &req.prefix);
        prop_assert!(same_context(&back.context, &req.context));
    }

    #[test]
    fn stream_chunk_round_trip(
        chunk in prop_oneof![
            (text(), logprob()).prop_map(|(text, logprob)| WireChunk::Token { text, logprob }),
            any::<bool>().prop_map(|truncated| WireChunk::Done { done: true, truncated }),
        ]
    ) {
        let line = chunk.to_line();
        prop_assert!(line.ends_with('\n'));
        prop_assert_eq!(line.matches('\n').count(), 1, "one chunk per line");
        let back = WireChunk::parse_line(line.trim_end_matches('\n')).unwrap();
        prop_assert_eq!(back, chunk);
    }
}

#[test]
fn image_kinds_use_lowercase_tags() {
    for kind in ContextKind::ALL {
        let json = serde_json::to_string(&WireImage {
            kind,
            data: None,
            mime: None,
        })
        .unwrap();
        assert_eq!(json, format!("{{\"kind\":\"{}\"}}", kind.as_str()));
    }
}

#[test]
fn open_done_chunk_is_rejected() {
    assert!(WireChunk::parse_line("{\"done\":false,\"truncated\":false}").is_err());
    assert!(WireChunk::parse_line("{\"text\":\"a\"}").is_err());
}
