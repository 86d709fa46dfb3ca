use std::collections::HashSet;

use proptest::prelude::*;

use postedit::data::{
    build_vocab, learn_bpe, make_batches, prepare_triples, PrepareConfig, TextTriple, Triple, Vocabulary, BOS_ID,
    EOS_ID, UNK_ID,
};

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-e]{1,4}", 0..6)
}

fn text_triple() -> impl Strategy<Value = TextTriple> {
    (words(), words(), words()).prop_map(|(src, mt, pe)| TextTriple { src, mt, pe })
}

fn id_triple() -> impl Strategy<Value = Triple> {
    let side = || prop::collection::vec(4u32..30, 0..8).prop_map(|v| [vec![BOS_ID], v, vec![EOS_ID]].concat());
    (side(), side(), side()).prop_map(|(src, mt, pe)| Triple { src, mt, pe })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_partition_the_epoch(triples in prop::collection::vec(id_triple(), 1..40), min in 1usize..30, seed in any::<u64>()) {
        let batches = make_batches(&triples, min, seed).unwrap();
        let mut seen: Vec<Triple> = batches.iter().flat_map(|b| b.triples.clone()).collect();
        let mut expected = triples.clone();
        seen.sort();
        expected.sort();
        prop_assert_eq!(seen, expected);
        for b in &batches[..batches.len() - 1] {
            prop_assert!(b.pe_tokens() >= min);
        }
        for b in &batches {
            prop_assert_eq!(b.pe.batch, b.len());
            for (r, t) in b.triples.iter().enumerate() {
                prop_assert_eq!(b.pe.row(r), t.pe.as_slice());
            }
        }
    }

    #[test]
    fn pe_allowed_is_exactly_the_pe_side(triples in prop::collection::vec(text_triple(), 1..20)) {
        let src: Vec<_> = triples.iter().map(|t| t.src.clone()).collect();
        let mt: Vec<_> = triples.iter().map(|t| t.mt.clone()).collect();
        let pe: Vec<_> = triples.iter().map(|t| t.pe.clone()).collect();
        let vocab = build_vocab(&src, &mt, &pe);
        let pe_tokens: HashSet<&str> = pe.iter().flatten().map(String::as_str).collect();
        for (id, tok) in vocab.tokens().iter().enumerate() {
            let expected = Vocabulary::is_special(id as u32) || pe_tokens.contains(tok.as_str());
            prop_assert_eq!(vocab.is_pe_allowed(id as u32), expected, "{}", tok);
        }
        for line in src.iter().chain(&mt).chain(&pe) {
            let ids = vocab.encode(line);
            prop_assert!(!ids.contains(&UNK_ID));
            prop_assert_eq!(&vocab.decode(&ids[1..ids.len() - 1]), line);
        }
    }

    #[test]
    fn prepared_size_follows_the_filter(
        real in prop::collection::vec(text_triple(), 0..15),
        synthetic in prop::collection::vec(text_triple(), 0..15),
        max_len in 1usize..6,
        upsample in 0usize..5,
    ) {
        let ok = |t: &TextTriple| [&t.src, &t.mt, &t.pe].iter().all(|s| !s.is_empty() && s.len() <= max_len);
        let kept_real = real.iter().filter(|t| ok(t)).count();
        let kept_synth = synthetic.iter().filter(|t| ok(t)).count();
        let out = prepare_triples(&real, &synthetic, PrepareConfig { max_len, upsample_real: upsample });
        prop_assert_eq!(out.len(), upsample * kept_real + kept_synth);
        prop_assert!(out.iter().all(ok));
    }

    #[test]
    fn bpe_segmentation_is_lossless(
        corpus in prop::collection::vec("[a-f]{1,7}( [a-f]{1,7}){0,5}", 1..20),
        probe in "[a-h]{1,9}( [a-h]{1,9}){0,4}",
        merges in 0usize..40,
        threshold in 0u64..6,
    ) {
        let model = learn_bpe(corpus.iter().map(String::as_str), merges).unwrap();
        prop_assert!(model.merges().len() <= merges);
        for line in corpus.iter().chain(std::iter::once(&probe)) {
            let pieces = model.apply_line(line, threshold);
            prop_assert_eq!(&model.join(&pieces), line);
        }
    }
}
