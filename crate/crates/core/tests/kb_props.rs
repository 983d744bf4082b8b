mod common;

use common::{raw_kb, scan_match, scan_related, TOKENS};
use proptest::prelude::*;

proptest! {
    #[test]
    fn every_name_token_indexes_its_entity(raw in raw_kb(30)) {
        let kb = raw.build();
        for e in 0..kb.len() {
            for t in &kb.entity(e).name_tokens {
                prop_assert!(kb.postings(t).contains(&e));
            }
        }
    }

    #[test]
    fn match_by_name_equals_linear_scan(raw in raw_kb(30), query in prop::collection::vec(0..TOKENS.len(), 1..4)) {
        let kb = raw.build();
        let tokens: Vec<String> = query.iter().map(|&t| TOKENS[t].to_uppercase()).collect();
        let got = kb.match_by_name(&tokens);
        prop_assert_eq!(&got, &scan_match(&kb, &tokens));
        prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn related_equals_triple_scan(raw in raw_kb(20)) {
        let kb = raw.build();
        for a in 0..kb.len() {
            for b in 0..kb.len() {
                prop_assert_eq!(kb.related_idx(a, b), scan_related(&kb, a, b), "pair {} {}", a, b);
            }
        }
    }
}
