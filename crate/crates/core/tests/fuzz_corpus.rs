//! Replays the fuzz corpus and mutated copies of it through every parser with
//! the same properties the fuzz targets assert, so they also run on stable.

use proptest::prelude::*;
use recal::calibration::CalibrationIndexList;
use recal::config::ExperimentConfig;
use recal::dataset::{self, DatasetMeta};
use recal::head;
use std::fs;
use std::path::PathBuf;

const TARGETS: [&str; 5] = ["decode_vle", "decode_prj", "parse_config", "parse_meta", "parse_calset"];

fn corpus(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("reading {}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.into_iter().map(|p| fs::read(p).unwrap()).collect()
}

fn check(target: &str, data: &[u8]) {
    match target {
        "decode_vle" => {
            if let Ok(ds) = dataset::decode(data) {
                let bytes = dataset::encode(&ds).expect("decoded dataset re-encodes");
                let again = dataset::decode(&bytes).expect("re-encoded dataset decodes");
                assert_eq!(again.n_samples(), ds.n_samples());
            }
        }
        "decode_prj" => {
            if let Ok(h) = head::decode_head(data) {
                let bytes = head::encode_head(&h).expect("decoded head re-encodes");
                assert_eq!(head::decode_head(&bytes).expect("round trip"), h);
            }
        }
        text_target => {
            let Ok(text) = std::str::from_utf8(data) else { return };
            match text_target {
                "parse_config" => {
                    if let Ok(cfg) = ExperimentConfig::parse(text) {
                        let _ = ExperimentConfig::parse(&cfg.to_text());
                    }
                }
                "parse_meta" => {
                    if let Ok(meta) = DatasetMeta::parse(text) {
                        if let Ok(rendered) = meta.to_text() {
                            assert_eq!(DatasetMeta::parse(&rendered).expect("rendered sidecar parses"), meta);
                        }
                    }
                }
                _ => {
                    let _ = CalibrationIndexList::parse(text);
                }
            }
        }
    }
}

#[test]
fn every_target_has_seeds() {
    for t in TARGETS {
        assert!(!corpus(t).is_empty(), "{t} has no corpus seeds");
    }
}

#[test]
fn valid_seeds_parse() {
    assert!(dataset::decode(&corpus("decode_vle")[1]).is_ok());
    assert!(head::decode_head(&corpus("decode_prj")[0]).is_ok());
    assert!(ExperimentConfig::parse(std::str::from_utf8(&corpus("parse_config")[0]).unwrap()).is_ok());
    assert!(DatasetMeta::parse(std::str::from_utf8(&corpus("parse_meta")[1]).unwrap()).is_ok());
    assert!(CalibrationIndexList::parse(std::str::from_utf8(&corpus("parse_calset")[1]).unwrap()).is_ok());
}

#[test]
fn seeds_satisfy_properties() {
    for t in TARGETS {
        for seed in corpus(t) {
            check(t, &seed);
        }
    }
}

#[derive(Debug, Clone)]
enum Mutation {
    Flip(usize, u8),
    Truncate(usize),
    Insert(usize, u8),
    Remove(usize),
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        (any::<usize>(), any::<u8>()).prop_map(|(i, b)| Mutation::Flip(i, b)),
        any::<usize>().prop_map(Mutation::Truncate),
        (any::<usize>(), any::<u8>()).prop_map(|(i, b)| Mutation::Insert(i, b)),
        any::<usize>().prop_map(Mutation::Remove),
    ]
}

fn mutate(mut data: Vec<u8>, ms: &[Mutation]) -> Vec<u8> {
    for m in ms {
        let n = data.len();
        match *m {
            Mutation::Flip(i, b) if n > 0 => data[i % n] ^= b,
            Mutation::Truncate(i) => data.truncate(i % (n + 1)),
            Mutation::Insert(i, b) => data.insert(i % (n + 1), b),
            Mutation::Remove(i) if n > 0 => {
                data.remove(i % n);
            }
            _ => {}
        }
    }
    data
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mutated_seeds_never_panic(
        target in 0..TARGETS.len(),
        pick in any::<usize>(),
        ms in prop::collection::vec(mutation(), 1..6),
    ) {
        let t = TARGETS[target];
        let seeds = corpus(t);
        let data = mutate(seeds[pick % seeds.len()].clone(), &ms);
        check(t, &data);
    }
}
