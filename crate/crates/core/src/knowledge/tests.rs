use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_store(n: usize, dim: usize, seed: u64) -> KnowledgeStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = KnowledgeStore::new(dim, "test");
    for i in 0..n {
        store
            .insert(KnowledgeChunk {
                id: format!("c{i:04}"),
                partition: Partition::ALL[i % 3],
                text: String::new(),
                embedding: random_unit(&mut rng, dim),
                rule: None,
            })
            .unwrap();
    }
    store
}

fn brute_force(store: &KnowledgeStore, q: &[f64], k: usize, p: Option<Partition>) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = store
        .chunks()
        .iter()
        .filter(|c| p.is_none_or(|p| p == c.partition))
        .map(|c| (c.id.clone(), c.embedding.iter().zip(q).map(|(a, b)| a * b).sum()))
        .collect();
    // Selection by repeated argmax, independent of the store's sort.
    let mut out = Vec::new();
    while out.len() < k && !all.is_empty() {
        let mut best = 0;
        for i in 1..all.len() {
            let (ref id, s) = all[i];
            let (ref bid, bs) = all[best];
            if s > bs || (s == bs && id < bid) {
                best = i;
            }
        }
        out.push(all.swap_remove(best));
    }
    out
}

fn write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

const RULE: &str = "---\nvariable: wave_height\nop: >\nvalue: 5\nunit: m\ndirective: suspend flight routes\n---\nbody";

#[test]
fn plain_text_has_no_front_matter() {
    let p = parse_chunk("  just text\n", "f").unwrap();
    assert_eq!(p, ParsedChunk { id: None, text: "just text".into(), rule: None });
}

#[test]
fn front_matter_rule_is_parsed() {
    let p = parse_chunk(RULE, "f").unwrap();
    let r = p.rule.unwrap();
    assert_eq!(r.op, Comparator::Greater);
    assert_eq!(r.value, 5.0);
    assert_eq!(r.directive, "suspend flight routes");
    assert_eq!(p.text, "body");
}

#[test]
fn malformed_front_matter_names_the_file() {
    for bad in [
        "---\nvariable: x\n---\nbody",
        "---\nid: a\nbody without close",
        "---\nflavour: mint\n---\n",
        "---\nvariable: w\nop: >=\nvalue: 5\nunit: m\ndirective: d\n---\n",
        "---\nvariable: w\nop: >\nvalue: lots\nunit: m\ndirective: d\n---\n",
        "---\nno colon here\n---\n",
    ] {
        match parse_chunk(bad, "corpus/bad.md") {
            Err(KnowledgeError::FrontMatter { file, .. }) => assert_eq!(file, "corpus/bad.md"),
            other => panic!("{bad:?} gave {other:?}"),
        }
    }
}

#[test]
fn empty_directory_ingests_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = KnowledgeStore::for_embedder(&HashingEmbedder::default());
    assert_eq!(store.ingest(dir.path(), Partition::Phy, &HashingEmbedder::default()).unwrap(), 0);
    assert!(store.is_empty());
}

#[test]
fn protocol_files_yield_chunks_and_rules() {
    let dir = tempfile::tempdir().unwrap();
    for (i, v) in [4.0, 5.0, 6.0].iter().enumerate() {
        write(dir.path(), &format!("w{i}.md"), &RULE.replace("value: 5", &format!("value: {v}")));
    }
    write(dir.path(), "notes.csv", "ignored");
    let e = HashingEmbedder::default();
    let mut store = KnowledgeStore::for_embedder(&e);
    assert_eq!(store.ingest(dir.path(), Partition::Prot, &e).unwrap(), 3);
    assert_eq!(store.len(), 3);
    let rules: Vec<_> = store.rules().collect();
    assert_eq!(rules.len(), 3);
    assert_eq!(rules[0].0, "w0");
    assert_eq!(rules[2].1.value, 6.0);
}

#[test]
fn duplicate_ids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "a.md", "---\nid: same\n---\none");
    write(dir.path(), "b.md", "---\nid: same\n---\ntwo");
    let e = HashingEmbedder::default();
    let mut store = KnowledgeStore::for_embedder(&e);
    assert!(matches!(store.ingest(dir.path(), Partition::Phy, &e), Err(KnowledgeError::DuplicateId(id)) if id == "same"));
    assert!(store.is_empty(), "failed ingest must not leave partial state");
}

#[test]
fn rules_are_only_allowed_in_protocols() {
    let e = HashingEmbedder::default();
    let mut store = KnowledgeStore::for_embedder(&e);
    let err = store.add_text(RULE, "r", Partition::Hist, &e).unwrap_err();
    assert!(matches!(err, KnowledgeError::RuleOutsideProtocols { .. }));
}

#[test]
fn exact_match_ranks_first() {
    let store = random_store(50, 16, 3);
    let target = &store.chunks()[17];
    let hits = store.mips_topk(&target.embedding, 3, None).unwrap();
    assert_eq!(hits[0].id, target.id);
    assert!((hits[0].score - 1.0).abs() < 1e-12);
}

#[test]
fn large_store_matches_brute_force() {
    let store = random_store(1000, 32, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for qi in 0..100 {
        let q = random_unit(&mut rng, 32);
        let p = [None, Some(Partition::Phy), Some(Partition::Prot), Some(Partition::Hist)][qi % 4];
        let got = store.mips_topk(&q, 10, p).unwrap();
        let want = brute_force(&store, &q, 10, p);
        let got: Vec<(String, f64)> = got.into_iter().map(|h| (h.id, h.score)).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn ties_are_broken_by_id() {
    let mut store = KnowledgeStore::new(2, "t");
    for id in ["b", "c", "a"] {
        store
            .insert(KnowledgeChunk {
                id: id.into(),
                partition: Partition::Phy,
                text: String::new(),
                embedding: vec![1.0, 0.0],
                rule: None,
            })
            .unwrap();
    }
    let ids: Vec<_> = store.mips_topk(&[1.0, 0.0], 5, None).unwrap().into_iter().map(|h| h.id).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn oversized_k_returns_everything_sorted() {
    let store = random_store(7, 8, 1);
    let hits = store.mips_topk(&store.chunks()[0].embedding.clone(), 100, None).unwrap();
    assert_eq!(hits.len(), 7);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn zero_k_is_an_error() {
    let store = random_store(3, 4, 1);
    assert!(matches!(store.mips_topk(&[0.0; 4], 0, None), Err(KnowledgeError::InvalidK)));
}

#[test]
fn store_round_trips_through_disk() {
    let e = HashingEmbedder::default();
    let store = KnowledgeStore::builtin(&e).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.bin");
    store.save(&path).unwrap();
    assert_eq!(KnowledgeStore::load(&path).unwrap(), store);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(KnowledgeStore::load(&path), Err(KnowledgeError::Corrupt(_))));
}

#[test]
fn builtin_corpus_answers_physics_queries() {
    let e = HashingEmbedder::default();
    let store = KnowledgeStore::builtin(&e).unwrap();
    assert_eq!(store.rules().count(), 4);
    let r = store.retrieve("mass conservation", &e, 3, Some(Partition::Phy)).unwrap();
    assert_eq!(r.hits[0].id, "phy-mass-conservation");
    let r = store.retrieve("wave height flight routes", &e, 1, Some(Partition::Prot)).unwrap();
    assert_eq!(r.ids(), ["prot-wave-height"]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn retrieval_is_exact_and_filtered(seed in 0u64..10_000, k in 1usize..20, pi in 0usize..4) {
        let store = random_store(60, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let q = random_unit(&mut rng, 8);
        let p = [None, Some(Partition::Phy), Some(Partition::Prot), Some(Partition::Hist)][pi];
        let got = store.mips_topk(&q, k, p).unwrap();
        prop_assert!(got.len() <= k);
        prop_assert!(got.windows(2).all(|w| w[0].score >= w[1].score));
        if let Some(p) = p {
            prop_assert!(got.iter().all(|h| h.partition == p));
        }
        let want = brute_force(&store, &q, k, p);
        prop_assert_eq!(got.into_iter().map(|h| (h.id, h.score)).collect::<Vec<_>>(), want);
    }
}
