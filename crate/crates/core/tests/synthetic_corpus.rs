use std::collections::{BTreeMap, BTreeSet};

use cerank::data::{synth_generate, SynthConfig};

/// Topic of every topic token in `text`, read from the token number.
fn topics_in(text: &str, cfg: &SynthConfig) -> Vec<usize> {
    let cluster = cfg.vocab_size / 2 / cfg.num_topics;
    text.split_whitespace()
        .filter_map(|w| w.strip_prefix('w')?.parse::<usize>().ok())
        .filter(|i| *i < cfg.num_topics * cluster)
        .map(|i| i / cluster)
        .collect()
}

fn majority(topics: &[usize]) -> Option<usize> {
    let mut counts = BTreeMap::new();
    for t in topics {
        *counts.entry(*t).or_insert(0) += 1;
    }
    counts.into_iter().max_by_key(|(_, c)| *c).map(|(t, _)| t)
}

#[test]
fn default_layout_sizes() {
    let cfg = SynthConfig::new(20, 50, 400, 0);
    let d = synth_generate(&cfg).unwrap();
    assert_eq!(d.train.iter().filter(|s| s.label == 1).count(), 800);
    assert_eq!(d.train.iter().filter(|s| s.label == 0).count(), 800);
    assert_eq!(d.dev.len(), 100);
    assert_eq!(d.test.len(), 100);
    assert!(d.dev.iter().chain(&d.test).all(|g| g.candidates.len() == 10));
}

#[test]
fn positives_share_their_context_topic() {
    for seed in 0..3 {
        let cfg = SynthConfig::new(12, 10, 240, seed);
        let d = synth_generate(&cfg).unwrap();
        for s in &d.train {
            let ctx = majority(&topics_in(&s.context.join(" "), &cfg)).expect("context has topic tokens");
            let rsp: BTreeSet<usize> = topics_in(&s.response, &cfg).into_iter().collect();
            assert!(!rsp.is_empty());
            if s.label == 1 {
                assert_eq!(rsp, BTreeSet::from([ctx]), "sample {}", s.id);
                assert_eq!(d.topics[&s.id], ctx);
            } else {
                assert!(!rsp.contains(&ctx), "negative {} shares its context topic", s.id);
            }
        }
        for g in d.dev.iter().chain(&d.test) {
            let ctx = majority(&topics_in(&g.context.join(" "), &cfg)).unwrap();
            let mut seen = BTreeSet::new();
            for (i, c) in g.candidates.iter().enumerate() {
                let t: BTreeSet<usize> = topics_in(c, &cfg).into_iter().collect();
                assert_eq!(t.len(), 1, "candidate mixes topics");
                let t = *t.iter().next().unwrap();
                assert_eq!(t == ctx, i == g.positive_index, "group {}", g.id);
                assert!(seen.insert(t), "two candidates from one topic in group {}", g.id);
            }
        }
    }
}

#[test]
fn every_topic_has_several_training_contexts() {
    let cfg = SynthConfig::new(20, 50, 400, 4);
    let d = synth_generate(&cfg).unwrap();
    let mut per_topic = BTreeMap::new();
    for s in d.train.iter().filter(|s| s.label == 1) {
        *per_topic.entry(d.topics[&s.id]).or_insert(0) += 1;
    }
    assert_eq!(per_topic.len(), 20);
    assert!(per_topic.values().all(|n| *n == 40));
}
