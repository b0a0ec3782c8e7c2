use std::path::Path;

use debias_core::corpus::{
    generate_corpus, generate_synthetic, hash_featurize, load_jsonl, save_jsonl, stratified_split,
    Attribute, BiasInjection, Sample, SynthConfig, HATE, NON_HATE, NULL_TOKEN,
};

fn fixture() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/small.jsonl"))
}

#[test]
fn fixture_loads_and_round_trips() {
    let samples = load_jsonl(fixture(), 64).unwrap();
    assert_eq!(samples.iter().map(|s| s.id).collect::<Vec<_>>(), [1, 2, 3, 4]);
    assert_eq!(samples[0].tokens, hash_featurize("nobody asked for your opinion", 64));
    assert_eq!(samples[1].tokens, [4, 9, 9, 2]);
    assert_eq!(samples[2].tokens, [NULL_TOKEN]);
    assert_eq!(samples[1].groups, [1, 1, 0, 0]);
    assert_eq!(samples[3].groups, [0, 1, 0, 1]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.jsonl");
    save_jsonl(&samples, &path).unwrap();
    assert_eq!(load_jsonl(&path, 64).unwrap(), samples);
}

#[test]
fn generated_files_are_byte_identical_per_seed() {
    let cfg = SynthConfig {
        samples: 500,
        validation_samples: 50,
        test_samples: 100,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, cfg: &SynthConfig| {
        let path = dir.path().join(name);
        save_jsonl(&generate_corpus(cfg).unwrap().train, &path).unwrap();
        std::fs::read(path).unwrap()
    };
    assert_eq!(write("a.jsonl", &cfg), write("b.jsonl", &cfg));
    assert_ne!(write("a.jsonl", &cfg), write("c.jsonl", &SynthConfig { seed: 5, ..cfg.clone() }));
}

/// Trivial oracle: predicts hate when a sample carries at least `k`
/// hate-indicative tokens, with `k` chosen for accuracy on the same draw.
fn count_classifier(samples: &[Sample], cfg: &SynthConfig) -> Vec<usize> {
    let lo = 1 + cfg.neutral_vocab as u32;
    let hi = lo + cfg.hate_vocab as u32;
    let counts: Vec<usize> = samples
        .iter()
        .map(|s| s.tokens.iter().filter(|&&t| (lo..hi).contains(&t)).count())
        .collect();
    let best = (1..=cfg.tokens_per_sample)
        .max_by_key(|&k| {
            samples
                .iter()
                .zip(&counts)
                .filter(|(s, &c)| (c >= k) == (s.label == HATE))
                .count()
        })
        .unwrap();
    counts.iter().map(|&c| (c >= best) as usize).collect()
}

fn fpr_gap(samples: &[Sample], predictions: &[usize], attribute: Attribute) -> f64 {
    let fpr = |g: usize| {
        let neg: Vec<usize> = samples
            .iter()
            .zip(predictions)
            .filter(|(s, _)| s.label == NON_HATE && s.group(attribute) == g)
            .map(|(_, &p)| p)
            .collect();
        neg.iter().sum::<usize>() as f64 / neg.len() as f64
    };
    fpr(0) - fpr(1)
}

fn token_injection(strength: f64) -> SynthConfig {
    SynthConfig {
        samples: 10_000,
        bias: vec![BiasInjection {
            attribute: Attribute::Gender,
            group: 0,
            strength,
        }],
        injected_tokens: 2,
        association: 0.0,
        ..SynthConfig::default()
    }
}

#[test]
fn injected_tokens_raise_false_positives_for_the_target_group() {
    let cfg = token_injection(0.5);
    let samples = generate_synthetic(&cfg).unwrap();
    let gap = fpr_gap(&samples, &count_classifier(&samples, &cfg), Attribute::Gender);
    assert!(gap > 0.1, "male minus female FPR {gap}");
}

#[test]
fn no_injection_means_no_gap() {
    let cfg = token_injection(0.0);
    let samples = generate_synthetic(&cfg).unwrap();
    let predictions = count_classifier(&samples, &cfg);
    for a in Attribute::ALL {
        let gap = fpr_gap(&samples, &predictions, a);
        assert!(gap.abs() < 0.03, "{a}: {gap}");
    }
}

#[test]
fn table_scale_split_matches_reported_spread() {
    let samples = generate_synthetic(&SynthConfig::benchmark_scale()).unwrap();
    assert_eq!(samples.iter().filter(|s| s.label == HATE).count(), 6250);
    let subsets = stratified_split(&samples, 4, &Attribute::ALL, 3).unwrap();
    let hate: Vec<usize> = subsets
        .iter()
        .map(|d| d.samples.iter().filter(|s| s.label == HATE).count())
        .collect();
    assert_eq!(hate.iter().sum::<usize>(), 6250);
    assert!(hate.iter().all(|h| (1561..=1564).contains(h)), "{hate:?}");
    let sizes: Vec<usize> = subsets.iter().map(|d| d.len()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
}
