/// Reserved id for texts with no words.
pub const NULL_TOKEN: u32 = 0;

/// Featurized texts are truncated to this many ids.
pub const MAX_FEATURES: usize = 32;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over the bytes of `s`.
pub fn fnv1a64(s: &str) -> u64 {
    s.bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Hashes lowercase word unigrams and bigrams into ids in `[1, dims)`.
///
/// Words are the whitespace-separated pieces of the lowercased text. The
/// features are every unigram in order followed by every bigram (`"w1 w2"`,
/// single space) in order; feature `f` maps to `1 + fnv1a64(f) % (dims - 1)`
/// so that id 0 stays free for [`NULL_TOKEN`]. The result holds at most
/// [`MAX_FEATURES`] ids. Empty text yields `[NULL_TOKEN]`.
///
/// # Panics
///
/// If `dims < 2`.
pub fn hash_featurize(text: &str, dims: usize) -> Vec<u32> {
    assert!(dims >= 2, "hash_featurize needs at least two dimensions");
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    if words.is_empty() {
        return vec![NULL_TOKEN];
    }
    let buckets = (dims - 1) as u64;
    let id = |feature: &str| (1 + fnv1a64(feature) % buckets) as u32;
    let unigrams = words.iter().map(|w| id(w));
    let bigrams = words.windows(2).map(|w| id(&format!("{} {}", w[0], w[1])));
    unigrams.chain(bigrams).take(MAX_FEATURES).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_null_token() {
        assert_eq!(hash_featurize("", 16), vec![NULL_TOKEN]);
        assert_eq!(hash_featurize("   \t", 16), vec![NULL_TOKEN]);
    }

    #[test]
    fn deterministic_and_case_insensitive() {
        let a = hash_featurize("Some Text here", 97);
        assert_eq!(a, hash_featurize("Some Text here", 97));
        assert_eq!(a, hash_featurize("some text HERE", 97));
    }

    #[test]
    fn two_words_by_hand() {
        // Reference values: FNV-1a 64 of "a", "b" and "a b" taken mod 7, plus 1.
        let reference = |s: &str| {
            let mut h: u64 = 14695981039346656037;
            for b in s.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            (1 + h % 7) as u32
        };
        let expected = vec![reference("a"), reference("b"), reference("a b")];
        assert_eq!(hash_featurize("a b", 8), expected);
        assert_eq!(fnv1a64("a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn truncates_to_max_features() {
        let text = (0..100).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let ids = hash_featurize(&text, 1024);
        assert_eq!(ids.len(), MAX_FEATURES);
        assert!(ids.iter().all(|&i| (1..1024).contains(&i)));
    }
}
