//! Deterministic synthetic syllabified corpus for tests and demos.
//!
//! Words are built from 1-5 syllables drawn from the {V, CV, VC, CVC}
//! templates over a fixed consonant/vowel inventory, then re-syllabified by
//! a maximal-onset oracle so that the gold boundaries are rule-consistent
//! regardless of how the syllables were concatenated.

use crate::lexicon::SyllabifiedEntry;
use crate::tensor::Rng;

pub const CONSONANTS: [&str; 12] = ["p", "t", "k", "b", "d", "g", "m", "n", "s", "z", "l", "r"];
pub const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

pub fn is_vowel(phone: &str) -> bool {
    VOWELS.contains(&phone)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Template {
    V,
    Cv,
    Vc,
    Cvc,
}

const TEMPLATES: [Template; 4] = [Template::V, Template::Cv, Template::Vc, Template::Cvc];

/// Boundary labels assigned by the maximal-onset principle: each vowel is a
/// nucleus, and of the consonants between two nuclei the last one becomes
/// the onset of the following syllable (onsets here are at most one
/// consonant); the rest close the preceding syllable.
pub fn maximal_onset_boundaries(phones: &[String]) -> Vec<u8> {
    let mut labels = vec![0u8; phones.len()];
    let nuclei: Vec<usize> = phones
        .iter()
        .enumerate()
        .filter_map(|(i, p)| is_vowel(p).then_some(i))
        .collect();
    for pair in nuclei.windows(2) {
        let (v1, v2) = (pair[0], pair[1]);
        let consonants_between = v2 - v1 - 1;
        let onset_len = consonants_between.min(1);
        labels[v2 - onset_len - 1] = 1;
    }
    labels
}

fn sample_syllable(rng: &mut Rng, out: &mut Vec<String>) {
    let consonant = |rng: &mut Rng| CONSONANTS[rng.uniform_usize(CONSONANTS.len())].to_string();
    let vowel = |rng: &mut Rng| VOWELS[rng.uniform_usize(VOWELS.len())].to_string();
    match TEMPLATES[rng.uniform_usize(TEMPLATES.len())] {
        Template::V => out.push(vowel(rng)),
        Template::Cv => {
            out.push(consonant(rng));
            out.push(vowel(rng));
        }
        Template::Vc => {
            out.push(vowel(rng));
            out.push(consonant(rng));
        }
        Template::Cvc => {
            out.push(consonant(rng));
            out.push(vowel(rng));
            out.push(consonant(rng));
        }
    }
}

/// Generates `n_words` entries with distinct orthographic keys. The same
/// seed always yields the same corpus.
pub fn generate_synthetic_language(n_words: usize, seed: u64) -> Vec<SyllabifiedEntry> {
    let mut rng = Rng::from_seed(seed);
    let mut entries = Vec::with_capacity(n_words);
    for i in 0..n_words {
        let syllable_count = 1 + rng.uniform_usize(5);
        let mut phones = Vec::new();
        for _ in 0..syllable_count {
            sample_syllable(&mut rng, &mut phones);
        }
        let boundaries = maximal_onset_boundaries(&phones);
        // the running index keeps keys distinct even when pronunciations repeat
        let word = format!("{}_{i:05}", phones.concat());
        entries.push(SyllabifiedEntry {
            word,
            phones,
            boundaries,
        });
    }
    entries
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn split_into_syllables(entry: &SyllabifiedEntry) -> Vec<Vec<String>> {
        let mut syllables = vec![Vec::new()];
        for (phone, &label) in entry.phones.iter().zip(&entry.boundaries) {
            syllables.last_mut().unwrap().push(phone.clone());
            if label == 1 {
                syllables.push(Vec::new());
            }
        }
        syllables
    }

    fn matches_template(syllable: &[String]) -> bool {
        let pattern: Vec<bool> = syllable.iter().map(|p| is_vowel(p)).collect();
        matches!(
            pattern.as_slice(),
            [true] | [false, true] | [true, false] | [false, true, false]
        )
    }

    #[test]
    fn fixed_seed_reproduces_the_corpus() {
        let a = generate_synthetic_language(200, 42);
        let b = generate_synthetic_language(200, 42);
        assert_eq!(a, b);
        let c = generate_synthetic_language(200, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn keys_are_distinct() {
        let entries = generate_synthetic_language(2000, 7);
        let mut words: Vec<_> = entries.iter().map(|e| e.word.clone()).collect();
        words.sort();
        words.dedup();
        assert_eq!(words.len(), entries.len());
    }

    #[test]
    fn oracle_places_known_boundaries() {
        let phones = |s: &str| -> Vec<String> { s.chars().map(|c| c.to_string()).collect() };
        // ta.ka: single consonant becomes the next onset
        assert_eq!(maximal_onset_boundaries(&phones("taka")), vec![0, 1, 0, 0]);
        // tak.ta: two consonants split coda/onset
        assert_eq!(maximal_onset_boundaries(&phones("takta")), vec![0, 0, 1, 0, 0]);
        // ta.a: adjacent vowels split
        assert_eq!(maximal_onset_boundaries(&phones("taa")), vec![0, 1, 0]);
        // single syllable: no boundary
        assert_eq!(maximal_onset_boundaries(&phones("tak")), vec![0, 0, 0]);
    }

    proptest! {
        #[test]
        fn every_syllable_matches_a_template(seed in 0u64..500) {
            for entry in generate_synthetic_language(20, seed) {
                for syllable in split_into_syllables(&entry) {
                    prop_assert!(
                        matches_template(&syllable),
                        "bad syllable {:?} in {:?}",
                        syllable,
                        entry.phones
                    );
                }
            }
        }

        #[test]
        fn oracle_is_idempotent_on_its_own_output(seed in 0u64..500) {
            for entry in generate_synthetic_language(20, seed) {
                let again = maximal_onset_boundaries(&entry.phones);
                prop_assert_eq!(again, entry.boundaries);
            }
        }
    }
}
