//! Colour vocabulary of the reference text encoder. Each entry shifts the
//! descriptor: the first three numbers are added to every cell's
//! (luma, red-blue, green-magenta) mean, the last three to the global
//! opponent standard deviations.

use ndarray::Array1;

use super::{cell_mean_index, CELL_MEAN_DIMS, DESCRIPTOR_DIM, GRID};

pub const LEXICON: &[(&str, [f32; 6])] = &[
    ("warm", [0.1, 0.6, 0.0, 0.0, 0.0, 0.0]),
    ("warmer", [0.1, 0.6, 0.0, 0.0, 0.0, 0.0]),
    ("warmth", [0.1, 0.6, 0.0, 0.0, 0.0, 0.0]),
    ("orange", [0.0, 0.8, 0.1, 0.0, 0.0, 0.0]),
    ("golden", [0.2, 0.5, 0.2, 0.0, 0.0, 0.0]),
    ("sunset", [-0.2, 0.7, 0.0, 0.0, 0.0, 0.0]),
    ("red", [0.0, 0.7, -0.3, 0.0, 0.0, 0.0]),
    ("yellow", [0.2, 0.4, 0.4, 0.0, 0.0, 0.0]),
    ("sepia", [0.0, 0.4, 0.1, 0.0, -0.3, -0.3]),
    ("vintage", [0.0, 0.3, 0.1, 0.0, -0.2, -0.2]),
    ("cool", [0.0, -0.6, 0.0, 0.0, 0.0, 0.0]),
    ("cooler", [0.0, -0.6, 0.0, 0.0, 0.0, 0.0]),
    ("cold", [0.0, -0.6, 0.0, 0.0, 0.0, 0.0]),
    ("icy", [0.1, -0.6, 0.0, 0.0, 0.0, 0.0]),
    ("winter", [0.2, -0.4, 0.0, 0.0, 0.0, 0.0]),
    ("blue", [0.0, -0.8, 0.0, 0.0, 0.0, 0.0]),
    ("teal", [0.0, -0.5, 0.3, 0.0, 0.0, 0.0]),
    ("green", [0.0, 0.0, 0.7, 0.0, 0.0, 0.0]),
    ("magenta", [0.0, 0.0, -0.7, 0.0, 0.0, 0.0]),
    ("purple", [0.0, -0.2, -0.7, 0.0, 0.0, 0.0]),
    ("pink", [0.1, 0.3, -0.6, 0.0, 0.0, 0.0]),
    ("bright", [0.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ("brighter", [0.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ("brighten", [0.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ("sunny", [0.5, 0.2, 0.0, 0.0, 0.0, 0.0]),
    ("dark", [-0.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ("darker", [-0.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ("darken", [-0.7, 0.0, 0.0, 0.0, 0.0, 0.0]),
    ("night", [-0.8, -0.2, 0.0, 0.0, 0.0, 0.0]),
    ("dusk", [-0.5, 0.1, 0.0, 0.0, 0.0, 0.0]),
    ("vivid", [0.0, 0.0, 0.0, 0.0, 0.5, 0.5]),
    ("saturated", [0.0, 0.0, 0.0, 0.0, 0.5, 0.5]),
    ("colorful", [0.0, 0.0, 0.0, 0.0, 0.5, 0.5]),
    ("vibrant", [0.0, 0.0, 0.0, 0.0, 0.5, 0.5]),
    ("muted", [0.0, 0.0, 0.0, 0.0, -0.5, -0.5]),
    ("desaturated", [0.0, 0.0, 0.0, 0.0, -0.6, -0.6]),
    ("gray", [0.0, 0.0, 0.0, 0.0, -0.6, -0.6]),
    ("grey", [0.0, 0.0, 0.0, 0.0, -0.6, -0.6]),
    ("grayscale", [0.0, 0.0, 0.0, 0.0, -0.8, -0.8]),
    ("monochrome", [0.0, 0.0, 0.0, 0.0, -0.8, -0.8]),
    ("faded", [0.1, 0.0, 0.0, -0.2, -0.4, -0.4]),
    ("contrast", [0.0, 0.0, 0.0, 0.5, 0.0, 0.0]),
    ("dramatic", [-0.1, 0.0, 0.0, 0.5, 0.0, 0.0]),
    ("soft", [0.1, 0.0, 0.0, -0.3, 0.0, 0.0]),
    ("hazy", [0.2, 0.0, 0.0, -0.4, -0.1, -0.1]),
    ("foggy", [0.3, 0.0, 0.0, -0.5, -0.2, -0.2]),
];

/// Descriptor shift for a lowercase word, if it is in the vocabulary.
pub fn lexicon_shift(word: &str) -> Option<Array1<f32>> {
    let (_, s) = LEXICON.iter().find(|(w, _)| *w == word)?;
    let mut d = Array1::zeros(DESCRIPTOR_DIM);
    for row in 0..GRID {
        for col in 0..GRID {
            for c in 0..3 {
                d[cell_mean_index(row, col, c)] = s[c];
            }
        }
    }
    for c in 0..3 {
        d[CELL_MEAN_DIMS + c] = s[3 + c];
    }
    Some(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_unique_and_lowercase() {
        let mut words: Vec<_> = LEXICON.iter().map(|(w, _)| *w).collect();
        assert!(words.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
        words.sort_unstable();
        words.dedup();
        assert_eq!(words.len(), LEXICON.len());
    }

    #[test]
    fn warm_shifts_every_cell() {
        let d = lexicon_shift("warm").unwrap();
        for row in 0..GRID {
            for col in 0..GRID {
                assert_eq!(d[cell_mean_index(row, col, 1)], 0.6);
            }
        }
        assert!(lexicon_shift("banana").is_none());
    }
}
