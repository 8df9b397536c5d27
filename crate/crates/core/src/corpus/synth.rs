//! Deterministic synthetic text for two related but distinct domains.
//!
//! Both domains share punctuation, function words, a syllable phonology and
//! most of a content lexicon. Domain A reads like short encyclopedia entries;
//! domain B like recipes with numbered steps and quantities, set in places
//! that never occur in A. Paragraphs
//! repeat a freshly invented name, so predicting it needs attention over the
//! context rather than unigram statistics.

use crate::numerics::RngStream;

const ONSETS: [&str; 18] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "sh",
];
const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: [&str; 6] = ["", "", "n", "r", "l", "s"];

/// Fixed stream for the lexicon so both domains draw from one vocabulary
/// regardless of the corpus seed.
const LEXICON_SEED: u64 = 0x5eed_1e81;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Pretraining style: encyclopedia-like entries.
    Encyclopedia,
    /// Downstream style: numbered procedures.
    Procedure,
}

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    places: Vec<String>,
}

fn syllable(rng: &mut RngStream) -> String {
    let mut s = String::new();
    s.push_str(ONSETS[rng.below(ONSETS.len())]);
    s.push_str(VOWELS[rng.below(VOWELS.len())]);
    s.push_str(CODAS[rng.below(CODAS.len())]);
    s
}

fn word(rng: &mut RngStream, min: usize, max: usize) -> String {
    let n = min + rng.below(max - min + 1);
    (0..n).map(|_| syllable(rng)).collect()
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn words(rng: &mut RngStream, n: usize, min: usize, max: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(rng, min, max);
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn lexicon(domain: Domain) -> Lexicon {
    let mut rng = RngStream::new(LEXICON_SEED, 0);
    let shared_nouns = words(&mut rng, 60, 1, 2);
    let nouns_a = words(&mut rng, 140, 1, 3);
    let nouns_b = words(&mut rng, 140, 1, 3);
    let shared_verbs = words(&mut rng, 50, 1, 2);
    let verbs_a = words(&mut rng, 40, 1, 2);
    let verbs_b = words(&mut rng, 40, 1, 2);
    let adjectives = words(&mut rng, 60, 1, 2);
    let places_a: Vec<String> = words(&mut rng, 40, 2, 3).iter().map(|w| capitalize(w)).collect();
    let places_b: Vec<String> = words(&mut rng, 40, 2, 3).iter().map(|w| capitalize(w)).collect();
    let (own_nouns, own_verbs, places) = match domain {
        Domain::Encyclopedia => (nouns_a, verbs_a, places_a),
        Domain::Procedure => (
            nouns_a.into_iter().chain(nouns_b.into_iter().take(40)).collect(),
            verbs_a.into_iter().chain(verbs_b.into_iter().take(10)).collect(),
            places_b,
        ),
    };
    // Shared words rank first so they are frequent in both domains.
    Lexicon {
        nouns: shared_nouns.into_iter().chain(own_nouns).collect(),
        verbs: shared_verbs.into_iter().chain(own_verbs).collect(),
        adjectives,
        places,
    }
}

/// Zipf-like pick: index `i` with weight `1/(i+2)`.
fn zipf<'a>(items: &'a [String], rng: &mut RngStream) -> &'a str {
    let total: f64 = (0..items.len()).map(|i| 1.0 / (i as f64 + 2.0)).sum();
    let mut u = rng.next_f64() * total;
    for (i, w) in items.iter().enumerate() {
        u -= 1.0 / (i as f64 + 2.0);
        if u <= 0.0 {
            return w;
        }
    }
    &items[items.len() - 1]
}

fn article(next: &str) -> &'static str {
    if next.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "an"
    } else {
        "a"
    }
}

fn encyclopedia_paragraph(lx: &Lexicon, rng: &mut RngStream, out: &mut String) {
    let name = capitalize(&word(rng, 2, 3));
    let home = zipf(&lx.places, rng).to_string();
    let kind = zipf(&lx.nouns, rng).to_string();
    let adj = zipf(&lx.adjectives, rng);
    out.push_str(&format!("{name} was {} {adj} {kind} of {home}. ", article(adj)));
    let n = 2 + rng.below(4);
    for _ in 0..n {
        let s = match rng.below(5) {
            0 => format!(
                "In {}, {name} {}ed the {} {}. ",
                1200 + rng.below(700),
                zipf(&lx.verbs, rng),
                zipf(&lx.adjectives, rng),
                zipf(&lx.nouns, rng)
            ),
            1 => format!(
                "The {} of {name} was {} and {}. ",
                zipf(&lx.nouns, rng),
                zipf(&lx.adjectives, rng),
                zipf(&lx.adjectives, rng)
            ),
            2 => format!(
                "{name} {}ed with the {} of {}. ",
                zipf(&lx.verbs, rng),
                zipf(&lx.nouns, rng),
                zipf(&lx.places, rng)
            ),
            3 => format!(
                "Many {}s of {home} {} the {kind}. ",
                zipf(&lx.nouns, rng),
                zipf(&lx.verbs, rng)
            ),
            _ => format!(
                "Later the {kind} {name} {}ed to {}. ",
                zipf(&lx.verbs, rng),
                zipf(&lx.places, rng)
            ),
        };
        out.push_str(&s);
    }
    out.push_str("\n\n");
}

const UNITS: [&str; 5] = ["cups", "parts", "drops", "hours", "spoons"];

fn procedure_paragraph(lx: &Lexicon, rng: &mut RngStream, out: &mut String) {
    let name = capitalize(&word(rng, 2, 3));
    let place = zipf(&lx.places, rng).to_string();
    let base = zipf(&lx.nouns, rng).to_string();
    out.push_str(&format!(
        "To make the {name} {base} in the style of {place}, follow these steps. "
    ));
    let n = 3 + rng.below(4);
    for k in 1..=n {
        let s = match rng.below(4) {
            0 => format!(
                "In step {k}, {} {} {} of {}. ",
                zipf(&lx.verbs, rng),
                1 + rng.below(9),
                UNITS[rng.below(UNITS.len())],
                zipf(&lx.nouns, rng)
            ),
            1 => format!(
                "In step {k}, {} the {base} until it is {}. ",
                zipf(&lx.verbs, rng),
                zipf(&lx.adjectives, rng)
            ),
            2 => format!(
                "In step {k}, add the {} {} to the {base}. ",
                zipf(&lx.adjectives, rng),
                zipf(&lx.nouns, rng)
            ),
            _ => format!("In step {k}, rest the {name} {base} for {} hours. ", 1 + rng.below(9)),
        };
        out.push_str(&s);
    }
    out.push_str(&format!("Serve the {name} {base} {}.\n\n", zipf(&lx.adjectives, rng)));
}

/// Exactly `len` bytes of domain text from stream `(seed, domain)`.
pub fn generate(domain: Domain, len: usize, seed: u64) -> Vec<u8> {
    let lx = lexicon(domain);
    let stream = match domain {
        Domain::Encyclopedia => 11,
        Domain::Procedure => 12,
    };
    let mut rng = RngStream::new(seed, stream);
    let mut text = String::with_capacity(len + 512);
    while text.len() < len {
        match domain {
            Domain::Encyclopedia => encyclopedia_paragraph(&lx, &mut rng, &mut text),
            Domain::Procedure => procedure_paragraph(&lx, &mut rng, &mut text),
        }
    }
    let mut bytes = text.into_bytes();
    bytes.truncate(len);
    bytes
}
