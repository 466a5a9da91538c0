//! Synthetic paired and text-only corpora.
//!
//! Every token has a prototype feature vector. A clean utterance is a run of
//! silence frames, then for each token `k ~ U[frames_min, frames_max]` copies
//! of its prototype followed by another silence gap, plus Gaussian noise on
//! every element. Transcripts come from a token-bigram grammar whose rows put
//! `grammar_strength` on a preferred successor; the out-of-domain grammar
//! uses a different successor for every token.
//!
//! Prototypes can be grouped into confusable pairs that differ only by a small
//! offset, so that acoustics alone cannot always separate them and the
//! decoder has to lean on its language model.

mod format;

pub use format::{
    join_paired, read_feats, read_text, read_vocab, write_atomic, write_feats, write_text, write_vocab, TextFile,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    In,
    Out,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::In => "in",
            Domain::Out => "out",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "in" => Some(Domain::In),
            "out" => Some(Domain::Out),
            _ => None,
        }
    }
}

/// Paired speech and transcript.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `frames × feat_dim`.
    pub features: Tensor,
    pub tokens: Vec<usize>,
    pub domain: Domain,
}

/// Transcript without audio.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextUtterance {
    pub id: String,
    pub tokens: Vec<usize>,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Silence frames before, between and after tokens.
    pub gap_min: usize,
    pub gap_max: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub noise_sigma: f64,
    /// Share of paired utterances whose audio is pure noise.
    pub noise_only_fraction: f64,
    pub noise_only_sigma: f64,
    /// Number of prototype pairs `(2j, 2j+1)` that differ only by
    /// `confusable_offset` along a random unit direction.
    pub confusable_pairs: usize,
    pub confusable_offset: f64,
    /// Probability mass of the preferred successor in each bigram row.
    pub grammar_strength: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feat_dim: 16,
            frames_min: 3,
            frames_max: 5,
            gap_min: 1,
            gap_max: 2,
            tokens_min: 3,
            tokens_max: 8,
            noise_sigma: 0.5,
            noise_only_fraction: 0.0,
            noise_only_sigma: 1.0,
            confusable_pairs: 0,
            confusable_offset: 0.5,
            grammar_strength: 0.8,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(format!("corpus: {m}")));
        if self.vocab_size < 4 || self.feat_dim == 0 {
            return bad("vocab_size must be at least 4 and feat_dim positive");
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return bad("need 1 <= frames_min <= frames_max");
        }
        if self.gap_min > self.gap_max || self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return bad("need gap_min <= gap_max and 1 <= tokens_min <= tokens_max");
        }
        if !(0.0..1.0).contains(&self.noise_only_fraction) {
            return bad("noise_only_fraction must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_only_sigma >= 0.0 && self.confusable_offset > 0.0) {
            return bad("noise levels must be non-negative and confusable_offset positive");
        }
        if 2 * self.confusable_pairs > self.vocab_size {
            return bad("confusable_pairs exceeds vocab_size / 2");
        }
        if !(0.0..=1.0).contains(&self.grammar_strength) {
            return bad("grammar_strength must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Mixes seed components into one 64-bit seed (splitmix64 finalizer).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

pub fn derive_rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Token-bigram generator: uniform first token, then row `a` puts `strength`
/// on `successor[a]` and spreads the rest evenly over the other tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Bigram {
    successor: Vec<usize>,
    strength: f64,
}

impl Bigram {
    pub fn new(successor: Vec<usize>, strength: f64) -> Self {
        Self { successor, strength }
    }

    pub fn successor(&self, a: usize) -> usize {
        self.successor[a]
    }

    pub fn prob(&self, a: usize, b: usize) -> f64 {
        let v = self.successor.len();
        if b == self.successor[a] {
            self.strength
        } else {
            (1.0 - self.strength) / (v - 1) as f64
        }
    }

    pub fn row(&self, a: usize) -> Vec<f64> {
        (0..self.successor.len()).map(|b| self.prob(a, b)).collect()
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let v = self.successor.len();
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(rng.gen_range(0..v));
        while out.len() < len {
            let a = *out.last().unwrap();
            let next = if rng.gen::<f64>() < self.strength {
                self.successor[a]
            } else {
                // uniform over the tokens other than the preferred successor
                let r = rng.gen_range(0..v - 1);
                if r >= self.successor[a] {
                    r + 1
                } else {
                    r
                }
            };
            out.push(next);
        }
        out
    }

    /// Mean over rows of `KL(self[a] ‖ other[a])`.
    pub fn kl_divergence(&self, other: &Bigram) -> f64 {
        let v = self.successor.len();
        let mut total = 0.0;
        for a in 0..v {
            for b in 0..v {
                let p = self.prob(a, b);
                if p > 0.0 {
                    total += p * (p / other.prob(a, b)).ln();
                }
            }
        }
        total / v as f64
    }
}

/// Everything shared by all splits generated from one seed: prototypes,
/// confusable partners and the two grammars.
#[derive(Clone, Debug)]
pub struct World {
    pub spec: CorpusSpec,
    pub seed: u64,
    prototypes: Tensor,
    partner: Vec<Option<usize>>,
    grammar_in: Bigram,
    grammar_out: Bigram,
}

const WORLD_STREAM: u64 = 0x57_4F_52_4C_44;
const UTTERANCE_STREAM: u64 = 0x55_54_54;
const TEXT_STREAM: u64 = 0x54_45_58_54;

impl World {
    pub fn new(spec: CorpusSpec, seed: u64) -> Result<Self, Error> {
        spec.validate()?;
        let (v, f) = (spec.vocab_size, spec.feat_dim);
        let mut rng = derive_rng(&[WORLD_STREAM, seed]);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut protos: Vec<f64> = (0..v * f).map(|_| normal.sample(&mut rng)).collect();
        let mut partner = vec![None; v];
        for j in 0..spec.confusable_pairs {
            let (a, b) = (2 * j, 2 * j + 1);
            let dir: Vec<f64> = (0..f).map(|_| normal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            for c in 0..f {
                protos[b * f + c] = protos[a * f + c] + spec.confusable_offset * dir[c] / norm;
            }
            partner[a] = Some(b);
            partner[b] = Some(a);
        }

        let successor_in = derangement(v, &mut rng);
        let mut successor_out = Vec::with_capacity(v);
        for (a, &s_in) in successor_in.iter().enumerate() {
            let excluded = |b: usize| b == a || b == s_in || Some(b) == partner[s_in];
            let allowed: Vec<usize> = (0..v).filter(|&b| !excluded(b)).collect();
            successor_out.push(*allowed.choose(&mut rng).expect("vocab_size >= 4 leaves a choice"));
        }

        Ok(Self {
            grammar_in: Bigram::new(successor_in, spec.grammar_strength),
            grammar_out: Bigram::new(successor_out, spec.grammar_strength),
            prototypes: Tensor::matrix(v, f, protos)?,
            partner,
            spec,
            seed,
        })
    }

    /// `V × F` prototype matrix.
    pub fn prototypes(&self) -> &Tensor {
        &self.prototypes
    }

    pub fn partner(&self, token: usize) -> Option<usize> {
        self.partner[token]
    }

    pub fn grammar(&self, domain: Domain) -> &Bigram {
        match domain {
            Domain::In => &self.grammar_in,
            Domain::Out => &self.grammar_out,
        }
    }

    /// Whether utterance `i` of a split is noise-only: exactly
    /// `floor(n · fraction)` of the first `n` utterances are.
    pub fn is_noise_only(&self, i: usize) -> bool {
        let f = self.spec.noise_only_fraction;
        ((i + 1) as f64 * f).floor() > (i as f64 * f).floor()
    }

    fn transcript(&self, domain: Domain, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.gen_range(self.spec.tokens_min..=self.spec.tokens_max);
        self.grammar(domain).sample(len, rng)
    }

    /// Clean frames for `tokens` with the given noise level.
    pub fn render(&self, tokens: &[usize], sigma: f64, rng: &mut impl Rng) -> Tensor {
        let s = &self.spec;
        let f = s.feat_dim;
        let mut data = Vec::new();
        let gap = |data: &mut Vec<f64>, rng: &mut dyn rand::RngCore| {
            let g = rng.gen_range(s.gap_min..=s.gap_max);
            data.extend(std::iter::repeat_n(0.0, g * f));
        };
        gap(&mut data, rng);
        for &t in tokens {
            let k = rng.gen_range(s.frames_min..=s.frames_max);
            for _ in 0..k {
                data.extend_from_slice(self.prototypes.row(t));
            }
            gap(&mut data, rng);
        }
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("finite sigma");
            for x in data.iter_mut() {
                *x += noise.sample(rng);
            }
        }
        let frames = data.len() / f;
        Tensor::matrix(frames, f, data).expect("frame data is a whole number of rows")
    }

    /// Utterance `index` of the split identified by `split_seed`.
    pub fn utterance(&self, prefix: &str, domain: Domain, split_seed: u64, index: usize) -> Utterance {
        let mut rng = derive_rng(&[UTTERANCE_STREAM, self.seed, split_seed, index as u64]);
        let tokens = self.transcript(domain, &mut rng);
        let features = if self.is_noise_only(index) {
            let frames = self.render(&tokens, 0.0, &mut rng).rows();
            let noise = Normal::new(0.0, self.spec.noise_only_sigma).expect("finite sigma");
            let data = (0..frames * self.spec.feat_dim).map(|_| noise.sample(&mut rng)).collect();
            Tensor::matrix(frames, self.spec.feat_dim, data).expect("shape")
        } else {
            self.render(&tokens, self.spec.noise_sigma, &mut rng)
        };
        Utterance {
            id: format!("{prefix}{index:06}"),
            features,
            tokens,
            domain,
        }
    }

    pub fn paired_corpus(&self, prefix: &str, domain: Domain, split_seed: u64, n: usize) -> Vec<Utterance> {
        (0..n).map(|i| self.utterance(prefix, domain, split_seed, i)).collect()
    }

    pub fn text_only_corpus(&self, prefix: &str, domain: Domain, split_seed: u64, n: usize) -> Vec<TextUtterance> {
        (0..n)
            .map(|i| {
                let mut rng = derive_rng(&[TEXT_STREAM, self.seed, split_seed, i as u64]);
                TextUtterance {
                    id: format!("{prefix}{i:06}"),
                    tokens: self.transcript(domain, &mut rng),
                    domain,
                }
            })
            .collect()
    }

    /// Nearest-prototype labelling of every frame, with silence (the zero
    /// vector) mapped to `None`.
    pub fn nearest_prototype(&self, frame: &[f64]) -> Option<usize> {
        let silence: f64 = frame.iter().map(|x| x * x).sum();
        let mut best = (silence, None);
        for t in 0..self.spec.vocab_size {
            let d: f64 = frame.iter().zip(self.prototypes.row(t)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, Some(t));
            }
        }
        best.1
    }
}

/// Uniform random permutation without fixed points.
fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &x)| i != x) {
            return p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(spec: CorpusSpec) -> World {
        World::new(spec, 7).unwrap()
    }

    #[test]
    fn noiseless_fixed_duration_gives_identical_frames() {
        let w = world(CorpusSpec {
            noise_sigma: 0.0,
            frames_min: 4,
            frames_max: 4,
            gap_min: 0,
            gap_max: 0,
            ..CorpusSpec::default()
        });
        let u = w.utterance("u", Domain::In, 1, 0);
        assert_eq!(u.features.rows(), 4 * u.tokens.len());
        for (i, &t) in u.tokens.iter().enumerate() {
            for r in 4 * i..4 * i + 4 {
                assert_eq!(u.features.row(r), w.prototypes().row(t));
            }
        }
    }

    #[test]
    fn noise_only_count_is_exact() {
        let w = world(CorpusSpec {
            noise_only_fraction: 0.1,
            ..CorpusSpec::default()
        });
        assert_eq!((0..1000).filter(|&i| w.is_noise_only(i)).count(), 100);
        let w = world(CorpusSpec {
            noise_only_fraction: 0.37,
            ..CorpusSpec::default()
        });
        assert_eq!((0..1000).filter(|&i| w.is_noise_only(i)).count(), 370);
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world(CorpusSpec::default());
        assert_eq!(w.paired_corpus("a", Domain::In, 3, 5), w.paired_corpus("a", Domain::In, 3, 5));
        assert_ne!(w.paired_corpus("a", Domain::In, 3, 2), w.paired_corpus("a", Domain::In, 4, 2));
        assert_eq!(w.text_only_corpus("t", Domain::Out, 3, 5), w.text_only_corpus("t", Domain::Out, 3, 5));
    }

    #[test]
    fn grammars_differ_and_rows_normalize() {
        let w = world(CorpusSpec {
            confusable_pairs: 8,
            ..CorpusSpec::default()
        });
        let (gi, go) = (w.grammar(Domain::In), w.grammar(Domain::Out));
        assert!(gi.kl_divergence(go) > 0.0);
        for a in 0..16 {
            assert!((gi.row(a).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let s_in = gi.successor(a);
            let s_out = go.successor(a);
            assert_ne!(s_in, s_out);
            assert_ne!(Some(s_out), w.partner(s_in));
        }
    }

    #[test]
    fn bigram_samples_follow_strength() {
        let w = world(CorpusSpec::default());
        let g = w.grammar(Domain::In);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = g.sample(20_000, &mut rng);
        let hits = seq.windows(2).filter(|p| p[1] == g.successor(p[0])).count();
        let rate = hits as f64 / (seq.len() - 1) as f64;
        assert!((rate - 0.8).abs() < 0.02, "{rate}");
    }

    #[test]
    fn clean_utterances_are_solvable_by_nearest_prototype() {
        let w = world(CorpusSpec {
            noise_sigma: 0.0,
            ..CorpusSpec::default()
        });
        for u in w.paired_corpus("c", Domain::In, 5, 50) {
            let labels: Vec<Option<usize>> = (0..u.features.rows()).map(|r| w.nearest_prototype(u.features.row(r))).collect();
            let mut decoded = Vec::new();
            let mut prev = None;
            for l in labels {
                if l != prev {
                    if let Some(t) = l {
                        decoded.push(t);
                    }
                }
                prev = l;
            }
            assert_eq!(decoded, u.tokens);
        }
    }

    #[test]
    fn confusable_partners_are_close() {
        let w = world(CorpusSpec {
            confusable_pairs: 2,
            confusable_offset: 0.25,
            ..CorpusSpec::default()
        });
        let p = w.prototypes();
        let d: f64 = p.row(0).iter().zip(p.row(1)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((d - 0.25).abs() < 1e-12);
        assert_eq!(w.partner(3), Some(2));
        assert_eq!(w.partner(4), None);
    }
}
