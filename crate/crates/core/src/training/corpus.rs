//! Synthetic corpus: each symbol owns a fixed feature template and duration,
//! so a string determines its clean features exactly. The rule is stored
//! next to the data for oracle evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{read_features, write_features, FeatureError};
use crate::tensor::{Real, Tensor};
use crate::text::{pad_to_length, tokenize, ExtendedSequence, TextError, Vocabulary};

pub const MANIFEST: &str = "manifest.tsv";
pub const VOCAB: &str = "vocab.txt";
pub const RULE: &str = "rule.json";
pub const FEATURE_DIR: &str = "features";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Spec(String),
    #[error("output directory {0} is not empty (pass --force to overwrite)")]
    NotEmpty(PathBuf),
    #[error("symbol {0:?} has no rule")]
    UnknownSymbol(char),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("rule file: {0}")]
    Rule(#[from] serde_json::Error),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub symbols: String,
    pub feat_dim: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_sigma: f64,
    pub count: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            symbols: "abcdefghijklmnop".into(),
            feat_dim: 8,
            min_duration: 2,
            max_duration: 6,
            noise_sigma: 0.05,
            count: 2000,
            min_chars: 3,
            max_chars: 10,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if self.symbols.is_empty() {
            return bad("symbols must not be empty");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be positive");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("durations must satisfy 1 <= min <= max");
        }
        if self.min_chars == 0 || self.min_chars > self.max_chars {
            return bad("character counts must satisfy 1 <= min <= max");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite nonnegative number");
        }
        Vocabulary::new(self.symbols.chars()).map_err(|e| CorpusError::Spec(e.to_string()))?;
        Ok(())
    }

    /// Longest possible utterance in frames.
    pub fn max_frames(&self) -> usize {
        self.max_chars * self.max_duration
    }
}

/// Symbol -> (template, duration) rule, plus the generating spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymbolRule {
    pub spec: CorpusSpec,
    pub durations: Vec<usize>,
    pub templates: Vec<Vec<f64>>,
}

impl SymbolRule {
    pub fn generate<R: Rng + ?Sized>(spec: &CorpusSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let n = spec.symbols.chars().count();
        let durations = (0..n)
            .map(|_| rng.gen_range(spec.min_duration..=spec.max_duration))
            .collect();
        let templates = (0..n)
            .map(|_| (0..spec.feat_dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(SymbolRule {
            spec: spec.clone(),
            durations,
            templates,
        })
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.spec.symbols.chars()).expect("validated spec")
    }

    fn index(&self, ch: char) -> Result<usize> {
        self.spec
            .symbols
            .chars()
            .position(|c| c == ch)
            .ok_or(CorpusError::UnknownSymbol(ch))
    }

    /// Frame span `[start, end)` of every character.
    pub fn alignment(&self, text: &str) -> Result<Vec<(usize, usize)>> {
        let mut pos = 0;
        text.chars()
            .map(|ch| {
                let d = self.durations[self.index(ch)?];
                pos += d;
                Ok((pos - d, pos))
            })
            .collect()
    }

    pub fn frames(&self, text: &str) -> Result<usize> {
        Ok(self.alignment(text)?.last().map_or(0, |s| s.1))
    }

    /// Noise-free features `[frames, F]`.
    pub fn render(&self, text: &str) -> Result<Tensor<f64>> {
        let f = self.spec.feat_dim;
        let mut data = Vec::new();
        for ch in text.chars() {
            let i = self.index(ch)?;
            for _ in 0..self.durations[i] {
                data.extend_from_slice(&self.templates[i]);
            }
        }
        Ok(Tensor::new([data.len() / f, f], data).expect("render shape"))
    }

    /// Clean features plus i.i.d. Gaussian noise of the spec's sigma.
    pub fn render_noisy<R: Rng + ?Sized>(&self, text: &str, rng: &mut R) -> Result<Tensor<f64>> {
        let clean = self.render(text)?;
        if self.spec.noise_sigma == 0.0 {
            return Ok(clean);
        }
        let noise = Normal::new(0.0, self.spec.noise_sigma).expect("valid sigma");
        let data = clean.data().iter().map(|x| x + noise.sample(rng)).collect();
        Ok(Tensor::new(clean.shape().to_vec(), data).expect("same shape"))
    }

    /// Index of the nearest template for every frame.
    pub fn nearest_templates<T: Real>(&self, features: &Tensor<T>) -> Vec<usize> {
        (0..features.shape()[0])
            .map(|r| {
                let row = features.row(r);
                let dist = |t: &Vec<f64>| -> f64 {
                    t.iter()
                        .zip(row)
                        .map(|(a, b)| (a - b.as_f64()) * (a - b.as_f64()))
                        .sum()
                };
                (0..self.templates.len())
                    .min_by(|&a, &b| dist(&self.templates[a]).total_cmp(&dist(&self.templates[b])))
                    .expect("non-empty rule")
            })
            .collect()
    }

    /// Majority template per character slot of `text`'s alignment; ties go
    /// to the lowest index. `frame_offset` shifts the slots into `features`.
    pub fn decode_slots<T: Real>(&self, features: &Tensor<T>, text: &str, frame_offset: usize) -> Result<Vec<char>> {
        let nearest = self.nearest_templates(features);
        let symbols: Vec<char> = self.spec.symbols.chars().collect();
        self.alignment(text)?
            .into_iter()
            .map(|(s, e)| {
                let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
                for &k in &nearest[s + frame_offset..e + frame_offset] {
                    *votes.entry(k).or_default() += 1;
                }
                let best = votes
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                    .map(|(k, _)| *k)
                    .expect("slot has frames");
                Ok(symbols[best])
            })
            .collect()
    }

    pub fn random_text<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let symbols: Vec<char> = self.spec.symbols.chars().collect();
        let n = rng.gen_range(self.spec.min_chars..=self.spec.max_chars);
        (0..n).map(|_| symbols[rng.gen_range(0..symbols.len())]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub features: Tensor<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub rule: SymbolRule,
    pub vocab: Vocabulary,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn generate<R: Rng + ?Sized>(spec: &CorpusSpec, rng: &mut R) -> Result<Self> {
        let rule = SymbolRule::generate(spec, rng)?;
        let utterances = (0..spec.count)
            .map(|i| {
                let text = rule.random_text(rng);
                let features = rule.render_noisy(&text, rng)?.cast();
                Ok(Utterance {
                    id: format!("utt{i:06}"),
                    text,
                    features,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus {
            vocab: rule.vocabulary(),
            rule,
            utterances,
        })
    }

    /// Token IDs of an utterance, padded to its frame count.
    pub fn extended(&self, text: &str, frames: usize) -> Result<ExtendedSequence> {
        Ok(pad_to_length(&tokenize(text, &self.vocab)?, frames)?)
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::frames).sum()
    }

    /// Writes manifest, vocabulary, rule and feature files. A non-empty
    /// directory is rejected unless `force` is set.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() && std::fs::read_dir(dir)?.next().is_some() {
            if !force {
                return Err(CorpusError::NotEmpty(dir.to_path_buf()));
            }
            for name in [MANIFEST, VOCAB, RULE] {
                let p = dir.join(name);
                if p.exists() {
                    std::fs::remove_file(p)?;
                }
            }
            let feats = dir.join(FEATURE_DIR);
            if feats.exists() {
                std::fs::remove_dir_all(feats)?;
            }
        }
        std::fs::create_dir_all(dir.join(FEATURE_DIR))?;
        self.vocab.save(&dir.join(VOCAB))?;
        std::fs::write(dir.join(RULE), serde_json::to_string_pretty(&self.rule)? + "\n")?;
        let mut manifest = String::from("id\ttext\tfeatures\n");
        for u in &self.utterances {
            let rel = format!("{FEATURE_DIR}/{}.f32", u.id);
            write_features(&dir.join(&rel), &u.features)?;
            writeln!(manifest, "{}\t{}\t{}", u.id, u.text, rel).expect("string write");
        }
        std::fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rule: SymbolRule = serde_json::from_str(&std::fs::read_to_string(dir.join(RULE))?)?;
        rule.spec.validate()?;
        if rule.durations.len() != rule.spec.symbols.chars().count()
            || rule.templates.len() != rule.durations.len()
            || rule.templates.iter().any(|t| t.len() != rule.spec.feat_dim)
        {
            return Err(CorpusError::Spec("rule tables do not match the symbol set".into()));
        }
        let vocab = Vocabulary::load(&dir.join(VOCAB))?;
        if vocab != rule.vocabulary() {
            return Err(CorpusError::Spec("vocabulary file disagrees with the rule".into()));
        }
        let text = std::fs::read_to_string(dir.join(MANIFEST))?;
        let mut utterances = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = |reason: String| CorpusError::Manifest { line: i + 1, reason };
            let cols: Vec<&str> = line.split('\t').collect();
            let [id, text, rel] = cols[..] else {
                return Err(bad(format!("expected 3 tab-separated columns, got {}", cols.len())));
            };
            let features = read_features(&dir.join(rel))?;
            let expected = rule.frames(text)?;
            if features.shape() != [expected, rule.spec.feat_dim] {
                return Err(bad(format!(
                    "features {:?} do not match text {text:?} ({expected} frames)",
                    features.shape()
                )));
            }
            utterances.push(Utterance {
                id: id.to_string(),
                text: text.to_string(),
                features,
            });
        }
        Ok(Corpus { rule, vocab, utterances })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_symbol_without_noise() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            min_duration: 3,
            max_duration: 3,
            ..Default::default()
        };
        let rule = SymbolRule::generate(&spec, &mut rng(1)).unwrap();
        let f = rule.render_noisy("a", &mut rng(2)).unwrap();
        assert_eq!(f.shape(), &[3, 8]);
        for r in 0..3 {
            assert_eq!(f.row(r), &rule.templates[0][..]);
        }
        assert_eq!(rule.decode_slots(&f, "a", 0).unwrap(), vec!['a']);
    }

    #[test]
    fn clean_oracle_is_exact() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            count: 20,
            ..Default::default()
        };
        let c = Corpus::generate(&spec, &mut rng(3)).unwrap();
        for u in &c.utterances {
            let oracle: Tensor<f32> = c.rule.render(&u.text).unwrap().cast();
            assert_eq!(oracle.max_abs_diff(&u.features).unwrap(), 0.0);
            let decoded: String = c.rule.decode_slots(&u.features, &u.text, 0).unwrap().into_iter().collect();
            assert_eq!(decoded, u.text);
        }
    }

    #[test]
    fn noise_floor_matches_sigma() {
        let spec = CorpusSpec::default();
        let rule = SymbolRule::generate(&spec, &mut rng(4)).unwrap();
        let mut r = rng(5);
        let (mut sse, mut frames) = (0.0, 0usize);
        while frames < 10_000 {
            let text = rule.random_text(&mut r);
            let noisy = rule.render_noisy(&text, &mut r).unwrap();
            let clean = rule.render(&text).unwrap();
            sse += noisy.sub(&clean).unwrap().sq_norm();
            frames += clean.shape()[0];
        }
        let per_frame = sse / frames as f64;
        let expected = 0.0025 * 8.0;
        assert!((per_frame / expected - 1.0).abs() < 0.1, "{per_frame}");
    }

    #[test]
    fn durations_within_range() {
        let rule = SymbolRule::generate(&CorpusSpec::default(), &mut rng(6)).unwrap();
        assert!(rule.durations.iter().all(|d| (2..=6).contains(d)));
        assert_eq!(rule.alignment("ab").unwrap()[1].0, rule.durations[0]);
    }

    #[test]
    fn disk_round_trip_and_determinism() {
        let spec = CorpusSpec {
            count: 12,
            seed: 9,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let c1 = Corpus::generate(&spec, &mut rng(spec.seed)).unwrap();
        let c2 = Corpus::generate(&spec, &mut rng(spec.seed)).unwrap();
        c1.save(a.path(), false).unwrap();
        c2.save(b.path(), true).unwrap();
        for name in [MANIFEST, VOCAB, RULE, "features/utt000007.f32"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
        assert_eq!(Corpus::load(a.path()).unwrap(), c1);
        assert!(matches!(c1.save(a.path(), false), Err(CorpusError::NotEmpty(_))));
        c1.save(a.path(), true).unwrap();
    }

    #[test]
    fn empty_corpus() {
        let spec = CorpusSpec {
            count: 0,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::generate(&spec, &mut rng(0)).unwrap();
        c.save(&dir.path().join("out"), false).unwrap();
        let back = Corpus::load(&dir.path().join("out")).unwrap();
        assert!(back.utterances.is_empty());
    }
}
