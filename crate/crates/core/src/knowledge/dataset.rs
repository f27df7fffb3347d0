// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic relational facts and the closed word-level tokenizer.
//!
//! Every prompt follows `<relation-cue> <subject> <query-cue>` and the
//! answer is a single object token.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::seed;

/// Positions inside the three-token template (0-based).
pub const RELATION_CUE_POS: usize = 0;
pub const SUBJECT_POS: usize = 1;
pub const QUERY_POS: usize = 2;
pub const PROMPT_LEN: usize = 3;

/// Function words; they carry the default next-token preference.
pub const FILLER_WORDS: [&str; 24] = [
    "the", "of", "a", "and", "in", "to", "is", "was", "for", "on", "that", "with", "as", "by", "at", "from", "it",
    "an", "be", "this", "which", "or", "are", "its",
];

const CAPITALS: [(&str, &str); 25] = [
    ("Canada", "Ottawa"),
    ("France", "Paris"),
    ("Japan", "Tokyo"),
    ("Italy", "Rome"),
    ("Germany", "Berlin"),
    ("Spain", "Madrid"),
    ("Egypt", "Cairo"),
    ("Kenya", "Nairobi"),
    ("Peru", "Lima"),
    ("Chile", "Santiago"),
    ("Norway", "Oslo"),
    ("Sweden", "Stockholm"),
    ("Greece", "Athens"),
    ("Turkey", "Ankara"),
    ("India", "Delhi"),
    ("China", "Beijing"),
    ("Russia", "Moscow"),
    ("Cuba", "Havana"),
    ("Poland", "Warsaw"),
    ("Austria", "Vienna"),
    ("Portugal", "Lisbon"),
    ("Ireland", "Dublin"),
    ("Hungary", "Budapest"),
    ("Finland", "Helsinki"),
    ("Thailand", "Bangkok"),
];

/// Relation catalogue, in generation order.
pub const RELATION_NAMES: [&str; 12] = [
    "capital",
    "language",
    "birthplace",
    "fruit_color",
    "superclass",
    "currency",
    "continent",
    "instrument",
    "sport",
    "profession",
    "element",
    "landmark",
];

/// Closed word <-> id table.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Dataset(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::Vocabulary(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| domain(format!("token id {id} outside vocabulary of {}", self.words.len())))
    }

    /// Whitespace-separated words to ids.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        Ok(ids.iter().map(|&i| self.word(i)).collect::<Result<Vec<_>>>()?.join(" "))
    }

    /// Word -> id map, the on-disk form.
    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.index.clone()
    }

    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut words = vec![String::new(); map.len()];
        for (w, &i) in &map {
            let slot = words
                .get_mut(i)
                .ok_or_else(|| Error::Dataset(format!("tokenizer ids are not contiguous (word {w:?} has id {i})")))?;
            *slot = w.clone();
        }
        Self::from_words(words)
    }
}

impl Serialize for Tokenizer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.index.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tokenizer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, usize>::deserialize(d)?;
        Tokenizer::from_map(map).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub name: String,
    pub relation_cue: usize,
    pub query_cue: usize,
    /// Object tokens the relation can answer with.
    pub answer_space: Vec<usize>,
    /// Subject tokens of the relation.
    pub subjects: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    /// Index into `Dataset::relations`.
    pub relation: usize,
    pub object: usize,
}

/// One JSONL record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub id: usize,
    pub relation: String,
    pub tokens: Vec<usize>,
    pub subject_pos: usize,
    pub query_pos: usize,
    pub answer_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    /// `prompts[i]` realises `facts[i]`.
    pub prompts: Vec<PromptInstance>,
    pub tokenizer: Tokenizer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub seed: u64,
    pub num_relations: usize,
    pub subjects_per_relation: usize,
    pub vocab_budget: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            num_relations: 5,
            subjects_per_relation: 20,
            vocab_budget: 1024,
        }
    }
}

/// Token count a dataset of the given size needs.
pub fn vocab_needed(num_relations: usize, subjects_per_relation: usize) -> usize {
    FILLER_WORDS.len() + num_relations * (2 + 2 * subjects_per_relation)
}

fn relation_words(name: &str, n: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    if name == "capital" && n <= CAPITALS.len() {
        let mut pairs = CAPITALS.to_vec();
        // keep the running example first, sample the rest
        pairs[1..].shuffle(rng);
        pairs.truncate(n);
        return pairs.into_iter().map(|(s, o)| (s.to_string(), o.to_string())).unzip();
    }
    let subjects: Vec<String> = (0..n).map(|i| format!("{name}.s{i:02}")).collect();
    let mut objects: Vec<String> = (0..n).map(|i| format!("{name}.o{i:02}")).collect();
    objects.shuffle(rng);
    (subjects, objects)
}

/// Deterministic synthetic dataset.
pub fn generate_dataset(opts: &GenerateOptions) -> Result<Dataset> {
    if opts.num_relations > RELATION_NAMES.len() {
        return Err(Error::Capacity(format!(
            "{} relations requested, catalogue has {}",
            opts.num_relations,
            RELATION_NAMES.len()
        )));
    }
    let needed = vocab_needed(opts.num_relations, opts.subjects_per_relation);
    if needed > opts.vocab_budget {
        return Err(Error::Capacity(format!(
            "dataset needs {needed} tokens, vocabulary budget is {}",
            opts.vocab_budget
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, "dataset"));
    let mut words: Vec<String> = FILLER_WORDS.iter().map(|w| w.to_string()).collect();
    let mut layout = Vec::new();
    for name in &RELATION_NAMES[..opts.num_relations] {
        let (subjects, objects) = relation_words(name, opts.subjects_per_relation, &mut rng);
        let base = words.len();
        words.push(format!("{name}-of"));
        words.push(format!("{name}-is"));
        words.extend(subjects);
        words.extend(objects);
        layout.push((name.to_string(), base));
    }
    let tokenizer = Tokenizer::from_words(words)?;

    let s = opts.subjects_per_relation;
    let mut relations = Vec::new();
    let mut facts = Vec::new();
    let mut prompts = Vec::new();
    for (r, (name, base)) in layout.into_iter().enumerate() {
        let subjects: Vec<usize> = (base + 2..base + 2 + s).collect();
        let objects: Vec<usize> = (base + 2 + s..base + 2 + 2 * s).collect();
        relations.push(Relation {
            name: name.clone(),
            relation_cue: base,
            query_cue: base + 1,
            answer_space: objects.clone(),
            subjects: subjects.clone(),
        });
        for (&subject, &object) in subjects.iter().zip(&objects) {
            facts.push(Fact {
                subject,
                relation: r,
                object,
            });
            prompts.push(PromptInstance {
                id: prompts.len(),
                relation: name.clone(),
                tokens: vec![base, subject, base + 1],
                subject_pos: SUBJECT_POS,
                query_pos: QUERY_POS,
                answer_id: object,
            });
        }
    }
    let ds = Dataset {
        relations,
        facts,
        prompts,
        tokenizer,
    };
    ds.validate()?;
    Ok(ds)
}

impl Dataset {
    pub fn vocab_size(&self) -> usize {
        self.tokenizer.len()
    }

    pub fn relation_index(&self, name: &str) -> Result<usize> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::Dataset(format!("unknown relation {name:?}")))
    }

    /// Indices of the prompts of one relation, in dataset order.
    pub fn prompt_indices(&self, relation: &str) -> Vec<usize> {
        self.prompts
            .iter()
            .enumerate()
            .filter(|(_, p)| p.relation == relation)
            .map(|(i, _)| i)
            .collect()
    }

    /// Relations that have at least one fact.
    pub fn populated_relations(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self.facts.iter().map(|f| f.relation).collect();
        used.into_iter().collect()
    }

    /// Tokens outside every relation role.
    pub fn fillers(&self) -> Vec<usize> {
        let mut roles = BTreeSet::new();
        for r in &self.relations {
            roles.insert(r.relation_cue);
            roles.insert(r.query_cue);
            roles.extend(&r.answer_space);
            roles.extend(&r.subjects);
        }
        (0..self.vocab_size()).filter(|t| !roles.contains(t)).collect()
    }

    /// Structural checks: disjoint roles, template shape, ids in range.
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size();
        let bad = |m: String| Err(Error::Dataset(m));
        let mut seen = BTreeSet::new();
        for r in &self.relations {
            let mut role_tokens = vec![r.relation_cue, r.query_cue];
            role_tokens.extend(&r.subjects);
            role_tokens.extend(r.answer_space.iter().collect::<BTreeSet<_>>().into_iter());
            for t in role_tokens {
                if t >= v {
                    return bad(format!("relation {} uses token {t} outside vocabulary of {v}", r.name));
                }
                if !seen.insert(t) {
                    return bad(format!("token {t} has more than one role"));
                }
            }
        }
        if self.facts.len() != self.prompts.len() {
            return bad("facts and prompts differ in length".into());
        }
        let mut keys = BTreeSet::new();
        for (f, p) in self.facts.iter().zip(&self.prompts) {
            let r = self
                .relations
                .get(f.relation)
                .ok_or_else(|| Error::Dataset(format!("fact refers to relation {}", f.relation)))?;
            if !keys.insert((f.subject, f.relation)) {
                return bad(format!("duplicate fact for subject {} in {}", f.subject, r.name));
            }
            if !r.answer_space.contains(&f.object) || !r.subjects.contains(&f.subject) {
                return bad(format!("fact {} does not fit relation {}", p.id, r.name));
            }
            if p.relation != r.name
                || p.tokens != [r.relation_cue, f.subject, r.query_cue]
                || p.subject_pos != SUBJECT_POS
                || p.query_pos != QUERY_POS
                || p.answer_id != f.object
            {
                return bad(format!("prompt {} does not realise its fact", p.id));
            }
        }
        Ok(())
    }

    /// Every prompt id must fit a model vocabulary of `vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for p in &self.prompts {
            if let Some(&t) = p.tokens.iter().chain([&p.answer_id]).find(|&&t| t >= vocab_size) {
                return Err(Error::Dataset(format!(
                    "prompt {} uses token {t}, model vocabulary is {vocab_size}",
                    p.id
                )));
            }
        }
        Ok(())
    }

    /// Writes `prompts.jsonl`, `tokenizer.json` and `relations.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("prompts.jsonl"))?;
        for p in &self.prompts {
            serde_json::to_writer(&mut f, p)?;
            f.write_all(b"\n")?;
        }
        fs::write(dir.join("tokenizer.json"), serde_json::to_string_pretty(&self.tokenizer)? + "\n")?;
        fs::write(dir.join("relations.json"), serde_json::to_string_pretty(&self.relations)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            fs::read(dir.join(name)).map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(name).display())))
        };
        let tokenizer: Tokenizer = serde_json::from_slice(&read("tokenizer.json")?)?;
        let relations: Vec<Relation> = serde_json::from_slice(&read("relations.json")?)?;
        let mut prompts = Vec::new();
        for (n, line) in BufReader::new(&read("prompts.jsonl")?[..]).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: PromptInstance = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("prompts.jsonl line {}: {e}", n + 1)))?;
            prompts.push(p);
        }
        let mut facts = Vec::with_capacity(prompts.len());
        for p in &prompts {
            let relation = relations
                .iter()
                .position(|r| r.name == p.relation)
                .ok_or_else(|| Error::Dataset(format!("prompt {} names unknown relation {:?}", p.id, p.relation)))?;
            let subject = *p
                .tokens
                .get(p.subject_pos)
                .ok_or_else(|| Error::Dataset(format!("prompt {} has no subject token", p.id)))?;
            facts.push(Fact {
                subject,
                relation,
                object: p.answer_id,
            });
        }
        let ds = Dataset {
            relations,
            facts,
            prompts,
            tokenizer,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(r: usize, s: usize) -> GenerateOptions {
        GenerateOptions {
            seed: 42,
            num_relations: r,
            subjects_per_relation: s,
            vocab_budget: 1024,
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_dataset(&opts(5, 20)).unwrap();
        let b = generate_dataset(&opts(5, 20)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_dataset(&GenerateOptions { seed: 43, ..opts(5, 20) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_subjects_is_valid() {
        let d = generate_dataset(&opts(3, 0)).unwrap();
        assert!(d.facts.is_empty() && d.prompts.is_empty());
        assert_eq!(d.relations.len(), 3);
    }

    #[test]
    fn keys_unique_and_ids_in_range() {
        let d = generate_dataset(&opts(5, 20)).unwrap();
        let keys: BTreeSet<(usize, usize)> = d.facts.iter().map(|f| (f.subject, f.relation)).collect();
        assert_eq!(keys.len(), 100);
        assert_eq!(d.vocab_size(), vocab_needed(5, 20));
        assert!(d.prompts.iter().flat_map(|p| p.tokens.iter()).all(|&t| t < d.vocab_size()));
        assert_eq!(d.fillers().len(), FILLER_WORDS.len());
    }

    #[test]
    fn running_example_present() {
        let d = generate_dataset(&opts(1, 20)).unwrap();
        let p = &d.prompts[0];
        assert_eq!(d.tokenizer.detokenize(&p.tokens).unwrap(), "capital-of Canada capital-is");
        assert_eq!(d.tokenizer.word(p.answer_id).unwrap(), "Ottawa");
    }

    #[test]
    fn budget_exceeded() {
        let o = GenerateOptions { vocab_budget: 100, ..opts(5, 20) };
        assert!(matches!(generate_dataset(&o), Err(Error::Capacity(_))));
        assert!(matches!(generate_dataset(&opts(13, 1)), Err(Error::Capacity(_))));
    }

    #[test]
    fn tokenizer_round_trip_and_unknown_word() {
        let d = generate_dataset(&opts(4, 10)).unwrap();
        for p in &d.prompts {
            let text = d.tokenizer.detokenize(&p.tokens).unwrap();
            assert_eq!(d.tokenizer.tokenize(&text).unwrap(), p.tokens);
        }
        let err = d.tokenizer.tokenize("capital-of Atlantis capital-is").unwrap_err();
        assert!(err.to_string().contains("Atlantis"));
    }

    #[test]
    fn save_load_round_trip() {
        let d = generate_dataset(&opts(3, 7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    }
}
