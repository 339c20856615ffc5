//! Relational facts: record schema, loader, synthetic generator and a
//! closed-vocabulary word tokenizer.
//!
//! Dataset files are JSON lines, one record per line:
//!
//! ```text
//! {"category":"Factual","relation":"country_capital_city","subject":"France","object":"Paris","template":"The capital of {} is the city of"}
//! ```
//!
//! `category` is one of `Linguistic`, `Commonsense`, `Factual`, `Bias`.
//! `template` contains exactly one `{}` where the subject goes; the object
//! follows the rendered prompt. Blank lines are ignored.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};

pub const PLACEHOLDER: &str = "{}";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Linguistic,
    Commonsense,
    Factual,
    Bias,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationExample {
    pub category: Category,
    pub relation: String,
    pub subject: String,
    pub object: String,
    pub template: String,
}

impl RelationExample {
    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.template.matches(PLACEHOLDER).count();
        if n != 1 {
            return Err(format!(
                "template {:?} must contain exactly one {PLACEHOLDER} placeholder, found {n}",
                self.template
            ));
        }
        if self.relation.trim().is_empty() {
            return Err("empty relation".into());
        }
        if self.subject.split_whitespace().next().is_none() {
            return Err("empty subject".into());
        }
        if self.object.split_whitespace().next().is_none() {
            return Err("object has no tokens".into());
        }
        Ok(())
    }

    /// Template with the subject substituted.
    pub fn prompt_text(&self) -> String {
        self.template.replacen(PLACEHOLDER, &self.subject, 1)
    }

    pub fn render_with(&self, template: &str) -> String {
        template.replacen(PLACEHOLDER, &self.subject, 1)
    }
}

/// Parses JSON-lines records, reporting the first bad line.
pub fn parse_relations(text: &str, origin: &str) -> Result<Vec<RelationExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = |message: String| Error::Record {
            path: origin.to_string(),
            line: i + 1,
            message,
        };
        let ex: RelationExample =
            serde_json::from_str(line).map_err(|e| record(format!("malformed record: {e}")))?;
        ex.validate().map_err(record)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn load_relations(path: &Path) -> Result<Vec<RelationExample>> {
    let text = read_to_string(path)?;
    let examples = parse_relations(&text, &path.display().to_string())?;
    for (cat, n) in category_counts(&examples) {
        log::info!("{}: {n} {cat} examples", path.display());
    }
    Ok(examples)
}

/// Serialises examples as JSON lines (newline-terminated).
pub fn relations_to_jsonl(examples: &[RelationExample]) -> String {
    let mut s = String::new();
    for ex in examples {
        s.push_str(&serde_json::to_string(ex).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn save_relations(path: &Path, examples: &[RelationExample]) -> Result<()> {
    write_atomic(path, relations_to_jsonl(examples).as_bytes())
}

/// Examples per category; all four categories are always present.
pub fn category_counts(examples: &[RelationExample]) -> BTreeMap<Category, usize> {
    let mut m: BTreeMap<Category, usize> = [
        Category::Linguistic,
        Category::Commonsense,
        Category::Factual,
        Category::Bias,
    ]
    .into_iter()
    .map(|c| (c, 0))
    .collect();
    for ex in examples {
        *m.entry(ex.category).or_default() += 1;
    }
    m
}

/// Distinct templates per relation, in order of first appearance.
pub fn templates_by_relation(examples: &[RelationExample]) -> HashMap<String, Vec<String>> {
    let mut m: HashMap<String, Vec<String>> = HashMap::new();
    for ex in examples {
        let list = m.entry(ex.relation.clone()).or_default();
        if !list.contains(&ex.template) {
            list.push(ex.template.clone());
        }
    }
    m
}

/// Training sentences: every fact rendered with every template its relation
/// uses anywhere in the dataset, followed by the object.
pub fn training_sentences(examples: &[RelationExample]) -> Vec<String> {
    let templates = templates_by_relation(examples);
    let mut out = Vec::new();
    for ex in examples {
        for t in &templates[&ex.relation] {
            out.push(format!("{} {}", ex.render_with(t), ex.object));
        }
    }
    out
}

/// How [`Tokenizer::encode`] treats words outside the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownPolicy {
    Strict,
    MapToUnk,
}

/// Whitespace word tokenizer over a closed vocabulary. Id 0 is `<unk>`;
/// the remaining ids are the corpus words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub const SPECIALS: &'static [&'static str] = &[UNK];

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !Self::SPECIALS.contains(&w.as_str()))
            .collect();
        let words: Vec<String> = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(set)
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Tokenizer { words, index }
    }

    /// Vocabulary covering every prompt, object and training sentence.
    pub fn from_examples(examples: &[RelationExample]) -> Self {
        let sentences = training_sentences(examples);
        Self::from_words(sentences.iter().flat_map(|s| s.split_whitespace()))
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str, policy: UnknownPolicy) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| match (self.id(w), policy) {
                (Some(i), _) => Ok(i),
                (None, UnknownPolicy::MapToUnk) => Ok(0),
                (None, UnknownPolicy::Strict) => Err(Error::OutOfVocabulary(w.to_string())),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or(UNK, String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A rendered cloze prompt. The prediction is read at the last prompt
/// position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
    pub target: usize,
}

/// Tokenises the substituted template; the target is the first object token.
pub fn render_prompt(ex: &RelationExample, tok: &Tokenizer) -> Result<Prompt> {
    let tokens = tok.encode(&ex.prompt_text(), UnknownPolicy::Strict)?;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty prompt for {}/{}",
            ex.relation, ex.subject
        )));
    }
    let first = ex
        .object
        .split_whitespace()
        .next()
        .ok_or_else(|| Error::InvalidArgument("object has no tokens".into()))?;
    let target = tok
        .id(first)
        .ok_or_else(|| Error::OutOfVocabulary(first.to_string()))?;
    Ok(Prompt { tokens, target })
}

/// Parameters of the synthetic fact generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// Number of relations; the first twelve are the named relations below.
    pub relations: usize,
    pub entities_per_relation: usize,
    pub seed: u64,
    /// Optional per-relation subject counts overriding `entities_per_relation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_relation: Option<Vec<usize>>,
}

impl SynthSpec {
    pub fn new(relations: usize, entities_per_relation: usize, seed: u64) -> Self {
        SynthSpec {
            relations,
            entities_per_relation,
            seed,
            per_relation: None,
        }
    }

    fn count_for(&self, r: usize) -> usize {
        self.per_relation
            .as_ref()
            .and_then(|v| v.get(r).copied())
            .unwrap_or(self.entities_per_relation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.relations == 0 || self.entities_per_relation == 0 {
            return Err(Error::InvalidArgument(
                "relations and entities_per_relation must be at least 1".into(),
            ));
        }
        if let Some(v) = &self.per_relation {
            if v.len() != self.relations || v.contains(&0) {
                return Err(Error::InvalidArgument(format!(
                    "per_relation must list {} positive counts",
                    self.relations
                )));
            }
        }
        Ok(())
    }
}

/// How a synthetic relation picks objects.
#[derive(Debug, Clone, Copy)]
enum ObjectRule {
    /// Random draw from a pool of this many fresh words (capped by subject count).
    Pool(usize),
    /// One distinct fresh object per subject.
    Bijective,
    FirstLetter,
    LastLetter,
}

struct RelationDef {
    category: Category,
    name: &'static str,
    subject_domain: &'static str,
    rule: ObjectRule,
    templates: [&'static str; 3],
}

const RELATIONS: [RelationDef; 12] = [
    RelationDef {
        category: Category::Linguistic,
        name: "adjective_antonym",
        subject_domain: "adjective",
        rule: ObjectRule::Bijective,
        templates: ["the opposite of {} is", "the antonym of {} is", "the word {} has the opposite meaning of"],
    },
    RelationDef {
        category: Category::Linguistic,
        name: "word_first_letter",
        subject_domain: "word",
        rule: ObjectRule::FirstLetter,
        templates: ["the first letter of {} is", "the word {} starts with the letter", "the word {} begins with"],
    },
    RelationDef {
        category: Category::Linguistic,
        name: "word_last_letter",
        subject_domain: "word",
        rule: ObjectRule::LastLetter,
        templates: ["the last letter of {} is", "the word {} ends with the letter", "the final letter of {} is"],
    },
    RelationDef {
        category: Category::Commonsense,
        name: "object_superclass",
        subject_domain: "object",
        rule: ObjectRule::Pool(10),
        templates: ["a {} is a kind of", "the {} is a type of", "the {} belongs to the category of"],
    },
    RelationDef {
        category: Category::Commonsense,
        name: "fruit_inside_color",
        subject_domain: "fruit",
        rule: ObjectRule::Pool(6),
        templates: ["the inside of a {} is", "when cut open a {} is colored", "the flesh of a {} is"],
    },
    RelationDef {
        category: Category::Commonsense,
        name: "work_location",
        subject_domain: "occupation",
        rule: ObjectRule::Pool(12),
        templates: ["a {} typically works at a", "the usual workplace of a {} is a", "a {} spends the working day at a"],
    },
    RelationDef {
        category: Category::Factual,
        name: "country_language",
        subject_domain: "country",
        rule: ObjectRule::Pool(16),
        templates: ["people in {} speak", "the official language of {} is", "in {} most people speak"],
    },
    RelationDef {
        category: Category::Factual,
        name: "country_capital_city",
        subject_domain: "country",
        rule: ObjectRule::Bijective,
        templates: ["the capital of {} is the city of", "the capital city of {} is", "the seat of government of {} is"],
    },
    RelationDef {
        category: Category::Bias,
        name: "name_religion",
        subject_domain: "name",
        rule: ObjectRule::Pool(6),
        templates: ["{} is a follower of", "the religion of {} is", "{} practices the religion of"],
    },
    RelationDef {
        category: Category::Bias,
        name: "occupation_age",
        subject_domain: "occupation",
        rule: ObjectRule::Pool(3),
        templates: ["a typical {} is", "the age of a typical {} is", "most people working as a {} are"],
    },
    RelationDef {
        category: Category::Bias,
        name: "occupation_gender",
        subject_domain: "occupation",
        rule: ObjectRule::Pool(2),
        templates: ["a {} is usually a", "the typical {} is a", "most people working as a {} are a"],
    },
    RelationDef {
        category: Category::Bias,
        name: "name_birthplace",
        subject_domain: "name",
        rule: ObjectRule::Pool(20),
        templates: ["{} was born in", "the birthplace of {} is", "{} grew up in"],
    },
];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Fresh pseudo-words, never repeating and never colliding with `taken`.
struct WordSource {
    rng: ChaCha8Rng,
    taken: BTreeSet<String>,
}

impl WordSource {
    fn fresh(&mut self) -> String {
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[self.rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.rng.gen_bool(0.5) {
                w.push(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())] as char);
            }
            if self.taken.insert(w.clone()) {
                return w;
            }
        }
    }
}

struct GenericRelation {
    category: Category,
    name: String,
    domain: String,
    templates: Vec<String>,
}

/// Generates a deterministic synthetic fact set mirroring the relational
/// schema: one object per (relation, subject), subjects sharing a domain
/// are shared across relations, and subject `i` uses template `i mod 3`.
pub fn synth_facts(spec: &SynthSpec) -> Result<Vec<RelationExample>> {
    spec.validate()?;
    let mut taken: BTreeSet<String> = BTreeSet::new();
    for r in &RELATIONS {
        for t in r.templates {
            taken.extend(t.split_whitespace().map(str::to_string));
        }
    }
    let cats = [
        Category::Linguistic,
        Category::Commonsense,
        Category::Factual,
        Category::Bias,
    ];
    let generic: Vec<GenericRelation> = (RELATIONS.len()..spec.relations)
        .map(|i| {
            let key = format!("r{i}");
            taken.insert(key.clone());
            GenericRelation {
                category: cats[i % 4],
                name: format!("synthetic_relation_{i}"),
                domain: format!("generic_{i}"),
                templates: vec![
                    format!("the {key} of {{}} is"),
                    format!("{{}} has the {key}"),
                    format!("for {{}} the {key} is"),
                ],
            }
        })
        .collect();
    for g in &generic {
        for t in &g.templates {
            taken.extend(t.split_whitespace().map(str::to_string));
        }
    }
    let mut words = WordSource {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        taken,
    };

    // subject pools per domain, sized for the largest relation using it
    let domain_of = |r: usize| -> String {
        if r < RELATIONS.len() {
            RELATIONS[r].subject_domain.to_string()
        } else {
            generic[r - RELATIONS.len()].domain.clone()
        }
    };
    let mut domain_size: BTreeMap<String, usize> = BTreeMap::new();
    let mut domain_order: Vec<String> = Vec::new();
    for r in 0..spec.relations {
        let d = domain_of(r);
        if !domain_size.contains_key(&d) {
            domain_order.push(d.clone());
        }
        let e = domain_size.entry(d).or_default();
        *e = (*e).max(spec.count_for(r));
    }
    let mut subjects: HashMap<String, Vec<String>> = HashMap::new();
    for d in &domain_order {
        let pool = (0..domain_size[d]).map(|_| words.fresh()).collect();
        subjects.insert(d.clone(), pool);
    }

    let mut out = Vec::new();
    for r in 0..spec.relations {
        let n = spec.count_for(r);
        let subj = &subjects[&domain_of(r)][..n];
        let (category, name, rule, templates): (Category, String, ObjectRule, Vec<String>) =
            if r < RELATIONS.len() {
                let def = &RELATIONS[r];
                (
                    def.category,
                    def.name.to_string(),
                    def.rule,
                    def.templates.iter().map(|s| s.to_string()).collect(),
                )
            } else {
                let g = &generic[r - RELATIONS.len()];
                (g.category, g.name.clone(), ObjectRule::Pool(8), g.templates.clone())
            };
        let objects: Vec<String> = match rule {
            ObjectRule::FirstLetter => subj.iter().map(|s| s[..1].to_uppercase()).collect(),
            ObjectRule::LastLetter => subj.iter().map(|s| s[s.len() - 1..].to_uppercase()).collect(),
            ObjectRule::Bijective => (0..n).map(|_| words.fresh()).collect(),
            ObjectRule::Pool(cap) => {
                let size = cap.min(n).max(1);
                let pool: Vec<String> = (0..size).map(|_| words.fresh()).collect();
                // every pool word used at least once, the rest drawn at random
                let mut picks: Vec<String> = pool.clone();
                while picks.len() < n {
                    picks.push(pool[words.rng.gen_range(0..size)].clone());
                }
                picks.shuffle(&mut words.rng);
                picks
            }
        };
        for (i, (s, o)) in subj.iter().zip(objects).enumerate() {
            out.push(RelationExample {
                category,
                relation: name.clone(),
                subject: s.clone(),
                object: o,
                template: templates[i % templates.len()].clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn capital() -> RelationExample {
        RelationExample {
            category: Category::Factual,
            relation: "country_capital_city".into(),
            subject: "France".into(),
            object: "Paris".into(),
            template: "The capital of {} is the city of".into(),
        }
    }

    #[test]
    fn loads_a_valid_record() {
        let line = serde_json::to_string(&capital()).unwrap();
        let got = parse_relations(&line, "mem").unwrap();
        assert_eq!(got, vec![capital()]);
        assert_eq!(category_counts(&got)[&Category::Factual], 1);
    }

    #[test]
    fn empty_input_gives_zero_counts() {
        let got = parse_relations("", "mem").unwrap();
        assert!(got.is_empty());
        assert!(category_counts(&got).values().all(|&n| n == 0));
    }

    #[test]
    fn rejects_bad_templates_with_line_number() {
        let mut bad = capital();
        bad.template = "The capital is".into();
        let text = format!(
            "{}\n{}\n",
            serde_json::to_string(&capital()).unwrap(),
            serde_json::to_string(&bad).unwrap()
        );
        match parse_relations(&text, "facts.jsonl") {
            Err(Error::Record { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "facts.jsonl");
            }
            other => panic!("expected record error, got {other:?}"),
        }
        bad.template = "{} and {}".into();
        let text = serde_json::to_string(&bad).unwrap();
        assert!(matches!(parse_relations(&text, "m"), Err(Error::Record { line: 1, .. })));
        let missing = r#"{"category":"Factual","relation":"x","subject":"a","template":"{} is"}"#;
        assert!(matches!(parse_relations(missing, "m"), Err(Error::Record { line: 1, .. })));
        let bad_cat = r#"{"category":"Other","relation":"x","subject":"a","object":"b","template":"{} is"}"#;
        assert!(parse_relations(bad_cat, "m").is_err());
    }

    #[test]
    fn render_prompt_examples() {
        let ex = RelationExample {
            category: Category::Factual,
            relation: "r".into(),
            subject: "A".into(),
            object: "B".into(),
            template: "X of {} is".into(),
        };
        let tok = Tokenizer::from_examples(std::slice::from_ref(&ex));
        let p = render_prompt(&ex, &tok).unwrap();
        assert_eq!(tok.decode(&p.tokens), "X of A is");
        assert_eq!(p.target, tok.id("B").unwrap());

        let ny = RelationExample {
            object: "New York".into(),
            ..ex.clone()
        };
        let tok = Tokenizer::from_examples(std::slice::from_ref(&ny));
        let p = render_prompt(&ny, &tok).unwrap();
        assert_eq!(p.target, tok.id("New").unwrap());

        let other = Tokenizer::from_words(["X", "of", "is", "B"]);
        assert!(matches!(render_prompt(&ex, &other), Err(Error::OutOfVocabulary(w)) if w == "A"));
    }

    #[test]
    fn tokenizer_policies() {
        let tok = Tokenizer::from_words(["b", "a", "a"]);
        assert_eq!(tok.words(), &["<unk>", "a", "b"]);
        assert_eq!(tok.encode("a b a", UnknownPolicy::Strict).unwrap(), vec![1, 2, 1]);
        assert_eq!(tok.encode("a c", UnknownPolicy::MapToUnk).unwrap(), vec![1, 0]);
        assert!(tok.encode("a c", UnknownPolicy::Strict).is_err());
        assert_eq!(tok.decode(&[2, 1]), "b a");
    }

    #[test]
    fn synth_is_deterministic_and_unique() {
        let spec = SynthSpec::new(12, 20, 7);
        let a = synth_facts(&spec).unwrap();
        let b = synth_facts(&spec).unwrap();
        assert_eq!(relations_to_jsonl(&a), relations_to_jsonl(&b));
        assert_eq!(a.len(), 240);
        let pairs: BTreeSet<(String, String)> =
            a.iter().map(|e| (e.relation.clone(), e.subject.clone())).collect();
        assert_eq!(pairs.len(), 240);
        let other = synth_facts(&SynthSpec::new(12, 20, 8)).unwrap();
        assert_ne!(relations_to_jsonl(&a), relations_to_jsonl(&other));
        // three templates per relation, all in use
        assert!(templates_by_relation(&a).values().all(|t| t.len() == 3));
    }

    #[test]
    fn synth_vocabulary_matches_direct_count() {
        let facts = synth_facts(&SynthSpec::new(12, 20, 3)).unwrap();
        let tok = Tokenizer::from_examples(&facts);
        let mut entities = BTreeSet::new();
        let mut template_words = BTreeSet::new();
        for ex in &facts {
            entities.extend(ex.subject.split_whitespace().map(str::to_string));
            entities.extend(ex.object.split_whitespace().map(str::to_string));
            template_words.extend(
                ex.template
                    .split_whitespace()
                    .filter(|w| *w != PLACEHOLDER)
                    .map(str::to_string),
            );
        }
        assert!(entities.is_disjoint(&template_words));
        assert_eq!(
            tok.vocab_size(),
            entities.len() + template_words.len() + Tokenizer::SPECIALS.len()
        );
    }

    #[test]
    fn synth_supports_extra_relations_and_overrides() {
        let mut spec = SynthSpec::new(14, 5, 1);
        let facts = synth_facts(&spec).unwrap();
        assert_eq!(facts.len(), 70);
        spec.per_relation = Some(vec![1; 14]);
        assert_eq!(synth_facts(&spec).unwrap().len(), 14);
        spec.per_relation = Some(vec![1; 3]);
        assert!(synth_facts(&spec).is_err());
        assert!(synth_facts(&SynthSpec::new(0, 5, 1)).is_err());
    }

    #[test]
    fn decoded_prompts_reproduce_templates() {
        let facts = synth_facts(&SynthSpec::new(12, 6, 11)).unwrap();
        let tok = Tokenizer::from_examples(&facts);
        for ex in &facts {
            let p = render_prompt(ex, &tok).unwrap();
            assert_eq!(tok.decode(&p.tokens), ex.prompt_text());
        }
    }
}
