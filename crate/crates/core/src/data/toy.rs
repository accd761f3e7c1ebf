//! Synthetic tasks with known ground truth and a matching pretraining
//! corpus.
//!
//! Each generator owns a closed vocabulary. The corpus holds the "world
//! knowledge" a masked language model can pick up before it sees any task
//! example; task patterns phrase questions differently from the corpus, so
//! zero-shot use of that knowledge is possible but imperfect.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, PetError, Result};
use crate::pvp::{Example, TaskBundle, TaskSpec};
use crate::rng::{bounded, shuffle, substream, unit_f64, PetRng};
use crate::vocab::{Vocabulary, DEFAULT_SPECIALS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Review snippets with single-token verbalizations.
    Sentiment,
    /// Premise/hypothesis pairs about object colors.
    PairEntailment,
    /// Pick an object's color among per-example candidates; every color
    /// name spans two or three tokens.
    SpanChoice,
}

impl ToyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sentiment => "sentiment",
            Self::PairEntailment => "pair-entailment",
            Self::SpanChoice => "span-choice",
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToyKind {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sentiment" => Ok(Self::Sentiment),
            "pair-entailment" | "entailment" => Ok(Self::PairEntailment),
            "span-choice" => Ok(Self::SpanChoice),
            other => Err(config_err(format!("unknown toy task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub kind: ToyKind,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub unlabeled: usize,
    pub corpus: usize,
    pub seed: u64,
}

impl ToyConfig {
    pub fn new(kind: ToyKind, seed: u64) -> Self {
        Self {
            kind,
            train: 200,
            dev: 200,
            test: 500,
            unlabeled: 1000,
            corpus: 4000,
            seed,
        }
    }
}

/// A generated task: bundle, vocabulary, labeled splits, an unlabeled pool
/// (disjoint ids) and a pretraining corpus.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub bundle: TaskBundle,
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub unlabeled: Dataset,
    pub corpus: Vec<String>,
}

impl ToyTask {
    pub fn spec(&self) -> &TaskSpec {
        &self.bundle.spec
    }

    /// Corpus sentences as token ids.
    pub fn corpus_ids(&self) -> Vec<Vec<u32>> {
        self.corpus.iter().map(|s| self.vocab.encode(s)).collect()
    }
}

fn pick<'a>(rng: &mut PetRng, items: &[&'a str]) -> &'a str {
    items[bounded(rng, items.len())]
}

fn coin(rng: &mut PetRng, p: f64) -> bool {
    unit_f64(rng) < p
}

/// Generator interface shared by the three kinds.
trait Grammar {
    fn spec(&self) -> TaskSpec;
    fn patterns(&self) -> Vec<(String, String)>;
    fn verbalizer(&self) -> BTreeMap<String, String>;
    fn tokens(&self) -> Vec<&'static str>;
    fn example(&self, rng: &mut PetRng, id: String, label: usize) -> Example;
    fn sentence(&self, rng: &mut PetRng) -> String;
}

const SENT_NOUNS: [&str; 8] = [
    "film", "pizza", "book", "meal", "hotel", "show", "song", "game",
];
const SENT_POS: [&str; 40] = [
    "nice",
    "lovely",
    "superb",
    "fun",
    "tasty",
    "brilliant",
    "charming",
    "fresh",
    "smart",
    "warm",
    "clean",
    "cozy",
    "sweet",
    "solid",
    "neat",
    "grand",
    "amazing",
    "awesome",
    "excellent",
    "fantastic",
    "wonderful",
    "perfect",
    "pleasant",
    "elegant",
    "friendly",
    "gorgeous",
    "joyful",
    "stunning",
    "vivid",
    "witty",
    "classy",
    "crisp",
    "delightful",
    "epic",
    "fine",
    "glorious",
    "handy",
    "juicy",
    "lively",
    "polished",
];
const SENT_NEG: [&str; 40] = [
    "awful", "boring", "bland", "dull", "rude", "dirty", "stale", "weak", "cold", "lame", "poor",
    "messy", "noisy", "sad", "sloppy", "cheap", "horrid", "nasty", "ugly", "gross", "clumsy",
    "dreary", "flat", "greasy", "harsh", "lousy", "mediocre", "moldy", "pricey", "shabby",
    "smelly", "soggy", "tacky", "tedious", "tired", "vile", "wasteful", "worn", "clunky", "grim",
];
const SENT_NEUTRAL: [&str; 6] = ["big", "small", "new", "old", "long", "short"];
/// Negation words in task examples. Only the first one negates a polar
/// adjective anywhere in the corpus.
const SENT_NEGATORS: [&str; 2] = ["not", "hardly"];
/// Share of reviews whose polar clause is negated.
const SENT_NEGATION: f64 = 0.4;
const SENT_GREAT_IF_POS: f64 = 0.9;
const SENT_GREAT_IF_NEG: f64 = 0.1;

struct Sentiment;

impl Sentiment {
    /// A review whose overall polarity is `positive`.
    fn review(rng: &mut PetRng, positive: bool, negations: &[&str]) -> String {
        let negated = coin(rng, SENT_NEGATION);
        let adjs: &[&str] = if positive != negated {
            &SENT_POS
        } else {
            &SENT_NEG
        };
        let adj = pick(rng, adjs);
        let (n1, n2) = (pick(rng, &SENT_NOUNS), pick(rng, &SENT_NOUNS));
        let intens = if coin(rng, 0.3) {
            pick(rng, &["very ", "really "])
        } else {
            ""
        };
        let not = if negated {
            format!("{} ", pick(rng, negations))
        } else {
            String::new()
        };
        let polar = format!("the {n1} was {not}{intens}{adj}");
        match bounded(rng, 4) {
            0 => format!("{polar} and the {n2} was {} .", pick(rng, &SENT_NEUTRAL)),
            1 => format!("i thought {polar} ."),
            _ => format!("{polar} ."),
        }
    }

    /// Verdict word following a review in the corpus.
    fn verdict(rng: &mut PetRng, positive: bool) -> &'static str {
        let p_great = if positive {
            SENT_GREAT_IF_POS
        } else {
            SENT_GREAT_IF_NEG
        };
        if coin(rng, p_great) {
            "great"
        } else {
            "bad"
        }
    }

    fn coin_verdict(rng: &mut PetRng) -> &'static str {
        if coin(rng, 0.5) {
            "great"
        } else {
            "bad"
        }
    }
}

impl Grammar for Sentiment {
    fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: "toy-sentiment".into(),
            labels: vec!["negative".into(), "positive".into()],
            fields: vec!["text".into()],
            metrics: vec!["acc".into(), "f1-macro".into()],
            max_seq_length: 24,
            swap_fields: None,
            shuffle_candidates: false,
            free_form: None,
            positive_label: Some("positive".into()),
        }
    }

    fn patterns(&self) -> Vec<(String, String)> {
        vec![
            ("p0".into(), "{text} it was [MASK] .".into()),
            ("p1".into(), "{text} all in all , [MASK] .".into()),
            ("p2".into(), "just [MASK] ! || {text}".into()),
        ]
    }

    fn verbalizer(&self) -> BTreeMap<String, String> {
        [("negative", "bad"), ("positive", "great")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    fn tokens(&self) -> Vec<&'static str> {
        let mut t = vec![
            ".", ",", "!", "|", "the", "was", "and", "it", "all", "in", "just", "i", "thought",
            "great", "bad", "very", "really", "not", "hardly",
        ];
        t.extend(SENT_NOUNS);
        t.extend(SENT_POS);
        t.extend(SENT_NEG);
        t.extend(SENT_NEUTRAL);
        t
    }

    fn example(&self, rng: &mut PetRng, id: String, label: usize) -> Example {
        let text = Self::review(rng, label == 1, &SENT_NEGATORS);
        Example::new(id, [("text", text)]).with_label(label)
    }

    fn sentence(&self, rng: &mut PetRng) -> String {
        let positive = coin(rng, 0.5);
        let adjs: &[&str] = if positive { &SENT_POS } else { &SENT_NEG };
        let n = pick(rng, &SENT_NOUNS);
        match bounded(rng, 10) {
            0..=4 => {
                let review = Self::review(rng, positive, &SENT_NEGATORS[..1]);
                let v = Self::verdict(rng, positive);
                format!("{review} it was {v} .")
            }
            5..=6 => format!("{} and {} .", pick(rng, adjs), pick(rng, adjs)),
            7 => format!(
                "the {n} was {} {} .",
                pick(rng, &["not", "hardly", "very", "really"]),
                pick(rng, &SENT_NEUTRAL)
            ),
            8 => format!("all in all , {} .", Self::coin_verdict(rng)),
            _ => format!("just {} !", Self::coin_verdict(rng)),
        }
    }
}

const ENT_NOUNS: [&str; 30] = [
    "cup", "box", "car", "hat", "door", "wall", "bag", "pen", "bike", "lamp", "sofa", "rug", "mug",
    "vase", "kite", "boat", "coat", "sock", "shoe", "bowl", "fan", "desk", "bed", "van", "tent",
    "flag", "ball", "bus", "jar", "belt",
];
/// Base colors, and the shades that belong to each.
const ENT_BASES: [&str; 4] = ["red", "blue", "green", "yellow"];
const ENT_SHADES: [[&str; 6]; 4] = [
    ["crimson", "scarlet", "ruby", "cherry", "maroon", "brick"],
    ["navy", "azure", "cobalt", "sapphire", "indigo", "denim"],
    ["olive", "lime", "jade", "mint", "forest", "moss"],
    ["lemon", "gold", "amber", "honey", "mustard", "canary"],
];

fn shade_base(shade: &str) -> Option<usize> {
    ENT_SHADES.iter().position(|s| s.contains(&shade))
}

struct PairEntailment;

impl Grammar for PairEntailment {
    fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: "toy-entailment".into(),
            labels: vec!["no".into(), "yes".into()],
            fields: vec!["premise".into(), "hypothesis".into()],
            metrics: vec!["acc".into(), "f1-macro".into()],
            max_seq_length: 28,
            swap_fields: None,
            shuffle_candidates: false,
            free_form: None,
            positive_label: Some("yes".into()),
        }
    }

    fn patterns(&self) -> Vec<(String, String)> {
        vec![
            ("p0".into(), "{premise} ? [MASK] , {hypothesis} .".into()),
            ("p1".into(), "{hypothesis} ? [MASK] , {premise} .".into()),
            ("p2".into(), "{premise} || {hypothesis} ? [MASK] .".into()),
        ]
    }

    fn verbalizer(&self) -> BTreeMap<String, String> {
        [("no", "no"), ("yes", "yes")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    fn tokens(&self) -> Vec<&'static str> {
        let mut t = vec![".", ",", "?", "|", "the", "is", "a", "color", "yes", "no"];
        t.extend(ENT_NOUNS);
        t.extend(ENT_BASES);
        t.extend(ENT_SHADES.iter().flatten());
        t
    }

    fn example(&self, rng: &mut PetRng, id: String, label: usize) -> Example {
        let noun = pick(rng, &ENT_NOUNS);
        let base = bounded(rng, ENT_BASES.len());
        let shade = pick(rng, &ENT_SHADES[base]);
        let asked = if label == 1 {
            base
        } else {
            (base + 1 + bounded(rng, ENT_BASES.len() - 1)) % ENT_BASES.len()
        };
        let premise = format!("the {noun} is {shade}");
        let hypothesis = format!("the {noun} is {}", ENT_BASES[asked]);
        Example::new(id, [("premise", premise), ("hypothesis", hypothesis)]).with_label(label)
    }

    fn sentence(&self, rng: &mut PetRng) -> String {
        let n = pick(rng, &ENT_NOUNS);
        let base = bounded(rng, ENT_BASES.len());
        let other = (base + 1 + bounded(rng, ENT_BASES.len() - 1)) % ENT_BASES.len();
        let (c, d) = (ENT_BASES[base], ENT_BASES[other]);
        let shade = pick(rng, &ENT_SHADES[base]);
        match bounded(rng, 4) {
            0 => format!("the {n} is {c} ? yes ."),
            1 => format!("the {n} is {d} ? no ."),
            _ => format!("the {n} is {shade} , a {c} color ."),
        }
    }
}

/// (object, color index); each color has two objects.
const SPAN_OBJECTS: [(&str, usize); 18] = [
    ("cherry", 0),
    ("lipstick", 0),
    ("nail", 1),
    ("chain", 1),
    ("herb", 2),
    ("mint", 2),
    ("beach", 3),
    ("dune", 3),
    ("reef", 4),
    ("shrimp", 4),
    ("penny", 5),
    ("kettle", 5),
    ("lemon", 6),
    ("frog", 6),
    ("pearl", 7),
    ("plum", 7),
    ("ocean", 8),
    ("tusk", 8),
];
/// Every combination of three stems and three endings, two subwords each.
const SPAN_COLORS: [&str; 9] = [
    "saren", "salav", "sador", "moren", "molav", "modor", "tiren", "tilav", "tidor",
];
const SPAN_FILLERS: [&str; 4] = ["today", "there", "here", "again"];

struct SpanChoice;

impl Grammar for SpanChoice {
    fn spec(&self) -> TaskSpec {
        TaskSpec {
            name: "toy-span-choice".into(),
            labels: SPAN_COLORS.iter().map(|s| s.to_string()).collect(),
            fields: vec!["text".into()],
            metrics: vec!["acc".into()],
            max_seq_length: 20,
            swap_fields: None,
            shuffle_candidates: true,
            free_form: None,
            positive_label: None,
        }
    }

    fn patterns(&self) -> Vec<(String, String)> {
        vec![
            ("p0".into(), "{text} its color is [MASK] .".into()),
            ("p1".into(), "{text} color : [MASK] .".into()),
            ("p2".into(), "[MASK] ! || {text}".into()),
        ]
    }

    fn verbalizer(&self) -> BTreeMap<String, String> {
        SPAN_COLORS
            .iter()
            .map(|c| (c.to_string(), c.to_string()))
            .collect()
    }

    fn tokens(&self) -> Vec<&'static str> {
        let mut t = vec![
            ".", ",", "!", ":", "|", "i", "saw", "a", "its", "color", "is", "the", "sa", "mo",
            "ti", "·ren", "·lav", "·dor",
        ];
        t.extend(SPAN_OBJECTS.iter().map(|(o, _)| *o));
        t.extend(SPAN_FILLERS);
        t
    }

    fn example(&self, rng: &mut PetRng, id: String, label: usize) -> Example {
        let objects: Vec<&str> = SPAN_OBJECTS
            .iter()
            .filter(|(_, c)| *c == label)
            .map(|(o, _)| *o)
            .collect();
        let obj = pick(rng, &objects);
        let text = format!("i saw a {obj} {} .", pick(rng, &SPAN_FILLERS));
        let mut others: Vec<usize> = (0..SPAN_COLORS.len()).filter(|&c| c != label).collect();
        shuffle(rng, &mut others);
        let mut candidates = vec![label, others[0], others[1]];
        shuffle(rng, &mut candidates);
        Example::new(id, [("text", text)])
            .with_label(label)
            .with_candidates(candidates)
    }

    fn sentence(&self, rng: &mut PetRng) -> String {
        let (obj, c) = SPAN_OBJECTS[bounded(rng, SPAN_OBJECTS.len())];
        match bounded(rng, 5) {
            0 | 1 => format!("i saw a {} {obj} .", SPAN_COLORS[c]),
            2 => format!("the {obj} is {} .", SPAN_COLORS[c]),
            3 => format!("the {obj} is {} .", pick(rng, &SPAN_FILLERS)),
            _ => format!(
                "its color is {} .",
                SPAN_COLORS[bounded(rng, SPAN_COLORS.len())]
            ),
        }
    }
}

fn grammar(kind: ToyKind) -> Box<dyn Grammar> {
    match kind {
        ToyKind::Sentiment => Box::new(Sentiment),
        ToyKind::PairEntailment => Box::new(PairEntailment),
        ToyKind::SpanChoice => Box::new(SpanChoice),
    }
}

/// Balanced labels in shuffled order.
fn balanced_labels(rng: &mut PetRng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    shuffle(rng, &mut labels);
    labels
}

pub fn make_toy_task(cfg: &ToyConfig) -> Result<ToyTask> {
    let g = grammar(cfg.kind);
    let spec = g.spec();
    let vocab = Vocabulary::from_tokens(DEFAULT_SPECIALS.iter().copied().chain(g.tokens()))?;
    let bundle = TaskBundle {
        spec: spec.clone(),
        patterns: g.patterns(),
        verbalizers: vec![("v".into(), g.verbalizer())],
    };
    let k = spec.num_labels();
    let split = |name: &str, n: usize, labeled: bool| -> Result<Dataset> {
        let mut rng = substream(cfg.seed, &format!("toy-{name}"));
        let labels = balanced_labels(&mut rng, n, k);
        let xs = labels
            .into_iter()
            .enumerate()
            .map(|(i, y)| {
                let mut x = g.example(&mut rng, format!("{name}-{i}"), y);
                if !labeled {
                    x.label = None;
                }
                x
            })
            .collect();
        Dataset::new(spec.name.clone(), name, xs)
    };
    let train = split("train", cfg.train, true)?;
    let dev = split("dev", cfg.dev, true)?;
    let test = split("test", cfg.test, true)?;
    let unlabeled = split("unlabeled", cfg.unlabeled, false)?;
    let mut rng = substream(cfg.seed, "toy-corpus");
    let corpus = (0..cfg.corpus).map(|_| g.sentence(&mut rng)).collect();
    Ok(ToyTask {
        bundle,
        vocab,
        train,
        dev,
        test,
        unlabeled,
        corpus,
    })
}

/// Ground-truth label of a generated example, recomputed from its text.
pub fn toy_truth(kind: ToyKind, x: &Example) -> Option<usize> {
    match kind {
        ToyKind::Sentiment => {
            let text = x.fields.get("text")?;
            let negated = text.split_whitespace().any(|w| SENT_NEGATORS.contains(&w));
            let positive = text.split_whitespace().find_map(|w| {
                if SENT_POS.contains(&w) {
                    Some(true)
                } else if SENT_NEG.contains(&w) {
                    Some(false)
                } else {
                    None
                }
            })?;
            Some(usize::from(positive != negated))
        }
        ToyKind::PairEntailment => {
            let p: Vec<&str> = x.fields.get("premise")?.split_whitespace().collect();
            let h: Vec<&str> = x.fields.get("hypothesis")?.split_whitespace().collect();
            let i = p.iter().position(|w| *w == h[1])?;
            Some(usize::from(ENT_BASES[shade_base(p[i + 2])?] == h[3]))
        }
        ToyKind::SpanChoice => {
            let text = x.fields.get("text")?;
            SPAN_OBJECTS
                .iter()
                .find(|(o, _)| text.split_whitespace().any(|w| w == *o))
                .map(|(_, c)| *c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ToyKind) -> ToyTask {
        make_toy_task(&ToyConfig {
            train: 40,
            dev: 10,
            test: 20,
            unlabeled: 30,
            corpus: 50,
            ..ToyConfig::new(kind, 1)
        })
        .unwrap()
    }

    #[test]
    fn sentiment_verbalizer_is_single_token() {
        let t = small(ToyKind::Sentiment);
        let pvps = t.bundle.pvps(&t.vocab).unwrap();
        assert_eq!(pvps.len(), 3);
        assert!(pvps.iter().all(|p| p.verbalizer.is_single_token()));
    }

    #[test]
    fn span_choice_colors_form_a_grid() {
        let t = small(ToyKind::SpanChoice);
        let pvps = t.bundle.pvps(&t.vocab).unwrap();
        let v: Vec<&[crate::TokenId]> = (0..9)
            .map(|l| pvps[0].verbalizer.tokens(l).unwrap())
            .collect();
        assert!(v.iter().all(|t| t.len() == 2));
        for (i, a) in v.iter().enumerate() {
            assert_eq!(a[0], v[i / 3 * 3][0]);
            assert_eq!(a[1], v[i % 3][1]);
        }
        for x in &t.train.examples {
            let c = x.candidates.as_ref().unwrap();
            assert_eq!(c.len(), 3);
            assert!(c.contains(&x.label.unwrap()));
        }
    }

    #[test]
    fn labels_follow_the_generating_rule() {
        for kind in [
            ToyKind::Sentiment,
            ToyKind::PairEntailment,
            ToyKind::SpanChoice,
        ] {
            let t = small(kind);
            for ds in [&t.train, &t.dev, &t.test] {
                for x in &ds.examples {
                    assert_eq!(toy_truth(kind, x), x.label, "{kind} {x:?}");
                }
                ds.validate(t.spec()).unwrap();
            }
            assert!(t.unlabeled.examples.iter().all(|x| x.label.is_none()));
            let counts = t.train.label_counts(t.spec().num_labels());
            assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_vocabulary() {
        for kind in [
            ToyKind::Sentiment,
            ToyKind::PairEntailment,
            ToyKind::SpanChoice,
        ] {
            let a = small(kind);
            let b = small(kind);
            assert_eq!(a.train, b.train);
            assert_eq!(a.corpus, b.corpus);
            let unk = a.vocab.unk_id();
            for s in a
                .corpus
                .iter()
                .chain(a.train.examples.iter().flat_map(|x| x.fields.values()))
            {
                assert!(!a.vocab.encode(s).contains(&unk), "{kind}: {s}");
            }
        }
    }
}
