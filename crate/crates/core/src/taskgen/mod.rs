//! Deterministic synthetic task suites in the `(X, Q, Y)` triple format.

pub mod vocab;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DmeaError, Result};
use crate::numerics::{derive_seed, seeded_rng, Rng};
pub use vocab::{TokenId, Vocab, EOS, PAD, SEP};
use vocab::{DomainLexicon, DOMAINS};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TemplatedNlg,
    Copy,
    Reverse,
    Sort,
    Arithmetic,
}

impl Family {
    pub const TRANSFORMS: [Family; 4] = [Family::Copy, Family::Reverse, Family::Sort, Family::Arithmetic];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::TemplatedNlg => "templated-nlg",
            Family::Copy => "copy",
            Family::Reverse => "reverse",
            Family::Sort => "sort",
            Family::Arithmetic => "arithmetic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Similar,
    Random,
    Long,
}

impl std::str::FromStr for SuiteKind {
    type Err = DmeaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similar" => Ok(SuiteKind::Similar),
            "random" => Ok(SuiteKind::Random),
            "long" => Ok(SuiteKind::Long),
            other => Err(DmeaError::InvalidInput(format!("unknown suite `{other}`"))),
        }
    }
}

impl SuiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SuiteKind::Similar => "similar",
            SuiteKind::Random => "random",
            SuiteKind::Long => "long",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub family: Family,
    pub instruction: Vec<TokenId>,
    pub generation_token: TokenId,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub lexicon: Vec<TokenId>,
}

/// Token layout `[X, sep, Q, sep, Y, eos]`, optionally prefixed by the
/// task's generation token. `tokens[..answer_start]` is the context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub tokens: Vec<TokenId>,
    pub answer_start: usize,
    pub with_generation_token: bool,
}

impl EncodedSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskgenConfig {
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Overrides the run seed for data generation when set.
    pub seed: Option<u64>,
}

impl Default for TaskgenConfig {
    fn default() -> Self {
        TaskgenConfig {
            train_size: 200,
            valid_size: 50,
            test_size: 100,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub kind: SuiteKind,
    pub seed: u64,
    pub tasks: Vec<TaskSpec>,
}

impl Suite {
    pub fn task(&self, id: &TaskId) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| &t.id == id)
    }

    /// Task order `n` (1-based) as a list of task ids.
    pub fn order(&self, n: usize) -> Result<Vec<TaskId>> {
        let perm = task_order(self.tasks.len(), n)?;
        Ok(perm.into_iter().map(|i| self.tasks[i].id.clone()).collect())
    }

    pub fn max_encoded_len(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.valid).chain(&t.test).map(move |s| encoded_len(s, t, true)))
            .max()
            .unwrap_or(0)
    }

    pub fn max_answer_len(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.valid).chain(&t.test).map(|s| s.y.len()))
            .max()
            .unwrap_or(0)
    }
}

const FIVE_TASK_ORDERS: [[usize; 5]; 4] = [[0, 1, 2, 3, 4], [1, 3, 0, 4, 2], [2, 0, 4, 1, 3], [4, 2, 3, 0, 1]];
const EIGHT_TASK_ORDERS: [[usize; 8]; 4] = [
    [0, 1, 2, 3, 4, 5, 6, 7],
    [3, 6, 0, 7, 1, 4, 2, 5],
    [5, 2, 7, 0, 3, 1, 6, 4],
    [7, 4, 1, 5, 6, 0, 3, 2],
];

pub fn task_order(num_tasks: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > 4 {
        return Err(DmeaError::InvalidInput(format!("task order {n} outside 1..=4")));
    }
    match num_tasks {
        5 => Ok(FIVE_TASK_ORDERS[n - 1].to_vec()),
        8 => Ok(EIGHT_TASK_ORDERS[n - 1].to_vec()),
        k if n == 1 => Ok((0..k).collect()),
        k => Err(DmeaError::InvalidInput(format!("no order {n} defined for {k} tasks"))),
    }
}

fn encoded_len(s: &Sample, t: &TaskSpec, with_g: bool) -> usize {
    s.x.len() + t.instruction.len() + s.y.len() + 3 + usize::from(with_g)
}

/// Context prefix `[X, sep, Q, sep]`.
pub fn context_tokens(x: &[TokenId], task: &TaskSpec) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(x.len() + task.instruction.len() + 2);
    out.extend_from_slice(x);
    out.push(SEP);
    out.extend_from_slice(&task.instruction);
    out.push(SEP);
    out
}

pub fn encode(sample: &Sample, task: &TaskSpec, with_generation_token: bool, max_len: usize) -> Result<EncodedSample> {
    encode_parts(
        &sample.x,
        &task.instruction,
        &sample.y,
        with_generation_token.then_some(task.generation_token),
        max_len,
    )
}

pub fn encode_parts(
    x: &[TokenId],
    q: &[TokenId],
    y: &[TokenId],
    generation_token: Option<TokenId>,
    max_len: usize,
) -> Result<EncodedSample> {
    if x.is_empty() || y.is_empty() || q.is_empty() {
        return Err(DmeaError::InvalidSample("X, Q and Y must be non-empty".into()));
    }
    let mut tokens = Vec::with_capacity(x.len() + q.len() + y.len() + 4);
    tokens.extend(generation_token);
    tokens.extend_from_slice(x);
    tokens.push(SEP);
    tokens.extend_from_slice(q);
    tokens.push(SEP);
    let answer_start = tokens.len();
    tokens.extend_from_slice(y);
    tokens.push(EOS);
    if tokens.len() > max_len {
        return Err(DmeaError::InvalidSample(format!(
            "encoded length {} exceeds maximum {max_len}",
            tokens.len()
        )));
    }
    Ok(EncodedSample {
        tokens,
        answer_start,
        with_generation_token: generation_token.is_some(),
    })
}

/// Splits an encoded sample back into `(X, Q, Y)`.
pub fn decode(encoded: &EncodedSample) -> Result<(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)> {
    let body = if encoded.with_generation_token {
        encoded.tokens.get(1..).unwrap_or(&[])
    } else {
        &encoded.tokens[..]
    };
    split_triple(body).ok_or_else(|| DmeaError::InvalidSample("malformed encoded sample".into()))
}

/// Parses `X sep Q sep Y eos`. Every part must be non-empty and free of
/// reserved tokens; anything after the first EOS is ignored.
pub fn split_triple(body: &[TokenId]) -> Option<(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)> {
    let end = body.iter().position(|&t| t == EOS)?;
    let body = &body[..end];
    let first = body.iter().position(|&t| t == SEP)?;
    let rest = &body[first + 1..];
    let second = rest.iter().position(|&t| t == SEP)?;
    let x = body[..first].to_vec();
    let q = rest[..second].to_vec();
    let y = rest[second + 1..].to_vec();
    let vocab = Vocab::shared();
    let clean = |part: &[TokenId]| !part.is_empty() && part.iter().all(|&t| !vocab.is_reserved(t));
    (clean(&x) && clean(&q) && clean(&y)).then_some((x, q, y))
}

/// Normalized token counts over every X, Q and Y token of the train split.
pub fn word_frequency(task: &TaskSpec, vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab_size];
    let mut total = 0.0;
    for s in &task.train {
        for &t in s.x.iter().chain(&task.instruction).chain(&s.y) {
            counts[t as usize] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

fn nlg_sample(d: &DomainLexicon, vocab: &Vocab, rng: &mut Rng) -> Sample {
    let entity = vocab.id(d.entities.choose(rng).unwrap()).unwrap();
    let slot_count = rng.random_range(1..=3);
    let mut slots: Vec<usize> = (0..3).collect();
    slots.shuffle(rng);
    slots.truncate(slot_count);
    slots.sort_unstable();

    let name = vocab.id("name").unwrap();
    let mut x = vec![name, entity];
    let mut y = vec![entity];
    y.extend(vocab.ids(&["is", "a"]));
    y.push(vocab.id(d.noun).unwrap());
    y.push(vocab.id("with").unwrap());
    for (i, &s) in slots.iter().enumerate() {
        let key = vocab.id(d.keys[s]).unwrap();
        let value = vocab.id(d.values[s].choose(rng).unwrap()).unwrap();
        x.extend([key, value]);
        if i > 0 {
            y.push(vocab.id("and").unwrap());
        }
        y.extend([key, value]);
    }
    Sample { x, y }
}

fn transform_sample(family: Family, vocab: &Vocab, rng: &mut Rng) -> Sample {
    let len = rng.random_range(3..=6);
    match family {
        Family::Arithmetic => {
            let digits: Vec<u32> = (0..len).map(|_| rng.random_range(0..10)).collect();
            let x = digits.iter().map(|d| vocab.id(&d.to_string()).unwrap()).collect();
            let y = digits.iter().map(|d| vocab.id(&((d + 1) % 10).to_string()).unwrap()).collect();
            Sample { x, y }
        }
        _ => {
            let letters: Vec<u8> = (0..len).map(|_| rng.random_range(b'A'..=b'Z')).collect();
            let mut out = letters.clone();
            match family {
                Family::Reverse => out.reverse(),
                Family::Sort => out.sort_unstable(),
                _ => {}
            }
            let ids = |v: &[u8]| v.iter().map(|&c| vocab.id(&(c as char).to_string()).unwrap()).collect();
            Sample {
                x: ids(&letters),
                y: ids(&out),
            }
        }
    }
}

enum TaskKind<'a> {
    Nlg(&'a DomainLexicon),
    Transform(Family),
}

fn build_task(kind: TaskKind<'_>, slot: usize, seed: u64, cfg: &TaskgenConfig) -> TaskSpec {
    let vocab = Vocab::shared();
    let mut rng = seeded_rng(seed);
    let wanted = cfg.train_size + cfg.valid_size + cfg.test_size;
    let mut seen = HashSet::with_capacity(wanted);
    let mut samples = Vec::with_capacity(wanted);
    let mut attempts = 0usize;
    while samples.len() < wanted {
        attempts += 1;
        assert!(attempts < wanted * 200, "generator cannot produce {wanted} unique samples");
        let s = match &kind {
            TaskKind::Nlg(d) => nlg_sample(d, vocab, &mut rng),
            TaskKind::Transform(f) => transform_sample(*f, vocab, &mut rng),
        };
        if seen.insert(s.clone()) {
            samples.push(s);
        }
    }
    let test = samples.split_off(cfg.train_size + cfg.valid_size);
    let valid = samples.split_off(cfg.train_size);
    let train = samples;

    let (id, family, instruction, lexicon) = match kind {
        TaskKind::Nlg(d) => (
            d.name.to_string(),
            Family::TemplatedNlg,
            vec![vocab.id("describe").unwrap(), vocab.id(d.tag).unwrap()],
            d.words().map(|w| vocab.id(w).unwrap()).collect(),
        ),
        TaskKind::Transform(f) => {
            let (verb, object, lex) = match f {
                Family::Arithmetic => ("increment", "digits", vocab::digit_words()),
                Family::Copy => ("copy", "letters", vocab::letter_words()),
                Family::Reverse => ("reverse", "letters", vocab::letter_words()),
                Family::Sort => ("sort", "letters", vocab::letter_words()),
                Family::TemplatedNlg => unreachable!(),
            };
            (
                f.as_str().to_string(),
                f,
                vec![vocab.id(verb).unwrap(), vocab.id(object).unwrap()],
                lex.iter().map(|w| vocab.id(w).unwrap()).collect(),
            )
        }
    };
    TaskSpec {
        id: TaskId(id.clone()),
        name: id,
        family,
        instruction,
        generation_token: vocab.generation_token(slot),
        train,
        valid,
        test,
        lexicon,
    }
}

pub fn make_similar_suite(seed: u64) -> Suite {
    make_similar_suite_with(seed, &TaskgenConfig::default())
}

pub fn make_similar_suite_with(seed: u64, cfg: &TaskgenConfig) -> Suite {
    let names = ["pub", "restaurant", "hotel", "tv", "laptop"];
    let tasks = names
        .iter()
        .enumerate()
        .map(|(slot, n)| {
            let d = DOMAINS.iter().find(|d| d.name == *n).unwrap();
            build_task(TaskKind::Nlg(d), slot, derive_seed(seed, &[1, slot as u64]), cfg)
        })
        .collect();
    Suite {
        kind: SuiteKind::Similar,
        seed,
        tasks,
    }
}

pub fn make_random_suite(seed: u64) -> Suite {
    make_random_suite_with(seed, &TaskgenConfig::default())
}

/// Two slot-to-text domains plus three distinct transform families,
/// laid out as `[nlg, transform, transform, nlg, transform]`.
pub fn make_random_suite_with(seed: u64, cfg: &TaskgenConfig) -> Suite {
    let mut rng = seeded_rng(derive_seed(seed, &[2]));
    let mut domains: Vec<&DomainLexicon> = DOMAINS.iter().collect();
    domains.shuffle(&mut rng);
    let mut families = Family::TRANSFORMS.to_vec();
    families.shuffle(&mut rng);

    let layout = [
        TaskKind::Nlg(domains[0]),
        TaskKind::Transform(families[0]),
        TaskKind::Transform(families[1]),
        TaskKind::Nlg(domains[1]),
        TaskKind::Transform(families[2]),
    ];
    let tasks = layout
        .into_iter()
        .enumerate()
        .map(|(slot, kind)| build_task(kind, slot, derive_seed(seed, &[2, slot as u64]), cfg))
        .collect();
    Suite {
        kind: SuiteKind::Random,
        seed,
        tasks,
    }
}

pub fn make_long_suite_with(seed: u64, cfg: &TaskgenConfig) -> Suite {
    let pick = |n: &str| DOMAINS.iter().find(|d| d.name == n).unwrap();
    let layout = [
        TaskKind::Nlg(pick("pub")),
        TaskKind::Transform(Family::Copy),
        TaskKind::Nlg(pick("restaurant")),
        TaskKind::Nlg(pick("hotel")),
        TaskKind::Transform(Family::Reverse),
        TaskKind::Nlg(pick("tv")),
        TaskKind::Transform(Family::Arithmetic),
        TaskKind::Nlg(pick("laptop")),
    ];
    let tasks = layout
        .into_iter()
        .enumerate()
        .map(|(slot, kind)| build_task(kind, slot, derive_seed(seed, &[3, slot as u64]), cfg))
        .collect();
    Suite {
        kind: SuiteKind::Long,
        seed,
        tasks,
    }
}

pub fn make_suite(kind: SuiteKind, seed: u64, cfg: &TaskgenConfig) -> Suite {
    match kind {
        SuiteKind::Similar => make_similar_suite_with(seed, cfg),
        SuiteKind::Random => make_random_suite_with(seed, cfg),
        SuiteKind::Long => make_long_suite_with(seed, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task: String,
    pub x: String,
    pub q: String,
    pub y: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTask {
    pub id: String,
    pub family: Family,
    pub generation_token: String,
    pub instruction: String,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub suite: SuiteKind,
    pub seed: u64,
    pub order: Vec<String>,
    pub tasks: Vec<ManifestTask>,
}

pub fn manifest(suite: &Suite, order: &[TaskId]) -> SuiteManifest {
    let vocab = Vocab::shared();
    SuiteManifest {
        suite: suite.kind,
        seed: suite.seed,
        order: order.iter().map(|t| t.0.clone()).collect(),
        tasks: suite
            .tasks
            .iter()
            .map(|t| ManifestTask {
                id: t.id.0.clone(),
                family: t.family,
                generation_token: vocab.word(t.generation_token).to_string(),
                instruction: vocab.render(&t.instruction),
                train: t.train.len(),
                valid: t.valid.len(),
                test: t.test.len(),
            })
            .collect(),
    }
}

pub fn write_jsonl<W: Write>(task: &TaskSpec, samples: &[Sample], mut out: W) -> Result<()> {
    let vocab = Vocab::shared();
    for s in samples {
        let rec = SampleRecord {
            task: task.id.0.clone(),
            x: vocab.render(&s.x),
            q: vocab.render(&task.instruction),
            y: vocab.render(&s.y),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<(SampleRecord, Sample)>> {
    let vocab = Vocab::shared();
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)?;
        let sample = Sample {
            x: vocab.parse(&rec.x)?,
            y: vocab.parse(&rec.y)?,
        };
        out.push((rec, sample));
    }
    Ok(out)
}

/// Writes `<task>.{train,valid,test}.jsonl` plus `manifest.json`.
pub fn export_suite(suite: &Suite, order: &[TaskId], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in &suite.tasks {
        for (split, samples) in [("train", &t.train), ("valid", &t.valid), ("test", &t.test)] {
            let f = std::fs::File::create(dir.join(format!("{}.{split}.jsonl", t.id)))?;
            write_jsonl(t, samples, std::io::BufWriter::new(f))?;
        }
    }
    let f = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest(suite, order))?;
    Ok(())
}
