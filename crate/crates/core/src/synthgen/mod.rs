//! Synthetic QA data: teacher-seeded tuples, exemplar-conditioned bootstrap
//! candidates, non-matching tuples with refusal answers, and mixing.

pub mod prompts;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use self::prompts::{parse_tagged, Exemplar, Prompt};
use crate::corpus::{sample_segment, ChunkId, IndexTriplet, Segment, SegmentId, Tier};
use crate::error::{PgtError, Result};
use crate::jsonio::{parse_line, read_lines, write_jsonl};
use crate::lmclient::{Completion, CompletionRequest, LmClient, ModelTag};
use crate::retriever::{Retriever, Scope};
use crate::tokenizer::{text_starts_with_refusal, TextTokenizer, TokenId, REFUSAL};

pub const DATASET_SCHEMA: &str = "pgt.qatuple";
pub const DATASET_VERSION: u32 = 1;

#[allow(clippy::upper_case_acronyms)]
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Format {
    EX,
    AB,
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::EX => "EX",
            Format::AB => "AB",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SeedTeacher,
    Bootstrap,
    Nonmatching,
}

/// A passage reference at one index tier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "tier", content = "id")]
pub enum PassageRef {
    I1(SegmentId),
    I2(SegmentId),
    I3(ChunkId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QATuple {
    pub id: String,
    pub passage_segment_ids: Vec<PassageRef>,
    pub question: String,
    pub answer: String,
    pub format: Format,
    pub matching: bool,
    pub rationale: Option<String>,
    pub provenance: Provenance,
    pub gen_logprob: Option<f64>,
    pub filter_scores: BTreeMap<String, f64>,
}

impl QATuple {
    pub fn validate(&self) -> Result<()> {
        if self.question.trim().is_empty() {
            return Err(PgtError::InvalidInput(format!("tuple {}: empty question", self.id)));
        }
        if !self.matching && !text_starts_with_refusal(&self.answer) {
            return Err(PgtError::InvalidInput(format!("tuple {}: non-matching answer must start with the refusal", self.id)));
        }
        Ok(())
    }

    pub fn i1_segments(&self) -> Vec<SegmentId> {
        self.passage_segment_ids.iter().filter_map(|r| if let PassageRef::I1(s) = r { Some(*s) } else { None }).collect()
    }

    pub fn i2_segments(&self) -> Vec<SegmentId> {
        self.passage_segment_ids.iter().filter_map(|r| if let PassageRef::I2(s) = r { Some(*s) } else { None }).collect()
    }

    pub fn chunk_refs(&self) -> Vec<ChunkId> {
        self.passage_segment_ids.iter().filter_map(|r| if let PassageRef::I3(c) = r { Some(*c) } else { None }).collect()
    }

    /// I3 chunks making up the training-time passage.
    pub fn passage_chunks(&self, index: &IndexTriplet) -> Vec<ChunkId> {
        let direct = self.chunk_refs();
        if !direct.is_empty() {
            return direct;
        }
        self.i2_segments().iter().flat_map(|s| index.chunks_of(*s).iter().copied()).collect()
    }

    /// I2 segments the passage lives in.
    pub fn passage_segments(&self, index: &IndexTriplet) -> BTreeSet<SegmentId> {
        self.passage_chunks(index).iter().map(|c| index.chunk(*c).parent_segment_id).collect()
    }

    /// Training-time passage tokens in reference order.
    pub fn passage_tokens(&self, index: &IndexTriplet) -> Vec<TokenId> {
        let direct = self.chunk_refs();
        if !direct.is_empty() {
            return direct.iter().flat_map(|c| index.chunk(*c).token_ids.iter().copied()).collect();
        }
        self.i2_segments().iter().flat_map(|s| index.i2_segment(*s).token_ids.iter().copied()).collect()
    }

    /// Text of the provenance passage (I1 when present).
    pub fn passage_text(&self, index: &IndexTriplet) -> String {
        match self.i1_segments().first() {
            Some(s) => index.text(&index.segment(Tier::I1, *s).token_ids),
            None => index.text(&self.passage_tokens(index)),
        }
    }

    /// Retrieval scope for training and probing: the whole index for
    /// matching tuples, the passage's own segments otherwise.
    pub fn retrieval_scope(&self, index: &IndexTriplet) -> Option<BTreeSet<SegmentId>> {
        (!self.matching).then(|| self.passage_segments(index))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Seed tuples per format (or in total, see `per_format`).
    pub y: usize,
    /// Bootstrap candidates.
    pub z: usize,
    /// Exemplars per bootstrap prompt.
    pub n: usize,
    /// Retrieval depth when assembling non-matching passages.
    pub k_prime: usize,
    /// Non-matching to matching ratio.
    pub rho: f64,
    pub seed: u64,
    /// `true`: `y` seed tuples for each format; `false`: `y` in total.
    pub per_format: bool,
    /// Allow dropping matching tuples when non-matching ones run short.
    pub allow_subsample: bool,
    pub max_tokens: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { y: 50, z: 500, n: 3, k_prime: 10, rho: 1.0, seed: 0, per_format: true, allow_subsample: false, max_tokens: 128 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.y == 0 || self.z == 0 || self.n == 0 || self.k_prime == 0 {
            return Err(PgtError::Config("synthgen: y, z, n and k_prime must be >= 1".into()));
        }
        if !(self.rho >= 0.0) {
            return Err(PgtError::Config("synthgen: rho must be >= 0".into()));
        }
        Ok(())
    }

    /// Seed counts per format.
    pub fn seed_counts(&self) -> [(Format, usize); 2] {
        if self.per_format {
            [(Format::EX, self.y), (Format::AB, self.y)]
        } else {
            [(Format::EX, self.y - self.y / 2), (Format::AB, self.y / 2)]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tuples: Vec<QATuple>,
    /// Completions that stayed unparseable after one retry.
    pub dropped: usize,
    /// Prompts sent, in order (first attempts only).
    pub prompts: Vec<String>,
}

/// Picks bootstrap passages.
pub trait PassageStrategy {
    fn pick<'a>(&self, index: &'a IndexTriplet, rng: &mut ChaCha8Rng) -> Result<&'a Segment>;
}

pub struct UniformPassages;

impl PassageStrategy for UniformPassages {
    fn pick<'a>(&self, index: &'a IndexTriplet, rng: &mut ChaCha8Rng) -> Result<&'a Segment> {
        sample_segment(index, Tier::I1, rng)
    }
}

/// Passage references for an I1 segment: itself plus the I2 segments it overlaps.
pub fn refs_for_i1(index: &IndexTriplet, seg: &Segment) -> Vec<PassageRef> {
    let mut refs = vec![PassageRef::I1(seg.id)];
    refs.extend(index.i2_overlapping(&seg.doc_id, seg.char_span).into_iter().map(PassageRef::I2));
    refs
}

struct Job {
    id: String,
    format: Format,
    refs: Vec<PassageRef>,
    request: CompletionRequest,
}

fn parse_qa(c: &Completion) -> Option<(String, String, Option<String>)> {
    let t = parse_tagged(&c.text);
    Some((t.question?, t.answer?, t.rationale))
}

/// Sends every job, retries unparseable replies once, and drops the rest.
fn run_jobs(client: &LmClient, jobs: Vec<Job>, provenance: Provenance) -> Result<Generated> {
    let total = jobs.len();
    let reqs: Vec<CompletionRequest> = jobs.iter().map(|j| j.request.clone()).collect();
    let first = client.complete_many(&reqs);
    let mut parsed: Vec<Option<(String, String, Option<String>, Option<f64>)>> = Vec::with_capacity(total);
    let mut retry = Vec::new();
    for (i, r) in first.into_iter().enumerate() {
        match r? {
            c => match parse_qa(&c) {
                Some((q, a, rat)) => parsed.push(Some((q, a, rat, c.logprob))),
                None => {
                    parsed.push(None);
                    retry.push(i);
                }
            },
        }
    }
    let retry_reqs: Vec<CompletionRequest> = retry
        .iter()
        .map(|&i| {
            let mut r = reqs[i].clone();
            r.metadata.insert("attempt".into(), "2".into());
            r.temperature = (r.temperature + 0.5).min(1.0);
            r
        })
        .collect();
    for (&i, r) in retry.iter().zip(client.complete_many(&retry_reqs)) {
        let c = r?;
        parsed[i] = parse_qa(&c).map(|(q, a, rat)| (q, a, rat, c.logprob));
    }
    let dropped = parsed.iter().filter(|p| p.is_none()).count();
    if total > 0 && dropped * 2 > total {
        return Err(PgtError::ParseFailures { failed: dropped, total });
    }
    let prompts = jobs.iter().map(|j| j.request.prompt.clone()).collect();
    let tuples = jobs
        .into_iter()
        .zip(parsed)
        .filter_map(|(j, p)| {
            let (question, answer, rationale, gen_logprob) = p?;
            Some(QATuple {
                id: j.id,
                passage_segment_ids: j.refs,
                question,
                answer,
                format: j.format,
                matching: true,
                rationale,
                provenance,
                gen_logprob,
                filter_scores: BTreeMap::new(),
            })
        })
        .collect();
    Ok(Generated { tuples, dropped, prompts })
}

fn request(prompt: String, tag: ModelTag, max_tokens: usize) -> CompletionRequest {
    CompletionRequest { max_tokens, ..CompletionRequest::new(prompt, tag) }
}

/// `y` teacher-written tuples of one format over uniformly drawn I1 passages.
pub fn generate_seed_set(index: &IndexTriplet, teacher: &LmClient, y: usize, format: Format, seed: u64) -> Result<Generated> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if format == Format::EX { 0x5eed_0e } else { 0x5eed_ab });
    let mut jobs = Vec::with_capacity(y);
    for i in 0..y {
        let seg = sample_segment(index, Tier::I1, &mut rng)?;
        let prompt = Prompt::Seed { format, passage: index.text(&seg.token_ids) }.render();
        jobs.push(Job {
            id: format!("seed-{format}-{i:04}"),
            format,
            refs: refs_for_i1(index, seg),
            request: request(prompt, ModelTag::SeedTeacher, 128),
        });
    }
    run_jobs(teacher, jobs, Provenance::SeedTeacher)
}

/// `z` candidates, each prompted with `n` exemplars drawn from `seeds`
/// without replacement; formats alternate EX, AB, EX, ...
pub fn bootstrap_generate(
    seeds: &[QATuple],
    index: &IndexTriplet,
    teacher: &LmClient,
    z: usize,
    n: usize,
    seed: u64,
    strategy: &dyn PassageStrategy,
) -> Result<Generated> {
    if seeds.len() < n {
        return Err(PgtError::InvalidInput(format!("bootstrap needs at least {n} seed tuples, found {}", seeds.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007);
    let mut jobs = Vec::with_capacity(z);
    for i in 0..z {
        let format = if i % 2 == 0 { Format::EX } else { Format::AB };
        let exemplars = sample(&mut rng, seeds.len(), n)
            .into_iter()
            .map(|k| {
                let t = &seeds[k];
                Exemplar { passage: t.passage_text(index), question: t.question.clone(), answer: t.answer.clone() }
            })
            .collect();
        let seg = strategy.pick(index, &mut rng)?;
        let prompt = Prompt::Bootstrap { format, exemplars, passage: index.text(&seg.token_ids) }.render();
        jobs.push(Job {
            id: format!("boot-{i:05}"),
            format,
            refs: refs_for_i1(index, seg),
            request: request(prompt, ModelTag::BootstrapTeacher, 128),
        });
    }
    run_jobs(teacher, jobs, Provenance::Bootstrap)
}

/// Builds a non-matching partner for `t` from retrieved chunks outside its
/// source passage. `budget` caps the passage length in tokens.
pub fn make_nonmatching(t: &QATuple, retriever: &Retriever, k_prime: usize, budget: usize, teacher: &LmClient) -> Result<QATuple> {
    if !t.matching {
        return Err(PgtError::InvalidInput(format!("tuple {} is already non-matching", t.id)));
    }
    let index = retriever.index;
    let q = index.tokenizer.encode(&t.question);
    let top = retriever.retrieve_top_chunks(&q, k_prime, Scope::All)?;
    let source = t.passage_segments(index);
    let survivors: Vec<ChunkId> = top.results.iter().filter(|r| !source.contains(&r.parent_segment_id)).map(|r| r.chunk_id).collect();
    if survivors.is_empty() {
        return Err(PgtError::Config(format!(
            "all {k_prime} retrieved chunks for tuple {} belong to its source passage; increase k_prime",
            t.id
        )));
    }
    let mut used = Vec::new();
    let mut tokens: Vec<TokenId> = Vec::new();
    for c in survivors {
        let ct = &index.chunk(c).token_ids;
        if !used.is_empty() && tokens.len() + ct.len() > budget {
            break;
        }
        tokens.extend(ct.iter().take(budget.saturating_sub(tokens.len())));
        used.push(c);
    }
    let prompt = Prompt::NonMatching { passage: index.text(&tokens), question: t.question.clone() }.render();
    let c = teacher.complete(&request(prompt, ModelTag::SeedTeacher, 128))?;
    let tagged = parse_tagged(&c.text);
    let answer = tagged.answer.unwrap_or_default();
    if !text_starts_with_refusal(&answer) {
        return Err(PgtError::InvalidInput(format!("teacher did not refuse for the non-matching passage of tuple {}", t.id)));
    }
    let rationale = tagged.rationale;
    let answer = match &rationale {
        Some(r) => format!("{REFUSAL} . {r}"),
        None => REFUSAL.to_string(),
    };
    Ok(QATuple {
        id: format!("{}-nm", t.id),
        passage_segment_ids: used.into_iter().map(PassageRef::I3).collect(),
        question: t.question.clone(),
        answer,
        format: t.format,
        matching: false,
        rationale,
        provenance: Provenance::Nonmatching,
        gen_logprob: c.logprob,
        filter_scores: BTreeMap::new(),
    })
}

/// All matching tuples plus `round(rho * |matching|)` non-matching ones,
/// shuffled.
pub fn mix_dataset(matching: &[QATuple], nonmatching: &[QATuple], rho: f64, seed: u64, allow_subsample: bool) -> Result<Vec<QATuple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x31c);
    let mut m: Vec<QATuple> = matching.to_vec();
    let mut need = (rho * m.len() as f64).round() as usize;
    if need > nonmatching.len() {
        if !allow_subsample {
            return Err(PgtError::InvalidInput(format!(
                "rho={rho} needs {need} non-matching tuples but only {} exist",
                nonmatching.len()
            )));
        }
        let keep = ((nonmatching.len() as f64 / rho).floor() as usize).min(m.len());
        let mut idx = sample(&mut rng, m.len(), keep).into_vec();
        idx.sort_unstable();
        m = idx.into_iter().map(|i| matching[i].clone()).collect();
        need = ((rho * m.len() as f64).round() as usize).min(nonmatching.len());
    }
    let mut idx = sample(&mut rng, nonmatching.len(), need).into_vec();
    idx.sort_unstable();
    m.extend(idx.into_iter().map(|i| nonmatching[i].clone()));
    m.shuffle(&mut rng);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub version: u32,
}

pub fn write_dataset(path: &Path, tuples: &[QATuple]) -> Result<()> {
    let header = DatasetHeader { schema: DATASET_SCHEMA.into(), version: DATASET_VERSION };
    write_jsonl(path, Some(&header), tuples)
}

pub fn read_dataset(path: &Path) -> Result<Vec<QATuple>> {
    let lines = read_lines(path)?;
    let Some(first) = lines.first() else {
        return Err(PgtError::InvalidInput(format!("{}: missing dataset header", path.display())));
    };
    let header: DatasetHeader = parse_line(path, 0, first)?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(PgtError::InvalidInput(format!("{}: unsupported dataset schema {} v{}", path.display(), header.schema, header.version)));
    }
    lines[1..].iter().enumerate().map(|(i, l)| parse_line(path, i + 1, l)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{build_indexes, Document, IndexConfig};
    use crate::lmclient::{Cache, ClientConfig, Fallback, ScriptedStub};
    use crate::retriever::{RetrieverConfig, RetrieverParams};

    pub(crate) fn toy_index() -> IndexTriplet {
        let names = ["zorvath", "kelmira", "ostrand", "pellivar"];
        let docs: Vec<Document> = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                Document::new(
                    format!("doc{i}"),
                    format!("the color of {n} is c{i} . the mascot of {n} is m{i} . the river of {n} is r{i} ."),
                )
            })
            .collect();
        let cfg = IndexConfig { i1_max_tokens: 64, i2_max_tokens: 32, chunk_max_tokens: 16, ..Default::default() };
        build_indexes(&docs, &cfg).unwrap()
    }

    fn template_client() -> LmClient {
        LmClient::new(Box::new(ScriptedStub::new(Fallback::Template)), Cache::in_memory(), ClientConfig::default())
    }

    #[test]
    fn single_scripted_seed() {
        let index = toy_index();
        let mut rng = ChaCha8Rng::seed_from_u64(1 ^ 0x5eed_0e);
        let seg = sample_segment(&index, Tier::I1, &mut rng).unwrap();
        let prompt = Prompt::Seed { format: Format::EX, passage: index.text(&seg.token_ids) }.render();
        let mut stub = ScriptedStub::new(Fallback::Error);
        stub.insert(ModelTag::SeedTeacher, &prompt, "QUESTION: what is the color of zorvath ?\nANSWER: c0", None);
        let client = LmClient::new(Box::new(stub), Cache::in_memory(), ClientConfig::default());
        let out = generate_seed_set(&index, &client, 1, Format::EX, 1).unwrap();
        assert_eq!(out.tuples.len(), 1);
        assert_eq!(out.tuples[0].format, Format::EX);
        assert!(out.tuples[0].matching);
    }

    #[test]
    fn malformed_completion_is_dropped_and_counted() {
        let index = toy_index();
        let mut stub = ScriptedStub::new(Fallback::Template);
        let mut rng = ChaCha8Rng::seed_from_u64(3 ^ 0x5eed_0e);
        let seg = sample_segment(&index, Tier::I1, &mut rng).unwrap();
        let prompt = Prompt::Seed { format: Format::EX, passage: index.text(&seg.token_ids) }.render();
        stub.insert(ModelTag::SeedTeacher, &prompt, "sorry, no idea", None);
        let client = LmClient::new(Box::new(stub), Cache::in_memory(), ClientConfig::default());
        let out = generate_seed_set(&index, &client, 1, Format::EX, 3).unwrap_err();
        assert!(matches!(out, PgtError::ParseFailures { failed: 1, total: 1 }));
    }

    #[test]
    fn seed_passages_reproduce() {
        let index = toy_index();
        let a = generate_seed_set(&index, &template_client(), 10, Format::AB, 5).unwrap();
        let b = generate_seed_set(&index, &template_client(), 10, Format::AB, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bootstrap_with_all_seeds_embeds_each_once() {
        let index = toy_index();
        let client = template_client();
        let seeds = generate_seed_set(&index, &client, 4, Format::EX, 2).unwrap().tuples;
        let out = bootstrap_generate(&seeds, &index, &client, 3, seeds.len(), 7, &UniformPassages).unwrap();
        for p in &out.prompts {
            let Some(Prompt::Bootstrap { exemplars, .. }) = Prompt::parse(p) else { panic!("not a bootstrap prompt") };
            let mut qs: Vec<&str> = exemplars.iter().map(|e| e.question.as_str()).collect();
            qs.sort();
            let mut want: Vec<&str> = seeds.iter().map(|t| t.question.as_str()).collect();
            want.sort();
            assert_eq!(qs, want);
        }
        assert!(out.tuples.iter().all(|t| t.provenance == Provenance::Bootstrap));
    }

    #[test]
    fn nonmatching_excludes_source_segments() {
        let index = toy_index();
        let client = template_client();
        let params = RetrieverParams::init(index.tokenizer.vocab_size(), 16, 0);
        let retriever = Retriever::new(&index, &params, &RetrieverConfig::default());
        let seg = &index.i1[0];
        let t = QATuple {
            id: "t0".into(),
            passage_segment_ids: refs_for_i1(&index, seg),
            question: "what is the color of zorvath ?".into(),
            answer: "c0".into(),
            format: Format::EX,
            matching: true,
            rationale: None,
            provenance: Provenance::SeedTeacher,
            gen_logprob: None,
            filter_scores: BTreeMap::new(),
        };
        let nm = make_nonmatching(&t, &retriever, 5, 64, &client).unwrap();
        assert!(!nm.matching);
        assert!(nm.answer.starts_with(REFUSAL));
        let source = t.passage_segments(&index);
        assert!(nm.chunk_refs().iter().all(|c| !source.contains(&index.chunk(*c).parent_segment_id)));
        nm.validate().unwrap();
    }

    fn dummy(id: usize, matching: bool) -> QATuple {
        QATuple {
            id: format!("{id}"),
            passage_segment_ids: vec![],
            question: "q ?".into(),
            answer: if matching { "a".into() } else { REFUSAL.into() },
            format: Format::EX,
            matching,
            rationale: None,
            provenance: if matching { Provenance::SeedTeacher } else { Provenance::Nonmatching },
            gen_logprob: None,
            filter_scores: BTreeMap::new(),
        }
    }

    #[test]
    fn mixing_ratios() {
        let m: Vec<_> = (0..10).map(|i| dummy(i, true)).collect();
        let nm: Vec<_> = (100..115).map(|i| dummy(i, false)).collect();
        let count = |v: &[QATuple]| (v.iter().filter(|t| t.matching).count(), v.iter().filter(|t| !t.matching).count());
        assert_eq!(count(&mix_dataset(&m, &nm, 0.0, 1, false).unwrap()), (10, 0));
        assert_eq!(count(&mix_dataset(&m, &nm, 1.0, 1, false).unwrap()), (10, 10));
        assert_eq!(count(&mix_dataset(&m, &nm, 0.5, 1, false).unwrap()), (10, 5));
        assert!(mix_dataset(&m, &nm[..3], 1.0, 1, false).is_err());
        assert_eq!(count(&mix_dataset(&m, &nm[..3], 1.0, 1, true).unwrap()), (3, 3));
    }

    #[test]
    fn dataset_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let rows = vec![dummy(1, true), dummy(2, false)];
        write_dataset(&path, &rows).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), rows);
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("{\"schema\":\"pgt.qatuple\""));
    }
}
