//! Phase orchestration over a work directory.
//!
//! Every phase reads its inputs through the manifest, writes its outputs
//! under the work directory and records both with content hashes. Phases
//! two to four live under `iter{k}/` for outer iteration `k` (1-based).

pub mod config;
pub mod evaluate;
pub mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{align, DatasetPrompts, PipelinePrompts, PromptSampler, PromptSource};
use crate::calibrate::{build_calibration_set, ece_of, rescore, train_calibration, CalibExample, ReliabilityReport};
use crate::corpus::{build_indexes, read_corpus_dir, IndexTriplet, SegmentId};
use crate::error::{PgtError, Result};
use crate::filter::{accepted_tuples, filter_candidates, Answerer, AnswererChoice, FilterReport, RagAnswerer, TeacherAnswerer};
use crate::generator::{indirect_correct_probability, GeneratorCheckpoint, GeneratorParams};
use crate::jsonio::{read_json, write_json, write_jsonl};
use crate::lmclient::{Backend, Cache, LiveBackend, LmClient, ModelTag, ScriptedStub};
use crate::retriever::ict::ict_pretrain;
use crate::retriever::{init_for_index, Retriever, RetrieverCheckpoint, RetrieverParams, Scope};
use crate::reward::{assemble_composites, pair_by_id, train_reward, RewardCheckpoint, RewardParams, CHECKPOINT_VERSION as REWARD_VERSION};
use crate::sft::{beam_decode, parallel_map, SftExample, SftTrainer};
use crate::synthgen::{bootstrap_generate, generate_seed_set, make_nonmatching, mix_dataset, read_dataset, write_dataset, QATuple, UniformPassages};
use crate::tokenizer::{TextTokenizer, TokenId};

use config::{BackendKind, PipelineConfig};
use evaluate::{evaluate, EvalContext, EvalMetrics};
use manifest::{log_timing, relative, sha256_file, FileRef, PhaseRecord, RunManifest, WorkLock, RESOLVED_CONFIG_FILE, TIMINGS_FILE};

pub const INDEX_FILE: &str = "index.json";
pub const ICT_FILE: &str = "retriever_ict.json";

/// Commands in pipeline order.
pub const PHASES: [&str; 11] = ["ingest", "ict", "seed", "bootstrap", "filter", "nonmatch", "sft", "reward", "align", "calibrate", "eval"];

pub fn iter_file(k: usize, name: &str) -> String {
    format!("iter{k}/{name}")
}

type Metrics = BTreeMap<String, f64>;

/// What `answer` prints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutput {
    pub question: String,
    pub answer: String,
    pub evidence: Vec<SegmentId>,
    pub confidence: f64,
    pub iteration: usize,
    pub generator: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Model right after supervised fine-tuning.
    pub sft: EvalMetrics,
    /// Model after alignment and calibration.
    #[serde(rename = "final")]
    pub final_: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub examples: usize,
    pub train: usize,
    pub heldout: usize,
    /// Set when the training part has a single label; the generator is
    /// then passed through unchanged.
    pub single_class: bool,
    pub losses: Vec<f64>,
    pub before: Option<ReliabilityReport>,
    pub after: Option<ReliabilityReport>,
}

fn tag_ids(mut tuples: Vec<QATuple>, k: usize) -> Vec<QATuple> {
    for t in &mut tuples {
        t.id = format!("i{k}-{}", t.id);
    }
    tuples
}

/// Stable split of `n` items into (eval, calib, train) index lists.
fn three_way(n: usize, eval: f64, calib: f64, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let ne = (n as f64 * eval).round() as usize;
    let nc = ((n as f64 * calib).round() as usize).min(n - ne);
    let mut e = idx[..ne].to_vec();
    let mut c = idx[ne..ne + nc].to_vec();
    let mut t = idx[ne + nc..].to_vec();
    e.sort_unstable();
    c.sort_unstable();
    t.sort_unstable();
    (e, c, t)
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub root: PathBuf,
    manifest: RunManifest,
    _lock: WorkLock,
}

impl Pipeline {
    /// Locks the work directory, stores the resolved config and loads the
    /// manifest. A changed config discards artifacts of the previous one.
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let root = cfg.global.work_dir.clone();
        let lock = WorkLock::acquire(&root)?;
        let hash = cfg.hash()?;
        let p = root.join(manifest::MANIFEST_FILE);
        if p.exists() {
            let old: RunManifest = read_json(&p)?;
            if old.config_hash != hash {
                for rel in old.phases.iter().flat_map(|r| r.outputs.iter().map(|f| f.path.clone())) {
                    let _ = fs::remove_file(root.join(rel));
                }
            }
        }
        let mut manifest = RunManifest::open(&root, &hash)?;
        fs::write(root.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?).map_err(|e| PgtError::io(&root, e))?;
        manifest.add_support(RESOLVED_CONFIG_FILE);
        manifest.add_support(TIMINGS_FILE);
        manifest.save(&root)?;
        Ok(Self { cfg, root, manifest, _lock: lock })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Path of an artifact that an earlier `command` must have produced.
    fn require(&self, rel: &str, command: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if self.manifest.producer(rel).is_none() || !p.exists() {
            return Err(PgtError::Prerequisite { command: command.to_string(), detail: format!("{rel} is missing") });
        }
        Ok(p)
    }

    fn file_ref(&self, rel: &str) -> Result<FileRef> {
        Ok(FileRef { path: rel.to_string(), sha256: sha256_file(&self.path(rel))? })
    }

    fn finish(&mut self, phase: &str, k: usize, inputs: &[String], outputs: &[String], metrics: Metrics, started: Instant) -> Result<()> {
        let rec = PhaseRecord {
            phase: phase.to_string(),
            iteration: k,
            inputs: inputs.iter().map(|r| self.file_ref(r)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|r| self.file_ref(r)).collect::<Result<_>>()?,
            metrics,
        };
        self.manifest.record(rec);
        self.manifest.save(&self.root)?;
        log_timing(&self.root, phase, k, started.elapsed().as_secs_f64())
    }

    /// Seed for `name` in iteration `k`, mixed with a module-level seed.
    fn seed(&self, name: &str, k: usize, module: u64) -> u64 {
        self.cfg.sub_seed(&format!("{name}/{k}")) ^ module
    }

    fn teacher(&mut self) -> Result<LmClient> {
        let lm = &self.cfg.lmclient;
        let backend: Box<dyn Backend> = match lm.backend {
            BackendKind::Stub => match &lm.stub_path {
                Some(p) => {
                    if !p.exists() {
                        return Err(PgtError::Config(format!("lmclient.stub_path {} does not exist", p.display())));
                    }
                    Box::new(ScriptedStub::load(p, lm.fallback)?)
                }
                None => Box::new(ScriptedStub::new(lm.fallback)),
            },
            BackendKind::Live => Box::new(LiveBackend::from_env(lm.live.clone())?),
        };
        let cache_path = self.root.join(&lm.cache_path);
        let cache = Cache::open(&cache_path)?;
        if cache_path.starts_with(&self.root) {
            let rel = relative(&self.root, &cache_path);
            self.manifest.add_support(&rel);
            self.manifest.save(&self.root)?;
        }
        Ok(LmClient::new(backend, cache, lm.client.clone()))
    }

    fn index(&self) -> Result<IndexTriplet> {
        IndexTriplet::load(&self.require(INDEX_FILE, "ingest")?)
    }

    fn dataset(&self, rel: &str, command: &str) -> Result<Vec<QATuple>> {
        read_dataset(&self.require(rel, command)?)
    }

    fn check_iter(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.cfg.global.outer_iterations {
            return Err(PgtError::Config(format!("iteration {k} outside 1..={}", self.cfg.global.outer_iterations)));
        }
        Ok(())
    }

    /// Retriever in force while building data for iteration `k`.
    fn data_retriever_file(&self, k: usize) -> (String, &'static str) {
        if k == 1 {
            (ICT_FILE.to_string(), "ict")
        } else {
            (iter_file(k - 1, "sft_retriever.json"), "sft")
        }
    }

    /// Final generator of iteration `k`.
    fn final_generator_file(k: usize) -> String {
        iter_file(k, "calibrated_generator.json")
    }

    pub fn ingest(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let dir = &self.cfg.global.corpus_dir;
        if !dir.is_dir() {
            return Err(PgtError::Config(format!("global.corpus_dir {} is not a directory", dir.display())));
        }
        let docs = read_corpus_dir(dir)?;
        let index = build_indexes(&docs, &self.cfg.corpus)?;
        index.save(&self.path(INDEX_FILE))?;
        let m = Metrics::from([
            ("documents".into(), docs.len() as f64),
            ("i1".into(), index.i1.len() as f64),
            ("i2".into(), index.i2.len() as f64),
            ("i3".into(), index.i3.len() as f64),
            ("vocab".into(), index.tokenizer.vocab_size() as f64),
        ]);
        self.finish("ingest", 0, &[], &[INDEX_FILE.into()], m, t0)
    }

    pub fn ict(&mut self) -> Result<()> {
        let t0 = Instant::now();
        let index = self.index()?;
        let init = init_for_index(&index, &self.cfg.retriever.model(), self.cfg.sub_seed("retriever.init"));
        let mut m = Metrics::new();
        let params = if self.cfg.retriever.ict.enabled {
            let mut ict = self.cfg.retriever.ict.clone();
            ict.seed ^= self.cfg.sub_seed("ict");
            let out = ict_pretrain(&index, init, &ict)?;
            m.insert("steps".into(), out.losses.len() as f64);
            m.insert("final_loss".into(), out.losses.last().copied().unwrap_or(f64::NAN));
            m.insert("skipped_chunks".into(), out.skipped as f64);
            out.params
        } else {
            init
        };
        RetrieverCheckpoint::new(params, &index.tokenizer).save(&self.path(ICT_FILE))?;
        self.finish("ict", 0, &[INDEX_FILE.into()], &[ICT_FILE.into()], m, t0)
    }

    pub fn seed_phase(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let teacher = self.teacher()?;
        let s = self.seed("seed", k, self.cfg.synthgen.seed);
        let mut tuples = Vec::new();
        let mut dropped = 0;
        for (format, y) in self.cfg.synthgen.seed_counts() {
            if y == 0 {
                continue;
            }
            let g = generate_seed_set(&index, &teacher, y, format, s)?;
            dropped += g.dropped;
            tuples.extend(g.tuples);
        }
        let tuples = tag_ids(tuples, k);
        let out = iter_file(k, "seed.jsonl");
        write_dataset(&self.path(&out), &tuples)?;
        let m = Metrics::from([("tuples".into(), tuples.len() as f64), ("dropped".into(), dropped as f64)]);
        self.finish("seed", k, &[INDEX_FILE.into()], &[out], m, t0)
    }

    pub fn bootstrap(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let seed_file = iter_file(k, "seed.jsonl");
        let seeds = self.dataset(&seed_file, "seed")?;
        let teacher = self.teacher()?;
        let sc = &self.cfg.synthgen;
        let g = bootstrap_generate(&seeds, &index, &teacher, sc.z, sc.n, self.seed("bootstrap", k, sc.seed), &UniformPassages)?;
        let tuples = tag_ids(g.tuples, k);
        let out = iter_file(k, "candidates.jsonl");
        write_dataset(&self.path(&out), &tuples)?;
        let m = Metrics::from([("candidates".into(), tuples.len() as f64), ("dropped".into(), g.dropped as f64)]);
        self.finish("bootstrap", k, &[INDEX_FILE.into(), seed_file], &[out], m, t0)
    }

    fn load_retriever(&self, index: &IndexTriplet, rel: &str, command: &str) -> Result<RetrieverParams> {
        RetrieverCheckpoint::load(&self.require(rel, command)?, index)
    }

    fn load_generator(&self, index: &IndexTriplet, rel: &str, command: &str) -> Result<GeneratorParams> {
        GeneratorCheckpoint::load(&self.require(rel, command)?, &index.tokenizer)
    }

    pub fn filter(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let cand_file = iter_file(k, "candidates.jsonl");
        let candidates = self.dataset(&cand_file, "bootstrap")?;
        let (ret_file, ret_cmd) = self.data_retriever_file(k);
        let eta = self.load_retriever(&index, &ret_file, ret_cmd)?;
        let retriever = Retriever::new(&index, &eta, &self.cfg.retriever.model());
        let mut inputs = vec![INDEX_FILE.to_string(), cand_file, ret_file];
        let use_rag = match self.cfg.filter.answerer {
            AnswererChoice::Teacher => false,
            AnswererChoice::Rag => true,
            AnswererChoice::Auto => k > 1,
        };
        let teacher = self.teacher()?;
        let gp;
        let verdicts = if use_rag {
            if k == 1 {
                return Err(PgtError::Config("filter.answerer = \"rag\" needs a trained generator; use \"auto\" or \"teacher\" in the first iteration".into()));
            }
            let g_file = Self::final_generator_file(k - 1);
            gp = self.load_generator(&index, &g_file, "calibrate")?;
            inputs.push(g_file);
            let rag = RagAnswerer { params: &gp, tokenizer: &index.tokenizer, max_answer_tokens: self.cfg.generator.max_answer_tokens };
            filter_candidates(&candidates, &self.cfg.filter, &retriever, &rag, self.seed("filter", k, 0))?
        } else {
            let ta = TeacherAnswerer { client: &teacher, model_tag: ModelTag::SeedTeacher };
            filter_candidates(&candidates, &self.cfg.filter, &retriever, &ta, self.seed("filter", k, 0))?
        };
        let accepted = accepted_tuples(&candidates, &verdicts);
        let out = iter_file(k, "filtered.jsonl");
        let report = iter_file(k, "filter_report.jsonl");
        write_dataset(&self.path(&out), &accepted)?;
        FilterReport::new(&candidates, &verdicts).write(&self.path(&report))?;
        let m = Metrics::from([
            ("candidates".into(), candidates.len() as f64),
            ("accepted".into(), accepted.len() as f64),
            ("acceptance_rate".into(), accepted.len() as f64 / candidates.len().max(1) as f64),
        ]);
        self.finish("filter", k, &inputs, &[out, report], m, t0)
    }

    pub fn nonmatch(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let seed_file = iter_file(k, "seed.jsonl");
        let filt_file = iter_file(k, "filtered.jsonl");
        let mut pool = self.dataset(&seed_file, "seed")?;
        pool.extend(self.dataset(&filt_file, "filter")?);
        let (ret_file, ret_cmd) = self.data_retriever_file(k);
        let eta = self.load_retriever(&index, &ret_file, ret_cmd)?;
        let retriever = Retriever::new(&index, &eta, &self.cfg.retriever.model());
        let teacher = self.teacher()?;
        let sp = &self.cfg.split;
        let (e, c, t) = three_way(pool.len(), sp.eval, sp.calib, self.seed("split", k, 0));
        let pick = |ix: &[usize]| ix.iter().map(|&i| pool[i].clone()).collect::<Vec<_>>();
        let (eval_m, calib, train_m) = (pick(&e), pick(&c), pick(&t));
        let sc = &self.cfg.synthgen;
        let make = |ts: &[QATuple]| -> Result<(Vec<QATuple>, usize)> {
            let made = parallel_map(ts, self.cfg.global.threads, |t| make_nonmatching(t, &retriever, sc.k_prime, sp.nonmatch_budget, &teacher));
            let mut ok = Vec::new();
            let mut failed = 0;
            for r in made {
                match r {
                    Ok(t) => ok.push(t),
                    Err(PgtError::Config(_)) | Err(PgtError::InvalidInput(_)) => failed += 1,
                    Err(e) => return Err(e),
                }
            }
            Ok((ok, failed))
        };
        let (train_nm, f1) = make(&train_m)?;
        let (eval_nm, f2) = make(&eval_m)?;
        let train = mix_dataset(&train_m, &train_nm, sc.rho, self.seed("mix", k, sc.seed), sc.allow_subsample)?;
        let mut eval = eval_m.clone();
        eval.extend(eval_nm.iter().cloned());
        let files = ["train.jsonl", "calib.jsonl", "eval.jsonl", "nonmatching.jsonl"].map(|f| iter_file(k, f));
        write_dataset(&self.path(&files[0]), &train)?;
        write_dataset(&self.path(&files[1]), &calib)?;
        write_dataset(&self.path(&files[2]), &eval)?;
        write_dataset(&self.path(&files[3]), &train_nm)?;
        let m = Metrics::from([
            ("pool".into(), pool.len() as f64),
            ("train".into(), train.len() as f64),
            ("train_nonmatching".into(), train.iter().filter(|t| !t.matching).count() as f64),
            ("calib".into(), calib.len() as f64),
            ("eval".into(), eval.len() as f64),
            ("nonmatching_failed".into(), (f1 + f2) as f64),
        ]);
        self.finish("nonmatch", k, &[INDEX_FILE.into(), seed_file, filt_file, ret_file], &files, m, t0)
    }

    pub fn sft(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let train_file = iter_file(k, "train.jsonl");
        let train = self.dataset(&train_file, "nonmatch")?;
        let (ret_file, ret_cmd) = self.data_retriever_file(k);
        let mut eta = self.load_retriever(&index, &ret_file, ret_cmd)?;
        let mut inputs = vec![INDEX_FILE.to_string(), train_file, ret_file];
        let mut phi = if k == 1 {
            GeneratorParams::init(index.tokenizer.vocab_size(), &self.cfg.generator.arch, self.cfg.sub_seed("generator.init"))
        } else {
            let g = Self::final_generator_file(k - 1);
            let p = self.load_generator(&index, &g, "calibrate")?;
            inputs.push(g);
            p
        };
        let examples: Vec<SftExample> = train.iter().map(|t| SftExample::from_tuple(t, &index)).collect();
        let mut cfg = self.cfg.sft.clone();
        cfg.seed = self.seed("sft", k, cfg.seed);
        let mut trainer = SftTrainer::new(cfg, &eta, &phi);
        let log = trainer.train(&examples, &index, &self.cfg.retriever.model(), &mut eta, &mut phi)?;
        let outs = ["sft_retriever.json", "sft_generator.json", "sft_log.jsonl"].map(|f| iter_file(k, f));
        RetrieverCheckpoint::new(eta, &index.tokenizer).save(&self.path(&outs[0]))?;
        GeneratorCheckpoint::save(&phi, &index.tokenizer, &self.path(&outs[1]))?;
        write_jsonl::<(), _>(&self.path(&outs[2]), None, &log)?;
        let m = Metrics::from([
            ("examples".into(), examples.len() as f64),
            ("steps".into(), log.len() as f64),
            ("first_nll".into(), log.first().map_or(f64::NAN, |l| l.mean_nll)),
            ("final_nll".into(), log.last().map_or(f64::NAN, |l| l.mean_nll)),
        ]);
        self.finish("sft", k, &inputs, &outs, m, t0)
    }

    pub fn reward(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let train_file = iter_file(k, "train.jsonl");
        let nm_file = iter_file(k, "nonmatching.jsonl");
        let train = self.dataset(&train_file, "nonmatch")?;
        let nm = self.dataset(&nm_file, "nonmatch")?;
        let matching: Vec<QATuple> = train.into_iter().filter(|t| t.matching).collect();
        let (a, b) = pair_by_id(&matching, &nm);
        let composites = assemble_composites(&a, &b, &index)?;
        let mut cfg = self.cfg.reward.clone();
        cfg.seed = self.seed("reward", k, cfg.seed);
        let init = RewardParams::init(index.tokenizer.vocab_size(), &cfg.arch, cfg.seed);
        let out = train_reward(&composites, init, &cfg)?;
        let outs = ["reward.json", "reward_log.jsonl"].map(|f| iter_file(k, f));
        let ck = RewardCheckpoint { format_version: REWARD_VERSION, tokenizer_fingerprint: index.tokenizer.fingerprint(), params: out.params };
        write_json(&self.path(&outs[0]), &ck)?;
        write_jsonl::<(), _>(&self.path(&outs[1]), None, &out.losses)?;
        let m = Metrics::from([
            ("composites".into(), composites.len() as f64),
            ("initial_accuracy".into(), out.initial_accuracy),
            ("heldout_accuracy".into(), out.heldout_accuracy),
            ("final_loss".into(), out.losses.last().copied().unwrap_or(f64::NAN)),
        ]);
        self.finish("reward", k, &[INDEX_FILE.into(), train_file, nm_file], &outs, m, t0)
    }

    fn load_reward(&self, index: &IndexTriplet, rel: &str) -> Result<RewardParams> {
        let ck: RewardCheckpoint = read_json(&self.require(rel, "reward")?)?;
        if ck.format_version != REWARD_VERSION || ck.tokenizer_fingerprint != index.tokenizer.fingerprint() {
            return Err(PgtError::InvalidInput(format!("{rel}: checkpoint does not match the index")));
        }
        Ok(ck.params)
    }

    pub fn align(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let files = ["sft_generator.json", "sft_retriever.json", "reward.json", "train.jsonl"].map(|f| iter_file(k, f));
        let start = self.load_generator(&index, &files[0], "sft")?;
        let eta = self.load_retriever(&index, &files[1], "sft")?;
        let rm = self.load_reward(&index, &files[2])?;
        let train = self.dataset(&files[3], "nonmatch")?;
        let retriever = Retriever::new(&index, &eta, &self.cfg.retriever.model());
        let mut cfg = self.cfg.align.clone();
        cfg.seed = self.seed("align", k, cfg.seed);
        let teacher;
        let ta;
        let rag;
        let sampler: Box<dyn PromptSampler + '_> = match cfg.prompt_source {
            PromptSource::Dataset => Box::new(DatasetPrompts { index: &index, tuples: &train }),
            PromptSource::Pipeline => {
                teacher = self.teacher()?;
                let answerer: &dyn Answerer = match self.cfg.filter.answerer {
                    AnswererChoice::Teacher => {
                        ta = TeacherAnswerer { client: &teacher, model_tag: ModelTag::SeedTeacher };
                        &ta
                    }
                    _ => {
                        rag = RagAnswerer { params: &start, tokenizer: &index.tokenizer, max_answer_tokens: self.cfg.generator.max_answer_tokens };
                        &rag
                    }
                };
                Box::new(PipelinePrompts { index: &index, teacher: &teacher, retriever: &retriever, answerer, filter: &self.cfg.filter, max_attempts: 8 })
            }
        };
        let ret = cfg.retrieve_instead.then_some(&retriever);
        let out = align(&start, sampler.as_ref(), &rm, &index.tokenizer, ret, &cfg)?;
        drop(sampler);
        let outs = ["aligned_generator.json", "align_log.jsonl"].map(|f| iter_file(k, f));
        GeneratorCheckpoint::save(&out.policy, &index.tokenizer, &self.path(&outs[0]))?;
        write_jsonl(&self.path(&outs[1]), Some(&serde_json::json!({ "reference_hash": out.reference_hash })), &out.log)?;
        let first = out.log.first();
        let last = out.log.last();
        let m = Metrics::from([
            ("iterations".into(), out.log.len() as f64),
            ("initial_reward".into(), first.map_or(f64::NAN, |l| l.mean_reward)),
            ("final_reward".into(), last.map_or(f64::NAN, |l| l.mean_reward)),
            ("max_kl".into(), out.log.iter().map(|l| l.mean_kl).fold(0.0, f64::max)),
        ]);
        let mut inputs = vec![INDEX_FILE.to_string()];
        inputs.extend(files);
        self.finish("align", k, &inputs, &outs, m, t0)
    }

    pub fn calibrate(&mut self, k: usize) -> Result<()> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let files = ["aligned_generator.json", "sft_retriever.json", "calib.jsonl"].map(|f| iter_file(k, f));
        let mut gp = self.load_generator(&index, &files[0], "align")?;
        let eta = self.load_retriever(&index, &files[1], "sft")?;
        let calib = self.dataset(&files[2], "nonmatch")?;
        let retriever = Retriever::new(&index, &eta, &self.cfg.retriever.model());
        let mut cfg = self.cfg.calibrate.clone();
        cfg.seed = self.seed("calibrate", k, cfg.seed);
        let set = build_calibration_set(&calib, &retriever, &gp, &self.cfg.sft, &cfg)?;
        let mut examples = set.examples.clone();
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let n_held = if examples.len() < 2 { 0 } else { ((examples.len() as f64 * cfg.holdout).round() as usize).clamp(1, examples.len() - 1) };
        let (held, train) = examples.split_at(n_held);
        let mut held: Vec<CalibExample> = held.to_vec();
        let before = if held.is_empty() { None } else { Some(ece_of(&held)?) };
        let single_class = train.iter().all(|e| e.label.is_correct()) || !train.iter().any(|e| e.label.is_correct());
        let losses = if single_class { Vec::new() } else { train_calibration(train, &mut gp, &index.tokenizer, &cfg)? };
        rescore(&mut held, &gp, &index.tokenizer)?;
        let after = if held.is_empty() { None } else { Some(ece_of(&held)?) };
        let outs = ["calibrated_generator.json", "calibration.jsonl", "reliability.json", "reliability.txt"].map(|f| iter_file(k, f));
        GeneratorCheckpoint::save(&gp, &index.tokenizer, &self.path(&outs[0]))?;
        write_jsonl::<(), _>(&self.path(&outs[1]), None, &set.examples)?;
        let summary = CalibrationSummary { examples: examples.len(), train: train.len(), heldout: held.len(), single_class, losses, before, after };
        write_json(&self.path(&outs[2]), &summary)?;
        let mut txt = String::new();
        for (name, r) in [("before", &summary.before), ("after", &summary.after)] {
            txt.push_str(&format!("{name}\n"));
            match r {
                Some(r) => txt.push_str(&r.table()),
                None => txt.push_str("no held-out examples\n"),
            }
        }
        fs::write(self.path(&outs[3]), txt).map_err(|e| PgtError::io(self.path(&outs[3]), e))?;
        let mut m = Metrics::from([("examples".into(), examples.len() as f64), ("single_class".into(), single_class as u8 as f64)]);
        if let Some(r) = &summary.before {
            m.insert("ece_before".into(), r.ece);
        }
        if let Some(r) = &summary.after {
            m.insert("ece_after".into(), r.ece);
        }
        let mut inputs = vec![INDEX_FILE.to_string()];
        inputs.extend(files);
        self.finish("calibrate", k, &inputs, &outs, m, t0)
    }

    pub fn eval(&mut self, k: usize) -> Result<EvalReport> {
        self.check_iter(k)?;
        let t0 = Instant::now();
        let index = self.index()?;
        let files = ["eval.jsonl", "train.jsonl", "calib.jsonl", "sft_retriever.json", "sft_generator.json", "calibrated_generator.json"].map(|f| iter_file(k, f));
        let eval_set = self.dataset(&files[0], "nonmatch")?;
        let mut train_ids: BTreeSet<String> = self.dataset(&files[1], "nonmatch")?.into_iter().map(|t| t.id).collect();
        train_ids.extend(self.dataset(&files[2], "nonmatch")?.into_iter().map(|t| t.id));
        let eta = self.load_retriever(&index, &files[3], "sft")?;
        let sft_gen = self.load_generator(&index, &files[4], "sft")?;
        let final_gen = self.load_generator(&index, &files[5], "calibrate")?;
        let retriever = Retriever::new(&index, &eta, &self.cfg.retriever.model());
        let ctx = |g| EvalContext { retriever: &retriever, generator: g, sft: &self.cfg.sft, calib: &self.cfg.calibrate, k: self.cfg.eval.k };
        let (sft_m, _) = evaluate(&eval_set, &train_ids, &ctx(&sft_gen))?;
        let (final_m, preds) = evaluate(&eval_set, &train_ids, &ctx(&final_gen))?;
        let report = EvalReport { sft: sft_m, final_: final_m };
        let outs = ["metrics.json", "predictions.jsonl"].map(|f| iter_file(k, f));
        write_json(&self.path(&outs[0]), &report)?;
        write_jsonl::<(), _>(&self.path(&outs[1]), None, &preds)?;
        let f = &report.final_;
        let mut m = Metrics::from([
            ("token_f1".into(), f.token_f1),
            ("retrieval_recall_at_k".into(), f.retrieval_recall_at_k),
            ("refusal_rate_on_nonmatching".into(), f.refusal_rate_on_nonmatching),
            ("false_refusal_rate_on_matching".into(), f.false_refusal_rate_on_matching),
            ("sft_refusal_rate_on_nonmatching".into(), report.sft.refusal_rate_on_nonmatching),
            ("sft_false_refusal_rate_on_matching".into(), report.sft.false_refusal_rate_on_matching),
        ]);
        if let Some(e) = f.ece {
            m.insert("ece".into(), e);
        }
        let mut inputs = vec![INDEX_FILE.to_string()];
        inputs.extend(files);
        self.finish("eval", k, &inputs, &outs, m, t0)?;
        Ok(report)
    }

    /// Latest iteration with a generator, and the best generator it has.
    fn serving_model(&self, k: Option<usize>) -> Result<(usize, String)> {
        let iters: Vec<usize> = match k {
            Some(k) => vec![k],
            None => (1..=self.cfg.global.outer_iterations).rev().collect(),
        };
        for k in iters {
            for name in ["calibrated_generator.json", "aligned_generator.json", "sft_generator.json"] {
                let rel = iter_file(k, name);
                if self.manifest.producer(&rel).is_some() && self.path(&rel).exists() {
                    return Ok((k, rel));
                }
            }
        }
        Err(PgtError::Prerequisite { command: "sft".into(), detail: "no trained generator found".into() })
    }

    pub fn answer(&self, question: &str, k: Option<usize>) -> Result<AnswerOutput> {
        let index = self.index()?;
        let (k, gen_file) = self.serving_model(k)?;
        let gp = self.load_generator(&index, &gen_file, "sft")?;
        let eta = self.load_retriever(&index, &iter_file(k, "sft_retriever.json"), "sft")?;
        let retriever = Retriever::new(&index, &eta, &self.cfg.retriever.model());
        let tok = &index.tokenizer;
        let q = tok.encode(question);
        let sft = &self.cfg.sft;
        let decoded = beam_decode(&q, &retriever, &gp, sft, sft.beam, sft.max_answer_tokens, Scope::All)?;
        let a = decoded.answer().to_vec();
        let mut query = q.clone();
        query.extend_from_slice(&a);
        let top = retriever.retrieve_top_segments(&query, self.cfg.calibrate.m, Scope::All)?;
        let evidence: Vec<SegmentId> = top.hits.iter().map(|h| h.segment_id).collect();
        let docs: Vec<Vec<TokenId>> = evidence.iter().map(|s| index.i2_segment(*s).token_ids.clone()).collect();
        let confidence = indirect_correct_probability(&gp, tok, &q, &docs, &a)?;
        Ok(AnswerOutput { question: question.to_string(), answer: tok.decode(&a), evidence, confidence, iteration: k, generator: gen_file })
    }

    /// Runs one phase by command name (`answer` excluded).
    pub fn run_phase(&mut self, phase: &str, k: usize) -> Result<()> {
        match phase {
            "ingest" => self.ingest(),
            "ict" => self.ict(),
            "seed" => self.seed_phase(k),
            "bootstrap" => self.bootstrap(k),
            "filter" => self.filter(k),
            "nonmatch" => self.nonmatch(k),
            "sft" => self.sft(k),
            "reward" => self.reward(k),
            "align" => self.align(k),
            "calibrate" => self.calibrate(k),
            "eval" => self.eval(k).map(|_| ()),
            other => Err(PgtError::Config(format!("unknown command `{other}`"))),
        }
    }

    /// Ingest and ICT once, then every per-iteration phase for each outer
    /// iteration.
    pub fn run_all(&mut self) -> Result<()> {
        self.ingest()?;
        self.ict()?;
        for k in 1..=self.cfg.global.outer_iterations {
            for phase in &PHASES[2..] {
                self.run_phase(phase, k)?;
            }
        }
        Ok(())
    }
}

/// Files under `root` that the manifest does not reference.
pub fn unreferenced_files(root: &Path, manifest: &RunManifest) -> Result<Vec<String>> {
    let refs: BTreeSet<String> = manifest.referenced().into_iter().collect();
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).map_err(|e| PgtError::io(&dir, e))? {
            let p = e.map_err(|e| PgtError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = relative(root, &p);
                if !refs.contains(&rel) && rel != manifest::LOCK_FILE {
                    out.push(rel);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Reads the manifest of a work directory without locking it.
pub fn read_manifest(root: &Path) -> Result<RunManifest> {
    read_json(&root.join(manifest::MANIFEST_FILE))
}
