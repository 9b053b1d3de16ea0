//! The experiment stages. Each reads only files written by earlier stages
//! plus the resolved config, and echoes that config next to its outputs.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spe_core::cloze::{
    encode_questions, generate_questions, grade_scores, load_questions, questions_to_jsonl, render_table,
    score_questions, criterion_values, DistractorSource, ResultsTable, TableRow,
};
use spe_core::corpus::{
    encode_documents, parse_corpus, split_documents, CorpusSplit, Document, Partition, SplitManifest,
};
use spe_core::lm::CheckpointManifest;
use spe_core::nce::{pretrain, select_from_scores, train_nce, Selection};
use spe_core::noise::{train_bilm, BatchNce, NoiseSampler, Resampler};
use spe_core::scoring::{score_records, sentence_score, write_score_dump};
use spe_core::util::{sha256_hex, write_atomic};
use spe_core::{
    BiLmCheckpoint, BiLmParams, Checkpoint, ClozeQuestion, Criterion, EncodedQuestion, Error, LmParams, Provenance,
    SamplerKind, SentencePair, Vocabulary,
};

use crate::config::{QuestionSource, RunConfig};

/// Where every artifact lives below the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            root: cfg.paths.out.clone(),
        }
    }

    pub fn prep(&self) -> PathBuf {
        self.root.join("prep")
    }

    pub fn vocab(&self) -> PathBuf {
        self.prep().join("vocab.json")
    }

    pub fn split(&self) -> PathBuf {
        self.prep().join("split.json")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }

    pub fn bilm(&self) -> PathBuf {
        self.root.join("bilm")
    }

    pub fn run(&self, cfg: &RunConfig) -> PathBuf {
        self.root.join(cfg.run_name())
    }

    pub fn questions(&self) -> PathBuf {
        self.root.join("questions")
    }

    pub fn question_set(&self, set: &str) -> (PathBuf, PathBuf) {
        let dir = self.questions();
        (dir.join(format!("{set}.jsonl")), dir.join(format!("{set}.meta.json")))
    }

    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }
}

pub const CONFIG_FILE: &str = "config.json";

fn echo_config(dir: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_atomic(path, (serde_json::to_string_pretty(value)? + "\n").as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Wall times are left out so logs are reproducible byte for byte.
fn log_lines<T: Serialize>(records: &[T]) -> anyhow::Result<String> {
    let mut out = String::new();
    for r in records {
        let mut v = serde_json::to_value(r)?;
        if let Some(m) = v.as_object_mut() {
            m.remove("wall_secs");
        }
        out.push_str(&v.to_string());
        out.push('\n');
    }
    Ok(out)
}

fn check_hash(what: &str, expected: &str, found: &str) -> anyhow::Result<()> {
    if expected != found {
        return Err(anyhow::Error::new(Error::HashMismatch {
            expected: expected.to_owned(),
            found: found.to_owned(),
        })
        .context(what.to_owned()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepMeta {
    pub corpus_sha256: String,
    pub vocab_hash: String,
    pub config_hash: String,
    pub documents: usize,
    pub vocab_size: usize,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub holdout_pairs: usize,
}

/// Builds the split manifest and the vocabulary (training documents only).
pub fn prep(cfg: &RunConfig) -> anyhow::Result<PrepMeta> {
    let layout = Layout::new(cfg);
    let text = std::fs::read_to_string(&cfg.paths.corpus)
        .with_context(|| format!("reading corpus {}", cfg.paths.corpus.display()))?;
    let raw = parse_corpus(&text, cfg.corpus.kind);
    if raw.is_empty() {
        bail!(Error::InvalidInput(format!("corpus {} has no documents", cfg.paths.corpus.display())));
    }
    let ids: Vec<usize> = raw.iter().map(|d| d.id).collect();
    let manifest = split_documents(&ids, cfg.split_seed(), cfg.corpus.split)?;
    let train_sentences: Vec<Vec<String>> = raw
        .iter()
        .filter(|d| manifest.partition_of(d.id) == Some(Partition::Train))
        .flat_map(|d| d.sentences.iter().cloned())
        .collect();
    if train_sentences.is_empty() {
        bail!(Error::InvalidInput("training partition is empty".into()));
    }
    let vocab = Vocabulary::build(&train_sentences, cfg.corpus.vocab_cutoff);
    let split = CorpusSplit::from_manifest(&encode_documents(&raw, &vocab), &manifest);
    let meta = PrepMeta {
        corpus_sha256: sha256_hex(text.as_bytes()),
        vocab_hash: vocab.hash(),
        config_hash: cfg.prep_hash(),
        documents: raw.len(),
        vocab_size: vocab.len(),
        train_pairs: split.train.len(),
        validation_pairs: split.validation.len(),
        holdout_pairs: split.holdout.len(),
    };
    vocab.save(&layout.vocab())?;
    write_json(&layout.split(), &manifest)?;
    write_json(&layout.prep().join("meta.json"), &meta)?;
    echo_config(&layout.prep(), cfg)?;
    Ok(meta)
}

/// Corpus, vocabulary and split as left by `prep`.
pub struct Prepared {
    pub vocab: Vocabulary,
    pub manifest: SplitManifest,
    pub docs: Vec<Document>,
    pub split: CorpusSplit,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> anyhow::Result<Self> {
        let layout = Layout::new(cfg);
        let meta: PrepMeta = read_json(&layout.prep().join("meta.json")).context("run `prep` first")?;
        check_hash("prep was run with a different corpus config", &cfg.prep_hash(), &meta.config_hash)?;
        let text = std::fs::read_to_string(&cfg.paths.corpus)
            .with_context(|| format!("reading corpus {}", cfg.paths.corpus.display()))?;
        check_hash("corpus changed since prep", &meta.corpus_sha256, &sha256_hex(text.as_bytes()))?;
        let vocab = Vocabulary::load(&layout.vocab())?;
        check_hash("vocabulary file changed since prep", &meta.vocab_hash, &vocab.hash())?;
        let manifest: SplitManifest = read_json(&layout.split())?;
        let docs = encode_documents(&parse_corpus(&text, cfg.corpus.kind), &vocab);
        let split = CorpusSplit::from_manifest(&docs, &manifest);
        Ok(Prepared {
            vocab,
            manifest,
            docs,
            split,
        })
    }

    pub fn sentences(&self, p: Partition) -> Vec<Vec<usize>> {
        self.docs
            .iter()
            .filter(|d| self.manifest.partition_of(d.id) == Some(p))
            .flat_map(|d| d.sentences.iter().cloned())
            .collect()
    }
}

/// Word-level pre-training from a fresh initialization.
pub fn pretrain_stage(cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let layout = Layout::new(cfg);
    let data = Prepared::load(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("pretrain-init"));
    let mut lm = LmParams::new(cfg.lm_config(data.vocab.len()), &mut rng)?;
    let stats = pretrain(
        &mut lm,
        &data.sentences(Partition::Train),
        &data.sentences(Partition::Validation),
        &cfg.pretrain,
        |s| log::info!("pretrain epoch {}: L_w {:.4} validation {:?}", s.epoch, s.lw, s.validation_lw),
    )?;
    let ck = Checkpoint {
        params: lm,
        epoch: cfg.pretrain.epochs,
        validation_metric: stats.last().and_then(|s| s.validation_lw),
        config_hash: cfg.pretrain_hash(),
        vocab_hash: data.vocab.hash(),
    };
    let dir = layout.pretrain();
    ck.save(&dir)?;
    write_atomic(&dir.join("log.jsonl"), log_lines(&stats)?.as_bytes())?;
    echo_config(&dir, cfg)?;
    Ok(ck)
}

pub fn bilm_stage(cfg: &RunConfig) -> anyhow::Result<BiLmCheckpoint> {
    let layout = Layout::new(cfg);
    let data = Prepared::load(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("bilm-init"));
    let mut bilm = BiLmParams::new(cfg.bilm_config(data.vocab.len()), &mut rng)?;
    let stats = train_bilm(&mut bilm, &data.sentences(Partition::Train), &cfg.bilm.train, |s| {
        log::info!("bilm epoch {}: masked CE {:.4}", s.epoch, s.masked_ce)
    })?;
    let ck = BiLmCheckpoint {
        params: bilm,
        epoch: cfg.bilm.train.epochs,
        config_hash: cfg.bilm_hash(),
        vocab_hash: data.vocab.hash(),
    };
    let dir = layout.bilm();
    ck.save(&dir)?;
    write_atomic(&dir.join("log.jsonl"), log_lines(&stats)?.as_bytes())?;
    echo_config(&dir, cfg)?;
    Ok(ck)
}

fn load_bilm(cfg: &RunConfig, vocab: &Vocabulary) -> anyhow::Result<BiLmParams> {
    let dir = Layout::new(cfg).bilm();
    let ck = BiLmCheckpoint::load(&dir).with_context(|| format!("loading {} (run `train-bilm` first)", dir.display()))?;
    check_hash("bidirectional model vocabulary", &vocab.hash(), &ck.vocab_hash)?;
    check_hash("bidirectional model config", &cfg.bilm_hash(), &ck.config_hash)?;
    Ok(ck.params)
}

/// Sentence-level training from the pre-trained model. Checkpoints land in
/// `epoch-NNNN` directories of the run directory.
pub fn nce_stage(cfg: &RunConfig, init: Option<&Path>) -> anyhow::Result<PathBuf> {
    let layout = Layout::new(cfg);
    let data = Prepared::load(cfg)?;
    let init_dir = init.map(Path::to_path_buf).unwrap_or_else(|| layout.pretrain());
    let ck = Checkpoint::load(&init_dir).with_context(|| format!("loading {}", init_dir.display()))?;
    check_hash("initial checkpoint vocabulary", &data.vocab.hash(), &ck.vocab_hash)?;
    check_hash("initial checkpoint config", &cfg.pretrain_hash(), &ck.config_hash)?;
    let mut lm = ck.params;
    let mut sampler: Box<dyn NoiseSampler> = match cfg.train.sampler {
        SamplerKind::BatchNce => Box::new(BatchNce::new(cfg.train.batch_size)?),
        SamplerKind::Resampling => {
            let mut r = Resampler::new(load_bilm(cfg, &data.vocab)?, cfg.train.nu)?;
            r.mask_rate = cfg.train.mask_rate;
            Box::new(r)
        }
    };
    let dir = layout.run(cfg);
    let vocab_hash = data.vocab.hash();
    let config_hash = cfg.nce_hash();
    let stats = train_nce(
        &mut lm,
        data.split.pairs(Partition::Train),
        &data.sentences(Partition::Validation),
        sampler.as_mut(),
        &cfg.train,
        cfg.weights,
        |s| log::info!("train-nce epoch {}: L {:.4} (L_w {:.4})", s.epoch, s.loss, s.lw),
        |epoch, lm, s| {
            Checkpoint {
                params: lm.clone(),
                epoch,
                validation_metric: s.validation_lw,
                config_hash: config_hash.clone(),
                vocab_hash: vocab_hash.clone(),
            }
            .save(&dir.join(epoch_dir(epoch)))
        },
    )?;
    write_atomic(&dir.join("log.jsonl"), log_lines(&stats)?.as_bytes())?;
    echo_config(&dir, cfg)?;
    Ok(dir)
}

pub fn epoch_dir(epoch: usize) -> String {
    format!("epoch-{epoch:04}")
}

/// Sidecar describing a generated question file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionMeta {
    pub vocab_hash: String,
    pub config_hash: String,
    pub provenance: Provenance,
    pub choices: usize,
    pub questions: usize,
    /// Pairs skipped because their true continuation occurs in training.
    pub filtered: usize,
    /// Questions abandoned for lack of distinct distractors.
    pub dropped: usize,
}

pub const QUESTION_SETS: [(&str, Partition); 2] = [("validation", Partition::Validation), ("holdout", Partition::Holdout)];

/// Validation and holdout questions. No training sentence appears as a
/// choice.
pub fn questions_stage(cfg: &RunConfig) -> anyhow::Result<Vec<QuestionMeta>> {
    let layout = Layout::new(cfg);
    let data = Prepared::load(cfg)?;
    let seen: HashSet<Vec<usize>> = data.sentences(Partition::Train).into_iter().collect();
    let bilm = match cfg.questions.source {
        QuestionSource::BatchNeg => None,
        QuestionSource::Resampled => Some(load_bilm(cfg, &data.vocab)?),
    };
    let mut metas = Vec::new();
    for (name, part) in QUESTION_SETS {
        let all = data.split.pairs(part);
        let pairs: Vec<SentencePair> = all.iter().filter(|p| !seen.contains(&p.b)).cloned().collect();
        let source = match &bilm {
            None => DistractorSource::BatchNeg,
            Some(b) => DistractorSource::Resampled {
                bilm: b,
                mask_rate: cfg.questions.mask_rate,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(&format!("questions-{name}")));
        let g = generate_questions(&pairs, source, cfg.questions.choices, cfg.questions.count, Some(&seen), &mut rng)
            .with_context(|| format!("generating {name} questions"))?;
        let decoded: Vec<ClozeQuestion> = g.questions.iter().map(|q| q.decode(&data.vocab, g.provenance)).collect();
        let meta = QuestionMeta {
            vocab_hash: data.vocab.hash(),
            config_hash: cfg.questions_hash(),
            provenance: g.provenance,
            choices: cfg.questions.choices,
            questions: decoded.len(),
            filtered: all.len() - pairs.len(),
            dropped: g.dropped,
        };
        let (qpath, mpath) = layout.question_set(name);
        write_atomic(&qpath, questions_to_jsonl(&decoded)?.as_bytes())?;
        write_json(&mpath, &meta)?;
        metas.push(meta);
    }
    echo_config(&layout.questions(), cfg)?;
    Ok(metas)
}

/// A question set read back from disk and encoded.
pub struct QuestionSet {
    pub name: String,
    pub vocab_hash: String,
    pub provenance: Provenance,
    pub questions: Vec<EncodedQuestion>,
}

pub fn load_question_set(cfg: &RunConfig, name: &str, vocab: &Vocabulary) -> anyhow::Result<QuestionSet> {
    let (qpath, mpath) = Layout::new(cfg).question_set(name);
    let meta: QuestionMeta = read_json(&mpath).context("run `gen-questions` first")?;
    check_hash(&format!("{name} questions were generated with another vocabulary"), &vocab.hash(), &meta.vocab_hash)?;
    let raw = load_questions(&qpath)?;
    Ok(QuestionSet {
        name: name.to_owned(),
        vocab_hash: meta.vocab_hash,
        provenance: meta.provenance,
        questions: encode_questions(&raw, vocab, cfg.corpus.kind)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub criterion: Criterion,
    pub selection: Selection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalResult {
    pub criterion: Criterion,
    pub epoch: usize,
    pub report: spe_core::EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model: String,
    pub weights: String,
    pub sampler: String,
    pub provenance: Provenance,
    pub epochs: Vec<usize>,
    pub validation_questions: usize,
    pub holdout_questions: usize,
    /// One checkpoint selection per criterion.
    pub results: Vec<CriterionResult>,
    pub external: Vec<ExternalResult>,
    pub table: ResultsTable,
}

/// Checkpoints of a run directory, or the single checkpoint at `dir`.
fn checkpoint_dirs(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if CheckpointManifest::exists(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("epoch-")) && CheckpointManifest::exists(p)
        })
        .collect();
    out.sort();
    if out.is_empty() {
        bail!(Error::InvalidInput(format!("no checkpoints under {}", dir.display())));
    }
    Ok(out)
}

/// Labels for the report row, from the config echoed beside the checkpoints.
fn row_labels(dir: &Path, ck: &Checkpoint, fallback: &RunConfig) -> (String, String) {
    let run_cfg = [dir.join(CONFIG_FILE), dir.parent().map(|p| p.join(CONFIG_FILE)).unwrap_or_default()]
        .iter()
        .find_map(|p| read_json::<RunConfig>(p).ok())
        .unwrap_or_else(|| fallback.clone());
    if ck.config_hash == run_cfg.pretrain_hash() {
        ("pretrained".into(), "-".into())
    } else {
        (run_cfg.weights.to_string(), run_cfg.train.sampler.to_string())
    }
}

/// Scores every checkpoint on both question sets, selects per criterion on
/// validation accuracy and reports holdout accuracy. Nothing is written
/// until every input has been checked.
pub fn evaluate_stage(cfg: &RunConfig, target: Option<&Path>) -> anyhow::Result<Report> {
    let layout = Layout::new(cfg);
    let vocab = Vocabulary::load(&layout.vocab()).context("run `prep` first")?;
    let validation = load_question_set(cfg, "validation", &vocab)?;
    let holdout = load_question_set(cfg, "holdout", &vocab)?;
    let target = target.map(Path::to_path_buf).unwrap_or_else(|| layout.run(cfg));
    let dirs = checkpoint_dirs(&target)?;
    let mut cks = Vec::with_capacity(dirs.len());
    for d in &dirs {
        let ck = Checkpoint::load(d).with_context(|| format!("loading {}", d.display()))?;
        check_hash(
            &format!("{} was trained with another vocabulary than the questions", d.display()),
            &validation.vocab_hash,
            &ck.vocab_hash,
        )?;
        cks.push(ck);
    }
    let external = match &cfg.paths.external_questions {
        Some(p) => Some(encode_questions(&load_questions(p)?, &vocab, cfg.corpus.kind)?),
        None => None,
    };

    let epochs: Vec<usize> = cks.iter().map(|c| c.epoch).collect();
    let mut val_scores = Vec::new();
    let mut hold_scores = Vec::new();
    for ck in &cks {
        val_scores.push(score_questions(&ck.params, &validation.questions)?);
        hold_scores.push(score_questions(&ck.params, &holdout.questions)?);
    }
    let mut results = Vec::new();
    for criterion in Criterion::ALL {
        let selection = select_from_scores(
            &epochs,
            &val_scores,
            &hold_scores,
            &validation.questions,
            &holdout.questions,
            criterion,
        )?;
        results.push(CriterionResult { criterion, selection });
    }
    let mut ext_results = Vec::new();
    if let Some(qs) = &external {
        for r in &results {
            let lm = &cks[r.selection.index].params;
            let values = criterion_values(&score_questions(lm, qs)?, r.criterion);
            ext_results.push(ExternalResult {
                criterion: r.criterion,
                epoch: r.selection.epoch,
                report: grade_scores(qs, &values)?,
            });
        }
    }

    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let (weights, sampler) = row_labels(&target, &cks[0], cfg);
    let provenance = holdout.provenance;
    let mut table = ResultsTable::default();
    table.rows.push(TableRow {
        weights: weights.clone(),
        sampler: sampler.clone(),
        question_set: format!("holdout ({})", provenance_label(provenance)),
        questions: holdout.questions.len(),
        criterion1: results[0].selection.holdout.accuracy,
        criterion2: results[1].selection.holdout.accuracy,
    });
    if let (Some(qs), [e1, e2]) = (&external, ext_results.as_slice()) {
        table.rows.push(TableRow {
            weights: weights.clone(),
            sampler: sampler.clone(),
            question_set: "external".into(),
            questions: qs.len(),
            criterion1: e1.report.accuracy,
            criterion2: e2.report.accuracy,
        });
    }
    let report = Report {
        model: name.clone(),
        weights,
        sampler,
        provenance,
        epochs: epochs.clone(),
        validation_questions: validation.questions.len(),
        holdout_questions: holdout.questions.len(),
        results,
        external: ext_results,
        table,
    };

    let dir = layout.eval(&name);
    for (i, &epoch) in epochs.iter().enumerate() {
        for (set, scores) in [("validation", &val_scores[i]), ("holdout", &hold_scores[i])] {
            let path = dir.join("scores").join(format!("{}-{set}.jsonl", epoch_dir(epoch)));
            write_atomic(&path, write_score_dump(&score_records(scores))?.as_bytes())?;
        }
    }
    write_json(&dir.join("report.json"), &report)?;
    write_atomic(&dir.join("report.txt"), render_report(&report).as_bytes())?;
    echo_config(&dir, cfg)?;
    Ok(report)
}

fn provenance_label(p: Provenance) -> &'static str {
    match p {
        Provenance::BatchNeg => "batch-neg",
        Provenance::Resampled => "resampled",
        Provenance::External => "external",
    }
}

pub fn render_report(r: &Report) -> String {
    let mut out = render_table(&r.table);
    out.push('\n');
    for c in &r.results {
        let accs: Vec<String> = r
            .epochs
            .iter()
            .zip(&c.selection.validation_accuracy)
            .map(|(e, a)| format!("{e}:{:.1}%", 100.0 * a))
            .collect();
        out.push_str(&format!(
            "criterion {}: selected epoch {} (validation {}), holdout {}/{}\n",
            c.criterion,
            c.selection.epoch,
            accs.join(" "),
            c.selection.holdout.correct,
            c.selection.holdout.total,
        ));
    }
    out
}

/// Scores tab-separated `a<TAB>b` lines. Output columns: `log p(b|a)`,
/// `log p(b)` and the configured criterion.
pub fn score_lines(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &mut dyn BufRead,
    output: &mut dyn std::io::Write,
) -> anyhow::Result<usize> {
    let vocab = Vocabulary::load(&Layout::new(cfg).vocab()).context("run `prep` first")?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    check_hash("checkpoint vocabulary", &vocab.hash(), &ck.vocab_hash)?;
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let Some((a, b)) = line.split_once('\t') else {
            bail!(Error::InvalidInput(format!("line {}: expected `context<TAB>sentence`", i + 1)));
        };
        let a = vocab.encode(&cfg.corpus.kind.tokenize(a));
        let b = vocab.encode(&cfg.corpus.kind.tokenize(b));
        let s = sentence_score(&ck.params, &a, &b).with_context(|| format!("line {}", i + 1))?;
        writeln!(output, "{:.6}\t{:.6}\t{:.6}", s.log_cond, s.log_uncond, s.value(cfg.criterion))?;
        n += 1;
    }
    Ok(n)
}
