//! Pipeline stages over one run root: corpus generation, base pretraining and
//! concept building, post-training runs, evaluation and reporting.
//!
//! Layout under the run root:
//!
//! ```text
//! config.toml                     snapshot of the config that created the root
//! manifest.json                   run list and statuses
//! data/vocab.json, similarity.csv
//! data/<profile>/{pretrain,train,heldout}.jsonl
//! base/<profile>-<size>/          base.bin, concepts.jsonl, heldout-<profile>.jsonl, eval-<domain>.json
//! runs/<run id>/                  best.bin, steps.csv, runlog.json, eval-<domain>.json, records-<domain>.jsonl
//! report.csv
//! ```

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use conceptlm::conceptset::{
    build_dataset, randomize_synonyms, subsample_supervision, AnnotatedSequence, BuildReport,
    ExternalProvider, FilterProvider, SubsampleReport,
};
use conceptlm::corpus::{
    export_annotated, export_corpus, generate_corpus_with, ground_truth_similarity,
    ingest_annotated, probe_templates, GroundTruthSimilarity, IngestOptions, Profile, Sequence,
    Vocabulary,
};
use conceptlm::eval::{content_cis, evaluate, DomainTag, EvalInputs, EvalReport, PerTokenRecord};
use conceptlm::model::{
    init_params, load_params, save_params, write_atomic, ModelConfig, ModelParams,
};
use conceptlm::objective::ObjectiveConfig;
use conceptlm::rng::derive_seed_str;
use conceptlm::trainer::{train_in_dir, TrainConfig};
use conceptlm::{DType, Error, Result, Scalar};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, PipelineConfig};
use crate::manifest::{GridPoint, ManifestStore, RunEntry, RunStatus};

pub const RUN_ROOT_ENV: &str = "CONCEPTLM_RUN_ROOT";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Heldout,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Pretrain, Split::Train, Split::Heldout];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

/// Flag > environment > config file > `./runs`.
pub fn resolve_run_root(flag: Option<&Path>, cfg: &PipelineConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(RUN_ROOT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.run_root
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn domain_profile(train_profile: Profile, domain: DomainTag) -> Profile {
    match domain {
        DomainTag::InDomain => train_profile,
        DomainTag::Ood => train_profile.other(),
    }
}

/// Evaluation stored next to each model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEval {
    pub report: EvalReport,
    /// Model the intervals are measured against, once computed.
    pub reference: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub total: usize,
    pub trained: usize,
    pub skipped_done: usize,
    pub failed: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalSummary {
    pub evaluated: usize,
    pub already_done: usize,
    /// Runs that were not finished, with their status.
    pub skipped: Vec<(String, RunStatus)>,
    pub failed: Vec<(String, String)>,
}

pub struct Workspace {
    pub root: PathBuf,
    pub cfg: PipelineConfig,
    store: ManifestStore,
}

impl Workspace {
    /// Opens (creating if needed) a run root. A root remembers the config it
    /// was created with and refuses a different one.
    pub fn open(root: &Path, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(root)?;
        let snap = root.join(CONFIG_SNAPSHOT);
        let mut stored = cfg.clone();
        stored.run_root = None;
        if snap.exists() {
            let prev = PipelineConfig::load(&snap)?;
            if prev != stored {
                return Err(Error::config(format!(
                    "{} was created with a different config (see {}); use a fresh run root",
                    root.display(),
                    snap.display()
                )));
            }
        } else {
            write_atomic(&snap, stored.to_toml()?.as_bytes())?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            store: ManifestStore::new(root),
            cfg,
        })
    }

    pub fn manifest(&self) -> &ManifestStore {
        &self.store
    }

    fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.data_dir().join("vocab.json")
    }

    pub fn similarity_path(&self) -> PathBuf {
        self.data_dir().join("similarity.csv")
    }

    pub fn split_path(&self, profile: Profile, split: Split) -> PathBuf {
        self.data_dir()
            .join(profile.as_str())
            .join(format!("{}.jsonl", split.as_str()))
    }

    pub fn base_dir(&self, profile: Profile, size: &str) -> PathBuf {
        self.root
            .join("base")
            .join(format!("{}-{size}", profile.as_str()))
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.root.join("runs").join(id)
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed_str(self.cfg.seed, label)
    }

    fn require(path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact(path.to_path_buf()))
        }
    }

    // ---- corpus ----

    /// Writes the vocabulary, the similarity benchmark and every split of both
    /// profiles. Existing files are kept. Returns the paths written.
    pub fn gen_corpus(&self) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        std::fs::create_dir_all(self.data_dir())?;
        let vocab = if self.vocab_path().exists() {
            Vocabulary::load(&self.vocab_path())?
        } else {
            let v = conceptlm::corpus::build_vocabulary(&self.cfg.vocab_config())?;
            v.save(&self.vocab_path())?;
            written.push(self.vocab_path());
            v
        };
        if !self.similarity_path().exists() {
            ground_truth_similarity(&vocab).save_csv(&self.similarity_path(), &vocab)?;
            written.push(self.similarity_path());
        }
        let c = &self.cfg.corpus;
        for profile in [Profile::A, Profile::B] {
            for split in Split::ALL {
                let path = self.split_path(profile, split);
                if path.exists() {
                    continue;
                }
                let n = match split {
                    Split::Pretrain => c.pretrain_sequences,
                    Split::Train => c.train_sequences,
                    Split::Heldout => c.heldout_sequences,
                };
                let seed = self.seed(&format!("corpus/{}/{}", profile.as_str(), split.as_str()));
                let corpus = generate_corpus_with(
                    &vocab,
                    &c.grammar,
                    n,
                    profile,
                    c.target_content_fraction,
                    seed,
                )?;
                std::fs::create_dir_all(path.parent().expect("split has a parent"))?;
                export_corpus(&path, &corpus.sequences, &vocab)?;
                written.push(path);
            }
        }
        Ok(written)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Self::require(&self.vocab_path())?;
        Vocabulary::load(&self.vocab_path())
    }

    pub fn benchmark(&self, vocab: &Vocabulary) -> Result<GroundTruthSimilarity> {
        Self::require(&self.similarity_path())?;
        GroundTruthSimilarity::load_csv(&self.similarity_path(), vocab)
    }

    fn ingest_opts(&self) -> IngestOptions {
        IngestOptions {
            synonym_cap: self.cfg.concepts.synonym_cap,
            min_tokens: self.cfg.corpus.grammar.min_len,
        }
    }

    fn read_annotated(&self, path: &Path, vocab: &Vocabulary) -> Result<Vec<AnnotatedSequence>> {
        Self::require(path)?;
        let (items, report) = ingest_annotated(path, vocab, self.ingest_opts())?;
        if report.dropped_short > 0 {
            log::warn!(
                "{}: dropped {} short records",
                path.display(),
                report.dropped_short
            );
        }
        Ok(items)
    }

    pub fn split(
        &self,
        profile: Profile,
        split: Split,
        vocab: &Vocabulary,
    ) -> Result<Vec<Sequence>> {
        Ok(self
            .read_annotated(&self.split_path(profile, split), vocab)?
            .into_iter()
            .map(|a| a.sequence)
            .collect())
    }

    // ---- base model and concept sets ----

    fn model_config(&self, size: &str, vocab: &Vocabulary) -> Result<ModelConfig> {
        ModelConfig::preset(size, vocab.len())
    }

    fn held_out_profiles(&self, profile: Profile) -> Vec<Profile> {
        if self.cfg.eval.ood {
            vec![profile, profile.other()]
        } else {
            vec![profile]
        }
    }

    pub fn concepts_path(&self, profile: Profile, size: &str) -> PathBuf {
        self.base_dir(profile, size).join("concepts.jsonl")
    }

    fn heldout_concepts_path(&self, profile: Profile, size: &str, heldout: Profile) -> PathBuf {
        self.base_dir(profile, size)
            .join(format!("heldout-{}.jsonl", heldout.as_str()))
    }

    pub fn base_checkpoint(&self, profile: Profile, size: &str) -> PathBuf {
        self.base_dir(profile, size).join("base.bin")
    }

    /// Pretrains the base model (if absent) and annotates the training split
    /// and the held-out splits with its top-K candidates filtered by the
    /// configured provider.
    pub fn build_concepts(&self, profile: Profile, size: &str) -> Result<()> {
        let vocab = self.vocab()?;
        match self.model_config(size, &vocab)?.dtype {
            DType::F32 => self.build_concepts_as::<f32>(profile, size, &vocab),
            DType::F64 => self.build_concepts_as::<f64>(profile, size, &vocab),
        }
    }

    fn build_concepts_as<F: Scalar>(
        &self,
        profile: Profile,
        size: &str,
        vocab: &Vocabulary,
    ) -> Result<()> {
        let dir = self.base_dir(profile, size);
        std::fs::create_dir_all(&dir)?;
        let label = format!("{}/{size}", profile.as_str());
        let base_path = self.base_checkpoint(profile, size);
        let base: ModelParams<F> = if base_path.exists() {
            load_params(&base_path)?
        } else {
            let pre: Vec<AnnotatedSequence> = self
                .split(profile, Split::Pretrain, vocab)?
                .into_iter()
                .map(AnnotatedSequence::unannotated)
                .collect();
            let p = &self.cfg.pretrain;
            let cfg = TrainConfig {
                learning_rate: p.learning_rate,
                batch_size: p.batch_size,
                max_epochs: p.epochs,
                early_stop_patience: 0,
                seed: self.seed(&format!("pretrain/{label}")),
                objective: ObjectiveConfig::with_weight(0.0),
                ..TrainConfig::default()
            };
            let init = init_params::<F>(
                self.model_config(size, vocab)?,
                self.seed(&format!("init/{label}")),
            )?;
            let (params, log) = train_in_dir(init, &pre, &cfg, &dir.join("pretrain"))?;
            save_params(
                &base_path,
                &params,
                &serde_json::json!({"kind": "base", "best_epoch": log.best_epoch}),
            )?;
            params
        };
        let provider = match self.cfg.concepts.provider {
            crate::config::ProviderKind::Oracle => FilterProvider::Oracle,
            crate::config::ProviderKind::External => FilterProvider::External(
                ExternalProvider::new(self.cfg.concepts.external.as_ref().expect("validated"))?,
            ),
        };
        let (k, cap) = (self.cfg.concepts.candidates, self.cfg.concepts.synonym_cap);
        let mut targets = vec![(self.concepts_path(profile, size), profile, Split::Train)];
        for h in self.held_out_profiles(profile) {
            targets.push((
                self.heldout_concepts_path(profile, size, h),
                h,
                Split::Heldout,
            ));
        }
        let mut reports: BTreeMap<String, BuildReport> = BTreeMap::new();
        let report_path = dir.join("build_report.json");
        if report_path.exists() {
            reports = serde_json::from_slice(&std::fs::read(&report_path)?)?;
        }
        for (path, corpus_profile, split) in targets {
            if path.exists() {
                continue;
            }
            let corpus = self.split(corpus_profile, split, vocab)?;
            let (dataset, report) = build_dataset(&base, &corpus, &provider, vocab, k, cap)?;
            log::info!("{}: {report:?}", path.display());
            export_annotated(&path, &dataset, vocab)?;
            reports.insert(
                path.file_name()
                    .expect("file")
                    .to_string_lossy()
                    .into_owned(),
                report,
            );
            write_atomic(
                &report_path,
                serde_json::to_string_pretty(&reports)?.as_bytes(),
            )?;
        }
        Ok(())
    }

    // ---- runs ----

    fn run_seed(&self, id: &str) -> u64 {
        self.seed(&format!("run/{id}"))
    }

    /// Adds the points to the manifest (existing entries are kept) and returns
    /// their ids in the given order.
    pub fn register(&self, points: &[GridPoint]) -> Result<Vec<String>> {
        let seeds: Vec<u64> = points.iter().map(|p| self.run_seed(&p.run_id())).collect();
        self.store.update(|m| {
            m.master_seed = self.cfg.seed;
            for (p, &s) in points.iter().zip(&seeds) {
                m.ensure(p.clone(), s);
            }
            Ok(())
        })?;
        Ok(points.iter().map(GridPoint::run_id).collect())
    }

    /// Every point of the configured sweep, deduplicated, in a fixed order.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        let s = &self.cfg.sweep;
        for &profile in &s.profiles {
            for size in &s.model_sizes {
                for g in &s.grid {
                    for &proportion in &g.proportions {
                        for &mode in &g.modes {
                            for &lambda in &g.lambdas {
                                let p = GridPoint {
                                    lambda,
                                    mode,
                                    proportion,
                                    profile,
                                    model_size: size.clone(),
                                };
                                if seen.insert(p.run_id()) {
                                    out.push(p);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn run_dataset(
        &self,
        entry: &RunEntry,
        vocab: &Vocabulary,
    ) -> Result<(Vec<AnnotatedSequence>, SubsampleReport)> {
        let p = &entry.point;
        let label = format!("{}/{}", p.profile.as_str(), p.model_size);
        let mut data = self.read_annotated(&self.concepts_path(p.profile, &p.model_size), vocab)?;
        if p.mode == Mode::Noise {
            data = randomize_synonyms(&data, self.seed(&format!("noise/{label}")))?;
        }
        let seed = self.seed(&format!("subsample/{label}/{}", p.proportion.as_str()));
        Ok(subsample_supervision(&data, p.proportion, seed))
    }

    fn train_config(&self, entry: &RunEntry) -> TrainConfig {
        let mut cfg = self.cfg.train.clone();
        cfg.seed = entry.seed;
        cfg.objective.concept_weight = entry.point.lambda;
        if entry.point.mode == Mode::Noise {
            cfg.objective.include_original_in_mass = self.cfg.sweep.noise_include_original;
        }
        cfg
    }

    fn execute(&self, entry: &RunEntry) -> Result<BTreeMap<String, PathBuf>> {
        let vocab = self.vocab()?;
        let p = &entry.point;
        let dir = self.run_dir(&entry.id);
        std::fs::create_dir_all(&dir)?;
        let (data, sub) = self.run_dataset(entry, &vocab)?;
        let cfg = self.train_config(entry);
        write_atomic(
            &dir.join("run.json"),
            serde_json::to_string_pretty(&serde_json::json!({
                "point": p, "train": cfg, "subsample": sub,
            }))?
            .as_bytes(),
        )?;
        let base = self.base_checkpoint(p.profile, &p.model_size);
        Self::require(&base)?;
        match self.model_config(&p.model_size, &vocab)?.dtype {
            DType::F32 => {
                train_in_dir(load_params::<f32>(&base)?, &data, &cfg, &dir)?;
            }
            DType::F64 => {
                train_in_dir(load_params::<f64>(&base)?, &data, &cfg, &dir)?;
            }
        }
        let rel = |name: &str| PathBuf::from("runs").join(&entry.id).join(name);
        Ok(BTreeMap::from([
            (
                "checkpoint".to_string(),
                rel(conceptlm::trainer::files::BEST),
            ),
            ("steps".to_string(), rel(conceptlm::trainer::files::STEPS)),
            ("log".to_string(), rel(conceptlm::trainer::files::LOG)),
        ]))
    }

    /// Trains the listed runs that are not finished. Failures are recorded in
    /// the manifest and do not stop the others.
    pub fn run_all(&self, ids: &[String]) -> Result<SweepSummary> {
        let manifest = self.store.load()?;
        let mut summary = SweepSummary {
            total: ids.len(),
            ..SweepSummary::default()
        };
        let mut todo = Vec::new();
        for id in ids {
            let e = manifest
                .get(id)
                .ok_or_else(|| Error::config(format!("run {id} not in manifest")))?;
            match e.status {
                RunStatus::Done => summary.skipped_done += 1,
                RunStatus::Failed => summary
                    .failed
                    .push((id.clone(), e.message.clone().unwrap_or_default())),
                RunStatus::Pending | RunStatus::Running => todo.push(e.clone()),
            }
        }
        let results: Vec<(String, Result<BTreeMap<String, PathBuf>>)> = todo
            .par_iter()
            .map(|e| {
                let r = self
                    .store
                    .update(|m| m.set_status(&e.id, RunStatus::Running, None))
                    .and_then(|_| self.execute(e));
                (e.id.clone(), r)
            })
            .collect();
        for (id, r) in results {
            match r {
                Ok(artifacts) => {
                    self.store.update(|m| {
                        m.set_status(&id, RunStatus::Done, None)?;
                        m.get_mut(&id).expect("present").artifacts = artifacts;
                        Ok(())
                    })?;
                    summary.trained += 1;
                }
                Err(err) => {
                    let msg = err.to_string();
                    log::error!("run {id} failed: {msg}");
                    self.store
                        .update(|m| m.set_status(&id, RunStatus::Failed, Some(msg.clone())))?;
                    summary.failed.push((id, msg));
                }
            }
        }
        Ok(summary)
    }

    /// Corpus, concept sets and every configured run, skipping finished work.
    pub fn sweep(&self) -> Result<SweepSummary> {
        self.gen_corpus()?;
        for &profile in &self.cfg.sweep.profiles {
            for size in &self.cfg.sweep.model_sizes {
                self.build_concepts(profile, size)?;
            }
        }
        let ids = self.register(&self.grid_points())?;
        self.run_all(&ids)
    }

    // ---- evaluation ----

    fn eval_path(dir: &Path, domain: DomainTag) -> PathBuf {
        dir.join(format!("eval-{domain}.json"))
    }

    fn records_path(dir: &Path, domain: DomainTag) -> PathBuf {
        dir.join(format!("records-{domain}.jsonl"))
    }

    fn domains(&self) -> Vec<DomainTag> {
        if self.cfg.eval.ood {
            vec![DomainTag::InDomain, DomainTag::Ood]
        } else {
            vec![DomainTag::InDomain]
        }
    }

    fn evaluate_into<F: Scalar>(
        &self,
        params: &ModelParams<F>,
        name: &str,
        profile: Profile,
        size: &str,
        dir: &Path,
        vocab: &Vocabulary,
        bench: &GroundTruthSimilarity,
    ) -> Result<bool> {
        let mut any = false;
        let templates = probe_templates(vocab);
        for domain in self.domains() {
            let out = Self::eval_path(dir, domain);
            if out.exists() {
                continue;
            }
            let corpus_profile = domain_profile(profile, domain);
            let held = self.split(corpus_profile, Split::Heldout, vocab)?;
            let annotated = self.read_annotated(
                &self.heldout_concepts_path(profile, size, corpus_profile),
                vocab,
            )?;
            let inputs = EvalInputs {
                held_out: &held,
                annotated: &annotated,
                benchmark: bench,
                templates: &templates,
                cluster_sample: self.cfg.eval.cluster_sample,
                seed: self.seed(&format!("cluster/{}", corpus_profile.as_str())),
            };
            let (report, records) = evaluate(params, name, domain, &inputs)?;
            conceptlm::eval::write_records_jsonl(&Self::records_path(dir, domain), &records)?;
            let stored = StoredEval {
                report,
                reference: None,
            };
            write_atomic(&out, serde_json::to_string_pretty(&stored)?.as_bytes())?;
            any = true;
        }
        Ok(any)
    }

    fn evaluate_checkpoint(
        &self,
        ckpt: &Path,
        name: &str,
        profile: Profile,
        size: &str,
        dir: &Path,
        vocab: &Vocabulary,
        bench: &GroundTruthSimilarity,
    ) -> Result<bool> {
        Self::require(ckpt)?;
        match self.model_config(size, vocab)?.dtype {
            DType::F32 => self.evaluate_into(
                &load_params::<f32>(ckpt)?,
                name,
                profile,
                size,
                dir,
                vocab,
                bench,
            ),
            DType::F64 => self.evaluate_into(
                &load_params::<f64>(ckpt)?,
                name,
                profile,
                size,
                dir,
                vocab,
                bench,
            ),
        }
    }

    /// Evaluates the base models and the finished runs (all, or the one named).
    /// Unfinished runs are skipped; a missing checkpoint is a per-run failure.
    pub fn eval(&self, target: Option<&str>) -> Result<EvalSummary> {
        let vocab = self.vocab()?;
        let bench = self.benchmark(&vocab)?;
        let manifest = self.store.load()?;
        let runs: Vec<&RunEntry> = match target {
            None => manifest.runs.iter().collect(),
            Some(id) => vec![manifest
                .get(id)
                .ok_or_else(|| Error::config(format!("run {id} not in manifest")))?],
        };
        let mut summary = EvalSummary::default();
        let mut bases = std::collections::BTreeSet::new();
        for r in &runs {
            bases.insert((r.point.profile, r.point.model_size.clone()));
        }
        for (profile, size) in &bases {
            let dir = self.base_dir(*profile, size);
            self.evaluate_checkpoint(
                &self.base_checkpoint(*profile, size),
                "base",
                *profile,
                size,
                &dir,
                &vocab,
                &bench,
            )?;
            let artifacts = self.eval_artifacts(&dir)?;
            let key = base_key(*profile, size);
            self.store.update(|m| {
                let e = m.bases.entry(key).or_default();
                e.insert(
                    "checkpoint".into(),
                    self.relative(&self.base_checkpoint(*profile, size)),
                );
                e.extend(artifacts);
                Ok(())
            })?;
        }
        for r in &runs {
            if r.status != RunStatus::Done {
                summary.skipped.push((r.id.clone(), r.status));
                continue;
            }
            let dir = self.run_dir(&r.id);
            let ckpt = r
                .artifacts
                .get("checkpoint")
                .map(|p| self.root.join(p))
                .unwrap_or_else(|| dir.join(conceptlm::trainer::files::BEST));
            match self.evaluate_checkpoint(
                &ckpt,
                &r.id,
                r.point.profile,
                &r.point.model_size,
                &dir,
                &vocab,
                &bench,
            ) {
                Ok(true) => summary.evaluated += 1,
                Ok(false) => summary.already_done += 1,
                Err(e) => {
                    log::error!("eval of {} failed: {e}", r.id);
                    summary.failed.push((r.id.clone(), e.to_string()));
                }
            }
        }
        for r in &runs {
            if r.status != RunStatus::Done || summary.failed.iter().any(|(id, _)| id == &r.id) {
                continue;
            }
            let done = self.attach_intervals(r).and_then(|_| {
                let artifacts = self.eval_artifacts(&self.run_dir(&r.id))?;
                self.store.update(|m| {
                    m.get_mut(&r.id)
                        .expect("present")
                        .artifacts
                        .extend(artifacts);
                    Ok(())
                })
            });
            if let Err(e) = done {
                log::error!("intervals for {} failed: {e}", r.id);
                summary.failed.push((r.id.clone(), e.to_string()));
            }
        }
        Ok(summary)
    }

    fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }

    /// `eval-<domain>` and `records-<domain>` entries for a model directory.
    fn eval_artifacts(&self, dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        for domain in self.domains() {
            let e = Self::eval_path(dir, domain);
            let r = Self::records_path(dir, domain);
            Self::require(&e)?;
            Self::require(&r)?;
            out.insert(format!("eval-{domain}"), self.relative(&e));
            out.insert(format!("records-{domain}"), self.relative(&r));
        }
        Ok(out)
    }

    /// Content-word intervals of `run - base`, the run's own starting point.
    fn attach_intervals(&self, r: &RunEntry) -> Result<()> {
        let dir = self.run_dir(&r.id);
        let ref_name = "base".to_string();
        let ref_dir = self.base_dir(r.point.profile, &r.point.model_size);
        for domain in self.domains() {
            let path = Self::eval_path(&dir, domain);
            let mut stored: StoredEval = serde_json::from_slice(&std::fs::read(&path)?)?;
            if stored.reference.as_deref() == Some(ref_name.as_str())
                && !stored.report.cis.is_empty()
            {
                continue;
            }
            let ref_records = read_records(&Self::records_path(&ref_dir, domain))?;
            let records = read_records(&Self::records_path(&dir, domain))?;
            stored.report.cis = content_cis(
                &ref_records,
                &records,
                self.cfg.eval.bootstrap_resamples,
                self.cfg.eval.level,
                self.seed(&format!("bootstrap/{}/{domain}", r.id)),
            )?;
            stored.reference = Some(ref_name.clone());
            write_atomic(&path, serde_json::to_string_pretty(&stored)?.as_bytes())?;
        }
        Ok(())
    }

    pub fn domains_evaluated(&self) -> Vec<DomainTag> {
        self.domains()
    }
}

pub fn base_key(profile: Profile, size: &str) -> String {
    format!("{}-{size}", profile.as_str())
}

pub fn read_stored_eval(path: &Path) -> Result<StoredEval> {
    Workspace::require(path)?;
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn read_records(path: &Path) -> Result<Vec<PerTokenRecord>> {
    Workspace::require(path)?;
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
