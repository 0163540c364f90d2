//! Experiment configuration and the staged, resumable pipeline that turns a
//! config into an artifact tree.
//!
//! Every stage hashes what it reads (its config section, the master seed and
//! the content hashes of its parent artifacts). A stamp under `stages/`
//! records that hash together with the hashes of the files the stage wrote;
//! with `resume` set, a stage whose stamp still matches is skipped.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Provenance};
use crate::conditioning::{ConceptWorld, WorldConfig};
use crate::diffusion::{train_denoiser, NoiseSchedule, Sampler, ScheduleConfig, TrainConfig};
use crate::erasure::{erase, ErasureHyper, ErasureMethod, ErasureSpec};
use crate::evaluation::ablation::{end_mean, from_candidate_sets};
use crate::evaluation::{
    build_transfer_matrix, column_seed, embedding_atlas, train_classifier, AblationTrace, Attack, AttackInput,
    AttackInputs, AtlasReport, ClassifierConfig, ConceptClassifier, EvalModel, Evaluator, LabelStats,
    TransferMatrix,
};
use crate::model::{hex, DenoiserModel, ModelConfig};
use crate::par;
use crate::report;
use crate::restoration::{
    adversarial_search, search_seed, select_candidate, textual_inversion, AsConfig, CandidateSet, Pick,
    SelectionMode, TiConfig,
};
use crate::rng::{derive_seed, label_key, Stream};
use crate::{Error, Result};

pub const BASE_ID: &str = "base";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Samples per transfer-matrix cell and per ablation record.
    pub n: usize,
    /// Samples per candidate when scoring `best_of_v` selection.
    pub select_n: usize,
    pub sampler: Sampler,
    pub record_every: usize,
    pub selection: Vec<SelectionMode>,
    /// Textual-inversion restarts per model for the atlas.
    pub atlas_restarts: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            n: 500,
            select_n: 100,
            sampler: Sampler::default(),
            record_every: 10,
            selection: vec![SelectionMode::FinalLoss, SelectionMode::BestOfV],
            atlas_restarts: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Concept erased by every method and restored by every attack.
    pub target: usize,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classifier: ClassifierConfig,
    pub erasures: Vec<ErasureHyper>,
    pub textual_inversion: TiConfig,
    pub search: AsConfig,
    pub evaluation: EvaluationConfig,
    /// Where the artifact tree goes when no directory is given explicitly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = WorldConfig::default();
        Self {
            seed: 0,
            target: 0,
            model: ModelConfig::for_vocab(world.num_concepts),
            world,
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            classifier: ClassifierConfig::default(),
            erasures: ErasureMethod::ALL.iter().map(|&m| ErasureHyper::defaults(m)).collect(),
            textual_inversion: TiConfig::default(),
            search: AsConfig::default(),
            evaluation: EvaluationConfig::default(),
            output_dir: None,
        }
    }
}

fn sha_json(value: &impl Serialize) -> String {
    hex(&Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

fn file_sha(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

impl ExperimentConfig {
    /// Parses a JSON document; errors point at the offending line.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let (line, col) = (e.line(), e.column());
            let src = text.lines().nth(line.saturating_sub(1)).unwrap_or("");
            let msg = e.to_string();
            let msg = msg.rsplit_once(" at line ").map_or(msg.as_str(), |(m, _)| m);
            Error::Config(format!("{origin}:{line}:{col}: {msg}\n{line:>5} | {src}"))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> Result<String> {
        report::to_json(self)
    }

    /// Hash of everything except the output location.
    pub fn hash(&self) -> String {
        sha_json(&Self {
            output_dir: None,
            ..self.clone()
        })
    }

    pub fn erasure_specs(&self) -> Vec<ErasureSpec> {
        self.erasures
            .iter()
            .map(|h| ErasureSpec {
                method: h.method(),
                target: self.target,
                hyper: h.clone(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let k = self.world.num_concepts;
        if k < 2 {
            return bad("world needs at least two concepts".into());
        }
        if self.target >= k {
            return bad(format!("target {} is not one of the {k} concepts", self.target));
        }
        if self.model.num_concepts != k {
            return bad(format!(
                "model vocabulary has {} concepts but the world has {k}",
                self.model.num_concepts
            ));
        }
        let specs = self.erasure_specs();
        for (i, s) in specs.iter().enumerate() {
            s.validate(k)?;
            if specs[..i].iter().any(|o| o.id() == s.id()) {
                return bad(format!("erasure `{}` listed twice", s.id()));
            }
        }
        self.search.validate()?;
        let e = &self.evaluation;
        if e.n == 0 || e.select_n == 0 || e.record_every == 0 || e.atlas_restarts == 0 {
            return bad("evaluation counts must be at least 1".into());
        }
        if e.selection.is_empty() {
            return bad("at least one selection mode is required".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
    /// `(stage, model id)` for every model checkpoint a stage read.
    pub model_reads: Vec<(String, String)>,
}

impl RunLog {
    pub fn reads_of(&self, stage: &str) -> Vec<&str> {
        self.model_reads
            .iter()
            .filter(|(s, _)| s == stage)
            .map(|(_, m)| m.as_str())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct StageStamp {
    provenance: Provenance,
    outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub mode: SelectionMode,
    pub models: Vec<String>,
    pub picks: Vec<Pick>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasSummary {
    /// Mean silhouette of the textual-inversion restarts grouped by model.
    pub ti_silhouette: Option<f64>,
    pub ti_labels: Vec<LabelStats>,
    pub as_spread: f64,
    pub ti_base_spread: f64,
    pub spread_ratio: f64,
    pub atlas: AtlasReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub with_end_mean: Vec<f64>,
    pub without_end_mean: Vec<f64>,
    /// Models on which the with-search end mean is at least the other.
    pub with_wins: usize,
    pub trace: AblationTrace,
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(other),
        },
    }
}

pub fn model_file(id: &str) -> String {
    if id == BASE_ID {
        "base.updm".into()
    } else {
        format!("erase-{id}.updm")
    }
}

pub fn ti_file(id: &str) -> String {
    format!("ti-{id}.updm")
}

pub struct Pipeline {
    config: ExperimentConfig,
    out: PathBuf,
    workers: usize,
    resume: bool,
    config_hash: String,
    world: ConceptWorld,
    sched: NoiseSchedule,
    log: RunLog,
}

impl Pipeline {
    /// Validates the config, creates the output tree and writes the
    /// effective config into it.
    pub fn new(config: ExperimentConfig, out: &Path, workers: usize, resume: bool) -> Result<Self> {
        config.validate()?;
        let world = ConceptWorld::generate(&config.world, config.seed)?;
        let sched = NoiseSchedule::from_config(&config.schedule)?;
        std::fs::create_dir_all(out.join("stages"))?;
        let effective = ExperimentConfig {
            output_dir: None,
            ..config.clone()
        };
        report::write_text(&out.join("config.json"), &effective.to_json()?)?;
        Ok(Self {
            config_hash: config.hash(),
            config,
            out: out.to_path_buf(),
            workers: workers.max(1),
            resume,
            world,
            sched,
            log: RunLog::default(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    /// `base` followed by every erasure id.
    pub fn model_ids(&self) -> Vec<String> {
        let mut ids = vec![BASE_ID.to_string()];
        ids.extend(self.config.erasure_specs().iter().map(ErasureSpec::id));
        ids
    }

    fn seed_for(&self, label: &str, extra: &[u64]) -> u64 {
        let mut keys = vec![label_key(label)];
        keys.extend_from_slice(extra);
        derive_seed(self.config.seed, &keys)
    }

    fn sidecar(&self, line: &str) {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        if let Ok(mut f) = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.out.join("run.log"))
        {
            let _ = writeln!(f, "{secs} {line}");
        }
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.out.join("stages").join(format!("{}.json", stage.replace(':', "-")))
    }

    fn stamp_matches(&self, stage: &str, input_hash: &str, outputs: &[String]) -> bool {
        let Ok(text) = std::fs::read_to_string(self.stamp_path(stage)) else {
            return false;
        };
        let Ok(stamp) = serde_json::from_str::<StageStamp>(&text) else {
            return false;
        };
        stamp.provenance.input_hash == input_hash
            && outputs.iter().all(|o| {
                stamp.outputs.get(o).is_some_and(|h| file_sha(&self.out.join(o)).is_ok_and(|f| &f == h))
            })
    }

    fn parent_hash(&self, stage: &str, file: &str) -> Result<String> {
        let path = self.out.join(file);
        if !path.exists() {
            return Err(stage_error(
                stage,
                Error::Config(format!("missing artifact `{file}`; run the stage that produces it first")),
            ));
        }
        file_sha(&path).map_err(|e| stage_error(stage, e))
    }

    fn run_stage<F>(
        &mut self,
        stage: &str,
        inputs: serde_json::Value,
        parent_files: &[String],
        outputs: &[String],
        compute: F,
    ) -> Result<()>
    where
        F: FnOnce(&mut Self, Provenance) -> Result<()>,
    {
        let parents = parent_files
            .iter()
            .map(|f| self.parent_hash(stage, f))
            .collect::<Result<Vec<_>>>()?;
        let input_hash = sha_json(&json!({
            "stage": stage,
            "seed": self.config.seed,
            "world": self.config.world,
            "schedule": self.config.schedule,
            "inputs": inputs,
            "parents": parents,
        }));
        if self.resume && self.stamp_matches(stage, &input_hash, outputs) {
            self.log.skipped.push(stage.to_string());
            self.sidecar(&format!("{stage} skipped"));
            return Ok(());
        }
        let prov = Provenance {
            stage: stage.to_string(),
            config_hash: self.config_hash.clone(),
            seed: self.config.seed,
            parents,
            input_hash,
            metadata: serde_json::Value::Null,
        };
        let started = Instant::now();
        compute(self, prov.clone()).map_err(|e| stage_error(stage, e))?;
        let outputs = outputs
            .iter()
            .map(|o| Ok((o.clone(), file_sha(&self.out.join(o))?)))
            .collect::<Result<BTreeMap<_, _>>>()
            .map_err(|e| stage_error(stage, e))?;
        let stamp = StageStamp {
            provenance: prov,
            outputs,
        };
        report::write_text(&self.stamp_path(stage), &report::to_json(&stamp)?)?;
        self.log.executed.push(stage.to_string());
        self.sidecar(&format!("{stage} executed in {:.2}s", started.elapsed().as_secs_f64()));
        Ok(())
    }

    fn load_model(&mut self, stage: &str, id: &str) -> Result<DenoiserModel> {
        self.log.model_reads.push((stage.to_string(), id.to_string()));
        Checkpoint::load(&self.out.join(model_file(id)))?.to_model()
    }

    fn load_classifier(&self) -> Result<ConceptClassifier> {
        Checkpoint::load(&self.out.join("classifier.updm"))?.to_classifier()
    }

    fn load_candidates(&self) -> Result<CandidateSet> {
        Checkpoint::load(&self.out.join("as.updm"))?.to_candidates()
    }

    fn load_ti(&self, id: &str) -> Result<Vec<Vec<f64>>> {
        Ok(Checkpoint::load(&self.out.join(ti_file(id)))?
            .to_embeddings()
            .into_iter()
            .map(|(_, v)| v)
            .collect())
    }

    fn write(&self, file: &str, content: &str) -> Result<()> {
        report::write_text(&self.out.join(file), content)
    }

    /// Trains the base denoiser and the evaluation classifier.
    pub fn train_base(&mut self) -> Result<()> {
        let c = &self.config;
        let inputs = json!({ "model": c.model, "train": c.train });
        self.run_stage("train-base", inputs, &[], &["base.updm".into()], |p, mut prov| {
            let c = &p.config;
            let mut model = DenoiserModel::new(&c.model, &mut Stream::labeled(c.seed, "base-init"));
            let rep = train_denoiser(&mut model, &p.world, &p.sched, &c.train, &mut Stream::labeled(c.seed, "base-train"))?;
            prov.metadata = json!({ "trailing_loss": rep.trailing_mean(100), "checksum": model.checksum() });
            Checkpoint::from_model(&model, prov)?.save(&p.out.join("base.updm"))?;
            Ok(())
        })?;
        let inputs = json!({ "classifier": self.config.classifier });
        self.run_stage("classifier", inputs, &[], &["classifier.updm".into()], |p, prov| {
            let clf = train_classifier(&p.world, &p.config.classifier, p.config.seed)?;
            Checkpoint::from_classifier(&clf, prov)?.save(&p.out.join("classifier.updm"))?;
            Ok(())
        })
    }

    /// Runs every configured erasure against the base model.
    pub fn erase(&mut self) -> Result<()> {
        for spec in self.config.erasure_specs() {
            let id = spec.id();
            let stage = format!("erase:{id}");
            let out = model_file(&id);
            let seed = self.seed_for("erase", &[label_key(&id)]);
            self.run_stage(&stage.clone(), json!({ "spec": spec }), &[model_file(BASE_ID)], &[out.clone()], |p, mut prov| {
                let base = p.load_model(&stage, BASE_ID)?;
                let unlearned = erase(&base, &p.world, &p.sched, &spec, seed)?;
                prov.metadata = json!({ "erasure": unlearned.provenance });
                Checkpoint::from_model(&unlearned.model, prov)?.save(&p.out.join(&out))?;
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Textual inversion on every model, with the configured restarts.
    pub fn attack_ti(&mut self) -> Result<()> {
        let restarts = self.config.evaluation.atlas_restarts;
        for id in self.model_ids() {
            let stage = format!("attack-ti:{id}");
            let out = ti_file(&id);
            let inputs = json!({ "ti": self.config.textual_inversion, "target": self.config.target, "restarts": restarts });
            self.run_stage(&stage.clone(), inputs, &[model_file(&id)], &[out.clone()], |p, prov| {
                let model = p.load_model(&stage, &id)?;
                let seeds: Vec<u64> = (0..restarts as u64)
                    .map(|r| p.seed_for("ti", &[label_key(&id), r]))
                    .collect();
                let (world, sched, cfg, target) = (&p.world, &p.sched, &p.config.textual_inversion, p.config.target);
                let found = par::map(&seeds, p.workers, |&s| textual_inversion(&model, world, sched, target, cfg, s));
                let items = found
                    .into_iter()
                    .enumerate()
                    .map(|(r, v)| Ok((format!("ti/{id}/{r}"), v?)))
                    .collect::<Result<Vec<_>>>()?;
                Checkpoint::from_embeddings(&items, prov).save(&p.out.join(&out))?;
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Adversarial search on the base model only.
    pub fn attack_as(&mut self) -> Result<()> {
        let inputs = json!({ "search": self.config.search, "target": self.config.target });
        let outputs = ["as.updm".to_string(), "as_candidates.csv".to_string()];
        self.run_stage("attack-as", inputs, &[model_file(BASE_ID)], &outputs, |p, prov| {
            let base = p.load_model("attack-as", BASE_ID)?;
            let c = &p.config;
            let set = adversarial_search(&base, &p.world, &p.sched, c.target, &c.search, search_seed(c.seed, c.target))?;
            Checkpoint::from_candidates(&set, prov)?.save(&p.out.join("as.updm"))?;
            p.write("as_candidates.csv", &report::candidates_csv(&set)?)
        })
    }

    fn evaluation_parents(&self, with_ti: bool) -> Vec<String> {
        let mut files = vec!["classifier.updm".to_string()];
        let ids = self.model_ids();
        files.extend(ids.iter().map(|id| model_file(id)));
        if with_ti {
            files.extend(ids.iter().map(|id| ti_file(id)));
        }
        files.push("as.updm".into());
        files
    }

    /// Candidate selection and the attack × model transfer matrix.
    pub fn evaluate(&mut self) -> Result<()> {
        let inputs = json!({ "evaluation": self.config.evaluation, "target": self.config.target });
        let outputs = ["transfer_matrix.csv", "transfer_matrix.json", "selection.json"].map(String::from);
        let parents = self.evaluation_parents(true);
        self.run_stage("evaluate", inputs, &parents, &outputs, |p, _| {
            let matrix = p.compute_matrix()?;
            p.write("transfer_matrix.csv", &report::matrix_csv(&matrix.0)?)?;
            p.write("transfer_matrix.json", &report::to_json(&matrix.0)?)?;
            p.write("selection.json", &report::to_json(&matrix.1)?)
        })
    }

    fn compute_matrix(&mut self) -> Result<(TransferMatrix, Vec<SelectionReport>)> {
        let ids = self.model_ids();
        let models: Vec<DenoiserModel> = ids
            .iter()
            .map(|id| self.load_model("evaluate", id))
            .collect::<Result<_>>()?;
        let clf = self.load_classifier()?;
        let set = self.load_candidates()?;
        let c = &self.config;
        let target = c.target;
        let eval = Evaluator {
            classifier: &clf,
            sched: &self.sched,
            sampler: c.evaluation.sampler,
            n: c.evaluation.n,
            workers: self.workers,
        };
        let scorer = Evaluator {
            n: c.evaluation.select_n,
            workers: 1,
            ..eval
        };
        let cols: Vec<EvalModel> = ids
            .iter()
            .zip(&models)
            .map(|(id, m)| EvalModel {
                id,
                model: m,
                unlearned: id != BASE_ID,
            })
            .collect();

        let mut attacks = vec![Attack {
            id: "literal".into(),
            inputs: AttackInputs::Shared(AttackInput::Token(target)),
        }];
        for id in &ids {
            let v = self.load_ti(id)?.into_iter().next().ok_or_else(|| Error::Corrupt(ti_file(id)))?;
            attacks.push(Attack {
                id: format!("ti-{id}"),
                inputs: AttackInputs::Shared(AttackInput::Embedding(v)),
            });
        }
        let select_seed = self.seed_for("select", &[]);
        let mut selections = Vec::new();
        for &mode in &c.evaluation.selection {
            let picks = select_candidate(&set, mode, cols.len(), self.workers, |m, v| {
                let input = AttackInput::Embedding(v.to_vec());
                Ok(scorer
                    .restoration_accuracy(cols[m].model, &input, target, column_seed(select_seed, cols[m].id))?
                    .accuracy)
            })?;
            attacks.push(Attack {
                id: format!("as-{}", mode.tag()),
                inputs: AttackInputs::PerModel(picks.iter().map(|p| AttackInput::Embedding(p.embedding.clone())).collect()),
            });
            selections.push(SelectionReport {
                mode,
                models: ids.clone(),
                picks,
            });
        }
        let matrix = build_transfer_matrix(&eval, &cols, &attacks, target, self.seed_for("evaluate", &[]))?;
        Ok((matrix, selections))
    }

    /// PCA atlas of the textual-inversion restarts and the search candidates.
    pub fn atlas(&mut self) -> Result<()> {
        let mut parents: Vec<String> = self.model_ids().iter().map(|id| ti_file(id)).collect();
        parents.push("as.updm".into());
        let outputs = ["atlas.csv", "atlas.svg", "atlas.json"].map(String::from);
        self.run_stage("atlas", json!({}), &parents, &outputs, |p, _| {
            let mut ti_items = Vec::new();
            for id in p.model_ids() {
                for v in p.load_ti(&id)? {
                    ti_items.push((format!("ti-{id}"), v));
                }
            }
            let set = p.load_candidates()?;
            let mut all = ti_items.clone();
            all.extend(set.entries.iter().map(|c| ("as".to_string(), c.embedding.clone())));
            let atlas = embedding_atlas(&all)?;
            let ti_atlas = embedding_atlas(&ti_items)?;
            let as_spread = atlas.label("as").map_or(0.0, |l| l.centroid_spread);
            let ti_base_spread = ti_atlas.label(&format!("ti-{BASE_ID}")).map_or(0.0, |l| l.centroid_spread);
            let summary = AtlasSummary {
                ti_silhouette: ti_atlas.silhouette,
                ti_labels: ti_atlas.labels,
                as_spread,
                ti_base_spread,
                spread_ratio: if ti_base_spread > 0.0 {
                    as_spread / ti_base_spread
                } else {
                    f64::INFINITY
                },
                atlas,
            };
            p.write("atlas.csv", &report::atlas_csv(&summary.atlas)?)?;
            p.write("atlas.svg", &report::atlas_svg(&summary.atlas))?;
            p.write("atlas.json", &report::to_json(&summary)?)
        })
    }

    /// Restoration accuracy along the search with and without parameter
    /// phases, scored on every unlearned model.
    pub fn ablate(&mut self) -> Result<()> {
        let inputs = json!({
            "evaluation": self.config.evaluation,
            "search": self.config.search,
            "target": self.config.target,
        });
        let parents = self.evaluation_parents(false);
        let outputs = ["ablation.csv", "ablation.svg", "ablation.json"].map(String::from);
        self.run_stage("ablate", inputs, &parents, &outputs, |p, _| {
            let summary = p.compute_ablation()?;
            p.write("ablation.csv", &report::ablation_csv(&summary.trace)?)?;
            p.write("ablation.svg", &report::ablation_svg(&summary.trace))?;
            p.write("ablation.json", &report::to_json(&summary)?)
        })
    }

    fn compute_ablation(&mut self) -> Result<AblationSummary> {
        let base = self.load_model("ablate", BASE_ID)?;
        let ids: Vec<String> = self.model_ids().into_iter().filter(|id| id != BASE_ID).collect();
        let models: Vec<DenoiserModel> = ids
            .iter()
            .map(|id| self.load_model("ablate", id))
            .collect::<Result<_>>()?;
        let clf = self.load_classifier()?;
        let with = self.load_candidates()?;
        let c = &self.config;
        let no_search = AsConfig {
            adversarial: false,
            ..c.search.clone()
        };
        let without = adversarial_search(&base, &self.world, &self.sched, c.target, &no_search, search_seed(c.seed, c.target))?;
        let eval = Evaluator {
            classifier: &clf,
            sched: &self.sched,
            sampler: c.evaluation.sampler,
            n: c.evaluation.n,
            workers: self.workers,
        };
        let cols: Vec<EvalModel> = ids
            .iter()
            .zip(&models)
            .map(|(id, m)| EvalModel {
                id,
                model: m,
                unlearned: true,
            })
            .collect();
        let trace = from_candidate_sets(&with, &without, &eval, &cols, c.evaluation.record_every, self.seed_for("ablate", &[]))?;
        let with_end_mean = end_mean(&trace.with_search);
        let without_end_mean = end_mean(&trace.without_search);
        let with_wins = with_end_mean.iter().zip(&without_end_mean).filter(|(a, b)| a >= b).count();
        Ok(AblationSummary {
            with_end_mean,
            without_end_mean,
            with_wins,
            trace,
        })
    }

    /// Every stage in order.
    pub fn run(&mut self) -> Result<()> {
        self.train_base()?;
        self.erase()?;
        self.attack_ti()?;
        self.attack_as()?;
        self.evaluate()?;
        self.atlas()?;
        self.ablate()
    }
}

/// Checkpoint metadata as pretty-printed JSON.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    report::to_json(&json!({
        "path": path.display().to_string(),
        "format_version": crate::checkpoint::FORMAT_VERSION,
        "content_hash": hex(&Sha256::digest(&bytes)),
        "provenance": ckpt.provenance,
        "tensors": ckpt.tensors.iter().map(|t| json!({ "name": t.name, "shape": t.shape })).collect::<Vec<_>>(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json().unwrap(), "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let partial = ExperimentConfig::from_json(r#"{ "seed": 3, "search": { "epochs": 20 } }"#, "mem").unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.search.epochs, 20);
        assert_eq!(partial.search.embed_iters, AsConfig::default().embed_iters);
        assert_ne!(partial.hash(), c.hash());
    }

    #[test]
    fn output_dir_does_not_change_the_hash() {
        let c = ExperimentConfig::default();
        let d = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..c.clone()
        };
        assert_eq!(c.hash(), d.hash());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let text = "{\n  \"seed\": 1,\n  \"target\": \"x\"\n}";
        let err = ExperimentConfig::from_json(text, "cfg.json").unwrap_err().to_string();
        assert!(err.contains("cfg.json:3:"), "{err}");
        assert!(err.contains("\"target\": \"x\""), "{err}");
        let err = ExperimentConfig::from_json("{ \"sed\": 1 }", "cfg.json").unwrap_err().to_string();
        assert!(err.contains("unknown field"), "{err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ExperimentConfig {
                target: 6,
                ..Default::default()
            },
            ExperimentConfig {
                model: ModelConfig::for_vocab(5),
                ..Default::default()
            },
            ExperimentConfig {
                erasures: vec![ErasureHyper::defaults(ErasureMethod::Esd); 2],
                ..Default::default()
            },
            ExperimentConfig {
                evaluation: EvaluationConfig {
                    selection: Vec::new(),
                    ..Default::default()
                },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn missing_parent_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::new(ExperimentConfig::default(), dir.path(), 1, false).unwrap();
        match p.attack_as() {
            Err(Error::Stage { stage, source }) => {
                assert_eq!(stage, "attack-as");
                assert!(source.to_string().contains("base.updm"));
            }
            other => panic!("{other:?}"),
        }
        assert!(dir.path().join("config.json").exists());
    }
}
