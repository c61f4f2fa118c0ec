//! Config-driven experiment pipeline.
//!
//! Every stage writes into `out_dir/<stage>-<fingerprint>`, where the
//! fingerprint hashes the canonical JSON of exactly the configuration that
//! stage depends on, including its upstream fingerprints. A stage finds its
//! inputs by recomputing the upstream fingerprint and reading that
//! directory's `manifest.json`; the manifest is written last, so its
//! presence marks a completed stage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::artifact::sha256_hex;
use crate::autodiff::Tensor;
use crate::corpus::{generate_corpus, split, CorpusConfig, Dataset, DatasetSplits};
use crate::decoding::{DecodeConfig, Strategy};
use crate::defense::{apply_edit, evaluate_defense, fit_rank_one_edit, DefenseReport, EditConfig};
use crate::error::{Error, Result};
use crate::losses::{Component, LossStack};
use crate::metrics::{self, csv_field, ExtractionReport, ER_KS};
use crate::model::{pretrain_victim, ModelConfig, PretrainConfig, VictimModel};
use crate::transfer::{evaluate_transfer, TransferReport};
use crate::tuner::{
    init_soft_prompt, load_soft_prompt, save_soft_prompt, train_soft_prompt, SoftPrompt,
    TrainConfig,
};

/// Environment variable capping grid parallelism.
pub const THREADS_ENV: &str = "COSPED_THREADS";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Share of pairs in the attacker's tuning split.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratio: 0.5,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Strategies compared in the decoding table; each reuses `decode` with
    /// only the strategy swapped.
    pub strategies: Vec<Strategy>,
    pub ks: Vec<usize>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            strategies: Strategy::ALL.to_vec(),
            ks: ER_KS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    /// The wider victim the prompt is moved to; same vocabulary.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            model: ModelConfig {
                model_dim: 96,
                ff_dim: 384,
                seed: 43,
                ..Default::default()
            },
            pretrain: PretrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Stacks to run; empty means the 17-row table (MLE plus 16 combinations).
    pub stacks: Vec<LossStack>,
}

impl GridConfig {
    pub fn stacks(&self) -> Vec<LossStack> {
        if self.stacks.is_empty() {
            LossStack::grid()
        } else {
            self.stacks.clone()
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment. `seed` is required and drives everything on the attack
/// side (prompt init, tuning order, sampling); the victim keeps the seeds of
/// its own sections so that several attack seeds share one victim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub extract: ExtractConfig,
    #[serde(default)]
    pub defense: EditConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out_dir: default_out_dir(),
            corpus: CorpusConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            extract: ExtractConfig::default(),
            defense: EditConfig::default(),
            transfer: TransferConfig::default(),
            grid: GridConfig::default(),
        }
    }

    /// TOML, or JSON when the extension is `.json`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: ExperimentConfig = if is_json {
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    /// Sub-config seeds replaced by the experiment seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.decode.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.corpus.validate()?;
        self.model.validate()?;
        self.transfer.model.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return bad(format!(
                "model vocab_size {} differs from corpus vocab_size {}",
                self.model.vocab_size, self.corpus.vocab_size
            ));
        }
        if self.transfer.model.vocab_size != self.corpus.vocab_size {
            return bad("transfer.model must share the corpus vocabulary".into());
        }
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return bad(format!(
                "split.ratio must be in (0, 1), got {}",
                self.split.ratio
            ));
        }
        self.train.validate()?;
        self.decode.validate()?;
        for &s in &self.extract.strategies {
            with_strategy(&self.decode, s).validate()?;
        }
        self.defense.validate(self.model.layers)?;
        for s in self.grid.stacks() {
            s.validate()?;
        }
        let seq = self.corpus.prefix_len + self.corpus.suffix_len - 1;
        for (what, extra, max) in [
            ("prompt", self.train.prompt_len, self.model.max_context),
            (
                "pretraining header",
                self.pretrain.preamble_len,
                self.model.max_context,
            ),
            (
                "transfer header",
                self.transfer.pretrain.preamble_len,
                self.transfer.model.max_context,
            ),
            (
                "transferred prompt",
                self.train.prompt_len,
                self.transfer.model.max_context,
            ),
        ] {
            if extra + seq > max {
                return bad(format!(
                    "{what} of {extra} plus {seq} sequence tokens exceeds max_context {max}"
                ));
            }
        }
        if self.extract.ks.is_empty()
            || self
                .extract
                .ks
                .iter()
                .any(|&k| k == 0 || k > self.corpus.suffix_len)
        {
            return bad(format!(
                "extract.ks must be within 1..={}",
                self.corpus.suffix_len
            ));
        }
        Ok(())
    }
}

/// `base` with another strategy; diverse beam rounds the beam count down to
/// a multiple of the group count.
pub fn with_strategy(base: &DecodeConfig, strategy: Strategy) -> DecodeConfig {
    let mut c = DecodeConfig {
        strategy,
        ..base.clone()
    };
    if strategy == Strategy::DiverseBeam && c.groups > 0 && !c.beam_size.is_multiple_of(c.groups) {
        c.beam_size = (c.beam_size / c.groups).max(1) * c.groups;
    }
    c
}

/// Recursively sorts object keys so the text does not depend on field order.
fn sorted(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            Value::Object(
                keys.into_iter()
                    .map(|k| (k.clone(), sorted(&m[k])))
                    .collect(),
            )
        }
        Value::Array(a) => Value::Array(a.iter().map(sorted).collect()),
        other => other.clone(),
    }
}

/// Compact JSON with sorted keys.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string(&sorted(&serde_json::to_value(
        value,
    )?))?)
}

/// SHA-256 of the canonical JSON.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub fingerprint: String,
    /// Exactly what was hashed.
    pub config: Value,
    pub upstream: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
    pub summary: Value,
    pub wall_clock_secs: f64,
    pub versions: BTreeMap<String, String>,
}

/// A stage's identity: what it depends on and where it lives.
#[derive(Clone, Debug)]
pub struct Stage {
    pub name: &'static str,
    pub key: Value,
    pub fingerprint: String,
    pub dir: PathBuf,
    pub upstream: BTreeMap<String, String>,
}

impl Stage {
    fn new(out: &Path, name: &'static str, upstream: &[&Stage], body: Value) -> Result<Self> {
        let up: BTreeMap<String, String> = upstream
            .iter()
            .map(|s| (s.dir_name(), s.fingerprint.clone()))
            .collect();
        let key = json!({ "stage": name, "upstream": up, "config": body });
        let fp = fingerprint(&key)?;
        Ok(Stage {
            name,
            dir: out.join(format!("{name}-{}", &fp[..16])),
            key,
            fingerprint: fp,
            upstream: up,
        })
    }

    pub fn dir_name(&self) -> String {
        self.dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// The stage's manifest, or a missing-artifact error naming the command
    /// that produces it.
    pub fn require(&self) -> Result<RunManifest> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} output {} (run `cosped {}` first)",
                self.name,
                self.dir.display(),
                self.name
            )));
        }
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if m.fingerprint != self.fingerprint {
            return Err(Error::Corrupt {
                path: path.display().to_string(),
                detail: "manifest fingerprint does not match its directory".into(),
            });
        }
        Ok(m)
    }

    pub fn is_complete(&self) -> bool {
        self.require().is_ok()
    }

    fn begin(&self) -> Result<Instant> {
        std::fs::create_dir_all(&self.dir)?;
        // A stale manifest must not vouch for half-rewritten artifacts.
        let _ = std::fs::remove_file(self.path(MANIFEST));
        Ok(Instant::now())
    }

    fn finish(&self, started: Instant, artifacts: &[&str], summary: Value) -> Result<RunManifest> {
        let m = RunManifest {
            stage: self.name.to_string(),
            fingerprint: self.fingerprint.clone(),
            config: self.key.clone(),
            upstream: self.upstream.clone(),
            artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
            summary,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            versions: BTreeMap::from([
                ("cosped".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("artifact_format".to_string(), "1".to_string()),
            ]),
        };
        std::fs::write(self.path(MANIFEST), serde_json::to_string_pretty(&m)?)?;
        info!(
            "{} done in {:.1}s -> {}",
            self.name,
            m.wall_clock_secs,
            self.dir.display()
        );
        Ok(m)
    }
}

/// Stage identities derived from one config.
pub struct Plan {
    pub cfg: ExperimentConfig,
}

impl Plan {
    /// Resolves seeds and validates.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Plan {
            cfg: cfg.resolved(),
        })
    }

    fn out(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn pretrain_for(&self, model: &ModelConfig, pretrain: &PretrainConfig) -> Result<Stage> {
        Stage::new(
            self.out(),
            "pretrain",
            &[],
            json!({ "corpus": self.cfg.corpus, "model": model, "pretrain": pretrain }),
        )
    }

    pub fn pretrain(&self) -> Result<Stage> {
        self.pretrain_for(&self.cfg.model, &self.cfg.pretrain)
    }

    pub fn tune_with(&self, loss: &LossStack) -> Result<Stage> {
        let train = TrainConfig {
            loss: loss.clone(),
            ..self.cfg.train.clone()
        };
        Stage::new(
            self.out(),
            "tune",
            &[&self.pretrain()?],
            json!({ "split": self.cfg.split, "train": train }),
        )
    }

    pub fn tune(&self) -> Result<Stage> {
        self.tune_with(&self.cfg.train.loss)
    }

    pub fn extract(&self) -> Result<Stage> {
        Stage::new(
            self.out(),
            "extract",
            &[&self.tune()?],
            json!({ "decode": self.cfg.decode, "extract": self.cfg.extract }),
        )
    }

    pub fn defend(&self) -> Result<Stage> {
        Stage::new(
            self.out(),
            "defend",
            &[&self.tune()?],
            json!({ "decode": self.cfg.decode, "defense": self.cfg.defense }),
        )
    }

    pub fn transfer_victim(&self) -> Result<Stage> {
        self.pretrain_for(&self.cfg.transfer.model, &self.cfg.transfer.pretrain)
    }

    pub fn transfer(&self) -> Result<Stage> {
        Stage::new(
            self.out(),
            "transfer",
            &[&self.tune()?, &self.transfer_victim()?],
            json!({ "decode": self.cfg.decode }),
        )
    }

    pub fn grid(&self) -> Result<Stage> {
        let mut train = serde_json::to_value(&self.cfg.train)?;
        if let Value::Object(m) = &mut train {
            m.remove("loss");
        }
        Stage::new(
            self.out(),
            "grid",
            &[&self.pretrain()?],
            json!({
                "split": self.cfg.split,
                "train": train,
                "stacks": self.cfg.grid.stacks(),
                "decode": self.cfg.decode,
                "ks": self.cfg.extract.ks,
            }),
        )
    }

    pub fn report(&self) -> Result<Stage> {
        let ups = [
            self.grid()?,
            self.extract()?,
            self.defend()?,
            self.transfer()?,
        ];
        let refs: Vec<&Stage> = ups.iter().collect();
        Stage::new(self.out(), "report", &refs, Value::Null)
    }
}

/// Outputs of the pretraining stage.
pub struct Victim {
    pub model: VictimModel,
    pub corpus: Dataset,
    pub preamble: Vec<usize>,
}

impl Victim {
    pub fn load(stage: &Stage) -> Result<Self> {
        stage.require()?;
        Ok(Victim {
            model: VictimModel::load(&stage.path("victim.bin"))?,
            corpus: Dataset::read_jsonl(&stage.path("corpus.jsonl"))?,
            preamble: serde_json::from_str(&std::fs::read_to_string(stage.path("preamble.json"))?)?,
        })
    }

    /// The header embeddings the victim was trained under.
    pub fn context(&self) -> Result<Option<Tensor>> {
        if self.preamble.is_empty() {
            Ok(None)
        } else {
            self.model.embed(&self.preamble).map(Some)
        }
    }

    pub fn splits(&self, cfg: &SplitConfig) -> Result<DatasetSplits> {
        split(&self.corpus, cfg.ratio, cfg.seed)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn pretrain_into(
    plan: &Plan,
    stage: &Stage,
    model: &ModelConfig,
    pretrain: &PretrainConfig,
) -> Result<RunManifest> {
    let t = stage.begin()?;
    let corpus = generate_corpus(&plan.cfg.corpus)?;
    let (victim, trace) = pretrain_victim(model.clone(), &corpus, pretrain)?;
    corpus.write_jsonl(&stage.path("corpus.jsonl"))?;
    victim.save(&stage.path("victim.bin"))?;
    std::fs::write(
        stage.path("preamble.json"),
        serde_json::to_string(&trace.preamble)?,
    )?;
    std::fs::write(
        stage.path("pretrain_trace.json"),
        serde_json::to_string_pretty(&trace)?,
    )?;
    stage.finish(
        t,
        &[
            "corpus.jsonl",
            "victim.bin",
            "preamble.json",
            "pretrain_trace.json",
        ],
        json!({
            "digest": victim.digest(),
            "final_loss": trace.epoch_losses.last(),
        }),
    )
}

/// Generates the corpus and trains the victim.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let plan = Plan::new(cfg)?;
    let stage = plan.pretrain()?;
    pretrain_into(&plan, &stage, &plan.cfg.model, &plan.cfg.pretrain)
}

fn tune_into(
    plan: &Plan,
    stage: &Stage,
    victim: &Victim,
    loss: &LossStack,
) -> Result<(SoftPrompt, RunManifest)> {
    let t = stage.begin()?;
    let splits = victim.splits(&plan.cfg.split)?;
    let cfg = TrainConfig {
        loss: loss.clone(),
        ..plan.cfg.train.clone()
    };
    let digest = victim.model.digest();
    let init = init_soft_prompt(&victim.model, cfg.prompt_len, plan.cfg.seed)?;
    let (prompt, trace) = train_soft_prompt(&victim.model, init, &splits.attack, &cfg)?;
    if victim.model.digest() != digest {
        return Err(Error::Divergence(
            "victim weights changed during tuning".into(),
        ));
    }
    save_soft_prompt(&stage.path("prompt.bin"), &prompt, loss)?;
    trace.write_jsonl(&stage.path("trace.jsonl"))?;
    let m = stage.finish(
        t,
        &["prompt.bin", "trace.jsonl"],
        json!({
            "loss": loss.to_string(),
            "final_mle": trace.epochs.last().map(|e| e.mle),
            "aborted": trace.aborted,
        }),
    )?;
    Ok((prompt, m))
}

/// Tunes the soft prompt on the attack split.
pub fn cmd_tune(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let plan = Plan::new(cfg)?;
    let victim = Victim::load(&plan.pretrain()?)?;
    let stage = plan.tune()?;
    Ok(tune_into(&plan, &stage, &victim, &plan.cfg.train.loss)?.1)
}

fn load_prompt(stage: &Stage, d: usize) -> Result<SoftPrompt> {
    stage.require()?;
    Ok(load_soft_prompt(&stage.path("prompt.bin"), Some(d))?.0)
}

/// Method name of the tuned-prompt row in the attack-vs-baseline table.
pub const ATTACK_METHOD: &str = "CoSPED";
pub const BASELINE_METHOD: &str = "Original";

/// Baseline (no prompt, greedy) plus one report per strategy with the tuned
/// prompt, on the evaluation split.
pub fn cmd_extract(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let plan = Plan::new(cfg)?;
    let victim = Victim::load(&plan.pretrain()?)?;
    let prompt = load_prompt(&plan.tune()?, victim.model.model_dim())?;
    let stage = plan.extract()?;
    let t = stage.begin()?;
    let eval = victim.splits(&plan.cfg.split)?.eval;
    let digest = victim.model.digest();
    let fp = &stage.fingerprint;

    let greedy = with_strategy(&plan.cfg.decode, Strategy::Greedy);
    let ks = &plan.cfg.extract.ks;
    let mut reports = vec![ExtractionReport::with_ks(
        BASELINE_METHOD,
        fp,
        metrics::run_extraction(&victim.model, None, &eval, &greedy)?,
        ks,
    )?];
    let mut strategies = vec![plan.cfg.decode.strategy];
    strategies.extend(
        plan.cfg
            .extract
            .strategies
            .iter()
            .filter(|&&s| s != plan.cfg.decode.strategy),
    );
    for s in strategies {
        let dc = with_strategy(&plan.cfg.decode, s);
        let pairs = metrics::run_extraction(&victim.model, Some(&prompt.z), &eval, &dc)?;
        reports.push(ExtractionReport::with_ks(s.label(), fp, pairs, ks)?);
    }
    if victim.model.digest() != digest {
        return Err(Error::Divergence(
            "victim weights changed during extraction".into(),
        ));
    }
    if let Some(r) = reports.iter().find(|r| !r.is_monotone()) {
        return Err(Error::Divergence(format!(
            "non-monotone extraction report for {}",
            r.method
        )));
    }
    write_jsonl(&stage.path("reports.jsonl"), &reports)?;
    let tables = ExtractTables::new(
        &reports,
        plan.cfg.decode.strategy,
        prompt.len(),
        plan.cfg.corpus.prefix_len,
    );
    std::fs::write(
        stage.path("extraction.csv"),
        metrics::reports_csv(&reports, &plan.cfg.extract.ks),
    )?;
    std::fs::write(stage.path("table2.csv"), tables.decoding_csv())?;
    std::fs::write(stage.path("table3.csv"), tables.attack_csv())?;
    stage.finish(
        t,
        &[
            "reports.jsonl",
            "extraction.csv",
            "table2.csv",
            "table3.csv",
        ],
        json!({
            "baseline_er50": reports[0].rate(50),
            "attack_er50": reports[1].rate(50),
            "victim_digest": digest,
        }),
    )
}

/// The decoding-comparison and attack-vs-baseline tables.
pub struct ExtractTables<'a> {
    reports: &'a [ExtractionReport],
    attack: Strategy,
    prompt_len: usize,
    prefix_len: usize,
}

impl<'a> ExtractTables<'a> {
    pub fn new(
        reports: &'a [ExtractionReport],
        attack: Strategy,
        prompt_len: usize,
        prefix_len: usize,
    ) -> Self {
        ExtractTables {
            reports,
            attack,
            prompt_len,
            prefix_len,
        }
    }

    fn by_method(&self, m: &str) -> Option<&ExtractionReport> {
        self.reports.iter().find(|r| r.method == m)
    }

    /// `strategy,prompt_len,prefix_len,ER_50`, one row per decoded strategy.
    pub fn decoding_csv(&self) -> String {
        let mut out = String::from("strategy,prompt_len,prefix_len,ER_50\n");
        for r in self.reports.iter().filter(|r| r.method != BASELINE_METHOD) {
            let _ = writeln!(
                out,
                "{},{},{},{:.2}",
                csv_field(&r.method),
                self.prompt_len,
                self.prefix_len,
                r.rate(50)
            );
        }
        out
    }

    /// `method,prompt_len,prefix_len,ER_50,ER_30` for the tuned prompt and the
    /// no-prompt baseline.
    pub fn attack_csv(&self) -> String {
        let mut out = String::from("method,prompt_len,prefix_len,ER_50,ER_30\n");
        let rows = [
            (
                ATTACK_METHOD,
                self.by_method(self.attack.label()),
                self.prompt_len.to_string(),
            ),
            (
                BASELINE_METHOD,
                self.by_method(BASELINE_METHOD),
                "N.A.".to_string(),
            ),
        ];
        for (name, r, k) in rows {
            if let Some(r) = r {
                let _ = writeln!(
                    out,
                    "{name},{k},{},{:.2},{:.2}",
                    self.prefix_len,
                    r.rate(50),
                    r.rate(30)
                );
            }
        }
        out
    }
}

/// Fits the rank-one edit against the first `n_targets` evaluation pairs and
/// attacks both models with the tuned prompt.
pub fn cmd_defend(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let plan = Plan::new(cfg)?;
    let victim = Victim::load(&plan.pretrain()?)?;
    let prompt = load_prompt(&plan.tune()?, victim.model.model_dim())?;
    let stage = plan.defend()?;
    let t = stage.begin()?;
    let eval = victim.splits(&plan.cfg.split)?.eval;
    let n = plan.cfg.defense.n_targets.min(eval.len());
    let targets = Dataset {
        pairs: eval.pairs[..n].to_vec(),
    };
    let heldout = Dataset {
        pairs: victim
            .corpus
            .pairs
            .iter()
            .filter(|p| !targets.pairs.iter().any(|t| t.id == p.id))
            .cloned()
            .collect(),
    };
    let context = victim.context()?;
    let (edit, trace) = fit_rank_one_edit(
        &victim.model,
        context.as_ref(),
        &targets,
        &victim.corpus,
        &plan.cfg.defense,
        &stage.fingerprint,
    )?;
    let edited = apply_edit(&victim.model, &edit)?;
    let report = evaluate_defense(
        &victim.model,
        &edited,
        Some(&prompt.z),
        &plan.cfg.decode,
        &targets,
        &heldout,
        context.as_ref(),
        &stage.fingerprint,
    )?;
    std::fs::write(
        stage.path("edit.json"),
        serde_json::to_string_pretty(&edit)?,
    )?;
    write_jsonl(&stage.path("edit_trace.jsonl"), &trace.epochs)?;
    std::fs::write(
        stage.path("defense.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(stage.path("table5.csv"), report.to_csv())?;
    edited.save(&stage.path("edited_victim.bin"))?;
    stage.finish(
        t,
        &[
            "edit.json",
            "edit_trace.jsonl",
            "defense.json",
            "table5.csv",
            "edited_victim.bin",
        ],
        json!({
            "pre_er5": report.pre.rate(5),
            "post_er5": report.post.rate(5),
            "post_er50": report.post.rate(50),
            "ppl_ratio": report.ppl_ratio,
            "stop_epoch": edit.stop_epoch,
        }),
    )
}

/// Moves the tuned prompt to the wider victim (pretraining it on first use).
pub fn cmd_transfer(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let plan = Plan::new(cfg)?;
    let victim = Victim::load(&plan.pretrain()?)?;
    let prompt = load_prompt(&plan.tune()?, victim.model.model_dim())?;
    let target_stage = plan.transfer_victim()?;
    if !target_stage.is_complete() {
        info!("pretraining the transfer victim");
        pretrain_into(
            &plan,
            &target_stage,
            &plan.cfg.transfer.model,
            &plan.cfg.transfer.pretrain,
        )?;
    }
    let target = Victim::load(&target_stage)?;
    let stage = plan.transfer()?;
    let t = stage.begin()?;
    let eval = victim.splits(&plan.cfg.split)?.eval;
    let report = evaluate_transfer(
        &victim.model,
        &prompt.z,
        &target.model,
        &eval,
        &plan.cfg.decode,
        None,
        &stage.fingerprint,
    )?;
    info!(
        "{}; transfer hurts: {}",
        report.summary(),
        report.transfer_hurts()
    );
    report.map.save(&stage.path("map.json"))?;
    std::fs::write(
        stage.path("transfer.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(stage.path("table7.csv"), report.to_csv())?;
    stage.finish(
        t,
        &["map.json", "transfer.json", "table7.csv"],
        json!({
            "transfer_hurts": report.transfer_hurts(),
            "condition_number": report.map.condition_number,
        }),
    )
}

/// One row of the loss grid; `error` is set when the cell failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub index: usize,
    pub loss: String,
    pub stack: LossStack,
    pub tune_fingerprint: String,
    pub er: Option<BTreeMap<usize, f64>>,
    pub error: Option<String>,
}

/// `COSPED_THREADS` if set and positive, else the available parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Tunes and extracts once per stack against one shared victim. A failing
/// cell is recorded and the rest of the grid still runs.
pub fn run_loss_grid(plan: &Plan, victim: &Victim, stacks: &[LossStack]) -> Result<Vec<GridRow>> {
    let eval = victim.splits(&plan.cfg.split)?.eval;
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<GridRow>>> = Mutex::new(vec![None; stacks.len()]);
    let threads = thread_cap().min(stacks.len()).max(1);
    let cell = |i: usize| -> GridRow {
        let stack = &stacks[i];
        let stage = plan.tune_with(stack);
        let fp = stage
            .as_ref()
            .map(|s| s.fingerprint.clone())
            .unwrap_or_default();
        let run = || -> Result<BTreeMap<usize, f64>> {
            let stage = stage.as_ref().map_err(|e| Error::Config(e.to_string()))?;
            let prompt = if stage.is_complete() {
                load_prompt(stage, victim.model.model_dim())?
            } else {
                tune_into(plan, stage, victim, stack)?.0
            };
            let pairs =
                metrics::run_extraction(&victim.model, Some(&prompt.z), &eval, &plan.cfg.decode)?;
            Ok(ExtractionReport::with_ks(&stack.to_string(), &fp, pairs, &plan.cfg.extract.ks)?.er)
        };
        let (er, error) = match run() {
            Ok(er) => (Some(er), None),
            Err(e) => {
                warn!("grid cell {stack} failed: {e}");
                (None, Some(e.to_string()))
            }
        };
        GridRow {
            index: i,
            loss: stack.to_string(),
            stack: stack.clone(),
            tune_fingerprint: fp.clone(),
            er,
            error,
        }
    };
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= stacks.len() {
                    break;
                }
                let row = cell(i);
                rows.lock().expect("grid rows lock")[i] = Some(row);
            });
        }
    });
    let rows = rows.into_inner().expect("grid rows lock");
    Ok(rows.into_iter().flatten().collect())
}

/// `base,smooth,dynamic,additive,common,ER_50,ER_30,error` with `x` marks.
pub fn render_table1(rows: &[GridRow]) -> String {
    let mut out = String::from("base,smooth,dynamic,additive,common,ER_50,ER_30,error\n");
    for r in rows {
        let mark = |c: Component| {
            if r.stack.components.contains(&c) {
                "x"
            } else {
                ""
            }
        };
        let rate = |k: usize| {
            r.er.as_ref()
                .and_then(|m| m.get(&k))
                .map_or(String::new(), |v| format!("{v:.2}"))
        };
        let _ = writeln!(
            out,
            "{:?},{},{},{},{},{},{},{}",
            r.stack.base,
            mark(Component::Smooth),
            mark(Component::Dynamic),
            mark(Component::Additive),
            mark(Component::Common),
            rate(50),
            rate(30),
            csv_field(r.error.as_deref().unwrap_or(""))
        );
    }
    out
}

/// The loss-component grid.
pub fn cmd_grid(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let plan = Plan::new(cfg)?;
    let victim = Victim::load(&plan.pretrain()?)?;
    let stage = plan.grid()?;
    let t = stage.begin()?;
    let rows = run_loss_grid(&plan, &victim, &plan.cfg.grid.stacks())?;
    write_jsonl(&stage.path("grid.jsonl"), &rows)?;
    std::fs::write(stage.path("table1.csv"), render_table1(&rows))?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    stage.finish(
        t,
        &["grid.jsonl", "table1.csv"],
        json!({ "rows": rows.len(), "failed": failed }),
    )
}

/// Renders every table whose stage has completed into the report directory.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let plan = Plan::new(cfg)?;
    let stage = plan.report()?;
    let mut tables: Vec<(&str, String)> = Vec::new();

    let grid = plan.grid()?;
    if grid.is_complete() {
        let rows: Vec<GridRow> = read_jsonl(&grid.path("grid.jsonl"))?;
        tables.push(("table1.csv", render_table1(&rows)));
    }
    let extract = plan.extract()?;
    if extract.is_complete() {
        let reports: Vec<ExtractionReport> = read_jsonl(&extract.path("reports.jsonl"))?;
        let t = ExtractTables::new(
            &reports,
            plan.cfg.decode.strategy,
            plan.cfg.train.prompt_len,
            plan.cfg.corpus.prefix_len,
        );
        tables.push(("table2.csv", t.decoding_csv()));
        tables.push(("table3.csv", t.attack_csv()));
    }
    let defend = plan.defend()?;
    if defend.is_complete() {
        let r: DefenseReport =
            serde_json::from_str(&std::fs::read_to_string(defend.path("defense.json"))?)?;
        tables.push(("table5.csv", r.to_csv()));
    }
    let transfer = plan.transfer()?;
    if transfer.is_complete() {
        let r: TransferReport =
            serde_json::from_str(&std::fs::read_to_string(transfer.path("transfer.json"))?)?;
        tables.push(("table7.csv", r.to_csv()));
    }
    if tables.is_empty() {
        return Err(Error::MissingArtifact(
            "no completed grid, extract, defend or transfer stage for this config".into(),
        ));
    }
    let t = stage.begin()?;
    let mut text = String::new();
    for (name, csv) in &tables {
        std::fs::write(stage.path(name), csv)?;
        let _ = writeln!(text, "## {name}\n{csv}");
    }
    std::fs::write(stage.path("report.txt"), &text)?;
    let names: Vec<&str> = tables.iter().map(|(n, _)| *n).collect();
    stage.finish(t, &names, json!({ "tables": names }))
}

/// Whether an error is the user's (bad config) rather than the run's.
pub fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Toml(_))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [1, 2]}, "b": 1}"#).unwrap();
        assert_eq!(
            canonical_json(&a).unwrap(),
            r#"{"a":{"x":null,"y":[1,2]},"b":1}"#
        );
        assert_eq!(fingerprint(&a).unwrap(), fingerprint(&b).unwrap());
        let c: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [2, 1]}, "b": 1}"#).unwrap();
        assert_ne!(fingerprint(&a).unwrap(), fingerprint(&c).unwrap());
    }

    #[test]
    fn toml_and_json_encodings_agree() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("c.toml");
        std::fs::write(
            &toml_path,
            "seed = 5\n[train]\nepochs = 3\n[train.loss]\nbase = \"focal\"\ncomponents = [\"smooth\"]\n[corpus]\nn_pairs = 10\n",
        )
        .unwrap();
        let json_path = dir.path().join("c.json");
        std::fs::write(
            &json_path,
            r#"{"corpus": {"n_pairs": 10}, "train": {"loss": {"components": ["smooth"], "base": "focal"}, "epochs": 3}, "seed": 5}"#,
        )
        .unwrap();
        let a = ExperimentConfig::from_path(&toml_path).unwrap();
        let b = ExperimentConfig::from_path(&json_path).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.epochs, 3);
        assert_eq!(a.train.loss.to_string(), "Focal+Smooth");
        let plan_a = Plan::new(&a).unwrap();
        let plan_b = Plan::new(&b).unwrap();
        assert_eq!(
            plan_a.tune().unwrap().fingerprint,
            plan_b.tune().unwrap().fingerprint
        );
    }

    #[test]
    fn seed_is_required_and_unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nepochs = 3\n").unwrap();
        assert!(matches!(
            ExperimentConfig::from_path(&p),
            Err(Error::Config(_))
        ));
        std::fs::write(&p, "seed = 1\n[train]\nepoch = 3\n").unwrap();
        assert!(matches!(
            ExperimentConfig::from_path(&p),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_path(&dir.path().join("missing.toml")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_catches_inconsistent_sections() {
        let ok = ExperimentConfig::with_seed(1);
        ok.validate().unwrap();
        let mut c = ok.clone();
        c.model.vocab_size = 128;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.train.prompt_len = 200;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.extract.ks = vec![51];
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.defense.layer = Some(2);
        assert!(c.validate().is_err());
        let mut c = ok;
        c.train.loss.components = [Component::Smooth, Component::Dynamic].into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn stage_fingerprints_track_their_dependencies() {
        let a = Plan::new(&ExperimentConfig::with_seed(1)).unwrap();
        let b = Plan::new(&ExperimentConfig::with_seed(2)).unwrap();
        // The victim does not depend on the attack seed; the prompt does.
        assert_eq!(
            a.pretrain().unwrap().fingerprint,
            b.pretrain().unwrap().fingerprint
        );
        assert_ne!(a.tune().unwrap().fingerprint, b.tune().unwrap().fingerprint);
        let mut c = ExperimentConfig::with_seed(1);
        c.decode.top_p = 0.9;
        let c = Plan::new(&c).unwrap();
        assert_eq!(a.tune().unwrap().fingerprint, c.tune().unwrap().fingerprint);
        assert_ne!(
            a.extract().unwrap().fingerprint,
            c.extract().unwrap().fingerprint
        );
        // The grid shares a fingerprint whatever single stack `train.loss` names.
        let mut d = ExperimentConfig::with_seed(1);
        d.train.loss = LossStack::new(crate::losses::BaseLoss::Focal, &[]);
        assert_eq!(
            a.grid().unwrap().fingerprint,
            Plan::new(&d).unwrap().grid().unwrap().fingerprint
        );
        assert!(a.tune().unwrap().dir_name().starts_with("tune-"));
    }

    #[test]
    fn diverse_beam_rounds_to_whole_groups() {
        let base = DecodeConfig::default();
        let c = with_strategy(&base, Strategy::DiverseBeam);
        assert_eq!((c.beam_size, c.groups), (9, 3));
        c.validate().unwrap();
        assert_eq!(with_strategy(&base, Strategy::Beam).beam_size, 10);
    }

    #[test]
    fn table1_layout() {
        let row = |stack: LossStack, er: Option<(f64, f64)>| GridRow {
            index: 0,
            loss: stack.to_string(),
            stack,
            tune_fingerprint: String::new(),
            er: er.map(|(a, b)| BTreeMap::from([(50, a), (30, b)])),
            error: er.is_none().then(|| "boom, twice".to_string()),
        };
        use crate::losses::BaseLoss;
        let csv = render_table1(&[
            row(LossStack::new(BaseLoss::Mle, &[]), Some((10.0, 12.5))),
            row(
                LossStack::new(BaseLoss::Focal, &[Component::Smooth, Component::Additive]),
                None,
            ),
        ]);
        assert_eq!(
            csv,
            "base,smooth,dynamic,additive,common,ER_50,ER_30,error\nMle,,,,,10.00,12.50,\nFocal,x,,x,,,,\"boom, twice\"\n"
        );
    }
}
