//! Subcommand implementations. Every command writes its artifacts plus
//! `config.toml` and `manifest.json` into the run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use log::info;
use pet_core::data::{evaluate, few_shot_split};
use pet_core::mlm::pretrain::{pretrain_mlm, PretrainConfig};
use pet_core::mlm::{checkpoint, AdamConfig};
use pet_core::pipeline::{
    classifier_predict, distill as distill_classifier, ensemble_soft_label, prediction_accuracy,
    run_ipet, CheckpointRef, EnsembleMember, GenerationPlan, PetConfig, PetOutcome, RunManifest,
    SoftDataset, TaskContext,
};
use pet_core::{
    make_toy_task, Dataset, DecodingStrategy, Prediction, Pvp, TaskBundle, TinyTransformer,
    ToyConfig, ToyKind, Vocabulary,
};
use serde_json::json;

use crate::config::{required, RunConfig};

struct Task {
    bundle: TaskBundle,
    vocab: Vocabulary,
    pvps: Vec<Pvp>,
    max_seq_length: usize,
}

impl Task {
    fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = required(&cfg.task.bundle, "task.bundle")?;
        let bundle = TaskBundle::load(dir)
            .with_context(|| format!("loading task bundle {}", dir.display()))?;
        let vpath = required(&cfg.task.vocab, "task.vocab")?;
        let vocab = Vocabulary::load(vpath)
            .with_context(|| format!("loading vocabulary {}", vpath.display()))?;
        let mut pvps = bundle.pvps(&vocab)?;
        if !cfg.task.pvps.is_empty() {
            for name in &cfg.task.pvps {
                if !pvps.iter().any(|p| &p.name == name) {
                    bail!("unknown PVP {name:?} in task.pvps");
                }
            }
            pvps.retain(|p| cfg.task.pvps.contains(&p.name));
        }
        let max_seq_length = cfg
            .task
            .max_seq_length
            .unwrap_or(bundle.spec.max_seq_length);
        Ok(Self {
            bundle,
            vocab,
            pvps,
            max_seq_length,
        })
    }

    fn ctx(&self) -> TaskContext<'_> {
        TaskContext::new(
            &self.bundle.spec,
            &self.vocab,
            &self.pvps,
            self.max_seq_length,
        )
    }

    fn dataset(&self, path: &Path, split: &str) -> Result<Dataset> {
        let ds = Dataset::load(path, &self.bundle.spec, split)
            .with_context(|| format!("loading {}", path.display()))?;
        ds.validate(&self.bundle.spec)?;
        Ok(ds)
    }
}

fn load_base(cfg: &RunConfig) -> Result<TinyTransformer> {
    let p = required(&cfg.backend.checkpoint, "backend.checkpoint")?;
    checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn parallelism(cfg: &RunConfig, members: usize) -> usize {
    match cfg.pet.parallelism {
        0 => {
            let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
            members.clamp(1, cores)
        }
        n => n,
    }
}

fn pet_config(cfg: &RunConfig, task: &Task) -> PetConfig {
    let members = task.pvps.len() * cfg.pet.seeds_per_pvp;
    PetConfig {
        train: cfg.train,
        classifier: cfg.classifier,
        seeds_per_pvp: cfg.pet.seeds_per_pvp,
        strategy: cfg.pet.strategy,
        weights: cfg.pet.weights,
        distill: cfg.pet.distill,
        parallelism: parallelism(cfg, members),
        seed: cfg.seed,
    }
}

/// Collects artifacts and writes the manifest.
struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    fn create(cfg: &RunConfig, command: &str, args: serde_json::Value) -> Result<Self> {
        let root = cfg.out_dir.clone();
        std::fs::create_dir_all(&root)
            .with_context(|| format!("creating run directory {}", root.display()))?;
        std::fs::write(root.join("config.toml"), cfg.to_toml()?)?;
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config: json!({ "run": cfg, "args": args }),
            ..RunManifest::default()
        };
        let mut dir = Self { root, manifest };
        dir.manifest
            .artifacts
            .insert("config".into(), "config.toml".into());
        Ok(dir)
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write(&mut self, key: &str, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.path(rel)?, bytes)?;
        self.manifest.artifacts.insert(key.into(), rel.into());
        Ok(())
    }

    fn task(&mut self, task: &Task) {
        self.manifest.task = task.bundle.spec.name.clone();
        self.manifest.pvps = task.pvps.iter().map(|p| p.name.clone()).collect();
    }

    fn dataset(&mut self, name: &str, ds: &Dataset, task: &Task) -> Result<()> {
        self.manifest
            .dataset_hashes
            .insert(name.into(), ds.hash(&task.bundle.spec)?);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        self.manifest.save(&self.root.join("manifest.json"))?;
        println!("{}", self.root.display());
        Ok(())
    }
}

fn predictions_jsonl(preds: &[Prediction], task: &Task) -> Result<String> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&p.to_json(&task.bundle.spec)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes predictions and metrics for the configured test set, if any.
fn write_test_results(
    dir: &mut RunDir,
    cfg: &RunConfig,
    task: &Task,
    predict: impl FnOnce(&[pet_core::Example]) -> Result<Vec<Prediction>>,
) -> Result<()> {
    let Some(path) = &cfg.data.test else {
        return Ok(());
    };
    let test = task.dataset(path, "test")?;
    dir.dataset("test", &test, task)?;
    let preds = predict(&test.examples)?;
    dir.write(
        "predictions",
        "predictions.jsonl",
        predictions_jsonl(&preds, task)?,
    )?;
    let report = evaluate(&preds, &test, &task.bundle.spec, &task.bundle.spec.metrics)?;
    for (k, v) in &report.values {
        info!("test {k} = {v:.4}");
    }
    dir.write(
        "metrics",
        "metrics.json",
        serde_json::to_string_pretty(&report)? + "\n",
    )
}

pub fn toy(kind: ToyKind, task_seed: u64, out: &Path) -> Result<()> {
    let task = make_toy_task(&ToyConfig::new(kind, task_seed))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    task.bundle.save(&out.join("task"))?;
    task.vocab.save(&out.join("vocab.txt"))?;
    let spec = task.spec();
    for ds in [&task.train, &task.dev, &task.test, &task.unlabeled] {
        ds.save(&out.join(format!("{}.jsonl", ds.split)), spec)?;
    }
    std::fs::write(out.join("corpus.txt"), task.corpus.join("\n") + "\n")?;
    let config = format!(
        r#"seed = 1
out_dir = "runs/train"

[task]
bundle = "task"
vocab = "vocab.txt"

[data]
pool = "train.jsonl"
train = "runs/sample/labeled.jsonl"
unlabeled = "unlabeled.jsonl"
test = "test.jsonl"
few_shot = 32

[backend]
checkpoint = "runs/pretrain/pretrained.ckpt"

[model]
layers = 2
model_dim = 32
heads = 4
ff_dim = 64
max_positions = 32
seed = 1

[pretrain]
corpus = "corpus.txt"
steps = 16000
batch_size = 16
learning_rate = 0.003

[train]
learning_rate = 0.001
batch_size = 4
gradient_accumulation_steps = 1
max_steps = {steps}

[classifier]
learning_rate = 0.001
batch_size = 4
gradient_accumulation_steps = 1
max_steps = 300
"#,
        steps = if kind == ToyKind::PairEntailment {
            300
        } else {
            30
        }
    );
    std::fs::write(out.join("config.toml"), config)?;
    println!("{}", out.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig) -> Result<()> {
    let vpath = required(&cfg.task.vocab, "task.vocab")?;
    let vocab = Vocabulary::load(vpath)?;
    let cpath = required(&cfg.pretrain.corpus, "pretrain.corpus")?;
    let text = std::fs::read_to_string(cpath)
        .with_context(|| format!("reading corpus {}", cpath.display()))?;
    let corpus: Vec<_> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode(l))
        .collect();
    let mut model = TinyTransformer::new(cfg.model, vocab.len())?;
    let pc = PretrainConfig {
        steps: cfg.pretrain.steps,
        batch_size: cfg.pretrain.batch_size,
        mask_prob: cfg.pretrain.mask_prob,
        adam: AdamConfig {
            learning_rate: cfg.pretrain.learning_rate,
            ..AdamConfig::default()
        },
        seed: cfg.seed,
    };
    let history = pretrain_mlm(&mut model, &corpus, vocab.mask_id(), &pc)?;
    let mut dir = RunDir::create(cfg, "pretrain", json!({}))?;
    dir.write(
        "checkpoint",
        "pretrained.ckpt",
        checkpoint::to_bytes(&model),
    )?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(csv, "{i},{l}")?;
    }
    dir.write("metrics_log", "pretrain.csv", csv)?;
    dir.finish()
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let task = Task::load(cfg)?;
    let pool = task.dataset(required(&cfg.data.pool, "data.pool")?, "train")?;
    let (few, unl) = few_shot_split(&pool, cfg.data.few_shot, cfg.data.unlabeled_cap, cfg.seed)?;
    let mut dir = RunDir::create(cfg, "sample", json!({}))?;
    dir.task(&task);
    dir.dataset("pool", &pool, &task)?;
    dir.dataset("labeled", &few, &task)?;
    dir.dataset("unlabeled", &unl, &task)?;
    let spec = &task.bundle.spec;
    dir.write("labeled", "labeled.jsonl", few.to_jsonl(spec)?)?;
    dir.write("unlabeled", "unlabeled.jsonl", unl.to_jsonl(spec)?)?;
    dir.finish()
}

fn member_stem(m: &EnsembleMember) -> String {
    format!("{}-{}", m.pvp, m.seed_index)
}

fn run_training(cfg: &RunConfig, ipet: bool) -> Result<(Task, PetOutcome, RunDir)> {
    let task = Task::load(cfg)?;
    let labeled = task.dataset(required(&cfg.data.train, "data.train")?, "train")?;
    let unlabeled = task.dataset(
        required(&cfg.data.unlabeled, "data.unlabeled")?,
        "unlabeled",
    )?;
    let base = load_base(cfg)?;
    let pc = pet_config(cfg, &task);
    let plan = if ipet {
        cfg.ipet
    } else {
        GenerationPlan {
            generations: 1,
            ..cfg.ipet
        }
    };
    let out = run_ipet(&base, &task.ctx(), &labeled, &unlabeled, &pc, &plan)?;
    let mut dir = RunDir::create(cfg, if ipet { "ipet" } else { "train" }, json!({}))?;
    dir.task(&task);
    dir.dataset("train", &labeled, &task)?;
    dir.dataset("unlabeled", &unlabeled, &task)?;
    dir.manifest.seeds_per_pvp = cfg.pet.seeds_per_pvp;
    dir.manifest.weights = out.weights.clone();
    dir.manifest.strategy = Some(cfg.pet.strategy);
    if ipet {
        dir.manifest.plan = Some(plan);
    }
    let spec = &task.bundle.spec;
    let mut summary = Vec::new();
    for (g, gen) in out.generations.iter().enumerate() {
        for (i, m) in gen.members.iter().enumerate() {
            let stem = format!("gen{g}/{}", member_stem(m));
            let model = m.checkpoint.load()?;
            dir.write(
                &format!("{stem}.ckpt"),
                &format!("{stem}.ckpt"),
                checkpoint::to_bytes(&model),
            )?;
            gen.logs[i].write_csv(&dir.path(&format!("{stem}.csv"))?)?;
            dir.manifest
                .artifacts
                .insert(format!("{stem}.csv"), format!("{stem}.csv"));
            if g > 0 {
                let ds = Dataset::new(spec.name.clone(), "train", gen.pseudo_labeled[i].clone())?;
                dir.write(
                    &format!("{stem}.pseudo"),
                    &format!("{stem}.pseudo.jsonl"),
                    ds.to_jsonl(spec)?,
                )?;
            }
        }
        summary.push(json!({
            "generation": g,
            "train_sizes": gen.train_sizes,
            "label_counts": gen.label_counts,
            "shortfalls": gen.shortfalls,
        }));
    }
    dir.write(
        "weights",
        "weights.json",
        serde_json::to_string_pretty(&out.weights)? + "\n",
    )?;
    dir.write(
        "generations",
        "generations.json",
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    dir.write("soft_labels", "soft_labels.jsonl", out.soft.to_jsonl()?)?;
    if let Some(c) = &out.classifier {
        dir.write("classifier", "classifier.ckpt", checkpoint::to_bytes(c))?;
    }
    Ok((task, out, dir))
}

pub fn train(cfg: &RunConfig, ipet: bool) -> Result<()> {
    let (task, out, mut dir) = run_training(cfg, ipet)?;
    let ctx = task.ctx();
    write_test_results(&mut dir, cfg, &task, |xs| {
        Ok(out.predict(&ctx, xs, cfg.pet.strategy)?)
    })?;
    dir.finish()
}

pub fn distill(cfg: &RunConfig, soft_path: &Path) -> Result<()> {
    let task = Task::load(cfg)?;
    let unlabeled = task.dataset(
        required(&cfg.data.unlabeled, "data.unlabeled")?,
        "unlabeled",
    )?;
    let soft = SoftDataset::load(soft_path)
        .with_context(|| format!("loading soft labels {}", soft_path.display()))?;
    let base = load_base(cfg)?;
    let ctx = task.ctx();
    let model = distill_classifier(&base, &ctx, &soft, &unlabeled.examples, &cfg.classifier)?;
    let mut dir = RunDir::create(cfg, "distill", json!({ "soft": soft_path }))?;
    dir.task(&task);
    dir.dataset("unlabeled", &unlabeled, &task)?;
    dir.write(
        "classifier",
        "classifier.ckpt",
        checkpoint::to_bytes(&model),
    )?;
    write_test_results(&mut dir, cfg, &task, |xs| {
        Ok(classifier_predict(&model, &ctx, xs)?)
    })?;
    dir.finish()
}

pub fn score(
    cfg: &RunConfig,
    pvp: &str,
    ckpt: Option<PathBuf>,
    input: Option<PathBuf>,
) -> Result<()> {
    let task = Task::load(cfg)?;
    let ctx = task.ctx();
    let p = ctx.pvp(pvp)?;
    let ckpt = match ckpt {
        Some(c) => c,
        None => required(&cfg.backend.checkpoint, "backend.checkpoint")?.to_path_buf(),
    };
    let model = checkpoint::load(&ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let input = match input {
        Some(i) => i,
        None => required(&cfg.data.test, "data.test")?.to_path_buf(),
    };
    let xs = task.dataset(&input, "score")?;
    let scorer = ctx.scorer(p);
    let spec = &task.bundle.spec;
    let strategy = cfg.pet.strategy;
    let mut out = String::new();
    for x in &xs.examples {
        let t = scorer.score(&model, x, strategy)?;
        let mut labels = serde_json::Map::new();
        for (i, &y) in t.labels.iter().enumerate() {
            labels.insert(
                spec.label_name(y).to_string(),
                json!({ "raw": t.raw[i], "score": t.scores[i] }),
            );
        }
        let row = json!({
            "id": x.id,
            "strategy": strategy,
            "normalized": t.normalized,
            "labels": labels,
        });
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    let mut dir = RunDir::create(
        cfg,
        "score",
        json!({ "pvp": pvp, "checkpoint": ckpt, "input": input }),
    )?;
    dir.task(&task);
    dir.dataset("input", &xs, &task)?;
    dir.manifest.strategy = Some(strategy);
    dir.write("scores", "scores.jsonl", out)?;
    dir.finish()
}

pub fn eval(cfg: &RunConfig, predictions: &Path, gold: Option<PathBuf>) -> Result<()> {
    let task = Task::load(cfg)?;
    let gold = match gold {
        Some(g) => g,
        None => required(&cfg.data.test, "data.test")?.to_path_buf(),
    };
    let gold_ds = task.dataset(&gold, "test")?;
    let spec = &task.bundle.spec;
    let text = std::fs::read_to_string(predictions)
        .with_context(|| format!("reading {}", predictions.display()))?;
    let preds = Prediction::read_jsonl(&text, spec)?;
    let report = evaluate(&preds, &gold_ds, spec, &spec.metrics)?;
    let mut dir = RunDir::create(
        cfg,
        "eval",
        json!({ "predictions": predictions, "gold": gold }),
    )?;
    dir.task(&task);
    dir.dataset("gold", &gold_ds, &task)?;
    dir.write(
        "metrics",
        "metrics.json",
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    for (k, v) in &report.values {
        eprintln!("{k}\t{v:.4}");
    }
    dir.finish()
}

pub fn compare_decoding(cfg: &RunConfig) -> Result<()> {
    let task = Task::load(cfg)?;
    let labeled = task.dataset(required(&cfg.data.train, "data.train")?, "train")?;
    let unlabeled = task.dataset(
        required(&cfg.data.unlabeled, "data.unlabeled")?,
        "unlabeled",
    )?;
    let test = task.dataset(required(&cfg.data.test, "data.test")?, "test")?;
    let base = load_base(cfg)?;
    let ctx = task.ctx();
    let pc = PetConfig {
        distill: false,
        ..pet_config(cfg, &task)
    };
    let plan = GenerationPlan {
        generations: 1,
        ..cfg.ipet
    };
    let out = run_ipet(&base, &ctx, &labeled, &unlabeled, &pc, &plan)?;
    let acc = |members: &[EnsembleMember], s: DecodingStrategy| -> Result<f64> {
        let (soft, _) = ensemble_soft_label(members, &ctx, &test.examples, s, pc.parallelism)?;
        Ok(prediction_accuracy(&soft.predictions(), &test.examples))
    };
    let mut table = String::from("decoding\taccuracy\n");
    for s in DecodingStrategy::ALL {
        writeln!(table, "{s}\t{:.4}", acc(out.final_members(), s)?)?;
    }
    let bytes = Arc::new(checkpoint::to_bytes(&base));
    let untrained: Vec<EnsembleMember> = task
        .pvps
        .iter()
        .map(|p| EnsembleMember {
            pvp: p.name.clone(),
            seed_index: 1,
            checkpoint: CheckpointRef::Memory(bytes.clone()),
            weight: out.weights.get(&p.name).copied().unwrap_or(1.0),
        })
        .collect();
    writeln!(
        table,
        "untrained\t{:.4}",
        acc(&untrained, DecodingStrategy::MaxFirst)?
    )?;
    let mut dir = RunDir::create(cfg, "compare-decoding", json!({}))?;
    dir.task(&task);
    dir.dataset("train", &labeled, &task)?;
    dir.dataset("unlabeled", &unlabeled, &task)?;
    dir.dataset("test", &test, &task)?;
    dir.manifest.seeds_per_pvp = cfg.pet.seeds_per_pvp;
    dir.manifest.weights = out.weights.clone();
    dir.write("table", "decoding.tsv", &table)?;
    eprint!("{table}");
    dir.finish()
}

pub fn replay(manifest: &Path, out: Option<PathBuf>) -> Result<()> {
    let m = RunManifest::load(manifest)
        .with_context(|| format!("loading manifest {}", manifest.display()))?;
    let mut cfg: RunConfig = serde_json::from_value(m.config["run"].clone())
        .context("manifest has no usable run configuration")?;
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    cfg.validate()?;
    let args = &m.config["args"];
    let path_arg = |k: &str| -> Result<PathBuf> {
        args[k]
            .as_str()
            .map(PathBuf::from)
            .with_context(|| format!("manifest args lack {k}"))
    };
    match m.command.as_str() {
        "pretrain" => pretrain(&cfg),
        "sample" => sample(&cfg),
        "train" => train(&cfg, false),
        "ipet" => train(&cfg, true),
        "distill" => distill(&cfg, &path_arg("soft")?),
        "score" => score(
            &cfg,
            args["pvp"].as_str().context("manifest args lack pvp")?,
            Some(path_arg("checkpoint")?),
            Some(path_arg("input")?),
        ),
        "eval" => eval(&cfg, &path_arg("predictions")?, Some(path_arg("gold")?)),
        "compare-decoding" => compare_decoding(&cfg),
        other => bail!("cannot replay command {other:?}"),
    }
}
