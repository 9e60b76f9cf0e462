use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{usage, AblateArgs, Command, EvalArgs, GenDataArgs, InferArgs, Overrides, RunConfig, TrainArgs};
use crate::data::{
    generate_synthetic, load_dataset, load_vision_features, read_vision_features, write_dataset,
    write_vision_features, FeatureMap, Sample, Split,
};
use crate::eval::{ablation_report, MetricRecord, ReportRow, Summary};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::pipeline::{
    corpus_vocabulary, evaluate_stage, infer_one_stage, infer_two_stage, rng_stream, run_variant,
    score_predictions, train_stage, write_json, Prediction, Purpose, RunManifest, RunMetrics, Splits, StageModel,
    StageSpec, Variant,
};

/// A command with every input resolved; stored in manifests for `rerun`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
enum Invocation {
    GenData {
        out: PathBuf,
    },
    Train {
        stage: String,
        out: PathBuf,
    },
    Infer {
        ckpt1: PathBuf,
        ckpt2: Option<PathBuf>,
        data: PathBuf,
        features: PathBuf,
        out: PathBuf,
        max_new_tokens: usize,
    },
    Eval {
        pred: PathBuf,
        gold: PathBuf,
        out: Option<PathBuf>,
    },
    Ablate {
        seeds: usize,
        out: PathBuf,
    },
}

impl Invocation {
    fn name(&self) -> &'static str {
        match self {
            Invocation::GenData { .. } => "gen-data",
            Invocation::Train { .. } => "train",
            Invocation::Infer { .. } => "infer",
            Invocation::Eval { .. } => "eval",
            Invocation::Ablate { .. } => "ablate",
        }
    }
}

pub(super) fn execute(command: Command) -> Result<()> {
    let (invocation, config) = match command {
        Command::GenData(a) => gen_data_invocation(a)?,
        Command::Train(a) => train_invocation(a)?,
        Command::Infer(a) => infer_invocation(a),
        Command::Eval(a) => eval_invocation(a),
        Command::Ablate(a) => ablate_invocation(a)?,
        Command::Rerun(a) => {
            let manifest = RunManifest::load(&a.manifest).map_err(|e| usage(e.to_string()))?;
            let inv = manifest
                .config
                .get("invocation")
                .cloned()
                .ok_or_else(|| usage("manifest lacks an invocation"))?;
            let run = manifest
                .config
                .get("run")
                .cloned()
                .ok_or_else(|| usage("manifest lacks a run config"))?;
            let inv: Invocation = serde_json::from_value(inv).map_err(|e| usage(e.to_string()))?;
            let run: RunConfig = serde_json::from_value(run).map_err(|e| usage(e.to_string()))?;
            (inv, run)
        }
    };
    config.validate()?;
    run_invocation(&invocation, &config)
}

fn apply_overrides(o: &Overrides) -> Result<RunConfig> {
    let mut c = RunConfig::load(o.config.as_deref())?;
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(d) = &o.data_dir {
        c.data.dir = d.clone();
    }
    if let Some(e) = o.epochs {
        c.train.epochs = e;
    }
    if let Some(b) = o.batch_size {
        c.train.batch_size = b;
    }
    if let Some(lr) = o.lr {
        c.train.optimizer.lr = lr;
    }
    Ok(c)
}

fn gen_data_invocation(a: GenDataArgs) -> Result<(Invocation, RunConfig)> {
    let mut c = apply_overrides(&a.common)?;
    if let Some(n) = a.n_colors {
        c.generator.n_colors = n;
    }
    if let Some(n) = a.n_train {
        c.splits.train = n;
    }
    if let Some(n) = a.n_val {
        c.splits.val = n;
    }
    if let Some(n) = a.n_test {
        c.splits.test = n;
    }
    Ok((Invocation::GenData { out: a.out }, c))
}

fn train_invocation(a: TrainArgs) -> Result<(Invocation, RunConfig)> {
    let mut c = apply_overrides(&a.common)?;
    if a.no_vision {
        c.use_vision = false;
    }
    let stage = a
        .stage
        .or_else(|| c.stage.clone())
        .ok_or_else(|| usage("no stage given; pass --stage rationale|answer|one:FORMAT"))?;
    c.stage = Some(stage.clone());
    let out = a.out.unwrap_or_else(|| c.out_dir.clone());
    Ok((Invocation::Train { stage, out }, c))
}

fn infer_invocation(a: InferArgs) -> (Invocation, RunConfig) {
    let features = a
        .features
        .unwrap_or_else(|| a.data.parent().unwrap_or(Path::new(".")).join("features.mmvf"));
    let inv = Invocation::Infer {
        ckpt1: a.ckpt1,
        ckpt2: a.ckpt2,
        data: a.data,
        features,
        out: a.out,
        max_new_tokens: a.max_new_tokens,
    };
    (inv, RunConfig::default())
}

fn eval_invocation(a: EvalArgs) -> (Invocation, RunConfig) {
    let inv = Invocation::Eval {
        pred: a.pred,
        gold: a.gold,
        out: a.out,
    };
    (inv, RunConfig::default())
}

fn ablate_invocation(a: AblateArgs) -> Result<(Invocation, RunConfig)> {
    let c = apply_overrides(&a.common)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let out = a.out.unwrap_or_else(|| c.out_dir.join("ablate"));
    Ok((Invocation::Ablate { seeds: a.seeds, out }, c))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("input file {} does not exist", path.display())))
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("cannot create directory {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn file_stem(label: &str) -> String {
    label.replace(['/', ':'], "-")
}

fn write_manifest(
    path: &Path,
    inv: &Invocation,
    config: &RunConfig,
    data: BTreeMap<String, PathBuf>,
    checkpoints: BTreeMap<String, PathBuf>,
    metrics: Vec<PathBuf>,
) -> Result<()> {
    let manifest = RunManifest {
        command: inv.name().to_string(),
        seed: config.seed,
        config: json!({ "invocation": inv, "run": config }),
        data,
        checkpoints,
        metrics,
    };
    manifest.save(path)?;
    Ok(())
}

struct Corpus {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
    features: FeatureMap,
}

fn load_corpus(c: &RunConfig, need_test: bool) -> Result<Corpus> {
    let d = &c.data;
    let mut paths = vec![d.train(), d.val(), d.features()];
    if need_test {
        paths.push(d.test());
    }
    for p in &paths {
        require_file(p)?;
    }
    let features = load_vision_features(d.features())?;
    if let Some((id, f)) = features.iter().next() {
        if (f.m(), f.d_v()) != (c.model.patches, c.model.vision_dim) {
            return Err(usage(format!(
                "feature {id} is {}x{} but the model expects {}x{} (model.patches, model.vision_dim)",
                f.m(),
                f.d_v(),
                c.model.patches,
                c.model.vision_dim
            )));
        }
    }
    Ok(Corpus {
        train: load_dataset(d.train(), Split::Train)?,
        val: load_dataset(d.val(), Split::Val)?,
        test: if need_test { load_dataset(d.test(), Split::Test)? } else { Vec::new() },
        features,
    })
}

fn data_map(c: &RunConfig, need_test: bool) -> BTreeMap<String, PathBuf> {
    let d = &c.data;
    let mut m = BTreeMap::from([
        ("train".to_string(), d.train()),
        ("val".to_string(), d.val()),
        ("features".to_string(), d.features()),
    ]);
    if need_test {
        m.insert("test".into(), d.test());
    }
    m
}

fn run_invocation(inv: &Invocation, c: &RunConfig) -> Result<()> {
    match inv {
        Invocation::GenData { out } => gen_data(inv, c, out),
        Invocation::Train { stage, out } => train(inv, c, stage, out),
        Invocation::Infer {
            ckpt1,
            ckpt2,
            data,
            features,
            out,
            max_new_tokens,
        } => infer(inv, c, ckpt1, ckpt2.as_deref(), data, features, out, *max_new_tokens),
        Invocation::Eval { pred, gold, out } => eval(inv, c, pred, gold, out.as_deref()),
        Invocation::Ablate { seeds, out } => ablate(inv, c, *seeds, out),
    }
}

#[derive(Serialize)]
struct CorpusManifest<'a> {
    master_seed: u64,
    generator: &'a crate::data::SyntheticConfig,
    splits: &'a super::SplitSizes,
    files: BTreeMap<&'static str, &'static str>,
}

fn gen_data(inv: &Invocation, c: &RunConfig, out: &Path) -> Result<()> {
    let mut g = c.generator.clone();
    g.n_samples = c.splits.train + c.splits.val + c.splits.test;
    g.seed = rng_stream(c.seed, Purpose::Data).next_u64();
    g.validate().map_err(|e| usage(e.to_string()))?;
    if c.splits.train == 0 || c.splits.val == 0 || c.splits.test == 0 {
        return Err(usage("every split needs at least one sample"));
    }
    ensure_dir(out)?;
    let (samples, features) = generate_synthetic(&g)?;
    let (train, rest) = samples.split_at(c.splits.train);
    let (val, test) = rest.split_at(c.splits.val);
    let files = [
        ("train", "train.jsonl"),
        ("val", "val.jsonl"),
        ("test", "test.jsonl"),
        ("features", "features.mmvf"),
    ];
    write_dataset(out.join("train.jsonl"), train)?;
    write_dataset(out.join("val.jsonl"), val)?;
    write_dataset(out.join("test.jsonl"), test)?;
    write_vision_features(out.join("features.mmvf"), &features)?;
    let corpus = CorpusManifest {
        master_seed: c.seed,
        generator: &g,
        splits: &c.splits,
        files: files.into_iter().collect(),
    };
    write_json(out.join("corpus.json"), &corpus)?;
    let data = files.iter().map(|(k, f)| (k.to_string(), out.join(f))).collect();
    write_manifest(&out.join("manifest.json"), inv, c, data, BTreeMap::new(), Vec::new())?;
    println!(
        "wrote {} train, {} val, {} test samples and {} feature records to {}",
        train.len(),
        val.len(),
        test.len(),
        features.len(),
        out.display()
    );
    Ok(())
}

fn train(inv: &Invocation, c: &RunConfig, stage: &str, out: &Path) -> Result<()> {
    let spec: StageSpec = stage.parse().map_err(|e: crate::pipeline::PipelineError| usage(e.to_string()))?;
    let spec = StageSpec {
        use_vision: c.use_vision,
        ..spec
    };
    let corpus = load_corpus(c, false)?;
    ensure_dir(out)?;
    let vocab = corpus_vocabulary(&corpus.train);
    let trained = train_stage(
        &spec,
        &corpus.train,
        &corpus.val,
        &corpus.features,
        &vocab,
        &c.model,
        &c.train,
        c.seed,
    )?;
    let stem = file_stem(&spec.to_string());
    let ckpt_path = out.join(format!("{stem}.mmck"));
    let stage_model = StageModel {
        spec,
        model: trained.model.clone(),
    };
    save_checkpoint(&ckpt_path, &stage_model.to_checkpoint().with_meta("seed", c.seed))?;
    let log_path = out.join(format!("{stem}.log.json"));
    write_json(
        &log_path,
        &json!({ "epochs": trained.log, "best_epoch": trained.best_epoch, "truncated_inputs": trained.model.truncations() }),
    )?;
    let m = evaluate_stage(&spec, &trained.model, &corpus.val, &corpus.features, c.train.max_new_tokens)?;
    let metrics = RunMetrics {
        variant: spec.to_string(),
        seed: c.seed,
        accuracy: m.accuracy,
        rouge_l: m.rouge_l,
        abstain_rate: m.abstain_rate,
        epochs_run: trained.epochs_run,
    };
    let metrics_path = out.join(format!("{stem}.metrics.json"));
    write_json(&metrics_path, &metrics)?;
    write_manifest(
        &out.join(format!("{stem}.manifest.json")),
        inv,
        c,
        data_map(c, false),
        BTreeMap::from([(spec.stage.name().to_string(), ckpt_path.clone())]),
        vec![metrics_path],
    )?;
    println!("{}", serde_json::to_string(&metrics)?);
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn load_stage(path: &Path) -> Result<StageModel> {
    require_file(path)?;
    let ckpt = load_checkpoint(path)?;
    Ok(StageModel::from_checkpoint(ckpt)?)
}

#[allow(clippy::too_many_arguments)]
fn infer(
    inv: &Invocation,
    c: &RunConfig,
    ckpt1: &Path,
    ckpt2: Option<&Path>,
    data: &Path,
    features_path: &Path,
    out: &Path,
    max_new_tokens: usize,
) -> Result<()> {
    require_file(data)?;
    require_file(features_path)?;
    let first = load_stage(ckpt1)?;
    let second = ckpt2.map(load_stage).transpose()?;
    let samples = load_dataset(data, Split::Test)?;
    let bytes = std::fs::read(features_path).with_context(|| format!("reading {}", features_path.display()))?;
    let features = read_vision_features(&bytes)?;
    let predictions = match &second {
        Some(s2) => infer_two_stage(&samples, &features, &first, s2, max_new_tokens)?,
        None => infer_one_stage(&samples, &features, &first, max_new_tokens)?,
    };
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let mut text = String::new();
    for p in &predictions {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let mut checkpoints = BTreeMap::from([("stage1".to_string(), ckpt1.to_path_buf())]);
    if let Some(p) = ckpt2 {
        checkpoints.insert("stage2".into(), p.to_path_buf());
    }
    let data_paths = BTreeMap::from([
        ("data".to_string(), data.to_path_buf()),
        ("features".to_string(), features_path.to_path_buf()),
    ]);
    write_manifest(&with_suffix(out, ".manifest.json"), inv, c, data_paths, checkpoints, vec![out.to_path_buf()])?;
    let abstained = predictions.iter().filter(|p| p.answer_letter.is_none()).count();
    println!(
        "wrote {} predictions ({abstained} abstained) to {}",
        predictions.len(),
        out.display()
    );
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn eval(inv: &Invocation, c: &RunConfig, pred: &Path, gold: &Path, out: Option<&Path>) -> Result<()> {
    require_file(gold)?;
    let predictions = read_predictions(pred)?;
    let golds = load_dataset(gold, Split::Test)?;
    let (acc, rouge, abstain) = score_predictions(&predictions, &golds)?;
    let n = golds.len();
    let mut records = vec![MetricRecord::new("accuracy", acc, n)?];
    if let Some(r) = rouge {
        records.push(MetricRecord::new("rougeL", r, n)?);
    }
    records.push(MetricRecord::new("abstain_rate", abstain, n)?);
    let text = serde_json::to_string_pretty(&records)? + "\n";
    print!("{text}");
    if let Some(out) = out {
        std::fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        let data = BTreeMap::from([
            ("predictions".to_string(), pred.to_path_buf()),
            ("gold".to_string(), gold.to_path_buf()),
        ]);
        write_manifest(&with_suffix(out, ".manifest.json"), inv, c, data, BTreeMap::new(), vec![out.to_path_buf()])?;
    }
    Ok(())
}

fn ablate(inv: &Invocation, c: &RunConfig, seeds: usize, out: &Path) -> Result<()> {
    let corpus = load_corpus(c, true)?;
    ensure_dir(out)?;
    let splits = Splits {
        train: &corpus.train,
        val: &corpus.val,
        test: &corpus.test,
    };
    let mut rows = Vec::new();
    let mut metric_files = Vec::new();
    for variant in Variant::GRID {
        for use_vision in [true, false] {
            let mut runs = Vec::with_capacity(seeds);
            for k in 0..seeds {
                let seed = c.seed + k as u64;
                let run = run_variant(variant, use_vision, splits, &corpus.features, &c.model, &c.train, seed)?;
                let path = out.join(format!("{}.seed{seed}.metrics.json", file_stem(&run.metrics.variant)));
                write_json(&path, &run.metrics)?;
                log::info!("{}", serde_json::to_string(&run.metrics)?);
                metric_files.push(path);
                runs.push(run.metrics);
            }
            let series = |f: fn(&RunMetrics) -> Option<f64>| -> Option<Summary> {
                let v: Option<Vec<f64>> = runs.iter().map(f).collect();
                v.and_then(|v| Summary::of(&v))
            };
            rows.push(ReportRow {
                variant: variant.label(use_vision),
                rouge_l: series(|m| m.rouge_l),
                accuracy: series(|m| m.accuracy).unwrap_or(Summary::single(0.0)),
                abstain_rate: series(|m| m.abstain_rate).unwrap_or(Summary::single(0.0)),
            });
        }
    }
    let report = ablation_report(&rows);
    let report_path = out.join("report.txt");
    std::fs::write(&report_path, &report).with_context(|| format!("writing {}", report_path.display()))?;
    metric_files.push(report_path);
    write_manifest(&out.join("manifest.json"), inv, c, data_map(c, true), BTreeMap::new(), metric_files)?;
    print!("{report}");
    Ok(())
}
