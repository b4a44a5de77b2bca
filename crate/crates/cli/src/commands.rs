use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use simattn_core::attention::{attend, MaskConfig, WeightArch};
use simattn_core::data::{generate, Dataset, SyntheticSpec};
use simattn_core::eval::{
    dataset_attention_iou, random_map_baseline, recall_at_ks, segmentation_pairs, segmentation_report,
    RetrievalIndex,
};
use simattn_core::model::{MetricLossConfig, MetricLossKind};
use simattn_core::train::{fit, OptimizerKind, TrainConfig};
use simattn_core::{Encoder, EncoderConfig, Graph};

use crate::manifest::{sha256_file, FileDigest, RunManifest};
use crate::{pgm, Command, EvalArgs, ExplainArgs, GenDataArgs, OptimizerArg, SegmentArgs, SplitArg, TrainArgs};

/// Sidecar stored next to every checkpoint as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub dataset_sha256: String,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<(Encoder, CheckpointMeta)> {
    let meta_path = with_suffix(path, ".json");
    let text = fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_path.display()))?;
    let enc = Encoder::load(meta.encoder.clone(), path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((enc, meta))
}

fn eval_set(data: &Dataset, meta: &CheckpointMeta, split: SplitArg) -> Result<Dataset> {
    Ok(match split {
        SplitArg::All => data.clone(),
        SplitArg::Val => data.split(meta.train.val_per_class, meta.train.seed)?.1,
    })
}

fn metrics_text(metrics: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in metrics {
        writeln!(s, "{k}={v}").expect("writing to a String");
    }
    s
}

struct Outcome {
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    metrics: Vec<(String, String)>,
}

fn finish(command: &Command, manifest: &Path, outcome: Outcome) -> Result<()> {
    let manifest_doc = RunManifest {
        command: command.clone(),
        config: outcome.config,
        inputs: outcome.inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        outputs: outcome.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
        metrics: outcome.metrics.into_iter().collect::<BTreeMap<_, _>>(),
    };
    manifest_doc.save(manifest)
}

/// Runs one command, writing its outputs and manifest.
pub fn run(command: &Command) -> Result<()> {
    match command {
        Command::GenData(a) => {
            let manifest = a.manifest.clone().unwrap_or_else(|| with_suffix(&a.out, ".manifest.json"));
            finish(command, &manifest, gen_data(a)?)
        }
        Command::Train(a) => {
            let manifest = a.manifest.clone().unwrap_or_else(|| with_suffix(&a.out, ".manifest.json"));
            finish(command, &manifest, train(a)?)
        }
        Command::Eval(a) => {
            let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.checkpoint, ".eval.txt"));
            let manifest = a.manifest.clone().unwrap_or_else(|| with_suffix(&out, ".manifest.json"));
            finish(command, &manifest, eval(a, &out)?)
        }
        Command::Explain(a) => {
            let manifest = a.manifest.clone().unwrap_or_else(|| a.out_dir.join("manifest.json"));
            finish(command, &manifest, explain(a)?)
        }
        Command::Segment(a) => {
            let out = a.out.clone().unwrap_or_else(|| with_suffix(&a.checkpoint, ".segment.txt"));
            let manifest = a.manifest.clone().unwrap_or_else(|| with_suffix(&out, ".manifest.json"));
            finish(command, &manifest, segment(a, &out)?)
        }
        Command::Replay(a) => replay(&a.manifest),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let spec = SyntheticSpec {
        classes: a.classes,
        glyph_size: a.glyph_size,
        clutter_blobs: a.clutter,
        blob_size: a.blob_size,
        noise: a.noise,
        height: a.height,
        width: a.width,
        channels: a.channels,
        seed: a.seed,
    };
    let ds = generate(&spec, a.per_class)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ds.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mut metrics = vec![("samples".to_string(), ds.len().to_string())];
    for (c, idx) in ds.indices_by_class().iter().enumerate() {
        metrics.push((format!("class_{}", c + 1), idx.len().to_string()));
    }
    print!("{}", metrics_text(&metrics));
    Ok(Outcome {
        config: serde_json::to_value(&spec)?,
        inputs: vec![],
        outputs: vec![a.out.clone()],
        metrics,
    })
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        arch: a.arch,
        gamma: a.gamma,
        metric: MetricLossConfig {
            margin: a.margin,
            margin2: a.margin2,
            contrastive_margin: a.contrastive_margin,
            ..MetricLossConfig::new(MetricLossKind::for_arch(a.arch))
        },
        mask: MaskConfig {
            alpha: a.alpha_mask,
            beta: a.beta_mask,
            normalize: a.normalize_map,
        },
        detach_w: a.detach_w,
        lr: a.lr,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => OptimizerKind::Sgd,
            OptimizerArg::Adam => OptimizerKind::Adam {
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            },
        },
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        attention_layer: a.attention_layer,
        val_per_class: a.val_per_class,
    }
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    let cfg = train_config(a);
    cfg.validate()?;
    let encoder_cfg = EncoderConfig {
        attention_layer: a.attention_layer,
        embedding_dim: a.embedding_dim,
        ..EncoderConfig::desk(data.image_shape())
    };
    let mut enc = Encoder::new(encoder_cfg.clone(), a.seed)?;
    let meta = CheckpointMeta {
        encoder: encoder_cfg,
        train: cfg.clone(),
        dataset_sha256: sha256_file(&a.data)?,
    };
    let meta_path = with_suffix(&a.out, ".json");
    let log_path = with_suffix(&a.out, ".log");
    write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    write(&log_path, "")?;
    enc.save(&a.out)?;
    let mut outputs = vec![a.out.clone(), meta_path, log_path.clone()];
    let mut log_text = String::new();
    let log = fit(&mut enc, &data, &cfg, &mut |r, e| {
        println!("{r}");
        log_text.push_str(&format!("{r}\n"));
        fs::write(&log_path, &log_text)?;
        e.save(&a.out)?;
        if a.keep_epochs {
            e.save(with_suffix(&a.out, &format!(".epoch-{}", r.epoch)))?;
        }
        Ok(())
    })?;
    if a.keep_epochs {
        outputs.extend((1..=a.epochs).map(|n| with_suffix(&a.out, &format!(".epoch-{n}"))));
    }
    let mut metrics = vec![("epochs".to_string(), log.records.len().to_string())];
    if let Some(last) = log.last() {
        metrics.push(("loss_ml".into(), last.loss_ml.to_string()));
        metrics.push(("loss_sm".into(), last.loss_sm.to_string()));
        metrics.push(("recall_at_1".into(), last.recall_at_1.to_string()));
    }
    Ok(Outcome {
        config: serde_json::to_value(&meta)?,
        inputs: vec![a.data.clone()],
        outputs,
        metrics,
    })
}

fn eval(a: &EvalArgs, out: &Path) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    let (enc, meta) = load_checkpoint(&a.checkpoint)?;
    let set = eval_set(&data, &meta, a.split)?;
    let index = RetrievalIndex::from_dataset(&enc, &set)?;
    let recalls = recall_at_ks(&index, &index.self_queries(), &[1, 2, 4])?;
    let ious = dataset_attention_iou(&enc, &set, meta.train.arch, a.quantile, a.seed)?;
    let mut metrics = vec![
        ("samples".to_string(), set.len().to_string()),
        ("recall_at_1".to_string(), recalls[0].to_string()),
        ("recall_at_2".to_string(), recalls[1].to_string()),
        ("recall_at_4".to_string(), recalls[2].to_string()),
        ("attention_iou".to_string(), (ious.iter().sum::<f64>() / ious.len() as f64).to_string()),
    ];
    if a.baseline_trials > 0 {
        let masks: Vec<&[u8]> = set.samples.iter().map(|s| s.part_mask.as_slice()).collect();
        let b = random_map_baseline(
            &masks,
            (set.height, set.width),
            enc.config().attention_dims()?,
            a.quantile,
            a.baseline_trials,
            a.seed,
        )?;
        metrics.push(("random_iou_mean".into(), b.mean.to_string()));
        metrics.push(("random_iou_std".into(), b.std.to_string()));
    }
    let text = metrics_text(&metrics);
    print!("{text}");
    write(out, &text)?;
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        inputs: vec![a.data.clone(), a.checkpoint.clone()],
        outputs: vec![out.to_path_buf()],
        metrics,
    })
}

fn explain(a: &ExplainArgs) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    let (enc, meta) = load_checkpoint(&a.checkpoint)?;
    let arch = meta.train.arch;
    ensure!(
        a.indices.len() == arch.arity(),
        "{arch} tuples have {} members, got {} indices",
        arch.arity(),
        a.indices.len()
    );
    for &i in &a.indices {
        ensure!(i < data.len(), "index {i} out of range for {} samples", data.len());
    }
    let labels: Vec<u32> = a.indices.iter().map(|&i| data.samples[i].label).collect();
    let warch = WeightArch::for_tuple(arch, labels[0] == labels[1]);
    let g = Graph::new();
    let bound = enc.bind(&g, false);
    let images: Vec<_> = a.indices.iter().map(|&i| data.samples[i].image.clone()).collect();
    let att = attend(&bound, &images, warch, true, false)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut outputs = Vec::new();
    let mut metrics = vec![("weight_arch".to_string(), format!("{warch:?}"))];
    for (j, (&idx, m)) in a.indices.iter().zip(&att.maps).enumerate() {
        let px = pgm::attention_pixels(&m.map, data.height, data.width)?;
        let name = format!("member{j}_sample{idx}.pgm");
        let path = a.out_dir.join(&name);
        write(&path, pgm::encode(data.width, data.height, &px))?;
        outputs.push(path);
        let max = m.map.data().iter().cloned().fold(0.0, f64::max);
        metrics.push((format!("member{j}_sample"), idx.to_string()));
        metrics.push((format!("member{j}_label"), labels[j].to_string()));
        metrics.push((format!("member{j}_score"), att.scores[j].item()?.to_string()));
        metrics.push((format!("member{j}_map_max"), max.to_string()));
        metrics.push((format!("member{j}_file"), name));
    }
    let w = att.weights.w.data();
    let d = w.len() as f64;
    metrics.push(("w_min".into(), w.iter().cloned().fold(f64::INFINITY, f64::min).to_string()));
    metrics.push(("w_max".into(), w.iter().cloned().fold(f64::NEG_INFINITY, f64::max).to_string()));
    metrics.push(("w_mean".into(), (w.iter().sum::<f64>() / d).to_string()));
    metrics.push(("w_nonzero".into(), w.iter().filter(|&&x| x != 0.0).count().to_string()));
    let sidecar = a.out_dir.join("explain.txt");
    let text = metrics_text(&metrics);
    write(&sidecar, &text)?;
    print!("{text}");
    outputs.push(sidecar);
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        inputs: vec![a.data.clone(), a.checkpoint.clone()],
        outputs,
        metrics,
    })
}

fn segment(a: &SegmentArgs, out: &Path) -> Result<Outcome> {
    let data = load_dataset(&a.data)?;
    let (enc, meta) = load_checkpoint(&a.checkpoint)?;
    let set = eval_set(&data, &meta, a.split)?;
    let pairs = segmentation_pairs(&set, a.pairs, a.seed)?;
    let report = segmentation_report(&enc, &set, &pairs, a.quantile)?;
    let mut metrics = vec![("pairs".to_string(), pairs.len().to_string())];
    for (label, iou, n) in &report.per_class {
        metrics.push((format!("class_{label}_mean_iou"), iou.to_string()));
        metrics.push((format!("class_{label}_pairs"), n.to_string()));
    }
    metrics.push(("mean_iou".into(), report.mean_iou.to_string()));
    metrics.push(("std_error".into(), report.std_error.to_string()));
    let text = metrics_text(&metrics);
    print!("{text}");
    write(out, &text)?;
    Ok(Outcome {
        config: serde_json::to_value(a)?,
        inputs: vec![a.data.clone(), a.checkpoint.clone()],
        outputs: vec![out.to_path_buf()],
        metrics,
    })
}

fn replay(path: &Path) -> Result<()> {
    let recorded = RunManifest::load(path)?;
    if matches!(recorded.command, Command::Replay(_)) {
        bail!("a manifest cannot record a replay");
    }
    recorded.check_inputs()?;
    run(&recorded.command)?;
    let bad = recorded.mismatched_outputs()?;
    if !bad.is_empty() {
        let list: Vec<String> = bad.iter().map(|p| p.display().to_string()).collect();
        bail!("replay diverged: {}", list.join(", "));
    }
    eprintln!("replay: {} outputs reproduced", recorded.outputs.len());
    Ok(())
}
