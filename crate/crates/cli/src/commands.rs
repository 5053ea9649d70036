//! The four commands. Each takes a fully resolved [`RunConfig`].

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mvx_core::evalx::{pointing_game, topq_iou, EvalReport, ExplanationMetrics};
use mvx_core::explainer::{AttributionMap, ExplainerBundle};
use mvx_core::mvarch::{build_model, MultiViewModel};
use mvx_core::mvcore::{load_dataset, split_dataset, Dataset, MultiViewSchema, SplitTag};
use mvx_core::synthgen::{generate, load_masks, write_synthetic};
use mvx_core::train::{predict_dataset, train_model};
use serde::{Deserialize, Serialize};

use crate::config::{EvalSplit, RunConfig};
use crate::plot::learning_curve;

/// Train/test membership stored beside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub data_path: PathBuf,
    pub train_fraction: f64,
    pub seed: u64,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

pub const SPLIT_FILE: &str = "split.json";
pub const SCHEMA_FILE: &str = "schema.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

/// Schema from `<data>/schema.json` if present, otherwise the config's
/// synthetic schema.
pub fn dataset_schema(data: &Path, cfg: &RunConfig) -> Result<MultiViewSchema> {
    let p = data.join(SCHEMA_FILE);
    if p.is_file() {
        let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        let schema: MultiViewSchema =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        schema.validate()?;
        Ok(schema)
    } else {
        Ok(cfg.data.synthetic.schema.clone())
    }
}

fn ids(ds: &Dataset) -> Vec<String> {
    ds.samples.iter().map(|s| s.sample_id.clone()).collect()
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir()?;
    let data = generate(&cfg.data.synthetic)?;
    create_dir(out)?;
    write_synthetic(&data, out)?;
    write_json(&out.join(SCHEMA_FILE), &data.dataset.schema)?;
    cfg.write_resolved(out)?;
    eprintln!(
        "wrote {} samples ({} masks) to {}",
        data.dataset.len(),
        data.masks.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir()?;
    let data_path = cfg.data.path.as_deref().context("no dataset; pass --data DIR")?;
    let schema = dataset_schema(data_path, cfg)?;
    let ds = load_dataset(data_path, &schema).with_context(|| format!("loading dataset {}", data_path.display()))?;
    let (train, test) = split_dataset(&ds, cfg.data.train_fraction, cfg.seed)?;
    let mut model = build_model(cfg.model.arch, &schema, cfg.model_config())?;
    create_dir(out)?;
    let report = train_model(&mut model, &train, Some(&test), &cfg.train)?;

    let ckpt = out.join("checkpoint");
    model.save_checkpoint(&ckpt)?;
    write_json(
        &ckpt.join(SPLIT_FILE),
        &SplitRecord {
            data_path: data_path.to_path_buf(),
            train_fraction: cfg.data.train_fraction,
            seed: cfg.seed,
            train_ids: ids(&train),
            test_ids: ids(&test),
        },
    )?;
    report.write_csv(&out.join("train_report.csv"))?;
    std::fs::write(out.join("train_summary.json"), report.summary_json()?)?;
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({ "wall_time_s": report.wall_time_s }),
    )?;
    learning_curve(&report, &out.join("learning_curve.png"))?;
    cfg.write_resolved(out)?;
    eprintln!(
        "{}: final test accuracy {:.3}, AUC {}",
        cfg.model.arch,
        report.final_test_accuracy.unwrap_or(f64::NAN),
        report.final_test_auc.map_or("n/a".into(), |a| format!("{a:.3}"))
    );
    Ok(())
}

struct Loaded {
    model: MultiViewModel,
    dataset: Dataset,
    data_path: PathBuf,
    split: Option<SplitRecord>,
}

fn load_run(ckpt: &Path, data_flag: Option<&Path>) -> Result<Loaded> {
    if !ckpt.join("manifest.json").is_file() {
        bail!("no checkpoint at {} (expected manifest.json)", ckpt.display());
    }
    let model =
        MultiViewModel::load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let split_path = ckpt.join(SPLIT_FILE);
    let split: Option<SplitRecord> = if split_path.is_file() {
        Some(serde_json::from_str(&std::fs::read_to_string(&split_path)?)?)
    } else {
        None
    };
    let data_path = data_flag
        .map(Path::to_path_buf)
        .or_else(|| split.as_ref().map(|s| s.data_path.clone()))
        .context("no dataset; pass --data DIR")?;
    let dataset =
        load_dataset(&data_path, &model.schema).with_context(|| format!("loading dataset {}", data_path.display()))?;
    Ok(Loaded {
        model,
        dataset,
        data_path,
        split,
    })
}

fn subset(ds: &Dataset, ids: &[String], tag: SplitTag) -> Result<Dataset> {
    let set: BTreeSet<String> = ids.iter().cloned().collect();
    if let Some(missing) = set.iter().find(|id| ds.sample(id).is_none()) {
        bail!("sample {missing} from the stored split is not in the dataset");
    }
    Ok(ds.subset(&set, tag))
}

fn head_training_set(run: &Loaded) -> Result<Dataset> {
    match &run.split {
        Some(s) => subset(&run.dataset, &s.train_ids, SplitTag::Train),
        None => Ok(run.dataset.clone()),
    }
}

fn trained_bundle(run: &Loaded, cfg: &RunConfig) -> Result<ExplainerBundle> {
    let mut bundle = ExplainerBundle::from_model(&run.model);
    bundle.train_heads(&head_training_set(run)?, &cfg.explain.head_train)?;
    Ok(bundle)
}

pub fn cmd_explain(cfg: &RunConfig) -> Result<()> {
    let ex = &cfg.explain;
    ex.params.check(ex.method)?;
    let out = cfg.output_dir()?;
    let ckpt = ex.checkpoint.as_deref().context("no checkpoint; pass --ckpt DIR")?;
    let run = load_run(ckpt, cfg.data.path.as_deref())?;
    let schema = &run.model.schema;
    let target = match &ex.target_class {
        Some(name) => Some(
            schema
                .class_index(name)
                .with_context(|| format!("unknown target class {name:?}; classes are {:?}", schema.class_names))?,
        ),
        None => None,
    };
    let views = ex.views.views(schema.num_views)?;
    let sample_ids: Vec<String> = if !ex.samples.is_empty() {
        ex.samples.clone()
    } else if let Some(s) = &run.split {
        s.test_ids.clone()
    } else {
        ids(&run.dataset)
    };
    for id in &sample_ids {
        if run.dataset.sample(id).is_none() {
            bail!("sample {id} not found in {}", run.data_path.display());
        }
    }

    let bundle = trained_bundle(&run, cfg)?;
    create_dir(out)?;
    let mut summary = Vec::new();
    for id in &sample_ids {
        let sample = run.dataset.sample(id).unwrap();
        let dir = out.join("explain").join(id);
        create_dir(&dir)?;
        for &v in &views {
            let (map, _) = bundle.explain_view(&sample.views, v, ex.method, target, &ex.params)?;
            let stem = format!("view_{v}_{}", ex.method);
            map.write_grid(&dir.join(format!("{stem}.csv")))?;
            map.overlay(&sample.views[v], ex.overlay_q)
                .save(dir.join(format!("{stem}.png")))?;
            summary.push(serde_json::json!({
                "sample_id": id,
                "view": v,
                "target_class": schema.class_names[map.target_class],
                "per_segment": map.per_segment,
            }));
        }
    }
    let heads: Vec<_> = bundle
        .heads
        .iter()
        .flatten()
        .map(|h| {
            serde_json::json!({
                "extractor": h.scope.extractor,
                "views": h.scope.views,
                "train_accuracy": h.train_accuracy,
                "n_train_pairs": h.n_train_pairs,
            })
        })
        .collect();
    write_json(
        &out.join("explain_summary.json"),
        &serde_json::json!({ "arch": run.model.kind, "method": ex.method, "heads": heads, "maps": summary }),
    )?;
    cfg.write_resolved(out)?;
    eprintln!(
        "explained {} sample(s) x {} view(s) into {}",
        sample_ids.len(),
        views.len(),
        out.join("explain").display()
    );
    Ok(())
}

/// `sample_id,label,p_<class>...` rows.
pub fn scores_csv(ds: &Dataset, probs: &[Vec<f64>]) -> String {
    let mut out = String::from("sample_id,label");
    for c in &ds.schema.class_names {
        let _ = write!(out, ",p_{c}");
    }
    out.push('\n');
    for (s, p) in ds.samples.iter().zip(probs) {
        let _ = write!(out, "{},{}", s.sample_id, ds.schema.class_names[s.label]);
        for v in p {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let out = cfg.output_dir()?;
    let ckpt = cfg
        .eval
        .checkpoint
        .as_deref()
        .or(cfg.explain.checkpoint.as_deref())
        .context("no checkpoint; pass --ckpt DIR")?;
    let run = load_run(ckpt, cfg.data.path.as_deref())?;
    let eval_ds = match (&cfg.eval.split, &run.split) {
        (EvalSplit::Test, Some(s)) => subset(&run.dataset, &s.test_ids, SplitTag::Test)?,
        _ => run.dataset.clone(),
    };
    let probs = predict_dataset(&run.model, &eval_ds)?;
    let schema = &run.model.schema;
    let mut report =
        EvalReport::from_probabilities(&probs, &eval_ds.labels(), &schema.class_names, schema.positive_class())?;

    let masks = load_masks(&run.data_path, &eval_ds)?;
    if cfg.eval.explanations && !masks.is_empty() {
        let ex = &cfg.explain;
        ex.params.check(ex.method)?;
        let bundle = trained_bundle(&run, cfg)?;
        let positive = schema.positive_class();
        let mut maps: Vec<(AttributionMap, &mvx_core::synthgen::Mask)> = Vec::new();
        for ((id, v), mask) in &masks {
            let sample = eval_ds.sample(id).unwrap();
            let (map, _) = bundle.explain_view(&sample.views, *v, ex.method, Some(positive), &ex.params)?;
            maps.push((map, mask));
        }
        let mut hits = 0;
        let mut iou = 0.0;
        for (m, mask) in &maps {
            hits += usize::from(pointing_game(&m.per_pixel, m.height, m.width, mask)?);
            iou += topq_iou(&m.per_pixel, m.height, m.width, mask, cfg.eval.q)?;
        }
        let n = maps.len();
        report.explanation = Some(ExplanationMetrics {
            n_explained: n,
            pointing_hits: hits,
            pointing_game_accuracy: hits as f64 / n as f64,
            q: cfg.eval.q,
            mean_topq_iou: iou / n as f64,
        });
    }

    create_dir(out)?;
    write_json(&out.join("eval_report.json"), &report)?;
    std::fs::write(out.join("scores.csv"), scores_csv(&eval_ds, &probs))?;
    cfg.write_resolved(out)?;
    eprintln!(
        "accuracy {:.3}, AUC {} on {} sample(s)",
        report.accuracy,
        report.auc.map_or("n/a".into(), |a| format!("{a:.3}")),
        report.n_samples
    );
    Ok(())
}
