//! Subcommand bodies. Each writes into a [`RunDir`] and returns whether the
//! run should exit successfully.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iars_core::contour::contour_report;
use iars_core::data::manifest::{DatasetManifest, Split};
use iars_core::data::pnm::{read_pgm, write_pgm};
use iars_core::data::resize::{resize_bilinear, resize_nearest};
use iars_core::data::synth::{synth_generate, write_dataset};
use iars_core::data::{BinaryMask, Sample};
use iars_core::interpret::{variant_progression, write_block_mips, write_progression};
use iars_core::model::{build_model, ArchConfig, Model, VariantFlags};
use iars_core::par::parallel_map;
use iars_core::region::{aggregate, compare_masks, RegionReport, REPORT_COLUMNS};
use iars_core::selftest::run_all;
use iars_core::stats::{rank_sum_test, RankSumMethod};
use iars_core::training::{load_checkpoint, predict_masks, save_checkpoint, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{CliConfig, RESOLVED_FILE};
use crate::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Output directory of one command; remembers every file written.
pub struct RunDir {
    root: PathBuf,
    command: &'static str,
    files: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(root: &Path, command: &'static str, cfg: &CliConfig) -> Result<Self, CliError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let mut dir = RunDir {
            root: root.to_path_buf(),
            command,
            files: Vec::new(),
        };
        dir.write(RESOLVED_FILE, cfg.to_json().as_bytes())?;
        Ok(dir)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn subdir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(rel);
        std::fs::write(&p, bytes).map_err(|e| io_err(&p, e))?;
        self.record(p);
        Ok(())
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    /// Registers a file written by library code.
    pub fn record(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    /// Writes the manifest of produced files.
    pub fn finish(mut self) -> Result<(), CliError> {
        let mut entries = BTreeMap::new();
        for f in &self.files {
            let bytes = std::fs::metadata(f).map_err(|e| io_err(f, e))?.len();
            let rel = f.strip_prefix(&self.root).unwrap_or(f);
            entries.insert(rel.to_string_lossy().replace('\\', "/"), bytes);
        }
        let files: Vec<_> = entries
            .into_iter()
            .map(|(path, bytes)| json!({"path": path, "bytes": bytes}))
            .collect();
        let manifest = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "files": files,
        });
        self.files.clear();
        self.write_json(RUN_MANIFEST, &manifest)
    }
}

fn manifest(cfg: &CliConfig) -> Result<DatasetManifest, CliError> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("no dataset given (use --data or set \"data\" in the config)".into()))?;
    let path = if data.is_dir() {
        data.join("manifest.jsonl")
    } else {
        data.clone()
    };
    Ok(DatasetManifest::load(path)?)
}

fn load_split(cfg: &CliConfig, split: Split) -> Result<Vec<Sample>, CliError> {
    let samples = manifest(cfg)?.load_split(split)?;
    if samples.is_empty() {
        return Err(CliError::Runtime(format!("split {split} is empty")));
    }
    Ok(samples)
}

/// Resizes samples whose frame differs from the network input.
fn fit_to_input(samples: Vec<Sample>, arch: &ArchConfig) -> Vec<Sample> {
    let (h, w) = (arch.input_h, arch.input_w);
    samples
        .into_iter()
        .map(|s| {
            if s.image.dims() == (h, w) {
                s
            } else {
                Sample {
                    image: resize_bilinear(&s.image, h, w),
                    mask: resize_nearest(&s.mask, h, w),
                    id: s.id,
                }
            }
        })
        .collect()
}

fn checkpoint_path(cfg: &CliConfig) -> Result<&Path, CliError> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Usage("no checkpoint given (use --checkpoint)".into()))
}

pub fn synth(cfg: &CliConfig, out: &mut RunDir) -> Result<bool, CliError> {
    let samples = synth_generate(&cfg.synth)?;
    let m = write_dataset(out.path(""), &samples)?;
    for r in &m.records {
        out.record(m.resolve(&r.image));
        out.record(m.resolve(&r.mask));
    }
    out.record(out.path("manifest.jsonl"));
    eprintln!("wrote {} samples to {}", samples.len(), out.path("").display());
    Ok(true)
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub fn train(cfg: &CliConfig, out: &mut RunDir) -> Result<bool, CliError> {
    let m = manifest(cfg)?;
    let train = fit_to_input(m.load_split(Split::Train)?, &cfg.arch);
    let val = fit_to_input(m.load_split(Split::Val)?, &cfg.arch);
    let mut model: Model<f32> = build_model(&cfg.arch, cfg.flags()?, cfg.seed)?;
    eprintln!(
        "training {} ({} parameters) on {} images, validating on {}",
        model.flags.label(),
        model.parameter_count(),
        train.len(),
        val.len()
    );
    let mut trainer = Trainer::new(&mut model, cfg.train.clone(), cfg.focal)?;
    for _ in 0..cfg.train.epochs {
        let r = trainer.run_epoch(&train, &val)?;
        match r.val_iou {
            Some(v) => eprintln!("epoch {:>3}  loss {:.6}  val_iou {:.4}", r.epoch, r.loss, v),
            None => eprintln!("epoch {:>3}  loss {:.6}", r.epoch, r.loss),
        }
    }
    let log = trainer.log.clone();
    let optimizer = trainer.optimizer.clone();
    let epoch = trainer.epoch as u64;
    let ckpt = out.path(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &model, Some(&optimizer), epoch)?;
    out.record(ckpt);
    out.write("train_log.csv", log.to_csv().as_bytes())?;
    out.write_json("train_log.json", &log)?;
    Ok(true)
}

#[derive(Serialize, Deserialize)]
struct PredictionInfo {
    variant: String,
    checkpoint: PathBuf,
    split: Split,
    images: Vec<String>,
}

const PREDICTION_INFO: &str = "prediction.json";

pub fn predict(cfg: &CliConfig, out: &mut RunDir, split: Split) -> Result<bool, CliError> {
    let ckpt_path = checkpoint_path(cfg)?;
    let model = load_checkpoint(ckpt_path)?.model;
    let samples = load_split(cfg, split)?;
    let (h, w) = (model.config.input_h, model.config.input_w);
    let masks = parallel_map(&samples, cfg.jobs, |s| -> iars_core::error::Result<BinaryMask> {
        let img = if s.image.dims() == (h, w) {
            s.image.clone()
        } else {
            resize_bilinear(&s.image, h, w)
        };
        let m = predict_masks(&model, &[&img])?.remove(0);
        Ok(if m.dims() == s.image.dims() {
            m
        } else {
            resize_nearest(&m, s.image.height(), s.image.width())
        })
    });
    let dir = out.subdir("masks")?;
    for (s, m) in samples.iter().zip(masks) {
        let p = dir.join(format!("{}.pgm", s.id));
        write_pgm(&p, &m?)?;
        out.record(p);
    }
    out.write_json(
        PREDICTION_INFO,
        &PredictionInfo {
            variant: model.flags.label().to_string(),
            checkpoint: ckpt_path.to_path_buf(),
            split,
            images: samples.iter().map(|s| s.id.clone()).collect(),
        },
    )?;
    eprintln!("wrote {} masks", samples.len());
    Ok(true)
}

/// Ground-truth samples, predicted masks and the predicting variant, if recorded.
type Paired = (Vec<Sample>, Vec<BinaryMask>, Option<String>);

/// Ground truth for `split` paired with the masks in a `predict` directory.
fn paired_masks(cfg: &CliConfig, split: Split, pred: &Path) -> Result<Paired, CliError> {
    let samples = load_split(cfg, split)?;
    let dir = if pred.join("masks").is_dir() {
        pred.join("masks")
    } else {
        pred.to_path_buf()
    };
    let masks = samples
        .iter()
        .map(|s| Ok(read_pgm(dir.join(format!("{}.pgm", s.id)))?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let variant = std::fs::read_to_string(pred.join(PREDICTION_INFO))
        .ok()
        .and_then(|t| serde_json::from_str::<PredictionInfo>(&t).ok())
        .map(|p| p.variant);
    Ok((samples, masks, variant))
}

#[derive(Serialize, Deserialize)]
struct RegionRow {
    image_id: String,
    #[serde(flatten)]
    report: RegionReport,
}

#[derive(Serialize, Deserialize)]
struct RegionFile {
    variant: Option<String>,
    split: Split,
    mean: RegionReport,
    rows: Vec<RegionRow>,
}

pub fn eval_region(cfg: &CliConfig, out: &mut RunDir, split: Split, pred: &Path) -> Result<bool, CliError> {
    let (samples, masks, variant) = paired_masks(cfg, split, pred)?;
    let idx: Vec<usize> = (0..samples.len()).collect();
    let reports = parallel_map(&idx, cfg.jobs, |&i| compare_masks(&samples[i].mask, &masks[i]))
        .into_iter()
        .collect::<iars_core::error::Result<Vec<_>>>()?;
    let mean = aggregate(&reports)?;
    let mut csv = format!("image_id,{}\n", REPORT_COLUMNS.join(","));
    for (s, r) in samples.iter().zip(&reports) {
        let vals: Vec<String> = r.values().iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!("{},{}\n", s.id, vals.join(",")));
    }
    out.write("region.csv", csv.as_bytes())?;
    out.write_json(
        "region.json",
        &RegionFile {
            variant,
            split,
            mean,
            rows: samples
                .iter()
                .zip(reports)
                .map(|(s, report)| RegionRow {
                    image_id: s.id.clone(),
                    report,
                })
                .collect(),
        },
    )?;
    println!("mean iou {} dice {} over {} images", mean.iou, mean.dice, samples.len());
    Ok(true)
}

pub fn eval_contour(cfg: &CliConfig, out: &mut RunDir, split: Split, pred: &Path) -> Result<bool, CliError> {
    let (samples, masks, variant) = paired_masks(cfg, split, pred)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let truth: Vec<&BinaryMask> = samples.iter().map(|s| &s.mask).collect();
    let preds: Vec<&BinaryMask> = masks.iter().collect();
    let report = contour_report(&ids, &truth, &preds, &cfg.contour, cfg.jobs)?;
    let (efd, hu) = report.headline();
    out.write("contour.csv", report.to_csv().as_bytes())?;
    out.write_json(
        "contour.json",
        &json!({
            "variant": variant,
            "split": split,
            "headline": {"efd": efd, "hu": hu},
            "report": report,
        }),
    )?;
    if !report.skipped.is_empty() {
        eprintln!("skipped {} untraceable pairs: {}", report.skipped.len(), report.skipped.join(", "));
    }
    println!("mean efd distance {efd} hu distance {hu} over {} images", report.rows.len());
    Ok(true)
}

/// One numeric column of a per-image report (CSV with a header row, or the
/// JSON written by the evaluation commands).
fn read_column(path: &Path, column: &str) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |msg: String| CliError::Runtime(format!("{}: {msg}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let rows = v
            .get("rows")
            .or_else(|| v.get("report").and_then(|r| r.get("rows")))
            .and_then(|r| r.as_array())
            .ok_or_else(|| bad("no \"rows\" array".into()))?;
        return rows
            .iter()
            .map(|r| r.get(column).and_then(|x| x.as_f64()).ok_or_else(|| bad(format!("row without numeric {column:?}"))))
            .collect();
    }
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == column)
        .ok_or_else(|| bad(format!("no column {column:?} in header {header:?}")))?;
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| bad(format!("row {}: no numeric {column:?}", i + 2)))
        })
        .collect()
}

pub fn stats_compare(
    out: &mut RunDir,
    a: &Path,
    b: &Path,
    column: &str,
    method: RankSumMethod,
) -> Result<bool, CliError> {
    let x = read_column(a, column)?;
    let y = read_column(b, column)?;
    let r = rank_sum_test(&x, &y, method)?;
    let value = json!({
        "column": column,
        "a": a,
        "b": b,
        "n_a": x.len(),
        "n_b": y.len(),
        "u": r.u_statistic,
        "z": r.z,
        "p": r.p_two_sided,
        "method": r.method,
    });
    out.write_json("stats.json", &value)?;
    println!("{}", serde_json::to_string(&json!({"u": r.u_statistic, "z": r.z, "p": r.p_two_sided, "method": r.method})).expect("json"));
    Ok(true)
}

pub fn interpret(
    cfg: &CliConfig,
    out: &mut RunDir,
    split: Split,
    variants: &[PathBuf],
    limit: usize,
) -> Result<bool, CliError> {
    if cfg.checkpoint.is_none() && variants.is_empty() {
        return Err(CliError::Usage("interpret needs --checkpoint and/or --variants".into()));
    }
    let samples = load_split(cfg, split)?;
    let samples = &samples[..limit.min(samples.len())];
    let mut summary = Vec::new();
    if let Some(p) = &cfg.checkpoint {
        let model = load_checkpoint(p)?.model;
        let dir = out.subdir("mip")?;
        for s in fit_to_input(samples.to_vec(), &model.config) {
            for f in write_block_mips(&model, &s.image, &s.id, &dir)? {
                out.record(f);
            }
        }
    }
    if !variants.is_empty() {
        let mut slots: Vec<Option<Model<f32>>> = vec![None, None, None, None];
        for p in variants {
            let model = load_checkpoint(p)?.model;
            let i = VariantFlags::ALL
                .iter()
                .position(|f| *f == model.flags)
                .ok_or_else(|| CliError::Runtime(format!("{}: not one of the four variants", p.display())))?;
            slots[i] = Some(model);
        }
        let refs: Vec<Option<&Model<f32>>> = slots.iter().map(|m| m.as_ref()).collect();
        let arch = refs.iter().flatten().next().expect("non-empty").config.clone();
        let dir = out.subdir("diff")?;
        for s in fit_to_input(samples.to_vec(), &arch) {
            let prog = variant_progression(&refs, &s.image, Some(&s.mask))?;
            let composes = prog
                .panels
                .iter()
                .zip(prog.masks.windows(2))
                .all(|(panel, pair)| panel.apply(&pair[0]).is_ok_and(|m| m == pair[1]));
            for f in write_progression(&prog, &s.image, &s.id, &dir)? {
                out.record(f);
            }
            summary.push(json!({
                "image_id": s.id,
                "variants": prog.labels,
                "iou": prog.ious,
                "added": prog.panels.iter().map(|p| p.added.count()).collect::<Vec<_>>(),
                "removed": prog.panels.iter().map(|p| p.removed.count()).collect::<Vec<_>>(),
                "diff_composes": composes,
            }));
        }
    }
    out.write_json("interpret.json", &json!({"split": split, "images": summary}))?;
    Ok(true)
}

fn read_json(path: &Path) -> Result<Option<serde_json::Value>, CliError> {
    match std::fs::read_to_string(path) {
        Ok(t) => serde_json::from_str(&t)
            .map(Some)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path, e)),
    }
}

pub fn report(out: &mut RunDir, runs: &[PathBuf]) -> Result<bool, CliError> {
    let mut region = Vec::new();
    let mut contour = Vec::new();
    let mut stats = Vec::new();
    for dir in runs {
        let fallback = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let label = |v: &serde_json::Value| v.get("variant").and_then(|x| x.as_str()).map(str::to_string).unwrap_or_else(|| fallback.clone());
        if let Some(v) = read_json(&dir.join("region.json"))? {
            let mean: RegionReport = serde_json::from_value(v["mean"].clone())
                .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.join("region.json").display())))?;
            region.push((label(&v), mean, v["rows"].as_array().map_or(0, |r| r.len())));
        }
        if let Some(v) = read_json(&dir.join("contour.json"))? {
            let h = &v["headline"];
            contour.push((label(&v), h["efd"].as_f64(), h["hu"].as_f64(), v["report"]["rows"].as_array().map_or(0, |r| r.len())));
        }
        if let Some(v) = read_json(&dir.join("stats.json"))? {
            stats.push((fallback.clone(), v));
        }
    }
    if region.is_empty() && contour.is_empty() && stats.is_empty() {
        return Err(CliError::Runtime("no region.json, contour.json or stats.json in the given directories".into()));
    }
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let num = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut md = String::from("# Summary\n");
    if !region.is_empty() {
        md.push_str("\n## Region metrics (%)\n\n| Model | Images | TPR | FPR | TNR | FNR | Dice | IoU |\n|---|---|---|---|---|---|---|---|\n");
        for (l, r, n) in &region {
            let cells: Vec<String> = r.values().iter().map(|&v| pct(v)).collect();
            md.push_str(&format!("| {l} | {n} | {} |\n", cells.join(" | ")));
        }
    }
    if !contour.is_empty() {
        md.push_str("\n## Shape distances\n\n| Model | Images | EFD | Hu |\n|---|---|---|---|\n");
        for (l, e, h, n) in &contour {
            md.push_str(&format!("| {l} | {n} | {} | {} |\n", num(*e), num(*h)));
        }
    }
    if !stats.is_empty() {
        md.push_str("\n## Rank-sum tests\n\n| Run | Column | U | z | p | Method |\n|---|---|---|---|---|---|\n");
        for (l, v) in &stats {
            md.push_str(&format!(
                "| {l} | {} | {} | {} | {} | {} |\n",
                v["column"].as_str().unwrap_or(""),
                num(v["u"].as_f64()),
                num(v["z"].as_f64()),
                v["p"].as_f64().map_or("n/a".into(), |p| format!("{p:.4e}")),
                v["method"].as_str().unwrap_or("")
            ));
        }
    }
    out.write("summary.md", md.as_bytes())?;
    out.write_json(
        "summary.json",
        &json!({
            "region": region.iter().map(|(l, r, n)| json!({"model": l, "images": n, "mean": r})).collect::<Vec<_>>(),
            "contour": contour.iter().map(|(l, e, h, n)| json!({"model": l, "images": n, "efd": e, "hu": h})).collect::<Vec<_>>(),
            "stats": stats.iter().map(|(l, v)| json!({"run": l, "result": v})).collect::<Vec<_>>(),
        }),
    )?;
    print!("{md}");
    Ok(true)
}

pub fn selftest(cfg: &CliConfig, out: &mut RunDir) -> Result<bool, CliError> {
    let results = run_all(cfg.seed);
    for r in &results {
        println!("{} {:<32} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    out.write_json("selftest.json", &results)?;
    Ok(failed == 0)
}
