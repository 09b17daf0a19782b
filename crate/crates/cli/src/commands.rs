use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};

use bigru_cnn::data::{
    check_labels, discover_frames, load_all, load_clip, load_image, load_manifest, split_dataset, split_stratified,
    write_synth_dataset, ClipRecord, Sample,
};
use bigru_cnn::gradcheck::layer_cases;
use bigru_cnn::model::{
    assemble_bigru_cnn, build_vgg_prefix, load_checkpoint, save_checkpoint, truncate_head, VggHead,
};
use bigru_cnn::train::{append_history, confusion, evaluate, EpochReport, TrainConfig, Trainer};
use bigru_cnn::{Error, Execution, Model, Result};
use serde_json::json;

use crate::config::RunConfig;
use crate::CommonArgs;

pub const MODEL_FILE: &str = "model.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const BACKBONE_LAST_FILE: &str = "backbone_last.ckpt";
pub const PRETRAIN_HISTORY_FILE: &str = "pretrain_history.csv";

/// Pretraining always separates person from background.
const PRETRAIN_CLASSES: usize = 2;

fn say(out: &mut dyn Write, line: impl Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out_dir
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory: set out_dir or pass --out".into()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn execution(cfg: &RunConfig) -> Execution {
    Execution::for_workers(cfg.workers)
}

fn require(path: Option<&Path>, what: &str, key: &str) -> Result<PathBuf> {
    path.map(Path::to_path_buf)
        .ok_or_else(|| Error::Config(format!("no {what}: set {key} or pass --manifest")))
}

fn split(cfg: &RunConfig, records: Vec<ClipRecord>) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    if cfg.data.stratify {
        split_stratified(&records, |r| r.label, cfg.data.train_fraction, cfg.seed)
    } else {
        split_dataset(&records, cfg.data.train_fraction, cfg.seed)
    }
}

/// Loads `records` as inputs for `model`: clips for `[T, H, W, C]` models,
/// still images for `[H, W, C]` ones.
fn load_for(model_input: &[usize], records: &[ClipRecord], exec: Execution) -> Result<Vec<Sample>> {
    match *model_input {
        [t, h, w, _] => load_all(records, exec, |r| load_clip(r, t, (h, w))),
        [h, w, _] => load_all(records, exec, |r| load_image(r, (h, w))),
        _ => Err(Error::Structure(format!(
            "model input {model_input:?} is neither a clip nor an image"
        ))),
    }
}

pub fn synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = out_dir(cfg)?;
    let sc = cfg.synth_config();
    let manifest = write_synth_dataset(dir, &sc)?;
    say(
        out,
        format_args!(
            "wrote {} clips of {} frames at {}x{} (seed {})",
            sc.clips, sc.frames, sc.height, sc.width, sc.seed
        ),
    )?;
    say(out, format_args!("manifest: {}", manifest.display()))
}

/// Where `fit` writes its artifacts.
struct Artifacts {
    best: PathBuf,
    last: PathBuf,
    history: PathBuf,
}

fn fit(
    model: Model,
    tcfg: TrainConfig,
    train: &[Sample],
    eval: &[Sample],
    files: &Artifacts,
    out: &mut dyn Write,
) -> Result<()> {
    let mut trainer = Trainer::new(model, tcfg)?;
    if let Some(dir) = files.history.parent() {
        create_dir(dir)?;
    }
    match std::fs::remove_file(&files.history) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(Error::io(&files.history, e)),
        _ => {}
    }
    say(
        out,
        format_args!("training on {} samples, evaluating on {}", train.len(), eval.len()),
    )?;
    say(out, EpochReport::CSV_HEADER)?;
    trainer.fit(train, eval, |report, t| {
        say(out, report)?;
        append_history(&files.history, report)?;
        save_checkpoint(t.model(), &files.last)?;
        if let Some((_, model)) = t.best().filter(|(b, _)| b.epoch == report.epoch) {
            save_checkpoint(model, &files.best)?;
        }
        Ok(true)
    })?;
    if let Some((best, _)) = trainer.best() {
        say(
            out,
            format_args!(
                "best epoch {} (eval accuracy {:.4}) saved to {}",
                best.epoch,
                best.eval_acc,
                files.best.display()
            ),
        )?;
    }
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, manifest: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let manifest = require(
        manifest.or(cfg.data.image_manifest.as_deref()),
        "image manifest",
        "data.image_manifest",
    )?;
    let dir = out_dir(cfg)?;
    let tcfg = cfg.pretrain_config();
    let exec = execution(cfg);
    let records = load_manifest(&manifest)?;
    check_labels(&records, PRETRAIN_CLASSES)?;
    let (train_r, eval_r) = split(cfg, records)?;
    let input = [cfg.data.height, cfg.data.width, 3];
    let head = VggHead::Classifier {
        hidden: cfg.model.pretrain_hidden,
        classes: PRETRAIN_CLASSES,
    };
    let mut model = build_vgg_prefix(input, cfg.model.backbone_convs, cfg.model.width_divisor, head, cfg.seed)?;
    model.set_execution(exec);
    let train = load_for(&input, &train_r, exec)?;
    let eval = load_for(&input, &eval_r, exec)?;
    let files = Artifacts {
        best: dir.join(BACKBONE_FILE),
        last: dir.join(BACKBONE_LAST_FILE),
        history: dir.join(PRETRAIN_HISTORY_FILE),
    };
    fit(model, tcfg, &train, &eval, &files, out)
}

fn backbone(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    let input = [cfg.data.height, cfg.data.width, 3];
    match checkpoint {
        Some(path) => {
            let model = load_checkpoint(path)?;
            if model.input_shape() != input {
                return Err(Error::Dimension(format!(
                    "backbone {} takes {:?} but frames are resized to {:?}",
                    path.display(),
                    model.input_shape(),
                    input
                )));
            }
            if model.classes() > 0 {
                truncate_head(model)
            } else {
                Ok(model)
            }
        }
        None => {
            eprintln!("warning: no backbone checkpoint; using a freshly initialized backbone");
            build_vgg_prefix(
                input,
                cfg.model.backbone_convs,
                cfg.model.width_divisor,
                VggHead::None,
                cfg.seed,
            )
        }
    }
}

pub fn train(cfg: &RunConfig, common: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let manifest = require(
        common.manifest.as_deref().or(cfg.data.manifest.as_deref()),
        "clip manifest",
        "data.manifest",
    )?;
    let dir = out_dir(cfg)?;
    let tcfg = cfg.train_config();
    let exec = execution(cfg);
    let classes = cfg.model.classes;
    let records = load_manifest(&manifest)?;
    check_labels(&records, classes)?;
    let (train_r, eval_r) = match &cfg.data.eval_manifest {
        Some(path) => {
            let eval = load_manifest(path)?;
            check_labels(&eval, classes)?;
            (records, eval)
        }
        None => split(cfg, records)?,
    };
    let backbone = backbone(cfg, common.checkpoint.as_deref().or(cfg.model.backbone.as_deref()))?;
    let mut model = assemble_bigru_cnn(backbone, &cfg.head_config(), cfg.seed.wrapping_add(1))?;
    model.set_execution(exec);
    let train = load_for(model.input_shape(), &train_r, exec)?;
    let eval = load_for(model.input_shape(), &eval_r, exec)?;
    let files = Artifacts {
        best: dir.join(MODEL_FILE),
        last: dir.join(LAST_FILE),
        history: dir.join(HISTORY_FILE),
    };
    fit(model, tcfg, &train, &eval, &files, out)
}

fn model_checkpoint(cfg: &RunConfig, common: &CommonArgs) -> Result<PathBuf> {
    match (&common.checkpoint, &cfg.out_dir) {
        (Some(path), _) => Ok(path.clone()),
        (None, Some(dir)) => Ok(dir.join(MODEL_FILE)),
        (None, None) => Err(Error::Config("no checkpoint: pass --checkpoint or --out".into())),
    }
}

fn load_model(cfg: &RunConfig, common: &CommonArgs) -> Result<Model> {
    let mut model = load_checkpoint(&model_checkpoint(cfg, common)?)?;
    if model.classes() == 0 {
        return Err(Error::Structure("checkpoint has no classifier head".into()));
    }
    model.set_execution(execution(cfg));
    Ok(model)
}

pub fn eval(cfg: &RunConfig, common: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = model_checkpoint(cfg, common)?;
    let manifest = require(
        common
            .manifest
            .as_deref()
            .or(cfg.data.eval_manifest.as_deref())
            .or(cfg.data.manifest.as_deref()),
        "evaluation manifest",
        "data.eval_manifest",
    )?;
    let model = load_model(cfg, common)?;
    let records = load_manifest(&manifest)?;
    check_labels(&records, model.classes())?;
    let samples = load_for(model.input_shape(), &records, execution(cfg))?;
    let accuracy = evaluate(&model, &samples)?;
    let counts = confusion(&model, &samples, model.classes())?;
    let correct: usize = (0..counts.len()).map(|c| counts[c][c]).sum();

    say(
        out,
        format_args!("accuracy {accuracy:.4} ({correct}/{})", samples.len()),
    )?;
    say(out, "confusion (rows: true class, columns: predicted class)")?;
    let header: String = (0..counts.len())
        .map(|c| format!("  {:>8}", format!("pred {c}")))
        .collect();
    say(out, format_args!("{:8}{header}", ""))?;
    for (c, row) in counts.iter().enumerate() {
        let cells: String = row.iter().map(|n| format!("  {n:>8}")).collect();
        say(out, format_args!("{:<8}{cells}", format!("true {c}")))?;
    }
    let report = json!({
        "checkpoint": ckpt.display().to_string(),
        "manifest": manifest.display().to_string(),
        "samples": samples.len(),
        "correct": correct,
        "accuracy": accuracy,
        "confusion": counts,
    });
    say(out, report)
}

pub fn predict(cfg: &RunConfig, common: &CommonArgs, frames: &Path, out: &mut dyn Write) -> Result<()> {
    let model = load_model(cfg, common)?;
    let files = discover_frames(frames)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .ppm frames in {}", frames.display())));
    }
    let record = ClipRecord {
        clip_id: frames.display().to_string(),
        label: 0,
        frames: files,
    };
    let sample = load_for(
        model.input_shape(),
        std::slice::from_ref(&record),
        Execution::Sequential,
    )?
    .remove(0);
    let probs = model.forward(&sample.input)?;
    say(out, "class,probability")?;
    for (c, p) in probs.data().iter().enumerate() {
        say(out, format_args!("{c},{p:.8}"))?;
    }
    say(out, format_args!("predicted,{}", probs.argmax()))
}

pub fn gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let opts = cfg.gradcheck_options();
    let mut cases = layer_cases(cfg.seed)?;
    cases.push(cfg.reduced_model().case(cfg.seed)?);
    let mut worst: Option<(String, String, f64)> = None;
    for case in &mut cases {
        let report = case.run(&opts)?;
        say(out, format_args!("== {} ==", case.name))?;
        say(out, &report)?;
        if let Some(w) = report.worst() {
            if worst.as_ref().is_none_or(|(_, _, e)| w.max_rel_error > *e) {
                worst = Some((case.name.clone(), w.name.clone(), w.max_rel_error));
            }
        }
    }
    let (model, param, err) = worst.unwrap_or_default();
    let passed = err < opts.tolerance;
    say(
        out,
        format_args!(
            "gradient check over {} models: max relative error {err:.3e} ({model}: {param}), tolerance {:.0e}: {}",
            cases.len(),
            opts.tolerance,
            if passed { "PASS" } else { "FAIL" }
        ),
    )?;
    if !passed {
        return Err(Error::Numeric(format!(
            "gradient check failed: relative error {err:.3e} in {model}: {param} exceeds {:.0e}",
            opts.tolerance
        )));
    }
    Ok(())
}
