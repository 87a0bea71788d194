use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use cltci::config::RunConfig;
use cltci::data::{generate_synthetic, load_manifest, write_mask, Dataset};
use cltci::eval::{
    emit_report, export_embeddings, patient_cluster_purity, plot_embeddings, shuffled_purity,
    write_embeddings_csv,
};
use cltci::models::{export_params, Checkpoint};
use cltci::train::{finetune as run_finetune, predict, pretrain as run_pretrain, EpochLog, PretrainHooks, StepLog};
use cltci::{Error, Result};

use crate::Common;

/// Loads the config file (or the desk preset) and applies common flags.
fn resolve(common: &Common) -> Result<RunConfig> {
    configure_threads(common.deterministic)?;
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &common.manifest {
        cfg.paths.manifest = Some(m.clone());
    }
    if let Some(o) = &common.out {
        cfg.paths.out = Some(o.clone());
    }
    Ok(cfg)
}

/// `--deterministic` pins one worker; otherwise `CLTCI_NUM_WORKERS` sets the
/// data-loading pool size when present.
fn configure_threads(deterministic: bool) -> Result<()> {
    let workers = if deterministic {
        Some(1)
    } else {
        match std::env::var("CLTCI_NUM_WORKERS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| Error::Config(format!("CLTCI_NUM_WORKERS must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        }
    };
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig, fallback: &str) -> PathBuf {
    cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn manifest_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.paths
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Config("no manifest given (use --manifest or paths.manifest)".into()))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = load_manifest(manifest_path(cfg)?)?;
    Dataset::load(&manifest, &cfg.preprocess)
}

pub fn synth(
    common: &Common,
    num_patients: Option<usize>,
    images_per_patient: Option<usize>,
    image_size: Option<usize>,
) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(n) = num_patients {
        cfg.synthetic.num_patients = n;
    }
    if let Some(n) = images_per_patient {
        cfg.synthetic.images_per_patient = n;
    }
    if let Some(n) = image_size {
        cfg.synthetic.image_size = n;
    }
    cfg.synthetic.patient_shape_seed = common.seed.unwrap_or(cfg.synthetic.patient_shape_seed);
    cfg.synthetic.validate()?;
    let out = out_dir(&cfg, "synthetic");
    let manifest = generate_synthetic(&cfg.synthetic, &out)?;
    cfg.paths.manifest = Some(out.join("manifest.tsv"));
    cfg.write_resolved(&out)?;
    println!(
        "{} images from {} patients -> {}",
        manifest.len(),
        manifest.num_patients(),
        out.join("manifest.tsv").display()
    );
    Ok(())
}

fn csv_appender(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let existing = append && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(csv::WriterBuilder::new().has_headers(!existing).from_writer(file))
}

pub fn pretrain(common: &Common, variant: Option<&str>, epochs: Option<usize>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(v) = variant {
        cfg.set_variant(v.parse()?);
    }
    if let Some(e) = epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.validate()?;
    let data = load_dataset(&cfg)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let out = out_dir(&cfg, "pretrain");
    let hash = cfg.write_resolved(&out)?;

    let appending = resume.is_some();
    let log_path = out.join("loss_log.csv");
    let mut log = csv_appender(&log_path, appending)?;
    let hooks = PretrainHooks {
        on_step: None,
        on_epoch: Some(Box::new(|e: &EpochLog| {
            log.serialize(e)?;
            log.flush().map_err(|err| Error::Io {
                path: log_path.clone(),
                source: err,
            })
        })),
    };
    let outcome = run_pretrain(&data, &cfg.pretrain, cfg.seed, resume.as_ref(), hooks)?;

    let trace_path = out.join("loss_trace.csv");
    let mut trace = csv_appender(&trace_path, appending)?;
    for s in &outcome.trace {
        trace.serialize(s as &StepLog)?;
    }
    trace.flush().map_err(|e| Error::Io {
        path: trace_path.clone(),
        source: e,
    })?;

    let mut ckpt = outcome.checkpoint;
    ckpt.meta.extra.insert("run_config_hash".into(), serde_json::json!(hash));
    let ckpt_path = out.join("checkpoint.safetensors");
    ckpt.save(&ckpt_path)?;
    match outcome.epochs.last() {
        Some(e) => println!("{}: epoch {} loss {:.6} -> {}", cfg.pretrain.variant, e.epoch, e.loss, ckpt_path.display()),
        None => println!("{}: nothing to do -> {}", cfg.pretrain.variant, ckpt_path.display()),
    }
    Ok(())
}

pub struct FinetuneArgs {
    pub budgets: Option<Vec<usize>>,
    pub folds: Option<usize>,
    pub init: String,
    pub epochs: Option<usize>,
    pub save_predictions: bool,
    pub save_models: bool,
}

pub fn finetune(common: &Common, args: FinetuneArgs) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(b) = args.budgets {
        cfg.finetune.budgets = b;
    }
    if let Some(f) = args.folds {
        cfg.finetune.folds = f;
    }
    if let Some(e) = args.epochs {
        cfg.finetune.epochs = e;
    }
    cfg.validate()?;
    let init = match args.init.as_str() {
        "none" => None,
        path => Some(Checkpoint::load(Path::new(path))?),
    };
    let variant = init.as_ref().map(|c| c.meta.variant.clone()).unwrap_or_else(|| "random".into());
    let data = load_dataset(&cfg)?;
    let out = out_dir(&cfg, "finetune");
    let hash = cfg.write_resolved(&out)?;
    let results = run_finetune(&data, init.as_ref(), &cfg.finetune, cfg.seed, &variant)?;

    for r in &results {
        let tag = format!("fold{}_M{}", r.fold, r.m);
        if args.save_models {
            let dir = out.join("models");
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            let mut ckpt = Checkpoint::new(
                format!("finetuned-{variant}"),
                r.net.encoder.spec().clone(),
                None,
                hash.clone(),
                cfg.finetune.epochs,
                export_params(&r.net, ""),
            );
            ckpt.meta.extra.insert("fold".into(), serde_json::json!(r.fold));
            ckpt.meta.extra.insert("M".into(), serde_json::json!(r.m));
            ckpt.save(&dir.join(format!("{tag}.safetensors")))?;
        }
        if args.save_predictions {
            let assignment = cltci::train::assign_folds(&data.manifest, cfg.finetune.folds, cfg.seed)?;
            let (_, val) = cltci::train::fold_split(&assignment, r.fold);
            let images: Vec<_> = val.iter().map(|&i| data.images[i].clone()).collect();
            let dir = out.join("predictions").join(&tag);
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            for (pred, &i) in predict(&r.net, &images)?.iter().zip(&val) {
                write_mask(pred, &dir.join(format!("{}.png", data.manifest.records()[i].image_id)))?;
            }
        }
    }
    let reports: Vec<_> = results.into_iter().map(|r| r.report).collect();
    for row in emit_report(&reports, &out)? {
        println!(
            "{} M={}: mean foreground Dice {:.4} ({:.4}) over {} runs",
            row.variant, row.m, row.mean_foreground_mean, row.mean_foreground_std, row.n
        );
    }
    Ok(())
}

pub fn eval(common: &Common, checkpoint: &Path, k: Option<usize>) -> Result<()> {
    let mut cfg = resolve(common)?;
    if let Some(k) = k {
        cfg.eval.k = k;
    }
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = load_dataset(&cfg)?;
    let out = out_dir(&cfg, "eval");
    cfg.write_resolved(&out)?;
    let emb = export_embeddings(&data, &ckpt)?;
    write_embeddings_csv(&emb, &out.join("embeddings.csv"))?;
    let purity = patient_cluster_purity(&emb, cfg.eval.k)?;
    let chance = shuffled_purity(&emb, cfg.eval.k, cfg.eval.permutations, cfg.seed)?;
    plot_embeddings(&emb, &out.join("embeddings_pca.png"))?;
    let summary = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "variant": ckpt.meta.variant,
        "k": cfg.eval.k,
        "purity": purity,
        "shuffled_purity": chance,
        "permutations": cfg.eval.permutations,
    });
    let p = out.join("eval.json");
    fs::write(&p, serde_json::to_string_pretty(&summary).expect("plain json") + "\n")
        .map_err(|e| Error::Io { path: p.clone(), source: e })?;
    println!("{purity}");
    Ok(())
}
