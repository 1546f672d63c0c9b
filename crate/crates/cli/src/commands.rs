use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use segface_core::config::{RunConfig, Split};
use segface_core::data::{generate_scene, load_dataset_dir, load_samples, read_image, write_dataset, ClassInfo, Sample};
use segface_core::gradcheck_suite::run_gradcheck_suite;
use segface_core::metrics::longtail_report;
use segface_core::model::{self, ModelConfig};
use segface_core::numerics::{ParamSet, Tensor};
use segface_core::objective::LabelMask;
use segface_core::train::{evaluate, train_loop, Checkpoint, TrainRun};
use serde_json::json;

use crate::render;
use crate::{Cli, Command, Failure, SplitArg};

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    match &cli.command {
        Command::GenData { count, start } => gen_data(&resolve(&cli, None, &[])?, *count, *start),
        Command::Train => train(&resolve(&cli, None, &[])?),
        Command::Eval { checkpoint, split, data } => {
            let ck = load_checkpoint(checkpoint)?;
            eval(&resolve(&cli, Some(&ck), &[])?, &ck, *split, data.as_deref())
        }
        Command::Gradcheck => gradcheck(&resolve(&cli, None, &[])?),
        Command::Infer { checkpoint, token_maps, images } => {
            let ck = load_checkpoint(checkpoint)?;
            infer(&resolve(&cli, Some(&ck), &[])?, &ck, images, *token_maps)
        }
        Command::Bench { checkpoint, resolution, iterations } => {
            let ck = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            let mut extra = Vec::new();
            extra.extend(resolution.map(|r| format!("train.resolution={r}")));
            extra.extend(iterations.map(|n| format!("bench.iterations={n}")));
            bench(&resolve(&cli, ck.as_ref(), &extra)?, ck.as_ref())
        }
    }
}

/// Effective configuration: the `--config` file (or, for commands reading a
/// checkpoint, the configuration stored in it), then `--set`, command flags,
/// `--seed` and `--out`. The model section always comes from the checkpoint
/// when one is given. The result is echoed to the output directory.
fn resolve(cli: &Cli, ck: Option<&Checkpoint>, extra: &[String]) -> Result<RunConfig, Failure> {
    let overrides: Vec<String> = cli.overrides.iter().chain(extra).cloned().collect();
    let mut cfg = match (&cli.config, ck) {
        (None, Some(ck)) => RunConfig::from_text_with(&ck.config, &overrides)?,
        (path, _) => RunConfig::load(path.as_deref(), &overrides)?,
    };
    if let Some(ck) = ck {
        cfg.model = checkpoint_model(ck)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.model.backbone.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    cfg.echo()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.is_file() {
        return Err(Failure::Invalid(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn checkpoint_model(ck: &Checkpoint) -> Result<ModelConfig, Failure> {
    RunConfig::from_text_with(&ck.config, &[])
        .map(|c| c.model)
        .map_err(|e| Failure::Invalid(format!("checkpoint carries no usable configuration: {e}")))
}

/// Checkpoint weights loaded into a freshly built model of the configured shape.
fn checkpoint_params(cfg: &RunConfig, ck: &Checkpoint, classes: usize) -> Result<ParamSet<f32>, Failure> {
    let mut params = model::init_model::<f32>(&cfg.model, classes)?;
    ck.restore_into(&mut params)?;
    Ok(params)
}

fn checkpoint_classes(ck: &Checkpoint, cfg: &RunConfig) -> Result<usize, Failure> {
    Ok(model::num_classes(&cfg.model, &ck.params)?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn gen_data(cfg: &RunConfig, count: Option<usize>, start: u64) -> Outcome {
    let count = count.unwrap_or(cfg.data.train_count) as u64;
    let occurrences = write_dataset(&cfg.output_dir, &cfg.scene, start..start + count)?;
    println!("wrote {count} scenes to {}", cfg.output_dir.display());
    println!("{:<12} {:<5} {:>8} {:>10}", "class", "kind", "p", "observed");
    for (c, &n) in cfg.scene.classes.iter().zip(&occurrences) {
        let observed = if count == 0 { 0.0 } else { n as f64 / count as f64 };
        println!("{:<12} {:<5} {:>8.3} {:>10.4}", c.name, kind(c), c.p, observed);
    }
    Ok(())
}

fn kind(c: &ClassInfo) -> &'static str {
    match c.kind {
        segface_core::data::ClassKind::Head => "head",
        segface_core::data::ClassKind::Tail => "tail",
    }
}

/// Forwards metrics records to a file and echoes evaluations and periodic
/// steps to stderr.
struct MetricsLog {
    file: BufWriter<File>,
    pending: Vec<u8>,
}

impl Write for MetricsLog {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.file.write_all(buf)?;
        self.pending.extend_from_slice(buf);
        while let Some(end) = self.pending.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.pending.drain(..=end).collect();
            if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&line) {
                if v["event"] == "eval" {
                    eprintln!("epoch {} eval mean_f1 {} mean_iou {}", v["epoch"], v["mean_f1"], v["mean_iou"]);
                } else if v["step"].as_u64().is_some_and(|s| s % 50 == 0) {
                    eprintln!("step {} epoch {} lr {} loss {:.5}", v["step"], v["epoch"], v["lr"], v["loss_total"].as_f64().unwrap_or(f64::NAN));
                }
            }
        }
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.flush()
    }
}

fn train(cfg: &RunConfig) -> Outcome {
    let (train_set, classes) = cfg.load_split(Split::Train)?;
    let (eval_set, eval_classes) = cfg.load_split(Split::Eval)?;
    if !eval_set.is_empty() && eval_classes != classes {
        return Err(Failure::Invalid("training and evaluation catalogs differ".into()));
    }
    let metrics = cfg.output_dir.join("metrics.jsonl");
    let file = File::create(&metrics).map_err(|e| Failure::Runtime(format!("{}: {e}", metrics.display())))?;
    let mut log = MetricsLog {
        file: BufWriter::new(file),
        pending: Vec::new(),
    };
    let run = TrainRun {
        model: &cfg.model,
        train: &cfg.train,
        loss: &cfg.loss,
        augment: &cfg.augment,
        catalog: &classes,
        config_text: cfg.to_toml(),
    };
    let started = Instant::now();
    let outcome = train_loop(&run, &train_set, &eval_set, Some(&cfg.output_dir), &mut log)?;
    log.flush().map_err(|e| Failure::Runtime(format!("{}: {e}", metrics.display())))?;
    println!(
        "trained {} steps over {} epochs in {:.1}s; checkpoint {}",
        outcome.checkpoint.step,
        cfg.train.epochs,
        started.elapsed().as_secs_f64(),
        cfg.output_dir.join("checkpoint.bin").display()
    );
    if let Some(report) = outcome.last_eval {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn eval(cfg: &RunConfig, ck: &Checkpoint, split: SplitArg, data: Option<&Path>) -> Outcome {
    let (samples, classes) = match data {
        Some(dir) => {
            let index = load_dataset_dir(dir)?;
            (load_samples(&index, cfg.train.resolution)?, index.classes)
        }
        None => cfg.load_split(match split {
            SplitArg::Train => Split::Train,
            SplitArg::Eval => Split::Eval,
        })?,
    };
    let n = checkpoint_classes(ck, cfg)?;
    if classes.len() != n {
        return Err(Failure::Invalid(format!(
            "dataset has {} classes but the checkpoint predicts {n}",
            classes.len()
        )));
    }
    if samples.is_empty() {
        return Err(Failure::Invalid("evaluation set is empty".into()));
    }
    let params = checkpoint_params(cfg, ck, n)?;
    let cm = evaluate(&params, &cfg.model, &samples, cfg.train.batch_size)?;
    let report = longtail_report(&cm, &classes)?;
    print!("{}", report.to_table());
    let mut record = report.to_record();
    record["images"] = json!(samples.len());
    write_json(&cfg.output_dir.join("eval.json"), &record)
}

fn gradcheck(cfg: &RunConfig) -> Outcome {
    println!("{:<28} {:>12} {:>7} {:>8}  {:<6} worst parameter", "check", "max rel err", "coords", "seconds", "result");
    let rows = run_gradcheck_suite(&cfg.gradcheck, |r| {
        println!(
            "{:<28} {:>12.3e} {:>7} {:>8.1}  {:<6} {}",
            r.name,
            r.max_rel_error,
            r.coords,
            r.seconds,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst
        );
    })?;
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let seconds: f64 = rows.iter().map(|r| r.seconds).sum();
    println!("max relative error {worst:.3e} over {} checks in {seconds:.1}s (tolerance {:e})", rows.len(), cfg.gradcheck.tolerance);
    write_json(&cfg.output_dir.join("gradcheck.json"), &json!({ "rows": rows, "max_rel_error": worst }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn collect_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Failure::Invalid(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| ["png", "jpg", "jpeg", "bmp"].contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Failure::Invalid(format!("input {} does not exist", p.display())));
        }
    }
    if out.is_empty() {
        return Err(Failure::Invalid("no input images found".into()));
    }
    Ok(out)
}

fn infer(cfg: &RunConfig, ck: &Checkpoint, inputs: &[PathBuf], token_maps: bool) -> Outcome {
    let files = collect_images(inputs)?;
    let n = checkpoint_classes(ck, cfg)?;
    let params = checkpoint_params(cfg, ck, n)?;
    let names: Vec<String> = if cfg.scene.classes.len() == n {
        cfg.scene.classes.iter().map(|c| c.name.clone()).collect()
    } else {
        (0..n).map(|k| format!("class{k}")).collect()
    };
    let res = cfg.train.resolution;
    for file in files {
        let image = read_image(&file, res)?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let batch = image.clone().reshape(&[1, 3, res, res])?;
        let logits = model::predict_logits(&params, &cfg.model, &batch)?;
        let mask = LabelMask::argmax(&logits)?;
        let out = |suffix: &str| cfg.output_dir.join(format!("{stem}_{suffix}.png"));
        render::mask_png(&mask, res, &out("mask"))?;
        render::overlay_png(&image, &mask, &out("overlay"))?;
        if token_maps {
            for (k, name) in names.iter().enumerate() {
                render::token_map_png(&logits, k, &out(&format!("token{k:02}_{name}")))?;
            }
        }
        println!("{} -> {}", file.display(), out("mask").display());
    }
    Ok(())
}

fn bench(cfg: &RunConfig, ck: Option<&Checkpoint>) -> Outcome {
    let spec = cfg.training_scenes();
    let params = match ck {
        Some(ck) => checkpoint_params(cfg, ck, checkpoint_classes(ck, cfg)?)?,
        None => model::init_model::<f32>(&cfg.model, spec.classes.len())?,
    };
    let b = cfg.bench.batch_size;
    let samples: Vec<Sample> = (0..b as u64).map(|i| generate_scene(&spec, i)).collect::<Result<_, _>>()?;
    let images = Tensor::stack(&samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let mut rates = Vec::with_capacity(cfg.bench.iterations);
    for i in 0..cfg.bench.warmup + cfg.bench.iterations {
        let t = Instant::now();
        model::predict_logits(&params, &cfg.model, &images)?;
        if i >= cfg.bench.warmup {
            rates.push(b as f64 / t.elapsed().as_secs_f64());
        }
    }
    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 { (sorted[mid - 1] + sorted[mid]) / 2.0 } else { sorted[mid] };
    println!(
        "{}x{} batch {b}: mean {mean:.2} images/s, median {median:.2} images/s over {} iterations ({} warm-up)",
        cfg.train.resolution, cfg.train.resolution, rates.len(), cfg.bench.warmup
    );
    write_json(
        &cfg.output_dir.join("bench.json"),
        &json!({
            "resolution": cfg.train.resolution,
            "batch_size": b,
            "mean_images_per_sec": mean,
            "median_images_per_sec": median,
            "iterations": rates.len(),
            "warmup": cfg.bench.warmup,
        }),
    )
}
