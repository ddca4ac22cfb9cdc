use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use starflow::checkpoint::{self, CheckpointMeta};
use starflow::data::{
    flow_to_color, read_flo, read_frame, read_kitti_png, write_flo, write_kitti_png, write_mask, write_rgb8,
    Dataset, GenerateSpec, Image,
};
use starflow::metrics::MetricReport;
use starflow::train::{
    evaluate, full_resolution, run_ablation, train as train_model, AblationConfig, ArmSpec, ExperimentConfig,
    ParamRow, Stage, TrainConfig, TrainOutcome,
};
use starflow::verify::{run_suite, VerifyOptions};
use starflow::{no_grad, Binder, Error, StarFlow};

use crate::exit::CliError;
use crate::manifest::{output_dir, ManifestBuilder};
use crate::ArmSet;

type CliResult<T = ()> = Result<T, CliError>;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const DIVERGED_FILE: &str = "diverged.ckpt";

fn read_toml<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str, outputs: &mut Vec<PathBuf>) -> CliResult {
    fs::write(path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    outputs.push(path.to_path_buf());
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> CliResult {
    if !path.is_dir() {
        return Err(CliError::input(format!("{what} {} is not a directory", path.display())));
    }
    Ok(())
}

fn load_dataset(path: &Path, what: &str) -> CliResult<Dataset> {
    require_dir(path, what)?;
    Ok(Dataset::load(path)?)
}

/// A model's image-size constraint, reported as an incompatibility.
fn check_compatible(model: &StarFlow, ds: &Dataset) -> CliResult {
    model
        .config
        .check_image_size(ds.manifest.height, ds.manifest.width)
        .map_err(|e| CliError::incompatible(e.to_string()))
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

fn metric_line(prefix: &str, r: &MetricReport) -> String {
    format!(
        "{prefix} samples={} epe_all={} epe_noc={} epe_occ={} fl_all={} occ_f1={}",
        r.samples,
        fmt_metric(r.epe_all),
        fmt_metric(r.epe_noc),
        fmt_metric(r.epe_occ),
        fmt_metric(r.fl_all),
        fmt_metric(r.occ_f1)
    )
}

#[derive(Serialize)]
struct GenerateRun<'a> {
    spec: &'a GenerateSpec,
    count: usize,
}

pub fn generate(spec_path: &Path, count: usize, out: Option<&Path>) -> CliResult {
    let spec: GenerateSpec = {
        let text = fs::read_to_string(spec_path)
            .map_err(|e| CliError::input(format!("{}: {e}", spec_path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", spec_path.display())))?
    };
    let ds = Dataset::generate(&spec, count)?;
    let mut mb = ManifestBuilder::new("generate", &GenerateRun { spec: &spec, count }, spec.seed)?;
    mb.input(spec_path)?;
    let dir = output_dir(out, &mb)?;
    let outputs = ds.save(&dir)?;
    mb.finish(&dir, &outputs)?;
    println!("wrote {} sequences of {} frames to {}", ds.len(), ds.frames(), dir.display());
    Ok(())
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub validation: Option<&'a Path>,
    pub init: Option<&'a Path>,
    pub pretrain_iterations: usize,
    pub out: Option<&'a Path>,
}

#[derive(Serialize)]
struct TrainRun<'a> {
    experiment: &'a ExperimentConfig,
    pretrain_iterations: usize,
}

fn validation_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("iteration,samples,epe_all,epe_noc,epe_occ,fl_all,occ_f1\n");
    for (it, r) in &outcome.validations {
        s.push_str(&format!(
            "{it},{},{},{},{},{},{}\n",
            r.samples,
            fmt_metric(r.epe_all),
            fmt_metric(r.epe_noc),
            fmt_metric(r.epe_occ),
            fmt_metric(r.fl_all),
            fmt_metric(r.occ_f1)
        ));
    }
    s
}

pub fn train(args: TrainArgs) -> CliResult {
    let cfg: ExperimentConfig = read_toml(args.config)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let ds = load_dataset(args.data, "training data")?;
    let validation = args
        .validation
        .map(|p| load_dataset(p, "validation data"))
        .transpose()?;
    let mut model = match args.init {
        Some(p) => {
            let (m, _) = checkpoint::load(p)?;
            if m.config != cfg.model {
                return Err(CliError::incompatible(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            m
        }
        None => StarFlow::new(cfg.model.clone(), cfg.train.seed)?,
    };
    check_compatible(&model, &ds)?;

    let mut mb = ManifestBuilder::new(
        "train",
        &TrainRun {
            experiment: &cfg,
            pretrain_iterations: args.pretrain_iterations,
        },
        cfg.train.seed,
    )?;
    mb.input(args.data)?;
    for p in [args.config, args.validation, args.init].into_iter().flatten() {
        mb.input(p)?;
    }
    let dir = output_dir(args.out, &mb)?;
    let diverged = dir.join(DIVERGED_FILE);
    let mut outputs = Vec::new();

    let mut stages = Vec::new();
    if args.pretrain_iterations > 0 {
        stages.push((
            "loss_pretrain.csv",
            TrainConfig {
                stage: Stage::Pretrain2frame,
                iterations: args.pretrain_iterations,
                ..cfg.train.clone()
            },
        ));
    }
    stages.push((
        "loss.csv",
        TrainConfig {
            seed: if args.pretrain_iterations > 0 {
                cfg.train.seed.wrapping_add(1)
            } else {
                cfg.train.seed
            },
            ..cfg.train.clone()
        },
    ));
    let mut iteration = 0;
    let mut last_stage = cfg.train.stage;
    for (curve_name, tcfg) in stages {
        let outcome = match train_model(&mut model, &ds, &tcfg, validation.as_ref(), Some(&diverged)) {
            Ok(o) => o,
            Err(e @ Error::Divergence { .. }) => {
                if diverged.exists() {
                    outputs.push(diverged.clone());
                }
                mb.finish(&dir, &outputs)?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        write_text(&dir.join(curve_name), &outcome.curve_csv(), &mut outputs)?;
        if !outcome.validations.is_empty() {
            let name = curve_name.replace("loss", "validation");
            write_text(&dir.join(name), &validation_csv(&outcome), &mut outputs)?;
        }
        if let Some(p) = outcome.curve.last() {
            eprintln!("{} iteration {} loss {:.6}", tcfg.stage.label(), p.iteration, p.loss);
        }
        iteration += tcfg.iterations;
        last_stage = tcfg.stage;
    }
    let ckpt = dir.join(CHECKPOINT_FILE);
    let meta = CheckpointMeta {
        iteration,
        stage: last_stage.label().into(),
        diagnostic: None,
    };
    checkpoint::save(&model, &meta, &ckpt)?;
    outputs.push(ckpt);
    mb.finish(&dir, &outputs)?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub frames: &'a [usize],
    pub config: Option<&'a Path>,
    pub viz: bool,
    pub per_sample: bool,
    pub out: Option<&'a Path>,
}

#[derive(Serialize)]
struct EvalRun<'a> {
    model: &'a starflow::ModelConfig,
    frames: &'a [usize],
    viz: bool,
    per_sample: bool,
}

pub fn eval(args: EvalArgs) -> CliResult {
    let (model, _) = checkpoint::load(args.checkpoint)?;
    if let Some(p) = args.config {
        let expected: ExperimentConfig = read_toml(Some(p))?;
        if expected.model != model.config {
            return Err(CliError::incompatible(format!(
                "{} does not match the model config in {}",
                p.display(),
                args.checkpoint.display()
            )));
        }
    }
    let ds = load_dataset(args.data, "evaluation data")?;
    check_compatible(&model, &ds)?;
    if let Some(&n) = args.frames.iter().find(|&&n| n < 2 || n > ds.frames()) {
        return Err(CliError::input(format!(
            "--frames {n} outside 2..={} for this dataset",
            ds.frames()
        )));
    }

    let mut mb = ManifestBuilder::new(
        "eval",
        &EvalRun {
            model: &model.config,
            frames: args.frames,
            viz: args.viz,
            per_sample: args.per_sample,
        },
        0,
    )?;
    mb.input(args.checkpoint)?;
    mb.input(args.data)?;
    if let Some(p) = args.config {
        mb.input(p)?;
    }
    let dir = output_dir(args.out, &mb)?;
    let mut outputs = Vec::new();
    let mut lines = String::new();
    for &n in args.frames {
        let ev = evaluate(&model, &ds, n)?;
        let line = metric_line(&format!("frames={n}"), &ev.summary);
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
        write_text(&dir.join(format!("summary_n{n}.txt")), &ev.summary.to_key_values(), &mut outputs)?;
        if args.per_sample {
            let mut csv = String::from("sequence,epe_all,epe_noc,epe_occ,fl_all,occ_f1\n");
            for p in &ev.pairs {
                let r = &p.report;
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    p.sequence,
                    fmt_metric(r.epe_all),
                    fmt_metric(r.epe_noc),
                    fmt_metric(r.epe_occ),
                    fmt_metric(r.fl_all),
                    fmt_metric(r.occ_f1)
                ));
            }
            write_text(&dir.join(format!("per_sample_n{n}.csv")), &csv, &mut outputs)?;
        }
        if args.viz {
            let vdir = dir.join("viz");
            fs::create_dir_all(&vdir).map_err(|e| CliError::input(format!("{}: {e}", vdir.display())))?;
            for p in &ev.pairs {
                let path = vdir.join(format!("n{n}_seq_{:05}.png", p.sequence));
                write_rgb8(&path, p.flow.width, p.flow.height, &flow_to_color(&p.flow, None)?)?;
                outputs.push(path);
            }
        }
    }
    write_text(&dir.join("metrics.txt"), &lines, &mut outputs)?;
    mb.finish(&dir, &outputs)?;
    Ok(())
}

#[derive(Serialize)]
struct InferRun<'a> {
    model: &'a starflow::ModelConfig,
    frames: usize,
    occlusion: bool,
}

pub fn infer(checkpoint_path: &Path, frames: &[PathBuf], out: &Path, occ_out: Option<&Path>) -> CliResult {
    let (model, _) = checkpoint::load(checkpoint_path)?;
    let images: Vec<Image> = frames.iter().map(|p| read_frame(p)).collect::<starflow::Result<_>>()?;
    let (h, w) = (images[0].height, images[0].width);
    if let Some((p, im)) = frames.iter().zip(&images).find(|(_, im)| (im.height, im.width) != (h, w)) {
        return Err(CliError::input(format!(
            "{} is {}x{}, the first frame is {h}x{w}",
            p.display(),
            im.height,
            im.width
        )));
    }
    model.config.check_image_size(h, w)?;
    if occ_out.is_some() && !model.config.use_occlusion {
        return Err(CliError::input("the checkpoint has no occlusion output"));
    }
    let tensors = images
        .iter()
        .map(|im| Image::batch(&[im]))
        .collect::<starflow::Result<Vec<_>>>()?;
    let (flow, occ) = no_grad(|| -> starflow::Result<_> {
        let b = Binder::frozen(&model.params);
        let out = model.forward_sequence(&b, &tensors)?;
        let last = out.steps.last().expect("two or more frames").finest().clone();
        full_resolution(&last.flow, last.occ.as_ref().map(|o| o.tensor()))
    })?;
    let mut mb = ManifestBuilder::new(
        "infer",
        &InferRun {
            model: &model.config,
            frames: frames.len(),
            occlusion: occ_out.is_some(),
        },
        0,
    )?;
    mb.input(checkpoint_path)?;
    for f in frames {
        mb.input(f)?;
    }
    write_flo(&Image::from_tensor(&flow, 0)?, out)?;
    let mut extra = Vec::new();
    if let (Some(path), Some(o)) = (occ_out, occ) {
        write_mask(&Image::from_tensor(&o, 0)?, path)?;
        extra.push(path.to_path_buf());
    }
    mb.finish_beside(out, &extra)?;
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRun<'a> {
    model: &'a starflow::ModelConfig,
    samples: usize,
    fault: &'a Option<String>,
}

pub fn gradcheck(
    config: Option<&Path>,
    samples: usize,
    seed: u64,
    fault: Option<String>,
    out: Option<&Path>,
) -> CliResult {
    let cfg: ExperimentConfig = read_toml(config)?;
    cfg.model.validate()?;
    let opts = VerifyOptions {
        samples,
        seed,
        fault: fault.clone(),
    };
    let report = run_suite(&cfg.model, &opts)?;
    let text = report.to_text();
    print!("{text}");
    if out.is_some() || std::env::var_os(crate::manifest::OUT_ENV).is_some() {
        let mut mb = ManifestBuilder::new(
            "gradcheck",
            &GradcheckRun {
                model: &cfg.model,
                samples,
                fault: &fault,
            },
            seed,
        )?;
        if let Some(p) = config {
            mb.input(p)?;
        }
        let dir = output_dir(out, &mb)?;
        let mut outputs = Vec::new();
        write_text(&dir.join("gradcheck.txt"), &text, &mut outputs)?;
        mb.finish(&dir, &outputs)?;
    }
    if !report.passed() {
        let worst: Vec<String> = report
            .failures()
            .iter()
            .map(|r| format!("{} (max_rel_err {:.3e})", r.name, r.max_rel_err))
            .collect();
        return Err(CliError::verification(format!("gradient check failed: {}", worst.join(", "))));
    }
    Ok(())
}

fn params_table(rows: &[ParamRow]) -> String {
    let mut s = format!(
        "{:<22} {:>8} {:>8} {:>9} {:>6} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
        "arm", "encoder", "adapters", "estimator", "head", "context", "compress", "decoder", "total", "relative"
    );
    for r in rows {
        let c = &r.counts;
        s.push_str(&format!(
            "{:<22} {:>8} {:>8} {:>9} {:>6} {:>8} {:>8} {:>8} {:>9} {:>+8.2}%\n",
            r.arm, c.encoder, c.adapters, c.estimator, c.head, c.context, c.compress, c.decoder, c.total, r.relative
        ));
    }
    s
}

#[derive(Serialize)]
struct ParamsRun<'a> {
    model: &'a starflow::ModelConfig,
    arms: &'a [ArmSpec],
}

pub fn params(config: Option<&Path>, arms: ArmSet, out: Option<&Path>) -> CliResult {
    let cfg: ExperimentConfig = read_toml(config)?;
    cfg.model.validate()?;
    let arm_list = match arms {
        ArmSet::Directional => ArmSpec::directional(),
        ArmSet::Full => ArmSpec::full_matrix(),
    };
    let table = params_table(&ParamRow::table(&cfg.model, &arm_list));
    print!("{table}");
    if out.is_some() {
        let mut mb = ManifestBuilder::new(
            "params",
            &ParamsRun {
                model: &cfg.model,
                arms: &arm_list,
            },
            0,
        )?;
        if let Some(p) = config {
            mb.input(p)?;
        }
        let dir = output_dir(out, &mb)?;
        let mut outputs = Vec::new();
        write_text(&dir.join("params.txt"), &table, &mut outputs)?;
        mb.finish(&dir, &outputs)?;
    }
    Ok(())
}

pub fn ablate(config: Option<&Path>, train_dir: &Path, test_dir: &Path, out: Option<&Path>) -> CliResult {
    let cfg: AblationConfig = read_toml(config)?;
    cfg.base.model.validate()?;
    cfg.base.train.validate()?;
    let train_set = load_dataset(train_dir, "training data")?;
    let test = load_dataset(test_dir, "test data")?;
    let mut mb = ManifestBuilder::new("ablate", &cfg, cfg.seeds.first().copied().unwrap_or(0))?;
    mb.input(train_dir)?;
    mb.input(test_dir)?;
    if let Some(p) = config {
        mb.input(p)?;
    }
    let dir = output_dir(out, &mb)?;
    let report = run_ablation(&cfg, &train_set, &test, |arm, seed, _, r| {
        eprintln!("{}", metric_line(&format!("arm={} seed={seed}", arm.name), r));
    })?;
    let mut outputs = Vec::new();
    let text = report.to_text();
    print!("{text}");
    write_text(&dir.join("report.txt"), &text, &mut outputs)?;
    let mut summary = String::new();
    for row in &report.rows {
        for line in row.median.to_key_values().lines() {
            summary.push_str(&format!("{}.median.{line}\n", row.params.arm));
        }
        summary.push_str(&format!("{}.params={}\n", row.params.arm, row.params.counts.total));
        summary.push_str(&format!("{}.relative={:.4}\n", row.params.arm, row.params.relative));
        for (seed, r) in report.seeds.iter().zip(&row.per_seed) {
            for line in r.to_key_values().lines() {
                summary.push_str(&format!("{}.seed{seed}.{line}\n", row.params.arm));
            }
        }
    }
    write_text(&dir.join("summary.txt"), &summary, &mut outputs)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::input(e.to_string()))? + "\n";
    write_text(&dir.join("report.json"), &json, &mut outputs)?;
    mb.finish(&dir, &outputs)?;
    Ok(())
}

fn extension(p: &Path) -> String {
    p.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

#[derive(Serialize)]
struct ConvertRun {
    color: bool,
    max_mag: Option<f64>,
    output_format: String,
}

pub fn convert(input: &Path, output: &Path, color: bool, max_mag: Option<f64>) -> CliResult {
    let (flow, valid) = match extension(input).as_str() {
        "flo" => (read_flo(input)?, None),
        "png" => {
            let (f, v) = read_kitti_png(input)?;
            (f, Some(v))
        }
        other => return Err(CliError::input(format!("unknown flow format .{other}"))),
    };
    let out_ext = extension(output);
    if color {
        let rgb = flow_to_color(&flow, max_mag)?;
        write_rgb8(output, flow.width, flow.height, &rgb)?;
    } else {
        match out_ext.as_str() {
            "flo" => write_flo(&flow, output)?,
            "png" => write_kitti_png(&flow, valid.as_ref(), output)?,
            other => return Err(CliError::input(format!("unknown flow format .{other}"))),
        }
    }
    let mut mb = ManifestBuilder::new(
        "convert",
        &ConvertRun {
            color,
            max_mag,
            output_format: out_ext,
        },
        0,
    )?;
    mb.input(input)?;
    mb.finish_beside(output, &[])?;
    Ok(())
}
