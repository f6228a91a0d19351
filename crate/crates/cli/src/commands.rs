//! Implementations of the six subcommands. Each command resolves its
//! configuration (file values overridden by flags), performs the work
//! through the library crate, and writes its artifacts under the run
//! directory: config, logs, checkpoints, reports, overlays.

use crate::config::{write_resolved, RunConfig};
use crate::overlay::{
    render_overlay, write_svg, Outline, COLOR_GT, COLOR_PRED_HEART, COLOR_PRED_THORAX,
};
use crate::{CliError, EvalArgs, FitArgs, GenArgs, IouArgs, OverlayArgs, TrainArgs};
use ellipsedet::biometrics::{evaluate_pair, BiometricReport, CLASS_HEART, CLASS_THORAX};
use ellipsedet::detector::{load_checkpoint, save_checkpoint, train, EpochRecord, ToyNet};
use ellipsedet::encoding::{decode, encode, Detection};
use ellipsedet::fit::{run_fit, sample_init, FitResult};
use ellipsedet::geometry::{diou_components, ellipse_iou_oracle, rotated_rect_iou};
use ellipsedet::synth::{gen_dataset, load_split, read_pgm, Image, Sample};
use ellipsedet::Ellipse;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fs;
use std::io::{BufWriter, Write};
use std::time::Instant;

pub fn cmd_gen(args: &GenArgs, mut config: RunConfig) -> Result<(), CliError> {
    if let Some(v) = args.count {
        config.dataset.count = v;
    }
    if let Some(v) = args.train_frac {
        config.dataset.train_frac = v;
    }
    if let Some(v) = args.seed {
        config.dataset.seed = v;
    }
    log::info!(
        "generating {} scenes (train fraction {}, seed {}) into {}",
        config.dataset.count,
        config.dataset.train_frac,
        config.dataset.seed,
        args.out.display()
    );
    let summary = gen_dataset(&config.dataset, &args.out)?;
    log::info!(
        "wrote {} train + {} test scenes, config hash {}",
        summary.train,
        summary.test,
        summary.config_hash
    );
    Ok(())
}

fn write_history_header(w: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        w,
        "epoch,total,heatmap,size,offset,delta_a,delta_b,delta_theta,iou,\
         dice_thorax,dice_heart,dice_all,p_avg,mean_axis_error_deg"
    )
}

fn write_history_row(w: &mut impl Write, rec: &EpochRecord) -> std::io::Result<()> {
    let l = &rec.loss;
    write!(
        w,
        "{},{},{},{},{},{},{},{},{}",
        rec.epoch, l.total, l.heatmap, l.size, l.offset, l.delta_a, l.delta_b, l.delta_theta, l.iou
    )?;
    match &rec.val {
        Some(v) => writeln!(
            w,
            ",{},{},{},{},{}",
            v.dice_thorax, v.dice_heart, v.dice_all, v.p_avg, v.mean_axis_error_deg
        ),
        None => writeln!(w, ",,,,,"),
    }
}

fn log_epoch(rec: &EpochRecord, t0: Instant) {
    let l = &rec.loss;
    let base = format!(
        "epoch {:3}  loss {:8.4}  (hm {:.4} size {:.4} off {:.4} da {:.4} db {:.4} dth {:.4} iou {:.4})",
        rec.epoch, l.total, l.heatmap, l.size, l.offset, l.delta_a, l.delta_b, l.delta_theta, l.iou
    );
    match &rec.val {
        Some(v) => log::info!(
            "{base}  val Dice_T {:.4} Dice_C {:.4} Dice_all {:.4} P_avg {:.4} det {}/{}  [{:.0}s]",
            v.dice_thorax,
            v.dice_heart,
            v.dice_all,
            v.p_avg,
            v.detected,
            v.n,
            t0.elapsed().as_secs_f64()
        ),
        None => log::info!("{base}  [{:.0}s]", t0.elapsed().as_secs_f64()),
    }
}

pub fn cmd_train(args: &TrainArgs, mut config: RunConfig) -> Result<(), CliError> {
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = args.seed {
        config.train.seed = v;
    }
    if let Some(v) = args.eval_every {
        config.train.eval_every = v;
    }
    if let Some(v) = args.lambda_iou {
        config.train.weights.lambda_iou = v;
    }
    if args.only_iou {
        config.train.weights.lambda_e = 0.0;
    }
    if args.no_augment {
        config.train.augment = ellipsedet::synth::AugmentFlags::NONE;
    }

    let ckpt_dir = args.run.join("checkpoints");
    let reports_dir = args.run.join("reports");
    fs::create_dir_all(&ckpt_dir)?;
    fs::create_dir_all(&reports_dir)?;
    write_resolved(&config, &args.run.join("config.toml"))?;
    log::info!("resolved config written to {}", args.run.join("config.toml").display());

    let train_set = load_split(&args.dataset.join("train"))?;
    let val_set = load_split(&args.dataset.join("test"))?;
    log::info!("loaded {} train / {} validation scenes", train_set.len(), val_set.len());

    let history_path = reports_dir.join("history.csv");
    let mut csv = BufWriter::new(fs::File::create(&history_path)?);
    write_history_header(&mut csv)?;

    let latest = ckpt_dir.join("latest.json");
    let t0 = Instant::now();
    // The progress callback cannot return an error; remember the first
    // artifact-write failure and surface it after training.
    let mut sink_err: Option<CliError> = None;
    let out = train(&train_set, &val_set, &config.train, |net, rec| {
        log_epoch(rec, t0);
        if sink_err.is_none() {
            sink_err = write_history_row(&mut csv, rec)
                .map_err(CliError::from)
                .and_then(|()| csv.flush().map_err(CliError::from))
                .and_then(|()| {
                    save_checkpoint(&latest, &net.config, &net.params).map_err(CliError::from)
                })
                .err();
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }

    let final_path = ckpt_dir.join("final.json");
    save_checkpoint(&final_path, &out.net.config, &out.net.params)?;
    log::info!("final checkpoint written to {}", final_path.display());
    if let Some(v) = out.history.last().and_then(|r| r.val.as_ref()) {
        log::info!(
            "final validation: Dice_T {:.4} Dice_C {:.4} Dice_all {:.4} P_avg {:.4}",
            v.dice_thorax,
            v.dice_heart,
            v.dice_all,
            v.p_avg
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct SceneScore {
    index: usize,
    detected: bool,
    dice_thorax: f64,
    dice_heart: f64,
    dice_all: f64,
    p_avg: f64,
    p_raw: f64,
    axis_error_deg: f64,
}

impl SceneScore {
    fn miss(index: usize) -> Self {
        SceneScore {
            index,
            detected: false,
            dice_thorax: 0.0,
            dice_heart: 0.0,
            dice_all: 0.0,
            p_avg: 0.0,
            p_raw: 0.0,
            axis_error_deg: 90.0,
        }
    }

    fn from_report(index: usize, r: &BiometricReport) -> Self {
        SceneScore {
            index,
            detected: true,
            dice_thorax: r.dice_thorax,
            dice_heart: r.dice_heart,
            dice_all: r.dice_all,
            p_avg: r.ctr_precision.max(0.0),
            p_raw: r.ctr_precision,
            axis_error_deg: r.axis_error_deg,
        }
    }
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    source: String,
    n: usize,
    misses: usize,
    aggregate_dice_thorax: f64,
    aggregate_dice_heart: f64,
    aggregate_dice_all: f64,
    aggregate_p_avg: f64,
    aggregate_p_avg_raw: f64,
    aggregate_mean_axis_error_deg: f64,
    per_scene: Vec<SceneScore>,
}

fn gt_pair(sample: &Sample, index: usize) -> Result<(&Ellipse, &Ellipse), CliError> {
    let find = |class: usize| {
        sample.objects.iter().find(|(c, _)| *c == class).map(|(_, e)| e).ok_or_else(|| {
            CliError::Data(format!("scene {index} lacks a class-{class} annotation"))
        })
    };
    Ok((find(CLASS_THORAX)?, find(CLASS_HEART)?))
}

fn score_scene(
    index: usize,
    sample: &Sample,
    detections: &[Detection],
) -> Result<SceneScore, CliError> {
    let (gt_thorax, gt_heart) = gt_pair(sample, index)?;
    let pred_thorax = detections.iter().find(|d| d.class_id == CLASS_THORAX);
    let pred_heart = detections.iter().find(|d| d.class_id == CLASS_HEART);
    match (pred_thorax, pred_heart) {
        (Some(t), Some(h)) => {
            let report = evaluate_pair(
                &h.ellipse,
                &t.ellipse,
                gt_heart,
                gt_thorax,
                sample.image.width(),
                sample.image.height(),
            )
            .map_err(|e| CliError::Data(e.to_string()))?;
            Ok(SceneScore::from_report(index, &report))
        }
        _ => Ok(SceneScore::miss(index)),
    }
}

fn format_eval_table(out: &EvalOutput) -> String {
    let mut text = String::new();
    text.push_str(&format!("per-scene ({}):\n", out.source));
    text.push_str("idx    Dice_T  Dice_C  Dice_all  P_avg\n");
    for s in &out.per_scene {
        let miss = if s.detected { "" } else { "  (miss)" };
        text.push_str(&format!(
            "{:<5}  {:.4}  {:.4}  {:.4}    {:.4}{miss}\n",
            s.index, s.dice_thorax, s.dice_heart, s.dice_all, s.p_avg
        ));
    }
    text.push_str(&format!("\naggregate over {} scenes ({} misses):\n", out.n, out.misses));
    text.push_str("Dice_T  Dice_C  Dice_all  P_avg\n");
    text.push_str(&format!(
        "{:.4}  {:.4}  {:.4}    {:.4}\n",
        out.aggregate_dice_thorax,
        out.aggregate_dice_heart,
        out.aggregate_dice_all,
        out.aggregate_p_avg
    ));
    text
}

pub fn cmd_eval(args: &EvalArgs, mut config: RunConfig) -> Result<(), CliError> {
    if let Some(v) = args.score_threshold {
        config.train.score_threshold = v;
    }
    let samples = load_split(&args.split)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("split {} is empty", args.split.display())));
    }

    let (source, net) = if args.oracle {
        ("encode/decode oracle".to_string(), None)
    } else {
        let path = args.checkpoint.as_ref().ok_or_else(|| {
            CliError::Usage("eval needs --checkpoint FILE or --oracle".into())
        })?;
        let (net_config, params) = load_checkpoint(path)?;
        (format!("checkpoint {}", path.display()), Some(ToyNet { config: net_config, params }))
    };
    log::info!("evaluating {} scenes from {} ({source})", samples.len(), args.split.display());

    let threshold = config.train.score_threshold;
    let max_per_class = config.train.max_per_class;
    let mut per_scene = Vec::with_capacity(samples.len());
    for (index, sample) in samples.iter().enumerate() {
        let detections = match &net {
            Some(net) => net.infer(&sample.image.to_grid(), max_per_class, threshold)?,
            None => {
                let targets = encode(
                    &sample.objects,
                    sample.image.width(),
                    sample.image.height(),
                    config.train.stride,
                    config.train.net.num_classes,
                )?;
                decode(&targets.heads, config.train.stride, max_per_class, threshold)?
            }
        };
        per_scene.push(score_scene(index, sample, &detections)?);
    }

    let n = per_scene.len() as f64;
    let mean = |f: &dyn Fn(&SceneScore) -> f64| per_scene.iter().map(|s| f(s)).sum::<f64>() / n;
    let out = EvalOutput {
        source,
        n: per_scene.len(),
        misses: per_scene.iter().filter(|s| !s.detected).count(),
        aggregate_dice_thorax: mean(&|s| s.dice_thorax),
        aggregate_dice_heart: mean(&|s| s.dice_heart),
        aggregate_dice_all: mean(&|s| s.dice_all),
        aggregate_p_avg: mean(&|s| s.p_avg),
        aggregate_p_avg_raw: mean(&|s| s.p_raw),
        aggregate_mean_axis_error_deg: mean(&|s| s.axis_error_deg),
        per_scene,
    };

    let table = format_eval_table(&out);
    print!("{table}");
    let reports_dir = args.run.join("reports");
    fs::create_dir_all(&reports_dir)?;
    fs::write(reports_dir.join("eval.txt"), &table)?;
    let json = serde_json::to_string_pretty(&out)
        .map_err(|e| CliError::Data(format!("cannot serialize report: {e}")))?;
    fs::write(reports_dir.join("eval.json"), json)?;
    log::info!("reports written to {}", reports_dir.display());
    Ok(())
}

fn fit_report(target: &Ellipse, init: &Ellipse, result: &FitResult, trace_every: usize) -> String {
    let mut text = String::new();
    let line = |name: &str, e: &Ellipse| {
        format!(
            "{name:<7} cx {:.4}  cy {:.4}  a {:.4}  b {:.4}  theta {:.4}\n",
            e.cx(),
            e.cy(),
            e.a(),
            e.b(),
            e.theta()
        )
    };
    text.push_str(&line("target", target));
    text.push_str(&line("init", init));
    if trace_every > 0 {
        for (i, loss) in result.trace.iter().enumerate() {
            if i % trace_every == 0 {
                text.push_str(&format!("step {i:<5} loss {loss:.6}\n"));
            }
        }
    }
    text.push_str(&line("fitted", &result.fitted));
    text.push_str(&format!(
        "steps_run {}\nfinal_loss {:.6}\nfinal_dice {:.6}\n",
        result.steps_run, result.final_loss, result.final_dice
    ));
    text
}

pub fn cmd_fit(args: &FitArgs, mut config: RunConfig) -> Result<(), CliError> {
    if let Some(v) = args.steps {
        config.fit.steps = v;
    }
    if let Some(v) = args.learning_rate {
        config.fit.learning_rate = v;
    }
    if let Some(v) = args.lambda_e {
        config.fit.lambda_e = v;
    }
    if let Some(v) = args.lambda_iou {
        config.fit.lambda_iou = v;
    }
    let target = args.target.build()?;
    let init = match &args.init {
        Some(arg) => arg.build()?,
        None => sample_init(&target, &mut ChaCha8Rng::seed_from_u64(args.init_seed)),
    };
    let result = run_fit(&target, &init, &config.fit)?;
    print!("{}", fit_report(&target, &init, &result, args.trace_every));

    if let Some(path) = &args.json {
        let f = &result.fitted;
        let json = serde_json::json!({
            "target": { "cx": target.cx(), "cy": target.cy(), "a": target.a(),
                        "b": target.b(), "theta": target.theta() },
            "fitted": { "cx": f.cx(), "cy": f.cy(), "a": f.a(),
                        "b": f.b(), "theta": f.theta() },
            "steps_run": result.steps_run,
            "final_loss": result.final_loss,
            "final_dice": result.final_dice,
            "trace": result.trace,
        });
        fs::write(path, serde_json::to_string_pretty(&json).expect("plain JSON value"))?;
    }
    Ok(())
}

pub fn cmd_iou(args: &IouArgs) -> Result<(), CliError> {
    if args.resolution == 0 {
        return Err(CliError::Usage("--resolution must be positive".into()));
    }
    let e1 = args.e1.build()?;
    let e2 = args.e2.build()?;
    let rect_iou = rotated_rect_iou(&e1.tight_rect(), &e2.tight_rect());
    let ellipse_iou = ellipse_iou_oracle(&e1, &e2, args.resolution)?;
    let c = diou_components(&e1, &e2);
    println!("rect_iou     {rect_iou:.6}");
    println!("ellipse_iou  {ellipse_iou:.6}  (rasterized at resolution {})", args.resolution);
    println!("rho2         {:.6}", c.rho2);
    println!("c2           {:.6}", c.c2);
    println!("center_term  {:.6}", c.rho2 / c.c2);
    println!("diou_loss    {:.6}", 1.0 - c.iou + c.rho2 / c.c2);
    Ok(())
}

fn overlay_inputs(args: &OverlayArgs) -> Result<(Image, Vec<Ellipse>), CliError> {
    match (&args.split, &args.image) {
        (Some(split), None) => {
            let samples = load_split(split)?;
            let sample = samples.into_iter().nth(args.index).ok_or_else(|| {
                CliError::Data(format!("split has no scene at index {}", args.index))
            })?;
            let mut gt: Vec<Ellipse> = sample.objects.into_iter().map(|(_, e)| e).collect();
            for arg in &args.gt {
                gt.push(arg.build()?);
            }
            Ok((sample.image, gt))
        }
        (None, Some(image)) => {
            let img = read_pgm(image)?;
            let gt = args.gt.iter().map(|a| a.build()).collect::<Result<Vec<_>, _>>()?;
            Ok((img, gt))
        }
        // clap enforces exactly one of the two.
        _ => Err(CliError::Usage("need --split DIR or --image FILE".into())),
    }
}

pub fn cmd_overlay(args: &OverlayArgs, mut config: RunConfig) -> Result<(), CliError> {
    if let Some(v) = args.score_threshold {
        config.train.score_threshold = v;
    }
    let (image, gt) = overlay_inputs(args)?;

    let mut predictions: Vec<(usize, Ellipse)> = Vec::new();
    if let Some(path) = &args.checkpoint {
        let (net_config, params) = load_checkpoint(path)?;
        let net = ToyNet { config: net_config, params };
        let detections = net.infer(
            &image.to_grid(),
            config.train.max_per_class,
            config.train.score_threshold,
        )?;
        predictions.extend(detections.into_iter().map(|d| (d.class_id, d.ellipse)));
    }
    for p in &args.pred {
        predictions.push((p.class_id, p.params.build()?));
    }

    let mut outlines: Vec<Outline> =
        gt.into_iter().map(|ellipse| Outline { ellipse, color: COLOR_GT }).collect();
    for (class_id, ellipse) in predictions {
        let color = match class_id {
            CLASS_THORAX => COLOR_PRED_THORAX,
            CLASS_HEART => COLOR_PRED_HEART,
            other => {
                return Err(CliError::Data(format!("no overlay color for class {other}")));
            }
        };
        outlines.push(Outline { ellipse, color });
    }

    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let rgb = render_overlay(&image, &outlines);
    rgb.write_ppm(&args.out)?;
    log::info!("overlay written to {}", args.out.display());
    if let Some(svg_path) = &args.svg {
        write_svg(svg_path, image.width(), image.height(), &outlines)?;
        log::info!("vector sidecar written to {}", svg_path.display());
    }
    Ok(())
}
