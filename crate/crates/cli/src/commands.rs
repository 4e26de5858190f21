//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cardioprop_core::gradcheck::{run_suite, GradCheck};
use cardioprop_core::gtadapt::{adapt_ground_truth, adapt_masks, detect_basal_slice, BasalDetectionParams};
use cardioprop_core::io::{
    load_bundle, load_masks, read_json, save_bundle, save_masks, write_json, Checkpoint, MANIFEST,
};
use cardioprop_core::metrics::{evaluate_case, summarize, CaseInput};
use cardioprop_core::netbuilder::NetKind;
use cardioprop_core::phantom::{generate_pair, PhantomConfig};
use cardioprop_core::propagate::{segment_stack, Direction, NetPredictor, PropagationConfig};
use cardioprop_core::roi::{box_from_masks, crop, determine_roi, uncrop, RoiBox, RoiNet};
use cardioprop_core::stacklab::CardiacStack;
use cardioprop_core::train::{fit, TrainConfig};

use crate::error::CliError;
use crate::{AdaptArgs, EvaluateArgs, GradCheckArgs, PhantomArgs, SegmentArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

/// `dir` itself when it is a bundle, else its bundle subdirectories in name order.
fn find_bundles(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join(MANIFEST).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = fs::read_dir(dir).map_err(|e| CliError::new("E_IO", format!("{}: {e}", dir.display())))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).is_file())
        .collect();
    found.sort();
    if found.is_empty() {
        return Err(CliError::arg(format!("no bundles under {}", dir.display())));
    }
    Ok(found)
}

fn known_or_detected_base(stack: &CardiacStack) -> Result<i32> {
    match stack.base_index() {
        Some(b) => Ok(b),
        None => Ok(detect_basal_slice(stack, &BasalDetectionParams::default())?),
    }
}

pub fn phantom(args: &PhantomArgs) -> Result<()> {
    let base_cfg: PhantomConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PhantomConfig::default(),
    };
    if args.count == 0 {
        return Err(CliError::arg("--count must be at least 1"));
    }
    for i in 0..args.count {
        let mut cfg = base_cfg.clone().with_seed(args.seed + i as u64);
        cfg.distractor |= args.distractor;
        let (ed, es) = generate_pair(&cfg)?;
        save_bundle(&ed, &args.out.join(format!("case_{i:03}_ed")))?;
        save_bundle(&es, &args.out.join(format!("case_{i:03}_es")))?;
    }
    println!(
        "wrote {} ED/ES pairs ({} slices of {}x{}, base {}) to {}",
        args.count,
        base_cfg.slices,
        base_cfg.size,
        base_cfg.size,
        base_cfg.base_index,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainingReport<'a> {
    net: NetKind,
    config: &'a TrainConfig,
    stacks: usize,
    loss_curve: &'a [f64],
    best_epoch: usize,
    final_checkpoint: PathBuf,
    best_checkpoint: PathBuf,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let kind: NetKind = args.net.parse()?;
    let mut cfg: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if args.input_size.is_some() {
        cfg.input_size = args.input_size;
    }
    let mut stacks = Vec::new();
    for dir in find_bundles(&args.data)? {
        let stack = load_bundle(&dir)?;
        let masks = stack.require_masks()?;
        // Segmentation nets see the heart region only, as after ROI determination.
        stacks.push(if kind == NetKind::Roi {
            stack
        } else {
            let b = box_from_masks(masks)?;
            crop(&stack, &b)?
        });
    }
    let outcome = fit(kind, &stacks, &cfg)?;
    fs::create_dir_all(&args.out).map_err(|e| CliError::new("E_IO", format!("{}: {e}", args.out.display())))?;
    let final_path = args.out.join("final.ckpt");
    let best_path = args.out.join("best.ckpt");
    outcome.final_checkpoint.save(&final_path)?;
    outcome.best_checkpoint.save(&best_path)?;
    let report = TrainingReport {
        net: kind,
        config: &cfg,
        stacks: stacks.len(),
        loss_curve: &outcome.loss_curve,
        best_epoch: outcome.best_checkpoint.meta.epoch,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
    };
    write_json(&report, &args.out.join("training.json"))?;
    for (e, l) in outcome.loss_curve.iter().enumerate() {
        println!("epoch {:>3}  loss {l:.5}", e + 1);
    }
    println!(
        "trained {kind} on {} stacks; best epoch {}; checkpoints in {}",
        stacks.len(),
        report.best_epoch + 1,
        args.out.display()
    );
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse = |p: &str| p.trim().parse::<f64>().map_err(|_| CliError::arg(format!("bad ROI range `{s}`")));
    match parts.as_slice() {
        [lo, hi] => Ok((parse(lo)?, parse(hi)?)),
        _ => Err(CliError::arg(format!("ROI range must be `lo,hi`, got `{s}`"))),
    }
}

#[derive(Serialize)]
struct RunManifest {
    bundle: PathBuf,
    model: PathBuf,
    net: NetKind,
    mode: Direction,
    acdc_rules: bool,
    roi: Option<RoiBox>,
    roi_range: Option<(f64, f64)>,
    slices: usize,
    /// Slices whose prediction failed the LV check and was reset.
    reset_slices: Vec<usize>,
}

pub fn segment(args: &SegmentArgs) -> Result<()> {
    let stack = load_bundle(&args.bundle)?;
    let checkpoint = Checkpoint::load(&args.model)?;
    let mut predictor = NetPredictor::new(&checkpoint)?;
    let cfg = PropagationConfig {
        direction: args.mode.parse()?,
        acdc_rules: args.acdc_rules,
        ..PropagationConfig::default()
    };
    let (rows, cols) = stack.dims();
    let (work, roi, roi_range) = match &args.roi_model {
        Some(path) => {
            let range = parse_range(&args.roi_range)?;
            let ed = match &args.roi_from {
                Some(p) => load_bundle(p)?,
                None => stack.clone(),
            };
            let mut net = RoiNet::new(&Checkpoint::load(path)?)?;
            let b = determine_roi(&ed, &mut net, range)?;
            (crop(&stack, &b)?, Some(b), Some(range))
        }
        None if args.gt_roi => {
            let b = box_from_masks(stack.require_masks()?)?;
            (crop(&stack, &b)?, Some(b), None)
        }
        None => (stack.clone(), None, None),
    };
    let masks = segment_stack(work.slices(), &mut predictor, &cfg)?;
    let masks = match &roi {
        Some(b) => uncrop(&masks, b, rows, cols)?,
        None => masks,
    };
    save_masks(&masks, &args.out)?;
    let reset_slices: Vec<usize> = (0..masks.len()).filter(|&i| masks[i].is_background()).collect();
    let manifest = RunManifest {
        bundle: args.bundle.clone(),
        model: args.model.clone(),
        net: checkpoint.spec.kind,
        mode: cfg.direction,
        acdc_rules: cfg.acdc_rules,
        roi,
        roi_range,
        slices: masks.len(),
        reset_slices,
    };
    write_json(&manifest, &args.out.join("run.json"))?;
    println!(
        "segmented {} slices ({} reset) with {} in {} mode{}",
        manifest.slices,
        manifest.reset_slices.len(),
        manifest.net,
        args.mode,
        match roi {
            Some(b) => format!(", ROI {}x{} at ({}, {})", b.side, b.side, b.top, b.left),
            None => String::new(),
        }
    );
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> Result<()> {
    if args.pred.len() != args.truth.len() {
        return Err(CliError::arg(format!(
            "{} prediction directories for {} truth bundles",
            args.pred.len(),
            args.truth.len()
        )));
    }
    let mut cases = Vec::with_capacity(args.truth.len());
    for (pred_dir, truth_dir) in args.pred.iter().zip(&args.truth) {
        let truth = load_bundle(truth_dir)?;
        let base = known_or_detected_base(&truth)?;
        let adapted = adapt_masks(truth.require_masks()?, base)?;
        let (rows, cols) = truth.dims();
        let predicted = load_masks(pred_dir, truth.len(), rows, cols)?;
        let name = truth_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| truth_dir.display().to_string());
        cases.push(evaluate_case(&CaseInput {
            case: name,
            phase: truth.phase,
            predicted: &predicted,
            truth: &adapted,
            spacing: truth.spacing,
            thickness: truth.thickness,
            base,
        })?);
    }
    let report = summarize(cases);
    write_json(&report, &args.out)?;
    print!("{}", report.table());
    Ok(())
}

pub fn adapt_gt(args: &AdaptArgs) -> Result<()> {
    let stack = load_bundle(&args.bundle)?;
    stack.require_masks()?;
    let base = match args.base {
        Some(b) => b,
        None => known_or_detected_base(&stack)?,
    };
    let adapted = adapt_ground_truth(&stack, base)?;
    save_bundle(&adapted, &args.out)?;
    println!("adapted {} slices at base {base} into {}", adapted.len(), args.out.display());
    Ok(())
}

pub fn grad_check(args: &GradCheckArgs) -> Result<()> {
    let results: Vec<GradCheck> = run_suite(args.seed, args.rounds)?;
    for r in &results {
        println!(
            "{}  {:<40} {:>5} coords  max rel err {:.2e}",
            if r.passed() { "ok  " } else { "FAIL" },
            r.case,
            r.coordinates,
            r.max_rel_error
        );
    }
    if let Some(out) = &args.out {
        write_json(&results, out)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.case.as_str()).collect();
    if !failed.is_empty() {
        return Err(CliError::new(
            "E_GRADCHECK",
            format!("{} of {} checks failed: {}", failed.len(), results.len(), failed.join(", ")),
        ));
    }
    println!("{} checks passed", results.len());
    Ok(())
}
