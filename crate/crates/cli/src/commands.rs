//! One function per verb.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ArgMatches;
use peye_core::data::io::{load_dataset, read_pressure, read_vision, save_dataset, write_pressure};
use peye_core::data::{generate_dataset, Dataset, RenderConfig, SynthDatasetConfig};
use peye_core::density::PixelValueDensity;
use peye_core::metrics::{default_curve_epsilons, pcs_curve, PcsCurve, HEADLINE_MASK_FRACTION, REPORT_MASK_FRACTIONS};
use peye_core::model::{load_checkpoint, Calibration, PEyeNetwork};
use peye_core::report::{pcs_plot_svg, write_curves_csv, write_evaluation};
use peye_core::train::{
    evaluate_network, fit_training_density, predict_one, prepare_splits, run_ablation, train, ConfigName, Evaluation,
    TrainConfig,
};
use peye_core::types::{Modality, PhysicalVector, SampleRecord, Split};
use peye_core::Device;

pub fn dispatch(verb: &str, m: &ArgMatches) -> Result<()> {
    match verb {
        "synth" => synth(m),
        "fit-density" => fit_density(m),
        "train" => train_cmd(m),
        "eval" => eval(m),
        "predict" => predict(m),
        "curves" => curves(m),
        "ablate" => ablate(m),
        other => bail!("unknown command {other}"),
    }
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required argument")
}

fn out_dir(m: &ArgMatches) -> Result<&Path> {
    let dir = path(m, "out-dir");
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Defaults, then the `--config` file, then individual flags.
fn train_config(m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for (key, _) in TrainConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(m: &ArgMatches) -> Result<Dataset> {
    let dir = path(m, "data");
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn plot(m: &ArgMatches) -> bool {
    !m.get_flag("no-plot")
}

fn headline(eval: &Evaluation) -> String {
    let s = &eval.summary;
    let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    format!(
        "PCS_efs0.1 {} MSE_efs {} PSNR {:.2} SSIM {:.4} over {} samples",
        fmt(s.pcs_at(HEADLINE_MASK_FRACTION, 0.1)),
        fmt(s.mse_efs(HEADLINE_MASK_FRACTION)),
        s.psnr,
        s.ssim,
        eval.samples.len()
    )
}

fn synth(m: &ArgMatches) -> Result<()> {
    let out = out_dir(m)?;
    let modality: Modality = m.get_one::<String>("modality").expect("defaulted").parse()?;
    let (pm_rows, pm_cols) = (
        *m.get_one::<usize>("pm-rows").unwrap(),
        *m.get_one::<usize>("pm-cols").unwrap(),
    );
    let cfg = SynthDatasetConfig {
        subjects: *m.get_one("subjects").unwrap(),
        poses_per_subject: *m.get_one("poses").unwrap(),
        test_subjects: *m.get_one("test-subjects").unwrap(),
        seed: *m.get_one("seed").unwrap(),
        render: RenderConfig {
            pm_rows,
            pm_cols,
            image_height: *m.get_one("image-height").unwrap(),
            image_width: *m.get_one("image-width").unwrap(),
            modality,
            pixel_area: RenderConfig::pixel_area_for(pm_rows, pm_cols),
            ..RenderConfig::default()
        },
    };
    let ds = generate_dataset(&cfg)?;
    let manifest = save_dataset(out, &ds)?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}

fn fit_density(m: &ArgMatches) -> Result<()> {
    let ds = dataset(m)?;
    let cfg = train_config(m)?;
    let out = out_dir(m)?;
    let (train_set, _) = prepare_splits(&ds, &cfg)?;
    let density = fit_training_density(&train_set, &cfg)?;
    let p = out.join("density.txt");
    density.save(&p)?;
    println!(
        "wrote {} ({} bins, {} training maps)",
        p.display(),
        density.bins(),
        train_set.records.len()
    );
    Ok(())
}

fn evaluate_into(
    net: &PEyeNetwork,
    calibration: &Calibration,
    records: &[&SampleRecord],
    cfg: &TrainConfig,
    dir: &Path,
    plot: bool,
) -> Result<Evaluation> {
    let eval = evaluate_network(net, calibration, records, cfg)?;
    write_evaluation(dir, &eval, plot)?;
    Ok(eval)
}

fn train_cmd(m: &ArgMatches) -> Result<()> {
    let ds = dataset(m)?;
    let cfg = train_config(m)?;
    let out = out_dir(m)?;
    let (train_set, validation) = prepare_splits(&ds, &cfg)?;
    let density = if cfg.loss_weights().lambda_pwrs > 0.0 {
        let d = match m.get_one::<PathBuf>("density") {
            Some(p) => PixelValueDensity::load(p)?,
            None => fit_training_density(&train_set, &cfg)?,
        };
        d.save(&out.join("density.txt"))?;
        Some(d)
    } else {
        None
    };
    let outcome = train(&train_set, validation.as_ref(), &cfg, density.as_ref(), Some(out))?;
    println!(
        "trained {} for {} steps, final loss {}",
        cfg.config_name,
        outcome.steps,
        outcome.final_loss().map_or_else(|| "n/a".into(), |l| format!("{l:.6}"))
    );
    let test = ds.subset(Split::Test);
    if test.records.is_empty() {
        return Ok(());
    }
    let records: Vec<&SampleRecord> = test.records.iter().collect();
    let eval = match outcome.evaluation_checkpoint(&cfg) {
        Some(p) if cfg.use_best_checkpoint => {
            let (net, cal) = load_checkpoint(p, &Device::Cpu)?;
            evaluate_into(&net, &cal, &records, &cfg, &out.join("eval"), plot(m))?
        }
        _ => evaluate_into(
            &outcome.net,
            &outcome.calibration,
            &records,
            &cfg,
            &out.join("eval"),
            plot(m),
        )?,
    };
    println!("test: {}", headline(&eval));
    Ok(())
}

fn eval(m: &ArgMatches) -> Result<()> {
    let ds = dataset(m)?;
    let cfg = train_config(m)?;
    let (net, cal) = load_checkpoint(path(m, "checkpoint"), &Device::Cpu)?;
    let records: Vec<&SampleRecord> = match m.get_one::<String>("split").expect("defaulted").as_str() {
        "train" => ds.records_in(Split::Train),
        "test" => ds.records_in(Split::Test),
        "all" => ds.records.iter().collect(),
        other => bail!("unknown split {other:?} (expected train, test or all)"),
    };
    let out = out_dir(m)?;
    let eval = evaluate_into(&net, &cal, &records, &cfg, out, plot(m))?;
    println!("{}", headline(&eval));
    Ok(())
}

fn parse_physique(text: &str) -> Result<PhysicalVector> {
    let entries = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad physique entry {v:?}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhysicalVector::new(entries)?)
}

fn predict(m: &ArgMatches) -> Result<()> {
    let (net, cal) = load_checkpoint(path(m, "checkpoint"), &Device::Cpu)?;
    let image = read_vision(path(m, "image"), net.config().modality)?;
    let physique = parse_physique(m.get_one::<String>("physique").expect("required"))?;
    let pm = predict_one(&net, &cal, &image, &physique)?;
    let out = out_dir(m)?;
    let p = out.join("prediction.csv");
    write_pressure(&p, &pm)?;
    println!("wrote {} ({}x{})", p.display(), pm.rows(), pm.cols());
    Ok(())
}

/// `(name, pred, gt)` triples: a single file pair, or every `.csv` in the
/// prediction directory matched by name in the ground-truth directory.
fn curve_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if pred.is_file() {
        return Ok(vec![(pred.display().to_string(), pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut pairs = Vec::new();
    for entry in fs::read_dir(pred).with_context(|| format!("reading {}", pred.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "csv") {
            let name = p.file_name().expect("file entry").to_owned();
            let g = gt.join(&name);
            if !g.is_file() {
                bail!("no ground truth {} for {}", g.display(), p.display());
            }
            pairs.push((name.to_string_lossy().into_owned(), p, g));
        }
    }
    if pairs.is_empty() {
        bail!("no .csv maps in {}", pred.display());
    }
    pairs.sort();
    Ok(pairs)
}

fn curves(m: &ArgMatches) -> Result<()> {
    let pairs = curve_pairs(path(m, "pred"), path(m, "gt"))?;
    let eps = default_curve_epsilons();
    let mut per_mask: Vec<Vec<PcsCurve>> = vec![Vec::new(); REPORT_MASK_FRACTIONS.len()];
    for (name, p, g) in &pairs {
        let pred = read_pressure(p, 1.0)?;
        let gt = read_pressure(g, 1.0)?;
        for (i, &frac) in REPORT_MASK_FRACTIONS.iter().enumerate() {
            match pcs_curve(pred.grid(), gt.grid(), frac, &eps).with_context(|| name.clone())? {
                Some(c) => per_mask[i].push(c),
                None => log::warn!("{name}: empty effective area at mask {frac}"),
            }
        }
    }
    let mut means = Vec::new();
    for (i, curves) in per_mask.iter().enumerate() {
        if let Some(c) = PcsCurve::mean(curves)? {
            means.push((
                format!("pcs_m{:02}", (REPORT_MASK_FRACTIONS[i] * 100.0).round() as u32),
                c,
            ));
        }
    }
    if means.is_empty() {
        bail!("no map pair has an effective area");
    }
    let named: Vec<(String, &PcsCurve)> = means.iter().map(|(n, c)| (n.clone(), c)).collect();
    let out = out_dir(m)?;
    write_curves_csv(&out.join("pcs_curves.csv"), &named)?;
    if plot(m) {
        let p = out.join("pcs_curves.svg");
        fs::write(&p, pcs_plot_svg(&named)).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("wrote curves for {} map pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn ablate(m: &ArgMatches) -> Result<()> {
    let ds = dataset(m)?;
    let cfg = train_config(m)?;
    let configs: Vec<ConfigName> = match m.get_many::<String>("configs") {
        Some(names) => names.map(|n| n.parse()).collect::<peye_core::Result<_>>()?,
        None => ConfigName::ALL.to_vec(),
    };
    let out = out_dir(m)?;
    let rows = run_ablation(&ds, &cfg, &configs, Some(out))?;
    for row in &rows {
        let s = &row.summary;
        println!(
            "{:<16} PCS_efs0.1 {:.4} MSE_efs {:.5}",
            row.config.as_str(),
            s.pcs_at(HEADLINE_MASK_FRACTION, 0.1).unwrap_or(f64::NAN),
            s.mse_efs(HEADLINE_MASK_FRACTION).unwrap_or(f64::NAN)
        );
    }
    println!("wrote {}", out.join("ablation.csv").display());
    Ok(())
}
