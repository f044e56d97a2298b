use std::fs;
use std::path::Path;

use anyhow::{Context, Result};

use phicnet::adapt::{run_stream, trace_csv};
use phicnet::baselines;
use phicnet::cell::{rollout, CellConfig};
use phicnet::metrics::{horizon_eval, HorizonReport};
use phicnet::sim::{
    add_observation_noise, build_dataset, simulate_sequence, SequenceDataset, SimOptions, Split,
};
use phicnet::train::{train_from, Checkpoint, TrainReport};
use phicnet::Error;

use crate::config::{RunConfig, SweepVariable};
use crate::pgm;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// The configured dataset: loaded from `paths.dataset` or generated, with
/// observation noise applied when requested.
pub fn dataset(cfg: &RunConfig) -> Result<SequenceDataset> {
    let ds = match &cfg.paths.dataset {
        Some(path) => SequenceDataset::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => build_dataset(&cfg.dataset_config())?,
    };
    if cfg.dataset.noise > 0.0 {
        return Ok(add_observation_noise(&ds, cfg.dataset.noise, cfg.seed)?);
    }
    Ok(ds)
}

/// A freshly initialized model for `ds`, scaled like the training data.
pub fn fresh_model(cfg: &RunConfig, ds: &SequenceDataset) -> Result<CellConfig> {
    let mut model = phicnet::pde::PdeModel::with_boundary(
        ds.manifest.system,
        cfg.model.theta_init.unwrap_or(ds.manifest.theta),
        ds.manifest.boundary,
    );
    model.set_advection_scale(ds.norm_scale());
    Ok(baselines::build(cfg.model.kind, model, cfg.model.k, cfg.model.widths.clone(), cfg.seed)?)
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let (manifest, blob) = ds.save(out)?;
    cfg.write(out)?;
    println!("wrote {} and {}", manifest.display(), blob.display());
    Ok(())
}

fn run_training(cfg: &RunConfig, ds: &SequenceDataset) -> Result<(TrainReport, f64)> {
    let (init, optimizer) = match &cfg.paths.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            (ck.cell, ck.optimizer)
        }
        None => (fresh_model(cfg, ds)?, None),
    };
    let train_set = ds.normalized(Split::Train);
    let val = ds.normalized(Split::Val);
    let report = train_from(&init, optimizer, &train_set, &val, &cfg.train, |r| {
        eprintln!("epoch {:>4}  train {:.6e}  val {:.6e}", r.epoch, r.train.total, r.val_total)
    })?;
    Ok((report, ds.norm_scale()))
}

fn checkpoint_name(cfg: &RunConfig) -> String {
    cfg.name.clone().unwrap_or_else(|| format!("{}_{}", cfg.system.name(), cfg.model.kind.tag()))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = dataset(cfg)?;
    let (report, scale) = run_training(cfg, &ds)?;
    fs::create_dir_all(out)?;
    cfg.write(out)?;
    fs::write(out.join("loss_curve.csv"), report.curve_csv())?;
    let name = checkpoint_name(cfg);
    let (manifest, _) = Checkpoint::new(name.clone(), report.best.clone(), scale).save(out)?;
    // The last iterate carries the optimizer state so a run can resume.
    let mut last = Checkpoint::new(format!("{name}_last"), report.last.clone(), scale);
    last.optimizer = Some(report.optimizer.clone());
    last.optimizer_lr = Some((cfg.train.lr, cfg.train.theta_lr.unwrap_or(cfg.train.lr)));
    last.save(out)?;
    println!(
        "best epoch {} theta {:?}; checkpoint {}",
        report.best_epoch,
        report.best.model.params.values,
        manifest.display()
    );
    if let Some(epoch) = report.diverged_at {
        return Err(Error::NonFiniteGradient { step: epoch }.into());
    }
    Ok(())
}

fn eval_reports(cell: &CellConfig, ds: &SequenceDataset, scale: f64, horizon: usize) -> Result<String> {
    let (snr, rho) = horizon_eval(cell, ds.split(Split::Test), horizon, scale)?;
    Ok(format!("{}\n{}{}", HorizonReport::csv_header(), snr.csv_rows(), rho.csv_rows()))
}

fn write_snapshots(cell: &CellConfig, ds: &SequenceDataset, scale: f64, steps: &[usize], out: &Path) -> Result<()> {
    let Some(seq) = ds.split(Split::Test).first() else {
        return Ok(());
    };
    let w = cell.warmup_len();
    let last = steps.iter().copied().max().unwrap_or(0).min(seq.len().saturating_sub(w));
    if last == 0 {
        return Ok(());
    }
    let warm: Vec<_> = seq.frames_u[..w].iter().map(|f| f.scale(1.0 / scale)).collect();
    let r = rollout(cell, &warm, last, false)?;
    let dir = out.join("snapshots");
    fs::create_dir_all(&dir)?;
    for &step in steps.iter().filter(|s| (1..=last).contains(*s)) {
        let frame = w + step - 1;
        let mut maps = vec![("u_true", seq.frames_u[frame].clone()), ("u_hat", r.u_hat[step - 1].scale(scale))];
        if let Some(v) = &r.v_hat[step - 1] {
            maps.push(("v_true", seq.frames_v_true[frame - 1].clone()));
            maps.push(("v_hat", v.scale(scale)));
        }
        for (label, f) in maps {
            for c in 0..f.channels() {
                pgm::write(&dir.join(format!("t{step:03}_{label}_c{c}.pgm")), &f, c)?;
            }
        }
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = cfg.paths.checkpoint.as_ref().ok_or_else(|| config_error("eval needs paths.checkpoint"))?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let ds = dataset(cfg)?;
    fs::create_dir_all(out)?;
    cfg.write(out)?;
    let csv = eval_reports(&ck.cell, &ds, ck.norm_scale, cfg.eval.horizon)?;
    fs::write(out.join(format!("horizon_{}.csv", ck.cell.kind.tag())), &csv)?;
    write_snapshots(&ck.cell, &ds, ck.norm_scale, &cfg.eval.snapshots, out)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let spec = cfg.sweep.as_ref().ok_or_else(|| config_error("sweep needs a `sweep` section"))?;
    if spec.values.is_empty() {
        return Err(config_error("sweep list is empty"));
    }
    fs::create_dir_all(out)?;
    cfg.write(out)?;
    let mut csv = String::from("variable,value,step,metric,mean,ci_lo,ci_hi,model_tag\n");
    for &value in &spec.values {
        let mut run = cfg.clone();
        match spec.variable {
            SweepVariable::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(config_error(format!("K must be a positive integer, got {value}")));
                }
                run.model.k = value as usize;
            }
            SweepVariable::Lambda => run.train.lambda = value,
            SweepVariable::Noise => run.dataset.noise = value,
        }
        eprintln!("{} = {value}", spec.variable.name());
        let ds = dataset(&run)?;
        let (report, scale) = run_training(&run, &ds)?;
        let rows = eval_reports(&report.best, &ds, scale, run.eval.horizon)?;
        for line in rows.lines().skip(1) {
            csv.push_str(&format!("{},{value},{line}\n", spec.variable.name()));
        }
    }
    fs::write(out.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn adapt(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dcfg = cfg.dataset_config();
    let (cell, scale) = match &cfg.paths.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            (ck.cell, ck.norm_scale)
        }
        None => {
            let mut model = dcfg.model();
            model.params.values[0] = cfg.model.theta_init.unwrap_or(dcfg.theta);
            let cell = baselines::build(cfg.model.kind, model, cfg.model.k, cfg.model.widths.clone(), cfg.seed)?;
            (cell, 1.0)
        }
    };
    if cell.model.kind() != cfg.system {
        return Err(config_error(format!(
            "checkpoint is for {}, config says {}",
            cell.model.kind().name(),
            cfg.system.name()
        )));
    }
    let mut truth = dcfg.model();
    truth.set_coeff(dcfg.theta);
    let opts = SimOptions { coeff_schedule: cfg.adapt.schedule.clone(), ..SimOptions::default() };
    let steps = cfg.adapt.frames.checked_sub(1).ok_or_else(|| config_error("adapt.frames must be positive"))?;
    let seq = simulate_sequence(&truth, &dcfg.source, cfg.seed, dcfg.shape(), steps, &opts)?;
    let frames: Vec<_> = seq.frames_u.iter().map(|f| f.scale(1.0 / scale)).collect();
    let acfg = cfg.adapt.resolve(&cell);
    let schedule = cfg.adapt.schedule.clone();
    let base = dcfg.theta;
    let theta_true = move |j: usize| schedule.iter().rev().find(|(from, _)| *from <= j).map_or(base, |(_, v)| *v);
    let (rows, _) = run_stream(cell, acfg, &frames, Some(&theta_true))?;
    fs::create_dir_all(out)?;
    cfg.write(out)?;
    let csv = trace_csv(&rows);
    fs::write(out.join("adapt_trace.csv"), &csv)?;
    let triggers = rows.iter().filter(|r| r.triggered).count();
    let last = rows.last().map_or(f64::NAN, |r| r.theta_estimate);
    println!("{} steps, {triggers} triggers, final estimate {last}", rows.len());
    Ok(())
}
