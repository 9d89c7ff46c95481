use std::path::Path;
use std::time::Instant;

use composer_core::dataset::load_clips;
use composer_core::tokenize::scale_tags;
use composer_core::train::metrics_csv;
use composer_core::{
    generate_dataset, grad_check, load_checkpoint, load_dataset, save_checkpoint, save_dataset, split_train_test,
    ClipFeatures, Error, EvalReport, RawClip, SynthConfig, TrainConfig, Trainer,
};
use serde::Serialize;

use crate::{Cli, Command, EvalArgs, ExportArgs, Failure, GradcheckArgs, Preset, SynthArgs, TrainArgs};

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::ExportAttention(a) => export_attention(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::SynthGen(a) => synth_gen(cli, a),
    }
}

fn resolve_config(cli: &Cli) -> Result<TrainConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => match cli.preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        },
    };
    for a in &cli.ablate {
        cfg.apply_override(a)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn warn_model_flags_ignored(cli: &Cli) {
    if cli.config.is_some() || !cli.ablate.is_empty() {
        log::warn!("--config and --ablate are ignored: the checkpoint fixes the configuration");
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable output")
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    epochs: usize,
    train_clips: usize,
    holdout_clips: usize,
    tokens_per_scale: Vec<usize>,
    final_train_acc: Option<f64>,
    holdout: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    elapsed_s: Option<f64>,
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = resolve_config(cli)?;
    let (clips, manifest) = load_dataset(&a.data)?;
    let (train, holdout) = if a.holdout_every > 0 {
        split_train_test(clips, a.holdout_every)
    } else {
        (clips, Vec::new())
    };
    let mut tr = Trainer::new(cfg, manifest, &train)?;
    let scales = if tr.cfg.model.multiscale { tr.cfg.model.num_scales } else { 1 };
    let tokens: Vec<usize> = (0..scales).map(|s| scale_tags(&tr.model.dims, s).len()).collect();
    log::info!(
        "tokens per scale: {}",
        tokens.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
    );
    log::info!(
        "{} train clips, {} held out, {} parameters",
        train.len(),
        holdout.len(),
        tr.model.store.num_scalars()
    );

    std::fs::create_dir_all(&a.out).map_err(|source| Error::Io {
        path: a.out.clone(),
        source,
    })?;
    write_file(&a.out.join("config.cfg"), tr.cfg.to_text())?;
    let val = (!holdout.is_empty()).then_some(holdout.as_slice());
    tr.fit(&train, val)?;
    write_file(&a.out.join("metrics.csv"), metrics_csv(&tr.history))?;
    save_checkpoint(&tr, &a.out.join("checkpoint"))?;
    let report = match val {
        Some(v) => Some(tr.evaluate(v)?),
        None => None,
    };
    if let Some(r) = &report {
        log::info!("held-out accuracy {:.4}", r.accuracy);
    }
    let summary = TrainSummary {
        epochs: tr.epoch,
        train_clips: train.len(),
        holdout_clips: holdout.len(),
        tokens_per_scale: tokens,
        final_train_acc: tr.history.last().map(|m| m.train_acc),
        holdout: report,
        elapsed_s: (!cli.deterministic).then(|| start.elapsed().as_secs_f64()),
    };
    write_file(&a.out.join("summary.json"), to_json(&summary))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    accuracy: f64,
    num_clips: usize,
    classes: Vec<String>,
    /// `confusion[true][predicted]`
    confusion: Vec<Vec<usize>>,
    person_accuracy: Option<f64>,
    checkpoint_epoch: usize,
}

fn load_for_checkpoint(cli: &Cli, checkpoint: &Path, data: &Path) -> Result<(Trainer, Vec<RawClip>), Failure> {
    warn_model_flags_ignored(cli);
    let mut tr = load_checkpoint(checkpoint)?;
    if let Some(seed) = cli.seed {
        tr.cfg.train.seed = seed;
    }
    let clips = load_clips(data, &tr.manifest)?;
    Ok((tr, clips))
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<(), Failure> {
    let (tr, clips) = load_for_checkpoint(cli, &a.checkpoint, &a.data)?;
    let r = tr.evaluate(&clips)?;
    let out = EvalOutput {
        accuracy: r.accuracy,
        num_clips: r.num_clips,
        classes: tr.manifest.group_classes.clone(),
        confusion: r.confusion,
        person_accuracy: r.person_accuracy,
        checkpoint_epoch: tr.epoch,
    };
    println!("{}", to_json(&out));
    Ok(())
}

fn export_attention(cli: &Cli, a: &ExportArgs) -> Result<(), Failure> {
    let (tr, clips) = load_for_checkpoint(cli, &a.checkpoint, &a.data)?;
    let clip = clips
        .iter()
        .find(|c| c.clip_id == a.clip_id)
        .ok_or_else(|| Error::UnknownClip(a.clip_id.clone()))?;
    let f = ClipFeatures::build(clip, &tr.manifest, &tr.stats);
    let export = tr.model.export_attention(&f, tr.cfg.train.seed)?;
    write_file(&a.out, to_json(&export))?;
    log::info!("wrote {} attention maps to {}", export.maps.len(), a.out.display());
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<(), Failure> {
    let cfg = resolve_config(cli)?;
    let (clips, manifest) = match &a.data {
        Some(path) => load_dataset(path)?,
        None => generate_dataset(&SynthConfig {
            n_clips: a.clips,
            seed: cfg.train.seed,
            ..Default::default()
        })?,
    };
    let clips: Vec<RawClip> = clips.into_iter().take(a.clips).collect();
    let tr = Trainer::new(cfg.clone(), manifest, &clips)?;
    let feats: Vec<ClipFeatures> = clips.iter().map(|c| tr.training_features(c, 0)).collect();
    let r = grad_check(&tr.model, &feats, &cfg, a.coords, a.step, cfg.train.seed);
    if a.json {
        println!("{}", to_json(&r));
    } else {
        println!("step {:e}, {} coordinates checked, {} skipped at ReLU kinks", r.step, r.coords.len(), r.kinks);
        println!("max relative error {:.3e} (tolerance {:.1e})", r.max_rel_err, a.tol);
        println!("worst coordinates:");
        println!("  {:<36} {:>5} {:>5} {:>15} {:>15} {:>10}", "param", "row", "col", "analytic", "numeric", "rel_err");
        for c in r.worst(10) {
            println!(
                "  {:<36} {:>5} {:>5} {:>15.8e} {:>15.8e} {:>10.3e}",
                c.param, c.row, c.col, c.analytic, c.numeric, c.rel_err
            );
        }
    }
    if r.coords.len() < a.coords {
        log::warn!("only {} smooth coordinates found out of {} requested", r.coords.len(), a.coords);
    }
    if !r.passed(a.tol) {
        return Err(Failure::GradCheck {
            max_rel_err: r.max_rel_err,
            tol: a.tol,
        });
    }
    Ok(())
}

fn synth_gen(cli: &Cli, a: &SynthArgs) -> Result<(), Failure> {
    let cfg = SynthConfig {
        n_clips: a.n_clips,
        frames: a.frames,
        persons: a.persons,
        noise_px: a.noise_px,
        seed: cli.seed.unwrap_or(SynthConfig::default().seed),
        width: a.width,
        height: a.height,
        distractor_p: a.distractor_p,
    };
    let (clips, manifest) = generate_dataset(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    save_dataset(&a.out, &clips, &manifest)?;
    log::info!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}
