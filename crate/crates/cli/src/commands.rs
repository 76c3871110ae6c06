use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use dsa_core::decoder::{svi_train, ModelBank, TrainConfig};
use dsa_core::detection::{read_jsonl, write_jsonl, Detection};
use dsa_core::detsim::shift_profile;
use dsa_core::dsa::{greedy_select, write_decisions, CacheMode, DsaConfig};
use dsa_core::eval::{
    format_table, read_reports_csv, run_experiment, simulate_set, write_reports_csv, write_scene_results,
    ExperimentConfig, Method,
};
use dsa_core::nms::{threshold_select, NmsConfig, SoftMethod};
use dsa_core::recon::ReconConfig;
use dsa_core::scenegen::{
    gen_decoder_dataset, gen_eval_sets, gen_pairs_dataset, perturb_enlarge, perturb_rotate, read_dataset,
    read_decoder_dataset, write_dataset, write_decoder_dataset, EvalSizes, Scene, SceneConfig, NUM_CLASSES,
};

use crate::{Cli, Cmd, DsaArgs, ExperimentArgs, GenDataArgs, PostprocessArgs, ReportArgs, SimulateArgs, TrainArgs};

pub fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs as usize)
        .build_global()
        .context("starting worker threads")?;
    let (seed, jobs) = (cli.seed, cli.jobs as usize);
    match cli.command {
        Cmd::GenData(a) => gen_data(a, seed),
        Cmd::TrainDecoder(a) => train_decoder(a, seed, jobs),
        Cmd::Simulate(a) => simulate(a, seed),
        Cmd::Postprocess(a) => postprocess(a, seed),
        Cmd::Experiment(a) => experiment(a, seed, jobs),
        Cmd::Report(a) => report(a),
    }
}

fn gen_data(a: GenDataArgs, seed: u64) -> Result<()> {
    if !(a.scale > 0.0) {
        bail!("--scale must be positive, got {}", a.scale);
    }
    let cfg = SceneConfig::default();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let pairs = gen_pairs_dataset(seed, a.pairs_per_class, &cfg).context("generating pair scenes")?;
    let decoder = gen_decoder_dataset(&pairs, cfg.decoder_side)?;
    if !a.no_pairs {
        write_dataset(&a.out.join("pairs"), &pairs)?;
    }
    write_decoder_dataset(&a.out.join("decoder"), &decoder)?;
    let sizes = EvalSizes::scaled(a.scale);
    let (validation, test) = gen_eval_sets(seed, &sizes, &cfg).context("generating evaluation scenes")?;
    write_dataset(&a.out.join("validation"), &validation)?;
    write_dataset(&a.out.join("test"), &test)?;
    let manifest = serde_json::json!({
        "seed": seed,
        "scale": a.scale,
        "pairs_per_class": a.pairs_per_class,
        "pairs": pairs.len(),
        "decoder_images_per_class": decoder.values().map(Vec::len).collect::<Vec<_>>(),
        "validation": validation.len(),
        "test": test.len(),
    });
    fs::write(a.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!(
        "wrote {} pair scenes, {} validation and {} test scenes to {}",
        pairs.len(),
        validation.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn train_decoder(a: TrainArgs, seed: u64, jobs: usize) -> Result<()> {
    if !(a.train_fraction > 0.0 && a.train_fraction <= 1.0) {
        bail!("--train-fraction must lie in (0, 1], got {}", a.train_fraction);
    }
    let dir = a.data.join("decoder");
    if !dir.is_dir() {
        bail!(
            "no decoder dataset at {}; run `dsa gen-data --out {}` first",
            dir.display(),
            a.data.display()
        );
    }
    let data = read_decoder_dataset(&dir)?;
    let cfg = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch_size,
        lr_decoder: a.lr_decoder,
        lr_latent: a.lr_latent,
        latent_dim: a.latent_dim,
        hidden_width: a.hidden,
        seed,
        jobs,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    for (&cls, images) in &data {
        if !a.classes.is_empty() && !a.classes.contains(&cls) {
            continue;
        }
        let n = ((images.len() as f64 * a.train_fraction).round() as usize).max(1);
        let (model, rep) = svi_train(cls, &images[..n], &cfg).with_context(|| format!("training class {cls}"))?;
        model.save(&ModelBank::model_path(&a.out, cls))?;
        let mut csv = String::from("epoch,mean_loss\n");
        csv.push_str(&format!("0,{}\n", rep.initial_mean_loss));
        for (i, l) in rep.epoch_mean_loss.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        fs::write(a.out.join(format!("loss_class_{cls:02}.csv")), csv)?;
        println!(
            "class {cls}: {n} images, mean loss {:.1} -> {:.1}",
            rep.initial_mean_loss,
            rep.epoch_mean_loss.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Scene>> {
    if split != "validation" && split != "test" {
        bail!("--split must be validation or test, got {split:?}");
    }
    let dir = data.join(split);
    if !dir.is_dir() {
        bail!("no {split} set at {}; run `dsa gen-data --out {}` first", dir.display(), data.display());
    }
    Ok(read_dataset(&dir)?)
}

fn scene_file(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("{id:05}.jsonl"))
}

fn simulate(a: SimulateArgs, seed: u64) -> Result<()> {
    let mut scenes = load_split(&a.data, &a.split)?;
    if let Some(deg) = a.rotate {
        scenes = perturb_rotate(&scenes, deg)?;
    }
    if let Some(crop) = a.enlarge {
        scenes = perturb_enlarge(&scenes, crop)?;
    }
    let mut profile = shift_profile(&a.profile)?;
    profile.seed = seed;
    let dets = simulate_set(&scenes, &profile, a.split == "test")?;
    write_dataset(&a.out.join("scenes"), &scenes)?;
    let det_dir = a.out.join("detections");
    fs::create_dir_all(&det_dir)?;
    for (s, d) in scenes.iter().zip(&dets) {
        let mut w = BufWriter::new(File::create(scene_file(&det_dir, s.id))?);
        write_jsonl(d, &mut w)?;
        w.flush()?;
    }
    println!("simulated {} scenes ({} profile) into {}", scenes.len(), a.profile, a.out.display());
    Ok(())
}

fn parse_pairs(raw: &[String]) -> Result<Vec<(u32, u32)>> {
    raw.iter()
        .map(|p| {
            let (s, t) = p
                .split_once(':')
                .with_context(|| format!("competition pair {p:?} is not source:target"))?;
            Ok((s.trim().parse()?, t.trim().parse()?))
        })
        .collect()
}

fn dsa_config(a: &DsaArgs, seed: u64) -> Result<DsaConfig> {
    let cfg = DsaConfig {
        lambda: a.lambda,
        sigma: a.sigma,
        min_objectness: a.min_objectness,
        competition_pairs: parse_pairs(&a.competition)?,
        cache_mode: a.cache_mode.parse::<CacheMode>()?,
        recon: ReconConfig {
            n_iter: a.n_iter,
            sigma: a.sigma,
            t0: a.t0,
            lr_latent: a.lr_recon,
            enable_rotation: a.rotation,
            seed,
            ..ReconConfig::default()
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_models(dir: &Path) -> Result<ModelBank> {
    let bank = ModelBank::load_dir(dir).with_context(|| {
        format!(
            "loading decoders from {}; run `dsa train-decoder --data DIR --out {}` first",
            dir.display(),
            dir.display()
        )
    })?;
    let missing: Vec<u32> = (1..=NUM_CLASSES).filter(|&c| bank.get(c).is_err()).collect();
    if !missing.is_empty() {
        bail!(
            "no decoder models for classes {missing:?} in {}; run `dsa train-decoder --data DIR --out {}` first",
            dir.display(),
            dir.display()
        );
    }
    Ok(bank)
}

fn postprocess(a: PostprocessArgs, seed: u64) -> Result<()> {
    let method = a.method;
    let nms = NmsConfig {
        nt: a.nt,
        soft_method: a.soft_method.parse::<SoftMethod>()?,
        soft_sigma: a.soft_sigma,
        per_class: false,
    };
    nms.validate()?;
    let dsa = if method.is_dsa() {
        let dir = a.models.as_ref().context("--models is required for DSA methods")?;
        Some((load_models(dir)?, dsa_config(&a.dsa, seed)?))
    } else {
        None
    };
    let scenes_dir = a.input.join("scenes");
    if !scenes_dir.is_dir() {
        bail!("no simulated scenes at {}; run `dsa simulate --out {}` first", scenes_dir.display(), a.input.display());
    }
    let scenes = read_dataset(&scenes_dir)?;
    let det_dir = a.input.join("detections");
    let sel_dir = a.out.join("selected");
    let log_dir = a.out.join("decisions");
    fs::create_dir_all(&sel_dir)?;
    if dsa.is_some() {
        fs::create_dir_all(&log_dir)?;
    }
    scenes.par_iter().try_for_each(|s| -> Result<()> {
        let path = scene_file(&det_dir, s.id);
        let dets: Vec<Detection> =
            read_jsonl(BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?))?;
        let suppressed = method.suppress(&dets, &nms, a.nt);
        let selected = match &dsa {
            Some((models, cfg)) => {
                let out = greedy_select(&s.image, &suppressed, models, cfg)?;
                let mut w = BufWriter::new(File::create(scene_file(&log_dir, s.id))?);
                write_decisions(&out.decisions, &mut w)?;
                w.flush()?;
                out.detections()
            }
            None => match a.threshold {
                Some(t) => threshold_select(&suppressed, t),
                None => suppressed,
            },
        };
        let mut w = BufWriter::new(File::create(scene_file(&sel_dir, s.id))?);
        write_jsonl(&selected, &mut w)?;
        w.flush()?;
        Ok(())
    })?;
    println!("{} on {} scenes into {}", method.name(), scenes.len(), a.out.display());
    Ok(())
}

fn experiment(a: ExperimentArgs, seed: u64, jobs: usize) -> Result<()> {
    let scenario = a.scenario;
    let methods = if a.methods.is_empty() { Method::ALL.to_vec() } else { a.methods.clone() };
    let models = load_models(&a.models)?;
    let (validation, test) = match &a.data {
        Some(d) => (load_split(d, "validation")?, load_split(d, "test")?),
        None => {
            if !(a.scale > 0.0) {
                bail!("--scale must be positive, got {}", a.scale);
            }
            gen_eval_sets(seed, &EvalSizes::scaled(a.scale), &SceneConfig::default())?
        }
    };
    let cfg = ExperimentConfig {
        scenario,
        seed,
        methods,
        dsa: dsa_config(&a.dsa, seed)?,
        lambda_grid: a.lambdas.clone(),
        fixed_threshold: a.fixed_threshold,
        jobs,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&validation, &test, &models, &cfg).context("running experiment")?;
    fs::create_dir_all(&a.out)?;
    write_reports_csv(&a.out.join("reports.csv"), &out.reports)?;
    let mut w = BufWriter::new(File::create(a.out.join("scenes.jsonl"))?);
    write_scene_results(&out.test_results, &mut w)?;
    w.flush()?;
    let mut tuning = String::from("method,param,acc_boxes,acc_labels\n");
    for t in &out.tuning {
        tuning.push_str(&format!("{},{},{},{}\n", t.method, t.point.param, t.point.acc_boxes, t.point.acc_labels));
    }
    fs::write(a.out.join("tuning.csv"), tuning)?;
    println!("scenario {} (validation {}, test {})", scenario.name(), validation.len(), test.len());
    print!("{}", format_table(&out.reports));
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let path = if a.input.is_dir() { a.input.join("reports.csv") } else { a.input };
    let reports = read_reports_csv(&path)?;
    print!("{}", format_table(&reports));
    Ok(())
}
