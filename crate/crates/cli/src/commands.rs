use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pcflow_core::config::Config;
use pcflow_core::data::{load_scene_dir, scene_seed, synth_rigid_scene, write_atomic, Array, ScenePair};
use pcflow_core::metrics::MetricReport;
use pcflow_core::training::{
    ablate as run_ablation, ablation_table, evaluate, predict_scene, prepare_all, standard_variants, train as run_training,
    Checkpoint, PreparedScene,
};
use pcflow_core::{Error, Result};
use serde::Serialize;

/// Seed of the resampling applied to scenes whose size differs from the model.
const RESAMPLE_SEED: u64 = 0;

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_prepared(dir: &Path, cfg: &Config) -> Result<(Vec<PathBuf>, Vec<PreparedScene>)> {
    let loaded = load_scene_dir(dir)?;
    if loaded.is_empty() {
        return Err(Error::InvalidArgument(format!("{} holds no .npz scene files", dir.display())));
    }
    let (paths, pairs): (Vec<PathBuf>, Vec<ScenePair>) = loaded.into_iter().unzip();
    Ok((paths, prepare_all(&pairs, cfg, RESAMPLE_SEED)?))
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest {
    config_fingerprint: String,
    base_seed: u64,
    synth: pcflow_core::config::SynthConfig,
    created_unix: u64,
    scenes: Vec<ManifestEntry>,
}

pub fn synth(out: &Path, scenes: usize, config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    create_dir(out)?;
    let mut entries = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let s = scene_seed(cfg.synth.seed, i as u64);
        let pair = synth_rigid_scene(&pcflow_core::config::SynthConfig {
            seed: s,
            ..cfg.synth.clone()
        })?;
        let file = format!("scene_{i:06}.npz");
        pair.save(&out.join(&file))?;
        entries.push(ManifestEntry { file, seed: s });
    }
    let manifest = Manifest {
        config_fingerprint: cfg.fingerprint(),
        base_seed: cfg.synth.seed,
        synth: cfg.synth.clone(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        scenes: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join("manifest.json"), text.as_bytes())?;
    println!("wrote {scenes} scenes to {}", out.display());
    Ok(())
}

pub fn train(config: Option<&Path>, data: &Path, val: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let (_, train_set) = load_prepared(data, &cfg)?;
    let val_set = match val {
        Some(v) => load_prepared(v, &cfg)?.1,
        None => Vec::new(),
    };
    let resume = resume.map(Checkpoint::load).transpose()?;
    create_dir(out)?;
    let log = out.join("metrics.jsonl");
    let mut io_error = None;
    let result = run_training(&cfg, &train_set, &val_set, resume, &mut |ev| {
        if io_error.is_some() {
            return;
        }
        let mut lines = String::new();
        for r in &ev.checkpoint.history {
            lines.push_str(&serde_json::to_string(r).expect("record serializes"));
            lines.push('\n');
        }
        let written = write_atomic(&log, lines.as_bytes())
            .and_then(|_| ev.checkpoint.save(&out.join("last.ckpt")))
            .and_then(|_| if ev.improved { ev.checkpoint.save(&out.join("best.ckpt")) } else { Ok(()) });
        if let Err(e) = written {
            io_error = Some(e);
        }
        let r = ev.record;
        match r.val_epe3d {
            Some(v) => eprintln!("epoch {} lr {:.2e} loss {:.6} val_epe3d {:.6}", r.epoch, r.lr, r.train_loss, v),
            None => eprintln!("epoch {} lr {:.2e} loss {:.6}", r.epoch, r.lr, r.train_loss),
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    if result.last.history.is_empty() {
        write_atomic(&log, b"")?;
        result.last.save(&out.join("last.ckpt"))?;
        result.last.save(&out.join("best.ckpt"))?;
    }
    println!(
        "trained to epoch {}{}; checkpoints in {}",
        result.last.epoch,
        if result.stopped_early { " (stopped early)" } else { "" },
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Record<'a> {
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    scene: Option<String>,
    #[serde(flatten)]
    report: &'a MetricReport,
}

fn text_block(title: &str, r: &MetricReport) -> String {
    format!("[{title}]\n{}", r.to_text())
}

pub fn eval(ckpt: &Path, data: &Path, per_scene: bool, structured: bool) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.model()?;
    let (paths, scenes) = load_prepared(data, &ck.config)?;
    let ev = evaluate(&model, &scenes)?;
    let name = |p: &PathBuf| p.file_name().map(|n| n.to_string_lossy().into_owned());
    let mut out = String::new();
    if structured {
        let mut push = |kind: &str, scene: Option<String>, r: &MetricReport| {
            out.push_str(&serde_json::to_string(&Record { kind, scene, report: r }).expect("record serializes"));
            out.push('\n');
        };
        push("pooled", None, &ev.pooled);
        push("mean_over_scenes", None, &ev.mean_over_scenes);
        push("baseline_zero_flow", None, &ev.baseline);
        if per_scene {
            for (p, r) in paths.iter().zip(&ev.per_scene) {
                push("scene", name(p), r);
            }
        }
    } else {
        out.push_str(&text_block("pooled", &ev.pooled));
        out.push_str(&text_block("mean_over_scenes", &ev.mean_over_scenes));
        out.push_str(&text_block("baseline_zero_flow", &ev.baseline));
        if per_scene {
            for (p, r) in paths.iter().zip(&ev.per_scene) {
                out.push_str(&text_block(&format!("scene {}", name(p).unwrap_or_default()), r));
            }
        }
    }
    print!("{out}");
    Ok(())
}

pub fn infer(ckpt: &Path, pair_path: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let model = ck.model()?;
    let pair = ScenePair::load(pair_path)?;
    let scene = PreparedScene::new(&pair, &ck.config, RESAMPLE_SEED)?;
    let pred = predict_scene(&model, &scene)?;
    let mut result = pair.clone();
    let gt: Vec<f32> = pair.flow.iter().flatten().copied().collect();
    result.extras.insert("flow_gt", Array::from_f32(vec![pair.flow.len(), 3], &gt));
    result.flow = pred.to_points().iter().map(|p| p.map(|v| v as f32)).collect();
    result.validate()?;
    result.save(out)?;
    println!("wrote {} predicted flow vectors to {}", result.flow.len(), out.display());
    Ok(())
}

pub fn ablate(
    config: Option<&Path>,
    data: &Path,
    test: &Path,
    val: Option<&Path>,
    seeds: &[u64],
    names: &[String],
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let all = standard_variants();
    let variants: Vec<_> = if names.is_empty() {
        all
    } else {
        names
            .iter()
            .map(|n| {
                all.iter().find(|v| &v.name == n).cloned().ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "unknown variant `{n}`; expected one of full, gf_off, str_off, da_off, maxpool"
                    ))
                })
            })
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let (_, train_set) = load_prepared(data, &cfg)?;
    let (_, test_set) = load_prepared(test, &cfg)?;
    let val_set = match val {
        Some(v) => load_prepared(v, &cfg)?.1,
        None => Vec::new(),
    };
    let rows = run_ablation(&cfg, &variants, seeds, &train_set, &val_set, &test_set, &mut |r| {
        eprintln!("{} seed {}: epe3d {:.6}", r.variant, r.seed, r.report.epe3d);
    })?;
    if let Some(path) = out {
        let mut lines = String::new();
        for r in &rows {
            lines.push_str(&serde_json::to_string(r).expect("row serializes"));
            lines.push('\n');
        }
        write_atomic(path, lines.as_bytes())?;
    }
    print!("{}", ablation_table(&rows));
    if let Some(r) = rows.first() {
        println!("zero-flow baseline epe3d {:.6}", r.baseline.epe3d);
    }
    Ok(())
}
