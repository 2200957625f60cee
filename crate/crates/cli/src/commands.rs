//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;

use ndarray::{s, Array2, Array3};
use rand_like::standard_normal;
use serde_json::json;
use terramae::curation::{patch_grid, rank_candidates, scl_entropy, select_temporal_sequence, sequence_cloud_score, Candidate, CloudAggregation};
use terramae::masking::MaskScheme;
use terramae::model::{grad_check, unpatchify, MaeModel, ModelConfig, SampleView, SourceInput, SourceSpec};
use terramae::synth::{catalog_revisits, load_regions, synth_dataset, SynthConfig, SCL_CLASSES, SCL_CLOUD_LABELS};
use terramae::tokenizer::{compute_band_stats, DEFAULT_EPSILON};
use terramae::trainer::{train, Checkpoint, RunOptions, TrainConfig, TrainData};
use terramae::{Error, TensorData, Timestamp, NUM_PATCHES, PATCH_SIZE};

use crate::ppm;
use crate::{CurateArgs, GradcheckArgs, MaskDemoArgs, PretrainArgs, ReconstructArgs, StatsArgs, SynthArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Data(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::UnknownProfile(_) | Error::UnknownSource(_) | Error::UncoveredSource(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Deterministic standard-normal draws without pulling `rand` into the CLI:
/// the core crate's keyed streams feed a Box-Muller transform.
mod rand_like {
    use terramae::rng::derive_key;

    pub fn standard_normal(seed: u64, n: usize) -> Vec<f32> {
        let uniform = |i: u64| (derive_key(terramae::key![seed, "cli-normal", i]) >> 11) as f64 / (1u64 << 53) as f64;
        (0..n)
            .map(|i| {
                let u1 = uniform(2 * i as u64).max(f64::MIN_POSITIVE);
                let u2 = uniform(2 * i as u64 + 1);
                ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
            })
            .collect()
    }
}

fn parse_revisits(spec: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("--revisits expects MIN:MAX, got {spec:?}"));
    let (a, b) = spec.split_once(':').ok_or_else(bad)?;
    let lo: usize = a.trim().parse().map_err(|_| bad())?;
    let hi: usize = b.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn synth(a: &SynthArgs) -> CliResult {
    let names: Vec<&str> = a.profile.iter().map(String::as_str).collect();
    let mut cfg = SynthConfig::new(a.seed, &names)?;
    if let Some(spec) = &a.revisits {
        let (lo, hi) = parse_revisits(spec)?;
        for name in &names {
            let cap = catalog_revisits(name).map_or(hi, |(_, c)| c);
            let hi = hi.min(cap);
            cfg = cfg.with_revisits(name, lo.min(hi), hi)?;
        }
    }
    let paths = synth_dataset(&cfg, a.regions as usize, &a.out, a.shard_size as usize)?;
    let files: Vec<String> = paths.iter().map(|p| p.display().to_string()).collect();
    println!("{}", json!({ "regions": a.regions, "shards": paths.len(), "files": files }));
    Ok(())
}

pub fn stats(a: &StatsArgs) -> CliResult {
    let regions = load_regions(&a.data)?;
    if regions.is_empty() {
        return Err(CliError::Data(format!("no regions in {}", a.data.display())));
    }
    let mut names: Vec<String> = regions.iter().flat_map(|r| r.sources.keys().cloned()).collect();
    names.sort();
    names.dedup();
    let mut sources = serde_json::Map::new();
    for name in names {
        let tensors: Vec<_> = regions.iter().filter_map(|r| r.sources.get(&name)).collect();
        let st = compute_band_stats(tensors.iter().copied(), DEFAULT_EPSILON)?;
        let timesteps: usize = tensors.iter().map(|t| t.timesteps()).sum();
        sources.insert(
            name,
            json!({ "regions": tensors.len(), "timesteps": timesteps, "bands": st.bands(), "mean": st.mean, "std": st.std }),
        );
    }
    println!("{}", json!({ "regions": regions.len(), "sources": sources }));
    Ok(())
}

pub fn curate(a: &CurateArgs) -> CliResult {
    const SCL_SOURCE: &str = "sentinel2-scl";
    let regions = load_regions(&a.input)?;
    let window = a.window as usize;
    let mut seen = 0;
    for region in &regions {
        let Some(src) = region.sources.get(SCL_SOURCE) else { continue };
        let TensorData::U16(data) = &src.data else {
            return Err(CliError::Data(format!("{SCL_SOURCE} of {} is not u16", region.region_id)));
        };
        seen += 1;
        let [t, c, h, w] = src.data.shape();
        let labels = data.slice(s![.., c - 1, .., ..]);
        let mut candidates = Vec::new();
        for (oy, ox) in patch_grid(h, w, window) {
            let mut fractions = Vec::with_capacity(t);
            let mut entropies = Vec::with_capacity(t);
            for k in 0..t {
                let win = labels.slice(s![k, oy..oy + window, ox..ox + window]);
                let cloudy = win.iter().filter(|l| SCL_CLOUD_LABELS.contains(l)).count();
                fractions.push(cloudy as f64 / win.len() as f64);
                entropies.push(scl_entropy(win, SCL_CLASSES)?);
            }
            let clearest = (0..t).min_by(|&x, &y| fractions[x].total_cmp(&fractions[y])).unwrap_or(0);
            candidates.push(Candidate {
                offset: (oy, ox),
                cloud_fraction: sequence_cloud_score(&fractions, CloudAggregation::Mean)?,
                scl_entropy: entropies[clearest],
            });
        }
        let kept = rank_candidates(&candidates, a.top_k as usize, a.cloud_max);
        let sequence = select_temporal_sequence(&src.timestamps)?;
        let dates: Vec<[u16; 4]> = sequence.dates.iter().map(Timestamp::to_array).collect();
        println!(
            "{}",
            json!({
                "region_id": region.region_id,
                "candidates": candidates.len(),
                "selected": kept,
                "dates": dates,
                "dense_count": sequence.dense_count,
                "seasonal_count": sequence.seasonal_count,
            })
        );
    }
    if seen == 0 {
        return Err(CliError::Data(format!("no region in {} has a {SCL_SOURCE} source", a.input.display())));
    }
    Ok(())
}

pub fn mask_demo(a: &MaskDemoArgs) -> CliResult {
    let scheme = MaskScheme::from_name(a.scheme.name(), a.ratio)?;
    let (t, s_, p) = (a.t as usize, a.s as usize, a.p as usize);
    let mask = scheme.generate(t, s_, p, a.seed)?;
    let counts: Vec<usize> = (0..t).flat_map(|ti| (0..s_).map(move |si| (ti, si))).map(|(ti, si)| mask.slice_masked_count(ti, si)).collect();
    let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
    if lo == hi {
        println!("masked per slice: {lo}");
    } else {
        println!("masked per slice: {lo}..{hi}");
    }
    println!("masked total: {} of {}", mask.masked_count(), mask.len());
    let side = (p as f64).sqrt().round() as usize;
    if side * side == p {
        print!("{}", mask.render_slice(0, 0, side));
    }
    Ok(())
}

fn parse_tasks(spec: &str) -> Result<Vec<Vec<String>>, CliError> {
    let tasks: Vec<Vec<String>> = spec
        .split(';')
        .map(|t| t.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect::<Vec<_>>())
        .collect();
    if tasks.iter().any(Vec::is_empty) {
        return Err(CliError::Usage(format!("--tasks has an empty task in {spec:?}")));
    }
    Ok(tasks)
}

pub fn pretrain(a: &PretrainArgs) -> CliResult {
    let mask = MaskScheme::from_name(a.mask.name(), a.ratio)?;
    let config = TrainConfig {
        effective_batch: a.batch as usize,
        base_lr: a.blr,
        epochs: a.epochs as usize,
        warmup_epochs: a.warmup as usize,
        total_steps: a.steps.map(|v| v as usize),
        mask,
        seed: a.seed,
        workers: a.workers as usize,
        tasks: a.tasks.as_deref().map(parse_tasks).transpose()?,
        timestep_dropout: a.timestep_dropout,
        max_timesteps: a.max_timesteps.map(|v| v as usize),
        ..TrainConfig::default()
    };
    config.validate()?;
    eprintln!("{}", json!({ "command": "pretrain", "config": config, "args": a }));
    let regions = load_regions(&a.data)?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let data = TrainData::from_regions(&regions, resume.as_ref().map(|c| &c.stats))?;
    drop(regions);
    let opts = RunOptions { stop_at: a.stop_at, out_dir: Some(a.out.clone()) };
    let outcome = train(&config, &data, resume, &opts)?;
    for w in &outcome.wraps {
        eprintln!("{}", json!({ "event": "wrap", "step": w.step, "task_id": w.task_id, "epoch": w.epoch }));
    }
    let losses: Vec<f64> = outcome.metrics.iter().map(|m| m.loss).collect();
    println!(
        "{}",
        json!({
            "steps_run": losses.len(),
            "step": outcome.checkpoint.step,
            "first_loss": losses.first(),
            "last_loss": losses.last(),
            "checkpoint": a.out.join("checkpoint.emck").display().to_string(),
            "metrics": a.out.join("metrics.jsonl").display().to_string(),
        })
    );
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    let sources = vec![SourceSpec::new("sentinel1", 2), SourceSpec::new("neon-elev", 1)];
    let model = MaeModel::new(ModelConfig::tiny(), sources.clone())?;
    let params: Vec<f64> = model.init_params(a.seed);
    let t = 2;
    let timestamps = vec![Timestamp::with_hour(2019, 3, 14, 10), Timestamp::date(2020, 8, 1)];
    let patches: Vec<Array3<f32>> = sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let v = standard_normal(a.seed.wrapping_add(i as u64), t * NUM_PATCHES * s.patch_dim());
            Array3::from_shape_vec((t, NUM_PATCHES, s.patch_dim()), v).expect("sized above")
        })
        .collect();
    let sample = SampleView {
        timestamps: &timestamps,
        sources: patches.iter().enumerate().map(|(i, p)| SourceInput { source: i, patches: p.view() }).collect(),
    };
    let mask = MaskScheme::COMBINED_DEFAULT.generate(t, sources.len(), NUM_PATCHES, a.seed)?;
    let report = grad_check(&model, &params, &sample, &mask, a.eps, a.n as usize, a.seed)?;
    let pass = report.max_rel_error < a.tolerance;
    println!(
        "{}",
        json!({
            "max_rel_error": report.max_rel_error,
            "checked": report.checked,
            "worst_param": report.worst_param,
            "worst_analytic": report.worst_analytic,
            "worst_numeric": report.worst_numeric,
            "tolerance": a.tolerance,
            "pass": pass,
        })
    );
    if pass {
        Ok(())
    } else {
        Err(CliError::Data(format!(
            "gradient check failed: max relative error {:.3e} >= {:.1e}",
            report.max_rel_error, a.tolerance
        )))
    }
}

/// Undo per-patch normalization of predictions using the statistics of the
/// original patch rows.
fn denormalize(pred: &mut Array2<f32>, original: ndarray::ArrayView2<'_, f32>) {
    for (mut row, orig) in pred.rows_mut().into_iter().zip(original.rows()) {
        let n = orig.len() as f64;
        let mean = orig.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = orig.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v as f64 * std + mean) as f32);
    }
}

pub fn reconstruct(a: &ReconstructArgs) -> CliResult {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = ckpt.model()?;
    let regions = load_regions(&a.data)?;
    let data = TrainData::from_regions(&regions, Some(&ckpt.stats))?;
    let r = a.region as usize;
    if r >= data.regions.len() {
        return Err(CliError::Usage(format!("--region {r} but the dataset has {} regions", data.regions.len())));
    }
    // the data may register sources in a different order than the checkpoint
    let mut ids = Vec::new();
    let mut model_ids = Vec::new();
    for (&di, _) in &data.regions[r].sources {
        if let Ok(mi) = model.source_index(&data.sources[di].name) {
            ids.push(di);
            model_ids.push(mi);
        }
    }
    if ids.is_empty() {
        return Err(CliError::Data("region has no source known to the checkpoint".into()));
    }
    let t = data.sample_timesteps(r, &ids, ckpt.meta.train.max_timesteps);
    let timestamps = data.regions[r].sources[&ids[0]].timestamps[..t].to_vec();
    let sample = SampleView {
        timestamps: &timestamps,
        sources: ids
            .iter()
            .zip(&model_ids)
            .map(|(&di, &mi)| SourceInput { source: mi, patches: data.regions[r].sources[&di].patches.slice(s![..t, .., ..]) })
            .collect(),
    };
    let mask = ckpt.meta.train.mask.generate(t, ids.len(), NUM_PATCHES, a.seed)?;
    let recon = model.reconstruct(&ckpt.params, &sample, &mask)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    let mut written = Vec::new();
    for (si, (input, pred)) in sample.sources.iter().zip(&recon).enumerate() {
        let spec = &model.sources()[input.source];
        for ti in 0..t {
            let orig = input.patches.slice(s![ti, .., ..]);
            let mut full = pred.slice(s![ti, .., ..]).to_owned();
            if model.config().norm_pix {
                denormalize(&mut full, orig);
            }
            let mut masked = orig.to_owned();
            let mut pasted = orig.to_owned();
            for pi in 0..NUM_PATCHES {
                if mask.get(ti, si, pi) {
                    masked.row_mut(pi).fill(0.0);
                    pasted.row_mut(pi).assign(&full.row(pi));
                }
            }
            let panels = [orig.to_owned(), masked, pasted]
                .iter()
                .map(|p| unpatchify(p.view(), spec.bands).map(|img| ppm::rgb(img.view())))
                .collect::<Result<Vec<_>, _>>()?;
            let side = (NUM_PATCHES as f64).sqrt() as usize * PATCH_SIZE;
            let name = format!("{}_{}_t{ti}.ppm", data.regions[r].region_id, spec.name);
            let path = a.out.join(name);
            ppm::write_panels(&path, &panels, side, side).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            written.push(path.display().to_string());
        }
    }
    let per_source: BTreeMap<String, usize> = sample
        .sources
        .iter()
        .enumerate()
        .map(|(si, x)| (model.sources()[x.source].name.clone(), (0..t).map(|ti| mask.slice_masked_count(ti, si)).sum()))
        .collect();
    println!("{}", json!({ "files": written, "masked": per_source, "step": ckpt.step }));
    Ok(())
}
