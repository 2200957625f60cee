//! End-to-end acceptance criteria. Each test prints one `PASS` or `FAIL`
//! line straight to stderr (bypassing the test harness capture) and then
//! asserts the criterion.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use common::OwnedSample;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use terramae::curation::{patch_grid, rank_candidates, scl_entropy, Candidate};
use terramae::encoding::{
    compose_encoding, embed_source, embed_time, positional_grid, time_index, timestep_dropout, TimeEmbeddingTables,
    DAY_VOCAB, HOUR_VOCAB, MONTH_VOCAB, SOURCE_DIM, TIME_COMPONENT_DIM, YEAR_VOCAB,
};
use terramae::masking::{combined_mask, random_mask, tube_mask, MaskScheme};
use terramae::model::gradcheck::check_gradient;
use terramae::model::{grad_check, masked_mse, masked_mse_grad, patch_targets, MaeModel, ModelConfig, SourceSpec};
use terramae::region::Bounds;
use terramae::rng::{derive_key, keyed_rng};
use terramae::shard::{decode_shard, encode_shard};
use terramae::synth::{region_id, synth_region, SynthConfig};
use terramae::trainer::{lr_at, train, Checkpoint, RunOptions, TrainConfig, TrainData};
use terramae::{key, Dtype, Region, SourceProfile, SourceTensor, TensorData, Timestamp, NUM_PATCHES};

fn report(n: usize, name: &str, ok: bool, detail: &str, start: Instant) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let line = format!("{verdict} criterion {n:>2} {name}: {detail} ({:.1?})\n", start.elapsed());
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_01_encoding_law() {
    let start = Instant::now();
    let pos: Array2<f64> = positional_grid(128, 14).unwrap();
    let mut rng = keyed_rng(key![1u64, "acceptance-encoding"]);
    let tables = TimeEmbeddingTables::<f64>::random(&mut rng);
    let source_table = Array2::from_shape_simple_fn((2, SOURCE_DIM), || rng.sample::<f64, _>(StandardNormal));
    let stamps = [Timestamp::with_hour(2018, 2, 3, 4), Timestamp::date(2020, 12, 31), Timestamp::UNKNOWN];
    let src = embed_source(&[0, 1], source_table.view()).unwrap();
    let time = embed_time(&stamps, tables.view());
    let enc = compose_encoding(pos.view(), src.view(), time.view()).unwrap();

    let mut mismatches = 0;
    for ti in 0..3 {
        for si in 0..2 {
            for pi in 0..NUM_PATCHES {
                let mut expected: Vec<f64> = pos.row(pi).to_vec();
                expected.extend(source_table.row(si).iter());
                let idx = time_index(&stamps[ti]).as_array();
                for (k, table) in [&tables.year, &tables.month, &tables.day, &tables.hour].into_iter().enumerate() {
                    expected.extend(table.row(idx[k]).iter());
                }
                let got: Vec<f64> = enc.slice(ndarray::s![ti, si, pi, ..]).to_vec();
                if got != expected {
                    mismatches += 1;
                }
            }
        }
    }
    let width = enc.dim().3;
    let ok = enc.dim() == (3, 2, NUM_PATCHES, 256) && width == 128 + SOURCE_DIM + 64 && mismatches == 0;
    report(1, "encoding law", ok, &format!("width {width}, {mismatches} mismatching slices of {}", 3 * 2 * NUM_PATCHES), start);
}

#[test]
fn criterion_02_time_vocabularies() {
    let start = Instant::now();
    let table = |n| Array2::<f64>::zeros((n, TIME_COMPONENT_DIM));
    let exact = TimeEmbeddingTables::from_tables(table(7), table(13), table(32), table(25)).is_ok();
    let mut rejected = 0;
    for k in 0..4 {
        for delta in [-1i64, 1] {
            let mut sizes = [YEAR_VOCAB, MONTH_VOCAB, DAY_VOCAB, HOUR_VOCAB];
            sizes[k] = (sizes[k] as i64 + delta) as usize;
            if TimeEmbeddingTables::from_tables(table(sizes[0]), table(sizes[1]), table(sizes[2]), table(sizes[3])).is_err() {
                rejected += 1;
            }
        }
    }
    let unknown_index = time_index(&Timestamp::UNKNOWN).as_array() == [0, 0, 0, 0];

    // dropout path: every timestamp replaced by the unknown one
    let mut rng = keyed_rng(key![2u64, "acceptance-vocab"]);
    let tables = TimeEmbeddingTables::<f32>::random(&mut rng);
    let stamps = [Timestamp::with_hour(2019, 5, 6, 7), Timestamp::date(2021, 1, 2)];
    let (dropped, fired) = timestep_dropout(&stamps, 1.0, &mut rng).unwrap();
    let via_dropout = embed_time(&dropped, tables.view());
    let all_unknown = embed_time(&[Timestamp::UNKNOWN; 2], tables.view());
    let mut row0: Vec<f32> = Vec::new();
    for t in [&tables.year, &tables.month, &tables.day, &tables.hour] {
        row0.extend(t.row(0).iter());
    }
    let bitwise = via_dropout.as_slice().unwrap().iter().map(|v| v.to_bits()).eq(all_unknown.as_slice().unwrap().iter().map(|v| v.to_bits()))
        && all_unknown.rows().into_iter().all(|r| r.to_vec() == row0);

    let ok = exact && rejected == 8 && unknown_index && fired && bitwise;
    report(
        2,
        "time-embedding vocabularies",
        ok,
        &format!("7/13/32/25 accepted {exact}, {rejected}/8 off-by-one sizes rejected, unknown index 0 {unknown_index}, dropout path bitwise {bitwise}"),
        start,
    );
}

#[test]
fn criterion_03_mask_exactness() {
    let start = Instant::now();
    let (t, s, p) = (2, 2, NUM_PATCHES);
    let mut failures = Vec::new();
    for i in 0..=1000usize {
        let ratio = i as f64 / 1000.0;
        for seed in 0..100u64 {
            let r = random_mask(t, s, p, ratio, seed).unwrap();
            if r.masked_count() != i * t * s * p / 1000 {
                failures.push(format!("random ratio {ratio} seed {seed}: {}", r.masked_count()));
            }
            let tm = tube_mask(t, s, p, ratio, seed).unwrap();
            let first = tm.slice(0, 0).to_vec();
            let per_slice = i * p / 1000;
            let identical = (0..t).all(|ti| (0..s).all(|si| tm.slice(ti, si) == first.as_slice()));
            if !identical || first.iter().filter(|&&b| b).count() != per_slice {
                failures.push(format!("tube ratio {ratio} seed {seed}"));
            }
        }
    }
    let mut combined_counts = Vec::new();
    for seed in 0..100u64 {
        let m = combined_mask(3, 2, 196, 0.75, 0.25, seed).unwrap();
        for ti in 0..3 {
            for si in 0..2 {
                combined_counts.push(m.slice_masked_count(ti, si));
            }
        }
    }
    let combined_ok = combined_counts.iter().all(|&c| c == 147 + 12);
    let ok = failures.is_empty() && combined_ok;
    let detail = format!(
        "{} failing (ratio, seed) cases of 100100, combined per-slice counts {:?}{}",
        failures.len(),
        combined_counts.iter().min().zip(combined_counts.iter().max()),
        failures.first().map(|f| format!(", first failure {f}")).unwrap_or_default()
    );
    report(3, "mask exactness", ok, &detail, start);
}

#[test]
fn criterion_04_loss_locality_and_normalization() {
    let start = Instant::now();
    let mut rng = keyed_rng(key![4u64, "acceptance-loss"]);
    let mut nonzero_changes = 0;
    for trial in 0..200u64 {
        let rows = 32;
        let cols = 48;
        let pred = Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal));
        let target = Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal));
        let mut masked: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.5)).collect();
        masked[trial as usize % rows] = true;
        let base = masked_mse(pred.view(), target.view(), &masked).unwrap();
        let mut perturbed = pred.clone();
        for (r, &m) in masked.iter().enumerate() {
            if !m {
                perturbed.row_mut(r).mapv_inplace(|v| v + rng.gen_range(-100.0..100.0));
            }
        }
        let after = masked_mse(perturbed.view(), target.view(), &masked).unwrap();
        if after.to_bits() != base.to_bits() {
            nonzero_changes += 1;
        }
    }

    // normalized targets of real synthetic patches and of random rows
    let cfg = SynthConfig::new(4, &["sentinel2", "sentinel1", "satellogic"]).unwrap().with_revisits("sentinel2", 1, 1).unwrap();
    let regions: Vec<Region> = (0..2).map(|i| synth_region(&cfg, &region_id(i)).unwrap()).collect();
    let data = TrainData::from_regions(&regions, None).unwrap();
    let mut blocks: Vec<Array2<f32>> = Vec::new();
    for reg in &data.regions {
        for sp in reg.sources.values() {
            blocks.push(sp.patches.slice(ndarray::s![0, .., ..]).to_owned());
        }
    }
    blocks.push(Array2::from_shape_simple_fn((64, 256), || rng.gen_range(-3.0f32..3.0) * rng.gen_range(0.0f32..2.0)));
    let (mut checked, mut worst_mean, mut worst_var) = (0usize, 0.0f64, 0.0f64);
    for block in &blocks {
        let targets: Array2<f64> = patch_targets(block.view(), true);
        for (raw, norm) in block.rows().into_iter().zip(targets.rows()) {
            let n = raw.len() as f64;
            let m = raw.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = raw.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
            if var < 1e-3 {
                continue;
            }
            checked += 1;
            let nm = norm.sum() / n;
            let nv = norm.iter().map(|v| (v - nm).powi(2)).sum::<f64>() / n;
            worst_mean = worst_mean.max(nm.abs());
            worst_var = worst_var.max((nv - 1.0).abs());
        }
    }
    let ok = nonzero_changes == 0 && checked > 1000 && worst_mean < 1e-6 && worst_var < 1e-3;
    report(
        4,
        "loss locality and normalization",
        ok,
        &format!("{nonzero_changes}/200 perturbations changed the loss; {checked} patches, max |mean| {worst_mean:.2e}, max |var-1| {worst_var:.2e}"),
        start,
    );
}

#[test]
fn criterion_05_gradient_correctness() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;

    let tiny = ModelConfig::tiny();
    let cases: Vec<(&str, ModelConfig, Vec<usize>, usize, MaskScheme, bool)> = vec![
        ("tiny, two sources, combined mask", tiny.clone(), vec![1, 2], 2, MaskScheme::COMBINED_DEFAULT, false),
        ("tiny, one source, tube mask, unknown timestamps", tiny.clone(), vec![3], 3, MaskScheme::Tube { ratio: 0.75 }, true),
        ("tiny, raw-pixel targets, random mask", ModelConfig { norm_pix: false, ..tiny.clone() }, vec![2], 2, MaskScheme::Random { ratio: 0.9 }, false),
        ("no blocks", ModelConfig { encoder_depth: 0, decoder_depth: 0, ..tiny.clone() }, vec![1], 1, MaskScheme::Random { ratio: 0.75 }, false),
        ("two blocks each, four heads", ModelConfig { encoder_depth: 2, decoder_depth: 2, heads: 4, ..tiny.clone() }, vec![1], 1, MaskScheme::Tube { ratio: 0.5 }, false),
    ];
    for (i, (name, cfg, bands, t, scheme, unknown)) in cases.into_iter().enumerate() {
        let specs: Vec<SourceSpec> = bands.iter().enumerate().map(|(k, &b)| SourceSpec::new(format!("s{k}"), b)).collect();
        let model = MaeModel::new(cfg, specs).unwrap();
        let params: Vec<f64> = model.init_params(10 + i as u64);
        let ids: Vec<(usize, usize)> = bands.iter().copied().enumerate().collect();
        let mut sample = OwnedSample::random(t, &ids, 20 + i as u64);
        if unknown {
            sample.timestamps = vec![Timestamp::UNKNOWN; t];
        }
        let mask = scheme.generate(t, bands.len(), NUM_PATCHES, 30 + i as u64).unwrap();
        let r = grad_check(&model, &params, &sample.view(), &mask, 1e-4, 200, i as u64).unwrap();
        let case_ok = r.max_rel_error < 1e-4 && r.checked >= 200;
        ok &= case_ok;
        lines.push(format!("{name}: {:.2e} over {}", r.max_rel_error, r.checked));
    }

    // a genuinely linear patch model: pred = X W, loss = masked MSE
    let mut rng = keyed_rng(key![5u64, "acceptance-linear"]);
    let (rows, din, dout) = (40, 12, 9);
    let x = Array2::from_shape_simple_fn((rows, din), || rng.sample::<f64, _>(StandardNormal));
    let target = Array2::from_shape_simple_fn((rows, dout), || rng.sample::<f64, _>(StandardNormal));
    let masked: Vec<bool> = (0..rows).map(|r| r % 4 != 0).collect();
    let w0: Vec<f64> = (0..din * dout).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let loss = |w: &[f64]| {
        let wm = Array2::from_shape_vec((din, dout), w.to_vec()).unwrap();
        masked_mse(x.dot(&wm).view(), target.view(), &masked)
    };
    let wm = Array2::from_shape_vec((din, dout), w0.clone()).unwrap();
    let (_, dpred) = masked_mse_grad(x.dot(&wm).view(), target.view(), &masked).unwrap();
    let analytic: Vec<f64> = x.t().dot(&dpred).iter().copied().collect();
    let all: Vec<usize> = (0..w0.len()).collect();
    let (linear_err, ..) = check_gradient(loss, &w0, &analytic, &all, 1e-4).unwrap();
    ok &= linear_err < 1e-7;
    lines.push(format!("linear toy: {linear_err:.2e}"));

    report(5, "gradient correctness", ok, &lines.join("; "), start);
}

fn sentinel2_data(seed: u64, n: usize, revisits: usize, first: usize) -> Vec<Region> {
    let cfg = SynthConfig::new(seed, &["sentinel2"]).unwrap().with_revisits("sentinel2", revisits, revisits).unwrap();
    (first..first + n).map(|i| synth_region(&cfg, &region_id(i)).unwrap()).collect()
}

#[test]
fn criterion_06_training_sanity() {
    let start = Instant::now();
    let data = TrainData::from_regions(&sentinel2_data(0, 64, 1, 0), None).unwrap();
    let config = TrainConfig {
        effective_batch: 12,
        base_lr: 0.08,
        epochs: 10,
        warmup_epochs: 1,
        total_steps: Some(200),
        mask: MaskScheme::Tube { ratio: 0.75 },
        seed: 0,
        model: ModelConfig { encoder_depth: 2, decoder_depth: 1, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    let out = train(&config, &data, None, &RunOptions::default()).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    let initial = mean(&losses[..20]);
    let last = mean(&losses[losses.len() - 20..]);
    let sanity_ok = losses.len() == 200 && last <= 0.5 * initial;

    let one = TrainData::from_regions(&sentinel2_data(0, 1, 1, 0), None).unwrap();
    let overfit = TrainConfig {
        effective_batch: 1,
        base_lr: 0.5,
        total_steps: Some(500),
        ..config.clone()
    };
    let out = train(&overfit, &one, None, &RunOptions::default()).unwrap();
    let ol: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    let overfit_last = mean(&ol[ol.len() - 20..]);
    let overfit_ok = ol.len() == 500 && overfit_last < 0.05;

    report(
        6,
        "training sanity",
        sanity_ok && overfit_ok,
        &format!(
            "64 regions: smoothed loss {initial:.4} -> {last:.4} (ratio {:.3}, need <= 0.5); one region: {:.4} -> {overfit_last:.4} (need < 0.05)",
            last / initial,
            mean(&ol[..20])
        ),
        start,
    );
}

#[test]
fn criterion_07_reconstruction_loss_ordering() {
    let start = Instant::now();
    let train_regions = sentinel2_data(0, 32, 4, 0);
    let data = TrainData::from_regions(&train_regions, None).unwrap();
    let held = TrainData::from_regions(&sentinel2_data(0, 16, 4, 32), Some(&data.stats)).unwrap();
    let mut finals = Vec::new();
    for scheme in [MaskScheme::Tube { ratio: 0.9 }, MaskScheme::Random { ratio: 0.95 }] {
        let config = TrainConfig {
            effective_batch: 8,
            base_lr: 0.24,
            epochs: 10,
            warmup_epochs: 1,
            total_steps: Some(120),
            mask: scheme,
            seed: 0,
            ..TrainConfig::default()
        };
        let out = train(&config, &data, None, &RunOptions::default()).unwrap();
        let model = out.checkpoint.model().unwrap();
        let mut losses = Vec::new();
        for r in 0..held.regions.len() {
            let t = held.sample_timesteps(r, &[0], None);
            let stamps = held.regions[r].sources[&0].timestamps[..t].to_vec();
            let sample = held.sample(r, &[0], &stamps);
            let mask = scheme.generate(t, 1, NUM_PATCHES, derive_key(key![7u64, "held-out", r])).unwrap();
            losses.push(model.loss(&out.checkpoint.params, &sample, &mask).unwrap().loss);
        }
        finals.push(mean(&losses));
    }
    let (tube, random) = (finals[0], finals[1]);
    report(
        7,
        "reconstruction-loss ordering",
        random <= tube,
        &format!("held-out loss random-95% {random:.4} vs tube-90% {tube:.4}"),
        start,
    );
}

fn relative_distance(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den).sqrt()
}

#[test]
fn criterion_08_worker_equivalence_and_resume() {
    let start = Instant::now();
    let cfg = SynthConfig::new(8, &["sentinel1"]).unwrap().with_revisits("sentinel1", 2, 2).unwrap();
    let regions: Vec<Region> = (0..12).map(|i| synth_region(&cfg, &region_id(i)).unwrap()).collect();
    let data = TrainData::from_regions(&regions, None).unwrap();
    let base = TrainConfig {
        effective_batch: 8,
        base_lr: 0.1,
        epochs: 10,
        warmup_epochs: 1,
        total_steps: Some(20),
        mask: MaskScheme::COMBINED_DEFAULT,
        seed: 3,
        workers: 1,
        ..TrainConfig::default()
    };
    let stop10 = RunOptions { stop_at: Some(10), out_dir: None };
    let one = train(&base, &data, None, &stop10).unwrap();
    let four = train(&TrainConfig { workers: 4, ..base.clone() }, &data, None, &stop10).unwrap();
    let dist = relative_distance(&four.checkpoint.params, &one.checkpoint.params);

    let dir = tempfile::tempdir().unwrap();
    let half = train(&base, &data, None, &RunOptions { stop_at: Some(5), out_dir: Some(dir.path().to_path_buf()) }).unwrap();
    let loaded = Checkpoint::load(dir.path().join("checkpoint.emck")).unwrap();
    let resumed = train(&base, &data, Some(loaded), &stop10).unwrap();
    let bits = |ms: &[terramae::trainer::StepMetrics]| -> Vec<(u64, u64, u64, u64)> {
        ms.iter().map(|m| (m.step, m.loss.to_bits(), m.lr.to_bits(), m.grad_norm.to_bits())).collect()
    };
    let metrics_equal = bits(&resumed.metrics) == bits(&one.metrics[5..]) && bits(&half.metrics) == bits(&one.metrics[..5]);
    let params_equal = resumed.checkpoint.params == one.checkpoint.params
        && resumed.checkpoint.adam_m == one.checkpoint.adam_m
        && resumed.checkpoint.adam_v == one.checkpoint.adam_v;

    let ok = dist <= 1e-6 && metrics_equal && params_equal;
    report(
        8,
        "worker equivalence and resume",
        ok,
        &format!("4 vs 1 workers relative distance {dist:.2e} after 10 steps; resume at step 5 metrics identical {metrics_equal}, state identical {params_equal}"),
        start,
    );
}

fn brute_force_rank(candidates: &[Candidate], k: usize, cloud_max: f64) -> Vec<Candidate> {
    let mut pool: Vec<Candidate> = candidates.iter().filter(|c| c.cloud_fraction < cloud_max).copied().collect();
    let better = |a: &Candidate, b: &Candidate| {
        if a.scl_entropy != b.scl_entropy {
            return a.scl_entropy > b.scl_entropy;
        }
        if a.cloud_fraction != b.cloud_fraction {
            return a.cloud_fraction < b.cloud_fraction;
        }
        a.offset < b.offset
    };
    let mut out = Vec::new();
    while out.len() < k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            if better(&pool[i], &pool[best]) {
                best = i;
            }
        }
        out.push(pool.swap_remove(best));
    }
    out
}

#[test]
fn criterion_09_curation_oracles() {
    let start = Instant::now();
    let mut rng = keyed_rng(key![9u64, "acceptance-curation"]);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..=670);
        let coarse = rng.gen_bool(0.5);
        let mut offsets: Vec<(usize, usize)> = (0..30).flat_map(|i| (0..30).map(move |j| (i * 96, j * 96))).collect();
        offsets.shuffle(&mut rng);
        let candidates: Vec<Candidate> = offsets[..n]
            .iter()
            .map(|&offset| Candidate {
                offset,
                cloud_fraction: if coarse { rng.gen_range(0..5) as f64 / 20.0 } else { rng.gen() },
                scl_entropy: if coarse { rng.gen_range(0..4) as f64 / 2.0 } else { rng.gen_range(0.0..11f64.ln()) },
            })
            .collect();
        let k = rng.gen_range(0..=n.max(1) + 5);
        let cloud_max = rng.gen_range(0.0..1.2);
        if rank_candidates(&candidates, k, cloud_max) != brute_force_rank(&candidates, k, cloud_max) {
            mismatches += 1;
        }
    }

    let uniform = Array2::from_shape_fn((33, 44), |(i, j)| ((i * 44 + j) % 11) as u16);
    let h = scl_entropy(uniform.view(), 11).unwrap();
    let entropy_ok = (h - 11f64.ln()).abs() < 1e-9;

    let grid = patch_grid(1000, 800, 384);
    let disjoint = grid.iter().enumerate().all(|(i, a)| {
        grid[i + 1..].iter().all(|b| a.0.abs_diff(b.0) >= 384 || a.1.abs_diff(b.1) >= 384)
    });
    let inside = grid.iter().all(|&(y, x)| y + 384 <= 1000 && x + 384 <= 800);
    let grid_ok = grid.len() == 4 && disjoint && inside;

    report(
        9,
        "curation oracles",
        mismatches == 0 && entropy_ok && grid_ok,
        &format!("{mismatches}/1000 ranking mismatches; uniform entropy {h:.12} vs ln 11; grid {grid:?}"),
        start,
    );
}

fn random_region(rng: &mut impl Rng, index: usize) -> Region {
    let mut sources = BTreeMap::new();
    let dtypes = [Dtype::U8, Dtype::U16, Dtype::F32];
    for k in 0..rng.gen_range(1..=3) {
        let dtype = dtypes[(index + k) % 3];
        let name = format!("src-{k}");
        let (t, c, h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=20), rng.gen_range(1..=20));
        let profile = SourceProfile::new(&name, c, rng.gen_range(0.1..30.0), h, dtype);
        let profile = SourceProfile { width: w, ..profile };
        let data = match dtype {
            Dtype::U8 => TensorData::U8(Array4::from_shape_simple_fn((t, c, h, w), || rng.gen())),
            Dtype::U16 => TensorData::U16(Array4::from_shape_simple_fn((t, c, h, w), || rng.gen())),
            Dtype::F32 => TensorData::F32(Array4::from_shape_simple_fn((t, c, h, w), || rng.sample::<f32, _>(StandardNormal) * 1e3)),
        };
        let timestamps = (0..t)
            .map(|_| {
                if rng.gen_bool(0.2) {
                    Timestamp::UNKNOWN
                } else {
                    Timestamp::with_hour(rng.gen_range(2017..=2022), rng.gen_range(1..=12), rng.gen_range(1..=28), rng.gen_range(0..24))
                }
            })
            .collect();
        sources.insert(name, SourceTensor { profile, data, timestamps });
    }
    let lon: f64 = rng.gen_range(-180.0..179.0);
    let lat: f64 = rng.gen_range(-90.0..89.0);
    Region {
        region_id: format!("random-{index:04}"),
        bounds: Bounds { lon_min: lon, lat_min: lat, lon_max: lon + rng.gen_range(0.001..1.0), lat_max: lat + rng.gen_range(0.001..1.0) },
        sources,
    }
}

#[test]
fn criterion_10_shard_round_trip() {
    let start = Instant::now();
    let mut rng = keyed_rng(key![10u64, "acceptance-shard"]);
    let regions: Vec<Region> = (0..100).map(|i| random_region(&mut rng, i)).collect();
    let mut dtypes = std::collections::BTreeSet::new();
    for r in &regions {
        for s in r.sources.values() {
            dtypes.insert(s.data.dtype().code());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    for (i, chunk) in regions.chunks(10).enumerate() {
        let first = dir.path().join(format!("a{i}.evsh"));
        let second = dir.path().join(format!("b{i}.evsh"));
        terramae::shard::write_shard(chunk, &first).unwrap();
        let back = terramae::shard::read_shard(&first).unwrap();
        terramae::shard::write_shard(&back, &second).unwrap();
        let (a, b) = (std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
        let arrays_equal = back.iter().zip(chunk).all(|(x, y)| {
            x.region_id == y.region_id && x.sources.iter().zip(&y.sources).all(|(p, q)| p.1.data == q.1.data && p.1.timestamps == q.1.timestamps)
        });
        if a == b && arrays_equal && encode_shard(&decode_shard(&a).unwrap()).unwrap() == a {
            identical += 1;
        }
    }
    report(
        10,
        "shard round-trip",
        identical == 10 && dtypes.len() == 3,
        &format!("{identical}/10 shards of 10 regions byte-identical after write-read-write; {} dtypes present", dtypes.len()),
        start,
    );
}

#[test]
fn criterion_11_lr_schedule() {
    let start = Instant::now();
    let config = TrainConfig::default();
    let lr_max = config.lr_max();
    let (total, warmup) = (100_000, 10_000);
    let at = |s| lr_at(s, total, warmup, lr_max).unwrap();
    let peak_ok = (lr_max - 1.056e-3).abs() < 1e-15 && (at(warmup) - 1.056e-3).abs() < 1e-12;
    let ends_ok = at(0) == 0.0 && at(total).abs() < 1e-18;
    // both branches evaluated at the boundary, and the step just before it
    let ramp_limit = lr_max * warmup as f64 / warmup as f64;
    let cosine_limit = lr_max * 0.5 * (1.0 + 0f64.cos());
    let continuous = (ramp_limit - cosine_limit).abs() < 1e-12
        && (at(warmup) - ramp_limit).abs() < 1e-12
        && (at(warmup - 1) - lr_max * (warmup - 1) as f64 / warmup as f64).abs() < 1e-12
        && (at(warmup) - at(warmup - 1)).abs() <= lr_max / warmup as f64 + 1e-12;
    let nonincreasing = (warmup..total).all(|s| at(s + 1) <= at(s));
    report(
        11,
        "lr schedule",
        peak_ok && ends_ok && continuous && nonincreasing,
        &format!("lr(0) {:.1e}, lr(warmup) {:.6e}, lr(total) {:.1e}, continuous {continuous}, decay nonincreasing {nonincreasing}", at(0), at(warmup), at(total)),
        start,
    );
}
