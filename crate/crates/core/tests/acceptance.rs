//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed. Pass criterion
//! numbers as arguments to run a subset, e.g.
//! `cargo test -p lumbarseg --test acceptance -- 3 4`.

use std::cell::OnceCell;
use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use lumbarseg::localizer::{self, aggregate_planes, botev_bandwidth, kde_mode, silverman, VoteSet};
use lumbarseg::metrics::{self, DiceTarget};
use lumbarseg::nn::{grad_check, grad_check_input, LayerSpec, ModelParams, Objective, Tensor};
use lumbarseg::phantom::{Manifest, Split};
use lumbarseg::pipeline::{self, Case, PipelineConfig, Summary};
use lumbarseg::postprocess;
use lumbarseg::rng;
use lumbarseg::segmenter::{self, receptive_field, SegInit, SegMode, SegModel, UNetConfig};
use lumbarseg::volume::{self, BoundingBox, IntegralVolume, LabelVolume, Volume};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn randn(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(r)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let mut r = rng::seeded(101);
    let mut rows = Vec::new();

    let mlp = ModelParams::build(
        vec![
            LayerSpec::Dense { input: 8, output: 6 },
            LayerSpec::Relu,
            LayerSpec::Dense { input: 6, output: 4 },
            LayerSpec::Softmax,
        ],
        1,
    )
    .map_err(err)?;
    let x = randn(&[5, 8], &mut r);
    let t = randn(&[5, 4], &mut r);
    rows.push((
        "dense/relu/softmax + mse",
        grad_check(&mlp, &x, Objective::Mse(&t), 200, 1).map_err(err)?,
    ));

    let cfg = UNetConfig {
        levels: 2,
        base_channels: 2,
        in_channels: 1,
        out_classes: 3,
    };
    let unet = segmenter::build_unet(&cfg, 2).map_err(err)?.params;
    let img = randn(&[1, 8, 8], &mut r);
    let labels: Vec<u8> = (0..64).map(|_| r.gen_range(0..3)).collect();
    let ce = Objective::SoftmaxCe {
        labels: &labels,
        classes: 3,
    };
    rows.push((
        "conv/pool/upconv/concat + ce",
        grad_check(&unet, &img, ce, 200, 2).map_err(err)?,
    ));
    rows.push((
        "unet input + ce",
        grad_check_input(&unet, &img, ce, 200, 3).map_err(err)?,
    ));
    let target = randn(&[3, 8, 8], &mut r);
    rows.push((
        "conv/pool/upconv/concat + mse",
        grad_check(&unet, &img, Objective::Mse(&target), 200, 4).map_err(err)?,
    ));

    let conv_softmax = ModelParams::build(
        vec![
            LayerSpec::Conv2d {
                in_ch: 1,
                out_ch: 3,
                k: 3,
                pad: 1,
            },
            LayerSpec::Softmax,
        ],
        5,
    )
    .map_err(err)?;
    let target = randn(&[3, 6, 6], &mut r);
    let img = randn(&[1, 6, 6], &mut r);
    rows.push((
        "conv/channel softmax + mse",
        grad_check(&conv_softmax, &img, Objective::Mse(&target), 200, 6).map_err(err)?,
    ));

    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let detail = rows
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!("max rel err {worst:.2e} ({detail}) in {:.1}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- criterion 2

fn random_labels(dims: [usize; 3], density: f64, r: &mut rng::Rng) -> LabelVolume {
    let n = dims.iter().product();
    let data = (0..n)
        .map(|_| if r.gen_bool(density) { r.gen_range(1..=5) } else { 0 })
        .collect();
    LabelVolume::new(dims, [1.0; 3], data).unwrap()
}

/// Largest-component filter written with an explicit queue over (i, j, k).
fn flood_fill_oracle(l: &LabelVolume) -> LabelVolume {
    let [nx, ny, nz] = l.dims();
    let at = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut out = l.data().to_vec();
    for label in 1..=5u8 {
        let mut seen = vec![false; l.len()];
        let mut comps: Vec<Vec<usize>> = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    if seen[at(i, j, k)] || l.get(i, j, k) != label {
                        continue;
                    }
                    let mut comp = Vec::new();
                    let mut q = VecDeque::from([(i, j, k)]);
                    seen[at(i, j, k)] = true;
                    while let Some((a, b, c)) = q.pop_front() {
                        comp.push(at(a, b, c));
                        for dk in -1i64..=1 {
                            for dj in -1i64..=1 {
                                for di in -1i64..=1 {
                                    let (x, y, z) = (a as i64 + di, b as i64 + dj, c as i64 + dk);
                                    if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                                        continue;
                                    }
                                    let (x, y, z) = (x as usize, y as usize, z as usize);
                                    if !seen[at(x, y, z)] && l.get(x, y, z) == label {
                                        seen[at(x, y, z)] = true;
                                        q.push_back((x, y, z));
                                    }
                                }
                            }
                        }
                    }
                    comps.push(comp);
                }
            }
        }
        // first maximal component in scan order wins ties
        let mut best = None::<usize>;
        for (n, c) in comps.iter().enumerate() {
            if best.is_none_or(|b| c.len() > comps[b].len()) {
                best = Some(n);
            }
        }
        for (n, c) in comps.iter().enumerate() {
            if Some(n) != best {
                for &idx in c {
                    out[idx] = 0;
                }
            }
        }
    }
    LabelVolume::new(l.dims(), l.spacing(), out).unwrap()
}

fn oracle_equivalence() -> Check {
    let mut r = rng::seeded(202);

    let dims = [23, 17, 29];
    let data: Vec<f64> = (0..dims.iter().product::<usize>())
        .map(|_| r.gen_range(-500.0..1500.0))
        .collect();
    let v = Volume::new(dims, [1.0; 3], data).unwrap();
    let iv = IntegralVolume::new(&v);
    let mut worst_mean: f64 = 0.0;
    for _ in 0..100 {
        let c: [i64; 3] = std::array::from_fn(|a| r.gen_range(0..dims[a] as i64));
        let o: [i64; 3] = std::array::from_fn(|_| r.gen_range(-8..=8));
        let h: [i64; 3] = std::array::from_fn(|_| r.gen_range(0..=6));
        let (mut sum, mut n) = (0.0, 0usize);
        for k in 0..dims[2] as i64 {
            for j in 0..dims[1] as i64 {
                for i in 0..dims[0] as i64 {
                    let p = [i, j, k];
                    if (0..3).all(|a| (p[a] - c[a] - o[a]).abs() <= h[a]) {
                        sum += v.get(i as usize, j as usize, k as usize);
                        n += 1;
                    }
                }
            }
        }
        let brute = if n == 0 { 0.0 } else { sum / n as f64 };
        let fast = iv.cuboid_mean(c, o, h);
        worst_mean = worst_mean.max((fast - brute).abs() / brute.abs().max(1.0));
    }

    let mut dice_ok = true;
    let mut sens_ok = true;
    for _ in 0..10 {
        let d = [12, 10, 14];
        let gt = random_labels(d, 0.4, &mut r);
        let pred = random_labels(d, 0.4, &mut r);
        for target in (1..=5).map(DiceTarget::Label).chain([DiceTarget::Lumbar]) {
            let hit = |v: u8| match target {
                DiceTarget::Label(k) => v == k,
                DiceTarget::Lumbar => v != 0,
            };
            let (mut p, mut g, mut both) = (0u64, 0u64, 0u64);
            for k in 0..d[2] {
                for j in 0..d[1] {
                    for i in 0..d[0] {
                        let (a, b) = (hit(pred.get(i, j, k)), hit(gt.get(i, j, k)));
                        p += a as u64;
                        g += b as u64;
                        both += (a && b) as u64;
                    }
                }
            }
            let expected = if p + g == 0 {
                100.0
            } else {
                100.0 * 2.0 * both as f64 / (p + g) as f64
            };
            dice_ok &= metrics::dice(&pred, &gt, target).map_err(err)? == expected;
        }
        let lo: [i64; 3] = std::array::from_fn(|a| r.gen_range(0..d[a] as i64));
        let hi: [i64; 3] = std::array::from_fn(|a| r.gen_range(lo[a]..d[a] as i64));
        let b = BoundingBox::new((lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2]));
        let (mut fg, mut inside) = (0u64, 0u64);
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    if gt.get(i, j, k) != 0 {
                        fg += 1;
                        let p = [i as i64, j as i64, k as i64];
                        inside += (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) as u64;
                    }
                }
            }
        }
        sens_ok &= localizer::sensitivity(&gt, &b).map_err(err)? == inside as f64 / fg as f64;
    }

    let mut cc_ok = true;
    for density in [0.05, 0.1, 0.2, 0.3] {
        let l = random_labels([32; 3], density, &mut r);
        cc_ok &= postprocess::largest_components(&l) == flood_fill_oracle(&l);
    }

    ensure(
        worst_mean < 1e-9 && dice_ok && sens_ok && cc_ok,
        format!(
            "cuboid_mean max rel err {worst_mean:.1e}, dice exact {dice_ok}, sensitivity exact {sens_ok}, \
             largest_components exact {cc_ok}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

fn target_round_trip() -> Check {
    let mut r = rng::seeded(303);
    let mut bad = 0;
    for _ in 0..1000 {
        let p: [i64; 6] = std::array::from_fn(|_| r.gen_range(-300..300));
        let b = BoundingBox::new((p[0], p[1]), (p[2], p[3]), (p[4], p[5]));
        let v: [usize; 3] = std::array::from_fn(|_| r.gen_range(0..400));
        let planes = localizer::invert_targets(&localizer::make_targets(v, &b), v);
        let back = BoundingBox::from_planes(planes.map(|x| x as i64));
        bad += (back != b || planes.iter().any(|x| x.fract() != 0.0)) as usize;
    }
    ensure(bad == 0, format!("{bad}/1000 pairs not recovered"))
}

// ---------------------------------------------------------------- criterion 4

fn kde_stack() -> Check {
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng::seeded(400 + seed);
        let s: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
        let ratio = botev_bandwidth(&s).map_err(err)? / silverman(&s);
        worst_ratio = worst_ratio.max((ratio - 1.0).abs());
    }

    let mut worst_mode: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    for seed in 0..10 {
        let mut r = rng::seeded(500 + seed);
        let far = Normal::new(10.0, 1.0).unwrap();
        let s: Vec<f64> = (0..2000)
            .map(|_| {
                if r.gen_bool(0.8) {
                    StandardNormal.sample(&mut r)
                } else {
                    far.sample(&mut r)
                }
            })
            .collect();
        let h = botev_bandwidth(&s).map_err(err)?;
        let mode = kde_mode(&s, h).map_err(err)?;
        worst_mode = worst_mode.max(mode.abs());
        // the sample's own density peak on a dense grid
        let density = |x: f64| s.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>();
        let grid = (0..=20_000).map(|i| -2.0 + 4.0 * i as f64 / 20_000.0);
        let peak = grid.max_by(|a, b| density(*a).total_cmp(&density(*b))).unwrap();
        worst_oracle = worst_oracle.max((mode - peak).abs());
    }

    let mut equivariant = true;
    for seed in 0..20 {
        let mut r = rng::seeded(600 + seed);
        let n = if seed % 2 == 0 { 400 } else { 10 };
        let planes: [Vec<f64>; 6] = std::array::from_fn(|c| {
            let centre = 20.0 * c as f64;
            (0..n)
                .map(|_| centre + 4.0 * Distribution::<f64>::sample(&StandardNormal, &mut r))
                .collect()
        });
        let votes = VoteSet {
            planes,
            dims: [1000; 3],
        };
        let t: [i64; 3] = std::array::from_fn(|_| r.gen_range(-50..=50));
        let base = aggregate_planes(&votes.planes).map_err(err)?;
        let moved = aggregate_planes(&votes.translated(t.map(|x| x as f64)).planes).map_err(err)?;
        equivariant &= (0..6).all(|c| moved[c] == base[c] + t[c / 2]);
    }

    ensure(
        worst_ratio <= 0.25 && worst_mode <= 0.2 && worst_oracle <= 1e-3 && equivariant,
        format!(
            "max |botev/silverman - 1| {worst_ratio:.3}, max |mode| {worst_mode:.3} \
             (dense-grid peak agrees within {worst_oracle:.1e}), integer-shift equivariant {equivariant}"
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn receptive_fields() -> Check {
    let rf = |levels| {
        receptive_field(&UNetConfig {
            levels,
            ..UNetConfig::default()
        })
    };
    let (r4, r5) = (rf(4), rf(5));
    let rel = (r5 as f64 - 270.0).abs() / 270.0;
    ensure(
        r4 == 140 && r5 == 284 && rel <= 0.1,
        format!("levels 4 -> {r4}, levels 5 -> {r5} ({:.1}% from 270)", 100.0 * rel),
    )
}

// ------------------------------------------------------- shared phantom run

struct ToyRun {
    _dir: tempfile::TempDir,
    cfg: PipelineConfig,
    summary: Summary,
    elapsed: Duration,
    cases: Vec<Case>,
}

impl ToyRun {
    fn new() -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(err)?;
        let mut cfg = PipelineConfig::toy();
        cfg.out_dir = dir.path().join("run");
        cfg.use_gt_boxes = true;
        let start = Instant::now();
        let summary = pipeline::run_pipeline(&cfg).map_err(err)?;
        let elapsed = start.elapsed();
        let manifest = Manifest::load(cfg.out_dir.join("phantoms").join("manifest.txt")).map_err(err)?;
        let cases = pipeline::load_cases(&manifest).map_err(err)?;
        Ok(Self {
            _dir: dir,
            cfg,
            summary,
            elapsed,
            cases,
        })
    }

    fn split(&self, s: Split) -> Vec<&Case> {
        self.cases.iter().filter(|c| c.split == s).collect()
    }
}

struct Fixtures {
    toy: OnceCell<Result<ToyRun, String>>,
}

impl Fixtures {
    fn toy(&self) -> Result<&ToyRun, String> {
        self.toy
            .get_or_init(ToyRun::new)
            .as_ref()
            .map_err(|e| format!("toy run failed: {e}"))
    }
}

// ---------------------------------------------------------------- criterion 6

fn phantom_localisation(fx: &Fixtures) -> Check {
    let run = fx.toy()?;
    let (train, test) = (run.split(Split::Train), run.split(Split::Test));
    let cfg = &run.cfg;
    if cfg.loc_features != 500 || cfg.loc_epochs > 300 || cfg.tolerance != 15 {
        return Err("toy profile does not match the required localiser settings".into());
    }
    let start = Instant::now();
    let (model, _) = pipeline::train_localizer_stage(cfg, &train).map_err(err)?;
    let boxes = pipeline::predict_boxes(cfg, &model, &test).map_err(err)?;
    let elapsed = start.elapsed();
    let mut sens = Vec::new();
    let mut extra = None;
    for (c, b) in test.iter().zip(&boxes) {
        let s = localizer::sensitivity(&c.labels, b).map_err(err)?;
        if c.flags.extra_sacrum {
            extra = Some(s);
        }
        sens.push(s);
    }
    let mean = sens.iter().sum::<f64>() / sens.len() as f64;
    let min = sens.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(
        mean >= 0.95 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "mean sensitivity {mean:.4} over {} test phantoms (min {min:.4}, extra-sacrum case {}), {:.0}s",
            sens.len(),
            extra.map_or("absent".into(), |s| format!("{s:.4}")),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn phantom_segmentation(fx: &Fixtures) -> Check {
    let run = fx.toy()?;
    let s = &run.summary;
    let c = &run.cfg;
    if (
        c.seg_levels,
        c.seg_base_channels,
        c.seg_epochs_binary,
        c.seg_epochs_multiclass,
    ) != (3, 8, 300, 200)
    {
        return Err("toy profile does not match the required segmenter settings".into());
    }
    ensure(
        s.mean_label_dice >= 85.0 && s.mean_lumbar_dice >= 90.0 && run.elapsed < Duration::from_secs(30 * 60),
        format!(
            "mean per-label Dice {:.2}, lumbar Dice {:.2} (percent), {:.0}s",
            s.mean_label_dice,
            s.mean_lumbar_dice,
            run.elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn label_order(fx: &Fixtures) -> Check {
    let run = fx.toy()?;
    let dir = run.cfg.out_dir.join("predictions");
    let mut unordered = Vec::new();
    let mut split = Vec::new();
    let test = run.split(Split::Test);
    for c in &test {
        let p = volume::load_labels(dir.join(format!("{}_pred.mhd", c.id))).map_err(err)?;
        if !metrics::labels_ordered(&p) {
            unordered.push(c.id.clone());
        }
        if (1..=5).any(|k| postprocess::components(&p, k).len() > 1) {
            split.push(c.id.clone());
        }
    }
    ensure(
        unordered.is_empty() && split.is_empty(),
        format!(
            "{}/{} predictions ordered L1..L5 top to bottom; unordered {:?}; multi-component {:?}",
            test.len() - unordered.len(),
            test.len(),
            unordered,
            split
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn smoothed(trace: &[f64], w: usize) -> Vec<f64> {
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            trace[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn pretraining_effect(fx: &Fixtures) -> Check {
    const SCRATCH_EPOCHS: usize = 50;
    const WINDOW: usize = 5;
    let run = fx.toy()?;
    let binary = SegModel::load(run.cfg.out_dir.join("seg_binary.ckpt")).map_err(err)?;
    let train = run.split(Split::Train);
    let crops: Vec<(Volume, LabelVolume)> = train
        .iter()
        .map(|c| {
            let b = c.gt_box(run.cfg.gt_tolerance)?;
            Ok((c.image.crop(&b)?, c.labels.crop(&b)?))
        })
        .collect::<lumbarseg::Result<_>>()
        .map_err(err)?;
    let cfg = &run.cfg;
    let fit = |init, epochs| {
        segmenter::train_segmenter(
            &crops,
            &cfg.unet(),
            &cfg.augment(),
            SegMode::Multiclass,
            init,
            &cfg.seg_train(SegMode::Multiclass, epochs, 900),
        )
        .map(|(_, t)| smoothed(&t, WINDOW))
        .map_err(err)
    };
    let scratch = fit(SegInit::Scratch { seed: 77 }, SCRATCH_EPOCHS)?;
    let goal = scratch[SCRATCH_EPOCHS - 1];
    let transfer = fit(
        SegInit::From(segmenter::transfer_weights(&binary, 6, 78).map_err(err)?),
        SCRATCH_EPOCHS / 2,
    )?;
    let reached = transfer.iter().position(|&l| l <= goal).map(|e| e + 1);
    ensure(
        reached.is_some(),
        format!(
            "scratch loss at epoch {SCRATCH_EPOCHS} {goal:.4}; transferred run reaches it at epoch {} (limit {})",
            reached.map_or("never".into(), |e| e.to_string()),
            SCRATCH_EPOCHS / 2
        ),
    )
}

// --------------------------------------------------------------- criterion 10

fn csv_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(err)? {
        let p = e.map_err(err)?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.insert(
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).map_err(err)?,
            );
        }
    }
    Ok(out)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let run = |name: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let mut cfg = PipelineConfig::toy();
        cfg.seed = 7;
        cfg.phantom_train = 4;
        cfg.phantom_test = 2;
        cfg.loc_epochs = 20;
        cfg.loc_samples_per_volume = 100;
        cfg.seg_epochs_binary = 3;
        cfg.seg_epochs_multiclass = 3;
        cfg.out_dir = dir.path().join(name);
        pipeline::run_pipeline(&cfg).map_err(err)?;
        csv_files(&cfg.out_dir)
    };
    let (a, b) = (run("a")?, run("b")?);
    let names: Vec<&String> = a.keys().collect();
    ensure(
        a.len() >= 6 && a == b,
        format!("{} CSVs compared ({names:?}), identical {}", a.len(), a == b),
    )
}

fn main() -> ExitCode {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let fx = Fixtures { toy: OnceCell::new() };
    let criteria: [(u32, &str, &dyn Fn() -> Check); 10] = [
        (1, "gradient fidelity", &gradient_fidelity),
        (2, "oracle equivalence", &oracle_equivalence),
        (3, "plane offset round trip", &target_round_trip),
        (4, "KDE stack", &kde_stack),
        (5, "receptive field", &receptive_fields),
        (6, "phantom localisation", &|| phantom_localisation(&fx)),
        (7, "phantom segmentation", &|| phantom_segmentation(&fx)),
        (8, "label order", &|| label_order(&fx)),
        (9, "pretraining effect", &|| pretraining_effect(&fx)),
        (10, "determinism", &determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
