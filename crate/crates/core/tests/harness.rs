use std::path::Path;

use scenenet::checkpoint::Checkpoint;
use scenenet::data::*;
use scenenet::harness::*;
use scenenet::losses::TaskWeights;
use scenenet::network::{build_model, build_single_task_model, NetworkConfig, Task};
use scenenet::types::Sample;

fn scenes(n: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            make_synthetic_scene(&SyntheticSceneConfig {
                rng_seed: 100 + i,
                ..Default::default()
            })
            .unwrap()
        })
        .collect()
}

/// Report entries without the timing and memory probes.
fn metrics_only(r: &EvalReport) -> Vec<(String, String)> {
    r.to_key_values()
        .into_iter()
        .filter(|(k, _)| k != "forward_ms_per_image" && k != "peak_heap_bytes")
        .collect()
}

fn trainer(lr: f32) -> Trainer {
    Trainer::new(build_model(&NetworkConfig::toy(3), 1).unwrap(), lr, ClassWeightTable::uniform(3)).unwrap()
}

fn short_run(dir: &Path, iterations: u64) -> (RunConfig, TrainOutcome) {
    export_synthetic_dataset(dir, "train", 2, &SyntheticSceneConfig::default(), CameraParams::typical_cityscapes()).unwrap();
    let mut cfg = RunConfig::toy(dir.join("dataset.toml"), dir.join("run"), 2);
    cfg.iterations = iterations;
    let outcome = train(&cfg).unwrap();
    (cfg, outcome)
}

#[test]
fn small_steps_reduce_the_loss() {
    let samples = scenes(2);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut t = trainer(1e-3);
    let first = t.step(&refs).unwrap().total;
    for _ in 0..4 {
        t.step(&refs).unwrap();
    }
    assert!(t.loss(&refs, true).unwrap().total < first);
    assert_eq!(t.iteration, 5);
}

#[test]
fn frozen_batch_norm_stays_put() {
    let samples = scenes(1);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut t = trainer(1e-2);
    let before = t.model.store.clone();
    t.step(&refs).unwrap();
    let mut moved = 0;
    for id in before.ids() {
        let e = before.entry(id);
        if e.kind.is_batch_norm() || e.kind.is_buffer() {
            assert_eq!(e.value, *t.model.store.get(id), "{}/{}", e.group, e.name);
        } else if e.value != *t.model.store.get(id) {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn unfrozen_batch_norm_updates_running_statistics() {
    let samples = scenes(2);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut t = trainer(1e-3);
    t.freeze_batchnorm = false;
    let before = t.model.store.clone();
    t.step(&refs).unwrap();
    let changed = before.ids().filter(|&id| before.entry(id).kind.is_buffer() && before.get(id) != t.model.store.get(id)).count();
    assert!(changed > 0);
}

#[test]
fn semantic_only_weights_leave_other_branches_untouched() {
    let samples = scenes(2);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut t = trainer(1e-2);
    t.task_weights = TaskWeights {
        semantic: 1.0,
        instance: 0.0,
        depth: 0.0,
    };
    let hash = |t: &Trainer, task| hash_groups(&t.model.store, &t.model.branch_groups(task));
    let before: Vec<String> = Task::ALL.iter().map(|&k| hash(&t, k)).collect();
    let encoder = hash_groups(&t.model.store, &t.model.encoder_groups());
    for _ in 0..3 {
        t.step(&refs).unwrap();
    }
    assert_ne!(hash(&t, Task::Semantic), before[0]);
    assert_eq!(hash(&t, Task::Instance), before[1]);
    assert_eq!(hash(&t, Task::Depth), before[2]);
    assert_ne!(hash_groups(&t.model.store, &t.model.encoder_groups()), encoder);
}

#[test]
fn every_task_reaches_the_encoder() {
    let samples = scenes(1);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut t = trainer(1e-2);
    let groups = t.model.encoder_groups();
    let encoder_grad_norm = |t: &Trainer| -> f64 {
        let (_, grads) = t.gradients(&refs).unwrap();
        groups
            .iter()
            .flat_map(|g| t.model.store.group_ids(g))
            .filter_map(|id| grads.get(id))
            .flat_map(|g| g.data().iter().map(|v| (*v as f64).powi(2)))
            .sum::<f64>()
    };
    assert!(encoder_grad_norm(&t) > 0.0);
    for k in 0..3 {
        let mut w = [0.0; 3];
        w[k] = 1.0;
        t.task_weights = TaskWeights {
            semantic: w[0],
            instance: w[1],
            depth: w[2],
        };
        assert!(encoder_grad_norm(&t) > 0.0, "task {k}");
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_restore_evaluation() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, first) = short_run(a.path(), 6);
    let (_, second) = short_run(b.path(), 6);
    assert_eq!(first.log.len(), 6);
    for (x, y) in first.log.iter().zip(&second.log) {
        assert_eq!((x.step, x.total, x.l_sem, x.l_dep), (y.step, y.total, y.l_sem, y.l_dep));
    }
    assert_eq!(
        hash_groups(&first.model.store, &first.model.parameter_groups()),
        hash_groups(&second.model.store, &second.model.parameter_groups())
    );
    assert!(a.path().join("run/train_log.csv").exists());

    let ds = DatasetConfig::load(&a.path().join("dataset.toml")).unwrap();
    let samples = ds.load_split("train").unwrap();
    let ckpt = Checkpoint::load(&first.last_checkpoint).unwrap();
    assert_eq!(ckpt.metadata.get("bandwidth").map(String::as_str), Some("0.5"));
    let opts = EvalOptions::for_checkpoint(&ckpt);
    assert_eq!(opts.bandwidth, 0.5);
    let direct = evaluate(&first.model, &samples, &ds, &opts).unwrap();
    let restored = evaluate(&ckpt.to_model().unwrap(), &samples, &ds, &opts).unwrap();
    assert_eq!(metrics_only(&direct), metrics_only(&restored));
    assert_eq!(direct.images, 2);
}

#[test]
fn evaluation_caps_are_nested_and_reports_have_all_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = short_run(tmp.path(), 2);
    let ds = DatasetConfig::load(&tmp.path().join("dataset.toml")).unwrap();
    let samples = ds.load_split("train").unwrap();
    let opts = EvalOptions {
        caps: vec![100.0, 50.0, 25.0, 10.0],
        ..EvalOptions::default()
    };
    let r = evaluate(&run.model, &samples, &ds, &opts).unwrap();
    assert_eq!(metrics_only(&r), metrics_only(&evaluate(&run.model, &samples, &ds, &opts).unwrap()));
    let counts: Vec<usize> = r.pixel_depth.iter().map(|(_, e)| e.as_ref().map_or(0, |e| e.count)).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    // Synthetic depths lie in [5, 15] m.
    assert_eq!(counts[0], counts[1]);
    let cars: Vec<usize> = r.car_depth.iter().map(|(_, e)| e.as_ref().map_or(0, |e| e.count)).collect();
    assert!(cars.windows(2).all(|w| w[0] >= w[1]), "{cars:?}");
    assert_eq!(cars[0], r.car_pairs.len());

    let md = r.to_markdown();
    for needle in ["IoU", "AP", "MAE", "RMSE", "ARD"] {
        assert!(md.contains(needle), "{needle} missing from\n{md}");
    }

    let csv = tmp.path().join("cars.csv");
    r.write_car_pairs(&csv).unwrap();
    assert_eq!(read_car_pairs(&csv).unwrap().len(), r.car_pairs.len());
    let svg = tmp.path().join("cars.svg");
    if r.car_pairs.is_empty() {
        assert!(emit_scatter(&csv, &svg).is_err());
    } else {
        assert_eq!(emit_scatter(&csv, &svg).unwrap(), r.car_pairs.len());
        assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
    }
}

#[test]
fn scatter_counts_rows_and_rejects_empty_files() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("pairs.csv");
    std::fs::write(&csv, "image_id,instance_id,gt_depth_m,pred_depth_m,pixels\na,1,10.0,11.0,40\nb,2,20.5,19.0,12\n").unwrap();
    let out = tmp.path().join("s.svg");
    assert_eq!(emit_scatter(&csv, &out).unwrap(), 2);
    let svg = std::fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<circle").count(), 2);
    std::fs::write(&csv, "image_id,instance_id,gt_depth_m,pred_depth_m,pixels\n").unwrap();
    assert!(emit_scatter(&csv, &out).is_err());
    std::fs::write(&csv, "image_id,gt_depth_m\na,1\n").unwrap();
    assert!(emit_scatter(&csv, &out).is_err());
}

#[test]
fn inference_writes_deterministic_maps_at_input_size() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, run) = short_run(tmp.path(), 2);
    let ds = DatasetConfig::load(&tmp.path().join("dataset.toml")).unwrap();
    let sample = &ds.load_split("train").unwrap()[0];
    let image_path = tmp.path().join("train").join(&sample.id).join(format!("{}{IMAGE_SUFFIX}", sample.id));
    let first = infer_file(&run.last_checkpoint, &image_path, &tmp.path().join("o1"), None).unwrap();
    let second = infer_file(&run.last_checkpoint, &image_path, &tmp.path().join("o2"), None).unwrap();
    for (a, b) in [
        (&first.semantic_png, &second.semantic_png),
        (&first.instance_png, &second.instance_png),
        (&first.depth_png, &second.depth_png),
        (&first.submission_txt, &second.submission_txt),
    ] {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    for p in [&first.semantic_png, &first.instance_png, &first.depth_png] {
        assert_eq!(image::image_dimensions(p).unwrap(), (64, 64));
    }
    let ckpt = Checkpoint::load(&run.last_checkpoint).unwrap();
    let pred = predict_sample(&run.model, &load_image(&image_path).unwrap(), &InferSettings::from_checkpoint(&ckpt)).unwrap();
    let png = image::open(&first.depth_png).unwrap().into_luma16();
    for (mm, m) in png.pixels().zip(pred.depth.data()) {
        assert!((mm.0[0] as f64 / 1000.0 - *m as f64).abs() <= 1e-3);
    }
    let resized = infer_file(&run.last_checkpoint, &image_path, &tmp.path().join("o3"), Some((32, 32))).unwrap();
    assert_eq!(image::image_dimensions(&resized.depth_png).unwrap(), (64, 64));
    assert!(infer_file(&run.last_checkpoint, &image_path, &tmp.path().join("o4"), Some((30, 32))).is_err());
}

#[test]
fn millimeter_encoding_rounds_and_clamps() {
    assert_eq!(depth_to_millimeters(1.2344), 1234);
    assert_eq!(depth_to_millimeters(-1.0), 0);
    assert_eq!(depth_to_millimeters(100.0), u16::MAX);
}

#[test]
fn benchmark_reports_and_rejects_bad_setups() {
    let cfg = NetworkConfig::toy(3);
    let joint = build_model(&cfg, 0).unwrap();
    let singles: Vec<_> = Task::ALL.iter().map(|&t| build_single_task_model(&cfg, t, 0).unwrap()).collect();
    assert!(benchmark_speed(&joint, &singles, 32, 64, 0, 0).is_err());
    assert!(benchmark_speed(&joint, &singles[..2], 32, 64, 1, 0).is_err());
    assert!(benchmark_speed(&singles[0], &singles, 32, 64, 1, 0).is_err());
    let r = benchmark_speed(&joint, &singles, 32, 64, 3, 1).unwrap();
    assert_eq!((r.height, r.width, r.iterations), (32, 64, 3));
    assert!(!r.hardware.is_empty());
    assert_eq!(r.single.len(), 3);
    assert!(r.latency_ratio > 0.0 && r.latency_ratio.is_finite());
    let md = r.to_markdown();
    assert!(md.contains("32x64") || md.contains("32 x 64") || md.contains("64x32"), "{md}");
}

#[test]
fn run_configs_round_trip_and_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::toy(tmp.path().join("d.toml"), tmp.path().join("out"), 4);
    let path = tmp.path().join("run.toml");
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, toml::to_string(&RunConfig::toy("d.toml", "out", 4)).unwrap()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap().dataset, tmp.path().join("d.toml"));
    let mut bad = cfg.clone();
    bad.bandwidth = Some(0.0);
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.optimizer.batch_size = 0;
    assert!(bad.validate().is_err());
}
