use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scenenet_tensor::{Eager, Tensor};
use serde::Serialize;

use crate::alloc;
use crate::error::{Error, Result};
use crate::network::{check_input_size, BranchedModel, Task};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchTiming {
    pub median_ms: f64,
    pub mean_ms: f64,
    pub fps: f64,
    /// Peak heap growth during one forward, when tracked.
    pub peak_heap_bytes: Option<usize>,
    /// Stored parameter and buffer bytes.
    pub param_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub height: usize,
    pub width: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub hardware: String,
    pub joint: BenchTiming,
    /// Each single-task model on its own.
    pub single: Vec<(Task, BenchTiming)>,
    /// The three single-task forwards run back to back.
    pub separate: BenchTiming,
    /// Joint median over separate median.
    pub latency_ratio: f64,
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}, {cores} logical cores, {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timing(samples: &mut [f64], peak: Option<usize>, param_bytes: usize) -> BenchTiming {
    let mean_ms = samples.iter().sum::<f64>() / samples.len() as f64;
    let median_ms = median(samples);
    BenchTiming {
        median_ms,
        mean_ms,
        fps: 1e3 / median_ms,
        peak_heap_bytes: peak,
        param_bytes,
    }
}

fn run(model: &BranchedModel, input: &Tensor) {
    let mut e = Eager::new(&model.store);
    let out = model.forward_exec(&mut e, input.clone());
    std::hint::black_box(out);
}

fn peak_since(base: usize) -> Option<usize> {
    alloc::is_tracking().then(|| alloc::peak_bytes().saturating_sub(base))
}

/// Times evaluation-mode forwards of one `h x w` image through the joint
/// model and through three single-task models. Runs are interleaved per
/// iteration so slow drift affects both sides alike; memory is probed in
/// one untimed pass per model.
pub fn benchmark_speed(
    joint: &BranchedModel,
    singles: &[BranchedModel],
    h: usize,
    w: usize,
    iterations: usize,
    warmup: usize,
) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::Config("benchmark needs at least one iteration".into()));
    }
    check_input_size(h, w)?;
    if !joint.is_joint() {
        return Err(Error::Config("first model must have all three branches".into()));
    }
    let mut tasks: Vec<Task> = singles.iter().flat_map(|m| m.tasks()).collect();
    tasks.sort_by_key(|t| *t as u8);
    if singles.iter().any(|m| m.tasks().len() != 1) || tasks != Task::ALL {
        return Err(Error::Config("need one single-task model per task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::from_vec(&[1, 3, h, w], (0..3 * h * w).map(|_| rng.gen::<f32>()).collect());
    for _ in 0..warmup {
        run(joint, &input);
        for m in singles {
            run(m, &input);
        }
    }
    let base = alloc::current_bytes();
    let peak_of = |m: &BranchedModel| {
        alloc::reset_peak();
        run(m, &input);
        peak_since(base)
    };
    let joint_peak = peak_of(joint);
    let single_peaks: Vec<Option<usize>> = singles.iter().map(peak_of).collect();
    let mut joint_ms = Vec::with_capacity(iterations);
    let mut single_ms = vec![Vec::with_capacity(iterations); singles.len()];
    let mut separate_ms = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        run(joint, &input);
        joint_ms.push(t.elapsed().as_secs_f64() * 1e3);
        let mut sum = 0.0;
        for (k, m) in singles.iter().enumerate() {
            let t = Instant::now();
            run(m, &input);
            let ms = t.elapsed().as_secs_f64() * 1e3;
            single_ms[k].push(ms);
            sum += ms;
        }
        separate_ms.push(sum);
    }
    let separate_peak = single_peaks.iter().copied().sum::<Option<usize>>();
    let bytes = |m: &BranchedModel| 4 * m.store.num_parameters();
    let joint_t = timing(&mut joint_ms, joint_peak, bytes(joint));
    let separate = timing(&mut separate_ms, separate_peak, singles.iter().map(bytes).sum());
    let single = singles
        .iter()
        .zip(single_ms.iter_mut())
        .zip(&single_peaks)
        .map(|((m, ms), &p)| (m.tasks()[0], timing(ms, p, bytes(m))))
        .collect();
    Ok(BenchReport {
        height: h,
        width: w,
        iterations,
        warmup,
        hardware: hardware_descriptor(),
        latency_ratio: joint_t.median_ms / separate.median_ms,
        joint: joint_t,
        single,
        separate,
    })
}

fn mb(b: usize) -> String {
    format!("{:.1} MB", b as f64 / (1024.0 * 1024.0))
}

fn mem(t: &BenchTiming) -> String {
    match t.peak_heap_bytes {
        Some(p) => format!("{} + {}", mb(t.param_bytes), mb(p)),
        None => format!("{} + n/a", mb(t.param_bytes)),
    }
}

impl BenchReport {
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "## Speed at {}x{} ({} iterations, {} warmup)\n\n{}\n",
            self.height, self.width, self.iterations, self.warmup, self.hardware
        );
        let _ = writeln!(out, "| | mem (weights + activations) | median | speed |\n|---|---|---|---|");
        let _ = writeln!(
            out,
            "| Trained separately | {} | {:.2} ms | {:.1} fps |",
            mem(&self.separate),
            self.separate.median_ms,
            self.separate.fps
        );
        let _ = writeln!(
            out,
            "| Trained together | {} | {:.2} ms | {:.1} fps |",
            mem(&self.joint),
            self.joint.median_ms,
            self.joint.fps
        );
        for (task, t) in &self.single {
            let _ = writeln!(
                out,
                "| {} only | {} | {:.2} ms | {:.1} fps |",
                task.name(),
                mem(t),
                t.median_ms,
                t.fps
            );
        }
        let _ = writeln!(out, "\njoint / separate latency: {:.3}", self.latency_ratio);
        out
    }
}
