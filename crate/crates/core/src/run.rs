//! Run orchestration: one function per task, artifacts written to an
//! output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{DatasetSpec, RunConfig, SampleMethod, Task};
use crate::datasets::{dump_dataset, load_dataset, make_composition_dataset, CompositionSample, ToyDistribution, COMPOSE_TOKEN};
use crate::distill_cm::distill_cm;
use crate::dmd::distill_dmd;
use crate::error::{Error, Result};
use crate::eval::{
    conditioning_accuracy, fidelity_report, mmd_rbf, score_oracle_check, score_probes, speedup_report,
    ConsistencyGenerator, FidelityConfig, RandomGenerator,
};
use crate::networks::{Architecture, ArchSpec, ConditionToken, PointNet, SeqCond, SeqNet, VelocityNet};
use crate::optim::OptimState;
use crate::packing::{replace_target_with_noise, UnifiedSequence};
use crate::plot::{line_chart, scatter};
use crate::samplers::{consistency_sample, euler_solve, SampleBatch};
use crate::tensor::Tensor;
use crate::train::{train_teacher, CompositionSource, LossCurve, PoolSource, ToySource};

/// Condition token of every toy sample.
pub const TOY_TOKEN: ConditionToken = ConditionToken(1);
/// Euler steps for teacher reference samples.
pub const BASELINE_STEPS: usize = 100;

/// Files a run produced and a printable summary.
#[derive(Debug, Default)]
pub struct RunOutcome {
    pub artifacts: Vec<PathBuf>,
    pub summary: String,
}

/// Independent generator for purpose `stream` of a run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

mod streams {
    pub const INIT: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const POOL: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const EVAL: u64 = 5;
}

fn derived(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream).next_u64()
}

/// A loaded network of either kind.
pub enum AnyNet {
    Point(VelocityNet<PointNet>),
    Seq(VelocityNet<SeqNet>),
}

impl AnyNet {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(match &ckpt.arch {
            ArchSpec::Point(s) => AnyNet::Point(VelocityNet::from_params(PointNet::new(s.clone())?, ckpt.params.clone())),
            ArchSpec::Seq(s) => AnyNet::Seq(VelocityNet::from_params(SeqNet::new(s.clone())?, ckpt.params.clone())),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    fn point(self, what: &str) -> Result<VelocityNet<PointNet>> {
        match self {
            AnyNet::Point(n) => Ok(n),
            AnyNet::Seq(_) => Err(Error::Config(format!("{what} is a sequence network but the dataset is a toy distribution"))),
        }
    }

    fn seq(self, what: &str) -> Result<VelocityNet<SeqNet>> {
        match self {
            AnyNet::Seq(n) => Ok(n),
            AnyNet::Point(_) => Err(Error::Config(format!("{what} is a point network but the dataset is a composition task"))),
        }
    }
}

struct Out<'a> {
    dir: &'a Path,
    outcome: RunOutcome,
}

impl Out<'_> {
    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.outcome.artifacts.push(p.clone());
        Ok(p)
    }

    fn checkpoint<A: Architecture>(&mut self, name: &str, net: &VelocityNet<A>, optim: Option<&OptimState>, step: u64, hash: &str) -> Result<()> {
        let ckpt = Checkpoint {
            arch: net.arch.spec(),
            params: net.params.clone(),
            optim: optim.cloned(),
            step,
            config_hash: hash.to_string(),
        };
        let p = self.dir.join(name);
        save_checkpoint(&p, &ckpt)?;
        self.outcome.artifacts.push(p);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n").map(|_| ())
    }

    fn line(&mut self, text: impl AsRef<str>) {
        self.outcome.summary.push_str(text.as_ref());
        self.outcome.summary.push('\n');
    }
}

/// CSV of a single loss series.
pub fn loss_csv(curve: &LossCurve) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        let _ = writeln!(s, "{step},{loss}");
    }
    s
}

/// Sample rows as CSV, preceded by a `#` comment with the cost accounting.
pub fn samples_csv(batch: &SampleBatch, method: &str, steps: usize) -> String {
    let mut s = format!("# method={method} steps={steps} nfe={} seed={}\n", batch.nfe, batch.seed);
    let cols = batch.samples.cols();
    let header: Vec<String> = (0..cols).map(|c| format!("x{c}")).collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for r in 0..batch.samples.rows() {
        let row: Vec<String> = batch.samples.row(r).iter().map(|v| v.to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Executes `task` and writes its artifacts to `out_dir`.
pub fn run(config: &RunConfig, task: Task, out_dir: &Path) -> Result<RunOutcome> {
    config.validate()?;
    config.check_paths(task)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut out = Out { dir: out_dir, outcome: RunOutcome::default() };
    match task {
        Task::TrainTeacher => train_teacher_task(config, &mut out)?,
        Task::DistillCm => distill_cm_task(config, &mut out)?,
        Task::DistillDmd => distill_dmd_task(config, &mut out)?,
        Task::Sample => sample_task(config, &mut out)?,
        Task::Eval => eval_task(config, &mut out)?,
        Task::PackDemo => pack_demo_task(config, &mut out)?,
    }
    Ok(out.outcome)
}

fn composition_data(config: &RunConfig, k_min: usize, k_max: usize, n: usize) -> Result<Vec<CompositionSample>> {
    make_composition_dataset(k_min, k_max, n, derived(config.seed, streams::DATASET))
}

fn train_teacher_task(config: &RunConfig, out: &mut Out<'_>) -> Result<()> {
    let hash = config.hash();
    let mut init = stream_rng(config.seed, streams::INIT);
    let (losses, steps) = match (&config.dataset, &config.net) {
        (DatasetSpec::Toy { distribution }, ArchSpec::Point(spec)) => {
            let net = VelocityNet::new(PointNet::new(spec.clone())?, &mut init)?;
            let mut src = ToySource { dist: distribution.clone(), token: TOY_TOKEN };
            let r = train_teacher(net, &mut src, &config.train, config.seed)?;
            out.checkpoint("teacher.ckpt", &r.net, Some(&r.optim), r.optim.step_count(), &hash)?;
            (r.losses, r.optim.step_count())
        }
        (DatasetSpec::Composition { k_min, k_max, samples }, ArchSpec::Seq(spec)) => {
            let net = VelocityNet::new(SeqNet::new(spec.clone())?, &mut init)?;
            let mut src = CompositionSource { samples: composition_data(config, *k_min, *k_max, *samples)? };
            let r = train_teacher(net, &mut src, &config.train, config.seed)?;
            out.checkpoint("teacher.ckpt", &r.net, Some(&r.optim), r.optim.step_count(), &hash)?;
            (r.losses, r.optim.step_count())
        }
        _ => return Err(Error::Config("net kind does not match the dataset".into())),
    };
    out.write("teacher_loss.csv", loss_csv(&losses))?;
    out.write("teacher_loss.svg", line_chart("teacher flow-matching loss", &[("loss", curve_points(&losses))]))?;
    out.line(format!("trained teacher for {steps} steps; final loss {:.5}", tail_mean(&losses)));
    Ok(())
}

fn curve_points(curve: &LossCurve) -> Vec<(f64, f64)> {
    curve.iter().map(|&(s, l)| (s as f64, l)).collect()
}

fn tail_mean(curve: &LossCurve) -> f64 {
    let k = curve.len().clamp(1, 100);
    curve.iter().rev().take(k).map(|l| l.1).sum::<f64>() / k as f64
}

/// 100-step teacher samples used as consistency-distillation data.
pub fn teacher_pool(teacher: &VelocityNet<PointNet>, size: usize, cfg_scale: f64, seed: u64) -> Result<Tensor> {
    let eps = Tensor::randn(vec![size, teacher.arch.spec.dim], &mut stream_rng(seed, streams::POOL));
    Ok(euler_solve(teacher, &eps, BASELINE_STEPS, &vec![TOY_TOKEN; size], cfg_scale)?.samples)
}

fn load_teacher(config: &RunConfig) -> Result<AnyNet> {
    AnyNet::load(config.teacher.as_ref().ok_or_else(|| Error::Config("missing `teacher`".into()))?)
}

fn load_student(config: &RunConfig) -> Result<AnyNet> {
    AnyNet::load(config.student.as_ref().ok_or_else(|| Error::Config("missing `student`".into()))?)
}

fn distill_cm_task(config: &RunConfig, out: &mut Out<'_>) -> Result<()> {
    let hash = config.hash();
    let losses = match &config.dataset {
        DatasetSpec::Toy { distribution } => {
            let teacher = load_teacher(config)?.point("teacher")?;
            let r = if config.cm.teacher_pool > 0 {
                let pool = teacher_pool(&teacher, config.cm.teacher_pool, config.cm.pool_cfg_scale, config.seed)?;
                distill_cm(&teacher, &mut PoolSource { pool, token: TOY_TOKEN }, &config.cm, config.seed)?
            } else {
                distill_cm(&teacher, &mut ToySource { dist: distribution.clone(), token: TOY_TOKEN }, &config.cm, config.seed)?
            };
            out.checkpoint("cm_student.ckpt", &r.student, Some(&r.optim), r.optim.step_count(), &hash)?;
            r.losses
        }
        DatasetSpec::Composition { k_min, k_max, samples } => {
            let teacher = load_teacher(config)?.seq("teacher")?;
            let mut src = CompositionSource { samples: composition_data(config, *k_min, *k_max, *samples)? };
            let r = distill_cm(&teacher, &mut src, &config.cm, config.seed)?;
            out.checkpoint("cm_student.ckpt", &r.student, Some(&r.optim), r.optim.step_count(), &hash)?;
            r.losses
        }
    };
    out.write("cm_loss.csv", loss_csv(&losses))?;
    out.write("cm_loss.svg", line_chart("consistency loss", &[("loss", curve_points(&losses))]))?;
    out.line(format!("consistency distillation: {} steps; final loss {:.5}", losses.len(), tail_mean(&losses)));
    Ok(())
}

fn distill_dmd_task(config: &RunConfig, out: &mut Out<'_>) -> Result<()> {
    let hash = config.hash();
    let losses = match &config.dataset {
        DatasetSpec::Toy { distribution } => {
            let teacher = load_teacher(config)?.point("teacher")?;
            let student = load_student(config)?.point("student")?;
            let mut src = ToySource { dist: distribution.clone(), token: TOY_TOKEN };
            let r = distill_dmd(&student, &teacher, &mut src, &config.dmd, config.seed)?;
            out.checkpoint("dmd_student.ckpt", &r.student, None, config.dmd.steps as u64, &hash)?;
            out.checkpoint("dmd_fake.ckpt", &r.fake, None, config.dmd.steps as u64, &hash)?;
            r.losses
        }
        DatasetSpec::Composition { k_min, k_max, samples } => {
            let teacher = load_teacher(config)?.seq("teacher")?;
            let student = load_student(config)?.seq("student")?;
            let mut src = CompositionSource { samples: composition_data(config, *k_min, *k_max, *samples)? };
            let r = distill_dmd(&student, &teacher, &mut src, &config.dmd, config.seed)?;
            out.checkpoint("dmd_student.ckpt", &r.student, None, config.dmd.steps as u64, &hash)?;
            out.checkpoint("dmd_fake.ckpt", &r.fake, None, config.dmd.steps as u64, &hash)?;
            r.losses
        }
    };
    let mut csv = String::from("step,gen_loss,fake_loss\n");
    for (s, g, f) in &losses {
        let _ = writeln!(csv, "{s},{g},{f}");
    }
    out.write("dmd_loss.csv", csv)?;
    let gen: Vec<(f64, f64)> = losses.iter().map(|l| (l.0 as f64, l.1)).collect();
    let fake: Vec<(f64, f64)> = losses.iter().map(|l| (l.0 as f64, l.2)).collect();
    out.write("dmd_loss.svg", line_chart("distribution matching", &[("generator", gen), ("fake score", fake)]))?;
    out.line(format!("distribution matching: {} generator steps", losses.len()));
    Ok(())
}

#[derive(Serialize)]
struct SampleMeta {
    method: &'static str,
    steps: usize,
    nfe: usize,
    count: usize,
    seed: u64,
    wall_clock_ns: u64,
}

fn method_name(m: SampleMethod) -> &'static str {
    match m {
        SampleMethod::Euler => "euler",
        SampleMethod::Consistency => "consistency",
    }
}

fn draw<A: Architecture>(net: &VelocityNet<A>, eps: &Tensor, cond: &A::Cond, config: &RunConfig, seed: u64) -> Result<SampleBatch> {
    let s = &config.sample;
    match s.method {
        SampleMethod::Euler => euler_solve(net, eps, s.steps, cond, s.cfg_scale),
        SampleMethod::Consistency => consistency_sample(net, eps, s.steps, cond, seed),
    }
}

fn sample_task(config: &RunConfig, out: &mut Out<'_>) -> Result<()> {
    let path = config.student.as_ref().or(config.teacher.as_ref()).ok_or_else(|| Error::Config("sample needs a checkpoint".into()))?;
    let s = &config.sample;
    let seed = derived(config.seed, streams::SAMPLE);
    let method = method_name(s.method);
    let batch = match AnyNet::load(path)? {
        AnyNet::Point(net) => {
            let eps = Tensor::randn(vec![s.count, net.arch.spec.dim], &mut stream_rng(config.seed, streams::SAMPLE));
            let batch = draw(&net, &eps, &vec![TOY_TOKEN; s.count], config, seed)?;
            out.write("samples.csv", samples_csv(&batch, method, s.steps))?;
            if net.arch.spec.dim <= 2 {
                out.write("samples.svg", scatter(&format!("{method}, {} steps", s.steps), &[("samples", &batch.samples)]))?;
            }
            batch
        }
        AnyNet::Seq(net) => {
            let (k_min, k_max) = match config.dataset {
                DatasetSpec::Composition { k_min, k_max, .. } => (k_min, k_max),
                DatasetSpec::Toy { .. } => (1, crate::packing::MAX_REFERENCES),
            };
            let data = make_composition_dataset(k_min, k_max, s.count, seed)?;
            let noised: Vec<UnifiedSequence> = data
                .iter()
                .enumerate()
                .map(|(i, d)| Ok(replace_target_with_noise(&d.unified()?, seed.wrapping_add(i as u64))))
                .collect::<Result<_>>()?;
            let (eps, cond) = SeqCond::from_sequences(&noised, &vec![COMPOSE_TOKEN; noised.len()])?;
            let batch = draw(&net, &eps, &cond, config, seed)?;
            let mut bytes = Vec::new();
            let mut start = 0;
            for (seq, rows) in noised.iter().zip(cond.target_rows()) {
                let filled = seq.with_target(&batch.samples.slice_rows(start, rows)?)?;
                start += rows;
                filled.write_to(&mut bytes).map_err(|e| Error::io(out.dir, e))?;
            }
            out.write("samples.ups", bytes)?;
            batch
        }
    };
    out.json(
        "samples.meta.json",
        &SampleMeta { method, steps: s.steps, nfe: batch.nfe, count: s.count, seed: batch.seed, wall_clock_ns: batch.wall_clock_ns },
    )?;
    out.line(format!("{} samples, method {method}, {} steps, nfe {}", s.count, s.steps, batch.nfe));
    Ok(())
}

#[derive(Serialize)]
struct ToyEvalReport {
    dataset: String,
    fidelity: crate::eval::FidelityReport,
    mmd_student_teacher: f64,
    mmd_teacher_teacher: f64,
    teacher_score_check: Option<crate::eval::ScoreReport>,
}

fn eval_task(config: &RunConfig, out: &mut Out<'_>) -> Result<()> {
    let e = &config.eval;
    let seed = derived(config.seed, streams::EVAL);
    match &config.dataset {
        DatasetSpec::Toy { distribution } => {
            let teacher = load_teacher(config)?.point("teacher")?;
            let student = load_student(config)?.point("student")?;
            let fid = FidelityConfig {
                count: e.count,
                projections: e.projections,
                replicates: e.replicates,
                euler_steps: e.euler_steps,
                cfg_scale: e.cfg_scale,
                token: TOY_TOKEN,
                seed,
            };
            let fidelity = fidelity_report(
                &teacher,
                &[("student 1-step", &student, 1), ("student", &student, e.consistency_steps)],
                &fid,
            )?;
            let n = e.count;
            let dim = teacher.arch.spec.dim;
            let cond = vec![TOY_TOKEN; n];
            let mut rng = stream_rng(seed, 1);
            let t_a = euler_solve(&teacher, &Tensor::randn(vec![n, dim], &mut rng), e.euler_steps, &cond, e.cfg_scale)?.samples;
            let t_b = euler_solve(&teacher, &Tensor::randn(vec![n, dim], &mut rng), e.euler_steps, &cond, e.cfg_scale)?.samples;
            let s_a = consistency_sample(&student, &Tensor::randn(vec![n, dim], &mut rng), e.consistency_steps, &cond, seed)?.samples;
            let analytic = matches!(distribution, ToyDistribution::StandardGaussian { .. } | ToyDistribution::GaussianMixture { .. });
            let teacher_score_check = if analytic {
                let (x, t) = score_probes(distribution, &[0.25, 0.5, 0.75], 200, seed)?;
                Some(score_oracle_check(&teacher, &vec![TOY_TOKEN; x.rows()], distribution, &x, &t)?)
            } else {
                None
            };
            let report = ToyEvalReport {
                dataset: distribution.name().to_string(),
                mmd_student_teacher: mmd_rbf(&s_a, &t_a, e.mmd_bandwidth)?,
                mmd_teacher_teacher: mmd_rbf(&t_b, &t_a, e.mmd_bandwidth)?,
                fidelity,
                teacher_score_check,
            };
            let mut table = format!("{:<24} {:>6} {:>10} {:>8}\n", "set", "steps", "SW", "ratio");
            let _ = writeln!(table, "{:<24} {:>6} {:>10.5} {:>8.3}", "teacher vs teacher", e.euler_steps, report.fidelity.baseline, 1.0);
            for en in &report.fidelity.entries {
                let _ = writeln!(table, "{:<24} {:>6} {:>10.5} {:>8.3}", en.label, en.steps, en.sw, en.ratio);
            }
            let _ = writeln!(table, "MMD² student/teacher {:.6}, teacher/teacher {:.6}", report.mmd_student_teacher, report.mmd_teacher_teacher);
            if let Some(sc) = &report.teacher_score_check {
                let _ = writeln!(table, "teacher score max relative error {:.4}", sc.max_rel_error);
            }
            out.json("report.json", &report)?;
            out.write("report.txt", &table)?;
            if dim <= 2 {
                out.write("scatter.svg", scatter("teacher vs student", &[("teacher", &t_a), ("student", &s_a)]))?;
            }
            out.line(table);
            if e.speedup {
                let eps = Tensor::randn(vec![n, dim], &mut rng);
                let rep = speedup_report(&teacher, &student, &eps, &cond, e.euler_steps, e.consistency_steps, e.speedup_repeats, seed)?;
                speedup_lines(out, &rep)?;
            }
        }
        DatasetSpec::Composition { k_min, k_max, .. } => {
            let teacher = load_teacher(config)?.seq("teacher")?;
            let student = load_student(config)?.seq("student")?;
            let data = make_composition_dataset(*k_min, *k_max, e.count, seed)?;
            let gen = ConsistencyGenerator { net: &student, steps: e.consistency_steps };
            let acc = conditioning_accuracy(&gen, &data, 32, seed)?;
            let chance = conditioning_accuracy(&RandomGenerator, &data, 32, seed)?;
            let mut table = format!("{:<4} {:>10} {:>10}\n", "K", "accuracy", "random");
            for (k, &(c, n)) in &acc.per_k {
                let _ = writeln!(table, "{:<4} {:>10.3} {:>10.3}", k, c as f64 / n as f64, chance.accuracy_for(*k).unwrap_or(0.0));
            }
            let _ = writeln!(table, "all  {:>10.3} {:>10.3} (chance {:.3})", acc.accuracy, chance.accuracy, acc.chance);
            out.json("report.json", &serde_json::json!({ "student": acc, "random": chance }))?;
            out.write("report.txt", &table)?;
            out.line(table);
            if e.speedup {
                let sample = &data[..data.len().min(32)];
                let seqs: Vec<UnifiedSequence> = sample.iter().map(|d| d.unified()).collect::<Result<_>>()?;
                let (_, cond) = SeqCond::from_sequences(&seqs, &vec![COMPOSE_TOKEN; seqs.len()])?;
                let eps = Tensor::randn(vec![cond.target_rows().iter().sum(), seqs[0].token_dim()], &mut stream_rng(seed, 1));
                let rep = speedup_report(&teacher, &student, &eps, &cond, e.euler_steps, e.consistency_steps, e.speedup_repeats, seed)?;
                speedup_lines(out, &rep)?;
            }
        }
    }
    Ok(())
}

fn speedup_lines(out: &mut Out<'_>, rep: &crate::eval::SpeedupReport) -> Result<()> {
    out.json("speedup.json", rep)?;
    out.line(format!(
        "speedup: {} Euler steps (nfe {}) vs {} consistency steps (nfe {}): NFE ratio {}, wall-clock ratio {:.2}",
        rep.euler_steps, rep.euler_nfe, rep.consistency_steps, rep.consistency_nfe, rep.nfe_ratio, rep.wall_ratio
    ));
    Ok(())
}

fn pack_demo_task(config: &RunConfig, out: &mut Out<'_>) -> Result<()> {
    let (k_min, k_max) = match config.dataset {
        DatasetSpec::Composition { k_min, k_max, .. } => (k_min, k_max),
        DatasetSpec::Toy { .. } => (1, crate::packing::MAX_REFERENCES),
    };
    let data = make_composition_dataset(k_min, k_max, 8, derived(config.seed, streams::DATASET))?;
    let manifest = dump_dataset(&data, config.seed, out.dir, "demo")?;
    out.outcome.artifacts.push(out.dir.join("demo.ups"));
    out.outcome.artifacts.push(out.dir.join("demo.json"));
    let (back, _) = load_dataset(out.dir, "demo")?;
    for (i, (d, b)) in data.iter().zip(&back).enumerate() {
        if d.unified()? != *b {
            return Err(Error::Format(format!("sample {i} did not round-trip")));
        }
        let noised = replace_target_with_noise(b, i as u64);
        if noised.reference_tokens() != b.reference_tokens() {
            return Err(Error::Format(format!("noising changed the references of sample {i}")));
        }
    }
    let mut table = format!("{:<7} {:>2} {:>7} {:>24}\n", "sample", "K", "tokens", "segments (h×w@offset)");
    for (i, s) in back.iter().enumerate() {
        let segs: Vec<String> = s
            .descriptors()
            .iter()
            .zip(s.offsets())
            .map(|(d, o)| format!("{}×{}@{o}", d.height, d.width))
            .collect();
        let _ = writeln!(table, "{:<7} {:>2} {:>7} {}", i, s.num_references(), s.tokens().rows(), segs.join(" "));
    }
    let _ = writeln!(table, "{} samples written and verified; K histogram {:?}", manifest.count, manifest.k_histogram);
    out.line(table);
    Ok(())
}
