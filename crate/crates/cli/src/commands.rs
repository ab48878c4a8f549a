//! Subcommand implementations.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use molrg_core::dae::{DaeParams, Parameterization};
use molrg_core::experiments::gl::{gl_curve, GlCurveConfig};
use molrg_core::experiments::output::fmt_f64;
use molrg_core::experiments::phase::{phase_grid, Method, ModelFamily, PhaseSettings};
use molrg_core::experiments::{
    concentration_suite, derive_seed, with_threads, gl_score, rank_vs_snr, reverse_from, reverse_sample, semantic_sweep,
    JacobianSource, SamplerConfig, ScoreSource,
};
use molrg_core::molrg::{forward_perturb, Dataset, MoLRGModel};
use molrg_core::optim::{
    loss_mc, pca_oracle, score_matching_loss, sgd_train_observed, subspace_distance, NoiseSharing, TrainConfig,
};
use molrg_core::schedule::{Schedule, ScheduleKind, ScheduleState, Weighting};

use crate::args::{
    CheckArgs, Cli, Command, GenArgs, GlArgs, GlobalArgs, PhaseArgs, RankArgs, SampleArgs, ScheduleArgs, SourceArgs,
    SweepArgs, TrainArgs,
};
use crate::{usage, CliError, CliResult};

pub fn dispatch(cli: &Cli, resolved: &str) -> CliResult<()> {
    let g = &cli.global;
    create_dir(&g.out_dir)?;
    write_file(&g.out_dir.join("resolved-config.txt"), resolved)?;
    match &cli.command {
        Command::Gen(a) => gen(g, a),
        Command::Train(a) => train(g, a),
        Command::Phase(a) => phase(g, a),
        Command::Glscore(a) => glscore(g, a),
        Command::Rank(a) => rank(g, a),
        Command::Sweep(a) => sweep(g, a),
        Command::Sample(a) => sample(g, a),
        Command::Check(a) => check(g, a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn load_model(path: &Path) -> CliResult<MoLRGModel> {
    Ok(MoLRGModel::from_json(&read_file(path)?)?)
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::from_json(&read_file(path)?)?)
}

fn load_params(path: &Path) -> CliResult<DaeParams> {
    Ok(DaeParams::from_json(&read_file(path)?)?)
}

/// `a..b` (inclusive) ranges and single values, comma separated.
pub fn parse_usize_list(s: &str) -> CliResult<Vec<usize>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || usage(format!("bad integer list {s:?}"));
        if let Some((a, b)) = part.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    Ok(out)
}

pub fn parse_f64_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| usage(format!("bad number list {s:?}"))))
        .collect()
}

fn parse_auto<T: std::str::FromStr>(s: &str, name: &str) -> CliResult<Option<T>> {
    if s == "auto" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| usage(format!("bad value {s:?} for --{name}")))
}

fn schedule_from(kind: &str, a: &ScheduleArgs) -> CliResult<Schedule> {
    let kind: ScheduleKind = kind.parse()?;
    let lambda: Weighting = a.weighting.parse()?;
    let s = match kind {
        ScheduleKind::VeLinear => Schedule::ve_linear(a.sigma_min, a.sigma_max)?,
        ScheduleKind::Vp => Schedule::vp(a.beta_min, a.beta_max)?,
    };
    Ok(s.with_weighting(lambda))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gen(g: &GlobalArgs, a: &GenArgs) -> CliResult<()> {
    let m = &a.model;
    let mut rng = rng(g.seed);
    let model = MoLRGModel::random(&mut rng, m.n, &vec![m.d; m.k], m.orth)?;
    let data = if a.balanced {
        if m.k == 0 || a.num % m.k != 0 {
            return Err(usage(format!("--num {} is not a multiple of --k {}", a.num, m.k)));
        }
        model.sample_dataset_balanced(&mut rng, a.num / m.k, a.noise)?
    } else {
        model.sample_dataset(&mut rng, a.num, a.noise)?
    };
    write_file(&g.out_dir.join("model.json"), &model.to_json())?;
    write_file(&g.out_dir.join("dataset.json"), &data.to_json())?;
    println!("wrote model.json and dataset.json ({} samples, n = {}) to {}", data.len(), data.n(), g.out_dir.display());
    Ok(())
}

fn train(g: &GlobalArgs, a: &TrainArgs) -> CliResult<()> {
    let data_path = a.data.clone().unwrap_or_else(|| g.out_dir.join("dataset.json"));
    let data = load_dataset(&data_path)?;
    let model_path = a.model.clone().unwrap_or_else(|| g.out_dir.join("model.json"));
    let model = if a.model.is_some() || model_path.exists() { Some(load_model(&model_path)?) } else { None };
    let dims: Vec<usize> = if a.dims == "auto" {
        match &model {
            Some(m) => m.dims().to_vec(),
            None => return Err(usage("no model file; pass --dims")),
        }
    } else {
        parse_usize_list(&a.dims)?
    };
    let k = dims.len();
    let kind: Parameterization = match a.param.as_str() {
        "auto" if k == 1 => Parameterization::Single,
        "auto" => Parameterization::Softmax,
        p => p.parse()?,
    };
    let n_k = (data.len() / k.max(1)).max(1);
    let mut cfg = if k == 1 { TrainConfig::single_defaults(n_k) } else { TrainConfig::mixture_defaults() };
    if let Some(v) = parse_auto(&a.lr, "lr")? {
        cfg.learning_rate = v;
    }
    if let Some(v) = parse_auto(&a.batch, "batch")? {
        cfg.batch = v;
    }
    if let Some(v) = parse_auto(&a.iters, "iters")? {
        cfg.iters = v;
    }
    if let Some(v) = parse_auto(&a.log_every, "log-every")? {
        cfg.log_every = v;
    }
    cfg.time_steps = a.time_steps;
    cfg.noise = a.noise_sharing.parse::<NoiseSharing>()?;
    cfg.seed = g.seed;
    let init = match a.init_from_truth {
        Some(p) => {
            cfg.init_perturb = p;
            Some(model.as_ref().ok_or_else(|| usage("--init-from-truth needs a model file"))?)
        }
        None => None,
    };
    let schedule = schedule_from(&a.schedule, &a.sched)?;

    let trace_path = g.out_dir.join("loss_trace.csv");
    let mut trace = File::create(&trace_path).map_err(io_err(&trace_path))?;
    writeln!(trace, "iter,loss_mc_estimate,grad_norm").map_err(io_err(&trace_path))?;
    let mut write_error = None;
    let outcome = sgd_train_observed(&data, &schedule, &cfg, init, &dims, kind, &mut |row, _| {
        if write_error.is_none() {
            let line = format!("{},{},{}\n", row.iter, fmt_f64(row.loss), fmt_f64(row.grad_norm));
            if let Err(e) = trace.write_all(line.as_bytes()).and_then(|_| trace.flush()) {
                write_error = Some(e);
            }
        }
    });
    if let Some(e) = write_error {
        return Err(CliError::Io { path: trace_path, source: e });
    }
    let outcome = outcome?;
    write_file(&g.out_dir.join("params.json"), &outcome.params.to_json())?;
    if let Some(m) = &model {
        if m.dims() == dims.as_slice() {
            let rep = molrg_core::optim::match_and_score(outcome.params.bases(), m.bases(), 0.5)?;
            println!("mean distance to the true bases: {}", fmt_f64(rep.mean_distance));
        }
    }
    println!("wrote params.json and loss_trace.csv to {}", g.out_dir.display());
    Ok(())
}

fn phase(g: &GlobalArgs, a: &PhaseArgs) -> CliResult<()> {
    let ds = parse_usize_list(&a.d)?;
    let ns = parse_usize_list(&a.num)?;
    let method: Method = a.method.parse()?;
    let mut settings = PhaseSettings::new(ModelFamily { k: a.k, n: a.n, orth: a.orth }, method, a.trials, g.seed);
    settings.noise = a.noise;
    settings.restarts = a.restarts;
    settings.schedule = schedule_from(&a.schedule, &a.sched)?;
    settings.threads = g.threads;
    let grid = phase_grid(&ds, &ns, &settings)?;
    write_file(&g.out_dir.join("phase.csv"), &grid.to_csv())?;
    write_file(&g.out_dir.join("phase.svg"), &grid.to_svg())?;
    println!("wrote phase.csv and phase.svg ({}×{} cells) to {}", ds.len(), ns.len(), g.out_dir.display());
    Ok(())
}

fn glscore(g: &GlobalArgs, a: &GlArgs) -> CliResult<()> {
    let schedule = schedule_from(&a.schedule, &a.sched)?;
    let sampler = SamplerConfig::default().with_steps(a.steps);
    if let Some(gen_path) = &a.generated {
        let generated = load_dataset(gen_path)?.samples;
        let data = load_dataset(&a.data.clone().unwrap_or_else(|| g.out_dir.join("dataset.json")))?;
        let model = load_model(&a.model.clone().unwrap_or_else(|| g.out_dir.join("model.json")))?;
        let reference = model.sample_clean(&mut rng(g.seed), generated.ncols())?;
        let score = gl_score(&generated, &data.samples, &reference)?;
        write_file(&g.out_dir.join("glscore.csv"), &format!("score\n{}\n", fmt_f64(score)))?;
        println!("GL score {}", fmt_f64(score));
        return Ok(());
    }
    let mut train = TrainConfig::mixture_defaults();
    train.iters = a.iters;
    train.learning_rate = a.lr;
    train.batch = a.batch;
    train.noise = NoiseSharing::PerSample;
    train.init_perturb = a.init_perturb;
    let cfg = GlCurveConfig {
        n: a.n,
        k: a.k,
        orth: true,
        d_values: parse_usize_list(&a.d)?,
        multipliers: parse_f64_list(&a.ratios)?,
        seeds: (0..a.seeds).map(|i| g.seed.wrapping_add(i)).collect(),
        noise: 0.0,
        schedule,
        train,
        init_from_truth: true,
        sampler,
    };
    let curve = with_threads(g.threads, || gl_curve(&cfg))??;
    write_file(&g.out_dir.join("gl_curve.csv"), &curve.to_csv())?;
    println!("wrote gl_curve.csv ({} points) to {}", curve.points.len(), g.out_dir.display());
    Ok(())
}

enum Source {
    Model(MoLRGModel),
    Params(DaeParams),
}

impl Source {
    fn jacobian(&self) -> JacobianSource<'_> {
        match self {
            Self::Model(m) => JacobianSource::GroundTruth(m),
            Self::Params(p) => JacobianSource::Learned(p),
        }
    }

    fn score(&self) -> ScoreSource<'_> {
        match self {
            Self::Model(m) => ScoreSource::GroundTruth(m),
            Self::Params(p) => ScoreSource::Learned(p),
        }
    }

    fn n(&self) -> usize {
        match self {
            Self::Model(m) => m.n(),
            Self::Params(p) => p.n(),
        }
    }
}

fn load_source(g: &GlobalArgs, s: &SourceArgs) -> CliResult<Source> {
    if let Some(p) = &s.params {
        if s.model.is_some() {
            return Err(usage("pass either --model or --params, not both"));
        }
        return Ok(Source::Params(load_params(p)?));
    }
    let path = s.model.clone().unwrap_or_else(|| g.out_dir.join("model.json"));
    Ok(Source::Model(load_model(&path)?))
}

fn clean_sample(s: &SourceArgs, src: &Source, rng: &mut ChaCha8Rng) -> CliResult<DVector<f64>> {
    let x0 = if let Some(path) = &s.data {
        let data = load_dataset(path)?;
        data.sample(0)
    } else {
        match src {
            Source::Model(m) => m.sample_clean(rng, 1)?.column(0).into_owned(),
            Source::Params(_) => return Err(usage("with --params, pass --data for the clean sample")),
        }
    };
    if x0.len() != src.n() {
        return Err(usage("data and model dimensions differ"));
    }
    Ok(x0)
}

fn rank(g: &GlobalArgs, a: &RankArgs) -> CliResult<()> {
    let src = load_source(g, &a.source)?;
    let mut rng = rng(g.seed);
    let x0 = clean_sample(&a.source, &src, &mut rng)?;
    let schedule = schedule_from(&a.schedule, &a.sched)?;
    let reports = rank_vs_snr(&src.jacobian(), &x0, &schedule, a.time_steps, a.trajectories, a.eta, &mut rng)?;
    let mut csv = String::from("t,snr,sigma,numerical_rank,n,rank_ratio\n");
    for r in reports.iter().flatten() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(r.t),
            fmt_f64(r.snr),
            fmt_f64(r.sigma),
            r.numerical_rank,
            r.n,
            fmt_f64(r.rank_ratio())
        ));
    }
    write_file(&g.out_dir.join("rank.csv"), &csv)?;
    println!("wrote rank.csv ({} trajectories) to {}", reports.len(), g.out_dir.display());
    Ok(())
}

fn sweep(g: &GlobalArgs, a: &SweepArgs) -> CliResult<()> {
    let src = load_source(g, &a.source)?;
    let mut rng = rng(g.seed);
    let x0 = clean_sample(&a.source, &src, &mut rng)?;
    let schedule = schedule_from(&a.schedule, &a.sched)?;
    let st = schedule.eval(a.t)?;
    let x_t = forward_perturb(&x0, &st, &mut rng);
    let alphas = parse_f64_list(&a.alphas)?;
    let sampler = SamplerConfig::default().with_steps(a.steps);
    let r = semantic_sweep(&src.jacobian(), &x_t, a.t, &schedule, &sampler, a.index, &alphas, a.eta, &mut rng)?;
    let n = src.n();
    let mut csv = String::from("kind,alpha");
    for i in 0..n {
        csv.push_str(&format!(",x{i}"));
    }
    csv.push('\n');
    for (kind, xs) in [("singular", &r.samples), ("random", &r.control_samples)] {
        for (alpha, x) in r.alphas.iter().zip(xs.iter()) {
            csv.push_str(&format!("{kind},{}", fmt_f64(*alpha)));
            for v in x.iter() {
                csv.push_str(&format!(",{}", fmt_f64(*v)));
            }
            csv.push('\n');
        }
    }
    write_file(&g.out_dir.join("sweep.csv"), &csv)?;
    println!("wrote sweep.csv (numerical rank {}) to {}", r.numerical_rank, g.out_dir.display());
    Ok(())
}

fn sample(g: &GlobalArgs, a: &SampleArgs) -> CliResult<()> {
    let src = load_source(g, &a.source)?;
    let schedule = schedule_from(&a.schedule, &a.sched)?;
    let cfg = SamplerConfig { steps: a.steps, sigma_end: a.sigma_end, ..SamplerConfig::default() };
    let xs = reverse_sample(&src.score(), &schedule, &cfg, src.n(), a.count, &mut rng(g.seed))?;
    write_file(&g.out_dir.join("samples.json"), &Dataset::from_samples(xs).to_json())?;
    println!("wrote samples.json ({} samples) to {}", a.count, g.out_dir.display());
    Ok(())
}

struct Checks {
    lines: Vec<String>,
    failures: usize,
}

impl Checks {
    fn record(&mut self, name: &str, result: CliResult<(bool, String)>) {
        let (ok, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            self.failures += 1;
        }
        let line = format!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push(line);
    }
}

fn check(g: &GlobalArgs, a: &CheckArgs) -> CliResult<()> {
    let mut c = Checks { lines: Vec::new(), failures: 0 };
    let (trials, count) = if a.quick { (3, 2000) } else { (50, 10_000) };

    c.record("concentration", (|| {
        let r = concentration_suite(trials, 100, count, &mut rng(g.seed))?;
        Ok((
            r.norm_rate() < 1e-3 && r.cov_rate() < 1e-3,
            format!("norm violations {}/{}, covariance violations {}/{}", r.norm_violations, r.norm_checks, r.cov_violations, r.cov_checks),
        ))
    })());

    c.record("tweedie", (|| {
        let mut rng = rng(derive_seed(g.seed, 1, 0, 0));
        let schedule = Schedule::vp(0.1, 20.0)?;
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let model = MoLRGModel::random(&mut rng, 12, &[2, 3], true)?;
            let st = schedule.eval(0.05 + 0.9 * i as f64 / 50.0)?;
            let x = forward_perturb(&model.sample_clean(&mut rng, 1)?.column(0).into_owned(), &st, &mut rng);
            let lhs = model.posterior_mean(&x, &st)? * st.s - &x;
            let rhs = model.score(&x, &st)? * (st.gamma * st.gamma);
            worst = worst.max((lhs - rhs).norm() / (1.0 + x.norm()));
        }
        Ok((worst <= 1e-10, format!("worst relative residual {worst:.3e}")))
    })());

    c.record("loss identity", (|| {
        let mut rng0 = rng(derive_seed(g.seed, 2, 0, 0));
        let model = MoLRGModel::random(&mut rng0, 10, &[2, 2], true)?;
        let data = model.sample_dataset(&mut rng0, 6, 0.0)?;
        let schedule = Schedule::vp(0.1, 20.0)?;
        let a1 = loss_mc(&model, &data, &schedule, 8, 3, &mut rng(5))?;
        let a2 = score_matching_loss(&model, &data, &schedule, 8, 3, &mut rng(5))?;
        let diff = (a1.value - a2.value).abs();
        Ok((diff <= 1e-10, format!("|difference| {diff:.3e}")))
    })());

    c.record("pca dichotomy", (|| {
        let s = PhaseSettings::new(ModelFamily { k: 1, n: 24, orth: true }, Method::Pca, 3, g.seed);
        let grid = phase_grid(&[2, 4], &[1, 2, 3, 4, 5], &s)?;
        let mut ok = true;
        for (i, &d) in grid.d_values.iter().enumerate() {
            for (j, &n) in grid.n_values.iter().enumerate() {
                let r = grid.rates[i][j];
                ok &= if n >= d { r == 1.0 } else if n + 2 <= d { r == 0.0 } else { true };
            }
        }
        Ok((ok, "rates 1 for N ≥ d and 0 for N ≤ d − 2".into()))
    })());

    c.record("thread determinism", (|| {
        let mut s = PhaseSettings::new(ModelFamily { k: 2, n: 16, orth: true }, Method::KSubspaces, 2, g.seed);
        s.threads = 1;
        let a1 = phase_grid(&[2, 3], &[2, 4], &s)?.to_csv();
        s.threads = 4;
        let a2 = phase_grid(&[2, 3], &[2, 4], &s)?.to_csv();
        Ok((a1 == a2, "phase CSV identical across worker counts".into()))
    })());

    c.record("pca from zero noise", (|| {
        let mut rng = rng(derive_seed(g.seed, 3, 0, 0));
        let model = MoLRGModel::random(&mut rng, 20, &[3], true)?;
        let data = model.sample_dataset(&mut rng, 10, 0.0)?;
        let dist = subspace_distance(&pca_oracle(&data.samples, 3)?, &model.bases()[0])?;
        Ok((dist < 1e-8, format!("distance {dist:.3e}")))
    })());

    c.record("sampler", (|| {
        let mut rng = rng(derive_seed(g.seed, 4, 0, 0));
        let model = MoLRGModel::random(&mut rng, 10, &[3], true)?;
        let schedule = Schedule::vp(0.1, 20.0)?;
        let xs = reverse_sample(&ScoreSource::GroundTruth(&model), &schedule, &SamplerConfig::default(), 10, 20, &mut rng)?;
        let u = &model.bases()[0];
        let resid = off_subspace(u, &xs);
        let zero = |x: &DVector<f64>, _: &ScheduleState| Ok(DVector::zeros(x.len()));
        let ve = Schedule::ve_linear(0.0, 1.0)?;
        let x = DVector::from_element(10, 0.5);
        let same = reverse_from(&ScoreSource::Custom(&zero), &ve, &SamplerConfig::default(), &x, 1.0)? == x;
        Ok((resid <= 0.05 && same, format!("mean off-subspace residual {resid:.3e}")))
    })());

    write_file(&g.out_dir.join("check.txt"), &(c.lines.join("\n") + "\n"))?;
    if c.failures > 0 {
        return Err(CliError::Checks(c.failures));
    }
    Ok(())
}

fn off_subspace(u: &DMatrix<f64>, xs: &DMatrix<f64>) -> f64 {
    xs.column_iter()
        .map(|x| {
            let x = x.into_owned();
            (&x - u * (u.transpose() * &x)).norm() / x.norm()
        })
        .sum::<f64>()
        / xs.ncols() as f64
}
