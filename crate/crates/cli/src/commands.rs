use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stefan_pinn::diff::Mlp;
use stefan_pinn::eval::{ensemble, evaluate, EvalGrid, ReferenceLattice};
use stefan_pinn::fd::{convergence_study, loglog_slope, solve, Grid};
use stefan_pinn::io::{key_values, slices_csv, FieldTable, SLICE_TIMES};
use stefan_pinn::stefan::{exact_theta, interface_from_samples, solve_lambda0, StefanConfig};
use stefan_pinn::trainer::{
    curriculum, history_csv, sample_set, train, DynamicVariant, LrSchedule, Regime, TrainConfig, TrainOutput, Weighting,
};
use stefan_pinn::{Grid64, Result, StefanConfig64, StefanError};

use crate::{Cli, Command, ProblemArgs, ReferenceArgs, TrainOpts};

type Pairs = Vec<(String, String)>;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Exact(a) => {
            let cfg = problem(&a.problem)?;
            exact(&output_dir(&cli.out, "exact")?, &cfg, a.nx, &a.times, problem_pairs(&a.problem))
        }
        Command::Fd(a) => {
            let cfg = problem(&a.problem)?;
            let mut echo = problem_pairs(&a.problem);
            echo.push(("h".into(), a.h.to_string()));
            let grid = match (a.nx, a.dt) {
                (None, None) => Grid::equal_steps(&cfg, a.h)?,
                (nx, dt) => {
                    let nx = nx.unwrap_or(((cfg.x1 - cfg.x0) / a.h).round() as usize + 1);
                    Grid::with_dt(&cfg, nx, dt.unwrap_or(a.h))?
                }
            };
            echo.push(("nx".into(), grid.nx.to_string()));
            echo.push(("dt".into(), grid.dt.to_string()));
            fd(&output_dir(&cli.out, "fd")?, &cfg, &grid, echo)
        }
        Command::Converge(a) => {
            let cfg = problem(&a.problem)?;
            let mut echo = problem_pairs(&a.problem);
            echo.push(("steps".into(), join(&a.steps)));
            echo.push(("h-min".into(), a.h_min.to_string()));
            converge(&output_dir(&cli.out, "converge")?, &cfg, &a.steps, a.h_min, echo)
        }
        Command::Train(a) => {
            let cfg = problem(&a.problem)?;
            let tc = train_config(&a.train, a.problem.seed)?;
            let dir = output_dir(&cli.out, "train")?;
            let mut echo = problem_pairs(&a.problem);
            echo.extend(tc.describe());
            let reference = if a.train.no_metrics { None } else { Some(reference(&cfg, &a.reference, &mut echo)?) };
            write(&dir, "resolved_config.txt", &key_values(&echo))?;
            if a.dump_samples {
                write(&dir, "samples.csv", &sample_set(&cfg, &tc)?.to_csv())?;
                if let Some(schedule) = curriculum(&cfg, &tc)? {
                    let mut s = String::from("t,x,first_stage\n");
                    for st in &schedule.stages {
                        let lo = if st.k == 1 { 0 } else { schedule.stages[st.k - 2].n_residual };
                        for p in &schedule.residual_points[lo..st.n_residual] {
                            let _ = writeln!(s, "{:.16e},{:.16e},{}", p[0], p[1], st.k);
                        }
                    }
                    write(&dir, "curriculum_points.csv", &s)?;
                }
            }
            let out = train(&cfg, &tc, reference.as_ref())?;
            write_run(&dir, &out, reference.as_ref())?;
            match out.final_rel_l2 {
                Some(e) => println!("{}: final relative L2 error {e:.6e}", tc.regime.name()),
                None => println!("{}: final weighted loss {:.6e}", tc.regime.name(), out.final_loss.weighted_total),
            }
            Ok(())
        }
        Command::Eval(a) => {
            let cfg = problem(&a.problem)?;
            let text = fs::read_to_string(&a.checkpoint)?;
            let net = Mlp::<f64>::from_checkpoint(&text)?;
            let dir = output_dir(&cli.out, "eval")?;
            let mut echo = problem_pairs(&a.problem);
            echo.push(("checkpoint".into(), a.checkpoint.display().to_string()));
            let lat = reference(&cfg, &a.reference, &mut echo)?;
            write(&dir, "resolved_config.txt", &key_values(&echo))?;
            let e = evaluate(&net, &lat)?;
            write(&dir, "error_field.csv", &FieldTable::from_lattice(&lat.grid, &e.abs_error)?.to_csv())?;
            write(&dir, "slices.csv", &slices_csv(&lat.grid, &lat.values, &e.prediction, &SLICE_TIMES)?)?;
            write(&dir, "metrics.txt", &format!("rel_l2 = {:.16e}\n", e.rel_l2))?;
            println!("relative L2 error {:.6e}", e.rel_l2);
            Ok(())
        }
        Command::Ensemble(a) => {
            let cfg = problem(&a.problem)?;
            let tc = train_config(&a.train, a.problem.seed)?;
            let dir = output_dir(&cli.out, "ensemble")?;
            let mut echo = problem_pairs(&a.problem);
            let lat = reference(&cfg, &a.reference, &mut echo)?;
            let threads = a.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let report = ensemble(&cfg, &tc, &a.seeds, &lat, threads)?;
            echo.extend(report.config.iter().cloned());
            write(&dir, "resolved_config.txt", &key_values(&echo))?;
            let mut summary = String::from("seed,status,rel_l2\n");
            for run in &report.runs {
                match &run.outcome {
                    Ok(out) => {
                        let sub = output_dir(&dir, &format!("seed-{}", run.seed))?;
                        write_run(&sub, out, Some(&lat))?;
                        let e = out.final_rel_l2.map(|v| format!("{v:.16e}")).unwrap_or_default();
                        let _ = writeln!(summary, "{},ok,{e}", run.seed);
                    }
                    Err(err) => {
                        eprintln!("seed {} failed: {err}", run.seed);
                        let _ = writeln!(summary, "{},failed: {err},", run.seed);
                    }
                }
            }
            write(&dir, "seeds.csv", &summary)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.16e}"));
            let stats = format!(
                "regime = {}\nseeds = {}\nsucceeded = {}\nmean = {}\nstd = {}\nmedian = {}\n",
                tc.regime.name(),
                report.runs.len(),
                report.errors().len(),
                fmt(report.mean),
                fmt(report.std),
                fmt(report.median)
            );
            write(&dir, "report.txt", &stats)?;
            print!("{stats}");
            if report.errors().is_empty() {
                // every seed failed: surface the first error's exit code
                let first = report.runs.into_iter().find_map(|r| r.outcome.err()).expect("no successful seed");
                return Err(first);
            }
            Ok(())
        }
    }
}

fn problem(p: &ProblemArgs) -> Result<StefanConfig64> {
    let cfg = StefanConfig { ste: p.ste, fo: p.fo, delta: p.delta, theta_l: p.theta_l, theta_r: p.theta_r, ..StefanConfig::baseline() };
    cfg.validate()?;
    Ok(cfg)
}

fn problem_pairs(p: &ProblemArgs) -> Pairs {
    vec![
        ("ste".into(), p.ste.to_string()),
        ("fo".into(), p.fo.to_string()),
        ("delta".into(), p.delta.to_string()),
        ("theta-l".into(), p.theta_l.to_string()),
        ("theta-r".into(), p.theta_r.to_string()),
        ("seed".into(), p.seed.to_string()),
    ]
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn output_dir(root: &Path, name: &str) -> Result<PathBuf> {
    let dir = root.join(name);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn train_config(o: &TrainOpts, seed: u64) -> Result<TrainConfig<f64>> {
    let mut regime = Regime::<f64>::from_name(&o.regime)?;
    let weighting = match &mut regime {
        Regime::Plain(w) => w,
        Regime::Sequential { weighting, curriculum, loss_threshold } => {
            curriculum.dt_seq = o.seq_dt.unwrap_or(curriculum.dt_seq);
            curriculum.budget = o.seq_budget.unwrap_or(curriculum.budget);
            curriculum.base_nr = o.seq_base_nr.unwrap_or(curriculum.base_nr);
            curriculum.incr = o.seq_incr.unwrap_or(curriculum.incr);
            *loss_threshold = o.seq_threshold;
            weighting
        }
    };
    let misplaced = |flag: &str| Err(StefanError::InvalidConfig(format!("--{flag} does not apply to regime {}", o.regime)));
    match weighting {
        Weighting::Static { omega0 } => *omega0 = o.omega0.unwrap_or(*omega0),
        Weighting::Dynamic(p) => {
            p.alpha = o.dynamic_alpha.unwrap_or(p.alpha);
            p.every = o.dynamic_every.unwrap_or(p.every);
            if let Some(v) = &o.dynamic_variant {
                p.variant = match v.as_str() {
                    "weight-in-denominator" => DynamicVariant::WeightInDenominator,
                    "annealing" => DynamicVariant::Annealing,
                    _ => return Err(StefanError::InvalidConfig(format!("unknown dynamic variant {v:?}"))),
                };
            }
        }
        Weighting::Pointwise(p) => p.ascent_lr = o.ascent_lr.unwrap_or(p.ascent_lr),
        Weighting::Uniform => {}
    }
    if o.omega0.is_some() && !matches!(weighting, Weighting::Static { .. }) {
        return misplaced("omega0");
    }
    if (o.dynamic_alpha.is_some() || o.dynamic_every.is_some() || o.dynamic_variant.is_some())
        && !matches!(weighting, Weighting::Dynamic(_))
    {
        return misplaced("dynamic-*");
    }
    let sequential = matches!(regime, Regime::Sequential { .. });
    if !sequential && (o.seq_dt.is_some() || o.seq_budget.is_some() || o.seq_threshold.is_some() || o.seq_base_nr.is_some() || o.seq_incr.is_some()) {
        return misplaced("seq-*");
    }
    let base = TrainConfig::paper(regime);
    let lr = LrSchedule::new(
        o.lr_eta.unwrap_or(base.lr.eta),
        o.lr_gamma.unwrap_or(base.lr.gamma),
        o.lr_kappa.unwrap_or(base.lr.kappa),
    )?;
    let tc = TrainConfig {
        layer_sizes: o.layers.clone().unwrap_or(base.layer_sizes.clone()),
        n_initial: o.n_initial,
        n_boundary: o.n_boundary,
        n_residual: o.n_residual,
        iterations: o.iterations,
        seed,
        lr,
        metric_every: o.metric_every,
        log_every: o.log_every,
        normalize_inputs: o.normalize_inputs,
        ..base
    };
    tc.validate()?;
    Ok(tc)
}

fn reference(cfg: &StefanConfig64, r: &ReferenceArgs, echo: &mut Pairs) -> Result<ReferenceLattice<f64>> {
    let h = r.ref_h.unwrap_or(if cfg.ste < 0.05 { 1.0 / 4096.0 } else { 1.0 / 1024.0 });
    echo.push(("ref-h".into(), h.to_string()));
    echo.push(("eval-nt".into(), r.eval_nt.to_string()));
    echo.push(("eval-nx".into(), r.eval_nx.to_string()));
    let sol = solve(cfg, &Grid::equal_steps(cfg, h)?)?;
    Ok(ReferenceLattice::from_fd(&sol, EvalGrid::new(cfg, r.eval_nt, r.eval_nx)?))
}

fn write_run(dir: &Path, out: &TrainOutput<f64>, reference: Option<&ReferenceLattice<f64>>) -> Result<()> {
    write(dir, "history.csv", &history_csv(&out.history))?;
    write(dir, "model.ckpt", &out.net.to_checkpoint())?;
    if !out.stages.is_empty() {
        let mut s = String::from("stage,t_end,start_iteration,iterations,own_window_rel_l2\n");
        for st in &out.stages {
            let e = st.own_window_error().map(|v| format!("{v:.16e}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.16e},{},{},{e}", st.k, st.t_end, st.start_iteration, st.iterations);
        }
        write(dir, "stages.csv", &s)?;
    }
    if let Some(pw) = &out.point_weights {
        let mut s = String::from("family,index,w,mask\n");
        for (i, w) in pw.w_i.iter().enumerate() {
            let _ = writeln!(s, "initial,{i},{w:.16e},{:.16e}", pw.mask_i.value(*w));
        }
        for (i, w) in pw.w_r.iter().enumerate() {
            let _ = writeln!(s, "residual,{i},{w:.16e},{:.16e}", pw.mask_r.value(*w));
        }
        write(dir, "point_weights.csv", &s)?;
    }
    if let Some(lat) = reference {
        let e = evaluate(&out.net, lat)?;
        write(dir, "error_field.csv", &FieldTable::from_lattice(&lat.grid, &e.abs_error)?.to_csv())?;
        write(dir, "slices.csv", &slices_csv(&lat.grid, &lat.values, &e.prediction, &SLICE_TIMES)?)?;
    }
    Ok(())
}

fn exact(dir: &Path, cfg: &StefanConfig64, nx: usize, times: &[f64], echo: Pairs) -> Result<()> {
    if nx < 2 || times.is_empty() {
        return Err(StefanError::InvalidConfig("exact needs nx >= 2 and at least one time".into()));
    }
    let lam = solve_lambda0(cfg)?;
    let xs: Vec<f64> = (0..nx).map(|j| cfg.x0 + (cfg.x1 - cfg.x0) * j as f64 / (nx - 1) as f64).collect();
    let values = times.iter().flat_map(|&t| xs.iter().map(move |&x| exact_theta(cfg, &lam, t, x))).collect();
    let table = FieldTable { ts: times.to_vec(), xs, values };
    write(dir, "resolved_config.txt", &key_values(&echo))?;
    write(dir, "exact.csv", &table.to_csv())?;
    let mut s = format!("lambda0 = {:.16e}\nresidual = {:.3e}\n", lam.lambda0, lam.residual);
    for &t in times {
        let _ = writeln!(s, "interface({t}) = {:.16e}", lam.position(cfg, t));
    }
    write(dir, "lambda.txt", &s)?;
    print!("{s}");
    Ok(())
}

fn fd(dir: &Path, cfg: &StefanConfig64, grid: &Grid64, echo: Pairs) -> Result<()> {
    let sol = solve(cfg, grid)?;
    write(dir, "resolved_config.txt", &key_values(&echo))?;
    write(dir, "fd_solution.csv", &FieldTable::from_fd(&sol).to_csv())?;
    let mut s = String::from("t,interface_fd,interface_exact\n");
    for f in &sol.snapshots {
        let fd = interface_from_samples(&f.values, grid.x0, grid.dx).map(|v| format!("{v:.16e}")).unwrap_or_default();
        let _ = writeln!(s, "{:.16e},{fd},{:.16e}", f.time, sol.lambda.position(cfg, f.time));
    }
    write(dir, "interface.csv", &s)?;
    let info = format!(
        "nx = {}\nnt = {}\ndx = {:.16e}\ndt = {:.16e}\nmax_newton_iterations = {}\n",
        grid.nx,
        grid.nt,
        grid.dx,
        grid.dt,
        sol.newton_iterations.iter().max().copied().unwrap_or(0)
    );
    write(dir, "fd_grid.txt", &info)?;
    print!("{info}");
    Ok(())
}

fn converge(dir: &Path, cfg: &StefanConfig64, steps: &[f64], h_min: f64, echo: Pairs) -> Result<()> {
    let rows = convergence_study(cfg, steps, h_min)?;
    let mut s = String::from("h,rel_l2\n");
    for r in &rows {
        let _ = writeln!(s, "{:.16e},{:.16e}", r.h, r.rel_l2);
    }
    write(dir, "resolved_config.txt", &key_values(&echo))?;
    write(dir, "converge.csv", &s)?;
    let slope = loglog_slope(&rows);
    print!("{s}");
    match slope {
        Some(p) => println!("slope {p:.4}"),
        None => println!("slope n/a (need two steps)"),
    }
    Ok(())
}
