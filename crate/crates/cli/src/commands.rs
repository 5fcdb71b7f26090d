//! The five subcommands. Each writes its CSV files and returns a short
//! text summary.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use embspec_core::decay::{fit_decay_rate, random_probe, DecayFit, RoughnessProbe};
use embspec_core::floquet::{band_position, floquet_decomposition, FloquetData, PeriodicSystem};
use embspec_core::ode::IntegratorConfig;
use embspec_core::persistence::{persistence_scan, TangentData, VectorProfile};
use embspec_core::potentials::{make_example5_with_beta, make_perturbation, Perturbation, PerturbationClass, Potential};
use embspec_core::spectral::{band_scan, EigenCandidate, Eigenfunction, MatchingProblem};
use embspec_core::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Direction, LoadedConfig};
use crate::output::{metadata, write_csv};
use crate::{CliError, Command};

pub struct Context<'a> {
    pub cfg: &'a LoadedConfig,
    pub out: &'a Path,
    pub seed: u64,
    pub command: Command,
}

impl Context<'_> {
    fn header(&self) -> Vec<String> {
        metadata(self.cfg, self.command.name(), self.seed)
    }

    fn integrator(&self) -> IntegratorConfig {
        self.cfg.integrator()
    }

    fn problem(&self, potential: Potential, b: Option<Perturbation>) -> Result<MatchingProblem, CliError> {
        Ok(MatchingProblem::new(potential, b, self.cfg.config.matching)?
            .with_integrator(self.integrator())
            .with_tolerance(self.cfg.tolerance()))
    }

    fn floquet_at(&self, potential: &Potential, lambda: f64) -> Result<(PeriodicSystem, FloquetData), CliError> {
        let sys = PeriodicSystem::at_infinity(potential, lambda);
        let data = floquet_decomposition(&sys, &self.integrator(), self.cfg.tolerance())?;
        Ok((sys, data))
    }
}

#[derive(Serialize)]
struct BandRow {
    lambda: f64,
    discriminant: f64,
    in_band: bool,
}

#[derive(Serialize)]
struct EdgeRow {
    band: usize,
    lower: f64,
    upper: f64,
}

pub fn bands(ctx: &Context) -> Result<String, CliError> {
    let c = &ctx.cfg.config;
    let pot = ctx.cfg.potential()?;
    let vp = pot.periodic_component(c.bands.component)?;
    let bs = band_scan(
        &vp,
        pot.period,
        (c.bands.lambda_min, c.bands.lambda_max),
        c.bands.samples,
        &ctx.integrator(),
    )?;
    let rows: Vec<BandRow> = bs
        .lambdas
        .iter()
        .zip(&bs.discriminants)
        .zip(&bs.in_band)
        .map(|((l, d), b)| BandRow {
            lambda: *l,
            discriminant: *d,
            in_band: *b,
        })
        .collect();
    let edges: Vec<EdgeRow> = bs
        .bands
        .iter()
        .enumerate()
        .map(|(i, (a, b))| EdgeRow {
            band: i + 1,
            lower: *a,
            upper: *b,
        })
        .collect();
    let header = ctx.header();
    write_csv(ctx.out, "bands.csv", &header, &rows, &[])?;
    write_csv(ctx.out, "band_edges.csv", &header, &edges, &[])?;
    let mut s = format!(
        "{} band(s) in [{}, {}] for component {}\n",
        bs.bands.len(),
        c.bands.lambda_min,
        c.bands.lambda_max,
        c.bands.component + 1
    );
    for e in &edges {
        let _ = writeln!(s, "  band {}: [{:.10}, {:.10}]", e.band, e.lower, e.upper);
    }
    if let Some(l0) = c.lambda0 {
        let d = embspec_core::spectral::hill_discriminant(&vp, pot.period, l0, &ctx.integrator())?;
        let _ = writeln!(
            s,
            "lambda0 = {l0}: discriminant {d:.10}, {}",
            if d.abs() < 2.0 { "inside a band" } else { "not inside a band" }
        );
    }
    Ok(s)
}

#[derive(Serialize)]
struct MultiplierRow {
    index: usize,
    re: f64,
    im: f64,
    modulus: f64,
}

#[derive(Serialize)]
struct ExponentRow {
    index: usize,
    re: f64,
    im: f64,
    part: embspec_core::floquet::Part,
}

pub fn monodromy(ctx: &Context) -> Result<String, CliError> {
    let c = &ctx.cfg.config;
    let lambda = match c.floquet.lambda {
        Some(l) => l,
        None => ctx.cfg.lambda0()?,
    };
    let pot = ctx.cfg.potential()?;
    let (sys, data) = ctx.floquet_at(&pot, lambda)?;
    let mults: Vec<MultiplierRow> = data
        .multipliers
        .iter()
        .enumerate()
        .map(|(i, m)| MultiplierRow {
            index: i,
            re: m.re,
            im: m.im,
            modulus: m.norm(),
        })
        .collect();
    let exps: Vec<ExponentRow> = data
        .split
        .exponents
        .iter()
        .zip(&data.split.parts)
        .enumerate()
        .map(|(i, (w, p))| ExponentRow {
            index: i,
            re: w.re,
            im: w.im,
            part: *p,
        })
        .collect();
    let (two_m, codim) = data.codimension();
    let (ds, dc, du) = data.split.dims();
    let decomposition = data.decomposition_defect(&sys, &ctx.integrator())?;
    let footer = vec![
        format!("center multipliers 2m = {two_m}"),
        format!("range codimension = {codim}"),
        format!("split dims (stable, center, unstable) = ({ds}, {dc}, {du})"),
    ];
    let header = ctx.header();
    write_csv(ctx.out, "multipliers.csv", &header, &mults, &footer)?;
    write_csv(ctx.out, "exponents.csv", &header, &exps, &footer)?;
    let mut s = format!("lambda = {lambda}, period = {}\n", data.period);
    for f in &footer {
        let _ = writeln!(s, "{f}");
    }
    let _ = writeln!(
        s,
        "det M - 1: {:.3e}\nspectral mapping defect: {:.3e}\npairing defect: {:.3e}\ndecomposition defect: {:.3e}",
        data.det_defect(),
        data.spectral_mapping_defect(),
        data.pairing_defect(),
        decomposition
    );
    if let Some(w) = data.split.omega_min() {
        let _ = writeln!(s, "omega_min = {w:.10}");
    }
    if let Some(b) = band_position(&data) {
        let _ = writeln!(s, "band position = {b:.6}");
    }
    Ok(s)
}

#[derive(Serialize)]
struct ScanPoint {
    lambda: f64,
    sigma: f64,
}

#[derive(Serialize)]
struct EigRow {
    lambda: f64,
    sigma: f64,
    flagged: bool,
    residual: Option<f64>,
    decay_rate_left: Option<f64>,
    decay_rate_right: Option<f64>,
}

/// Search result: a candidate, or the searched interval when the coarse
/// scan has no interior minimum.
enum Search {
    Found(EigenCandidate),
    Boundary(f64, f64),
}

fn search(problem: &MatchingProblem, lambda0: f64) -> Result<Search, CliError> {
    match problem.find_embedded_eigenvalue(lambda0) {
        Ok(c) => Ok(Search::Found(c)),
        Err(Error::NoLocalMinimum { lo, hi }) => Ok(Search::Boundary(lo, hi)),
        Err(e) => Err(e.into()),
    }
}

fn write_eigenfunction(ctx: &Context, ef: &Eigenfunction) -> Result<(), CliError> {
    let n = ef.n();
    let path = ctx.out.join("eigenfunction.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut cols = vec!["x".to_string()];
    cols.extend((1..=n).map(|i| format!("u{i}")));
    cols.extend((1..=n).map(|i| format!("du{i}")));
    w.write_record(&cols)?;
    for (x, v) in ef.xs.iter().zip(&ef.values) {
        let mut rec = vec![x.to_string()];
        rec.extend(v.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    let body = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
    let mut text = String::new();
    for h in ctx.header() {
        let _ = writeln!(text, "# {h}");
    }
    text.push_str(&String::from_utf8_lossy(&body));
    std::fs::write(path, text)?;
    Ok(())
}

fn decay_fit_for(ctx: &Context, pot: &Potential, ef: &Eigenfunction) -> Result<DecayFit, CliError> {
    let (_, data) = ctx.floquet_at(pot, ef.lambda)?;
    let omega = data
        .split
        .omega_min()
        .ok_or(Error::NoHyperbolicDirections { dim: data.dim() })?;
    Ok(fit_decay_rate(ef, omega)?)
}

pub fn eig(ctx: &Context) -> Result<String, CliError> {
    let lambda0 = ctx.cfg.lambda0()?;
    let pot = ctx.cfg.potential()?;
    let problem = ctx.problem(pot.clone(), ctx.cfg.perturbation()?)?;
    let header = ctx.header();
    let cand = match search(&problem, lambda0)? {
        Search::Found(c) => c,
        Search::Boundary(lo, hi) => {
            let row = EigRow {
                lambda: f64::NAN,
                sigma: f64::NAN,
                flagged: false,
                residual: None,
                decay_rate_left: None,
                decay_rate_right: None,
            };
            write_csv(ctx.out, "eig.csv", &header, &[row], &[])?;
            return Ok(format!("no eigenvalue in interval [{lo}, {hi}]: mismatch has no interior minimum\n"));
        }
    };
    let scan: Vec<ScanPoint> = cand
        .scan
        .iter()
        .map(|(l, s)| ScanPoint { lambda: *l, sigma: *s })
        .collect();
    write_csv(ctx.out, "eig_scan.csv", &header, &scan, &[])?;
    let (_, data) = ctx.floquet_at(&pot, lambda0)?;
    let (two_m, codim) = data.codimension();
    let mut s = String::new();
    let mut row = EigRow {
        lambda: cand.lambda,
        sigma: cand.mismatch,
        flagged: cand.flagged,
        residual: None,
        decay_rate_left: None,
        decay_rate_right: None,
    };
    if cand.flagged {
        let ef = problem.eigenfunction(&cand)?;
        let residual = problem.residual(&ef);
        let fit = decay_fit_for(ctx, &pot, &ef)?;
        row.residual = Some(residual);
        row.decay_rate_left = Some(fit.left.rate);
        row.decay_rate_right = Some(fit.right.rate);
        write_eigenfunction(ctx, &ef)?;
        let _ = writeln!(
            s,
            "embedded eigenvalue lambda = {:.10} (shift {:+.3e} from lambda0), mismatch {:.3e}",
            cand.lambda,
            cand.lambda - lambda0,
            cand.mismatch
        );
        let _ = writeln!(s, "residual {residual:.3e}, decay rates {:.4} / {:.4}", fit.left.rate, fit.right.rate);
    } else {
        let (lo, hi) = (cand.scan[0].0, cand.scan[cand.scan.len() - 1].0);
        let _ = writeln!(
            s,
            "no eigenvalue in interval [{lo}, {hi}]: minimal mismatch {:.3e} at lambda = {:.10} exceeds {:e}",
            cand.mismatch, cand.lambda, ctx.cfg.config.matching.tol
        );
    }
    let footer = vec![format!("center multipliers 2m = {two_m}"), format!("range codimension = {codim}")];
    write_csv(ctx.out, "eig.csv", &header, &[row], &footer)?;
    let _ = writeln!(s, "2m = {two_m}, range codimension = {codim}");
    Ok(s)
}

#[derive(Serialize)]
struct PersistRow {
    direction: &'static str,
    epsilon: f64,
    lambda: f64,
    sigma: f64,
    flagged: bool,
}

#[derive(Serialize)]
struct FunctionalRow {
    direction: &'static str,
    lambda_prime: f64,
    k: usize,
    functional: f64,
}

/// Unperturbed eigenfunction: closed form for the bundled example,
/// otherwise reconstructed from the matching problem.
fn unperturbed_eigenfunction(ctx: &Context, problem: &MatchingProblem, lambda0: f64) -> Result<Arc<dyn VectorProfile>, CliError> {
    if ctx.cfg.is_example5() {
        return Ok(Arc::new(make_example5_with_beta(lambda0, ctx.cfg.config.beta).eigenfunction));
    }
    match search(problem, lambda0)? {
        Search::Found(c) if c.flagged => Ok(Arc::new(problem.eigenfunction(&c)?)),
        _ => Err(Error::Precondition(format!("no embedded eigenvalue near lambda0 = {lambda0} to perturb")).into()),
    }
}

pub fn persist(ctx: &Context) -> Result<String, CliError> {
    let c = &ctx.cfg.config;
    if c.n < 2 {
        return Err(CliError::Config("persist needs a coupled system, n >= 2".into()));
    }
    let lambda0 = ctx.cfg.lambda0()?;
    let pot = ctx.cfg.potential()?;
    let problem = ctx.problem(pot.clone(), None)?;
    let profile = ctx.cfg.persist_profile()?;
    let f = profile.to_fn()?;
    let j = c.persist.column - 1;
    let u = unperturbed_eigenfunction(ctx, &problem, lambda0)?;
    let td = TangentData::new(&pot, lambda0, u, c.matching.t, &ctx.integrator(), ctx.cfg.tolerance())?;
    let mut rows = Vec::new();
    let mut functionals = Vec::new();
    let mut footer = Vec::new();
    let mut s = String::new();
    for dir in &c.persist.directions {
        let b = match dir {
            Direction::Transversal => {
                Perturbation::from_entries(c.n, PerturbationClass::TBeta, vec![(0, j, f.clone())], 1.0, c.beta)?.normalized()?
            }
            Direction::Tangent => td.tangent_projection(j, f.clone(), c.beta)?,
            Direction::Diagonal => make_perturbation(c.n, PerturbationClass::Diagonal, &profile, 1.0, c.beta)?.normalized()?,
        };
        let lp = td.lambda_prime(&b)?;
        for (k, fv) in td.functionals(&b)?.iter().enumerate() {
            functionals.push(FunctionalRow {
                direction: dir.name(),
                lambda_prime: lp,
                k: k + 1,
                functional: fv.value,
            });
        }
        let scan = persistence_scan(&problem, &b, &c.persist.epsilons, lambda0)?;
        let flagged = scan.rows.iter().filter(|r| r.flagged).count();
        let _ = writeln!(
            s,
            "{:<12} exponent {:.4}, flagged at {flagged}/{} epsilons, lambda' = {lp:.3e}",
            dir.name(),
            scan.exponent,
            scan.rows.len()
        );
        footer.push(format!("exponent {} = {}", dir.name(), scan.exponent));
        rows.extend(scan.rows.iter().map(|r| PersistRow {
            direction: dir.name(),
            epsilon: r.epsilon,
            lambda: r.lambda,
            sigma: r.sigma,
            flagged: r.flagged,
        }));
    }
    let header = ctx.header();
    write_csv(ctx.out, "persist.csv", &header, &rows, &footer)?;
    write_csv(ctx.out, "functionals.csv", &header, &functionals, &[])?;
    Ok(s)
}

#[derive(Serialize)]
struct FitRow {
    side: &'static str,
    rate: f64,
    r2: f64,
    omega_min: f64,
    within_bound: bool,
}

#[derive(Serialize)]
struct ProbeRow {
    trial: usize,
    delta: f64,
    kappa_s: f64,
    kappa_u: f64,
    k: f64,
    measured_rate_s: f64,
    bound_s: f64,
    measured_rate_u: f64,
    bound_u: f64,
    pass: bool,
}

/// Seed of probe `trial` derived from the run seed.
pub fn probe_seed(seed: u64, trial: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ trial as u64
}

pub fn decay(ctx: &Context) -> Result<String, CliError> {
    let c = &ctx.cfg.config;
    let header = ctx.header();
    let mut s = String::new();
    if let Some(lambda0) = c.lambda0 {
        let pot = ctx.cfg.potential()?;
        let problem = ctx.problem(pot.clone(), ctx.cfg.perturbation()?)?;
        match search(&problem, lambda0)? {
            Search::Found(cand) if cand.flagged => {
                let ef = problem.eigenfunction(&cand)?;
                let fit = decay_fit_for(ctx, &pot, &ef)?;
                let rows = [("left", fit.left), ("right", fit.right)].map(|(side, t)| FitRow {
                    side,
                    rate: t.rate,
                    r2: t.r2,
                    omega_min: fit.omega_min,
                    within_bound: fit.within_bound,
                });
                write_csv(ctx.out, "decay_fit.csv", &header, &rows, &[])?;
                let _ = writeln!(
                    s,
                    "decay fit: rates {:.4} (left) / {:.4} (right), R^2 {:.6} / {:.6}, omega_min {:.6}, {}",
                    fit.left.rate,
                    fit.right.rate,
                    fit.left.r2,
                    fit.right.r2,
                    fit.omega_min,
                    if fit.good_fit && fit.within_bound { "within bound" } else { "OUTSIDE bound" }
                );
            }
            _ => {
                let _ = writeln!(s, "decay fit: no flagged eigenvalue near lambda0, skipped");
            }
        }
    }
    let d = c.decay;
    let cfg = IntegratorConfig {
        renorm_interval: 0.5,
        ..ctx.integrator()
    };
    let probes: Vec<RoughnessProbe> = (0..d.probes)
        .into_par_iter()
        .map(|t| random_probe(d.dim, probe_seed(ctx.seed, t), d.horizon, &cfg, d.fit_tol))
        .collect::<Result<_, _>>()?;
    let rows: Vec<ProbeRow> = probes
        .iter()
        .enumerate()
        .map(|(t, p)| ProbeRow {
            trial: t,
            delta: p.delta,
            kappa_s: p.rates.kappa_s,
            kappa_u: p.rates.kappa_u,
            k: p.rates.k,
            measured_rate_s: p.measured_s,
            bound_s: p.band_s.1,
            measured_rate_u: p.measured_u,
            bound_u: p.band_u.0,
            pass: p.pass,
        })
        .collect();
    let mut h = header.clone();
    h.push("k: condition number of the base eigenbasis (estimate of the dichotomy constant)".into());
    write_csv(ctx.out, "roughness.csv", &h, &rows, &[])?;
    let passed = probes.iter().filter(|p| p.pass).count();
    let _ = writeln!(s, "roughness probes: {passed}/{} inside the rate bands", probes.len());
    Ok(s)
}
