//! Command front-ends: each run resolves its configuration into a hashed
//! manifest, writes CSV artifacts atomically with the hash stamped in a
//! comment line, and supports checkpointed resumption. Sweep points run in
//! an isolated worker pool; one point failing never aborts the rest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::evolution::{
    default_dt, read_checkpoint, write_checkpoint, Checkpoint, EvolutionConfig, EvolveError,
    Evolver, Method, PropagatorBody,
};
use crate::lattice::{
    build_hamiltonian, dispersion_bands, GaussianPotential, LatticeError, LatticeSpec,
    RampSchedule,
};
use crate::observables::{
    free_projectors, instantaneous_occupations, particle_number, production_spectrum,
    split_spontaneous, FitMode, ObservableError, PairProductionReport, SpectralProjectors,
};
use crate::spectral::{
    adaptive_threshold_from, classify_level_data, count_dived_states, diagonalize, eigenvalues,
    find_lambda_critical, spectral_flow, FlowOptions, SpectralError,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Evolve(#[from] EvolveError),
    #[error(transparent)]
    Observable(#[from] ObservableError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("checkpoint in the output directory belongs to a different configuration")]
    ForeignCheckpoint,
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for numerical or
    /// runtime failures. Partial sweeps exit 4 from the outcome, not here.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

fn at<P: Into<PathBuf>>(path: P) -> impl FnOnce(io::Error) -> RunError {
    let path = path.into();
    move |source| RunError::Io { path, source }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// The resolved inputs of a run (hashed, so identical hash means identical
/// rerun up to platform arithmetic) plus unhashed derived outputs and
/// wall-clock metadata.
#[derive(Clone, Debug)]
pub struct RunManifest {
    inputs: BTreeMap<String, String>,
    derived: BTreeMap<String, String>,
}

fn join_list(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl RunManifest {
    pub fn new(command: &'static str, cfg: &Config, pot: &GaussianPotential) -> Self {
        let mut inputs = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            inputs.insert(k.to_string(), v);
        };
        put("run.command", command.to_string());
        put("run.version", env!("CARGO_PKG_VERSION").to_string());
        let l = &cfg.lattice;
        put("lattice.nx", l.nx.to_string());
        put("lattice.ny", l.ny.to_string());
        put("lattice.mass", l.mass.to_string());
        put("lattice.boundary", format!("{:?}", l.boundary).to_lowercase());
        put("lattice.copy", format!("{:?}", l.copy).to_lowercase());
        put("potential.v0", pot.v0().to_string());
        put("potential.sigma", pot.sigma().to_string());
        put("potential.center_x", pot.center().0.to_string());
        put("potential.center_y", pot.center().1.to_string());
        if let Some(s) = &cfg.schedule {
            put("schedule.lambda_max", s.lambda_max.to_string());
            put("schedule.lambda_final", s.lambda_final.to_string());
            put("schedule.t_on", s.t_on.to_string());
            put("schedule.t_hold", s.t_hold.to_string());
            put("schedule.t_off", s.t_off.to_string());
            put("schedule.shape", format!("{:?}", s.shape).to_lowercase());
        }
        let e = &cfg.evolution;
        put(
            "evolution.dt",
            e.dt.map_or_else(|| "auto".to_string(), |v| v.to_string()),
        );
        put(
            "evolution.method",
            match e.method {
                Method::CrankNicolson => "cn".to_string(),
                Method::EigenStep => "eigen".to_string(),
            },
        );
        put(
            "evolution.checkpoint_stride",
            e.checkpoint_stride.to_string(),
        );
        put("evolution.samples", e.samples.to_string());
        put("evolution.snapshot_times", join_list(&e.snapshot_times));
        if let Some(sw) = &cfg.sweep {
            put("sweep.lambda_max_list", join_list(&sw.lambda_max_list));
            put("sweep.t_tot_list", join_list(&sw.t_tot_list));
        }
        if let Some(sp) = &cfg.spectrum {
            put("spectrum.lambda_min", sp.lambda_min.to_string());
            put("spectrum.lambda_max", sp.lambda_max.to_string());
            put("spectrum.points", sp.points.to_string());
        }
        if let Some(d) = &cfg.dispersion {
            put("dispersion.nk", d.nk.to_string());
        }
        Self {
            inputs,
            derived: BTreeMap::new(),
        }
    }

    pub fn set_derived(&mut self, key: &str, value: String) {
        self.derived.insert(key.to_string(), value);
    }

    pub fn hash(&self) -> u64 {
        let mut text = String::new();
        for (k, v) in &self.inputs {
            let _ = writeln!(text, "{k} = {v}");
        }
        fnv1a(text.as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, RunError> {
        let mut text = String::new();
        let _ = writeln!(text, "# manifest {}", self.hash_hex());
        let _ = writeln!(text, "[input]");
        for (k, v) in &self.inputs {
            let _ = writeln!(text, "{k} = {v}");
        }
        let _ = writeln!(text, "[derived]");
        for (k, v) in &self.derived {
            let _ = writeln!(text, "{k} = {v}");
        }
        let _ = writeln!(
            text,
            "wall_clock_unix = {}",
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs())
        );
        let path = dir.join("manifest.txt");
        atomic_write(&path, text.as_bytes())?;
        Ok(path)
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let partial = path.with_extension("partial");
    fs::write(&partial, bytes).map_err(at(&partial))?;
    fs::rename(&partial, path).map_err(at(path))?;
    Ok(())
}

/// CSV artifact under construction: writes to `<name>.partial` and renames
/// on finish, so a crash never leaves a plausible-looking truncated file.
struct CsvFile {
    final_path: PathBuf,
    partial: PathBuf,
    w: io::BufWriter<fs::File>,
}

fn csv_create(dir: &Path, name: &str, hash: &str, header: &str) -> Result<CsvFile, RunError> {
    let final_path = dir.join(name);
    let partial = dir.join(format!("{name}.partial"));
    let file = fs::File::create(&partial).map_err(at(&partial))?;
    let mut w = io::BufWriter::new(file);
    writeln!(w, "# manifest {hash}").map_err(at(&partial))?;
    writeln!(w, "{header}").map_err(at(&partial))?;
    Ok(CsvFile {
        final_path,
        partial,
        w,
    })
}

impl CsvFile {
    fn line(&mut self, text: &str) -> Result<(), RunError> {
        writeln!(self.w, "{text}").map_err(at(&self.partial))
    }

    fn finish(mut self) -> Result<PathBuf, RunError> {
        self.w.flush().map_err(at(&self.partial))?;
        drop(self.w);
        fs::rename(&self.partial, &self.final_path).map_err(at(&self.final_path))?;
        Ok(self.final_path)
    }
}

fn fmt_e(v: f64) -> String {
    format!("{v:.12e}")
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

pub struct SpectrumOutcome {
    pub manifest_hash: String,
    pub grid_points: usize,
    pub levels_per_point: usize,
    pub branch_count: usize,
    pub branch_breaks: usize,
    pub lambda_cr: Option<f64>,
    pub files: Vec<PathBuf>,
}

/// Diagonalize over the requested depth grid (plus any continuity
/// refinements), label every level, trace branches, and bisect the
/// critical depth when the grid brackets it.
pub fn cmd_spectrum(cfg: &Config, out: &Path) -> Result<SpectrumOutcome, RunError> {
    fs::create_dir_all(out).map_err(at(out))?;
    let spec = cfg.lattice_spec()?;
    let pot = cfg.gaussian_potential(&spec)?;
    let sp = cfg.spectrum_section()?;
    let grid = linspace(sp.lambda_min, sp.lambda_max, sp.points);

    let mut manifest = RunManifest::new("spectrum", cfg, &pot);
    let hash = manifest.hash_hex();
    let flow = spectral_flow(&spec, &pot, &grid, &FlowOptions::default())?;
    let mass = spec.mass();

    let mut spectrum_csv =
        csv_create(out, "spectrum.csv", &hash, "lambda,index,energy_over_M,ipr,label")?;
    for (g, &lambda) in flow.lambdas().iter().enumerate() {
        let energies = flow.energies_at(g);
        let iprs = flow.iprs_at(g);
        let threshold = adaptive_threshold_from(energies, iprs, mass);
        let cls = classify_level_data(energies, iprs.to_vec(), mass, threshold);
        for (i, &e) in energies.iter().enumerate() {
            spectrum_csv.line(&format!(
                "{},{},{},{},{}",
                fmt_e(lambda),
                i,
                fmt_e(e / mass),
                fmt_e(iprs[i]),
                cls.label(i).as_str()
            ))?;
        }
    }
    let spectrum_path = spectrum_csv.finish()?;

    let mut branches_csv =
        csv_create(out, "branches.csv", &hash, "branch_id,lambda,energy_over_M")?;
    for b in 0..flow.branch_count() {
        for (g, &lambda) in flow.lambdas().iter().enumerate() {
            branches_csv.line(&format!(
                "{},{},{}",
                b,
                fmt_e(lambda),
                fmt_e(flow.branch_energy(b, g) / mass)
            ))?;
        }
    }
    let branches_path = branches_csv.finish()?;

    let lo = *grid.first().unwrap();
    let hi = *grid.last().unwrap();
    let lambda_cr = if hi > lo
        && count_dived_states(&spec, &pot, lo)? == 0
        && count_dived_states(&spec, &pot, hi)? > 0
    {
        Some(find_lambda_critical(&spec, &pot, (lo, hi), 1e-6)?)
    } else {
        None
    };

    manifest.set_derived("dimension", spec.dimension().to_string());
    manifest.set_derived("grid_points_refined", flow.lambdas().len().to_string());
    manifest.set_derived("branch_breaks", flow.breaks().len().to_string());
    if let Some(lc) = lambda_cr {
        manifest.set_derived("lambda_cr", lc.to_string());
    }
    let manifest_path = manifest.write(out)?;

    Ok(SpectrumOutcome {
        manifest_hash: hash,
        grid_points: flow.lambdas().len(),
        levels_per_point: spec.dimension(),
        branch_count: flow.branch_count(),
        branch_breaks: flow.breaks().len(),
        lambda_cr,
        files: vec![spectrum_path, branches_path, manifest_path],
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvolveOptions {
    /// Pick up from a checkpoint left in the output directory.
    pub resume: bool,
    /// Stop after this many steps in this invocation, leaving a checkpoint
    /// behind; the run resumes later. None runs to completion.
    pub max_steps: Option<usize>,
}

#[derive(Debug)]
pub struct EvolveOutcome {
    pub manifest_hash: String,
    pub completed: bool,
    pub n_final: Option<f64>,
    pub n_steps: usize,
    pub paused_at: Option<usize>,
    pub resumed_from: Option<usize>,
    pub files: Vec<PathBuf>,
}

fn encode_samples(samples: &[(f64, f64, f64)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 24);
    for &(t, lambda, n) in samples {
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&lambda.to_le_bytes());
        out.extend_from_slice(&n.to_le_bytes());
    }
    out
}

fn decode_samples(bytes: &[u8]) -> Result<Vec<(f64, f64, f64)>, RunError> {
    if bytes.len() % 24 != 0 {
        return Err(RunError::Evolve(EvolveError::BadCheckpoint(
            "sample buffer is not a whole number of records".into(),
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() / 24);
    for rec in bytes.chunks_exact(24) {
        let f = |r: &[u8]| f64::from_le_bytes(r.try_into().unwrap());
        out.push((f(&rec[0..8]), f(&rec[8..16]), f(&rec[16..24])));
    }
    Ok(out)
}

/// Evenly spread sample steps including both endpoints.
fn sample_steps(n_steps: usize, samples: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..samples)
        .map(|j| (j as f64 * n_steps as f64 / (samples - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    v
}

struct EvolveSetup {
    spec: LatticeSpec,
    pot: GaussianPotential,
    sched: RampSchedule,
    proj: SpectralProjectors,
    evo_cfg: EvolutionConfig,
}

fn evolve_setup(cfg: &Config) -> Result<EvolveSetup, RunError> {
    let spec = cfg.lattice_spec()?;
    let pot = cfg.gaussian_potential(&spec)?;
    let sched = cfg.ramp_schedule()?;
    let e = &cfg.evolution;
    let dt = match e.dt {
        Some(dt) => dt,
        None => {
            let lambda_peak = sched.lambda_max().abs().max(sched.lambda_final().abs());
            let radius = build_hamiltonian(&spec, &pot, lambda_peak)?.spectral_radius_bound();
            default_dt(spec.mass(), radius)
        }
    };
    let es0 = diagonalize(&build_hamiltonian(&spec, &pot, 0.0)?, 0.0)?;
    let proj = free_projectors(&es0, spec.mass())?;
    let mut evo_cfg = EvolutionConfig::new(dt, e.method);
    evo_cfg.checkpoint_stride = e.checkpoint_stride;
    evo_cfg.snapshot_times = e.snapshot_times.clone();
    Ok(EvolveSetup {
        spec,
        pot,
        sched,
        proj,
        evo_cfg,
    })
}

/// One scheduled run: evolves both free-basis blocks, samples the pair
/// number over time, checkpoints for bit-exact resumption, and writes the
/// time series, the production spectra, and any requested instantaneous
/// spectrum snapshots. The checkpoint is removed once the artifacts are
/// complete.
pub fn cmd_evolve(cfg: &Config, out: &Path, opts: EvolveOptions) -> Result<EvolveOutcome, RunError> {
    fs::create_dir_all(out).map_err(at(out))?;
    let EvolveSetup {
        spec,
        pot,
        sched,
        proj,
        evo_cfg,
    } = evolve_setup(cfg)?;
    for &t in &evo_cfg.snapshot_times {
        if !t.is_finite() || t < 0.0 || t > sched.total_time() {
            return Err(RunError::Evolve(EvolveError::BadSnapshotTime(
                t,
                sched.total_time(),
            )));
        }
    }
    let mass = spec.mass();

    let initial = PropagatorBody::ColumnBlocks {
        plus: Some(proj.plus_basis().clone()),
        minus: proj.minus_basis().clone(),
    };
    let mut ev = Evolver::new(&spec, &pot, &sched, &evo_cfg, initial)?;
    let n_steps = ev.n_steps();
    let steps = sample_steps(n_steps, cfg.evolution.samples);

    let mut manifest = RunManifest::new("evolve", cfg, &pot);
    let hash = manifest.hash_hex();
    let tag = manifest.hash();
    manifest.set_derived("dimension", spec.dimension().to_string());
    manifest.set_derived("actual_dt", ev.actual_dt().to_string());
    manifest.set_derived("n_steps", n_steps.to_string());
    manifest.set_derived("n_plus", proj.n_plus().to_string());
    manifest.set_derived("n_minus", proj.n_minus().to_string());
    let manifest_path = manifest.write(out)?;

    let ck_path = out.join("checkpoint.bin");
    let mut samples: Vec<(f64, f64, f64)> = Vec::with_capacity(steps.len());
    let mut next_sample = 0usize;
    let mut resumed_from = None;
    if opts.resume && ck_path.exists() {
        let ck = read_checkpoint(&ck_path)?;
        if ck.tag != tag {
            return Err(RunError::ForeignCheckpoint);
        }
        samples = decode_samples(&ck.extra)?;
        let step = ck.step as usize;
        ev.restore(step, ck.body)?;
        next_sample = steps.partition_point(|&s| s <= step);
        resumed_from = Some(step);
    }

    let take_due = |ev: &mut Evolver,
                        samples: &mut Vec<(f64, f64, f64)>,
                        next_sample: &mut usize|
     -> Result<(), RunError> {
        while *next_sample < steps.len() && steps[*next_sample] == ev.step_index() {
            ev.check_unitarity()?;
            let prop = ev.propagator();
            let n = particle_number(&prop, &proj)?;
            samples.push((prop.time(), sched.lambda_at(prop.time()), n));
            *next_sample += 1;
        }
        Ok(())
    };

    if resumed_from.is_none() {
        take_due(&mut ev, &mut samples, &mut next_sample)?;
    }
    let mut steps_this_run = 0usize;
    while !ev.is_done() {
        if let Some(limit) = opts.max_steps {
            if steps_this_run >= limit {
                ev.check_unitarity()?;
                write_checkpoint(
                    &ck_path,
                    &Checkpoint {
                        tag,
                        step: ev.step_index() as u64,
                        body: ev.body().clone(),
                        extra: encode_samples(&samples),
                    },
                )?;
                return Ok(EvolveOutcome {
                    manifest_hash: hash,
                    completed: false,
                    n_final: None,
                    n_steps,
                    paused_at: Some(ev.step_index()),
                    resumed_from,
                    files: vec![manifest_path, ck_path],
                });
            }
        }
        ev.step()?;
        steps_this_run += 1;
        take_due(&mut ev, &mut samples, &mut next_sample)?;
        if ev.step_index() % evo_cfg.checkpoint_stride == 0 && !ev.is_done() {
            ev.check_unitarity()?;
            write_checkpoint(
                &ck_path,
                &Checkpoint {
                    tag,
                    step: ev.step_index() as u64,
                    body: ev.body().clone(),
                    extra: encode_samples(&samples),
                },
            )?;
        }
    }
    ev.check_unitarity()?;
    let prop = ev.propagator();

    let n_final = particle_number(&prop, &proj)?;
    let spectrum = production_spectrum(&prop, &proj)?;
    let report = PairProductionReport {
        times: samples.iter().map(|s| s.0).collect(),
        pair_counts: samples.iter().map(|s| s.2).collect(),
        spectrum,
        n_final,
    };
    report.validate()?;

    let mut files = vec![manifest_path];

    let mut timeseries = csv_create(out, "timeseries.csv", &hash, "t,lambda,N")?;
    for &(t, lambda, n) in &samples {
        timeseries.line(&format!("{},{},{}", fmt_e(t), fmt_e(lambda), fmt_e(n)))?;
    }
    files.push(timeseries.finish()?);

    let mut production =
        csv_create(out, "production.csv", &hash, "kind,index,energy_over_M,occupation")?;
    let sp = &report.spectrum;
    for (i, (&e, &n)) in sp
        .particle_energies()
        .iter()
        .zip(sp.particle_occupations())
        .enumerate()
    {
        production.line(&format!("particle,{},{},{}", i, fmt_e(e / mass), fmt_e(n)))?;
    }
    for (i, (&e, &n)) in sp
        .antiparticle_energies()
        .iter()
        .zip(sp.antiparticle_occupations())
        .enumerate()
    {
        production.line(&format!(
            "antiparticle,{},{},{}",
            i,
            fmt_e(e / mass),
            fmt_e(n)
        ))?;
    }
    files.push(production.finish()?);

    let mut snapshots = csv_create(
        out,
        "snapshots.csv",
        &hash,
        "t,lambda,level_index,instantaneous_energy_over_M",
    )?;
    let mut snap_times = evo_cfg.snapshot_times.clone();
    snap_times.sort_unstable_by(f64::total_cmp);
    for t in snap_times {
        let lambda = sched.lambda_at(t);
        let energies = eigenvalues(&build_hamiltonian(&spec, &pot, lambda)?)?;
        for (i, &e) in energies.iter().enumerate() {
            snapshots.line(&format!(
                "{},{},{},{}",
                fmt_e(t),
                fmt_e(lambda),
                i,
                fmt_e(e / mass)
            ))?;
        }
    }
    files.push(snapshots.finish()?);

    // With the potential still on at the end, the free-basis spectrum is
    // not the physical one; record the final-eigenbasis occupations too.
    if sched.lambda_final() != 0.0 {
        let final_es = diagonalize(
            &build_hamiltonian(&spec, &pot, sched.lambda_final())?,
            sched.lambda_final(),
        )?;
        let occ = instantaneous_occupations(&prop, &proj, &final_es)?;
        let mut inst = csv_create(
            out,
            "production_instantaneous.csv",
            &hash,
            "kind,index,energy_over_M,occupation",
        )?;
        for (i, (&e, &n)) in final_es.energies().iter().zip(&occ).enumerate() {
            inst.line(&format!(
                "instantaneous,{},{},{}",
                i,
                fmt_e(e / mass),
                fmt_e(n)
            ))?;
        }
        files.push(inst.finish()?);
    }

    if ck_path.exists() {
        fs::remove_file(&ck_path).map_err(at(&ck_path))?;
    }

    Ok(EvolveOutcome {
        manifest_hash: hash,
        completed: true,
        n_final: Some(n_final),
        n_steps,
        paused_at: None,
        resumed_from,
        files,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SweepOptions {
    pub resume: bool,
    /// Worker override: command line and environment beat the config file.
    pub jobs: Option<usize>,
}

pub struct SweepOutcome {
    pub manifest_hash: String,
    pub completed: usize,
    pub skipped: usize,
    pub failed: usize,
    pub files: Vec<PathBuf>,
}

struct PointResult {
    i: usize,
    j: usize,
    lambda_max: f64,
    t_tot: f64,
    n_final: Option<f64>,
    status: String,
    skipped: bool,
}

fn point_path(dir: &Path, i: usize, j: usize) -> PathBuf {
    dir.join(format!("p_{i:03}_{j:03}.txt"))
}

fn read_point(path: &Path, hash: &str) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next()? != hash {
        return None;
    }
    lines.next()?.parse::<f64>().ok()
}

fn run_sweep_point(
    spec: &LatticeSpec,
    pot: &GaussianPotential,
    template: &RampSchedule,
    evo: &crate::config::EvolutionSection,
    proj: &SpectralProjectors,
    lambda_max: f64,
    t_tot: f64,
) -> Result<f64, RunError> {
    let sched = RampSchedule::new(
        lambda_max,
        template.lambda_final(),
        template.t_on(),
        template.t_hold(),
        template.t_off(),
        template.shape(),
    )?
    .scaled_to(t_tot)?;
    let dt = match evo.dt {
        Some(dt) => dt,
        None => {
            let lambda_peak = sched.lambda_max().abs().max(sched.lambda_final().abs());
            let radius = build_hamiltonian(spec, pot, lambda_peak)?.spectral_radius_bound();
            default_dt(spec.mass(), radius)
        }
    };
    let mut evo_cfg = EvolutionConfig::new(dt, evo.method);
    evo_cfg.checkpoint_stride = evo.checkpoint_stride;
    let initial = PropagatorBody::ColumnBlocks {
        plus: None,
        minus: proj.minus_basis().clone(),
    };
    let mut ev = Evolver::new(spec, pot, &sched, &evo_cfg, initial)?;
    while !ev.is_done() {
        ev.step()?;
        if ev.step_index() % evo_cfg.checkpoint_stride == 0 || ev.is_done() {
            ev.check_unitarity()?;
        }
    }
    let prop = ev.propagator();
    Ok(particle_number(&prop, proj)?)
}

/// Run the (lambda_max, T_tot) grid: each point evolves the sea block of a
/// template schedule rescaled to its duration. Points run in parallel,
/// fail in isolation, and completed points are skipped on resume via
/// per-point result files bound to the manifest hash.
pub fn cmd_sweep(cfg: &Config, out: &Path, opts: SweepOptions) -> Result<SweepOutcome, RunError> {
    fs::create_dir_all(out).map_err(at(out))?;
    let spec = cfg.lattice_spec()?;
    let pot = cfg.gaussian_potential(&spec)?;
    let template = cfg.ramp_schedule()?;
    let sw = cfg.sweep_section()?;
    let es0 = diagonalize(&build_hamiltonian(&spec, &pot, 0.0)?, 0.0)?;
    let proj = free_projectors(&es0, spec.mass())?;

    let mut manifest = RunManifest::new("sweep", cfg, &pot);
    let hash = manifest.hash_hex();
    manifest.set_derived("dimension", spec.dimension().to_string());

    let points_dir = out.join("points");
    fs::create_dir_all(&points_dir).map_err(at(&points_dir))?;

    let mut points = Vec::new();
    for (i, &lm) in sw.lambda_max_list.iter().enumerate() {
        for (j, &tt) in sw.t_tot_list.iter().enumerate() {
            points.push((i, j, lm, tt));
        }
    }

    let jobs = opts.jobs.or(sw.jobs).unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;

    let results: Vec<PointResult> = pool.install(|| {
        points
            .par_iter()
            .map(|&(i, j, lambda_max, t_tot)| {
                let path = point_path(&points_dir, i, j);
                if opts.resume {
                    if let Some(n) = read_point(&path, &hash) {
                        return PointResult {
                            i,
                            j,
                            lambda_max,
                            t_tot,
                            n_final: Some(n),
                            status: "ok".into(),
                            skipped: true,
                        };
                    }
                }
                match run_sweep_point(
                    &spec,
                    &pot,
                    &template,
                    &cfg.evolution,
                    &proj,
                    lambda_max,
                    t_tot,
                ) {
                    Ok(n) => {
                        let body = format!("{hash}\n{n:.17e}\n");
                        let status = match atomic_write(&path, body.as_bytes()) {
                            Ok(()) => "ok".to_string(),
                            Err(e) => format!("failed: {e}"),
                        };
                        PointResult {
                            i,
                            j,
                            lambda_max,
                            t_tot,
                            n_final: Some(n),
                            status,
                            skipped: false,
                        }
                    }
                    Err(e) => PointResult {
                        i,
                        j,
                        lambda_max,
                        t_tot,
                        n_final: None,
                        status: format!("failed: {e}"),
                        skipped: false,
                    },
                }
            })
            .collect()
    });

    let mut results = results;
    results.sort_by_key(|r| (r.i, r.j));

    let mut files = Vec::new();
    let mut sweep_csv = csv_create(out, "sweep.csv", &hash, "lambda_max,T_tot,N_final,status")?;
    for r in &results {
        let n_text = r.n_final.map_or_else(|| "nan".to_string(), fmt_e);
        let status = if r.status == "ok" { "ok" } else { "failed" };
        sweep_csv.line(&format!(
            "{},{},{},{}",
            fmt_e(r.lambda_max),
            fmt_e(r.t_tot),
            n_text,
            status
        ))?;
    }
    files.push(sweep_csv.finish()?);

    // One fit per depth column with all points complete: the exponent and
    // asymptote of N(T). The fit mode follows whether anything has dived.
    let mut scaling_csv = csv_create(
        out,
        "scaling.csv",
        &hash,
        "T_tot,N_final,alpha_fit,N_spont_fit,residual",
    )?;
    for (i, &lm) in sw.lambda_max_list.iter().enumerate() {
        let column: Vec<(f64, f64)> = results
            .iter()
            .filter(|r| r.i == i && r.status == "ok")
            .filter_map(|r| r.n_final.map(|n| (r.t_tot, n)))
            .collect();
        scaling_csv.line(&format!("# lambda_max = {lm}"))?;
        if column.len() < sw.t_tot_list.len() || column.len() < 4 {
            scaling_csv.line("# unfit: incomplete column")?;
            continue;
        }
        let mode = if count_dived_states(&spec, &pot, lm)? > 0 {
            FitMode::Supercritical
        } else {
            FitMode::Subcritical
        };
        match split_spontaneous(&column, mode) {
            Ok(fit) => {
                for &(t, n) in &column {
                    scaling_csv.line(&format!(
                        "{},{},{},{},{}",
                        fmt_e(t),
                        fmt_e(n),
                        fmt_e(fit.alpha),
                        fmt_e(fit.n_spont),
                        fmt_e(fit.fit_residual)
                    ))?;
                }
                if fit.quality_warning {
                    scaling_csv.line("# warning: residual above 10% of the mean")?;
                }
            }
            Err(e) => {
                scaling_csv.line(&format!("# unfit: {e}"))?;
            }
        }
    }
    files.push(scaling_csv.finish()?);

    let completed = results.iter().filter(|r| r.status == "ok" && !r.skipped).count();
    let skipped = results.iter().filter(|r| r.skipped).count();
    let failed = results.iter().filter(|r| r.status != "ok").count();
    manifest.set_derived("points_total", results.len().to_string());
    manifest.set_derived("points_failed", failed.to_string());
    files.push(manifest.write(out)?);

    Ok(SweepOutcome {
        manifest_hash: hash,
        completed,
        skipped,
        failed,
        files,
    })
}

pub struct DispersionOutcome {
    pub manifest_hash: String,
    pub rows: usize,
    pub files: Vec<PathBuf>,
}

/// Tabulate the two free bands over the diamond momentum domain.
pub fn cmd_dispersion(cfg: &Config, out: &Path) -> Result<DispersionOutcome, RunError> {
    fs::create_dir_all(out).map_err(at(out))?;
    let d = cfg.dispersion_section()?;
    let mass = cfg.lattice.mass;
    // A potential is irrelevant here but pins the manifest to the full
    // resolved configuration like every other command.
    let spec_for_center = cfg.lattice_spec();
    let pot = match &spec_for_center {
        Ok(spec) => cfg.gaussian_potential(spec)?,
        // Massless runs cannot build a simulation lattice; fall back to an
        // explicit center for the manifest only.
        Err(_) => GaussianPotential::new(
            cfg.potential.v0,
            cfg.potential.sigma,
            cfg.potential.center.unwrap_or((
                0.5 * (cfg.lattice.nx.saturating_sub(1)) as f64,
                0.5 * (cfg.lattice.ny.saturating_sub(1)) as f64,
            )),
        )?,
    };
    let mut manifest = RunManifest::new("dispersion", cfg, &pot);
    let hash = manifest.hash_hex();

    let pi = std::f64::consts::PI;
    let axis = linspace(-pi, pi, d.nk);
    let mut csv = csv_create(out, "dispersion.csv", &hash, "kx,ky,E_plus,E_minus")?;
    let mut rows = 0usize;
    for &kx in &axis {
        for &ky in &axis {
            // Diamond domain of the staggered supercell.
            if kx.abs() + ky.abs() > pi + 1e-12 {
                continue;
            }
            let (e_plus, e_minus) = dispersion_bands(mass, (kx, ky));
            csv.line(&format!(
                "{},{},{},{}",
                fmt_e(kx),
                fmt_e(ky),
                fmt_e(e_plus),
                fmt_e(e_minus)
            ))?;
            rows += 1;
        }
    }
    let csv_path = csv.finish()?;
    manifest.set_derived("rows", rows.to_string());
    let manifest_path = manifest.write(out)?;

    Ok(DispersionOutcome {
        manifest_hash: hash,
        rows,
        files: vec![csv_path, manifest_path],
    })
}

/// Worker count resolution for the CLI: flag beats environment beats
/// config file; the config-vs-default merge happens in [`cmd_sweep`].
pub fn jobs_from_env() -> Result<Option<usize>, RunError> {
    match std::env::var("DIRACSEA_JOBS") {
        Err(_) => Ok(None),
        Ok(text) => match text.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(RunError::Pool(format!(
                "DIRACSEA_JOBS must be a positive integer, got '{text}'"
            ))),
        },
    }
}
