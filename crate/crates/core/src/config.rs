//! Run configuration: a flat sectioned key-value format with line-level
//! diagnostics. Unknown sections and keys are rejected, required keys are
//! named when missing, and every documented default is applied here and
//! nowhere else.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::evolution::Method;
use crate::lattice::{
    Boundary, GaussianPotential, LatticeError, LatticeSpec, RampSchedule, RampShape,
    StaggeredCopy,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key '{key}' in [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: duplicate key '{key}'")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: section [{name}] opened twice")]
    DuplicateSection { line: usize, name: String },
    #[error("missing section [{0}]")]
    MissingSection(&'static str),
    #[error("missing key '{key}' in [{section}]")]
    MissingKey {
        section: &'static str,
        key: &'static str,
    },
    #[error("line {line}: key '{key}' expects {want}, got '{got}'")]
    BadValue {
        line: usize,
        key: String,
        want: &'static str,
        got: String,
    },
    #[error(transparent)]
    Domain(#[from] LatticeError),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
struct SectionData {
    line: usize,
    entries: BTreeMap<String, (usize, String)>,
}

/// Parsed but untyped config text: sections of key-value pairs with the
/// line each came from.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, SectionData>,
}

/// Strip a trailing comment. Values never contain '#' or ';'.
fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(pos) => &line[..pos],
        None => line,
    }
}

pub fn parse_str(text: &str) -> Result<RawConfig, ConfigError> {
    let mut raw = RawConfig::default();
    let mut current: Option<String> = None;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let body = strip_comment(raw_line).trim();
        if body.is_empty() {
            continue;
        }
        if let Some(stripped) = body.strip_prefix('[') {
            let name = stripped
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax {
                    line,
                    msg: "unterminated section header".into(),
                })?
                .trim()
                .to_string();
            if name.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    msg: "empty section name".into(),
                });
            }
            if raw.sections.contains_key(&name) {
                return Err(ConfigError::DuplicateSection { line, name });
            }
            raw.sections.insert(
                name.clone(),
                SectionData {
                    line,
                    entries: BTreeMap::new(),
                },
            );
            current = Some(name);
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("expected 'key = value', got '{body}'"),
            });
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                msg: "empty key".into(),
            });
        }
        let Some(section) = &current else {
            return Err(ConfigError::Syntax {
                line,
                msg: format!("key '{key}' appears before any section header"),
            });
        };
        let entries = &mut raw.sections.get_mut(section).unwrap().entries;
        if entries.contains_key(&key) {
            return Err(ConfigError::DuplicateKey { line, key });
        }
        entries.insert(key, (line, value));
    }
    Ok(raw)
}

/// One section's entries being consumed key by key; leftovers at the end
/// are unknown keys and rejected with their line numbers.
struct SectionReader {
    name: &'static str,
    entries: BTreeMap<String, (usize, String)>,
}

impl SectionReader {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn require(&mut self, key: &'static str) -> Result<(usize, String), ConfigError> {
        self.take(key).ok_or(ConfigError::MissingKey {
            section: self.name,
            key,
        })
    }

    fn finish(self) -> Result<(), ConfigError> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(ConfigError::UnknownKey {
                line,
                section: self.name.to_string(),
                key,
            });
        }
        Ok(())
    }
}

fn parse_f64(key: &str, line: usize, value: &str) -> Result<f64, ConfigError> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| ConfigError::BadValue {
            line,
            key: key.to_string(),
            want: "a finite number",
            got: value.to_string(),
        })
}

fn parse_usize(key: &str, line: usize, value: &str) -> Result<usize, ConfigError> {
    value.parse::<usize>().map_err(|_| ConfigError::BadValue {
        line,
        key: key.to_string(),
        want: "a non-negative integer",
        got: value.to_string(),
    })
}

fn parse_f64_list(key: &str, line: usize, value: &str) -> Result<Vec<f64>, ConfigError> {
    let items: Result<Vec<f64>, ConfigError> = value
        .split(',')
        .map(|s| parse_f64(key, line, s.trim()))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(ConfigError::BadValue {
            line,
            key: key.to_string(),
            want: "a non-empty comma-separated list",
            got: value.to_string(),
        });
    }
    Ok(items)
}

#[derive(Clone, Debug)]
pub struct LatticeSection {
    pub nx: usize,
    pub ny: usize,
    pub mass: f64,
    pub boundary: Boundary,
    pub copy: StaggeredCopy,
}

#[derive(Clone, Debug)]
pub struct PotentialSection {
    pub v0: f64,
    pub sigma: f64,
    /// None puts the bump at the lattice center.
    pub center: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct ScheduleSection {
    pub lambda_max: f64,
    pub lambda_final: f64,
    pub t_on: f64,
    pub t_hold: f64,
    pub t_off: f64,
    pub shape: RampShape,
}

#[derive(Clone, Debug)]
pub struct EvolutionSection {
    /// None picks the documented automatic step for the run.
    pub dt: Option<f64>,
    pub method: Method,
    pub checkpoint_stride: usize,
    /// Pair-number samples over the run for the time series.
    pub samples: usize,
    pub snapshot_times: Vec<f64>,
}

impl Default for EvolutionSection {
    fn default() -> Self {
        Self {
            dt: None,
            method: Method::CrankNicolson,
            checkpoint_stride: 500,
            samples: 200,
            snapshot_times: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSection {
    pub lambda_max_list: Vec<f64>,
    pub t_tot_list: Vec<f64>,
    pub jobs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct SpectrumSection {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub points: usize,
}

#[derive(Clone, Debug)]
pub struct DispersionSection {
    pub nk: usize,
}

/// Fully typed configuration. Sections a command does not use may be
/// absent; the command that needs one reports it by name.
#[derive(Clone, Debug)]
pub struct Config {
    pub lattice: LatticeSection,
    pub potential: PotentialSection,
    pub schedule: Option<ScheduleSection>,
    pub evolution: EvolutionSection,
    pub sweep: Option<SweepSection>,
    pub spectrum: Option<SpectrumSection>,
    pub dispersion: Option<DispersionSection>,
}

fn lattice_section(mut r: SectionReader) -> Result<LatticeSection, ConfigError> {
    let (line, v) = r.require("nx")?;
    let nx = parse_usize("nx", line, &v)?;
    let (line, v) = r.require("ny")?;
    let ny = parse_usize("ny", line, &v)?;
    let (line, v) = r.require("mass")?;
    let mass = parse_f64("mass", line, &v)?;
    if mass < 0.0 {
        return Err(ConfigError::BadValue {
            line,
            key: "mass".into(),
            want: "a non-negative mass",
            got: v,
        });
    }
    let boundary = match r.take("boundary") {
        None => Boundary::Open,
        Some((line, v)) => match v.as_str() {
            "open" => Boundary::Open,
            "periodic" => Boundary::Periodic,
            _ => {
                return Err(ConfigError::BadValue {
                    line,
                    key: "boundary".into(),
                    want: "open or periodic",
                    got: v,
                })
            }
        },
    };
    let copy = match r.take("copy") {
        None => StaggeredCopy::A,
        Some((line, v)) => match v.as_str() {
            "a" | "A" => StaggeredCopy::A,
            "b" | "B" => StaggeredCopy::B,
            _ => {
                return Err(ConfigError::BadValue {
                    line,
                    key: "copy".into(),
                    want: "a or b",
                    got: v,
                })
            }
        },
    };
    r.finish()?;
    Ok(LatticeSection {
        nx,
        ny,
        mass,
        boundary,
        copy,
    })
}

fn potential_section(mut r: SectionReader) -> Result<PotentialSection, ConfigError> {
    let (line, v) = r.require("v0")?;
    let v0 = parse_f64("v0", line, &v)?;
    let (line, v) = r.require("sigma")?;
    let sigma = parse_f64("sigma", line, &v)?;
    let cx = r.take("center_x");
    let cy = r.take("center_y");
    let center = match (cx, cy) {
        (None, None) => None,
        (Some((line, v)), Some((line_y, v_y))) => Some((
            parse_f64("center_x", line, &v)?,
            parse_f64("center_y", line_y, &v_y)?,
        )),
        (Some(_), None) => {
            return Err(ConfigError::MissingKey {
                section: "potential",
                key: "center_y",
            })
        }
        (None, Some(_)) => {
            return Err(ConfigError::MissingKey {
                section: "potential",
                key: "center_x",
            })
        }
    };
    r.finish()?;
    Ok(PotentialSection { v0, sigma, center })
}

fn schedule_section(mut r: SectionReader) -> Result<ScheduleSection, ConfigError> {
    let (line, v) = r.require("lambda_max")?;
    let lambda_max = parse_f64("lambda_max", line, &v)?;
    let lambda_final = match r.take("lambda_final") {
        None => 0.0,
        Some((line, v)) => parse_f64("lambda_final", line, &v)?,
    };
    let (line, v) = r.require("t_on")?;
    let t_on = parse_f64("t_on", line, &v)?;
    let (line, v) = r.require("t_hold")?;
    let t_hold = parse_f64("t_hold", line, &v)?;
    let (line, v) = r.require("t_off")?;
    let t_off = parse_f64("t_off", line, &v)?;
    let shape = match r.take("shape") {
        None => RampShape::SinSquared,
        Some((line, v)) => match v.as_str() {
            "linear" => RampShape::Linear,
            "sinsq" => RampShape::SinSquared,
            _ => {
                return Err(ConfigError::BadValue {
                    line,
                    key: "shape".into(),
                    want: "linear or sinsq",
                    got: v,
                })
            }
        },
    };
    r.finish()?;
    Ok(ScheduleSection {
        lambda_max,
        lambda_final,
        t_on,
        t_hold,
        t_off,
        shape,
    })
}

fn evolution_section(mut r: SectionReader) -> Result<EvolutionSection, ConfigError> {
    let mut out = EvolutionSection::default();
    if let Some((line, v)) = r.take("dt") {
        out.dt = if v == "auto" {
            None
        } else {
            let dt = parse_f64("dt", line, &v)?;
            if dt <= 0.0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: "dt".into(),
                    want: "a positive step or 'auto'",
                    got: v,
                });
            }
            Some(dt)
        };
    }
    if let Some((line, v)) = r.take("method") {
        out.method = match v.as_str() {
            "cn" => Method::CrankNicolson,
            "eigen" => Method::EigenStep,
            _ => {
                return Err(ConfigError::BadValue {
                    line,
                    key: "method".into(),
                    want: "cn or eigen",
                    got: v,
                })
            }
        };
    }
    if let Some((line, v)) = r.take("checkpoint_stride") {
        let stride = parse_usize("checkpoint_stride", line, &v)?;
        if stride == 0 {
            return Err(ConfigError::BadValue {
                line,
                key: "checkpoint_stride".into(),
                want: "a positive step count",
                got: v,
            });
        }
        out.checkpoint_stride = stride;
    }
    if let Some((line, v)) = r.take("samples") {
        let samples = parse_usize("samples", line, &v)?;
        if samples < 2 {
            return Err(ConfigError::BadValue {
                line,
                key: "samples".into(),
                want: "at least 2 samples",
                got: v,
            });
        }
        out.samples = samples;
    }
    if let Some((line, v)) = r.take("snapshot_times") {
        out.snapshot_times = parse_f64_list("snapshot_times", line, &v)?;
    }
    r.finish()?;
    Ok(out)
}

fn sweep_section(mut r: SectionReader) -> Result<SweepSection, ConfigError> {
    let (line, v) = r.require("lambda_max_list")?;
    let lambda_max_list = parse_f64_list("lambda_max_list", line, &v)?;
    if lambda_max_list.iter().any(|&l| l < 0.0) {
        return Err(ConfigError::BadValue {
            line,
            key: "lambda_max_list".into(),
            want: "non-negative depths",
            got: v,
        });
    }
    let (line, v) = r.require("t_tot_list")?;
    let t_tot_list = parse_f64_list("t_tot_list", line, &v)?;
    if t_tot_list.iter().any(|&t| t <= 0.0) {
        return Err(ConfigError::BadValue {
            line,
            key: "t_tot_list".into(),
            want: "positive durations",
            got: v,
        });
    }
    let jobs = match r.take("jobs") {
        None => None,
        Some((line, v)) => {
            let jobs = parse_usize("jobs", line, &v)?;
            if jobs == 0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: "jobs".into(),
                    want: "a positive worker count",
                    got: v,
                });
            }
            Some(jobs)
        }
    };
    r.finish()?;
    Ok(SweepSection {
        lambda_max_list,
        t_tot_list,
        jobs,
    })
}

fn spectrum_section(mut r: SectionReader) -> Result<SpectrumSection, ConfigError> {
    let lambda_min = match r.take("lambda_min") {
        None => 0.0,
        Some((line, v)) => {
            let lo = parse_f64("lambda_min", line, &v)?;
            if lo < 0.0 {
                return Err(ConfigError::BadValue {
                    line,
                    key: "lambda_min".into(),
                    want: "a non-negative depth",
                    got: v,
                });
            }
            lo
        }
    };
    let (line, v) = r.require("lambda_max")?;
    let lambda_max = parse_f64("lambda_max", line, &v)?;
    let (line, v) = r.require("points")?;
    let points = parse_usize("points", line, &v)?;
    if points == 0 {
        return Err(ConfigError::BadValue {
            line,
            key: "points".into(),
            want: "a positive sample count",
            got: v,
        });
    }
    if lambda_max < lambda_min {
        return Err(ConfigError::BadValue {
            line,
            key: "lambda_max".into(),
            want: "a value at or above lambda_min",
            got: v,
        });
    }
    r.finish()?;
    Ok(SpectrumSection {
        lambda_min,
        lambda_max,
        points,
    })
}

fn dispersion_section(mut r: SectionReader) -> Result<DispersionSection, ConfigError> {
    let (line, v) = r.require("nk")?;
    let nk = parse_usize("nk", line, &v)?;
    if nk < 2 {
        return Err(ConfigError::BadValue {
            line,
            key: "nk".into(),
            want: "at least 2 samples per axis",
            got: v,
        });
    }
    r.finish()?;
    Ok(DispersionSection { nk })
}

impl Config {
    pub fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        const KNOWN: [&str; 7] = [
            "lattice",
            "potential",
            "schedule",
            "evolution",
            "sweep",
            "spectrum",
            "dispersion",
        ];
        // Unknown sections first, so they are reported even when a known
        // section is also incomplete.
        for (name, data) in &raw.sections {
            if !KNOWN.contains(&name.as_str()) {
                return Err(ConfigError::UnknownSection {
                    line: data.line,
                    name: name.clone(),
                });
            }
        }
        let mut lattice = None;
        let mut potential = None;
        let mut schedule = None;
        let mut evolution = None;
        let mut sweep = None;
        let mut spectrum = None;
        let mut dispersion = None;
        for (name, data) in raw.sections {
            let reader = |n| SectionReader {
                name: n,
                entries: data.entries.clone(),
            };
            match name.as_str() {
                "lattice" => lattice = Some(lattice_section(reader("lattice"))?),
                "potential" => potential = Some(potential_section(reader("potential"))?),
                "schedule" => schedule = Some(schedule_section(reader("schedule"))?),
                "evolution" => evolution = Some(evolution_section(reader("evolution"))?),
                "sweep" => sweep = Some(sweep_section(reader("sweep"))?),
                "spectrum" => spectrum = Some(spectrum_section(reader("spectrum"))?),
                "dispersion" => dispersion = Some(dispersion_section(reader("dispersion"))?),
                _ => {
                    return Err(ConfigError::UnknownSection {
                        line: data.line,
                        name,
                    })
                }
            }
        }
        Ok(Self {
            lattice: lattice.ok_or(ConfigError::MissingSection("lattice"))?,
            potential: potential.ok_or(ConfigError::MissingSection("potential"))?,
            schedule,
            evolution: evolution.unwrap_or_default(),
            sweep,
            spectrum,
            dispersion,
        })
    }

    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        Self::from_raw(parse_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    pub fn lattice_spec(&self) -> Result<LatticeSpec, ConfigError> {
        let l = &self.lattice;
        Ok(LatticeSpec::new(l.nx, l.ny, l.mass, l.boundary, l.copy)?)
    }

    pub fn gaussian_potential(&self, spec: &LatticeSpec) -> Result<GaussianPotential, ConfigError> {
        let p = &self.potential;
        Ok(match p.center {
            Some(center) => GaussianPotential::new(p.v0, p.sigma, center)?,
            None => GaussianPotential::centered(p.v0, p.sigma, spec)?,
        })
    }

    pub fn schedule_section(&self) -> Result<&ScheduleSection, ConfigError> {
        self.schedule
            .as_ref()
            .ok_or(ConfigError::MissingSection("schedule"))
    }

    pub fn ramp_schedule(&self) -> Result<RampSchedule, ConfigError> {
        let s = self.schedule_section()?;
        Ok(RampSchedule::new(
            s.lambda_max,
            s.lambda_final,
            s.t_on,
            s.t_hold,
            s.t_off,
            s.shape,
        )?)
    }

    pub fn sweep_section(&self) -> Result<&SweepSection, ConfigError> {
        self.sweep
            .as_ref()
            .ok_or(ConfigError::MissingSection("sweep"))
    }

    pub fn spectrum_section(&self) -> Result<&SpectrumSection, ConfigError> {
        self.spectrum
            .as_ref()
            .ok_or(ConfigError::MissingSection("spectrum"))
    }

    pub fn dispersion_section(&self) -> Result<&DispersionSection, ConfigError> {
        self.dispersion
            .as_ref()
            .ok_or(ConfigError::MissingSection("dispersion"))
    }
}
