use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use sheaf_sysid::dynamics::{derive_seed, gaussian_initial_conditions, simulate_ensemble};
use sheaf_sysid::experiments::{
    basis_table, force_check_table, formation_table, run_bounded_confidence, run_finite_basis, run_formation_transfer,
    threshold_table, BasisRun, ExperimentConfig, ExperimentId, FormationRow, SheafVariant, Table, ThresholdRun,
};
use sheaf_sysid::io::{derivative_path, read_trajectory, write_series_csv, write_trajectory};
use sheaf_sysid::sysid::{fit_linear, fit_threshold, residuals_exact, residuals_fd, EstimationReport};
use sheaf_sysid::{CoboundaryOperator, Cochain0, Error, ParametricFamily, ResidualDataset, ResidualSource, SimConfig};

use crate::config::{node_field, CommandName, FamilySpec, RunConfig, SimulationSpec};

/// Relative rank tolerance for cohomology reports.
const RANK_TOL: f64 = 1e-10;
/// Seed stream for generated initial conditions, apart from the noise streams.
const INITIAL_STREAM: u64 = 0x1C;

/// Everything a command needs: the effective config, where relative paths
/// resolve, where outputs go, and the provenance stamped on every file.
pub struct Run {
    pub command: CommandName,
    pub config: RunConfig,
    pub base: PathBuf,
    pub out: PathBuf,
    pub hash: String,
    pub quiet: bool,
}

impl Run {
    pub fn new(command: CommandName, config: RunConfig, base: PathBuf, out: PathBuf, quiet: bool) -> Result<Self> {
        let mut ctx = Self {
            command,
            config,
            base,
            out,
            hash: String::new(),
            quiet,
        };
        ctx.hash = ctx.compute_hash()?;
        Ok(ctx)
    }

    /// SHA-256 of the effective config (output directory excluded) followed by
    /// the bytes of every input file it references.
    fn compute_hash(&self) -> Result<String> {
        let mut cfg = self.config.clone();
        cfg.out = None;
        let mut h = Sha256::new();
        h.update(b"sheaf-sysid run config\n");
        h.update(cfg.to_toml()?.as_bytes());
        for path in self.input_files()? {
            h.update(format!("\n--- {}\n", path.display()).as_bytes());
            h.update(std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?);
        }
        Ok(hex::encode(h.finalize()))
    }

    fn input_files(&self) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        if let Some(f) = self.config.sheaf.as_ref().and_then(|s| s.file.as_ref()) {
            files.push(self.base.join(f));
        }
        if self.command == CommandName::Identify {
            if let Some(spec) = &self.config.identify {
                for f in trajectory_files(&self.base, &spec.data)? {
                    let d = derivative_path(&f);
                    files.push(f);
                    if d.exists() {
                        files.push(d);
                    }
                }
            }
        }
        Ok(files)
    }

    fn short(&self) -> &str {
        &self.hash[..12]
    }

    fn name(&self, stem: &str, ext: &str) -> PathBuf {
        self.out.join(format!("{stem}-{}.{ext}", self.short()))
    }

    fn header(&self, seeds: &[u64]) -> Vec<String> {
        vec![format!("config_hash = {}", self.hash), format!("seeds = {seeds:?}")]
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        if !self.quiet {
            println!("wrote {}", path.display());
        }
        Ok(())
    }

    fn write_table(&self, stem: &str, table: &Table, seeds: &[u64]) -> Result<()> {
        let mut head = String::new();
        for c in self.header(seeds) {
            writeln!(head, "# {c}")?;
        }
        self.write(&self.name(stem, "csv"), &format!("{head}{}", table.to_csv()))?;
        self.write(&self.name(stem, "txt"), &format!("{head}{}", table.to_text()))?;
        if !self.quiet {
            println!("\n{}", table.to_text());
        }
        Ok(())
    }

    fn write_toml<S: Serialize>(&self, path: &Path, value: &S) -> Result<()> {
        self.write(path, &toml::to_string(value).context("serializing output")?)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn operator(&self) -> Result<CoboundaryOperator<f64>> {
        let sheaf = self.config.sheaf()?.build(&self.base)?;
        Ok(CoboundaryOperator::build(&sheaf)?)
    }

    pub fn run(&self) -> Result<()> {
        match self.command {
            CommandName::Cohomology => self.cohomology(),
            CommandName::Simulate => self.simulate(),
            CommandName::Identify => self.identify(),
            CommandName::Experiment => self.experiment(),
        }
    }

    fn cohomology(&self) -> Result<()> {
        let op = self.operator()?;
        let h1 = op.harmonic_basis(RANK_TOL)?;
        let h0 = op.global_section_basis(RANK_TOL)?;
        let spectrum = op.laplacian_spectrum();
        let smax = spectrum.iter().copied().fold(0.0, f64::max);
        let nonzero_min = spectrum
            .iter()
            .copied()
            .filter(|&l| l > RANK_TOL * smax.max(1.0))
            .fold(f64::INFINITY, f64::min);

        self.say(format!("dim H0 = {}", h0.dim()));
        self.say(format!("dim H1 = {}", h1.dim()));
        self.say(format!("rank = {}", op.rank(RANK_TOL)));
        if nonzero_min.is_finite() {
            self.say(format!(
                "nonzero spectrum of the Laplacian in [{nonzero_min:.6e}, {smax:.6e}]"
            ));
        } else {
            self.say("the Laplacian is zero");
        }

        #[derive(Serialize)]
        struct Report {
            config_hash: String,
            seeds: Vec<u64>,
            d0: usize,
            d1: usize,
            rank: usize,
            dim_h0: usize,
            dim_h1: usize,
            rank_tolerance: f64,
            laplacian_spectrum: Vec<f64>,
        }
        let report = Report {
            config_hash: self.hash.clone(),
            seeds: vec![self.config.seed],
            d0: op.d0(),
            d1: op.d1(),
            rank: op.rank(RANK_TOL),
            dim_h0: h0.dim(),
            dim_h1: h1.dim(),
            rank_tolerance: RANK_TOL,
            laplacian_spectrum: spectrum,
        };
        self.write_toml(&self.name("cohomology", "toml"), &report)?;

        let mut csv = String::new();
        for c in self.header(&[self.config.seed]) {
            writeln!(csv, "# {c}")?;
        }
        csv.push_str("# orthonormal basis of ker δ* in the edge inner product, one column per vector\n");
        csv.push_str("coordinate");
        for j in 0..h1.dim() {
            write!(csv, ",h{j}")?;
        }
        csv.push('\n');
        for i in 0..op.d1() {
            write!(csv, "{i}")?;
            for j in 0..h1.dim() {
                write!(csv, ",{}", h1.basis[(i, j)])?;
            }
            csv.push('\n');
        }
        self.write(&self.name("harmonic_basis", "csv"), &csv)
    }

    fn simulate(&self) -> Result<()> {
        let op = self.operator()?;
        let model = self
            .config
            .potential
            .as_ref()
            .context("simulate needs a [potential] section")?
            .build(&op)?;
        let nf = node_field(self.config.node_field.as_ref(), &op)?;
        let spec = self.config.simulation.clone().unwrap_or_default();
        let seed = self.config.seed;
        let ics = initial_conditions(&spec, op.d0(), seed)?;
        let sim = SimConfig {
            alpha: spec.alpha,
            step: spec.step,
            horizon: spec.horizon,
            seed,
            noise_std: spec.noise_std,
        };
        sim.validate()?;
        let results = simulate_ensemble(&op, &model, &nf, &ics, &sim);

        #[derive(Serialize)]
        struct Entry {
            index: usize,
            file: Option<String>,
            derivatives: Option<String>,
            noise_seed: u64,
            status: &'static str,
            diverged_at: Option<f64>,
        }
        #[derive(Serialize)]
        struct Manifest {
            config_hash: String,
            seeds: Vec<u64>,
            potential: String,
            trajectories: Vec<Entry>,
        }
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let mut entries = Vec::new();
        let mut first_divergence = None;
        for (i, r) in results.into_iter().enumerate() {
            let noise_seed = derive_seed(seed, i as u64);
            match r {
                Ok(traj) => {
                    let path = self.out.join(format!("simulate-{}-{i:03}.csv", self.short()));
                    let mut comments = self.header(&[seed]);
                    comments.push(format!("seed = {seed}"));
                    comments.push(format!("trajectory = {i}"));
                    comments.push(format!("noise_seed = {noise_seed}"));
                    write_trajectory(&path, &traj, &comments)?;
                    self.say(format!("wrote {}", path.display()));
                    let file_name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned());
                    entries.push(Entry {
                        index: i,
                        file: file_name(&path),
                        derivatives: file_name(&derivative_path(&path)),
                        noise_seed,
                        status: "ok",
                        diverged_at: None,
                    });
                }
                Err(Error::Divergence { time }) => {
                    self.say(format!("trajectory {i} diverged at t = {time}"));
                    first_divergence.get_or_insert(time);
                    entries.push(Entry {
                        index: i,
                        file: None,
                        derivatives: None,
                        noise_seed,
                        status: "diverged",
                        diverged_at: Some(time),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        let manifest = Manifest {
            config_hash: self.hash.clone(),
            seeds: vec![seed],
            potential: model.kind_name().to_string(),
            trajectories: entries,
        };
        self.write_toml(&self.name("simulate-manifest", "toml"), &manifest)?;
        match first_divergence {
            Some(time) => Err(Error::Divergence { time }.into()),
            None => Ok(()),
        }
    }

    fn identify(&self) -> Result<()> {
        let spec = self
            .config
            .identify
            .as_ref()
            .context("identify needs an [identify] section")?;
        let op = self.operator()?;
        let family = spec.family.build(&op)?;
        let nf = node_field(self.config.node_field.as_ref(), &op)?;
        let files = trajectory_files(&self.base, &spec.data)?;
        if files.is_empty() {
            bail!("no trajectory files found in {:?}", spec.data);
        }
        let mut data = ResidualDataset::new(spec.residuals, spec.noise_std);
        let mut seeds = BTreeSet::new();
        for f in &files {
            let traj = read_trajectory::<f64>(f).with_context(|| format!("reading {}", f.display()))?;
            let part = match spec.residuals {
                ResidualSource::Exact => residuals_exact(&op, &traj, &nf),
                ResidualSource::FiniteDifference => residuals_fd(&op, &traj, &nf, spec.noise_std),
            }
            .with_context(|| format!("residuals of {}", f.display()))?;
            data.extend(part);
            seeds.extend(recorded_seeds(f)?);
        }
        let result = match (&spec.family, &family) {
            (FamilySpec::BoundedConfidence { bracket }, _) => {
                if spec.ridge != 0.0 {
                    bail!("the bounded-confidence fit takes no ridge weight");
                }
                fit_threshold(&op, &data, (bracket[0], bracket[1]))?
            }
            (_, ParametricFamily::BoundedConfidence) => unreachable!(),
            _ => fit_linear(&op, &family, &data, spec.ridge)?,
        };
        let report = EstimationReport::new(&family, &result, &data, seeds.into_iter().collect(), self.hash.clone());
        self.say(format!("theta = {:?}", report.theta));
        self.say(format!(
            "identifiable = {} (lambda_min = {:e}, lambda_max = {:e})",
            report.identifiable, report.lambda_min, report.lambda_max
        ));
        self.say(format!(
            "objective = {:e} over {} samples",
            report.objective, report.samples
        ));
        self.write(&self.name("identify", "toml"), &report.to_toml()?)
    }

    fn experiment(&self) -> Result<()> {
        let cfg: &ExperimentConfig = self
            .config
            .experiment
            .as_ref()
            .context("experiment needs an [experiment] section")?;
        let id = cfg.experiment.as_str();
        let seeds = &cfg.seeds;

        #[derive(Serialize)]
        struct Runs<'a, R: Serialize> {
            config_hash: &'a str,
            seeds: &'a [u64],
            runs: &'a [R],
        }
        match cfg.experiment {
            ExperimentId::FormationTransfer => {
                let runs = run_formation_transfer(cfg)?;
                let rows: Vec<FormationRow> = runs.iter().map(|r| r.row.clone()).collect();
                self.write_table(id, &formation_table(&rows), seeds)?;
                self.write_toml(
                    &self.name(&format!("{id}-runs"), "toml"),
                    &Runs {
                        config_hash: &self.hash,
                        seeds,
                        runs: &rows,
                    },
                )?;
                // Rollouts for plotting.
                for r in &runs {
                    let variant = match r.row.variant {
                        SheafVariant::Identity => "identity",
                        SheafVariant::Rotated => "rotated",
                    };
                    let tag = format!("{id}-n{}-{variant}", r.row.cycle_length);
                    let mut comments = self.header(seeds);
                    comments.push(format!("target = {:?}", r.target.as_slice()));
                    for (label, traj) in [("recovered", &r.recovered), ("perturbed", &r.perturbed)] {
                        let mut buf = Vec::new();
                        write_series_csv(&mut buf, &traj.times, &traj.states, &comments)?;
                        self.write(&self.name(&format!("{tag}-{label}"), "csv"), std::str::from_utf8(&buf)?)?;
                    }
                }
            }
            ExperimentId::BoundedConfidence => {
                let runs: Vec<ThresholdRun> = run_bounded_confidence(cfg)?;
                self.write_table(id, &threshold_table(&runs), seeds)?;
                self.write_table(&format!("{id}-force_mse"), &force_check_table(&runs, &[]), seeds)?;
                self.write_toml(
                    &self.name(&format!("{id}-runs"), "toml"),
                    &Runs {
                        config_hash: &self.hash,
                        seeds,
                        runs: &runs,
                    },
                )?;
            }
            ExperimentId::FiniteBasis => {
                let runs: Vec<BasisRun> = run_finite_basis(cfg)?;
                self.write_table(id, &basis_table(&runs), seeds)?;
                self.write_table(&format!("{id}-force_mse"), &force_check_table(&[], &runs), seeds)?;
                self.write_toml(
                    &self.name(&format!("{id}-runs"), "toml"),
                    &Runs {
                        config_hash: &self.hash,
                        seeds,
                        runs: &runs,
                    },
                )?;
            }
        }
        Ok(())
    }
}

fn initial_conditions(spec: &SimulationSpec, d0: usize, seed: u64) -> Result<Vec<Cochain0<f64>>> {
    match &spec.initial {
        Some(list) => {
            if list.is_empty() {
                bail!("simulation.initial is empty");
            }
            list.iter()
                .enumerate()
                .map(|(i, x)| {
                    if x.len() != d0 {
                        bail!(
                            "initial condition {i} has {} entries, the 0-cochain dimension is {d0}",
                            x.len()
                        );
                    }
                    Ok(Cochain0::from_slice(x))
                })
                .collect()
        }
        None => {
            if spec.trajectories == 0 {
                bail!("simulation.trajectories must be at least 1");
            }
            Ok(gaussian_initial_conditions(
                d0,
                spec.trajectories,
                spec.scale,
                derive_seed(seed, INITIAL_STREAM),
            ))
        }
    }
}

/// Expands directories to their trajectory CSVs (derivative companions
/// excluded), sorted by name; plain files are kept as given.
fn trajectory_files(base: &Path, entries: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for e in entries {
        let p = base.join(e);
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(&p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|d| d.ok().map(|d| d.path()))
                .filter(|f| {
                    let name = f
                        .file_name()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    name.ends_with(".csv") && !name.ends_with(".deriv.csv")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if p.exists() {
            out.push(p);
        } else {
            bail!("trajectory path {} does not exist", p.display());
        }
    }
    Ok(out)
}

/// `seed = N` comment lines written by `simulate`.
fn recorded_seeds(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.strip_prefix("# seed = ")?.trim().parse().ok())
        .collect())
}
