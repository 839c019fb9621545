//! Long-format dataset files, run configuration, the command entry points and
//! their digest-stamped artifacts.
//!
//! Input rows are `study,source,participant,position,y,x1..xq` with 1-based
//! study, source and position indices. Every artifact a command writes starts
//! with a `# manifest-digest: <sha256>` line, and `manifest.json` lists the
//! sha256 of each artifact file.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::admm::AdmmConfig;
use crate::dataset::StudyDataset;
use crate::error::{FusionError, Result};
use crate::gmm::{gmm_estimate, PartitionMap, StackedSystem};
use crate::meta::{confidence_intervals, meta_combine};
use crate::model::{BasisKind, LinkFamily, SourceBlock};
use crate::penalty::{PairSet, PenaltyConfig};
use crate::selection::{initial_qif_fits, run_path_from, write_path_table, SolutionPath};
use crate::sim::{
    covariate_name, gate_failures, gen_dataset, run_study, write_metrics, write_replicates,
    SimDesign,
};

pub const MANIFEST_FILE: &str = "manifest.json";
const DIGEST_PREFIX: &str = "# manifest-digest: ";
const KEY_COLUMNS: [&str; 5] = ["study", "source", "participant", "position", "y"];

fn default_delta() -> f64 {
    3.0
}
fn default_level() -> f64 {
    0.95
}
fn default_basis() -> BasisKind {
    BasisKind::ArBand(1)
}
fn default_output() -> PathBuf {
    PathBuf::from("qif-fusion-out")
}

/// Settings shared by the fitting commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub link: LinkFamily,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    pub lambdas: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub admm: AdmmConfig,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub exclude_homogeneous: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(link: LinkFamily, lambdas: Vec<f64>) -> Self {
        Self {
            link,
            basis: default_basis(),
            lambdas,
            delta: default_delta(),
            admm: AdmmConfig::default(),
            ci_level: default_level(),
            seed: 0,
            exclude_homogeneous: false,
            output_dir: default_output(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn penalty(&self) -> Result<PenaltyConfig> {
        PenaltyConfig::new(0.0, self.delta, self.admm.rho)
    }

    pub fn validate(&self) -> Result<()> {
        self.penalty()?;
        if self.lambdas.is_empty() {
            return Err(FusionError::Config("lambda grid is empty".into()));
        }
        if self.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(FusionError::Config("lambda grid must be nonnegative".into()));
        }
        if self.lambdas.windows(2).any(|w| w[1] < w[0]) {
            return Err(FusionError::Config("lambda grid must be ascending".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(FusionError::Config(format!(
                "ci_level must lie in (0, 1), got {}",
                self.ci_level
            )));
        }
        Ok(())
    }
}

/// A parsed long-format file.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: StudyDataset,
    /// Covariate column names from the header.
    pub covariates: Vec<String>,
    /// Participant ids per study in stored order.
    pub participants: Vec<Vec<String>>,
}

/// Numeric ids sort numerically and before any non-numeric id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum ParticipantKey {
    Number(u64),
    Text(String),
}

impl ParticipantKey {
    fn parse(s: &str) -> Self {
        s.parse().map_or_else(|_| Self::Text(s.to_string()), Self::Number)
    }
}

struct Row {
    line: usize,
    y: f64,
    x: Vec<f64>,
}

fn parse_err(line: usize, message: impl Into<String>) -> FusionError {
    FusionError::Parse {
        line,
        message: message.into(),
    }
}

fn parse_index(cell: &str, name: &str, line: usize) -> Result<usize> {
    match cell.trim().parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(parse_err(line, format!("{name} must be a positive integer, got {cell:?}"))),
    }
}

fn parse_value(cell: &str, name: &str, line: usize) -> Result<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(line, format!("{name} is not a finite number: {cell:?}"))),
    }
}

type SourceRows = BTreeMap<usize, Row>;
type ParticipantRows = BTreeMap<usize, SourceRows>;

/// Parses a long-format table. Lines starting with `#` are skipped.
pub fn read_dataset<R: Read>(
    reader: R,
    link: LinkFamily,
    basis: BasisKind,
) -> Result<LoadedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .comment(Some(b'#'))
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.len() < KEY_COLUMNS.len() + 1 || names[..KEY_COLUMNS.len()] != KEY_COLUMNS {
        return Err(parse_err(
            1,
            format!(
                "header must start with {} followed by at least one covariate",
                KEY_COLUMNS.join(",")
            ),
        ));
    }
    let covariates: Vec<String> = names[KEY_COLUMNS.len()..].iter().map(|s| s.to_string()).collect();
    let q = covariates.len();
    let width = names.len();

    // study -> participant -> source -> position -> row
    let mut studies: BTreeMap<usize, BTreeMap<ParticipantKey, (String, ParticipantRows)>> =
        BTreeMap::new();
    let mut home: HashMap<String, (usize, usize)> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} cells, found {}", rec.len()),
            ));
        }
        if let Some(c) = rec.iter().position(|c| c.trim().is_empty()) {
            return Err(parse_err(line, format!("missing value in column {}", names[c])));
        }
        let k = parse_index(&rec[0], "study", line)?;
        let j = parse_index(&rec[1], "source", line)?;
        let pid = rec[2].trim().to_string();
        let r = parse_index(&rec[3], "position", line)?;
        let y = parse_value(&rec[4], "y", line)?;
        if !link.supports(y) {
            return Err(parse_err(
                line,
                format!("response {y} is outside the support of {link:?}"),
            ));
        }
        let x = (0..q)
            .map(|c| parse_value(&rec[5 + c], &covariates[c], line))
            .collect::<Result<Vec<_>>>()?;
        match home.get(&pid) {
            Some(&(other, first)) if other != k => {
                return Err(parse_err(
                    line,
                    format!("participant {pid} appears in study {other} (line {first}) and study {k}"),
                ))
            }
            Some(_) => {}
            None => {
                home.insert(pid.clone(), (k, line));
            }
        }
        let entry = studies
            .entry(k)
            .or_default()
            .entry(ParticipantKey::parse(&pid))
            .or_insert_with(|| (pid.clone(), BTreeMap::new()));
        let slot = entry.1.entry(j).or_default();
        if let Some(prev) = slot.get(&r) {
            return Err(parse_err(
                line,
                format!(
                    "duplicate key (study {k}, participant {pid}, source {j}, position {r}) on lines {} and {line}",
                    prev.line
                ),
            ));
        }
        slot.insert(r, Row { line, y, x });
    }
    if studies.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }

    let n_studies = *studies.keys().max().expect("nonempty");
    let n_outcomes = studies
        .values()
        .flat_map(|s| s.values().flat_map(|(_, rows)| rows.keys().copied()))
        .max()
        .expect("nonempty");
    let mut blocks = Vec::with_capacity(n_studies);
    let mut participants = Vec::with_capacity(n_studies);
    for k in 1..=n_studies {
        let study = studies
            .get(&k)
            .ok_or_else(|| FusionError::InvalidInput(format!("study {k} has no rows")))?;
        let mut ids = Vec::with_capacity(study.len());
        let mut ys: Vec<Vec<f64>> = vec![Vec::new(); n_outcomes];
        let mut xs: Vec<Vec<f64>> = vec![Vec::new(); n_outcomes];
        let mut ms: Vec<Option<usize>> = vec![None; n_outcomes];
        for (pid, rows) in study.values() {
            ids.push(pid.clone());
            let first_line = rows
                .values()
                .flat_map(|s| s.values().map(|r| r.line))
                .min()
                .unwrap_or(0);
            for j in 1..=n_outcomes {
                let src = rows.get(&j).ok_or_else(|| {
                    parse_err(
                        first_line,
                        format!("participant {pid} of study {k} has no rows for source {j}"),
                    )
                })?;
                let m = src.len();
                let line = src.values().map(|r| r.line).min().unwrap_or(first_line);
                if src.keys().copied().ne(1..=m) {
                    return Err(parse_err(
                        line,
                        format!("positions of participant {pid}, source {j} are not 1..{m}"),
                    ));
                }
                match ms[j - 1] {
                    Some(expected) if expected != m => {
                        return Err(parse_err(
                            line,
                            format!(
                                "participant {pid} has {m} positions for source {j}, others have {expected}"
                            ),
                        ))
                    }
                    _ => ms[j - 1] = Some(m),
                }
                for row in src.values() {
                    ys[j - 1].push(row.y);
                    xs[j - 1].extend_from_slice(&row.x);
                }
            }
        }
        let study_blocks = ys
            .into_iter()
            .zip(xs)
            .enumerate()
            .map(|(j, (y, x))| {
                SourceBlock::new(k - 1, j, ms[j].expect("set above"), q, y, x, basis, link)
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(study_blocks);
        participants.push(ids);
    }
    Ok(LoadedDataset {
        dataset: StudyDataset::new(blocks)?,
        covariates,
        participants,
    })
}

/// Loads a long-format file with the link and basis of `config`.
pub fn load_dataset(path: &Path, config: &RunConfig) -> Result<StudyDataset> {
    Ok(load_dataset_full(path, config)?.dataset)
}

pub fn load_dataset_full(path: &Path, config: &RunConfig) -> Result<LoadedDataset> {
    read_dataset(fs::File::open(path)?, config.link, config.basis)
}

/// Writes a dataset in long format. Participant ids default to a running
/// 1-based count over all studies.
pub fn write_dataset<W: Write>(
    data: &StudyDataset,
    covariates: &[String],
    participants: Option<&[Vec<String>]>,
    out: W,
) -> Result<()> {
    if covariates.len() != data.q() {
        return Err(FusionError::Dimension(format!(
            "{} covariate names for q = {}",
            covariates.len(),
            data.q()
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(covariates.iter().cloned());
    w.write_record(&header)?;
    let mut counter = 0usize;
    for k in 0..data.n_studies() {
        for i in 0..data.study_size(k) {
            counter += 1;
            let pid = participants
                .and_then(|p| p.get(k))
                .and_then(|p| p.get(i))
                .cloned()
                .unwrap_or_else(|| counter.to_string());
            for j in 0..data.n_outcomes() {
                let block = data.block(k, j);
                let ys = block.responses(i);
                let xs = block.design(i);
                let q = block.q();
                for r in 0..block.m() {
                    let mut rec = vec![
                        (k + 1).to_string(),
                        (j + 1).to_string(),
                        pid.clone(),
                        (r + 1).to_string(),
                        ys[r].to_string(),
                    ];
                    rec.extend(xs[r * q..(r + 1) * q].iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a `study,source,group` table (1-based study and source, any group
/// labels) into a partition over `k * J + j` source indices.
pub fn read_partition<R: Read>(reader: R, n_studies: usize, n_outcomes: usize) -> Result<PartitionMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut labels: Vec<Option<String>> = vec![None; n_studies * n_outcomes];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(parse_err(line, "expected study,source,group"));
        }
        let k = parse_index(&rec[0], "study", line)?;
        let j = parse_index(&rec[1], "source", line)?;
        if k > n_studies || j > n_outcomes {
            return Err(parse_err(line, format!("source ({k}, {j}) is not in the dataset")));
        }
        let slot = &mut labels[(k - 1) * n_outcomes + (j - 1)];
        if slot.is_some() {
            return Err(parse_err(line, format!("source ({k}, {j}) listed twice")));
        }
        *slot = Some(rec[2].trim().to_string());
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(s, l)| {
            l.ok_or_else(|| {
                FusionError::InvalidInput(format!(
                    "partition lacks study {} source {}",
                    s / n_outcomes + 1,
                    s % n_outcomes + 1
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PartitionMap::from_labels(&labels))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

/// Fields covered by the manifest digest.
#[derive(Serialize)]
struct ManifestCore<'a> {
    version: &'a str,
    command: &'a str,
    config: &'a serde_json::Value,
    inputs: &'a [FileDigest],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub digest: String,
    pub artifacts: Vec<FileDigest>,
}

impl Manifest {
    fn new(command: &str, config: serde_json::Value, inputs: Vec<FileDigest>) -> Result<Self> {
        let mut m = Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            inputs,
            digest: String::new(),
            artifacts: Vec::new(),
        };
        m.digest = m.compute_digest()?;
        Ok(m)
    }

    fn compute_digest(&self) -> Result<String> {
        let core = ManifestCore {
            version: &self.version,
            command: &self.command,
            config: &self.config,
            inputs: &self.inputs,
        };
        Ok(sha256_hex(&serde_json::to_vec(&core)?))
    }
}

/// Replaces `path` atomically with `bytes`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| FusionError::Io(e.error))?;
    Ok(())
}

/// Collects artifacts of one command and writes them with the manifest.
struct ArtifactWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactWriter {
    fn new(dir: &Path, manifest: Manifest) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Writes `<digest line><body>` where `body` is produced by `fill`.
    fn table<F>(&mut self, name: &str, fill: F) -> Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> Result<()>,
    {
        let mut bytes = format!("{DIGEST_PREFIX}{}\n", self.manifest.digest).into_bytes();
        fill(&mut bytes)?;
        write_atomic(&self.dir.join(name), &bytes)?;
        self.manifest.artifacts.push(FileDigest {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    fn finish(self) -> Result<Manifest> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&self.dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(self.manifest)
    }
}

/// Re-checks the manifest digest, every artifact hash and every embedded
/// digest line in `dir`.
pub fn verify_artifacts(dir: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let expected = manifest.compute_digest()?;
    if expected != manifest.digest {
        return Err(FusionError::Artifact(format!(
            "manifest digest {} does not match its contents ({expected})",
            manifest.digest
        )));
    }
    for a in &manifest.artifacts {
        let bytes = fs::read(dir.join(&a.name))?;
        let actual = sha256_hex(&bytes);
        if actual != a.sha256 {
            return Err(FusionError::Artifact(format!(
                "{} has sha256 {actual}, manifest lists {}",
                a.name, a.sha256
            )));
        }
        let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
        let want = format!("{DIGEST_PREFIX}{}", manifest.digest);
        if first != want.as_bytes() {
            return Err(FusionError::Artifact(format!(
                "{} does not embed the manifest digest",
                a.name
            )));
        }
    }
    Ok(manifest)
}

/// Verifies `dir` and returns the body of artifact `name` without its
/// digest line.
pub fn load_artifact(dir: &Path, name: &str) -> Result<String> {
    let manifest = verify_artifacts(dir)?;
    if !manifest.artifacts.iter().any(|a| a.name == name) {
        return Err(FusionError::Artifact(format!("{name} is not listed in the manifest")));
    }
    let text = fs::read_to_string(dir.join(name))?;
    Ok(text.split_once('\n').map_or(String::new(), |(_, body)| body.to_string()))
}

fn input_digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path)?;
    Ok(FileDigest {
        name: path
            .file_name()
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned()),
        sha256: sha256_hex(&bytes),
    })
}

/// The configuration as recorded in manifests; the output directory is
/// left out so that reruns into other directories share a digest.
fn config_value(config: &RunConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(config)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("output_dir");
    }
    Ok(v)
}

struct Prepared {
    loaded: LoadedDataset,
    system: StackedSystem,
    pairs: PairSet,
    inputs: Vec<FileDigest>,
}

fn prepare(data_path: &Path, config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let loaded = load_dataset_full(data_path, config)?;
    let system = StackedSystem::new(loaded.dataset.clone())?;
    let pairs = PairSet::new(system.dataset().n_outcomes(), system.dataset().n_studies());
    Ok(Prepared {
        loaded,
        system,
        pairs,
        inputs: vec![input_digest(data_path)?],
    })
}

fn run_configured_path(p: &Prepared, config: &RunConfig) -> Result<(SolutionPath, Vec<f64>)> {
    let init = initial_qif_fits(&p.system)?;
    let path = run_path_from(
        &p.system,
        &p.pairs,
        &config.lambdas,
        config.penalty()?,
        config.admm,
        config.exclude_homogeneous,
        &init,
    )?;
    Ok((path, init))
}

fn write_partition_table(
    out: &mut Vec<u8>,
    partition: &PartitionMap,
    n_outcomes: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["study", "source", "group"])?;
    for (s, &g) in partition.assignment().iter().enumerate() {
        w.write_record([
            (s / n_outcomes + 1).to_string(),
            (s % n_outcomes + 1).to_string(),
            (g + 1).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_group_estimates(
    out: &mut Vec<u8>,
    theta: &[f64],
    se: &[f64],
    intervals: &[(f64, f64)],
    covariates: &[String],
) -> Result<()> {
    let q = covariates.len();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "covariate", "estimate", "std_error", "lower", "upper"])?;
    for (i, &t) in theta.iter().enumerate() {
        w.write_record([
            (i / q + 1).to_string(),
            covariates[i % q].clone(),
            t.to_string(),
            se[i].to_string(),
            intervals[i].0.to_string(),
            intervals[i].1.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_source_estimates(
    out: &mut Vec<u8>,
    beta: &[f64],
    se: &[f64],
    n_outcomes: usize,
    covariates: &[String],
) -> Result<()> {
    let q = covariates.len();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["study", "source", "covariate", "estimate", "std_error"])?;
    for (i, &b) in beta.iter().enumerate() {
        let s = i / q;
        w.write_record([
            (s / n_outcomes + 1).to_string(),
            (s % n_outcomes + 1).to_string(),
            covariates[i % q].clone(),
            b.to_string(),
            se[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Path, BIC selection, meta-estimate and the heterogeneous comparison.
///
/// Writes `path.csv`, `partition.csv`, `estimates.csv`, `heterogeneous.csv`
/// and `manifest.json` into `config.output_dir`.
pub fn cmd_fit(data_path: &Path, config: &RunConfig) -> Result<Manifest> {
    let p = prepare(data_path, config)?;
    let (path, init) = run_configured_path(&p, config)?;
    let rec = path.selected_record();
    let estimate = meta_combine(&p.system, &rec.partition, &rec.beta_hat)?;
    let intervals = confidence_intervals(&estimate, config.ci_level)?;
    let het = gmm_estimate(&p.system, &PartitionMap::singletons(p.system.n_sources()), &init)?;
    let n_outcomes = p.system.dataset().n_outcomes();

    let manifest = Manifest::new("fit", config_value(config)?, p.inputs.clone())?;
    let mut out = ArtifactWriter::new(&config.output_dir, manifest)?;
    out.table("path.csv", |b| write_path_table(&path, b))?;
    out.table("partition.csv", |b| {
        write_partition_table(b, &rec.partition, n_outcomes)
    })?;
    out.table("estimates.csv", |b| {
        write_group_estimates(
            b,
            &estimate.theta,
            &estimate.standard_errors(),
            &intervals,
            &p.loaded.covariates,
        )
    })?;
    out.table("heterogeneous.csv", |b| {
        write_source_estimates(b, &het.theta, &het.standard_errors(), n_outcomes, &p.loaded.covariates)
    })?;
    out.finish()
}

/// Solution path only: `path.csv` and the manifest.
pub fn cmd_path(data_path: &Path, config: &RunConfig) -> Result<Manifest> {
    let p = prepare(data_path, config)?;
    let (path, _) = run_configured_path(&p, config)?;
    let manifest = Manifest::new("path", config_value(config)?, p.inputs.clone())?;
    let mut out = ArtifactWriter::new(&config.output_dir, manifest)?;
    out.table("path.csv", |b| write_path_table(&path, b))?;
    out.finish()
}

/// GMM with a known partition read from `partition_path`.
pub fn cmd_oracle(data_path: &Path, partition_path: &Path, config: &RunConfig) -> Result<Manifest> {
    let mut p = prepare(data_path, config)?;
    let ds = p.system.dataset();
    let partition = read_partition(
        fs::File::open(partition_path)?,
        ds.n_studies(),
        ds.n_outcomes(),
    )?;
    p.inputs.push(input_digest(partition_path)?);
    let q = p.system.q();
    let init = initial_qif_fits(&p.system)?;
    let fit = gmm_estimate(&p.system, &partition, &partition.group_means(&init, q))?;
    let se = fit.standard_errors();
    let z_est = crate::meta::MetaEstimate {
        partition: partition.clone(),
        theta: fit.theta.clone(),
        covariance: fit.covariance.clone(),
        ci_level: config.ci_level,
        intervals: Vec::new(),
    };
    let intervals = confidence_intervals(&z_est, config.ci_level)?;
    let n_outcomes = p.system.dataset().n_outcomes();

    let manifest = Manifest::new("oracle", config_value(config)?, p.inputs.clone())?;
    let mut out = ArtifactWriter::new(&config.output_dir, manifest)?;
    out.table("partition.csv", |b| write_partition_table(b, &partition, n_outcomes))?;
    out.table("estimates.csv", |b| {
        write_group_estimates(b, &fit.theta, &se, &intervals, &p.loaded.covariates)
    })?;
    out.finish()
}

/// Unpenalized GMM with every source in its own group.
pub fn cmd_het(data_path: &Path, config: &RunConfig) -> Result<Manifest> {
    let p = prepare(data_path, config)?;
    let init = initial_qif_fits(&p.system)?;
    let het = gmm_estimate(&p.system, &PartitionMap::singletons(p.system.n_sources()), &init)?;
    let n_outcomes = p.system.dataset().n_outcomes();
    let manifest = Manifest::new("het", config_value(config)?, p.inputs.clone())?;
    let mut out = ArtifactWriter::new(&config.output_dir, manifest)?;
    out.table("heterogeneous.csv", |b| {
        write_source_estimates(b, &het.theta, &het.standard_errors(), n_outcomes, &p.loaded.covariates)
    })?;
    out.finish()
}

#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub manifest: Manifest,
    /// Violated thresholds of the design's gate; empty when all pass.
    pub gate_failures: Vec<String>,
}

/// Runs the design in `design_path` and writes `metrics.csv`,
/// `replicates.csv` and the manifest into `out_dir`.
pub fn cmd_simulate(design_path: &Path, out_dir: &Path) -> Result<SimulateOutcome> {
    let design = SimDesign::from_toml(&fs::read_to_string(design_path)?)?;
    simulate_design(&design, out_dir, vec![input_digest(design_path)?])
}

pub fn simulate_design(
    design: &SimDesign,
    out_dir: &Path,
    inputs: Vec<FileDigest>,
) -> Result<SimulateOutcome> {
    let outcome = run_study(design)?;
    let failures = gate_failures(design, &outcome.metrics);
    let manifest = Manifest::new("simulate", serde_json::to_value(design)?, inputs)?;
    let mut out = ArtifactWriter::new(out_dir, manifest)?;
    out.table("metrics.csv", |b| write_metrics(&outcome.metrics, b))?;
    out.table("replicates.csv", |b| write_replicates(&outcome.replicates, b))?;
    Ok(SimulateOutcome {
        manifest: out.finish()?,
        gate_failures: failures,
    })
}

/// Writes replicate `replicate` of `design` as a long-format file.
pub fn export_replicate(design: &SimDesign, replicate: usize, path: &Path) -> Result<()> {
    let data = gen_dataset(design, replicate)?;
    let names: Vec<String> = (0..design.q()).map(covariate_name).collect();
    let mut bytes = Vec::new();
    write_dataset(&data, &names, None, &mut bytes)?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = "study,source,participant,position,y,x1\n1,1,a,1,0.5,1\n1,1,a,2,1.5,2\n";

    #[test]
    fn duplicate_key_names_both_lines() {
        let text = "study,source,participant,position,y,x1\n\
                    1,1,7,1,0.5,1\n1,1,7,2,0.5,1\n1,1,7,1,0.5,1\n";
        let err = read_dataset(text.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lines 2 and 4"), "{msg}");
    }

    #[test]
    fn single_participant_violates_q_lt_n() {
        let err = read_dataset(ONE.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence)
            .unwrap_err();
        assert!(matches!(err, FusionError::Dimension(_)));
    }

    #[test]
    fn missing_and_ragged_cells() {
        let missing = "study,source,participant,position,y,x1\n1,1,1,1,,1\n";
        let err = read_dataset(missing.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence)
            .unwrap_err();
        assert!(matches!(err, FusionError::Parse { line: 2, .. }), "{err}");
        let short = "study,source,participant,position,y,x1\n1,1,1,1,0.3\n";
        let err = read_dataset(short.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence)
            .unwrap_err();
        assert!(matches!(err, FusionError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn gap_in_positions_is_rejected() {
        let text = "study,source,participant,position,y,x1\n\
                    1,1,1,1,0,1\n1,1,1,3,1,1\n";
        let err = read_dataset(text.as_bytes(), LinkFamily::LogitBernoulli, BasisKind::Independence)
            .unwrap_err();
        assert!(err.to_string().contains("not 1..2"), "{err}");
    }

    #[test]
    fn support_checked_with_line() {
        let text = "study,source,participant,position,y,x1\n1,1,1,1,0,1\n1,1,1,2,2,1\n";
        let err = read_dataset(text.as_bytes(), LinkFamily::LogitBernoulli, BasisKind::Independence)
            .unwrap_err();
        assert!(matches!(err, FusionError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn participant_in_two_studies() {
        let text = "study,source,participant,position,y,x1\n1,1,9,1,0,1\n2,1,9,1,0,1\n";
        let err = read_dataset(text.as_bytes(), LinkFamily::IdentityGaussian, BasisKind::Independence)
            .unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn config_rejects_bad_grid() {
        let mut c = RunConfig::new(LinkFamily::LogPoisson, vec![0.2, 0.1]);
        assert!(c.validate().is_err());
        c.lambdas = vec![0.0, 0.1];
        assert!(c.validate().is_ok());
        c.delta = 0.9;
        assert!(c.validate().is_err());
    }
}
