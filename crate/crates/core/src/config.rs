//! Experiment configuration: one TOML document with a section per module.
//!
//! Unknown keys are rejected. Structural errors carry a `line L, column C`
//! location; semantic errors carry the dotted key path.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::conditions::{SearchDomain, DEFAULT_DIRECTIONS};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::g::CovarianceSet;
use crate::generator::TestFunction;
use crate::gpde::{BoundaryRule, Grid};
use crate::gsde::{CoefficientSet, VectorField};
use crate::scenario::{control_family, VolatilityControl};

/// Environment variable consulted for the seed when neither `--seed` nor the
/// config sets one.
pub const SEED_ENV: &str = "GDIFF_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: Option<u64>,
    pub horizon: f64,
    pub theta: ThetaConfig,
    pub system: SystemConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_bar: Option<SystemConfig>,
    pub domain: DomainConfig,
    pub controls: ControlsConfig,
    pub scenario: ScenarioConfig,
    pub grid: GridConfig,
    pub test_functions: TestFunctionsConfig,
    pub generator: GeneratorConfig,
    pub check: CheckConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: "unnamed".into(),
            seed: None,
            horizon: 1.0,
            theta: ThetaConfig::default(),
            system: SystemConfig::default(),
            system_bar: None,
            domain: DomainConfig::default(),
            controls: ControlsConfig::default(),
            scenario: ScenarioConfig::default(),
            grid: GridConfig::default(),
            test_functions: TestFunctionsConfig::default(),
            generator: GeneratorConfig::default(),
            check: CheckConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Either `interval = [lo, hi]` (variances, one noise) or `generators`, a list
/// of row-major `d x d` matrices `gamma` with `Sigma = gamma gamma^T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generators: Option<Vec<Vec<f64>>>,
}

impl Default for ThetaConfig {
    fn default() -> Self {
        ThetaConfig {
            interval: Some([0.25, 1.0]),
            generators: None,
        }
    }
}

/// A catalogue name or a list of expressions, one per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Name(String),
    Exprs(Vec<String>),
}

/// A catalogue name or an `n x d` matrix of expressions; entry `[i][l]` is
/// component `i` of `sigma_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Name(String),
    Rows(Vec<Vec<String>>),
}

/// `h = "zero"` or a list of entries. Entry `(l, k)` is one-based and also
/// sets `(k, l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HSpec {
    Name(String),
    Entries(Vec<HEntry>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HEntry {
    pub l: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expr: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub n: usize,
    /// Noise dimension; defaults to the dimension of `theta`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// `remark-counterexample` with `role = "x"` or `"y"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    pub drift: FieldSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_constant: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_matrix: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<f64>,
    pub sigma: MatrixSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_constant: Option<Vec<Vec<f64>>>,
    pub h: HSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_shift: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            id: None,
            n: 1,
            d: None,
            x0: None,
            preset: None,
            role: None,
            drift: FieldSpec::Name("zero".into()),
            drift_constant: None,
            drift_matrix: None,
            coupling: None,
            sigma: MatrixSpec::Name("zero".into()),
            sigma_constant: None,
            h: HSpec::Name("zero".into()),
            drift_shift: None,
            sigma_scale: None,
            lipschitz: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub half_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
    pub t_grid: Vec<f64>,
    pub n_samples: usize,
    pub n_refine: usize,
    pub n_directions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            half_width: 2.0,
            lo: None,
            hi: None,
            t_grid: vec![0.0],
            n_samples: 2048,
            n_refine: 8,
            n_directions: DEFAULT_DIRECTIONS,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlsConfig {
    pub constants: bool,
    pub random_switching: usize,
    pub switch_probability: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ControlsConfig {
    fn default() -> Self {
        ControlsConfig {
            constants: true,
            random_switching: 8,
            switch_probability: 0.1,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    /// Allowed negative pathwise gap in comparison runs.
    pub tol_path: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_paths: 100,
            n_steps: 200,
            tol_path: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryName {
    LinearExtrapolation,
    Neumann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub half_width: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<Vec<f64>>,
    /// One entry per axis, or a single entry used for every axis.
    pub nodes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub boundary: BoundaryName,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            half_width: 4.0,
            lo: None,
            hi: None,
            nodes: vec![161],
            dt: None,
            boundary: BoundaryName::LinearExtrapolation,
        }
    }
}

/// Test functions by catalogue name (`x_1`, `tanh-sum`, `affine`, ...) or
/// `expr:` string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestFunctionsConfig {
    /// Datum for `generator`, `solve-pde` and `feynman-crosscheck`.
    pub datum: String,
    pub monotone: Vec<String>,
    /// Non-monotone data expected to fail the monotonicity check.
    pub negative_controls: Vec<String>,
}

impl Default for TestFunctionsConfig {
    fn default() -> Self {
        TestFunctionsConfig {
            datum: "x_1^2".into(),
            monotone: vec!["tanh-sum".into()],
            negative_controls: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Strictly decreasing times for the limit table; empty skips it.
    pub t_list: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    /// Largest acceptable residual at the smallest `t`.
    pub tolerance: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            t_list: vec![0.2, 0.1, 0.05, 0.025, 0.0125],
            fd_step: None,
            tolerance: 5e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub conditions: Vec<String>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            conditions: vec!["B1".into(), "B2".into()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// JSON report; stdout when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    /// Binary grid dump from `solve-pde`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump: Option<String>,
}

fn line_col(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

fn toml_error(src: &str, e: toml::de::Error) -> Error {
    let location = match e.span() {
        Some(span) => {
            let (l, c) = line_col(src, span.start);
            format!("line {l}, column {c}")
        }
        None => "document".into(),
    };
    Error::config(location, e.message().trim())
}

/// Sets a dotted key to a TOML value, creating tables on the way. Values that
/// do not parse as TOML are taken as strings.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("--set {assignment}"), "expected key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("--set {assignment}"), "empty key segment"));
    }
    let mut cur = table;
    for (depth, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::config(parts[..=depth].join("."), "is not a table; cannot override a key below it")
        })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        toml::from_str(src).map_err(|e| toml_error(src, e))
    }

    /// Parses `src` after applying `key=value` overrides.
    pub fn from_toml_with_overrides(src: &str, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Self::from_toml_str(src);
        }
        let mut table: toml::Table = toml::from_str(src).map_err(|e| toml_error(src, e))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let merged = toml::to_string(&table).map_err(|e| Error::config("--set", e.to_string()))?;
        Self::from_toml_str(&merged)
    }

    /// JSON input is either a config object or a report embedding one under
    /// `"config"`, so a report can be re-run directly.
    pub fn from_json_str(src: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(src)
            .map_err(|e| Error::config(format!("line {}, column {}", e.line(), e.column()), e.to_string()))?;
        let cfg = match value.get("config") {
            Some(c) if value.get("experiment").is_some() || value.get("exit_code").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(cfg).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Loads a config file, applies overrides and resolves the seed
    /// (`seed_flag`, then the file, then the environment, then 0).
    pub fn load(path: &Path, overrides: &[String], seed_flag: Option<u64>) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read: {e}")))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            let mut cfg = Self::from_json_str(&src)?;
            if !overrides.is_empty() {
                let as_toml = toml::to_string(&cfg).map_err(|e| Error::config("config", e.to_string()))?;
                cfg = Self::from_toml_with_overrides(&as_toml, overrides)?;
            }
            cfg
        } else {
            Self::from_toml_with_overrides(&src, overrides)?
        };
        cfg.resolve_seed(seed_flag)?;
        Ok(cfg)
    }

    pub fn resolve_seed(&mut self, seed_flag: Option<u64>) -> Result<()> {
        if let Some(s) = seed_flag {
            self.seed = Some(s);
        } else if self.seed.is_none() {
            self.seed = match std::env::var(SEED_ENV) {
                Ok(v) => Some(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: '{v}'")))?,
                ),
                Err(_) => Some(0),
            };
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn theta(&self) -> Result<CovarianceSet> {
        let wrap = |e: Error| Error::config("theta", e.to_string());
        match (&self.theta.interval, &self.theta.generators) {
            (Some([lo, hi]), None) => CovarianceSet::interval(*lo, *hi).map_err(wrap),
            (None, Some(gens)) => {
                let len = gens.first().map_or(0, Vec::len);
                let d = (len as f64).sqrt().round() as usize;
                if d == 0 || d * d != len {
                    return Err(Error::config(
                        "theta.generators",
                        format!("expected row-major d x d matrices, first has {len} entries"),
                    ));
                }
                CovarianceSet::from_generators(d, gens.clone()).map_err(wrap)
            }
            (Some(_), Some(_)) => Err(Error::config("theta", "set either interval or generators, not both")),
            (None, None) => Err(Error::config("theta", "needs interval or generators")),
        }
    }

    pub fn build_system(&self, theta: &CovarianceSet) -> Result<CoefficientSet> {
        build_system(&self.system, theta, "system")
    }

    pub fn build_system_bar(&self, theta: &CovarianceSet) -> Result<CoefficientSet> {
        let bar = self
            .system_bar
            .as_ref()
            .ok_or_else(|| Error::config("system_bar", "this experiment needs a second system"))?;
        build_system(bar, theta, "system_bar")
    }

    pub fn x0(&self) -> Result<Vec<f64>> {
        initial_state(&self.system, "system")
    }

    pub fn y0(&self) -> Result<Vec<f64>> {
        match &self.system_bar {
            Some(s) => initial_state(s, "system_bar"),
            None => Err(Error::config("system_bar", "this experiment needs a second system")),
        }
    }

    pub fn search_domain(&self, n: usize) -> Result<SearchDomain> {
        let d = &self.domain;
        let (lo, hi) = bounds(&d.lo, &d.hi, d.half_width, n, "domain")?;
        let mut dom = SearchDomain::new(lo, hi, d.t_grid.clone(), d.n_samples, d.n_refine, d.seed.unwrap_or(self.seed()))
            .map_err(|e| Error::config("domain", e.to_string()))?;
        dom.n_directions = d.n_directions;
        Ok(dom)
    }

    pub fn controls(&self, theta: &CovarianceSet) -> Result<Vec<VolatilityControl>> {
        let c = &self.controls;
        control_family(
            theta,
            self.scenario.n_steps,
            c.constants,
            c.random_switching,
            c.seed.unwrap_or(self.seed()),
            c.switch_probability,
        )
        .map_err(|e| Error::config("controls", e.to_string()))
    }

    /// PDE grid with horizon `horizon`.
    pub fn grid(&self, n: usize, horizon: f64) -> Result<Grid> {
        let g = &self.grid;
        let (lo, hi) = bounds(&g.lo, &g.hi, g.half_width, n, "grid")?;
        let nodes = match g.nodes.len() {
            1 => vec![g.nodes[0]; n],
            k if k == n => g.nodes.clone(),
            k => return Err(Error::config("grid.nodes", format!("expected 1 or {n} entries, got {k}"))),
        };
        let wrap = |e: Error| Error::config("grid", e.to_string());
        let mut grid = Grid::new(lo, hi, nodes, horizon).map_err(wrap)?;
        if let Some(dt) = g.dt {
            grid = grid.with_dt(dt).map_err(wrap)?;
        }
        Ok(grid.with_boundary(match g.boundary {
            BoundaryName::LinearExtrapolation => BoundaryRule::LinearExtrapolation,
            BoundaryName::Neumann => BoundaryRule::Neumann,
        }))
    }

    pub fn datum(&self, n: usize) -> Result<TestFunction> {
        test_function(&self.test_functions.datum, n, "test_functions.datum")
    }

    pub fn monotone_functions(&self, n: usize) -> Result<Vec<TestFunction>> {
        self.test_functions
            .monotone
            .iter()
            .enumerate()
            .map(|(i, s)| test_function(s, n, &format!("test_functions.monotone[{i}]")))
            .collect()
    }

    pub fn negative_controls(&self, n: usize) -> Result<Vec<TestFunction>> {
        self.test_functions
            .negative_controls
            .iter()
            .enumerate()
            .map(|(i, s)| test_function(s, n, &format!("test_functions.negative_controls[{i}]")))
            .collect()
    }
}

fn bounds(lo: &Option<Vec<f64>>, hi: &Option<Vec<f64>>, half_width: f64, n: usize, section: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |v: &Option<Vec<f64>>, sign: f64, key: &str| match v {
        Some(v) if v.len() == n => Ok(v.clone()),
        Some(v) => Err(Error::config(format!("{section}.{key}"), format!("expected {n} entries, got {}", v.len()))),
        None => Ok(vec![sign * half_width; n]),
    };
    Ok((pick(lo, -1.0, "lo")?, pick(hi, 1.0, "hi")?))
}

fn initial_state(s: &SystemConfig, loc: &str) -> Result<Vec<f64>> {
    match &s.x0 {
        Some(x) if x.len() == s.n => Ok(x.clone()),
        Some(x) => Err(Error::config(format!("{loc}.x0"), format!("expected {} entries, got {}", s.n, x.len()))),
        None => Ok(vec![0.0; s.n]),
    }
}

/// Test function by catalogue name, `affine` (weights `1/n, 2/n, ..., 1`) or
/// `expr:` string.
pub fn test_function(spec: &str, n: usize, loc: &str) -> Result<TestFunction> {
    if let Some(src) = spec.strip_prefix("expr:") {
        let e = Expr::parse(src.trim(), n).map_err(|err| Error::config(loc, err.to_string()))?;
        return Ok(TestFunction::new(spec, n, move |x| e.eval(0.0, x)));
    }
    if spec == "affine" {
        let w = (1..=n).map(|i| i as f64 / n as f64).collect();
        return Ok(TestFunction::affine(w, 0.0).renamed("affine"));
    }
    TestFunction::from_catalogue(spec, n).map_err(|e| Error::config(loc, e.to_string()))
}

fn parse_exprs(srcs: &[String], n: usize, loc: &str) -> Result<Vec<Arc<Expr>>> {
    srcs.iter()
        .enumerate()
        .map(|(i, s)| {
            let s = s.strip_prefix("expr:").unwrap_or(s);
            Expr::parse(s.trim(), n)
                .map(Arc::new)
                .map_err(|e| Error::config(format!("{loc}[{i}]"), e.to_string()))
        })
        .collect()
}

fn expr_field(exprs: Vec<Arc<Expr>>) -> VectorField {
    Arc::new(move |t, x, out| {
        for (o, e) in out.iter_mut().zip(&exprs) {
            *o = e.eval(t, x);
        }
    })
}

fn build_system(s: &SystemConfig, theta: &CovarianceSet, loc: &str) -> Result<CoefficientSet> {
    let n = s.n;
    if n == 0 {
        return Err(Error::config(format!("{loc}.n"), "state dimension must be positive"));
    }
    let d = s.d.unwrap_or(theta.dim());
    if d != theta.dim() {
        return Err(Error::config(
            format!("{loc}.d"),
            format!("noise dimension {d} differs from theta dimension {}", theta.dim()),
        ));
    }
    if let Some(preset) = &s.preset {
        return build_preset(s, preset, theta, loc);
    }
    let mut uses_time = false;
    let mut b = CoefficientSet::builder(n, d);
    if let Some(id) = &s.id {
        b = b.id(id.clone());
    }
    if let Some(k) = s.lipschitz {
        b = b.lipschitz(k);
    }

    let key = format!("{loc}.drift");
    let drift: Option<VectorField> = match &s.drift {
        FieldSpec::Name(name) if name.starts_with("expr:") => {
            if n != 1 {
                return Err(Error::config(&key, format!("a single expression needs n = 1; give a list of {n}")));
            }
            let e = parse_exprs(std::slice::from_ref(name), n, &key)?;
            uses_time |= e.iter().any(|e| e.uses_time());
            Some(expr_field(e))
        }
        FieldSpec::Name(name) => named_drift(name, s, n, &key)?,
        FieldSpec::Exprs(list) => {
            if list.len() != n {
                return Err(Error::config(&key, format!("expected {n} expressions, got {}", list.len())));
            }
            let e = parse_exprs(list, n, &key)?;
            uses_time |= e.iter().any(|e| e.uses_time());
            Some(expr_field(e))
        }
    };
    b = b.drift_field(drift);

    let key = format!("{loc}.sigma");
    match &s.sigma {
        MatrixSpec::Name(name) => match name.as_str() {
            "zero" => {}
            "diag-sigma" => {
                if d != n {
                    return Err(Error::config(&key, format!("diag-sigma needs d = n, got d = {d}, n = {n}")));
                }
                for l in 0..d {
                    b = b.sigma(l, move |_, x, o| {
                        o.fill(0.0);
                        o[l] = 0.5 + 0.2 * x[l].tanh();
                    });
                }
            }
            "constant" => {
                let m = s
                    .sigma_constant
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("{loc}.sigma_constant"), "required by sigma = \"constant\""))?;
                check_matrix(m, n, d, &format!("{loc}.sigma_constant"))?;
                for l in 0..d {
                    let col: Vec<f64> = m.iter().map(|row| row[l]).collect();
                    b = b.sigma(l, move |_, _, o| o.copy_from_slice(&col));
                }
            }
            other => {
                return Err(Error::config(
                    &key,
                    format!("unknown sigma family '{other}' (zero, diag-sigma, constant, or a matrix of expressions)"),
                ))
            }
        },
        MatrixSpec::Rows(rows) => {
            check_matrix(rows, n, d, &key)?;
            for l in 0..d {
                let col: Vec<String> = rows.iter().map(|row| row[l].clone()).collect();
                let e = parse_exprs(&col, n, &format!("{key}[column {}]", l + 1))?;
                uses_time |= e.iter().any(|e| e.uses_time());
                b = b.sigma_field(l, Some(expr_field(e)));
            }
        }
    }

    let key = format!("{loc}.h");
    match &s.h {
        HSpec::Name(name) if name == "zero" => {}
        HSpec::Name(other) => {
            return Err(Error::config(&key, format!("unknown h family '{other}' (zero, or a list of entries)")));
        }
        HSpec::Entries(entries) => {
            for (idx, e) in entries.iter().enumerate() {
                let ekey = format!("{key}[{idx}]");
                if e.l == 0 || e.k == 0 || e.l > d || e.k > d {
                    return Err(Error::config(&ekey, format!("indices ({}, {}) outside 1..={d}", e.l, e.k)));
                }
                let field: VectorField = match (&e.value, &e.expr) {
                    (Some(v), None) => {
                        if v.len() != n {
                            return Err(Error::config(format!("{ekey}.value"), format!("expected {n} entries, got {}", v.len())));
                        }
                        let v = v.clone();
                        Arc::new(move |_, _, o: &mut [f64]| o.copy_from_slice(&v))
                    }
                    (None, Some(list)) => {
                        if list.len() != n {
                            return Err(Error::config(format!("{ekey}.expr"), format!("expected {n} expressions, got {}", list.len())));
                        }
                        let ex = parse_exprs(list, n, &format!("{ekey}.expr"))?;
                        uses_time |= ex.iter().any(|e| e.uses_time());
                        expr_field(ex)
                    }
                    _ => return Err(Error::config(&ekey, "set exactly one of value or expr")),
                };
                let (l, k) = (e.l - 1, e.k - 1);
                b = b.h_field(l, k, Some(field.clone()));
                if l != k {
                    b = b.h_field(k, l, Some(field));
                }
            }
        }
    }

    let mut c = b
        .time_homogeneous(!uses_time)
        .build()
        .map_err(|e| Error::config(loc, e.to_string()))?;
    if let Some(shift) = &s.drift_shift {
        let shift = broadcast(shift, n, &format!("{loc}.drift_shift"))?;
        c = c.with_drift_shift(shift).map_err(|e| Error::config(format!("{loc}.drift_shift"), e.to_string()))?;
    }
    if let Some(scale) = s.sigma_scale {
        c = c.with_sigma_scale(scale);
    }
    if let Some(id) = &s.id {
        c = c.with_id(id.clone());
    }
    Ok(c)
}

fn broadcast(v: &[f64], n: usize, loc: &str) -> Result<Vec<f64>> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        k if k == n => Ok(v.to_vec()),
        k => Err(Error::config(loc, format!("expected 1 or {n} entries, got {k}"))),
    }
}

fn check_matrix<T>(m: &[Vec<T>], rows: usize, cols: usize, loc: &str) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::config(loc, format!("expected a {rows} x {cols} matrix")));
    }
    Ok(())
}

fn named_drift(name: &str, s: &SystemConfig, n: usize, key: &str) -> Result<Option<VectorField>> {
    Ok(match name {
        "zero" => None,
        "constant-drift" => {
            let c = s
                .drift_constant
                .as_ref()
                .ok_or_else(|| Error::config(format!("{key}_constant"), "required by constant-drift"))?;
            let c = broadcast(c, n, &format!("{key}_constant"))?;
            Some(Arc::new(move |_, _, o: &mut [f64]| o.copy_from_slice(&c)))
        }
        "linear-drift" => {
            let a = s
                .drift_matrix
                .as_ref()
                .ok_or_else(|| Error::config(format!("{key}_matrix"), "required by linear-drift"))?;
            check_matrix(a, n, n, &format!("{key}_matrix"))?;
            let a = a.clone();
            Some(Arc::new(move |_, x: &[f64], o: &mut [f64]| {
                for (oi, row) in o.iter_mut().zip(&a) {
                    *oi = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }))
        }
        // b_i = -x_i + c * sum_{j != i} x_j
        "offdiag-monotone" => {
            let c = s.coupling.unwrap_or(0.25);
            Some(Arc::new(move |_, x: &[f64], o: &mut [f64]| {
                let sum: f64 = x.iter().sum();
                for (i, oi) in o.iter_mut().enumerate() {
                    *oi = -x[i] + c * (sum - x[i]);
                }
            }))
        }
        // b_i = 0.2 arctan(x_i) + c * sum_{j != i} arctan(x_j)
        "arctan-coupling" => {
            let c = s.coupling.unwrap_or(0.5);
            Some(Arc::new(move |_, x: &[f64], o: &mut [f64]| {
                let sum: f64 = x.iter().map(|v| v.atan()).sum();
                for (i, oi) in o.iter_mut().enumerate() {
                    let a = x[i].atan();
                    *oi = 0.2 * a + c * (sum - a);
                }
            }))
        }
        other => {
            return Err(Error::config(
                key,
                format!(
                    "unknown drift family '{other}' (zero, constant-drift, linear-drift, offdiag-monotone, \
                     arctan-coupling, expr:..., or a list of expressions)"
                ),
            ))
        }
    })
}

/// The pair `X: dX = (s_hi + s_lo)/2 dt` and `Y: dY = d<B>` over a
/// one-dimensional variance interval `[s_lo, s_hi]`.
pub fn remark_pair(theta: &CovarianceSet) -> Result<(CoefficientSet, CoefficientSet)> {
    if theta.dim() != 1 {
        return Err(Error::config("theta", "remark-counterexample needs a one-dimensional interval"));
    }
    let b = 0.5 * (theta.sigma_upper_sq() + theta.sigma_lower_sq());
    let x = CoefficientSet::builder(1, 1)
        .id("remark-x")
        .drift(move |_, _, o| o[0] = b)
        .build()?;
    let y = CoefficientSet::builder(1, 1)
        .id("remark-y")
        .h(0, 0, |_, _, o| o[0] = 1.0)
        .build()?;
    Ok((x, y))
}

fn build_preset(s: &SystemConfig, preset: &str, theta: &CovarianceSet, loc: &str) -> Result<CoefficientSet> {
    if preset != "remark-counterexample" {
        return Err(Error::config(format!("{loc}.preset"), format!("unknown preset '{preset}'")));
    }
    if s.n != 1 {
        return Err(Error::config(format!("{loc}.n"), "remark-counterexample is one-dimensional"));
    }
    let (x, y) = remark_pair(theta)?;
    match s.role.as_deref() {
        Some("x") => Ok(x),
        Some("y") => Ok(y),
        other => Err(Error::config(format!("{loc}.role"), format!("expected \"x\" or \"y\", got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_document() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.theta().unwrap().len(), 2);
    }

    #[test]
    fn unknown_key_reports_location() {
        let err = ExperimentConfig::from_toml_str("seed = 1\n[system]\nn = 2\ndrfit = \"zero\"\n").unwrap_err();
        match err {
            Error::Config { location, message } => {
                assert_eq!(location, "line 4, column 1");
                assert!(message.contains("drfit"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn expression_arity_is_checked() {
        let cfg = ExperimentConfig::from_toml_str("[system]\nn = 2\ndrift = [\"x_1\", \"x_3\"]\n").unwrap();
        let theta = cfg.theta().unwrap();
        match cfg.build_system(&theta).unwrap_err() {
            Error::Config { location, message } => {
                assert_eq!(location, "system.drift[1]");
                assert!(message.contains("column 1"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn named_families_evaluate() {
        let src = r#"
            [theta]
            generators = [[1.0, 0.0, 0.0, 1.0], [0.5, 0.0, 0.0, 0.5]]
            [system]
            n = 2
            drift = "offdiag-monotone"
            sigma = "diag-sigma"
            drift_shift = [0.1]
        "#;
        let cfg = ExperimentConfig::from_toml_str(src).unwrap();
        let theta = cfg.theta().unwrap();
        let c = cfg.build_system(&theta).unwrap();
        let mut out = [0.0; 2];
        c.eval_drift(0.0, &[1.0, 2.0], &mut out);
        assert!((out[0] - (-1.0 + 0.5 + 0.1)).abs() < 1e-15);
        assert!((out[1] - (-2.0 + 0.25 + 0.1)).abs() < 1e-15);
        c.eval_sigma(1, 0.0, &[0.0, 1.0], &mut out);
        assert_eq!(out[0], 0.0);
        assert!((out[1] - (0.5 + 0.2 * 1f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn expression_coefficients_and_h_entries() {
        let src = r#"
            [system]
            n = 1
            drift = "expr: -x_1 + t"
            sigma = [["0.5 + 0.1 * tanh(x_1)"]]
            h = [{ l = 1, k = 1, value = [0.25] }]
        "#;
        let cfg = ExperimentConfig::from_toml_str(src).unwrap();
        let c = cfg.build_system(&cfg.theta().unwrap()).unwrap();
        assert!(!c.is_time_homogeneous());
        let mut o = [0.0];
        c.eval_drift(2.0, &[0.5], &mut o);
        assert_eq!(o[0], 1.5);
        c.eval_h(0, 0, 0.0, &[0.5], &mut o);
        assert_eq!(o[0], 0.25);
    }

    #[test]
    fn overrides_apply_before_validation() {
        let src = "seed = 3\n[scenario]\nn_paths = 10\n";
        let cfg = ExperimentConfig::from_toml_with_overrides(
            src,
            &["scenario.n_paths=20".into(), "system.drift=arctan-coupling".into(), "grid.nodes=[11]".into()],
        )
        .unwrap();
        assert_eq!(cfg.scenario.n_paths, 20);
        assert_eq!(cfg.system.drift, FieldSpec::Name("arctan-coupling".into()));
        assert_eq!(cfg.grid.nodes, vec![11]);
        assert!(ExperimentConfig::from_toml_with_overrides(src, &["seed.x=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides(src, &["scenario.bogus=1".into()]).is_err());
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = ExperimentConfig::from_toml_str("seed = 5").unwrap();
        cfg.resolve_seed(Some(9)).unwrap();
        assert_eq!(cfg.seed(), 9);
        let mut cfg = ExperimentConfig::from_toml_str("seed = 5").unwrap();
        cfg.resolve_seed(None).unwrap();
        assert_eq!(cfg.seed(), 5);
    }

    #[test]
    fn json_round_trip_and_report_input() {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = Some(4);
        cfg.system_bar = Some(SystemConfig::default());
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json_str(&json).unwrap(), cfg);
        let report = serde_json::json!({ "experiment": "x", "exit_code": 0, "config": cfg });
        assert_eq!(ExperimentConfig::from_json_str(&report.to_string()).unwrap(), cfg);
        let as_toml = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&as_toml).unwrap(), cfg);
    }

    #[test]
    fn remark_preset_roles() {
        let src = r#"
            [theta]
            interval = [0.5, 1.0]
            [system]
            preset = "remark-counterexample"
            role = "x"
            [system_bar]
            preset = "remark-counterexample"
            role = "y"
        "#;
        let cfg = ExperimentConfig::from_toml_str(src).unwrap();
        let theta = cfg.theta().unwrap();
        let x = cfg.build_system(&theta).unwrap();
        let y = cfg.build_system_bar(&theta).unwrap();
        let mut o = [0.0];
        x.eval_drift(0.0, &[0.0], &mut o);
        assert_eq!(o[0], 0.75);
        y.eval_h(0, 0, 0.0, &[0.0], &mut o);
        assert_eq!(o[0], 1.0);
    }

    #[test]
    fn grid_and_domain_shapes() {
        let cfg = ExperimentConfig::from_toml_str("[grid]\nnodes = [11, 13]\nhalf_width = 2.0\n").unwrap();
        let g = cfg.grid(2, 0.5).unwrap();
        assert_eq!(g.nodes(), &[11, 13]);
        assert!(cfg.grid(3, 0.5).is_err());
        let dom = cfg.search_domain(3).unwrap();
        assert_eq!(dom.lo, vec![-2.0; 3]);
    }
}
