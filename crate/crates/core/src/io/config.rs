//! Run configuration: a TOML file with flat sections, overridable from the
//! command line with `--set section.key=value`.
//!
//! ```toml
//! mode = "flow"
//! seed = 7
//! output = "runs/a"
//! problem = "cosine:10,0.3,1,0,0,0"
//!
//! [grid]
//! n = 32
//! period = 1.0
//!
//! [flow]
//! t_end = 0.5
//! ```
//!
//! Problems: `constant:c`, `cosine:base,amp,m1,m2,m3,m4`,
//! `peaked:total,beta` and `file:path` (a QFLD field). Relative paths are
//! taken from the directory holding the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::flow::FlowOptions;
use crate::grid::{make_grid, ScalarField, TorusGrid};
use crate::synth::{cosine_datum, peaked_shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flow,
    Solve,
    Continuation,
    Analyze,
    Bubble,
    Green,
}

impl Mode {
    pub const ALL: [Mode; 6] =
        [Mode::Flow, Mode::Solve, Mode::Continuation, Mode::Analyze, Mode::Bubble, Mode::Green];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Flow => "flow",
            Mode::Solve => "solve",
            Mode::Continuation => "continuation",
            Mode::Analyze => "analyze",
            Mode::Bubble => "bubble",
            Mode::Green => "green",
        }
    }

    /// Option sections read by this mode.
    pub fn sections(self) -> &'static [&'static str] {
        match self {
            Mode::Flow => &["flow", "initial"],
            Mode::Solve => &["solve", "initial"],
            Mode::Continuation => &["continuation"],
            Mode::Analyze => &["analyze"],
            Mode::Bubble => &["bubble"],
            Mode::Green => &["green"],
        }
    }

    pub fn needs_problem(self) -> bool {
        self != Mode::Green
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

const MODE_SECTIONS: [&str; 7] = ["flow", "initial", "solve", "continuation", "analyze", "bubble", "green"];

fn owners(section: &str) -> String {
    let names: Vec<&str> = Mode::ALL
        .into_iter()
        .filter(|m| m.sections().contains(&section))
        .map(Mode::as_str)
        .collect();
    names.join(" or ")
}

#[derive(Clone, Debug, PartialEq)]
pub enum ProblemSpec {
    Constant(f64),
    Cosine { base: f64, amplitude: f64, mode: [i64; 4] },
    Peaked { total: f64, beta: f64 },
    File(PathBuf),
}

impl ProblemSpec {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("problem {text:?}: {why}"));
        let (kind, args) = text.split_once(':').ok_or_else(|| bad("expected kind:arguments"))?;
        let numbers = || -> Result<Vec<f64>> {
            args.split(',')
                .map(|a| a.trim().parse::<f64>().map_err(|_| bad(&format!("{a:?} is not a number"))))
                .collect()
        };
        let spec = match kind.trim() {
            "constant" => match numbers()?[..] {
                [c] => ProblemSpec::Constant(c),
                _ => return Err(bad("constant takes one value")),
            },
            "cosine" => {
                let v = numbers()?;
                if v.len() != 6 {
                    return Err(bad("cosine takes base, amplitude and four integer modes"));
                }
                let mut mode = [0i64; 4];
                for (m, x) in mode.iter_mut().zip(&v[2..]) {
                    if x.fract() != 0.0 {
                        return Err(bad("wavevector components must be integers"));
                    }
                    *m = *x as i64;
                }
                ProblemSpec::Cosine { base: v[0], amplitude: v[1], mode }
            }
            "peaked" => match numbers()?[..] {
                [total, beta] => ProblemSpec::Peaked { total, beta },
                _ => return Err(bad("peaked takes total and beta")),
            },
            "file" => {
                let path = base_dir.join(args.trim());
                if !path.is_file() {
                    return Err(bad(&format!("file {} does not exist", path.display())));
                }
                ProblemSpec::File(path)
            }
            other => return Err(bad(&format!("unknown kind {other:?}"))),
        };
        Ok(spec)
    }

    /// The datum `f` on `grid`.
    pub fn build(&self, grid: TorusGrid) -> Result<ScalarField> {
        match *self {
            ProblemSpec::Constant(c) => ScalarField::new(grid, vec![c; grid.total_points()]),
            ProblemSpec::Cosine { base, amplitude, mode } => Ok(cosine_datum(grid, base, amplitude, mode)),
            ProblemSpec::Peaked { total, beta } => Ok(peaked_shape(grid, beta).map(|v| total * v)),
            ProblemSpec::File(ref path) => {
                let f = crate::io::field::load_field(path)?;
                if *f.grid() != grid {
                    return Err(Error::Config(format!(
                        "datum file {} has n = {}, period = {}; the grid is n = {}, period = {}",
                        path.display(),
                        f.grid().n(),
                        f.grid().period(),
                        grid.n(),
                        grid.period()
                    )));
                }
                Ok(f)
            }
        }
    }
}

impl fmt::Display for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProblemSpec::Constant(c) => write!(f, "constant:{c}"),
            ProblemSpec::Cosine { base, amplitude, mode } => write!(
                f,
                "cosine:{base},{amplitude},{},{},{},{}",
                mode[0], mode[1], mode[2], mode[3]
            ),
            ProblemSpec::Peaked { total, beta } => write!(f, "peaked:{total},{beta}"),
            ProblemSpec::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    pub period: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n: 32, period: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub dt_init: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub t_end: f64,
    /// Absent means `1e-12·(1 + |E|)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_tolerance: Option<f64>,
    pub volume_renormalize: bool,
    pub inner_tol: f64,
    pub diagnostics_stride: usize,
    pub accuracy_tol: f64,
    pub steady_tol: f64,
    pub steady_window: usize,
    pub divergence_drop: f64,
    pub divergence_max_u: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        let o = FlowOptions::default();
        Self {
            dt_init: o.dt_init,
            dt_min: o.dt_min,
            dt_max: o.dt_max,
            t_end: o.t_end,
            energy_tolerance: o.energy_tolerance,
            volume_renormalize: o.volume_renormalize,
            inner_tol: o.inner_tol,
            diagnostics_stride: o.diagnostics_stride,
            accuracy_tol: o.accuracy_tol,
            steady_tol: o.steady_tol,
            steady_window: o.steady_window,
            divergence_drop: o.divergence_drop,
            divergence_max_u: o.divergence_max_u,
        }
    }
}

impl FlowSection {
    pub fn options(&self) -> FlowOptions {
        FlowOptions {
            dt_init: self.dt_init,
            dt_min: self.dt_min,
            dt_max: self.dt_max,
            t_end: self.t_end,
            energy_tolerance: self.energy_tolerance,
            volume_renormalize: self.volume_renormalize,
            inner_tol: self.inner_tol,
            diagnostics_stride: self.diagnostics_stride,
            accuracy_tol: self.accuracy_tol,
            steady_tol: self.steady_tol,
            steady_window: self.steady_window,
            divergence_drop: self.divergence_drop,
            divergence_max_u: self.divergence_max_u,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialKind {
    Zero,
    Random,
    File,
}

/// Starting field of a flow or Newton solve. `random` draws a smooth field
/// from the top-level seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSection {
    pub kind: InitialKind,
    pub amplitude: f64,
    pub max_mode: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self { kind: InitialKind::Zero, amplitude: 0.1, max_mode: 1, path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveSection {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolveSection {
    fn default() -> Self {
        Self { tol: crate::elliptic::DEFAULT_TOL, max_iter: 50 }
    }
}

/// The problem datum, scaled to unit integral, is multiplied by each `k`.
///
/// The default `tol` sits above the rounding floor of the residual, about
/// `ε·max|κ|⁴·max|u|`, which reaches `1e-8` at `n = 32` for the larger `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinuationSection {
    pub k_list: Vec<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ContinuationSection {
    fn default() -> Self {
        Self { k_list: vec![10.0, 50.0, 100.0], tol: 1e-6, max_iter: 50 }
    }
}

/// Concentration analysis of a stored field; `k` is the total of the
/// problem datum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeSection {
    pub input: PathBuf,
    /// Detection mass fraction; absent means `π²/k`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub fit: bool,
    /// Rescaled window `[-w, w]⁴` in units of the estimated bubble scale.
    pub fit_half_width: f64,
    pub fit_points: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { input: PathBuf::new(), rho: None, fit: true, fit_half_width: 4.0, fit_points: 17 }
    }
}

/// Superposition of standard bubbles, one per center, for `k` the total of
/// the problem datum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BubbleSection {
    pub lambda: Vec<f64>,
    pub centers: Vec<[f64; 4]>,
}

impl Default for BubbleSection {
    fn default() -> Self {
        Self { lambda: vec![20.0], centers: vec![[0.5; 4]] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GreenRoute {
    /// Whole field by FFT, `n⁴` memory.
    Field,
    /// Cosine series near the source only.
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreenSection {
    pub route: GreenRoute,
    /// Fit annulus; absent bounds default to `6h` and `L/8`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_max: Option<f64>,
}

impl Default for GreenSection {
    fn default() -> Self {
        Self { route: GreenRoute::Local, r_min: None, r_max: None }
    }
}

/// Shape of the file, used to report unknown keys and type errors with
/// their line numbers before any override is applied.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct FileShape {
    mode: Option<Mode>,
    #[serde(default)]
    seed: u64,
    output: Option<PathBuf>,
    problem: Option<String>,
    grid: Option<GridSection>,
    flow: Option<FlowSection>,
    initial: Option<InitialSection>,
    solve: Option<SolveSection>,
    continuation: Option<ContinuationSection>,
    analyze: Option<AnalyzeSection>,
    bubble: Option<BubbleSection>,
    green: Option<GreenSection>,
}

/// Resolved configuration as recorded in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub problem: Option<String>,
    pub grid: GridSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub continuation: Option<ContinuationSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analyze: Option<AnalyzeSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bubble: Option<BubbleSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub green: Option<GreenSection>,
    /// Parsed form of `problem`.
    #[serde(skip)]
    pub problem_spec: Option<ProblemSpec>,
    /// One line per default filled in.
    #[serde(skip)]
    pub defaults_log: Vec<String>,
}

impl RunConfig {
    pub fn grid(&self) -> Result<TorusGrid> {
        make_grid(self.grid.n, self.grid.period)
    }

    pub fn problem(&self) -> Result<&ProblemSpec> {
        self.problem_spec
            .as_ref()
            .ok_or_else(|| Error::Config(format!("mode {} needs a problem", self.mode)))
    }

    /// Resolved config as TOML; loading it reproduces this config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn section<T: Clone + Default>(&self, s: &Option<T>) -> T {
        s.clone().unwrap_or_default()
    }

    pub fn flow(&self) -> FlowSection {
        self.section(&self.flow)
    }

    pub fn initial(&self) -> InitialSection {
        self.section(&self.initial)
    }

    pub fn solve(&self) -> SolveSection {
        self.section(&self.solve)
    }

    pub fn continuation(&self) -> ContinuationSection {
        self.section(&self.continuation)
    }

    pub fn analyze(&self) -> AnalyzeSection {
        self.section(&self.analyze)
    }

    pub fn bubble(&self) -> BubbleSection {
        self.section(&self.bubble)
    }

    pub fn green(&self) -> GreenSection {
        self.section(&self.green)
    }
}

/// Parses the right side of `--set key=value` as a TOML value, falling back
/// to a bare string.
fn override_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_owned()),
    }
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let value = override_value(raw.trim());
    match path[..] {
        [top] if !top.is_empty() => {
            table.insert(top.to_owned(), value);
        }
        [section, name] if !section.is_empty() && !name.is_empty() => {
            let entry = table.entry(section.to_owned()).or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(t) = entry else {
                return Err(Error::Config(format!("override {key}: {section} is not a section")));
            };
            t.insert(name.to_owned(), value);
        }
        _ => return Err(Error::Config(format!("override key {key:?} must be key or section.key"))),
    }
    Ok(())
}

/// Records every key of `section`'s defaults not given in `given`.
fn echo_defaults<T: Serialize + Default>(section: &str, given: Option<&Table>, log: &mut Vec<String>) {
    let defaults = Table::try_from(T::default()).expect("defaults serialize");
    for (key, value) in &defaults {
        if given.map_or(true, |t| !t.contains_key(key)) {
            log.push(format!("default {section}.{key} = {value}"));
        }
    }
}

fn resolve_path(base_dir: &Path, p: &Path) -> PathBuf {
    if p.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Parses config text. `base_dir` anchors relative paths.
pub fn parse_config(text: &str, overrides: &[String], base_dir: &Path) -> Result<RunConfig> {
    parse_config_for(text, None, overrides, base_dir)
}

/// [`parse_config`] for a run of mode `expected`, which the file may leave
/// out but must not contradict.
pub fn parse_config_for(
    text: &str,
    expected: Option<Mode>,
    overrides: &[String],
    base_dir: &Path,
) -> Result<RunConfig> {
    // line-accurate diagnostics for the file as written
    toml::from_str::<FileShape>(text).map_err(|e| Error::Config(e.to_string().trim_end().to_owned()))?;
    let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let shape = FileShape::deserialize(Value::Table(table.clone()))
        .map_err(|e| Error::Config(format!("after overrides: {}", e.to_string().trim_end())))?;
    let mode = match (shape.mode, expected) {
        (Some(m), Some(e)) if m != e => {
            return Err(Error::Config(format!("config is for mode {m}, invoked as {e}")))
        }
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => return Err(Error::Config("mode is required".into())),
    };
    for section in MODE_SECTIONS {
        if let (Some(Value::Table(t)), false) = (table.get(section), mode.sections().contains(&section)) {
            let keys: Vec<&str> = t.keys().map(String::as_str).collect();
            let what = if keys.is_empty() {
                format!("section [{section}]")
            } else {
                format!("{section}.{}", keys.join(", "))
            };
            return Err(Error::Config(format!(
                "{what}: option belongs to {} mode, not {mode}",
                owners(section)
            )));
        }
    }

    let mut log = Vec::new();
    let sub = |name: &str| table.get(name).and_then(Value::as_table);
    if !table.contains_key("seed") {
        log.push("default seed = 0".into());
    }
    if !table.contains_key("output") {
        log.push("default output = \"out\"".into());
    }
    echo_defaults::<GridSection>("grid", sub("grid"), &mut log);
    for &section in mode.sections() {
        match section {
            "flow" => echo_defaults::<FlowSection>(section, sub(section), &mut log),
            "initial" => echo_defaults::<InitialSection>(section, sub(section), &mut log),
            "solve" => echo_defaults::<SolveSection>(section, sub(section), &mut log),
            "continuation" => echo_defaults::<ContinuationSection>(section, sub(section), &mut log),
            "analyze" => echo_defaults::<AnalyzeSection>(section, sub(section), &mut log),
            "bubble" => echo_defaults::<BubbleSection>(section, sub(section), &mut log),
            "green" => echo_defaults::<GreenSection>(section, sub(section), &mut log),
            _ => unreachable!("unlisted section"),
        }
    }
    let optional = [
        ("flow", "energy_tolerance", "1e-12*(1+|E|)"),
        ("analyze", "rho", "pi^2/k"),
        ("green", "r_min", "6h"),
        ("green", "r_max", "L/8"),
    ];
    for (section, key, meaning) in optional {
        if mode.sections().contains(&section) && sub(section).map_or(true, |t| !t.contains_key(key)) {
            log.push(format!("default {section}.{key} = {meaning}"));
        }
    }

    let mut cfg = RunConfig {
        mode,
        seed: shape.seed,
        output: resolve_path(base_dir, &shape.output.unwrap_or_else(|| PathBuf::from("out"))),
        problem: shape.problem,
        grid: shape.grid.unwrap_or_default(),
        flow: None,
        initial: None,
        solve: None,
        continuation: None,
        analyze: None,
        bubble: None,
        green: None,
        problem_spec: None,
        defaults_log: log,
    };
    for &section in mode.sections() {
        match section {
            "flow" => cfg.flow = Some(shape.flow.clone().unwrap_or_default()),
            "initial" => cfg.initial = Some(shape.initial.clone().unwrap_or_default()),
            "solve" => cfg.solve = Some(shape.solve.clone().unwrap_or_default()),
            "continuation" => cfg.continuation = Some(shape.continuation.clone().unwrap_or_default()),
            "analyze" => cfg.analyze = Some(shape.analyze.clone().unwrap_or_default()),
            "bubble" => cfg.bubble = Some(shape.bubble.clone().unwrap_or_default()),
            "green" => cfg.green = Some(shape.green.clone().unwrap_or_default()),
            _ => unreachable!("unlisted section"),
        }
    }
    validate(&mut cfg, base_dir)?;
    Ok(cfg)
}

fn validate(cfg: &mut RunConfig, base_dir: &Path) -> Result<()> {
    cfg.grid()?;
    match (&cfg.problem, cfg.mode.needs_problem()) {
        (Some(text), _) => {
            let spec = ProblemSpec::parse(text, base_dir)?;
            cfg.problem = Some(spec.to_string());
            cfg.problem_spec = Some(spec);
        }
        (None, true) => return Err(Error::Config(format!("mode {} needs a problem", cfg.mode))),
        (None, false) => {}
    }
    let require_file = |what: &str, p: &Path| -> Result<PathBuf> {
        if p.as_os_str().is_empty() {
            return Err(Error::Config(format!("{what} is required")));
        }
        let p = base_dir.join(p);
        if !p.is_file() {
            return Err(Error::Config(format!("{what}: file {} does not exist", p.display())));
        }
        Ok(p)
    };
    if let Some(flow) = &cfg.flow {
        flow.options().validate().map_err(|e| Error::Config(format!("[flow] {e}")))?;
    }
    if let Some(init) = &mut cfg.initial {
        match (init.kind, &init.path) {
            (InitialKind::File, Some(p)) => init.path = Some(require_file("initial.path", p)?),
            (InitialKind::File, None) => return Err(Error::Config("initial.path is required".into())),
            (_, Some(_)) => {
                return Err(Error::Config("initial.path is only read when initial.kind = \"file\"".into()))
            }
            _ => {}
        }
        if !(init.amplitude >= 0.0 && init.amplitude.is_finite()) || init.max_mode < 1 {
            return Err(Error::Config("initial.amplitude must be >= 0 and initial.max_mode >= 1".into()));
        }
    }
    let check_newton = |what: &str, tol: f64, max_iter: usize| -> Result<()> {
        if !(tol > 0.0) || max_iter == 0 {
            return Err(Error::Config(format!("{what}: tol must be positive and max_iter at least 1")));
        }
        Ok(())
    };
    if let Some(s) = &cfg.solve {
        check_newton("solve", s.tol, s.max_iter)?;
    }
    if let Some(c) = &cfg.continuation {
        check_newton("continuation", c.tol, c.max_iter)?;
        if c.k_list.is_empty() || c.k_list.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("continuation.k_list must be non-empty and strictly increasing".into()));
        }
    }
    if let Some(a) = &mut cfg.analyze {
        a.input = require_file("analyze.input", &a.input)?;
        if let Some(rho) = a.rho {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::Config(format!("analyze.rho must lie in (0, 1), got {rho}")));
            }
        }
        if !(a.fit_half_width > 0.0) || a.fit_points < 3 {
            return Err(Error::Config("analyze.fit_half_width must be positive and fit_points >= 3".into()));
        }
    }
    if let Some(b) = &cfg.bubble {
        if b.lambda.len() != b.centers.len() || b.lambda.is_empty() {
            return Err(Error::Config(format!(
                "bubble: {} lambda values for {} centers",
                b.lambda.len(),
                b.centers.len()
            )));
        }
    }
    if let Some(g) = &cfg.green {
        if let (Some(a), Some(b)) = (g.r_min, g.r_max) {
            if !(a > 0.0 && b > a) {
                return Err(Error::Config("green: need 0 < r_min < r_max".into()));
            }
        }
    }
    Ok(())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    load_config_with(path, &[])
}

pub fn load_config_with(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
    load_config_for(path, None, overrides)
}

pub fn load_config_for(path: impl AsRef<Path>, expected: Option<Mode>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
    parse_config_for(&text, expected, overrides, base).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "mode = \"flow\"\nproblem = \"constant:10\"\n\n[grid]\nn = 32\nperiod = 1.0\n";

    fn parse(text: &str, overrides: &[&str]) -> Result<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse_config(text, &o, Path::new("/nonexistent-base"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.mode, Mode::Flow);
        assert_eq!(cfg.grid, GridSection { n: 32, period: 1.0 });
        assert_eq!(cfg.flow(), FlowSection::default());
        assert_eq!(cfg.problem_spec, Some(ProblemSpec::Constant(10.0)));
        assert!(cfg.defaults_log.iter().any(|l| l.starts_with("default flow.t_end = ")));
        assert!(cfg.defaults_log.iter().any(|l| l.starts_with("default initial.kind = ")));
        assert!(cfg.defaults_log.iter().any(|l| l.contains("flow.energy_tolerance")));
        assert!(!cfg.defaults_log.iter().any(|l| l.contains("grid.n")));
        assert!(cfg.solve.is_none() && cfg.continuation.is_none());
    }

    #[test]
    fn overrides_apply_and_typecheck() {
        let cfg = parse(MINIMAL, &["flow.t_end=0.5", "seed=9", "grid.n=16"]).unwrap();
        assert_eq!(cfg.flow().t_end, 0.5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.grid.n, 16);
        assert!(!cfg.defaults_log.iter().any(|l| l.contains("flow.t_end")));
        let err = parse(MINIMAL, &["flow.t_end=soon"]).unwrap_err().to_string();
        assert!(err.contains("t_end"), "{err}");
        assert!(parse(MINIMAL, &["no_equals"]).is_err());
        assert!(parse(MINIMAL, &["problem=cosine:10,0.3,1,0,0,0"]).is_ok());
    }

    #[test]
    fn foreign_option_is_rejected() {
        let text = format!("{MINIMAL}\n[continuation]\nk_list = [10.0, 50.0]\n");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("k_list") && err.contains("belongs to continuation"), "{err}");
        let err = parse(MINIMAL, &["continuation.k_list=[1.0]"]).unwrap_err().to_string();
        assert!(err.contains("belongs to continuation"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{MINIMAL}\n[flow]\nt_ned = 1.0\n");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("t_ned"), "{err}");
        let err = parse(&format!("colour = 1\n{MINIMAL}"), &[]).unwrap_err().to_string();
        assert!(err.contains("colour"), "{err}");
    }

    #[test]
    fn type_mismatch_reports_line() {
        let text = format!("{MINIMAL}\n[flow]\nt_end = \"long\"\n");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("line 9"), "{err}");
    }

    #[test]
    fn missing_problem_file_is_an_error() {
        let text = MINIMAL.replace("constant:10", "file:no/such/field.qfld");
        let err = parse(&text, &[]).unwrap_err().to_string();
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn problem_forms() {
        let base = Path::new(".");
        assert_eq!(
            ProblemSpec::parse("cosine:10,0.3,1,0,-2,0", base).unwrap(),
            ProblemSpec::Cosine { base: 10.0, amplitude: 0.3, mode: [1, 0, -2, 0] }
        );
        assert_eq!(
            ProblemSpec::parse("peaked:50,0.5", base).unwrap(),
            ProblemSpec::Peaked { total: 50.0, beta: 0.5 }
        );
        for bad in ["constant", "constant:x", "cosine:1,2", "cosine:1,0.1,0.5,0,0,0", "wave:1", "peaked:1"] {
            assert!(ProblemSpec::parse(bad, base).is_err(), "{bad}");
        }
        let g = make_grid(8, 1.0).unwrap();
        let f = ProblemSpec::Peaked { total: 50.0, beta: 0.5 }.build(g).unwrap();
        assert!((crate::grid::integrate(&f) - 50.0).abs() < 1e-10);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = parse(MINIMAL, &["flow.energy_tolerance=1e-10"]).unwrap();
        let again = parse(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again.to_toml(), cfg.to_toml());
        assert_eq!(again.flow().energy_tolerance, Some(1e-10));
        assert!(again.defaults_log.iter().all(|l| !l.contains("flow.")));
    }

    #[test]
    fn mode_specific_validation() {
        let green = "mode = \"green\"\n";
        assert!(parse(green, &[]).is_ok());
        assert!(parse(green, &["green.r_min=0.2", "green.r_max=0.1"]).is_err());
        assert!(parse("mode = \"solve\"\n", &[]).is_err());
        let cont = "mode = \"continuation\"\nproblem = \"peaked:1,0.5\"\n";
        assert_eq!(parse(cont, &[]).unwrap().continuation().k_list, vec![10.0, 50.0, 100.0]);
        assert!(parse(cont, &["continuation.k_list=[50.0, 10.0]"]).is_err());
        let bubble = "mode = \"bubble\"\nproblem = \"constant:157.91367041742973\"\n";
        assert!(parse(bubble, &["bubble.lambda=[20.0, 30.0]"]).is_err());
        assert!(parse("mode = \"analyze\"\nproblem = \"constant:10\"\n", &[]).is_err());
        assert!(parse(MINIMAL, &["initial.kind=\"file\""]).is_err());
        assert!(parse(MINIMAL, &["flow.dt_min=-1.0"]).is_err());
        assert!(parse("mode = \"sideways\"\n", &[]).is_err());
        assert!(parse("seed = 1\n", &[]).is_err());
        let base = Path::new("/tmp");
        let no_mode = "problem = \"constant:10\"\n";
        assert_eq!(parse_config_for(no_mode, Some(Mode::Solve), &[], base).unwrap().mode, Mode::Solve);
        let err = parse_config_for(MINIMAL, Some(Mode::Solve), &[], base).unwrap_err().to_string();
        assert!(err.contains("invoked as solve"), "{err}");
    }
}
