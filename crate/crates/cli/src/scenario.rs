//! Scenario file schema, version "1".
//!
//! Numeric fields accept JSON numbers or decimal strings (`"1e-3"`), so a
//! scenario can pin exact values without relying on float printing.

use std::fmt;

use serde::de::{self, DeserializeOwned, Deserializer, SeqAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use qbranch::model::EnsembleKind;
use qbranch::C64;

pub const SCHEMA_VERSION: &str = "1";

/// Experiment kinds in the order `list` prints them.
pub const EXPERIMENTS: [(&str, &str); 8] = [
    ("ntc", "Leakage of each projector component out of its subspace over a window"),
    ("robs", "Certify a projector family as an R-observable over an initial ensemble"),
    ("echo", "Loschmidt echo of two branch Hamiltonians and its decay-rate fit"),
    ("tree", "Grow a branching tree through kicked dephasing windows and check the decomposition"),
    ("ivr", "Compatible-description check of a fine tree against coarse schedules"),
    ("measure", "Premeasure a system, split on the pointer family and compare with |C_b|^2"),
    ("master", "Exact tree populations against the one-step master equation"),
    ("isolatable", "Apparatus evolution with the interaction switched off"),
];

#[derive(Debug)]
pub struct SchemaError(pub String);

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for SchemaError {}

fn schema_err(msg: impl Into<String>) -> SchemaError {
    SchemaError(msg.into())
}

/// Float that may be written as a number or a decimal string.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Num(pub f64);

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Num;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a finite number or decimal string")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Num, E> {
                if v.is_finite() {
                    Ok(Num(v))
                } else {
                    Err(E::custom("number must be finite"))
                }
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Num, E> {
                match v.trim().parse::<f64>() {
                    Ok(x) if x.is_finite() => Ok(Num(x)),
                    _ => Err(E::custom(format!("`{v}` is not a finite decimal number"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

/// Non-negative integer, number or string.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Int(pub u64);

impl Int {
    pub fn get(self) -> usize {
        self.0 as usize
    }
}

impl<'de> Deserialize<'de> for Int {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Int;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a non-negative integer")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Int, E> {
                Ok(Int(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Int, E> {
                u64::try_from(v).map(Int).map_err(|_| E::custom(format!("{v} is negative")))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Int, E> {
                v.trim().parse::<u64>().map(Int).map_err(|_| E::custom(format!("`{v}` is not a non-negative integer")))
            }
        }
        d.deserialize_any(V)
    }
}

/// Complex amplitude: a real number, or `[re, im]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coef(pub C64);

impl<'de> Deserialize<'de> for Coef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Coef;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a real amplitude or a pair [re, im]")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Coef, E> {
                Num::deserialize(de::value::F64Deserializer::new(v)).map(|n| Coef(C64::new(n.0, 0.0)))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Coef, E> {
                Ok(Coef(C64::new(v as f64, 0.0)))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Coef, E> {
                Ok(Coef(C64::new(v as f64, 0.0)))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Coef, E> {
                Num::deserialize(de::value::StrDeserializer::new(v)).map(|n| Coef(C64::new(n.0, 0.0)))
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Coef, A::Error> {
                let re: Num = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let im: Num = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<Value>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(Coef(C64::new(re.0, im.0)))
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema: String,
    experiment: String,
    seed: Int,
    #[serde(default)]
    tolerance: Option<ToleranceSpec>,
    #[serde(default)]
    model: Option<ModelSpec>,
    #[serde(default = "empty_params")]
    params: Value,
}

fn empty_params() -> Value {
    Value::Object(Default::default())
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    pub eps_x: Num,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSpec {
    pub ensemble: EnsembleKind,
    pub dim: Int,
    #[serde(default = "one")]
    pub spacing: Num,
    #[serde(default)]
    pub band: Option<Int>,
}

fn one() -> Num {
    Num(1.0)
}

/// Dephasing model `H_R = diag(levels)`, random-matrix `H_E`,
/// `H_I = λ Σ_μ |μ⟩⟨μ| ⊗ B_μ`. `coupling = 0` switches the interaction off.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub levels: Vec<Num>,
    pub environment: EnvironmentSpec,
    pub coupling: Num,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApparatusKind {
    #[default]
    Random,
    Uniform,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ApparatusSpec {
    Named(ApparatusKind),
    Coefficients(Vec<Coef>),
}

impl Default for ApparatusSpec {
    fn default() -> Self {
        Self::Named(ApparatusKind::Random)
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvStateSpec {
    #[default]
    Haar,
    Ground,
    /// Random phases over the given central fraction of `H^E_0`'s spectrum.
    CentralBand(Num),
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    #[serde(default)]
    pub apparatus: ApparatusSpec,
    #[serde(default)]
    pub environment: EnvStateSpec,
}

#[derive(Clone, Copy, Debug, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// Eigenprojectors of `H_R`.
    #[default]
    Levels,
    Computational,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum FamilySpec {
    Named(FamilyKind),
    /// Groups of level indices, each spanning one projector.
    Groups { groups: Vec<Vec<Int>> },
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self::Named(FamilyKind::Levels)
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtcParams {
    pub window: (Num, Num),
    #[serde(default = "default_steps")]
    pub steps: Int,
    #[serde(default)]
    pub family: FamilySpec,
    #[serde(default)]
    pub state: StateSpec,
}

fn default_steps() -> Int {
    Int(200)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobsParams {
    pub window: (Num, Num),
    #[serde(default = "default_steps")]
    pub steps: Int,
    #[serde(default)]
    pub family: FamilySpec,
    /// Haar apparatus states on top of the pairwise superpositions.
    #[serde(default = "default_ensemble")]
    pub ensemble: Int,
    #[serde(default)]
    pub environment: EnvStateSpec,
}

fn default_ensemble() -> Int {
    Int(8)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoParams {
    #[serde(default)]
    pub mu: Int,
    #[serde(default = "one_int")]
    pub nu: Int,
    /// Rescale the coupling so that `ε/ε_p` equals this ratio (two-level
    /// GUE model built from the environment spec and seed).
    #[serde(default)]
    pub ratio: Option<Num>,
    /// Defaults to 15/Γ (FGR) or 8/(εσ_v) (Gaussian).
    #[serde(default)]
    pub t_end: Option<Num>,
    #[serde(default = "default_echo_steps")]
    pub steps: Int,
    #[serde(default = "default_central")]
    pub environment: EnvStateSpec,
    /// Allowed relative gap between the mean fitted and mean predicted rate.
    #[serde(default = "default_rate_tol")]
    pub rate_tolerance: Num,
    /// Average over this many consecutive seeds starting at the scenario seed.
    #[serde(default = "one_int")]
    pub seeds: Int,
}

fn one_int() -> Int {
    Int(1)
}

fn default_echo_steps() -> Int {
    Int(800)
}

fn default_central() -> EnvStateSpec {
    EnvStateSpec::CentralBand(Num(0.5))
}

fn default_rate_tol() -> Num {
    Num(0.25)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KickParams {
    pub splits: Int,
    #[serde(default = "one")]
    pub window: Num,
    #[serde(default = "half")]
    pub kick_duration: Num,
    #[serde(default = "one")]
    pub kick_strength: Num,
    #[serde(default = "yes")]
    pub env_dependent: bool,
}

fn half() -> Num {
    Num(0.5)
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeParams {
    pub kicks: KickParams,
    #[serde(default)]
    pub state: StateSpec,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Int,
    /// Also write every final component to `components.csv`.
    #[serde(default)]
    pub dump_components: bool,
}

fn default_checkpoints() -> Int {
    Int(10)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvrParams {
    #[serde(default = "default_ivr_env")]
    pub env: Int,
    #[serde(default = "default_ivr_lambda")]
    pub lambda: Num,
    #[serde(default = "default_ivr_tau")]
    pub tau_d: Num,
    #[serde(default = "default_ivr_theta")]
    pub theta: Num,
    /// Insert the time-reversed segment that recoheres the branches.
    #[serde(default)]
    pub reverse: bool,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Int,
}

fn default_ivr_env() -> Int {
    Int(512)
}
fn default_ivr_lambda() -> Num {
    Num(0.3)
}
fn default_ivr_tau() -> Num {
    Num(6.0)
}
fn default_ivr_theta() -> Num {
    Num(0.01)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureParams {
    pub coefficients: Vec<Coef>,
    /// `pointer[b]`: index of the level recording outcome `b`.
    #[serde(default)]
    pub pointer: Option<Vec<Int>>,
    #[serde(default)]
    pub r0: Option<Vec<Coef>>,
    #[serde(default = "one")]
    pub tau1: Num,
    #[serde(default = "default_t1")]
    pub t1: Num,
    #[serde(default = "half")]
    pub tau_d: Num,
    #[serde(default)]
    pub environment: EnvStateSpec,
}

fn default_t1() -> Num {
    Num(3.0)
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MasterParams {
    pub steps: Int,
    pub kicks: KickParams,
    #[serde(default)]
    pub state: StateSpec,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsolatableParams {
    pub t_end: Num,
    #[serde(default = "default_steps")]
    pub steps: Int,
    #[serde(default)]
    pub state: StateSpec,
}

#[derive(Clone, Debug)]
pub enum Experiment {
    Ntc(NtcParams),
    Robs(RobsParams),
    Echo(EchoParams),
    Tree(TreeParams),
    Ivr(IvrParams),
    Measure(MeasureParams),
    Master(MasterParams),
    Isolatable(IsolatableParams),
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ntc(_) => "ntc",
            Self::Robs(_) => "robs",
            Self::Echo(_) => "echo",
            Self::Tree(_) => "tree",
            Self::Ivr(_) => "ivr",
            Self::Measure(_) => "measure",
            Self::Master(_) => "master",
            Self::Isolatable(_) => "isolatable",
        }
    }

    /// Whether the experiment builds its own model.
    fn needs_model(&self) -> bool {
        !matches!(self, Self::Ivr(_))
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub seed: u64,
    pub eps_x: f64,
    pub model: Option<ModelSpec>,
    pub experiment: Experiment,
}

fn params<T: DeserializeOwned>(value: Value) -> Result<T, SchemaError> {
    serde_json::from_value(value).map_err(|e| schema_err(format!("params: {e}")))
}

pub fn parse(text: &str) -> Result<Scenario, SchemaError> {
    let raw: RawScenario = serde_json::from_str(text).map_err(|e| schema_err(format!("scenario: {e}")))?;
    if raw.schema != SCHEMA_VERSION {
        return Err(schema_err(format!("schema: unsupported version `{}` (expected \"{SCHEMA_VERSION}\")", raw.schema)));
    }
    let p = raw.params;
    let experiment = match raw.experiment.as_str() {
        "ntc" => Experiment::Ntc(params(p)?),
        "robs" => Experiment::Robs(params(p)?),
        "echo" => Experiment::Echo(params(p)?),
        "tree" => Experiment::Tree(params(p)?),
        "ivr" => Experiment::Ivr(params(p)?),
        "measure" => Experiment::Measure(params(p)?),
        "master" => Experiment::Master(params(p)?),
        "isolatable" => Experiment::Isolatable(params(p)?),
        other => {
            let names: Vec<&str> = EXPERIMENTS.iter().map(|e| e.0).collect();
            return Err(schema_err(format!("experiment: unknown kind `{other}` (one of {})", names.join(", "))));
        }
    };
    if experiment.needs_model() && raw.model.is_none() {
        return Err(schema_err(format!("model: missing field `model` (required by `{}`)", experiment.name())));
    }
    let eps_x = raw.tolerance.map_or(qbranch::dynamics::DEFAULT_EPS_X, |t| t.eps_x.0);
    let s = Scenario { seed: raw.seed.0, eps_x, model: raw.model, experiment };
    s.check()?;
    Ok(s)
}

impl Scenario {
    /// Cheap consistency checks that need no numerics.
    pub fn check(&self) -> Result<(), SchemaError> {
        if !(self.eps_x > 0.0) {
            return Err(schema_err("tolerance.eps_x: must be positive"));
        }
        let n = match &self.model {
            Some(m) => {
                if m.levels.len() < 2 {
                    return Err(schema_err("model.levels: need at least two levels"));
                }
                if m.environment.dim.0 == 0 {
                    return Err(schema_err("model.environment.dim: must be positive"));
                }
                if !(m.environment.spacing.0 > 0.0) {
                    return Err(schema_err("model.environment.spacing: must be positive"));
                }
                m.levels.len()
            }
            None => 0,
        };
        let window = |w: &(Num, Num)| {
            if w.1 .0 > w.0 .0 && w.0 .0 >= 0.0 {
                Ok(())
            } else {
                Err(schema_err("params.window: need 0 <= start < end"))
            }
        };
        let positive = |name: &str, x: f64| {
            if x > 0.0 {
                Ok(())
            } else {
                Err(schema_err(format!("params.{name}: must be positive")))
            }
        };
        let family = |f: &FamilySpec| {
            if let FamilySpec::Groups { groups } = f {
                let mut seen = vec![false; n];
                for g in groups {
                    for i in g {
                        let i = i.get();
                        if i >= n || std::mem::replace(&mut seen[i], true) {
                            return Err(schema_err("params.family.groups: each level index must appear once"));
                        }
                    }
                }
                if seen.iter().any(|s| !s) {
                    return Err(schema_err("params.family.groups: groups must cover every level"));
                }
            }
            Ok(())
        };
        let state = |s: &StateSpec| match &s.apparatus {
            ApparatusSpec::Coefficients(c) if c.len() != n => {
                Err(schema_err(format!("params.state.apparatus: expected {n} coefficients, found {}", c.len())))
            }
            _ => Ok(()),
        };
        let kicks = |k: &KickParams| {
            positive("kicks.splits", k.splits.0 as f64)?;
            positive("kicks.window", k.window.0)?;
            positive("kicks.kick_duration", k.kick_duration.0)
        };
        match &self.experiment {
            Experiment::Ntc(p) => {
                window(&p.window)?;
                positive("steps", p.steps.0 as f64)?;
                family(&p.family)?;
                state(&p.state)?;
            }
            Experiment::Robs(p) => {
                window(&p.window)?;
                positive("steps", p.steps.0 as f64)?;
                family(&p.family)?;
            }
            Experiment::Echo(p) => {
                if p.mu.get() >= n || p.nu.get() >= n || p.mu == p.nu {
                    return Err(schema_err("params.mu/nu: need two distinct level indices"));
                }
                if let Some(r) = p.ratio {
                    positive("ratio", r.0)?;
                }
                if let Some(t) = p.t_end {
                    positive("t_end", t.0)?;
                }
                positive("seeds", p.seeds.0 as f64)?;
                if p.steps.0 < 8 {
                    return Err(schema_err("params.steps: need at least 8 samples"));
                }
            }
            Experiment::Tree(p) => {
                kicks(&p.kicks)?;
                state(&p.state)?;
            }
            Experiment::Ivr(p) => {
                positive("env", p.env.0 as f64)?;
                positive("tau_d", p.tau_d.0)?;
            }
            Experiment::Measure(p) => {
                let m = p.coefficients.len();
                if m == 0 || m > n {
                    return Err(schema_err(format!("params.coefficients: need between 1 and {n} outcomes")));
                }
                if let Some(ptr) = &p.pointer {
                    if ptr.len() != m || ptr.iter().any(|k| k.get() >= n) {
                        return Err(schema_err("params.pointer: one level index per outcome"));
                    }
                }
                if let Some(r) = &p.r0 {
                    if r.len() != n {
                        return Err(schema_err(format!("params.r0: expected {n} coefficients")));
                    }
                }
                positive("tau1", p.tau1.0)?;
            }
            Experiment::Master(p) => {
                positive("steps", p.steps.0 as f64)?;
                kicks(&p.kicks)?;
                if p.kicks.splits.0 < p.steps.0 + 1 {
                    return Err(schema_err("params.kicks.splits: need at least steps + 1 splits"));
                }
                state(&p.state)?;
            }
            Experiment::Isolatable(p) => {
                positive("t_end", p.t_end.0)?;
                positive("steps", p.steps.0 as f64)?;
                state(&p.state)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TREE: &str = r#"{
        "schema": "1", "experiment": "tree", "seed": 4,
        "model": {"levels": [0, "0.5"], "environment": {"ensemble": "gue", "dim": "16"}, "coupling": "1"},
        "params": {"kicks": {"splits": 2}}
    }"#;

    #[test]
    fn decimal_strings_parse_exactly() {
        let s = parse(TREE).unwrap();
        let m = s.model.unwrap();
        assert_eq!(m.levels[1].0, 0.5);
        assert_eq!(m.environment.dim.get(), 16);
        assert_eq!(s.eps_x, 1e-6);
    }

    #[test]
    fn missing_and_unknown_fields_are_named() {
        let e = parse(&TREE.replace(r#""splits": 2"#, r#""window": 1"#)).unwrap_err();
        assert!(e.0.contains("splits"), "{e}");
        let e = parse(&TREE.replace(r#""seed": 4,"#, r#""seed": 4, "sede": 1,"#)).unwrap_err();
        assert!(e.0.contains("sede"), "{e}");
        let e = parse(&TREE.replace(r#""seed": 4,"#, "")).unwrap_err();
        assert!(e.0.contains("seed"), "{e}");
    }

    #[test]
    fn schema_version_is_enforced() {
        let e = parse(&TREE.replace(r#""schema": "1""#, r#""schema": "2""#)).unwrap_err();
        assert!(e.0.starts_with("schema"));
    }

    #[test]
    fn coefficients_take_pairs() {
        let c: Vec<Coef> = serde_json::from_str(r#"[0.5, "0.25", [0, "-1"]]"#).unwrap();
        assert_eq!(c[1].0, C64::new(0.25, 0.0));
        assert_eq!(c[2].0, C64::new(0.0, -1.0));
        assert!(serde_json::from_str::<Num>(r#""nan""#).is_err());
        assert!(serde_json::from_str::<Int>("-3").is_err());
    }
}
