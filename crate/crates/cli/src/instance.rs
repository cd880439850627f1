//! Benchmark instance files: UTF-8 JSON, validated on load.
//!
//! Omitted fields take defaults: safety bounds `±1`, initial bounds at half
//! the safety bounds, input bounds `±1`, controller format `<8,8>`, the
//! default plant-precision schedule, ADC and DAC at the controller's fraction
//! bits, noise on every state coordinate.

use std::path::Path;

use nalgebra::DMatrix;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use safeloop::fixedpoint::FixedFormat;
use safeloop::interval::{HyperBox, Interval};
use safeloop::model::{discretize, ContinuousPlant, DiscretePlant, ModelError, SafetySpec};
use safeloop::noise::NoiseRouting;
use safeloop::verify_msv::default_schedule;

/// Relative tolerance handed to the discretization.
pub const DISCRETIZE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read instance: {source}")]
    Io { source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> LoadError {
    LoadError::Validation { field: field.to_string(), reason: reason.into() }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Continuous,
    Discrete,
}

/// Row-major matrix whose parse errors name the offending row.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Rows(pub Vec<Vec<f64>>);

impl<'de> Deserialize<'de> for Rows {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = Vec::<serde_json::Value>::deserialize(d)?;
        raw.into_iter()
            .enumerate()
            .map(|(i, row)| serde_json::from_value::<Vec<f64>>(row).map_err(|e| D::Error::custom(format!("matrix row {i}: {e}"))))
            .collect::<Result<_, _>>()
            .map(Rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdcDac {
    #[serde(rename = "F_adc")]
    pub f_adc: u32,
    #[serde(rename = "F_dac")]
    pub f_dac: u32,
}

/// On-disk layout. Every optional field falls back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub rederived: bool,
    #[serde(default)]
    pub mode: Mode,
    #[serde(rename = "A")]
    pub a: Rows,
    #[serde(rename = "B")]
    pub b: Rows,
    pub sample_times: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safety_bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller_format: Option<FixedFormat>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant_precision_schedule: Option<Vec<FixedFormat>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adc_dac: Option<AdcDac>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_routing: Option<NoiseRouting>,
    /// Only the zero reference is supported.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
}

/// A validated problem instance with defaults applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub name: String,
    pub description: Option<String>,
    pub rederived: bool,
    pub mode: Mode,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sample_times: Vec<f64>,
    pub spec: SafetySpec,
    pub controller_format: FixedFormat,
    pub schedule: Vec<FixedFormat>,
    pub dac: FixedFormat,
    pub routing: NoiseRouting,
}

fn matrix(rows: &Rows, field: &str) -> Result<DMatrix<f64>, LoadError> {
    let r = rows.0.len();
    let c = rows.0.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(invalid(field, "matrix is empty"));
    }
    if let Some((i, row)) = rows.0.iter().enumerate().find(|(_, row)| row.len() != c) {
        return Err(invalid(field, format!("row {i} has {} entries, expected {c}", row.len())));
    }
    let flat: Vec<f64> = rows.0.iter().flatten().copied().collect();
    if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
        return Err(invalid(field, format!("row {} holds a non-finite entry", i / c)));
    }
    Ok(DMatrix::from_row_slice(r, c, &flat))
}

fn to_rows(m: &DMatrix<f64>) -> Rows {
    Rows((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
}

fn bounds_box(b: &Bounds, n: usize, field: &str) -> Result<HyperBox, LoadError> {
    if b.lo.len() != n || b.hi.len() != n {
        return Err(invalid(field, format!("expected {n} lower and upper bounds, got {} and {}", b.lo.len(), b.hi.len())));
    }
    if let Some(i) = b.lo.iter().zip(&b.hi).position(|(l, h)| !(l.is_finite() && h.is_finite() && l < h)) {
        return Err(invalid(field, format!("coordinate {i} needs finite bounds with lo < hi")));
    }
    Ok(HyperBox::from_bounds(&b.lo, &b.hi))
}

fn format_checked(f: FixedFormat, field: &str) -> Result<FixedFormat, LoadError> {
    f.validate().map_err(|e| invalid(field, e.to_string()))?;
    Ok(f)
}

impl Instance {
    pub fn from_file(file: InstanceFile) -> Result<Self, LoadError> {
        if file.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let a = matrix(&file.a, "A")?;
        let b = matrix(&file.b, "B")?;
        let n = a.nrows();
        if a.ncols() != n {
            return Err(invalid("A", format!("must be square, got {n}x{}", a.ncols())));
        }
        if b.nrows() != n || b.ncols() != 1 {
            return Err(invalid("B", format!("must be {n}x1, got {}x{}", b.nrows(), b.ncols())));
        }
        if file.sample_times.is_empty() {
            return Err(invalid("sample_times", "at least one sample time is required"));
        }
        if let Some(t) = file.sample_times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(invalid("sample_times", format!("{t} is not a positive sample time")));
        }
        if file.mode == Mode::Discrete && file.sample_times.len() != 1 {
            return Err(invalid("sample_times", "a discrete instance carries exactly one sample time"));
        }
        if let Some(r) = &file.reference {
            if r.iter().any(|&v| v != 0.0) {
                return Err(invalid("reference", "nonzero reference signals are not supported"));
            }
        }
        let safety = match &file.safety_bounds {
            Some(bnd) => bounds_box(bnd, n, "safety_bounds")?,
            None => HyperBox::symmetric(1.0, n),
        };
        let init = match &file.init_bounds {
            Some(bnd) => bounds_box(bnd, n, "init_bounds")?,
            None => HyperBox::new(safety.coords().iter().map(|c| c.scale(0.5)).collect()),
        };
        let input = match &file.input_bounds {
            Some(bnd) => bounds_box(bnd, 1, "input_bounds")?.coords()[0],
            None => Interval::symmetric(1.0),
        };
        let spec = SafetySpec::new(safety, input, init).map_err(|e| invalid("init_bounds", e.to_string()))?;
        let controller_format =
            format_checked(file.controller_format.unwrap_or(FixedFormat::new(8, 8).expect("valid")), "controller_format")?;
        let schedule = match &file.plant_precision_schedule {
            Some(s) if s.is_empty() => return Err(invalid("plant_precision_schedule", "must not be empty")),
            Some(s) => s.iter().map(|&f| format_checked(f, "plant_precision_schedule")).collect::<Result<_, _>>()?,
            None => default_schedule(),
        };
        let adc_dac =
            file.adc_dac.unwrap_or(AdcDac { f_adc: controller_format.frac_bits, f_dac: controller_format.frac_bits });
        // The ADC writes straight into the controller word.
        if adc_dac.f_adc != controller_format.frac_bits {
            return Err(invalid(
                "adc_dac",
                format!("F_adc = {} must equal the controller's F = {}", adc_dac.f_adc, controller_format.frac_bits),
            ));
        }
        let dac = format_checked(FixedFormat { int_bits: controller_format.int_bits, frac_bits: adc_dac.f_dac }, "adc_dac")?;
        Ok(Self {
            name: file.name,
            description: file.description,
            rederived: file.rederived,
            mode: file.mode,
            a,
            b,
            sample_times: file.sample_times,
            spec,
            controller_format,
            schedule,
            dac,
            routing: file.noise_routing.unwrap_or_default(),
        })
    }

    /// Fully explicit file form: loading it yields `self` again.
    pub fn to_file(&self) -> InstanceFile {
        let bounds = |b: &HyperBox| Bounds { lo: b.lo(), hi: b.hi() };
        let input = self.spec.input_bounds();
        InstanceFile {
            name: self.name.clone(),
            description: self.description.clone(),
            rederived: self.rederived,
            mode: self.mode,
            a: to_rows(&self.a),
            b: to_rows(&self.b),
            sample_times: self.sample_times.clone(),
            init_bounds: Some(bounds(self.spec.init_box())),
            input_bounds: Some(Bounds { lo: vec![input.lo()], hi: vec![input.hi()] }),
            safety_bounds: Some(bounds(self.spec.state_box())),
            controller_format: Some(self.controller_format),
            plant_precision_schedule: Some(self.schedule.clone()),
            adc_dac: Some(AdcDac { f_adc: self.controller_format.frac_bits, f_dac: self.dac.frac_bits }),
            noise_routing: Some(self.routing),
            reference: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("instance serializes")
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    /// Plant at sample time `ts`: discretized for continuous instances, taken
    /// as given otherwise.
    pub fn plant(&self, ts: f64) -> Result<DiscretePlant, ModelError> {
        match self.mode {
            Mode::Continuous => discretize(&ContinuousPlant::new(self.a.clone(), self.b.clone())?, ts, DISCRETIZE_TOL),
            Mode::Discrete => DiscretePlant::new(self.a.clone(), self.b.clone(), ts),
        }
    }
}

pub fn parse_instance(text: &str) -> Result<Instance, LoadError> {
    let file: InstanceFile = serde_json::from_str(text)
        .map_err(|e| LoadError::Parse { line: e.line(), column: e.column(), message: e.to_string() })?;
    Instance::from_file(file)
}

pub fn load_instance(path: &Path) -> Result<Instance, LoadError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| LoadError::Io { source })?;
    parse_instance(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"name": "m", "A": [[0, 1], [-2, -3]], "B": [[0], [1]], "sample_times": [0.1, 0.2]}"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let inst = parse_instance(MINIMAL).unwrap();
        assert_eq!(inst.mode, Mode::Continuous);
        assert_eq!(inst.spec.state_box(), &HyperBox::symmetric(1.0, 2));
        assert_eq!(inst.spec.init_box(), &HyperBox::symmetric(0.5, 2));
        assert_eq!(inst.spec.input_bounds(), Interval::symmetric(1.0));
        assert_eq!(inst.controller_format, FixedFormat::new(8, 8).unwrap());
        assert_eq!(inst.dac, inst.controller_format);
        assert_eq!(inst.schedule, default_schedule());
        assert_eq!(inst.routing, NoiseRouting::AllStates);
        assert!(!inst.rederived);
    }

    #[test]
    fn round_trip_is_identity() {
        let inst = parse_instance(MINIMAL).unwrap();
        let again = parse_instance(&inst.to_json()).unwrap();
        assert_eq!(inst, again);
        assert_eq!(again.to_file(), inst.to_file());
    }

    #[test]
    fn malformed_row_is_named() {
        let text = r#"{"name": "m", "A": [[0, 1], [-2, "x"]], "B": [[0], [1]], "sample_times": [0.1]}"#;
        match parse_instance(text) {
            Err(LoadError::Parse { message, .. }) => assert!(message.contains("matrix row 1"), "{message}"),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_named() {
        let text = r#"{"name": "m", "A": [[0, 1], [-2]], "B": [[0], [1]], "sample_times": [0.1]}"#;
        match parse_instance(text) {
            Err(LoadError::Validation { field, reason }) => {
                assert_eq!(field, "A");
                assert!(reason.contains("row 1"));
            }
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let cases = [
            (r#"{"name": "m", "A": [[1, 0]], "B": [[1]], "sample_times": [0.1]}"#, "A"),
            (r#"{"name": "m", "A": [[1]], "B": [[1, 1]], "sample_times": [0.1]}"#, "B"),
            (r#"{"name": "m", "A": [[1]], "B": [[1]], "sample_times": [0.0]}"#, "sample_times"),
            (r#"{"name": "m", "A": [[1]], "B": [[1]], "sample_times": [0.1], "reference": [0.5]}"#, "reference"),
            (
                r#"{"name": "m", "A": [[1]], "B": [[1]], "sample_times": [0.1], "init_bounds": {"lo": [-2], "hi": [2]}}"#,
                "init_bounds",
            ),
            (r#"{"name": "m", "A": [[1]], "B": [[1]], "sample_times": [0.1], "adc_dac": {"F_adc": 4, "F_dac": 4}}"#, "adc_dac"),
            (r#"{"name": "m", "mode": "discrete", "A": [[1]], "B": [[1]], "sample_times": [0.1, 0.2]}"#, "sample_times"),
            (r#"{"name": " ", "A": [[1]], "B": [[1]], "sample_times": [0.1]}"#, "name"),
        ];
        for (text, expected) in cases {
            match parse_instance(text) {
                Err(LoadError::Validation { field, .. }) => assert_eq!(field, expected, "{text}"),
                other => panic!("{text}: expected a validation error, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let text = r#"{"name": "m", "A": [[1]], "B": [[1]], "sample_times": [0.1], "gain": 3}"#;
        assert!(matches!(parse_instance(text), Err(LoadError::Parse { .. })));
    }

    #[test]
    fn continuous_plant_is_discretized() {
        let inst = parse_instance(r#"{"name": "s", "A": [[-1]], "B": [[1]], "sample_times": [0.5]}"#).unwrap();
        let p = inst.plant(0.5).unwrap();
        assert!((p.a()[(0, 0)] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((p.b()[(0, 0)] - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
    }
}
