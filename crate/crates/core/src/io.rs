//! TOML files: scenarios, measurement sets and reports.
//!
//! A scenario file holds `attitude` (rows), `position` and an array of
//! `[[features]]` tables with `r`, `v`, optional `b`/`u`, `R_r`, `R_b` (rows),
//! `R_u` and `R_v`. When `b`/`u` are absent they are regenerated from the
//! projection constraint. Floats are written in shortest round-trip form, so
//! reading back a written scenario is bit-exact.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::estimator::PoseSolution;
use crate::model::{complete_feature, FeatureNoise, FeatureTruth, Measurement, MeasurementSet, Scenario};
use crate::so3::Rotation;
use crate::uncertainty::UncertaintyReport;

/// The bundled reference scenario in scenario-file form.
pub const FIXTURE_TOML: &str = include_str!("../data/fixture.toml");

fn parse_err(ctx: &str, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{ctx}: {msg}"))
}

fn number(v: &Value, ctx: &str) -> Result<f64> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        other => Err(parse_err(ctx, format!("expected a number, found {}", other.type_str()))),
    }
}

fn field<'a>(t: &'a Table, key: &str, ctx: &str) -> Result<&'a Value> {
    t.get(key).ok_or_else(|| parse_err(ctx, format!("missing field `{key}`")))
}

fn scalar(t: &Table, key: &str, ctx: &str) -> Result<f64> {
    number(field(t, key, ctx)?, &format!("{ctx}, field `{key}`"))
}

fn vector_value(v: &Value, ctx: &str) -> Result<Vector3<f64>> {
    let arr = v.as_array().ok_or_else(|| parse_err(ctx, "expected an array of 3 numbers"))?;
    if arr.len() != 3 {
        return Err(parse_err(ctx, format!("expected 3 entries, found {}", arr.len())));
    }
    Ok(Vector3::new(number(&arr[0], ctx)?, number(&arr[1], ctx)?, number(&arr[2], ctx)?))
}

fn vector(t: &Table, key: &str, ctx: &str) -> Result<Vector3<f64>> {
    vector_value(field(t, key, ctx)?, &format!("{ctx}, field `{key}`"))
}

fn matrix(t: &Table, key: &str, ctx: &str) -> Result<Matrix3<f64>> {
    let ctx = format!("{ctx}, field `{key}`");
    let rows = field(t, key, &ctx)?
        .as_array()
        .ok_or_else(|| parse_err(&ctx, "expected 3 rows of 3 numbers"))?;
    if rows.len() != 3 {
        return Err(parse_err(&ctx, format!("expected 3 rows, found {}", rows.len())));
    }
    let mut m = Matrix3::zeros();
    for (i, row) in rows.iter().enumerate() {
        m.set_row(i, &vector_value(row, &format!("{ctx}, row {i}"))?.transpose());
    }
    Ok(m)
}

fn features_array<'a>(doc: &'a Table) -> Result<&'a Vec<Value>> {
    field(doc, "features", "document")?
        .as_array()
        .ok_or_else(|| parse_err("field `features`", "expected an array of tables"))
}

fn feature_table<'a>(v: &'a Value, ctx: &str) -> Result<&'a Table> {
    v.as_table().ok_or_else(|| parse_err(ctx, "expected a table"))
}

fn parse_document(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::Parse(e.to_string()))
}

fn parse_rotation(m: Matrix3<f64>) -> Result<Rotation> {
    // exact matrices are kept bit for bit; slightly drifted ones are projected
    Rotation::new(m).or_else(|_| Rotation::from_matrix_projected(m))
}

/// Parses a scenario document. Errors name the feature index (from 1) and field.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let doc = parse_document(text)?;
    let attitude = parse_rotation(matrix(&doc, "attitude", "document")?)
        .map_err(|e| parse_err("field `attitude`", e))?;
    let position = vector(&doc, "position", "document")?;
    let mut features = Vec::new();
    for (i, v) in features_array(&doc)?.iter().enumerate() {
        let ctx = format!("feature {}", i + 1);
        let t = feature_table(v, &ctx)?;
        let r = vector(t, "r", &ctx)?;
        let v = scalar(t, "v", &ctx)?;
        let noise = FeatureNoise {
            r_r: matrix(t, "R_r", &ctx)?,
            r_b: matrix(t, "R_b", &ctx)?,
            r_u: scalar(t, "R_u", &ctx)?,
            r_v: scalar(t, "R_v", &ctx)?,
        };
        let (b, u) = match (t.get("b"), t.get("u")) {
            (Some(_), Some(_)) => (vector(t, "b", &ctx)?, scalar(t, "u", &ctx)?),
            (None, None) => complete_feature(&attitude, &position, &r, v).map_err(|e| parse_err(&ctx, e))?,
            _ => return Err(parse_err(&ctx, "fields `b` and `u` must be given together")),
        };
        features.push((FeatureTruth { r, b, u, v }, noise));
    }
    Scenario::new(attitude, position, features)
}

pub fn read_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn vec_value(v: &Vector3<f64>) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn slice_value(v: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(v.into_iter().map(Value::Float).collect())
}

fn mat_value<R: nalgebra::Dim, C: nalgebra::Dim, S: nalgebra::RawStorage<f64, R, C>>(
    m: &nalgebra::Matrix<f64, R, C, S>,
) -> Value {
    Value::Array((0..m.nrows()).map(|i| slice_value((0..m.ncols()).map(|j| m[(i, j)]))).collect())
}

fn render(table: Table) -> String {
    toml::to_string(&table).expect("tables of numbers always serialize")
}

/// Serializes a scenario, body-side truth included.
pub fn scenario_to_string(sc: &Scenario) -> String {
    let mut doc = Table::new();
    doc.insert("attitude".into(), mat_value(sc.attitude().matrix()));
    doc.insert("position".into(), vec_value(sc.position()));
    let features = sc
        .truth()
        .iter()
        .zip(sc.noise())
        .map(|(t, n)| {
            let mut f = Table::new();
            f.insert("r".into(), vec_value(&t.r));
            f.insert("v".into(), Value::Float(t.v));
            f.insert("b".into(), vec_value(&t.b));
            f.insert("u".into(), Value::Float(t.u));
            f.insert("R_r".into(), mat_value(&n.r_r));
            f.insert("R_b".into(), mat_value(&n.r_b));
            f.insert("R_u".into(), Value::Float(n.r_u));
            f.insert("R_v".into(), Value::Float(n.r_v));
            Value::Table(f)
        })
        .collect();
    doc.insert("features".into(), Value::Array(features));
    render(doc)
}

/// Parses `[[features]]` tables with `r`, `b`, `u`, `v`.
pub fn parse_measurements(text: &str) -> Result<MeasurementSet> {
    let doc = parse_document(text)?;
    let mut out = Vec::new();
    for (i, v) in features_array(&doc)?.iter().enumerate() {
        let ctx = format!("feature {}", i + 1);
        let t = feature_table(v, &ctx)?;
        out.push(Measurement {
            r: vector(t, "r", &ctx)?,
            b: vector(t, "b", &ctx)?,
            u: scalar(t, "u", &ctx)?,
            v: scalar(t, "v", &ctx)?,
        });
    }
    Ok(MeasurementSet { features: out })
}

pub fn measurements_to_string(meas: &MeasurementSet) -> String {
    let features = meas
        .features
        .iter()
        .map(|m| {
            let mut f = Table::new();
            f.insert("r".into(), vec_value(&m.r));
            f.insert("b".into(), vec_value(&m.b));
            f.insert("u".into(), Value::Float(m.u));
            f.insert("v".into(), Value::Float(m.v));
            Value::Table(f)
        })
        .collect();
    let mut doc = Table::new();
    doc.insert("features".into(), Value::Array(features));
    render(doc)
}

fn uncertainty_table(rep: &UncertaintyReport) -> Table {
    let mut t = Table::new();
    t.insert("evaluation_point".into(), Value::String(format!("{:?}", rep.mode).to_lowercase()));
    t.insert("sigmas".into(), slice_value(rep.sigmas().iter().copied()));
    t.insert("information".into(), mat_value(&rep.information));
    t.insert("covariance".into(), mat_value(&rep.covariance));
    let per_feature = |blocks: &[Matrix6<f64>]| Value::Array(blocks.iter().map(mat_value).collect());
    t.insert("residual_covariance".into(), per_feature(&rep.residual_covariance));
    t.insert("estimate_covariance".into(), per_feature(&rep.estimate_covariance));
    t
}

/// Solution and its uncertainty as a TOML document.
pub fn solution_report(sol: &PoseSolution, rep: &UncertaintyReport) -> String {
    let mut s = Table::new();
    s.insert("converged".into(), Value::Boolean(sol.converged));
    s.insert("iterations".into(), Value::Integer(sol.iterations as i64));
    s.insert("final_cost".into(), Value::Float(sol.final_cost));
    s.insert("attitude".into(), mat_value(sol.state.attitude.matrix()));
    s.insert(
        "roll_pitch_yaw_deg".into(),
        slice_value(sol.state.attitude.roll_pitch_yaw().iter().map(|x| x.to_degrees())),
    );
    s.insert("position".into(), vec_value(&sol.state.position));
    s.insert("u".into(), slice_value(sol.state.u.iter().copied()));
    s.insert("v".into(), slice_value(sol.state.v.iter().copied()));
    s.insert("r_hat".into(), Value::Array((0..sol.directions.len()).map(|i| vec_value(&sol.r_hat(i))).collect()));
    s.insert("b_hat".into(), Value::Array((0..sol.directions.len()).map(|i| vec_value(&sol.b_hat(i))).collect()));
    s.insert("max_constraint_violation".into(), Value::Float(sol.max_constraint_violation()));
    let mut doc = Table::new();
    doc.insert("solution".into(), Value::Table(s));
    doc.insert("uncertainty".into(), Value::Table(uncertainty_table(rep)));
    render(doc)
}

/// Information-matrix report with its conditioning.
pub fn information_report(rep: &UncertaintyReport, rcond: f64, logdet: f64) -> String {
    let mut t = uncertainty_table(rep);
    t.insert("rcond".into(), Value::Float(rcond));
    t.insert("logdet".into(), Value::Float(logdet));
    let mut doc = Table::new();
    doc.insert("fim".into(), Value::Table(t));
    render(doc)
}

/// Reads a square matrix written by [`mat_value`]; used by tests and tools.
pub fn parse_matrix(v: &Value, ctx: &str) -> Result<DMatrix<f64>> {
    let rows = v.as_array().ok_or_else(|| parse_err(ctx, "expected rows"))?;
    let parsed: Vec<DVector<f64>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let rctx = format!("{ctx}, row {i}");
            let cells = r.as_array().ok_or_else(|| parse_err(&rctx, "expected an array"))?;
            cells.iter().map(|c| number(c, &rctx)).collect::<Result<Vec<_>>>().map(DVector::from_vec)
        })
        .collect::<Result<_>>()?;
    let ncols = parsed.first().map_or(0, |r| r.len());
    if parsed.iter().any(|r| r.len() != ncols) {
        return Err(parse_err(ctx, "ragged rows"));
    }
    Ok(DMatrix::from_fn(parsed.len(), ncols, |i, j| parsed[i][j]))
}
