//! On-disk schemas shared by the CLI: long-format response CSV, emission
//! CSV, item-parameter JSON, truth bundle JSON, fitted-curve artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::irf::{GolfItem, IrfFamily, ItemModel, StepParams, ThreePl};
use crate::records::ResponseRecord;

pub const FORMAT_VERSIONS: &str =
    "responses.v1 emissions.v1 items.v1 abilities.v1 truth.v1 fit.v1 report.v1";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

// ---- responses.csv ----

pub const RESPONSES_HEADER: [&str; 4] = ["student", "item", "time", "response"];

pub fn read_responses(path: &Path) -> Result<Vec<ResponseRecord>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != RESPONSES_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}'", RESPONSES_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| parse_err(path, line, e.to_string()))?;
        if row.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 fields, got {}", row.len())));
        }
        let time: f64 = row[2]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad time '{}'", &row[2])))?;
        let response: i64 = row[3]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad response '{}'", &row[3])))?;
        out.push(ResponseRecord {
            student: row[0].to_string(),
            item: row[1].to_string(),
            time,
            response,
        });
    }
    Ok(out)
}

pub fn write_responses(path: &Path, records: &[ResponseRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(RESPONSES_HEADER)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    for r in records {
        w.write_record(&[
            r.student.clone(),
            r.item.clone(),
            format!("{}", r.time),
            format!("{}", r.response),
        ])
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

// ---- emissions.csv ----

pub const EMISSIONS_HEADER: [&str; 3] = ["time", "kind", "payload"];

/// A parsed emission row, not yet bound to a transform or item bank.
#[derive(Debug, Clone, PartialEq)]
pub enum EmissionSpec {
    /// payload `1`/`0` (also accepts `yes`/`no`).
    Bernoulli { time: f64, yes: bool },
    /// payload `mean:std`, interpreted in fitted space.
    Gaussian { time: f64, mean: f64, std: f64 },
    /// kind `irf:<family>`, payload `<item>:<response>`.
    Irf {
        time: f64,
        family: IrfFamily,
        item: String,
        response: i64,
    },
}

pub fn read_emissions(path: &Path) -> Result<Vec<EmissionSpec>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != EMISSIONS_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}'", EMISSIONS_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| parse_err(path, line, e.to_string()))?;
        if row.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, got {}", row.len())));
        }
        let time: f64 = row[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad time '{}'", &row[0])))?;
        let kind = &row[1];
        let payload = &row[2];
        let spec = if kind == "bernoulli" {
            let yes = match payload.to_ascii_lowercase().as_str() {
                "1" | "yes" | "true" => true,
                "0" | "no" | "false" => false,
                other => return Err(parse_err(path, line, format!("bad bernoulli payload '{other}'"))),
            };
            EmissionSpec::Bernoulli { time, yes }
        } else if kind == "gaussian" {
            let (mean, std) = payload
                .split_once(':')
                .ok_or_else(|| parse_err(path, line, "gaussian payload must be 'mean:std'"))?;
            let mean: f64 = mean
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad mean '{mean}'")))?;
            let std: f64 = std
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad std '{std}'")))?;
            if !(std > 0.0) {
                return Err(parse_err(path, line, "gaussian std must be > 0"));
            }
            EmissionSpec::Gaussian { time, mean, std }
        } else if let Some(family) = kind.strip_prefix("irf:") {
            let family = IrfFamily::parse(family)?;
            let (item, response) = payload
                .split_once(':')
                .ok_or_else(|| parse_err(path, line, "irf payload must be '<item>:<response>'"))?;
            let response: i64 = response
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad response '{response}'")))?;
            EmissionSpec::Irf {
                time,
                family,
                item: item.to_string(),
                response,
            }
        } else {
            return Err(parse_err(
                path,
                line,
                format!("unknown kind '{kind}' (expected bernoulli, gaussian, or irf:<family>)"),
            ));
        };
        out.push(spec);
    }
    Ok(out)
}

pub fn write_emissions(path: &Path, specs: &[EmissionSpec]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(EMISSIONS_HEADER)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    for s in specs {
        let (time, kind, payload) = match s {
            EmissionSpec::Bernoulli { time, yes } => (
                *time,
                "bernoulli".to_string(),
                if *yes { "1" } else { "0" }.to_string(),
            ),
            EmissionSpec::Gaussian { time, mean, std } => {
                (*time, "gaussian".to_string(), format!("{mean}:{std}"))
            }
            EmissionSpec::Irf {
                time,
                family,
                item,
                response,
            } => (*time, format!("irf:{family}"), format!("{item}:{response}")),
        };
        w.write_record(&[format!("{time}"), kind, payload])
            .map_err(|e| parse_err(path, 0, e.to_string()))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

// ---- items.json ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item: String,
    pub family: String,
    pub params: ItemParams,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_min: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_max: Option<i64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ItemParams {
    ThreePl { a: f64, b: f64, c: f64 },
    Golf { steps: Vec<GolfStep> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GolfStep {
    pub s: i64,
    pub a: f64,
    pub b: f64,
}

pub fn item_to_record(id: &str, model: &ItemModel) -> ItemRecord {
    match model {
        ItemModel::ThreePl(p) | ItemModel::ProbitThreePl(p) => ItemRecord {
            item: id.to_string(),
            family: model.family().to_string(),
            params: ItemParams::ThreePl {
                a: p.discrimination,
                b: p.difficulty,
                c: p.guessing,
            },
            s_min: None,
            s_max: None,
        },
        ItemModel::Golf(g) => {
            let steps = g
                .support()
                .filter(|&s| s != 0)
                .map(|s| {
                    let st = g.step(s).expect("support");
                    GolfStep {
                        s,
                        a: st.discrimination,
                        b: st.difficulty,
                    }
                })
                .collect();
            ItemRecord {
                item: id.to_string(),
                family: "golf".to_string(),
                params: ItemParams::Golf { steps },
                s_min: Some(g.s_min()),
                s_max: Some(g.s_max()),
            }
        }
    }
}

pub fn record_to_item(rec: &ItemRecord) -> Result<(String, ItemModel)> {
    let family = IrfFamily::parse(&rec.family)?;
    let model = match (&rec.params, family) {
        (ItemParams::ThreePl { a, b, c }, IrfFamily::ThreePl) => {
            ItemModel::ThreePl(ThreePl::new(*a, *b, *c)?)
        }
        (ItemParams::ThreePl { a, b, c }, IrfFamily::ProbitThreePl) => {
            if !(*b > 0.0 && *b < 1.0) {
                return Err(Error::InvalidItem(format!(
                    "item '{}': probit 3PL difficulty must lie in (0, 1), got {b}",
                    rec.item
                )));
            }
            ItemModel::ProbitThreePl(ThreePl::new(*a, *b, *c)?)
        }
        (ItemParams::Golf { steps }, IrfFamily::Golf) => {
            let mut below = Vec::new();
            let mut above = Vec::new();
            let mut sorted = steps.clone();
            sorted.sort_by_key(|s| s.s);
            for step in sorted.iter().filter(|s| s.s < 0).rev() {
                below.push(StepParams {
                    discrimination: step.a,
                    difficulty: step.b,
                });
            }
            for step in sorted.iter().filter(|s| s.s > 0) {
                above.push(StepParams {
                    discrimination: step.a,
                    difficulty: step.b,
                });
            }
            let golf = GolfItem::new(below, above)?;
            // contiguity check: every s in the declared range must be present
            let declared: Vec<i64> = sorted.iter().map(|s| s.s).collect();
            let expected: Vec<i64> = golf.support().filter(|&s| s != 0).collect();
            if declared != expected {
                return Err(Error::InvalidItem(format!(
                    "item '{}': steps {:?} are not contiguous around par",
                    rec.item, declared
                )));
            }
            if let (Some(lo), Some(hi)) = (rec.s_min, rec.s_max) {
                if lo != golf.s_min() || hi != golf.s_max() {
                    return Err(Error::InvalidItem(format!(
                        "item '{}': declared range [{lo}, {hi}] does not match steps",
                        rec.item
                    )));
                }
            }
            ItemModel::Golf(golf)
        }
        _ => {
            return Err(Error::InvalidItem(format!(
                "item '{}': parameters do not match family '{}'",
                rec.item, rec.family
            )))
        }
    };
    Ok((rec.item.clone(), model))
}

pub fn write_items(path: &Path, items: &[(String, ItemModel)]) -> Result<()> {
    let records: Vec<ItemRecord> = items
        .iter()
        .map(|(id, m)| item_to_record(id, m))
        .collect();
    write_json(path, &records)
}

pub fn read_items(path: &Path) -> Result<Vec<(String, ItemModel)>> {
    let records: Vec<ItemRecord> = read_json(path)?;
    records.iter().map(record_to_item).collect()
}

// ---- abilities.csv ----

pub const ABILITIES_HEADER: [&str; 5] = ["student", "time", "median", "lower70", "upper70"];

pub fn write_abilities(path: &Path, abilities: &[crate::em::AbilityEstimate]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(ABILITIES_HEADER)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    for a in abilities {
        for k in 0..a.grid_times.len() {
            w.write_record(&[
                a.student.clone(),
                format!("{}", a.grid_times[k]),
                format!("{}", a.median[k]),
                format!("{}", a.lower70[k]),
                format!("{}", a.upper70[k]),
            ])
            .map_err(|e| parse_err(path, 0, e.to_string()))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads back the per-student median curves (the estimates `evaluate`
/// consumes).
pub fn read_ability_medians(path: &Path) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ABILITIES_HEADER {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}'", ABILITIES_HEADER.join(",")),
        ));
    }
    let mut out: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| parse_err(path, line, e.to_string()))?;
        let student = row[0].to_string();
        let time: f64 = row[1]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad time '{}'", &row[1])))?;
        let median: f64 = row[2]
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad median '{}'", &row[2])))?;
        match out.last_mut() {
            Some((s, points)) if *s == student => points.push((time, median)),
            _ => out.push((student, vec![(time, median)])),
        }
    }
    Ok(out)
}

// ---- truth.json ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthBundle {
    pub grid: Vec<f64>,
    pub curves: Vec<TruthCurve>,
    pub items: Vec<ItemRecord>,
    pub generator: GeneratorInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthCurve {
    pub student: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub n_students: usize,
    pub m_items: usize,
    pub gen_bandwidth: f64,
    pub gen_amplitude: f64,
    pub grid_points: usize,
    pub seed: u64,
}

// ---- fit.json ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitJson {
    pub bandwidth: f64,
    pub jitter: f64,
    pub transform: String,
    pub converged: bool,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
    pub emission_times: Vec<f64>,
    pub factor_means: Vec<f64>,
    pub factor_variances: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bandwidth_selection: Option<CvJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvJson {
    pub k: usize,
    pub seed: u64,
    pub candidates: Vec<f64>,
    pub scores: Vec<f64>,
}

// ---- diagnostics.json ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsJson {
    pub family: String,
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub converged: bool,
    pub expected_loglik: Vec<f64>,
    pub bandwidths: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

// ---- generic JSON helpers ----

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn items_round_trip() {
        let dir = std::env::temp_dir().join("dynaesti_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("items.json");
        let items = vec![
            (
                "i1".to_string(),
                ItemModel::ProbitThreePl(ThreePl::new(1.2, 0.4, 0.1).unwrap()),
            ),
            (
                "hole_03".to_string(),
                ItemModel::Golf(
                    GolfItem::new(
                        vec![StepParams {
                            discrimination: 0.8,
                            difficulty: -0.5,
                        }],
                        vec![
                            StepParams {
                                discrimination: 1.1,
                                difficulty: 0.2,
                            },
                            StepParams {
                                discrimination: 2.0,
                                difficulty: 1.5,
                            },
                        ],
                    )
                    .unwrap(),
                ),
            ),
        ];
        write_items(&path, &items).unwrap();
        let back = read_items(&path).unwrap();
        assert_eq!(items.len(), back.len());
        for ((id_a, m_a), (id_b, m_b)) in items.iter().zip(&back) {
            assert_eq!(id_a, id_b);
            assert_eq!(m_a, m_b);
        }
    }

    #[test]
    fn responses_round_trip_and_header_check() {
        let dir = std::env::temp_dir().join("dynaesti_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("responses.csv");
        let records = vec![ResponseRecord {
            student: "s1".into(),
            item: "i1".into(),
            time: 0.25,
            response: -2,
        }];
        write_responses(&path, &records).unwrap();
        assert_eq!(read_responses(&path).unwrap(), records);

        let bad = dir.join("bad.csv");
        std::fs::write(&bad, "who,what,when,score\na,b,0.1,1\n").unwrap();
        assert!(matches!(read_responses(&bad), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn emission_specs_round_trip() {
        let dir = std::env::temp_dir().join("dynaesti_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("emissions.csv");
        let specs = vec![
            EmissionSpec::Bernoulli { time: 0.1, yes: true },
            EmissionSpec::Gaussian {
                time: 0.2,
                mean: -0.5,
                std: 0.3,
            },
            EmissionSpec::Irf {
                time: 0.3,
                family: IrfFamily::ProbitThreePl,
                item: "i7".into(),
                response: 1,
            },
        ];
        write_emissions(&path, &specs).unwrap();
        assert_eq!(read_emissions(&path).unwrap(), specs);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = std::env::temp_dir().join("dynaesti_fmt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("broken.csv");
        std::fs::write(&path, "time,kind,payload\n0.5,bernoulli,1\nnope,bernoulli,0\n").unwrap();
        match read_emissions(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
