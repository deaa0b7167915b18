use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, FieldBounds, Role, SceneSequence, Team};

#[derive(Serialize, Deserialize)]
struct SequenceRecord {
    domain: String,
    agents: Vec<AgentRecord>,
    bounds: FieldBounds,
    units: String,
}

#[derive(Serialize, Deserialize)]
struct AgentRecord {
    role: Role,
    team: Team,
    xy: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<u8>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(file))
}

/// Parses one scene per non-blank line. An empty input yields an empty
/// dataset in unit bounds.
pub fn read_jsonl(reader: impl Read) -> Result<Dataset, DataError> {
    let mut sequences = Vec::new();
    let mut header: Option<(FieldBounds, String)> = None;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SequenceRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse { line: line_no, msg: e.to_string() })?;
        let parse_err = |msg: String| DataError::Parse { line: line_no, msg };
        record.bounds.validate().map_err(|e| parse_err(e.to_string()))?;
        match &header {
            None => header = Some((record.bounds, record.units.clone())),
            Some((b, u)) if *b != record.bounds || *u != record.units => {
                return Err(parse_err(format!(
                    "bounds/units {:?} `{}` differ from the first record's {:?} `{}`",
                    record.bounds, record.units, b, u
                )))
            }
            Some(_) => {}
        }
        sequences.push(record_to_scene(record).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(match header {
        Some((bounds, units)) => Dataset::new(sequences, bounds, units),
        None => Dataset::new(sequences, FieldBounds::UNIT, super::NORMALIZED_UNITS),
    })
}

fn record_to_scene(record: SequenceRecord) -> Result<SceneSequence, DataError> {
    let steps = record.agents.first().map_or(0, |a| a.xy.len());
    let n = record.agents.len();
    let mut positions = Vec::with_capacity(n * steps * 2);
    let mut mask = Vec::with_capacity(n * steps);
    let mut roles = Vec::with_capacity(n);
    let mut teams = Vec::with_capacity(n);
    for (i, agent) in record.agents.into_iter().enumerate() {
        if agent.xy.len() != steps {
            return Err(DataError::Invalid(format!("agent {i} has {} steps, expected {steps}", agent.xy.len())));
        }
        roles.push(agent.role);
        teams.push(agent.team);
        positions.extend(agent.xy.iter().flatten());
        match agent.mask {
            Some(m) if m.len() != steps => {
                return Err(DataError::Invalid(format!("agent {i} mask has {} entries, expected {steps}", m.len())))
            }
            Some(m) => mask.extend(m),
            None => {
                log::warn!("agent {i} has no mask; treating all {steps} steps as observed");
                mask.extend(std::iter::repeat_n(1u8, steps));
            }
        }
    }
    SceneSequence::new(record.domain, roles, teams, positions, mask, steps)
}

pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_jsonl(dataset, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_jsonl(dataset: &Dataset, mut w: impl Write) -> std::io::Result<()> {
    for seq in &dataset.sequences {
        let t = seq.steps();
        let agents = (0..seq.n_agents())
            .map(|i| AgentRecord {
                role: seq.roles[i],
                team: seq.teams[i],
                xy: (0..t).map(|s| seq.xy(i, s)).collect(),
                mask: Some(seq.agent_mask(i).to_vec()),
            })
            .collect();
        let record = SequenceRecord { domain: seq.domain.clone(), agents, bounds: dataset.bounds, units: dataset.units.clone() };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(read_jsonl(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn missing_mask_defaults_to_observed() {
        let line = r#"{"domain":"soccer","agents":[{"role":"ball","team":"none","xy":[[1,2],[3,4]]},{"role":"player","team":"offense","xy":[[0,0],[1,1]]}],"bounds":{"x_min":0,"x_max":1050,"y_min":0,"y_max":680},"units":"pixels"}"#;
        let d = read_jsonl(line.as_bytes()).unwrap();
        assert_eq!(d.sequences[0].mask, vec![1; 4]);
        assert_eq!(d.sequences[0].xy(0, 1), [3.0, 4.0]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let good = r#"{"domain":"soccer","agents":[{"role":"ball","team":"none","xy":[[1,2]]}],"bounds":{"x_min":0,"x_max":1,"y_min":0,"y_max":1},"units":"u"}"#;
        let text = format!("{good}\n{{\"domain\": 3}}\n");
        match read_jsonl(text.as_bytes()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ragged_agents_are_rejected() {
        let line = r#"{"domain":"soccer","agents":[{"role":"ball","team":"none","xy":[[1,2],[3,4]]},{"role":"player","team":"offense","xy":[[0,0]]}],"bounds":{"x_min":0,"x_max":1,"y_min":0,"y_max":1},"units":"u"}"#;
        assert!(matches!(read_jsonl(line.as_bytes()), Err(DataError::Parse { line: 1, .. })));
    }
}
