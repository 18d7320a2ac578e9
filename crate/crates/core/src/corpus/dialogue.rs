use super::split::SplitManifest;
use super::tokenize::tokenize;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

/// Cell value marking an absent KB attribute.
pub const MISSING: &str = "-";

const RELEASED_SPLITS: [(&str, &str); 3] = [
    ("train", "kvret_train_public.json"),
    ("dev", "kvret_dev_public.json"),
    ("test", "kvret_test_public.json"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Schedule,
    Weather,
    Navigate,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Schedule, Domain::Weather, Domain::Navigate];

    pub fn from_intent(intent: &str) -> Option<Self> {
        match intent.trim().to_lowercase().as_str() {
            "schedule" | "scheduling" | "calendar" => Some(Domain::Schedule),
            "weather" => Some(Domain::Weather),
            "navigate" | "navigation" | "poi" => Some(Domain::Navigate),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Schedule => "schedule",
            Domain::Weather => "weather",
            Domain::Navigate => "navigate",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Driver,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub slots: BTreeMap<String, String>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: &str) -> Self {
        Self { speaker, tokens: tokenize(text), slots: BTreeMap::new() }
    }
}

/// A dialogue's private knowledge base as a table: every row has one cell per column.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawKb {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawKb {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Builds a table from JSON row objects. Columns come from `column_names`
    /// when given, otherwise from the union of row keys in sorted order.
    /// Absent cells become [`MISSING`]. Offending rows are all reported.
    pub fn from_json_rows(items: &Value, column_names: Option<&Value>) -> Result<Self, Vec<String>> {
        let rows = match items {
            Value::Null => return Ok(Self::default()),
            Value::Array(rows) => rows,
            other => return Err(vec![format!("kb items must be an array, got {}", json_kind(other))]),
        };
        let mut problems = Vec::new();
        let mut maps = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let Some(obj) = row.as_object() else {
                problems.push(format!("row {i}: expected an object, got {}", json_kind(row)));
                continue;
            };
            let mut cells = BTreeMap::new();
            for (k, v) in obj {
                match cell_text(v) {
                    Some(text) => {
                        cells.insert(k.clone(), text);
                    }
                    None => problems.push(format!("row {i}: column '{k}' has non-scalar value {}", json_kind(v))),
                }
            }
            maps.push(cells);
        }
        let mut columns: Vec<String> = match column_names.and_then(Value::as_array) {
            Some(names) => names.iter().filter_map(|n| n.as_str().map(str::to_string)).collect(),
            None => Vec::new(),
        };
        for m in &maps {
            for k in m.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
        if !problems.is_empty() {
            return Err(problems);
        }
        let rows = maps
            .into_iter()
            .map(|m| columns.iter().map(|c| m.get(c).cloned().unwrap_or_else(|| MISSING.to_string())).collect())
            .collect();
        Ok(Self { columns, rows })
    }

    pub fn to_json_rows(&self) -> Value {
        Value::Array(
            self.rows
                .iter()
                .map(|r| Value::Object(self.columns.iter().cloned().zip(r.iter().cloned().map(Value::String)).collect()))
                .collect(),
        )
    }
}

fn cell_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if s.trim().is_empty() => Some(MISSING.to_string()),
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Null => Some(MISSING.to_string()),
        _ => None,
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub domain: Domain,
    pub turns: Vec<Turn>,
    pub kb: RawKb,
}

impl Dialogue {
    /// Turns must alternate driver, assistant, driver, ...
    pub fn check_turn_order(&self) -> Result<(), String> {
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Driver } else { Speaker::Assistant };
            if t.speaker != expected {
                return Err(format!("turn {i} is spoken by {:?}, expected {:?}", t.speaker, expected));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordError {
    pub index: usize,
    pub id: String,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "record {} ({}): {}", self.index, self.id, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected a JSON array of dialogues")]
    NotAnArray { path: PathBuf },
}

#[derive(Debug, Default)]
pub struct LoadedCorpus {
    pub dialogues: Vec<Dialogue>,
    pub errors: Vec<RecordError>,
    /// Present when the corpus ships its own split assignment.
    pub manifest: Option<SplitManifest>,
}

/// Parses one JSON array of dialogue records. Invalid records are reported
/// individually and skipped.
pub fn parse_corpus(text: &str) -> Result<(Vec<Dialogue>, Vec<RecordError>), serde_json::Error> {
    if text.trim().is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let value: Value = serde_json::from_str(text)?;
    let records = match value {
        Value::Array(a) => a,
        _ => return Err(serde::de::Error::custom("expected a JSON array of dialogues")),
    };
    let mut dialogues = Vec::with_capacity(records.len());
    let mut errors = Vec::new();
    for (index, rec) in records.iter().enumerate() {
        let id = record_id(rec).unwrap_or_else(|| format!("record-{index}"));
        match parse_record(rec, id.clone()) {
            Ok(d) => dialogues.push(d),
            Err(message) => errors.push(RecordError { index, id, message }),
        }
    }
    Ok((dialogues, errors))
}

fn record_id(rec: &Value) -> Option<String> {
    rec.pointer("/scenario/uuid")
        .or_else(|| rec.get("id"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

fn parse_record(rec: &Value, id: String) -> Result<Dialogue, String> {
    let intent = rec.pointer("/scenario/task/intent").and_then(Value::as_str).ok_or("missing scenario.task.intent")?;
    let domain = Domain::from_intent(intent).ok_or_else(|| format!("unknown domain '{intent}'"))?;
    let kb = match rec.pointer("/scenario/kb") {
        None | Some(Value::Null) => RawKb::default(),
        Some(kb) => RawKb::from_json_rows(kb.get("items").unwrap_or(&Value::Null), kb.get("column_names"))
            .map_err(|p| format!("malformed kb: {}", p.join("; ")))?,
    };
    let turns_json = rec.get("dialogue").and_then(Value::as_array).ok_or("missing dialogue array")?;
    let mut turns = Vec::with_capacity(turns_json.len());
    for (i, t) in turns_json.iter().enumerate() {
        let speaker = match t.get("turn").and_then(Value::as_str) {
            Some("driver") => Speaker::Driver,
            Some("assistant") => Speaker::Assistant,
            other => return Err(format!("turn {i}: unknown speaker {other:?}")),
        };
        let data = t.get("data").ok_or_else(|| format!("turn {i}: missing data"))?;
        let utterance = data.get("utterance").and_then(Value::as_str).ok_or_else(|| format!("turn {i}: missing utterance"))?;
        let mut slots = BTreeMap::new();
        if let Some(obj) = data.get("slots").and_then(Value::as_object) {
            for (k, v) in obj {
                if let Some(text) = cell_text(v).filter(|s| s != MISSING) {
                    slots.insert(k.clone(), text);
                }
            }
        }
        turns.push(Turn { speaker, tokens: tokenize(utterance), slots });
    }
    let d = Dialogue { id, domain, turns, kb };
    d.check_turn_order()?;
    Ok(d)
}

fn read(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

fn parse_file(path: &Path) -> Result<(Vec<Dialogue>, Vec<RecordError>), CorpusError> {
    parse_corpus(&read(path)?).map_err(|source| CorpusError::Json { path: path.to_path_buf(), source })
}

fn read_manifest(path: &Path) -> Result<SplitManifest, CorpusError> {
    serde_json::from_str(&read(path)?).map_err(|source| CorpusError::Json { path: path.to_path_buf(), source })
}

/// Loads the corpus from a single JSON file or from a directory.
///
/// A directory holding the three released split files is read as one corpus
/// whose split manifest follows file membership. Otherwise a directory must
/// contain `corpus.json`. In both the file and `corpus.json` cases a sibling
/// `splits.json` manifest is honored when present.
pub fn load_corpus(path: &Path) -> Result<LoadedCorpus, CorpusError> {
    if path.is_dir() {
        if RELEASED_SPLITS.iter().all(|(_, f)| path.join(f).is_file()) {
            let mut out = LoadedCorpus::default();
            let mut manifest = SplitManifest::default();
            for (split, file) in RELEASED_SPLITS {
                let (dialogues, errors) = parse_file(&path.join(file))?;
                let offset = out.dialogues.len() + out.errors.len();
                let ids: Vec<String> = dialogues.iter().map(|d| d.id.clone()).collect();
                match split {
                    "train" => manifest.train = ids,
                    "dev" => manifest.dev = ids,
                    _ => manifest.test = ids,
                }
                out.errors.extend(errors.into_iter().map(|mut e| {
                    e.index += offset;
                    e
                }));
                out.dialogues.extend(dialogues);
            }
            out.manifest = Some(manifest);
            return Ok(out);
        }
        return load_corpus(&path.join("corpus.json"));
    }
    let (dialogues, errors) = parse_file(path)?;
    let manifest_path = path.with_file_name("splits.json");
    let manifest = if manifest_path.is_file() { Some(read_manifest(&manifest_path)?) } else { None };
    Ok(LoadedCorpus { dialogues, errors, manifest })
}
