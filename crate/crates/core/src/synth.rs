//! Synthetic dialogues in the released corpus JSON layout.
//!
//! Used for tests, demos and benchmarks when the real corpus is not at hand.
//! [`generate`] produces short multi-turn dialogues in all three domains;
//! [`retrieval_task`] produces single-turn questions whose answer can only be
//! found in the dialogue's KB.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

pub const EVENTS: [&str; 16] = [
    "dinner",
    "meeting",
    "doctor appointment",
    "dentist appointment",
    "tennis activity",
    "yoga activity",
    "swimming activity",
    "football activity",
    "conference",
    "lab appointment",
    "optometrist appointment",
    "medicine",
    "taking medicine",
    "piano lesson",
    "staff meeting",
    "lunch",
];
const PARTIES: [&str; 8] = ["sister", "brother", "boss", "Ana", "Tom", "father", "mother", "management"];
const ROOMS: [&str; 5] = ["conference room 50", "conference room 100", "room 102", "the main hall", "conference room 102"];
const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const DATES: [&str; 6] = ["the 1st", "the 5th", "the 8th", "the 13th", "the 20th", "the 28th"];
const LOCATIONS: [&str; 8] = ["danville", "san francisco", "boston", "seattle", "fresno", "alhambra", "carson", "durham"];
const CONDITIONS: [&str; 6] = ["rain", "snow", "clear skies", "overcast", "foggy", "humid"];
const FORECAST_DAYS: [&str; 4] = ["monday", "tuesday", "wednesday", "thursday"];
const POIS: [(&str, &str, &str); 8] = [
    ("Pizza My Heart", "pizza restaurant", "528 Anton Ct"),
    ("Chevron", "gas station", "783 Arcadia Pl"),
    ("Stanford Express Care", "hospital", "214 El Camino Real"),
    ("Palo Alto Garage R", "parking garage", "481 Amaranta Ave"),
    ("Valero", "gas station", "200 Alester Ave"),
    ("Teavana", "coffee or tea place", "145 Amherst St"),
    ("Panda Express", "chinese restaurant", "842 Arrowhead Way"),
    ("Civic Center Garage", "parking garage", "270 Altaire Walk"),
];
const TRAFFIC: [&str; 3] = ["no traffic", "moderate traffic", "heavy traffic"];

fn time(rng: &mut impl Rng) -> String {
    format!("{}{}", rng.random_range(1..=11), if rng.random_bool(0.5) { "am" } else { "pm" })
}

fn record(id: String, intent: &str, columns: &[&str], rows: Vec<Vec<String>>, turns: &[(&str, String)]) -> Value {
    let items: Vec<Value> = rows
        .into_iter()
        .map(|r| Value::Object(columns.iter().zip(r).map(|(c, v)| (c.to_string(), Value::String(v))).collect::<Map<_, _>>()))
        .collect();
    json!({
        "scenario": {
            "uuid": id,
            "task": {"intent": intent},
            "kb": {"column_names": columns, "items": items}
        },
        "dialogue": turns.iter().map(|(who, text)| json!({"turn": who, "data": {"utterance": text}})).collect::<Vec<_>>()
    })
}

fn schedule(id: String, rng: &mut impl Rng) -> Value {
    let n = rng.random_range(2..=4);
    let events: Vec<&str> = EVENTS.choose_multiple(rng, n).copied().collect();
    let rows: Vec<Vec<String>> = events
        .iter()
        .map(|e| {
            vec![
                e.to_string(),
                time(rng),
                DAYS.choose(rng).unwrap().to_string(),
                PARTIES.choose(rng).unwrap().to_string(),
                ROOMS.choose(rng).unwrap().to_string(),
            ]
        })
        .collect();
    let r = &rows[rng.random_range(0..rows.len())];
    let turns = [
        ("driver", format!("what time is my {}?", r[0])),
        ("assistant", format!("your {} is at {}.", r[0], r[1])),
        ("driver", "who is coming?".to_string()),
        ("assistant", format!("your {} is attending on {}.", r[3].to_lowercase(), r[2])),
    ];
    record(id, "schedule", &["event", "time", "date", "party", "room"], rows, &turns)
}

fn weather(id: String, rng: &mut impl Rng) -> Value {
    let n = rng.random_range(2..=3);
    let locs: Vec<&str> = LOCATIONS.choose_multiple(rng, n).copied().collect();
    let mut columns = vec!["location"];
    columns.extend(FORECAST_DAYS);
    let rows: Vec<Vec<String>> = locs
        .iter()
        .map(|l| {
            let mut row = vec![l.to_string()];
            for _ in FORECAST_DAYS {
                let low = rng.random_range(20..70);
                row.push(format!("{}, low of {}F, high of {}F", CONDITIONS.choose(rng).unwrap(), low, low + rng.random_range(5..25)));
            }
            row
        })
        .collect();
    let ri = rng.random_range(0..rows.len());
    let di = rng.random_range(0..FORECAST_DAYS.len());
    let cell = &rows[ri][di + 1];
    let cond = cell.split(',').next().unwrap();
    let high = cell.rsplit("high of ").next().unwrap();
    let turns = [
        ("driver", format!("what is the weather in {} on {}?", rows[ri][0], FORECAST_DAYS[di])),
        ("assistant", format!("it will be {} with a high of {} on {}.", cond, high, FORECAST_DAYS[di])),
    ];
    record(id, "weather", &columns, rows, &turns)
}

fn navigate(id: String, rng: &mut impl Rng) -> Value {
    let n = rng.random_range(2..=4);
    let pois: Vec<&(&str, &str, &str)> = POIS.choose_multiple(rng, n).collect();
    let rows: Vec<Vec<String>> = pois
        .iter()
        .map(|(name, kind, addr)| {
            vec![
                name.to_string(),
                kind.to_string(),
                addr.to_string(),
                format!("{} miles", rng.random_range(1..9)),
                TRAFFIC.choose(rng).unwrap().to_string(),
            ]
        })
        .collect();
    let r = &rows[rng.random_range(0..rows.len())];
    let turns = [
        ("driver", format!("give me directions to {}.", r[0])),
        ("assistant", format!("{} is {} away at {}.", r[0], r[3], r[2])),
        ("driver", "is there traffic?".to_string()),
        ("assistant", format!("there is {} on the way.", r[4])),
    ];
    record(id, "navigate", &["poi", "poi_type", "address", "distance", "traffic_info"], rows, &turns)
}

/// `n` dialogues cycling through the schedule, weather and navigate domains.
pub fn generate(n: usize, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let id = format!("synth-{i:05}");
            match i % 3 {
                0 => schedule(id, &mut rng),
                1 => weather(id, &mut rng),
                _ => navigate(id, &mut rng),
            }
        })
        .collect()
}

const QUESTIONS: [(&str, &[&str], &str); 4] = [
    ("time", &["when is my next appointment?", "what time is my next thing?", "what time do i need to be there?"], "your next appointment is at {}."),
    ("date", &["what day is my next appointment?", "which day is it on?"], "it is on {}."),
    ("party", &["who is my next appointment with?", "who will be there?"], "you will see your {}."),
    ("room", &["where is my next appointment?", "which room is it in?"], "it is in {}."),
];

/// Single-turn schedule dialogues over one-row KBs. The question never names
/// the event, so the answer is only recoverable by looking it up in the KB.
pub fn retrieval_task(n: usize, seed: u64) -> Vec<Value> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let row = vec![
            EVENTS.choose(&mut rng).unwrap().to_string(),
            time(&mut rng),
            DATES.choose(&mut rng).unwrap().to_string(),
            PARTIES.choose(&mut rng).unwrap().to_lowercase(),
            ROOMS.choose(&mut rng).unwrap().to_string(),
        ];
        let (qi, (_, questions, answer)) = QUESTIONS.iter().enumerate().collect::<Vec<_>>().choose(&mut rng).map(|(i, q)| (*i, *q)).unwrap();
        let question = questions.choose(&mut rng).unwrap().to_string();
        let turns = [("driver", question), ("assistant", answer.replace("{}", &row[qi + 1]))];
        out.push(record(format!("retrieval-{i:05}"), "schedule", &["event", "time", "date", "party", "room"], vec![row], &turns));
    }
    out.shuffle(&mut rng);
    out
}

pub fn to_json(records: &[Value]) -> String {
    serde_json::to_string_pretty(records).expect("JSON values serialize")
}
