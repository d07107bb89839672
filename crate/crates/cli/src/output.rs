//! JSON or plain-table rendering of command results.

use serde_json::Value;

/// Keys whose values are ratios shown as percentages in tables.
const PERCENT_KEYS: &[&str] = &[
    "erroneous_ratio",
    "modified_ratio",
    "precision",
    "recall",
    "f0_5",
    "gleu",
    "essential",
    "optional",
    "erroneous",
    "not_assessable",
    "wrong_annotations_lower_bound",
    "missing",
    "replacement",
    "unnecessary",
];

fn cell(key: &str, v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() && PERCENT_KEYS.contains(&key) => format!("{:.2}%", n.as_f64().unwrap_or(0.0) * 100.0),
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(0.0);
            if x != 0.0 && x.abs() < 1e-3 {
                format!("{x:e}")
            } else {
                format!("{x}")
            }
        }
        Value::String(s) => s.clone(),
        Value::Null => "-".to_owned(),
        other => other.to_string(),
    }
}

fn table(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows.first().map_or(0, Vec::len))
        .map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.chars().count())).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn object_rows(prefix: &str, map: &serde_json::Map<String, Value>, rows: &mut Vec<Vec<String>>) {
    for (k, v) in map {
        let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(inner) => object_rows(&name, inner, rows),
            _ => rows.push(vec![name, cell(k, v)]),
        }
    }
}

/// Objects become key/value tables; arrays of objects become column tables.
pub fn pretty(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut rows = Vec::new();
            object_rows("", map, &mut rows);
            table(&rows)
        }
        Value::Array(items) if items.iter().all(Value::is_object) && !items.is_empty() => {
            let header: Vec<String> = items[0].as_object().into_iter().flat_map(|m| m.keys().cloned()).collect();
            let mut rows = vec![header.clone()];
            for item in items {
                rows.push(header.iter().map(|k| cell(k, &item[k.as_str()])).collect());
            }
            table(&rows)
        }
        Value::Array(items) => items.iter().map(|v| cell("", v) + "\n").collect(),
        other => cell("", other) + "\n",
    }
}

pub fn render(value: &Value, pretty_tables: bool) -> String {
    if pretty_tables {
        pretty(value)
    } else {
        let mut s = serde_json::to_string(value).expect("json value serializes");
        s.push('\n');
        s
    }
}
