//! `--grid key=a,b,c` sweep axes and their application to a config table.

use crate::config::ConfigError;

#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    /// Dotted path such as `algorithm.alpha`.
    pub key: Vec<String>,
    pub values: Vec<toml::Value>,
    /// Value spellings as given, used in variant names.
    pub labels: Vec<String>,
}

fn bad(message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: "grid".into(),
        message: message.into(),
    }
}

/// Values are read as TOML scalars; anything that is not one is a string.
fn parse_value(s: &str) -> toml::Value {
    match format!("v = {s}").parse::<toml::Table>() {
        Ok(mut t) => match t.remove("v") {
            Some(v @ (toml::Value::Integer(_) | toml::Value::Float(_) | toml::Value::Boolean(_))) => v,
            Some(v @ toml::Value::String(_)) => v,
            _ => toml::Value::String(s.to_string()),
        },
        Err(_) => toml::Value::String(s.to_string()),
    }
}

pub fn parse_axis(spec: &str) -> Result<GridAxis, ConfigError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| bad(format!("`{spec}` is not of the form key=a,b,c")))?;
    let key: Vec<String> = key.trim().split('.').map(|s| s.trim().to_string()).collect();
    if key.iter().any(|k| k.is_empty()) {
        return Err(bad(format!("empty key segment in `{spec}`")));
    }
    let labels: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if labels.iter().any(|l| l.is_empty()) {
        return Err(bad(format!("empty value in `{spec}`")));
    }
    let values = labels.iter().map(|l| parse_value(l)).collect();
    Ok(GridAxis { key, values, labels })
}

/// Sets `key` to `value`, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, key: &[String], value: toml::Value) -> Result<(), ConfigError> {
    let (last, parents) = key.split_last().ok_or_else(|| bad("empty key"))?;
    let mut cur = table;
    for part in parents {
        let entry = cur
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| bad(format!("`{part}` is not a table")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// One grid point: its label and the (key, value) overrides it applies.
pub type GridPoint = (String, Vec<(Vec<String>, toml::Value)>);

/// Cartesian product of the axes, as (label, assignments) pairs in
/// row-major order with the last axis varying fastest.
pub fn expand(axes: &[GridAxis]) -> Vec<GridPoint> {
    let mut out: Vec<GridPoint> = vec![(String::new(), Vec::new())];
    for axis in axes {
        let mut next = Vec::with_capacity(out.len() * axis.values.len());
        for (label, assigns) in &out {
            for (v, l) in axis.values.iter().zip(&axis.labels) {
                let part = format!("{}={}", axis.key.join("."), l);
                let label = if label.is_empty() { part } else { format!("{label}_{part}") };
                let mut a = assigns.clone();
                a.push((axis.key.clone(), v.clone()));
                next.push((label, a));
            }
        }
        out = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_numbers_bools_and_strings() {
        let a = parse_axis("algorithm.alpha=0.1, 1e-3,2").unwrap();
        assert_eq!(a.key, vec!["algorithm", "alpha"]);
        assert_eq!(
            a.values,
            vec![toml::Value::Float(0.1), toml::Value::Float(1e-3), toml::Value::Integer(2)]
        );
        let b = parse_axis("algorithm.name=ssgd,bsa").unwrap();
        assert_eq!(b.values[1], toml::Value::String("bsa".into()));
        let c = parse_axis("deterministic=true").unwrap();
        assert_eq!(c.values, vec![toml::Value::Boolean(true)]);
    }

    #[test]
    fn rejects_malformed_axes() {
        for s in ["alpha", "=1", "a..b=1", "a=1,,2", "a="] {
            assert!(parse_axis(s).is_err(), "{s}");
        }
    }

    #[test]
    fn expansion_is_a_product() {
        let axes = [parse_axis("a.x=1,2").unwrap(), parse_axis("b=p,q,r").unwrap()];
        let e = expand(&axes);
        assert_eq!(e.len(), 6);
        assert_eq!(e[0].0, "a.x=1_b=p");
        assert_eq!(e[5].0, "a.x=2_b=r");
    }

    #[test]
    fn set_path_creates_and_refuses_scalars() {
        let mut t = toml::Table::new();
        set_path(&mut t, &["algorithm".into(), "J".into()], toml::Value::Integer(7)).unwrap();
        assert_eq!(t["algorithm"]["J"].as_integer(), Some(7));
        t.insert("seeds".into(), toml::Value::Integer(1));
        assert!(set_path(&mut t, &["seeds".into(), "x".into()], toml::Value::Integer(1)).is_err());
    }

    proptest! {
        #[test]
        fn axis_parser_never_panics(s in "\\PC{0,60}") {
            let _ = parse_axis(&s);
        }
    }
}
